//! Compares the coarse warp composite with the best any denoiser could do
//! through the fixed latent codec: the ground truth encoded, decoded and
//! composited back into the person.
//!
//! Usage: `cargo run --release --example codec_ceiling -- [pairs] [seed]`

use vton::data::SyntheticGenerator;
use vton::diffusion::{assemble_coarse, composite, from_latent, to_latent};
use vton::metrics::{mean_std, ssim, SsimParams};

fn main() -> vton::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let pairs: usize = args.first().and_then(|s| s.parse().ok()).unwrap_or(20);
    let seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let generator = SyntheticGenerator::new((64, 48), seed);
    let params = SsimParams::default();
    let (mut coarse_scores, mut ceiling_scores) = (Vec::new(), Vec::new());
    for i in 0..pairs {
        let pair = generator.generate(i);
        let sample = assemble_coarse(&pair.person, &pair.garment, &pair.mask, &pair.flow)?;
        let mut roundtrip = from_latent(&to_latent(&pair.person)?);
        roundtrip.clamp01();
        let ceiling = composite(&pair.person, &roundtrip, &pair.mask)?;
        coarse_scores.push(ssim(&sample.coarse, &pair.person, &params)?);
        ceiling_scores.push(ssim(&ceiling, &pair.person, &params)?);
    }
    let (cm, cs) = mean_std(&coarse_scores);
    let (em, es) = mean_std(&ceiling_scores);
    println!("coarse composite SSIM  {cm:.4} ± {cs:.4}");
    println!("codec ceiling SSIM     {em:.4} ± {es:.4}");
    Ok(())
}
