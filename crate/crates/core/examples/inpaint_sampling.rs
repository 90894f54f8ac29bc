//! Trains a small latent denoiser on synthetic pairs for a few hundred steps,
//! then samples held-out try-ons with DDIM and PLMS and compares SSIM against
//! the warped coarse composite.
//!
//! ```text
//! cargo run --release --example inpaint_sampling -- [epochs] [out_dir]
//! ```

use std::fs;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vton::augment::{normalize, AugmentPolicy};
use vton::data::SyntheticGenerator;
use vton::diffusion::{
    assemble_coarse, build_schedule, sample, train_denoiser, Denoiser, DenoiserConfig, InpaintSample,
    InpaintTrainConfig, SampleInputs, SamplerMethod, ScheduleKind, TrainExample,
};
use vton::metrics::{ssim, SsimParams};
use vton::vit::{ViT, ViTConfig};

fn main() -> vton::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let epochs = args.first().and_then(|s| s.parse().ok()).unwrap_or(300);
    let out = PathBuf::from(args.get(1).map_or("out/inpaint", String::as_str));
    fs::create_dir_all(&out).map_err(|e| vton::Error::io(&out, e))?;

    let generator = SyntheticGenerator::new((64, 48), 0);
    let encoder = ViT::new(ViTConfig::default())?;
    let policy = AugmentPolicy::default();
    let mut samples: Vec<(InpaintSample, vton::tensor::Matrix)> = Vec::new();
    for i in 0..48 {
        let p = generator.generate(i);
        let cond = encoder.forward(&normalize(&p.garment, &policy.mean, &policy.std))?.condition.tokens;
        samples.push((assemble_coarse(&p.person, &p.garment, &p.mask, &p.flow)?, cond));
    }
    let (train, test) = samples.split_at(40);
    let examples = train.iter().map(|(s, c)| TrainExample::new(s, c.clone())).collect::<vton::Result<Vec<_>>>()?;

    let schedule = build_schedule(1000, 1e-4, 0.02, ScheduleKind::Linear)?;
    let mut denoiser = Denoiser::new(DenoiserConfig::default())?;
    let config = InpaintTrainConfig { epochs, ..InpaintTrainConfig::default() };
    let log = train_denoiser(&mut denoiser, &examples, &schedule, &config, |_| Ok(()))?;
    println!("trained {} steps, final loss {:.4}", log.len(), log.last().map_or(f64::NAN, |e| e.loss));

    let params = SsimParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for method in [SamplerMethod::Ddim, SamplerMethod::Plms] {
        let (mut gen, mut coarse) = (0.0, 0.0);
        for (i, (s, cond)) in test.iter().enumerate() {
            let inputs = SampleInputs { person: s.person.clone(), mask: s.mask.clone(), coarse: s.coarse.clone(), cond: cond.clone() };
            let (image, _) = sample(&denoiser, &inputs, &schedule, 50, method, rand::Rng::random(&mut rng))?;
            gen += ssim(&image, &s.person, &params)? / test.len() as f64;
            coarse += ssim(&s.coarse, &s.person, &params)? / test.len() as f64;
            image.save_png(&out.join(format!("{method}_{i}.png")))?;
        }
        println!("{method}: SSIM {gen:.4} (coarse composite {coarse:.4})");
    }
    Ok(())
}
