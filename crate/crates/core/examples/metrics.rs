//! SSIM under increasing noise and the Fréchet embedding distance between
//! encoder embeddings of clean and noisy garments.
//!
//! ```text
//! cargo run --release --example metrics
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vton::data::SyntheticGenerator;
use vton::image::Image;
use vton::metrics::{embed_stats, frechet_embed_distance, ssim, SsimParams};
use vton::vit::{ViT, ViTConfig};

fn noisy(img: &Image, level: f64, rng: &mut ChaCha8Rng) -> Image {
    let mut out = img.clone();
    for v in out.data_mut() {
        *v = (*v + level * (rng.random::<f64>() - 0.5)).clamp(0.0, 1.0);
    }
    out
}

fn main() -> vton::Result<()> {
    let generator = SyntheticGenerator::new((64, 48), 2);
    let clean: Vec<Image> = (0..40).map(|i| generator.generate(i).garment).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let params = SsimParams::default();
    let encoder = ViT::new(ViTConfig::default())?;
    let reference = embed_stats(&encoder, &clean)?;
    println!("embedding dim {}, rank deficient: {}", reference.stats.dim(), reference.rank_deficient);
    for level in [0.0, 0.1, 0.3, 0.6] {
        let degraded: Vec<Image> = clean.iter().map(|c| noisy(c, level, &mut rng)).collect();
        let s = ssim(&clean[0], &degraded[0], &params)?;
        let fd = frechet_embed_distance(&reference.stats, &embed_stats(&encoder, &degraded)?.stats)?;
        println!("noise {level:.1}: SSIM {s:.4}, Fréchet embedding distance {fd:.4}");
    }
    Ok(())
}
