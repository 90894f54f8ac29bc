//! Self-distillation with random versus keypoint local crops on synthetic
//! garments, reporting how much of the teacher's attention lands on the
//! collar, sleeves and glyphs of held-out garments.
//!
//! ```text
//! cargo run --release --example ssl_crop_modes -- [train] [test] [epochs] [patch] [lr] [ema] [warmup] [embed] [batch] [seed]
//! ```

use std::time::Instant;

use vton::augment::AugmentPolicy;
use vton::data::SyntheticGenerator;
use vton::ssl::{attention_concentration, ssl_train, CropMode, DistillConfig, SslSample, TrainOptions};
use vton::vit::{ViT, ViTConfig};

fn main() -> vton::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: f64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let (n_train, n_test) = (arg(0, 200.0) as usize, arg(1, 50.0) as usize);
    let epochs = arg(2, 5.0) as usize;
    let patch = arg(3, 16.0) as usize;
    let lr = arg(4, 5e-4);
    let ema_start = arg(5, 0.996);
    let warmup = arg(6, 1.0) as usize;
    let embed = arg(7, 128.0) as usize;
    let batch = arg(8, 8.0) as usize;
    let seed = arg(9, 0.0) as u64;

    let generator = SyntheticGenerator::new((64, 48), 7 + seed);
    let samples: Vec<SslSample> = (0..n_train + n_test)
        .map(|i| {
            let p = generator.generate(i);
            SslSample {
                image: p.garment,
                regions: p.annotation.boxes(),
            }
        })
        .collect();
    let (train, held_out) = samples.split_at(n_train);
    let images: Vec<_> = train.iter().map(|s| s.image.clone()).collect();

    let config = ViTConfig {
        patch_size: patch,
        embed_dim: embed,
        seed,
        ..ViTConfig::default()
    };
    let init = ViT::new(config)?;
    let policy = AugmentPolicy::default();
    let distill = DistillConfig {
        learning_rate: lr,
        epochs,
        ema_start,
        warmup_epochs: warmup,
        batch_size: batch,
        seed,
        ..DistillConfig::default()
    };
    let base = attention_concentration(&init, held_out, &policy, distill.mass_fraction, None)?;
    println!("untrained: attention in part boxes {base:.4}");
    for mode in [CropMode::Random, CropMode::Keypoint] {
        let start = Instant::now();
        let opts = TrainOptions {
            crop_mode: Some(mode),
            diagnostics: held_out.to_vec(),
            ..TrainOptions::default()
        };
        let run = ssl_train(&init, &images, &distill, &policy, &opts)?;
        let score = attention_concentration(&run.teacher.vit, held_out, &policy, distill.mass_fraction, None)?;
        println!(
            "{mode:>8}: attention in part boxes {score:.4}  per-epoch {:?}  losses {:?}  ({:.0?})",
            run.log.attention_trace().iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>(),
            run.log.epoch_losses().iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>(),
            start.elapsed()
        );
    }
    Ok(())
}
