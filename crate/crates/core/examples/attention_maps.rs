//! Overlays each head's class attention (and the head mean) of an encoder on
//! a synthetic garment. Pass a checkpoint to inspect a trained teacher.
//!
//! ```text
//! cargo run --release --example attention_maps -- [encoder.safetensors] [out_dir]
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use vton::augment::{normalize, AugmentPolicy};
use vton::cli::attention_overlay;
use vton::data::SyntheticGenerator;
use vton::vit::{ViT, ViTConfig};

fn main() -> vton::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let vit = match args.first().filter(|a| a.ends_with(".safetensors")) {
        Some(path) => ViT::load(Path::new(path))?,
        None => ViT::new(ViTConfig::default())?,
    };
    let out = PathBuf::from(args.get(1).map_or("out/attention", String::as_str));
    fs::create_dir_all(&out).map_err(|e| vton::Error::io(&out, e))?;

    let garment = SyntheticGenerator::new(vit.config.image_size, 3).generate(0).garment;
    let policy = AugmentPolicy::default();
    let view = normalize(&garment, &policy.mean, &policy.std);
    for layer in 0..vit.config.depth {
        let map = vit.class_attention(&view, layer)?;
        for h in 0..map.num_heads() {
            let path = out.join(format!("layer{layer}_head{h}.png"));
            attention_overlay(&garment, map.head(h), map.grid, vit.config.patch_size).save_png(&path)?;
        }
        let mean = map.mean();
        let peak = mean.iter().cloned().fold(0.0, f64::max);
        println!("layer {layer}: peak mean attention {peak:.3} over {} patches", mean.len());
    }
    Ok(())
}
