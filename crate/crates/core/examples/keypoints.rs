//! Thresholds class attention, clusters the surviving patches into keypoints
//! and marks the local crop boxes they induce.
//!
//! ```text
//! cargo run --release --example keypoints -- [encoder.safetensors] [out_dir]
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vton::augment::AugmentPolicy;
use vton::data::SyntheticGenerator;
use vton::keypoints::{grid_to_pixel, keypoint_crop_boxes, KeypointCropShape};
use vton::ssl::{image_keypoints, DistillConfig};
use vton::vit::{ViT, ViTConfig};

fn main() -> vton::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let vit = match args.first().filter(|a| a.ends_with(".safetensors")) {
        Some(path) => ViT::load(Path::new(path))?,
        None => ViT::new(ViTConfig::default())?,
    };
    let out = PathBuf::from(args.get(1).map_or("out/keypoints", String::as_str));
    fs::create_dir_all(&out).map_err(|e| vton::Error::io(&out, e))?;

    let garment = SyntheticGenerator::new(vit.config.image_size, 5).generate(0).garment;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let keys = image_keypoints(&vit, &garment, &AugmentPolicy::default(), &DistillConfig::default(), &mut rng)?;
    println!("{} keypoints (reduced: {}), weighted SSE {:.3}", keys.k, keys.reduced, keys.sse);

    let mut marked = garment.clone();
    let boxes = keypoint_crop_boxes(&keys, vit.config.patch_size, KeypointCropShape::default(), garment.dims(), &mut rng);
    for (c, b) in keys.crop_centers().into_iter().zip(&boxes) {
        let (x, y) = grid_to_pixel(c, vit.config.patch_size);
        println!("  centre ({x:5.1}, {y:5.1}) px, crop {:.0}x{:.0} at ({:.0}, {:.0})", b.width, b.height, b.left, b.top);
        let (l, t, w, h) = b.pixel_rect();
        for xx in l..l + w {
            marked.pixel_mut(t, xx).copy_from_slice(&[1.0, 0.0, 0.0]);
            marked.pixel_mut(t + h - 1, xx).copy_from_slice(&[1.0, 0.0, 0.0]);
        }
        for yy in t..t + h {
            marked.pixel_mut(yy, l).copy_from_slice(&[1.0, 0.0, 0.0]);
            marked.pixel_mut(yy, l + w - 1).copy_from_slice(&[1.0, 0.0, 0.0]);
        }
    }
    marked.save_png(&out.join("crops.png"))?;
    Ok(())
}
