//! Renders two global and several local augmented views of one synthetic
//! garment, de-normalized back to displayable PNGs.
//!
//! ```text
//! cargo run --release --example augment_views -- [out_dir] [seed]
//! ```

use std::fs;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vton::augment::{augment_view, denormalize, sample_crop_box, AugmentPolicy, ASPECT_RANGE, GLOBAL_SCALE, LOCAL_SCALE};
use vton::data::SyntheticGenerator;

fn main() -> vton::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let out = PathBuf::from(args.first().map_or("out/augment", String::as_str));
    let seed = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    fs::create_dir_all(&out).map_err(|e| vton::Error::io(&out, e))?;

    let garment = SyntheticGenerator::new((64, 48), seed).generate(0).garment;
    garment.save_png(&out.join("source.png"))?;
    let policy = AugmentPolicy::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let views = [("global", GLOBAL_SCALE, (64, 48), 2), ("local", LOCAL_SCALE, (32, 32), 6)];
    for (kind, scale, size, count) in views {
        for i in 0..count {
            let crop = sample_crop_box(&mut rng, scale, ASPECT_RANGE, garment.dims())?;
            let view = augment_view(&garment, &crop.crop, size, &policy, &mut rng);
            let mut shown = denormalize(&view, &policy.mean, &policy.std);
            shown.clamp01();
            shown.save_png(&out.join(format!("{kind}_{i}.png")))?;
            println!("{kind} {i}: area {:.3} aspect {:.2}", crop.crop.area_ratio(), crop.crop.aspect());
        }
    }
    Ok(())
}
