//! Noises the latent of a person image along the linear schedule and decodes
//! snapshots, printing the signal fraction at each.
//!
//! ```text
//! cargo run --release --example forward_diffusion -- [out_dir]
//! ```

use std::fs;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use vton::data::SyntheticGenerator;
use vton::diffusion::{build_schedule, forward_diffuse, from_latent, to_latent, ScheduleKind};
use vton::image::Image;

fn main() -> vton::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "out/forward".into()));
    fs::create_dir_all(&out).map_err(|e| vton::Error::io(&out, e))?;
    let person = SyntheticGenerator::new((64, 48), 1).generate(0).person;
    let schedule = build_schedule(1000, 1e-4, 0.02, ScheduleKind::Linear)?;
    let z0 = to_latent(&person)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let eps = Image::from_fn(z0.height(), z0.width(), z0.channels(), |_, _, _| StandardNormal.sample(&mut rng));
    for t in [1, 50, 100, 250, 500, 750, 1000] {
        let zt = forward_diffuse(&z0, t, &eps, &schedule)?;
        let mut shown = from_latent(&zt);
        shown.clamp01();
        shown.save_png(&out.join(format!("t{t:04}.png")))?;
        println!("t = {t:4}: sqrt(alpha_bar) = {:.4}", schedule.alpha_bar(t).sqrt());
    }
    Ok(())
}
