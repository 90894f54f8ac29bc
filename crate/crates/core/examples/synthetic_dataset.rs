//! Writes a small synthetic paired dataset (garment, person, mask, flow and
//! part annotations) and prints its split sizes.
//!
//! ```text
//! cargo run --release --example synthetic_dataset -- [out_dir] [pairs]
//! ```

use std::path::PathBuf;

use vton::data::{write_dataset, Split};

fn main() -> vton::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let out = PathBuf::from(args.first().map_or("out/synthetic", String::as_str));
    let pairs = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(12);
    let index = write_dataset(&out, pairs, (64, 48), 0, 0.25)?;
    let n_test = index.split(Split::Test).count();
    println!("{} pairs in {} ({} train, {n_test} test)", index.records.len(), out.display(), index.records.len() - n_test);
    Ok(())
}
