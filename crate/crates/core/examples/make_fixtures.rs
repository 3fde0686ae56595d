//! Regenerates the bundled planted-patch fixtures.
//!
//! Usage: cargo run -p relprop-core --example make_fixtures -- <out_dir>

use std::path::PathBuf;

use relprop::fixtures::{planted_patch_model, write_planted_patch_dataset};
use relprop::save_model;

const SAMPLES: usize = 16;
const SEED: u64 = 2024;

fn main() -> relprop::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("fixtures/planted_patch"));
    save_model(&planted_patch_model(), out.join("model"))?;
    write_planted_patch_dataset(&out.join("data"), SAMPLES, SEED)?;
    println!("wrote {}", out.display());
    Ok(())
}
