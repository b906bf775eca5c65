//! Write a phantom dataset (VOL1 files plus manifest) and print its report.
//!
//! ```text
//! cargo run --release --example generate_phantom -- [out_dir] [seed]
//! ```

use std::path::PathBuf;

use adasmooth::manifest::{Dataset, Split};
use adasmooth::phantom::{generate, PhantomSpec};

fn main() -> adasmooth::Result<()> {
    let mut args = std::env::args().skip(1);
    let out: PathBuf = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("adasmooth_phantom"));
    let seed: u64 = args.next().map(|s| s.parse().expect("seed")).unwrap_or(0);

    let spec = PhantomSpec::default();
    let phantom = generate(&spec, seed)?;
    std::fs::create_dir_all(&out).expect("create output directory");
    phantom.dataset.save(&out)?;

    let reloaded = Dataset::load_dir(&out)?;
    println!("{} volumes in {}", reloaded.samples.len(), out.display());
    for split in [Split::Train, Split::Validation, Split::Test] {
        println!("  {split}: {} volumes", reloaded.split(split).len());
    }
    println!("noise levels {:?}", reloaded.noise_levels());
    println!("class centers {:?}", spec.class_centers());
    println!("oracle accuracy (noiseless) {:.3}", phantom.report.oracle_accuracy);
    for (noise, snr) in &phantom.report.snr {
        println!("noise {noise}: amplitude / sigma {snr:.3}");
    }
    Ok(())
}
