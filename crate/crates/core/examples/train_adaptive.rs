//! Train the adaptive model on a generated phantom with all noise levels
//! mixed, then compare it with fixed-width baselines on the test subject.
//!
//! ```text
//! cargo run --release --example train_adaptive -- [seed] [learning_rate] [amplitude] [volumes_per_class]
//! ```

use adasmooth::filter::fwhm_mm_to_sigma;
use adasmooth::manifest::Split;
use adasmooth::phantom::{generate, PhantomSpec};
use adasmooth::trainer::{evaluate, train, TrainConfig};

fn main() -> adasmooth::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map(|s| s.parse().expect("seed")).unwrap_or(1);
    let lr: f64 = args.next().map(|s| s.parse().expect("learning rate")).unwrap_or(0.1);
    let amplitude: f64 = args.next().map(|s| s.parse().expect("amplitude")).unwrap_or(0.15);
    let per_class: usize = args.next().map(|s| s.parse().expect("volumes per class")).unwrap_or(20);

    let spec = PhantomSpec {
        amplitude,
        volumes_per_subject_per_class: per_class,
        ..PhantomSpec::default()
    };
    let phantom = generate(&spec, seed)?;
    println!("phantom: {} volumes, SNR {:?}", phantom.dataset.samples.len(), phantom.report.snr);

    let config = TrainConfig {
        learning_rate: lr,
        seed,
        ..TrainConfig::default()
    };
    let t0 = std::time::Instant::now();
    let (_, report) = train(&config, &phantom.dataset)?;
    println!("adaptive, {:.1}s", t0.elapsed().as_secs_f64());
    print!("{}", report.summary());

    for fwhm in [3.0, 8.0, 13.0] {
        let cfg = TrainConfig {
            fixed_fwhm_mm: Some(fwhm),
            ..config.clone()
        };
        let (model, _) = train(&cfg, &phantom.dataset)?;
        let sigma = fwhm_mm_to_sigma(fwhm, spec.voxel_size_mm)?;
        let table = evaluate(&model, &phantom.dataset, Split::Test, config.truncation, Some(sigma))?;
        print!("{}", table.to_text());
    }
    println!("total {:.1}s", t0.elapsed().as_secs_f64());
    Ok(())
}
