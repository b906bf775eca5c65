//! Laplacian noise estimate on pure noise and on a smooth signal plus noise.
//!
//! ```text
//! cargo run --release --example estimate_noise -- [side]
//! ```

use adasmooth::params_net::{calibrated_noise_estimate, noise_feature};
use adasmooth::volume::{add_gaussian_noise, Dims, Volume};

fn main() -> adasmooth::Result<()> {
    let side: usize = std::env::args().nth(1).map(|s| s.parse().expect("side")).unwrap_or(32);
    let dims = Dims::cube(side);
    let c = (side as f64 - 1.0) / 2.0;
    let signal = Volume::from_fn(dims, |y, x, z| {
        let d2 = (y as f64 - c).powi(2) + (x as f64 - c).powi(2) + (z as f64 - c).powi(2);
        (-d2 / (2.0 * (side as f64 / 6.0).powi(2))).exp()
    });
    let zero = Volume::zeros(dims);
    println!("{:>6} {:>10} {:>10} {:>12}", "sigma", "feature", "estimate", "with signal");
    for (i, sigma) in [0.0, 0.05, 0.1, 0.2, 0.3, 0.5].into_iter().enumerate() {
        let noise = add_gaussian_noise(&zero, sigma, i as u64)?;
        let noisy = add_gaussian_noise(&signal, sigma, i as u64)?;
        println!(
            "{sigma:>6} {:>10.4} {:>10.4} {:>12.4}",
            noise_feature(&noise)?,
            calibrated_noise_estimate(&noise)?,
            calibrated_noise_estimate(&noisy)?
        );
    }
    Ok(())
}
