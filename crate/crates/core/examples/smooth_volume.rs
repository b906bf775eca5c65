//! Smooth a noisy blob at several FWHMs and write the results as VOL1 files.
//!
//! ```text
//! cargo run --release --example smooth_volume -- [out_dir]
//! ```

use std::path::PathBuf;

use adasmooth::conv::smooth;
use adasmooth::filter::{build_filter, fwhm_mm_to_sigma, DEFAULT_TRUNCATION};
use adasmooth::io::{read_volume, write_volume};
use adasmooth::params_net::calibrated_noise_estimate;
use adasmooth::volume::{add_gaussian_noise, Dims, Volume};

fn main() -> adasmooth::Result<()> {
    let out: PathBuf = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("adasmooth_smooth"));
    std::fs::create_dir_all(&out).expect("create output directory");

    let dims = Dims::cube(24);
    let clean = Volume::from_fn(dims, |y, x, z| {
        let d2 = (y as f64 - 12.0).powi(2) + (x as f64 - 9.0).powi(2) + (z as f64 - 12.0).powi(2);
        (-d2 / 8.0).exp()
    })
    .with_voxel_size(3.0);
    let noisy = add_gaussian_noise(&clean, 0.3, 7)?;
    write_volume(&noisy, out.join("noisy.vol"))?;

    let rmse = |v: &Volume| {
        (v.data().iter().zip(clean.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
    };
    println!("noisy: rmse {:.4}, noise estimate {:.4}", rmse(&noisy), calibrated_noise_estimate(&noisy)?);
    for fwhm in [3.0, 6.0, 8.0, 13.0] {
        let sigma = fwhm_mm_to_sigma(fwhm, noisy.voxel_size_mm())?;
        let smoothed = smooth(&noisy, &build_filter(sigma, DEFAULT_TRUNCATION)?)?;
        let path = out.join(format!("fwhm_{fwhm}.vol"));
        write_volume(&smoothed, &path)?;
        // files hold f32, so read back what a downstream tool would see
        let back = read_volume(&path)?;
        println!(
            "fwhm {fwhm:>4} mm (sigma_f {sigma:.3}): rmse {:.4}, peak {:.3} -> {}",
            rmse(&back),
            back.get(12, 9, 12),
            path.display()
        );
    }
    Ok(())
}
