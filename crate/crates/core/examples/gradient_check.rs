//! Compare the analytic width gradient of a smoothed volume's projection
//! against central differences.

use adasmooth::conv::{sigma_gradient, smooth};
use adasmooth::filter::build_filter;
use adasmooth::volume::{add_gaussian_noise, Dims, Volume};

fn main() -> adasmooth::Result<()> {
    let dims = Dims::cube(16);
    let x = add_gaussian_noise(&Volume::zeros(dims), 1.0, 1)?;
    let u = add_gaussian_noise(&Volume::zeros(dims), 1.0, 2)?;
    let objective = |s: f64| -> adasmooth::Result<f64> { Ok(smooth(&x, &build_filter(s, 4.0)?)?.dot(&u)) };
    let h = 1e-6;
    println!("{:>7} {:>14} {:>14} {:>9}", "sigma_f", "analytic", "numeric", "rel err");
    for sigma in [0.5, 0.9, 1.3, 1.7, 2.2, 2.9] {
        let analytic = sigma_gradient(&u, &x, &build_filter(sigma, 4.0)?)?;
        let numeric = (objective(sigma + h)? - objective(sigma - h)?) / (2.0 * h);
        println!(
            "{sigma:>7} {analytic:>14.6} {numeric:>14.6} {:>9.1e}",
            (analytic - numeric).abs() / numeric.abs()
        );
    }
    Ok(())
}
