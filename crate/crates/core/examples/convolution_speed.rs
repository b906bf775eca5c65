//! Direct 3D versus separable convolution on a 64^3 volume.

use std::time::Instant;

use adasmooth::conv::{convolve, ConvPlan, Strategy};
use adasmooth::filter::build_filter;
use adasmooth::volume::{add_gaussian_noise, Dims, Volume};

fn main() -> adasmooth::Result<()> {
    let x = add_gaussian_noise(&Volume::zeros(Dims::cube(64)), 1.0, 0)?;
    println!("{:>7} {:>6} {:>10} {:>10} {:>8} {:>9}", "sigma_f", "radius", "direct s", "sep s", "speedup", "max diff");
    for sigma in [0.8, 1.5, 2.0, 3.0] {
        let f = build_filter(sigma, 4.0)?;
        let run = |s| {
            let start = Instant::now();
            let out = convolve(&x, f.weights(), &ConvPlan::for_filter(&f, s));
            (out, start.elapsed().as_secs_f64())
        };
        let (direct, td) = run(Strategy::Direct);
        let (sep, ts) = run(Strategy::Separable);
        let diff = direct?
            .data()
            .iter()
            .zip(sep?.data())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        println!("{sigma:>7} {:>6} {td:>10.4} {ts:>10.4} {:>8.1} {diff:>9.1e}", f.radius(), td / ts);
    }
    Ok(())
}
