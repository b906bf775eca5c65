//! Filter shape across widths: radius, 1D profile, FWHM at 3 mm voxels, and
//! where the single-cell regime begins.

use adasmooth::filter::{build_filter, is_single_cell, sigma_to_fwhm_mm, DEFAULT_TRUNCATION};

fn main() -> adasmooth::Result<()> {
    let t = DEFAULT_TRUNCATION;
    println!("{:>7} {:>6} {:>9} {:>8}  profile", "sigma_f", "radius", "fwhm_mm", "center");
    for sigma in [0.2, 0.374, 0.375, 0.6, 1.0, 1.5, 2.5, 4.0] {
        let f = build_filter(sigma, t)?;
        let profile: Vec<String> = f.profile().iter().map(|p| format!("{p:.3}")).collect();
        println!(
            "{sigma:>7} {:>6} {:>9.3} {:>8.4}  [{}]{}",
            f.radius(),
            sigma_to_fwhm_mm(sigma, 3.0)?,
            f.weights()[f.weights().len() / 2],
            profile.join(" "),
            if is_single_cell(sigma, t) { "  single cell" } else { "" }
        );
    }
    Ok(())
}
