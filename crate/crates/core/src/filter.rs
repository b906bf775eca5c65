//! Truncated, renormalized isotropic 3D Gaussian filters and their derivative
//! with respect to the width parameter.
//!
//! For width `sigma` and truncation `t` the support is the integer cube
//! `-r..=r` on every axis with `r = floor((t * sigma + 0.5) / 2)`. The sampled
//! Gaussian is divided by its sum so the weights add up to one. When `r == 0`
//! the filter is the single cell `[1.0]`, whose derivative is identically zero;
//! [`apply_degenerate_policy`] is the training-time escape from that regime.

use std::fmt::Write as _;

use rand::Rng;

use crate::error::{Error, Result};

pub const DEFAULT_TRUNCATION: f64 = 4.0;

/// 2 * sqrt(2 ln 2), the FWHM of a unit-variance Gaussian.
pub const FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949_3;

/// Half-width of the sampling grid.
pub fn radius_for(sigma_f: f64, t: f64) -> usize {
    ((t * sigma_f + 0.5) / 2.0).floor().max(0.0) as usize
}

/// True when the grid collapses to a single cell (`sigma_f < 1.5 / t`).
pub fn is_single_cell(sigma_f: f64, t: f64) -> bool {
    t * sigma_f + 0.5 < 2.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianFilter {
    sigma_f: f64,
    truncation_t: f64,
    radius: usize,
    weights: Vec<f64>,
    d_weights_d_sigma: Vec<f64>,
    profile: Vec<f64>,
    d_profile_d_sigma: Vec<f64>,
}

impl GaussianFilter {
    pub fn sigma_f(&self) -> f64 {
        self.sigma_f
    }

    pub fn truncation_t(&self) -> f64 {
        self.truncation_t
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    /// Filter cube, x fastest, indexed `[(k * side + i) * side + j]` for
    /// offsets `(i - r, j - r, k - r)` along (y, x, z).
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// dQ/dsigma_f at fixed support, same layout as [`weights`](Self::weights).
    pub fn d_weights_d_sigma(&self) -> &[f64] {
        &self.d_weights_d_sigma
    }

    /// Renormalized 1D profile; the cube is its threefold outer product.
    pub fn profile(&self) -> &[f64] {
        &self.profile
    }

    pub fn d_profile_d_sigma(&self) -> &[f64] {
        &self.d_profile_d_sigma
    }

    pub fn is_single_cell(&self) -> bool {
        self.radius == 0
    }

    /// Text dump: a `sigma_f t radius` line followed by the weights in x-fastest
    /// order, one per line, 17 significant digits.
    pub fn dump(&self) -> String {
        let mut out = format!("{} {} {}\n", fmt17(self.sigma_f), fmt17(self.truncation_t), self.radius);
        for w in &self.weights {
            let _ = writeln!(out, "{}", fmt17(*w));
        }
        out
    }
}

pub(crate) fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Unnormalized isotropic Gaussian density at squared distance `dist2`.
fn gaussian(dist2: f64, sigma: f64) -> f64 {
    let norm = (2.0 * std::f64::consts::PI).sqrt() * sigma;
    (-dist2 / (2.0 * sigma * sigma)).exp() / (norm * norm * norm)
}

pub fn build_filter(sigma_f: f64, t: f64) -> Result<GaussianFilter> {
    if !(sigma_f > 0.0 && sigma_f.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "filter sigma must be positive, got {sigma_f}"
        )));
    }
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "truncation must be positive, got {t}"
        )));
    }
    let r = radius_for(sigma_f, t);
    if r == 0 {
        return Ok(GaussianFilter {
            sigma_f,
            truncation_t: t,
            radius: 0,
            weights: vec![1.0],
            d_weights_d_sigma: vec![0.0],
            profile: vec![1.0],
            d_profile_d_sigma: vec![0.0],
        });
    }

    let n = r + 1;
    // Values over the canonical octant a <= b <= c, so that all 48 mirror and
    // permutation images of a cell share one floating-point value.
    let canon = |a: usize, b: usize, c: usize| -> usize {
        let mut k = [a, b, c];
        k.sort_unstable();
        (k[0] * n + k[1]) * n + k[2]
    };
    let mut raw = vec![0.0; n * n * n];
    let mut d_raw = vec![0.0; n * n * n];
    let s3 = sigma_f * sigma_f * sigma_f;
    for a in 0..n {
        for b in a..n {
            for c in b..n {
                let dist2 = (a * a + b * b + c * c) as f64;
                let g = gaussian(dist2, sigma_f);
                let idx = (a * n + b) * n + c;
                raw[idx] = g;
                d_raw[idx] = g * (dist2 / s3 - 3.0 / sigma_f);
            }
        }
    }

    let side = 2 * r + 1;
    let mut g_cube = Vec::with_capacity(side * side * side);
    let mut dg_cube = Vec::with_capacity(side * side * side);
    for k in 0..side {
        for i in 0..side {
            for j in 0..side {
                let c = canon(i.abs_diff(r), j.abs_diff(r), k.abs_diff(r));
                g_cube.push(raw[c]);
                dg_cube.push(d_raw[c]);
            }
        }
    }
    let (weights, d_weights_d_sigma) = normalize_with_derivative(&g_cube, &dg_cube);

    let g1: Vec<f64> = (0..side)
        .map(|i| {
            let x = i.abs_diff(r) as f64;
            (-x * x / (2.0 * sigma_f * sigma_f)).exp()
        })
        .collect();
    let dg1: Vec<f64> = (0..side)
        .map(|i| {
            let x = i.abs_diff(r) as f64;
            g1[i] * x * x / s3
        })
        .collect();
    let (profile, d_profile_d_sigma) = normalize_with_derivative(&g1, &dg1);

    Ok(GaussianFilter {
        sigma_f,
        truncation_t: t,
        radius: r,
        weights,
        d_weights_d_sigma,
        profile,
        d_profile_d_sigma,
    })
}

/// Quotient rule for `q = g / sum(g)`: returns `(q, dq)` given `(g, dg)`.
fn normalize_with_derivative(g: &[f64], dg: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let s: f64 = g.iter().sum();
    let ds: f64 = dg.iter().sum();
    let q = g.iter().map(|v| v / s).collect();
    let dq = g
        .iter()
        .zip(dg)
        .map(|(v, dv)| (dv * s - v * ds) / (s * s))
        .collect();
    (q, dq)
}

/// Recomputes dQ/dsigma for a multi-cell filter.
pub fn derivative_of_normalized_gaussian(filter: &GaussianFilter) -> Result<Vec<f64>> {
    if filter.radius == 0 {
        return Err(Error::Degenerate(
            "single-cell filter has no sigma dependence".into(),
        ));
    }
    Ok(build_filter(filter.sigma_f, filter.truncation_t)?
        .d_weights_d_sigma)
}

/// Result of [`apply_degenerate_policy`]. When `bumped`, the effective width is
/// the input plus one and passes gradients through unchanged.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyOutcome {
    pub sigma_f: f64,
    pub bumped: bool,
}

/// During training, widths that would produce a single-cell filter are raised
/// by 1.0 with probability `p`. Outside training the width is returned as is.
pub fn apply_degenerate_policy<R: Rng + ?Sized>(
    sigma_f: f64,
    t: f64,
    p: f64,
    training: bool,
    rng: &mut R,
) -> PolicyOutcome {
    let unchanged = PolicyOutcome {
        sigma_f,
        bumped: false,
    };
    if !training || !is_single_cell(sigma_f, t) {
        return unchanged;
    }
    // Always draw so that the rng stream does not depend on p.
    let u: f64 = rng.random();
    if u < p {
        PolicyOutcome {
            sigma_f: sigma_f + 1.0,
            bumped: true,
        }
    } else {
        unchanged
    }
}

pub fn sigma_to_fwhm_mm(sigma_f: f64, voxel_size_mm: f64) -> Result<f64> {
    check_positive("sigma_f", sigma_f)?;
    check_positive("voxel size", voxel_size_mm)?;
    Ok(FWHM_PER_SIGMA * sigma_f * voxel_size_mm)
}

pub fn fwhm_mm_to_sigma(fwhm_mm: f64, voxel_size_mm: f64) -> Result<f64> {
    check_positive("FWHM", fwhm_mm)?;
    check_positive("voxel size", voxel_size_mm)?;
    Ok(fwhm_mm / (FWHM_PER_SIGMA * voxel_size_mm))
}

fn check_positive(what: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{what} must be positive, got {v}")))
    }
}
