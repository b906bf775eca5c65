//! The parameters network: a noise feature from a fixed Laplacian kernel and a
//! learned two-layer head that turns it into a strictly positive `sigma_f`.
//!
//! ```text
//! feature = mean |L * X|            (valid-mode, 3x3x3 Laplacian)
//! u_m     = a_m * feature + b_m     (m = 1..M)
//! sigma_f = exp(sum_m v_m * u_m + c)
//! ```

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::filter::fmt17;
use crate::volume::Volume;

pub const DEFAULT_WIDTH: usize = 50;

/// Standard deviation of the initial weights (variance 0.09).
pub const INIT_STD: f64 = 0.3;

pub const PRE_ACTIVATION_MIN: f64 = -10.0;
pub const PRE_ACTIVATION_MAX: f64 = 6.0;

/// The 1D second-difference stencil; the 3D kernel is its threefold outer product.
pub const LAPLACIAN_1D: [f64; 3] = [1.0, -2.0, 1.0];

/// Sum of squares of the 3D Laplacian kernel (6^3).
pub const LAPLACIAN_SQ_SUM: f64 = 216.0;

/// The fixed 3x3x3 kernel, x fastest.
pub fn laplacian_kernel() -> [f64; 27] {
    let mut k = [0.0; 27];
    for (z, kz) in LAPLACIAN_1D.iter().enumerate() {
        for (y, ky) in LAPLACIAN_1D.iter().enumerate() {
            for (x, kx) in LAPLACIAN_1D.iter().enumerate() {
                k[(z * 3 + y) * 3 + x] = kz * ky * kx;
            }
        }
    }
    k
}

/// Mean absolute Laplacian response over the interior voxels.
pub fn noise_feature(x: &Volume) -> Result<f64> {
    let dims = x.dims();
    if dims.min_extent() < 3 {
        return Err(Error::InvalidArgument(format!(
            "noise estimation needs every dimension >= 3, got {dims}"
        )));
    }
    let (w, h, d) = (dims.w, dims.h, dims.d);
    let src = x.data();
    // second differences along x, y, z in turn, keeping only valid outputs
    let (w1, h1, d1) = (w - 2, h - 2, d - 2);
    let mut ax = Vec::with_capacity(w1 * h * d);
    for z in 0..d {
        for y in 0..h {
            let row = &src[dims.index(y, 0, z)..][..w];
            ax.extend(row.windows(3).map(|t| t[0] - 2.0 * t[1] + t[2]));
        }
    }
    let mut ay = Vec::with_capacity(w1 * h1 * d);
    for z in 0..d {
        for y in 1..h - 1 {
            let at = |yy: usize| (z * h + yy) * w1;
            for xx in 0..w1 {
                ay.push(ax[at(y - 1) + xx] - 2.0 * ax[at(y) + xx] + ax[at(y + 1) + xx]);
            }
        }
    }
    let slab = w1 * h1;
    let mut total = 0.0;
    for z in 1..d - 1 {
        for i in 0..slab {
            let v = ay[(z - 1) * slab + i] - 2.0 * ay[z * slab + i] + ay[(z + 1) * slab + i];
            total += v.abs();
        }
    }
    Ok(total / (w1 * h1 * d1) as f64)
}

/// Scale that maps the raw feature of iid Gaussian noise onto its standard
/// deviation: `sqrt(216) * sqrt(2 / pi)`.
pub fn calibration_constant() -> f64 {
    LAPLACIAN_SQ_SUM.sqrt() * (2.0 / std::f64::consts::PI).sqrt()
}

/// Noise standard deviation estimate with the fixed calibration constant in
/// place of the learned scaling. Used for reporting, not for training.
pub fn calibrated_noise_estimate(x: &Volume) -> Result<f64> {
    Ok(noise_feature(x)? / calibration_constant())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamsNetWeights {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub v: Vec<f64>,
    pub c: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmaOutput {
    pub sigma_f: f64,
    pub pre_activation: f64,
    pub clamped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamsGrad {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub v: Vec<f64>,
    pub c: f64,
    pub feature: f64,
}

impl ParamsGrad {
    pub fn zeros(m: usize) -> Self {
        ParamsGrad {
            a: vec![0.0; m],
            b: vec![0.0; m],
            v: vec![0.0; m],
            c: 0.0,
            feature: 0.0,
        }
    }

    pub fn accumulate(&mut self, other: &ParamsGrad) {
        for (d, s) in [
            (&mut self.a, &other.a),
            (&mut self.b, &other.b),
            (&mut self.v, &other.v),
        ] {
            d.iter_mut().zip(s).for_each(|(x, y)| *x += y);
        }
        self.c += other.c;
        self.feature += other.feature;
    }
}

impl ParamsNetWeights {
    pub fn zeros(m: usize) -> Self {
        ParamsNetWeights {
            a: vec![0.0; m],
            b: vec![0.0; m],
            v: vec![0.0; m],
            c: 0.0,
        }
    }

    /// Every weight drawn from N(0, 0.09).
    pub fn init<R: Rng + ?Sized>(m: usize, rng: &mut R) -> Result<Self> {
        if m == 0 {
            return Err(Error::InvalidArgument("params net width must be >= 1".into()));
        }
        let normal = Normal::new(0.0, INIT_STD).unwrap();
        let mut draw = |n: usize| (0..n).map(|_| normal.sample(rng)).collect::<Vec<_>>();
        let a = draw(m);
        let b = draw(m);
        let v = draw(m);
        let c = draw(1)[0];
        Ok(ParamsNetWeights { a, b, v, c })
    }

    pub fn width(&self) -> usize {
        self.a.len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.a.len();
        if m == 0 || self.b.len() != m || self.v.len() != m {
            return Err(Error::InvalidArgument(
                "params net layers must share a width >= 1".into(),
            ));
        }
        let finite = self
            .a
            .iter()
            .chain(&self.b)
            .chain(&self.v)
            .chain(std::iter::once(&self.c))
            .all(|x| x.is_finite());
        if !finite {
            return Err(Error::Numerical("non-finite params net weight".into()));
        }
        Ok(())
    }

    /// Collapsed slope and intercept: `pre = slope * feature + intercept`.
    pub fn effective_affine(&self) -> (f64, f64) {
        let slope = self.v.iter().zip(&self.a).map(|(v, a)| v * a).sum();
        let intercept = self.v.iter().zip(&self.b).map(|(v, b)| v * b).sum::<f64>() + self.c;
        (slope, intercept)
    }

    pub fn map_to_sigma(&self, feature: f64) -> SigmaOutput {
        let pre: f64 = self
            .a
            .iter()
            .zip(&self.b)
            .zip(&self.v)
            .map(|((a, b), v)| v * (a * feature + b))
            .sum::<f64>()
            + self.c;
        let clamped = !(PRE_ACTIVATION_MIN..=PRE_ACTIVATION_MAX).contains(&pre);
        let pre_c = pre.clamp(PRE_ACTIVATION_MIN, PRE_ACTIVATION_MAX);
        SigmaOutput {
            sigma_f: pre_c.exp(),
            pre_activation: pre,
            clamped,
        }
    }

    /// Gradients of a loss with `dL/dsigma_f = upstream`. A clamped
    /// pre-activation passes no gradient.
    pub fn map_to_sigma_backward(&self, feature: f64, upstream: f64) -> ParamsGrad {
        let out = self.map_to_sigma(feature);
        let m = self.width();
        if out.clamped || upstream == 0.0 {
            return ParamsGrad::zeros(m);
        }
        let g = upstream * out.sigma_f;
        let mut grad = ParamsGrad::zeros(m);
        for i in 0..m {
            let u = self.a[i] * feature + self.b[i];
            grad.v[i] = g * u;
            grad.b[i] = g * self.v[i];
            grad.a[i] = g * self.v[i] * feature;
            grad.feature += g * self.v[i] * self.a[i];
        }
        grad.c = g;
        grad
    }

    pub fn sgd_step(&mut self, grad: &ParamsGrad, lr: f64) {
        for (w, g) in [
            (&mut self.a, &grad.a),
            (&mut self.b, &grad.b),
            (&mut self.v, &grad.v),
        ] {
            w.iter_mut().zip(g).for_each(|(x, d)| *x -= lr * d);
        }
        self.c -= lr * grad.c;
    }

    /// Checkpoint text: `M`, then the a, b and v rows, then c.
    pub fn to_text(&self) -> String {
        let row = |xs: &[f64]| xs.iter().map(|x| fmt17(*x)).collect::<Vec<_>>().join(" ");
        let mut s = String::new();
        let _ = writeln!(s, "{}", self.width());
        let _ = writeln!(s, "{}", row(&self.a));
        let _ = writeln!(s, "{}", row(&self.b));
        let _ = writeln!(s, "{}", row(&self.v));
        let _ = writeln!(s, "{}", fmt17(self.c));
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |why: &str| Error::Format {
            path: "params checkpoint".into(),
            reason: why.to_string(),
        };
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let m: usize = lines
            .next()
            .and_then(|l| l.trim().parse().ok())
            .ok_or_else(|| bad("missing width line"))?;
        let mut row = |name: &str| -> Result<Vec<f64>> {
            let line = lines.next().ok_or_else(|| bad(&format!("missing {name} row")))?;
            let vals = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| bad(&format!("{name}: {e}")))?;
            if vals.len() != m {
                return Err(bad(&format!("{name} has {} values, expected {m}", vals.len())));
            }
            Ok(vals)
        };
        let a = row("a")?;
        let b = row("b")?;
        let v = row("v")?;
        let c = lines
            .next()
            .ok_or_else(|| bad("missing c line"))?
            .trim()
            .parse::<f64>()
            .map_err(|e| bad(&format!("c: {e}")))?;
        let w = ParamsNetWeights { a, b, v, c };
        w.validate()?;
        Ok(w)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|e| match e {
            Error::Format { reason, .. } => Error::format(path, reason),
            other => other,
        })
    }
}
