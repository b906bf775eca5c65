//! Linear read-out over the flattened smoothed volume, standardized with the
//! statistics of the current batch before a sigmoid.
//!
//! The same batch standardization is used for training, validation and test;
//! there are no running averages. Population (1/B) statistics are used, and
//! gradients flow through both the batch mean and the batch standard deviation.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::filter::fmt17;
use crate::volume::{Dims, Volume};

pub const STD_EPSILON: f64 = 1e-5;
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierWeights {
    pub dims: Dims,
    pub w: Vec<f64>,
    pub bias: f64,
}

impl ClassifierWeights {
    pub fn zeros(dims: Dims) -> Self {
        ClassifierWeights {
            dims,
            w: vec![0.0; dims.len()],
            bias: 0.0,
        }
    }

    /// Xavier/Glorot uniform init for a layer with `H*W*D` inputs and one
    /// output: `U(-sqrt(6 / (fan_in + 1)), +sqrt(6 / (fan_in + 1)))`, bias 0.
    pub fn xavier<R: Rng + ?Sized>(dims: Dims, rng: &mut R) -> Self {
        let fan_in = dims.len() as f64;
        let limit = (6.0 / (fan_in + 1.0)).sqrt();
        let w = (0..dims.len()).map(|_| rng.random_range(-limit..limit)).collect();
        ClassifierWeights { dims, w, bias: 0.0 }
    }

    pub fn logit(&self, z: &Volume) -> f64 {
        self.w.iter().zip(z.data()).map(|(a, b)| a * b).sum::<f64>() + self.bias
    }

    pub fn validate(&self) -> Result<()> {
        if self.w.len() != self.dims.len() {
            return Err(Error::InvalidArgument("classifier weights do not match dims".into()));
        }
        if !self.bias.is_finite() || self.w.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical("non-finite classifier weight".into()));
        }
        Ok(())
    }

    /// `dL/dZ` for a batch member whose logit gradient is `d_logit`.
    pub fn input_gradient(&self, d_logit: f64) -> Volume {
        Volume::new(self.dims, 1.0, self.w.iter().map(|w| w * d_logit).collect())
            .expect("dims match weights")
    }

    pub fn sgd_step(&mut self, grad: &ClassifierGrad, lr: f64) {
        self.w.iter_mut().zip(&grad.w).for_each(|(w, g)| *w -= lr * g);
        self.bias -= lr * grad.bias;
    }

    /// Checkpoint text: `H W D`, the weight row, then the bias.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{} {} {}", self.dims.h, self.dims.w, self.dims.d);
        let row: Vec<String> = self.w.iter().map(|x| fmt17(*x)).collect();
        let _ = writeln!(s, "{}", row.join(" "));
        let _ = writeln!(s, "{}", fmt17(self.bias));
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |why: String| Error::Format {
            path: "classifier checkpoint".into(),
            reason: why,
        };
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let dims: Vec<usize> = lines
            .next()
            .ok_or_else(|| bad("missing dims line".into()))?
            .split_whitespace()
            .map(|t| t.parse().map_err(|e| bad(format!("dims: {e}"))))
            .collect::<Result<_>>()?;
        if dims.len() != 3 {
            return Err(bad("dims line needs three values".into()));
        }
        let dims = Dims::new(dims[0], dims[1], dims[2]);
        let w: Vec<f64> = lines
            .next()
            .ok_or_else(|| bad("missing weight row".into()))?
            .split_whitespace()
            .map(|t| t.parse().map_err(|e| bad(format!("weights: {e}"))))
            .collect::<Result<_>>()?;
        if w.len() != dims.len() {
            return Err(bad(format!("{} weights for dims {dims}", w.len())));
        }
        let bias = lines
            .next()
            .ok_or_else(|| bad("missing bias".into()))?
            .trim()
            .parse()
            .map_err(|e| bad(format!("bias: {e}")))?;
        let out = ClassifierWeights { dims, w, bias };
        out.validate()?;
        Ok(out)
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

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchStats {
    pub mean: f64,
    pub std: f64,
    pub epsilon: f64,
}

impl BatchStats {
    /// A batch whose logits are (numerically) constant standardizes to zeros.
    pub fn is_degenerate(&self) -> bool {
        !(self.std > self.epsilon)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache {
    pub logits: Vec<f64>,
    pub standardized: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub probabilities: Vec<f64>,
    pub stats: BatchStats,
    pub cache: ForwardCache,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierGrad {
    pub w: Vec<f64>,
    pub bias: f64,
    /// dL/dlogit for each batch member; `dL/dZ_i = d_logits[i] * w`.
    pub d_logits: Vec<f64>,
}

pub fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// Batch standardization followed by the sigmoid, from precomputed logits.
pub fn standardize_logits(logits: &[f64]) -> Result<ForwardOutput> {
    if logits.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "batch standardization needs at least 2 volumes, got {}",
            logits.len()
        )));
    }
    let n = logits.len() as f64;
    let mean = logits.iter().sum::<f64>() / n;
    let var = logits.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / n;
    let stats = BatchStats {
        mean,
        std: var.sqrt(),
        epsilon: STD_EPSILON,
    };
    let standardized: Vec<f64> = if stats.is_degenerate() {
        vec![0.0; logits.len()]
    } else {
        logits.iter().map(|l| (l - mean) / stats.std).collect()
    };
    Ok(ForwardOutput {
        probabilities: standardized.iter().map(|&s| sigmoid(s)).collect(),
        stats,
        cache: ForwardCache {
            logits: logits.to_vec(),
            standardized,
        },
    })
}

pub fn forward(batch: &[&Volume], w: &ClassifierWeights) -> Result<ForwardOutput> {
    for z in batch {
        if z.dims() != w.dims {
            return Err(Error::DimMismatch {
                expected: w.dims.as_tuple(),
                found: z.dims().as_tuple(),
            });
        }
    }
    let logits: Vec<f64> = batch.iter().map(|z| w.logit(z)).collect();
    standardize_logits(&logits)
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Mean binary cross-entropy with probabilities clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce_loss(p: &[f64], y: &[u8]) -> f64 {
    let total: f64 = p
        .iter()
        .zip(y)
        .map(|(&p, &y)| {
            let p = clamp_prob(p);
            if y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    total / p.len() as f64
}

/// dL/dlogit for every batch member, through the sigmoid and the batch
/// standardization.
pub fn logit_gradients(out: &ForwardOutput, y: &[u8]) -> Vec<f64> {
    let n = out.probabilities.len() as f64;
    if out.stats.is_degenerate() {
        return vec![0.0; out.probabilities.len()];
    }
    let g: Vec<f64> = out
        .probabilities
        .iter()
        .zip(y)
        .map(|(&p, &y)| {
            if clamp_prob(p) != p {
                0.0
            } else {
                (p - y as f64) / n
            }
        })
        .collect();
    let s = &out.cache.standardized;
    let g_mean = g.iter().sum::<f64>() / n;
    let gs_mean = g.iter().zip(s).map(|(a, b)| a * b).sum::<f64>() / n;
    g.iter()
        .zip(s)
        .map(|(gj, sj)| (gj - g_mean - sj * gs_mean) / out.stats.std)
        .collect()
}

pub fn backward(batch: &[&Volume], out: &ForwardOutput, y: &[u8]) -> Result<ClassifierGrad> {
    if batch.len() != y.len() || batch.len() != out.probabilities.len() {
        return Err(Error::InvalidArgument("batch, labels and outputs differ in length".into()));
    }
    let d_logits = logit_gradients(out, y);
    let len = batch.first().map(|z| z.len()).unwrap_or(0);
    let mut w = vec![0.0; len];
    for (z, &dl) in batch.iter().zip(&d_logits) {
        if dl != 0.0 {
            w.iter_mut().zip(z.data()).for_each(|(g, x)| *g += dl * x);
        }
    }
    Ok(ClassifierGrad {
        w,
        bias: d_logits.iter().sum(),
        d_logits,
    })
}

/// `lambda * sum(w^2)` over the weights (not the bias) and its gradient.
pub fn l2_penalty(w: &ClassifierWeights, lambda: f64) -> Result<(f64, Vec<f64>)> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "L2 coefficient must be non-negative, got {lambda}"
        )));
    }
    let value = lambda * w.w.iter().map(|x| x * x).sum::<f64>();
    let grad = w.w.iter().map(|x| 2.0 * lambda * x).collect();
    Ok((value, grad))
}

/// Threshold-0.5 accuracy; a probability of exactly 0.5 counts as wrong.
pub fn accuracy(p: &[f64], y: &[u8]) -> f64 {
    if p.is_empty() {
        return 0.0;
    }
    let correct = p
        .iter()
        .zip(y)
        .filter(|(&p, &y)| (p > 0.5 && y == 1) || (p < 0.5 && y == 0))
        .count();
    correct as f64 / p.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn equal_logits_give_half() {
        let out = standardize_logits(&[0.3, 0.3, 0.3]).unwrap();
        assert!(out.probabilities.iter().all(|&p| p == 0.5));
        assert!(out.stats.is_degenerate());
    }

    #[test]
    fn two_point_batch() {
        let out = standardize_logits(&[-1.0, 1.0]).unwrap();
        assert_eq!(out.cache.standardized, vec![-1.0, 1.0]);
        assert!((out.probabilities[0] - 0.2689).abs() < 1e-4);
        assert!((out.probabilities[1] - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn single_member_batch_rejected() {
        assert!(standardize_logits(&[1.0]).is_err());
    }

    #[test]
    fn loss_examples() {
        assert!((bce_loss(&[0.5, 0.5], &[0, 1]) - 2f64.ln()).abs() < 1e-15);
        assert!((bce_loss(&[1.0, 0.0], &[1, 0]) - 1e-7).abs() < 1e-12);
        let want = -(0.9f64.ln() + 0.8f64.ln()) / 2.0;
        assert!((bce_loss(&[0.9, 0.2], &[1, 0]) - want).abs() < 1e-15);
        assert!((want - 0.16425).abs() < 1e-5);
    }

    #[test]
    fn l2_examples() {
        let w = ClassifierWeights {
            dims: Dims::new(1, 2, 1),
            w: vec![1.0, -2.0],
            bias: 5.0,
        };
        assert_eq!(l2_penalty(&w, 0.0).unwrap(), (0.0, vec![0.0, 0.0]));
        let (v, g) = l2_penalty(&w, 0.5).unwrap();
        assert_eq!(v, 2.5);
        assert_eq!(g, vec![1.0, -2.0]);
        assert!(l2_penalty(&w, -1.0).is_err());
        // finite differences
        let h = 1e-6;
        for i in 0..2 {
            let (mut p, mut m) = (w.clone(), w.clone());
            p.w[i] += h;
            m.w[i] -= h;
            let fd = (l2_penalty(&p, 0.5).unwrap().0 - l2_penalty(&m, 0.5).unwrap().0) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-8 * g[i].abs());
        }
    }

    #[test]
    fn accuracy_ties_are_wrong() {
        assert_eq!(accuracy(&[0.5, 0.7, 0.2], &[1, 1, 0]), 2.0 / 3.0);
    }

    #[test]
    fn degenerate_batch_has_zero_weight_gradient() {
        let z = Volume::filled(Dims::cube(3), 0.4);
        let batch = vec![&z, &z, &z];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = ClassifierWeights::xavier(Dims::cube(3), &mut rng);
        let out = forward(&batch, &w).unwrap();
        let g = backward(&batch, &out, &[1, 1, 1]).unwrap();
        assert!(g.w.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn symmetric_batch_has_zero_bias_gradient() {
        let out = standardize_logits(&[-0.7, 0.7]).unwrap();
        let d = logit_gradients(&out, &[0, 1]);
        assert!(d.iter().sum::<f64>().abs() < 1e-15);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut w = ClassifierWeights::xavier(Dims::new(2, 3, 2), &mut rng);
        w.bias = -0.125;
        assert_eq!(ClassifierWeights::from_text(&w.to_text()).unwrap(), w);
        assert!(ClassifierWeights::from_text("2 2 2\n1 2\n0\n").is_err());
    }

    #[test]
    fn dim_mismatch_rejected() {
        let w = ClassifierWeights::zeros(Dims::cube(3));
        let z = Volume::zeros(Dims::cube(4));
        assert!(forward(&[&z, &z], &w).is_err());
    }
}
