//! The composed network for one mini-batch:
//!
//! ```text
//! X --noise_feature--> f --params net--> sigma --policy--> sigma' --build_filter--> Q
//! X, Q --smooth--> Z --classifier (batch standardized)--> p --BCE--> L
//! ```
//!
//! and the reverse pass that carries `dL/dZ` back to the params-net weights via
//! `dL/dsigma`. Batch members are processed in parallel; every reduction
//! happens afterwards in batch order, so results are bitwise reproducible.

use rand::Rng;
use rayon::prelude::*;

use crate::classifier::{self, ClassifierGrad, ClassifierWeights, ForwardOutput};
use crate::conv::{sigma_gradient, smooth};
use crate::error::{Error, Result};
use crate::filter::{apply_degenerate_policy, build_filter, GaussianFilter};
use crate::params_net::{ParamsGrad, ParamsNetWeights};
use crate::volume::{Dims, Volume};

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub params: ParamsNetWeights,
    pub classifier: ClassifierWeights,
}

impl Model {
    pub fn init<R: Rng + ?Sized>(dims: Dims, width: usize, rng: &mut R) -> Result<Self> {
        let params = ParamsNetWeights::init(width, rng)?;
        let classifier = ClassifierWeights::xavier(dims, rng);
        Ok(Model { params, classifier })
    }
}

/// Where each volume's filter width comes from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SigmaSource {
    /// Predicted per volume by the params net.
    Adaptive,
    /// One width for every volume, params net bypassed.
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineOptions {
    pub truncation: f64,
    pub bump_probability: f64,
    pub source: SigmaSource,
}

/// Per-volume record of how the applied width was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SigmaTrace {
    /// Params-net output (or the fixed width).
    pub predicted: f64,
    /// Width actually used to build the filter.
    pub applied: f64,
    pub bumped: bool,
    /// Pre-activation hit the exp guard.
    pub clamped: bool,
    /// Width was capped so the filter fits inside the volume.
    pub capped: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EventCounts {
    pub clamp: usize,
    pub bump: usize,
    pub cap: usize,
}

impl EventCounts {
    pub fn add(&mut self, other: EventCounts) {
        self.clamp += other.clamp;
        self.bump += other.bump;
        self.cap += other.cap;
    }
}

#[derive(Debug, Clone)]
pub struct BatchForward {
    pub traces: Vec<SigmaTrace>,
    pub filters: Vec<GaussianFilter>,
    pub smoothed: Vec<Volume>,
    pub output: ForwardOutput,
    pub loss: f64,
}

impl BatchForward {
    pub fn events(&self) -> EventCounts {
        let mut e = EventCounts::default();
        for t in &self.traces {
            e.clamp += t.clamped as usize;
            e.bump += t.bumped as usize;
            e.cap += t.capped as usize;
        }
        e
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrad {
    pub params: ParamsGrad,
    pub classifier: ClassifierGrad,
    /// dL/dsigma applied, per batch member.
    pub d_sigma: Vec<f64>,
}

/// Largest width whose filter still fits in a volume with the given extent.
pub fn max_sigma_for(dims: Dims, truncation: f64) -> f64 {
    let max_radius = (dims.min_extent().saturating_sub(1) / 2) as f64;
    // radius stays <= max_radius while t * sigma + 0.5 < 2 * (max_radius + 1)
    (2.0 * max_radius + 1.5) / truncation * (1.0 - 1e-12)
}

/// Resolves the filter width for one volume. `rng` drives the degenerate-regime
/// bump and is only consulted when `training` is set.
pub fn resolve_sigma<R: Rng + ?Sized>(
    params: &ParamsNetWeights,
    feature: f64,
    dims: Dims,
    opts: &PipelineOptions,
    training: bool,
    rng: &mut R,
) -> SigmaTrace {
    let (predicted, clamped) = match opts.source {
        SigmaSource::Adaptive => {
            let out = params.map_to_sigma(feature);
            (out.sigma_f, out.clamped)
        }
        SigmaSource::Fixed(s) => (s, false),
    };
    let policy = apply_degenerate_policy(
        predicted,
        opts.truncation,
        opts.bump_probability,
        training,
        rng,
    );
    let cap = max_sigma_for(dims, opts.truncation);
    let capped = policy.sigma_f > cap;
    SigmaTrace {
        predicted,
        applied: if capped { cap } else { policy.sigma_f },
        bumped: policy.bumped,
        clamped,
        capped,
    }
}

pub fn forward_batch<R: Rng + ?Sized>(
    model: &Model,
    volumes: &[&Volume],
    features: &[f64],
    labels: &[u8],
    opts: &PipelineOptions,
    training: bool,
    rng: &mut R,
) -> Result<BatchForward> {
    if volumes.len() != features.len() || volumes.len() != labels.len() {
        return Err(Error::InvalidArgument(
            "volumes, features and labels differ in length".into(),
        ));
    }
    let dims = model.classifier.dims;
    let traces: Vec<SigmaTrace> = features
        .iter()
        .map(|&f| resolve_sigma(&model.params, f, dims, opts, training, rng))
        .collect();
    let filters = traces
        .iter()
        .map(|t| build_filter(t.applied, opts.truncation))
        .collect::<Result<Vec<_>>>()?;
    let smoothed = volumes
        .par_iter()
        .zip(filters.par_iter())
        .map(|(x, f)| smooth(x, f))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Volume> = smoothed.iter().collect();
    let output = classifier::forward(&refs, &model.classifier)?;
    let loss = classifier::bce_loss(&output.probabilities, labels);
    Ok(BatchForward {
        traces,
        filters,
        smoothed,
        output,
        loss,
    })
}

/// Gradients of the batch BCE loss with respect to both subnetworks.
pub fn backward_batch(
    model: &Model,
    fwd: &BatchForward,
    volumes: &[&Volume],
    features: &[f64],
    labels: &[u8],
    opts: &PipelineOptions,
) -> Result<ModelGrad> {
    let refs: Vec<&Volume> = fwd.smoothed.iter().collect();
    let classifier_grad = classifier::backward(&refs, &fwd.output, labels)?;
    let m = model.params.width();
    if opts.source != SigmaSource::Adaptive {
        return Ok(ModelGrad {
            params: ParamsGrad::zeros(m),
            d_sigma: vec![0.0; volumes.len()],
            classifier: classifier_grad,
        });
    }
    let d_sigma = (0..volumes.len())
        .into_par_iter()
        .map(|i| {
            let dl = classifier_grad.d_logits[i];
            if dl == 0.0 || fwd.traces[i].capped {
                return Ok(0.0);
            }
            let upstream = model.classifier.input_gradient(dl);
            sigma_gradient(&upstream, volumes[i], &fwd.filters[i])
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut params = ParamsGrad::zeros(m);
    for (i, &ds) in d_sigma.iter().enumerate() {
        if ds != 0.0 {
            params.accumulate(&model.params.map_to_sigma_backward(features[i], ds));
        }
    }
    Ok(ModelGrad {
        params,
        classifier: classifier_grad,
        d_sigma,
    })
}
