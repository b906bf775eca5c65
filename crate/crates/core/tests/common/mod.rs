//! Finite-difference oracles shared by the gradient and acceptance suites.
//! Every error is `max|analytic - numeric| / max|numeric|`.

#![allow(dead_code)]

use adasmooth::classifier::{self, ClassifierWeights};
use adasmooth::conv::{convolve, convolve_backward_filter, convolve_backward_input, ConvPlan, Strategy};
use adasmooth::filter::{build_filter, radius_for};
use adasmooth::params_net::{noise_feature, ParamsNetWeights};
use adasmooth::pipeline::{backward_batch, forward_batch, Model, PipelineOptions, SigmaSource};
use adasmooth::volume::{Dims, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    let scale = numeric.iter().fold(0.0f64, |m, b| m.max(b.abs()));
    diff / scale
}

pub fn random_volume(dims: Dims, rng: &mut ChaCha8Rng) -> Volume {
    Volume::from_fn(dims, |_, _, _| rng.random_range(-1.0..1.0))
}

/// Widths whose radius does not change within `margin` on either side.
pub fn support_stable_sigmas(n: usize, lo: f64, hi: f64, t: f64, margin: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut i = 0;
    while out.len() < n {
        let s = lo * (hi / lo).powf(i as f64 / (n as f64 + 10.0));
        i += 1;
        if radius_for(s - margin, t) == radius_for(s + margin, t) && radius_for(s, t) > 0 {
            out.push(s);
        }
        assert!(i < 10 * n, "could not find enough stable widths");
    }
    out
}

/// Worst dQ/dsigma error over `sigmas` against central differences.
pub fn filter_derivative_error(sigmas: &[f64], t: f64) -> f64 {
    let h = 1e-6;
    sigmas
        .iter()
        .map(|&s| {
            let f = build_filter(s, t).unwrap();
            let plus = build_filter(s + h, t).unwrap();
            let minus = build_filter(s - h, t).unwrap();
            let numeric: Vec<f64> = plus
                .weights()
                .iter()
                .zip(minus.weights())
                .map(|(p, m)| (p - m) / (2.0 * h))
                .collect();
            rel_err(f.d_weights_d_sigma(), &numeric)
        })
        .fold(0.0, f64::max)
}

/// Relative mismatch of `<K * x, u> = <x, K^T u>` and `<K * x, u> = <K, dK>`.
pub fn adjoint_errors(seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = Dims::new(9, 11, 7);
    let x = random_volume(dims, &mut rng);
    let u = random_volume(dims, &mut rng);
    let cube: Vec<f64> = (0..125).map(|_| rng.random_range(-1.0..1.0)).collect();
    let plan = ConvPlan::from_cube(&cube, Strategy::Direct).unwrap();
    let kx = convolve(&x, &cube, &plan).unwrap();
    let lhs = kx.dot(&u);
    let ktu = convolve_backward_input(&u, &cube, &plan).unwrap();
    let rhs_input = x.dot(&ktu);
    let dk = convolve_backward_filter(&u, &x, 2).unwrap();
    let rhs_filter: f64 = cube.iter().zip(&dk).map(|(a, b)| a * b).sum();
    (
        (lhs - rhs_input).abs() / lhs.abs(),
        (lhs - rhs_filter).abs() / lhs.abs(),
    )
}

/// Error of dL/dw and dL/dZ for a batch of four 4^3 volumes.
pub fn classifier_jacobian_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = Dims::cube(4);
    let batch: Vec<Volume> = (0..4).map(|_| random_volume(dims, &mut rng)).collect();
    let labels = [0u8, 1, 1, 0];
    let w = ClassifierWeights::xavier(dims, &mut rng);
    let loss = |batch: &[Volume], w: &ClassifierWeights| {
        let refs: Vec<&Volume> = batch.iter().collect();
        let out = classifier::forward(&refs, w).unwrap();
        classifier::bce_loss(&out.probabilities, &labels)
    };
    let refs: Vec<&Volume> = batch.iter().collect();
    let out = classifier::forward(&refs, &w).unwrap();
    let grad = classifier::backward(&refs, &out, &labels).unwrap();

    let h = 1e-6;
    let mut analytic = grad.w.clone();
    let mut numeric = Vec::new();
    for i in 0..w.w.len() {
        let mut p = w.clone();
        p.w[i] += h;
        let mut m = w.clone();
        m.w[i] -= h;
        numeric.push((loss(&batch, &p) - loss(&batch, &m)) / (2.0 * h));
    }
    for (b, &dl) in grad.d_logits.iter().enumerate() {
        analytic.extend(w.input_gradient(dl).data());
        for i in 0..dims.len() {
            let mut p = batch.clone();
            p[b].data_mut()[i] += h;
            let mut m = batch.clone();
            m[b].data_mut()[i] -= h;
            numeric.push((loss(&p, &w) - loss(&m, &w)) / (2.0 * h));
        }
    }
    rel_err(&analytic, &numeric)
}

fn flatten(p: &ParamsNetWeights) -> Vec<f64> {
    let mut v = p.a.clone();
    v.extend(&p.b);
    v.extend(&p.v);
    v.push(p.c);
    v
}

fn unflatten(flat: &[f64], m: usize) -> ParamsNetWeights {
    ParamsNetWeights {
        a: flat[..m].to_vec(),
        b: flat[m..2 * m].to_vec(),
        v: flat[2 * m..3 * m].to_vec(),
        c: flat[3 * m],
    }
}

/// End-to-end error of dL/d(params-net weights) on a batch of 8^3 volumes
/// at different noise levels, bump disabled.
pub fn end_to_end_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = Dims::cube(8);
    let labels = [0u8, 1, 0, 1, 1, 0];
    let noise = [0.1, 0.15, 0.2, 0.25, 0.3, 0.35];
    let volumes: Vec<Volume> = labels
        .iter()
        .zip(noise)
        .map(|(&y, s)| {
            let shift = if y == 1 { 5.0 } else { 2.0 };
            Volume::from_fn(dims, |yy, x, z| {
                let d2 = (x as f64 - shift).powi(2) + (yy as f64 - 3.5).powi(2) + (z as f64 - 3.5).powi(2);
                (-d2 / 4.0).exp() + s * rng.random_range(-1.7..1.7)
            })
        })
        .collect();
    let features: Vec<f64> = volumes.iter().map(|v| noise_feature(v).unwrap()).collect();
    let refs: Vec<&Volume> = volumes.iter().collect();

    // keep every width inside (0.875, 1.375), where the radius is 2
    let m = 6;
    let mut params = ParamsNetWeights::zeros(m);
    for i in 0..m {
        params.a[i] = rng.random_range(-0.05..0.05);
        params.b[i] = rng.random_range(-0.1..0.1);
        params.v[i] = rng.random_range(-0.3..0.3);
    }
    let (slope, icpt) = params.effective_affine();
    let mid: f64 = features.iter().sum::<f64>() / features.len() as f64;
    params.c = 1.1f64.ln() - slope * mid - (icpt - params.c);
    let model = Model {
        params,
        classifier: ClassifierWeights::xavier(dims, &mut rng),
    };
    let opts = PipelineOptions {
        truncation: 4.0,
        bump_probability: 0.0,
        source: SigmaSource::Adaptive,
    };
    let loss = |p: &ParamsNetWeights| {
        let mdl = Model {
            params: p.clone(),
            classifier: model.classifier.clone(),
        };
        let mut r = ChaCha8Rng::seed_from_u64(0);
        forward_batch(&mdl, &refs, &features, &labels, &opts, false, &mut r)
            .unwrap()
            .loss
    };
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let fwd = forward_batch(&model, &refs, &features, &labels, &opts, false, &mut r).unwrap();
    for t in &fwd.traces {
        assert!(t.applied > 0.9 && t.applied < 1.35, "width {} left the stable band", t.applied);
    }
    let grad = backward_batch(&model, &fwd, &refs, &features, &labels, &opts).unwrap();
    let g = &grad.params;
    let mut analytic = g.a.clone();
    analytic.extend(&g.b);
    analytic.extend(&g.v);
    analytic.push(g.c);

    let base = flatten(&model.params);
    let h = 1e-5;
    let numeric: Vec<f64> = (0..base.len())
        .map(|i| {
            let mut p = base.clone();
            p[i] += h;
            let mut q = base.clone();
            q[i] -= h;
            (loss(&unflatten(&p, m)) - loss(&unflatten(&q, m))) / (2.0 * h)
        })
        .collect();
    rel_err(&analytic, &numeric)
}
