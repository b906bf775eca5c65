//! Mini-batch SGD over the composed network, early stopping on validation
//! loss, evaluation tables and a logarithmic learning-rate / L2 grid search.
//!
//! A mini-batch is every volume of one (subject, noise level) group in a
//! split. Batch membership is fixed; only the order of batches is reshuffled
//! each epoch.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::classifier::{self, ClassifierWeights};
use crate::config::KeyValues;
use crate::conv::smooth;
use crate::error::{Error, Result};
use crate::filter::{build_filter, fwhm_mm_to_sigma, sigma_to_fwhm_mm, DEFAULT_TRUNCATION};
use crate::manifest::{Dataset, Split};
use crate::params_net::{noise_feature, ParamsNetWeights, DEFAULT_WIDTH};
use crate::pipeline::{self, EventCounts, Model, PipelineOptions, SigmaSource};
use crate::volume::{Volume, DEFAULT_VOXEL_SIZE_MM};

pub const DEFAULT_LR_GRID: [f64; 4] = [1e-3, 1e-2, 1e-1, 1.0];
pub const DEFAULT_LAMBDA_GRID: [f64; 5] = [0.0, 1e-5, 1e-4, 1e-3, 1e-2];

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub lambda_l2: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub bump_probability: f64,
    pub truncation: f64,
    pub seed: u64,
    pub width: usize,
    /// Train a fixed-width baseline instead of the adaptive model.
    pub fixed_fwhm_mm: Option<f64>,
    pub voxel_size_mm: f64,
    pub lr_grid: Vec<f64>,
    pub lambda_grid: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-2,
            lambda_l2: 0.0,
            max_epochs: 200,
            patience: 10,
            bump_probability: 0.5,
            truncation: DEFAULT_TRUNCATION,
            seed: 0,
            width: DEFAULT_WIDTH,
            fixed_fwhm_mm: None,
            voxel_size_mm: DEFAULT_VOXEL_SIZE_MM,
            lr_grid: DEFAULT_LR_GRID.to_vec(),
            lambda_grid: DEFAULT_LAMBDA_GRID.to_vec(),
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "learning_rate",
    "lambda_l2",
    "max_epochs",
    "patience",
    "bump_probability",
    "truncation",
    "seed",
    "width",
    "fixed_fwhm_mm",
    "voxel_size_mm",
    "lr_grid",
    "lambda_grid",
];

impl TrainConfig {
    pub fn from_config(kv: &KeyValues) -> Result<Self> {
        kv.check_keys(CONFIG_KEYS)?;
        let mut c = TrainConfig::default();
        macro_rules! take {
            ($key:literal, $field:expr) => {
                if let Some(v) = kv.get($key)? {
                    $field = v;
                }
            };
        }
        take!("learning_rate", c.learning_rate);
        take!("lambda_l2", c.lambda_l2);
        take!("max_epochs", c.max_epochs);
        take!("patience", c.patience);
        take!("bump_probability", c.bump_probability);
        take!("truncation", c.truncation);
        take!("seed", c.seed);
        take!("width", c.width);
        take!("voxel_size_mm", c.voxel_size_mm);
        if let Some(v) = kv.get::<f64>("fixed_fwhm_mm")? {
            c.fixed_fwhm_mm = Some(v);
        }
        if let Some(v) = kv.get_list("lr_grid")? {
            c.lr_grid = v;
        }
        if let Some(v) = kv.get_list("lambda_grid")? {
            c.lambda_grid = v;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be >= 0");
        }
        if !(self.lambda_l2 >= 0.0) {
            return bad("lambda_l2 must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.bump_probability) {
            return bad("bump_probability must lie in [0, 1]");
        }
        if !(self.truncation > 0.0) {
            return bad("truncation must be positive");
        }
        if self.width == 0 {
            return bad("width must be >= 1");
        }
        if let Some(f) = self.fixed_fwhm_mm {
            if !(f > 0.0) {
                return bad("fixed_fwhm_mm must be positive");
            }
        }
        if self.lr_grid.is_empty() || self.lambda_grid.is_empty() {
            return bad("search grids must be non-empty");
        }
        Ok(())
    }

    pub fn source(&self) -> Result<SigmaSource> {
        Ok(match self.fixed_fwhm_mm {
            Some(fwhm) => SigmaSource::Fixed(fwhm_mm_to_sigma(fwhm, self.voxel_size_mm)?),
            None => SigmaSource::Adaptive,
        })
    }

    pub fn pipeline_options(&self) -> Result<PipelineOptions> {
        Ok(PipelineOptions {
            truncation: self.truncation,
            bump_probability: self.bump_probability,
            source: self.source()?,
        })
    }

    /// The resolved configuration as `key = value` text.
    pub fn to_text(&self) -> String {
        let list = |xs: &[f64]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ");
        let mut s = String::new();
        let _ = writeln!(s, "learning_rate = {}", self.learning_rate);
        let _ = writeln!(s, "lambda_l2 = {}", self.lambda_l2);
        let _ = writeln!(s, "max_epochs = {}", self.max_epochs);
        let _ = writeln!(s, "patience = {}", self.patience);
        let _ = writeln!(s, "bump_probability = {}", self.bump_probability);
        let _ = writeln!(s, "truncation = {}", self.truncation);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "width = {}", self.width);
        if let Some(f) = self.fixed_fwhm_mm {
            let _ = writeln!(s, "fixed_fwhm_mm = {f}");
        }
        let _ = writeln!(s, "voxel_size_mm = {}", self.voxel_size_mm);
        let _ = writeln!(s, "lr_grid = {}", list(&self.lr_grid));
        let _ = writeln!(s, "lambda_grid = {}", list(&self.lambda_grid));
        s
    }
}

/// All volumes of one subject at one noise level.
#[derive(Debug, Clone, PartialEq)]
pub struct MiniBatch {
    pub subject_id: String,
    pub noise_level: f64,
    /// Indices into `Dataset::samples`, in dataset order.
    pub indices: Vec<usize>,
}

/// Groups one split into (subject, noise level) batches, ordered by subject
/// then noise level.
pub fn make_batches(dataset: &Dataset, split: Split) -> Result<Vec<MiniBatch>> {
    let mut groups: BTreeMap<(String, u64), Vec<usize>> = BTreeMap::new();
    for (i, s) in dataset.samples.iter().enumerate() {
        if s.split == split {
            groups
                .entry((s.subject_id.clone(), s.noise_level.to_bits()))
                .or_default()
                .push(i);
        }
    }
    let batches: Vec<MiniBatch> = groups
        .into_iter()
        .map(|((subject_id, bits), indices)| MiniBatch {
            subject_id,
            noise_level: f64::from_bits(bits),
            indices,
        })
        .collect();
    if let Some(b) = batches.iter().find(|b| b.indices.len() < 2) {
        return Err(Error::Manifest(format!(
            "subject {} at noise {} has a single volume; batches need at least 2",
            b.subject_id, b.noise_level
        )));
    }
    Ok(batches)
}

/// Batch visiting order for one epoch.
pub fn epoch_order(n_batches: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n_batches).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);
    order
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Tracks the best validation loss; asks to stop after `patience`
/// consecutive epochs without strict improvement.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best_loss: f64,
    best_epoch: usize,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best_loss: f64::INFINITY,
            best_epoch: 0,
            since_best: 0,
        }
    }

    pub fn update(&mut self, epoch: usize, loss: f64) -> StopDecision {
        if loss < self.best_loss {
            self.best_loss = loss;
            self.best_epoch = epoch;
            self.since_best = 0;
            return StopDecision::Improved;
        }
        self.since_best += 1;
        if self.since_best >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best_loss
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub mean_sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub noise_level: f64,
    pub n_volumes: usize,
    pub accuracy: f64,
    pub loss: f64,
    /// Mean applied width; reported in adaptive mode only.
    pub mean_sigma: Option<f64>,
    pub mean_fwhm_mm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalTable {
    pub split: Split,
    /// `Some(fwhm)` for a fixed-width evaluation.
    pub fixed_fwhm_mm: Option<f64>,
    pub rows: Vec<EvalRow>,
}

impl EvalTable {
    pub fn overall_accuracy(&self) -> f64 {
        let n: usize = self.rows.iter().map(|r| r.n_volumes).sum();
        if n == 0 {
            return 0.0;
        }
        self.rows.iter().map(|r| r.accuracy * r.n_volumes as f64).sum::<f64>() / n as f64
    }

    pub fn overall_loss(&self) -> f64 {
        let n: usize = self.rows.iter().map(|r| r.n_volumes).sum();
        if n == 0 {
            return 0.0;
        }
        self.rows.iter().map(|r| r.loss * r.n_volumes as f64).sum::<f64>() / n as f64
    }

    pub fn row(&self, noise: f64) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.noise_level == noise)
    }

    /// Accuracy table in percent, one row per noise level.
    pub fn to_text(&self) -> String {
        let head = match self.fixed_fwhm_mm {
            Some(f) => format!("FWHM {f:.1}"),
            None => "Adaptive (mean FWHM mm)".to_string(),
        };
        let mut s = format!("Classification accuracy on {} set\n", self.split);
        let _ = writeln!(s, "{:<8} {}", "Noise", head);
        for r in &self.rows {
            let acc = format!("{:.1}", 100.0 * r.accuracy);
            match r.mean_fwhm_mm {
                Some(f) => {
                    let _ = writeln!(s, "{:<8} {} ({:.1})", format!("{:.1}", r.noise_level), acc, f);
                }
                None => {
                    let _ = writeln!(s, "{:<8} {}", format!("{:.1}", r.noise_level), acc);
                }
            }
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("noise_level,n_volumes,accuracy,loss,mean_sigma,mean_fwhm_mm\n");
        for r in &self.rows {
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.noise_level,
                r.n_volumes,
                r.accuracy,
                r.loss,
                opt(r.mean_sigma),
                opt(r.mean_fwhm_mm)
            );
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_epoch: usize,
    pub test: Option<EvalTable>,
    pub events: EventCounts,
}

impl TrainReport {
    pub fn epochs_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,val_accuracy,mean_sigma\n");
        for e in &self.epochs {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                e.epoch, e.train_loss, e.val_loss, e.val_accuracy, e.mean_sigma
            );
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let mode = match self.config.fixed_fwhm_mm {
            Some(f) => format!("fixed FWHM {f} mm"),
            None => "adaptive".to_string(),
        };
        let _ = writeln!(s, "mode: {mode}");
        let _ = writeln!(
            s,
            "best epoch: {} (stopped at {})",
            self.best_epoch, self.stopped_epoch
        );
        let _ = writeln!(
            s,
            "events: {} clamp, {} bump (p = {}), {} cap",
            self.events.clamp, self.events.bump, self.config.bump_probability, self.events.cap
        );
        if let Some(t) = &self.test {
            s.push_str(&t.to_text());
        }
        s
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let put = |name: &str, text: String| {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        put("epochs.csv", self.epochs_csv())?;
        put("summary.txt", self.summary())?;
        put("config.cfg", self.config.to_text())?;
        if let Some(t) = &self.test {
            put("test_accuracy.csv", t.to_csv())?;
        }
        Ok(())
    }
}

pub const PARAMS_FILE: &str = "params_net.txt";
pub const CLASSIFIER_FILE: &str = "classifier.txt";

pub fn save_model(model: &Model, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    model.params.save(dir.join(PARAMS_FILE))?;
    model.classifier.save(dir.join(CLASSIFIER_FILE))
}

pub fn load_model(dir: impl AsRef<Path>) -> Result<Model> {
    let dir = dir.as_ref();
    Ok(Model {
        params: ParamsNetWeights::load(dir.join(PARAMS_FILE))?,
        classifier: ClassifierWeights::load(dir.join(CLASSIFIER_FILE))?,
    })
}

/// Per-dataset state that does not change during training.
struct Prepared<'a> {
    dataset: &'a Dataset,
    features: Vec<f64>,
    /// Pre-smoothed volumes for fixed-width runs.
    smoothed: Option<Vec<Volume>>,
}

impl<'a> Prepared<'a> {
    fn new(dataset: &'a Dataset, opts: &PipelineOptions) -> Result<Self> {
        dataset.check_dims()?;
        let features = dataset
            .samples
            .par_iter()
            .map(|s| noise_feature(&s.volume))
            .collect::<Result<Vec<_>>>()?;
        let smoothed = match opts.source {
            SigmaSource::Fixed(sigma) => {
                let filter = build_filter(sigma, opts.truncation)?;
                Some(
                    dataset
                        .samples
                        .par_iter()
                        .map(|s| smooth(&s.volume, &filter))
                        .collect::<Result<Vec<_>>>()?,
                )
            }
            SigmaSource::Adaptive => None,
        };
        Ok(Prepared {
            dataset,
            features,
            smoothed,
        })
    }

    fn labels(&self, batch: &MiniBatch) -> Vec<u8> {
        batch.indices.iter().map(|&i| self.dataset.samples[i].label).collect()
    }
}

/// Loss, gradients and per-volume widths for one batch.
struct StepResult {
    loss: f64,
    probabilities: Vec<f64>,
    sigmas: Vec<f64>,
    events: EventCounts,
    grad: Option<pipeline::ModelGrad>,
}

fn run_batch(
    model: &Model,
    prep: &Prepared,
    batch: &MiniBatch,
    opts: &PipelineOptions,
    training: bool,
    want_grad: bool,
    rng: &mut ChaCha8Rng,
) -> Result<StepResult> {
    let labels = prep.labels(batch);
    if let Some(smoothed) = &prep.smoothed {
        let refs: Vec<&Volume> = batch.indices.iter().map(|&i| &smoothed[i]).collect();
        let out = classifier::forward(&refs, &model.classifier)?;
        let loss = classifier::bce_loss(&out.probabilities, &labels);
        let grad = if want_grad {
            Some(pipeline::ModelGrad {
                params: crate::params_net::ParamsGrad::zeros(model.params.width()),
                classifier: classifier::backward(&refs, &out, &labels)?,
                d_sigma: vec![0.0; refs.len()],
            })
        } else {
            None
        };
        let sigma = match opts.source {
            SigmaSource::Fixed(s) => s,
            SigmaSource::Adaptive => unreachable!("smoothed cache only exists for fixed widths"),
        };
        return Ok(StepResult {
            loss,
            probabilities: out.probabilities,
            sigmas: vec![sigma; refs.len()],
            events: EventCounts::default(),
            grad,
        });
    }
    let vols: Vec<&Volume> = batch
        .indices
        .iter()
        .map(|&i| &prep.dataset.samples[i].volume)
        .collect();
    let feats: Vec<f64> = batch.indices.iter().map(|&i| prep.features[i]).collect();
    let fwd = pipeline::forward_batch(model, &vols, &feats, &labels, opts, training, rng)?;
    let grad = if want_grad {
        Some(pipeline::backward_batch(model, &fwd, &vols, &feats, &labels, opts)?)
    } else {
        None
    };
    Ok(StepResult {
        loss: fwd.loss,
        sigmas: fwd.traces.iter().map(|t| t.applied).collect(),
        events: fwd.events(),
        probabilities: fwd.output.probabilities,
        grad,
    })
}

fn apply_update(model: &mut Model, grad: &pipeline::ModelGrad, lr: f64, lambda: f64) -> Result<()> {
    let (_, l2) = classifier::l2_penalty(&model.classifier, lambda)?;
    let mut cgrad = grad.classifier.clone();
    cgrad.w.iter_mut().zip(&l2).for_each(|(g, p)| *g += p);
    model.classifier.sgd_step(&cgrad, lr);
    model.params.sgd_step(&grad.params, lr);
    Ok(())
}

fn evaluate_prepared(
    model: &Model,
    prep: &Prepared,
    split: Split,
    opts: &PipelineOptions,
) -> Result<EvalTable> {
    let batches = make_batches(prep.dataset, split)?;
    // evaluation never bumps, so this rng is never drawn from
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    #[derive(Default)]
    struct Acc {
        n: usize,
        correct: f64,
        loss: f64,
        sigma: f64,
    }
    let mut per_noise: BTreeMap<u64, Acc> = BTreeMap::new();
    for b in &batches {
        let r = run_batch(model, prep, b, opts, false, false, &mut rng)?;
        let labels = prep.labels(b);
        let n = labels.len();
        let acc = per_noise.entry(b.noise_level.to_bits()).or_default();
        acc.n += n;
        acc.correct += classifier::accuracy(&r.probabilities, &labels) * n as f64;
        acc.loss += r.loss * n as f64;
        acc.sigma += r.sigmas.iter().sum::<f64>();
    }
    let adaptive = opts.source == SigmaSource::Adaptive;
    let voxel = prep
        .dataset
        .samples
        .first()
        .map(|s| s.volume.voxel_size_mm())
        .unwrap_or(DEFAULT_VOXEL_SIZE_MM);
    let mut rows: Vec<EvalRow> = per_noise
        .into_iter()
        .map(|(bits, a)| {
            let mean_sigma = a.sigma / a.n as f64;
            Ok(EvalRow {
                noise_level: f64::from_bits(bits),
                n_volumes: a.n,
                accuracy: a.correct / a.n as f64,
                loss: a.loss / a.n as f64,
                mean_sigma: adaptive.then_some(mean_sigma),
                mean_fwhm_mm: if adaptive {
                    Some(sigma_to_fwhm_mm(mean_sigma, voxel)?)
                } else {
                    None
                },
            })
        })
        .collect::<Result<_>>()?;
    rows.sort_by(|a, b| a.noise_level.partial_cmp(&b.noise_level).unwrap());
    let fixed_fwhm_mm = match opts.source {
        SigmaSource::Fixed(s) => Some(sigma_to_fwhm_mm(s, voxel)?),
        SigmaSource::Adaptive => None,
    };
    Ok(EvalTable {
        split,
        fixed_fwhm_mm,
        rows,
    })
}

/// Per-noise accuracy of `model` on one split. With `fixed_sigma` the params
/// net is bypassed and every volume is smoothed with that width.
pub fn evaluate(
    model: &Model,
    dataset: &Dataset,
    split: Split,
    truncation: f64,
    fixed_sigma: Option<f64>,
) -> Result<EvalTable> {
    let opts = PipelineOptions {
        truncation,
        bump_probability: 0.0,
        source: match fixed_sigma {
            Some(s) => SigmaSource::Fixed(s),
            None => SigmaSource::Adaptive,
        },
    };
    let prep = Prepared::new(dataset, &opts)?;
    evaluate_prepared(model, &prep, split, &opts)
}

/// Trains from the initialization implied by `config.seed`.
pub fn train(config: &TrainConfig, dataset: &Dataset) -> Result<(Model, TrainReport)> {
    config.validate()?;
    let dims = dataset
        .samples
        .first()
        .ok_or_else(|| Error::Manifest("empty dataset".into()))?
        .volume
        .dims();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let model = Model::init(dims, config.width, &mut rng)?;
    train_from(config, dataset, model)
}

/// Trains starting from `model`.
pub fn train_from(config: &TrainConfig, dataset: &Dataset, mut model: Model) -> Result<(Model, TrainReport)> {
    config.validate()?;
    log::info!("training with config:\n{}", config.to_text());
    let opts = config.pipeline_options()?;
    let prep = Prepared::new(dataset, &opts)?;
    let train_batches = make_batches(dataset, Split::Train)?;
    if train_batches.is_empty() {
        return Err(Error::Manifest("no training volumes".into()));
    }
    let has_val = dataset.samples.iter().any(|s| s.split == Split::Validation);
    if !has_val {
        return Err(Error::Manifest("no validation volumes".into()));
    }
    let mut bump_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best = model.clone();
    let mut epochs = Vec::new();
    let mut events = EventCounts::default();
    let mut stopped_epoch = 0;

    for epoch in 1..=config.max_epochs {
        stopped_epoch = epoch;
        let mut loss_sum = 0.0;
        let mut sigma_sum = 0.0;
        let mut sigma_n = 0usize;
        for bi in epoch_order(train_batches.len(), config.seed, epoch) {
            let batch = &train_batches[bi];
            let r = run_batch(&model, &prep, batch, &opts, true, true, &mut bump_rng)?;
            if !r.loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss at epoch {epoch} (subject {}, noise {}); last widths {:?}; clamp events {}",
                    batch.subject_id, batch.noise_level, r.sigmas, events.clamp + r.events.clamp
                )));
            }
            events.add(r.events);
            loss_sum += r.loss;
            sigma_sum += r.sigmas.iter().sum::<f64>();
            sigma_n += r.sigmas.len();
            apply_update(&mut model, r.grad.as_ref().expect("gradient requested"), config.learning_rate, config.lambda_l2)?;
            if model.params.validate().is_err() || model.classifier.validate().is_err() {
                return Err(Error::Numerical(format!(
                    "non-finite weights after epoch {epoch}; clamp events {}",
                    events.clamp
                )));
            }
        }
        let val = evaluate_prepared(&model, &prep, Split::Validation, &opts)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train_batches.len() as f64,
            val_loss: val.overall_loss(),
            val_accuracy: val.overall_accuracy(),
            mean_sigma: sigma_sum / sigma_n.max(1) as f64,
        };
        log::debug!(
            "epoch {epoch}: train {:.4} val {:.4} acc {:.3} sigma {:.3}",
            record.train_loss,
            record.val_loss,
            record.val_accuracy,
            record.mean_sigma
        );
        if !record.val_loss.is_finite() {
            return Err(Error::Numerical(format!("non-finite validation loss at epoch {epoch}")));
        }
        let decision = stopper.update(epoch, record.val_loss);
        epochs.push(record);
        match decision {
            StopDecision::Improved => best = model.clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => break,
        }
    }
    if stopper.best_epoch() > 0 {
        model = best;
    }
    let has_test = dataset.samples.iter().any(|s| s.split == Split::Test);
    let test = if has_test {
        Some(evaluate_prepared(&model, &prep, Split::Test, &opts)?)
    } else {
        None
    };
    if events.clamp > 0 {
        log::warn!("{} pre-activation clamp events during training", events.clamp);
    }
    let report = TrainReport {
        config: config.clone(),
        epochs,
        best_epoch: stopper.best_epoch(),
        stopped_epoch,
        test,
        events,
    };
    Ok((model, report))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub learning_rate: f64,
    pub lambda_l2: f64,
    pub val_accuracy: f64,
    pub val_loss: f64,
    pub best_epoch: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSearchResult {
    pub rows: Vec<GridRow>,
    /// Index into `rows` of the selected cell, if any run succeeded.
    pub best: Option<usize>,
}

impl GridSearchResult {
    pub fn best_row(&self) -> Option<&GridRow> {
        self.best.map(|i| &self.rows[i])
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("learning_rate,lambda_l2,val_accuracy,val_loss,best_epoch,error\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.learning_rate,
                r.lambda_l2,
                r.val_accuracy,
                r.val_loss,
                r.best_epoch,
                r.error.as_deref().unwrap_or("").replace(',', ";")
            );
        }
        s
    }
}

/// Trains one model per (learning rate, L2) pair. Picks the highest validation
/// accuracy, then the lower validation loss, then the lower learning rate.
/// Failed runs are recorded and skipped.
pub fn grid_search(config: &TrainConfig, dataset: &Dataset) -> Result<GridSearchResult> {
    config.validate()?;
    let mut rows = Vec::new();
    for &lr in &config.lr_grid {
        for &lambda in &config.lambda_grid {
            let cfg = TrainConfig {
                learning_rate: lr,
                lambda_l2: lambda,
                ..config.clone()
            };
            let row = match train(&cfg, dataset) {
                Ok((_, report)) => {
                    let best = report
                        .epochs
                        .iter()
                        .find(|e| e.epoch == report.best_epoch)
                        .cloned();
                    match best {
                        Some(e) => GridRow {
                            learning_rate: lr,
                            lambda_l2: lambda,
                            val_accuracy: e.val_accuracy,
                            val_loss: e.val_loss,
                            best_epoch: report.best_epoch,
                            error: None,
                        },
                        None => GridRow {
                            learning_rate: lr,
                            lambda_l2: lambda,
                            val_accuracy: f64::NAN,
                            val_loss: f64::NAN,
                            best_epoch: 0,
                            error: Some("no completed epoch".into()),
                        },
                    }
                }
                Err(e) => GridRow {
                    learning_rate: lr,
                    lambda_l2: lambda,
                    val_accuracy: f64::NAN,
                    val_loss: f64::NAN,
                    best_epoch: 0,
                    error: Some(e.to_string()),
                },
            };
            log::info!(
                "grid lr={lr} lambda={lambda}: acc {:.3} loss {:.4}{}",
                row.val_accuracy,
                row.val_loss,
                row.error.as_deref().map(|e| format!(" ({e})")).unwrap_or_default()
            );
            rows.push(row);
        }
    }
    let best = rows
        .iter()
        .enumerate()
        .filter(|(_, r)| r.error.is_none())
        .min_by(|(_, a), (_, b)| {
            b.val_accuracy
                .total_cmp(&a.val_accuracy)
                .then(a.val_loss.total_cmp(&b.val_loss))
                .then(a.learning_rate.total_cmp(&b.learning_rate))
        })
        .map(|(i, _)| i);
    Ok(GridSearchResult { rows, best })
}
