//! Synthetic two-class volumes with known ground truth.
//!
//! Every volume shares a smooth background made of three broad Gaussian
//! blobs. Class 0 adds a compact activation blob left of the x midline,
//! class 1 its mirror image on the right. Each subject shifts both activation
//! centres by one seeded jitter vector. Volumes are normalized to [0, 1] per
//! subject and then copied with iid Gaussian noise at each requested level.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::classifier::{self, ClassifierWeights};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::manifest::{Dataset, Sample, Split};
use crate::volume::{add_gaussian_noise, normalize_subject, Dims, Volume, DEFAULT_VOXEL_SIZE_MM};

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub dims: Dims,
    pub n_subjects: usize,
    pub volumes_per_subject_per_class: usize,
    /// Activation amplitude as a fraction of the background's dynamic range.
    pub amplitude: f64,
    /// Gaussian profile width of the activation blob, voxels.
    pub blob_radius: f64,
    /// Distance of each class centre from the x midline, voxels.
    pub center_offset: f64,
    /// Per-subject uniform jitter bound on each axis, voxels.
    pub jitter: f64,
    /// Noise levels for the noisy copies; the noiseless masters are always kept.
    pub noise_levels: Vec<f64>,
    /// Subjects assigned to train / validation / test, in that order.
    pub split: (usize, usize, usize),
    pub voxel_size_mm: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: Dims::cube(24),
            n_subjects: 8,
            volumes_per_subject_per_class: 20,
            amplitude: 0.15,
            blob_radius: 2.5,
            center_offset: 6.0,
            jitter: 1.0,
            noise_levels: vec![0.1, 0.2, 0.3],
            split: (6, 1, 1),
            voxel_size_mm: DEFAULT_VOXEL_SIZE_MM,
        }
    }
}

const SPEC_KEYS: &[&str] = &[
    "dims",
    "n_subjects",
    "volumes_per_subject_per_class",
    "amplitude",
    "blob_radius",
    "center_offset",
    "jitter",
    "noise_levels",
    "split",
    "voxel_size_mm",
];

impl PhantomSpec {
    /// Reads overrides from `key = value` text; `dims` takes one or three
    /// comma-separated extents and `split` three subject counts.
    pub fn from_config(kv: &KeyValues) -> Result<Self> {
        kv.check_keys(SPEC_KEYS)?;
        let mut spec = PhantomSpec::default();
        if let Some(d) = kv.get_list::<usize>("dims")? {
            spec.dims = match d.as_slice() {
                [n] => Dims::cube(*n),
                [h, w, z] => Dims::new(*h, *w, *z),
                _ => return Err(Error::InvalidArgument("dims takes 1 or 3 values".into())),
            };
        }
        if let Some(v) = kv.get("n_subjects")? {
            spec.n_subjects = v;
        }
        if let Some(v) = kv.get("volumes_per_subject_per_class")? {
            spec.volumes_per_subject_per_class = v;
        }
        if let Some(v) = kv.get("amplitude")? {
            spec.amplitude = v;
        }
        if let Some(v) = kv.get("blob_radius")? {
            spec.blob_radius = v;
        }
        if let Some(v) = kv.get("center_offset")? {
            spec.center_offset = v;
        }
        if let Some(v) = kv.get("jitter")? {
            spec.jitter = v;
        }
        if let Some(v) = kv.get_list("noise_levels")? {
            spec.noise_levels = v;
        }
        if let Some(v) = kv.get_list::<usize>("split")? {
            match v.as_slice() {
                [a, b, c] => spec.split = (*a, *b, *c),
                _ => return Err(Error::InvalidArgument("split takes 3 values".into())),
            }
        }
        if let Some(v) = kv.get("voxel_size_mm")? {
            spec.voxel_size_mm = v;
        }
        if spec.split.0 + spec.split.1 + spec.split.2 != spec.n_subjects {
            // keep the train/validation/test proportions for other subject counts
            spec.split = default_split(spec.n_subjects);
        }
        Ok(spec)
    }

    /// Radius beyond which the activation blob is exactly zero.
    pub fn support_radius(&self) -> f64 {
        1.5 * self.blob_radius
    }

    /// Activation centres (y, x, z) for class 0 and class 1 before jitter.
    pub fn class_centers(&self) -> [[f64; 3]; 2] {
        let c = |n: usize| (n as f64 - 1.0) / 2.0;
        let (cy, cx, cz) = (c(self.dims.h), c(self.dims.w), c(self.dims.d));
        [
            [cy, cx - self.center_offset, cz],
            [cy, cx + self.center_offset, cz],
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n_subjects < 1 || self.volumes_per_subject_per_class < 1 {
            return bad("need at least one subject and one volume per class".into());
        }
        if self.dims.min_extent() < 3 {
            return bad(format!("phantom dims {} too small", self.dims));
        }
        if !(self.amplitude > 0.0 && self.blob_radius > 0.0 && self.jitter >= 0.0) {
            return bad("amplitude and blob radius must be positive, jitter non-negative".into());
        }
        if self.noise_levels.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return bad("noise levels must be positive".into());
        }
        if self.split.0 + self.split.1 + self.split.2 != self.n_subjects {
            return bad("split counts must add up to n_subjects".into());
        }
        // subject jitter shifts both centres together, so the separation is fixed
        if 2.0 * self.center_offset <= 2.0 * self.support_radius() {
            return bad(format!(
                "activation supports overlap: centre separation {} <= {}",
                2.0 * self.center_offset,
                2.0 * self.support_radius()
            ));
        }
        let extents = [self.dims.h, self.dims.w, self.dims.d];
        for center in self.class_centers() {
            for (axis, (&c, &n)) in center.iter().zip(&extents).enumerate() {
                let lo = c - self.jitter;
                let hi = c + self.jitter;
                if lo < 3.0 || hi > n as f64 - 1.0 - 3.0 {
                    return bad(format!(
                        "activation centre on axis {axis} comes within 3 voxels of a face"
                    ));
                }
            }
        }
        Ok(())
    }
}

fn default_split(n: usize) -> (usize, usize, usize) {
    // roughly 72% / 14% / 14% of subjects
    let held_out = ((n as f64) * 4.0 / 29.0).round().max(1.0) as usize;
    if n < 2 * held_out + 1 {
        return (n, 0, 0);
    }
    (n - 2 * held_out, held_out, held_out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomReport {
    /// Accuracy of the hand-built blob weight vector on the noiseless volumes.
    pub oracle_accuracy: f64,
    /// Normalized activation amplitude, averaged over subjects.
    pub normalized_amplitude: f64,
    /// (noise level, amplitude / sigma).
    pub snr: Vec<(f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub dataset: Dataset,
    pub report: PhantomReport,
}

fn background(dims: Dims) -> Volume {
    let n = dims.min_extent() as f64;
    // (y, x, z) centres as fractions of the extent, amplitude
    let blobs = [
        ([0.40, 0.35, 0.50], 1.0),
        ([0.55, 0.65, 0.45], 0.7),
        ([0.30, 0.50, 0.60], 0.5),
    ];
    let width = 0.3 * n;
    Volume::from_fn(dims, |y, x, z| {
        blobs
            .iter()
            .map(|(c, amp)| {
                let dy = y as f64 - c[0] * (dims.h as f64 - 1.0);
                let dx = x as f64 - c[1] * (dims.w as f64 - 1.0);
                let dz = z as f64 - c[2] * (dims.d as f64 - 1.0);
                amp * (-(dy * dy + dx * dx + dz * dz) / (2.0 * width * width)).exp()
            })
            .sum()
    })
}

fn activation(spec: &PhantomSpec, center: [f64; 3], scale: f64) -> Volume {
    let support = spec.support_radius();
    let rho = spec.blob_radius;
    Volume::from_fn(spec.dims, |y, x, z| {
        let d2 = (y as f64 - center[0]).powi(2)
            + (x as f64 - center[1]).powi(2)
            + (z as f64 - center[2]).powi(2);
        if d2.sqrt() > support {
            0.0
        } else {
            scale * (-d2 / (2.0 * rho * rho)).exp()
        }
    })
}

/// Voxels inside either class's activation support for one subject.
fn oracle_weights(spec: &PhantomSpec, centers: &[[f64; 3]; 2]) -> ClassifierWeights {
    let mut w = ClassifierWeights::zeros(spec.dims);
    let support = spec.support_radius();
    for (class, sign) in [(0usize, -1.0), (1, 1.0)] {
        let c = centers[class];
        for z in 0..spec.dims.d {
            for y in 0..spec.dims.h {
                for x in 0..spec.dims.w {
                    let d = ((y as f64 - c[0]).powi(2)
                        + (x as f64 - c[1]).powi(2)
                        + (z as f64 - c[2]).powi(2))
                    .sqrt();
                    if d <= support {
                        w.w[spec.dims.index(y, x, z)] = sign;
                    }
                }
            }
        }
    }
    w
}

pub fn generate(spec: &PhantomSpec, seed: u64) -> Result<Phantom> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bg = background(spec.dims);
    let (bg_lo, bg_hi) = bg.min_max();
    let scale = spec.amplitude * (bg_hi - bg_lo);
    let n_per = spec.volumes_per_subject_per_class;

    let mut samples = Vec::new();
    let mut oracle_correct = 0usize;
    let mut oracle_total = 0usize;
    let mut amp_sum = 0.0;

    for s in 0..spec.n_subjects {
        let subject_id = format!("sub-{:02}", s + 1);
        let split = if s < spec.split.0 {
            Split::Train
        } else if s < spec.split.0 + spec.split.1 {
            Split::Validation
        } else {
            Split::Test
        };
        let shift: [f64; 3] = if spec.jitter > 0.0 {
            std::array::from_fn(|_| rng.random_range(-spec.jitter..=spec.jitter))
        } else {
            [0.0; 3]
        };
        let centers = spec
            .class_centers()
            .map(|c| [c[0] + shift[0], c[1] + shift[1], c[2] + shift[2]]);

        let masters: Vec<Volume> = (0..2)
            .map(|class| {
                let act = activation(spec, centers[class], scale);
                let data = bg.data().iter().zip(act.data()).map(|(b, a)| b + a).collect();
                Volume::new(spec.dims, spec.voxel_size_mm, data)
            })
            .collect::<Result<_>>()?;
        let labels: Vec<u8> = (0..2 * n_per).map(|i| (i / n_per) as u8).collect();
        let raw: Vec<Volume> = labels.iter().map(|&y| masters[y as usize].clone()).collect();
        let normalized = normalize_subject(&raw)?;

        let (lo, hi) = raw.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            let (a, b) = v.min_max();
            (lo.min(a), hi.max(b))
        });
        amp_sum += scale / (hi - lo);

        let oracle = oracle_weights(spec, &centers);
        let refs: Vec<&Volume> = normalized.iter().collect();
        let out = classifier::forward(&refs, &oracle)?;
        oracle_correct +=
            (classifier::accuracy(&out.probabilities, &labels) * labels.len() as f64).round() as usize;
        oracle_total += labels.len();

        for (v, &y) in normalized.iter().zip(&labels) {
            samples.push(Sample {
                volume: v.clone(),
                label: y,
                subject_id: subject_id.clone(),
                noise_level: 0.0,
                split,
            });
        }
        for &sigma in &spec.noise_levels {
            for (v, &y) in normalized.iter().zip(&labels) {
                let noise_seed: u64 = rng.random();
                samples.push(Sample {
                    volume: add_gaussian_noise(v, sigma, noise_seed)?,
                    label: y,
                    subject_id: subject_id.clone(),
                    noise_level: sigma,
                    split,
                });
            }
        }
    }

    let oracle_accuracy = oracle_correct as f64 / oracle_total as f64;
    if oracle_accuracy < 1.0 {
        return Err(Error::Degenerate(format!(
            "noiseless phantom is not linearly separable by the blob oracle ({oracle_accuracy})"
        )));
    }
    let normalized_amplitude = amp_sum / spec.n_subjects as f64;
    let snr = spec
        .noise_levels
        .iter()
        .map(|&s| (s, normalized_amplitude / s))
        .collect();
    for &(s, r) in &snr {
        log::info!("phantom noise {s}: activation amplitude / sigma = {r:.3}");
    }
    Ok(Phantom {
        dataset: Dataset { samples },
        report: PhantomReport {
            oracle_accuracy,
            normalized_amplitude,
            snr,
        },
    })
}
