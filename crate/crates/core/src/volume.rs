//! Dense 3D scalar volumes and the per-subject preprocessing applied to them.
//!
//! Voxels are stored in a flat buffer with x (width) varying fastest, then
//! y (height), then z (depth):
//!
//! ```text
//! index(y, x, z) = x + W * (y + H * z)
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub const DEFAULT_VOXEL_SIZE_MM: f64 = 3.0;

/// Grid extent as (height, width, depth) voxel counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dims {
    pub h: usize,
    pub w: usize,
    pub d: usize,
}

impl Dims {
    pub fn new(h: usize, w: usize, d: usize) -> Self {
        Dims { h, w, d }
    }

    pub fn cube(n: usize) -> Self {
        Dims { h: n, w: n, d: n }
    }

    pub fn len(&self) -> usize {
        self.h * self.w * self.d
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, z: usize) -> usize {
        x + self.w * (y + self.h * z)
    }

    pub fn as_tuple(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.d)
    }

    pub fn min_extent(&self) -> usize {
        self.h.min(self.w).min(self.d)
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.h, self.w, self.d)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: Dims,
    voxel_size_mm: f64,
    data: Vec<f64>,
}

impl Volume {
    pub fn new(dims: Dims, voxel_size_mm: f64, data: Vec<f64>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::InvalidArgument(format!("empty volume dims {dims}")));
        }
        if !(voxel_size_mm > 0.0 && voxel_size_mm.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "voxel size must be positive, got {voxel_size_mm}"
            )));
        }
        if data.len() != dims.len() {
            return Err(Error::InvalidArgument(format!(
                "volume {dims} needs {} voxels, got {}",
                dims.len(),
                data.len()
            )));
        }
        Ok(Volume {
            dims,
            voxel_size_mm,
            data,
        })
    }

    pub fn zeros(dims: Dims) -> Self {
        Self::filled(dims, 0.0)
    }

    pub fn filled(dims: Dims, value: f64) -> Self {
        Volume {
            dims,
            voxel_size_mm: DEFAULT_VOXEL_SIZE_MM,
            data: vec![value; dims.len()],
        }
    }

    /// Builds a volume by evaluating `f(y, x, z)` at every voxel.
    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(dims.len());
        for z in 0..dims.d {
            for y in 0..dims.h {
                for x in 0..dims.w {
                    data.push(f(y, x, z));
                }
            }
        }
        Volume {
            dims,
            voxel_size_mm: DEFAULT_VOXEL_SIZE_MM,
            data,
        }
    }

    pub fn with_voxel_size(mut self, voxel_size_mm: f64) -> Self {
        self.voxel_size_mm = voxel_size_mm;
        self
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn voxel_size_mm(&self) -> f64 {
        self.voxel_size_mm
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, y: usize, x: usize, z: usize) -> f64 {
        self.data[self.dims.index(y, x, z)]
    }

    pub fn set(&mut self, y: usize, x: usize, z: usize, value: f64) {
        let i = self.dims.index(y, x, z);
        self.data[i] = value;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dot(&self, other: &Volume) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub(crate) fn check_same_dims(&self, other: &Volume) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::DimMismatch {
                expected: self.dims.as_tuple(),
                found: other.dims.as_tuple(),
            });
        }
        Ok(())
    }
}

/// Rescales a subject's volumes to [0, 1] using the extrema taken over every
/// voxel of every volume in the set.
pub fn normalize_subject(volumes: &[Volume]) -> Result<Vec<Volume>> {
    let first = volumes
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot normalize an empty subject".into()))?;
    for v in &volumes[1..] {
        first.check_same_dims(v)?;
    }
    let (lo, hi) = volumes.iter().fold(
        (f64::INFINITY, f64::NEG_INFINITY),
        |(lo, hi), v| {
            let (a, b) = v.min_max();
            (lo.min(a), hi.max(b))
        },
    );
    if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Degenerate(format!(
            "subject intensity range is empty (min {lo}, max {hi})"
        )));
    }
    let range = hi - lo;
    Ok(volumes
        .iter()
        .map(|v| {
            let data = v.data.iter().map(|&x| (x - lo) / range).collect();
            Volume {
                dims: v.dims,
                voxel_size_mm: v.voxel_size_mm,
                data,
            }
        })
        .collect())
}

/// Adds iid zero-mean Gaussian noise with standard deviation `sigma` to every
/// voxel. The result is not clipped back to [0, 1].
pub fn add_gaussian_noise(volume: &Volume, sigma: f64, seed: u64) -> Result<Volume> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "noise sigma must be non-negative, got {sigma}"
        )));
    }
    let mut out = volume.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("sigma checked above");
    for v in out.data.iter_mut() {
        *v += normal.sample(&mut rng);
    }
    Ok(out)
}
