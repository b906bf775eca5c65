//! Same-size 3D correlation with zero padding, forward and adjoint.
//!
//! `Z(y, x, z) = sum_{i,j,k} Xpad(y + i - r, x + j - r, z + k - r) * Q(i, j, k)`
//!
//! Cubes use the layout of [`GaussianFilter::weights`]: x fastest, then y,
//! then z. Both kernels used by the pipeline are symmetric, so correlation and
//! convolution coincide for them. Work is split over output z-slabs; each
//! output voxel is written by exactly one worker, so results do not depend on
//! the thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::filter::GaussianFilter;
use crate::volume::{Dims, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Direct,
    Separable,
}

/// How to apply a filter cube of radius `r`: a triple loop, or three 1D passes
/// along y, x and z when the cube is an outer product of 1D factors.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvPlan {
    radius: usize,
    strategy: Strategy,
    factors: Option<[Vec<f64>; 3]>,
}

impl ConvPlan {
    pub fn direct(radius: usize) -> Self {
        ConvPlan {
            radius,
            strategy: Strategy::Direct,
            factors: None,
        }
    }

    /// Separable plan from per-axis factors `(fy, fx, fz)`, each of odd length
    /// `2r + 1`.
    pub fn separable(fy: Vec<f64>, fx: Vec<f64>, fz: Vec<f64>) -> Result<Self> {
        let side = fy.len();
        if side.is_multiple_of(2) || fx.len() != side || fz.len() != side {
            return Err(Error::InvalidArgument(
                "separable factors must share one odd length".into(),
            ));
        }
        Ok(ConvPlan {
            radius: side / 2,
            strategy: Strategy::Separable,
            factors: Some([fy, fx, fz]),
        })
    }

    pub fn for_filter(filter: &GaussianFilter, strategy: Strategy) -> Self {
        match strategy {
            Strategy::Direct => Self::direct(filter.radius()),
            Strategy::Separable => {
                let p = filter.profile().to_vec();
                Self::separable(p.clone(), p.clone(), p).expect("profile has odd length")
            }
        }
    }

    /// Plans a generic cube. The separable strategy requires the cube to be
    /// rank one (an outer product), which is checked to 1e-12 relative.
    pub fn from_cube(cube: &[f64], strategy: Strategy) -> Result<Self> {
        let side = cube_side(cube)?;
        match strategy {
            Strategy::Direct => Ok(Self::direct(side / 2)),
            Strategy::Separable => {
                let [fy, fx, fz] = rank1_factors(cube, side).ok_or_else(|| {
                    Error::InvalidArgument("separable strategy needs a rank-one filter cube".into())
                })?;
                Self::separable(fy, fx, fz)
            }
        }
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }
}

fn cube_side(cube: &[f64]) -> Result<usize> {
    let side = (cube.len() as f64).cbrt().round() as usize;
    if side * side * side != cube.len() || side == 0 {
        return Err(Error::InvalidArgument(format!(
            "filter with {} weights is not a cube",
            cube.len()
        )));
    }
    if side.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "filter side {side} must be odd"
        )));
    }
    Ok(side)
}

/// Splits a rank-one cube into (y, x, z) factors using its central lines.
fn rank1_factors(cube: &[f64], side: usize) -> Option<[Vec<f64>; 3]> {
    let r = side / 2;
    let at = |i: usize, j: usize, k: usize| cube[(k * side + i) * side + j];
    let center = at(r, r, r);
    if center == 0.0 {
        return None;
    }
    let fy: Vec<f64> = (0..side).map(|i| at(i, r, r) / center).collect();
    let fx: Vec<f64> = (0..side).map(|j| at(r, j, r) / center).collect();
    let fz: Vec<f64> = (0..side).map(|k| at(r, r, k)).collect();
    let scale = cube.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for k in 0..side {
        for i in 0..side {
            for j in 0..side {
                if (fy[i] * fx[j] * fz[k] - at(i, j, k)).abs() > 1e-12 * scale {
                    return None;
                }
            }
        }
    }
    Some([fy, fx, fz])
}

fn check_fits(dims: Dims, side: usize) -> Result<()> {
    if side > dims.min_extent() {
        return Err(Error::InvalidArgument(format!(
            "filter side {side} exceeds volume {dims}"
        )));
    }
    Ok(())
}

/// Forward correlation of `x` with `cube` under `plan`.
pub fn convolve(x: &Volume, cube: &[f64], plan: &ConvPlan) -> Result<Volume> {
    let side = cube_side(cube)?;
    if side != plan.side() {
        return Err(Error::InvalidArgument(format!(
            "plan radius {} does not match filter side {side}",
            plan.radius
        )));
    }
    check_fits(x.dims(), side)?;
    let data = match &plan.factors {
        Some([fy, fx, fz]) => separable(x.data(), x.dims(), fy, fx, fz),
        None => direct(x.data(), x.dims(), cube, side),
    };
    Ok(Volume::new(x.dims(), x.voxel_size_mm(), data).expect("same dims"))
}

/// Smooths `x` with a Gaussian filter through its 1D profile.
pub fn smooth(x: &Volume, filter: &GaussianFilter) -> Result<Volume> {
    let plan = ConvPlan::for_filter(filter, Strategy::Separable);
    convolve(x, filter.weights(), &plan)
}

/// dL/dQ for `L` depending on `Z = convolve(x, Q)` through `upstream = dL/dZ`.
pub fn convolve_backward_filter(upstream: &Volume, x: &Volume, radius: usize) -> Result<Vec<f64>> {
    upstream.check_same_dims(x)?;
    let side = 2 * radius + 1;
    check_fits(x.dims(), side)?;
    let dims = x.dims();
    let (u, xd) = (upstream.data(), x.data());
    let r = radius as isize;
    let grad = (0..side * side * side)
        .into_par_iter()
        .map(|cell| {
            let j = (cell % side) as isize - r;
            let i = ((cell / side) % side) as isize - r;
            let k = (cell / (side * side)) as isize - r;
            let mut acc = 0.0;
            for z in overlap(dims.d, k) {
                let zs = (z as isize + k) as usize;
                for y in overlap(dims.h, i) {
                    let ys = (y as isize + i) as usize;
                    let ob = dims.index(y, 0, z);
                    let ib = dims.index(ys, 0, zs);
                    for xx in overlap(dims.w, j) {
                        acc += u[ob + xx] * xd[ib + (xx as isize + j) as usize];
                    }
                }
            }
            acc
        })
        .collect();
    Ok(grad)
}

/// dL/dX for `Z = convolve(x, Q)`: correlation of `upstream` with the flipped cube.
pub fn convolve_backward_input(upstream: &Volume, cube: &[f64], plan: &ConvPlan) -> Result<Volume> {
    let side = cube_side(cube)?;
    if side != plan.side() {
        return Err(Error::InvalidArgument(format!(
            "plan radius {} does not match filter side {side}",
            plan.radius
        )));
    }
    check_fits(upstream.dims(), side)?;
    let dims = upstream.dims();
    let data = match &plan.factors {
        Some([fy, fx, fz]) => {
            let rev = |f: &Vec<f64>| f.iter().rev().copied().collect::<Vec<_>>();
            separable(upstream.data(), dims, &rev(fy), &rev(fx), &rev(fz))
        }
        None => {
            let flipped: Vec<f64> = cube.iter().rev().copied().collect();
            direct(upstream.data(), dims, &flipped, side)
        }
    };
    Ok(Volume::new(dims, upstream.voxel_size_mm(), data).expect("same dims"))
}

/// dL/dsigma for `Z = smooth(x, filter)` given `upstream = dL/dZ`.
///
/// Equals `sum_ijk dL/dQ_ijk * dQ_ijk/dsigma`, evaluated through the product
/// rule on the 1D profile so that it costs a handful of separable passes
/// instead of a full filter-gradient correlation.
pub fn sigma_gradient(upstream: &Volume, x: &Volume, filter: &GaussianFilter) -> Result<f64> {
    upstream.check_same_dims(x)?;
    if filter.is_single_cell() {
        return Ok(0.0);
    }
    check_fits(x.dims(), filter.side())?;
    let dims = x.dims();
    let q = filter.profile();
    let dq = filter.d_profile_d_sigma();

    let ax = pass(x.data(), dims, q, Axis::X);
    let bx = pass(x.data(), dims, dq, Axis::X);
    let axy = pass(&ax, dims, q, Axis::Y);
    let mut mixed = pass(&bx, dims, q, Axis::Y);
    let adq = pass(&ax, dims, dq, Axis::Y);
    mixed.iter_mut().zip(&adq).for_each(|(m, a)| *m += a);
    let t1 = pass(&mixed, dims, q, Axis::Z);
    let t2 = pass(&axy, dims, dq, Axis::Z);
    Ok(upstream
        .data()
        .iter()
        .zip(t1.iter().zip(&t2))
        .map(|(u, (a, b))| u * (a + b))
        .sum())
}

/// Output rows `o` for which `o + offset` stays inside `0..n`.
#[inline]
fn overlap(n: usize, offset: isize) -> std::ops::Range<usize> {
    let lo = (-offset).max(0) as usize;
    let hi = (n as isize - offset.max(0)).max(0) as usize;
    lo.min(hi)..hi
}

fn direct(src: &[f64], dims: Dims, cube: &[f64], side: usize) -> Vec<f64> {
    let r = (side / 2) as isize;
    let slab = dims.w * dims.h;
    let mut out = vec![0.0; dims.len()];
    out.par_chunks_mut(slab).enumerate().for_each(|(z, dst)| {
        for k in 0..side {
            let dz = k as isize - r;
            let zs = z as isize + dz;
            if zs < 0 || zs >= dims.d as isize {
                continue;
            }
            for i in 0..side {
                let dy = i as isize - r;
                for j in 0..side {
                    let wgt = cube[(k * side + i) * side + j];
                    if wgt == 0.0 {
                        continue;
                    }
                    let dx = j as isize - r;
                    for y in overlap(dims.h, dy) {
                        let ys = (y as isize + dy) as usize;
                        let row_in = dims.index(ys, 0, zs as usize);
                        let row_out = y * dims.w;
                        for x in overlap(dims.w, dx) {
                            dst[row_out + x] += wgt * src[row_in + (x as isize + dx) as usize];
                        }
                    }
                }
            }
        }
    });
    out
}

#[derive(Debug, Clone, Copy)]
enum Axis {
    X,
    Y,
    Z,
}

fn separable(src: &[f64], dims: Dims, fy: &[f64], fx: &[f64], fz: &[f64]) -> Vec<f64> {
    let a = pass(src, dims, fx, Axis::X);
    let b = pass(&a, dims, fy, Axis::Y);
    pass(&b, dims, fz, Axis::Z)
}

/// One zero-padded 1D correlation along `axis`.
fn pass(src: &[f64], dims: Dims, kernel: &[f64], axis: Axis) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let slab = dims.w * dims.h;
    let mut out = vec![0.0; dims.len()];
    out.par_chunks_mut(slab).enumerate().for_each(|(z, dst)| match axis {
        Axis::X => {
            for y in 0..dims.h {
                let row = &src[dims.index(y, 0, z)..][..dims.w];
                let drow = &mut dst[y * dims.w..][..dims.w];
                for (t, &kv) in kernel.iter().enumerate() {
                    let dx = t as isize - r;
                    for x in overlap(dims.w, dx) {
                        drow[x] += kv * row[(x as isize + dx) as usize];
                    }
                }
            }
        }
        Axis::Y => {
            for (t, &kv) in kernel.iter().enumerate() {
                let dy = t as isize - r;
                for y in overlap(dims.h, dy) {
                    let srow = &src[dims.index((y as isize + dy) as usize, 0, z)..][..dims.w];
                    let drow = &mut dst[y * dims.w..][..dims.w];
                    for (d, s) in drow.iter_mut().zip(srow) {
                        *d += kv * s;
                    }
                }
            }
        }
        Axis::Z => {
            for (t, &kv) in kernel.iter().enumerate() {
                let zs = z as isize + t as isize - r;
                if zs < 0 || zs >= dims.d as isize {
                    continue;
                }
                let sslab = &src[zs as usize * slab..][..slab];
                for (d, s) in dst.iter_mut().zip(sslab) {
                    *d += kv * s;
                }
            }
        }
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::build_filter;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(dims: Dims, seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Volume::from_fn(dims, |_, _, _| rng.random_range(-1.0..1.0))
    }

    /// Brute-force reference straight from the defining sum.
    fn reference(x: &Volume, cube: &[f64], side: usize) -> Vec<f64> {
        let d = x.dims();
        let r = (side / 2) as isize;
        let mut out = vec![0.0; d.len()];
        for z in 0..d.d as isize {
            for y in 0..d.h as isize {
                for xx in 0..d.w as isize {
                    let mut acc = 0.0;
                    for k in -r..=r {
                        for i in -r..=r {
                            for j in -r..=r {
                                let (ys, xs, zs) = (y + i, xx + j, z + k);
                                if ys < 0 || xs < 0 || zs < 0 || ys >= d.h as isize || xs >= d.w as isize || zs >= d.d as isize {
                                    continue;
                                }
                                let c = (((k + r) as usize * side + (i + r) as usize) * side) + (j + r) as usize;
                                acc += x.get(ys as usize, xs as usize, zs as usize) * cube[c];
                            }
                        }
                    }
                    out[d.index(y as usize, xx as usize, z as usize)] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn direct_matches_reference_on_asymmetric_cube() {
        let x = random_volume(Dims::new(5, 6, 7), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cube: Vec<f64> = (0..27).map(|_| rng.random_range(-1.0..1.0)).collect();
        let z = convolve(&x, &cube, &ConvPlan::direct(1)).unwrap();
        let want = reference(&x, &cube, 3);
        for (a, b) in z.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn impulse_response_is_filter() {
        let f = build_filter(1.3, 4.0).unwrap();
        let r = f.radius();
        let mut x = Volume::zeros(Dims::cube(9));
        x.set(4, 4, 4, 1.0);
        for strategy in [Strategy::Direct, Strategy::Separable] {
            let z = convolve(&x, f.weights(), &ConvPlan::for_filter(&f, strategy)).unwrap();
            let side = f.side();
            for k in 0..side {
                for i in 0..side {
                    for j in 0..side {
                        let got = z.get(4 + i - r, 4 + j - r, 4 + k - r);
                        assert!((got - f.weights()[(k * side + i) * side + j]).abs() < 1e-15);
                    }
                }
            }
            assert!((z.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_volume_interior_preserved() {
        let f = build_filter(1.0, 4.0).unwrap();
        let x = Volume::filled(Dims::cube(10), 1.0);
        let z = smooth(&x, &f).unwrap();
        let r = f.radius();
        for zz in 0..10 {
            for y in 0..10 {
                for xx in 0..10 {
                    let v = z.get(y, xx, zz);
                    let interior = [y, xx, zz].iter().all(|&c| c >= r && c + r < 10);
                    if interior {
                        assert!((v - 1.0).abs() < 1e-9);
                    } else {
                        assert!(v < 1.0);
                    }
                }
            }
        }
    }

    #[test]
    fn separable_matches_direct() {
        let x = random_volume(Dims::cube(12), 11);
        let f = build_filter(1.0, 4.0).unwrap();
        let a = convolve(&x, f.weights(), &ConvPlan::for_filter(&f, Strategy::Direct)).unwrap();
        let b = convolve(&x, f.weights(), &ConvPlan::for_filter(&f, Strategy::Separable)).unwrap();
        let max = a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        assert!(max < 1e-5, "{max}");
    }

    #[test]
    fn from_cube_factors_rank_one() {
        let f = build_filter(0.9, 4.0).unwrap();
        let plan = ConvPlan::from_cube(f.weights(), Strategy::Separable).unwrap();
        let x = random_volume(Dims::cube(8), 5);
        let a = convolve(&x, f.weights(), &plan).unwrap();
        let b = convolve(&x, f.weights(), &ConvPlan::direct(f.radius())).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-12);
        }
        let mut bad = f.weights().to_vec();
        bad[0] += 0.1;
        assert!(ConvPlan::from_cube(&bad, Strategy::Separable).is_err());
    }

    #[test]
    fn shape_errors() {
        let x = Volume::zeros(Dims::cube(4));
        assert!(convolve(&x, &[1.0; 8], &ConvPlan::direct(1)).is_err());
        assert!(convolve(&x, &[0.0; 125], &ConvPlan::direct(2)).is_err());
        let y = Volume::zeros(Dims::cube(5));
        assert!(convolve_backward_filter(&x, &y, 1).is_err());
    }

    #[test]
    fn backward_filter_trivial_cases() {
        let x = random_volume(Dims::cube(6), 1);
        let u = Volume::zeros(Dims::cube(6));
        assert!(convolve_backward_filter(&u, &x, 1).unwrap().iter().all(|&g| g == 0.0));
        let u = random_volume(Dims::cube(6), 2);
        let g = convolve_backward_filter(&u, &x, 0).unwrap();
        assert!((g[0] - u.dot(&x)).abs() < 1e-12);
    }

    #[test]
    fn backward_input_identity_filter() {
        let u = random_volume(Dims::cube(5), 8);
        let g = convolve_backward_input(&u, &[1.0], &ConvPlan::direct(0)).unwrap();
        assert_eq!(g, u);
        let zero = Volume::zeros(Dims::cube(5));
        let f = build_filter(0.8, 4.0).unwrap();
        let g = convolve_backward_input(&zero, f.weights(), &ConvPlan::direct(f.radius())).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sigma_gradient_matches_filter_chain_rule() {
        let x = random_volume(Dims::cube(9), 21);
        let u = random_volume(Dims::cube(9), 22);
        let f = build_filter(1.2, 4.0).unwrap();
        let dq = convolve_backward_filter(&u, &x, f.radius()).unwrap();
        let want: f64 = dq.iter().zip(f.d_weights_d_sigma()).map(|(a, b)| a * b).sum();
        let got = sigma_gradient(&u, &x, &f).unwrap();
        assert!((got - want).abs() <= 1e-10 * want.abs().max(1.0), "{got} vs {want}");
    }

    #[test]
    fn linearity() {
        let x = random_volume(Dims::cube(7), 31);
        let y = random_volume(Dims::cube(7), 32);
        let f = build_filter(1.1, 4.0).unwrap();
        let combo = Volume::new(
            x.dims(),
            3.0,
            x.data().iter().zip(y.data()).map(|(a, b)| 2.0 * a - 0.5 * b).collect(),
        )
        .unwrap();
        let (zx, zy, zc) = (smooth(&x, &f).unwrap(), smooth(&y, &f).unwrap(), smooth(&combo, &f).unwrap());
        for i in 0..zc.len() {
            assert!((zc.data()[i] - (2.0 * zx.data()[i] - 0.5 * zy.data()[i])).abs() < 1e-9);
        }
    }
}
