//! Stochastic view generation (flips, quarter-turn rotations, a curated
//! RandAugment subset) and the sample-mixing procedures: sum augmentation,
//! the cascading halving schedule, and test-time sum augmentation.
//!
//! All ops map intensities in [0,1] back into [0,1]; geometric ops permute
//! values exactly. Spatial axes are addressed from the end, so `axis 0` is
//! width and `axis 1` is height for both images `[C,H,W]` and volumes
//! `[C,D,H,W]`, and `axis 2` is depth for volumes.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::model::{Medformer, ModelError};
use crate::tensor::{no_grad, Scalar, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("input error: {0}")]
    Input(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn input_err(msg: impl Into<String>) -> AugmentError {
    AugmentError::Input(msg.into())
}

fn param_err(msg: impl Into<String>) -> AugmentError {
    AugmentError::Parameter(msg.into())
}

/// One augmentation step. Geometric ops take spatial axes counted from the
/// end of the shape (0 = width).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AugOp {
    /// Reverse one spatial axis with probability `p`.
    Flip { axis: usize, p: f64 },
    /// `k` quarter turns in the plane of two spatial axes.
    Rot90 { axes: (usize, usize), k: usize },
    /// Add per-voxel Gaussian noise with deviation `sigma`, clamped to [0,1].
    IntensityJitter { sigma: f64 },
    /// `n` random draws from the curated 8-op set at magnitude `m` in 0..=10.
    RandAugment { n: usize, m: usize },
}

impl AugOp {
    pub fn hflip(p: f64) -> Self {
        AugOp::Flip { axis: 0, p }
    }

    pub fn vflip(p: f64) -> Self {
        AugOp::Flip { axis: 1, p }
    }

    /// In-plane (height, width) rotation by `k` quarter turns.
    pub fn rot90(k: usize) -> Self {
        AugOp::Rot90 { axes: (1, 0), k }
    }
}

/// An ordered list of augmentation ops applied left to right.
#[derive(Clone, Debug, PartialEq)]
pub struct AugPipeline {
    pub ops: Vec<AugOp>,
}

impl AugPipeline {
    pub fn new(ops: Vec<AugOp>) -> Self {
        AugPipeline { ops }
    }

    /// The default training pipeline: both in-plane flips at 1/2 plus
    /// RandAugment(2, 8). Valid for images and volumes.
    pub fn standard() -> Self {
        AugPipeline::new(vec![
            AugOp::hflip(0.5),
            AugOp::vflip(0.5),
            AugOp::RandAugment { n: 2, m: 8 },
        ])
    }

    /// Apply every op in order. Deterministic under a fixed rng.
    pub fn apply<T: Scalar>(
        &self,
        x: &Tensor<T>,
        rng: &mut impl Rng,
    ) -> Result<Tensor<T>, AugmentError> {
        let mut cur = x.clone();
        for op in &self.ops {
            cur = apply_op(&cur, *op, rng)?;
        }
        Ok(cur)
    }
}

fn apply_op<T: Scalar>(
    x: &Tensor<T>,
    op: AugOp,
    rng: &mut impl Rng,
) -> Result<Tensor<T>, AugmentError> {
    match op {
        AugOp::Flip { axis, p } => {
            if !(0.0..=1.0).contains(&p) {
                return Err(param_err(format!("flip probability {p} outside [0,1]")));
            }
            let full = full_axis(x, axis)?;
            if rng.random::<f64>() < p {
                Ok(flip(x, full))
            } else {
                Ok(x.clone())
            }
        }
        AugOp::Rot90 { axes, k } => {
            if k > 3 {
                return Err(param_err(format!("rot90 takes 0..=3 quarter turns, got {k}")));
            }
            let (a, b) = (full_axis(x, axes.0)?, full_axis(x, axes.1)?);
            if a == b {
                return Err(param_err("rot90 needs two distinct axes".to_string()));
            }
            let mut cur = x.clone();
            for _ in 0..k {
                cur = quarter_turn(&cur, a, b);
            }
            Ok(cur)
        }
        AugOp::IntensityJitter { sigma } => {
            if !(sigma >= 0.0 && sigma.is_finite()) {
                return Err(param_err(format!("jitter deviation {sigma} must be finite and ≥ 0")));
            }
            let normal = Normal::new(0.0, sigma).expect("validated deviation");
            Ok(map_clamped(x, |v| v + normal.sample(rng)))
        }
        AugOp::RandAugment { n, m } => rand_augment(x, n, m, rng),
    }
}

/// The curated magnitude-scaled set: in-plane flips and rotations, an axis
/// shift, brightness, contrast, gamma, and Gaussian noise — all safe for
/// single-channel intensities.
fn rand_augment<T: Scalar>(
    x: &Tensor<T>,
    n: usize,
    m: usize,
    rng: &mut impl Rng,
) -> Result<Tensor<T>, AugmentError> {
    if m > 10 {
        return Err(param_err(format!("magnitude {m} outside 0..=10")));
    }
    let mag = m as f64 / 10.0;
    let mut cur = x.clone();
    for _ in 0..n {
        let spatial = cur.shape().len() - 1;
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        cur = match rng.random_range(0..8u32) {
            0 => flip(&cur, full_axis(&cur, 0)?),
            1 => flip(&cur, full_axis(&cur, 1)?),
            2 => {
                let (a, b) = (full_axis(&cur, 1)?, full_axis(&cur, 0)?);
                let mut r = cur.clone();
                for _ in 0..rng.random_range(1..4u32) {
                    r = quarter_turn(&r, a, b);
                }
                r
            }
            3 => {
                let axis = full_axis(&cur, rng.random_range(0..spatial))?;
                let extent = cur.shape()[axis];
                let shift = (mag * 0.25 * extent as f64).round() as isize;
                translate(&cur, axis, sign as isize * shift)
            }
            4 => map_clamped(&cur, |v| v + sign * mag * 0.3),
            5 => map_clamped(&cur, |v| 0.5 + (v - 0.5) * (1.0 + sign * mag * 0.5)),
            6 => {
                let gamma = if sign > 0.0 { 1.0 + mag } else { 1.0 / (1.0 + mag) };
                map_clamped(&cur, |v| v.max(0.0).powf(gamma))
            }
            _ => {
                let normal = Normal::new(0.0, mag * 0.1).expect("nonnegative deviation");
                map_clamped(&cur, |v| v + normal.sample(rng))
            }
        };
    }
    Ok(cur)
}

/// Resolve a from-the-end spatial axis to an absolute axis, keeping the
/// channel axis out of reach.
fn full_axis<T: Scalar>(x: &Tensor<T>, from_end: usize) -> Result<usize, AugmentError> {
    let rank = x.shape().len();
    if rank < 2 || from_end + 2 > rank {
        return Err(param_err(format!(
            "spatial axis {from_end} does not exist on a sample of shape {:?}",
            x.shape()
        )));
    }
    Ok(rank - 1 - from_end)
}

/// Rebuild a tensor by pulling each output element from an input index; the
/// closure fills the input index and returns false for zero-fill positions.
fn remap<T: Scalar>(
    x: &Tensor<T>,
    out_shape: Vec<usize>,
    f: impl Fn(&[usize], &mut [usize]) -> bool,
) -> Tensor<T> {
    let in_shape = x.shape().to_vec();
    let data = x.data();
    let rank = out_shape.len();
    let total: usize = out_shape.iter().product();
    let mut out = Vec::with_capacity(total);
    let mut oi = vec![0usize; rank];
    let mut ii = vec![0usize; rank];
    for flat in 0..total {
        let mut rem = flat;
        for a in (0..rank).rev() {
            oi[a] = rem % out_shape[a];
            rem /= out_shape[a];
        }
        if f(&oi, &mut ii) {
            let mut idx = 0;
            for a in 0..rank {
                idx = idx * in_shape[a] + ii[a];
            }
            out.push(data[idx]);
        } else {
            out.push(T::zero());
        }
    }
    drop(data);
    Tensor::from_vec(out, &out_shape).expect("remap preserves element count")
}

fn flip<T: Scalar>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let extent = x.shape()[axis];
    remap(x, x.shape().to_vec(), |o, i| {
        i.copy_from_slice(o);
        i[axis] = extent - 1 - o[axis];
        true
    })
}

/// One 90° turn in the (a, b) plane: `out[i][j] = in[j][N−1−i]` with
/// N = extent of axis b, so the two extents swap.
fn quarter_turn<T: Scalar>(x: &Tensor<T>, a: usize, b: usize) -> Tensor<T> {
    let n = x.shape()[b];
    let mut out_shape = x.shape().to_vec();
    out_shape.swap(a, b);
    remap(x, out_shape, |o, i| {
        i.copy_from_slice(o);
        i[a] = o[b];
        i[b] = n - 1 - o[a];
        true
    })
}

fn translate<T: Scalar>(x: &Tensor<T>, axis: usize, shift: isize) -> Tensor<T> {
    let extent = x.shape()[axis] as isize;
    remap(x, x.shape().to_vec(), |o, i| {
        i.copy_from_slice(o);
        let src = o[axis] as isize - shift;
        if (0..extent).contains(&src) {
            i[axis] = src as usize;
            true
        } else {
            false
        }
    })
}

fn map_clamped<T: Scalar>(x: &Tensor<T>, mut f: impl FnMut(f64) -> f64) -> Tensor<T> {
    let data: Vec<T> = x
        .data()
        .iter()
        .map(|v| T::cast(f(v.as_f64()).clamp(0.0, 1.0)))
        .collect();
    Tensor::from_vec(data, x.shape()).expect("shape unchanged")
}

/// Average `K` samples and their label vectors elementwise.
pub fn sum_augment<T: Scalar>(
    xs: &[Tensor<T>],
    ys: &[Vec<f64>],
) -> Result<(Tensor<T>, Vec<f64>), AugmentError> {
    if xs.is_empty() {
        return Err(input_err("sum augmentation needs at least one sample"));
    }
    if xs.len() != ys.len() {
        return Err(input_err(format!(
            "{} samples but {} label vectors",
            xs.len(),
            ys.len()
        )));
    }
    let shape = xs[0].shape().to_vec();
    let width = ys[0].len();
    for (i, (x, y)) in xs.iter().zip(ys).enumerate() {
        if x.shape() != shape {
            return Err(input_err(format!(
                "sample {i} has shape {:?}, expected {shape:?}",
                x.shape()
            )));
        }
        if y.len() != width {
            return Err(input_err(format!(
                "label {i} has {} entries, expected {width}",
                y.len()
            )));
        }
    }
    let k = xs.len() as f64;
    let mut acc = vec![0.0f64; xs[0].len()];
    for x in xs {
        for (a, v) in acc.iter_mut().zip(x.data().iter()) {
            *a += v.as_f64();
        }
    }
    let x_new = Tensor::from_vec(acc.iter().map(|&v| T::cast(v / k)).collect(), &shape)?;
    let y_new = (0..width)
        .map(|j| ys.iter().map(|y| y[j]).sum::<f64>() / k)
        .collect();
    Ok((x_new, y_new))
}

/// The halving schedule `[K0, K0/2, …, 2, 1]` used by cascading sum
/// augmentation.
pub fn cascade_schedule(k0: usize) -> Result<Vec<usize>, AugmentError> {
    if k0 == 0 || !k0.is_power_of_two() {
        return Err(param_err(format!(
            "cascade start {k0} must be a power of two ≥ 1"
        )));
    }
    let mut schedule = Vec::new();
    let mut k = k0;
    while k >= 1 {
        schedule.push(k);
        if k == 1 {
            break;
        }
        k /= 2;
    }
    Ok(schedule)
}

/// Average the model's logits over `reps` hybrids, each mixing `x` with
/// `K−1` uniform pool draws. `K = 1` is exactly a plain forward pass.
pub fn test_time_sum_augment<T: Scalar>(
    model: &Medformer<T>,
    task: &str,
    x: &Tensor<T>,
    pool: &[Tensor<T>],
    k: usize,
    reps: usize,
    rng: &mut impl Rng,
) -> Result<Tensor<T>, AugmentError> {
    if k == 0 || reps == 0 {
        return Err(param_err(format!(
            "group size {k} and repetitions {reps} must both be ≥ 1"
        )));
    }
    if k == 1 {
        return Ok(model.forward(x, task)?);
    }
    if pool.is_empty() {
        return Err(input_err("test-time sum augmentation needs a partner pool for K > 1"));
    }
    no_grad(|| {
        let mut acc: Option<Vec<f64>> = None;
        for _ in 0..reps {
            let mut mix: Vec<f64> = x.data().iter().map(|v| v.as_f64()).collect();
            for _ in 0..k - 1 {
                let partner = &pool[rng.random_range(0..pool.len())];
                if partner.shape() != x.shape() {
                    return Err(input_err(format!(
                        "pool sample has shape {:?}, expected {:?}",
                        partner.shape(),
                        x.shape()
                    )));
                }
                for (m, v) in mix.iter_mut().zip(partner.data().iter()) {
                    *m += v.as_f64();
                }
            }
            let hybrid = Tensor::from_vec(
                mix.iter().map(|&v| T::cast(v / k as f64)).collect(),
                x.shape(),
            )?;
            let logits: Vec<f64> = model
                .forward(&hybrid, task)?
                .data()
                .iter()
                .map(|v| v.as_f64())
                .collect();
            match &mut acc {
                None => acc = Some(logits),
                Some(a) => a.iter_mut().zip(logits).for_each(|(a, l)| *a += l),
            }
        }
        let a = acc.expect("reps ≥ 1");
        let out = a.iter().map(|&v| T::cast(v / reps as f64)).collect();
        let width = a.len();
        Ok(Tensor::from_vec(out, &[1, width])?)
    })
}
