//! Differentiable tensor operations.
//!
//! Elementwise binary ops broadcast with trailing alignment: operands must
//! have identical shapes, or one side must be a scalar (`[1]`) or — after
//! ignoring leading 1-sized axes — a trailing suffix of the other's shape
//! (`[n, d] ⊕ [d]`, `[n, d] ⊕ [1, d]`). Row-major layout makes the smaller
//! operand repeat contiguously, and its adjoint folds back by summation.

use std::rc::Rc;

use super::{OpResult, Scalar, Tensor, TensorError};

/// How two operand buffers line up elementwise.
struct Broadcast {
    shape: Vec<usize>,
    len: usize,
    lhs_len: usize,
    rhs_len: usize,
}

fn strip_leading_ones(shape: &[usize]) -> &[usize] {
    let start = shape.iter().take_while(|&&d| d == 1).count();
    // Keep at least one axis so `[1]` stays a scalar shape, not `[]`.
    &shape[start.min(shape.len().saturating_sub(1))..]
}

fn broadcast<T: Scalar>(
    op: &'static str,
    lhs: &Tensor<T>,
    rhs: &Tensor<T>,
) -> Result<Broadcast, TensorError> {
    let (ls, rs) = (lhs.shape(), rhs.shape());
    let compatible = if lhs.len() >= rhs.len() {
        rhs.len() == 1 || strip_leading_ones(ls).ends_with(strip_leading_ones(rs))
    } else {
        lhs.len() == 1 || strip_leading_ones(rs).ends_with(strip_leading_ones(ls))
    };
    if !compatible {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: ls.to_vec(),
            rhs: rs.to_vec(),
        });
    }
    let out = if lhs.len() >= rhs.len() { ls } else { rs };
    Ok(Broadcast {
        shape: out.to_vec(),
        len: out.iter().product(),
        lhs_len: lhs.len(),
        rhs_len: rhs.len(),
    })
}

impl<T: Scalar> Tensor<T> {
    fn binary_op(
        &self,
        rhs: &Tensor<T>,
        op: &'static str,
        f: impl Fn(T, T) -> T,
        dl: impl Fn(T, T) -> T + 'static,
        dr: impl Fn(T, T) -> T + 'static,
    ) -> OpResult<T> {
        let bc = broadcast(op, self, rhs)?;
        let out = {
            let (a, b) = (self.data(), rhs.data());
            (0..bc.len)
                .map(|i| f(a[i % bc.lhs_len], b[i % bc.rhs_len]))
                .collect()
        };
        let (lt, rt) = (self.clone(), rhs.clone());
        let (ll, rl, n) = (bc.lhs_len, bc.rhs_len, bc.len);
        Tensor::from_op(
            out,
            bc.shape,
            op,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g, bufs| {
                let (a, b) = (lt.data(), rt.data());
                for i in 0..n {
                    let (x, y) = (a[i % ll], b[i % rl]);
                    bufs[0][i % ll] = bufs[0][i % ll] + g[i] * dl(x, y);
                    bufs[1][i % rl] = bufs[1][i % rl] + g[i] * dr(x, y);
                }
            }),
        )
    }

    /// Elementwise sum with trailing broadcast.
    pub fn add(&self, rhs: &Tensor<T>) -> OpResult<T> {
        self.binary_op(rhs, "add", |x, y| x + y, |_, _| T::one(), |_, _| T::one())
    }

    /// Elementwise difference with trailing broadcast.
    pub fn sub(&self, rhs: &Tensor<T>) -> OpResult<T> {
        self.binary_op(rhs, "sub", |x, y| x - y, |_, _| T::one(), |_, _| -T::one())
    }

    /// Elementwise product with trailing broadcast.
    pub fn mul(&self, rhs: &Tensor<T>) -> OpResult<T> {
        self.binary_op(rhs, "mul", |x, y| x * y, |_, y| y, |x, _| x)
    }

    /// Elementwise quotient with trailing broadcast. Division by zero
    /// surfaces as a non-finite-result error.
    pub fn div(&self, rhs: &Tensor<T>) -> OpResult<T> {
        self.binary_op(
            rhs,
            "div",
            |x, y| x / y,
            |_, y| T::one() / y,
            |x, y| -x / (y * y),
        )
    }

    fn unary_from_x(
        &self,
        op: &'static str,
        f: impl Fn(T) -> T,
        df: impl Fn(T) -> T + 'static,
    ) -> OpResult<T> {
        let out = self.data().iter().map(|&x| f(x)).collect();
        let xt = self.clone();
        Tensor::from_op(
            out,
            self.shape().to_vec(),
            op,
            vec![self.clone()],
            Box::new(move |g, bufs| {
                let x = xt.data();
                for i in 0..g.len() {
                    bufs[0][i] = bufs[0][i] + g[i] * df(x[i]);
                }
            }),
        )
    }

    fn unary_from_y(
        &self,
        op: &'static str,
        f: impl Fn(T) -> T,
        df: impl Fn(T) -> T + 'static,
    ) -> OpResult<T> {
        let out: Vec<T> = self.data().iter().map(|&x| f(x)).collect();
        let y: Rc<[T]> = out.clone().into();
        Tensor::from_op(
            out,
            self.shape().to_vec(),
            op,
            vec![self.clone()],
            Box::new(move |g, bufs| {
                for i in 0..g.len() {
                    bufs[0][i] = bufs[0][i] + g[i] * df(y[i]);
                }
            }),
        )
    }

    /// Add a constant to every element.
    pub fn add_scalar(&self, c: T) -> OpResult<T> {
        self.unary_from_x("add_scalar", |x| x + c, |_| T::one())
    }

    /// Multiply every element by a constant.
    pub fn mul_scalar(&self, c: T) -> OpResult<T> {
        self.unary_from_x("mul_scalar", move |x| x * c, move |_| c)
    }

    pub fn neg(&self) -> OpResult<T> {
        self.mul_scalar(-T::one())
    }

    pub fn exp(&self) -> OpResult<T> {
        self.unary_from_y("exp", |x| x.exp(), |y| y)
    }

    /// Natural logarithm.
    pub fn log(&self) -> OpResult<T> {
        self.unary_from_x("log", |x| x.ln(), |x| T::one() / x)
    }

    pub fn sqrt(&self) -> OpResult<T> {
        self.unary_from_y("sqrt", |x| x.sqrt(), |y| {
            T::one() / (T::cast(2.0) * y)
        })
    }

    pub fn tanh(&self) -> OpResult<T> {
        self.unary_from_y("tanh", |x| x.tanh(), |y| T::one() - y * y)
    }

    pub fn sigmoid(&self) -> OpResult<T> {
        self.unary_from_y(
            "sigmoid",
            |x| T::one() / (T::one() + (-x).exp()),
            |y| y * (T::one() - y),
        )
    }

    /// `ln(1 + eˣ)` in the overflow-safe form `max(x,0) + ln(1 + e^(−|x|))`;
    /// derivative sigmoid(x).
    pub fn softplus(&self) -> OpResult<T> {
        self.unary_from_x(
            "softplus",
            |x| {
                let pos = if x > T::zero() { x } else { T::zero() };
                pos + (-x.abs()).exp().ln_1p()
            },
            |x| T::one() / (T::one() + (-x).exp()),
        )
    }

    /// Rectified linear unit; the subgradient at 0 is taken as 0.
    pub fn relu(&self) -> OpResult<T> {
        self.unary_from_x(
            "relu",
            |x| if x > T::zero() { x } else { T::zero() },
            |x| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    /// Gaussian error linear unit, tanh approximation:
    /// `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(&self) -> OpResult<T> {
        fn val<T: Scalar>(x: T) -> T {
            let c = T::cast((2.0 / std::f64::consts::PI).sqrt());
            let k = T::cast(0.044715);
            let half = T::cast(0.5);
            half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
        }
        fn deriv<T: Scalar>(x: T) -> T {
            let c = T::cast((2.0 / std::f64::consts::PI).sqrt());
            let k = T::cast(0.044715);
            let half = T::cast(0.5);
            let three = T::cast(3.0);
            let u = c * (x + k * x * x * x);
            let t = u.tanh();
            let sech2 = T::one() - t * t;
            half * (T::one() + t) + half * x * sech2 * c * (T::one() + three * k * x * x)
        }
        self.unary_from_x("gelu", val::<T>, deriv::<T>)
    }

    /// Elementwise power with constant exponent.
    pub fn powf(&self, p: T) -> OpResult<T> {
        self.unary_from_x(
            "powf",
            move |x| x.powf(p),
            move |x| p * x.powf(p - T::one()),
        )
    }

    /// 2-D matrix product `[m, k] · [k, n] -> [m, n]`, accumulated in `f64`.
    pub fn matmul(&self, rhs: &Tensor<T>) -> OpResult<T> {
        let (ls, rs) = (self.shape(), rhs.shape());
        if ls.len() != 2 || rs.len() != 2 || ls[1] != rs[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ls.to_vec(),
                rhs: rs.to_vec(),
            });
        }
        let (m, k, n) = (ls[0], ls[1], rs[1]);
        let out = {
            let (a, b) = (self.data(), rhs.data());
            let mut out = vec![T::zero(); m * n];
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0f64;
                    for p in 0..k {
                        acc += a[i * k + p].as_f64() * b[p * n + j].as_f64();
                    }
                    out[i * n + j] = T::cast(acc);
                }
            }
            out
        };
        let (lt, rt) = (self.clone(), rhs.clone());
        Tensor::from_op(
            out,
            vec![m, n],
            "matmul",
            vec![self.clone(), rhs.clone()],
            Box::new(move |g, bufs| {
                let (a, b) = (lt.data(), rt.data());
                // dA = G · Bᵀ
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = 0.0f64;
                        for j in 0..n {
                            acc += g[i * n + j].as_f64() * b[p * n + j].as_f64();
                        }
                        bufs[0][i * k + p] = bufs[0][i * k + p] + T::cast(acc);
                    }
                }
                // dB = Aᵀ · G
                for p in 0..k {
                    for j in 0..n {
                        let mut acc = 0.0f64;
                        for i in 0..m {
                            acc += a[i * k + p].as_f64() * g[i * n + j].as_f64();
                        }
                        bufs[1][p * n + j] = bufs[1][p * n + j] + T::cast(acc);
                    }
                }
            }),
        )
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> OpResult<T> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "transpose",
                shape: s.to_vec(),
                msg: "expected rank 2".into(),
            });
        }
        let (r, c) = (s[0], s[1]);
        let out = {
            let a = self.data();
            let mut out = vec![T::zero(); r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = a[i * c + j];
                }
            }
            out
        };
        Tensor::from_op(
            out,
            vec![c, r],
            "transpose",
            vec![self.clone()],
            Box::new(move |g, bufs| {
                for i in 0..r {
                    for j in 0..c {
                        bufs[0][i * c + j] = bufs[0][i * c + j] + g[j * r + i];
                    }
                }
            }),
        )
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> OpResult<T> {
        if shape.iter().product::<usize>() != self.len() {
            return Err(TensorError::InvalidShape {
                op: "reshape",
                shape: self.shape().to_vec(),
                msg: format!("cannot reshape to {shape:?}"),
            });
        }
        Tensor::from_op(
            self.to_vec(),
            shape.to_vec(),
            "reshape",
            vec![self.clone()],
            Box::new(move |g, bufs| {
                for i in 0..g.len() {
                    bufs[0][i] = bufs[0][i] + g[i];
                }
            }),
        )
    }

    /// Contiguous slice `start..start+len` along one axis of a 2-D tensor.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> OpResult<T> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "narrow",
                shape: s.to_vec(),
                msg: "expected rank 2".into(),
            });
        }
        if axis > 1 {
            return Err(TensorError::AxisOutOfRange {
                op: "narrow",
                axis,
                rank: 2,
            });
        }
        if start + len > s[axis] || len == 0 {
            return Err(TensorError::InvalidShape {
                op: "narrow",
                shape: s.to_vec(),
                msg: format!("range {start}..{} exceeds axis {axis}", start + len),
            });
        }
        let (r, c) = (s[0], s[1]);
        let out_shape = if axis == 0 {
            vec![len, c]
        } else {
            vec![r, len]
        };
        let out = {
            let a = self.data();
            let mut out = Vec::with_capacity(len * if axis == 0 { c } else { r });
            if axis == 0 {
                out.extend_from_slice(&a[start * c..(start + len) * c]);
            } else {
                for i in 0..r {
                    out.extend_from_slice(&a[i * c + start..i * c + start + len]);
                }
            }
            out
        };
        Tensor::from_op(
            out,
            out_shape,
            "narrow",
            vec![self.clone()],
            Box::new(move |g, bufs| {
                if axis == 0 {
                    for (i, gv) in g.iter().enumerate() {
                        bufs[0][start * c + i] = bufs[0][start * c + i] + *gv;
                    }
                } else {
                    for i in 0..r {
                        for j in 0..len {
                            let idx = i * c + start + j;
                            bufs[0][idx] = bufs[0][idx] + g[i * len + j];
                        }
                    }
                }
            }),
        )
    }

    /// Concatenate 2-D tensors along `axis` (0 = stack rows, 1 = widen).
    pub fn concat(axis: usize, parts: &[Tensor<T>]) -> OpResult<T> {
        if parts.is_empty() {
            return Err(TensorError::Invalid {
                op: "concat",
                msg: "no tensors given".into(),
            });
        }
        if axis > 1 {
            return Err(TensorError::AxisOutOfRange {
                op: "concat",
                axis,
                rank: 2,
            });
        }
        let other = 1 - axis;
        let first = parts[0].shape().to_vec();
        for p in parts {
            if p.rank() != 2 || p.shape()[other] != first[other] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
        let mut shape = first.clone();
        shape[axis] = total;
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let out = if axis == 0 {
            let mut out = Vec::with_capacity(total * first[1]);
            for p in parts {
                out.extend_from_slice(&p.data());
            }
            out
        } else {
            let rows = first[0];
            let mut out = Vec::with_capacity(rows * total);
            for i in 0..rows {
                for p in parts {
                    let w = p.shape()[1];
                    out.extend_from_slice(&p.data()[i * w..(i + 1) * w]);
                }
            }
            out
        };
        let rows = first[0];
        let cols = first[1];
        Tensor::from_op(
            out,
            shape,
            "concat",
            parts.to_vec(),
            Box::new(move |g, bufs| {
                if axis == 0 {
                    let mut offset = 0;
                    for (pi, &r) in sizes.iter().enumerate() {
                        for i in 0..r * cols {
                            bufs[pi][i] = bufs[pi][i] + g[offset + i];
                        }
                        offset += r * cols;
                    }
                } else {
                    let total: usize = sizes.iter().sum();
                    for i in 0..rows {
                        let mut offset = 0;
                        for (pi, &w) in sizes.iter().enumerate() {
                            for j in 0..w {
                                bufs[pi][i * w + j] =
                                    bufs[pi][i * w + j] + g[i * total + offset + j];
                            }
                            offset += w;
                        }
                    }
                }
            }),
        )
    }

    /// Softmax along `axis` of a 2-D tensor, with per-lane max subtraction
    /// for stability and `f64` accumulation of the normalizer.
    pub fn softmax(&self, axis: usize) -> OpResult<T> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "softmax",
                shape: s.to_vec(),
                msg: "expected rank 2".into(),
            });
        }
        if axis > 1 {
            return Err(TensorError::AxisOutOfRange {
                op: "softmax",
                axis,
                rank: 2,
            });
        }
        let (r, c) = (s[0], s[1]);
        // Lane geometry: `lanes` independent softmaxes of length `k`,
        // elements strided by `stride`.
        let (lanes, k, lane_step, stride) = if axis == 1 {
            (r, c, c, 1)
        } else {
            (c, r, 1, c)
        };
        let mut out = vec![T::zero(); r * c];
        {
            let a = self.data();
            for lane in 0..lanes {
                let base = lane * lane_step;
                let mut max = f64::NEG_INFINITY;
                for i in 0..k {
                    max = max.max(a[base + i * stride].as_f64());
                }
                let mut sum = 0.0f64;
                for i in 0..k {
                    let e = (a[base + i * stride].as_f64() - max).exp();
                    out[base + i * stride] = T::cast(e);
                    sum += e;
                }
                for i in 0..k {
                    let idx = base + i * stride;
                    out[idx] = T::cast(out[idx].as_f64() / sum);
                }
            }
        }
        let y: Rc<[T]> = out.clone().into();
        Tensor::from_op(
            out,
            s.to_vec(),
            "softmax",
            vec![self.clone()],
            Box::new(move |g, bufs| {
                for lane in 0..lanes {
                    let base = lane * lane_step;
                    let mut dot = 0.0f64;
                    for i in 0..k {
                        let idx = base + i * stride;
                        dot += g[idx].as_f64() * y[idx].as_f64();
                    }
                    for i in 0..k {
                        let idx = base + i * stride;
                        let d = y[idx].as_f64() * (g[idx].as_f64() - dot);
                        bufs[0][idx] = bufs[0][idx] + T::cast(d);
                    }
                }
            }),
        )
    }

    /// Layer normalization over the last axis of a 2-D tensor with learned
    /// per-feature scale and shift. Row statistics use the population
    /// variance, accumulated in `f64`.
    pub fn layer_norm(&self, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> OpResult<T> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "layer_norm",
                shape: s.to_vec(),
                msg: "expected rank 2".into(),
            });
        }
        let (n, d) = (s[0], s[1]);
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: s.to_vec(),
                rhs: gamma.shape().to_vec(),
            });
        }
        let mut out = vec![T::zero(); n * d];
        let mut xhat = vec![0.0f64; n * d];
        let mut inv_std = vec![0.0f64; n];
        {
            let (x, g, b) = (self.data(), gamma.data(), beta.data());
            for i in 0..n {
                let row = &x[i * d..(i + 1) * d];
                let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64;
                let var = row
                    .iter()
                    .map(|v| (v.as_f64() - mean).powi(2))
                    .sum::<f64>()
                    / d as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[i] = is;
                for j in 0..d {
                    let xh = (row[j].as_f64() - mean) * is;
                    xhat[i * d + j] = xh;
                    out[i * d + j] = T::cast(xh * g[j].as_f64() + b[j].as_f64());
                }
            }
        }
        let xhat: Rc<[f64]> = xhat.into();
        let inv_std: Rc<[f64]> = inv_std.into();
        let gt = gamma.clone();
        Tensor::from_op(
            out,
            s.to_vec(),
            "layer_norm",
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g, bufs| {
                let gamma = gt.data();
                for i in 0..n {
                    let mut mean_h = 0.0f64;
                    let mut mean_hx = 0.0f64;
                    for j in 0..d {
                        let h = gamma[j].as_f64() * g[i * d + j].as_f64();
                        mean_h += h;
                        mean_hx += h * xhat[i * d + j];
                    }
                    mean_h /= d as f64;
                    mean_hx /= d as f64;
                    for j in 0..d {
                        let idx = i * d + j;
                        let h = gamma[j].as_f64() * g[idx].as_f64();
                        let dx = (h - mean_h - xhat[idx] * mean_hx) * inv_std[i];
                        bufs[0][idx] = bufs[0][idx] + T::cast(dx);
                        bufs[1][j] = bufs[1][j] + T::cast(g[idx].as_f64() * xhat[idx]);
                        bufs[2][j] = bufs[2][j] + g[idx];
                    }
                }
            }),
        )
    }

    /// Sum of all elements as a `[1]` scalar, accumulated in `f64`.
    pub fn sum(&self) -> OpResult<T> {
        let total: f64 = self.data().iter().map(|v| v.as_f64()).sum();
        Tensor::from_op(
            vec![T::cast(total)],
            vec![1],
            "sum",
            vec![self.clone()],
            Box::new(move |g, bufs| {
                for b in bufs[0].iter_mut() {
                    *b = *b + g[0];
                }
            }),
        )
    }

    /// Mean of all elements as a `[1]` scalar, accumulated in `f64`.
    pub fn mean(&self) -> OpResult<T> {
        if self.is_empty() {
            return Err(TensorError::Invalid {
                op: "mean",
                msg: "mean of an empty tensor".into(),
            });
        }
        let n = self.len();
        let total: f64 = self.data().iter().map(|v| v.as_f64()).sum();
        Tensor::from_op(
            vec![T::cast(total / n as f64)],
            vec![1],
            "mean",
            vec![self.clone()],
            Box::new(move |g, bufs| {
                let w = T::cast(1.0 / n as f64);
                for b in bufs[0].iter_mut() {
                    *b = *b + g[0] * w;
                }
            }),
        )
    }

    /// Sum along one axis of a 2-D tensor, keeping the reduced axis with
    /// size 1 (`[n, d] -> [1, d]` or `[n, 1]`).
    pub fn sum_axis(&self, axis: usize) -> OpResult<T> {
        self.reduce_axis(axis, "sum_axis", false)
    }

    /// Mean along one axis of a 2-D tensor, keeping the reduced axis.
    pub fn mean_axis(&self, axis: usize) -> OpResult<T> {
        self.reduce_axis(axis, "mean_axis", true)
    }

    fn reduce_axis(&self, axis: usize, op: &'static str, mean: bool) -> OpResult<T> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(TensorError::InvalidShape {
                op,
                shape: s.to_vec(),
                msg: "expected rank 2".into(),
            });
        }
        if axis > 1 {
            return Err(TensorError::AxisOutOfRange { op, axis, rank: 2 });
        }
        let (r, c) = (s[0], s[1]);
        let count = s[axis];
        let scale = if mean { 1.0 / count as f64 } else { 1.0 };
        let (out_shape, out_len) = if axis == 0 {
            (vec![1, c], c)
        } else {
            (vec![r, 1], r)
        };
        let out = {
            let a = self.data();
            let mut acc = vec![0.0f64; out_len];
            for i in 0..r {
                for j in 0..c {
                    let o = if axis == 0 { j } else { i };
                    acc[o] += a[i * c + j].as_f64();
                }
            }
            acc.into_iter().map(|v| T::cast(v * scale)).collect()
        };
        Tensor::from_op(
            out,
            out_shape,
            op,
            vec![self.clone()],
            Box::new(move |g, bufs| {
                let w = T::cast(scale);
                for i in 0..r {
                    for j in 0..c {
                        let o = if axis == 0 { j } else { i };
                        bufs[0][i * c + j] = bufs[0][i * c + j] + g[o] * w;
                    }
                }
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::super::{finite_diff_grad, max_rel_err, Tensor, TensorError};

    fn t(data: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::from_vec(data.to_vec(), shape).unwrap()
    }

    fn assert_close(actual: &[f64], expect: &[f64], tol: f64) {
        assert_eq!(actual.len(), expect.len());
        for (i, (a, e)) in actual.iter().zip(expect).enumerate() {
            assert!(
                (a - e).abs() <= tol,
                "element {i}: {a} vs {e} (tol {tol})"
            );
        }
    }

    #[test]
    fn add_broadcasts_a_row_vector() {
        let x = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let b = t(&[10.0, 20.0, 30.0], &[3]);
        let y = x.add(&b).unwrap();
        assert_eq!(y.shape(), &[2, 3]);
        assert_eq!(y.to_vec(), vec![11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        // Leading size-1 axis broadcasts the same way.
        let b2 = t(&[10.0, 20.0, 30.0], &[1, 3]);
        assert_eq!(x.add(&b2).unwrap().to_vec(), y.to_vec());
    }

    #[test]
    fn scalar_broadcasts_against_anything() {
        let x = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let s = Tensor::scalar(2.0);
        assert_eq!(x.mul(&s).unwrap().to_vec(), vec![2.0, 4.0, 6.0, 8.0]);
        assert_eq!(s.mul(&x).unwrap().shape(), &[2, 2]);
    }

    #[test]
    fn non_suffix_shapes_are_rejected() {
        let x = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let col = t(&[1.0, 2.0], &[2, 1]);
        assert!(matches!(
            x.add(&col),
            Err(TensorError::ShapeMismatch { .. })
        ));
        let wrong = t(&[1.0, 2.0], &[2]);
        assert!(x.add(&wrong).is_err());
    }

    #[test]
    fn broadcast_backward_folds_by_summation() {
        let x = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).trainable();
        let b = t(&[1.0, 1.0, 1.0], &[3]).trainable();
        let loss = x.mul(&b).unwrap().sum().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad(), Some(vec![1.0; 6]));
        // db_j = sum over rows of x[., j]
        assert_eq!(b.grad(), Some(vec![5.0, 7.0, 9.0]));
    }

    #[test]
    fn division_by_zero_is_an_error_not_inf() {
        let x = t(&[1.0], &[1]);
        let z = t(&[0.0], &[1]);
        assert!(matches!(x.div(&z), Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn exp_overflow_is_an_error() {
        let x = Tensor::<f32>::from_vec(vec![200.0], &[1]).unwrap();
        assert!(matches!(x.exp(), Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let (m, k, n) = (4, 5, 3);
        let a: Vec<f64> = (0..m * k).map(|_| rng.random_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut expect = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    expect[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        let y = t(&a, &[m, k]).matmul(&t(&b, &[k, n])).unwrap();
        assert_eq!(y.shape(), &[m, n]);
        assert_close(&y.to_vec(), &expect, 1e-12);
    }

    #[test]
    fn matmul_rejects_inner_dim_mismatch() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[4, 2]);
        assert!(matches!(
            a.matmul(&b),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn transpose_round_trips() {
        let x = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let y = x.transpose().unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.to_vec(), vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        assert_eq!(y.transpose().unwrap().to_vec(), x.to_vec());
    }

    #[test]
    fn narrow_and_concat_invert_each_other() {
        let x = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let left = x.narrow(1, 0, 2).unwrap();
        let right = x.narrow(1, 2, 1).unwrap();
        let back = Tensor::concat(1, &[left, right]).unwrap();
        assert_eq!(back.to_vec(), x.to_vec());

        let top = x.narrow(0, 0, 1).unwrap();
        let bottom = x.narrow(0, 1, 1).unwrap();
        let back = Tensor::concat(0, &[top, bottom]).unwrap();
        assert_eq!(back.to_vec(), x.to_vec());
    }

    #[test]
    fn softmax_rows_match_frozen_oracle() {
        // softmax([1, 2, 3]) computed independently.
        let y = t(&[1.0, 2.0, 3.0], &[1, 3]).softmax(1).unwrap();
        assert_close(
            &y.to_vec(),
            &[
                0.090030573170380462,
                0.24472847105479764,
                0.66524095577482178,
            ],
            1e-15,
        );
    }

    #[test]
    fn softmax_lanes_sum_to_one_and_shift_invariant() {
        let x = t(&[3.0, -1.0, 0.5, 2.0, 7.0, -4.0], &[2, 3]);
        for axis in [0, 1] {
            let y = x.softmax(axis).unwrap();
            let summed = y.sum_axis(axis).unwrap();
            for v in summed.to_vec() {
                assert!((v - 1.0).abs() < 1e-12);
            }
        }
        let shifted = x.add_scalar(100.0).unwrap().softmax(1).unwrap();
        assert_close(&shifted.to_vec(), &x.softmax(1).unwrap().to_vec(), 1e-12);
    }

    #[test]
    fn layer_norm_matches_frozen_oracle() {
        let x = t(&[1.0, 2.0, 3.0, 4.0], &[1, 4]);
        let gamma = t(&[1.0, 1.0, 1.0, 1.0], &[4]);
        let beta = Tensor::zeros(&[4]);
        let y = x.layer_norm(&gamma, &beta, 1e-5).unwrap();
        assert_close(
            &y.to_vec(),
            &[
                -1.3416354199689269,
                -0.447211806656309,
                0.447211806656309,
                1.3416354199689269,
            ],
            1e-14,
        );
    }

    #[test]
    fn gelu_matches_frozen_oracle() {
        let x = t(&[-2.0, -0.5, 0.0, 0.5, 1.0, 2.0], &[1, 6]);
        let y = x.gelu().unwrap();
        assert_close(
            &y.to_vec(),
            &[
                -0.045402305912224938,
                -0.15428599017485606,
                0.0,
                0.34571400982514394,
                0.84119199060827676,
                1.954597694087775,
            ],
            1e-15,
        );
    }

    #[test]
    fn softplus_is_stable_at_extreme_inputs() {
        let x = t(&[-40.0, -1.0, 0.0, 1.0, 40.0], &[1, 5]);
        let y = x.softplus().unwrap().to_vec();
        assert!((y[0] - (-40f64).exp()).abs() < 1e-18, "{}", y[0]);
        assert!((y[1] - (1.0 + (-1f64).exp()).ln()).abs() < 1e-15);
        assert!((y[2] - 2f64.ln()).abs() < 1e-15);
        assert!((y[4] - 40.0).abs() < 1e-12, "{}", y[4]);

        let x = t(&[0.3, -1.2], &[1, 2]).trainable();
        let num = finite_diff_grad(|v| v.softplus()?.sum(), &x, 1e-4).unwrap();
        x.softplus().unwrap().sum().unwrap().backward().unwrap();
        assert!(max_rel_err(&x.grad().unwrap(), &num) < 1e-7);
    }

    #[test]
    fn reductions_accumulate_correctly() {
        let x = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        assert_eq!(x.sum().unwrap().item().unwrap(), 21.0);
        assert_eq!(x.mean().unwrap().item().unwrap(), 3.5);
        assert_eq!(x.sum_axis(0).unwrap().to_vec(), vec![5.0, 7.0, 9.0]);
        assert_eq!(x.sum_axis(0).unwrap().shape(), &[1, 3]);
        assert_eq!(x.mean_axis(1).unwrap().to_vec(), vec![2.0, 5.0]);
        assert_eq!(x.mean_axis(1).unwrap().shape(), &[2, 1]);
    }

    #[test]
    fn spot_gradient_checks_on_composites() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..6).map(|_| rng.random_range(0.2..1.5)).collect();
        let x = t(&data, &[2, 3]).trainable();
        let f = |v: &Tensor<f64>| {
            v.exp()?
                .add_scalar(1.0)?
                .log()?
                .mul(v)?
                .softmax(1)?
                .powf(2.0)?
                .sum()
        };
        let loss = f(&x).unwrap();
        loss.backward().unwrap();
        let analytic = x.grad().unwrap();
        let numeric = finite_diff_grad(|v| f(v), &x, 1e-3).unwrap();
        assert!(max_rel_err(&analytic, &numeric) < 1e-4);
    }
}
