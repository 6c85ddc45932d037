//! Self-supervised objectives on paired augmented views: a VICReg-style
//! invariance / variance / covariance loss behind an expander MLP, and the
//! Barlow Twins cross-correlation loss. Both operate on `[B, dz]` view
//! embeddings and are exercised end to end by [`ssl_step`], which routes
//! samples through the input adaptformer and main body only — task latents
//! and heads never receive gradients here.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::Linear;
use crate::augment::{AugPipeline, AugmentError};
use crate::model::{Medformer, ModelError};
use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum SslError {
    #[error("batch error: {0}")]
    Batch(String),
    #[error("degenerate batch: {0}")]
    Degenerate(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
}

fn batch_err(msg: impl Into<String>) -> SslError {
    SslError::Batch(msg.into())
}

/// The projection MLP between the pooled trunk representation and the SSL
/// loss: `widths.len()` linear layers with GELU between them.
pub struct Expander<T: Scalar> {
    layers: Vec<Linear<T>>,
}

impl<T: Scalar> Expander<T> {
    pub fn new(input_dim: usize, widths: &[usize], rng: &mut impl Rng) -> Result<Self, SslError> {
        if widths.is_empty() || widths.contains(&0) {
            return Err(SslError::Parameter(
                "expander needs at least one positive width".into(),
            ));
        }
        let mut layers = Vec::with_capacity(widths.len());
        let mut d = input_dim;
        for &w in widths {
            layers.push(Linear::new(d, w, rng));
            d = w;
        }
        Ok(Expander { layers })
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("depth ≥ 1").out_dim()
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = h.gelu()?;
            }
        }
        Ok(h)
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.named_params(&format!("{prefix}.layer{i}")))
            .collect()
    }
}

/// Coefficients of the VICReg-style loss. All must be nonnegative.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VicregWeights {
    pub inv_mse: f64,
    pub inv_cos: f64,
    pub var_coeff: f64,
    pub cov_coeff: f64,
    pub gamma: f64,
}

impl Default for VicregWeights {
    fn default() -> Self {
        VicregWeights {
            inv_mse: 25.0,
            inv_cos: 1.0,
            var_coeff: 25.0,
            cov_coeff: 1.0,
            gamma: 1.0,
        }
    }
}

impl VicregWeights {
    fn validate(&self) -> Result<(), SslError> {
        let fields = [
            ("inv_mse", self.inv_mse),
            ("inv_cos", self.inv_cos),
            ("var_coeff", self.var_coeff),
            ("cov_coeff", self.cov_coeff),
            ("gamma", self.gamma),
        ];
        for (name, v) in fields {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(SslError::Parameter(format!(
                    "vicreg weight {name} = {v} must be finite and ≥ 0"
                )));
            }
        }
        Ok(())
    }
}

/// Unweighted term values for logging, plus the weighted total.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VicregComponents {
    pub invariance: f64,
    pub variance: f64,
    pub covariance: f64,
    pub total: f64,
}

fn check_views<T: Scalar>(op: &str, e1: &Tensor<T>, e2: &Tensor<T>) -> Result<(usize, usize), SslError> {
    let (s1, s2) = (e1.shape(), e2.shape());
    if s1.len() != 2 || s1 != s2 {
        return Err(batch_err(format!(
            "{op} expects two [B, dz] views, got {s1:?} and {s2:?}"
        )));
    }
    if s1[0] < 2 {
        return Err(batch_err(format!(
            "{op} needs a batch of at least 2, got {}",
            s1[0]
        )));
    }
    if s1[1] < 2 {
        return Err(batch_err(format!(
            "{op} needs at least 2 embedding dims, got {}",
            s1[1]
        )));
    }
    Ok((s1[0], s1[1]))
}

/// Column standard deviation with the n−1 denominator, kept as `[1, d]`.
fn column_std<T: Scalar>(e: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let b = e.shape()[0] as f64;
    let centered = e.sub(&e.mean_axis(0)?)?;
    centered
        .mul(&centered)?
        .sum_axis(0)?
        .mul_scalar(T::cast(1.0 / (b - 1.0)))?
        .sqrt()
}

/// 0/1 masks selecting the diagonal and off-diagonal of a `[d, d]` matrix.
fn eye_masks<T: Scalar>(d: usize) -> (Tensor<T>, Tensor<T>) {
    let mut eye = vec![T::zero(); d * d];
    let mut off = vec![T::one(); d * d];
    for i in 0..d {
        eye[i * d + i] = T::one();
        off[i * d + i] = T::zero();
    }
    (
        Tensor::from_vec(eye, &[d, d]).expect("mask shape"),
        Tensor::from_vec(off, &[d, d]).expect("mask shape"),
    )
}

/// VICReg-style loss. Invariance couples the two views (MSE plus mean
/// row-cosine distance); variance hinges each view's column deviation at
/// `gamma`; covariance is the mean squared off-diagonal covariance per
/// view. Returns the weighted-total graph node and the component values.
pub fn vicreg_loss<T: Scalar>(
    e1: &Tensor<T>,
    e2: &Tensor<T>,
    w: &VicregWeights,
) -> Result<(Tensor<T>, VicregComponents), SslError> {
    w.validate()?;
    let (b, d) = check_views("vicreg_loss", e1, e2)?;

    let diff = e1.sub(e2)?;
    let mse = diff.mul(&diff)?.mean()?;
    let row_norm = |e: &Tensor<T>| -> Result<Tensor<T>, TensorError> {
        e.mul(e)?.sum_axis(1)?.sqrt()
    };
    let cos = e1
        .mul(e2)?
        .sum_axis(1)?
        .div(&row_norm(e1)?.mul(&row_norm(e2)?)?)?;
    let cos_dist = cos.neg()?.add_scalar(T::one())?.mean()?;
    let invariance = mse
        .mul_scalar(T::cast(w.inv_mse))?
        .add(&cos_dist.mul_scalar(T::cast(w.inv_cos))?)?;

    let hinge = |e: &Tensor<T>| -> Result<Tensor<T>, TensorError> {
        column_std(e)?
            .neg()?
            .add_scalar(T::cast(w.gamma))?
            .relu()?
            .mean()
    };
    let variance = hinge(e1)?.add(&hinge(e2)?)?.mul_scalar(T::cast(0.5))?;

    let (_, off_mask) = eye_masks::<T>(d);
    let off_cov = |e: &Tensor<T>| -> Result<Tensor<T>, TensorError> {
        let centered = e.sub(&e.mean_axis(0)?)?;
        let c = centered
            .transpose()?
            .matmul(&centered)?
            .mul_scalar(T::cast(1.0 / (b as f64 - 1.0)))?;
        c.mul(&c)?
            .mul(&off_mask)?
            .sum()?
            .mul_scalar(T::cast(1.0 / (d * (d - 1)) as f64))
    };
    let covariance = off_cov(e1)?.add(&off_cov(e2)?)?.mul_scalar(T::cast(0.5))?;

    let total = invariance
        .add(&variance.mul_scalar(T::cast(w.var_coeff))?)?
        .add(&covariance.mul_scalar(T::cast(w.cov_coeff))?)?;
    let components = VicregComponents {
        invariance: invariance.item()?.as_f64(),
        variance: variance.item()?.as_f64(),
        covariance: covariance.item()?.as_f64(),
        total: total.item()?.as_f64(),
    };
    Ok((total, components))
}

/// Barlow Twins: batch-normalize each view's columns (population std),
/// form `C = z1ᵀ z2 / B`, and pull its diagonal to 1 while suppressing the
/// off-diagonal with weight `lambda`.
pub fn barlow_twins_loss<T: Scalar>(
    z1: &Tensor<T>,
    z2: &Tensor<T>,
    lambda: f64,
) -> Result<Tensor<T>, SslError> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(SslError::Parameter(format!(
            "lambda = {lambda} must be finite and ≥ 0"
        )));
    }
    let (b, d) = check_views("barlow_twins_loss", z1, z2)?;
    let normalize = |z: &Tensor<T>, view: usize| -> Result<Tensor<T>, SslError> {
        let centered = z.sub(&z.mean_axis(0)?)?;
        let var = centered.mul(&centered)?.mean_axis(0)?;
        if let Some(col) = var.data().iter().position(|v| v.as_f64() <= 0.0) {
            return Err(SslError::Degenerate(format!(
                "view {view} column {col} has zero variance"
            )));
        }
        Ok(centered.div(&var.sqrt()?)?)
    };
    let c = normalize(z1, 1)?
        .transpose()?
        .matmul(&normalize(z2, 2)?)?
        .mul_scalar(T::cast(1.0 / b as f64))?;
    let (eye, off_mask) = eye_masks::<T>(d);
    let diag_gap = eye.sub(&c.mul(&eye)?)?;
    let on_term = diag_gap.mul(&diag_gap)?.sum()?;
    let off_term = c.mul(&c)?.mul(&off_mask)?.sum()?;
    Ok(on_term.add(&off_term.mul_scalar(T::cast(lambda))?)?)
}

/// Two independent stochastic views of one raw sample.
pub fn augmented_pair<T: Scalar>(
    x: &Tensor<T>,
    pipe: &AugPipeline,
    rng: &mut impl Rng,
) -> Result<(Tensor<T>, Tensor<T>), AugmentError> {
    Ok((pipe.apply(x, rng)?, pipe.apply(x, rng)?))
}

/// Which self-supervised objective a run optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SslObjective {
    Vicreg,
    Barlow,
}

/// Objective choice plus its coefficients.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SslConfig {
    pub objective: SslObjective,
    pub weights: VicregWeights,
    pub lambda: f64,
}

impl Default for SslConfig {
    fn default() -> Self {
        SslConfig {
            objective: SslObjective::Vicreg,
            weights: VicregWeights::default(),
            lambda: 0.005,
        }
    }
}

/// One self-supervised step over a batch of `(raw sample, task name)`
/// pairs: two augmented views each, trunk forward under the task's domain
/// latents (no task latent, no head), expander, objective loss. The
/// returned scalar is ready for a single backward pass.
pub fn ssl_step<T: Scalar>(
    model: &Medformer<T>,
    expander: &Expander<T>,
    batch: &[(Tensor<T>, String)],
    pipeline: &AugPipeline,
    cfg: &SslConfig,
    rng: &mut impl Rng,
) -> Result<Tensor<T>, SslError> {
    if batch.len() < 2 {
        return Err(batch_err(format!(
            "self-supervised batches need at least 2 samples, got {}",
            batch.len()
        )));
    }
    let mut view1 = Vec::with_capacity(batch.len());
    let mut view2 = Vec::with_capacity(batch.len());
    for (x, task) in batch {
        let (v1, v2) = augmented_pair(x, pipeline, rng)?;
        for (view, out) in [(v1, &mut view1), (v2, &mut view2)] {
            let pooled = model.trunk_forward(&view, task)?;
            out.push(expander.forward(&pooled)?);
        }
    }
    let e1 = Tensor::concat(0, &view1)?;
    let e2 = Tensor::concat(0, &view2)?;
    match cfg.objective {
        SslObjective::Vicreg => Ok(vicreg_loss(&e1, &e2, &cfg.weights)?.0),
        SslObjective::Barlow => barlow_twins_loss(&e1, &e2, cfg.lambda),
    }
}
