//! AdamW with decoupled weight decay, global-norm gradient clipping, and a
//! one-cycle cosine learning-rate schedule.

use std::collections::HashMap;

use super::TrainError;
use crate::tensor::{Scalar, Tensor};

/// Per-parameter optimizer state. Moments are kept in `f64` regardless of
/// the parameter dtype so update arithmetic is deterministic.
#[derive(Clone, Debug, Default)]
pub struct Slot {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

/// AdamW: decoupled decay `w <- w(1 - lr*wd)` applied before the
/// bias-corrected Adam update `w <- w - lr * m_hat / (sqrt(v_hat) + eps)`.
/// Parameters whose gradient is absent are skipped entirely — untouched
/// leaves neither decay nor advance their step count, which keeps
/// single-task batches from dragging other tasks' heads.
#[derive(Clone, Debug)]
pub struct AdamW {
    lr: f64,
    betas: (f64, f64),
    eps: f64,
    weight_decay: f64,
    slots: HashMap<String, Slot>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay,
            slots: HashMap::new(),
        }
    }

    pub fn with_betas(mut self, beta1: f64, beta2: f64, eps: f64) -> Result<Self, TrainError> {
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 {
            return Err(TrainError::Parameter(format!(
                "betas must lie in [0, 1) and eps must be positive, got ({beta1}, {beta2}), {eps}"
            )));
        }
        self.betas = (beta1, beta2);
        self.eps = eps;
        Ok(self)
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn hyperparams(&self) -> (f64, (f64, f64), f64, f64) {
        (self.lr, self.betas, self.eps, self.weight_decay)
    }

    /// Apply one update to every parameter that holds a gradient. Returns
    /// the number of parameters updated.
    pub fn step<T: Scalar>(&mut self, params: &[(String, Tensor<T>)]) -> Result<usize, TrainError> {
        let (b1, b2) = self.betas;
        let mut updated = 0;
        for (name, p) in params {
            let Some(grad) = p.grad() else { continue };
            let g: Vec<f64> = grad.iter().map(|v| v.as_f64()).collect();
            if g.iter().any(|v| !v.is_finite()) {
                return Err(TrainError::NanGradient(name.clone()));
            }
            let slot = self.slots.entry(name.clone()).or_insert_with(|| Slot {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
                step: 0,
            });
            if slot.m.len() != g.len() {
                return Err(TrainError::Parameter(format!(
                    "optimizer state for '{name}' has {} entries but the gradient has {}",
                    slot.m.len(),
                    g.len()
                )));
            }
            slot.step += 1;
            let bc1 = 1.0 - b1.powi(slot.step as i32);
            let bc2 = 1.0 - b2.powi(slot.step as i32);
            p.update_data(|w| {
                for i in 0..w.len() {
                    let mut x = w[i].as_f64();
                    x *= 1.0 - self.lr * self.weight_decay;
                    slot.m[i] = b1 * slot.m[i] + (1.0 - b1) * g[i];
                    slot.v[i] = b2 * slot.v[i] + (1.0 - b2) * g[i] * g[i];
                    let m_hat = slot.m[i] / bc1;
                    let v_hat = slot.v[i] / bc2;
                    x -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                    w[i] = T::cast(x);
                }
            });
            updated += 1;
        }
        Ok(updated)
    }

    /// Snapshot of the per-parameter state, sorted by name so exports are
    /// deterministic.
    pub fn export_state(&self) -> Vec<(String, Slot)> {
        let mut out: Vec<(String, Slot)> =
            self.slots.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn import_state(&mut self, state: Vec<(String, Slot)>) {
        self.slots = state.into_iter().collect();
    }
}

/// Scale all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm<T: Scalar>(
    params: &[(String, Tensor<T>)],
    max_norm: f64,
) -> Result<f64, TrainError> {
    if !(max_norm > 0.0) {
        return Err(TrainError::Parameter(format!(
            "clip norm must be positive, got {max_norm}"
        )));
    }
    let mut total = 0.0;
    for (name, p) in params {
        if let Some(g) = p.grad() {
            for v in &g {
                let x = v.as_f64();
                if !x.is_finite() {
                    return Err(TrainError::NanGradient(name.clone()));
                }
                total += x * x;
            }
        }
    }
    let norm = total.sqrt();
    if norm > max_norm {
        let scale = T::cast(max_norm / norm);
        for (_, p) in params {
            if let Some(mut g) = p.grad() {
                for v in g.iter_mut() {
                    *v = *v * scale;
                }
                p.clear_grad();
                p.accumulate_grad(&g);
            }
        }
    }
    Ok(norm)
}

/// One-cycle schedule: cosine ramp from `max_lr / div_factor` up to
/// `max_lr` over the warmup fraction, then cosine decay down to
/// `max_lr / (div_factor * final_div_factor)`.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScheduleConfig {
    pub max_lr: f64,
    pub total_steps: usize,
    pub warmup_frac: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
}

impl ScheduleConfig {
    pub fn new(max_lr: f64, total_steps: usize) -> Self {
        ScheduleConfig {
            max_lr,
            total_steps,
            warmup_frac: 0.3,
            div_factor: 25.0,
            final_div_factor: 1e4,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |msg: String| Err(TrainError::Parameter(msg));
        if !(self.max_lr > 0.0) {
            return fail(format!("max_lr must be positive, got {}", self.max_lr));
        }
        if self.total_steps < 2 {
            return fail(format!(
                "schedule needs at least 2 steps, got {}",
                self.total_steps
            ));
        }
        if !(self.warmup_frac > 0.0 && self.warmup_frac < 1.0) {
            return fail(format!(
                "warmup fraction must lie strictly between 0 and 1, got {}",
                self.warmup_frac
            ));
        }
        if self.div_factor < 1.0 || self.final_div_factor < 1.0 {
            return fail(format!(
                "divisors must be at least 1, got {} and {}",
                self.div_factor, self.final_div_factor
            ));
        }
        Ok(())
    }

    fn warmup_steps(&self) -> usize {
        ((self.total_steps as f64 * self.warmup_frac).round() as usize)
            .clamp(1, self.total_steps - 1)
    }
}

/// Learning rate at `step`, where `step` counts from 0 to `total_steps`
/// inclusive.
pub fn onecycle_lr(step: usize, cfg: &ScheduleConfig) -> Result<f64, TrainError> {
    cfg.validate()?;
    if step > cfg.total_steps {
        return Err(TrainError::Parameter(format!(
            "schedule step {step} exceeds total_steps {}",
            cfg.total_steps
        )));
    }
    let start = cfg.max_lr / cfg.div_factor;
    let end = start / cfg.final_div_factor;
    let warm = cfg.warmup_steps();
    let lr = if step <= warm {
        let u = step as f64 / warm as f64;
        start + (cfg.max_lr - start) * 0.5 * (1.0 - (std::f64::consts::PI * u).cos())
    } else {
        let u = (step - warm) as f64 / (cfg.total_steps - warm) as f64;
        end + (cfg.max_lr - end) * 0.5 * (1.0 + (std::f64::consts::PI * u).cos())
    };
    Ok(lr)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(data, &[1, 3]).unwrap().trainable()
    }

    fn set_grad(p: &Tensor<f64>, g: &[f64]) {
        p.clear_grad();
        p.accumulate_grad(g);
    }

    #[test]
    fn zero_gradient_reduces_to_pure_decay() {
        let w = leaf(vec![0.5, -1.0, 2.0]);
        set_grad(&w, &[0.0, 0.0, 0.0]);
        let mut opt = AdamW::new(0.01, 0.1);
        opt.step(&[("w".into(), w.clone())]).unwrap();
        let factor = 1.0 - 0.01 * 0.1;
        assert_eq!(w.to_vec(), vec![0.5 * factor, -1.0 * factor, 2.0 * factor]);
    }

    #[test]
    fn first_step_magnitude_is_nearly_lr() {
        let w = leaf(vec![1.0, 1.0, 1.0]);
        set_grad(&w, &[0.3, -2.0, 40.0]);
        let lr = 1e-3;
        let mut opt = AdamW::new(lr, 0.0);
        opt.step(&[("w".into(), w.clone())]).unwrap();
        let got = w.to_vec();
        for (i, g) in [0.3f64, -2.0, 40.0].iter().enumerate() {
            // First step: m_hat = g, v_hat = g^2, so the update is
            // lr * g / (|g| + eps).
            let want = 1.0 - lr * g / (g.abs() + 1e-8);
            assert!((got[i] - want).abs() < 1e-15, "{} vs {want}", got[i]);
            let magnitude = (got[i] - 1.0).abs();
            assert!((magnitude - lr).abs() < lr * 0.01, "step size {magnitude}");
        }
    }

    #[test]
    fn ten_steps_match_a_handwritten_update_loop() {
        // Minimize f(w) = ||w||^2, so grad = 2w, with decay active.
        let (lr, wd, b1, b2, eps) = (0.05, 0.01, 0.9, 0.999, 1e-8);
        let w = leaf(vec![1.0, -2.0, 0.5]);
        let mut opt = AdamW::new(lr, wd);
        for _ in 0..10 {
            let g: Vec<f64> = w.to_vec().iter().map(|x| 2.0 * x).collect();
            set_grad(&w, &g);
            opt.step(&[("w".into(), w.clone())]).unwrap();
        }

        // Independent loop transcribing the published update equations.
        let mut x = [1.0, -2.0, 0.5];
        let mut m = [0.0; 3];
        let mut v = [0.0; 3];
        for t in 1..=10u32 {
            let g: Vec<f64> = x.iter().map(|w| 2.0 * w).collect();
            for i in 0..3 {
                x[i] *= 1.0 - lr * wd;
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / (1.0 - b1.powi(t as i32));
                let v_hat = v[i] / (1.0 - b2.powi(t as i32));
                x[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        for (got, want) in w.to_vec().iter().zip(&x) {
            assert!((got - want).abs() <= 1e-10, "{got} vs {want}");
        }
    }

    #[test]
    fn nan_gradient_aborts_naming_the_parameter() {
        let w = leaf(vec![1.0, 1.0, 1.0]);
        set_grad(&w, &[0.1, f64::NAN, 0.2]);
        let mut opt = AdamW::new(1e-3, 0.0);
        let err = opt.step(&[("head.demo.weight".into(), w)]).unwrap_err();
        assert!(matches!(&err, TrainError::NanGradient(p) if p == "head.demo.weight"), "{err}");
    }

    #[test]
    fn parameters_without_gradients_are_left_alone() {
        let w = leaf(vec![1.0, 2.0, 3.0]);
        let mut opt = AdamW::new(0.1, 0.5);
        let updated = opt.step(&[("w".into(), w.clone())]).unwrap();
        assert_eq!(updated, 0);
        assert_eq!(w.to_vec(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn per_parameter_step_counts_stay_independent() {
        let a = leaf(vec![1.0, 1.0, 1.0]);
        let b = leaf(vec![1.0, 1.0, 1.0]);
        let mut opt = AdamW::new(1e-3, 0.0);
        set_grad(&a, &[1.0, 1.0, 1.0]);
        opt.step(&[("a".into(), a.clone()), ("b".into(), b.clone())]).unwrap();
        set_grad(&a, &[1.0, 1.0, 1.0]);
        set_grad(&b, &[1.0, 1.0, 1.0]);
        opt.step(&[("a".into(), a), ("b".into(), b)]).unwrap();
        let state = opt.export_state();
        assert_eq!(state[0].0, "a");
        assert_eq!(state[0].1.step, 2);
        assert_eq!(state[1].0, "b");
        assert_eq!(state[1].1.step, 1);
    }

    #[test]
    fn clipping_rescales_only_oversized_gradients() {
        let a = leaf(vec![3.0, 0.0, 0.0]);
        let b = leaf(vec![0.0, 4.0, 0.0]);
        set_grad(&a, &[3.0, 0.0, 0.0]);
        set_grad(&b, &[0.0, 4.0, 0.0]);
        let params = vec![("a".to_string(), a.clone()), ("b".to_string(), b.clone())];
        let norm = clip_global_norm(&params, 1.0).unwrap();
        assert!((norm - 5.0).abs() < 1e-12);
        assert!((a.grad().unwrap()[0] - 0.6).abs() < 1e-12);
        assert!((b.grad().unwrap()[1] - 0.8).abs() < 1e-12);

        let small = clip_global_norm(&params, 10.0).unwrap();
        assert!((small - 1.0).abs() < 1e-12);
        assert!((a.grad().unwrap()[0] - 0.6).abs() < 1e-12, "small grads untouched");
    }

    #[test]
    fn onecycle_hits_the_three_frozen_boundaries() {
        let cfg = ScheduleConfig::new(0.01, 25);
        assert!((onecycle_lr(0, &cfg).unwrap() - 0.0004).abs() < 1e-15);
        assert!((onecycle_lr(cfg.warmup_steps(), &cfg).unwrap() - 0.01).abs() < 1e-15);
        assert!((onecycle_lr(25, &cfg).unwrap() - 4e-8).abs() < 1e-18);
    }

    #[test]
    fn onecycle_rises_then_falls() {
        let cfg = ScheduleConfig::new(0.01, 100);
        let warm = cfg.warmup_steps();
        let lrs: Vec<f64> = (0..=100).map(|s| onecycle_lr(s, &cfg).unwrap()).collect();
        for s in 1..=warm {
            assert!(lrs[s] >= lrs[s - 1], "warmup must not decrease at {s}");
        }
        for s in (warm + 1)..=100 {
            assert!(lrs[s] <= lrs[s - 1], "decay must not increase at {s}");
        }
    }

    #[test]
    fn onecycle_rejects_bad_arguments() {
        let cfg = ScheduleConfig::new(0.01, 25);
        assert!(matches!(onecycle_lr(26, &cfg), Err(TrainError::Parameter(_))));
        let mut bad = cfg;
        bad.warmup_frac = 1.0;
        assert!(matches!(onecycle_lr(0, &bad), Err(TrainError::Parameter(_))));
        bad.warmup_frac = 0.0;
        assert!(matches!(onecycle_lr(0, &bad), Err(TrainError::Parameter(_))));
    }
}
