//! Nadam optimizer and global-norm gradient clipping.

use super::{ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// L2 norm over every element of every gradient, accumulated in `f64`.
pub fn global_norm<T: Real>(grads: &[Tensor<T>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| {
            let x = v.as_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients by `threshold / norm` when their joint L2 norm
/// exceeds `threshold`. Returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Tensor<T>], threshold: f64) -> Result<f64> {
    if threshold.is_nan() || threshold <= 0.0 {
        return Err(Error::Parameter(format!("clip threshold {threshold} must be positive")));
    }
    let norm = global_norm(grads);
    if norm > threshold {
        let s = T::lit(threshold / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    Ok(norm)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NadamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Decay of the momentum schedule `μ_t = β1 (1 − ½·0.96^(t·decay))`.
    pub schedule_decay: f64,
}

impl Default for NadamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, epsilon: 1e-8, schedule_decay: 0.004 }
    }
}

/// Nesterov-accelerated Adam with the warming momentum schedule used by the
/// Keras/TensorFlow implementation.
#[derive(Clone, Debug)]
pub struct Nadam<T> {
    config: NadamConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: u64,
    m_schedule: f64,
}

impl<T: Real> Nadam<T> {
    pub fn new<U: Real>(config: NadamConfig, params: &ParamStore<U>) -> Self {
        let zeros = |p: &super::Param<U>| vec![T::zero(); p.value.len()];
        Self {
            config,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
            step: 0,
            m_schedule: 1.0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    fn momentum(&self, t: u64) -> f64 {
        self.config.beta1 * (1.0 - 0.5 * 0.96f64.powf(t as f64 * self.config.schedule_decay))
    }

    /// Applies one update. `grads[i]` pairs with the i-th parameter of
    /// `params`; `None` means a zero gradient.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::Dimension(format!(
                "nadam: {} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        if lr.is_nan() || lr <= 0.0 {
            return Err(Error::Parameter(format!("learning rate {lr} must be positive")));
        }
        self.step += 1;
        let t = self.step;
        let (b1, b2) = (self.config.beta1, self.config.beta2);
        let mu_t = self.momentum(t);
        let mu_next = self.momentum(t + 1);
        let sched_new = self.m_schedule * mu_t;
        let sched_next = sched_new * mu_next;
        self.m_schedule = sched_new;

        // Per-element coefficients, folded so the inner loop is a few FMAs.
        let c_m = T::lit(mu_next / (1.0 - sched_next));
        let c_g = T::lit((1.0 - mu_t) / (1.0 - sched_new));
        let c_v = T::lit(1.0 / (1.0 - b2.powf(t as f64)));
        let eps = T::lit(self.config.epsilon);
        let lr = T::lit(lr);
        let (b1t, b2t) = (T::lit(b1), T::lit(b2));
        let (ob1, ob2) = (T::lit(1.0 - b1), T::lit(1.0 - b2));

        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = &grads[i] else {
                // A zero gradient still decays the moments.
                let (m, v) = (&mut self.m[i], &mut self.v[i]);
                for ((w, mi), vi) in p.value.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()) {
                    *mi *= b1t;
                    *vi *= b2t;
                    let m_hat = c_m * *mi;
                    let v_hat = c_v * *vi;
                    *w -= lr * m_hat / (v_hat.sqrt() + eps);
                }
                continue;
            };
            if g.shape() != p.value.shape() {
                return Err(Error::Shape { op: "nadam", lhs: p.value.shape().to_vec(), rhs: g.shape().to_vec() });
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut())
            {
                *mi = b1t * *mi + ob1 * gi;
                *vi = b2t * *vi + ob2 * gi * gi;
                let m_hat = c_m * *mi + c_g * gi;
                let v_hat = c_v * *vi;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
