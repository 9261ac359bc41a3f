//! Loss, optimizer and learning-rate schedule.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Param, Tensor, Var};

/// Mean cross-entropy of `[B×C]` logits against integer labels, through
/// log-softmax.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    let [batch, classes] = shape[..] else {
        return Err(Error::dim("cross_entropy", format!("logits {shape:?} are not [B, C]")));
    };
    if labels.len() != batch {
        return Err(Error::dim(
            "cross_entropy",
            format!("{} labels for {batch} rows", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::data(format!("label {bad} out of range for {classes} classes")));
    }
    let logp = g.log_softmax(logits, 1)?;
    let picked = g.gather(logp, labels)?;
    let mean = g.mean(picked);
    Ok(g.scale(mean, -1.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay.
///
/// Per tracked parameter:
/// `m ← β₁m + (1−β₁)g`, `v ← β₂v + (1−β₂)g²`,
/// `θ ← θ − lr·m̂/(√v̂ + ε) − lr·λ·θ` with bias-corrected `m̂`, `v̂`.
/// The decay term is only applied to parameters flagged `decay`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub lr: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, lr: f64, params: &[Param]) -> Self {
        Self {
            config,
            lr,
            step: 0,
            first: params.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
            second: params.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
        }
    }

    /// Restores saved optimizer state.
    pub fn from_state(
        config: AdamWConfig,
        lr: f64,
        step: u64,
        first: Vec<Vec<f64>>,
        second: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if first.len() != second.len() || first.iter().zip(&second).any(|(m, v)| m.len() != v.len()) {
            return Err(Error::data("optimizer moment buffers disagree in size"));
        }
        if second.iter().flatten().any(|&v| v.is_nan() || v < 0.0) {
            return Err(Error::data("optimizer second moment must be non-negative"));
        }
        Ok(Self {
            config,
            lr,
            step,
            first,
            second,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.second
    }

    /// One update. `grads[i]` is the gradient of `params[i]`, or `None` for a
    /// parameter that is not being trained this step (left untouched).
    ///
    /// Every gradient is checked for finiteness before anything is modified.
    pub fn step(&mut self, params: &mut [Param], grads: &[Option<Tensor>]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first.len() {
            return Err(Error::dim(
                "adamw",
                format!(
                    "{} params, {} grads, {} moment buffers",
                    params.len(),
                    grads.len(),
                    self.first.len()
                ),
            ));
        }
        for (p, g) in params.iter().zip(grads) {
            let Some(g) = g else { continue };
            if g.shape() != p.value.shape() {
                return Err(Error::dim(
                    "adamw",
                    format!(
                        "{}: gradient {:?} vs parameter {:?}",
                        p.name,
                        g.shape(),
                        p.value.shape()
                    ),
                ));
            }
            if g.data().iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!("gradient of {} is not finite", p.name)));
            }
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = i32::try_from(self.step).unwrap_or(i32::MAX);
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let lr = self.lr;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let decay = if p.decay { weight_decay } else { 0.0 };
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (((theta, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *theta = *theta - lr * m_hat / (v_hat.sqrt() + eps) - lr * decay * *theta;
            }
        }
        Ok(())
    }
}

/// `η_t = η_min + ½(η_max − η_min)(1 + cos(π·t/T_max))`, indexed by epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub eta_min: f64,
    pub eta_max: f64,
    pub t_max: usize,
}

impl CosineSchedule {
    pub fn new(eta_min: f64, eta_max: f64, t_max: usize) -> Result<Self> {
        let s = Self {
            eta_min,
            eta_max,
            t_max,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.eta_min.is_nan() || self.eta_max.is_nan() || self.eta_min > self.eta_max || self.eta_min < 0.0 {
            return Err(Error::Config(format!(
                "need 0 <= eta_min <= eta_max, got {} and {}",
                self.eta_min, self.eta_max
            )));
        }
        if self.t_max < 1 {
            return Err(Error::Config("T_max must be at least 1".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, t: usize) -> Result<f64> {
        if t > self.t_max {
            return Err(Error::Usage(format!("epoch {t} is beyond T_max {}", self.t_max)));
        }
        let phase = t as f64 / self.t_max as f64 * PI;
        Ok(self.eta_min + 0.5 * (self.eta_max - self.eta_min) * (1.0 + phase.cos()))
    }
}
