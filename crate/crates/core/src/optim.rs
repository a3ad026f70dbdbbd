//! AdamW with decoupled weight decay, and cosine annealing with warm restarts.
//!
//! ```text
//! m ← β₁m + (1−β₁)g          m̂ = m / (1−β₁ᵗ)
//! v ← β₂v + (1−β₂)g²         v̂ = v / (1−β₂ᵗ)
//! θ ← θ − η·( m̂/(√v̂+ε) + λθ )
//! ```
//!
//! The learning rate `η` is passed to every step so a schedule can drive it.

use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result, Shape};
use crate::matrix::Matrix;

pub const DEFAULT_LR: f64 = 5e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.99,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..1.0).contains(&x);
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(Error::config(format!(
                "betas must lie in [0, 1), got ({}, {})",
                self.beta1, self.beta2
            )));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::config(format!("eps must be positive, got {}", self.eps)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Moments and step counter for one set of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamWState {
    /// Zeroed moments for tensors with the given entry counts.
    pub fn new(config: AdamWConfig, sizes: &[usize]) -> Self {
        AdamWState {
            config,
            step: 0,
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_params(config: AdamWConfig, params: &[&Matrix]) -> Self {
        let sizes: Vec<usize> = params.iter().map(|p| p.len()).collect();
        Self::new(config, &sizes)
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

    /// One AdamW update of `params` in place.
    ///
    /// `decay[i]` selects whether tensor `i` receives weight decay.
    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[&Matrix], decay: &[bool], lr: f64) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() || decay.len() != params.len() {
            return Err(Error::Dimension {
                op: "adamw_step",
                left: Shape(params.len(), 1),
                right: Shape(self.first.len(), grads.len()),
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.len() != self.first[i].len() {
                return Err(Error::Dimension {
                    op: "adamw_step",
                    left: p.shape(),
                    right: g.shape(),
                });
            }
        }
        if !lr.is_finite() || lr < 0.0 {
            return Err(Error::Numeric(format!("learning rate {lr} is invalid")));
        }

        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        self.step += 1;
        let t = i32::try_from(self.step).unwrap_or(i32::MAX);
        let correction1 = 1.0 - beta1.powi(t);
        let correction2 = 1.0 - beta2.powi(t);

        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let lambda = if decay[i] { weight_decay } else { 0.0 };
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            for (j, (theta, &grad)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * grad;
                v[j] = beta2 * v[j] + (1.0 - beta2) * grad * grad;
                let m_hat = m[j] / correction1;
                let v_hat = v[j] / correction2;
                // Same as θ − η(m̂/(√v̂+ε) + λθ); decaying first makes a zero
                // gradient give exactly θ(1 − ηλ).
                *theta = *theta * (1.0 - lr * lambda) - lr * (m_hat / (v_hat.sqrt() + eps));
            }
            if let Some(j) = p.data().iter().position(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!(
                    "AdamW produced a non-finite value in tensor {i} entry {j}"
                )));
            }
        }
        Ok(())
    }

    pub fn write_to(&self, w: &mut Writer) {
        w.u64(self.step);
        w.f64s(&[
            self.config.beta1,
            self.config.beta2,
            self.config.eps,
            self.config.weight_decay,
        ]);
        w.usize32(self.first.len());
        for (m, v) in self.first.iter().zip(&self.second) {
            w.u64(m.len() as u64);
            w.f64s(m);
            w.f64s(v);
        }
    }

    pub(crate) fn read_from(r: &mut Reader<'_>) -> Result<Self> {
        let step = r.u64("optimizer step")?;
        let hp = r.f64s(4, "optimizer hyperparameters")?;
        let config = AdamWConfig {
            beta1: hp[0],
            beta2: hp[1],
            eps: hp[2],
            weight_decay: hp[3],
        };
        let n = r.u32("optimizer tensor count")? as usize;
        let mut first = Vec::new();
        let mut second = Vec::new();
        for _ in 0..n {
            let len = r.count("moment length", 16)?;
            first.push(r.f64s(len, "first moment")?);
            let at = r.offset();
            let v = r.f64s(len, "second moment")?;
            if v.iter().any(|&x| x < 0.0) {
                return Err(Error::format(at, "negative second moment"));
            }
            second.push(v);
        }
        Ok(AdamWState {
            config,
            step,
            first,
            second,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.write_to(&mut w);
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let s = Self::read_from(&mut r)?;
        r.finish()?;
        Ok(s)
    }
}

/// Cosine annealing with warm restarts.
///
/// Period `i` lasts `t0 · t_multⁱ` steps; within a period the rate falls
/// from `eta_max` toward `eta_min` along half a cosine, then restarts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub eta_max: f64,
    pub eta_min: f64,
    pub t0: u64,
    pub t_mult: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            eta_max: DEFAULT_LR,
            eta_min: 0.0,
            t0: 200,
            t_mult: 2,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t0 < 1 || self.t_mult < 1 {
            return Err(Error::config(format!(
                "schedule needs t0 >= 1 and t_mult >= 1, got t0={} t_mult={}",
                self.t0, self.t_mult
            )));
        }
        if !(self.eta_min >= 0.0 && self.eta_min <= self.eta_max && self.eta_max.is_finite()) {
            return Err(Error::config(format!(
                "schedule needs 0 <= eta_min <= eta_max, got eta_min={} eta_max={}",
                self.eta_min, self.eta_max
            )));
        }
        Ok(())
    }

    /// `(t_cur, t_i)` for a global step: steps into the current period and
    /// that period's length.
    pub fn position(&self, global_step: u64) -> (u64, u64) {
        if self.t_mult == 1 {
            return (global_step % self.t0, self.t0);
        }
        let mut t_cur = global_step;
        let mut period = self.t0;
        while t_cur >= period {
            t_cur -= period;
            period = period.saturating_mul(self.t_mult);
        }
        (t_cur, period)
    }

    /// The closed-form rate at `t_cur` steps into a period of length `t_i`.
    pub fn cosine(&self, t_cur: f64, t_i: f64) -> f64 {
        self.eta_min + 0.5 * (self.eta_max - self.eta_min) * (1.0 + (std::f64::consts::PI * t_cur / t_i).cos())
    }
}

/// Learning rate at a global step.
pub fn lr_at(schedule: &ScheduleConfig, global_step: u64) -> Result<f64> {
    schedule.validate()?;
    let (t_cur, t_i) = schedule.position(global_step);
    Ok(schedule.cosine(t_cur as f64, t_i as f64))
}
