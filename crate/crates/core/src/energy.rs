//! Mechanical power, the per-gait power predictor and softmax gait selection.

use std::io::Write;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gait::GaitId;
use crate::nn::{Activation, Adam, Mlp, NnError};

/// Control steps in one prediction horizon (1 s at 50 Hz).
pub const HORIZON_STEPS: usize = 50;

/// `sum |tau_i| |qd_i|`. Torque times joint velocity, never negative.
pub fn instantaneous_power(tau: &[f64; 16], qd: &[f64; 16]) -> f64 {
    tau.iter().zip(qd).map(|(t, v)| t.abs() * v.abs()).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerSample {
    pub time: f64,
    pub gait: GaitId,
    pub instantaneous_power: f64,
    pub horizon_mean_power: f64,
}

pub fn write_power_log<W: Write>(out: W, samples: &[PowerSample]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["time", "gait", "instantaneous", "horizon_mean"])?;
    for s in samples {
        w.write_record([
            s.time.to_string(),
            s.gait.0.to_string(),
            s.instantaneous_power.to_string(),
            s.horizon_mean_power.to_string(),
        ])?;
    }
    w.flush()
}

#[derive(Debug, Error)]
pub enum EnergyError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("non-finite target in predictor batch")]
    NonFiniteTarget,
    #[error("gait id {0} out of range")]
    GaitOutOfRange(usize),
    #[error("invalid temperature schedule: {0}")]
    Schedule(&'static str),
    #[error("empty batch")]
    EmptyBatch,
}

/// Maps an observation to predicted horizon-mean power for each gait.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PowerPredictor {
    pub net: Mlp,
}

impl PowerPredictor {
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, num_gaits: usize, hidden: &[usize], rng: &mut R) -> Self {
        let mut sizes = vec![obs_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(num_gaits);
        Self {
            net: Mlp::new(&sizes, Activation::Elu, rng),
        }
    }

    pub fn num_gaits(&self) -> usize {
        self.net.output_dim()
    }

    pub fn predict(&self, obs: &[f64]) -> Result<Vec<f64>, EnergyError> {
        let p = self.net.forward_one(obs)?;
        if p.iter().any(|v| !v.is_finite()) {
            return Err(NnError::Diverged("prediction").into());
        }
        Ok(p)
    }
}

/// One supervised predictor sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorSample {
    pub obs: Vec<f64>,
    pub gait: GaitId,
    /// Realized mean power over the horizon following `obs`, W.
    pub target: f64,
}

/// Masked MSE over the executed gait's output: `mean_b (p[b, g_b] - y_b)^2`.
/// Returns the loss, the gradient with respect to the outputs and the tape.
pub fn masked_mse(
    net: &Mlp,
    batch: &[PredictorSample],
) -> Result<(f64, crate::nn::Gradients), EnergyError> {
    if batch.is_empty() {
        return Err(EnergyError::EmptyBatch);
    }
    if batch.iter().any(|s| !s.target.is_finite() || s.obs.iter().any(|v| !v.is_finite())) {
        return Err(EnergyError::NonFiniteTarget);
    }
    if let Some(s) = batch.iter().find(|s| s.gait.0 >= net.output_dim()) {
        return Err(EnergyError::GaitOutOfRange(s.gait.0));
    }
    let rows: Vec<&[f64]> = batch.iter().map(|s| s.obs.as_slice()).collect();
    let x = crate::nn::stack_rows(&rows);
    let tape = net.forward_tape(x.view())?;
    let out = tape.output();
    let n = batch.len() as f64;
    let mut d_out = Array2::zeros(out.raw_dim());
    let mut loss = 0.0;
    for (b, s) in batch.iter().enumerate() {
        let err = out[[b, s.gait.0]] - s.target;
        loss += err * err / n;
        d_out[[b, s.gait.0]] = 2.0 * err / n;
    }
    let (grads, _) = net.backward(&tape, d_out.view())?;
    Ok((loss, grads))
}

/// One optimizer step of the masked regression. Returns the pre-step loss.
pub fn update_predictor(
    predictor: &mut PowerPredictor,
    opt: &mut Adam,
    batch: &[PredictorSample],
) -> Result<f64, EnergyError> {
    let (loss, grads) = masked_mse(&predictor.net, batch)?;
    opt.step(&mut predictor.net, &grads)?;
    Ok(loss)
}

/// Softmax of `-p / tau`, stabilized by subtracting the minimum power.
pub fn gait_probabilities(p_est: &[f64], tau: f64) -> Vec<f64> {
    debug_assert!(tau > 0.0);
    let min = p_est.iter().copied().fold(f64::INFINITY, f64::min);
    let w: Vec<f64> = p_est.iter().map(|p| (-(p - min) / tau).exp()).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|v| v / z).collect()
}

pub fn select_gait<R: Rng + ?Sized>(p_est: &[f64], tau: f64, rng: &mut R) -> GaitId {
    let probs = gait_probabilities(p_est, tau);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return GaitId(i);
        }
    }
    // Rounding can leave `acc` slightly below 1.
    GaitId(probs.iter().rposition(|p| *p > 0.0).unwrap_or(0))
}

/// Index of the lowest predicted power.
pub fn greedy_gait(p_est: &[f64]) -> GaitId {
    GaitId(
        p_est
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0),
    )
}

/// Exponential decay from `start` to `end` over `total_epochs`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureSchedule {
    pub start: f64,
    pub end: f64,
    pub total_epochs: usize,
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        Self {
            start: 8.0,
            end: 0.5,
            total_epochs: 100,
        }
    }
}

impl TemperatureSchedule {
    pub fn validate(&self) -> Result<(), EnergyError> {
        if !(self.end > 0.0) {
            return Err(EnergyError::Schedule("end temperature must be positive"));
        }
        if self.start < self.end {
            return Err(EnergyError::Schedule("start temperature below end"));
        }
        Ok(())
    }

    /// Epochs past `total_epochs` hold the final temperature.
    pub fn temperature(&self, epoch: usize) -> f64 {
        if self.total_epochs == 0 {
            return self.end;
        }
        let frac = (epoch.min(self.total_epochs)) as f64 / self.total_epochs as f64;
        self.start * (self.end / self.start).powf(frac)
    }
}

/// Mean power over `window` consecutive samples starting at each index, where
/// enough samples follow.
pub fn forward_window_means(power: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || power.len() < window {
        return Vec::new();
    }
    let mut sum: f64 = power[..window].iter().sum();
    let mut out = Vec::with_capacity(power.len() - window + 1);
    out.push(sum / window as f64);
    for i in window..power.len() {
        sum += power[i] - power[i - window];
        out.push(sum / window as f64);
    }
    out
}

/// Batched predictions for many observations at once.
pub fn predict_batch(predictor: &PowerPredictor, obs: ArrayView2<f64>) -> Result<Array2<f64>, EnergyError> {
    Ok(predictor.net.forward(obs)?)
}
