use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::planner::ModelDims;

/// Size of the toy encoder-decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyModelConfig {
    pub d_model: usize,
    pub d_ffn: usize,
    pub n_layers_enc: usize,
    pub n_layers_dec: usize,
    pub n_heads: usize,
    pub vocab: usize,
    pub max_len: usize,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self { d_model: 64, d_ffn: 256, n_layers_enc: 2, n_layers_dec: 2, n_heads: 4, vocab: 64, max_len: 16 }
    }
}

impl ToyModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidInput(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_ffn == 0 || self.max_len == 0 {
            return Err(Error::InvalidInput("d_ffn and max_len must be positive".into()));
        }
        if self.vocab <= super::data::FIRST_CONTENT_TOKEN {
            return Err(Error::InvalidInput(format!("vocabulary {} leaves no content tokens", self.vocab)));
        }
        Ok(())
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            d_model: self.d_model,
            d_ffn: self.d_ffn,
            enc_layers: self.n_layers_enc,
            dec_layers: self.n_layers_dec,
            vocab: self.vocab,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Learning-rate schedule and projection period of one (re)training run.
///
/// `lr = c_lr · d_model^e · min(step^−½, steps_peak^−½)`: constant up to
/// `steps_peak`, then inverse-square-root decay.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    /// Updates between successive weight projections.
    pub pnr: usize,
    pub total_steps: usize,
    pub c_lr: f64,
    pub steps_peak: usize,
    pub d_model_exponent: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self { pnr: 100, total_steps: 400, c_lr: 2.5e-3, steps_peak: 100, d_model_exponent: 0.5 }
    }
}

impl TrainSchedule {
    /// Schedule whose plateau learning rate is `lr` for a `d_model`-wide
    /// model. `steps_peak = total_steps` keeps it constant for the whole run.
    pub fn with_plateau(lr: f64, steps_peak: usize, total_steps: usize, pnr: usize, d_model: usize) -> Self {
        let e = 0.5;
        Self {
            pnr,
            total_steps,
            c_lr: lr * (steps_peak as f64).sqrt() / (d_model as f64).powf(e),
            steps_peak,
            d_model_exponent: e,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pnr == 0 || self.steps_peak == 0 {
            return Err(Error::InvalidInput("pnr and steps_peak must be at least 1".into()));
        }
        if !self.c_lr.is_finite() || self.c_lr <= 0.0 || !self.d_model_exponent.is_finite() {
            return Err(Error::InvalidInput("c_lr must be positive and finite".into()));
        }
        Ok(())
    }

    /// Update indices (0-based) at which weights are projected before the
    /// update; an index equal to `total_steps` is a projection after the
    /// last update.
    pub fn projection_steps(&self) -> Vec<usize> {
        (0..=self.total_steps).step_by(self.pnr.max(1)).collect()
    }
}

/// Learning rate for 1-based `step`.
pub fn lr_at(step: usize, s: &TrainSchedule, d_model: usize) -> Result<f64> {
    if step < 1 {
        return Err(Error::InvalidInput("learning-rate steps start at 1".into()));
    }
    let decay = (step as f64).powf(-0.5).min((s.steps_peak as f64).powf(-0.5));
    Ok(s.c_lr * (d_model as f64).powf(s.d_model_exponent) * decay)
}
