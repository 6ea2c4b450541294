use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::em::{EtaSchedule, RefMode};
use crate::error::{Error, Result};
use crate::task::TaskDims;
use crate::trainer::{GradMode, InitKind, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch: usize,
    pub iters: usize,
    /// Step size per unlabeled sample (see `lr_per_unlabeled`).
    pub lr: f64,
    /// Divide `lr` by `M_u`. The loss sums over unlabeled samples, so this
    /// keeps the effective step comparable across `M_u`.
    pub lr_per_unlabeled: bool,
    pub init: InitKind,
    pub w0: Option<f64>,
    pub ref_mode: RefMode,
    pub grad_mode: GradMode,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            batch: 64,
            iters: 2000,
            lr: 0.3,
            lr_per_unlabeled: true,
            init: InitKind::Isotropic,
            w0: None,
            ref_mode: RefMode::EmpiricalEm,
            grad_mode: GradMode::CrossOnly,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub n_instances: usize,
    pub eval_every: usize,
    /// Draw a new evaluation set at every checkpoint instead of one per seed.
    pub resample: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            n_instances: 100,
            eval_every: 100,
            resample: false,
        }
    }
}

/// Everything a sweep needs. Mirrors the CLI flags; TOML files use the same
/// field names with `[train]` and `[eval]` tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dim: usize,
    pub classes: usize,
    pub labeled: usize,
    pub sigma2: f64,
    pub unlabeled: Vec<usize>,
    pub cot_steps: usize,
    pub beta: f64,
    pub alpha: f64,
    pub t_prime: f64,
    pub train: TrainSection,
    pub eval: EvalSection,
    /// Number of repeated runs per `M_u`.
    pub seeds: usize,
    /// Master seed every substream derives from.
    pub seed: u64,
    pub out: PathBuf,
    /// Also report the estimation error after the best class permutation.
    pub align_permutations: bool,
    /// Fill the wall-clock column of training logs.
    pub timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dim: 3,
            classes: 3,
            labeled: 5,
            sigma2: 0.7,
            unlabeled: vec![1, 10, 20],
            cot_steps: 5,
            beta: 50.0,
            alpha: 1.0,
            t_prime: 4.0,
            train: TrainSection::default(),
            eval: EvalSection::default(),
            seeds: 5,
            seed: 0,
            out: PathBuf::from("runs"),
            align_permutations: false,
            timing: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn schedule(&self) -> EtaSchedule {
        EtaSchedule {
            alpha: self.alpha,
            t_prime: self.t_prime,
        }
    }

    pub fn dims(&self, m_u: usize) -> TaskDims {
        TaskDims {
            dim: self.dim,
            classes: self.classes,
            n_labeled: self.labeled,
            n_unlabeled: m_u,
            sigma2: self.sigma2,
        }
    }

    pub fn effective_lr(&self, m_u: usize) -> f64 {
        if self.train.lr_per_unlabeled && m_u > 0 {
            self.train.lr / m_u as f64
        } else {
            self.train.lr
        }
    }

    /// Checkpoints `0, every, 2 every, ..., iters`.
    pub fn checkpoints(&self) -> Vec<usize> {
        (0..=self.train.iters / self.eval.eval_every)
            .map(|k| k * self.eval.eval_every)
            .collect()
    }

    pub fn train_config(&self, m_u: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            dims: self.dims(m_u),
            t_steps: self.cot_steps,
            beta: self.beta,
            schedule: self.schedule(),
            batch_size: self.train.batch,
            iters: self.train.iters,
            lr: self.effective_lr(m_u),
            init: self.train.init,
            w0: self.train.w0,
            ref_mode: self.train.ref_mode,
            grad_mode: self.train.grad_mode,
            seed,
            track_grad_stats: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.dim == 0 || self.classes == 0 {
            return bad("dim and classes must be at least 1");
        }
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return bad("sigma2 must be positive");
        }
        if self.unlabeled.is_empty() {
            return bad("at least one unlabeled count is required");
        }
        if self.cot_steps == 0 {
            return bad("cot-steps must be at least 1");
        }
        if !self.beta.is_finite() {
            return bad("beta must be finite");
        }
        if EtaSchedule::new(self.alpha, self.t_prime).is_err() {
            return bad("alpha and t-prime must be positive");
        }
        if self.train.batch == 0 || self.train.iters == 0 {
            return bad("batch and iters must be at least 1");
        }
        if !(self.train.lr > 0.0 && self.train.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.eval.n_instances == 0 {
            return bad("eval-instances must be at least 1");
        }
        if self.eval.eval_every == 0 || self.train.iters % self.eval.eval_every != 0 {
            return bad("eval-every must be positive and divide iters");
        }
        if self.seeds == 0 {
            return bad("seeds must be at least 1");
        }
        if self.align_permutations && self.classes > 8 {
            return bad("permutation alignment supports at most 8 classes");
        }
        Ok(())
    }
}
