//! Teacher-forcing training of the first attention layer's matrix `W`.
//! Layers 2-4 and all constants stay frozen.

mod loss;
mod population;

pub use loss::{
    central_difference, cot_loss, cot_loss_and_grad, cot_loss_grad, cot_loss_split, finite_diff_grad, teacher_targets,
    FiniteDiff, GradMode, Targets,
};
pub use population::{batch_stats, isotropy_check, population_grad_mc, BatchStats, IsotropyReport};

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use log::debug;
use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::{build_em_transformer, ParamsFile};
use crate::em::{EtaSchedule, RefMode};
use crate::error::{Error, Result};
use crate::prompt::TokenLayout;
use crate::rng::{Domain, SeedTree};
use crate::task::TaskDims;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum InitKind {
    /// `w0 I`.
    #[default]
    Isotropic,
    /// I.i.d. standard normal entries.
    Gaussian,
}

impl std::str::FromStr for InitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "isotropic" => Ok(InitKind::Isotropic),
            "gaussian" => Ok(InitKind::Gaussian),
            other => Err(Error::Config(format!("unknown init kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub dims: TaskDims,
    pub t_steps: usize,
    pub beta: f64,
    pub schedule: EtaSchedule,
    pub batch_size: usize,
    pub iters: usize,
    pub lr: f64,
    pub init: InitKind,
    /// Scale of the isotropic start; `0.5 / sigma2` when absent.
    pub w0: Option<f64>,
    pub ref_mode: RefMode,
    pub grad_mode: GradMode,
    pub seed: u64,
    /// Keep each iteration's batch gradient and its standard errors.
    pub track_grad_stats: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dims: TaskDims {
                dim: 3,
                classes: 3,
                n_labeled: 5,
                n_unlabeled: 10,
                sigma2: 1.0,
            },
            t_steps: 5,
            beta: 50.0,
            schedule: EtaSchedule::default(),
            batch_size: 64,
            iters: 2000,
            lr: 0.3,
            init: InitKind::Isotropic,
            w0: None,
            ref_mode: RefMode::EmpiricalEm,
            grad_mode: GradMode::CrossOnly,
            seed: 0,
            track_grad_stats: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        if !(self.dims.sigma2 > 0.0) {
            return Err(Error::param("training needs sigma2 > 0"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::param("lr must be positive"));
        }
        if self.iters == 0 || self.batch_size == 0 || self.t_steps == 0 {
            return Err(Error::param("iters, batch size and T must be at least 1"));
        }
        EtaSchedule::new(self.schedule.alpha, self.schedule.t_prime)?;
        Ok(())
    }

    pub fn sigma_inv(&self) -> DMatrix<f64> {
        DMatrix::identity(self.dims.dim, self.dims.dim) / self.dims.sigma2
    }
}

/// One gradient step. `loss`, `grad_norm` and the optional gradient statistics
/// are taken at the pre-update `W`; `w_dist_sq` is measured after the update.
#[derive(Debug, Clone, PartialEq)]
pub struct IterRecord {
    pub iter: usize,
    pub loss: f64,
    pub w_dist_sq: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
    pub grad: Option<DMatrix<f64>>,
    pub grad_se: Option<DMatrix<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub w: DMatrix<f64>,
    pub k: usize,
    pub initial_dist_sq: f64,
    pub history: Vec<IterRecord>,
}

impl TrainState {
    /// `||W^(k) - Sigma^{-1}||_F^2` for `k = 0..=iters`.
    pub fn dist_series(&self) -> Vec<f64> {
        std::iter::once(self.initial_dist_sq)
            .chain(self.history.iter().map(|r| r.w_dist_sq))
            .collect()
    }
}

pub fn initial_w(config: &TrainConfig, tree: &SeedTree) -> DMatrix<f64> {
    let d = config.dims.dim;
    match config.init {
        InitKind::Isotropic => DMatrix::identity(d, d) * config.w0.unwrap_or(0.5 / config.dims.sigma2),
        InitKind::Gaussian => {
            let mut rng = tree.rng(Domain::WeightInit, &[]);
            DMatrix::from_fn(d, d, |_, _| StandardNormal.sample(&mut rng))
        }
    }
}

/// Plain gradient descent on batch-averaged CoT loss, one step at a time.
pub struct Trainer {
    config: TrainConfig,
    tree: SeedTree,
    sigma_inv: DMatrix<f64>,
    state: TrainState,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let tree = SeedTree::new(config.seed);
        let w = initial_w(&config, &tree);
        Self::starting_at(config, w)
    }

    /// Start from a given `W` instead of the configured initialization.
    pub fn starting_at(config: TrainConfig, w: DMatrix<f64>) -> Result<Self> {
        config.validate()?;
        let d = config.dims.dim;
        if w.shape() != (d, d) {
            return Err(Error::layout(format!("W must be {d}x{d}")));
        }
        let sigma_inv = config.sigma_inv();
        let initial_dist_sq = (&w - &sigma_inv).norm_squared();
        Ok(Trainer {
            tree: SeedTree::new(config.seed),
            config,
            sigma_inv,
            state: TrainState {
                w,
                k: 0,
                initial_dist_sq,
                history: Vec::new(),
            },
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    pub fn step(&mut self) -> Result<&IterRecord> {
        let start = Instant::now();
        let k = self.state.k + 1;
        let stats = batch_stats(
            &self.state.w,
            &self.config,
            &self.tree,
            Domain::TrainBatch,
            &[k as u64],
            self.config.batch_size,
        )?;
        if !stats.loss.is_finite() || !stats.grad.iter().all(|v| v.is_finite()) {
            return Err(Error::Diverged { iteration: k });
        }
        self.state.w -= &stats.grad * self.config.lr;
        let w_dist_sq = (&self.state.w - &self.sigma_inv).norm_squared();
        if !w_dist_sq.is_finite() {
            return Err(Error::Diverged { iteration: k });
        }
        let grad_norm = stats.grad.norm();
        debug!("iter {k}: loss {:.6} dist {w_dist_sq:.3e}", stats.loss);
        let track = self.config.track_grad_stats;
        self.state.k = k;
        self.state.history.push(IterRecord {
            iter: k,
            loss: stats.loss,
            w_dist_sq,
            grad_norm,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            grad: track.then(|| stats.grad.clone()),
            grad_se: track.then_some(stats.grad_se),
        });
        Ok(self.state.history.last().expect("just pushed"))
    }
}

pub fn train(config: &TrainConfig) -> Result<TrainState> {
    let mut trainer = Trainer::new(config.clone())?;
    for _ in 0..config.iters {
        trainer.step()?;
    }
    Ok(trainer.into_state())
}

/// Trained `W` with the frozen constants, in the transformer parameter format.
pub fn export_weights(state: &TrainState, config: &TrainConfig) -> Result<ParamsFile> {
    let dims = &config.dims;
    let layout = TokenLayout::new(dims.dim, dims.classes)?;
    let params = build_em_transformer(
        &layout,
        &state.w,
        config.beta,
        &config.schedule,
        dims.n_labeled,
        dims.n_unlabeled,
    )?;
    Ok(ParamsFile::from(&params))
}

pub fn save_weights(state: &TrainState, config: &TrainConfig, path: &Path) -> Result<()> {
    std::fs::write(path, export_weights(state, config)?.to_json()?)?;
    Ok(())
}

/// CSV with columns `iter, loss, w_dist_sq, grad_norm, wall_ms`. Wall times
/// are left blank unless `timing` is set, so reruns stay byte-identical.
pub fn write_training_log<W: Write>(history: &[IterRecord], out: W, timing: bool) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["iter", "loss", "w_dist_sq", "grad_norm", "wall_ms"])?;
    for r in history {
        let wall = if timing { format!("{:.3}", r.wall_ms) } else { String::new() };
        w.write_record([
            r.iter.to_string(),
            r.loss.to_string(),
            r.w_dist_sq.to_string(),
            r.grad_norm.to_string(),
            wall,
        ])?;
    }
    w.flush()?;
    Ok(())
}
