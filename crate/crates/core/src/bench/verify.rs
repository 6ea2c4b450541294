//! Named invariant suites with measured values, run by `augicl verify`.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::attention::{build_em_transformer, cot_rollout};
use crate::em::{reference_rollout, EtaSchedule, RefMode};
use crate::error::{Error, Result};
use crate::numeric::linear_fit;
use crate::prompt::{encode_instance, TokenLayout};
use crate::rng::{Domain, SeedTree};
use crate::task::{generate_instance, TaskDims};
use crate::trainer::{
    cot_loss_grad, finite_diff_grad, isotropy_check, teacher_targets, GradMode, InitKind, TrainConfig, Trainer,
};

pub const SUITES: [(&str, &str); 4] = [
    (
        "rollout_equivalence",
        "transformer rollout with W = Sigma^-1 matches reference EM within 1e-6 over T = 5",
    ),
    (
        "gradient_check",
        "analytic CoT gradient matches central differences (rel. Frobenius <= 1e-5), exact zero at Sigma^-1",
    ),
    (
        "isotropy",
        "batch gradients along the fixed-truth training path are isotropic within 4 standard errors",
    ),
    (
        "decay_rate",
        "fitted slope of log ||W - Sigma^-1||_F^2 within 15% of 2 log(1 - gamma lr)",
    ),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyConfig {
    pub beta: f64,
    pub sigma2: Vec<f64>,
    pub rollout_instances: usize,
    pub gradient_fixtures: usize,
    pub train_batch: usize,
    pub train_steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            beta: 50.0,
            sigma2: vec![0.7, 1.5],
            rollout_instances: 100,
            gradient_fixtures: 50,
            train_batch: 4096,
            train_steps: 30,
            lr: 0.3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub name: String,
    pub passed: bool,
    pub measured: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub passed: bool,
    pub suites: Vec<SuiteResult>,
}

fn result(name: &str, passed: bool, measured: &[(&str, f64)]) -> SuiteResult {
    SuiteResult {
        name: name.to_string(),
        passed,
        measured: measured.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
    }
}

/// Largest entry-wise gap between transformer and reference trajectories.
pub fn rollout_gap(cfg: &VerifyConfig, sigma2: f64, index: u64, instances: usize) -> Result<f64> {
    let tree = SeedTree::new(cfg.seed);
    let dims = TaskDims {
        dim: 3,
        classes: 3,
        n_labeled: 5,
        n_unlabeled: 10,
        sigma2,
    };
    let layout = TokenLayout::new(3, 3)?;
    let sched = EtaSchedule::default();
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let inst = generate_instance(&tree, Domain::Fixture, &[1, index, i as u64], &dims)?;
        let params = build_em_transformer(&layout, &inst.sigma_inv(), cfg.beta, &sched, 5, 10)?;
        let (traj, _) = cot_rollout(&params, &encode_instance(&inst, &layout)?, 5)?;
        let reference = reference_rollout(&inst, 5, &sched, RefMode::EmpiricalEm)?;
        for (a, b) in traj.steps.iter().zip(&reference.steps) {
            worst = worst.max((a.as_matrix() - b.as_matrix()).amax());
        }
    }
    Ok(worst)
}

fn rollout_equivalence(cfg: &VerifyConfig) -> Result<SuiteResult> {
    let mut measured = Vec::new();
    let mut worst: f64 = 0.0;
    for (k, &s) in cfg.sigma2.iter().enumerate() {
        let gap = rollout_gap(cfg, s, k as u64, cfg.rollout_instances)?;
        worst = worst.max(gap);
        measured.push((format!("max_abs_gap_sigma2_{s}"), gap));
    }
    let mut r = result("rollout_equivalence", worst <= 1e-6, &[("max_abs_gap", worst), ("beta", cfg.beta)]);
    r.measured.extend(measured);
    Ok(r)
}

/// Worst relative error of the analytic gradient and the largest gradient
/// entry at `W = Sigma^{-1}` over the fixture family.
pub fn gradient_errors(cfg: &VerifyConfig, fixtures: usize) -> Result<(f64, f64)> {
    let tree = SeedTree::new(cfg.seed);
    let mut worst_rel: f64 = 0.0;
    let mut worst_zero: f64 = 0.0;
    for k in 0..fixtures {
        let d = [1, 2, 3][k % 3];
        let c = [2, 3][(k / 3) % 2];
        let mut rng = tree.rng(Domain::Fixture, &[2, k as u64]);
        let sigma2 = Uniform::new(0.5, 1.5).expect("valid range").sample(&mut rng);
        let dims = TaskDims {
            dim: d,
            classes: c,
            n_labeled: 4,
            n_unlabeled: 6,
            sigma2,
        };
        let inst = generate_instance(&tree, Domain::Fixture, &[3, k as u64], &dims)?;
        let mode = if k % 2 == 0 { RefMode::EmpiricalEm } else { RefMode::FixedTruth };
        let reference = reference_rollout(&inst, 3, &EtaSchedule::default(), mode)?;
        let targets = teacher_targets(&inst, &reference);
        let sigma_inv = inst.sigma_inv();
        let w = &sigma_inv + DMatrix::from_fn(d, d, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            0.3 * z
        });
        let g = cot_loss_grad(&w, &inst, &reference, &targets)?;
        let fd = finite_diff_grad(&w, &inst, &reference, &targets, 1e-5)?;
        worst_rel = worst_rel.max((&g - &fd.grad).norm() / g.norm());
        worst_zero = worst_zero.max(cot_loss_grad(&sigma_inv, &inst, &reference, &targets)?.amax());
    }
    Ok((worst_rel, worst_zero))
}

fn gradient_check(cfg: &VerifyConfig) -> Result<SuiteResult> {
    let (rel, zero) = gradient_errors(cfg, cfg.gradient_fixtures)?;
    Ok(result(
        "gradient_check",
        rel <= 1e-5 && zero == 0.0,
        &[("max_rel_frobenius_err", rel), ("max_abs_grad_at_truth", zero), ("fixtures", cfg.gradient_fixtures as f64)],
    ))
}

/// Training setup of the rate test: fixed-truth reference, isotropic start at
/// `0.5 / sigma2`, `sigma2 = 1`, `C = d = 3`, one unlabeled sample per instance.
pub fn decay_train_config(cfg: &VerifyConfig) -> TrainConfig {
    TrainConfig {
        dims: TaskDims {
            dim: 3,
            classes: 3,
            n_labeled: 5,
            n_unlabeled: 1,
            sigma2: 1.0,
        },
        t_steps: 5,
        beta: cfg.beta,
        schedule: EtaSchedule::default(),
        batch_size: cfg.train_batch,
        iters: cfg.train_steps,
        lr: cfg.lr,
        init: InitKind::Isotropic,
        w0: None,
        ref_mode: RefMode::FixedTruth,
        grad_mode: GradMode::CrossOnly,
        seed: cfg.seed,
        track_grad_stats: true,
    }
}

/// Measured decay of the rate test.
#[derive(Debug, Clone, PartialEq)]
pub struct DecayMeasurement {
    pub fitted_slope: f64,
    pub predicted_slope: f64,
    pub dist_series: Vec<f64>,
    pub max_offdiag_z: f64,
    pub max_diag_z: f64,
    pub isotropic_every_step: bool,
}

pub fn measure_decay(cfg: &VerifyConfig) -> Result<DecayMeasurement> {
    let tc = decay_train_config(cfg);
    let mut trainer = Trainer::new(tc.clone())?;
    let mut off: f64 = 0.0;
    let mut diag: f64 = 0.0;
    let mut all_iso = true;
    for _ in 0..tc.iters {
        let rec = trainer.step()?;
        let (g, se) = (rec.grad.as_ref(), rec.grad_se.as_ref());
        let iso = isotropy_check(g.expect("tracked"), se.expect("tracked"), 4.0);
        off = off.max(iso.max_offdiag_z);
        diag = diag.max(iso.max_diag_z);
        all_iso &= iso.passed;
    }
    let dist = trainer.state().dist_series();
    let ks: Vec<f64> = (0..dist.len()).map(|k| k as f64).collect();
    let logs: Vec<f64> = dist.iter().map(|v| v.ln()).collect();
    let (slope, _) = linear_fit(&ks, &logs);
    let gamma = tc.dims.sigma2 * (1.0 - 1.0 / tc.dims.classes as f64);
    Ok(DecayMeasurement {
        fitted_slope: slope,
        predicted_slope: 2.0 * (1.0 - gamma * tc.lr).ln(),
        dist_series: dist,
        max_offdiag_z: off,
        max_diag_z: diag,
        isotropic_every_step: all_iso,
    })
}

impl DecayMeasurement {
    pub fn relative_slope_error(&self) -> f64 {
        ((self.fitted_slope - self.predicted_slope) / self.predicted_slope).abs()
    }

    pub fn rate_ok(&self) -> bool {
        self.relative_slope_error() <= 0.15
    }
}

pub fn run_suite(name: &str, cfg: &VerifyConfig) -> Result<SuiteResult> {
    match name {
        "rollout_equivalence" => rollout_equivalence(cfg),
        "gradient_check" => gradient_check(cfg),
        "isotropy" => {
            let m = measure_decay(cfg)?;
            Ok(result(
                "isotropy",
                m.isotropic_every_step,
                &[("max_offdiag_z", m.max_offdiag_z), ("max_diag_pair_z", m.max_diag_z)],
            ))
        }
        "decay_rate" => {
            let m = measure_decay(cfg)?;
            Ok(result(
                "decay_rate",
                m.rate_ok(),
                &[
                    ("fitted_slope", m.fitted_slope),
                    ("predicted_slope", m.predicted_slope),
                    ("relative_error", m.relative_slope_error()),
                    ("fitted_ratio_per_step", m.fitted_slope.exp()),
                ],
            ))
        }
        other => Err(Error::Config(format!("unknown suite '{other}'"))),
    }
}

/// Run the named suites (all when `names` is empty).
pub fn verify(cfg: &VerifyConfig, names: &[String]) -> Result<VerifyReport> {
    let selected: Vec<&str> = if names.is_empty() {
        SUITES.iter().map(|(n, _)| *n).collect()
    } else {
        names.iter().map(String::as_str).collect()
    };
    let suites = selected
        .iter()
        .map(|n| run_suite(n, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(VerifyReport {
        passed: suites.iter().all(|s| s.passed),
        suites,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_equivalence_run_passes_and_low_beta_fails() {
        let cfg = VerifyConfig {
            rollout_instances: 5,
            ..VerifyConfig::default()
        };
        assert!(run_suite("rollout_equivalence", &cfg).unwrap().passed);
        let weak = VerifyConfig { beta: 1.0, ..cfg };
        let r = run_suite("rollout_equivalence", &weak).unwrap();
        assert!(!r.passed, "{r:?}");
    }

    #[test]
    fn gradient_suite_on_a_few_fixtures() {
        let cfg = VerifyConfig {
            gradient_fixtures: 6,
            ..VerifyConfig::default()
        };
        assert!(run_suite("gradient_check", &cfg).unwrap().passed);
    }

    #[test]
    fn unknown_suite_is_a_config_error() {
        assert!(matches!(
            verify(&VerifyConfig::default(), &["nope".to_string()]),
            Err(Error::Config(_))
        ));
    }
}
