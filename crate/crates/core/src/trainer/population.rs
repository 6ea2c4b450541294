//! Monte Carlo averages of the per-instance loss and gradient, and the
//! isotropy test applied to them.

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;

use super::loss::{cot_loss_and_grad, teacher_targets};
use super::TrainConfig;
use crate::em::reference_rollout;
use crate::error::{Error, Result};
use crate::rng::{Domain, SeedTree};
use crate::task::generate_instance;

/// Batch mean of loss and gradient with per-entry standard errors of the gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub loss: f64,
    pub grad: DMatrix<f64>,
    /// Per-entry standard error of `grad`; zero when fewer than two instances.
    pub grad_se: DMatrix<f64>,
}

impl BatchStats {
    /// Root mean square of the per-entry standard errors.
    pub fn se_scalar(&self) -> f64 {
        (self.grad_se.norm_squared() / self.grad_se.len() as f64).sqrt()
    }
}

/// Average over `n` fresh instances drawn from substreams `(domain, prefix.., i)`.
/// Instances are processed in parallel and summed in index order.
pub fn batch_stats(
    w: &DMatrix<f64>,
    config: &TrainConfig,
    tree: &SeedTree,
    domain: Domain,
    prefix: &[u64],
    n: usize,
) -> Result<BatchStats> {
    if n == 0 {
        return Err(Error::param("need at least one instance"));
    }
    let per_instance: Vec<Result<(f64, DMatrix<f64>)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut path = prefix.to_vec();
            path.push(i as u64);
            let inst = generate_instance(tree, domain, &path, &config.dims)?;
            let reference = reference_rollout(&inst, config.t_steps, &config.schedule, config.ref_mode)?;
            let targets = teacher_targets(&inst, &reference);
            cot_loss_and_grad(w, &inst, &reference, &targets, config.grad_mode)
        })
        .collect();
    let d = w.nrows();
    let mut loss = 0.0;
    let mut sum = DMatrix::zeros(d, d);
    let mut sum_sq = DMatrix::zeros(d, d);
    for item in per_instance {
        let (l, g) = item?;
        loss += l;
        sum_sq += g.component_mul(&g);
        sum += g;
    }
    let nf = n as f64;
    let grad = sum / nf;
    let grad_se = if n > 1 {
        (sum_sq / nf - grad.component_mul(&grad))
            .map(|v| (v.max(0.0) * nf / (nf - 1.0) / nf).sqrt())
    } else {
        DMatrix::zeros(d, d)
    };
    Ok(BatchStats {
        loss: loss / nf,
        grad,
        grad_se,
    })
}

/// Monte Carlo estimate of the population gradient at `w` over `n` instances
/// with freshly drawn means.
pub fn population_grad_mc<R: Rng + ?Sized>(
    w: &DMatrix<f64>,
    config: &TrainConfig,
    n: usize,
    rng: &mut R,
) -> Result<BatchStats> {
    let tree = SeedTree::new(rng.random());
    batch_stats(w, config, &tree, Domain::Population, &[], n)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IsotropyReport {
    /// Largest `|g_ab| / se_ab` over off-diagonal entries.
    pub max_offdiag_z: f64,
    /// Largest `|g_aa - g_bb| / sqrt(se_aa^2 + se_bb^2)` over diagonal pairs.
    pub max_diag_z: f64,
    pub passed: bool,
}

fn z(num: f64, se: f64) -> f64 {
    if num == 0.0 {
        0.0
    } else {
        num.abs() / se
    }
}

/// Whether `grad` is a multiple of the identity up to `limit` standard errors.
pub fn isotropy_check(grad: &DMatrix<f64>, se: &DMatrix<f64>, limit: f64) -> IsotropyReport {
    let d = grad.nrows();
    let mut off: f64 = 0.0;
    let mut diag: f64 = 0.0;
    for a in 0..d {
        for b in 0..d {
            if a != b {
                off = off.max(z(grad[(a, b)], se[(a, b)]));
            } else {
                for c in a + 1..d {
                    let s = (se[(a, a)].powi(2) + se[(c, c)].powi(2)).sqrt();
                    diag = diag.max(z(grad[(a, a)] - grad[(c, c)], s));
                }
            }
        }
    }
    IsotropyReport {
        max_offdiag_z: off,
        max_diag_z: diag,
        passed: off <= limit && diag <= limit,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::em::RefMode;
    use crate::rng::LabRng;
    use rand::SeedableRng;

    fn config() -> TrainConfig {
        let mut c = TrainConfig::default();
        c.dims.n_unlabeled = 2;
        c.dims.sigma2 = 1.0;
        c.ref_mode = RefMode::FixedTruth;
        c.t_steps = 2;
        c
    }

    #[test]
    fn zero_at_sigma_inverse() {
        let cfg = config();
        let w = DMatrix::identity(3, 3);
        let stats = population_grad_mc(&w, &cfg, 64, &mut LabRng::seed_from_u64(1)).unwrap();
        assert_eq!(stats.grad, DMatrix::zeros(3, 3));
        assert_eq!(stats.se_scalar(), 0.0);
    }

    #[test]
    fn isotropic_and_descending_away_from_truth() {
        let cfg = config();
        let w = DMatrix::identity(3, 3) * 0.5;
        let stats = population_grad_mc(&w, &cfg, 4096, &mut LabRng::seed_from_u64(2)).unwrap();
        let report = isotropy_check(&stats.grad, &stats.grad_se, 4.0);
        assert!(report.passed, "{report:?}");
        let delta = &w - DMatrix::identity(3, 3);
        assert!(delta.dot(&stats.grad) > 0.0);
    }

    #[test]
    fn parallel_sum_is_deterministic() {
        let cfg = config();
        let w = DMatrix::identity(3, 3) * 0.7;
        let a = population_grad_mc(&w, &cfg, 300, &mut LabRng::seed_from_u64(3)).unwrap();
        let b = population_grad_mc(&w, &cfg, 300, &mut LabRng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn isotropy_check_flags_anisotropy() {
        let se = DMatrix::from_element(2, 2, 0.1);
        let iso = DMatrix::from_row_slice(2, 2, &[1.0, 0.05, -0.05, 1.1]);
        assert!(isotropy_check(&iso, &se, 4.0).passed);
        let skew = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(!isotropy_check(&skew, &se, 4.0).passed);
        let stretched = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]);
        let r = isotropy_check(&stretched, &se, 4.0);
        assert!(!r.passed && r.max_diag_z > 7.0);
    }
}
