//! Teacher-forced CoT cross-entropy and its gradient with respect to the
//! first-layer matrix `W`.
//!
//! The model score of class `i` for sample `x` at step `t` is
//! `-1/2 mu_i^T W_stop mu_i + x^T W mu_i`, where `mu_i` comes from the reference
//! trajectory. `W_stop` is a copy of `W` that gradients do not flow through,
//! so the default gradient is `(1/T) sum_{t,j,i} (p_hat - p) x mu_i^T`.

use log::warn;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::em::{posterior_last, PosteriorVector, ReferenceTrajectory};
use crate::error::{Error, Result};
use crate::numeric::{log_softmax, softmax};
use crate::task::TaskInstance;

/// Which parts of the score are differentiated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum GradMode {
    /// Cross term only; the quadratic term's `W` is held fixed.
    #[default]
    CrossOnly,
    /// Both terms.
    Full,
}

/// `targets[t - 1][j]`: posterior of unlabeled sample `j` under the reference
/// means of step `t` and the true `Sigma^{-1}`.
pub type Targets = Vec<Vec<PosteriorVector>>;

pub fn teacher_targets(instance: &TaskInstance, reference: &ReferenceTrajectory) -> Targets {
    let sigma_inv = instance.sigma_inv();
    reference.steps[1..]
        .iter()
        .map(|means| {
            instance
                .unlabeled_x
                .column_iter()
                .map(|x| posterior_last(x.as_view(), means, &sigma_inv))
                .collect()
        })
        .collect()
}

fn check_shapes(w: &DMatrix<f64>, instance: &TaskInstance, reference: &ReferenceTrajectory, targets: &Targets) -> Result<()> {
    let d = instance.dim();
    if w.shape() != (d, d) {
        return Err(Error::layout(format!("W must be {d}x{d}")));
    }
    let t = reference.cot_steps();
    if targets.len() != t || targets.iter().any(|s| s.len() != instance.n_unlabeled()) {
        return Err(Error::layout("targets must have T steps of M_u posteriors"));
    }
    Ok(())
}

fn ce_terms(
    w_cross: &DMatrix<f64>,
    w_stop: &DMatrix<f64>,
    instance: &TaskInstance,
    reference: &ReferenceTrajectory,
    targets: &Targets,
    mut visit: impl FnMut(usize, usize, &[f64], &PosteriorVector),
) -> f64 {
    let mut total = 0.0;
    for (t, step_targets) in targets.iter().enumerate() {
        let mu = reference.steps[t + 1].as_matrix();
        let stopped = w_stop * mu;
        let quad: Vec<f64> = (0..mu.ncols()).map(|i| -0.5 * mu.column(i).dot(&stopped.column(i))).collect();
        let cross = w_cross * mu;
        for (j, (x, p)) in instance.unlabeled_x.column_iter().zip(step_targets).enumerate() {
            let scores: Vec<f64> = (0..mu.ncols()).map(|i| quad[i] + x.dot(&cross.column(i))).collect();
            let logp = log_softmax(&scores);
            total -= p.iter().zip(&logp).map(|(pi, lq)| if *pi == 0.0 { 0.0 } else { pi * lq }).sum::<f64>();
            visit(t, j, &scores, p);
        }
    }
    total / targets.len() as f64
}

/// Loss with separate matrices for the cross and quadratic terms.
pub fn cot_loss_split(
    w_cross: &DMatrix<f64>,
    w_stop: &DMatrix<f64>,
    instance: &TaskInstance,
    reference: &ReferenceTrajectory,
    targets: &Targets,
) -> Result<f64> {
    check_shapes(w_cross, instance, reference, targets)?;
    check_shapes(w_stop, instance, reference, targets)?;
    Ok(ce_terms(w_cross, w_stop, instance, reference, targets, |_, _, _, _| {}))
}

/// `(1/T) sum_t sum_j CE(target, model posterior)`.
pub fn cot_loss(w: &DMatrix<f64>, instance: &TaskInstance, reference: &ReferenceTrajectory, targets: &Targets) -> Result<f64> {
    cot_loss_split(w, w, instance, reference, targets)
}

/// Loss and gradient in one pass.
pub fn cot_loss_and_grad(
    w: &DMatrix<f64>,
    instance: &TaskInstance,
    reference: &ReferenceTrajectory,
    targets: &Targets,
    mode: GradMode,
) -> Result<(f64, DMatrix<f64>)> {
    check_shapes(w, instance, reference, targets)?;
    let d = instance.dim();
    let mut grad = DMatrix::zeros(d, d);
    let loss = ce_terms(w, w, instance, reference, targets, |t, j, scores, p| {
        let mu = reference.steps[t + 1].as_matrix();
        let x = instance.unlabeled_x.column(j);
        let q = softmax(scores);
        for (i, qi) in q.iter().enumerate() {
            let r = qi - p[i];
            if r == 0.0 {
                continue;
            }
            let m = mu.column(i);
            grad += x * m.transpose() * r;
            if mode == GradMode::Full {
                grad -= m * m.transpose() * (0.5 * r);
            }
        }
    });
    grad /= targets.len() as f64;
    Ok((loss, grad))
}

pub fn cot_loss_grad(w: &DMatrix<f64>, instance: &TaskInstance, reference: &ReferenceTrajectory, targets: &Targets) -> Result<DMatrix<f64>> {
    Ok(cot_loss_and_grad(w, instance, reference, targets, GradMode::CrossOnly)?.1)
}

/// Central-difference gradient and the entries whose difference cancelled.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteDiff {
    pub grad: DMatrix<f64>,
    /// `(row, col)` of entries where `|f(W + h) - f(W - h)| < 1e-12`.
    pub cancelled: Vec<(usize, usize)>,
}

/// Central differences of `f` at `w`, one entry at a time.
pub fn central_difference(w: &DMatrix<f64>, h: f64, mut f: impl FnMut(&DMatrix<f64>) -> Result<f64>) -> Result<FiniteDiff> {
    if !(h > 0.0) {
        return Err(Error::param("finite-difference step must be positive"));
    }
    let mut grad = DMatrix::zeros(w.nrows(), w.ncols());
    let mut cancelled = Vec::new();
    let mut probe = w.clone();
    for c in 0..w.ncols() {
        for r in 0..w.nrows() {
            let base = w[(r, c)];
            probe[(r, c)] = base + h;
            let up = f(&probe)?;
            probe[(r, c)] = base - h;
            let down = f(&probe)?;
            probe[(r, c)] = base;
            let diff = up - down;
            if diff.abs() < 1e-12 {
                cancelled.push((r, c));
            }
            grad[(r, c)] = diff / (2.0 * h);
        }
    }
    if !cancelled.is_empty() {
        warn!(
            "finite differences cancelled on {} of {} entries (h = {h:e})",
            cancelled.len(),
            w.len()
        );
    }
    Ok(FiniteDiff { grad, cancelled })
}

/// Central-difference oracle for [`cot_loss_grad`]: only the cross-term `W`
/// is perturbed, the quadratic-term copy stays at the base point.
pub fn finite_diff_grad(
    w: &DMatrix<f64>,
    instance: &TaskInstance,
    reference: &ReferenceTrajectory,
    targets: &Targets,
    h: f64,
) -> Result<FiniteDiff> {
    central_difference(w, h, |probe| cot_loss_split(probe, w, instance, reference, targets))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::em::{reference_rollout, EtaSchedule, RefMode};
    use crate::prompt::MeanEstimates;
    use crate::rng::LabRng;
    use crate::task::{sample_instance, sample_means};
    use rand::SeedableRng;

    fn fixture(d: usize, c: usize, seed: u64, mode: RefMode) -> (TaskInstance, ReferenceTrajectory, Targets) {
        let mut rng = LabRng::seed_from_u64(seed);
        let means = sample_means(d, c, &mut rng).unwrap();
        let inst = sample_instance(&means, 0.8, 4, 6, &mut rng).unwrap();
        let reference = reference_rollout(&inst, 3, &EtaSchedule::default(), mode).unwrap();
        let targets = teacher_targets(&inst, &reference);
        (inst, reference, targets)
    }

    fn entropy(targets: &Targets) -> f64 {
        let s: f64 = targets
            .iter()
            .flatten()
            .map(|p| -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>())
            .sum();
        s / targets.len() as f64
    }

    #[test]
    fn targets_match_reference_posteriors() {
        let (inst, reference, targets) = fixture(3, 3, 1, RefMode::EmpiricalEm);
        assert_eq!(targets, reference.posteriors);
        for p in targets.iter().flatten() {
            assert!((p.sum() - 1.0).abs() < 1e-12);
        }
        assert_eq!(targets.len(), 3);
        assert_eq!(targets[0].len(), inst.n_unlabeled());
    }

    #[test]
    fn loss_at_truth_is_target_entropy() {
        let (inst, reference, targets) = fixture(3, 3, 2, RefMode::EmpiricalEm);
        let s = inst.sigma_inv();
        let at_truth = cot_loss(&s, &inst, &reference, &targets).unwrap();
        assert!((at_truth - entropy(&targets)).abs() < 1e-12);
        assert_eq!(cot_loss_grad(&s, &inst, &reference, &targets).unwrap(), DMatrix::zeros(3, 3));
        for k in 0..20 {
            let w = DMatrix::from_fn(3, 3, |r, c| ((r * 3 + c + k) % 5) as f64 * 0.3 - 0.4);
            assert!(cot_loss(&w, &inst, &reference, &targets).unwrap() >= at_truth);
        }
    }

    #[test]
    fn scalar_cross_entropy_by_hand() {
        // d = 1, C = 2, one step, one unlabeled x = 1, reference means (-1, 1), W = 2.
        let (mut inst, _, _) = fixture(1, 2, 3, RefMode::FixedTruth);
        inst.unlabeled_x = DMatrix::from_element(1, 1, 1.0);
        let reference = ReferenceTrajectory {
            steps: vec![MeanEstimates::zeros(1, 2), MeanEstimates::new(DMatrix::from_row_slice(1, 2, &[-1.0, 1.0]))],
            posteriors: vec![],
        };
        let p = PosteriorVector::from_vec(vec![0.119_202_922_022_117_55, 0.880_797_077_977_882_3]);
        let targets = vec![vec![p]];
        let w = DMatrix::from_element(1, 1, 2.0);
        // Scores: -1/2 * 2 * 1 + 2 * 1 * mu = -1 -+ 2, so the gap is 4.
        let q1 = 1.0 / (1.0 + (-4.0_f64).exp());
        let expected = -(0.119_202_922_022_117_55 * (1.0 - q1).ln() + 0.880_797_077_977_882_3 * q1.ln());
        let loss = cot_loss(&w, &inst, &reference, &targets).unwrap();
        assert!((loss - expected).abs() < 1e-14);
        // d/dW: sum_i (q_i - p_i) x mu_i = (q1 - p1) * 1 * 1 + (q0 - p0) * 1 * (-1).
        let g = cot_loss_grad(&w, &inst, &reference, &targets).unwrap();
        let hand = 2.0 * (q1 - 0.880_797_077_977_882_3);
        assert!((g[(0, 0)] - hand).abs() < 1e-14);
    }

    #[test]
    fn analytic_matches_central_differences() {
        for (k, (d, c)) in [(1, 2), (2, 3), (3, 3), (3, 2)].into_iter().enumerate() {
            let (inst, reference, targets) = fixture(d, c, 10 + k as u64, RefMode::EmpiricalEm);
            let w = DMatrix::from_fn(d, d, |r, cc| if r == cc { 0.6 } else { 0.1 * (r as f64 - cc as f64) });
            let g = cot_loss_grad(&w, &inst, &reference, &targets).unwrap();
            let fd = finite_diff_grad(&w, &inst, &reference, &targets, 1e-5).unwrap();
            let rel = (&g - &fd.grad).norm() / g.norm();
            assert!(rel < 1e-5, "d={d} C={c}: {rel}");
        }
    }

    #[test]
    fn full_mode_matches_plain_differences() {
        let (inst, reference, targets) = fixture(2, 3, 30, RefMode::EmpiricalEm);
        let w = DMatrix::from_row_slice(2, 2, &[0.7, 0.2, -0.1, 1.1]);
        let (_, g) = cot_loss_and_grad(&w, &inst, &reference, &targets, GradMode::Full).unwrap();
        let fd = central_difference(&w, 1e-5, |p| cot_loss(p, &inst, &reference, &targets)).unwrap();
        assert!((&g - &fd.grad).norm() / g.norm() < 1e-5);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let w = DMatrix::from_element(2, 2, 0.3);
        let fd = central_difference(&w, 1e-4, |_| Ok(4.2)).unwrap();
        assert_eq!(fd.grad, DMatrix::zeros(2, 2));
        assert_eq!(fd.cancelled.len(), 4);
        assert!(central_difference(&w, 0.0, |_| Ok(0.0)).is_err());
    }

    #[test]
    fn scalar_derivative_by_hand() {
        let w = DMatrix::from_element(1, 1, 0.5);
        let fd = central_difference(&w, 1e-5, |m| Ok(m[(0, 0)].powi(3))).unwrap();
        assert!((fd.grad[(0, 0)] - 0.75).abs() < 1e-9);
    }
}
