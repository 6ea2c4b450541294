//! Reference EM for the isotropic Gaussian mixture: posteriors, labeled-data
//! initialization, gradient-style mean updates and full rollouts. The rollout
//! doubles as the teacher trajectory during training.

use nalgebra::{DMatrix, DVector, DVectorView};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{log_sum_exp, softmax};
use crate::prompt::MeanEstimates;
use crate::task::{nearest_column, LabelVector, TaskInstance};

/// Class posterior of one sample; entries are non-negative and sum to one.
pub type PosteriorVector = DVector<f64>;

/// Step sizes `eta(t) = alpha / (t_prime + t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EtaSchedule {
    pub alpha: f64,
    pub t_prime: f64,
}

impl Default for EtaSchedule {
    fn default() -> Self {
        EtaSchedule {
            alpha: 1.0,
            t_prime: 4.0,
        }
    }
}

impl EtaSchedule {
    pub fn new(alpha: f64, t_prime: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite() && t_prime > 0.0 && t_prime.is_finite()) {
            return Err(Error::param("alpha and T' must be positive and finite"));
        }
        Ok(EtaSchedule { alpha, t_prime })
    }

    pub fn eta(&self, t: usize) -> f64 {
        self.alpha / (self.t_prime + t as f64)
    }
}

pub fn eta(schedule: &EtaSchedule, t: usize) -> f64 {
    schedule.eta(t)
}

/// How the reference trajectory is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RefMode {
    /// Labeled-data initialization followed by EM steps with the
    /// latest-step posterior under the true `Sigma^{-1}`.
    #[default]
    EmpiricalEm,
    /// Every step holds the ground-truth means.
    FixedTruth,
}

impl std::str::FromStr for RefMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "empirical-em" => Ok(RefMode::EmpiricalEm),
            "fixed-truth" => Ok(RefMode::FixedTruth),
            other => Err(Error::Config(format!("unknown reference mode '{other}'"))),
        }
    }
}

/// Means at steps `0..=T` (step 0 is zero) and, for each step `t >= 1`, the
/// latest-step posteriors of every unlabeled sample under `Sigma^{-1}`
/// (`posteriors[t - 1][j]`).
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTrajectory {
    pub steps: Vec<MeanEstimates>,
    pub posteriors: Vec<Vec<PosteriorVector>>,
}

impl ReferenceTrajectory {
    pub fn cot_steps(&self) -> usize {
        self.steps.len() - 1
    }

    pub fn last(&self) -> &MeanEstimates {
        self.steps.last().expect("trajectory has step 0")
    }
}

/// Scores `-1/2 mu_i^T W mu_i + x^T W mu_i` for every class. The `x`-only part
/// of the squared distance is dropped since it cancels under normalization.
pub fn class_scores(x: DVectorView<'_, f64>, means: &DMatrix<f64>, w: &DMatrix<f64>) -> DVector<f64> {
    let wm = w * means;
    DVector::from_fn(means.ncols(), |i, _| {
        let mu = means.column(i);
        let col = wm.column(i);
        -0.5 * mu.dot(&col) + x.dot(&col)
    })
}

/// Posterior using only the latest means.
pub fn posterior_last(x: DVectorView<'_, f64>, means: &MeanEstimates, w: &DMatrix<f64>) -> PosteriorVector {
    let s = class_scores(x, means.as_matrix(), w);
    DVector::from_vec(softmax(s.as_slice()))
}

/// Posterior pooled over the whole history: class `i` collects
/// `sum_tau exp(score_i(tau) + beta tau)`, normalized jointly over classes and steps.
pub fn posterior_full(
    x: DVectorView<'_, f64>,
    history: &[MeanEstimates],
    w: &DMatrix<f64>,
    beta: f64,
) -> Result<PosteriorVector> {
    let first = history
        .first()
        .ok_or_else(|| Error::param("posterior history must contain step 0"))?;
    let c = first.classes();
    let mut per_class = vec![Vec::with_capacity(history.len()); c];
    for (tau, means) in history.iter().enumerate() {
        let s = class_scores(x, means.as_matrix(), w);
        for i in 0..c {
            per_class[i].push(s[i] + beta * tau as f64);
        }
    }
    let logs: Vec<f64> = per_class.iter().map(|v| log_sum_exp(v)).collect();
    if logs.iter().any(|v| !v.is_finite()) {
        return Err(Error::overflow("history posterior"));
    }
    Ok(DVector::from_vec(softmax(&logs)))
}

/// `mu_i = (C / N) sum_j [y_j = i] x_j`; zero columns for `N = 0` or classes
/// without labeled samples.
pub fn init_means_from_labeled(instance: &TaskInstance) -> MeanEstimates {
    let d = instance.dim();
    let c = instance.classes();
    let n = instance.n_labeled();
    let mut m = DMatrix::zeros(d, c);
    if n == 0 {
        return MeanEstimates::new(m);
    }
    for (x, y) in instance.labeled_x.column_iter().zip(&instance.labeled_y) {
        let mut col = m.column_mut(y.class);
        col += x;
    }
    m *= c as f64 / n as f64;
    MeanEstimates::new(m)
}

/// `mu_i <- mu_i - (eta / M_u) sum_j p_ij (mu_i - x_j)`, summed in sample order.
pub fn em_step(
    means: &MeanEstimates,
    unlabeled: &DMatrix<f64>,
    posteriors: &[PosteriorVector],
    eta_t: f64,
) -> Result<MeanEstimates> {
    let m = unlabeled.ncols();
    if posteriors.len() != m {
        return Err(Error::param(format!(
            "{} posteriors for {m} unlabeled samples",
            posteriors.len()
        )));
    }
    if m == 0 {
        return Ok(means.clone());
    }
    let mu = means.as_matrix();
    let mut force = DMatrix::zeros(mu.nrows(), mu.ncols());
    for (x, p) in unlabeled.column_iter().zip(posteriors) {
        for i in 0..mu.ncols() {
            let mut col = force.column_mut(i);
            col += (mu.column(i) - x) * p[i];
        }
    }
    Ok(MeanEstimates::new(mu - force * (eta_t / m as f64)))
}

fn posteriors_at(unlabeled: &DMatrix<f64>, means: &MeanEstimates, w: &DMatrix<f64>) -> Vec<PosteriorVector> {
    unlabeled
        .column_iter()
        .map(|x| posterior_last(x.as_view(), means, w))
        .collect()
}

/// Reference trajectory over `T` steps.
pub fn reference_rollout(
    instance: &TaskInstance,
    t_steps: usize,
    schedule: &EtaSchedule,
    mode: RefMode,
) -> Result<ReferenceTrajectory> {
    if t_steps == 0 {
        return Err(Error::param("T must be at least 1"));
    }
    if !(instance.sigma2 > 0.0) {
        return Err(Error::param("reference rollout needs sigma2 > 0"));
    }
    let sigma_inv = instance.sigma_inv();
    let mut steps = vec![MeanEstimates::zeros(instance.dim(), instance.classes())];
    let mut posteriors = Vec::with_capacity(t_steps);
    match mode {
        RefMode::FixedTruth => {
            let truth = MeanEstimates::new(instance.means.as_matrix().clone());
            let post = posteriors_at(&instance.unlabeled_x, &truth, &sigma_inv);
            for _ in 0..t_steps {
                steps.push(truth.clone());
                posteriors.push(post.clone());
            }
        }
        RefMode::EmpiricalEm => {
            steps.push(init_means_from_labeled(instance));
            for t in 1..=t_steps {
                let current = &steps[t];
                let post = posteriors_at(&instance.unlabeled_x, current, &sigma_inv);
                if t < t_steps {
                    let next = em_step(current, &instance.unlabeled_x, &post, schedule.eta(t))?;
                    steps.push(next);
                }
                posteriors.push(post);
            }
        }
    }
    Ok(ReferenceTrajectory { steps, posteriors })
}

/// Nearest-estimate labels, smallest index on ties.
pub fn predict_labels(unlabeled: &DMatrix<f64>, means: &MeanEstimates) -> Vec<LabelVector> {
    unlabeled
        .column_iter()
        .map(|x| LabelVector {
            class: nearest_column(x.as_view(), means.as_matrix()),
            classes: means.classes(),
        })
        .collect()
}
