//! Task generation for augmented in-context classification: Gaussian-mixture
//! instances with a few labeled and many unlabeled samples, plus the
//! nearest-mean baselines used to judge the transformer.

use nalgebra::{DMatrix, DVector, DVectorView};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::em;
use crate::error::{Error, Result};
use crate::rng::{Domain, SeedRecord, SeedTree};

/// Ground-truth class means, one column per class (`d x C`).
#[derive(Debug, Clone, PartialEq)]
pub struct MeanMatrix(DMatrix<f64>);

impl MeanMatrix {
    pub fn new(columns: DMatrix<f64>) -> Result<Self> {
        if columns.nrows() == 0 || columns.ncols() == 0 {
            return Err(Error::param("mean matrix needs d >= 1 and C >= 1"));
        }
        if columns.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("mean matrix has non-finite entries"));
        }
        Ok(MeanMatrix(columns))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn classes(&self) -> usize {
        self.0.ncols()
    }

    pub fn column(&self, i: usize) -> DVectorView<'_, f64> {
        self.0.column(i)
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }
}

/// A one-hot label `e_class` in `R^classes`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelVector {
    pub class: usize,
    pub classes: usize,
}

impl LabelVector {
    pub fn new(class: usize, classes: usize) -> Result<Self> {
        if class >= classes {
            return Err(Error::param(format!("class {class} out of range for C = {classes}")));
        }
        Ok(LabelVector { class, classes })
    }

    pub fn one_hot(&self) -> DVector<f64> {
        DVector::from_fn(self.classes, |i, _| if i == self.class { 1.0 } else { 0.0 })
    }
}

/// Shape of a task family: input dimension, class count, block sizes and
/// isotropic noise variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskDims {
    pub dim: usize,
    pub classes: usize,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub sigma2: f64,
}

impl TaskDims {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.classes == 0 {
            return Err(Error::param("d and C must be at least 1"));
        }
        if !(self.sigma2 >= 0.0 && self.sigma2.is_finite()) {
            return Err(Error::param("sigma2 must be a finite non-negative number"));
        }
        Ok(())
    }
}

/// One augmented-ICL episode.
///
/// The labels of the unlabeled block are kept for scoring only; nothing that
/// builds a prompt reads them.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskInstance {
    pub means: MeanMatrix,
    pub sigma2: f64,
    /// `d x N`, one column per labeled sample.
    pub labeled_x: DMatrix<f64>,
    pub labeled_y: Vec<LabelVector>,
    /// `d x M_u`, one column per unlabeled sample.
    pub unlabeled_x: DMatrix<f64>,
    hidden_labels: Vec<usize>,
    pub seed: SeedRecord,
}

impl TaskInstance {
    pub fn dim(&self) -> usize {
        self.means.dim()
    }

    pub fn classes(&self) -> usize {
        self.means.classes()
    }

    pub fn n_labeled(&self) -> usize {
        self.labeled_x.ncols()
    }

    pub fn n_unlabeled(&self) -> usize {
        self.unlabeled_x.ncols()
    }

    /// True classes of the unlabeled samples. Evaluation use only.
    pub fn evaluation_labels(&self) -> &[usize] {
        &self.hidden_labels
    }

    /// `Sigma^{-1} = I / sigma2`.
    pub fn sigma_inv(&self) -> DMatrix<f64> {
        DMatrix::identity(self.dim(), self.dim()) / self.sigma2
    }

    /// Keep only the first `m` unlabeled samples. Instances drawn from the same
    /// substream with different `M_u` share this prefix.
    pub fn truncate_unlabeled(&self, m: usize) -> TaskInstance {
        let m = m.min(self.n_unlabeled());
        let mut out = self.clone();
        out.unlabeled_x = self.unlabeled_x.columns(0, m).into_owned();
        out.hidden_labels.truncate(m);
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&InstanceJson::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: InstanceJson = serde_json::from_str(text)?;
        raw.try_into()
    }
}

/// Draw a `d x C` matrix with i.i.d. standard normal entries.
pub fn sample_means<R: Rng + ?Sized>(d: usize, classes: usize, rng: &mut R) -> Result<MeanMatrix> {
    if d == 0 || classes == 0 {
        return Err(Error::param("d and C must be at least 1"));
    }
    let m = DMatrix::from_fn(d, classes, |_, _| StandardNormal.sample(rng));
    MeanMatrix::new(m)
}

/// Draw `N + M_u` samples `x = M y + eps` with uniform one-hot `y` and
/// `eps ~ N(0, sigma2 I)`; the first `N` keep their labels.
///
/// Samples are drawn one at a time in order, so two calls on equal generators
/// that differ only in `M_u` agree on every shared sample.
pub fn sample_instance<R: Rng + ?Sized>(
    means: &MeanMatrix,
    sigma2: f64,
    n_labeled: usize,
    n_unlabeled: usize,
    rng: &mut R,
) -> Result<TaskInstance> {
    if !(sigma2 >= 0.0 && sigma2.is_finite()) {
        return Err(Error::param("sigma2 must be a finite non-negative number"));
    }
    let d = means.dim();
    let classes = means.classes();
    let sd = sigma2.sqrt();
    let total = n_labeled + n_unlabeled;
    let mut xs = DMatrix::zeros(d, total);
    let mut ys = Vec::with_capacity(total);
    for j in 0..total {
        let y = rng.random_range(0..classes);
        for r in 0..d {
            let eps: f64 = StandardNormal.sample(rng);
            xs[(r, j)] = means.as_matrix()[(r, y)] + sd * eps;
        }
        ys.push(y);
    }
    Ok(TaskInstance {
        means: means.clone(),
        sigma2,
        labeled_x: xs.columns(0, n_labeled).into_owned(),
        labeled_y: ys[..n_labeled]
            .iter()
            .map(|&c| LabelVector { class: c, classes })
            .collect(),
        unlabeled_x: xs.columns(n_labeled, n_unlabeled).into_owned(),
        hidden_labels: ys[n_labeled..].to_vec(),
        seed: SeedRecord::default(),
    })
}

/// Fresh means and samples from the substream `(domain, indices...)`, with
/// the substream recorded in the instance.
pub fn generate_instance(
    tree: &SeedTree,
    domain: Domain,
    indices: &[u64],
    dims: &TaskDims,
) -> Result<TaskInstance> {
    dims.validate()?;
    let (mut rng, record) = tree.stream(domain, indices);
    let means = sample_means(dims.dim, dims.classes, &mut rng)?;
    let mut inst = sample_instance(&means, dims.sigma2, dims.n_labeled, dims.n_unlabeled, &mut rng)?;
    inst.seed = record;
    Ok(inst)
}

/// Index of the nearest column of `means` to `x`; ties go to the smallest index.
pub fn nearest_column(x: DVectorView<'_, f64>, means: &DMatrix<f64>) -> usize {
    let mut best = 0;
    let mut best_dist = f64::INFINITY;
    for (i, col) in means.column_iter().enumerate() {
        let dist = (x - col).norm_squared();
        if dist < best_dist {
            best = i;
            best_dist = dist;
        }
    }
    best
}

/// Bayes-optimal label under equal priors and shared isotropic covariance,
/// which is the nearest true mean whatever the value of `sigma2`.
pub fn bayes_predict(x: DVectorView<'_, f64>, means: &MeanMatrix, sigma2: f64) -> LabelVector {
    debug_assert!(sigma2 > 0.0);
    LabelVector {
        class: nearest_column(x, means.as_matrix()),
        classes: means.classes(),
    }
}

/// Monte Carlo misclassification rate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskEstimate {
    pub risk: f64,
    pub std_err: f64,
}

pub fn bayes_risk_mc<R: Rng + ?Sized>(
    means: &MeanMatrix,
    sigma2: f64,
    n_samples: usize,
    rng: &mut R,
) -> Result<RiskEstimate> {
    if n_samples == 0 {
        return Err(Error::param("n_samples must be at least 1"));
    }
    let inst = sample_instance(means, sigma2, 0, n_samples, rng)?;
    let errors = inst
        .unlabeled_x
        .column_iter()
        .zip(inst.evaluation_labels())
        .filter(|(x, &y)| nearest_column(x.as_view(), means.as_matrix()) != y)
        .count();
    let risk = errors as f64 / n_samples as f64;
    Ok(RiskEstimate {
        risk,
        std_err: (risk * (1.0 - risk) / n_samples as f64).sqrt(),
    })
}

/// Nearest plug-in mean labels for the unlabeled block, with plug-in means
/// estimated from the labeled block alone.
pub fn labeled_only_predict(instance: &TaskInstance) -> Result<Vec<LabelVector>> {
    if instance.n_labeled() == 0 {
        return Err(Error::param("labeled-only baseline needs N >= 1"));
    }
    let plug_in = em::init_means_from_labeled(instance);
    Ok(em::predict_labels(&instance.unlabeled_x, &plug_in))
}

/// Serialized layout of a [`TaskInstance`].
#[derive(Debug, Serialize, Deserialize)]
struct InstanceJson {
    d: usize,
    #[serde(rename = "C")]
    classes: usize,
    sigma2: f64,
    /// Column-major `d x C`.
    means: Vec<f64>,
    /// `[[x_1, ..., x_N], [class_1, ..., class_N]]`.
    labeled: (Vec<Vec<f64>>, Vec<usize>),
    unlabeled: Vec<Vec<f64>>,
    hidden_labels: Vec<usize>,
    seed: SeedRecord,
}

impl From<&TaskInstance> for InstanceJson {
    fn from(inst: &TaskInstance) -> Self {
        let cols = |m: &DMatrix<f64>| -> Vec<Vec<f64>> {
            m.column_iter().map(|c| c.iter().copied().collect()).collect()
        };
        InstanceJson {
            d: inst.dim(),
            classes: inst.classes(),
            sigma2: inst.sigma2,
            means: inst.means.as_matrix().as_slice().to_vec(),
            labeled: (
                cols(&inst.labeled_x),
                inst.labeled_y.iter().map(|y| y.class).collect(),
            ),
            unlabeled: cols(&inst.unlabeled_x),
            hidden_labels: inst.hidden_labels.clone(),
            seed: inst.seed.clone(),
        }
    }
}

impl TryFrom<InstanceJson> for TaskInstance {
    type Error = Error;

    fn try_from(raw: InstanceJson) -> Result<Self> {
        let (d, classes) = (raw.d, raw.classes);
        if raw.means.len() != d * classes {
            return Err(Error::Format("means length does not match d * C".into()));
        }
        let columns = |vs: &[Vec<f64>]| -> Result<DMatrix<f64>> {
            if vs.iter().any(|v| v.len() != d) {
                return Err(Error::Format("sample vector length does not match d".into()));
            }
            Ok(DMatrix::from_fn(d, vs.len(), |r, c| vs[c][r]))
        };
        let (lx, ly) = raw.labeled;
        if lx.len() != ly.len() {
            return Err(Error::Format("labeled x and y counts differ".into()));
        }
        if raw.hidden_labels.len() != raw.unlabeled.len() {
            return Err(Error::Format("hidden label count does not match unlabeled count".into()));
        }
        if ly.iter().chain(&raw.hidden_labels).any(|&c| c >= classes) {
            return Err(Error::Format("label index out of range".into()));
        }
        Ok(TaskInstance {
            means: MeanMatrix::new(DMatrix::from_column_slice(d, classes, &raw.means))?,
            sigma2: raw.sigma2,
            labeled_x: columns(&lx)?,
            labeled_y: ly
                .into_iter()
                .map(|class| LabelVector { class, classes })
                .collect(),
            unlabeled_x: columns(&raw.unlabeled)?,
            hidden_labels: raw.hidden_labels,
            seed: raw.seed,
        })
    }
}
