//! Sweeps over unlabeled counts and seeds: train `W`, evaluate the transformer
//! at checkpoints, write metrics and summaries.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::attention::{build_em_transformer, cot_rollout, save_params, TransformerParams};
use crate::em::predict_labels;
use crate::error::{Error, Result};
use crate::numeric::{mean, sample_std};
use crate::prompt::{encode_instance, MeanEstimates, TokenLayout};
use crate::rng::{Domain, SeedTree};
use crate::task::{generate_instance, labeled_only_predict, nearest_column, TaskInstance};
use crate::trainer::{write_training_log, Trainer};

/// One evaluation of one trained model at one checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub gd_iter: usize,
    pub m_u: usize,
    pub sigma2: f64,
    pub seed: usize,
    /// `||M_hat^(T) - M||_F^2` averaged over evaluation instances.
    pub mean_est_err: f64,
    /// Fraction of unlabeled samples labeled correctly, pooled over instances.
    pub accuracy: f64,
    pub bayes_acc: f64,
    pub labeled_only_acc: f64,
    pub w_dist_sq: f64,
    /// Estimation error after the best class permutation, when requested.
    pub aligned_est_err: Option<f64>,
}

/// Per-instance outcome of a rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceEval {
    pub est_err: f64,
    pub aligned_est_err: Option<f64>,
    pub correct: usize,
    pub bayes_correct: usize,
    pub labeled_only_correct: usize,
    pub n_unlabeled: usize,
}

/// Final means of a `T`-step rollout from the encoded instance.
pub fn rollout_means(params: &TransformerParams, instance: &TaskInstance, t_steps: usize) -> Result<MeanEstimates> {
    let state = encode_instance(instance, &params.layout)?;
    let (traj, _) = cot_rollout(params, &state, t_steps)?;
    Ok(traj.last().clone())
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn aligned_error(est: &DMatrix<f64>, truth: &DMatrix<f64>) -> f64 {
    permutations(est.ncols())
        .into_iter()
        .map(|perm| {
            perm.iter()
                .enumerate()
                .map(|(i, &j)| (est.column(j) - truth.column(i)).norm_squared())
                .sum::<f64>()
        })
        .fold(f64::INFINITY, f64::min)
}

pub fn evaluate_instance(
    params: &TransformerParams,
    instance: &TaskInstance,
    t_steps: usize,
    align: bool,
) -> Result<InstanceEval> {
    let est = rollout_means(params, instance, t_steps)?;
    let truth = instance.means.as_matrix();
    let labels = instance.evaluation_labels();
    let pred = predict_labels(&instance.unlabeled_x, &est);
    let correct = pred.iter().zip(labels).filter(|(p, &y)| p.class == y).count();
    let bayes_correct = instance
        .unlabeled_x
        .column_iter()
        .zip(labels)
        .filter(|(x, &y)| nearest_column(x.as_view(), truth) == y)
        .count();
    let labeled_only_correct = if instance.n_labeled() > 0 {
        labeled_only_predict(instance)?
            .iter()
            .zip(labels)
            .filter(|(p, &y)| p.class == y)
            .count()
    } else {
        0
    };
    Ok(InstanceEval {
        est_err: est.dist_sq(truth),
        aligned_est_err: align.then(|| aligned_error(est.as_matrix(), truth)),
        correct,
        bayes_correct,
        labeled_only_correct,
        n_unlabeled: labels.len(),
    })
}

/// Aggregate metrics for one checkpoint; non-finite rollouts yield NaN.
pub fn evaluate_set(
    params: &TransformerParams,
    instances: &[TaskInstance],
    t_steps: usize,
    align: bool,
) -> (f64, f64, f64, f64, Option<f64>) {
    let evals: Vec<Result<InstanceEval>> = instances
        .iter()
        .map(|inst| evaluate_instance(params, inst, t_steps, align))
        .collect();
    let mut ok = Vec::with_capacity(evals.len());
    for e in evals {
        match e {
            Ok(v) => ok.push(v),
            Err(err) => {
                warn!("evaluation rollout failed: {err}");
                let nan = f64::NAN;
                return (nan, nan, nan, nan, align.then_some(nan));
            }
        }
    }
    let total: usize = ok.iter().map(|e| e.n_unlabeled).sum();
    let frac = |f: &dyn Fn(&InstanceEval) -> usize| {
        if total == 0 {
            f64::NAN
        } else {
            ok.iter().map(f).sum::<usize>() as f64 / total as f64
        }
    };
    let err = mean(&ok.iter().map(|e| e.est_err).collect::<Vec<_>>());
    let aligned = align.then(|| mean(&ok.iter().filter_map(|e| e.aligned_est_err).collect::<Vec<_>>()));
    (
        err,
        frac(&|e| e.correct),
        frac(&|e| e.bayes_correct),
        frac(&|e| e.labeled_only_correct),
        aligned,
    )
}

/// Evaluation instances for one seed. All unlabeled counts draw from the same
/// substreams, so smaller `M_u` sets are prefixes of larger ones.
pub fn eval_instances(config: &ExperimentConfig, m_u: usize, seed_idx: usize, checkpoint: Option<usize>) -> Result<Vec<TaskInstance>> {
    let tree = SeedTree::new(config.seed);
    let dims = config.dims(m_u);
    (0..config.eval.n_instances)
        .map(|i| {
            let mut path = vec![seed_idx as u64, i as u64];
            if let Some(k) = checkpoint {
                path.push(k as u64 + 1);
            }
            generate_instance(&tree, Domain::EvalSet, &path, &dims)
        })
        .collect()
}

/// Seed of the training stream for one `(M_u, seed index)` job.
pub fn train_seed(config: &ExperimentConfig, m_u: usize, seed_idx: usize) -> u64 {
    SeedTree::new(config.seed)
        .rng(Domain::TrainBatch, &[seed_idx as u64, m_u as u64])
        .random()
}

fn build(config: &ExperimentConfig, w: &DMatrix<f64>, m_u: usize) -> Result<TransformerParams> {
    let layout = TokenLayout::new(config.dim, config.classes)?;
    build_em_transformer(&layout, w, config.beta, &config.schedule(), config.labeled, m_u)
}

/// Output of one `(M_u, seed)` job.
#[derive(Debug, Clone)]
pub struct JobOutput {
    pub m_u: usize,
    pub seed: usize,
    pub rows: Vec<MetricsRow>,
    pub final_params: TransformerParams,
}

/// Train one model and evaluate it at every checkpoint. Writes the training
/// log and final weights into `out` when given.
pub fn run_job(config: &ExperimentConfig, m_u: usize, seed_idx: usize, out: Option<&Path>) -> Result<JobOutput> {
    let mut trainer = Trainer::new(config.train_config(m_u, train_seed(config, m_u, seed_idx)))?;
    let sigma_inv = trainer.config().sigma_inv();
    let fixed_set = if config.eval.resample {
        None
    } else {
        Some(eval_instances(config, m_u, seed_idx, None)?)
    };
    let mut rows = Vec::new();
    let checkpoints = config.checkpoints();
    for &k in &checkpoints {
        while trainer.state().k < k {
            trainer.step()?;
        }
        let w = &trainer.state().w;
        let params = build(config, w, m_u)?;
        let resampled;
        let set = match &fixed_set {
            Some(s) => s,
            None => {
                resampled = eval_instances(config, m_u, seed_idx, Some(k))?;
                &resampled
            }
        };
        let (err, acc, bayes, lab, aligned) = evaluate_set(&params, set, config.cot_steps, config.align_permutations);
        rows.push(MetricsRow {
            gd_iter: k,
            m_u,
            sigma2: config.sigma2,
            seed: seed_idx,
            mean_est_err: err,
            accuracy: acc,
            bayes_acc: bayes,
            labeled_only_acc: lab,
            w_dist_sq: (w - &sigma_inv).norm_squared(),
            aligned_est_err: aligned,
        });
    }
    let final_params = build(config, &trainer.state().w, m_u)?;
    if let Some(dir) = out {
        let log = fs::File::create(dir.join(format!("train_log_mu{m_u}_seed{seed_idx}.csv")))?;
        write_training_log(&trainer.state().history, log, config.timing)?;
        save_params(&final_params, &dir.join(format!("weights_mu{m_u}_seed{seed_idx}.json")))?;
    }
    info!("finished M_u = {m_u}, seed {seed_idx}");
    Ok(JobOutput {
        m_u,
        seed: seed_idx,
        rows,
        final_params,
    })
}

/// Mean, sample standard deviation and the `mean -+ 2 std` band.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub mean: f64,
    pub std: f64,
    pub lo: f64,
    pub hi: f64,
}

impl Band {
    pub fn of(values: &[f64]) -> Band {
        let m = mean(values);
        let s = sample_std(values);
        Band {
            mean: m,
            std: s,
            lo: m - 2.0 * s,
            hi: m + 2.0 * s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryGroup {
    pub m_u: usize,
    pub gd_iter: usize,
    pub runs: usize,
    pub metrics: BTreeMap<String, Band>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config: ExperimentConfig,
    pub groups: Vec<SummaryGroup>,
}

pub const METRIC_NAMES: [&str; 5] = ["mean_est_err", "accuracy", "bayes_acc", "labeled_only_acc", "w_dist_sq"];

pub fn metric_value(row: &MetricsRow, name: &str) -> Option<f64> {
    match name {
        "mean_est_err" => Some(row.mean_est_err),
        "accuracy" => Some(row.accuracy),
        "bayes_acc" => Some(row.bayes_acc),
        "labeled_only_acc" => Some(row.labeled_only_acc),
        "w_dist_sq" => Some(row.w_dist_sq),
        "aligned_est_err" => row.aligned_est_err,
        _ => None,
    }
}

/// Across-seed bands for every `(M_u, checkpoint)`.
pub fn summarize(config: &ExperimentConfig, rows: &[MetricsRow]) -> Summary {
    let mut groups: BTreeMap<(usize, usize), Vec<&MetricsRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.m_u, r.gd_iter)).or_default().push(r);
    }
    let groups = groups
        .into_iter()
        .map(|((m_u, gd_iter), rs)| {
            let mut metrics = BTreeMap::new();
            for name in METRIC_NAMES.iter().copied().chain(config.align_permutations.then_some("aligned_est_err")) {
                let vals: Vec<f64> = rs.iter().filter_map(|r| metric_value(r, name)).collect();
                metrics.insert(name.to_string(), Band::of(&vals));
            }
            SummaryGroup {
                m_u,
                gd_iter,
                runs: rs.len(),
                metrics,
            }
        })
        .collect();
    Summary {
        config: config.clone(),
        groups,
    }
}

pub fn write_metrics_csv(rows: &[MetricsRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record([
            "gd_iter",
            "m_u",
            "sigma2",
            "seed",
            "mean_est_err",
            "accuracy",
            "bayes_acc",
            "labeled_only_acc",
            "w_dist_sq",
            "aligned_est_err",
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Files written by [`run_experiment`].
#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub rows: Vec<MetricsRow>,
    pub summary: Summary,
    pub metrics_path: PathBuf,
    pub summary_path: PathBuf,
}

fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Config(format!("cannot create {}: {e}", dir.display())))?;
    let probe = dir.join(".write_probe");
    fs::write(&probe, b"").map_err(|e| Error::Config(format!("{} is not writable: {e}", dir.display())))?;
    fs::remove_file(&probe)?;
    Ok(())
}

/// Run every `(M_u, seed)` job in parallel, then merge rows in a fixed order.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    prepare_out(&config.out)?;
    let jobs: Vec<(usize, usize)> = config
        .unlabeled
        .iter()
        .flat_map(|&m| (0..config.seeds).map(move |s| (m, s)))
        .collect();
    let outputs: Vec<Result<JobOutput>> = jobs
        .par_iter()
        .map(|&(m, s)| run_job(config, m, s, Some(&config.out)))
        .collect();
    let mut rows = Vec::new();
    for o in outputs {
        rows.extend(o?.rows);
    }
    rows.sort_by_key(|r| (r.m_u, r.seed, r.gd_iter));
    let metrics_path = config.out.join("metrics.csv");
    write_metrics_csv(&rows, &metrics_path)?;
    let summary = summarize(config, &rows);
    let summary_path = config.out.join("summary.json");
    fs::write(&summary_path, serde_json::to_string_pretty(&summary)?)?;
    Ok(ExperimentReport {
        rows,
        summary,
        metrics_path,
        summary_path,
    })
}

/// Evaluate a fixed `W` (no training) at every configured `M_u`, one row per seed.
pub fn evaluate_fixed(config: &ExperimentConfig, w: &DMatrix<f64>) -> Result<Vec<MetricsRow>> {
    config.validate()?;
    let sigma_inv = DMatrix::identity(config.dim, config.dim) / config.sigma2;
    let jobs: Vec<(usize, usize)> = config
        .unlabeled
        .iter()
        .flat_map(|&m| (0..config.seeds).map(move |s| (m, s)))
        .collect();
    jobs.par_iter()
        .map(|&(m_u, seed)| {
            let params = build(config, w, m_u)?;
            let set = eval_instances(config, m_u, seed, None)?;
            let (err, acc, bayes, lab, aligned) = evaluate_set(&params, &set, config.cot_steps, config.align_permutations);
            Ok(MetricsRow {
                gd_iter: 0,
                m_u,
                sigma2: config.sigma2,
                seed,
                mean_est_err: err,
                accuracy: acc,
                bayes_acc: bayes,
                labeled_only_acc: lab,
                w_dist_sq: (w - &sigma_inv).norm_squared(),
                aligned_est_err: aligned,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(out: &Path) -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.unlabeled = vec![1, 4];
        c.seeds = 2;
        c.train.iters = 4;
        c.train.batch = 8;
        c.eval.eval_every = 2;
        c.eval.n_instances = 3;
        c.out = out.to_path_buf();
        c
    }

    #[test]
    fn permutation_count_and_alignment() {
        assert_eq!(permutations(3).len(), 6);
        let truth = DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 3.0]);
        let swapped = DMatrix::from_row_slice(1, 3, &[2.0, 1.0, 3.0]);
        assert_eq!(aligned_error(&swapped, &truth), 0.0);
    }

    #[test]
    fn eval_sets_share_prefixes_across_unlabeled_counts() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny(dir.path());
        let small = eval_instances(&c, 1, 0, None).unwrap();
        let large = eval_instances(&c, 4, 0, None).unwrap();
        for (s, l) in small.iter().zip(&large) {
            assert_eq!(s.means, l.means);
            assert_eq!(s.labeled_x, l.labeled_x);
            assert_eq!(s.unlabeled_x, l.unlabeled_x.columns(0, 1));
        }
    }

    #[test]
    fn experiment_writes_one_row_per_checkpoint_and_run() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny(dir.path());
        let report = run_experiment(&c).unwrap();
        assert_eq!(report.rows.len(), 2 * 2 * 3);
        for r in &report.rows {
            assert!((0.0..=1.0).contains(&r.accuracy));
            assert!(r.mean_est_err >= 0.0);
        }
        let back = read_metrics_csv(&report.metrics_path).unwrap();
        assert_eq!(back.len(), report.rows.len());
        assert!(dir.path().join("train_log_mu4_seed1.csv").exists());
        assert!(dir.path().join("weights_mu1_seed0.json").exists());
        let band = &report.summary.groups[0].metrics["accuracy"];
        assert!((band.hi - band.lo - 4.0 * band.std).abs() < 1e-12);
    }
}
