use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use nalgebra::DMatrix;

use augicl_core::attention::ParamsFile;
use augicl_core::bench::experiment::{evaluate_fixed, train_seed};
use augicl_core::bench::{
    emit_plot_data, run_experiment, summarize, verify, write_metrics_csv, ExperimentConfig, VerifyConfig, SUITES,
};
use augicl_core::em::RefMode;
use augicl_core::trainer::{save_weights, train, write_training_log, InitKind};
use augicl_core::Error;

#[derive(Parser)]
#[command(name = "augicl", version, about = "Train and evaluate EM-style chain-of-thought transformers on Gaussian mixtures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model for the first `--unlabeled` value and write its log and weights.
    Train(ExpArgs),
    /// Evaluate fixed weights (default `Sigma^-1`) on the evaluation sets of every `M_u`.
    Eval {
        #[command(flatten)]
        exp: ExpArgs,
        /// Parameter JSON written by `train` or `sweep`.
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Train and evaluate every `(M_u, seed)` pair; writes metrics.csv and summary.json.
    Sweep(ExpArgs),
    /// Run invariant suites and print a JSON report.
    Verify {
        /// Suites to run (all when omitted).
        #[arg(long = "suite")]
        suites: Vec<String>,
        /// Print the available suites and exit.
        #[arg(long)]
        list: bool,
        #[arg(long, default_value_t = 50.0)]
        beta: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the report to this file.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Turn a sweep's metrics.csv into long-format plot_data.csv.
    EmitPlots {
        /// Directory holding metrics.csv.
        #[arg(long)]
        report: PathBuf,
    },
}

#[derive(Args, Clone, Default)]
struct ExpArgs {
    /// TOML experiment file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    labeled: Option<usize>,
    /// Unlabeled prompt size; repeat for several series.
    #[arg(long)]
    unlabeled: Vec<usize>,
    #[arg(long)]
    cot_steps: Option<usize>,
    #[arg(long)]
    sigma2: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    t_prime: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    init: Option<InitKind>,
    #[arg(long)]
    ref_mode: Option<RefMode>,
    /// Number of repeated runs per `M_u`.
    #[arg(long)]
    seeds: Option<usize>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    eval_instances: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    align_permutations: bool,
    /// Record wall-clock time per iteration in training logs.
    #[arg(long)]
    timing: bool,
}

impl ExpArgs {
    fn resolve(&self) -> Result<ExperimentConfig, Error> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::from_toml_file(p)?,
            None => ExperimentConfig::default(),
        };
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$flag.clone() { c.$($field).+ = v; })*
            };
        }
        set!(
            classes => classes, dim => dim, labeled => labeled, cot_steps => cot_steps,
            sigma2 => sigma2, beta => beta, alpha => alpha, t_prime => t_prime,
            batch => train.batch, iters => train.iters, lr => train.lr, init => train.init,
            ref_mode => train.ref_mode, seeds => seeds, seed => seed,
            eval_every => eval.eval_every, eval_instances => eval.n_instances, out => out,
        );
        if !self.unlabeled.is_empty() {
            c.unlabeled = self.unlabeled.clone();
        }
        c.align_permutations |= self.align_permutations;
        c.timing |= self.timing;
        c.validate()?;
        Ok(c)
    }
}

fn create_out(c: &ExperimentConfig) -> Result<(), Error> {
    fs::create_dir_all(&c.out).map_err(|e| Error::Config(format!("cannot create {}: {e}", c.out.display())))
}

fn run(cli: Cli) -> Result<bool, Error> {
    match cli.command {
        Command::Train(args) => {
            let c = args.resolve()?;
            create_out(&c)?;
            let m_u = c.unlabeled[0];
            let tc = c.train_config(m_u, train_seed(&c, m_u, 0));
            let state = train(&tc)?;
            write_training_log(&state.history, fs::File::create(c.out.join("train_log.csv"))?, c.timing)?;
            save_weights(&state, &tc, &c.out.join("weights.json"))?;
            let last = state.history.last().map(|r| r.w_dist_sq).unwrap_or(state.initial_dist_sq);
            println!("M_u = {m_u}: ||W - Sigma^-1||_F^2 {:.6e} -> {:.6e}", state.initial_dist_sq, last);
            Ok(true)
        }
        Command::Eval { exp, weights } => {
            let c = exp.resolve()?;
            create_out(&c)?;
            let w = match weights {
                Some(p) => {
                    let text = fs::read_to_string(&p)
                        .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                    let params = ParamsFile::from_json(&text)?.into_params()?;
                    if params.layout.d != c.dim || params.layout.classes != c.classes {
                        return Err(Error::Config("weights do not match --dim/--classes".into()));
                    }
                    params.w
                }
                None => DMatrix::identity(c.dim, c.dim) / c.sigma2,
            };
            let rows = evaluate_fixed(&c, &w)?;
            write_metrics_csv(&rows, &c.out.join("metrics.csv"))?;
            let summary = summarize(&c, &rows);
            println!("{}", serde_json::to_string_pretty(&summary.groups)?);
            Ok(true)
        }
        Command::Sweep(args) => {
            let c = args.resolve()?;
            let report = run_experiment(&c)?;
            info!("wrote {} and {}", report.metrics_path.display(), report.summary_path.display());
            println!("{}", report.metrics_path.display());
            Ok(true)
        }
        Command::Verify {
            suites,
            list,
            beta,
            seed,
            json,
        } => {
            if list {
                for (name, what) in SUITES {
                    println!("{name:<22} {what}");
                }
                return Ok(true);
            }
            let cfg = VerifyConfig {
                beta,
                seed,
                ..VerifyConfig::default()
            };
            let report = verify(&cfg, &suites)?;
            let text = serde_json::to_string_pretty(&report)?;
            if let Some(p) = json {
                fs::write(p, &text)?;
            }
            println!("{text}");
            Ok(report.passed)
        }
        Command::EmitPlots { report } => {
            println!("{}", emit_plot_data(&report)?.display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Parameter(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
