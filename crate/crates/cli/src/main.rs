//! `ame` command-line tool: each pipeline stage is independently
//! scriptable, mirroring the offline/online split.
//!
//! Exit codes: 0 success, 2 config error, 3 runtime error.
//! `AME_WORKERS` caps the worker pool.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand};
use serde::Serialize;

use ame_cli::{emit_reports, offline_sample, run_experiment};
use ame_core::config::{ExperimentConfig, LambdaRule};
use ame_core::hierarchy::{sample_hier_rows, two_stage_estimate, SourceTree};
use ame_core::knockoffs::{knockoff_threshold, selected_at, w_statistics, Selection};
use ame_core::lasso;
use ame_core::oracle::PoisonedLinearTask;
use ame_core::sampling::{build_design, Featurization, SubsetSampler};
use ame_core::shapley::{bound_report, exact_sv, permutation_mc_sv, sv_via_ame};
use ame_core::store::ObservationStore;
use ame_core::types::{Observation, PDistribution};

#[derive(Parser)]
#[command(
    name = "ame",
    about = "Estimate training-data contributions via randomized subset experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct ConfigArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's subset budget M.
    #[arg(long)]
    m: Option<usize>,
    /// Override the config's trial count.
    #[arg(long)]
    trials: Option<usize>,
    /// Override the config's target FDR q.
    #[arg(long)]
    q: Option<f64>,
    /// Override the lambda rule: min | 1se | fixed:<value>.
    #[arg(long)]
    lambda_rule: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a poisoned linear-classification task fixture with
    /// inspectable ground truth.
    GenTask {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 6)]
        dim: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Offline phase: sample subsets, evaluate the oracle, persist
    /// observations (reusing any already in the store).
    Sample {
        #[command(flatten)]
        config: ConfigArgs,
        /// Observation store to create or extend.
        #[arg(long)]
        store: PathBuf,
    },
    /// Online phase: fit the LASSO on stored observations and emit AME
    /// estimates.
    Estimate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Dump the featurized design as CSV (debugging).
        #[arg(long)]
        dump_design: Option<PathBuf>,
        /// Dump the cross-validation curve as CSV (lambda, mean_err, std_err).
        #[arg(long)]
        cv_report: Option<PathBuf>,
    },
    /// Knockoff-calibrated selection of contributing sources.
    Select {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Shapley-value estimation: exact enumeration, permutation Monte
    /// Carlo, or the sparse AME-based estimator.
    Sv {
        #[command(flatten)]
        config: ConfigArgs,
        /// exact | mc | ame
        #[arg(long)]
        method: String,
        /// p law for the ame method: grid:v1,v2,... | uniform:<eps> | beta:<a>,<b>.
        #[arg(long)]
        dist: Option<String>,
        /// Permutations for the mc method.
        #[arg(long, default_value_t = 200)]
        permutations: usize,
        /// Output CSV path (source, value); a bound report lands next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Two-level hierarchical selection.
    Hier {
        #[command(flatten)]
        config: ConfigArgs,
        /// Tree file: JSON {"children": [[...], ...]}.
        #[arg(long)]
        tree: PathBuf,
        /// Second-level inclusion law (defaults to the config's p law).
        #[arg(long)]
        p2: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full experiment: offline + online per trial, with report files.
    Experiment {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory for results.json, summary.csv, curves.csv.
        #[arg(long)]
        out_dir: PathBuf,
    },
}

/// Errors that should exit with code 2 (bad configuration) rather than 3.
#[derive(Debug)]
struct ConfigProblem(anyhow::Error);

impl std::fmt::Display for ConfigProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for ConfigProblem {}

fn load_config(args: &ConfigArgs) -> anyhow::Result<ExperimentConfig> {
    let text = std::fs::read_to_string(&args.config)
        .with_context(|| format!("reading config {}", args.config.display()))
        .map_err(|e| anyhow!(ConfigProblem(e)))?;
    let mut config: ExperimentConfig = serde_json::from_str(&text)
        .map_err(|e| anyhow!(ConfigProblem(anyhow!("parsing config: {e}"))))?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(m) = args.m {
        config.m = Some(m);
        config.m_grid = None;
        config.c = None;
    }
    if let Some(trials) = args.trials {
        config.trials = trials;
    }
    if let Some(q) = args.q {
        config.q = q;
    }
    if let Some(rule) = &args.lambda_rule {
        config.lambda_rule = rule
            .parse::<LambdaRule>()
            .map_err(|e| anyhow!(ConfigProblem(anyhow!(e))))?;
    }
    ame_core::validate_experiment(config).map_err(|errs| {
        let lines: Vec<String> = errs.iter().map(|e| format!("  - {e}")).collect();
        anyhow!(ConfigProblem(anyhow!(
            "invalid config:\n{}",
            lines.join("\n")
        )))
    })
}

fn parse_dist(spec: &str) -> anyhow::Result<PDistribution> {
    let problem = |msg: String| anyhow!(ConfigProblem(anyhow!(msg)));
    let dist = if let Some(values) = spec.strip_prefix("grid:") {
        let values: Vec<f64> = values
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| problem(format!("bad grid value: {e}")))?;
        PDistribution::DiscreteGrid { values }
    } else if let Some(eps) = spec.strip_prefix("uniform:") {
        PDistribution::truncated_uniform(
            eps.trim()
                .parse()
                .map_err(|e| problem(format!("bad epsilon: {e}")))?,
        )
    } else if let Some(ab) = spec.strip_prefix("beta:") {
        let parts: Vec<&str> = ab.split(',').collect();
        if parts.len() != 2 {
            return Err(problem(format!("beta wants alpha,beta, got {spec:?}")));
        }
        PDistribution::beta(
            parts[0]
                .trim()
                .parse()
                .map_err(|e| problem(format!("bad alpha: {e}")))?,
            parts[1]
                .trim()
                .parse()
                .map_err(|e| problem(format!("bad beta: {e}")))?,
        )
    } else {
        return Err(problem(format!(
            "unknown distribution spec {spec:?} (grid:... | uniform:... | beta:...)"
        )));
    };
    dist.validate()
        .map_err(|errs| problem(format!("invalid distribution: {errs:?}")))?;
    Ok(dist)
}

#[derive(Serialize)]
struct SelectionJson {
    selected: Vec<usize>,
    tau: Option<f64>,
    q: f64,
    w: Vec<f64>,
}

impl From<&Selection> for SelectionJson {
    fn from(sel: &Selection) -> Self {
        SelectionJson {
            selected: sel.selected.iter().map(|s| s.index()).collect(),
            tau: sel.tau_finite(),
            q: sel.q,
            w: sel.w.clone(),
        }
    }
}

fn base_dir(config_path: &Path) -> PathBuf {
    config_path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| PathBuf::from("."))
}

/// Observations recorded for the config's query, falling back to the whole
/// store for files written without query ids.
fn store_observations(
    store: &ObservationStore,
    query_id: u64,
) -> anyhow::Result<Vec<Observation>> {
    let matching: Vec<Observation> = store
        .observations_for_query(query_id)
        .into_iter()
        .cloned()
        .collect();
    if !matching.is_empty() {
        return Ok(matching);
    }
    if !store.is_empty() {
        return Ok(store.observations().to_vec());
    }
    bail!("store {} holds no observations", store.path().display());
}

fn cmd_estimate(
    args: &ConfigArgs,
    store_path: &Path,
    out: &Path,
    dump_design: Option<&Path>,
    cv_report: Option<&Path>,
) -> anyhow::Result<()> {
    let config = load_config(args)?;
    let bundle = ame_cli::build_oracle(&config.oracle, config.seed, &base_dir(&args.config))?;
    let store = ObservationStore::open(store_path)?;
    let observations = store_observations(&store, bundle.query.fingerprint())?;
    let feat = Featurization::new(config.featurization, config.p.clone())?;
    let design = build_design(&observations, &feat, false, false)?;
    if let Some(path) = dump_design {
        std::fs::write(path, design.to_csv())?;
    }
    let penalized = design.default_penalty();
    let lambda = match config.lambda_rule {
        LambdaRule::Fixed(v) => v,
        rule => {
            let report = lasso::cross_validate(&design, config.cv_folds, config.seed)?;
            if let Some(path) = cv_report {
                std::fs::write(path, report.to_csv())?;
            }
            report.lambda_for(rule)
        }
    };
    let fit = lasso::fit(&design, lambda, &penalized)?;
    let est = lasso::split_fit(&fit, &design.layout, &feat);

    #[derive(Serialize)]
    struct EstimateJson {
        ame: Vec<f64>,
        estimation: ame_core::EstimationResult,
        converged: bool,
    }
    let out_json = EstimateJson {
        ame: est.ame(),
        converged: fit.converged,
        estimation: est,
    };
    std::fs::write(out, serde_json::to_string_pretty(&out_json)?)?;
    println!(
        "estimated {} sources from {} observations at lambda {}",
        design.layout.source_cols,
        design.rows(),
        lambda
    );
    Ok(())
}

fn cmd_select(args: &ConfigArgs, store_path: &Path, out: &Path) -> anyhow::Result<()> {
    let config = load_config(args)?;
    let bundle = ame_cli::build_oracle(&config.oracle, config.seed, &base_dir(&args.config))?;
    let store = ObservationStore::open(store_path)?;
    let observations = store_observations(&store, bundle.query.fingerprint())?;
    let feat = Featurization::new(config.featurization, config.p.clone())?;
    let design = build_design(&observations, &feat, true, true)?;
    let penalized = design.default_penalty();
    let lambda = match config.lambda_rule {
        LambdaRule::Fixed(v) => v,
        rule => lasso::cross_validate(&design, config.cv_folds, config.seed)?.lambda_for(rule),
    };
    let fit = lasso::fit(&design, lambda, &penalized)?;
    let est = lasso::split_fit(&fit, &design.layout, &feat);
    let w = w_statistics(&est)?;
    let tau = knockoff_threshold(&w, config.q);
    let selection = Selection {
        selected: selected_at(&w, tau),
        w,
        tau,
        q: config.q,
    };
    std::fs::write(
        out,
        serde_json::to_string_pretty(&SelectionJson::from(&selection))?,
    )?;
    println!(
        "selected {} of {} sources (tau {})",
        selection.selected.len(),
        design.layout.source_cols,
        selection.tau
    );
    Ok(())
}

fn cmd_sv(
    args: &ConfigArgs,
    method: &str,
    dist: Option<&str>,
    permutations: usize,
    out: &Path,
) -> anyhow::Result<()> {
    let config = load_config(args)?;
    let bundle = ame_cli::build_oracle(&config.oracle, config.seed, &base_dir(&args.config))?;
    let dist = match dist {
        Some(spec) => parse_dist(spec)?,
        None => config.p.clone(),
    };
    let values = match method {
        "exact" => exact_sv(bundle.oracle.as_ref())?.values,
        "mc" => permutation_mc_sv(bundle.oracle.as_ref(), permutations, config.seed).values,
        "ame" => {
            let feat = Featurization::new(config.featurization, dist.clone())?;
            let budgets = config.resolve_budgets(bundle.n_sources, bundle.k);
            let m = *budgets
                .last()
                .ok_or_else(|| anyhow!(ConfigProblem(anyhow!("no sample budget in config"))))?;
            let sampler = SubsetSampler::new(config.seed);
            let rows =
                ame_core::sampling::sample_rows(&sampler, bundle.n_sources, m, &feat, false);
            let observations = ame_core::oracle::evaluate_rows(
                bundle.oracle.as_ref(),
                &rows,
                &bundle.query,
                config.seed,
            );
            sv_via_ame(
                &observations,
                &feat,
                config.lambda_rule,
                config.cv_folds,
                config.seed,
            )?
            .values
        }
        other => {
            return Err(anyhow!(ConfigProblem(anyhow!(
                "unknown sv method {other:?} (exact | mc | ame)"
            ))))
        }
    };

    let mut csv = String::from("source,value\n");
    for (i, v) in values.iter().enumerate() {
        csv.push_str(&format!("{i},{v}\n"));
    }
    std::fs::write(out, csv)?;

    if let Ok(report) = bound_report(&dist) {
        let bound_path = out.with_extension("bounds.json");
        std::fs::write(&bound_path, serde_json::to_string_pretty(&report)?)?;
        println!(
            "wrote {} values to {} and bounds to {}",
            values.len(),
            out.display(),
            bound_path.display()
        );
    } else {
        println!("wrote {} values to {}", values.len(), out.display());
    }
    Ok(())
}

fn cmd_hier(
    args: &ConfigArgs,
    tree_path: &Path,
    p2: Option<&str>,
    out: &Path,
) -> anyhow::Result<()> {
    let config = load_config(args)?;
    let tree_text = std::fs::read_to_string(tree_path)
        .with_context(|| format!("reading tree {}", tree_path.display()))
        .map_err(|e| anyhow!(ConfigProblem(e)))?;
    let tree: SourceTree = serde_json::from_str(&tree_text)
        .map_err(|e| anyhow!(ConfigProblem(anyhow!("parsing tree: {e}"))))?;
    let bundle = ame_cli::build_oracle(&config.oracle, config.seed, &base_dir(&args.config))?;
    if bundle.n_sources != tree.n_second() {
        return Err(anyhow!(ConfigProblem(anyhow!(
            "oracle has {} sources but the tree has {} second-level sources",
            bundle.n_sources,
            tree.n_second()
        ))));
    }
    let p2 = match p2 {
        Some(spec) => parse_dist(spec)?,
        None => config.p.clone(),
    };

    let budgets = config.resolve_budgets(tree.n_top(), bundle.k);
    let m = *budgets
        .last()
        .ok_or_else(|| anyhow!(ConfigProblem(anyhow!("no sample budget in config"))))?;
    let sampler = SubsetSampler::new(config.seed);
    let mut rows = sample_hier_rows(&sampler, &tree, &config.p, &p2, m, true);
    for (i, obs) in rows.iter_mut().enumerate() {
        let mut rng = sampler.noise_rng(i as u64);
        obs.y = bundle
            .oracle
            .evaluate(&obs.second_mask, &bundle.query, &mut rng);
    }
    let result = two_stage_estimate(
        &rows,
        &tree,
        &config.p,
        config.q,
        config.lambda_rule,
        config.cv_folds,
        config.seed,
    )?;

    #[derive(Serialize)]
    struct HierJson {
        stage1: SelectionJson,
        stage2: SelectionJson,
    }
    std::fs::write(
        out,
        serde_json::to_string_pretty(&HierJson {
            stage1: SelectionJson::from(&result.stage1),
            stage2: SelectionJson::from(&result.stage2),
        })?,
    )?;
    println!(
        "stage 1 selected {:?}; stage 2 selected {:?}",
        result.stage1.selected, result.stage2.selected
    );
    Ok(())
}

fn real_main() -> anyhow::Result<()> {
    if let Ok(workers) = std::env::var("AME_WORKERS") {
        let n: usize = workers
            .parse()
            .map_err(|_| anyhow!(ConfigProblem(anyhow!("AME_WORKERS must be an integer"))))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .ok();
    }
    let cli = Cli::parse();
    match &cli.command {
        Command::GenTask {
            n,
            k,
            dim,
            seed,
            out,
        } => {
            let task = PoisonedLinearTask::generate(*n, *k, *dim, *seed);
            std::fs::write(out, task.to_json())?;
            println!(
                "wrote task with {} sources ({} poisoned) to {}",
                n,
                k,
                out.display()
            );
            Ok(())
        }
        Command::Sample { config, store } => {
            let cfg = load_config(config)?;
            let (observations, fresh) =
                offline_sample(&cfg, store, &base_dir(&config.config))?;
            println!(
                "store {} now covers {} observations ({} freshly evaluated)",
                store.display(),
                observations.len(),
                fresh
            );
            Ok(())
        }
        Command::Estimate {
            config,
            store,
            out,
            dump_design,
            cv_report,
        } => cmd_estimate(config, store, out, dump_design.as_deref(), cv_report.as_deref()),
        Command::Select { config, store, out } => cmd_select(config, store, out),
        Command::Sv {
            config,
            method,
            dist,
            permutations,
            out,
        } => cmd_sv(config, method, dist.as_deref(), *permutations, out),
        Command::Hier {
            config,
            tree,
            p2,
            out,
        } => cmd_hier(config, tree, p2.as_deref(), out),
        Command::Experiment { config, out_dir } => {
            let cfg = load_config(config)?;
            let report = run_experiment(&cfg, &base_dir(&config.config))?;
            emit_reports(&report, out_dir)?;
            println!(
                "wrote results.json, summary.csv, curves.csv to {}",
                out_dir.display()
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            if err
                .chain()
                .any(|e| e.downcast_ref::<ConfigProblem>().is_some())
            {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
