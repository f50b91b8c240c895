//! Experiment runner: bind an oracle, run the offline sampling/evaluation
//! phase, then the per-trial estimate/select phase, and assemble a report.
//! Everything is deterministic given the config's seed.

use std::path::Path;

use anyhow::{anyhow, bail, Context};

use ame_core::config::{ExperimentConfig, LambdaRule, OracleSpec};
use ame_core::knockoffs::{knockoff_threshold, selected_at, w_statistics, Selection};
use ame_core::lasso;
use ame_core::oracle::{
    cached_evaluate, evaluate_rows, random_monotone_game, PendingEval, PoisonedLinearTask, Query,
    UtilityOracle,
};
use ame_core::sampling::{build_design, sample_rows, Featurization, SubsetSampler};
use ame_core::shapley::exact_sv;
use ame_core::store::{ObservationStore, StoreHeader};
use ame_core::types::Observation;
use ame_core::ThresholdGame;

use crate::report::{RunReport, TrialReport};

/// An oracle bound to its query and ground truth (when the truth is known by
/// construction).
pub struct OracleBundle {
    pub oracle: Box<dyn UtilityOracle>,
    pub query: Query,
    pub n_sources: usize,
    pub k: Option<usize>,
    /// True contributing sources, when known.
    pub truth: Option<Vec<usize>>,
    /// Ground-truth Shapley values, when computable.
    pub sv_truth: Option<Vec<f64>>,
}

/// Instantiate the oracle named by the config. Task files are resolved
/// relative to `base_dir`.
pub fn build_oracle(
    spec: &OracleSpec,
    seed: u64,
    base_dir: &Path,
) -> anyhow::Result<OracleBundle> {
    match spec {
        OracleSpec::ThresholdGame { n, k, threshold } => {
            let game = ThresholdGame::new(*n, *k, *threshold);
            let mut sv = vec![0.0; *n];
            for v in sv.iter_mut().take(*k) {
                *v = 1.0 / *k as f64;
            }
            Ok(OracleBundle {
                oracle: Box::new(game),
                query: Query::none(),
                n_sources: *n,
                k: Some(*k),
                truth: Some((0..*k).collect()),
                sv_truth: Some(sv),
            })
        }
        OracleSpec::RandomMonotone { n } => {
            let game = random_monotone_game(*n, seed);
            let sv_truth = (*n <= 16).then(|| exact_sv(&game).expect("small game").values);
            Ok(OracleBundle {
                oracle: Box::new(game),
                query: Query::none(),
                n_sources: *n,
                k: None,
                truth: None,
                sv_truth,
            })
        }
        OracleSpec::PoisonedTask { path } => {
            let full = base_dir.join(path);
            let text = std::fs::read_to_string(&full)
                .with_context(|| format!("reading task fixture {}", full.display()))?;
            let task = PoisonedLinearTask::from_json(&text)?;
            Ok(OracleBundle {
                n_sources: task.n_sources(),
                k: Some(task.poison_indices.len()),
                truth: Some(task.poison_indices.clone()),
                sv_truth: None,
                query: task.trigger_query.clone(),
                oracle: Box::new(task),
            })
        }
    }
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-trial sampling seed, decorrelated across (seed, trial, budget).
pub fn trial_seed(seed: u64, trial: usize, m: usize) -> u64 {
    mix(seed ^ mix(trial as u64 ^ mix(m as u64)))
}

/// One estimation/selection pass over an observation list.
pub struct TrialOutcome {
    pub selection: Option<Selection>,
    pub ame: Vec<f64>,
    pub lambda: f64,
}

/// Online phase for one trial: cross-validate, fit, and (with knockoffs)
/// select.
pub fn estimate_and_select(
    observations: &[Observation],
    feat: &Featurization,
    config: &ExperimentConfig,
    cv_seed: u64,
) -> anyhow::Result<TrialOutcome> {
    let with_knockoffs = config.knockoffs;
    let design = build_design(observations, feat, with_knockoffs, with_knockoffs)?;
    let penalized = design.default_penalty();
    let lambda = match config.lambda_rule {
        LambdaRule::Fixed(v) => v,
        rule => lasso::cross_validate(&design, config.cv_folds, cv_seed)?.lambda_for(rule),
    };
    let fit = lasso::fit(&design, lambda, &penalized)?;
    let est = lasso::split_fit(&fit, &design.layout, feat);
    let selection = if with_knockoffs {
        let w = w_statistics(&est)?;
        let tau = knockoff_threshold(&w, config.q);
        Some(Selection {
            selected: selected_at(&w, tau),
            w,
            tau,
            q: config.q,
        })
    } else {
        None
    };
    Ok(TrialOutcome {
        selection,
        ame: est.ame(),
        lambda,
    })
}

fn l2_gap(estimate: &[f64], truth: &[f64]) -> f64 {
    estimate
        .iter()
        .zip(truth)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// Full experiment: offline sampling + per-trial online phase for every
/// budget in the config.
pub fn run_experiment(config: &ExperimentConfig, base_dir: &Path) -> anyhow::Result<RunReport> {
    let config = ame_core::validate_experiment(config.clone())
        .map_err(|errs| anyhow!("invalid config: {:?}", errs))?;
    let bundle = build_oracle(&config.oracle, config.seed, base_dir)?;
    let feat = Featurization::new(config.featurization, config.p.clone())?;
    let budgets = config.resolve_budgets(bundle.n_sources, bundle.k);
    if budgets.is_empty() {
        bail!("config resolves to no sample budgets");
    }

    let mut trials = Vec::new();
    let mut trial_id = 0usize;
    for &m in &budgets {
        for t in 0..config.trials {
            let seed = trial_seed(config.seed, t, m);
            let sampler = SubsetSampler::new(seed);
            let rows = sample_rows(&sampler, bundle.n_sources, m, &feat, config.knockoffs);
            let observations = evaluate_rows(bundle.oracle.as_ref(), &rows, &bundle.query, seed);
            let outcome = estimate_and_select(&observations, &feat, &config, seed)?;

            let selected: Vec<usize> = outcome
                .selection
                .as_ref()
                .map(|s| s.selected.iter().map(|id| id.index()).collect())
                .unwrap_or_default();
            let (precision, recall) = match (&bundle.truth, selected.is_empty()) {
                (Some(truth), false) => {
                    let hits = selected.iter().filter(|i| truth.contains(i)).count();
                    (
                        Some(hits as f64 / selected.len() as f64),
                        Some(hits as f64 / truth.len() as f64),
                    )
                }
                (Some(_), true) => (None, Some(0.0)),
                (None, _) => (None, None),
            };
            let l2_error = bundle.sv_truth.as_ref().map(|sv| l2_gap(&outcome.ame, sv));

            trials.push(TrialReport {
                trial: trial_id,
                m,
                selected,
                precision,
                recall,
                l2_error,
                lambda: outcome.lambda,
                tau: outcome.selection.as_ref().and_then(|s| s.tau_finite()),
            });
            trial_id += 1;
        }
    }
    Ok(RunReport::assemble(config, trials))
}

/// Offline phase against a persistent store: sample masks, reuse every
/// utility the store already has, append the rest. Returns the observations
/// in sampling order and the number of fresh oracle evaluations.
pub fn offline_sample(
    config: &ExperimentConfig,
    store_path: &Path,
    base_dir: &Path,
) -> anyhow::Result<(Vec<Observation>, usize)> {
    let config = ame_core::validate_experiment(config.clone())
        .map_err(|errs| anyhow!("invalid config: {:?}", errs))?;
    let bundle = build_oracle(&config.oracle, config.seed, base_dir)?;
    let feat = Featurization::new(config.featurization, config.p.clone())?;
    let budgets = config.resolve_budgets(bundle.n_sources, bundle.k);
    let m = *budgets
        .last()
        .ok_or_else(|| anyhow!("config resolves to no sample budgets"))?;

    let header = StoreHeader {
        n_sources: bundle.n_sources,
        p_spec: config.p.clone(),
        featurization: config.featurization,
        seed: config.seed,
        oracle_fp: bundle.oracle.fingerprint(),
    };
    let mut store = ObservationStore::open_or_create(store_path, header)?;

    let sampler = SubsetSampler::new(config.seed);
    let rows = sample_rows(&sampler, bundle.n_sources, m, &feat, config.knockoffs);
    let pending: Vec<PendingEval> = rows
        .into_iter()
        .map(|(p, mask, knockoff_mask)| PendingEval {
            mask,
            p,
            knockoff_mask,
        })
        .collect();
    let outcome = cached_evaluate(&mut store, bundle.oracle.as_ref(), &pending, &bundle.query)?;
    Ok((outcome.observations, outcome.fresh_evaluations))
}
