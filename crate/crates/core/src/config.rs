//! Experiment configuration: a single JSON document describing the oracle,
//! sampling law, budget, and selection parameters. Seeds are mandatory —
//! every run must be reproducible from its config alone.

use serde::{Deserialize, Serialize};

use crate::types::{ConfigError, FeatScheme, PDistribution};

/// Which utility oracle the experiment runs against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleSpec {
    /// Indicator game: utility 1 iff at least `threshold` of the first `k`
    /// sources are included.
    ThresholdGame {
        n: usize,
        k: usize,
        #[serde(default = "default_threshold")]
        threshold: usize,
    },
    /// Seeded monotone coverage game (small N, brute-force regimes).
    RandomMonotone { n: usize },
    /// Poisoned linear-classifier task loaded from a fixture file.
    PoisonedTask { path: String },
}

fn default_threshold() -> usize {
    2
}

impl OracleSpec {
    /// Declared source count, when it is knowable without touching disk.
    pub fn n_sources(&self) -> Option<usize> {
        match self {
            OracleSpec::ThresholdGame { n, .. } | OracleSpec::RandomMonotone { n } => Some(*n),
            OracleSpec::PoisonedTask { .. } => None,
        }
    }

    /// Declared sparsity k, when known.
    pub fn k(&self) -> Option<usize> {
        match self {
            OracleSpec::ThresholdGame { k, .. } => Some(*k),
            _ => None,
        }
    }
}

/// How the regularization strength is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaRule {
    /// Cross-validation minimum (estimation tasks).
    Min,
    /// Largest lambda within one standard error of the CV minimum
    /// (selection tasks; sparser).
    OneSe,
    /// Fixed user-supplied value.
    Fixed(f64),
}

impl std::str::FromStr for LambdaRule {
    type Err = String;

    /// Accepts `min`, `1se`, or `fixed:<value>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "min" => Ok(LambdaRule::Min),
            "1se" => Ok(LambdaRule::OneSe),
            _ => {
                if let Some(v) = s.strip_prefix("fixed:") {
                    let value: f64 = v.parse().map_err(|_| format!("bad lambda value {v:?}"))?;
                    if value < 0.0 || !value.is_finite() {
                        return Err(format!("lambda must be finite and >= 0, got {value}"));
                    }
                    Ok(LambdaRule::Fixed(value))
                } else {
                    Err(format!("unknown lambda rule {s:?} (want min|1se|fixed:<value>)"))
                }
            }
        }
    }
}

impl std::fmt::Display for LambdaRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LambdaRule::Min => write!(f, "min"),
            LambdaRule::OneSe => write!(f, "1se"),
            LambdaRule::Fixed(v) => write!(f, "fixed:{v}"),
        }
    }
}

/// Full experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub oracle: OracleSpec,
    pub p: PDistribution,
    pub featurization: FeatScheme,
    /// Subset-model budget: either a direct count...
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    /// ...or a constant c with M = c * k * log2(N).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
    /// Optional sweep over several budgets (for error-vs-M curves).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m_grid: Option<Vec<usize>>,
    pub lambda_rule: LambdaRule,
    /// Target FDR for knockoff selection.
    #[serde(default = "default_q")]
    pub q: f64,
    /// Draw knockoff masks during sampling and run FDR-controlled selection.
    #[serde(default = "default_true")]
    pub knockoffs: bool,
    /// Cross-validation folds.
    #[serde(default = "default_folds")]
    pub cv_folds: usize,
    pub seed: u64,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
}

fn default_q() -> f64 {
    0.2
}

fn default_true() -> bool {
    true
}

fn default_folds() -> usize {
    20
}

fn default_trials() -> usize {
    1
}

impl ExperimentConfig {
    /// Budgets to run, resolved against the oracle's (k, N) when the config
    /// uses the c form. Ascending when a grid was given.
    pub fn resolve_budgets(&self, n_sources: usize, k: Option<usize>) -> Vec<usize> {
        if let Some(grid) = &self.m_grid {
            let mut grid = grid.clone();
            grid.sort_unstable();
            return grid;
        }
        if let Some(m) = self.m {
            return vec![m];
        }
        if let (Some(c), Some(k)) = (self.c, k) {
            let m = (c * k as f64 * (n_sources as f64).log2()).round() as usize;
            return vec![m.max(1)];
        }
        Vec::new()
    }
}

/// Validate a full experiment config, reporting every violation rather than
/// the first. Validation is a pure check: a valid config passes through
/// unchanged, so validating twice yields the same value.
pub fn validate_experiment(config: ExperimentConfig) -> Result<ExperimentConfig, Vec<ConfigError>> {
    let mut errors = Vec::new();

    if let Some(n) = config.oracle.n_sources() {
        if n == 0 {
            errors.push(ConfigError::EmptySources);
        }
    }
    config.p.check(&mut errors);

    // The inverse-p featurization needs a finite normalizer v = E[1/(p(1-p))].
    if config.featurization == FeatScheme::InverseP {
        if let PDistribution::Beta { alpha, beta } = &config.p {
            if *alpha <= 1.0 || *beta <= 1.0 {
                errors.push(ConfigError::InvalidBetaParams {
                    alpha: *alpha,
                    beta: *beta,
                });
            }
        }
    }

    let budgets = config.resolve_budgets(config.oracle.n_sources().unwrap_or(1), config.oracle.k());
    if config.m.is_none() && config.c.is_none() && config.m_grid.is_none() {
        errors.push(ConfigError::InvalidSampleBudget);
    } else if budgets.iter().any(|&m| m == 0)
        || (config.m_grid.as_ref().is_some_and(|g| g.is_empty()))
    {
        errors.push(ConfigError::InvalidSampleBudget);
    }

    if config.trials == 0 {
        errors.push(ConfigError::InvalidTrials);
    }
    if !(0.0..=1.0).contains(&config.q) || !config.q.is_finite() {
        errors.push(ConfigError::InvalidQ(config.q));
    }
    if let LambdaRule::Fixed(v) = config.lambda_rule {
        if v < 0.0 || !v.is_finite() {
            errors.push(ConfigError::InvalidSampleBudget);
        }
    }

    if errors.is_empty() {
        Ok(config)
    } else {
        Err(errors)
    }
}
