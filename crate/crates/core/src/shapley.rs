//! Exact and Monte-Carlo Shapley oracles, exact AME computation on small
//! games, and the AME-based sparse Shapley estimators with their closed-form
//! error bounds.
//!
//! The exact routines enumerate all 2^N subsets (N <= 16) against a cached
//! utility table. The AME of source n under a p law is
//!
//!   AME_n = sum over S not containing n of w(|S|) * (U(S + n) - U(S)),
//!
//! with size weights w(j) = E_p[p^j (1-p)^(N-1-j)] integrated analytically:
//! a finite average for grids, regularized incomplete Beta differences for
//! the truncated uniform, and Beta-function ratios for Beta laws. With
//! p ~ Uni(0,1) the weights collapse to the discrete-uniform 1/(N C(N-1,j))
//! and the AME is exactly the Shapley value; `exact_sv` instead uses the
//! factorial form j!(N-1-j)!/N!, so the two routes are independent
//! arithmetic paths to the same quantity.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::beta::{beta_reg, ln_beta};
use thiserror::Error;

use crate::config::LambdaRule;
use crate::lasso::{self, LassoError};
use crate::oracle::{Query, UtilityOracle};
use crate::sampling::{build_design, Featurization, SamplingError};
use crate::types::{Observation, PDistribution, SubsetMask};

#[derive(Debug, Error)]
pub enum ShapleyError {
    #[error("exact enumeration supports at most {max} sources, got {n}")]
    TooLarge { n: usize, max: usize },
    #[error("unsupported distribution for this operation: {0:?}")]
    UnsupportedDistribution(PDistribution),
    #[error(transparent)]
    Lasso(#[from] LassoError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
}

/// How a Shapley vector was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SvMethod {
    ExactEnum,
    PermutationMc,
    AmeTruncUniform,
    AmeBeta,
    BetaShapley { alpha: f64, beta: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapleyVector {
    pub values: Vec<f64>,
    pub method: SvMethod,
}

const EXACT_MAX: usize = 16;
const EXHAUSTIVE_PERM_MAX: usize = 8;

/// Evaluate the oracle once per subset, indexed by bitmask.
fn utility_table(oracle: &dyn UtilityOracle) -> Result<Vec<f64>, ShapleyError> {
    let n = oracle.n_sources();
    if n > EXACT_MAX {
        return Err(ShapleyError::TooLarge { n, max: EXACT_MAX });
    }
    let query = Query::none();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let table = (0u32..1 << n)
        .map(|bits| {
            let mut mask = SubsetMask::empty(n);
            for i in 0..n {
                if bits >> i & 1 == 1 {
                    mask.insert(i);
                }
            }
            oracle.evaluate(&mask, &query, &mut rng)
        })
        .collect();
    Ok(table)
}

/// Accumulate sum over subsets of w(|S|) * (U(S+n) - U(S)) for every n.
fn weighted_marginals(n: usize, table: &[f64], weights: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0f64; n];
    for bits in 0u32..1 << n {
        let ones = bits.count_ones() as usize;
        if ones == n {
            continue;
        }
        let w = weights[ones];
        let u = table[bits as usize];
        for (i, o) in out.iter_mut().enumerate() {
            if bits >> i & 1 == 0 {
                *o += w * (table[(bits | 1 << i) as usize] - u);
            }
        }
    }
    out
}

/// Exact Shapley values by subset enumeration, each U(S) evaluated once.
/// Factorial weights: SV_n = sum_S |S|!(N-1-|S|)!/N! (U(S+n) - U(S)).
pub fn exact_sv(oracle: &dyn UtilityOracle) -> Result<ShapleyVector, ShapleyError> {
    let n = oracle.n_sources();
    let table = utility_table(oracle)?;
    let mut fact = vec![1.0f64; n + 1];
    for i in 1..=n {
        fact[i] = fact[i - 1] * i as f64;
    }
    let weights: Vec<f64> = (0..n).map(|j| fact[j] * fact[n - 1 - j] / fact[n]).collect();
    Ok(ShapleyVector {
        values: weighted_marginals(n, &table, &weights),
        method: SvMethod::ExactEnum,
    })
}

/// Subset-size weights E_p[p^j (1-p)^(N-1-j)], j = 0..N-1, integrated in
/// closed form under the given law.
pub fn size_weights(dist: &PDistribution, n: usize) -> Result<Vec<f64>, ShapleyError> {
    let weight = |j: usize| -> Result<f64, ShapleyError> {
        let a = (j + 1) as f64;
        let b = (n - j) as f64;
        match dist {
            PDistribution::DiscreteGrid { values } => {
                let sum: f64 = values
                    .iter()
                    .map(|p| p.powi(j as i32) * (1.0 - p).powi((n - 1 - j) as i32))
                    .sum();
                Ok(sum / values.len() as f64)
            }
            PDistribution::TruncatedUniform { epsilon } => {
                let complete = ln_beta(a, b).exp();
                let mass = beta_reg(a, b, 1.0 - epsilon) - beta_reg(a, b, *epsilon);
                Ok(complete * mass / (1.0 - 2.0 * epsilon))
            }
            PDistribution::Beta { alpha, beta } => {
                Ok((ln_beta(j as f64 + alpha, (n - 1 - j) as f64 + beta)
                    - ln_beta(*alpha, *beta))
                .exp())
            }
            PDistribution::ReweightedW { .. } => {
                Err(ShapleyError::UnsupportedDistribution(dist.clone()))
            }
        }
    };
    (0..n).map(weight).collect()
}

/// Exact AME under the given p law, by subset enumeration (N <= 16).
pub fn exact_ame(oracle: &dyn UtilityOracle, dist: &PDistribution) -> Result<Vec<f64>, ShapleyError> {
    let n = oracle.n_sources();
    let table = utility_table(oracle)?;
    let weights = size_weights(dist, n)?;
    Ok(weighted_marginals(n, &table, &weights))
}

/// Exact AME in the Uni(0,1) limit: size weights B(j+1, N-j) computed via
/// the Beta function. By the AME-SV equivalence this equals the Shapley
/// value, but through special functions rather than factorials.
pub fn exact_ame_uniform(oracle: &dyn UtilityOracle) -> Result<Vec<f64>, ShapleyError> {
    let n = oracle.n_sources();
    let table = utility_table(oracle)?;
    let weights: Vec<f64> = (0..n)
        .map(|j| ln_beta((j + 1) as f64, (n - j) as f64).exp())
        .collect();
    Ok(weighted_marginals(n, &table, &weights))
}

/// Monte-Carlo Shapley estimate: average marginal contribution over sampled
/// uniform permutations. Each permutation costs N+1 utility evaluations via
/// incremental masks.
pub fn permutation_mc_sv(
    oracle: &dyn UtilityOracle,
    n_permutations: usize,
    seed: u64,
) -> ShapleyVector {
    let n = oracle.n_sources();
    let query = Query::none();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut totals = vec![0.0f64; n];
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..n_permutations {
        order.shuffle(&mut rng);
        let mut mask = SubsetMask::empty(n);
        let mut prev = oracle.evaluate(&mask, &query, &mut rng);
        for &source in &order {
            mask.insert(source);
            let u = oracle.evaluate(&mask, &query, &mut rng);
            totals[source] += u - prev;
            prev = u;
        }
    }
    ShapleyVector {
        values: totals.iter().map(|t| t / n_permutations as f64).collect(),
        method: SvMethod::PermutationMc,
    }
}

/// Average over all N! permutations (exhaustive mode, N <= 8). Equals the
/// Shapley value exactly up to floating point.
pub fn permutation_sv_exhaustive(oracle: &dyn UtilityOracle) -> Result<ShapleyVector, ShapleyError> {
    let n = oracle.n_sources();
    if n > EXHAUSTIVE_PERM_MAX {
        return Err(ShapleyError::TooLarge {
            n,
            max: EXHAUSTIVE_PERM_MAX,
        });
    }
    let table = utility_table(oracle)?;
    let mut totals = vec![0.0f64; n];
    let mut count = 0u64;
    let mut order: Vec<usize> = (0..n).collect();
    // Heap's algorithm over permutations.
    let mut stack = vec![0usize; n];
    let visit = |order: &[usize], totals: &mut [f64]| {
        let mut bits = 0u32;
        let mut prev = table[0];
        for &source in order {
            bits |= 1 << source;
            let u = table[bits as usize];
            totals[source] += u - prev;
            prev = u;
        }
    };
    visit(&order, &mut totals);
    count += 1;
    let mut i = 1;
    while i < n {
        if stack[i] < i {
            if i % 2 == 0 {
                order.swap(0, i);
            } else {
                order.swap(stack[i], i);
            }
            visit(&order, &mut totals);
            count += 1;
            stack[i] += 1;
            i = 1;
        } else {
            stack[i] = 0;
            i += 1;
        }
    }
    Ok(ShapleyVector {
        values: totals.iter().map(|t| t / count as f64).collect(),
        method: SvMethod::ExactEnum,
    })
}

/// Scalable sparse SV estimate: LASSO on featurized observations, rescaled
/// by sqrt(v). The observations must have been sampled under the law the
/// featurization was built for (the reweighted law for p-featurization).
pub fn sv_via_ame(
    observations: &[Observation],
    feat: &Featurization,
    lambda_rule: LambdaRule,
    cv_folds: usize,
    cv_seed: u64,
) -> Result<ShapleyVector, ShapleyError> {
    let method = match &feat.dist {
        PDistribution::TruncatedUniform { .. } => SvMethod::AmeTruncUniform,
        PDistribution::Beta { alpha, beta } if *alpha > 1.0 && *beta > 1.0 => {
            if (alpha - beta).abs() < 1e-12 && *alpha <= 1.5 {
                SvMethod::AmeBeta
            } else {
                SvMethod::BetaShapley {
                    alpha: *alpha,
                    beta: *beta,
                }
            }
        }
        other => return Err(ShapleyError::UnsupportedDistribution(other.clone())),
    };
    let design = build_design(observations, feat, false, false)?;
    let penalized = design.default_penalty();
    let lambda = match lambda_rule {
        LambdaRule::Fixed(v) => v,
        rule => lasso::cross_validate(&design, cv_folds, cv_seed)?.lambda_for(rule),
    };
    let fit = lasso::fit(&design, lambda, &penalized)?;
    Ok(ShapleyVector {
        values: lasso::estimate_ame(&fit, &design.layout, feat),
        method,
    })
}

/// Closed-form AME-to-SV discrepancy bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub epsilon: f64,
    /// L2 bound on ||AME - SV|| under monotone utility.
    pub l2_bound: f64,
    /// Linf bound under bounded (not necessarily monotone) utility.
    pub linf_bound: f64,
    /// Bound on Delta = max_S P_ame(S)/P_sv(S) - 1.
    pub delta_cap: f64,
}

/// Bound report for the supported SV-approximating laws: truncated uniform
/// Uni(eps, 1-eps) and symmetric Beta(1+eps, 1+eps).
pub fn bound_report(dist: &PDistribution) -> Result<BoundReport, ShapleyError> {
    match dist {
        PDistribution::TruncatedUniform { epsilon } => {
            let e = *epsilon;
            Ok(BoundReport {
                epsilon: e,
                l2_bound: 4.0 * e + 2.0 * (2.0 * e).sqrt(),
                linf_bound: 8.0 * e,
                delta_cap: 4.0 * e,
            })
        }
        PDistribution::Beta { alpha, beta }
            if (alpha - beta).abs() < 1e-12 && *alpha > 1.0 && *alpha < 1.5 + 1e-12 =>
        {
            let e = alpha - 1.0;
            let delta = (1.0 + 1.0 / e).powf(2.0 * e) - 1.0;
            Ok(BoundReport {
                epsilon: e,
                l2_bound: delta + (2.0 * delta).sqrt(),
                linf_bound: 2.0 * delta,
                delta_cap: delta,
            })
        }
        other => Err(ShapleyError::UnsupportedDistribution(other.clone())),
    }
}
