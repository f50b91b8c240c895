//! False-discovery-controlled selection of proponents.
//!
//! Each source column gets a knockoff twin drawn from the same Bernoulli(p)
//! law but independent of the utility. Comparing fitted coefficients gives
//! the one-sided statistic
//!
//!   W_n = max(beta_n, 0) - max(beta'_n, 0),
//!
//! which is positive when a source out-competes its knockoff. The threshold
//!
//!   tau = min { t in {|W_n| > 0} : #{W_n <= -t} / #{W_n >= t} <= q }
//!
//! keeps the estimated false-discovery proportion under q; tau = +inf (empty
//! selection) when no magnitude qualifies. Opponents behave like negatives
//! under the max(., 0) clamp, so selection targets proponents only.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::LambdaRule;
use crate::lasso::{self, LassoError};
use crate::sampling::{DesignMatrix, Featurization};
use crate::types::{EstimationResult, SourceId};

#[derive(Debug, Error, PartialEq)]
pub enum KnockoffError {
    #[error("estimation result carries no knockoff coefficients")]
    MissingKnockoffs,
    #[error(transparent)]
    Lasso(#[from] LassoError),
}

/// Outcome of one FDR-controlled selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    /// W statistic per source.
    pub w: Vec<f64>,
    /// Selection threshold; +inf means nothing qualified.
    pub tau: f64,
    /// Target FDR.
    pub q: f64,
    /// Sources with w >= tau, ascending.
    pub selected: Vec<SourceId>,
}

impl Selection {
    pub fn empty(n: usize, q: f64) -> Self {
        Selection {
            w: vec![0.0; n],
            tau: f64::INFINITY,
            q,
            selected: Vec::new(),
        }
    }

    pub fn tau_finite(&self) -> Option<f64> {
        self.tau.is_finite().then_some(self.tau)
    }

    pub fn contains(&self, source: usize) -> bool {
        self.selected.binary_search(&SourceId(source)).is_ok()
    }
}

/// One-sided knockoff statistics from fitted coefficient blocks.
pub fn w_statistics(est: &EstimationResult) -> Result<Vec<f64>, KnockoffError> {
    let knockoffs = est
        .knockoff_coefficients
        .as_ref()
        .ok_or(KnockoffError::MissingKnockoffs)?;
    Ok(est
        .coefficients
        .iter()
        .zip(knockoffs)
        .map(|(b, bk)| b.max(0.0) - bk.max(0.0))
        .collect())
}

/// Knockoff selection threshold at target FDR q.
///
/// Candidates are the positive magnitudes of W; zero-valued W contribute to
/// neither count. Returns +inf when no candidate satisfies the ratio.
pub fn knockoff_threshold(w: &[f64], q: f64) -> f64 {
    let mut candidates: Vec<f64> = w.iter().map(|x| x.abs()).filter(|&x| x > 0.0).collect();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    for t in candidates {
        let neg = w.iter().filter(|&&x| x <= -t).count();
        let pos = w.iter().filter(|&&x| x >= t).count();
        if (neg as f64) <= q * pos as f64 {
            return t;
        }
    }
    f64::INFINITY
}

/// Sources whose W statistic clears the threshold.
pub fn selected_at(w: &[f64], tau: f64) -> Vec<SourceId> {
    w.iter()
        .enumerate()
        .filter(|(_, &x)| x >= tau)
        .map(|(i, _)| SourceId(i))
        .collect()
}

/// Full selection pipeline on a knockoff-augmented design: pick lambda,
/// fit, form W statistics, threshold.
pub fn select_with_fdr(
    design: &DesignMatrix,
    feat: &Featurization,
    q: f64,
    lambda_rule: LambdaRule,
    cv_folds: usize,
    cv_seed: u64,
) -> Result<Selection, KnockoffError> {
    debug_assert!(design.layout.knockoff_cols > 0, "design lacks knockoff columns");
    let penalized = design.default_penalty();
    let lambda = match lambda_rule {
        LambdaRule::Fixed(v) => v,
        rule => lasso::cross_validate(design, cv_folds, cv_seed)?.lambda_for(rule),
    };
    let fit = lasso::fit(design, lambda, &penalized)?;
    let est = lasso::split_fit(&fit, &design.layout, feat);
    let w = w_statistics(&est)?;
    let tau = knockoff_threshold(&w, q);
    Ok(Selection {
        selected: selected_at(&w, tau),
        w,
        tau,
        q,
    })
}

/// Empirical modified FDR over a trial suite:
/// mean of |selected \ truth| / (|selected| + 1/q).
pub fn mfdr_audit(trials: &[(Selection, Vec<usize>)]) -> f64 {
    if trials.is_empty() {
        return 0.0;
    }
    let q = trials[0].0.q;
    debug_assert!(trials.iter().all(|(s, _)| s.q == q), "mixed q across trials");
    if q == 0.0 {
        return 0.0;
    }
    let sum: f64 = trials
        .iter()
        .map(|(sel, truth)| {
            let false_hits = sel
                .selected
                .iter()
                .filter(|s| !truth.contains(&s.index()))
                .count();
            false_hits as f64 / (sel.selected.len() as f64 + 1.0 / q)
        })
        .sum();
    sum / trials.len() as f64
}
