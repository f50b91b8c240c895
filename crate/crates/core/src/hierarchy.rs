//! Two-level hierarchical sampling and the estimate-then-refine pipeline.
//!
//! Sampling follows the hierarchy: each top-level source enters with
//! probability p1, and each second-level source under an included top enters
//! with probability p2 (children of excluded tops are excluded outright).
//!
//! Stage one runs the flat pipeline on the N1 top-level variables with
//! p = p1. Stage two keeps all top-level variables, adds one column per
//! second-level source under a stage-one proponent, featurized as
//!
//!   X_n = 1/(p1 p2)        if s(n) in Prop1 and s(n) in S1 and n in S2
//!       = -1/(p1 (1-p2))   if s(n) in Prop1 and s(n) in S1 and n not in S2
//!       = 0                otherwise (s(n) not in S1)
//!
//! which has zero mean conditional on (p1, p2, parent state). Second-level
//! knockoffs are drawn Bernoulli(p2) conditioned on parent inclusion and
//! featurized through the same cases; dummies one-hot encode the observed
//! (p1, p2) tuples. Both stages read the same observation list: one offline
//! phase serves every level.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::LambdaRule;
use crate::knockoffs::{knockoff_threshold, selected_at, KnockoffError, Selection};
use crate::lasso;
use crate::sampling::{
    draw_p, DesignLayout, DesignMatrix, Featurization, SamplingError, SubsetSampler,
};
use crate::store::RecordJson;
use crate::types::{FeatScheme, PDistribution, SubsetMask};

#[derive(Debug, Error)]
pub enum HierarchyError {
    #[error("bad tree: {0}")]
    BadTree(String),
    #[error("observation {row} violates containment (child included under excluded top)")]
    Containment { row: usize },
    #[error("observation {row} has inconsistent mask lengths")]
    Shape { row: usize },
    #[error("malformed hierarchical record: {0}")]
    MalformedRecord(String),
    #[error(transparent)]
    Knockoffs(#[from] KnockoffError),
    #[error(transparent)]
    Lasso(#[from] lasso::LassoError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Two-level grouping: each top-level source owns a list of second-level
/// source ids, and the lists partition [N2].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TreeJson", into = "TreeJson")]
pub struct SourceTree {
    children: Vec<Vec<usize>>,
    parent: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct TreeJson {
    children: Vec<Vec<usize>>,
}

impl TryFrom<TreeJson> for SourceTree {
    type Error = String;
    fn try_from(value: TreeJson) -> Result<Self, Self::Error> {
        SourceTree::new(value.children).map_err(|e| e.to_string())
    }
}

impl From<SourceTree> for TreeJson {
    fn from(tree: SourceTree) -> Self {
        TreeJson {
            children: tree.children,
        }
    }
}

impl SourceTree {
    pub fn new(children: Vec<Vec<usize>>) -> Result<Self, HierarchyError> {
        let n_second: usize = children.iter().map(|c| c.len()).sum();
        let mut parent = vec![usize::MAX; n_second];
        for (top, kids) in children.iter().enumerate() {
            for &child in kids {
                if child >= n_second {
                    return Err(HierarchyError::BadTree(format!(
                        "child id {child} out of range for {n_second} second-level sources"
                    )));
                }
                if parent[child] != usize::MAX {
                    return Err(HierarchyError::BadTree(format!(
                        "child {child} appears under two tops"
                    )));
                }
                parent[child] = top;
            }
        }
        if parent.iter().any(|&p| p == usize::MAX) {
            return Err(HierarchyError::BadTree(
                "children lists do not cover every second-level source".into(),
            ));
        }
        Ok(SourceTree { children, parent })
    }

    /// Balanced tree: `n_top` tops with `per_top` children each, ids assigned
    /// contiguously.
    pub fn balanced(n_top: usize, per_top: usize) -> Self {
        let children = (0..n_top)
            .map(|t| (t * per_top..(t + 1) * per_top).collect())
            .collect();
        SourceTree::new(children).expect("balanced tree is well-formed")
    }

    pub fn n_top(&self) -> usize {
        self.children.len()
    }

    pub fn n_second(&self) -> usize {
        self.parent.len()
    }

    pub fn parent(&self, child: usize) -> usize {
        self.parent[child]
    }

    pub fn children(&self, top: usize) -> &[usize] {
        &self.children[top]
    }
}

/// One hierarchical sample: both masks, both inclusion probabilities, the
/// utility, and the knockoff draws for both levels.
#[derive(Debug, Clone, PartialEq)]
pub struct HierObservation {
    pub top_mask: SubsetMask,
    pub second_mask: SubsetMask,
    pub p1: f64,
    pub p2: f64,
    pub y: f64,
    pub top_knockoff: Option<SubsetMask>,
    pub second_knockoff: Option<SubsetMask>,
}

impl HierObservation {
    /// Containment invariant: a child can only be included when its top is.
    pub fn check_containment(&self, tree: &SourceTree) -> bool {
        self.second_mask
            .iter_ones()
            .all(|child| self.top_mask.contains(tree.parent(child)))
            && self.second_knockoff.as_ref().is_none_or(|k| {
                k.iter_ones().all(|child| self.top_mask.contains(tree.parent(child)))
            })
    }
}

/// Draw one hierarchical mask pair: tops Bernoulli(p1), children of included
/// tops Bernoulli(p2).
pub fn sample_hier<R: Rng + ?Sized>(
    tree: &SourceTree,
    p1_dist: &PDistribution,
    p2_dist: &PDistribution,
    rng: &mut R,
) -> (f64, f64, SubsetMask, SubsetMask) {
    let p1 = draw_p(p1_dist, rng);
    let p2 = draw_p(p2_dist, rng);
    let mut top = SubsetMask::empty(tree.n_top());
    for t in 0..tree.n_top() {
        if rng.random::<f64>() < p1 {
            top.insert(t);
        }
    }
    let mut second = SubsetMask::empty(tree.n_second());
    for t in top.iter_ones() {
        for &child in tree.children(t) {
            if rng.random::<f64>() < p2 {
                second.insert(child);
            }
        }
    }
    (p1, p2, top, second)
}

const STREAM_P: u64 = 0x20;
const STREAM_TOP: u64 = 0x21;
const STREAM_SECOND: u64 = 0x22;
const STREAM_TOP_KNOCKOFF: u64 = 0x23;
const STREAM_SECOND_KNOCKOFF: u64 = 0x24;

/// Counter-keyed hierarchical rows: deterministic per (seed, row) with
/// knockoff draws for both levels. Second-level knockoffs are conditioned on
/// the real top mask, matching the conditional inclusion law.
pub fn sample_hier_rows(
    sampler: &SubsetSampler,
    tree: &SourceTree,
    p1_dist: &PDistribution,
    p2_dist: &PDistribution,
    m: usize,
    with_knockoffs: bool,
) -> Vec<HierObservation> {
    (0..m as u64)
        .into_par_iter()
        .map(|row| {
            let mut prng = sampler.stream_rng(STREAM_P, row);
            let p1 = draw_p(p1_dist, &mut prng);
            let p2 = draw_p(p2_dist, &mut prng);
            let mut top = SubsetMask::empty(tree.n_top());
            for t in 0..tree.n_top() {
                if sampler.stream_bernoulli(STREAM_TOP, row, t as u64, p1) {
                    top.insert(t);
                }
            }
            let mut second = SubsetMask::empty(tree.n_second());
            for t in top.iter_ones() {
                for &child in tree.children(t) {
                    if sampler.stream_bernoulli(STREAM_SECOND, row, child as u64, p2) {
                        second.insert(child);
                    }
                }
            }
            let (top_knockoff, second_knockoff) = if with_knockoffs {
                let mut tk = SubsetMask::empty(tree.n_top());
                for t in 0..tree.n_top() {
                    if sampler.stream_bernoulli(STREAM_TOP_KNOCKOFF, row, t as u64, p1) {
                        tk.insert(t);
                    }
                }
                let mut sk = SubsetMask::empty(tree.n_second());
                for t in top.iter_ones() {
                    for &child in tree.children(t) {
                        if sampler.stream_bernoulli(STREAM_SECOND_KNOCKOFF, row, child as u64, p2)
                        {
                            sk.insert(child);
                        }
                    }
                }
                (Some(tk), Some(sk))
            } else {
                (None, None)
            };
            HierObservation {
                top_mask: top,
                second_mask: second,
                p1,
                p2,
                y: 0.0,
                top_knockoff,
                second_knockoff,
            }
        })
        .collect()
}

/// Second-level featurized value for one child given the row state.
pub fn second_level_value(parent_included: bool, child_included: bool, p1: f64, p2: f64) -> f64 {
    if !parent_included {
        0.0
    } else if child_included {
        1.0 / (p1 * p2)
    } else {
        -1.0 / (p1 * (1.0 - p2))
    }
}

/// Featurize every second-level source for one observation: nonzero only for
/// children of stage-one proponents whose top is included in this row.
pub fn featurize_second_level(
    obs: &HierObservation,
    prop1: &HashSet<usize>,
    tree: &SourceTree,
) -> Vec<f64> {
    (0..tree.n_second())
        .map(|child| {
            let top = tree.parent(child);
            if !prop1.contains(&top) {
                return 0.0;
            }
            second_level_value(
                obs.top_mask.contains(top),
                obs.second_mask.contains(child),
                obs.p1,
                obs.p2,
            )
        })
        .collect()
}

/// Both selections from one observation list.
#[derive(Debug, Clone)]
pub struct TwoStageResult {
    pub stage1: Selection,
    pub stage2: Selection,
}

fn stage1_observations(
    observations: &[HierObservation],
) -> Result<Vec<crate::types::Observation>, HierarchyError> {
    observations
        .iter()
        .enumerate()
        .map(|(row, o)| {
            crate::types::Observation::with_knockoff(
                o.top_mask.clone(),
                o.p1,
                o.y,
                o.top_knockoff.clone(),
            )
            .map_err(|e| HierarchyError::MalformedRecord(format!("row {row}: {e}")))
        })
        .collect()
}

/// Stage 1: flat selection over the N1 top-level sources at p = p1.
pub fn stage1_select(
    observations: &[HierObservation],
    p1_dist: &PDistribution,
    q: f64,
    lambda_rule: LambdaRule,
    cv_folds: usize,
    cv_seed: u64,
) -> Result<Selection, HierarchyError> {
    let flat = stage1_observations(observations)?;
    let feat = Featurization::new(FeatScheme::InverseP, p1_dist.clone())?;
    let design = crate::sampling::build_design(&flat, &feat, true, true)?;
    Ok(crate::knockoffs::select_with_fdr(
        &design,
        &feat,
        q,
        lambda_rule,
        cv_folds,
        cv_seed,
    )?)
}

/// Stage 2 design: all top-level variables (inverse-p at p1), one column per
/// child of a stage-one proponent, knockoff columns for exactly those
/// children, and dummies over the observed (p1, p2) tuples.
fn build_stage2_design(
    observations: &[HierObservation],
    tree: &SourceTree,
    prop1: &HashSet<usize>,
    feat1: &Featurization,
) -> (DesignMatrix, Vec<usize>) {
    let m = observations.len();
    let n_top = tree.n_top();
    let child_cols: Vec<usize> = {
        let mut tops: Vec<usize> = prop1.iter().copied().collect();
        tops.sort_unstable();
        tops.iter()
            .flat_map(|&t| tree.children(t).iter().copied())
            .collect()
    };

    let mut tuples: Vec<(f64, f64)> = observations.iter().map(|o| (o.p1, o.p2)).collect();
    tuples.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    tuples.dedup();

    let layout = DesignLayout {
        rows: m,
        source_cols: n_top + child_cols.len(),
        knockoff_cols: child_cols.len(),
        dummy_cols: tuples.len(),
        p_levels: tuples.iter().map(|t| t.0).collect(),
    };

    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(layout.n_cols());
    for t in 0..n_top {
        let col = observations
            .iter()
            .map(|o| {
                let (inc, exc) = feat1.values_at(o.p1);
                if o.top_mask.contains(t) {
                    inc
                } else {
                    exc
                }
            })
            .collect();
        columns.push(col);
    }
    for &child in &child_cols {
        let top = tree.parent(child);
        let col = observations
            .iter()
            .map(|o| {
                second_level_value(
                    o.top_mask.contains(top),
                    o.second_mask.contains(child),
                    o.p1,
                    o.p2,
                )
            })
            .collect();
        columns.push(col);
    }
    for &child in &child_cols {
        let top = tree.parent(child);
        let col = observations
            .iter()
            .map(|o| {
                let knockoff = o
                    .second_knockoff
                    .as_ref()
                    .expect("knockoff masks checked before stage 2");
                second_level_value(
                    o.top_mask.contains(top),
                    knockoff.contains(child),
                    o.p1,
                    o.p2,
                )
            })
            .collect();
        columns.push(col);
    }
    for &(p1, p2) in &tuples {
        let col = observations
            .iter()
            .map(|o| if o.p1 == p1 && o.p2 == p2 { 1.0 } else { 0.0 })
            .collect();
        columns.push(col);
    }

    let y = observations.iter().map(|o| o.y).collect();
    (DesignMatrix::from_columns(layout, columns, y), child_cols)
}

/// Two-stage estimate: stage-one selection over tops, then second-level
/// selection within the selected tops, reusing the same observations.
/// An empty stage one skips stage two and returns an empty second selection.
pub fn two_stage_estimate(
    observations: &[HierObservation],
    tree: &SourceTree,
    p1_dist: &PDistribution,
    q: f64,
    lambda_rule: LambdaRule,
    cv_folds: usize,
    cv_seed: u64,
) -> Result<TwoStageResult, HierarchyError> {
    for (row, obs) in observations.iter().enumerate() {
        if obs.top_mask.len() != tree.n_top() || obs.second_mask.len() != tree.n_second() {
            return Err(HierarchyError::Shape { row });
        }
        if !obs.check_containment(tree) {
            return Err(HierarchyError::Containment { row });
        }
    }

    let stage1 = stage1_select(observations, p1_dist, q, lambda_rule, cv_folds, cv_seed)?;
    let prop1: HashSet<usize> = stage1.selected.iter().map(|s| s.index()).collect();
    if prop1.is_empty() {
        return Ok(TwoStageResult {
            stage2: Selection::empty(tree.n_second(), q),
            stage1,
        });
    }

    let feat1 = Featurization::new(FeatScheme::InverseP, p1_dist.clone())?;
    let (design, child_cols) = build_stage2_design(observations, tree, &prop1, &feat1);
    let penalized = design.default_penalty();
    let lambda = match lambda_rule {
        LambdaRule::Fixed(v) => v,
        rule => lasso::cross_validate(&design, cv_folds, cv_seed)?.lambda_for(rule),
    };
    let fit = lasso::fit(&design, lambda, &penalized)?;

    // One-sided W per second-level source; children outside stage-one tops
    // have no column and keep W = 0.
    let n_top = tree.n_top();
    let mut w = vec![0.0f64; tree.n_second()];
    for (slot, &child) in child_cols.iter().enumerate() {
        let beta = fit.beta[n_top + slot];
        let beta_k = fit.beta[n_top + child_cols.len() + slot];
        w[child] = beta.max(0.0) - beta_k.max(0.0);
    }
    let tau = knockoff_threshold(&w, q);
    let stage2 = Selection {
        selected: selected_at(&w, tau),
        w,
        tau,
        q,
    };
    Ok(TwoStageResult { stage1, stage2 })
}

// -- persistence ---------------------------------------------------------------

/// Header line of a hierarchical observation file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierHeader {
    pub n_top: usize,
    pub n_second: usize,
    pub p1_spec: PDistribution,
    pub p2_spec: PDistribution,
    pub seed: u64,
}

/// Write header plus one record per observation (same JSONL envelope as the
/// flat store, with both masks and both probabilities).
pub fn write_hier_store(
    path: &Path,
    header: &HierHeader,
    observations: &[HierObservation],
) -> Result<(), HierarchyError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut out, header)
        .map_err(|e| HierarchyError::MalformedRecord(e.to_string()))?;
    out.write_all(b"\n")?;
    for obs in observations {
        let record = RecordJson {
            mask_hex: obs.second_mask.to_hex(),
            p: None,
            p1: Some(obs.p1),
            p2: Some(obs.p2),
            y: obs.y,
            knockoff_mask_hex: obs.second_knockoff.as_ref().map(|m| m.to_hex()),
            top_mask_hex: Some(obs.top_mask.to_hex()),
            top_knockoff_hex: obs.top_knockoff.as_ref().map(|m| m.to_hex()),
            query_id: None,
        };
        serde_json::to_writer(&mut out, &record)
            .map_err(|e| HierarchyError::MalformedRecord(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Read a hierarchical store, validating the containment invariant of every
/// record against the tree.
pub fn read_hier_store(
    path: &Path,
    tree: &SourceTree,
) -> Result<(HierHeader, Vec<HierObservation>), HierarchyError> {
    let file = std::fs::File::open(path)?;
    let mut reader = BufReader::new(file);
    let mut first = String::new();
    reader.read_line(&mut first)?;
    let header: HierHeader = serde_json::from_str(first.trim_end())
        .map_err(|e| HierarchyError::MalformedRecord(format!("bad header: {e}")))?;

    let mut observations = Vec::new();
    for (row, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: RecordJson = serde_json::from_str(&line)
            .map_err(|e| HierarchyError::MalformedRecord(e.to_string()))?;
        let bad = |what: &str| HierarchyError::MalformedRecord(format!("row {row}: {what}"));
        let p1 = record.p1.ok_or_else(|| bad("missing p1"))?;
        let p2 = record.p2.ok_or_else(|| bad("missing p2"))?;
        let second_mask = SubsetMask::from_hex(header.n_second, &record.mask_hex)
            .map_err(|e| bad(&e.to_string()))?;
        let top_hex = record.top_mask_hex.ok_or_else(|| bad("missing top mask"))?;
        let top_mask =
            SubsetMask::from_hex(header.n_top, &top_hex).map_err(|e| bad(&e.to_string()))?;
        let second_knockoff = record
            .knockoff_mask_hex
            .as_deref()
            .map(|h| SubsetMask::from_hex(header.n_second, h))
            .transpose()
            .map_err(|e| bad(&e.to_string()))?;
        let top_knockoff = record
            .top_knockoff_hex
            .as_deref()
            .map(|h| SubsetMask::from_hex(header.n_top, h))
            .transpose()
            .map_err(|e| bad(&e.to_string()))?;
        let obs = HierObservation {
            top_mask,
            second_mask,
            p1,
            p2,
            y: record.y,
            top_knockoff,
            second_knockoff,
        };
        if !obs.check_containment(tree) {
            return Err(HierarchyError::Containment { row });
        }
        observations.push(obs);
    }
    Ok((header, observations))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid(values: &[f64]) -> PDistribution {
        PDistribution::grid(values)
    }

    #[test]
    fn tree_validation() {
        assert!(SourceTree::new(vec![vec![0, 1], vec![2]]).is_ok());
        // child under two tops
        assert!(SourceTree::new(vec![vec![0, 1], vec![1, 2]]).is_err());
        // gap in coverage
        assert!(SourceTree::new(vec![vec![0, 2]]).is_err());
        let tree = SourceTree::balanced(3, 4);
        assert_eq!(tree.n_top(), 3);
        assert_eq!(tree.n_second(), 12);
        assert_eq!(tree.parent(7), 1);
    }

    #[test]
    fn tree_json_round_trip() {
        let tree = SourceTree::balanced(2, 3);
        let json = serde_json::to_string(&tree).unwrap();
        assert!(json.contains("children"));
        let back: SourceTree = serde_json::from_str(&json).unwrap();
        assert_eq!(back, tree);
        assert!(serde_json::from_str::<SourceTree>(r#"{"children":[[0,0]]}"#).is_err());
    }

    #[test]
    fn degenerate_probabilities_fill_everything() {
        let tree = SourceTree::balanced(5, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, _, top, second) = sample_hier(
            &tree,
            &grid(&[0.9999999]),
            &grid(&[0.9999999]),
            &mut rng,
        );
        assert_eq!(top.count(), 5);
        assert_eq!(second.count(), 20);
    }

    #[test]
    fn containment_holds_on_every_draw() {
        let tree = SourceTree::balanced(20, 5);
        let sampler = SubsetSampler::new(9);
        let rows = sample_hier_rows(
            &sampler,
            &tree,
            &grid(&[0.3, 0.6]),
            &grid(&[0.2, 0.5]),
            500,
            true,
        );
        for obs in &rows {
            assert!(obs.check_containment(&tree));
        }
    }

    #[test]
    fn expected_second_level_size() {
        // E|S2| = N2 * E[p1] * E[p2]; with p1 = p2 = 0.5 and N2 = 1000 that
        // is 250.
        let tree = SourceTree::balanced(100, 10);
        let sampler = SubsetSampler::new(13);
        let rows = sample_hier_rows(&sampler, &tree, &grid(&[0.5]), &grid(&[0.5]), 1000, false);
        let mean =
            rows.iter().map(|o| o.second_mask.count() as f64).sum::<f64>() / rows.len() as f64;
        // sd of |S2| per draw is bounded by sqrt(N2)/2 * something small;
        // empirical sd over 1000 draws keeps 3 sigma well under 5.
        let var = rows
            .iter()
            .map(|o| (o.second_mask.count() as f64 - mean).powi(2))
            .sum::<f64>()
            / rows.len() as f64;
        let se = (var / rows.len() as f64).sqrt();
        assert!((mean - 250.0).abs() < 3.0 * se, "mean {mean}, se {se}");
    }

    #[test]
    fn second_level_featurization_cases() {
        // p1 = 0.5, p2 = 0.2, parent included, child included.
        assert!((second_level_value(true, true, 0.5, 0.2) - 10.0).abs() < 1e-12);
        // parent included, child excluded: -1/(0.5 * 0.8).
        assert!((second_level_value(true, false, 0.5, 0.2) - (-2.5)).abs() < 1e-12);
        // parent excluded.
        assert_eq!(second_level_value(false, true, 0.5, 0.2), 0.0);
    }

    #[test]
    fn featurize_second_level_masks_non_proponents() {
        let tree = SourceTree::balanced(3, 2);
        let obs = HierObservation {
            top_mask: SubsetMask::from_indices(3, &[0, 1]).unwrap(),
            second_mask: SubsetMask::from_indices(6, &[0, 3]).unwrap(),
            p1: 0.5,
            p2: 0.2,
            y: 0.5,
            top_knockoff: None,
            second_knockoff: None,
        };
        let prop1: HashSet<usize> = [0].into_iter().collect();
        let x = featurize_second_level(&obs, &prop1, &tree);
        assert!((x[0] - 10.0).abs() < 1e-12);
        assert!((x[1] - (-2.5)).abs() < 1e-12);
        // children of top 1 and 2: not proponents, zero columns
        assert_eq!(&x[2..], &[0.0; 4]);
    }

    #[test]
    fn conditional_mean_is_zero_given_parent_state() {
        let tree = SourceTree::balanced(10, 6);
        let sampler = SubsetSampler::new(31);
        let rows = sample_hier_rows(&sampler, &tree, &grid(&[0.5]), &grid(&[0.25]), 10_000, false);
        let child = 17;
        let top = tree.parent(child);
        let vals: Vec<f64> = rows
            .iter()
            .filter(|o| o.top_mask.contains(top))
            .map(|o| second_level_value(true, o.second_mask.contains(child), o.p1, o.p2))
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        let se = (var / vals.len() as f64).sqrt();
        assert!(mean.abs() < 3.0 * se, "conditional mean {mean}, se {se}");
    }

    /// Utility linear in the number of poisoned children included.
    fn poison_utility(obs: &mut HierObservation, poisoned: &[usize]) {
        let hit = poisoned
            .iter()
            .filter(|&&c| obs.second_mask.contains(c))
            .count();
        obs.y = hit as f64 / poisoned.len() as f64;
    }

    #[test]
    fn two_stage_finds_poisoned_tops_and_children() {
        let tree = SourceTree::balanced(40, 5);
        // Tops 0 and 1 poisoned through children {0,1,2} and {5,6}.
        let poisoned: Vec<usize> = vec![0, 1, 2, 5, 6];
        let sampler = SubsetSampler::new(77);
        let mut rows = sample_hier_rows(
            &sampler,
            &tree,
            &grid(&[0.3, 0.5, 0.7]),
            &grid(&[0.3, 0.6]),
            800,
            true,
        );
        for obs in rows.iter_mut() {
            poison_utility(obs, &poisoned);
        }
        let result = two_stage_estimate(
            &rows,
            &tree,
            &grid(&[0.3, 0.5, 0.7]),
            0.2,
            LambdaRule::OneSe,
            5,
            1,
        )
        .unwrap();
        assert!(result.stage1.contains(0), "stage1 {:?}", result.stage1.selected);
        assert!(result.stage1.contains(1));
        // Stage-2 selections stay inside the poisoned children.
        assert!(!result.stage2.selected.is_empty());
        for s in &result.stage2.selected {
            assert!(poisoned.contains(&s.index()), "stage2 picked {s}");
        }
    }

    #[test]
    fn null_hierarchy_selects_nothing_mostly() {
        let tree = SourceTree::balanced(20, 4);
        let mut empty_both = 0;
        let trials = 10;
        for seed in 0..trials {
            let sampler = SubsetSampler::new(500 + seed);
            let mut rows =
                sample_hier_rows(&sampler, &tree, &grid(&[0.4, 0.6]), &grid(&[0.5]), 300, true);
            let mut rng = ChaCha8Rng::seed_from_u64(900 + seed);
            for obs in rows.iter_mut() {
                obs.y = rng.random::<f64>();
            }
            let result = two_stage_estimate(
                &rows,
                &tree,
                &grid(&[0.4, 0.6]),
                0.2,
                LambdaRule::OneSe,
                5,
                seed,
            )
            .unwrap();
            if result.stage1.selected.is_empty() && result.stage2.selected.is_empty() {
                empty_both += 1;
            }
        }
        assert!(empty_both >= 8, "both stages empty in {empty_both}/{trials}");
    }

    #[test]
    fn single_child_tree_collapses_to_flat() {
        // One child per top: the second-level featurization reduces to the
        // p = p1 * p2 single-level coding on proponent-restricted columns.
        let tree = SourceTree::balanced(6, 1);
        let obs = HierObservation {
            top_mask: SubsetMask::from_indices(6, &[0, 2]).unwrap(),
            second_mask: SubsetMask::from_indices(6, &[0]).unwrap(),
            p1: 0.5,
            p2: 0.4,
            y: 0.5,
            top_knockoff: None,
            second_knockoff: None,
        };
        let prop1: HashSet<usize> = [0, 2].into_iter().collect();
        let x = featurize_second_level(&obs, &prop1, &tree);
        assert!((x[0] - 1.0 / (0.5 * 0.4)).abs() < 1e-12);
        assert!((x[2] - (-1.0 / (0.5 * 0.6))).abs() < 1e-12);
    }

    #[test]
    fn hier_store_round_trip_and_containment_check() {
        let tree = SourceTree::balanced(4, 3);
        let sampler = SubsetSampler::new(19);
        let rows =
            sample_hier_rows(&sampler, &tree, &grid(&[0.5]), &grid(&[0.4]), 50, true);
        let header = HierHeader {
            n_top: 4,
            n_second: 12,
            p1_spec: grid(&[0.5]),
            p2_spec: grid(&[0.4]),
            seed: 19,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hier.jsonl");
        write_hier_store(&path, &header, &rows).unwrap();
        let (back_header, back_rows) = read_hier_store(&path, &tree).unwrap();
        assert_eq!(back_header, header);
        assert_eq!(back_rows, rows);

        // Corrupt a record: child included while its top is excluded.
        let mut bad = rows[0].clone();
        bad.top_mask = SubsetMask::empty(4);
        bad.second_mask = SubsetMask::from_indices(12, &[0]).unwrap();
        bad.second_knockoff = None;
        bad.top_knockoff = None;
        write_hier_store(&path, &header, &[bad]).unwrap();
        assert!(matches!(
            read_hier_store(&path, &tree),
            Err(HierarchyError::Containment { row: 0 })
        ));
    }
}
