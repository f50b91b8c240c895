//! Black-box utility evaluation U(S) = Q(model trained on S).
//!
//! Oracles hide how a subset becomes a score: a closed-form game, a trained
//! classifier, or anything else scoring in [0,1]. The offline/online split
//! lives here too: `cached_evaluate` reuses stored utilities for (mask,
//! query) pairs the store has already seen, so re-running a query against
//! the same store performs zero fresh evaluations.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store::{ObservationStore, StoreError};
use crate::types::{Observation, SubsetMask};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("task fixture error: {0}")]
    BadFixture(String),
}

/// The model behavior being explained: an input and the class whose score we
/// read off.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub input: Vec<f64>,
    pub label: usize,
}

impl Query {
    /// Placeholder query for oracles that ignore the query entirely
    /// (synthetic games).
    pub fn none() -> Self {
        Query {
            input: Vec::new(),
            label: 0,
        }
    }

    /// Stable id used as cache-key material.
    pub fn fingerprint(&self) -> u64 {
        let mut h = 0x9e37_79b9_7f4a_7c15u64 ^ (self.label as u64);
        for &x in &self.input {
            h ^= x.to_bits();
            h = h.wrapping_mul(0x100_0000_01b3);
            h ^= h >> 31;
        }
        h
    }
}

/// A black-box utility. Implementations must be pure given (mask, query,
/// rng stream) so that evaluations can run on any worker pool.
pub trait UtilityOracle: Sync {
    fn n_sources(&self) -> usize;

    /// Utility in [0,1] of the model trained on `mask`, scored on `query`.
    /// `rng` is only touched by oracles that declare noise.
    fn evaluate(&self, mask: &SubsetMask, query: &Query, rng: &mut dyn RngCore) -> f64;

    /// Declared monotonicity: U(S) <= U(T) whenever S is a subset of T.
    /// Testable by enumeration for small N.
    fn is_monotone(&self) -> bool;

    /// Stable identity of this oracle (cache-key material).
    fn fingerprint(&self) -> u64;
}

// -- threshold game -------------------------------------------------------

/// Indicator game: utility 1 iff at least `threshold` of the first `k`
/// sources are included. Ground-truth Shapley values are 1/k on the first k
/// sources and 0 elsewhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdGame {
    pub n_sources: usize,
    pub k: usize,
    pub threshold: usize,
}

impl ThresholdGame {
    pub fn new(n_sources: usize, k: usize, threshold: usize) -> Self {
        assert!(k <= n_sources && threshold >= 1);
        ThresholdGame {
            n_sources,
            k,
            threshold,
        }
    }
}

pub fn evaluate_threshold_game(game: &ThresholdGame, mask: &SubsetMask) -> f64 {
    debug_assert_eq!(mask.len(), game.n_sources);
    if mask.count_below(game.k) >= game.threshold {
        1.0
    } else {
        0.0
    }
}

impl UtilityOracle for ThresholdGame {
    fn n_sources(&self) -> usize {
        self.n_sources
    }

    fn evaluate(&self, mask: &SubsetMask, _query: &Query, _rng: &mut dyn RngCore) -> f64 {
        evaluate_threshold_game(self, mask)
    }

    fn is_monotone(&self) -> bool {
        true
    }

    fn fingerprint(&self) -> u64 {
        0x7472_6553_0000_0000
            ^ (self.n_sources as u64) << 20
            ^ (self.k as u64) << 4
            ^ self.threshold as u64
    }
}

// -- random monotone coverage game ----------------------------------------

const COVER_FUNCS: usize = 3;
const GROUND_SET: usize = 32;

/// Monotone game built as a normalized max over random weighted coverage
/// functions: each source covers a random subset of a small ground set, and
/// a coalition scores the best weighted coverage it reaches.
#[derive(Debug, Clone)]
pub struct RandomMonotoneGame {
    n_sources: usize,
    /// coverage[t][source]: bitmask over the ground set.
    coverage: Vec<Vec<u64>>,
    /// weights[t][element]
    weights: Vec<Vec<f64>>,
    total: f64,
    seed: u64,
}

/// Generator for monotone-utility suites. Sources at or beyond `active`
/// cover nothing, which makes them exact null players; `active = n_sources`
/// gives a dense game.
pub fn monotone_coverage_game(n_sources: usize, active: usize, seed: u64) -> RandomMonotoneGame {
    assert!(active >= 1 && active <= n_sources);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0ffee);
    let mut coverage = Vec::with_capacity(COVER_FUNCS);
    let mut weights = Vec::with_capacity(COVER_FUNCS);
    for _ in 0..COVER_FUNCS {
        let w: Vec<f64> = (0..GROUND_SET).map(|_| rng.random_range(0.1..1.0)).collect();
        let mut cov = vec![0u64; n_sources];
        for c in cov.iter_mut().take(active) {
            for g in 0..GROUND_SET {
                if rng.random::<f64>() < 0.15 {
                    *c |= 1 << g;
                }
            }
            if *c == 0 {
                *c |= 1 << rng.random_range(0..GROUND_SET);
            }
        }
        coverage.push(cov);
        weights.push(w);
    }
    let mut game = RandomMonotoneGame {
        n_sources,
        coverage,
        weights,
        total: 1.0,
        seed,
    };
    game.total = game.raw(&SubsetMask::full(n_sources));
    debug_assert!(game.total > 0.0);
    game
}

/// A monotone game with U(empty) = 0 and U(full) = 1.
pub fn random_monotone_game(n_sources: usize, seed: u64) -> RandomMonotoneGame {
    monotone_coverage_game(n_sources, n_sources, seed)
}

impl RandomMonotoneGame {
    fn raw(&self, mask: &SubsetMask) -> f64 {
        let mut best = 0.0f64;
        for t in 0..COVER_FUNCS {
            let mut covered = 0u64;
            for s in mask.iter_ones() {
                covered |= self.coverage[t][s];
            }
            let mut score = 0.0;
            let mut bits = covered;
            while bits != 0 {
                let g = bits.trailing_zeros() as usize;
                score += self.weights[t][g];
                bits &= bits - 1;
            }
            best = best.max(score);
        }
        best
    }
}

impl UtilityOracle for RandomMonotoneGame {
    fn n_sources(&self) -> usize {
        self.n_sources
    }

    fn evaluate(&self, mask: &SubsetMask, _query: &Query, _rng: &mut dyn RngCore) -> f64 {
        self.raw(mask) / self.total
    }

    fn is_monotone(&self) -> bool {
        true
    }

    fn fingerprint(&self) -> u64 {
        0x6d6f_6e6f_0000_0000 ^ (self.n_sources as u64) << 24 ^ self.seed
    }
}

// -- poisoned linear task ---------------------------------------------------

/// Training knobs for the task's logistic regression. Full-batch gradient
/// descent with a fixed iteration budget; every evaluation trains from
/// scratch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub l2: f64,
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            l2: 0.01,
            epochs: 400,
            learning_rate: 1.0,
        }
    }
}

/// Two-class linear classification dataset of N points (one source each), of
/// which k carry a trigger offset and a flipped label. The utility of a
/// subset is the trained model's probability for the flipped label on the
/// trigger query, so subsets containing the poisons score high.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoisonedLinearTask {
    pub points: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub poison_indices: Vec<usize>,
    pub trigger_query: Query,
    pub trainer: TrainerConfig,
    pub seed: u64,
}

impl PoisonedLinearTask {
    /// Generate a task. Coordinate 0 carries the class signal (means -1 and
    /// +1), the last coordinate is a dormant trigger channel, and the middle
    /// coordinates are noise. k class-0 points get a trigger offset on the
    /// last coordinate and their label flipped to 1. The ground truth (which
    /// indices are poisoned) rides along for evaluation.
    pub fn generate(n_sources: usize, k: usize, dim: usize, seed: u64) -> Self {
        assert!(dim >= 2 && k < n_sources / 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7461736b);
        let normal = Normal::new(0.0, 0.5).unwrap();
        let trigger = 6.0;

        let mut points = Vec::with_capacity(n_sources);
        let mut labels = Vec::with_capacity(n_sources);
        for i in 0..n_sources {
            let class = i % 2;
            let mut x: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
            x[0] += if class == 0 { -1.0 } else { 1.0 };
            points.push(x);
            labels.push(class);
        }

        // Poison k class-0 points: add the trigger, flip the label.
        let mut poison_indices = Vec::with_capacity(k);
        let mut i = 0;
        while poison_indices.len() < k {
            if labels[i] == 0 {
                points[i][dim - 1] += trigger;
                labels[i] = 1;
                poison_indices.push(i);
            }
            i += 1;
        }

        // Trigger query: a fresh clean class-0 point carrying the trigger;
        // its "label" is the flipped label the attack installs.
        let mut q: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
        q[0] += -1.0;
        q[dim - 1] += trigger;

        PoisonedLinearTask {
            points,
            labels,
            poison_indices,
            trigger_query: Query { input: q, label: 1 },
            trainer: TrainerConfig::default(),
            seed,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("task serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, OracleError> {
        let task: PoisonedLinearTask =
            serde_json::from_str(s).map_err(|e| OracleError::BadFixture(e.to_string()))?;
        if task.points.len() != task.labels.len() {
            return Err(OracleError::BadFixture(
                "points/labels length mismatch".into(),
            ));
        }
        if task.poison_indices.iter().any(|&i| i >= task.points.len()) {
            return Err(OracleError::BadFixture("poison index out of range".into()));
        }
        Ok(task)
    }

    /// A subset is degenerate when it is empty or single-class; training on
    /// it falls back to the uniform prior.
    pub fn is_degenerate(&self, mask: &SubsetMask) -> bool {
        let mut seen = [false, false];
        for i in mask.iter_ones() {
            seen[self.labels[i]] = true;
        }
        !(seen[0] && seen[1])
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Train on exactly the masked points (fixed budget, deterministic) and
/// return the probability of the poison label on the trigger query.
/// Degenerate subsets return the two-class uniform prior 0.5.
pub fn evaluate_poisoned_task(task: &PoisonedLinearTask, mask: &SubsetMask) -> f64 {
    debug_assert_eq!(mask.len(), task.points.len());
    if task.is_degenerate(mask) {
        return 0.5;
    }
    let dim = task.points[0].len();
    let members: Vec<usize> = mask.iter_ones().collect();
    let m = members.len() as f64;
    let mut w = vec![0.0f64; dim];
    let mut b = 0.0f64;
    for _ in 0..task.trainer.epochs {
        let mut grad_w = vec![0.0f64; dim];
        let mut grad_b = 0.0f64;
        for &i in &members {
            let x = &task.points[i];
            let z = w.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>() + b;
            let err = sigmoid(z) - task.labels[i] as f64;
            for (g, xi) in grad_w.iter_mut().zip(x) {
                *g += err * xi;
            }
            grad_b += err;
        }
        for (wi, g) in w.iter_mut().zip(&grad_w) {
            *wi -= task.trainer.learning_rate * (g / m + task.trainer.l2 * *wi);
        }
        b -= task.trainer.learning_rate * grad_b / m;
    }
    let z = w
        .iter()
        .zip(&task.trigger_query.input)
        .map(|(wi, xi)| wi * xi)
        .sum::<f64>()
        + b;
    let p1 = sigmoid(z);
    if task.trigger_query.label == 1 {
        p1
    } else {
        1.0 - p1
    }
}

impl UtilityOracle for PoisonedLinearTask {
    fn n_sources(&self) -> usize {
        self.points.len()
    }

    fn evaluate(&self, mask: &SubsetMask, _query: &Query, _rng: &mut dyn RngCore) -> f64 {
        evaluate_poisoned_task(self, mask)
    }

    fn is_monotone(&self) -> bool {
        false
    }

    fn fingerprint(&self) -> u64 {
        let mut h = 0x706f_6973_0000_0000u64 ^ self.seed;
        h ^= (self.points.len() as u64) << 16 ^ self.poison_indices.len() as u64;
        h
    }
}

// -- noise wrapper ----------------------------------------------------------

/// Additive truncated-Gaussian noise on top of a base oracle. The paper's
/// utilities are noisy but no noise model is specified, so this is an
/// explicit opt-in knob.
pub struct NoisyOracle<O> {
    pub base: O,
    pub sigma: f64,
}

impl<O: UtilityOracle> UtilityOracle for NoisyOracle<O> {
    fn n_sources(&self) -> usize {
        self.base.n_sources()
    }

    fn evaluate(&self, mask: &SubsetMask, query: &Query, rng: &mut dyn RngCore) -> f64 {
        let clean = self.base.evaluate(mask, query, rng);
        let normal = Normal::new(0.0, self.sigma).expect("sigma > 0");
        for _ in 0..32 {
            let noisy = clean + normal.sample(rng);
            if (0.0..=1.0).contains(&noisy) {
                return noisy;
            }
        }
        clean.clamp(0.0, 1.0)
    }

    fn is_monotone(&self) -> bool {
        false
    }

    fn fingerprint(&self) -> u64 {
        self.base.fingerprint() ^ self.sigma.to_bits()
    }
}

// -- evaluation ---------------------------------------------------------------

/// A sampled row awaiting its utility.
#[derive(Debug, Clone)]
pub struct PendingEval {
    pub mask: SubsetMask,
    pub p: f64,
    pub knockoff_mask: Option<SubsetMask>,
}

/// Per-evaluation RNG stream: a pure function of (seed, mask, query), so the
/// same evaluation replayed anywhere yields the same draw.
fn eval_rng(seed: u64, mask: &SubsetMask, query_id: u64) -> ChaCha8Rng {
    let mut z = seed ^ mask.fingerprint() ^ query_id.rotate_left(17);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

/// Result of a cached evaluation pass.
pub struct CacheOutcome {
    /// One observation per input row, in input order.
    pub observations: Vec<Observation>,
    /// How many rows actually touched the oracle.
    pub fresh_evaluations: usize,
}

/// Evaluate masks against the oracle, reusing any (mask, query) utility the
/// store already holds and appending the rest.
pub fn cached_evaluate(
    store: &mut ObservationStore,
    oracle: &dyn UtilityOracle,
    pending: &[PendingEval],
    query: &Query,
) -> Result<CacheOutcome, OracleError> {
    let query_id = query.fingerprint();
    let seed = store.header().seed;
    let mut observations = Vec::with_capacity(pending.len());
    let mut fresh = 0usize;
    for row in pending {
        let y = match store.lookup(&row.mask, query_id) {
            Some(hit) => hit.y,
            None => {
                let mut rng = eval_rng(seed, &row.mask, query_id);
                let y = oracle.evaluate(&row.mask, query, &mut rng);
                fresh += 1;
                let stored = Observation::with_knockoff(
                    row.mask.clone(),
                    row.p,
                    y,
                    row.knockoff_mask.clone(),
                )
                .map_err(|e| StoreError::MalformedRecord(e.to_string()))?;
                store.append(stored, query_id)?;
                y
            }
        };
        let obs =
            Observation::with_knockoff(row.mask.clone(), row.p, y, row.knockoff_mask.clone())
                .map_err(|e| StoreError::MalformedRecord(e.to_string()))?;
        observations.push(obs);
    }
    store.flush()?;
    Ok(CacheOutcome {
        observations,
        fresh_evaluations: fresh,
    })
}

/// In-memory evaluation of sampled rows (no store). Parallel over rows,
/// merged by input index.
pub fn evaluate_rows(
    oracle: &dyn UtilityOracle,
    rows: &[(f64, SubsetMask, Option<SubsetMask>)],
    query: &Query,
    seed: u64,
) -> Vec<Observation> {
    let query_id = query.fingerprint();
    rows.par_iter()
        .map(|(p, mask, knockoff)| {
            let mut rng = eval_rng(seed, mask, query_id);
            let y = oracle.evaluate(mask, query, &mut rng);
            Observation::with_knockoff(mask.clone(), *p, y, knockoff.clone())
                .expect("oracle returned utility outside [0,1]")
        })
        .collect()
}
