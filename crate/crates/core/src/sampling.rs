//! Subset sampling and featurized design construction.
//!
//! Each design row is generated from an inclusion probability p drawn from
//! the configured law, then one Bernoulli(p) draw per source. Featurization
//! encodes inclusion so that every column has zero conditional mean given p
//! and unit variance under the sampling law:
//!
//! * inverse-p: X = 1/(sqrt(v) p) in, -1/(sqrt(v)(1-p)) out; p ~ P
//! * p-feat:    X = sqrt(v)(1-p) in, -sqrt(v) p out;         p ~ W
//!
//! where v = E_{p~P}[1/(p(1-p))] and W is P reweighted by 1/(p(1-p)).
//! Under either pairing the best linear fit of utility on X recovers
//! AME/sqrt(v), which is what the estimation stage relies on.
//!
//! All randomness is counter-based: a draw is a pure function of
//! (experiment seed, row index, column index, stream tag), so any worker
//! pool produces bit-identical designs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{FeatScheme, Observation, PDistribution, SubsetMask};

#[derive(Debug, Error, PartialEq)]
pub enum SamplingError {
    #[error("normalizer v = E[1/(p(1-p))] diverges under {0:?}")]
    DivergentNormalizer(PDistribution),
    #[error("pass the base law, not the reweighted law, to Featurization")]
    ReweightedBase,
    #[error("observation {row} has {found} sources, expected {expected}")]
    InconsistentN {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("observation {row} carries p={p} which is not a declared grid level")]
    UnknownPLevel { row: usize, p: f64 },
    #[error("observation {row} lacks a knockoff mask but knockoff columns were requested")]
    MissingKnockoffMask { row: usize },
    #[error("no observations")]
    Empty,
}

// -- counter-based randomness -------------------------------------------------

const TAG_MASK: u64 = 0x01;
const TAG_KNOCKOFF: u64 = 0x02;
const TAG_P: u64 = 0x03;
const TAG_NOISE: u64 = 0x04;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn counter_key(seed: u64, row: u64, col: u64, tag: u64) -> u64 {
    mix64(seed ^ mix64(row ^ mix64(col ^ tag.rotate_left(56))))
}

fn unit_f64(bits: u64) -> f64 {
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Deterministic per-experiment sampler. Row draws never depend on worker
/// scheduling or call order.
#[derive(Debug, Clone, Copy)]
pub struct SubsetSampler {
    seed: u64,
}

impl SubsetSampler {
    pub fn new(seed: u64) -> Self {
        SubsetSampler { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// RNG stream for a row's p draw (and any rejection loops inside it).
    fn p_rng(&self, row: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(counter_key(self.seed, row, 0, TAG_P))
    }

    /// RNG stream handed to noisy oracles for this row.
    pub fn noise_rng(&self, row: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(counter_key(self.seed, row, 0, TAG_NOISE))
    }

    pub fn p_for_row(&self, dist: &PDistribution, row: u64) -> f64 {
        draw_p(dist, &mut self.p_rng(row))
    }

    fn bernoulli(&self, row: u64, col: u64, tag: u64, p: f64) -> bool {
        unit_f64(counter_key(self.seed, row, col, tag)) < p
    }

    /// Source mask for a row: each source included independently with
    /// probability p.
    pub fn mask_for_row(&self, row: u64, n_sources: usize, p: f64) -> SubsetMask {
        let mut mask = SubsetMask::empty(n_sources);
        for col in 0..n_sources {
            if self.bernoulli(row, col as u64, TAG_MASK, p) {
                mask.insert(col);
            }
        }
        mask
    }

    /// Knockoff mask: an independent draw from the same Bernoulli(p) law.
    pub fn knockoff_for_row(&self, row: u64, n_sources: usize, p: f64) -> SubsetMask {
        let mut mask = SubsetMask::empty(n_sources);
        for col in 0..n_sources {
            if self.bernoulli(row, col as u64, TAG_KNOCKOFF, p) {
                mask.insert(col);
            }
        }
        mask
    }

    /// Counter-keyed Bernoulli draw on a caller-chosen stream (streams below
    /// 16 are reserved for the flat pipeline).
    pub fn stream_bernoulli(&self, stream: u64, row: u64, col: u64, p: f64) -> bool {
        self.bernoulli(row, col, stream, p)
    }

    /// Seeded RNG on a caller-chosen stream, for per-row draws that need a
    /// full generator.
    pub fn stream_rng(&self, stream: u64, row: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(counter_key(self.seed, row, 0, stream))
    }
}

/// One inclusion probability from the law. For reweighted grids, level r is
/// chosen with probability proportional to 1/(p_r(1-p_r)).
pub fn draw_p<R: Rng + ?Sized>(dist: &PDistribution, rng: &mut R) -> f64 {
    match dist {
        PDistribution::DiscreteGrid { values } => values[rng.random_range(0..values.len())],
        PDistribution::TruncatedUniform { epsilon } => {
            epsilon + rng.random::<f64>() * (1.0 - 2.0 * epsilon)
        }
        PDistribution::Beta { alpha, beta } => {
            let dist = rand_distr::Beta::new(*alpha, *beta).expect("validated upstream");
            dist.sample(rng)
        }
        PDistribution::ReweightedW { base } => match &**base {
            PDistribution::DiscreteGrid { values } => {
                let weights: Vec<f64> = values.iter().map(|p| 1.0 / (p * (1.0 - p))).collect();
                let total: f64 = weights.iter().sum();
                let mut u = rng.random::<f64>() * total;
                for (p, w) in values.iter().zip(&weights) {
                    if u < *w {
                        return *p;
                    }
                    u -= w;
                }
                *values.last().expect("non-empty grid")
            }
            PDistribution::TruncatedUniform { epsilon } => {
                // Density proportional to 1/(p(1-p)) on (eps, 1-eps) is
                // uniform in logit space.
                let lo = (epsilon / (1.0 - epsilon)).ln();
                let hi = ((1.0 - epsilon) / epsilon).ln();
                let t = lo + rng.random::<f64>() * (hi - lo);
                1.0 / (1.0 + (-t).exp())
            }
            PDistribution::Beta { alpha, beta } => {
                // Beta(a,b) reweighted by 1/(p(1-p)) is Beta(a-1, b-1).
                let dist =
                    rand_distr::Beta::new(alpha - 1.0, beta - 1.0).expect("validated upstream");
                dist.sample(rng)
            }
            PDistribution::ReweightedW { .. } => unreachable!("validated upstream"),
        },
    }
}

/// Bernoulli(p) inclusion draw for every source.
pub fn sample_subset<R: Rng + ?Sized>(n_sources: usize, p: f64, rng: &mut R) -> SubsetMask {
    let mut mask = SubsetMask::empty(n_sources);
    for i in 0..n_sources {
        if rng.random::<f64>() < p {
            mask.insert(i);
        }
    }
    mask
}

// -- featurization ------------------------------------------------------------

/// Featurization scheme bound to its base p law, with the normalizer v
/// precomputed in closed form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Featurization {
    pub scheme: FeatScheme,
    pub v: f64,
    /// The base law P the AME is defined under (never the reweighted law).
    pub dist: PDistribution,
}

/// E[1/(p(1-p))] under the base law, in closed form. Errors when the
/// expectation diverges (e.g. Beta with a shape parameter at or below 1).
pub fn normalizer_v(dist: &PDistribution) -> Result<f64, SamplingError> {
    match dist {
        PDistribution::DiscreteGrid { values } => {
            let sum: f64 = values.iter().map(|p| 1.0 / (p * (1.0 - p))).sum();
            Ok(sum / values.len() as f64)
        }
        PDistribution::TruncatedUniform { epsilon } => {
            Ok(2.0 * ((1.0 - epsilon) / epsilon).ln() / (1.0 - 2.0 * epsilon))
        }
        PDistribution::Beta { alpha, beta } => {
            if *alpha > 1.0 && *beta > 1.0 {
                Ok((alpha + beta - 2.0) * (alpha + beta - 1.0) / ((alpha - 1.0) * (beta - 1.0)))
            } else {
                Err(SamplingError::DivergentNormalizer(dist.clone()))
            }
        }
        PDistribution::ReweightedW { .. } => Err(SamplingError::ReweightedBase),
    }
}

impl Featurization {
    pub fn new(scheme: FeatScheme, dist: PDistribution) -> Result<Self, SamplingError> {
        if matches!(dist, PDistribution::ReweightedW { .. }) {
            return Err(SamplingError::ReweightedBase);
        }
        let v = normalizer_v(&dist)?;
        Ok(Featurization { scheme, v, dist })
    }

    /// The law p is drawn from during sampling: the base law for inverse-p,
    /// the reweighted law for p-featurization.
    pub fn sampling_dist(&self) -> PDistribution {
        match self.scheme {
            FeatScheme::InverseP => self.dist.clone(),
            FeatScheme::PFeat => PDistribution::reweighted(self.dist.clone()),
        }
    }

    /// Featurized values (included, excluded) for a row with inclusion
    /// probability p. p * in + (1-p) * out = 0 exactly for every p.
    pub fn values_at(&self, p: f64) -> (f64, f64) {
        let sqrt_v = self.v.sqrt();
        match self.scheme {
            FeatScheme::InverseP => (1.0 / (sqrt_v * p), -1.0 / (sqrt_v * (1.0 - p))),
            FeatScheme::PFeat => (sqrt_v * (1.0 - p), -sqrt_v * p),
        }
    }
}

/// Featurized row over the source columns.
pub fn featurize_row(mask: &SubsetMask, p: f64, feat: &Featurization) -> Vec<f64> {
    let (inc, exc) = feat.values_at(p);
    (0..mask.len())
        .map(|i| if mask.contains(i) { inc } else { exc })
        .collect()
}

// -- design matrix ------------------------------------------------------------

/// Column layout of a built design: sources first, then knockoffs, then
/// p-level dummies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignLayout {
    pub rows: usize,
    pub source_cols: usize,
    pub knockoff_cols: usize,
    pub dummy_cols: usize,
    /// The p level encoded by each dummy column, ascending.
    pub p_levels: Vec<f64>,
}

impl DesignLayout {
    pub fn n_cols(&self) -> usize {
        self.source_cols + self.knockoff_cols + self.dummy_cols
    }

    pub fn source_range(&self) -> std::ops::Range<usize> {
        0..self.source_cols
    }

    pub fn knockoff_range(&self) -> std::ops::Range<usize> {
        self.source_cols..self.source_cols + self.knockoff_cols
    }

    pub fn dummy_range(&self) -> std::ops::Range<usize> {
        self.source_cols + self.knockoff_cols..self.n_cols()
    }
}

/// Dense featurized design, stored column-major for the coordinate-descent
/// solver. Dummy columns are unpenalized by default; everything else is.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub layout: DesignLayout,
    values: Vec<f64>,
    pub y: Vec<f64>,
    /// Stable identity of each row (fold assignment keys off this, so
    /// reordering rows does not reshuffle folds).
    pub row_ids: Vec<u64>,
}

impl DesignMatrix {
    /// Assemble a design from explicit columns. Used by the hierarchical
    /// stage-two builder and by tests; `build_design` is the flat-pipeline
    /// path.
    pub fn from_columns(layout: DesignLayout, columns: Vec<Vec<f64>>, y: Vec<f64>) -> Self {
        assert_eq!(columns.len(), layout.n_cols());
        assert_eq!(y.len(), layout.rows);
        let m = layout.rows;
        let mut values = Vec::with_capacity(m * columns.len());
        for col in &columns {
            assert_eq!(col.len(), m);
            values.extend_from_slice(col);
        }
        let row_ids = (0..m as u64).collect();
        DesignMatrix {
            layout,
            values,
            y,
            row_ids,
        }
    }

    pub fn rows(&self) -> usize {
        self.layout.rows
    }

    pub fn n_cols(&self) -> usize {
        self.layout.n_cols()
    }

    pub fn col(&self, j: usize) -> &[f64] {
        let m = self.layout.rows;
        &self.values[j * m..(j + 1) * m]
    }

    pub fn value(&self, row: usize, col: usize) -> f64 {
        self.values[col * self.layout.rows + row]
    }

    /// L1 penalty mask: true for source and knockoff columns, false for
    /// dummies (they act as per-level intercepts).
    pub fn default_penalty(&self) -> Vec<bool> {
        let mut mask = vec![true; self.n_cols()];
        for j in self.layout.dummy_range() {
            mask[j] = false;
        }
        mask
    }

    /// Row-subset copy (used by cross-validation). Row ids travel with rows.
    pub fn select_rows(&self, rows: &[usize]) -> DesignMatrix {
        let m_new = rows.len();
        let cols = self.n_cols();
        let mut values = vec![0.0; m_new * cols];
        for j in 0..cols {
            let src = self.col(j);
            let dst = &mut values[j * m_new..(j + 1) * m_new];
            for (t, &r) in rows.iter().enumerate() {
                dst[t] = src[r];
            }
        }
        DesignMatrix {
            layout: DesignLayout {
                rows: m_new,
                ..self.layout.clone()
            },
            values,
            y: rows.iter().map(|&r| self.y[r]).collect(),
            row_ids: rows.iter().map(|&r| self.row_ids[r]).collect(),
        }
    }

    /// Reorder rows in place by a permutation (new row t = old row perm[t]).
    pub fn permute_rows(&self, perm: &[usize]) -> DesignMatrix {
        self.select_rows(perm)
    }

    /// Prediction X * beta.
    pub fn predict(&self, beta: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows()];
        for (j, &b) in beta.iter().enumerate() {
            if b != 0.0 {
                for (o, x) in out.iter_mut().zip(self.col(j)) {
                    *o += b * x;
                }
            }
        }
        out
    }

    /// CSV dump for debugging: header x0..,k0..,d0..,y then one row per line.
    pub fn to_csv(&self) -> String {
        let mut header: Vec<String> = Vec::new();
        for j in 0..self.layout.source_cols {
            header.push(format!("x{j}"));
        }
        for j in 0..self.layout.knockoff_cols {
            header.push(format!("k{j}"));
        }
        for j in 0..self.layout.dummy_cols {
            header.push(format!("d{j}"));
        }
        header.push("y".into());
        let mut out = header.join(",");
        out.push('\n');
        for r in 0..self.rows() {
            for j in 0..self.n_cols() {
                out.push_str(&format!("{},", self.value(r, j)));
            }
            out.push_str(&format!("{}\n", self.y[r]));
        }
        out
    }
}

/// Assemble the featurized design from observations.
///
/// Source columns come from each observation's mask, knockoff columns (when
/// requested) from its knockoff mask featurized identically, and dummy
/// columns one-hot encode the row's p level. For grid-based laws the dummy
/// basis is the declared grid and a p outside it is an error; otherwise the
/// basis is the observed distinct values.
pub fn build_design(
    observations: &[Observation],
    feat: &Featurization,
    with_knockoffs: bool,
    with_dummies: bool,
) -> Result<DesignMatrix, SamplingError> {
    let first = observations.first().ok_or(SamplingError::Empty)?;
    let n = first.n_sources();
    let m = observations.len();

    for (row, obs) in observations.iter().enumerate() {
        if obs.n_sources() != n {
            return Err(SamplingError::InconsistentN {
                row,
                expected: n,
                found: obs.n_sources(),
            });
        }
        if with_knockoffs && obs.knockoff_mask.is_none() {
            return Err(SamplingError::MissingKnockoffMask { row });
        }
    }

    let p_levels: Vec<f64> = if with_dummies {
        if let Some(grid) = feat.dist.grid_values() {
            for (row, obs) in observations.iter().enumerate() {
                if !grid.contains(&obs.p) {
                    return Err(SamplingError::UnknownPLevel { row, p: obs.p });
                }
            }
            grid.to_vec()
        } else {
            let mut seen: Vec<f64> = observations.iter().map(|o| o.p).collect();
            seen.sort_by(f64::total_cmp);
            seen.dedup();
            seen
        }
    } else {
        Vec::new()
    };

    let layout = DesignLayout {
        rows: m,
        source_cols: n,
        knockoff_cols: if with_knockoffs { n } else { 0 },
        dummy_cols: p_levels.len(),
        p_levels: p_levels.clone(),
    };
    let cols = layout.n_cols();

    // Per-row featurized value pair; every source entry takes one of these two.
    let pairs: Vec<(f64, f64)> = observations.iter().map(|o| feat.values_at(o.p)).collect();

    let mut values = vec![0.0f64; m * cols];
    values
        .par_chunks_mut(m)
        .enumerate()
        .for_each(|(j, col)| {
            if j < n {
                for (row, obs) in observations.iter().enumerate() {
                    let (inc, exc) = pairs[row];
                    col[row] = if obs.mask.contains(j) { inc } else { exc };
                }
            } else if j < n + layout.knockoff_cols {
                let source = j - n;
                for (row, obs) in observations.iter().enumerate() {
                    let (inc, exc) = pairs[row];
                    let mask = obs.knockoff_mask.as_ref().expect("checked above");
                    col[row] = if mask.contains(source) { inc } else { exc };
                }
            } else {
                let level = p_levels[j - n - layout.knockoff_cols];
                for (row, obs) in observations.iter().enumerate() {
                    col[row] = if obs.p == level { 1.0 } else { 0.0 };
                }
            }
        });

    Ok(DesignMatrix {
        layout,
        values,
        y: observations.iter().map(|o| o.y).collect(),
        row_ids: (0..m as u64).collect(),
    })
}

/// Offline-phase helper: sample M rows (p, mask, optional knockoff) without
/// evaluating utilities yet.
pub fn sample_rows(
    sampler: &SubsetSampler,
    n_sources: usize,
    m: usize,
    feat: &Featurization,
    with_knockoffs: bool,
) -> Vec<(f64, SubsetMask, Option<SubsetMask>)> {
    let dist = feat.sampling_dist();
    (0..m as u64)
        .into_par_iter()
        .map(|row| {
            let p = sampler.p_for_row(&dist, row);
            let mask = sampler.mask_for_row(row, n_sources, p);
            let knockoff = with_knockoffs.then(|| sampler.knockoff_for_row(row, n_sources, p));
            (p, mask, knockoff)
        })
        .collect()
}
