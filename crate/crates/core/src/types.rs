//! Shared domain types: source identifiers, subset masks, inclusion-probability
//! laws, and the observation/estimate records exchanged between pipeline stages.
//!
//! Everything here is immutable after construction and safe to share across
//! worker threads.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Index of a training data source within an experiment of `N` sources.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SourceId(pub usize);

impl SourceId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl std::fmt::Display for SourceId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum MaskError {
    #[error("source index {index} out of range for {len} sources")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("malformed mask hex string: {0}")]
    MalformedHex(String),
}

/// Fixed-capacity bit vector recording which sources a subset model was
/// trained on. The popcount is cached because membership tests and size
/// lookups dominate design-matrix construction.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SubsetMask {
    words: Vec<u64>,
    len: usize,
    count: usize,
}

impl SubsetMask {
    /// Empty mask over `len` sources.
    pub fn empty(len: usize) -> Self {
        SubsetMask {
            words: vec![0u64; len.div_ceil(64)],
            len,
            count: 0,
        }
    }

    /// Mask with every source included.
    pub fn full(len: usize) -> Self {
        let mut mask = Self::empty(len);
        for i in 0..len {
            mask.insert(i);
        }
        mask
    }

    pub fn from_indices(len: usize, indices: &[usize]) -> Result<Self, MaskError> {
        let mut mask = Self::empty(len);
        for &i in indices {
            if i >= len {
                return Err(MaskError::IndexOutOfRange { index: i, len });
            }
            mask.insert(i);
        }
        Ok(mask)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// Number of included sources (cached popcount).
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn contains(&self, index: usize) -> bool {
        debug_assert!(index < self.len);
        self.words[index / 64] >> (index % 64) & 1 == 1
    }

    pub fn insert(&mut self, index: usize) {
        assert!(index < self.len, "bit {index} beyond mask length {}", self.len);
        let w = &mut self.words[index / 64];
        let bit = 1u64 << (index % 64);
        if *w & bit == 0 {
            *w |= bit;
            self.count += 1;
        }
    }

    pub fn remove(&mut self, index: usize) {
        assert!(index < self.len, "bit {index} beyond mask length {}", self.len);
        let w = &mut self.words[index / 64];
        let bit = 1u64 << (index % 64);
        if *w & bit != 0 {
            *w &= !bit;
            self.count -= 1;
        }
    }

    /// Included sources below `bound`, i.e. `|S ∩ [bound]|`.
    pub fn count_below(&self, bound: usize) -> usize {
        let bound = bound.min(self.len);
        let full_words = bound / 64;
        let mut total: usize = self.words[..full_words]
            .iter()
            .map(|w| w.count_ones() as usize)
            .sum();
        let rem = bound % 64;
        if rem > 0 {
            let tail = self.words[full_words] & ((1u64 << rem) - 1);
            total += tail.count_ones() as usize;
        }
        total
    }

    /// True if every bit of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &SubsetMask) -> bool {
        self.len == other.len && self.words.iter().zip(&other.words).all(|(a, b)| a & !b == 0)
    }

    pub fn iter_ones(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len).filter(move |&i| self.contains(i))
    }

    /// Raw 64-bit words, low bits first. Bits at or above `len` are zero.
    pub fn words(&self) -> &[u64] {
        &self.words
    }

    /// Lowercase hex of the mask bytes, little-endian bit order within bytes,
    /// exactly `ceil(len/8)` bytes. The canonical wire form for store records.
    pub fn to_hex(&self) -> String {
        let n_bytes = self.len.div_ceil(8);
        let mut out = String::with_capacity(n_bytes * 2);
        for i in 0..n_bytes {
            let byte = (self.words[i / 8] >> ((i % 8) * 8)) as u8;
            out.push_str(&format!("{byte:02x}"));
        }
        out
    }

    pub fn from_hex(len: usize, hex: &str) -> Result<Self, MaskError> {
        let n_bytes = len.div_ceil(8);
        if hex.len() != n_bytes * 2 {
            return Err(MaskError::MalformedHex(format!(
                "expected {} hex chars for {len} bits, got {}",
                n_bytes * 2,
                hex.len()
            )));
        }
        let mut mask = Self::empty(len);
        for i in 0..n_bytes {
            let byte = u8::from_str_radix(&hex[i * 2..i * 2 + 2], 16)
                .map_err(|e| MaskError::MalformedHex(e.to_string()))?;
            mask.words[i / 8] |= (byte as u64) << ((i % 8) * 8);
        }
        // Reject set bits beyond len-1; they cannot come from to_hex.
        let rem = len % 64;
        let last = mask.words.len() - 1;
        if rem > 0 && mask.words[last] & !((1u64 << rem) - 1) != 0 {
            return Err(MaskError::MalformedHex(format!(
                "bits set beyond source count {len}"
            )));
        }
        mask.count = mask.words.iter().map(|w| w.count_ones() as usize).sum();
        Ok(mask)
    }

    /// Stable 64-bit fingerprint of (len, bits); cache key material.
    pub fn fingerprint(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64 ^ self.len as u64;
        for &w in &self.words {
            h ^= w;
            h = h.wrapping_mul(0x100_0000_01b3);
            h ^= h >> 29;
        }
        h
    }
}

/// Inclusion-probability law for `p`: which distribution the per-row
/// inclusion probability is drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PDistribution {
    /// Uniform over a finite, strictly increasing grid inside (0,1).
    DiscreteGrid { values: Vec<f64> },
    /// Uniform on (epsilon, 1-epsilon), 0 < epsilon < 0.5.
    TruncatedUniform { epsilon: f64 },
    /// Beta(alpha, beta), alpha > 0 and beta > 0.
    Beta { alpha: f64, beta: f64 },
    /// The base law reweighted by 1/(p(1-p)); the sampling law used by the
    /// p-featurization scheme. The base must not itself be reweighted.
    ReweightedW { base: Box<PDistribution> },
}

impl PDistribution {
    pub fn grid(values: &[f64]) -> Self {
        PDistribution::DiscreteGrid {
            values: values.to_vec(),
        }
    }

    pub fn truncated_uniform(epsilon: f64) -> Self {
        PDistribution::TruncatedUniform { epsilon }
    }

    pub fn beta(alpha: f64, beta: f64) -> Self {
        PDistribution::Beta { alpha, beta }
    }

    pub fn reweighted(base: PDistribution) -> Self {
        PDistribution::ReweightedW {
            base: Box::new(base),
        }
    }

    /// Grid values when the law (or its reweighted base) is a finite grid.
    pub fn grid_values(&self) -> Option<&[f64]> {
        match self {
            PDistribution::DiscreteGrid { values } => Some(values),
            PDistribution::ReweightedW { base } => base.grid_values(),
            _ => None,
        }
    }

    /// Validation used by `validate_experiment`; pushes one entry per violation.
    pub fn check(&self, errors: &mut Vec<ConfigError>) {
        match self {
            PDistribution::DiscreteGrid { values } => {
                if values.is_empty() {
                    errors.push(ConfigError::InvalidGrid("grid is empty".into()));
                }
                for &v in values {
                    if !(v > 0.0 && v < 1.0) || !v.is_finite() {
                        errors.push(ConfigError::InvalidGrid(format!(
                            "grid value {v} outside (0,1)"
                        )));
                    }
                }
                if values.windows(2).any(|w| w[0] >= w[1]) {
                    errors.push(ConfigError::InvalidGrid(
                        "grid values must be strictly increasing".into(),
                    ));
                }
            }
            PDistribution::TruncatedUniform { epsilon } => {
                if !(*epsilon > 0.0 && *epsilon < 0.5) {
                    errors.push(ConfigError::InvalidEpsilon(*epsilon));
                }
            }
            PDistribution::Beta { alpha, beta } => {
                if !(*alpha > 0.0) || !(*beta > 0.0) || !alpha.is_finite() || !beta.is_finite() {
                    errors.push(ConfigError::InvalidBetaParams {
                        alpha: *alpha,
                        beta: *beta,
                    });
                }
            }
            PDistribution::ReweightedW { base } => {
                if matches!(**base, PDistribution::ReweightedW { .. }) {
                    errors.push(ConfigError::NestedReweighting);
                } else {
                    base.check(errors);
                }
                // The reweighted law is only normalizable when E[1/(p(1-p))]
                // is finite under the base.
                if let PDistribution::Beta { alpha, beta } = **base {
                    if alpha <= 1.0 || beta <= 1.0 {
                        errors.push(ConfigError::InvalidBetaParams { alpha, beta });
                    }
                }
            }
        }
    }

    pub fn validate(&self) -> Result<(), Vec<ConfigError>> {
        let mut errors = Vec::new();
        self.check(&mut errors);
        if errors.is_empty() {
            Ok(())
        } else {
            Err(errors)
        }
    }
}

/// Featurization scheme for encoding source inclusion into design columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatScheme {
    /// X = 1/(sqrt(v) p) when included, -1/(sqrt(v)(1-p)) otherwise; p drawn
    /// from the base law.
    InverseP,
    /// X = sqrt(v)(1-p) when included, -sqrt(v) p otherwise; p drawn from the
    /// reweighted law W. Bounded features, so it tolerates p laws that
    /// concentrate near 0 or 1.
    PFeat,
}

impl std::fmt::Display for FeatScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FeatScheme::InverseP => write!(f, "inverse_p"),
            FeatScheme::PFeat => write!(f, "p_feat"),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ObservationError {
    #[error("utility {0} outside [0,1]")]
    UtilityOutOfRange(f64),
    #[error("inclusion probability {0} outside (0,1)")]
    ProbabilityOutOfRange(f64),
    #[error("knockoff mask length {knockoff} does not match mask length {mask}")]
    KnockoffLengthMismatch { mask: usize, knockoff: usize },
}

/// One (subset, p, utility) sample: the unit of estimation.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub mask: SubsetMask,
    pub p: f64,
    pub y: f64,
    /// Independent Bernoulli(p) draw over the same sources, recorded when the
    /// run will feed knockoff selection.
    pub knockoff_mask: Option<SubsetMask>,
}

impl Observation {
    pub fn new(mask: SubsetMask, p: f64, y: f64) -> Result<Self, ObservationError> {
        Self::with_knockoff(mask, p, y, None)
    }

    pub fn with_knockoff(
        mask: SubsetMask,
        p: f64,
        y: f64,
        knockoff_mask: Option<SubsetMask>,
    ) -> Result<Self, ObservationError> {
        if !(0.0..=1.0).contains(&y) || !y.is_finite() {
            return Err(ObservationError::UtilityOutOfRange(y));
        }
        if !(p > 0.0 && p < 1.0) {
            return Err(ObservationError::ProbabilityOutOfRange(p));
        }
        if let Some(k) = &knockoff_mask {
            if k.len() != mask.len() {
                return Err(ObservationError::KnockoffLengthMismatch {
                    mask: mask.len(),
                    knockoff: k.len(),
                });
            }
        }
        Ok(Observation {
            mask,
            p,
            y,
            knockoff_mask,
        })
    }

    pub fn n_sources(&self) -> usize {
        self.mask.len()
    }
}

/// Output of one estimation: the fitted coefficient blocks plus the rescaling
/// constant needed to map coefficients back to AME units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationResult {
    /// Coefficients over source columns (length N), in regression units.
    pub coefficients: Vec<f64>,
    /// Coefficients over knockoff columns when the design had them.
    pub knockoff_coefficients: Option<Vec<f64>>,
    /// Coefficients over the p-level dummy columns (length B, possibly 0).
    pub dummy_coefficients: Vec<f64>,
    /// Normalizer E[1/(p(1-p))] under the base p law; sqrt(v) rescales
    /// coefficients to AME units.
    pub v: f64,
    pub lambda: f64,
    pub featurization: FeatScheme,
}

impl EstimationResult {
    /// AME estimates: sqrt(v) times the source-column coefficients.
    pub fn ame(&self) -> Vec<f64> {
        let s = self.v.sqrt();
        self.coefficients.iter().map(|b| s * b).collect()
    }
}

/// Violations reported by `validate_experiment`.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("invalid p grid: {0}")]
    InvalidGrid(String),
    #[error("epsilon {0} outside (0, 0.5)")]
    InvalidEpsilon(f64),
    #[error("beta parameters alpha={alpha}, beta={beta} invalid for this use")]
    InvalidBetaParams { alpha: f64, beta: f64 },
    #[error("experiment declares zero sources")]
    EmptySources,
    #[error("reweighted law cannot itself wrap a reweighted law")]
    NestedReweighting,
    #[error("subset budget M must be at least 1")]
    InvalidSampleBudget,
    #[error("trials must be at least 1")]
    InvalidTrials,
    #[error("target FDR q={0} outside (0, 1]")]
    InvalidQ(f64),
}
