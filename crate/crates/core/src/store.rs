//! Append-only observation store: the offline phase writes one JSONL record
//! per evaluated subset, behind a single header line fixing the experiment
//! shape. The online phase streams records back without re-touching the
//! oracle.
//!
//! File layout:
//!   line 1:  {"n_sources": N, "p_spec": ..., "featurization": ..., "seed": ..., "oracle_fp": ...}
//!   line 2+: {"mask_hex": ..., "p": ..., "y": ..., "knockoff_mask_hex"?: ..., "query_id"?: ...}
//!
//! Floats go through serde_json's shortest round-trip encoding, so
//! parse(serialize(x)) is bit-exact.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{FeatScheme, Observation, PDistribution, SubsetMask};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("malformed record: {0}")]
    MalformedRecord(String),
    #[error("store corrupt: {0}")]
    StoreCorrupt(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// First line of every store file; masks are length-dependent so the source
/// count must ride along.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreHeader {
    pub n_sources: usize,
    pub p_spec: PDistribution,
    pub featurization: FeatScheme,
    pub seed: u64,
    /// Fingerprint of the oracle that produced the utilities; evaluations are
    /// only reusable against the same oracle.
    #[serde(default)]
    pub oracle_fp: u64,
}

/// Wire form shared by flat and hierarchical records. Optional fields are
/// omitted when absent.
#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct RecordJson {
    pub mask_hex: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p2: Option<f64>,
    pub y: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub knockoff_mask_hex: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top_mask_hex: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top_knockoff_hex: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub query_id: Option<u64>,
}

/// One observation as a single JSONL record.
pub fn serialize_observation(obs: &Observation) -> String {
    let record = RecordJson {
        mask_hex: obs.mask.to_hex(),
        p: Some(obs.p),
        p1: None,
        p2: None,
        y: obs.y,
        knockoff_mask_hex: obs.knockoff_mask.as_ref().map(|m| m.to_hex()),
        top_mask_hex: None,
        top_knockoff_hex: None,
        query_id: None,
    };
    serde_json::to_string(&record).expect("record serialization cannot fail")
}

/// Parse one record line back into an Observation. The experiment's source
/// count comes from the store header.
pub fn parse_observation(n_sources: usize, line: &str) -> Result<Observation, StoreError> {
    let (obs, _) = parse_record(n_sources, line)?;
    Ok(obs)
}

fn parse_record(n_sources: usize, line: &str) -> Result<(Observation, Option<u64>), StoreError> {
    let record: RecordJson =
        serde_json::from_str(line).map_err(|e| StoreError::MalformedRecord(e.to_string()))?;
    let p = record
        .p
        .ok_or_else(|| StoreError::MalformedRecord("missing field p".into()))?;
    let mask = SubsetMask::from_hex(n_sources, &record.mask_hex)
        .map_err(|e| StoreError::MalformedRecord(e.to_string()))?;
    let knockoff = record
        .knockoff_mask_hex
        .as_deref()
        .map(|h| SubsetMask::from_hex(n_sources, h))
        .transpose()
        .map_err(|e| StoreError::MalformedRecord(e.to_string()))?;
    let obs = Observation::with_knockoff(mask, p, record.y, knockoff)
        .map_err(|e| StoreError::MalformedRecord(e.to_string()))?;
    Ok((obs, record.query_id))
}

/// Append-only store with an in-memory (mask, query) index for evaluation
/// reuse. Appends are serialized through one writer; readers get immutable
/// slices.
pub struct ObservationStore {
    path: PathBuf,
    header: StoreHeader,
    observations: Vec<Observation>,
    query_ids: Vec<u64>,
    index: HashMap<(u64, u64), usize>,
    writer: BufWriter<File>,
}

impl ObservationStore {
    /// Create a fresh store, truncating any existing file.
    pub fn create(path: &Path, header: StoreHeader) -> Result<Self, StoreError> {
        let file = File::create(path)?;
        let mut writer = BufWriter::new(file);
        serde_json::to_writer(&mut writer, &header)
            .map_err(|e| StoreError::StoreCorrupt(e.to_string()))?;
        writer.write_all(b"\n")?;
        writer.flush()?;
        Ok(ObservationStore {
            path: path.to_path_buf(),
            header,
            observations: Vec::new(),
            query_ids: Vec::new(),
            index: HashMap::new(),
            writer,
        })
    }

    /// Open an existing store, replaying all records into the index.
    pub fn open(path: &Path) -> Result<Self, StoreError> {
        let file = File::open(path)?;
        let mut reader = BufReader::new(file);
        let mut first = String::new();
        reader.read_line(&mut first)?;
        let header: StoreHeader = serde_json::from_str(first.trim_end())
            .map_err(|e| StoreError::StoreCorrupt(format!("bad header: {e}")))?;

        let mut observations = Vec::new();
        let mut query_ids = Vec::new();
        let mut index = HashMap::new();
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let (obs, qid) = parse_record(header.n_sources, &line)?;
            let qid = qid.unwrap_or(0);
            index.insert((obs.mask.fingerprint(), qid), observations.len());
            observations.push(obs);
            query_ids.push(qid);
        }

        let file = OpenOptions::new().append(true).open(path)?;
        Ok(ObservationStore {
            path: path.to_path_buf(),
            header,
            observations,
            query_ids,
            index: index.clone(),
            writer: BufWriter::new(file),
        })
    }

    /// Open `path` if it exists (verifying the header matches `expected`),
    /// otherwise create it. A header mismatch means the file belongs to a
    /// different experiment.
    pub fn open_or_create(path: &Path, expected: StoreHeader) -> Result<Self, StoreError> {
        if path.exists() {
            let store = Self::open(path)?;
            if store.header != expected {
                return Err(StoreError::StoreCorrupt(format!(
                    "header mismatch: store was written for a different experiment \
                     (found {:?})",
                    store.header
                )));
            }
            Ok(store)
        } else {
            Self::create(path, expected)
        }
    }

    pub fn header(&self) -> &StoreHeader {
        &self.header
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    /// Observations recorded under a given query id, in append order.
    pub fn observations_for_query(&self, query_id: u64) -> Vec<&Observation> {
        self.observations
            .iter()
            .zip(&self.query_ids)
            .filter(|(_, &q)| q == query_id)
            .map(|(o, _)| o)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    /// Cached utility for (mask, query), if this store already evaluated it.
    pub fn lookup(&self, mask: &SubsetMask, query_id: u64) -> Option<&Observation> {
        self.index
            .get(&(mask.fingerprint(), query_id))
            .map(|&i| &self.observations[i])
    }

    /// Append a fresh observation and index it under `query_id`.
    pub fn append(&mut self, obs: Observation, query_id: u64) -> Result<(), StoreError> {
        let mut record: RecordJson =
            serde_json::from_str(&serialize_observation(&obs)).expect("own record parses");
        record.query_id = Some(query_id);
        serde_json::to_writer(&mut self.writer, &record)
            .map_err(|e| StoreError::StoreCorrupt(e.to_string()))?;
        self.writer.write_all(b"\n")?;
        self.index
            .insert((obs.mask.fingerprint(), query_id), self.observations.len());
        self.observations.push(obs);
        self.query_ids.push(query_id);
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), StoreError> {
        self.writer.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn header() -> StoreHeader {
        StoreHeader {
            n_sources: 4,
            p_spec: PDistribution::grid(&[0.2, 0.4, 0.6, 0.8]),
            featurization: FeatScheme::InverseP,
            seed: 7,
            oracle_fp: 99,
        }
    }

    #[test]
    fn record_round_trips() {
        let mask = SubsetMask::from_indices(4, &[0, 2]).unwrap();
        let obs = Observation::new(mask, 0.4, 0.75).unwrap();
        let line = serialize_observation(&obs);
        let back = parse_observation(4, &line).unwrap();
        assert_eq!(back, obs);
    }

    #[test]
    fn empty_mask_round_trips() {
        let obs = Observation::new(SubsetMask::empty(4), 0.2, 0.0).unwrap();
        let back = parse_observation(4, &serialize_observation(&obs)).unwrap();
        assert_eq!(back, obs);
    }

    #[test]
    fn out_of_range_utility_is_malformed() {
        let line = r#"{"mask_hex":"05","p":0.4,"y":1.2}"#;
        assert!(matches!(
            parse_observation(4, line),
            Err(StoreError::MalformedRecord(_))
        ));
    }

    #[test]
    fn store_reopen_replays_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("obs.jsonl");
        let mask = SubsetMask::from_indices(4, &[1, 3]).unwrap();
        {
            let mut store = ObservationStore::create(&path, header()).unwrap();
            store
                .append(Observation::new(mask.clone(), 0.4, 0.5).unwrap(), 3)
                .unwrap();
            store.flush().unwrap();
        }
        let store = ObservationStore::open(&path).unwrap();
        assert_eq!(store.len(), 1);
        assert_eq!(store.header(), &header());
        assert!(store.lookup(&mask, 3).is_some());
        assert!(store.lookup(&mask, 4).is_none());
    }

    #[test]
    fn header_mismatch_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("obs.jsonl");
        ObservationStore::create(&path, header()).unwrap();
        let mut other = header();
        other.seed = 8;
        assert!(matches!(
            ObservationStore::open_or_create(&path, other),
            Err(StoreError::StoreCorrupt(_))
        ));
    }

    proptest! {
        // Round-trip identity over random masks, p, y, and optional knockoffs.
        #[test]
        fn serialization_round_trip(
            n in 1usize..200,
            bits in proptest::collection::vec(any::<bool>(), 200),
            kbits in proptest::collection::vec(any::<bool>(), 200),
            with_knockoff in any::<bool>(),
            p in 0.0001f64..0.9999,
            y in 0.0f64..=1.0,
        ) {
            let mut mask = SubsetMask::empty(n);
            for i in 0..n {
                if bits[i] { mask.insert(i); }
            }
            let knockoff = with_knockoff.then(|| {
                let mut k = SubsetMask::empty(n);
                for i in 0..n {
                    if kbits[i] { k.insert(i); }
                }
                k
            });
            let obs = Observation::with_knockoff(mask, p, y, knockoff).unwrap();
            let back = parse_observation(n, &serialize_observation(&obs)).unwrap();
            prop_assert_eq!(back, obs);
        }
    }
}
