//! Machine-readable run reports: results.json, summary.csv, curves.csv.
//!
//! Reports contain no timing or host fields, so a fixed config yields
//! byte-identical files run to run.

use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};

use ame_core::ExperimentConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub trial: usize,
    pub m: usize,
    pub selected: Vec<usize>,
    /// Skipped (None) when nothing was selected, to avoid an upward bias.
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    /// L2 error of the rescaled estimate against ground truth, when known.
    pub l2_error: Option<f64>,
    pub lambda: f64,
    /// None encodes an infinite threshold (empty selection).
    pub tau: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    /// Trials that selected at least one source.
    pub trials_with_selection: usize,
    pub mean_precision: Option<f64>,
    pub se_precision: Option<f64>,
    pub mean_recall: Option<f64>,
    pub se_recall: Option<f64>,
    pub mean_l2: Option<f64>,
    pub se_l2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub m: usize,
    pub median_l2: Option<f64>,
    pub mean_l2: Option<f64>,
    pub mean_recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub trials: Vec<TrialReport>,
    pub aggregate: Aggregate,
    /// Error versus budget, ascending in m.
    pub curves: Vec<CurvePoint>,
}

fn mean_se(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (Some(mean), None);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (Some(mean), Some((var / n).sqrt()))
}

fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

impl RunReport {
    pub fn assemble(config: ExperimentConfig, trials: Vec<TrialReport>) -> Self {
        let precisions: Vec<f64> = trials.iter().filter_map(|t| t.precision).collect();
        let recalls: Vec<f64> = trials.iter().filter_map(|t| t.recall).collect();
        let l2s: Vec<f64> = trials.iter().filter_map(|t| t.l2_error).collect();
        let (mean_precision, se_precision) = mean_se(&precisions);
        let (mean_recall, se_recall) = mean_se(&recalls);
        let (mean_l2, se_l2) = mean_se(&l2s);
        let aggregate = Aggregate {
            trials_with_selection: trials.iter().filter(|t| !t.selected.is_empty()).count(),
            mean_precision,
            se_precision,
            mean_recall,
            se_recall,
            mean_l2,
            se_l2,
        };

        let mut budgets: Vec<usize> = trials.iter().map(|t| t.m).collect();
        budgets.sort_unstable();
        budgets.dedup();
        let curves = budgets
            .into_iter()
            .map(|m| {
                let l2s: Vec<f64> =
                    trials.iter().filter(|t| t.m == m).filter_map(|t| t.l2_error).collect();
                let recalls: Vec<f64> =
                    trials.iter().filter(|t| t.m == m).filter_map(|t| t.recall).collect();
                CurvePoint {
                    m,
                    median_l2: median(&l2s),
                    mean_l2: mean_se(&l2s).0,
                    mean_recall: mean_se(&recalls).0,
                }
            })
            .collect();

        RunReport {
            config,
            trials,
            aggregate,
            curves,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> anyhow::Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Fixed schema: trial,precision,recall,l2_error,lambda,tau.
    /// Missing values are empty cells.
    pub fn summary_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from("trial,precision,recall,l2_error,lambda,tau\n");
        for t in &self.trials {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                t.trial,
                cell(t.precision),
                cell(t.recall),
                cell(t.l2_error),
                t.lambda,
                cell(t.tau),
            ));
        }
        out
    }

    /// Budget-vs-error curve, rows ascending in m.
    pub fn curves_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from("m,median_l2,mean_l2,mean_recall\n");
        for c in &self.curves {
            out.push_str(&format!(
                "{},{},{},{}\n",
                c.m,
                cell(c.median_l2),
                cell(c.mean_l2),
                cell(c.mean_recall),
            ));
        }
        out
    }
}

/// Write results.json, summary.csv, and curves.csv under `dir`.
pub fn emit_reports(report: &RunReport, dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("creating output directory {}", dir.display()))?;
    std::fs::write(dir.join("results.json"), report.to_json())?;
    std::fs::write(dir.join("summary.csv"), report.summary_csv())?;
    std::fs::write(dir.join("curves.csv"), report.curves_csv())?;
    Ok(())
}
