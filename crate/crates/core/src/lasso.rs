//! L1-regularized least squares by cyclic coordinate descent, with a
//! warm-started regularization path and K-fold cross-validation.
//!
//! The objective is fixed everywhere to
//!
//!   (1/(2M)) ||y - X beta||^2 + lambda * ||beta_penalized||_1
//!
//! so lambda values are comparable across sample sizes. Columns carrying the
//! L1 penalty are chosen per design; p-level dummy columns act as per-level
//! intercepts and are never penalized. Columns are not re-standardized: the
//! featurization already produces unit-variance columns, and rescaling them
//! would silently undo the sqrt(v) calibration that maps coefficients back
//! to AME units.

use rayon::prelude::*;
use thiserror::Error;

use crate::sampling::{DesignLayout, DesignMatrix, Featurization};
use crate::types::EstimationResult;

#[derive(Debug, Error, PartialEq)]
pub enum LassoError {
    #[error("non-finite value in design or response")]
    NonFinite,
    #[error("lambda must be finite and >= 0, got {0}")]
    BadLambda(f64),
    #[error("need at least {folds} rows for {folds}-fold cross-validation, have {rows}")]
    TooFewRows { rows: usize, folds: usize },
    #[error("penalty mask length {got} does not match {want} columns")]
    PenaltyShape { got: usize, want: usize },
}

/// Solver knobs. The defaults match the documented contract: stop when no
/// coefficient moves more than `tol` in a full sweep, or after `max_sweeps`.
#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            tol: 1e-7,
            max_sweeps: 100_000,
        }
    }
}

/// A fitted coefficient vector at one lambda.
#[derive(Debug, Clone, PartialEq)]
pub struct LassoFit {
    pub beta: Vec<f64>,
    pub lambda: f64,
    pub penalized: Vec<bool>,
    /// Coordinate sweeps performed.
    pub n_iter: usize,
    pub converged: bool,
}

fn soft_threshold(z: f64, lambda: f64) -> f64 {
    if z > lambda {
        z - lambda
    } else if z < -lambda {
        z + lambda
    } else {
        0.0
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Solver<'a> {
    design: &'a DesignMatrix,
    penalized: &'a [bool],
    /// (1/M) ||X_j||^2 per column.
    col_norm: Vec<f64>,
    inv_m: f64,
    beta: Vec<f64>,
    residual: Vec<f64>,
    sweeps: usize,
}

impl<'a> Solver<'a> {
    fn new(design: &'a DesignMatrix, penalized: &'a [bool], warm: Option<&[f64]>) -> Self {
        let m = design.rows();
        let cols = design.n_cols();
        let inv_m = 1.0 / m as f64;
        let col_norm: Vec<f64> = (0..cols)
            .map(|j| dot(design.col(j), design.col(j)) * inv_m)
            .collect();
        let beta = warm.map(|b| b.to_vec()).unwrap_or_else(|| vec![0.0; cols]);
        let mut residual = design.y.clone();
        for (j, &b) in beta.iter().enumerate() {
            if b != 0.0 {
                for (r, x) in residual.iter_mut().zip(design.col(j)) {
                    *r -= b * x;
                }
            }
        }
        Solver {
            design,
            penalized,
            col_norm,
            inv_m,
            beta,
            residual,
            sweeps: 0,
        }
    }

    /// One pass over `cols`; returns the largest coefficient change.
    fn sweep(&mut self, cols: &[usize], lambda: f64) -> f64 {
        let mut max_change = 0.0f64;
        for &j in cols {
            let c = self.col_norm[j];
            if c == 0.0 {
                continue;
            }
            let x = self.design.col(j);
            let old = self.beta[j];
            let z = dot(x, &self.residual) * self.inv_m + c * old;
            let new = if self.penalized[j] {
                soft_threshold(z, lambda) / c
            } else {
                z / c
            };
            if new != old {
                let delta = new - old;
                for (r, xi) in self.residual.iter_mut().zip(x) {
                    *r -= delta * xi;
                }
                self.beta[j] = new;
                max_change = max_change.max(delta.abs());
            }
        }
        self.sweeps += 1;
        max_change
    }

    #[cfg(debug_assertions)]
    fn objective(&self, lambda: f64) -> f64 {
        let rss: f64 = self.residual.iter().map(|r| r * r).sum();
        let l1: f64 = self
            .beta
            .iter()
            .zip(self.penalized)
            .filter(|(_, &p)| p)
            .map(|(b, _)| b.abs())
            .sum();
        0.5 * self.inv_m * rss + lambda * l1
    }

    /// Full convergence loop: iterate the active set, then confirm with a
    /// full sweep; converged when a full sweep moves nothing beyond tol.
    fn run(&mut self, lambda: f64, opts: &FitOptions) -> bool {
        let all: Vec<usize> = (0..self.design.n_cols()).collect();
        #[cfg(debug_assertions)]
        let mut prev_obj = f64::INFINITY;
        loop {
            let change = self.sweep(&all, lambda);
            #[cfg(debug_assertions)]
            {
                let obj = self.objective(lambda);
                debug_assert!(
                    obj <= prev_obj + 1e-10,
                    "objective increased across sweep: {prev_obj} -> {obj}"
                );
                prev_obj = obj;
            }
            if change < opts.tol {
                return true;
            }
            if self.sweeps >= opts.max_sweeps {
                return false;
            }
            // Iterate only the working set (nonzero or unpenalized columns)
            // until stable, then re-check everything.
            let active: Vec<usize> = (0..self.design.n_cols())
                .filter(|&j| self.beta[j] != 0.0 || !self.penalized[j])
                .collect();
            loop {
                let change = self.sweep(&active, lambda);
                if change < opts.tol || self.sweeps >= opts.max_sweeps {
                    break;
                }
            }
            if self.sweeps >= opts.max_sweeps {
                return false;
            }
        }
    }
}

fn check_inputs(design: &DesignMatrix, lambda: f64, penalized: &[bool]) -> Result<(), LassoError> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(LassoError::BadLambda(lambda));
    }
    if penalized.len() != design.n_cols() {
        return Err(LassoError::PenaltyShape {
            got: penalized.len(),
            want: design.n_cols(),
        });
    }
    if !design.y.iter().all(|v| v.is_finite()) {
        return Err(LassoError::NonFinite);
    }
    for j in 0..design.n_cols() {
        if !design.col(j).iter().all(|v| v.is_finite()) {
            return Err(LassoError::NonFinite);
        }
    }
    Ok(())
}

/// Cyclic coordinate descent with soft-thresholding at a single lambda.
/// Non-convergence within the sweep budget is reported, not fatal.
pub fn fit(
    design: &DesignMatrix,
    lambda: f64,
    penalized: &[bool],
) -> Result<LassoFit, LassoError> {
    fit_warm(design, lambda, penalized, None, &FitOptions::default())
}

/// `fit` with an explicit warm start and solver options.
pub fn fit_warm(
    design: &DesignMatrix,
    lambda: f64,
    penalized: &[bool],
    warm: Option<&[f64]>,
    opts: &FitOptions,
) -> Result<LassoFit, LassoError> {
    check_inputs(design, lambda, penalized)?;
    let mut solver = Solver::new(design, penalized, warm);
    let converged = solver.run(lambda, opts);
    Ok(LassoFit {
        beta: solver.beta,
        lambda,
        penalized: penalized.to_vec(),
        n_iter: solver.sweeps,
        converged,
    })
}

/// Smallest lambda at which every penalized coefficient is zero:
/// max_j |(1/M) X_j' r| over penalized j, with r the residual after fitting
/// the unpenalized columns alone.
pub fn lambda_max(design: &DesignMatrix, penalized: &[bool]) -> Result<f64, LassoError> {
    check_inputs(design, 0.0, penalized)?;
    let mut solver = Solver::new(design, penalized, None);
    if penalized.iter().any(|&p| !p) {
        let unpen: Vec<usize> = (0..design.n_cols()).filter(|&j| !penalized[j]).collect();
        let opts = FitOptions::default();
        loop {
            let change = solver.sweep(&unpen, 0.0);
            if change < opts.tol || solver.sweeps >= opts.max_sweeps {
                break;
            }
        }
    }
    let inv_m = 1.0 / design.rows() as f64;
    let max = (0..design.n_cols())
        .filter(|&j| penalized[j])
        .map(|j| (dot(design.col(j), &solver.residual) * inv_m).abs())
        .fold(0.0f64, f64::max);
    Ok(max)
}

const PATH_LEN: usize = 100;
const PATH_FLOOR: f64 = 1e-4;

/// Descending log-spaced grid of 100 lambdas from lambda_max down to
/// lambda_max * 1e-4, under the design's default penalty layout.
pub fn lambda_path(design: &DesignMatrix) -> Result<Vec<f64>, LassoError> {
    let penalized = design.default_penalty();
    let top = lambda_max(design, &penalized)?.max(1e-12);
    Ok(log_grid(top))
}

fn log_grid(top: f64) -> Vec<f64> {
    (0..PATH_LEN)
        .map(|i| top * PATH_FLOOR.powf(i as f64 / (PATH_LEN - 1) as f64))
        .collect()
}

/// Warm-started fits along a descending lambda grid.
pub fn fit_path(
    design: &DesignMatrix,
    grid: &[f64],
    penalized: &[bool],
) -> Result<Vec<LassoFit>, LassoError> {
    fit_path_with_options(design, grid, penalized, &FitOptions::default())
}

fn fit_path_with_options(
    design: &DesignMatrix,
    grid: &[f64],
    penalized: &[bool],
    opts: &FitOptions,
) -> Result<Vec<LassoFit>, LassoError> {
    let mut fits = Vec::with_capacity(grid.len());
    let mut warm: Option<Vec<f64>> = None;
    for &lambda in grid {
        let fit = fit_warm(design, lambda, penalized, warm.as_deref(), opts)?;
        warm = Some(fit.beta.clone());
        fits.push(fit);
    }
    Ok(fits)
}

// -- gram-form solver (cross-validation fast path) ---------------------------

/// Widest design the CV fast path will form an explicit gram matrix for.
const GRAM_COLS_LIMIT: usize = 2048;

/// Gram matrix (raw sums, full square) and X'y over a contiguous row range.
/// Accumulated over row chunks so the column data stays cache-resident
/// instead of being re-streamed once per column pair.
fn gram_block(design: &DesignMatrix, lo: usize, hi: usize) -> (Vec<f64>, Vec<f64>) {
    let n = design.n_cols();
    let mut g = vec![0.0f64; n * n];
    let mut xty = vec![0.0f64; n];
    const CHUNK: usize = 256;
    let mut start = lo;
    while start < hi {
        let end = (start + CHUNK).min(hi);
        for i in 0..n {
            let ci = &design.col(i)[start..end];
            xty[i] += dot(ci, &design.y[start..end]);
            let row = &mut g[i * n..(i + 1) * n];
            for j in i..n {
                row[j] += dot(ci, &design.col(j)[start..end]);
            }
        }
        start = end;
    }
    for i in 0..n {
        for j in 0..i {
            g[i * n + j] = g[j * n + i];
        }
    }
    (g, xty)
}

/// Coordinate descent on the normal equations: sweeps cost O(N * active)
/// instead of O(M * N). Solutions match the data-form solver up to float
/// ordering; used where many fits share one design (CV folds).
struct GramSolver<'a> {
    g: &'a [f64],
    n: usize,
    inv_m: f64,
    /// (1/M) X'y
    c: Vec<f64>,
    /// (1/M) diag(G)
    diag: Vec<f64>,
    beta: Vec<f64>,
    /// (1/M) G beta
    q: Vec<f64>,
    penalized: &'a [bool],
    sweeps: usize,
}

impl<'a> GramSolver<'a> {
    fn new(g: &'a [f64], xty: &[f64], m: usize, penalized: &'a [bool]) -> Self {
        let n = xty.len();
        let inv_m = 1.0 / m as f64;
        GramSolver {
            g,
            n,
            inv_m,
            c: xty.iter().map(|v| v * inv_m).collect(),
            diag: (0..n).map(|j| g[j * n + j] * inv_m).collect(),
            beta: vec![0.0; n],
            q: vec![0.0; n],
            penalized,
            sweeps: 0,
        }
    }

    fn sweep(&mut self, cols: &[usize], lambda: f64) -> f64 {
        let mut max_change = 0.0f64;
        for &j in cols {
            let d = self.diag[j];
            if d == 0.0 {
                continue;
            }
            let old = self.beta[j];
            let z = self.c[j] - self.q[j] + d * old;
            let new = if self.penalized[j] {
                soft_threshold(z, lambda) / d
            } else {
                z / d
            };
            if new != old {
                let delta = new - old;
                let row = &self.g[j * self.n..(j + 1) * self.n];
                for (q, gv) in self.q.iter_mut().zip(row) {
                    *q += delta * gv * self.inv_m;
                }
                self.beta[j] = new;
                max_change = max_change.max(delta.abs());
            }
        }
        self.sweeps += 1;
        max_change
    }

    fn run(&mut self, lambda: f64, opts: &FitOptions) -> bool {
        let all: Vec<usize> = (0..self.n).collect();
        let start = self.sweeps;
        loop {
            let change = self.sweep(&all, lambda);
            if change < opts.tol {
                return true;
            }
            if self.sweeps - start >= opts.max_sweeps {
                return false;
            }
            let active: Vec<usize> = (0..self.n)
                .filter(|&j| self.beta[j] != 0.0 || !self.penalized[j])
                .collect();
            loop {
                let change = self.sweep(&active, lambda);
                if change < opts.tol || self.sweeps - start >= opts.max_sweeps {
                    break;
                }
            }
            if self.sweeps - start >= opts.max_sweeps {
                return false;
            }
        }
    }
}

/// Cross-validation summary along the lambda grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CvReport {
    /// Descending.
    pub lambda_grid: Vec<f64>,
    pub mean_cv_error: Vec<f64>,
    pub std_error: Vec<f64>,
    pub lambda_min: f64,
    pub lambda_1se: f64,
}

impl CvReport {
    pub fn lambda_for(&self, rule: crate::config::LambdaRule) -> f64 {
        match rule {
            crate::config::LambdaRule::Min => self.lambda_min,
            crate::config::LambdaRule::OneSe => self.lambda_1se,
            crate::config::LambdaRule::Fixed(v) => v,
        }
    }

    /// CSV dump: lambda, mean_err, std_err.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lambda,mean_err,std_err\n");
        for i in 0..self.lambda_grid.len() {
            out.push_str(&format!(
                "{},{},{}\n",
                self.lambda_grid[i], self.mean_cv_error[i], self.std_error[i]
            ));
        }
        out
    }
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// K-fold cross-validation over the standard lambda path.
///
/// All arithmetic runs over rows in stable-id order and folds are keyed by
/// each row's stable id, not its position: permuting the design's rows
/// changes nothing, bit for bit.
pub fn cross_validate(
    design: &DesignMatrix,
    folds: usize,
    seed: u64,
) -> Result<CvReport, LassoError> {
    let m = design.rows();
    if m < folds || folds < 2 {
        return Err(LassoError::TooFewRows { rows: m, folds });
    }
    // Canonical row order: fold-major, stable row id within fold. Fold
    // membership is a function of (seed, row id) alone, so this layout and
    // everything downstream is invariant to input row order.
    let mut by_id: Vec<usize> = (0..m).collect();
    by_id.sort_by_key(|&i| design.row_ids[i]);
    let mut order: Vec<usize> = by_id.clone();
    order.sort_by_key(|&i| (mix64(seed ^ mix64(design.row_ids[i])), design.row_ids[i]));
    let mut fold_of_id: std::collections::HashMap<u64, usize> = std::collections::HashMap::new();
    for (pos, &row) in order.iter().enumerate() {
        fold_of_id.insert(design.row_ids[row], pos % folds);
    }
    by_id.sort_by_key(|&i| (fold_of_id[&design.row_ids[i]], design.row_ids[i]));
    let design = design.select_rows(&by_id);
    let fold_of: Vec<usize> = design.row_ids.iter().map(|id| fold_of_id[id]).collect();
    let mut fold_start = vec![0usize; folds + 1];
    for &f in &fold_of {
        fold_start[f + 1] += 1;
    }
    for f in 0..folds {
        fold_start[f + 1] += fold_start[f];
    }

    let penalized = design.default_penalty();
    let grid = lambda_path(&design)?;
    // Fold fits feed prediction-error estimates, not coefficient reports;
    // a looser tolerance changes CV errors far below their own standard
    // error. Final fits elsewhere keep the full tolerance.
    let opts = FitOptions {
        tol: 1e-5,
        max_sweeps: 5_000,
    };

    let fold_test_error = |fits: &[LassoFit], lo: usize, hi: usize| -> Vec<f64> {
        fits.iter()
            .map(|fit| {
                let mut sse = 0.0;
                for r in lo..hi {
                    let mut pred = 0.0;
                    for (j, &b) in fit.beta.iter().enumerate() {
                        if b != 0.0 {
                            pred += b * design.value(r, j);
                        }
                    }
                    let e = design.y[r] - pred;
                    sse += e * e;
                }
                sse / (hi - lo) as f64
            })
            .collect()
    };

    // Per-fold squared prediction errors at every lambda, reduced by fold
    // index so worker scheduling cannot reorder the arithmetic.
    let fold_errors: Vec<Vec<f64>> = if design.n_cols() <= GRAM_COLS_LIMIT {
        // Gram fast path: one full gram, per-fold grams by subtraction.
        let (g_full, c_full) = gram_block(&design, 0, m);
        (0..folds)
            .map(|f| {
                let (lo, hi) = (fold_start[f], fold_start[f + 1]);
                let (g_fold, c_fold) = gram_block(&design, lo, hi);
                let g_train: Vec<f64> =
                    g_full.iter().zip(&g_fold).map(|(a, b)| a - b).collect();
                let c_train: Vec<f64> =
                    c_full.iter().zip(&c_fold).map(|(a, b)| a - b).collect();
                let mut solver =
                    GramSolver::new(&g_train, &c_train, m - (hi - lo), &penalized);
                let fits: Vec<LassoFit> = grid
                    .iter()
                    .map(|&lambda| {
                        let converged = solver.run(lambda, &opts);
                        LassoFit {
                            beta: solver.beta.clone(),
                            lambda,
                            penalized: penalized.clone(),
                            n_iter: solver.sweeps,
                            converged,
                        }
                    })
                    .collect();
                Ok(fold_test_error(&fits, lo, hi))
            })
            .collect::<Result<_, LassoError>>()?
    } else {
        (0..folds)
            .into_par_iter()
            .map(|f| {
                let (lo, hi) = (fold_start[f], fold_start[f + 1]);
                let train_rows: Vec<usize> = (0..lo).chain(hi..m).collect();
                let train = design.select_rows(&train_rows);
                let fits = fit_path_with_options(&train, &grid, &penalized, &opts)?;
                Ok(fold_test_error(&fits, lo, hi))
            })
            .collect::<Result<_, LassoError>>()?
    };

    let mut mean_cv_error = vec![0.0; grid.len()];
    let mut std_error = vec![0.0; grid.len()];
    for (li, (mean, se)) in mean_cv_error.iter_mut().zip(std_error.iter_mut()).enumerate() {
        let vals: Vec<f64> = fold_errors.iter().map(|fe| fe[li]).collect();
        let mu = vals.iter().sum::<f64>() / folds as f64;
        let var = vals.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / (folds as f64 - 1.0);
        *mean = mu;
        *se = (var / folds as f64).sqrt();
    }

    // Ties break toward the larger lambda: the grid is descending, so the
    // first index attaining the minimum wins.
    let mut min_idx = 0;
    for (i, &e) in mean_cv_error.iter().enumerate() {
        if e < mean_cv_error[min_idx] {
            min_idx = i;
        }
    }
    let cutoff = mean_cv_error[min_idx] + std_error[min_idx];
    let one_se_idx = (0..grid.len())
        .find(|&i| mean_cv_error[i] <= cutoff)
        .unwrap_or(min_idx);

    Ok(CvReport {
        lambda_min: grid[min_idx],
        lambda_1se: grid[one_se_idx],
        lambda_grid: grid,
        mean_cv_error,
        std_error,
    })
}

/// AME estimates from a fit: sqrt(v) times the source-column coefficients.
/// Knockoff and dummy coefficients are dropped.
pub fn estimate_ame(fit: &LassoFit, layout: &DesignLayout, feat: &Featurization) -> Vec<f64> {
    let s = feat.v.sqrt();
    fit.beta[layout.source_range()].iter().map(|b| s * b).collect()
}

/// Split a fit into its coefficient blocks.
pub fn split_fit(fit: &LassoFit, layout: &DesignLayout, feat: &Featurization) -> EstimationResult {
    EstimationResult {
        coefficients: fit.beta[layout.source_range()].to_vec(),
        knockoff_coefficients: (layout.knockoff_cols > 0)
            .then(|| fit.beta[layout.knockoff_range()].to_vec()),
        dummy_coefficients: fit.beta[layout.dummy_range()].to_vec(),
        v: feat.v,
        lambda: fit.lambda,
        featurization: feat.scheme,
    }
}

/// Largest KKT stationarity violation of a fit, for tests and audits:
/// penalized zero coordinates must satisfy |g_j| <= lambda, penalized active
/// ones g_j = lambda * sign(beta_j), unpenalized ones g_j = 0, where
/// g_j = (1/M) X_j' (y - X beta).
pub fn kkt_violation(design: &DesignMatrix, fit: &LassoFit) -> f64 {
    let inv_m = 1.0 / design.rows() as f64;
    let mut residual = design.y.clone();
    for (j, &b) in fit.beta.iter().enumerate() {
        if b != 0.0 {
            for (r, x) in residual.iter_mut().zip(design.col(j)) {
                *r -= b * x;
            }
        }
    }
    let mut worst = 0.0f64;
    for j in 0..design.n_cols() {
        if design.col(j).iter().all(|&x| x == 0.0) {
            continue;
        }
        let g = dot(design.col(j), &residual) * inv_m;
        let violation = if !fit.penalized[j] {
            g.abs()
        } else if fit.beta[j] == 0.0 {
            (g.abs() - fit.lambda).max(0.0)
        } else {
            (g - fit.lambda * fit.beta[j].signum()).abs()
        };
        worst = worst.max(violation);
    }
    worst
}
