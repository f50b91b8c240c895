//! Acceptance suite: one test per shipped correctness criterion, each
//! pinned to its stated tolerance. Every test prints a PASS line with the
//! measured quantities (visible with --nocapture); the harness result line
//! is the pass/fail verdict per criterion.

mod common;

use ame_core::config::LambdaRule;
use ame_core::knockoffs::{mfdr_audit, select_with_fdr, Selection};
use ame_core::lasso;
use ame_core::oracle::{
    evaluate_rows, monotone_coverage_game, random_monotone_game, PoisonedLinearTask, Query,
    ThresholdGame, UtilityOracle,
};
use ame_core::sampling::{
    build_design, normalizer_v, sample_rows, Featurization, SubsetSampler,
};
use ame_core::shapley::{
    exact_ame, exact_ame_uniform, exact_sv, permutation_sv_exhaustive, sv_via_ame,
};
use ame_core::types::{FeatScheme, PDistribution, SubsetMask};
use ame_core::hierarchy::{
    sample_hier_rows, second_level_value, two_stage_estimate, SourceTree,
};

use common::*;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Bounded, non-monotone game backed by a random utility table.
struct TableGame {
    n: usize,
    table: Vec<f64>,
}

impl TableGame {
    fn random(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TableGame {
            n,
            table: (0..1usize << n).map(|_| rng.random::<f64>()).collect(),
        }
    }
}

impl UtilityOracle for TableGame {
    fn n_sources(&self) -> usize {
        self.n
    }
    fn evaluate(&self, mask: &SubsetMask, _q: &Query, _r: &mut dyn RngCore) -> f64 {
        let mut bits = 0usize;
        for i in mask.iter_ones() {
            bits |= 1 << i;
        }
        self.table[bits]
    }
    fn is_monotone(&self) -> bool {
        false
    }
    fn fingerprint(&self) -> u64 {
        0
    }
}

/// Criterion 1: AME under discrete-uniform subset-size weights equals the
/// Shapley value within 1e-10 elementwise, on 50 random games with N <= 10.
#[test]
fn criterion_01_ame_sv_equivalence() {
    let mut worst: f64 = 0.0;
    for i in 0..50u64 {
        let n = 6 + (i % 5) as usize;
        let (sv, ame) = if i % 2 == 0 {
            let game = random_monotone_game(n, i);
            (exact_sv(&game).unwrap(), exact_ame_uniform(&game).unwrap())
        } else {
            let game = TableGame::random(n, i);
            (exact_sv(&game).unwrap(), exact_ame_uniform(&game).unwrap())
        };
        worst = worst.max(linf(&sv.values, &ame));
    }
    assert!(worst < 1e-10, "worst elementwise gap {worst}");
    println!("criterion 1 (AME = SV under uniform sizes): PASS, max gap {worst:.3e}");
}

/// Criterion 2: OLS on 1e6 sampled featurized rows recovers the exact AME
/// within 3 Monte-Carlo standard errors, for both featurizations and for
/// grid, truncated-uniform, and Beta laws.
///
/// The Monte-Carlo standard error is estimated by replication: nine
/// independent repeats of the same 1e6-row experiment. Classical
/// homoskedastic SEs are invalid for the inverse-p featurization under Beta,
/// whose feature values are unbounded (the very pathology p-featurization
/// exists to avoid), while the replication estimate reflects the true
/// sampling spread for every combination uniformly.
#[test]
fn criterion_02_regression_reduction() {
    let n = 8usize;
    let game = ThresholdGame::new(n, 3, 2);
    let m = 1_000_000usize;
    let replicates = 10usize; // estimate under test + 9 SE replicates
    let dists = [
        PDistribution::grid(&[0.2, 0.4, 0.6, 0.8]),
        PDistribution::truncated_uniform(0.05),
        PDistribution::beta(1.25, 1.25),
    ];

    let run_ols = |feat: &Featurization, seed: u64| -> Vec<f64> {
        let sampler = SubsetSampler::new(seed);
        let sampling_dist = feat.sampling_dist();
        let mut gram = vec![vec![0.0f64; n]; n];
        let mut xty = vec![0.0f64; n];
        for row in 0..m as u64 {
            let p = sampler.p_for_row(&sampling_dist, row);
            let mask = sampler.mask_for_row(row, n, p);
            let y = ame_core::oracle::evaluate_threshold_game(&game, &mask);
            let x = ame_core::sampling::featurize_row(&mask, p, feat);
            for i in 0..n {
                for j in i..n {
                    gram[i][j] += x[i] * x[j];
                }
                xty[i] += x[i] * y;
            }
        }
        for i in 0..n {
            for j in 0..i {
                gram[i][j] = gram[j][i];
            }
        }
        let sqrt_v = feat.v.sqrt();
        solve_dense(gram, xty).into_iter().map(|b| sqrt_v * b).collect()
    };

    let mut worst_sigmas: f64 = 0.0;
    for (di, dist) in dists.iter().enumerate() {
        for (si, scheme) in [FeatScheme::InverseP, FeatScheme::PFeat].iter().enumerate() {
            let feat = Featurization::new(*scheme, dist.clone()).unwrap();
            let ame = exact_ame(&game, dist).unwrap();
            let base = 1000 * (di * 2 + si) as u64;
            let estimate = run_ols(&feat, base);
            let spares: Vec<Vec<f64>> =
                (1..replicates).map(|r| run_ols(&feat, base + r as u64)).collect();
            // One scalar SE per combination: the largest coordinate SE, the
            // scale the infinity norm is measured against.
            let se = (0..n)
                .map(|j| {
                    let mean = spares.iter().map(|t| t[j]).sum::<f64>() / spares.len() as f64;
                    (spares.iter().map(|t| (t[j] - mean).powi(2)).sum::<f64>()
                        / (spares.len() as f64 - 1.0))
                        .sqrt()
                })
                .fold(0.0f64, f64::max);
            let gap = linf(&estimate, &ame);
            assert!(
                gap < 3.0 * se,
                "{scheme:?}/{dist:?}: |gap|_inf {gap:.2e} vs 3se {:.2e}",
                3.0 * se
            );
            worst_sigmas = worst_sigmas.max(gap / se);
        }
    }
    println!("criterion 2 (regression reduction): PASS, worst |gap|/se = {worst_sigmas:.2}");
}

/// Criterion 3: simulated SV experiment at N=1000, k=3. The AME-based
/// estimator (p-featurization, truncated uniform, lambda_min) ranks the
/// three planted sources first in at least 19/20 seeded runs at M=4096, and
/// the median L2 error shrinks from M=256 to M=4096.
#[test]
fn criterion_03_simulated_sv_experiment() {
    let n = 1000;
    let k = 3;
    let game = ThresholdGame::new(n, k, 2);
    let feat =
        Featurization::new(FeatScheme::PFeat, PDistribution::truncated_uniform(0.05)).unwrap();
    let mut true_sv = vec![0.0f64; n];
    for v in true_sv.iter_mut().take(k) {
        *v = 1.0 / k as f64;
    }

    let run = |m: usize, seed: u64| -> (bool, f64) {
        let sampler = SubsetSampler::new(seed);
        let rows = sample_rows(&sampler, n, m, &feat, false);
        let observations = evaluate_rows(&game, &rows, &Query::none(), seed);
        let sv = sv_via_ame(&observations, &feat, LambdaRule::Min, 5, seed).unwrap();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| sv.values[b].total_cmp(&sv.values[a]));
        let mut top: Vec<usize> = order[..k].to_vec();
        top.sort_unstable();
        (top == vec![0, 1, 2], l2(&sv.values, &true_sv))
    };

    let seeds: Vec<u64> = (100..120).collect();
    let mut top_hits = 0usize;
    let mut errs_small = Vec::new();
    let mut errs_large = Vec::new();
    for &seed in &seeds {
        let (_, e_small) = run(256, seed);
        errs_small.push(e_small);
        let (hit, e_large) = run(4096, seed);
        errs_large.push(e_large);
        top_hits += hit as usize;
    }
    let med_small = median(&mut errs_small);
    let med_large = median(&mut errs_large);
    assert!(
        top_hits >= 19,
        "top-3 recovered in only {top_hits}/20 runs at M=4096"
    );
    assert!(
        med_large < med_small,
        "median L2 did not shrink: M=4096 {med_large} vs M=256 {med_small}"
    );
    println!(
        "criterion 3 (simulated SV): PASS, top-3 in {top_hits}/20 runs, median L2 {med_large:.4} @4096 < {med_small:.4} @256"
    );
}

/// Criterion 4: AME-SV discrepancy bounds on 50 random monotone games with
/// N <= 10 and eps in {0.01, 0.05, 0.1}: L2 <= 4e + 2 sqrt(2e) and
/// Linf <= 8e, zero violations.
#[test]
fn criterion_04_tu_bounds() {
    let mut checks = 0usize;
    for i in 0..50u64 {
        let n = 6 + (i % 5) as usize;
        let active = if i % 3 == 0 { n.div_ceil(2) } else { n };
        let game = monotone_coverage_game(n, active, 1000 + i);
        let sv = exact_sv(&game).unwrap();
        for eps in [0.01, 0.05, 0.1] {
            let ame = exact_ame(&game, &PDistribution::truncated_uniform(eps)).unwrap();
            let l2_bound = 4.0 * eps + 2.0 * (2.0 * eps).sqrt();
            let linf_bound = 8.0 * eps;
            assert!(
                l2(&sv.values, &ame) <= l2_bound,
                "game {i} eps {eps}: L2 {} > {l2_bound}",
                l2(&sv.values, &ame)
            );
            assert!(
                linf(&sv.values, &ame) <= linf_bound,
                "game {i} eps {eps}: Linf {} > {linf_bound}",
                linf(&sv.values, &ame)
            );
            checks += 2;
        }
    }
    println!("criterion 4 (truncated-uniform bounds): PASS, {checks} bound checks, 0 violations");
}

/// Criterion 5: the normalizer identity under Beta(1+e, 1+e). A quadrature
/// route (no Gamma functions) matches 4 + 2/e within 1e-6, and the Beta(2,2)
/// closed form is exactly 6.
#[test]
fn criterion_05_beta_normalizer_identity() {
    // int_0^1 p^(a-1)(1-p)^(a-1) dp via u = p^a, which removes the endpoint
    // singularity: (2/a) int_0^(2^-a) (1 - u^(1/a))^(a-1) du.
    let beta_sym = |a: f64| -> f64 {
        let upper = 0.5f64.powf(a);
        let f = move |u: f64| (1.0 - u.powf(1.0 / a)).powf(a - 1.0);
        2.0 / a * adaptive_simpson(&f, 0.0, upper, 1e-12)
    };
    let mut worst: f64 = 0.0;
    for eps in [0.1, 0.25, 0.5] {
        // E[1/(p(1-p))] under Beta(1+e,1+e) = B(e,e) / B(1+e,1+e).
        let v_quadrature = beta_sym(eps) / beta_sym(1.0 + eps);
        let v_formula = 4.0 + 2.0 / eps;
        let gap = (v_quadrature - v_formula).abs();
        assert!(gap < 1e-6, "eps {eps}: quadrature {v_quadrature} vs {v_formula}");
        worst = worst.max(gap);
    }
    let v22 = normalizer_v(&PDistribution::beta(2.0, 2.0)).unwrap();
    assert_eq!(v22, 6.0, "Beta(2,2) normalizer must be exactly 6");
    println!("criterion 5 (Beta normalizer): PASS, worst quadrature gap {worst:.2e}, v(2,2) = 6");
}

/// Criterion 6: knockoff calibration. (a) 200-trial null suite at q = 0.2
/// keeps the empirical mFDR within 3 binomial standard errors of q;
/// (b) the poisoned-task suite at q = 0 and M = 24 k log2 N reaches
/// precision >= 0.95 with recall >= 0.5 over 50 seeds.
#[test]
fn criterion_06_knockoff_calibration() {
    // (a) Null suite: y independent of every mask.
    let q = 0.2;
    let n = 200;
    let m = 500;
    let feat = Featurization::new(
        FeatScheme::InverseP,
        PDistribution::grid(&[0.2, 0.4, 0.6, 0.8]),
    )
    .unwrap();
    let trials: Vec<(Selection, Vec<usize>)> = (0..200u64)
        .map(|seed| {
            let sampler = SubsetSampler::new(10_000 + seed);
            let rows = sample_rows(&sampler, n, m, &feat, true);
            let mut rng = ChaCha8Rng::seed_from_u64(20_000 + seed);
            let observations: Vec<_> = rows
                .into_iter()
                .map(|(p, mask, k)| {
                    ame_core::types::Observation::with_knockoff(mask, p, rng.random::<f64>(), k)
                        .unwrap()
                })
                .collect();
            let design = build_design(&observations, &feat, true, true).unwrap();
            let sel = select_with_fdr(&design, &feat, q, LambdaRule::OneSe, 5, seed).unwrap();
            (sel, Vec::new())
        })
        .collect();
    let audited = mfdr_audit(&trials);
    let se = (q * (1.0 - q) / trials.len() as f64).sqrt();
    assert!(
        audited <= q + 3.0 * se,
        "null-suite mFDR {audited} above {q} + 3se"
    );

    // (b) Poisoned-task suite at q = 0.
    let n = 100;
    let k = 5;
    let m = (24.0 * k as f64 * (n as f64).log2()).round() as usize;
    let mut precisions = Vec::new();
    let mut recalls = Vec::new();
    for seed in 0..50u64 {
        let task = PoisonedLinearTask::generate(n, k, 6, seed);
        let sampler = SubsetSampler::new(30_000 + seed);
        let rows = sample_rows(&sampler, n, m, &feat, true);
        let observations = evaluate_rows(&task, &rows, &task.trigger_query.clone(), seed);
        let design = build_design(&observations, &feat, true, true).unwrap();
        let sel = select_with_fdr(&design, &feat, 0.0, LambdaRule::OneSe, 5, seed).unwrap();
        let true_hits = sel
            .selected
            .iter()
            .filter(|s| task.poison_indices.contains(&s.index()))
            .count();
        if !sel.selected.is_empty() {
            precisions.push(true_hits as f64 / sel.selected.len() as f64);
        }
        recalls.push(true_hits as f64 / k as f64);
    }
    let mean_precision = precisions.iter().sum::<f64>() / precisions.len() as f64;
    let mean_recall = recalls.iter().sum::<f64>() / recalls.len() as f64;
    assert!(
        mean_precision >= 0.95,
        "poisoned suite precision {mean_precision}"
    );
    assert!(mean_recall >= 0.5, "poisoned suite recall {mean_recall}");
    println!(
        "criterion 6 (knockoff calibration): PASS, null mFDR {audited:.4} <= {:.4}, poison precision {mean_precision:.3}, recall {mean_recall:.3}",
        q + 3.0 * se
    );
}

/// Criterion 7: solver correctness. KKT residuals <= 1e-6 on 100 random
/// instances, lambda = 0 matches the normal-equations oracle within 1e-6,
/// and lambda >= lambda_max yields the zero vector.
#[test]
fn criterion_07_lasso_solver() {
    let mut worst_kkt: f64 = 0.0;
    let mut worst_ols: f64 = 0.0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = 60;
        let n = 10;
        let cols: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..m).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
            .collect();
        let beta_true: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < 0.4 { rng.random::<f64>() } else { 0.0 })
            .collect();
        let y: Vec<f64> = (0..m)
            .map(|i| {
                let mut s = 0.1 * (rng.random::<f64>() - 0.5);
                for j in 0..n {
                    s += cols[j][i] * beta_true[j];
                }
                s
            })
            .collect();
        let layout = ame_core::sampling::DesignLayout {
            rows: m,
            source_cols: n,
            knockoff_cols: 0,
            dummy_cols: 0,
            p_levels: vec![],
        };
        let design = ame_core::sampling::DesignMatrix::from_columns(layout, cols, y);
        let penalized = vec![true; n];

        let lmax = lasso::lambda_max(&design, &penalized).unwrap();
        for frac in [0.6, 0.1, 0.01] {
            let fit = lasso::fit(&design, lmax * frac, &penalized).unwrap();
            worst_kkt = worst_kkt.max(lasso::kkt_violation(&design, &fit));
        }

        let fit0 = lasso::fit(&design, 0.0, &penalized).unwrap();
        let oracle = ols_normal_equations(&design);
        worst_ols = worst_ols.max(linf(&fit0.beta, &oracle));

        let fit_max = lasso::fit(&design, lmax, &penalized).unwrap();
        assert!(fit_max.beta.iter().all(|&b| b == 0.0), "seed {seed}");
    }
    assert!(worst_kkt <= 1e-6, "worst KKT residual {worst_kkt:.2e}");
    assert!(worst_ols <= 1e-6, "worst OLS gap {worst_ols:.2e}");
    println!(
        "criterion 7 (solver): PASS, worst KKT {worst_kkt:.2e}, worst OLS gap {worst_ols:.2e}"
    );
}

/// Criterion 8: hierarchy. (a) The second-level featurization has zero
/// conditional mean given (p1, p2, parent state) at 50 000 draws;
/// (b) in the two-level poison scenario, stage one selects both poisoned
/// tops at a budget where the flat 3000-source pipeline selects nothing.
#[test]
fn criterion_08_hierarchy() {
    // (a) conditional-mean check per (p1, p2) cell.
    let tree = SourceTree::balanced(10, 6);
    let p1_grid = PDistribution::grid(&[0.3, 0.6]);
    let p2_grid = PDistribution::grid(&[0.25, 0.5]);
    let sampler = SubsetSampler::new(555);
    let rows = sample_hier_rows(&sampler, &tree, &p1_grid, &p2_grid, 50_000, false);
    let child = 13;
    let top = tree.parent(child);
    let mut worst_sigmas: f64 = 0.0;
    for &p1 in &[0.3, 0.6] {
        for &p2 in &[0.25, 0.5] {
            let cell: Vec<f64> = rows
                .iter()
                .filter(|o| o.p1 == p1 && o.p2 == p2 && o.top_mask.contains(top))
                .map(|o| second_level_value(true, o.second_mask.contains(child), p1, p2))
                .collect();
            let count = cell.len() as f64;
            let mean = cell.iter().sum::<f64>() / count;
            let var = cell.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
            let se = (var / count).sqrt();
            assert!(
                mean.abs() < 3.0 * se,
                "cell ({p1},{p2}): conditional mean {mean} exceeds 3se {:.2e}",
                3.0 * se
            );
            worst_sigmas = worst_sigmas.max(mean.abs() / se);
        }
        // Parent excluded: the feature is identically zero.
        assert!(rows
            .iter()
            .filter(|o| !o.top_mask.contains(top))
            .all(|o| !o.second_mask.contains(child)));
    }

    // (b) two-level poison at desk scale: N1 = 300 tops, 10 children each.
    let tree = SourceTree::balanced(300, 10);
    let poisoned: Vec<usize> = (0..5).chain(10..20).collect(); // 5 under top 0, 10 under top 1
    let m = 500;
    let p_grid = PDistribution::grid(&[0.2, 0.4, 0.6, 0.8]);
    let flat_feat = Featurization::new(FeatScheme::InverseP, p_grid.clone()).unwrap();
    let mut stage1_hits = 0usize;
    let mut flat_empty = 0usize;
    for seed in 0..20u64 {
        let sampler = SubsetSampler::new(40_000 + seed);
        let mut rows = sample_hier_rows(&sampler, &tree, &p_grid, &p_grid, m, true);
        for obs in rows.iter_mut() {
            let hit = poisoned
                .iter()
                .filter(|&&c| obs.second_mask.contains(c))
                .count();
            obs.y = hit as f64 / poisoned.len() as f64;
        }
        let result =
            two_stage_estimate(&rows, &tree, &p_grid, 0.2, LambdaRule::OneSe, 5, seed).unwrap();
        if result.stage1.contains(0) && result.stage1.contains(1) {
            stage1_hits += 1;
        }

        // Flat pipeline over all 3000 second-level sources with the same
        // budget.
        let flat_sampler = SubsetSampler::new(50_000 + seed);
        let flat_rows = sample_rows(&flat_sampler, tree.n_second(), m, &flat_feat, true);
        let observations: Vec<_> = flat_rows
            .into_iter()
            .map(|(p, mask, k)| {
                let hit = poisoned.iter().filter(|&&c| mask.contains(c)).count();
                let y = hit as f64 / poisoned.len() as f64;
                ame_core::types::Observation::with_knockoff(mask, p, y, k).unwrap()
            })
            .collect();
        let design = build_design(&observations, &flat_feat, true, true).unwrap();
        let sel = select_with_fdr(&design, &flat_feat, 0.2, LambdaRule::OneSe, 5, seed).unwrap();
        if sel.selected.is_empty() {
            flat_empty += 1;
        }
    }
    assert!(
        stage1_hits >= 18,
        "stage 1 found both poisoned tops in only {stage1_hits}/20 seeds"
    );
    assert!(
        flat_empty >= 18,
        "flat pipeline still selected something in {}/20 seeds",
        20 - flat_empty
    );
    println!(
        "criterion 8 (hierarchy): PASS, conditional mean worst {worst_sigmas:.2} sigma; stage1 {stage1_hits}/20, flat empty {flat_empty}/20 at M={m}"
    );
}

/// Criterion 9: exhaustive permutation enumeration at N = 5 equals the
/// exact Shapley value within 1e-12.
#[test]
fn criterion_09_permutation_oracle() {
    let mut worst: f64 = 0.0;
    for seed in 0..10u64 {
        let game = random_monotone_game(5, 300 + seed);
        let exact = exact_sv(&game).unwrap();
        let perms = permutation_sv_exhaustive(&game).unwrap();
        worst = worst.max(linf(&exact.values, &perms.values));
    }
    assert!(worst < 1e-12, "worst permutation-vs-exact gap {worst}");
    println!("criterion 9 (permutation oracle): PASS, max gap {worst:.2e}");
}
