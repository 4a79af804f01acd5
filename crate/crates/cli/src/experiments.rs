//! Experiment drivers. Each takes a validated [`ExperimentConfig`] and
//! produces an [`ExperimentReport`] that is byte-for-byte reproducible
//! from the `(config, seed)` pair: every sampled quantity draws from a
//! stream keyed by the experiment tag, a row label, and a trial index.
//!
//! Rows with an exact expected value assert agreement at four standard
//! errors (provenance `closed form` / `exact identity`); rows judged
//! against an empirical floor carry provenance `calibrated baseline`;
//! everything else is `report only` and never fails a run.

use anyhow::{anyhow, bail, Result};
use blockbp_core::estimators::{
    error_matrix_mc, estimate_recovery, estimate_recovery_noisy, expected_weighted_sum,
    identity_checks_mc, iterated_majority_classify, majority_classify, weighted_sum,
    weighted_sum_variance_bound,
};
use blockbp_core::linalg::SquareMatrix;
use blockbp_core::model::{check_conditions, LAMBDA2_ZERO_TOL};
use blockbp_core::rng;
use blockbp_core::stats::RunningMoments;
use blockbp_core::tree::{
    apply_noise, count_leaf_paths, expected_leaf_paths, expected_level_size,
    expected_level_variance, level_statistics, sample_tree, sample_tree_with_root,
};
use blockbp_core::{
    overlap_accuracy, reconstruct_algorithm1, sample_sbm, Algorithm1Config, NoiseMatrix,
    SbmInstance, TreeParams,
};

use crate::config::{ExperimentConfig, ExperimentKind, MethodName, ModelConfig};
use crate::graph_io;
use crate::report::{ExperimentReport, ReportRow};

/// Cushion added to Monte Carlo tolerances so rows whose standard error
/// is exactly zero still accept representation-level wiggle.
const SE_CUSHION: f64 = 1e-12;

fn core_err<E: core::fmt::Display>(e: E) -> anyhow::Error {
    anyhow!("{e}")
}

/// Seed for a row's sampling stream: independent streams per experiment,
/// row label, and index.
fn stream(exp_seed: u64, row: &str, index: u64) -> u64 {
    rng::mix(rng::mix(exp_seed, rng::hash_tag(row.as_bytes())), index)
}

/// Two-index stream for rows swept over a parameter.
fn stream2(exp_seed: u64, row: &str, a: u64, b: u64) -> u64 {
    rng::mix(stream(exp_seed, row, a), b)
}

/// Runs the configured experiment and returns its report.
pub fn run(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let tag = cfg.experiment.tag();
    let exp_seed = rng::mix(cfg.seed, rng::hash_tag(tag.as_bytes()));
    let mut report = ExperimentReport::new(tag, cfg.seed, &cfg.canonical_json());
    match cfg.experiment {
        ExperimentKind::CheckModel => run_check_model(cfg, &mut report)?,
        ExperimentKind::TreeMoments => run_tree_moments(cfg, exp_seed, &mut report)?,
        ExperimentKind::TreeRecon => run_tree_recon(cfg, exp_seed, &mut report)?,
        ExperimentKind::Contraction => run_contraction(cfg, exp_seed, &mut report)?,
        ExperimentKind::SbmRecon => run_sbm_recon(cfg, exp_seed, &mut report)?,
    }
    Ok(report)
}

/// One row per model condition plus the spectral summary values. Fully
/// deterministic: no sampling at all.
fn run_check_model(cfg: &ExperimentConfig, report: &mut ExperimentReport) -> Result<()> {
    let (spec, t, s) = cfg.build_model()?;
    let noise = cfg.build_noise(spec.q())?;
    let rep = check_conditions(&spec, &t, &s, noise.as_ref());
    let q = spec.q();
    report.push(ReportRow::boolean(
        "condition-1-row-separation",
        format!("q={q} lambda2={}", rep.lambda2_abs),
        rep.delta,
        rep.cond_row_separation(),
        "closed form",
    ));
    report.push(ReportRow::boolean(
        "condition-2-degree-uniformity",
        format!("d={}", t.d),
        rep.degree_uniformity_error,
        rep.cond_degree_uniform(),
        "closed form",
    ));
    report.push(ReportRow::boolean(
        "condition-3-entry-floor",
        format!("q={q}"),
        rep.xi_floor,
        rep.cond_entry_floor(),
        "closed form",
    ));
    let (noise_params, noise_det) = match &noise {
        Some(nm) => (format!("det={}", nm.determinant()), nm.determinant()),
        None => ("no noise configured".to_string(), 1.0),
    };
    report.push(ReportRow::boolean(
        "condition-4-noise-invertible",
        noise_params,
        noise_det,
        rep.cond_noise_invertible(),
        "closed form",
    ));
    if let ModelConfig::Symmetric { q, a, b, .. } = cfg.model {
        // For the symmetric model lambda_2^2 d reduces to
        // (a-b)^2 / (q (a + (q-1) b)).
        let target = (a - b) * (a - b) / (q as f64 * (a + (q as f64 - 1.0) * b));
        report.push(ReportRow::two_sided(
            "lambda2-sq-d",
            format!("a={a} b={b} q={q}"),
            s.ks_quantity,
            None,
            target,
            1e-9,
            "closed form",
        ));
    } else {
        report.push(ReportRow::info(
            "lambda2-sq-d",
            format!("q={q} d={}", t.d),
            s.ks_quantity,
            None,
        ));
    }
    report.push(ReportRow::info("lambda-min-sq-d", format!("q={q}"), s.ks_min, None));
    report.push(ReportRow::info(
        "taylor-expansion-feasible",
        format!("d={}", t.d),
        if rep.taylor_constraint_ok { 1.0 } else { 0.0 },
        None,
    ));
    let satisfied = [
        rep.cond_row_separation(),
        rep.cond_degree_uniform(),
        rep.cond_entry_floor(),
        rep.cond_noise_invertible(),
    ]
    .iter()
    .filter(|&&c| c)
    .count();
    report.push(ReportRow::boolean(
        "all-conditions",
        format!("satisfied={satisfied}/4"),
        satisfied as f64,
        rep.all_conditions_hold(),
        "closed form",
    ));
    Ok(())
}

/// Level moments, leaf-pair counts, and eigenvector-weighted level sums
/// of sampled trees against their closed forms at four standard errors.
fn run_tree_moments(
    cfg: &ExperimentConfig,
    exp_seed: u64,
    report: &mut ExperimentReport,
) -> Result<()> {
    let (spec, t, s) = cfg.build_model()?;
    let noise = cfg.build_noise(spec.q())?;
    let params = TreeParams::from_model(&spec, &t);
    let d = t.d;
    let trials = cfg.effective_trials();
    let ell = cfg.ell.unwrap_or(1);
    let lam = s.eigenvalues[1];
    let xi1 = &s.xi[1];
    for k in cfg.effective_depths().iter() {
        let shared = format!("d={d} k={k} trials={trials}");
        let summary = level_statistics(
            (0..trials).map(|i| sample_tree(&params, k, stream2(exp_seed, "level", k as u64, i))),
            k,
        )
        .map_err(core_err)?;
        report.push(ReportRow::two_sided(
            "level-mean",
            shared.clone(),
            summary.mean,
            Some(summary.se_mean),
            expected_level_size(d, k),
            4.0 * summary.se_mean + SE_CUSHION,
            "closed form",
        ));
        report.push(ReportRow::two_sided(
            "level-variance",
            shared.clone(),
            summary.variance,
            Some(summary.se_variance),
            expected_level_variance(d, k),
            4.0 * summary.se_variance + SE_CUSHION,
            "closed form",
        ));
        if ell <= k {
            // The closed form counts ordered leaf pairs; the counter walks
            // each unordered pair once, hence the factor two. Same seeds as
            // the level rows, so the trees are literally the same draws.
            let mut acc = RunningMoments::new();
            for i in 0..trials {
                let tree = sample_tree(&params, k, stream2(exp_seed, "level", k as u64, i));
                acc.push(2.0 * count_leaf_paths(&tree, ell, k).map_err(core_err)? as f64);
            }
            report.push(ReportRow::two_sided(
                "leaf-paths",
                format!("d={d} k={k} ell={ell} trials={trials}"),
                acc.mean(),
                Some(acc.se_mean()),
                expected_leaf_paths(d, ell, k),
                4.0 * acc.se_mean() + SE_CUSHION,
                "closed form",
            ));
        }
        // Weighted sums condition on root label 0 and use the second
        // eigen-index, whose mean is (lambda_2 d)^k xi_2(0).
        let wprm = format!("{shared} eigen-index=1 root=0");
        let mut clean = RunningMoments::new();
        let mut noisy_acc = RunningMoments::new();
        for i in 0..trials {
            let seed_i = stream2(exp_seed, "weighted-sum", k as u64, i);
            let tree = sample_tree_with_root(&params, 0, k, seed_i).map_err(core_err)?;
            clean.push(weighted_sum(&tree, k, xi1, false, None).map_err(core_err)?);
            if let Some(nm) = &noise {
                let noisy_tree =
                    apply_noise(&tree, nm, stream2(exp_seed, "observation-noise", k as u64, i));
                noisy_acc.push(weighted_sum(&noisy_tree, k, xi1, true, Some(nm)).map_err(core_err)?);
            }
        }
        let target = expected_weighted_sum(lam, d, k, xi1[0]);
        report.push(ReportRow::two_sided(
            "weighted-sum",
            wprm.clone(),
            clean.mean(),
            Some(clean.se_mean()),
            target,
            4.0 * clean.se_mean() + SE_CUSHION,
            "closed form",
        ));
        report.push(ReportRow::at_most(
            "weighted-sum-variance",
            wprm.clone(),
            clean.variance(),
            Some(clean.se_of_variance()),
            weighted_sum_variance_bound(lam, d, k, spec.pi(), xi1)
                + 4.0 * clean.se_of_variance()
                + SE_CUSHION,
            "closed form",
        ));
        if noise.is_some() {
            report.push(ReportRow::two_sided(
                "weighted-sum-noisy",
                wprm,
                noisy_acc.mean(),
                Some(noisy_acc.se_mean()),
                target,
                4.0 * noisy_acc.se_mean() + SE_CUSHION,
                "closed form",
            ));
        }
    }
    Ok(())
}

/// Root-recovery estimators swept over depths. Rows with exact targets
/// (depth zero, or a spectrally degenerate model where the posterior is
/// the prior) are asserted; the rest are reported.
fn run_tree_recon(
    cfg: &ExperimentConfig,
    exp_seed: u64,
    report: &mut ExperimentReport,
) -> Result<()> {
    let (spec, t, s) = cfg.build_model()?;
    let noise = cfg.build_noise(spec.q())?;
    let params = TreeParams::from_model(&spec, &t);
    let trials = cfg.effective_trials();
    let q = spec.q();
    let max_pi = spec.pi().iter().fold(0.0f64, |a, &b| a.max(b));
    // Eigenvalues are magnitude-sorted, so a vanishing second one makes
    // the transition rank one and every posterior equal to the prior.
    let gap_zero = s.eigenvalues[1].abs() < LAMBDA2_ZERO_TOL;
    let methods: Vec<MethodName> = match &cfg.methods {
        Some(m) => m.clone(),
        None => {
            let mut m = vec![MethodName::Majority, MethodName::Iterated, MethodName::Bp];
            if noise.is_some() {
                m.push(MethodName::BpNoisy);
            }
            m
        }
    };
    for k in cfg.effective_depths().iter() {
        for method in &methods {
            let prm = format!("k={k} trials={trials}");
            match method {
                // The level-sum classifier needs a level below the root and
                // the iterated one an intermediate level on top of that.
                MethodName::Majority if k < 1 => {}
                MethodName::Iterated if k < 2 => {}
                MethodName::Majority => {
                    let mut acc = RunningMoments::new();
                    for i in 0..trials {
                        let tree =
                            sample_tree(&params, k, stream2(exp_seed, "majority", k as u64, i));
                        let out = majority_classify(&tree, &s, k, false, None).map_err(core_err)?;
                        acc.push(if out.guess == tree.sigma(0) { 1.0 } else { 0.0 });
                    }
                    report.push(ReportRow::info(
                        "majority-accuracy",
                        prm,
                        acc.mean(),
                        Some(acc.se_mean()),
                    ));
                }
                MethodName::Iterated => {
                    let mut acc = RunningMoments::new();
                    for i in 0..trials {
                        let tree =
                            sample_tree(&params, k, stream2(exp_seed, "iterated", k as u64, i));
                        let out = iterated_majority_classify(&tree, &s, k).map_err(core_err)?;
                        acc.push(if out.guess == tree.sigma(0) { 1.0 } else { 0.0 });
                    }
                    report.push(ReportRow::info(
                        "iterated-accuracy",
                        prm,
                        acc.mean(),
                        Some(acc.se_mean()),
                    ));
                }
                MethodName::Bp => {
                    let est = estimate_recovery(&params, k, trials, stream(exp_seed, "bp", k as u64))
                        .map_err(core_err)?;
                    let mp = est.max_posterior;
                    let row = if k == 0 {
                        // Conditioning on the root itself pins the posterior.
                        ReportRow::two_sided(
                            "bp-mean-max-posterior",
                            prm.clone(),
                            mp.mean,
                            Some(mp.se),
                            1.0,
                            1e-12,
                            "closed form",
                        )
                    } else if gap_zero {
                        ReportRow::two_sided(
                            "bp-mean-max-posterior",
                            prm.clone(),
                            mp.mean,
                            Some(mp.se),
                            max_pi,
                            4.0 * mp.se + SE_CUSHION,
                            "closed form",
                        )
                    } else {
                        ReportRow::info("bp-mean-max-posterior", prm.clone(), mp.mean, Some(mp.se))
                    };
                    report.push(row);
                    report.push(ReportRow::info(
                        "bp-argmax-accuracy",
                        prm,
                        est.argmax_correct.mean,
                        Some(est.argmax_correct.se),
                    ));
                }
                MethodName::BpNoisy => {
                    let nm = noise.as_ref().expect("validated: bp-noisy requires noise");
                    let est = estimate_recovery_noisy(
                        &params,
                        nm,
                        k,
                        trials,
                        stream(exp_seed, "bp-noisy", k as u64),
                    )
                    .map_err(core_err)?;
                    let mp = est.max_posterior;
                    let row = if k == 0 {
                        // Given only the root's corrupted label the posterior
                        // is the prior-weighted noise column, so the expected
                        // max is sum_j max_i pi_i delta(i j).
                        let target: f64 = (0..q)
                            .map(|j| {
                                (0..q).map(|i| spec.pi()[i] * nm.get(i, j)).fold(0.0f64, f64::max)
                            })
                            .sum();
                        ReportRow::two_sided(
                            "bp-noisy-mean-max-posterior",
                            prm.clone(),
                            mp.mean,
                            Some(mp.se),
                            target,
                            4.0 * mp.se + SE_CUSHION,
                            "closed form",
                        )
                    } else if gap_zero {
                        ReportRow::two_sided(
                            "bp-noisy-mean-max-posterior",
                            prm.clone(),
                            mp.mean,
                            Some(mp.se),
                            max_pi,
                            4.0 * mp.se + SE_CUSHION,
                            "closed form",
                        )
                    } else {
                        ReportRow::info(
                            "bp-noisy-mean-max-posterior",
                            prm.clone(),
                            mp.mean,
                            Some(mp.se),
                        )
                    };
                    report.push(row);
                    report.push(ReportRow::info(
                        "bp-noisy-argmax-accuracy",
                        prm,
                        est.argmax_correct.mean,
                        Some(est.argmax_correct.se),
                    ));
                }
            }
        }
    }
    let rep = check_conditions(&spec, &t, &s, noise.as_ref());
    if rep.delta.is_finite() && rep.delta > 0.0 {
        let qf = q as f64;
        let bound = 2.0 * qf * (-(rep.delta * rep.delta * qf * qf / 32.0) * s.ks_quantity).exp();
        report.push(ReportRow::info(
            "iterated-error-bound",
            format!("delta={} lambda2-sq-d={}", rep.delta, s.ks_quantity),
            bound,
            None,
        ));
    }
    Ok(())
}

/// Worst-violation tracker for a family of zero-mean statistics: keeps the
/// cell maximizing `|mean| - (4 se + cushion)`, so the family passes iff
/// the kept cell does.
#[derive(Clone, Copy)]
struct WorstCell {
    margin: f64,
    mean: f64,
    se: f64,
}

impl WorstCell {
    fn new() -> Self {
        WorstCell { margin: f64::NEG_INFINITY, mean: 0.0, se: 0.0 }
    }

    fn update(&mut self, mean: f64, se: f64) {
        let margin = mean.abs() - (4.0 * se + 1e-15);
        if margin > self.margin {
            *self = WorstCell { margin, mean, se };
        }
    }

    fn row(&self, name: &'static str, prm: String) -> ReportRow {
        ReportRow::two_sided(name, prm, self.mean, Some(self.se), 0.0, 4.0 * self.se + 1e-15, "exact identity")
    }
}

/// Contraction of the noisy posterior toward the exact one: the largest
/// conditional mean difference per depth, plus exact moment identities
/// tying the coupled posteriors together at the deepest depth.
fn run_contraction(
    cfg: &ExperimentConfig,
    exp_seed: u64,
    report: &mut ExperimentReport,
) -> Result<()> {
    let (spec, t, _s) = cfg.build_model()?;
    let noise = cfg
        .build_noise(spec.q())?
        .ok_or_else(|| anyhow!("contraction requires a noise matrix"))?;
    let params = TreeParams::from_model(&spec, &t);
    let trials = cfg.effective_trials();
    let q = spec.q();
    // With identity noise the coupled posteriors are bit-identical, so
    // every epsilon is exactly zero and the rows assert that.
    let is_identity = (0..q).all(|i| {
        (0..q).all(|j| {
            let want = if i == j { 1.0 } else { 0.0 };
            (noise.get(i, j) - want).abs() < 1e-15
        })
    });
    let depths: Vec<usize> = cfg.effective_depths().iter().collect();
    let mut eps = Vec::new();
    for &n in &depths {
        let em = error_matrix_mc(&params, &noise, n, trials, stream(exp_seed, "error-matrix", n as u64))
            .map_err(core_err)?;
        let (mut wi, mut wj) = (0usize, 0usize);
        for i in 0..q {
            for j in 0..q {
                if em.e.get(i, j).abs() > em.e.get(wi, wj).abs() {
                    wi = i;
                    wj = j;
                }
            }
        }
        let prm = format!("n={n} trials={trials} cell={wi}:{wj}");
        let se = em.se.get(wi, wj);
        let row = if is_identity {
            ReportRow::two_sided("epsilon", prm, em.epsilon, Some(se), 0.0, 4.0 * se + 1e-15, "closed form")
        } else {
            ReportRow::info("epsilon", prm, em.epsilon, Some(se))
        };
        report.push(row);
        eps.push(em.epsilon);
    }
    let n_id = *depths.last().expect("validated: nonempty depth range");
    let ic = identity_checks_mc(&params, &noise, n_id, trials, stream(exp_seed, "identities", n_id as u64))
        .map_err(core_err)?;
    let mut diag = WorstCell::new();
    let mut cov = WorstCell::new();
    let mut sq = WorstCell::new();
    for i in 0..q {
        for j in 0..q {
            let cell = if i == j { &mut diag } else { &mut cov };
            cell.update(ic.pair_mean.get(i, j), ic.pair_se.get(i, j));
        }
    }
    for st in &ic.square {
        sq.update(st.mean, st.se);
    }
    let prm = format!("n={n_id} trials={trials}");
    report.push(diag.row("identity-diagonal", prm.clone()));
    report.push(cov.row("identity-covariance", prm.clone()));
    report.push(sq.row("identity-difference-of-squares", prm));
    let ratio = if eps[0] > 0.0 { eps[eps.len() - 1] / eps[0] } else { 0.0 };
    report.push(ReportRow::info(
        "epsilon-ratio-last-first",
        format!("n-first={} n-last={n_id}", depths[0]),
        ratio,
        None,
    ));
    Ok(())
}

/// Graph reconstruction: the global partitioner alone versus the locally
/// amplified labeling, paired per graph, plus the tree-model ceiling and
/// ball diagnostics.
fn run_sbm_recon(
    cfg: &ExperimentConfig,
    exp_seed: u64,
    report: &mut ExperimentReport,
) -> Result<()> {
    let (spec, t, s) = cfg.build_model()?;
    let noise = cfg.build_noise(spec.q())?;
    let q = spec.q();
    let instances: Vec<SbmInstance> = match &cfg.graph {
        Some(files) => {
            let g = graph_io::read_graph(&files.edges, &files.labels)?;
            if g.q() != q {
                bail!("graph file declares q={} but the model has q={q}", g.q());
            }
            vec![g]
        }
        None => {
            let count = cfg.graph_seeds.unwrap_or(5);
            (0..count)
                .map(|i| sample_sbm(&spec, stream(exp_seed, "graph", i)).map_err(core_err))
                .collect::<Result<_>>()?
        }
    };
    let mut bb_acc = RunningMoments::new();
    let mut a1_acc = RunningMoments::new();
    let mut diff = RunningMoments::new();
    let mut tree_rate = RunningMoments::new();
    let mut fallback_rate = RunningMoments::new();
    let mut bp_failures = 0usize;
    let mut noise_sum: Option<(Vec<f64>, u64)> = None;
    let mut radius_used = 0usize;
    let (mut last_bb, mut last_a1) = (0.0, 0.0);
    for (i, g) in instances.iter().enumerate() {
        let rcfg = Algorithm1Config {
            radius: cfg.radius,
            seed: stream(exp_seed, "recon", i as u64),
            approx_blackbox: cfg.approx_blackbox,
            enforce_conditions: true,
        };
        let out = reconstruct_algorithm1(g, &spec, &t, &s, &rcfg).map_err(core_err)?;
        let truth = g.truth_partition();
        let a_bb = overlap_accuracy(&out.diagnostics.reference, &truth);
        let a_1 = overlap_accuracy(&out.partition, &truth);
        bb_acc.push(a_bb);
        a1_acc.push(a_1);
        diff.push(a_1 - a_bb);
        last_bb = a_bb;
        last_a1 = a_1;
        let dg = &out.diagnostics;
        let balls = dg.balls_total.max(1) as f64;
        tree_rate.push(dg.balls_tree_like as f64 / balls);
        fallback_rate.push(dg.noise_fallbacks as f64 / balls);
        bp_failures += dg.bp_failures;
        radius_used = dg.radius;
        if let Some(nm) = &dg.mean_noise {
            let (sum, count) = noise_sum.get_or_insert((vec![0.0; q * q], 0));
            for a in 0..q {
                for b in 0..q {
                    sum[a * q + b] += nm.get(a, b);
                }
            }
            *count += 1;
        }
        report.push(ReportRow::info(
            "per-graph-accuracy",
            format!("graph={i} n={} radius={} blackbox={a_bb}", g.n(), dg.radius),
            a_1,
            None,
        ));
    }
    let seeds = instances.len();
    let se_of = |m: &RunningMoments| if m.count() >= 2 { Some(m.se_mean()) } else { None };
    report.push(ReportRow::info(
        "blackbox-accuracy",
        format!("graphs={seeds}"),
        bb_acc.mean(),
        se_of(&bb_acc),
    ));
    report.push(ReportRow::info(
        "algorithm1-accuracy",
        format!("graphs={seeds}"),
        a1_acc.mean(),
        se_of(&a1_acc),
    ));
    // Amplification must not lose ground to the global partitioner alone:
    // the paired mean difference stays above minus two standard errors.
    let floor = if seeds >= 2 {
        -2.0 * diff.se_mean()
    } else {
        // One paired run: binomial error of each accuracy over n vertices.
        let n = instances[0].n() as f64;
        -2.0 * ((last_bb * (1.0 - last_bb) + last_a1 * (1.0 - last_a1)) / n).sqrt()
    };
    report.push(ReportRow::at_least(
        "paired-difference",
        format!("graphs={seeds}"),
        diff.mean(),
        se_of(&diff),
        floor,
        "calibrated baseline",
    ));
    // The 95% floor is calibrated for sparse graphs (rates at most 8) of
    // at least 10^4 vertices; outside that regime the rate is reported.
    let n0 = instances[0].n();
    let sparse_regime = spec.q_scaled().max_abs_entry() <= 8.0 && n0 >= 10_000;
    let tl_prm = format!("graphs={seeds} n={n0} radius={radius_used}");
    if sparse_regime {
        report.push(ReportRow::at_least(
            "tree-likeness-rate",
            tl_prm,
            tree_rate.mean(),
            se_of(&tree_rate),
            0.95,
            "calibrated baseline",
        ));
    } else {
        report.push(ReportRow::info(
            "tree-likeness-rate",
            tl_prm,
            tree_rate.mean(),
            se_of(&tree_rate),
        ));
    }
    report.push(ReportRow::info(
        "noise-fallback-rate",
        format!("graphs={seeds}"),
        fallback_rate.mean(),
        None,
    ));
    report.push(ReportRow::info(
        "bp-failure-count",
        format!("graphs={seeds}"),
        bp_failures as f64,
        None,
    ));
    // Average estimated observation noise across graphs, against the
    // configured noise (identity when none is configured).
    let mut ceiling_noise = noise.clone();
    if let Some((sum, count)) = &noise_sum {
        let mut rows = vec![vec![0.0f64; q]; q];
        for a in 0..q {
            for b in 0..q {
                rows[a][b] = sum[a * q + b] / *count as f64;
            }
        }
        let reference = noise.clone().unwrap_or_else(|| NoiseMatrix::identity(q));
        let mut dev = 0.0f64;
        for a in 0..q {
            for b in 0..q {
                dev = dev.max((rows[a][b] - reference.get(a, b)).abs());
            }
        }
        report.push(ReportRow::info(
            "delta-estimate-max-deviation",
            format!("graphs={seeds} estimates={count}"),
            dev,
            None,
        ));
        if ceiling_noise.is_none() {
            // Averaged row-stochastic rows stay row-stochastic.
            if let Ok(nm) = NoiseMatrix::new(SquareMatrix::from_rows(&rows)) {
                ceiling_noise = Some(nm);
            }
        }
    }
    // What the local step could achieve at this radius if every ball were
    // an exactly sampled tree with the given observation noise.
    if let Some(nm) = &ceiling_noise {
        let params = TreeParams::from_model(&spec, &t);
        let trials = cfg.effective_trials().max(100);
        let est = estimate_recovery_noisy(&params, nm, radius_used, trials, stream(exp_seed, "ceiling", 0))
            .map_err(core_err)?;
        report.push(ReportRow::info(
            "tree-model-ceiling",
            format!("radius={radius_used} trials={trials}"),
            est.max_posterior.mean,
            Some(est.max_posterior.se),
        ));
    }
    Ok(())
}
