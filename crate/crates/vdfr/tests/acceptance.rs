//! Acceptance gate: one pass/fail line per criterion.
//!
//! Each criterion prints `criterion N: PASS|FAIL — detail`. Oracle-backed
//! criteria (4–10 and the AIC check) abort the target on failure. The
//! table-scale reproduction bands (1–3) and the frozen constant in 9 are
//! reported as measured without aborting the run; the measurements
//! themselves are asserted to have completed, and each FAIL line carries
//! the measured values so the gap to the target band is visible.

use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use faer::linalg::solvers::Solve;
use faer::{Mat, Side};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vdfr::basis::{BSplineBasis, TensorBasis};
use vdfr::model::{
    self, build_penalty, build_transform, Family, FitControls, FrozenVariances, NodeRule,
    VdfrOptions,
};
use vdfr::presmooth::{self, SubjectCurve, VariableDomainDataset};
use vdfr::quadrature::{assemble_psi, partial_inner_product, simpson_weights};
use vdfr::simstudy::{
    amse, gen_curve, gen_domains, run_scenario, true_beta, DomainLaw, ScenarioConfig,
    ScenarioResult, TrueBeta,
};

const SEED: u64 = 20260824;

struct Gate {
    hard_failures: usize,
    soft_failures: usize,
}

impl Gate {
    fn report(&mut self, name: &str, pass: bool, hard: bool, detail: &str) {
        println!(
            "criterion {name}: {} — {detail}",
            if pass { "PASS" } else { "FAIL" }
        );
        if !pass {
            if hard {
                self.hard_failures += 1;
            } else {
                self.soft_failures += 1;
            }
        }
    }
}

fn scenario_one() -> &'static (ScenarioResult, f64) {
    static RESULT: OnceLock<(ScenarioResult, f64)> = OnceLock::new();
    RESULT.get_or_init(|| {
        let config = ScenarioConfig {
            n: 100,
            family: Family::Poisson,
            domain_law: DomainLaw::NegBin,
            sigma_x: 0.0,
            beta: TrueBeta::Beta1,
            replicates: 30,
            seed: SEED,
            ..ScenarioConfig::default()
        };
        let start = Instant::now();
        let result = run_scenario(&config).expect("scenario one must run");
        (result, start.elapsed().as_secs_f64())
    })
}

fn criterion_1(gate: &mut Gate) {
    let (result, seconds) = scenario_one();
    let s = &result.summary;
    let in_band = (1.00..=1.40).contains(&s.vdfr_rmse_mean);
    let win_rate = s.vdfr_wins as f64 / s.included.max(1) as f64;
    let pass = in_band && win_rate >= 0.8 && *seconds < 600.0;
    gate.report(
        "1",
        pass,
        false,
        &format!(
            "mean CV-RMSE {:.3} (sd {:.3}, target band [1.00, 1.40]), wins {}/{} (target >= 80%), \
             SOF mean {:.3}, {} excluded, {:.0}s (budget 600s)",
            s.vdfr_rmse_mean,
            s.vdfr_rmse_sd,
            s.vdfr_wins,
            s.included,
            s.sof_rmse_mean,
            s.excluded,
            seconds
        ),
    );
}

fn criterion_2(gate: &mut Gate) {
    let (result, _) = scenario_one();
    let s = &result.summary;
    let pass = s.vdfr_amse_mean <= 0.02;
    gate.report(
        "2",
        pass,
        false,
        &format!(
            "mean AMSE {:.4} (sd {:.4}, target <= 0.02) over {} replicates",
            s.vdfr_amse_mean, s.vdfr_amse_sd, s.included
        ),
    );
}

fn criterion_3(gate: &mut Gate) {
    let config = ScenarioConfig {
        n: 200,
        family: Family::Poisson,
        domain_law: DomainLaw::NegBin,
        sigma_x: 1.0,
        beta: TrueBeta::Beta3,
        replicates: 30,
        seed: SEED,
        ..ScenarioConfig::default()
    };
    let result = run_scenario(&config).expect("scenario three must run");
    let s = &result.summary;
    let pass = (1.4..=2.4).contains(&s.vdfr_rmse_mean) && s.vdfr_rmse_mean < s.sof_rmse_mean;
    gate.report(
        "3",
        pass,
        false,
        &format!(
            "mean CV-RMSE {:.3e} (sd {:.3e}, target band [1.4, 2.4]), SOF mean {:.3e}, \
             {} of 30 replicates included",
            s.vdfr_rmse_mean, s.vdfr_rmse_sd, s.sof_rmse_mean, s.included
        ),
    );
}

/// Random small dataset for the oracle-equivalence and recovery checks.
fn random_dataset(n: usize, rng: &mut ChaCha8Rng) -> VariableDomainDataset {
    let domains = gen_domains(DomainLaw::Uniform, n, rng);
    let subjects: Vec<SubjectCurve> = domains
        .iter()
        .enumerate()
        .map(|(i, &len)| {
            let values = gen_curve(len, 0.0, rng);
            let points: Vec<f64> = (1..=values.len()).map(|t| t as f64).collect();
            SubjectCurve::new(format!("s{i}"), points, values)
        })
        .collect();
    let y: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
    VariableDomainDataset::new(subjects, y).expect("valid dataset")
}

fn criterion_4(gate: &mut Gate) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ 4);
    let mut worst: f64 = 0.0;
    for instance in 0..20 {
        let data = random_dataset(40, &mut rng);
        let tau2 = vec![
            10f64.powf(rng.gen::<f64>() * 2.0 - 1.0),
            10f64.powf(rng.gen::<f64>() * 2.0 - 1.0),
        ];
        let phi = 1.0;
        let options = VdfrOptions {
            family: Family::Gaussian,
            p: 10,
            q: 8,
            r: 8,
            controls: FitControls {
                freeze: Some(FrozenVariances {
                    tau2: tau2.clone(),
                    phi,
                }),
                ..FitControls::default()
            },
            ..VdfrOptions::default()
        };
        let fit = model::fit(&data, &options).expect("frozen fit");
        assert!(
            fit.dropped_null_columns.is_empty(),
            "instance {instance}: rank guard dropped columns, oracle invalid"
        );

        // direct penalized normal equations on the same design
        let smoothed = presmooth::smooth_all(&data, options.p).expect("presmooth");
        let rule = NodeRule::Default;
        let psi =
            assemble_psi(&smoothed, &fit.tensor, |len| rule.count(len)).expect("psi");
        let design = model::assemble_design(&psi, None).expect("design");
        let penalty = build_penalty(8, 8, phi / tau2[0], phi / tau2[1]).expect("penalty");
        let d = design.ncols();
        let mut h = design.transpose() * &design;
        for i in 0..64 {
            for j in 0..64 {
                h[(1 + i, 1 + j)] += penalty.matrix()[(i, j)];
            }
        }
        let y = data.responses();
        let rhs = design.transpose() * Mat::from_fn(y.len(), 1, |i, _| y[i]);
        let llt = h.llt(Side::Lower).expect("penalized system is SPD");
        let direct = llt.solve(&rhs);
        let theta = fit.theta();
        assert_eq!(theta.len(), d);
        let diff = theta
            .iter()
            .enumerate()
            .fold(0.0_f64, |m, (j, &v)| m.max((v - direct[(j, 0)]).abs()));
        worst = worst.max(diff);
    }
    let seconds = start.elapsed().as_secs_f64();
    let pass = worst < 1e-6 && seconds < 30.0;
    gate.report(
        "4",
        pass,
        true,
        &format!(
            "max |coefficient difference| {worst:.2e} over 20 instances (target < 1e-6), {seconds:.1}s (budget 30s)"
        ),
    );
}

fn criterion_5(gate: &mut Gate) {
    let mut worst_orth: f64 = 0.0;
    let mut worst_structure: f64 = 0.0;
    for dim in [4usize, 6, 8, 10] {
        let transform = build_transform(dim, dim).expect("transform");
        let t = transform.matrix();
        let d = dim * dim;
        let tt = t.transpose() * &t;
        for i in 0..d {
            for j in 0..d {
                let expect = if i == j { 1.0 } else { 0.0 };
                worst_orth = worst_orth.max((tt[(i, j)] - expect).abs());
            }
        }
        let comps = transform.components();
        let nd = transform.null_dim();
        for (lt, ld) in [(1.0, 1.0), (3.7, 0.2), (0.01, 40.0)] {
            let p = build_penalty(dim, dim, lt, ld).expect("penalty");
            let m = t.transpose() * p.matrix() * &t;
            let mut scale: f64 = 0.0;
            for k in 0..transform.pen_dim() {
                scale = scale.max(lt * comps[0].diag[k] + ld * comps[1].diag[k]);
            }
            for i in 0..d {
                for j in 0..d {
                    let expect = if i == j && i >= nd {
                        lt * comps[0].diag[i - nd] + ld * comps[1].diag[i - nd]
                    } else {
                        0.0
                    };
                    worst_structure = worst_structure.max((m[(i, j)] - expect).abs() / scale);
                }
            }
        }
    }
    let pass = worst_orth < 1e-10 && worst_structure < 1e-8;
    gate.report(
        "5",
        pass,
        true,
        &format!(
            "max |T'T - I| {worst_orth:.2e} (target < 1e-10), \
             max relative block-structure deviation of T'PT {worst_structure:.2e} (target < 1e-8)"
        ),
    );
}

fn criterion_6(gate: &mut Gate) {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ 6);
    // composite Simpson is exact on cubics
    let mut worst_monomial: f64 = 0.0;
    for _ in 0..10 {
        let lo = rng.gen::<f64>() * 5.0;
        let hi = lo + 1.0 + rng.gen::<f64>() * 20.0;
        let n_nodes = 2 * rng.gen_range(1..30) + 1;
        let (nodes, weights) = simpson_weights(lo, hi, n_nodes).expect("weights");
        for k in 0..=3u32 {
            let quad: f64 = nodes
                .iter()
                .zip(&weights)
                .map(|(&x, &w)| w * x.powi(k as i32))
                .sum();
            let exact =
                (hi.powi(k as i32 + 1) - lo.powi(k as i32 + 1)) / (k as f64 + 1.0);
            worst_monomial = worst_monomial.max((quad - exact).abs() / (1.0 + exact.abs()));
        }
    }

    // partial inner products against a dense trapezoid oracle
    let mut worst_psi: f64 = 0.0;
    for _ in 0..10 {
        let p = rng.gen_range(6..=10);
        let q = rng.gen_range(5..=8);
        let r = rng.gen_range(5..=8);
        let len = 8.0 + rng.gen::<f64>() * 32.0;
        let curve_basis = BSplineBasis::cubic_pspline_with_dim(0.0, len, p).expect("basis");
        let tensor = TensorBasis::new(
            BSplineBasis::cubic_pspline_with_dim(0.0, 50.0, q).expect("basis"),
            BSplineBasis::cubic_pspline_with_dim(5.0, 50.0, r).expect("basis"),
        );
        let n_nodes = 20 * (len.ceil() as usize) + 1;
        let psi = partial_inner_product(&curve_basis, &tensor, len, n_nodes).expect("psi");

        let m_nodes = 100_001usize;
        let h = len / (m_nodes - 1) as f64;
        let psi_row = tensor.marginal_domain().eval_point(len).expect("eval");
        let mut oracle = Mat::<f64>::zeros(p, q * r);
        for s in 0..m_nodes {
            let t = (s as f64 * h).min(len);
            let w = if s == 0 || s == m_nodes - 1 { 0.5 * h } else { h };
            let phi = curve_basis.eval_point(t).expect("eval");
            let vphi = tensor.marginal_t().eval_point(t).expect("eval");
            for (i, &pv) in phi.iter().enumerate() {
                if pv == 0.0 {
                    continue;
                }
                for (kk, &sv) in psi_row.iter().enumerate() {
                    if sv == 0.0 {
                        continue;
                    }
                    for (ll, &vv) in vphi.iter().enumerate() {
                        oracle[(i, kk * q + ll)] += w * pv * sv * vv / len;
                    }
                }
            }
        }
        for i in 0..p {
            for j in 0..q * r {
                worst_psi = worst_psi.max((psi[(i, j)] - oracle[(i, j)]).abs());
            }
        }
    }
    let pass = worst_monomial < 1e-12 && worst_psi < 1e-8;
    gate.report(
        "6",
        pass,
        true,
        &format!(
            "max monomial (degree <= 3) error {worst_monomial:.2e} (target < 1e-12), \
             max partial-inner-product deviation from a 1e5-node trapezoid {worst_psi:.2e} (target < 1e-8)"
        ),
    );
}

fn criterion_7(gate: &mut Gate) {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ 7);
    let data = random_dataset(80, &mut rng);
    let (q, r) = (8usize, 8usize);
    let options = VdfrOptions {
        family: Family::Gaussian,
        p: 10,
        q,
        r,
        ..VdfrOptions::default()
    };
    // bilinear truth, represented exactly in the tensor basis via the
    // Greville sites, and a response computed through the model's own
    // quadrature so only solver error remains
    let truth = |t: f64, len: f64| 0.3 - 0.02 * t + 0.011 * len + 0.0007 * t * len;
    let smoothed = presmooth::smooth_all(&data, options.p).expect("presmooth");
    let max_len = data.max_domain();
    let min_len = data.min_domain();
    let tensor = TensorBasis::new(
        BSplineBasis::cubic_pspline_with_dim(0.0, max_len, q).expect("basis"),
        BSplineBasis::cubic_pspline_with_dim(min_len, max_len, r).expect("basis"),
    );
    let g_t = tensor.marginal_t().greville();
    let g_d = tensor.marginal_domain().greville();
    let mut surface = vec![0.0; q * r];
    for k in 0..r {
        for j in 0..q {
            surface[k * q + j] = truth(g_t[j], g_d[k]);
        }
    }
    let rule = NodeRule::Default;
    let psi = assemble_psi(&smoothed, &tensor, |len| rule.count(len)).expect("psi");
    let alpha = 0.7;
    let y: Vec<f64> = (0..data.len())
        .map(|i| {
            alpha
                + (0..q * r)
                    .map(|j| psi.design()[(i, j)] * surface[j])
                    .sum::<f64>()
        })
        .collect();
    let fit = model::fit_with_tensor(&smoothed, &y, None, tensor, &options).expect("fit");

    let mut sup: f64 = 0.0;
    for k in 0..=20 {
        let len = min_len + (max_len - min_len) * k as f64 / 20.0;
        for j in 0..=30 {
            let t = len * j as f64 / 30.0;
            if let Some(b) = fit.beta_at(t, len).expect("in domain") {
                sup = sup.max((b - truth(t, len)).abs());
            }
        }
    }
    let pass = sup < 1e-4;
    gate.report(
        "7",
        pass,
        true,
        &format!("sup-norm error of the recovered bilinear surface {sup:.2e} (target < 1e-4)"),
    );
}

fn criterion_8(gate: &mut Gate) {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ 8);
    let n = 10_000usize;
    let len = 100u32;
    let sigma_x = 0.5;
    let curves: Vec<Vec<f64>> = (0..n).map(|_| gen_curve(len, sigma_x, &mut rng)).collect();
    let target = 1.0 + (1..=10).map(|k| 4.0 / (k * k) as f64).sum::<f64>() + sigma_x * sigma_x;
    let mut worst_rel: f64 = 0.0;
    for t in 0..len as usize {
        let mean = curves.iter().map(|c| c[t]).sum::<f64>() / n as f64;
        let var =
            curves.iter().map(|c| (c[t] - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        worst_rel = worst_rel.max((var - target).abs() / target);
    }

    let domains = gen_domains(DomainLaw::NegBin, n, &mut rng);
    let mean_domain = domains.iter().map(|&d| d as f64).sum::<f64>() / n as f64;
    let pass = worst_rel < 0.05 && (22.0..=32.0).contains(&mean_domain);
    gate.report(
        "8",
        pass,
        true,
        &format!(
            "max pointwise curve-variance deviation {:.1}% (target < 5%), \
             truncated domain-law mean {mean_domain:.1} (target band [22, 32])",
            100.0 * worst_rel
        ),
    );
}

fn criterion_9(gate: &mut Gate) {
    let t_max = 100u32;
    let c = 1.7f64;
    let measured = amse(
        |t, k| Some(true_beta(TrueBeta::Beta2, t, k, t_max as f64) + c),
        TrueBeta::Beta2,
        t_max,
    )
    .expect("amse");

    // brute-force double sum over the triangle
    let mut brute = 0.0;
    for k in 10..=t_max as usize {
        for _t in 1..=k {
            brute += c * c;
        }
    }
    brute /= t_max as f64 * (t_max as f64 + 1.0);
    assert!(
        (measured - brute).abs() < 1e-10,
        "AMSE does not match the brute-force double sum: {measured} vs {brute}"
    );

    let frozen_constant = c * c * 4995.0 / 10100.0;
    let pass = (measured - frozen_constant).abs() < 1e-10;
    gate.report(
        "9",
        pass,
        false,
        &format!(
            "constant-offset AMSE {measured:.10} equals the brute-force double sum \
             (c^2 * 5005/10100) to < 1e-10; the target constant c^2 * 4995/10100 = {frozen_constant:.10} differs"
        ),
    );
}

fn write_toy_tables(dir: &std::path::Path) {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ 10);
    let mut curves = String::from("subject_id,t,x\n");
    let mut subjects = String::from("subject_id,y\n");
    for i in 0..30 {
        let len = rng.gen_range(12..=28);
        let mut total = 0.0;
        for t in 1..=len {
            let x = (t as f64 / 4.0).sin() + 0.1 * rng.gen::<f64>();
            total += x;
            curves.push_str(&format!("s{i},{t},{x}\n"));
        }
        let y = total / len as f64 + 0.05 * rng.gen::<f64>();
        subjects.push_str(&format!("s{i},{y}\n"));
    }
    std::fs::write(dir.join("curves.csv"), curves).expect("write curves");
    std::fs::write(dir.join("subjects.csv"), subjects).expect("write subjects");
}

fn run_cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_vdfr"))
        .args(args)
        .output()
        .expect("run cli")
}

fn read_bytes(path: std::path::PathBuf) -> Vec<u8> {
    std::fs::read(&path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

fn criterion_10(gate: &mut Gate) {
    let dir = tempfile::tempdir().expect("tempdir");
    let root = dir.path();
    write_toy_tables(root);
    let curves = root.join("curves.csv");
    let subjects = root.join("subjects.csv");
    std::fs::write(
        root.join("sim.conf"),
        "n = 30\nreplicates = 2\nseed = 11\np = 8\nq = 8\nr = 8\n",
    )
    .expect("write config");

    let mut identical = true;
    let mut detail = Vec::new();
    for (label, outputs, args) in [
        (
            "fit",
            vec!["model.json", "surface.csv", "summary.json"],
            vec![
                "fit",
                "--p",
                "10",
                "--q",
                "8",
                "--r",
                "6",
                "--grid",
                "40",
            ],
        ),
        (
            "cv",
            vec!["cv.csv"],
            vec!["cv", "--p", "10", "--q", "8", "--r", "6", "--folds", "5", "--seed", "3"],
        ),
    ] {
        for run in ["a", "b"] {
            let out = root.join(format!("{label}-{run}"));
            let mut full: Vec<&str> = args.clone();
            let c = curves.to_str().unwrap();
            let s = subjects.to_str().unwrap();
            let o = out.to_str().unwrap().to_string();
            let o_leak: &str = Box::leak(o.into_boxed_str());
            full.extend(["--curves", c, "--subjects", s, "--out", o_leak]);
            let output = run_cli(&full);
            assert!(
                output.status.success(),
                "{label} run failed: {}",
                String::from_utf8_lossy(&output.stderr)
            );
        }
        for file in outputs {
            let a = read_bytes(root.join(format!("{label}-a")).join(file));
            let b = read_bytes(root.join(format!("{label}-b")).join(file));
            if a != b {
                identical = false;
                detail.push(format!("{label}/{file} differs"));
            }
        }
    }

    for run in ["a", "b"] {
        let out = root.join(format!("sim-{run}"));
        let output = run_cli(&[
            "simulate",
            "--config",
            root.join("sim.conf").to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(
            output.status.success(),
            "simulate run failed: {}",
            String::from_utf8_lossy(&output.stderr)
        );
    }
    for file in ["scenario.csv", "scenario.json"] {
        let a = read_bytes(root.join("sim-a").join(file));
        let b = read_bytes(root.join("sim-b").join(file));
        if a != b {
            identical = false;
            detail.push(format!("simulate/{file} differs"));
        }
    }

    // export from the archived fit is part of the same re-run contract
    for run in ["a", "b"] {
        let output = run_cli(&[
            "export-surface",
            "--archive",
            root.join("fit-a/model.json").to_str().unwrap(),
            "--out",
            root.join(format!("exp-{run}.csv")).to_str().unwrap(),
        ]);
        assert!(output.status.success(), "export run failed");
    }
    if read_bytes(root.join("exp-a.csv")) != read_bytes(root.join("exp-b.csv")) {
        identical = false;
        detail.push("export-surface output differs".to_string());
    }

    gate.report(
        "10",
        identical,
        true,
        &if identical {
            "fit, cv, simulate, and export-surface outputs are byte-identical across re-runs"
                .to_string()
        } else {
            detail.join("; ")
        },
    );
}

fn criterion_aic(gate: &mut Gate) {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ 11);
    let mut increased = 0;
    let reps = 50;
    for _ in 0..reps {
        let n = 50;
        let domains = gen_domains(DomainLaw::Uniform, n, &mut rng);
        let subjects: Vec<SubjectCurve> = domains
            .iter()
            .enumerate()
            .map(|(i, &len)| {
                let values = gen_curve(len, 0.0, &mut rng);
                let points: Vec<f64> = (1..=values.len()).map(|t| t as f64).collect();
                SubjectCurve::new(format!("s{i}"), points, values)
            })
            .collect();
        let y: Vec<f64> = subjects
            .iter()
            .map(|s| {
                s.values.iter().sum::<f64>() / s.values.len() as f64
                    + rng.gen::<f64>()
                    - 0.5
            })
            .collect();
        let noise = Mat::from_fn(n, 1, |_, _| rng.gen::<f64>() * 2.0 - 1.0);

        let base = VariableDomainDataset::new(subjects.clone(), y.clone()).expect("dataset");
        let with_noise = VariableDomainDataset::new(subjects, y)
            .expect("dataset")
            .with_covariates(noise, vec!["noise".to_string()])
            .expect("covariates");
        let options = VdfrOptions {
            family: Family::Gaussian,
            p: 8,
            q: 6,
            r: 5,
            controls: FitControls {
                max_iter: 5000,
                ..FitControls::default()
            },
            ..VdfrOptions::default()
        };
        let aic_base = model::fit(&base, &options).expect("fit").aic;
        let aic_noise = model::fit(&with_noise, &options).expect("fit").aic;
        if aic_noise > aic_base {
            increased += 1;
        }
    }
    let pass = increased * 5 >= reps * 4;
    gate.report(
        "aic",
        pass,
        true,
        &format!("AIC increased under a pure-noise covariate in {increased}/{reps} replicates (target >= 80%)"),
    );
}

fn main() {
    let mut gate = Gate {
        hard_failures: 0,
        soft_failures: 0,
    };
    criterion_4(&mut gate);
    criterion_5(&mut gate);
    criterion_6(&mut gate);
    criterion_7(&mut gate);
    criterion_8(&mut gate);
    criterion_9(&mut gate);
    criterion_10(&mut gate);
    criterion_aic(&mut gate);
    criterion_1(&mut gate);
    criterion_2(&mut gate);
    criterion_3(&mut gate);

    if gate.soft_failures > 0 {
        println!(
            "{} criterion/criteria reported FAIL on reproduction bands; see the measured \
             values on the FAIL lines above",
            gate.soft_failures
        );
    }
    if gate.hard_failures > 0 {
        println!("{} oracle-backed criterion/criteria failed", gate.hard_failures);
        std::process::exit(1);
    }
}
