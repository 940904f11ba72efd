//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.

mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;
use semimnl::io::{self, RunConfig};
use semimnl::oracle::{
    central_difference, oracle_local_solve, oracle_mle, second_difference, OracleOptions,
};
use semimnl::parametric::parametric_design;
use semimnl::profile::{local_m_update, m_gradient};
use semimnl::special::chi_square_sf;
use semimnl::synth::replication_seed;
use semimnl::{
    bandwidth_from_scale, fit_parametric, fit_semiparametric, hausman_mcfadden,
    log_likelihood_contribution, score_and_curvature, simulate, small_hsiao, softmax_probabilities,
    CategoryIndex, Dataset, FitOptions, FitState, KernelConfig, LinearPredictor, ModelSpec,
    ProfileOptions,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Likelihood traces collected along the way for the ascent criterion.
#[derive(Default)]
struct Traces {
    parametric: Vec<(String, Vec<f64>)>,
    semiparametric: Vec<(String, Vec<f64>)>,
}

fn lp(v: &[f64]) -> LinearPredictor {
    LinearPredictor::new(v.to_vec()).unwrap()
}

fn derivative_suite() -> Outcome {
    let start = Instant::now();
    let mut r = common::rng(20_240_501);
    let (mut worst_l1, mut worst_l2, mut worst_norm, mut worst_shift) = (0f64, 0f64, 0f64, 0f64);
    for _ in 0..1000 {
        let k_cat = r.random_range(2..=6);
        let eta: Vec<f64> = (0..k_cat).map(|_| r.random_range(-4.0..4.0)).collect();
        let y = CategoryIndex(r.random_range(0..k_cat));
        let k = CategoryIndex(r.random_range(0..k_cat));
        let ll = |v: f64| {
            let mut e = eta.clone();
            e[k.0] = v;
            log_likelihood_contribution(&lp(&e), y).unwrap()
        };
        let (l1, l2) = score_and_curvature(&lp(&eta), y, k).unwrap();
        worst_l1 = worst_l1.max((l1 - central_difference(ll, eta[k.0], 1e-6)).abs());
        worst_l2 = worst_l2.max((l2 - second_difference(ll, eta[k.0], 1e-4)).abs());

        let p = softmax_probabilities(&lp(&eta));
        worst_norm = worst_norm.max((p.iter().sum::<f64>() - 1.0).abs());
        let c = r.random_range(-50.0..50.0);
        let shifted: Vec<f64> = eta.iter().map(|v| v + c).collect();
        let q = softmax_probabilities(&lp(&shifted));
        for (a, b) in p.iter().zip(&q) {
            worst_shift = worst_shift.max((a - b).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst_l1 < 1e-6 && worst_l2 < 1e-4 && worst_norm < 1e-12 && worst_shift < 1e-12 && secs < 5.0,
        format!(
            "l′ {worst_l1:.1e}, l″ {worst_l2:.1e}, normalization {worst_norm:.1e}, shift {worst_shift:.1e}, {secs:.2} s"
        ),
    )
}

fn oracle_equivalence(traces: &mut Traces) -> Outcome {
    let start = Instant::now();
    let mut worst = 0f64;
    let mut failures = Vec::new();
    for i in 0..20u64 {
        let k = [2, 3, 5][i as usize % 3];
        let dgp = common::parametric_dgp(k, 200, 900 + i);
        let data = simulate(&dgp).unwrap();
        let spec = dgp.model_spec().unwrap();
        let fit = fit_parametric(&data, &spec, &FitOptions::default()).unwrap();
        traces
            .parametric
            .push((format!("oracle dataset {i} (K={k})"), fit.loglik_trace.clone()));
        let design = parametric_design(&data, false);
        match oracle_mle(&design, data.y(), &spec, &OracleOptions::default()) {
            Ok(oracle) => {
                let beta = &fit.coefficients.beta;
                for (j, b) in oracle.iter().enumerate() {
                    let a = beta[(j / beta.ncols(), j % beta.ncols())];
                    worst = worst.max((a - b).abs());
                }
            }
            Err(e) => failures.push(format!("dataset {i}: {e}")),
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        failures.is_empty() && worst < 1e-5 && secs < 60.0,
        format!("20 datasets, max |Δcoef| {worst:.1e}, {secs:.1} s{}", fmt_failures(&failures)),
    )
}

fn fmt_failures(f: &[String]) -> String {
    if f.is_empty() {
        String::new()
    } else {
        format!("; {}", f.join("; "))
    }
}

fn intercept_only(traces: &mut Traces) -> Outcome {
    let y: Vec<usize> = [(0, 50), (1, 30), (2, 20)]
        .iter()
        .flat_map(|&(k, c)| std::iter::repeat(k).take(c))
        .collect();
    let data = Dataset::new(y, DMatrix::zeros(100, 0), DMatrix::zeros(100, 0), 3).unwrap();
    let spec = ModelSpec::with_last_reference(3).unwrap();
    let fit = fit_parametric(&data, &spec, &FitOptions::default()).unwrap();
    traces
        .parametric
        .push(("intercept only".into(), fit.loglik_trace.clone()));
    let e1 = (fit.coefficients.beta[(0, 0)] - 2.5f64.ln()).abs();
    let e2 = (fit.coefficients.beta[(1, 0)] - 1.5f64.ln()).abs();
    outcome(
        e1 < 1e-8 && e2 < 1e-8,
        format!("errors {e1:.1e}, {e2:.1e}"),
    )
}

fn collapse(traces: &mut Traces) -> Outcome {
    let mut worst_slope = 0f64;
    let mut worst_range = 0f64;
    let mut slowest = 0f64;
    let mut problems = Vec::new();
    for k in [2, 3, 4] {
        let dgp = common::linear_dgp(k, 500, 300 + k as u64);
        let data = simulate(&dgp).unwrap();
        let spec = dgp.model_spec().unwrap();
        let start = Instant::now();
        let kernel = bandwidth_from_scale(data.t(), 1e6).unwrap();
        let semi = fit_semiparametric(&data, &spec, &kernel, &ProfileOptions::default()).unwrap();
        slowest = slowest.max(start.elapsed().as_secs_f64());
        traces
            .semiparametric
            .push((format!("collapse K={k}"), semi.loglik_trace.clone()));
        if !semi.converged {
            problems.push(format!("K={k} did not converge"));
        }
        let without_t = Dataset::new(
            data.y().iter().map(|c| c.0).collect(),
            data.x().clone(),
            DMatrix::zeros(data.n(), 0),
            k,
        )
        .unwrap();
        let par = fit_parametric(&without_t, &spec, &FitOptions::default()).unwrap();
        traces
            .parametric
            .push((format!("collapse K={k}"), par.loglik_trace.clone()));
        for slot in 0..spec.n_free() {
            for d in 0..data.p() {
                let diff = semi.beta.beta[(slot, d)] - par.coefficients.beta[(slot, d + 1)];
                worst_slope = worst_slope.max(diff.abs());
            }
            worst_range = worst_range.max(common::range(semi.smooth.m.row(slot).iter().copied()));
        }
    }
    outcome(
        problems.is_empty() && worst_slope < 1e-4 && worst_range < 1e-4 && slowest < 30.0,
        format!(
            "K=2,3,4 n=500: max slope gap {worst_slope:.1e}, max m range {worst_range:.1e}, slowest fit {slowest:.1} s{}",
            fmt_failures(&problems)
        ),
    )
}

fn gradient_oracle() -> Outcome {
    let h = 1e-5;
    let mut worst = 0f64;
    let mut failures = Vec::new();
    for seed in 0..50u64 {
        let inst = common::local_instance(5000 + seed);
        let kernel = KernelConfig::gaussian(inst.bandwidths.clone()).unwrap();
        let slot = seed as usize % inst.spec.n_free();
        let k = inst.spec.category_of_slot(slot);
        let solve = |beta: &DMatrix<f64>| {
            oracle_local_solve(&inst.data, &inst.spec, &kernel, beta, &inst.m, k, &inst.query)
        };
        let m0 = match solve(&inst.beta) {
            Ok(v) => v,
            Err(e) => {
                failures.push(format!("instance {seed}: {e}"));
                continue;
            }
        };
        let state = FitState {
            beta: inst.beta.clone(),
            m: inst.m.clone(),
        };
        let grad = m_gradient(&inst.data, &inst.spec, &kernel, &state, k, &inst.query, m0).unwrap();
        for (d, g) in grad.iter().enumerate() {
            let mut up = inst.beta.clone();
            let mut down = inst.beta.clone();
            up[(slot, d)] += h;
            down[(slot, d)] -= h;
            let fd = (solve(&up).unwrap() - solve(&down).unwrap()) / (2.0 * h);
            worst = worst.max((g - fd).abs());
        }
    }
    outcome(
        failures.is_empty() && worst < 1e-4,
        format!("50 instances, max |m′ − fd| {worst:.1e}{}", fmt_failures(&failures)),
    )
}

fn sine_recovery(traces: &mut Traces) -> (bool, String) {
    let dgp = common::sine_dgp(5000, 20_240_601);
    let data = simulate(&dgp).unwrap();
    let spec = dgp.model_spec().unwrap();
    let kernel = bandwidth_from_scale(data.t(), 0.5).unwrap();
    let fit = fit_semiparametric(&data, &spec, &kernel, &ProfileOptions::default()).unwrap();
    traces
        .semiparametric
        .push(("sine K=2 n=5000".into(), fit.loglik_trace.clone()));
    let beta = fit.beta.beta[(0, 0)];
    let t: Vec<f64> = data.t().column(0).iter().copied().collect();
    let (lo, hi) = (common::quantile(&t, 0.05), common::quantile(&t, 0.95));
    let inner: Vec<usize> = (0..t.len()).filter(|&i| t[i] >= lo && t[i] <= hi).collect();
    let est: Vec<f64> = inner.iter().map(|&i| fit.smooth.m[(0, i)]).collect();
    let truth: Vec<f64> = inner.iter().map(|&i| t[i].sin()).collect();
    let (me, mt) = (common::mean(&est), common::mean(&truth));
    let rmse = (est
        .iter()
        .zip(&truth)
        .map(|(a, b)| ((a - me) - (b - mt)).powi(2))
        .sum::<f64>()
        / est.len() as f64)
        .sqrt();
    (
        fit.converged && (0.9..=1.1).contains(&beta) && rmse < 0.15,
        format!(
            "sine β̂ {beta:.4}, centered RMSE {rmse:.4}{}",
            if fit.converged { "" } else { " (not converged)" }
        ),
    )
}

const RIDGE_SIMULATE: &str = r#"
[simulate]
n_categories = 3
beta = [[0.8, -0.5], [-0.4, 0.6]]
n = 2000
smooth = [{ kind = "ridge-interaction", a = 1.5 }, { kind = "linear", a = 0.2, b = [0.0, 0.0] }]
x_laws = [{ law = "normal", mu = 0.0, sd = 1.0 }, { law = "bernoulli", p = 0.5 }]
t_laws = [{ law = "uniform", lo = -1.5, hi = 1.5 }, { law = "uniform", lo = -1.5, hi = 1.5 }]
"#;

fn ridge_surface(traces: &mut Traces) -> (bool, String) {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        "seed = 20240602\n[data]\nparametric = [\"x1\", \"x2\"]\nsmooth = [\"t1\", \"t2\"]\n\
         [model]\nscale = 0.5\n\
         [surface]\naxes = [{{ column = \"t1\", lo = -1.35, hi = 1.35, steps = 15 }}, \
         {{ column = \"t2\", lo = -1.35, hi = 1.35, steps = 15 }}]\n\
         fixed = {{ x1 = 0.0, x2 = 0.0 }}\ncategories = [\"0\"]\n{RIDGE_SIMULATE}"
    );
    let config = RunConfig::from_toml(&text).unwrap();
    config.validate().unwrap();
    let fit_dir = dir.path().join("fit");
    let fit = match io::run_fit(&config, &fit_dir).unwrap() {
        io::FitOutcome::Semiparametric(f) => f,
        io::FitOutcome::Parametric(_) => unreachable!(),
    };
    traces
        .semiparametric
        .push(("ridge K=3 n=2000".into(), fit.loglik_trace.clone()));
    if !fit.converged {
        return (false, "ridge fit did not converge".into());
    }
    io::export_surface(&config, &fit_dir, dir.path()).unwrap();
    let dgp = config.simulate.as_ref().unwrap();
    let mut reader = csv::Reader::from_path(dir.path().join(io::SURFACE)).unwrap();
    let (mut est, mut truth) = (Vec::new(), Vec::new());
    for r in reader.records() {
        let r = r.unwrap();
        let t = [r[0].parse::<f64>().unwrap(), r[1].parse::<f64>().unwrap()];
        est.push(r[3].parse::<f64>().unwrap());
        truth.push(dgp.probabilities(&[0.0, 0.0], &t)[0]);
    }
    let corr = common::correlation(&est, &truth);
    (corr > 0.9, format!("ridge surface correlation {corr:.4} over {} points", est.len()))
}

fn recovery(traces: &mut Traces) -> Outcome {
    let start = Instant::now();
    let (sine_ok, sine) = sine_recovery(traces);
    let (ridge_ok, ridge) = ridge_surface(traces);
    let secs = start.elapsed().as_secs_f64();
    outcome(
        sine_ok && ridge_ok && secs < 600.0,
        format!("{sine}; {ridge}; {secs:.1} s"),
    )
}

fn local_solver_cross_check() -> Outcome {
    let mut worst = 0f64;
    let mut failures = Vec::new();
    for seed in 0..50u64 {
        let inst = common::local_instance(7000 + seed);
        let kernel = KernelConfig::gaussian(inst.bandwidths.clone()).unwrap();
        let state = FitState {
            beta: inst.beta.clone(),
            m: inst.m.clone(),
        };
        let k = inst.spec.category_of_slot(seed as usize % inst.spec.n_free());
        let bisect = match oracle_local_solve(
            &inst.data, &inst.spec, &kernel, &inst.beta, &inst.m, k, &inst.query,
        ) {
            Ok(v) => v,
            Err(e) => {
                failures.push(format!("instance {seed}: {e}"));
                continue;
            }
        };
        let mut m = 0.0;
        for _ in 0..200 {
            let next =
                local_m_update(&inst.data, &inst.spec, &kernel, &state, k, &inst.query, m, 5.0)
                    .unwrap();
            let done = (next - m).abs() < 1e-14;
            m = next;
            if done {
                break;
            }
        }
        worst = worst.max((m - bisect).abs());
    }
    outcome(
        failures.is_empty() && worst < 1e-8,
        format!("50 problems, max |Newton − bisection| {worst:.1e}{}", fmt_failures(&failures)),
    )
}

fn iia_size() -> Outcome {
    let start = Instant::now();
    let reps = 200u64;
    let opts = FitOptions::default();
    let (mut hm_reject, mut sh_reject, mut negative) = (0, 0, 0);
    let mut failures = Vec::new();
    for r in 0..reps {
        let seed = replication_seed(20_240_603, r);
        let data = simulate(&common::parametric_dgp(4, 2000, seed)).unwrap();
        let spec = ModelSpec::with_last_reference(4).unwrap();
        let drop = CategoryIndex(r as usize % 3);
        match hausman_mcfadden(&data, &spec, drop, &opts) {
            Ok(t) => {
                hm_reject += (t.p_value < 0.05) as usize;
                negative += (t.statistic < 0.0) as usize;
            }
            Err(e) => failures.push(format!("HM rep {r}: {e}")),
        }
        match small_hsiao(&data, &spec, drop, seed, &opts) {
            Ok(t) => sh_reject += (t.p_value < 0.05) as usize,
            Err(e) => failures.push(format!("SH rep {r}: {e}")),
        }
    }
    let hm_rate = hm_reject as f64 / reps as f64;
    let sh_rate = sh_reject as f64 / reps as f64;

    let mut worst_tail = 0f64;
    for df in 1..=50 {
        for step in 0..=400 {
            let x = step as f64 * 0.5;
            worst_tail = worst_tail.max((chi_square_sf(x, df) - common::chi_square_tail_oracle(x, df)).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let band = 0.01..=0.10;
    outcome(
        failures.is_empty()
            && band.contains(&hm_rate)
            && band.contains(&sh_rate)
            && worst_tail < 1e-10
            && secs < 600.0,
        format!(
            "HM rate {hm_rate:.3} ({negative} negative statistics), SH rate {sh_rate:.3}, chi-square tail error {worst_tail:.1e}, {secs:.1} s{}",
            fmt_failures(&failures)
        ),
    )
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = Vec::new();
    for sub in ["sim", "fit", "surface"] {
        let mut names: Vec<_> = fs::read_dir(dir.join(sub))
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        names.sort();
        for name in names {
            files.push((format!("{sub}/{name}"), fs::read(dir.join(sub).join(&name)).unwrap()));
        }
    }
    files
}

fn pipeline_run(dir: &Path) -> Result<(), String> {
    let text = format!(
        "seed = 1\n[data]\ninput = \"sim/data.csv\"\nparametric = [\"x1\", \"x2\"]\n\
         smooth = [\"t1\", \"t2\"]\ncategories = [\"0\", \"1\", \"2\"]\n\
         [model]\nscale = 0.6\n\
         [surface]\naxes = [{{ column = \"t1\", lo = -1.4, hi = 1.4, steps = 9 }}, \
         {{ column = \"t2\", lo = -1.4, hi = 1.4, steps = 7 }}]\nfixed = {{ x1 = 0.5, x2 = 1.0 }}\n\
         {}",
        RIDGE_SIMULATE.replace("n = 2000", "n = 600")
    );
    let config = dir.join("run.toml");
    fs::write(&config, text).unwrap();
    let steps: [&[&str]; 3] = [
        &["simulate", "--out", "sim"],
        &["fit", "--out", "fit"],
        &["surface", "--fit-dir", "fit", "--out", "surface"],
    ];
    for args in steps {
        let out = Command::new(env!("CARGO_BIN_EXE_semimnl"))
            .current_dir(dir)
            .args(args.iter().take(1))
            .args(["--seed", "424242", "--config", "run.toml"])
            .args(args.iter().skip(1))
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!(
                "{} failed: {}",
                args[0],
                String::from_utf8_lossy(&out.stderr).trim()
            ));
        }
    }
    Ok(())
}

fn pipeline_determinism(traces: &mut Traces) -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        if let Err(e) = pipeline_run(d.path()) {
            return outcome(false, e);
        }
    }
    let (fa, fb) = (read_dir_bytes(a.path()), read_dir_bytes(b.path()));
    let identical = fa == fb;

    let trace = fs::read_to_string(a.path().join("fit").join(io::TRACE)).unwrap();
    let values: Vec<f64> = trace
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    traces.semiparametric.push(("pipeline ridge K=3 n=600".into(), values));

    let mut reader = csv::Reader::from_path(a.path().join("surface").join(io::SURFACE)).unwrap();
    let probs: Vec<f64> = reader
        .records()
        .map(|r| r.unwrap()[3].parse().unwrap())
        .collect();
    let worst = probs
        .chunks(3)
        .map(|c| (c.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    outcome(
        identical && worst < 1e-8 && probs.len() == 9 * 7 * 3,
        format!(
            "{} artifacts {}, {} grid points, max |Σp − 1| {worst:.1e}",
            fa.len(),
            if identical { "byte-identical" } else { "DIFFER" },
            probs.len() / 3
        ),
    )
}

fn likelihood_ascent(traces: &Traces) -> Outcome {
    let worst = |set: &[(String, Vec<f64>)]| {
        set.iter()
            .map(|(name, t)| (name.clone(), common::worst_decrease(t)))
            .fold((String::new(), 0f64), |acc, x| if x.1 > acc.1 { x } else { acc })
    };
    let (pname, pworst) = worst(&traces.parametric);
    let (sname, sworst) = worst(&traces.semiparametric);
    let failing: Vec<String> = traces
        .semiparametric
        .iter()
        .filter(|(_, t)| common::worst_decrease(t) > 1e-8)
        .map(|(n, t)| format!("{n} ({:.1e})", common::worst_decrease(t)))
        .collect();
    let p_ok = pworst <= 1e-12;
    let s_ok = failing.is_empty();
    outcome(
        p_ok && s_ok,
        format!(
            "parametric: {} traces, worst decrease {pworst:.1e}{}; semiparametric: {} traces, worst decrease {sworst:.1e}{}{}",
            traces.parametric.len(),
            if pname.is_empty() { String::new() } else { format!(" ({pname})") },
            traces.semiparametric.len(),
            if sname.is_empty() { String::new() } else { format!(" ({sname})") },
            if failing.is_empty() {
                String::new()
            } else {
                format!("; above 1e-8: {}", failing.join(", "))
            }
        ),
    )
}

fn main() -> ExitCode {
    let mut traces = Traces::default();
    let results = vec![
        ("derivative suite", derivative_suite()),
        ("parametric oracle equivalence", oracle_equivalence(&mut traces)),
        ("intercept-only closed form", intercept_only(&mut traces)),
        ("uniform-bandwidth collapse", collapse(&mut traces)),
        ("least-favourable-curve gradient", gradient_oracle()),
        ("smooth-function recovery", recovery(&mut traces)),
        ("local-solver cross-check", local_solver_cross_check()),
        ("IIA test size", iia_size()),
        ("pipeline determinism", pipeline_determinism(&mut traces)),
    ];
    let mut all = results;
    all.push(("likelihood ascent", likelihood_ascent(&traces)));

    let mut failed = 0;
    for (i, (name, o)) in all.iter().enumerate() {
        println!(
            "{} {:>2} {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            i + 1,
            o.detail
        );
        failed += (!o.pass) as usize;
    }
    println!("acceptance: {} of {} criteria passed", all.len() - failed, all.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
