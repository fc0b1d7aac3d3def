//! Release gate. Each test prints one `PASS` or `FAIL` line; run with
//! `cargo test --test acceptance -- --nocapture --test-threads 1` to see them in order.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use spandmd::experiments::{
    headline_sweep, HeadlineConfig, ToySource, DEFAULT_CALIBRATION_IMAGES,
    DEFAULT_EVALUATION_IMAGES,
};
use spandmd::metrics::{cosine_similarity, norm_ratio, r2_brh, relative_l2};
use spandmd::operators::{
    endpoint_mse, fit_operator, predict, FitConfig, Formulation, Rank, Solver,
};
use spandmd::snapshot::{tap_identity_gap, SpanDims};
use spandmd::stats::{candidate_constants, critical_difference, fit_power_law, PowerLawForm};
use spandmd::toymodel::{generate_linear_span, ToySpec, CALIBRATION_STREAM};
use spandmd::{LinearSystem, Mat, ToyModel};

type Outcome = Result<String, String>;

fn report(name: &str, outcome: Outcome) {
    match outcome {
        Ok(detail) => println!("PASS {name}: {detail}"),
        Err(detail) => {
            println!("FAIL {name}: {detail}");
            panic!("{name}: {detail}");
        }
    }
}

fn rel_diff(a: &Mat, b: &Mat) -> f64 {
    (a - b).norm() / b.norm()
}

fn exact_linear() -> Outcome {
    let start = Instant::now();
    let system = LinearSystem::random(8, 0.9, 11).map_err(|e| e.to_string())?;
    let dims = SpanDims::from_kept(8, 5, 10, 10, 0, 10, 0);
    let cal = generate_linear_span(&system, dims, 1).map_err(|e| e.to_string())?;
    let eval = generate_linear_span(&system, dims, 2).map_err(|e| e.to_string())?;
    let samples = dims.pooled_samples();
    if samples < 400 {
        return Err(format!("only {samples} pooled samples"));
    }
    let cfg = FitConfig::new(Formulation::Full, Solver::Pcr, Rank::Full, 0.0);
    let op = fit_operator(&cal, &cfg).map_err(|e| e.to_string())?;
    let k_err = (op.k() - system.k_star()).amax();
    if k_err > 1e-8 {
        return Err(format!("max |K - K*| = {k_err:e}"));
    }
    let mut worst = 0.0f64;
    for q in 1..=10 {
        let pred = predict(&op, &eval, q).map_err(|e| e.to_string())?;
        worst = worst.max(relative_l2(&pred, eval.state(q)).map_err(|e| e.to_string())?);
    }
    if worst > 1e-6 {
        return Err(format!("rel_l2 {worst:e} at some q <= 10"));
    }
    let secs = start.elapsed().as_secs_f64();
    if secs >= 1.0 {
        return Err(format!("took {secs:.3} s"));
    }
    Ok(format!(
        "M = {samples}, max |K - K*| = {k_err:.1e}, worst rel_l2 = {worst:.1e}, {secs:.3} s"
    ))
}

#[test]
fn exact_linear_recovery() {
    report("exact linear recovery", exact_linear());
}

fn folding() -> Outcome {
    let model = ToyModel::generate(ToySpec::default()).map_err(|e| e.to_string())?;
    let folded = model.folded();
    let t = model.spec().t;
    let trace = model
        .trace(&model.sample_inputs(100, 9))
        .map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for l in 1..=model.depth() {
        let x = &trace.states[l - 1];
        let a = model.block(l).forward(x, t).out;
        let b = folded.block(l).forward(x, t).out;
        for img in 0..100 {
            let (ca, cb) = (a.columns(img * t, t), b.columns(img * t, t));
            worst = worst.max((ca - cb).norm() / ca.norm());
        }
    }
    if worst > 1e-6 {
        return Err(format!("worst relative gap {worst:e}"));
    }
    Ok(format!(
        "{} blocks x 100 inputs, worst relative gap {worst:.1e}",
        model.depth()
    ))
}

#[test]
fn folding_exactness() {
    report("folding exactness", folding());
}

fn taps() -> Outcome {
    let mut checked = 0;
    let mut worst = 0.0f64;
    for seed in [42, 7] {
        let spec = ToySpec { seed, ..ToySpec::default() };
        let model = ToyModel::generate(spec).map_err(|e| e.to_string())?;
        let trace = model
            .trace(&model.sample_inputs(16, CALIBRATION_STREAM))
            .map_err(|e| e.to_string())?;
        for i in 1..model.depth() {
            let span = trace.span(i, 1).map_err(|e| e.to_string())?;
            let (a, m) = (span.anchor().unwrap(), span.mlp_tap().unwrap());
            let (dev, scale) = tap_identity_gap(span.state(0), a, m);
            worst = worst.max(dev / scale);
            if dev > 1e-5 * scale {
                return Err(format!("seed {seed}, i = {i}: gap {dev:e} vs |M| {scale:e}"));
            }
            checked += 1;
        }
    }
    Ok(format!("{checked} spans, worst gap / |M|_inf = {worst:.1e}"))
}

#[test]
fn tap_identity() {
    report("tap identity", taps());
}

fn solver_agreement() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let spec = ToySpec { seed, ..ToySpec::default() };
        let model = ToyModel::generate(spec).map_err(|e| e.to_string())?;
        let i = 1 + (seed as usize % (model.depth() - 3));
        let inputs = model.sample_inputs(24, CALIBRATION_STREAM);
        let span = model.forward_with_taps(&inputs, i, 3).map_err(|e| e.to_string())?;
        let formulation = if seed % 2 == 0 { Formulation::Full } else { Formulation::Anchored };
        let fit = |solver| {
            let cfg = FitConfig::new(formulation, solver, Rank::Full, spandmd::DEFAULT_ALPHA);
            fit_operator(&span, &cfg).map_err(|e| e.to_string())
        };
        let (pcr, rrr) = (fit(Solver::Pcr)?, fit(Solver::Rrr)?);
        for q in 1..=3 {
            let a = predict(&pcr, &span, q).map_err(|e| e.to_string())?;
            let b = predict(&rrr, &span, q).map_err(|e| e.to_string())?;
            let gap = rel_diff(&b, &a);
            worst = worst.max(gap);
            if gap > 1e-6 {
                return Err(format!("seed {seed}, {formulation}, q = {q}: relative gap {gap:e}"));
            }
        }
    }
    Ok(format!("20 spans, worst relative gap {worst:.1e}"))
}

#[test]
fn full_rank_solver_agreement() {
    report("full-rank solver agreement", solver_agreement());
}

fn endpoint() -> Outcome {
    let model = ToyModel::generate(ToySpec::default()).map_err(|e| e.to_string())?;
    let trace = model
        .trace(&model.sample_inputs(64, CALIBRATION_STREAM))
        .map_err(|e| e.to_string())?;
    let mut cases = 0;
    let mut min_margin = f64::INFINITY;
    for p in [2, 3, 5] {
        for i in 1..=model.depth() - p {
            let span = trace.span(i, p).map_err(|e| e.to_string())?;
            let fit = |f| {
                let op = fit_operator(&span, &FitConfig::new(f, Solver::Pcr, Rank::Full, 0.0))
                    .map_err(|e| e.to_string())?;
                endpoint_mse(&op, &span).map_err(|e| e.to_string())
            };
            let (rm, anchored) = (fit(Formulation::Replaceme)?, fit(Formulation::Anchored)?);
            if rm > anchored * (1.0 + 1e-9) {
                return Err(format!("i = {i}, p = {p}: ReplaceMe {rm:e} > anchored {anchored:e}"));
            }
            min_margin = min_margin.min((anchored - rm) / anchored);
            cases += 1;
        }
    }
    Ok(format!("{cases} cuts, smallest relative margin {min_margin:.2e}"))
}

#[test]
fn endpoint_optimality() {
    report("endpoint optimality", endpoint());
}

fn nemenyi() -> Outcome {
    let mut parts = Vec::new();
    for (n, want) in [(245, 0.300), (325, 0.260), (165, 0.365)] {
        let cd = critical_difference(4, n, 0.05).map_err(|e| e.to_string())?;
        if (cd - want).abs() > 1e-3 {
            return Err(format!("n = {n}: CD = {cd:.4}, expected {want}"));
        }
        parts.push(format!("n={n}: {cd:.4}"));
    }
    Ok(parts.join(", "))
}

#[test]
fn nemenyi_constants() {
    report("Nemenyi constants", nemenyi());
}

fn constants() -> Outcome {
    let mut parts = Vec::new();
    for ((d, t, p), want_t, want_tp) in [((1280, 197, 5), "6.50", "1.30"), ((1536, 257, 5), "5.98", "1.20")] {
        let c = candidate_constants(d, t, p).map_err(|e| e.to_string())?;
        let (got_t, got_tp) = (format!("{:.2}", c.d_over_t), format!("{:.2}", c.d_over_tp));
        if got_t != want_t || got_tp != want_tp {
            return Err(format!("({d}, {t}, {p}): d/t = {got_t}, d/(tp) = {got_tp}"));
        }
        parts.push(format!("({d},{t},{p}) d/t={got_t} d/(tp)={got_tp}"));
    }
    Ok(parts.join(", "))
}

#[test]
fn candidate_constants_table() {
    report("candidate constants", constants());
}

fn power_law() -> Outcome {
    let budgets = [10.0, 50.0, 100.0, 250.0, 500.0, 1000.0];
    let mut within = Vec::new();
    for (c, gamma) in [(5.0, 1.0), (3.0, 0.5)] {
        let pts: Vec<(f64, f64)> = budgets.iter().map(|&b| (b, c / f64::powf(b, gamma))).collect();
        let fit = fit_power_law(&pts, PowerLawForm::Excess).map_err(|e| e.to_string())?;
        if (fit.c - c).abs() > 1e-6 || (fit.gamma - gamma).abs() > 1e-6 {
            return Err(format!("noiseless ({c}, {gamma}) gave ({}, {})", fit.c, fit.gamma));
        }
        let mut hits = 0;
        for trial in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
            let noisy: Vec<(f64, f64)> = pts
                .iter()
                .map(|&(b, y)| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (b, y * (1.0 + 0.05 * z))
                })
                .collect();
            let fit = fit_power_law(&noisy, PowerLawForm::Excess).map_err(|e| e.to_string())?;
            if (fit.gamma - gamma).abs() <= 0.1 {
                hits += 1;
            }
        }
        if hits < 95 {
            return Err(format!("({c}, {gamma}): only {hits}/100 noisy trials within 0.1"));
        }
        within.push(format!("({c},{gamma}) {hits}/100"));
    }
    Ok(format!("noiseless exact; noisy hits {}", within.join(", ")))
}

#[test]
fn power_law_recovery() {
    report("power-law recovery", power_law());
}

fn identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut draw = |r, c| DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(&mut rng));
    let x: Mat = draw(16, 40);
    let y: Mat = draw(16, 40);
    let e = |r: spandmd::Result<f64>| r.map_err(|e| e.to_string());
    let mut worst = 0.0f64;
    let mut check = |what: &str, got: f64, want: f64| -> Result<(), String> {
        let err = (got - want).abs();
        worst = worst.max(err);
        if err > 1e-12 {
            return Err(format!("{what}: {got} vs {want}"));
        }
        Ok(())
    };
    check("cos(x, x)", e(cosine_similarity(&x, &x))?, 1.0)?;
    check("rel_l2(x, x)", e(relative_l2(&x, &x))?, 0.0)?;
    check("rel_l2(x, -x)", e(relative_l2(&-&x, &x))?, 2.0)?;
    let r2 = e(r2_brh(&y, &x))?;
    check("r2 shift", e(r2_brh(&y.add_scalar(3.5), &x.add_scalar(-1.25)))?, r2)?;
    let nr = e(norm_ratio(&y, &x))?;
    check("norm_ratio homogeneity", e(norm_ratio(&(&y * 2.5), &x))?, 2.5 * nr)?;
    Ok(format!("worst deviation {worst:.1e}"))
}

#[test]
fn metric_identities() {
    report("metric identities", identities());
}

fn toy_source() -> Result<ToySource, String> {
    ToySource::new(ToySpec::default(), DEFAULT_CALIBRATION_IMAGES, DEFAULT_EVALUATION_IMAGES)
        .map_err(|e| e.to_string())
}

fn baselines() -> Outcome {
    let start = Instant::now();
    let source = toy_source()?;
    let run = headline_sweep(&source, &HeadlineConfig::default()).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    if !run.result.failures.is_empty() {
        return Err(format!("failures: {:?}", run.result.failures));
    }
    let medians: Vec<(String, f64)> = run
        .result
        .summarize()
        .into_iter()
        .filter(|s| s.prune_length == 3 && s.step == 3)
        .map(|s| (s.method, s.cos.median))
        .collect();
    let identity = medians
        .iter()
        .find(|(m, _)| m == "identity")
        .map(|x| x.1)
        .ok_or("no identity rows at p = 3")?;
    for (m, v) in &medians {
        if *v < identity {
            return Err(format!("{m} median cos {v:.4} < identity {identity:.4}"));
        }
    }
    if medians.len() != Formulation::ALL.len() {
        return Err(format!("expected every formulation at p = 3, got {medians:?}"));
    }
    if secs >= 60.0 {
        return Err(format!("sweep took {secs:.1} s"));
    }
    let listed: Vec<String> = medians.iter().map(|(m, v)| format!("{m}={v:.4}")).collect();
    Ok(format!("{} (sweep {secs:.1} s)", listed.join(" ")))
}

#[test]
fn baseline_ordering() {
    report("baseline ordering", baselines());
}

fn determinism() -> Outcome {
    let csv = |jobs: usize| -> Result<Vec<u8>, String> {
        let source = toy_source()?;
        let cfg = HeadlineConfig { jobs, ..HeadlineConfig::default() };
        let run = headline_sweep(&source, &cfg).map_err(|e| e.to_string())?;
        let mut out = Vec::new();
        run.result.write_csv(&mut out).map_err(|e| e.to_string())?;
        Ok(out)
    };
    let (a, b) = (csv(4)?, csv(4)?);
    if a != b {
        return Err("two runs with the same seeds differ".into());
    }
    if csv(1)? != a {
        return Err("serial and parallel runs differ".into());
    }
    Ok(format!("{} identical bytes across runs and thread counts", a.len()))
}

#[test]
fn sweep_determinism() {
    report("determinism", determinism());
}
