//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits with a
//! nonzero status if any criterion fails.

use std::time::{Duration, Instant};

use enkbf_core::diagnostics::{loglog_slope, v_upper_bound};
use enkbf_core::enkbf::{run_filter, FilterConfig, FilterRun, Scheme};
use enkbf_core::ensemble::Ensemble;
use enkbf_core::experiment::{
    run_m_sweep, write_results, ExperimentConfig, ModelChoice, SweepResult,
};
use enkbf_core::kbf::{
    controllability_rank, integrate_riccati, kbf_mean_step, observability_rank, stationary_riccati,
    GaussianBelief,
};
use enkbf_core::meanfield::{run_chaos_experiment, MomentSource};
use enkbf_core::model::LinearModelSpec;
use enkbf_core::rng::{mix_seed, stream_rng, ENSEMBLE_STREAM};
use enkbf_core::truth::simulate_truth;
use enkbf_core::{DMatrix, DVector};

// Criterion 1
const C1_M: usize = 64;
const C1_DT: f64 = 1e-3;
const C1_STEPS: usize = 5000;
const C1_P0: f64 = 4.0;
const C1_MAX_REL_ERR: f64 = 1e-2;
const C1_TERMINAL_TOL: f64 = 1e-3;
const C1_MAX_SECS: f64 = 5.0;

// Criterion 2
const C2_MS: [usize; 4] = [8, 32, 128, 512];
const C2_SEEDS: usize = 20;
const C2_DT: f64 = 1e-3;
const C2_STEPS: usize = 1000;
const C2_SLOPE: (f64, f64) = (-0.8, -0.2);
const C2_MAX_INVERSIONS: usize = 1;
const C2_MAX_SECS: f64 = 120.0;

// Criteria 3-5
const LORENZ_EPSILONS: [f64; 5] = [1e-1, 1e-2, 1e-3, 1e-4, 1e-5];
const LORENZ_DT: f64 = 2e-4;
const LORENZ_STEPS: usize = 500_000;
const LORENZ_SEEDS: usize = 3;
const C3_SLOPE: (f64, f64) = (0.35, 0.65);
const C3_MAX_SECS: f64 = 600.0;
const C4_LMAX_SLOPE: (f64, f64) = (0.35, 0.65);
const C4_LMIN_SLOPE: (f64, f64) = (0.30, 0.70);
const C4_MIN_RATIO: f64 = 1.5;
const C5_SLOPE: (f64, f64) = (0.30, 0.70);

// Criterion 7
const C7_MS: [usize; 4] = [8, 32, 128, 512];
const C7_SEEDS: usize = 20;
const C7_DT: f64 = 1e-3;
const C7_STEPS: usize = 1000;
const C7_SLOPE: (f64, f64) = (-1.4, -0.6);
const C7_MAX_SECS: f64 = 120.0;

// Criterion 8
const C8_RICCATI_TOL: f64 = 1e-8;
const C8_SLOPE_TOL: f64 = 1e-6;

const INVARIANT_SLACK: f64 = 1e-10;
const MASTER_SEED: u64 = 20180101;

struct Report {
    failures: usize,
}

impl Report {
    fn line(&mut self, id: &str, ok: bool, detail: String) {
        if !ok {
            self.failures += 1;
        }
        println!(
            "criterion {id}: {} - {detail}",
            if ok { "PASS" } else { "FAIL" }
        );
    }
}

fn in_band(x: Option<f64>, band: (f64, f64)) -> bool {
    x.is_some_and(|v| v >= band.0 && v <= band.1)
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".into(), |v| format!("{v:.4}"))
}

fn scalar_linear() -> LinearModelSpec {
    LinearModelSpec::scalar(0.0, 0.5, 1.0, 1.0).unwrap()
}

fn count_violations(run: &FilterRun, m: usize) -> usize {
    run.diags
        .iter()
        .filter(|r| !r.satisfies_invariants(m, INVARIANT_SLACK))
        .count()
}

struct C1Outcome {
    violations: usize,
    v_max: f64,
    v_bound: f64,
}

fn criterion_1(rep: &mut Report) -> C1Outcome {
    let start = Instant::now();
    let linear = scalar_linear();
    let model = linear.to_model().unwrap();
    let truth = simulate_truth(
        &model,
        &DVector::zeros(1),
        C1_DT,
        C1_STEPS,
        mix_seed(MASTER_SEED, 1),
    )
    .unwrap();
    let mut rng = stream_rng(mix_seed(MASTER_SEED, 1), ENSEMBLE_STREAM);
    let raw =
        Ensemble::sample(&mut rng, &DVector::zeros(1), &DMatrix::identity(1, 1), C1_M).unwrap();
    let p0 = DMatrix::from_element(1, 1, C1_P0);
    let init = raw.with_exact_moments(&DVector::zeros(1), &p0).unwrap();
    let cfg = FilterConfig::new(C1_DT, C1_STEPS, C1_M, Scheme::General);
    let run = run_filter(&model, &truth, &cfg, &init, None).unwrap();
    let reference = integrate_riccati(&p0, &linear, C1_DT, C1_STEPS).unwrap();
    let elapsed = start.elapsed();

    let max_rel = run
        .diags
        .iter()
        .zip(&reference)
        .map(|(row, p)| (row.trace_p - p[(0, 0)]).abs() / p[(0, 0)])
        .fold(0.0, f64::max);
    let p_ens = run.diags.last().unwrap().trace_p;
    let p_ref = reference.last().unwrap()[(0, 0)];
    let ok = max_rel <= C1_MAX_REL_ERR
        && (p_ens - 1.0).abs() <= C1_TERMINAL_TOL
        && (p_ref - 1.0).abs() <= C1_TERMINAL_TOL
        && elapsed < Duration::from_secs_f64(C1_MAX_SECS);
    rep.line(
        "1",
        ok,
        format!(
            "max rel err {max_rel:.3e} (<= {C1_MAX_REL_ERR:e}), P_ens(T) = {p_ens:.6}, P_rk4(T) = {p_ref:.6} (|P-1| <= {C1_TERMINAL_TOL:e}), {:.2}s (< {C1_MAX_SECS}s)",
            elapsed.as_secs_f64()
        ),
    );

    let v0 = run.diags[0].v;
    let v_bound = v_upper_bound(v0, 0.0, 0.5, 1.0, C1_M);
    let v_max = run
        .diags
        .iter()
        .map(|r| r.v)
        .fold(f64::NEG_INFINITY, f64::max);
    C1Outcome {
        violations: count_violations(&run, C1_M),
        v_max,
        v_bound,
    }
}

fn criterion_2(rep: &mut Report) -> usize {
    let start = Instant::now();
    let linear = scalar_linear();
    let model = linear.to_model().unwrap();
    let x0 = DVector::zeros(1);
    let truth = simulate_truth(&model, &x0, C2_DT, C2_STEPS, mix_seed(MASTER_SEED, 2)).unwrap();
    let prior = GaussianBelief {
        mean: x0.clone(),
        cov: DMatrix::from_element(1, 1, C1_P0),
    };
    let mut belief = prior.clone();
    for dy in &truth.obs_increments[..C2_STEPS] {
        belief = kbf_mean_step(&belief, &linear, dy, C2_DT).unwrap();
    }
    let factor = DMatrix::from_element(1, 1, C1_P0.sqrt());
    let mut violations = 0;
    let mut errors = Vec::new();
    for &m in &C2_MS {
        let cfg = FilterConfig::new(C2_DT, C2_STEPS, m, Scheme::General);
        let mut total = 0.0;
        for s in 0..C2_SEEDS {
            let seed = mix_seed(mix_seed(MASTER_SEED, m as u64), s as u64);
            let mut rng = stream_rng(seed, ENSEMBLE_STREAM);
            let init = Ensemble::sample(&mut rng, &prior.mean, &factor, m).unwrap();
            let run = run_filter(&model, &truth, &cfg, &init, None).unwrap();
            violations += count_violations(&run, m);
            total += (run.means.last().unwrap() - &belief.mean).norm();
        }
        errors.push(total / C2_SEEDS as f64);
    }
    let elapsed = start.elapsed();
    let inversions = errors.windows(2).filter(|w| w[1] > w[0]).count();
    let ms: Vec<f64> = C2_MS.iter().map(|&m| m as f64).collect();
    let slope = loglog_slope(&ms, &errors).ok().map(|(s, _)| s);
    let ok = inversions <= C2_MAX_INVERSIONS
        && in_band(slope, C2_SLOPE)
        && elapsed < Duration::from_secs_f64(C2_MAX_SECS);
    rep.line(
        "2",
        ok,
        format!(
            "errors {:?}, inversions {inversions} (<= {C2_MAX_INVERSIONS}), slope {} in [{}, {}], {:.2}s (< {C2_MAX_SECS}s)",
            errors.iter().map(|e| format!("{e:.3e}")).collect::<Vec<_>>(),
            fmt_opt(slope),
            C2_SLOPE.0,
            C2_SLOPE.1,
            elapsed.as_secs_f64()
        ),
    );
    violations
}

fn lorenz_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::with_model(ModelChoice::Lorenz63);
    cfg.epsilon_list = LORENZ_EPSILONS.to_vec();
    cfg.dt = LORENZ_DT;
    cfg.n_steps = LORENZ_STEPS;
    cfg.n_seeds = LORENZ_SEEDS;
    cfg.master_seed = MASTER_SEED;
    cfg.m = 4;
    cfg
}

fn criteria_3_to_5(rep: &mut Report) -> SweepResult {
    let mut cfg = lorenz_config();
    cfg.m_list = Some(vec![2, 3, 4]);
    let start = Instant::now();
    let result = run_m_sweep(&cfg).unwrap();
    let elapsed = start.elapsed();
    // Criterion 3 budgets the M = 4 share of the shared sweep.
    let share_m4 =
        result.rows.iter().filter(|r| r.m == 4).count() as f64 / result.rows.len() as f64;
    let m4_secs = elapsed.as_secs_f64() * share_m4;

    let fit4 = result.fit_for(4).unwrap();
    let div4 = result
        .rows
        .iter()
        .filter(|r| r.m == 4 && r.diverged)
        .count();
    let ok3 = in_band(fit4.mse_slope, C3_SLOPE) && div4 == 0 && m4_secs < C3_MAX_SECS;
    rep.line(
        "3",
        ok3,
        format!(
            "M=4 mse_slope {} in [{}, {}], diverged {div4}, {m4_secs:.1}s (< {C3_MAX_SECS}s)",
            fmt_opt(fit4.mse_slope),
            C3_SLOPE.0,
            C3_SLOPE.1
        ),
    );

    let ratios: Vec<(f64, f64)> = fit4
        .points
        .iter()
        .map(|p| (p.epsilon, p.lmax / p.lmin))
        .collect();
    let ratios_ok =
        ratios.len() == LORENZ_EPSILONS.len() && ratios.iter().all(|&(_, r)| r >= C4_MIN_RATIO);
    let ok4 = in_band(fit4.lmax_slope, C4_LMAX_SLOPE)
        && in_band(fit4.lmin_slope, C4_LMIN_SLOPE)
        && ratios_ok;
    rep.line(
        "4",
        ok4,
        format!(
            "lmax_slope {} in [{}, {}], lmin_slope {} in [{}, {}], lmax/lmin {:?} (each >= {C4_MIN_RATIO})",
            fmt_opt(fit4.lmax_slope),
            C4_LMAX_SLOPE.0,
            C4_LMAX_SLOPE.1,
            fmt_opt(fit4.lmin_slope),
            C4_LMIN_SLOPE.0,
            C4_LMIN_SLOPE.1,
            ratios.iter().map(|(e, r)| format!("{e:e}:{r:.3}")).collect::<Vec<_>>()
        ),
    );

    let mut ok5 = true;
    let mut parts = Vec::new();
    for m in [2, 3] {
        let fit = result.fit_for(m).unwrap();
        let div = result
            .rows
            .iter()
            .filter(|r| r.m == m && r.diverged)
            .count();
        ok5 &= in_band(fit.mse_slope, C5_SLOPE) && div == 0;
        parts.push(format!(
            "M={m} mse_slope {} diverged {div} mse {:?}",
            fmt_opt(fit.mse_slope),
            fit.points
                .iter()
                .map(|p| format!("{:.3e}", p.mse))
                .collect::<Vec<_>>()
        ));
    }
    rep.line(
        "5",
        ok5,
        format!(
            "{} (band [{}, {}])",
            parts.join("; "),
            C5_SLOPE.0,
            C5_SLOPE.1
        ),
    );
    result
}

fn criterion_7(rep: &mut Report) {
    let start = Instant::now();
    let linear = scalar_linear();
    let model = linear.to_model().unwrap();
    let x0 = DVector::zeros(1);
    let truth = simulate_truth(&model, &x0, C7_DT, C7_STEPS, mix_seed(MASTER_SEED, 7)).unwrap();
    let init = GaussianBelief {
        mean: x0,
        cov: DMatrix::from_element(1, 1, C1_P0),
    };
    let cfg = FilterConfig::new(C7_DT, C7_STEPS, C7_MS[0], Scheme::General);
    let rows = run_chaos_experiment(
        &model,
        &truth,
        &C7_MS,
        MomentSource::LinearExact(&linear),
        C7_SEEDS,
        &cfg,
        &init,
        MASTER_SEED,
    )
    .unwrap();
    let elapsed = start.elapsed();
    let gaps: Vec<f64> = rows.iter().map(|r| r.mean_gap).collect();
    let decreasing = gaps.windows(2).all(|w| w[1] < w[0]);
    let all_seeds = rows.iter().all(|r| r.seeds_used >= 10);
    let ms: Vec<f64> = C7_MS.iter().map(|&m| m as f64).collect();
    let slope = loglog_slope(&ms, &gaps).ok().map(|(s, _)| s);
    let ok = decreasing
        && all_seeds
        && in_band(slope, C7_SLOPE)
        && elapsed < Duration::from_secs_f64(C7_MAX_SECS);
    rep.line(
        "7",
        ok,
        format!(
            "gaps {:?}, decreasing {decreasing}, seeds used {:?}, slope {} in [{}, {}], {:.2}s (< {C7_MAX_SECS}s)",
            gaps.iter().map(|g| format!("{g:.3e}")).collect::<Vec<_>>(),
            rows.iter().map(|r| r.seeds_used).collect::<Vec<_>>(),
            fmt_opt(slope),
            C7_SLOPE.0,
            C7_SLOPE.1,
            elapsed.as_secs_f64()
        ),
    );
}

fn criterion_8(rep: &mut Report) {
    let p1 = stationary_riccati(
        &LinearModelSpec::scalar(0.0, 0.5, 1.0, 1.0).unwrap(),
        1e-13,
        10_000_000,
    )
    .map(|s| s.p_inf[(0, 0)]);
    let p2 = stationary_riccati(
        &LinearModelSpec::scalar(1.0, 0.5, 1.0, 1.0).unwrap(),
        1e-13,
        10_000_000,
    )
    .map(|s| s.p_inf[(0, 0)]);
    let riccati_ok = matches!(p1, Ok(p) if (p - 1.0).abs() <= C8_RICCATI_TOL)
        && matches!(p2, Ok(p) if (p - (1.0 + 2f64.sqrt())).abs() <= C8_RICCATI_TOL);

    let two = |a: [f64; 4], h: DMatrix<f64>, c: DMatrix<f64>| {
        let ny = h.nrows();
        LinearModelSpec::new(
            DMatrix::from_row_slice(2, 2, &a),
            DVector::zeros(2),
            h,
            c,
            DMatrix::identity(ny, ny),
        )
        .unwrap()
    };
    let shift = [0.0, 1.0, 0.0, 0.0];
    let h1 = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
    let obs = [
        observability_rank(&two(
            shift,
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
        )),
        observability_rank(&two(shift, h1.clone(), DMatrix::identity(2, 2))),
        observability_rank(&two([0.0; 4], h1.clone(), DMatrix::identity(2, 2))),
    ];
    let ctrl = [
        controllability_rank(&two(shift, h1.clone(), DMatrix::identity(2, 2))),
        controllability_rank(&two(
            shift,
            h1.clone(),
            DMatrix::from_column_slice(2, 1, &[0.0, 1.0]),
        )),
        controllability_rank(&two(shift, h1, DMatrix::zeros(2, 1))),
    ];
    let ranks_ok = obs == [2, 2, 1] && ctrl == [2, 2, 0];

    let xs: Vec<f64> = (0..6).map(|k| 10f64.powi(-k)).collect();
    let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x.sqrt()).collect();
    let slope = loglog_slope(&xs, &ys).ok().map(|(s, _)| s);
    let slope_ok = slope.is_some_and(|s| (s - 0.5).abs() <= C8_SLOPE_TOL);

    rep.line(
        "8",
        riccati_ok && ranks_ok && slope_ok,
        format!(
            "P_inf {:?} / {:?} (tol {C8_RICCATI_TOL:e}), observability {obs:?} (want [2, 2, 1]), controllability {ctrl:?} (want [2, 2, 0]), slope {} (tol {C8_SLOPE_TOL:e})",
            p1.ok(),
            p2.ok(),
            fmt_opt(slope)
        ),
    );
}

fn criterion_9(rep: &mut Report) {
    let mut cfg = lorenz_config();
    cfg.epsilon_list = vec![1e-1, 1e-2, 1e-3];
    cfg.n_steps = 20_000;
    cfg.m_list = Some(vec![2, 4]);
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    write_results(&run_m_sweep(&cfg).unwrap(), &a).unwrap();
    // Second run on a single worker to also rule out scheduling effects.
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    pool.install(|| write_results(&run_m_sweep(&cfg).unwrap(), &b).unwrap());
    let bytes_a = std::fs::read(a.join("sweep.csv")).unwrap();
    let bytes_b = std::fs::read(b.join("sweep.csv")).unwrap();
    rep.line(
        "9",
        !bytes_a.is_empty() && bytes_a == bytes_b,
        format!(
            "sweep.csv {} bytes, identical: {}",
            bytes_a.len(),
            bytes_a == bytes_b
        ),
    );
}

fn main() {
    let mut rep = Report { failures: 0 };
    let c1 = criterion_1(&mut rep);
    let c2_violations = criterion_2(&mut rep);
    let sweep = criteria_3_to_5(&mut rep);

    let sweep_violations: usize = sweep.rows.iter().map(|r| r.invariant_violations).sum();
    let total = c1.violations + c2_violations + sweep_violations;
    rep.line(
        "6",
        total == 0 && c1.v_max <= c1.v_bound,
        format!(
            "invariant violations {total} (c1 {}, c2 {c2_violations}, sweep {sweep_violations}), max V {:.4} <= v_upper_bound {:.4}",
            c1.violations, c1.v_max, c1.v_bound
        ),
    );

    criterion_7(&mut rep);
    criterion_8(&mut rep);
    criterion_9(&mut rep);

    println!("acceptance: {} failed", rep.failures);
    if rep.failures > 0 {
        std::process::exit(1);
    }
}
