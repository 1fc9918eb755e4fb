//! Subcommand implementations; each writes CSV data plus JSON metadata under
//! the output directory and returns a CliError for nonzero exits.

use std::path::{Path, PathBuf};

use serde_json::json;

use fastslow::flow::{evolve, poincare_returns, sample_invariant, FlowState};
use fastslow::homog::{
    default_tol_psd, diffusion_field, drift_field, estimate_b, estimate_b_suspension,
    matrix_sqrt_psd, merge_fields, signed_area, CoeffField, CoeffFieldDoc, EnsemblePlan,
    Interpolation, SuspensionParams, COEFF_FIELD_VERSION,
};
use fastslow::io::{
    append_estimate_csv, write_coeff_field, write_driver_csv, write_ensemble_csv, write_path_csv,
    write_report_json,
};
use fastslow::observable::{wip_path_eps, Observable};
use fastslow::roughpath::{
    chen_defect, lift_smooth, solve_rde, HolderPath, RoughDriver, VectorFieldPair,
};
use fastslow::rng;
use fastslow::sim::{run_ensemble, solve_sde, FastSlowPlan};
use fastslow::stats::ks_distance;

use crate::config::{CliError, CliResult, Experiment};

fn out_dir(exp: &Experiment, flag: Option<&Path>) -> CliResult<PathBuf> {
    let dir = flag
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from(&exp.cfg.output.dir));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn field_tol(field: &CoeffField) -> f64 {
    let d = field.dim();
    field
        .diffusion_sq
        .iter()
        .map(|s| default_tol_psd(s, d))
        .fold(1e-12, f64::max)
}

fn build_field(exp: &Experiment) -> CliResult<CoeffField> {
    let spec = exp.flow()?;
    let sys = exp.slow_system(&spec)?;
    let choice = exp.estimator_choice()?;
    let plan = exp.plan();
    let axes = exp.cfg.estimator.axes.clone();
    let drift = drift_field(&spec, &sys, axes.clone(), &choice, &plan, Interpolation::Multilinear)?;
    let diff = diffusion_field(&spec, &sys, axes, &choice, &plan, Interpolation::Multilinear)?;
    let field = merge_fields(&drift, &diff)?;
    field.validate(field_tol(&field))?;
    Ok(field)
}

pub fn cmd_estimate(exp: &Experiment, out: Option<&Path>) -> CliResult<()> {
    let dir = out_dir(exp, out)?;
    let field = build_field(exp)?;
    let doc = CoeffFieldDoc {
        version: COEFF_FIELD_VERSION,
        provenance: json!({
            "config_hash": exp.hash,
            "seed": exp.cfg.estimator.seed,
            "method": exp.cfg.estimator.method,
        }),
        field,
    };
    write_coeff_field(&dir.join("coeff_field.json"), &doc)?;

    // scalar estimate log at the slow origin
    let spec = exp.flow()?;
    let sys = exp.slow_system(&spec)?;
    let choice = exp.estimator_choice()?;
    let plan = exp.plan();
    let b0 = sys.b_at(&exp.cfg.simulation.xi);
    let est = estimate_b(&spec, &b0, &b0, &choice, &plan)?;
    append_estimate_csv(&dir.join("estimates.csv"), "b_xi_xi", &est)?;
    println!("estimate: coeff_field.json + estimates.csv written to {}", dir.display());
    Ok(())
}

pub fn cmd_converge(exp: &Experiment, out: Option<&Path>) -> CliResult<()> {
    let dir = out_dir(exp, out)?;
    let sim = &exp.cfg.simulation;
    let spec = exp.flow()?;
    let sys = exp.slow_system(&spec)?;
    let field = build_field(exp)?;
    let d = field.dim();

    let sde = solve_sde(
        &field,
        &sim.xi,
        sim.t_final,
        sim.dt_sde,
        sim.members,
        sim.seed ^ 0x5de5_de5d_e5de_5de5,
        sim.clamp,
    )?;
    write_ensemble_csv(
        &dir.join("ensemble_sde.csv"),
        &sde,
        &json!({"config_hash": exp.hash, "kind": "sde", "dt": sim.dt_sde, "t_final": sim.t_final}),
    )?;

    let mut ladder = Vec::new();
    let mut escapes_total = sde.escapes;
    let fs_plan = FastSlowPlan {
        burn_in: exp.cfg.estimator.burn_in,
        gap: exp.cfg.estimator.gap,
        dt_fast: sim.dt_fast,
        guard: sim.guard,
        store_paths: sim.store_paths,
        ..FastSlowPlan::default()
    };
    for &eps in &sim.eps {
        let res = run_ensemble(&spec, &sys, eps, &sim.xi, sim.t_final, sim.members, sim.seed, &fs_plan)?;
        escapes_total += res.escapes;
        write_ensemble_csv(
            &dir.join(format!("ensemble_eps_{eps}.csv")),
            &res,
            &json!({"config_hash": exp.hash, "kind": "fast_slow", "dt_fast": sim.dt_fast, "t_final": sim.t_final}),
        )?;
        let mut ks = Vec::new();
        for i in 0..d {
            let a: Vec<f64> = res.endpoints.iter().map(|x| x[i]).collect();
            let b: Vec<f64> = sde.endpoints.iter().map(|x| x[i]).collect();
            ks.push(ks_distance(&a, &b, sim.ks_threshold)?);
        }
        ladder.push((eps, res.escapes, ks));
    }

    // trend verdict over the ladder sorted from coarse to fine eps
    let mut order: Vec<usize> = (0..ladder.len()).collect();
    order.sort_by(|&a, &b| ladder[b].0.total_cmp(&ladder[a].0));
    let mut verdict = escapes_total == 0;
    let mut prev = f64::INFINITY;
    for &k in &order {
        let worst = ladder[k].2.iter().map(|r| r.value).fold(0.0, f64::max);
        if worst > prev + sim.trend_slack {
            verdict = false;
        }
        prev = worst;
    }
    if ladder.len() > 1 {
        if let Some(&last) = order.last() {
            let final_worst = ladder[last].2.iter().map(|r| r.value).fold(0.0, f64::max);
            verdict = verdict && final_worst <= sim.ks_threshold;
        }
    }

    let report = json!({
        "config_hash": exp.hash,
        "seed": sim.seed,
        "threshold": sim.ks_threshold,
        "trend_slack": sim.trend_slack,
        "escapes": escapes_total,
        "ladder": ladder.iter().map(|(eps, escapes, ks)| json!({
            "eps": eps,
            "escapes": escapes,
            "ks": ks,
        })).collect::<Vec<_>>(),
        "verdict": if ladder.len() > 1 { json!(verdict) } else { json!(null) },
    });
    write_report_json(&dir.join("converge_report.json"), &report)?;
    for (eps, escapes, ks) in &ladder {
        let worst = ks.iter().map(|r| r.value).fold(0.0, f64::max);
        println!("converge: eps = {eps}: ks = {worst:.4}, escapes = {escapes}");
    }
    if ladder.len() > 1 && !verdict {
        return Err(CliError::Check("KS trend or threshold violated".into()));
    }
    Ok(())
}

pub fn cmd_wip(exp: &Experiment, out: Option<&Path>) -> CliResult<()> {
    let dir = out_dir(exp, out)?;
    let sim = &exp.cfg.simulation;
    let spec = exp.flow()?;
    let v = exp.observable(&spec)?;
    let y0 = &sample_invariant(&spec, sim.seed, exp.cfg.estimator.burn_in, 1, 1.0, sim.dt_fast)?[0];
    let grid: Vec<f64> = (0..=100).map(|k| sim.t_final * k as f64 / 100.0).collect();
    for &eps in &sim.eps {
        let (w, ww) = wip_path_eps(&spec, &v, y0, eps, &grid, sim.dt_fast)?;
        write_path_csv(&dir.join(format!("wip_w_eps_{eps}.csv")), &w, "w")?;
        write_path_csv(&dir.join(format!("wip_ww_eps_{eps}.csv")), &ww, "ww")?;
        let driver = lift_smooth(&HolderPath::new(w.grid.clone(), w.values.clone(), 0.45));
        write_driver_csv(
            &dir.join(format!("wip_driver_eps_{eps}.csv")),
            &driver,
            &json!({"config_hash": exp.hash, "eps": eps, "seed": sim.seed}),
        )?;
    }
    println!("wip: paths for {} eps values written to {}", sim.eps.len(), dir.display());
    Ok(())
}

pub fn cmd_suspension(exp: &Experiment, out: Option<&Path>) -> CliResult<()> {
    let dir = out_dir(exp, out)?;
    let spec = exp.flow()?;
    let plan = exp.plan();
    let section = Experiment::lorenz_section();
    let y0 = &sample_invariant(&spec, plan.seed, plan.burn_in, 1, 1.0, plan.dt)?[0];
    let count = 200;
    let rets = poincare_returns(&spec, &section, y0, count, plan.dt, 10.0 * (count + 1) as f64)?;
    let times: Vec<f64> = rets.iter().map(|r| r.return_time).collect();
    let n = times.len() as f64;
    let r_bar = times.iter().sum::<f64>() / n;
    let r_var = times.iter().map(|t| (t - r_bar).powi(2)).sum::<f64>() / (n - 1.0);

    let v = exp.observable(&spec)?;
    let params = SuspensionParams {
        n_max: exp.cfg.estimator.n_max,
        ..SuspensionParams::default()
    };
    let est = estimate_b_suspension(&spec, &section, &v, &v, &params, &plan)?;
    append_estimate_csv(&dir.join("estimates.csv"), "suspension_b_vv", &est)?;
    let report = json!({
        "config_hash": exp.hash,
        "seed": plan.seed,
        "returns": times.len(),
        "r_bar": r_bar,
        "r_std": r_var.sqrt(),
        "b_vv": {"value": est.value, "std_error": est.std_error},
    });
    write_report_json(&dir.join("suspension_report.json"), &report)?;
    println!("suspension: r_bar = {r_bar:.4} over {} returns; B(v,v) = {:.4} +- {:.4}",
        times.len(), est.value, est.std_error);
    Ok(())
}

/// Random smooth driver: a low-order Fourier path lifted by trapezoid.
fn fourier_driver(seed: u64, dim: usize, points: usize) -> RoughDriver {
    let grid: Vec<f64> = (0..=points).map(|k| k as f64 / points as f64).collect();
    let values: Vec<Vec<f64>> = grid
        .iter()
        .map(|&t| {
            (0..dim)
                .map(|a| {
                    let mut x = 0.0;
                    for m in 1..=3u64 {
                        let amp = rng::uniform_open(seed, a as u64, m, 0) - 0.5;
                        let phase = rng::uniform_open(seed, a as u64, m, 1) * std::f64::consts::TAU;
                        x += amp * ((m as f64) * std::f64::consts::TAU * t + phase).sin();
                    }
                    x
                })
                .collect()
        })
        .collect();
    let base: Vec<f64> = values[0].clone();
    let values = values
        .into_iter()
        .map(|v| v.iter().zip(&base).map(|(a, b)| a - b).collect())
        .collect();
    lift_smooth(&HolderPath::new(grid, values, 0.45))
}

pub fn cmd_rough(exp: &Experiment, out: Option<&Path>) -> CliResult<()> {
    let dir = out_dir(exp, out)?;
    let mut suites = Vec::new();
    for k in 0..5u64 {
        let driver = fourier_driver(100 + k, 2, 400);
        let defect = chen_defect(&driver);
        suites.push(json!({"name": format!("chen_lift_{k}"), "value": defect, "pass": defect <= 1e-10}));
        let wt = driver.w.values.last().unwrap().clone();
        let wwt = driver.ww.last().unwrap().clone();
        let sym_gap = (0..2)
            .flat_map(|a| (0..2).map(move |b| (a, b)))
            .map(|(a, b)| (wwt[a * 2 + b] + wwt[b * 2 + a] - wt[a] * wt[b]).abs())
            .fold(0.0_f64, f64::max);
        suites.push(json!({"name": format!("product_rule_{k}"), "value": sym_gap, "pass": sym_gap <= 1e-12}));
    }
    // geometric RDE against the exponential closed form
    let driver = fourier_driver(7, 1, 4000);
    let fields = VectorFieldPair {
        dim: 1,
        v_dim: 1,
        w_dim: 1,
        f: std::sync::Arc::new(|_x: &[f64], out: &mut [f64]| out[0] = 0.0),
        h: std::sync::Arc::new(|x: &[f64], out: &mut [f64]| out[0] = x[0]),
        dh: std::sync::Arc::new(|_x: &[f64], out: &mut [f64]| out[0] = 1.0),
    };
    let v_path = HolderPath::new(
        driver.w.grid.clone(),
        driver.w.grid.iter().map(|&t| vec![t]).collect(),
        1.0,
    );
    let sol = solve_rde(&fields, &v_path, &driver, &[1.0], 1e6)?;
    let err = sol
        .values
        .iter()
        .zip(&driver.w.values)
        .map(|(x, w)| (x[0] - w[0].exp()).abs())
        .fold(0.0_f64, f64::max);
    suites.push(json!({"name": "rde_exponential", "value": err, "pass": err <= 1e-3}));

    let all_pass = suites.iter().all(|s| s["pass"].as_bool().unwrap_or(false));
    let report = json!({"config_hash": exp.hash, "suites": suites, "pass": all_pass});
    write_report_json(&dir.join("rough_report.json"), &report)?;
    for s in report["suites"].as_array().unwrap() {
        println!(
            "rough {}: {} (value {:.3e})",
            s["name"].as_str().unwrap(),
            if s["pass"].as_bool().unwrap() { "PASS" } else { "FAIL" },
            s["value"].as_f64().unwrap()
        );
    }
    if !all_pass {
        return Err(CliError::Check("rough-path suite failed".into()));
    }
    Ok(())
}

pub fn cmd_selftest(exp: &Experiment, out: Option<&Path>) -> CliResult<()> {
    use fastslow::flow::FlowSpec;
    let dir = out_dir(exp, out)?;
    let mut suites: Vec<(String, f64, bool)> = Vec::new();

    // Chen identity on a lifted smooth driver, and sensitivity to a
    // corrupted stored second level
    let driver = fourier_driver(3, 2, 400);
    let defect = chen_defect(&driver);
    suites.push(("chen_lift".into(), defect, defect <= 1e-10));
    let mut bad = driver.clone();
    let mid = bad.ww.len() / 2;
    bad.ww[mid][1] += 1e-3;
    let defect_bad = chen_defect(&bad);
    suites.push(("chen_corruption".into(), defect_bad, defect_bad >= 5e-4));

    // product rule of the lift
    let wt = driver.w.values.last().unwrap().clone();
    let wwt = driver.ww.last().unwrap().clone();
    let sym_gap = (0..2)
        .flat_map(|a| (0..2).map(move |b| (a, b)))
        .map(|(a, b)| (wwt[a * 2 + b] + wwt[b * 2 + a] - wt[a] * wt[b]).abs())
        .fold(0.0_f64, f64::max);
    suites.push(("product_rule".into(), sym_gap, sym_gap <= 1e-12));

    // signed area of the unit circle via one rotation period
    let spec = FlowSpec::rotation_test();
    let orbit = evolve(
        &spec,
        &FlowState::new(vec![1.0, 0.0], 0.0),
        std::f64::consts::TAU,
        std::f64::consts::TAU / 20_000.0,
    )?;
    let ret = fastslow::flow::ReturnSample {
        base_point: vec![1.0, 0.0],
        return_time: std::f64::consts::TAU,
        intra_orbit: orbit,
    };
    let minus_y2 = Observable::coordinate(1).scaled(-1.0);
    let area = signed_area(&ret, &minus_y2, &Observable::coordinate(0));
    let area_err = (area - std::f64::consts::PI).abs();
    suites.push(("signed_area_circle".into(), area_err, area_err <= 1e-6));

    // RK4 order: halving the step should shrink the two-half-steps defect by
    // about 2^5
    let lorenz = FlowSpec::lorenz_classic();
    let y0 = sample_invariant(&lorenz, 5, 30.0, 1, 1.0, 1e-3)?[0].clone();
    let defect_at = |dt: f64| -> CliResult<f64> {
        let full = evolve(&lorenz, &y0, dt, dt)?;
        let halves = evolve(&lorenz, &y0, dt, dt / 2.0)?;
        Ok(full
            .points
            .last()
            .unwrap()
            .iter()
            .zip(halves.points.last().unwrap())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0_f64, f64::max))
    };
    let ratio = defect_at(1e-2)? / defect_at(5e-3)?;
    suites.push(("rk4_order".into(), ratio, (15.0..=60.0).contains(&ratio)));

    // PSD square root round trip
    let s = [2.0, 1.0, 1.0, 2.0];
    let root = matrix_sqrt_psd(&s, 2, 1e-10)?;
    let mut recon_err = 0.0_f64;
    for i in 0..2 {
        for j in 0..2 {
            let r: f64 = (0..2).map(|k| root[i * 2 + k] * root[j * 2 + k]).sum();
            recon_err = recon_err.max((r - s[i * 2 + j]).abs());
        }
    }
    suites.push(("psd_sqrt".into(), recon_err, recon_err <= 1e-10));

    // a genuinely indefinite matrix must be rejected
    let bad_field = CoeffField {
        axes: vec![vec![0.0, 1.0]],
        drift: vec![vec![0.0]; 2],
        diffusion_sq: vec![vec![-1.0]; 2],
        diffusion: vec![vec![0.0]; 2],
        interpolation: Interpolation::Multilinear,
    };
    let rejected = bad_field.validate(1e-8).is_err();
    suites.push(("psd_negative_fixture".into(), f64::from(u8::from(rejected)), rejected));

    // estimator bilinearity on short shared orbits
    let plan = EnsemblePlan {
        seed: 9,
        members: 4,
        burn_in: 20.0,
        gap: 1.0,
        dt: 1e-3,
        calib_time: 50.0,
    };
    let params = fastslow::homog::WindowParams {
        n: 20.0,
        origins: 1,
        ..fastslow::homog::WindowParams::default()
    };
    let v = Observable::coordinate(0);
    let w = Observable::coordinate(2);
    let b_vw = fastslow::homog::estimate_b_window(&lorenz, &v, &w, &params, &plan)?;
    let b_2vw = fastslow::homog::estimate_b_window(&lorenz, &v.scaled(2.0), &w, &params, &plan)?;
    let lin_err = (b_2vw.value - 2.0 * b_vw.value).abs() / b_vw.value.abs().max(1.0);
    suites.push(("estimator_bilinearity".into(), lin_err, lin_err <= 1e-9));

    let all_pass = suites.iter().all(|(_, _, p)| *p);
    for (name, value, pass) in &suites {
        println!(
            "selftest {name}: {} (value {value:.3e})",
            if *pass { "PASS" } else { "FAIL" }
        );
    }
    let report = json!({
        "config_hash": exp.hash,
        "suites": suites.iter().map(|(n, v, p)| json!({"name": n, "value": v, "pass": p})).collect::<Vec<_>>(),
        "pass": all_pass,
    });
    write_report_json(&dir.join("selftest_report.json"), &report)?;
    if !all_pass {
        return Err(CliError::Check("selftest failed".into()));
    }
    Ok(())
}
