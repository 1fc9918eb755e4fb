//! Statistical verification: two-sample distribution comparison, the
//! covariance identity linking the rescaled paths to the bilinear operator,
//! moment-scaling slope fits, and Hoelder tail diagnostics of rough drivers.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::flow::{sample_invariant, FlowSpec, Stepper};
use crate::homog::{BEstimate, EnsemblePlan};
use crate::observable::{check_finite, substeps, Observable, PairState};
use crate::roughpath::{holder_seminorm, RoughDriver};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    Ks,
    Energy,
    MomentK,
}

/// Outcome of a two-sample comparison; `pass` iff `value <= threshold`.
#[derive(Clone, Debug, Serialize)]
pub struct TwoSampleReport {
    pub statistic: Statistic,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
    pub n1: usize,
    pub n2: usize,
}

/// Log-log slope fit against a target exponent; `pass` iff
/// `|exponent_fit - target| <= band`.
#[derive(Clone, Debug, Serialize)]
pub struct ScalingReport {
    pub exponent_fit: f64,
    pub stderr: f64,
    pub target: f64,
    pub band: f64,
    pub pass: bool,
}

/// Two-sample Kolmogorov-Smirnov statistic (sup gap of the empirical CDFs).
pub fn ks_distance(s1: &[f64], s2: &[f64], threshold: f64) -> Result<TwoSampleReport> {
    if s1.is_empty() || s2.is_empty() {
        return Err(Error::InvalidInput("ks_distance needs non-empty samples".into()));
    }
    let mut a = s1.to_vec();
    let mut b = s2.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n1, n2) = (a.len(), b.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut sup = 0.0_f64;
    while i < n1 && j < n2 {
        let x = a[i].min(b[j]);
        while i < n1 && a[i] <= x {
            i += 1;
        }
        while j < n2 && b[j] <= x {
            j += 1;
        }
        sup = sup.max((i as f64 / n1 as f64 - j as f64 / n2 as f64).abs());
    }
    Ok(TwoSampleReport {
        statistic: Statistic::Ks,
        value: sup,
        threshold,
        pass: sup <= threshold,
        n1,
        n2,
    })
}

/// Comparison of the empirical second moments of W(1) samples with the
/// symmetrized bilinear-operator prediction, entrywise z-scored against the
/// combined (Monte Carlo + estimator) standard error.
#[derive(Clone, Debug, Serialize)]
pub struct CovarianceReport {
    pub dim: usize,
    pub samples: usize,
    /// m x m row-major
    pub empirical: Vec<f64>,
    pub predicted: Vec<f64>,
    pub z_scores: Vec<f64>,
}

impl CovarianceReport {
    pub fn max_abs_z(&self) -> f64 {
        self.z_scores.iter().fold(0.0_f64, |m, z| m.max(z.abs()))
    }
}

/// Check E W^i(1) W^j(1) = B(v^i, v^j) + B(v^j, v^i) on endpoint samples of
/// the rescaled path. `b` is the m x m matrix of estimates for B(v^i, v^j).
pub fn covariance_check(w_samples: &[Vec<f64>], b: &[Vec<BEstimate>]) -> Result<CovarianceReport> {
    let n = w_samples.len();
    if n < 2 {
        return Err(Error::InvalidInput("covariance_check needs >= 2 samples".into()));
    }
    let m = b.len();
    if b.iter().any(|row| row.len() != m) || w_samples.iter().any(|w| w.len() != m) {
        return Err(Error::InvalidInput("covariance_check dimension mismatch".into()));
    }
    let nf = n as f64;
    let mut empirical = vec![0.0; m * m];
    let mut mc_var = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            let mean = w_samples.iter().map(|w| w[i] * w[j]).sum::<f64>() / nf;
            let var = w_samples
                .iter()
                .map(|w| (w[i] * w[j] - mean).powi(2))
                .sum::<f64>()
                / (nf - 1.0);
            empirical[i * m + j] = mean;
            mc_var[i * m + j] = var / nf;
        }
    }
    let mut predicted = vec![0.0; m * m];
    let mut z_scores = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            predicted[i * m + j] = b[i][j].value + b[j][i].value;
            let se = (mc_var[i * m + j]
                + b[i][j].std_error.powi(2)
                + b[j][i].std_error.powi(2))
            .sqrt();
            let diff = empirical[i * m + j] - predicted[i * m + j];
            z_scores[i * m + j] = if se > 0.0 {
                diff / se
            } else if diff == 0.0 {
                0.0
            } else {
                f64::INFINITY
            };
        }
    }
    Ok(CovarianceReport {
        dim: m,
        samples: n,
        empirical,
        predicted,
        z_scores,
    })
}

fn euclid(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn slope_fit(xs: &[f64], ys: &[f64], target: f64, band: f64) -> Result<ScalingReport> {
    let m = xs.len();
    if m < 3 {
        return Err(Error::InvalidInput("slope fit needs >= 3 points".into()));
    }
    let mf = m as f64;
    let xbar = xs.iter().sum::<f64>() / mf;
    let ybar = ys.iter().sum::<f64>() / mf;
    let sxx: f64 = xs.iter().map(|x| (x - xbar).powi(2)).sum();
    if sxx <= 0.0 {
        return Err(Error::InvalidInput("degenerate abscissa grid".into()));
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - xbar) * (y - ybar)).sum();
    let slope = sxy / sxx;
    let intercept = ybar - slope * xbar;
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let stderr = (ss_res / (mf - 2.0) / sxx).sqrt();
    Ok(ScalingReport {
        exponent_fit: slope,
        stderr,
        target,
        band,
        pass: (slope - target).abs() <= band,
    })
}

/// Slope fits of log ||v_t||_4 vs log t (target exponent ~1/2) and of
/// log ||S_t||_2 vs log t (target ~1), with v_t the Birkhoff integral and S_t
/// the iterated integral, over an ensemble of invariant-measure starts. The
/// fourth/second moments stand in as proxies for the inaccessible p-moments.
#[allow(clippy::too_many_arguments)]
pub fn moment_scaling(
    spec: &FlowSpec,
    v: &Observable,
    w: &Observable,
    t_grid: &[f64],
    plan: &EnsemblePlan,
    target_v: f64,
    band_v: f64,
    target_s: f64,
    band_s: f64,
) -> Result<(ScalingReport, ScalingReport)> {
    let m = t_grid.len();
    if m < 3 || t_grid[0] <= 0.0 || t_grid.windows(2).any(|p| p[1] <= p[0]) {
        return Err(Error::InvalidInput(
            "moment_scaling needs an increasing grid of >= 3 positive times".into(),
        ));
    }
    let t_max = *t_grid.last().unwrap();
    let starts = sample_invariant(
        spec,
        plan.seed,
        plan.burn_in,
        plan.members,
        plan.gap + t_max,
        plan.dt,
    )?;
    let mut m4 = vec![0.0; m]; // E |v_t|^4 accumulators
    let mut m2 = vec![0.0; m]; // E |S_t|^2 accumulators
    for y0 in &starts {
        let mut stepper = Stepper::new(spec);
        let mut y = y0.point.clone();
        let mut pair = PairState::new(v.arity, w.arity);
        v.evaluate(&y, &mut pair.v_prev);
        w.evaluate(&y, &mut pair.w_prev);
        let mut t_prev = 0.0;
        for (k, &t) in t_grid.iter().enumerate() {
            let (steps, h) = substeps(t - t_prev, plan.dt);
            for s in 0..steps {
                stepper.step(&mut y, h);
                check_finite(&y, t_prev + (s + 1) as f64 * h)?;
                v.evaluate(&y, &mut pair.v_cur);
                w.evaluate(&y, &mut pair.w_cur);
                pair.advance(h);
            }
            t_prev = t;
            m4[k] += euclid(&pair.inner).powi(4);
            m2[k] += euclid(&pair.iterated).powi(2);
        }
    }
    let nf = starts.len() as f64;
    let xs: Vec<f64> = t_grid.iter().map(|t| t.ln()).collect();
    let ys_v: Vec<f64> = m4.iter().map(|s| (s / nf).powf(0.25).ln()).collect();
    let ys_s: Vec<f64> = m2.iter().map(|s| (s / nf).sqrt().ln()).collect();
    Ok((
        slope_fit(&xs, &ys_v, target_v, band_v)?,
        slope_fit(&xs, &ys_s, target_s, band_s)?,
    ))
}

/// Hoelder tail stability of rough drivers across epsilon: per group, the
/// 95th percentiles of the discrete gamma-seminorm of W and the 2gamma-
/// seminorm of the second level; `pass` iff neither percentile spreads by
/// more than `growth_tol` (relative) across groups.
#[derive(Clone, Debug, Serialize)]
pub struct HolderTailReport {
    pub eps: Vec<f64>,
    pub q95_w: Vec<f64>,
    pub q95_ww: Vec<f64>,
    pub gamma: f64,
    pub growth_tol: f64,
    pub pass: bool,
}

fn frobenius(v: &[f64]) -> f64 {
    euclid(v)
}

/// Discrete 2gamma-seminorm of the second level over sampled pairs.
pub fn second_level_seminorm(driver: &RoughDriver, gamma: f64) -> f64 {
    let n = driver.w.len();
    let stride = n.div_ceil(200).max(1);
    let idx: Vec<usize> = (0..n).step_by(stride).collect();
    let mut sup = 0.0_f64;
    for (a, &i) in idx.iter().enumerate() {
        for &j in idx.get(a + 1..).unwrap_or(&[]) {
            let dt = driver.w.grid[j] - driver.w.grid[i];
            if dt <= 0.0 {
                continue;
            }
            sup = sup.max(frobenius(&driver.second_increment(i, j)) / dt.powf(2.0 * gamma));
        }
    }
    sup
}

fn q95(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let idx = ((0.95 * values.len() as f64).ceil() as usize).clamp(1, values.len());
    values[idx - 1]
}

pub fn holder_tail_check(
    groups: &[(f64, Vec<RoughDriver>)],
    gamma: f64,
    growth_tol: f64,
) -> Result<HolderTailReport> {
    if groups.is_empty() || groups.iter().any(|(_, ds)| ds.is_empty()) {
        return Err(Error::InvalidInput("holder_tail_check needs non-empty groups".into()));
    }
    let mut eps = Vec::new();
    let mut q95_w = Vec::new();
    let mut q95_ww = Vec::new();
    for (e, drivers) in groups {
        let mut sw: Vec<f64> = drivers
            .iter()
            .map(|d| holder_seminorm(&d.w, gamma))
            .collect::<Result<_>>()?;
        let mut sww: Vec<f64> = drivers
            .iter()
            .map(|d| second_level_seminorm(d, gamma))
            .collect();
        eps.push(*e);
        q95_w.push(q95(&mut sw));
        q95_ww.push(q95(&mut sww));
    }
    let spread = |qs: &[f64]| -> f64 {
        let lo = qs.iter().fold(f64::INFINITY, |a, &b| a.min(b));
        let hi = qs.iter().fold(0.0_f64, |a, &b| a.max(b));
        if lo > 0.0 {
            hi / lo - 1.0
        } else if hi == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    };
    let pass = spread(&q95_w) <= growth_tol && spread(&q95_ww) <= growth_tol;
    Ok(HolderTailReport {
        eps,
        q95_w,
        q95_ww,
        gamma,
        growth_tol,
        pass,
    })
}

/// Scalar path functionals used for weak-convergence comparison alongside the
/// endpoint law: running max and time average of one coordinate.
pub fn path_functionals(grid: &[f64], values: &[Vec<f64>], coord: usize) -> (f64, f64) {
    let max = values
        .iter()
        .map(|x| x[coord])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut avg = 0.0;
    for (win, pair) in grid.windows(2).zip(values.windows(2)) {
        avg += 0.5 * (win[1] - win[0]) * (pair[0][coord] + pair[1][coord]);
    }
    let span = grid.last().unwrap() - grid[0];
    (max, if span > 0.0 { avg / span } else { values[0][coord] })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::sample_invariant;
    use crate::homog::BMethod;
    use crate::observable::{center_via_flow, wip_path_eps};
    use crate::rng;
    use crate::roughpath::{lift_smooth, HolderPath};
    use std::collections::BTreeMap;

    fn normals(seed: u64, member: u64, n: usize, shift: f64) -> Vec<f64> {
        (0..n)
            .map(|k| shift + rng::standard_normal(seed, member, k as u64, 0))
            .collect()
    }

    #[test]
    fn ks_identical_is_zero() {
        let s = normals(1, 0, 500, 0.0);
        let r = ks_distance(&s, &s, 0.05).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.pass);
    }

    #[test]
    fn ks_null_calibration() {
        // matched N(0,1) pairs at n = 2000 should clear the 0.05 gate almost
        // always (asymptotic exceedance probability ~1.3%)
        let reps = 40;
        let mut below = 0;
        for rep in 0..reps {
            let a = normals(50 + rep, 0, 2000, 0.0);
            let b = normals(50 + rep, 1, 2000, 0.0);
            if ks_distance(&a, &b, 0.05).unwrap().pass {
                below += 1;
            }
        }
        assert!(below >= 38, "only {below}/{reps} below threshold");
    }

    #[test]
    fn ks_detects_unit_shift() {
        let a = normals(3, 0, 2000, 0.0);
        let b = normals(3, 1, 2000, 1.0);
        let r = ks_distance(&a, &b, 0.05).unwrap();
        // analytic sup-CDF gap between N(0,1) and N(1,1) is ~0.383
        assert!(r.value > 0.3, "value {}", r.value);
        assert!(!r.pass);
    }

    #[test]
    fn ks_symmetric_and_bounded() {
        let a = normals(4, 0, 300, 0.0);
        let b = normals(4, 1, 700, 0.4);
        let r1 = ks_distance(&a, &b, 0.05).unwrap();
        let r2 = ks_distance(&b, &a, 0.05).unwrap();
        assert_eq!(r1.value, r2.value);
        assert!(r1.value >= 0.0 && r1.value <= 1.0);
        assert!(ks_distance(&[], &a, 0.05).is_err());
    }

    fn fake_estimate(value: f64, se: f64) -> BEstimate {
        BEstimate {
            value,
            std_error: se,
            method: BMethod::Window,
            meta: BTreeMap::new(),
        }
    }

    #[test]
    fn covariance_zero_case() {
        let samples = vec![vec![0.0, 0.0]; 10];
        let b = vec![
            vec![fake_estimate(0.0, 0.0), fake_estimate(0.0, 0.0)],
            vec![fake_estimate(0.0, 0.0), fake_estimate(0.0, 0.0)],
        ];
        let r = covariance_check(&samples, &b).unwrap();
        assert_eq!(r.max_abs_z(), 0.0);
    }

    #[test]
    fn covariance_gaussian_synthetic() {
        // samples with covariance diag(1, 4); predicted from B = cov / 2
        let n = 4000;
        let samples: Vec<Vec<f64>> = (0..n)
            .map(|m| {
                vec![
                    rng::standard_normal(7, m, 0, 0),
                    2.0 * rng::standard_normal(7, m, 0, 1),
                ]
            })
            .collect();
        let b = vec![
            vec![fake_estimate(0.5, 0.01), fake_estimate(0.0, 0.01)],
            vec![fake_estimate(0.0, 0.01), fake_estimate(2.0, 0.04)],
        ];
        let r = covariance_check(&samples, &b).unwrap();
        assert!(r.max_abs_z() <= 3.0, "z = {:?}", r.z_scores);
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(r.predicted[i * 2 + j], r.predicted[j * 2 + i]);
            }
        }
    }

    #[test]
    fn covariance_dimension_mismatch() {
        let samples = vec![vec![0.0]; 5];
        let b = vec![
            vec![fake_estimate(0.0, 0.0), fake_estimate(0.0, 0.0)],
            vec![fake_estimate(0.0, 0.0), fake_estimate(0.0, 0.0)],
        ];
        assert!(covariance_check(&samples, &b).is_err());
    }

    #[test]
    fn moment_scaling_deterministic_slope_one() {
        let spec = FlowSpec::lorenz_classic();
        let one = Observable::constant(vec![1.0]);
        let plan = EnsemblePlan {
            members: 2,
            burn_in: 5.0,
            ..EnsemblePlan::default()
        };
        let grid = [0.5, 1.0, 2.0, 4.0, 8.0, 16.0];
        let (rv, rs) =
            moment_scaling(&spec, &one, &one, &grid, &plan, 1.0, 0.01, 2.0, 0.01).unwrap();
        // v_t = t and S_t = t^2/2 exactly for the constant observable
        assert!((rv.exponent_fit - 1.0).abs() < 1e-8, "{}", rv.exponent_fit);
        assert!((rs.exponent_fit - 2.0).abs() < 1e-8, "{}", rs.exponent_fit);
        assert!(rv.pass && rs.pass);
    }

    #[test]
    fn moment_scaling_lorenz_bands() {
        let spec = FlowSpec::lorenz_classic();
        let v = center_via_flow(&spec, &Observable::coordinate(0), 31, 50.0, 500.0, 1e-3).unwrap();
        let w = center_via_flow(&spec, &Observable::coordinate(1), 31, 50.0, 500.0, 1e-3).unwrap();
        let plan = EnsemblePlan {
            members: 200,
            burn_in: 50.0,
            ..EnsemblePlan::default()
        };
        // distinct v, w decouple the two fits (for v = w the iterated
        // integral is v_t^2/2, tying the S slope to twice the v slope); the
        // grid starts past the decorrelation time so the diffusive regime
        // dominates
        let grid = [3.125, 6.25, 12.5, 25.0, 50.0, 100.0];
        let (rv, rs) = moment_scaling(&spec, &v, &w, &grid, &plan, 0.5, 0.1, 1.0, 0.15).unwrap();
        assert!(rv.pass, "v slope {} +- {}", rv.exponent_fit, rv.stderr);
        assert!(rs.pass, "S slope {} +- {}", rs.exponent_fit, rs.stderr);
    }

    #[test]
    fn moment_scaling_rejects_bad_grid() {
        let spec = FlowSpec::lorenz_classic();
        let one = Observable::constant(vec![1.0]);
        let plan = EnsemblePlan::default();
        assert!(moment_scaling(&spec, &one, &one, &[1.0, 2.0], &plan, 0.5, 0.1, 1.0, 0.1).is_err());
        assert!(
            moment_scaling(&spec, &one, &one, &[0.0, 1.0, 2.0], &plan, 0.5, 0.1, 1.0, 0.1).is_err()
        );
    }

    #[test]
    fn holder_tail_homogeneity() {
        // scaling a smooth path by half scales the W functional by half and
        // the second level by a quarter
        let grid: Vec<f64> = (0..=100).map(|k| k as f64 / 100.0).collect();
        let path = |amp: f64| {
            HolderPath::new(
                grid.clone(),
                grid.iter().map(|&t| vec![amp * (3.0 * t).sin()]).collect(),
                0.45,
            )
        };
        let d1 = lift_smooth(&path(1.0));
        let d2 = lift_smooth(&path(0.5));
        let s1 = holder_seminorm(&d1.w, 0.45).unwrap();
        let s2 = holder_seminorm(&d2.w, 0.45).unwrap();
        assert!((s1 / s2 - 2.0).abs() < 1e-10);
        let t1 = second_level_seminorm(&d1, 0.45);
        let t2 = second_level_seminorm(&d2, 0.45);
        assert!((t1 / t2 - 4.0).abs() < 1e-10);
    }

    #[test]
    fn holder_tail_lorenz_across_eps() {
        let spec = FlowSpec::lorenz_classic();
        let v = center_via_flow(&spec, &Observable::coordinate(0), 31, 50.0, 500.0, 1e-3)
            .unwrap()
            .scaled(0.1);
        let grid: Vec<f64> = (0..=64).map(|k| k as f64 / 64.0).collect();
        let mut groups = Vec::new();
        for (gi, eps) in [0.2_f64, 0.1].into_iter().enumerate() {
            let starts = sample_invariant(
                &spec,
                40 + gi as u64,
                50.0,
                8,
                1.0 + eps.powi(-2),
                1e-3,
            )
            .unwrap();
            let drivers: Vec<RoughDriver> = starts
                .iter()
                .map(|y0| {
                    let (w, _) = wip_path_eps(&spec, &v, y0, eps, &grid, 1e-3).unwrap();
                    lift_smooth(&HolderPath::new(w.grid, w.values, 0.45))
                })
                .collect();
            groups.push((eps, drivers));
        }
        let r = holder_tail_check(&groups, 0.4, 0.5).unwrap();
        assert!(r.pass, "q95_w {:?} q95_ww {:?}", r.q95_w, r.q95_ww);
    }

    #[test]
    fn path_functional_values() {
        let grid = [0.0, 0.5, 1.0];
        let values = vec![vec![0.0], vec![2.0], vec![1.0]];
        let (max, avg) = path_functionals(&grid, &values, 0);
        assert_eq!(max, 2.0);
        assert!((avg - 1.25).abs() < 1e-12);
    }
}
