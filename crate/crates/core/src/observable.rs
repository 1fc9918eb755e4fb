//! Mean-zero observables on the fast phase space and their time integrals:
//! Birkhoff integrals, iterated integrals and rescaled (WIP) path pairs.
//!
//! All quadrature is trapezoid on the integrator's own grid. Iterated
//! integrals use the midpoint of the running inner integral per step, which
//! makes the product-rule identity S(v,w) + S(w,v)^T = v_t (x) w_t and the
//! Chen increment identity exact on shared grids.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::flow::{FlowSpec, FlowState, Stepper};

/// A map from fast phase space to R^m with centering metadata.
#[derive(Clone)]
pub struct Observable {
    pub arity: usize,
    eval: Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>,
    pub mean: Vec<f64>,
    pub centered: bool,
    pub name: String,
}

impl fmt::Debug for Observable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Observable")
            .field("name", &self.name)
            .field("arity", &self.arity)
            .field("centered", &self.centered)
            .field("mean", &self.mean)
            .finish()
    }
}

impl Observable {
    pub fn new<F>(name: impl Into<String>, arity: usize, f: F) -> Self
    where
        F: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    {
        Observable {
            arity,
            eval: Arc::new(f),
            mean: vec![0.0; arity],
            centered: false,
            name: name.into(),
        }
    }

    /// Scalar coordinate projection y -> y_i (zero-based index).
    pub fn coordinate(i: usize) -> Self {
        Observable::new(format!("y{}", i + 1), 1, move |y, out| out[0] = y[i])
    }

    /// Scalar squared coordinate y -> y_i^2.
    pub fn coordinate_sq(i: usize) -> Self {
        Observable::new(format!("y{}_sq", i + 1), 1, move |y, out| out[0] = y[i] * y[i])
    }

    pub fn constant(values: Vec<f64>) -> Self {
        let arity = values.len();
        Observable::new("const", arity, move |_, out| out.copy_from_slice(&values))
    }

    /// Stack scalar observables into one vector-valued observable.
    pub fn stack(name: impl Into<String>, parts: Vec<Observable>) -> Self {
        assert!(parts.iter().all(|p| p.arity == 1));
        let arity = parts.len();
        Observable::new(name, arity, move |y, out| {
            let mut buf = [0.0];
            for (i, p) in parts.iter().enumerate() {
                p.evaluate(y, &mut buf);
                out[i] = buf[0];
            }
        })
    }

    /// alpha * self, preserving centering metadata.
    pub fn scaled(&self, alpha: f64) -> Self {
        let inner = self.clone();
        Observable {
            arity: self.arity,
            eval: Arc::new(move |y, out| {
                inner.evaluate_raw(y, out);
                for o in out.iter_mut() {
                    *o *= alpha;
                }
            }),
            mean: self.mean.iter().map(|m| m * alpha).collect(),
            centered: self.centered,
            name: format!("{}*{}", alpha, self.name),
        }
    }

    /// alpha * self + other (componentwise), preserving centering metadata.
    pub fn linear_comb(&self, alpha: f64, other: &Observable) -> Self {
        assert_eq!(self.arity, other.arity);
        let (a, b) = (self.clone(), other.clone());
        Observable {
            arity: self.arity,
            eval: Arc::new(move |y, out| {
                let mut buf = vec![0.0; a.arity];
                a.evaluate_raw(y, &mut buf);
                b.evaluate_raw(y, out);
                for (o, x) in out.iter_mut().zip(&buf) {
                    *o += alpha * x;
                }
            }),
            mean: self
                .mean
                .iter()
                .zip(&other.mean)
                .map(|(m, n)| alpha * m + n)
                .collect(),
            centered: self.centered && other.centered,
            name: format!("{}*{}+{}", alpha, self.name, other.name),
        }
    }

    /// Raw evaluation without mean subtraction.
    #[inline]
    fn evaluate_raw(&self, y: &[f64], out: &mut [f64]) {
        (self.eval)(y, out);
    }

    /// Evaluate, subtracting the stored mean if centered.
    #[inline]
    pub fn evaluate(&self, y: &[f64], out: &mut [f64]) {
        (self.eval)(y, out);
        if self.centered {
            for (o, m) in out.iter_mut().zip(&self.mean) {
                *o -= m;
            }
        }
    }

    pub fn evaluate_vec(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.arity];
        self.evaluate(y, &mut out);
        out
    }

    /// Built-in observable library addressable by name: `y1`, `y2`, ...
    /// (coordinate projections) and `y1_sq`, ... (squared coordinates).
    pub fn builtin(name: &str) -> Option<Observable> {
        let (base, sq) = match name.strip_suffix("_sq") {
            Some(b) => (b, true),
            None => (name, false),
        };
        let idx: usize = base.strip_prefix('y')?.parse().ok()?;
        if idx == 0 {
            return None;
        }
        Some(if sq {
            Observable::coordinate_sq(idx - 1)
        } else {
            Observable::coordinate(idx - 1)
        })
    }
}

/// Subtract the empirical mean over `calibration` so the returned observable
/// averages to exactly zero on that sample.
pub fn center(obs: &Observable, calibration: &[FlowState]) -> Result<Observable> {
    if calibration.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let mut mean = vec![0.0; obs.arity];
    let mut buf = vec![0.0; obs.arity];
    for s in calibration {
        obs.evaluate(&s.point, &mut buf);
        for (m, v) in mean.iter_mut().zip(&buf) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= calibration.len() as f64;
    }
    let mut out = obs.clone();
    for (m, d) in out.mean.iter_mut().zip(&mean) {
        *m += d;
    }
    out.centered = true;
    Ok(out)
}

/// Center against the time average over one long orbit. Point samples at a
/// fixed gap can alias with the oscillation of the flow and bias the mean,
/// so the continuous Birkhoff average is the reliable estimate.
pub fn center_via_flow(
    spec: &FlowSpec,
    obs: &Observable,
    seed: u64,
    burn_in: f64,
    t_avg: f64,
    dt: f64,
) -> Result<Observable> {
    assert!(t_avg > 0.0);
    let y0 = crate::flow::sample_invariant(spec, seed, burn_in, 1, 1.0, dt)?[0].clone();
    let integral = birkhoff_integral(spec, obs, &y0, 0.0, t_avg, dt)?;
    let mut out = obs.clone();
    for (m, v) in out.mean.iter_mut().zip(&integral) {
        *m += v / t_avg;
    }
    out.centered = true;
    Ok(out)
}

/// A sampled path (vector-valued, or flattened row-major matrices for
/// iterated levels).
#[derive(Clone, Debug, PartialEq)]
pub struct PathSample {
    pub grid: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

impl PathSample {
    pub fn dim(&self) -> usize {
        self.values.first().map_or(0, |v| v.len())
    }
}

/// Uniform substep count for a span, capped at step size `dt`.
#[inline]
pub(crate) fn substeps(span: f64, dt: f64) -> (usize, f64) {
    if span <= 0.0 {
        return (0, 0.0);
    }
    let n = (span / dt).ceil().max(1.0) as usize;
    (n, span / n as f64)
}

/// Streaming accumulator for the pair (inner Birkhoff integral of v,
/// iterated integral against w) along one orbit.
pub(crate) struct PairState {
    pub(crate) inner: Vec<f64>,    // running integral of v
    pub(crate) inner_w: Vec<f64>,  // running integral of w
    pub(crate) iterated: Vec<f64>, // m_v x m_w row-major
    pub(crate) v_prev: Vec<f64>,
    pub(crate) w_prev: Vec<f64>,
    pub(crate) v_cur: Vec<f64>,
    pub(crate) w_cur: Vec<f64>,
}

impl PairState {
    pub(crate) fn new(mv: usize, mw: usize) -> Self {
        PairState {
            inner: vec![0.0; mv],
            inner_w: vec![0.0; mw],
            iterated: vec![0.0; mv * mw],
            v_prev: vec![0.0; mv],
            w_prev: vec![0.0; mw],
            v_cur: vec![0.0; mv],
            w_cur: vec![0.0; mw],
        }
    }

    #[inline]
    pub(crate) fn advance(&mut self, h: f64) {
        let mv = self.v_prev.len();
        let mw = self.w_prev.len();
        for i in 0..mv {
            let dv = 0.5 * h * (self.v_prev[i] + self.v_cur[i]);
            // midpoint of the running inner integral over the step
            let mid = self.inner[i] + 0.5 * dv;
            for j in 0..mw {
                let dw = 0.5 * h * (self.w_prev[j] + self.w_cur[j]);
                self.iterated[i * mw + j] += mid * dw;
            }
            self.inner[i] += dv;
        }
        for j in 0..mw {
            self.inner_w[j] += 0.5 * h * (self.w_prev[j] + self.w_cur[j]);
        }
        std::mem::swap(&mut self.v_prev, &mut self.v_cur);
        std::mem::swap(&mut self.w_prev, &mut self.w_cur);
    }
}

pub(crate) fn check_finite(y: &[f64], t: f64) -> Result<()> {
    if y.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::IntegrationDiverged { time: t })
    }
}

/// Birkhoff integral v_{s,t} = int_s^t v(phi_r y0) dr along the orbit of
/// `y0` (flow time measured from `y0`).
pub fn birkhoff_integral(
    spec: &FlowSpec,
    v: &Observable,
    y0: &FlowState,
    s: f64,
    t: f64,
    dt: f64,
) -> Result<Vec<f64>> {
    assert!(s <= t && dt > 0.0);
    let mut stepper = Stepper::new(spec);
    let mut y = y0.point.clone();
    let (n0, h0) = substeps(s, dt);
    for k in 0..n0 {
        stepper.step(&mut y, h0);
        check_finite(&y, (k + 1) as f64 * h0)?;
    }
    let mut acc = vec![0.0; v.arity];
    let mut prev = vec![0.0; v.arity];
    let mut cur = vec![0.0; v.arity];
    v.evaluate(&y, &mut prev);
    let (n, h) = substeps(t - s, dt);
    for k in 0..n {
        stepper.step(&mut y, h);
        check_finite(&y, s + (k + 1) as f64 * h)?;
        v.evaluate(&y, &mut cur);
        for i in 0..v.arity {
            acc[i] += 0.5 * h * (prev[i] + cur[i]);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(acc)
}

/// Iterated integral S_{s,t}^{ij} = int_s^t (int_s^r v^i) w^j(phi_r) dr,
/// returned as an m_v x m_w row-major matrix, computed in a single orbit
/// pass with a running inner integral.
pub fn iterated_integral(
    spec: &FlowSpec,
    v: &Observable,
    w: &Observable,
    y0: &FlowState,
    s: f64,
    t: f64,
    dt: f64,
) -> Result<Vec<f64>> {
    assert!(s <= t && dt > 0.0);
    let mut stepper = Stepper::new(spec);
    let mut y = y0.point.clone();
    let (n0, h0) = substeps(s, dt);
    for k in 0..n0 {
        stepper.step(&mut y, h0);
        check_finite(&y, (k + 1) as f64 * h0)?;
    }
    let mut pair = PairState::new(v.arity, w.arity);
    v.evaluate(&y, &mut pair.v_prev);
    w.evaluate(&y, &mut pair.w_prev);
    let (n, h) = substeps(t - s, dt);
    for k in 0..n {
        stepper.step(&mut y, h);
        check_finite(&y, s + (k + 1) as f64 * h)?;
        v.evaluate(&y, &mut pair.v_cur);
        w.evaluate(&y, &mut pair.w_cur);
        pair.advance(h);
    }
    Ok(pair.iterated)
}

/// The rescaled path pair of the weak invariance principle:
/// W_{v,n}(t) = n^{-1/2} int_0^{tn} v(phi_s) ds and the matching iterated
/// path, sampled on `grid` (which must start at 0).
pub fn wip_path(
    spec: &FlowSpec,
    v: &Observable,
    y0: &FlowState,
    n: f64,
    grid: &[f64],
    dt: f64,
) -> Result<(PathSample, PathSample)> {
    assert!(n > 0.0 && dt > 0.0);
    if grid.first() != Some(&0.0) {
        return Err(Error::InvalidInput("wip grid must start at 0".into()));
    }
    let m = v.arity;
    let mut stepper = Stepper::new(spec);
    let mut y = y0.point.clone();
    let mut pair = PairState::new(m, m);
    v.evaluate(&y, &mut pair.v_prev);
    pair.w_prev.copy_from_slice(&pair.v_prev);

    let scale_w = 1.0 / n.sqrt();
    let scale_ww = 1.0 / n;
    let mut w_vals = Vec::with_capacity(grid.len());
    let mut ww_vals = Vec::with_capacity(grid.len());
    w_vals.push(vec![0.0; m]);
    ww_vals.push(vec![0.0; m * m]);

    for pairwin in grid.windows(2) {
        let span = (pairwin[1] - pairwin[0]) * n;
        if span < 0.0 {
            return Err(Error::InvalidInput("wip grid must be increasing".into()));
        }
        let (steps, h) = substeps(span, dt);
        for k in 0..steps {
            stepper.step(&mut y, h);
            check_finite(&y, pairwin[0] * n + (k + 1) as f64 * h)?;
            v.evaluate(&y, &mut pair.v_cur);
            pair.w_cur.copy_from_slice(&pair.v_cur);
            pair.advance(h);
        }
        w_vals.push(pair.inner.iter().map(|x| x * scale_w).collect());
        ww_vals.push(pair.iterated.iter().map(|x| x * scale_ww).collect());
    }
    Ok((
        PathSample {
            grid: grid.to_vec(),
            values: w_vals,
        },
        PathSample {
            grid: grid.to_vec(),
            values: ww_vals,
        },
    ))
}

/// Epsilon-rescaled path pair W^(eps)(t) = eps * int_0^{t/eps^2} v(phi_s) ds;
/// identical to `wip_path` with n = eps^-2 (the floor of eps^-2 sometimes
/// used in proofs is deliberately not taken).
pub fn wip_path_eps(
    spec: &FlowSpec,
    v: &Observable,
    y0: &FlowState,
    eps: f64,
    grid: &[f64],
    dt: f64,
) -> Result<(PathSample, PathSample)> {
    assert!(eps > 0.0);
    wip_path(spec, v, y0, eps.powi(-2), grid, dt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::sample_invariant;
    use approx::assert_abs_diff_eq;

    fn lorenz_start() -> FlowState {
        let spec = FlowSpec::lorenz_classic();
        sample_invariant(&spec, 17, 30.0, 1, 1.0, 1e-3).unwrap()[0].clone()
    }

    #[test]
    fn center_constant_is_zero() {
        let spec = FlowSpec::lorenz_classic();
        let cal = sample_invariant(&spec, 1, 10.0, 50, 0.5, 1e-3).unwrap();
        let c = Observable::constant(vec![3.5]);
        let cc = center(&c, &cal).unwrap();
        for s in &cal {
            assert_eq!(cc.evaluate_vec(&s.point), vec![0.0]);
        }
    }

    #[test]
    fn center_is_idempotent() {
        let spec = FlowSpec::lorenz_classic();
        let cal = sample_invariant(&spec, 2, 10.0, 100, 0.5, 1e-3).unwrap();
        let v = Observable::coordinate(2);
        let c1 = center(&v, &cal).unwrap();
        let c2 = center(&c1, &cal).unwrap();
        assert_abs_diff_eq!(c1.mean[0], c2.mean[0], epsilon = 1e-10);
    }

    #[test]
    fn center_empty_errors() {
        assert!(matches!(
            center(&Observable::coordinate(0), &[]),
            Err(Error::EmptyCalibration)
        ));
    }

    #[test]
    fn lorenz_y1_centering() {
        let spec = FlowSpec::lorenz_classic();
        let cal = sample_invariant(&spec, 3, 50.0, 10_000, 0.05, 2e-3).unwrap();
        let v = Observable::coordinate(0);
        let mean_before: f64 =
            cal.iter().map(|s| v.evaluate_vec(&s.point)[0]).sum::<f64>() / cal.len() as f64;
        assert!(mean_before.abs() < 0.5);
        let vc = center(&v, &cal).unwrap();
        let mean_after: f64 =
            cal.iter().map(|s| vc.evaluate_vec(&s.point)[0]).sum::<f64>() / cal.len() as f64;
        assert!(mean_after.abs() < 1e-12, "after {mean_after}");
    }

    #[test]
    fn birkhoff_degenerate_and_constant() {
        let spec = FlowSpec::lorenz_classic();
        let y0 = lorenz_start();
        let v = Observable::coordinate(0);
        assert_eq!(
            birkhoff_integral(&spec, &v, &y0, 1.0, 1.0, 1e-3).unwrap(),
            vec![0.0]
        );
        let one = Observable::constant(vec![1.0]);
        let r = birkhoff_integral(&spec, &one, &y0, 0.0, 2.5, 1e-3).unwrap();
        assert_abs_diff_eq!(r[0], 2.5, epsilon = 1e-12);
    }

    #[test]
    fn birkhoff_additivity() {
        let spec = FlowSpec::lorenz_classic();
        let y0 = lorenz_start();
        let v = Observable::coordinate(2);
        let a = birkhoff_integral(&spec, &v, &y0, 0.0, 1.0, 1e-3).unwrap()[0];
        let b = birkhoff_integral(&spec, &v, &y0, 1.0, 3.0, 1e-3).unwrap()[0];
        let c = birkhoff_integral(&spec, &v, &y0, 0.0, 3.0, 1e-3).unwrap()[0];
        assert_abs_diff_eq!(a + b, c, epsilon = 1e-10 * c.abs().max(1.0));
    }

    #[test]
    fn iterated_zero_interval() {
        let spec = FlowSpec::lorenz_classic();
        let y0 = lorenz_start();
        let v = Observable::coordinate(0);
        let s = iterated_integral(&spec, &v, &v, &y0, 2.0, 2.0, 1e-3).unwrap();
        assert_eq!(s, vec![0.0]);
    }

    #[test]
    fn iterated_product_rule() {
        let spec = FlowSpec::lorenz_classic();
        let y0 = lorenz_start();
        let v = Observable::coordinate(0);
        let w = Observable::coordinate(2);
        let svw = iterated_integral(&spec, &v, &w, &y0, 0.0, 5.0, 1e-3).unwrap()[0];
        let swv = iterated_integral(&spec, &w, &v, &y0, 0.0, 5.0, 1e-3).unwrap()[0];
        let vi = birkhoff_integral(&spec, &v, &y0, 0.0, 5.0, 1e-3).unwrap()[0];
        let wi = birkhoff_integral(&spec, &w, &y0, 0.0, 5.0, 1e-3).unwrap()[0];
        assert_abs_diff_eq!(svw + swv, vi * wi, epsilon = 1e-8 * (vi * wi).abs().max(1.0));
    }

    /// Independent O(N^2) double-Riemann-sum oracle on a coarse grid.
    #[test]
    fn iterated_matches_double_sum_oracle() {
        let spec = FlowSpec::lorenz_classic();
        let y0 = lorenz_start();
        let v = Observable::coordinate(0);
        let w = Observable::coordinate(2);
        let dt = 1e-3;
        let t_end = 2.0;
        let fast = iterated_integral(&spec, &v, &w, &y0, 0.0, t_end, dt).unwrap()[0];

        // brute force: tabulate the orbit, then sum over the triangle
        let orbit = crate::flow::evolve(&spec, &y0, t_end, dt).unwrap();
        let vs: Vec<f64> = orbit.points.iter().map(|p| v.evaluate_vec(p)[0]).collect();
        let ws: Vec<f64> = orbit.points.iter().map(|p| w.evaluate_vec(p)[0]).collect();
        let n = vs.len();
        let mut brute = 0.0;
        for r in 1..n {
            // inner trapezoid integral of v up to grid point r (midpoint form)
            let mut inner = 0.0;
            for u in 1..=r {
                inner += 0.5 * dt * (vs[u - 1] + vs[u]);
            }
            let inner_prev = inner - 0.5 * dt * (vs[r - 1] + vs[r]);
            brute += 0.5 * (inner + inner_prev) * 0.5 * dt * (ws[r - 1] + ws[r]);
        }
        assert_abs_diff_eq!(fast, brute, epsilon = 1e-8 * brute.abs().max(1.0));
    }

    #[test]
    fn chen_increment_identity() {
        let spec = FlowSpec::lorenz_classic();
        let y0 = lorenz_start();
        let v = Observable::coordinate(0);
        let w = Observable::coordinate(1);
        let (s, t, u) = (0.0, 2.0, 5.0);
        let dt = 1e-3;
        let s_su = iterated_integral(&spec, &v, &w, &y0, s, u, dt).unwrap()[0];
        let s_st = iterated_integral(&spec, &v, &w, &y0, s, t, dt).unwrap()[0];
        let s_tu = iterated_integral(&spec, &v, &w, &y0, t, u, dt).unwrap()[0];
        let v_st = birkhoff_integral(&spec, &v, &y0, s, t, dt).unwrap()[0];
        let w_tu = birkhoff_integral(&spec, &w, &y0, t, u, dt).unwrap()[0];
        assert_abs_diff_eq!(
            s_su,
            s_st + s_tu + v_st * w_tu,
            epsilon = 1e-8 * s_su.abs().max(1.0)
        );
    }

    #[test]
    fn bilinearity_of_integrals() {
        let spec = FlowSpec::lorenz_classic();
        let y0 = lorenz_start();
        let v1 = Observable::coordinate(0);
        let v2 = Observable::coordinate(1);
        let w = Observable::coordinate(2);
        let dt = 1e-3;
        let alpha = 2.5;
        let combo = v1.scaled(alpha).linear_comb(1.0, &v2);
        let lhs = iterated_integral(&spec, &combo, &w, &y0, 0.0, 3.0, dt).unwrap()[0];
        let r1 = iterated_integral(&spec, &v1, &w, &y0, 0.0, 3.0, dt).unwrap()[0];
        let r2 = iterated_integral(&spec, &v2, &w, &y0, 0.0, 3.0, dt).unwrap()[0];
        assert_abs_diff_eq!(lhs, alpha * r1 + r2, epsilon = 1e-8 * lhs.abs().max(1.0));
        let b = birkhoff_integral(&spec, &combo, &y0, 0.0, 3.0, dt).unwrap()[0];
        let b1 = birkhoff_integral(&spec, &v1, &y0, 0.0, 3.0, dt).unwrap()[0];
        let b2 = birkhoff_integral(&spec, &v2, &y0, 0.0, 3.0, dt).unwrap()[0];
        assert_abs_diff_eq!(b, alpha * b1 + b2, epsilon = 1e-9 * b.abs().max(1.0));
    }

    #[test]
    fn wip_starts_at_zero_and_matches_iterated() {
        let spec = FlowSpec::lorenz_classic();
        let cal = sample_invariant(&spec, 4, 30.0, 2_000, 0.05, 2e-3).unwrap();
        let v = center(&Observable::coordinate(0), &cal).unwrap();
        let y0 = cal[0].clone();
        let n = 50.0;
        // binary-exact grid so the substep size matches the one-shot pass
        // bit for bit (the Lorenz flow amplifies any rounding difference)
        let grid: Vec<f64> = (0..=8).map(|k| k as f64 / 8.0).collect();
        let (w, ww) = wip_path(&spec, &v, &y0, n, &grid, 1e-3).unwrap();
        assert_eq!(w.values[0], vec![0.0]);
        assert_eq!(ww.values[0], vec![0.0]);
        // WW(1) = n^-1 S_n with v = w
        let s_n = iterated_integral(&spec, &v, &v, &y0, 0.0, n, 1e-3).unwrap()[0];
        let ww1 = ww.values.last().unwrap()[0];
        assert_abs_diff_eq!(ww1, s_n / n, epsilon = 1e-10 * ww1.abs().max(1.0));
        // symmetric part of WW(1) (scalar case): 2*WW = W^2 exactly
        let w1 = w.values.last().unwrap()[0];
        assert_abs_diff_eq!(2.0 * ww1, w1 * w1, epsilon = 1e-10 * (w1 * w1).abs().max(1.0));
    }

    #[test]
    fn wip_eps_equals_wip_at_integer_inverse_square() {
        let spec = FlowSpec::lorenz_classic();
        let cal = sample_invariant(&spec, 5, 30.0, 500, 0.1, 2e-3).unwrap();
        let v = center(&Observable::coordinate(0), &cal).unwrap();
        let y0 = cal[0].clone();
        let grid: Vec<f64> = (0..=5).map(|k| k as f64 / 5.0).collect();
        let eps = 0.25; // eps^-2 = 16 integer
        let a = wip_path_eps(&spec, &v, &y0, eps, &grid, 1e-3).unwrap();
        let b = wip_path(&spec, &v, &y0, 16.0, &grid, 1e-3).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn wip_eps_tail_term_bound() {
        // W^(eps)(t) - eps n^{1/2} W_{v,n}(t) = eps * int_{tn}^{t/eps^2} v,
        // with n = floor(eps^-2); the tail is bounded by eps * t * sup|v|.
        let spec = FlowSpec::lorenz_classic();
        let cal = sample_invariant(&spec, 6, 30.0, 2_000, 0.05, 2e-3).unwrap();
        let v = center(&Observable::coordinate(0), &cal).unwrap();
        let y0 = cal[0].clone();
        let grid: Vec<f64> = (1..=5).map(|k| k as f64 / 5.0).collect();
        // sup|v| along a long orbit as a proxy for the attractor sup
        let orbit = crate::flow::evolve(&spec, &y0, 100.0, 2e-3).unwrap();
        let sup_v = orbit
            .points
            .iter()
            .map(|p| v.evaluate_vec(p)[0].abs())
            .fold(0.0_f64, f64::max);
        for eps in [0.45_f64, 0.225] {
            let n = eps.powi(-2).floor();
            for &t in &grid {
                let tail = eps
                    * birkhoff_integral(&spec, &v, &y0, t * n, t * eps.powi(-2), 1e-3).unwrap()[0];
                assert!(
                    tail.abs() <= eps * t * sup_v + 1e-9,
                    "eps {eps} t {t}: tail {tail} bound {}",
                    eps * t * sup_v
                );
            }
        }
    }
}
