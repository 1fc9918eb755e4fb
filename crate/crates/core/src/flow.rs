//! Chaotic fast flows: integration, invariant-measure sampling and
//! Poincare-section return data.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::rng;

/// Right-hand side of the fast ODE.
#[derive(Clone)]
pub enum FlowField {
    Lorenz { sigma: f64, rho: f64, beta: f64 },
    /// Pure rotation in the plane, used only as an integrator/section oracle.
    RotationTest,
    Custom(Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>),
}

impl fmt::Debug for FlowField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FlowField::Lorenz { sigma, rho, beta } => f
                .debug_struct("Lorenz")
                .field("sigma", sigma)
                .field("rho", rho)
                .field("beta", beta)
                .finish(),
            FlowField::RotationTest => write!(f, "RotationTest"),
            FlowField::Custom(_) => write!(f, "Custom"),
        }
    }
}

/// A named fast vector field with parameters, defining the flow on R^M.
#[derive(Clone, Debug)]
pub struct FlowSpec {
    pub field: FlowField,
    pub dim: usize,
}

impl FlowSpec {
    /// Lorenz system with the classical chaotic parameters (10, 28, 8/3).
    pub fn lorenz_classic() -> Self {
        FlowSpec {
            field: FlowField::Lorenz {
                sigma: 10.0,
                rho: 28.0,
                beta: 8.0 / 3.0,
            },
            dim: 3,
        }
    }

    pub fn lorenz(sigma: f64, rho: f64, beta: f64) -> Self {
        FlowSpec {
            field: FlowField::Lorenz { sigma, rho, beta },
            dim: 3,
        }
    }

    pub fn rotation_test() -> Self {
        FlowSpec {
            field: FlowField::RotationTest,
            dim: 2,
        }
    }

    pub fn custom<F>(dim: usize, f: F) -> Self
    where
        F: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    {
        FlowSpec {
            field: FlowField::Custom(Arc::new(f)),
            dim,
        }
    }

    /// Evaluate the vector field at `y`, writing into `dy`.
    #[inline]
    pub fn deriv(&self, y: &[f64], dy: &mut [f64]) {
        match &self.field {
            FlowField::Lorenz { sigma, rho, beta } => {
                dy[0] = sigma * (y[1] - y[0]);
                dy[1] = y[0] * (rho - y[2]) - y[1];
                dy[2] = y[0] * y[1] - beta * y[2];
            }
            FlowField::RotationTest => {
                dy[0] = -y[1];
                dy[1] = y[0];
            }
            FlowField::Custom(f) => f(y, dy),
        }
    }

    /// A reference point near the attractor, used as the default start.
    pub fn default_start(&self) -> Vec<f64> {
        match &self.field {
            FlowField::Lorenz { .. } => vec![0.0, 1.0, 1.05],
            FlowField::RotationTest => vec![1.0, 0.0],
            FlowField::Custom(_) => vec![1.0; self.dim],
        }
    }
}

/// A point of phase space together with flow time.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowState {
    pub point: Vec<f64>,
    pub time: f64,
}

impl FlowState {
    pub fn new(point: Vec<f64>, time: f64) -> Self {
        FlowState { point, time }
    }

    pub fn is_finite(&self) -> bool {
        self.time.is_finite() && self.point.iter().all(|x| x.is_finite())
    }
}

/// A time-stamped trajectory segment.
#[derive(Clone, Debug)]
pub struct Orbit {
    pub grid: Vec<f64>,
    pub points: Vec<Vec<f64>>,
}

impl Orbit {
    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }
}

/// Crossing direction through a section.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CrossingDirection {
    Upward,
    Downward,
}

/// Hyperplane section {<normal, y> = offset}.
#[derive(Clone, Debug)]
pub struct SectionSpec {
    pub normal: Vec<f64>,
    pub offset: f64,
    pub direction: CrossingDirection,
    pub min_return_time: f64,
}

impl SectionSpec {
    pub fn new(normal: Vec<f64>, offset: f64, direction: CrossingDirection) -> Self {
        SectionSpec {
            normal,
            offset,
            direction,
            min_return_time: 1e-2,
        }
    }

    #[inline]
    pub fn signed_distance(&self, y: &[f64]) -> f64 {
        self.normal.iter().zip(y).map(|(n, y)| n * y).sum::<f64>() - self.offset
    }
}

/// One return to the section: the base point, the return time and the orbit
/// segment until the next crossing.
#[derive(Clone, Debug)]
pub struct ReturnSample {
    pub base_point: Vec<f64>,
    pub return_time: f64,
    pub intra_orbit: Orbit,
}

/// Reusable fourth-order stepper; keeps scratch buffers so the hot loop is
/// allocation-free.
pub struct Stepper {
    spec: FlowSpec,
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Stepper {
    pub fn new(spec: &FlowSpec) -> Self {
        let m = spec.dim;
        Stepper {
            spec: spec.clone(),
            k1: vec![0.0; m],
            k2: vec![0.0; m],
            k3: vec![0.0; m],
            k4: vec![0.0; m],
            tmp: vec![0.0; m],
        }
    }

    /// One classical RK4 step of size `dt`, in place.
    #[inline]
    pub fn step(&mut self, y: &mut [f64], dt: f64) {
        let m = y.len();
        self.spec.deriv(y, &mut self.k1);
        for i in 0..m {
            self.tmp[i] = y[i] + 0.5 * dt * self.k1[i];
        }
        self.spec.deriv(&self.tmp, &mut self.k2);
        for i in 0..m {
            self.tmp[i] = y[i] + 0.5 * dt * self.k2[i];
        }
        self.spec.deriv(&self.tmp, &mut self.k3);
        for i in 0..m {
            self.tmp[i] = y[i] + dt * self.k3[i];
        }
        self.spec.deriv(&self.tmp, &mut self.k4);
        for i in 0..m {
            y[i] += dt / 6.0 * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
        }
    }
}

/// Advance `state` by one RK4 step of size `dt`.
pub fn step_flow(spec: &FlowSpec, state: &FlowState, dt: f64) -> Result<FlowState> {
    let mut stepper = Stepper::new(spec);
    let mut y = state.point.clone();
    stepper.step(&mut y, dt);
    let next = FlowState::new(y, state.time + dt);
    if !next.is_finite() {
        return Err(Error::IntegrationDiverged { time: next.time });
    }
    Ok(next)
}

/// Integrate over `[state.time, state.time + horizon]` with uniform step `dt`
/// (final partial step allowed), recording every grid point.
pub fn evolve(spec: &FlowSpec, state: &FlowState, horizon: f64, dt: f64) -> Result<Orbit> {
    let mut stepper = Stepper::new(spec);
    let n_full = (horizon / dt).floor() as usize;
    let rem = horizon - n_full as f64 * dt;
    let mut grid = Vec::with_capacity(n_full + 2);
    let mut points = Vec::with_capacity(n_full + 2);
    let mut y = state.point.clone();
    let t0 = state.time;
    grid.push(t0);
    points.push(y.clone());
    for k in 0..n_full {
        stepper.step(&mut y, dt);
        let t = t0 + (k + 1) as f64 * dt;
        if !y.iter().all(|x| x.is_finite()) {
            return Err(Error::IntegrationDiverged { time: t });
        }
        grid.push(t);
        points.push(y.clone());
    }
    if rem > 1e-12 * dt.max(1.0) {
        stepper.step(&mut y, rem);
        let t = t0 + horizon;
        if !y.iter().all(|x| x.is_finite()) {
            return Err(Error::IntegrationDiverged { time: t });
        }
        grid.push(t);
        points.push(y.clone());
    }
    Ok(Orbit { grid, points })
}

/// Sample the physical invariant measure by the single-long-orbit method:
/// seed-perturbed start, burn-in, then states spaced `gap` apart.
///
/// Consecutive samples are a stationary sequence, decorrelated only
/// statistically.
pub fn sample_invariant(
    spec: &FlowSpec,
    seed: u64,
    burn_in: f64,
    count: usize,
    gap: f64,
    dt: f64,
) -> Result<Vec<FlowState>> {
    assert!(burn_in > 0.0 && gap > 0.0 && count >= 1 && dt > 0.0);
    let mut y = spec.default_start();
    for (i, yi) in y.iter_mut().enumerate() {
        *yi += 1e-3 * (rng::uniform_open(seed, i as u64, 0, 0) - 0.5);
    }
    let mut stepper = Stepper::new(spec);
    let mut advance = |y: &mut Vec<f64>, span: f64, t_report: f64| -> Result<()> {
        let n_full = (span / dt).floor() as usize;
        let rem = span - n_full as f64 * dt;
        for _ in 0..n_full {
            stepper.step(y, dt);
        }
        if rem > 1e-12 * dt.max(1.0) {
            stepper.step(y, rem);
        }
        if !y.iter().all(|x| x.is_finite()) {
            return Err(Error::IntegrationDiverged { time: t_report });
        }
        Ok(())
    };
    advance(&mut y, burn_in, burn_in)?;
    let mut out = Vec::with_capacity(count);
    out.push(FlowState::new(y.clone(), burn_in));
    for k in 1..count {
        let t = burn_in + k as f64 * gap;
        advance(&mut y, gap, t)?;
        out.push(FlowState::new(y.clone(), t));
    }
    Ok(out)
}

/// Locate the crossing time in `(0, dt]` by bisection, integrating RK4
/// substeps from `y_prev`. Returns (tau, crossing point).
fn bisect_crossing(
    stepper: &mut Stepper,
    section: &SectionSpec,
    y_prev: &[f64],
    dt: f64,
    tol: f64,
) -> (f64, Vec<f64>) {
    let mut lo = 0.0_f64;
    let mut hi = dt;
    let g_lo = section.signed_distance(y_prev);
    let mut y = y_prev.to_vec();
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        y.copy_from_slice(y_prev);
        stepper.step(&mut y, mid);
        let g_mid = section.signed_distance(&y);
        if (g_mid > 0.0) == (g_lo > 0.0) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let tau = 0.5 * (lo + hi);
    y.copy_from_slice(y_prev);
    stepper.step(&mut y, tau);
    (tau, y)
}

// well below the 1e-10 contract so the section residual stays small even
// where the field is large
const CROSSING_TOL: f64 = 1e-13;

/// Collect `count` consecutive returns to the section, starting from `start`.
///
/// Crossings are localized by bisection to 1e-10 in time; crossings closer
/// than `min_return_time` to the previous accepted one are skipped.
/// `max_horizon` bounds the total search time.
pub fn poincare_returns(
    spec: &FlowSpec,
    section: &SectionSpec,
    start: &FlowState,
    count: usize,
    dt: f64,
    max_horizon: f64,
) -> Result<Vec<ReturnSample>> {
    assert!(count >= 1 && dt > 0.0);
    let norm: f64 = section.normal.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::InvalidInput("section normal must be nonzero".into()));
    }
    let mut stepper = Stepper::new(spec);
    let mut y = start.point.clone();
    let mut t = start.time;
    let t_end = start.time + max_horizon;

    let wanted = |g_prev: f64, g_next: f64| match section.direction {
        CrossingDirection::Upward => g_prev < 0.0 && g_next >= 0.0,
        CrossingDirection::Downward => g_prev > 0.0 && g_next <= 0.0,
    };

    let mut samples = Vec::with_capacity(count);
    // Orbit segment since the last accepted crossing; empty until the first
    // crossing is found.
    let mut seg_grid: Vec<f64> = Vec::new();
    let mut seg_points: Vec<Vec<f64>> = Vec::new();
    let mut last_crossing: Option<(f64, Vec<f64>)> = None;

    while samples.len() < count {
        if t >= t_end {
            return Err(Error::NoCrossingFound {
                horizon: max_horizon,
            });
        }
        let g_prev = section.signed_distance(&y);
        let y_prev = y.clone();
        stepper.step(&mut y, dt);
        t += dt;
        if !y.iter().all(|x| x.is_finite()) {
            return Err(Error::IntegrationDiverged { time: t });
        }
        let g_next = section.signed_distance(&y);
        if last_crossing.is_some() {
            seg_grid.push(t);
            seg_points.push(y.clone());
        }
        if wanted(g_prev, g_next) {
            let (tau, yc) = bisect_crossing(&mut stepper, section, &y_prev, dt, CROSSING_TOL);
            let tc = t - dt + tau;
            match &last_crossing {
                None => {
                    last_crossing = Some((tc, yc));
                    seg_grid.clear();
                    seg_points.clear();
                }
                Some((tp, yp)) => {
                    let r = tc - tp;
                    if r < section.min_return_time {
                        continue;
                    }
                    // seg ends at the localized crossing, not the overshot step
                    let mut grid = Vec::with_capacity(seg_grid.len() + 2);
                    let mut points = Vec::with_capacity(seg_points.len() + 2);
                    grid.push(*tp);
                    points.push(yp.clone());
                    for (tg, pg) in seg_grid.iter().zip(&seg_points) {
                        if *tg < tc {
                            grid.push(*tg);
                            points.push(pg.clone());
                        }
                    }
                    grid.push(tc);
                    points.push(yc.clone());
                    samples.push(ReturnSample {
                        base_point: yp.clone(),
                        return_time: r,
                        intra_orbit: Orbit { grid, points },
                    });
                    last_crossing = Some((tc, yc.clone()));
                    seg_grid.clear();
                    seg_points.clear();
                    seg_grid.push(t);
                    seg_points.push(y.clone());
                }
            }
        }
    }
    Ok(samples)
}

impl ReturnSample {
    /// |<normal, base> - offset| scaled check helper used in tests and
    /// diagnostics.
    pub fn section_residual(&self, section: &SectionSpec) -> f64 {
        let norm: f64 = section.normal.iter().map(|x| x * x).sum::<f64>().sqrt();
        section.signed_distance(&self.base_point).abs() / norm
    }
}
