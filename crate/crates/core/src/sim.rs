//! Coupled fast-slow integration and the limiting Ito diffusion.
//!
//! The fast state runs in fast time with step dt_fast; the slow state is
//! advanced with the matched slow step eps^2 * dt_fast, so a single clock
//! drives both and no interpolation of the fast orbit is needed.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flow::{sample_invariant, FlowSpec, FlowState, Stepper};
use crate::homog::CoeffField;
use crate::observable::{check_finite, substeps, wip_path_eps, Observable};
use crate::rng;
use crate::roughpath::{lift_smooth, HolderPath, RoughDriver};

type XyMap = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;

/// Product-form components b(x,y) = h(x) v(y) when available.
#[derive(Clone)]
pub enum SlowForm {
    General,
    Product {
        /// x -> d x e matrix, row-major
        h: Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>,
        /// x -> derivative tensor dh[i][a][k] = d_k h^{ia}, layout i*e*d + a*d + k
        dh: Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>,
        v: Observable,
    },
}

impl fmt::Debug for SlowForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SlowForm::General => write!(f, "General"),
            SlowForm::Product { v, .. } => f.debug_struct("Product").field("v", v).finish(),
        }
    }
}

/// The slow equation dx/dt = a(x,y) + (1/eps) b(x,y), with the x-derivatives
/// of b supplied analytically.
#[derive(Clone)]
pub struct SlowSystem {
    pub d: usize,
    pub a: XyMap,
    pub b: XyMap,
    /// db[i][k] = d_k b^i, row-major i*d + k
    pub db: XyMap,
    pub form: SlowForm,
}

impl fmt::Debug for SlowSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SlowSystem")
            .field("d", &self.d)
            .field("form", &self.form)
            .finish()
    }
}

impl SlowSystem {
    pub fn general<A, B, D>(d: usize, a: A, b: B, db: D) -> Self
    where
        A: Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
        B: Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
        D: Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        SlowSystem {
            d,
            a: Arc::new(a),
            b: Arc::new(b),
            db: Arc::new(db),
            form: SlowForm::General,
        }
    }

    /// Product case b(x,y) = h(x) v(y) with h: R^d -> R^{d x e}.
    pub fn product<A, H, DH>(d: usize, a: A, h: H, dh: DH, v: Observable) -> Self
    where
        A: Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
        H: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
        DH: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    {
        let e = v.arity;
        let h: Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync> = Arc::new(h);
        let dh: Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync> = Arc::new(dh);
        let (hb, vb) = (h.clone(), v.clone());
        let b = move |x: &[f64], y: &[f64], out: &mut [f64]| {
            let mut hmat = vec![0.0; d * e];
            let mut vv = vec![0.0; e];
            hb(x, &mut hmat);
            vb.evaluate(y, &mut vv);
            for i in 0..d {
                out[i] = (0..e).map(|a| hmat[i * e + a] * vv[a]).sum();
            }
        };
        let (dhb, vb) = (dh.clone(), v.clone());
        let db = move |x: &[f64], y: &[f64], out: &mut [f64]| {
            let mut dhten = vec![0.0; d * e * d];
            let mut vv = vec![0.0; e];
            dhb(x, &mut dhten);
            vb.evaluate(y, &mut vv);
            for i in 0..d {
                for k in 0..d {
                    out[i * d + k] =
                        (0..e).map(|a| dhten[i * e * d + a * d + k] * vv[a]).sum();
                }
            }
        };
        SlowSystem {
            d,
            a: Arc::new(a),
            b: Arc::new(b),
            db: Arc::new(db),
            form: SlowForm::Product { h, dh, v },
        }
    }

    /// Additive-noise special case b(x,y) = v(y) (d must equal v.arity).
    pub fn additive<A>(a: A, v: Observable) -> Self
    where
        A: Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        let d = v.arity;
        SlowSystem::product(
            d,
            a,
            move |_x, out: &mut [f64]| {
                out.fill(0.0);
                for i in 0..d {
                    out[i * d + i] = 1.0;
                }
            },
            move |_x, out: &mut [f64]| out.fill(0.0),
            v,
        )
    }

    /// b(x, y) as an observable in y for fixed x.
    pub fn b_at(&self, x: &[f64]) -> Observable {
        let b = self.b.clone();
        let x = x.to_vec();
        Observable::new("b(x,.)", self.d, move |y, out| b(&x, y, out))
    }

    /// d_k b^i(x, y) as an observable in y for fixed x, arity d*d row-major
    /// over (i, k).
    pub fn db_at(&self, x: &[f64]) -> Observable {
        let db = self.db.clone();
        let x = x.to_vec();
        Observable::new("db(x,.)", self.d * self.d, move |y, out| db(&x, y, out))
    }

    /// a(x, y) as an observable in y for fixed x.
    pub fn a_at(&self, x: &[f64]) -> Observable {
        let a = self.a.clone();
        let x = x.to_vec();
        Observable::new("a(x,.)", self.d, move |y, out| a(&x, y, out))
    }

    /// Check the product decomposition b = h v on validation points.
    pub fn validate_product(&self, xs: &[Vec<f64>], ys: &[Vec<f64>], tol: f64) -> Result<()> {
        let SlowForm::Product { h, v, .. } = &self.form else {
            return Ok(());
        };
        let e = v.arity;
        let d = self.d;
        for x in xs {
            let mut hmat = vec![0.0; d * e];
            h(x, &mut hmat);
            for y in ys {
                let mut vv = vec![0.0; e];
                v.evaluate(y, &mut vv);
                let mut direct = vec![0.0; d];
                (self.b)(x, y, &mut direct);
                for i in 0..d {
                    let prod: f64 = (0..e).map(|a| hmat[i * e + a] * vv[a]).sum();
                    if (prod - direct[i]).abs() > tol {
                        return Err(Error::InvalidInput(format!(
                            "product decomposition violated: |{prod} - {}| > {tol}",
                            direct[i]
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Decimated sample of one slow trajectory. On escape the path is truncated
/// at the last completed output time and `escaped` is set.
#[derive(Clone, Debug, PartialEq)]
pub struct SlowPath {
    pub grid: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    pub escaped: bool,
    /// set when the induced slow step eps^2 * dt_fast is above 1e-3
    pub coarse_step: bool,
}

impl SlowPath {
    pub fn endpoint(&self) -> &[f64] {
        self.values.last().expect("slow path is never empty")
    }
}

/// One batch of slow trajectories or SDE members sharing a configuration.
#[derive(Clone, Debug)]
pub struct EnsembleResult {
    /// 0 for the limiting diffusion
    pub eps: f64,
    /// terminal slow states of the surviving members, member order
    pub endpoints: Vec<Vec<f64>>,
    pub paths: Option<Vec<SlowPath>>,
    pub escapes: usize,
    pub seeds: Vec<u64>,
}

/// Sampling and integration controls shared by all ensemble members.
#[derive(Clone, Debug)]
pub struct FastSlowPlan {
    pub burn_in: f64,
    /// extra fast-time spacing between member starts, on top of the fast-time
    /// span each member consumes (keeps member orbit segments disjoint)
    pub gap: f64,
    pub dt_fast: f64,
    pub guard: f64,
    pub store_paths: bool,
    /// output grid resolution (intervals) per member path
    pub path_points: usize,
}

impl Default for FastSlowPlan {
    fn default() -> Self {
        FastSlowPlan {
            burn_in: 100.0,
            gap: 1.0,
            dt_fast: 1e-3,
            guard: 1e3,
            store_paths: false,
            path_points: 20,
        }
    }
}

pub const DEFAULT_GUARD: f64 = 1e3;

/// Integrate dx/dt = a(x,y) + (1/eps) b(x,y) with y running the fast flow at
/// time scale eps^-2, reporting x on the slow grid `out_grid` (starting at 0).
///
/// A single clock drives both states: the fast state advances by RK4 steps of
/// size dt_fast in fast time, the slow state by the matched slow step
/// eps^2 * dt_fast with the trapezoid of the endpoint y-values (x frozen over
/// the step). With a = 0 and additive b = v(y) the slow increment telescopes
/// to the rescaled Birkhoff integral, so the path reproduces wip_path_eps on
/// shared grids up to scaling round-off (bitwise when eps is a power of two).
pub fn integrate_fast_slow(
    spec: &FlowSpec,
    sys: &SlowSystem,
    eps: f64,
    xi: &[f64],
    y0: &FlowState,
    out_grid: &[f64],
    dt_fast: f64,
    guard: f64,
) -> Result<SlowPath> {
    assert!(eps > 0.0 && dt_fast > 0.0 && guard > 0.0);
    assert_eq!(xi.len(), sys.d);
    if out_grid.first() != Some(&0.0) {
        return Err(Error::InvalidInput("slow grid must start at 0".into()));
    }
    let n = eps.powi(-2);
    let d = sys.d;
    let mut stepper = Stepper::new(spec);
    let mut y = y0.point.clone();
    let mut x = xi.to_vec();
    let mut times = vec![out_grid[0]];
    let mut values = vec![x.clone()];
    let mut a_prev = vec![0.0; d];
    let mut a_cur = vec![0.0; d];
    let mut b_prev = vec![0.0; d];
    let mut b_cur = vec![0.0; d];
    let mut escaped = false;
    let mut coarse_step = false;
    'outer: for win in out_grid.windows(2) {
        let span = (win[1] - win[0]) * n;
        if span < 0.0 {
            return Err(Error::InvalidInput("slow grid must be increasing".into()));
        }
        let (steps, h) = substeps(span, dt_fast);
        let hs = eps * eps * h;
        coarse_step |= hs > 1e-3;
        for k in 0..steps {
            (sys.a)(&x, &y, &mut a_prev);
            (sys.b)(&x, &y, &mut b_prev);
            stepper.step(&mut y, h);
            check_finite(&y, win[0] * n + (k + 1) as f64 * h)?;
            (sys.a)(&x, &y, &mut a_cur);
            (sys.b)(&x, &y, &mut b_cur);
            for i in 0..d {
                x[i] += 0.5 * hs * (a_prev[i] + a_cur[i])
                    + 0.5 * (hs / eps) * (b_prev[i] + b_cur[i]);
            }
            if !x.iter().all(|v| v.is_finite()) {
                return Err(Error::IntegrationDiverged { time: win[1] });
            }
            if x.iter().any(|v| v.abs() > guard) {
                escaped = true;
                break 'outer;
            }
        }
        times.push(win[1]);
        values.push(x.clone());
    }
    Ok(SlowPath {
        grid: times,
        values,
        escaped,
        coarse_step,
    })
}

/// Integrate `members` independent slow trajectories with y0 drawn from the
/// physical invariant measure; deterministic given (seed, plan), independent
/// of the rayon worker count (members reduce in index order).
pub fn run_ensemble(
    spec: &FlowSpec,
    sys: &SlowSystem,
    eps: f64,
    xi: &[f64],
    t_final: f64,
    members: usize,
    seed: u64,
    plan: &FastSlowPlan,
) -> Result<EnsembleResult> {
    assert!(members >= 1 && t_final > 0.0 && plan.path_points >= 1);
    let n = eps.powi(-2);
    // member k consumes the fast-time stretch [s_k, s_k + t_final * n]; the
    // draw spacing keeps those stretches disjoint
    let draw_gap = plan.gap + t_final * n;
    let starts = sample_invariant(spec, seed, plan.burn_in, members, draw_gap, plan.dt_fast)?;
    let grid: Vec<f64> = (0..=plan.path_points)
        .map(|k| t_final * k as f64 / plan.path_points as f64)
        .collect();
    let paths = starts
        .par_iter()
        .map(|y0| integrate_fast_slow(spec, sys, eps, xi, y0, &grid, plan.dt_fast, plan.guard))
        .collect::<Result<Vec<_>>>()?;
    let mut endpoints = Vec::new();
    let mut escapes = 0;
    for p in &paths {
        if p.escaped {
            escapes += 1;
        } else {
            endpoints.push(p.endpoint().to_vec());
        }
    }
    Ok(EnsembleResult {
        eps,
        endpoints,
        paths: plan.store_paths.then_some(paths),
        escapes,
        seeds: vec![seed],
    })
}

/// Euler-Maruyama for dX = drift(X) dt + diffusion(X) dB on a tabulated
/// coefficient field. Gaussian increments come from the counter-based
/// generator keyed by (seed, member, step, lane), so the result is bit-stable
/// across worker counts.
///
/// With `clamp` the field is evaluated at the nearest grid point outside the
/// lattice; without it a member leaving the lattice counts as an escape.
pub fn solve_sde(
    coeff: &CoeffField,
    xi: &[f64],
    t_final: f64,
    dt: f64,
    members: usize,
    seed: u64,
    clamp: bool,
) -> Result<EnsembleResult> {
    assert!(members >= 1 && t_final > 0.0 && dt > 0.0);
    let d = coeff.dim();
    assert_eq!(xi.len(), d);
    let (steps, h) = substeps(t_final, dt);
    let sh = h.sqrt();
    let finals = (0..members)
        .into_par_iter()
        .map(|m| -> Result<Option<Vec<f64>>> {
            let mut x = xi.to_vec();
            for k in 0..steps {
                let drift = match coeff.eval_drift(&x, clamp) {
                    Ok(v) => v,
                    Err(Error::OutsideGrid { .. }) => return Ok(None),
                    Err(e) => return Err(e),
                };
                let sigma = coeff.eval_diffusion(&x, clamp)?;
                for i in 0..d {
                    let mut noise = 0.0;
                    for j in 0..d {
                        noise += sigma[i * d + j]
                            * rng::standard_normal(seed, m as u64, k as u64, j as u64);
                    }
                    x[i] += drift[i] * h + sh * noise;
                }
                if !x.iter().all(|v| v.is_finite()) {
                    return Ok(None);
                }
            }
            Ok(Some(x))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut endpoints = Vec::new();
    let mut escapes = 0;
    for f in finals {
        match f {
            Some(x) => endpoints.push(x),
            None => escapes += 1,
        }
    }
    Ok(EnsembleResult {
        eps: 0.0,
        endpoints,
        paths: None,
        escapes,
        seeds: vec![seed],
    })
}

/// Finite-dimensional drivers for the product case on one fast orbit: the
/// drift clock V(t) = t (the mu-averaged a is carried by the vector field)
/// and the rough driver (W_eps, WW_eps) with WW built as the grid-level
/// trapezoid lift of W, which satisfies the Chen relation exactly.
pub fn product_case_drivers(
    spec: &FlowSpec,
    sys: &SlowSystem,
    eps: f64,
    y0: &FlowState,
    grid: &[f64],
    dt_fast: f64,
) -> Result<(HolderPath, RoughDriver)> {
    let SlowForm::Product { v, .. } = &sys.form else {
        return Err(Error::InvalidInput(
            "product_case_drivers needs a product-form system".into(),
        ));
    };
    let (w, _) = wip_path_eps(spec, v, y0, eps, grid, dt_fast)?;
    let v_path = HolderPath::new(grid.to_vec(), grid.iter().map(|&t| vec![t]).collect(), 1.0);
    let w_path = HolderPath::new(w.grid, w.values, 0.45);
    let mut driver = lift_smooth(&w_path);
    driver.gamma = 0.45;
    Ok((v_path, driver))
}
