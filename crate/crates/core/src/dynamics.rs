//! Integration of the covariant Newton equations
//! `ẍ^k + Γ^k_ij ẋ^i ẋ^j = F^k(x, ẋ)`.
//!
//! The fixed-step RK4 driver is generic over [`Scalar`], so seeding the
//! initial data with dual numbers propagates exact tangent vectors of the
//! flow alongside the trajectory.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::forcefield::{ForceField, OneVar};
use crate::geometry::{Metric, DEFAULT_V_MIN};
use crate::root::{self, RootOptions};
use crate::scalar::Scalar;
use crate::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-3;
pub const DEFAULT_ESCAPE: f64 = 10.0;
pub const DEFAULT_MAX_STEPS: usize = 10_000_000;
/// `|W0|` beyond this counts as finite-time blow-up.
pub const BLOWUP_LEVEL: f64 = 1e15;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Method {
    Rk4 {
        step: f64,
    },
    /// Dormand–Prince 5(4) with mixed error control.
    Rk45 {
        rtol: f64,
        atol: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IntegratorOptions {
    pub method: Method,
    pub max_steps: usize,
    /// Half-width of the chart box `[-escape, escape]^n`.
    pub escape: f64,
    pub v_min: f64,
}

impl Default for IntegratorOptions {
    fn default() -> Self {
        IntegratorOptions {
            method: Method::Rk4 { step: DEFAULT_STEP },
            max_steps: DEFAULT_MAX_STEPS,
            escape: DEFAULT_ESCAPE,
            v_min: DEFAULT_V_MIN,
        }
    }
}

impl IntegratorOptions {
    pub fn rk4(step: f64) -> Self {
        IntegratorOptions { method: Method::Rk4 { step }, ..Default::default() }
    }

    pub fn rk45(rtol: f64, atol: f64) -> Self {
        IntegratorOptions { method: Method::Rk45 { rtol, atol }, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.method {
            Method::Rk4 { step } => step > 0.0 && step.is_finite(),
            Method::Rk45 { rtol, atol } => rtol > 0.0 && atol > 0.0 && rtol.is_finite() && atol.is_finite(),
        };
        if !ok {
            return Err(Error::Precondition("integrator step and tolerances must be positive".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::Precondition("max_steps must be at least 1".into()));
        }
        if !(self.escape > 0.0) {
            return Err(Error::Precondition("escape box must have positive size".into()));
        }
        Ok(())
    }

    /// Tolerance scale used by invariants checked along trajectories.
    pub fn tolerance(&self) -> f64 {
        match self.method {
            Method::Rk4 { step } => step.powi(4),
            Method::Rk45 { rtol, atol } => rtol.max(atol),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Termination {
    Completed,
    EscapedChart { t: f64 },
    VelocityDegenerate { t: f64, speed: f64 },
    StepFailure { t: f64, reason: String },
    MaxSteps { t: f64 },
}

impl Termination {
    pub fn label(&self) -> &'static str {
        match self {
            Termination::Completed => "completed",
            Termination::EscapedChart { .. } => "escaped chart",
            Termination::VelocityDegenerate { .. } => "velocity degenerate",
            Termination::StepFailure { .. } => "step failure",
            Termination::MaxSteps { .. } => "max steps",
        }
    }

    pub fn is_completed(&self) -> bool {
        matches!(self, Termination::Completed)
    }

    /// Time at which integration stopped early.
    pub fn time(&self) -> Option<f64> {
        match self {
            Termination::Completed => None,
            Termination::EscapedChart { t }
            | Termination::VelocityDegenerate { t, .. }
            | Termination::StepFailure { t, .. }
            | Termination::MaxSteps { t } => Some(*t),
        }
    }

    fn from_error(t: f64, e: Error) -> Self {
        match e {
            Error::SpeedFloor { speed, .. } => Termination::VelocityDegenerate { t, speed },
            e => Termination::StepFailure { t, reason: e.to_string() },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample<S = f64> {
    pub t: f64,
    pub x: Vec<S>,
    pub v: Vec<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<S = f64> {
    pub x0: Vec<S>,
    pub v0: Vec<S>,
    /// Strictly increasing in `t`.
    pub samples: Vec<Sample<S>>,
    /// Why the forward (`t > 0`) part stopped.
    pub termination: Termination,
    /// Same for the backward part, when the grid has negative times.
    pub backward: Option<Termination>,
}

impl<S> Trajectory<S> {
    pub fn completed(&self) -> bool {
        self.termination.is_completed() && self.backward.as_ref().is_none_or(Termination::is_completed)
    }

    /// Observed `[t_min, t_max]` of the returned samples.
    pub fn valid_range(&self) -> (f64, f64) {
        match (self.samples.first(), self.samples.last()) {
            (Some(a), Some(b)) => (a.t, b.t),
            _ => (0.0, 0.0),
        }
    }

    pub fn sample_at(&self, t: f64) -> Option<&Sample<S>> {
        self.samples.iter().find(|s| s.t == t)
    }
}

/// Right-hand side of the first-order system in `(x, v)`.
#[derive(Clone, Copy, Debug)]
pub struct Newton<'a> {
    pub field: &'a ForceField,
    pub metric: &'a Metric,
    pub v_min: f64,
}

impl<'a> Newton<'a> {
    pub fn new(field: &'a ForceField, metric: &'a Metric, v_min: f64) -> Self {
        Newton { field, metric, v_min }
    }

    /// `v̇^k = F^k - Γ^k_ij v^i v^j`.
    pub fn accel<S: Scalar>(&self, x: &[S], v: &[S]) -> Result<Vec<S>> {
        let local = self.metric.local(x)?;
        let speed = local.speed(v).re();
        if !(speed > self.v_min) {
            return Err(Error::SpeedFloor { speed, floor: self.v_min });
        }
        let f_up = local.raise(&self.field.eval(self.metric, x, v, self.v_min)?);
        let quad = local.gamma.contract(v, v);
        Ok(f_up.into_iter().zip(quad).map(|(f, q)| f - q).collect())
    }

    /// Derivative of the packed state `[x, v]`, optionally followed by the
    /// arc length `ℓ` with `ℓ̇ = |v|_g`.
    fn rhs<S: Scalar>(&self, y: &[S], arc: bool) -> Result<Vec<S>> {
        let n = self.metric.dim();
        let (x, v) = (&y[..n], &y[n..2 * n]);
        let mut out = Vec::with_capacity(y.len());
        out.extend_from_slice(v);
        out.extend(self.accel(x, v)?);
        if arc {
            out.push(self.metric.speed(x, v)?);
        }
        Ok(out)
    }
}

fn axpy<S: Scalar>(y: &[S], h: f64, k: &[S]) -> Vec<S> {
    y.iter().zip(k).map(|(a, b)| *a + b.scale(h)).collect()
}

/// One classical RK4 step of `ẏ = f(y)`.
pub fn rk4_step<S, F>(f: &F, y: &[S], h: f64) -> Result<Vec<S>>
where
    S: Scalar,
    F: Fn(&[S]) -> Result<Vec<S>>,
{
    let k1 = f(y)?;
    let k2 = f(&axpy(y, h / 2.0, &k1))?;
    let k3 = f(&axpy(y, h / 2.0, &k2))?;
    let k4 = f(&axpy(y, h, &k3))?;
    Ok((0..y.len()).map(|i| y[i] + (k1[i] + k2[i].scale(2.0) + k3[i].scale(2.0) + k4[i]).scale(h / 6.0)).collect())
}

/// Per-step acceptance test; returns the reason to stop, if any.
type Guard<'g, S> = &'g dyn Fn(f64, &[S]) -> Option<Termination>;

/// March from `t = 0` through `targets` (all on one side of 0, ordered away
/// from it) with fixed RK4 steps that land exactly on every target.
fn march_rk4<S, F>(
    f: &F,
    y0: &[S],
    targets: &[f64],
    step: f64,
    budget: &mut usize,
    guard: Guard<'_, S>,
) -> (Vec<(f64, Vec<S>)>, Termination)
where
    S: Scalar,
    F: Fn(&[S]) -> Result<Vec<S>>,
{
    let mut out = Vec::with_capacity(targets.len());
    let mut t = 0.0;
    let mut y = y0.to_vec();
    for &target in targets {
        let span = target - t;
        let m = libm::ceil(libm::fabs(span) / step - 1e-9).max(1.0) as usize;
        let h = span / m as f64;
        for i in 0..m {
            if *budget == 0 {
                return (out, Termination::MaxSteps { t });
            }
            *budget -= 1;
            match rk4_step(f, &y, h) {
                Ok(next) => y = next,
                Err(e) => return (out, Termination::from_error(t, e)),
            }
            t = if i + 1 == m { target } else { t + h };
            if let Some(stop) = guard(t, &y) {
                return (out, stop);
            }
        }
        out.push((target, y.clone()));
    }
    (out, Termination::Completed)
}

const DP_A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const DP_B: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const DP_E: [f64; 7] = [
    35.0 / 384.0 - 5179.0 / 57600.0,
    0.0,
    500.0 / 1113.0 - 7571.0 / 16695.0,
    125.0 / 192.0 - 393.0 / 640.0,
    -2187.0 / 6784.0 + 92097.0 / 339200.0,
    11.0 / 84.0 - 187.0 / 2100.0,
    -1.0 / 40.0,
];

/// One Dormand–Prince step: the fifth-order solution and the error estimate.
fn dp_step<F>(f: &F, y: &[f64], h: f64) -> Result<(Vec<f64>, Vec<f64>)>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let mut k: Vec<Vec<f64>> = Vec::with_capacity(7);
    for s in 0..7 {
        let mut ys = y.to_vec();
        for (j, kj) in k.iter().enumerate() {
            let a = DP_A[s][j];
            if a != 0.0 {
                for (c, d) in ys.iter_mut().zip(kj) {
                    *c += h * a * d;
                }
            }
        }
        k.push(f(&ys)?);
    }
    let mut next = y.to_vec();
    let mut err = vec![0.0; y.len()];
    for s in 0..7 {
        for i in 0..y.len() {
            next[i] += h * DP_B[s] * k[s][i];
            err[i] += h * DP_E[s] * k[s][i];
        }
    }
    Ok((next, err))
}

fn march_rk45<F>(
    f: &F,
    y0: &[f64],
    targets: &[f64],
    (rtol, atol): (f64, f64),
    budget: &mut usize,
    guard: Guard<'_, f64>,
) -> (Vec<(f64, Vec<f64>)>, Termination)
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let mut out = Vec::with_capacity(targets.len());
    let mut t = 0.0;
    let mut y = y0.to_vec();
    let dir = targets.first().map_or(1.0, |t| t.signum());
    let mut h = 1e-2 * dir;
    for &target in targets {
        while t != target {
            if *budget == 0 {
                return (out, Termination::MaxSteps { t });
            }
            *budget -= 1;
            let remaining = target - t;
            let landing = libm::fabs(h) >= libm::fabs(remaining);
            let trial = if landing { remaining } else { h };
            if libm::fabs(trial) < 1e-14 * t.abs().max(1.0) {
                return (out, Termination::StepFailure { t, reason: "step size underflow".into() });
            }
            let (next, err) = match dp_step(f, &y, trial) {
                Ok(r) => r,
                Err(e) => return (out, Termination::from_error(t, e)),
            };
            let norm = (0..y.len())
                .map(|i| libm::fabs(err[i]) / (atol + rtol * libm::fabs(y[i]).max(libm::fabs(next[i]))))
                .fold(0.0, f64::max);
            if !norm.is_finite() {
                h = trial * 0.2;
                continue;
            }
            let factor = if norm == 0.0 { 5.0 } else { (0.9 * libm::pow(norm, -0.2)).clamp(0.2, 5.0) };
            if norm <= 1.0 {
                t = if landing { target } else { t + trial };
                y = next;
                if let Some(stop) = guard(t, &y) {
                    return (out, stop);
                }
                if !landing {
                    h = trial * factor;
                }
            } else {
                h = trial * factor;
            }
        }
        out.push((target, y.clone()));
    }
    (out, Termination::Completed)
}

fn validate_grid(t_grid: &[f64]) -> Result<()> {
    if !t_grid.iter().all(|t| t.is_finite()) || t_grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Precondition("output times must be finite and strictly increasing".into()));
    }
    if !t_grid.contains(&0.0) {
        return Err(Error::Precondition("output times must contain 0".into()));
    }
    Ok(())
}

/// Integrate `ẏ = f(y)` from `y(0) = y0`, reporting states at `t_grid`.
/// Returns the samples and the forward and backward terminations.
#[allow(clippy::type_complexity)]
fn drive<S, F>(
    f: &F,
    y0: &[S],
    t_grid: &[f64],
    opts: &IntegratorOptions,
    guard: Guard<'_, S>,
    rk45: Option<&dyn Fn(&[f64], (f64, f64), &mut usize, Guard<'_, S>) -> (Vec<(f64, Vec<S>)>, Termination)>,
) -> (Vec<(f64, Vec<S>)>, Termination, Option<Termination>)
where
    S: Scalar,
    F: Fn(&[S]) -> Result<Vec<S>>,
{
    let forward: Vec<f64> = t_grid.iter().copied().filter(|t| *t > 0.0).collect();
    let backward: Vec<f64> = t_grid.iter().rev().copied().filter(|t| *t < 0.0).collect();
    let mut budget = opts.max_steps;
    let run = |targets: &[f64], budget: &mut usize| match (opts.method, rk45) {
        (Method::Rk45 { rtol, atol }, Some(dp)) => dp(targets, (rtol, atol), budget, guard),
        (Method::Rk4 { step }, _) => march_rk4(f, y0, targets, step, budget, guard),
        (Method::Rk45 { .. }, None) => march_rk4(f, y0, targets, DEFAULT_STEP, budget, guard),
    };
    let (back, back_term) = if backward.is_empty() {
        (Vec::new(), None)
    } else {
        let (s, t) = run(&backward, &mut budget);
        (s, Some(t))
    };
    let (fwd, fwd_term) = run(&forward, &mut budget);
    let mut out: Vec<(f64, Vec<S>)> = back.into_iter().rev().collect();
    out.push((0.0, y0.to_vec()));
    out.extend(fwd);
    (out, fwd_term, back_term)
}

fn chart_guard<S: Scalar>(n: usize, escape: f64) -> impl Fn(f64, &[S]) -> Option<Termination> {
    move |t, y: &[S]| {
        if y.iter().any(|c| !c.re().is_finite()) {
            return Some(Termination::StepFailure { t, reason: "non-finite state".into() });
        }
        if y[..n].iter().any(|c| libm::fabs(c.re()) > escape) {
            return Some(Termination::EscapedChart { t });
        }
        None
    }
}

fn check_initial<S: Scalar>(metric: &Metric, x0: &[S], v0: &[S], v_min: f64) -> Result<()> {
    let n = metric.dim();
    if x0.len() != n || v0.len() != n {
        return Err(Error::Shape(alloc::format!("initial data must be {n}-vectors")));
    }
    let speed = metric.speed(x0, v0)?.re();
    if !(speed > v_min) {
        return Err(Error::SpeedFloor { speed, floor: v_min });
    }
    Ok(())
}

fn unpack<S: Scalar>(n: usize, states: Vec<(f64, Vec<S>)>) -> Vec<Sample<S>> {
    states.into_iter().map(|(t, y)| Sample { t, x: y[..n].to_vec(), v: y[n..2 * n].to_vec() }).collect()
}

/// Trajectory with initial data `(x0, v0)` sampled at `t_grid`, which must
/// be strictly increasing and contain 0. Mid-flight failures end the
/// trajectory early and are reported in `termination`.
pub fn integrate(
    field: &ForceField,
    metric: &Metric,
    x0: &[f64],
    v0: &[f64],
    t_grid: &[f64],
    opts: &IntegratorOptions,
) -> Result<Trajectory> {
    opts.validate()?;
    validate_grid(t_grid)?;
    check_initial(metric, x0, v0, opts.v_min)?;
    let n = metric.dim();
    let sys = Newton::new(field, metric, opts.v_min);
    let f = |y: &[f64]| sys.rhs(y, false);
    let guard = chart_guard::<f64>(n, opts.escape);
    let y0: Vec<f64> = x0.iter().chain(v0).copied().collect();
    let dp = |targets: &[f64], tol: (f64, f64), budget: &mut usize, guard: Guard<'_, f64>| {
        march_rk45(&f, &y0, targets, tol, budget, guard)
    };
    let (states, termination, backward) = drive(&f, &y0, t_grid, opts, &guard, Some(&dp));
    Ok(Trajectory { x0: x0.to_vec(), v0: v0.to_vec(), samples: unpack(n, states), termination, backward })
}

/// Fixed-step RK4 integration over any scalar type. With dual-number
/// initial data the samples carry the directional derivative of the flow.
pub fn integrate_generic<S: Scalar>(
    field: &ForceField,
    metric: &Metric,
    x0: &[S],
    v0: &[S],
    t_grid: &[f64],
    step: f64,
    opts: &IntegratorOptions,
) -> Result<Trajectory<S>> {
    opts.validate()?;
    validate_grid(t_grid)?;
    check_initial(metric, x0, v0, opts.v_min)?;
    let n = metric.dim();
    let sys = Newton::new(field, metric, opts.v_min);
    let f = |y: &[S]| sys.rhs(y, false);
    let guard = chart_guard::<S>(n, opts.escape);
    let y0: Vec<S> = x0.iter().chain(v0).copied().collect();
    let fixed = IntegratorOptions { method: Method::Rk4 { step }, ..*opts };
    let (states, termination, backward) = drive(&f, &y0, t_grid, &fixed, &guard, None);
    Ok(Trajectory { x0: x0.to_vec(), v0: v0.to_vec(), samples: unpack(n, states), termination, backward })
}

/// A trajectory densely sampled at every step, with the g-arc length.
#[derive(Clone, Debug, PartialEq)]
pub struct ArcTrajectory {
    pub trajectory: Trajectory,
    pub arc_length: Vec<f64>,
}

/// Fixed-step RK4 until the g-arc length reaches `length`; the last step is
/// shortened so that it lands on `length` exactly.
pub fn integrate_until_arc_length(
    field: &ForceField,
    metric: &Metric,
    x0: &[f64],
    v0: &[f64],
    length: f64,
    step: f64,
    opts: &IntegratorOptions,
) -> Result<ArcTrajectory> {
    let fixed = IntegratorOptions { method: Method::Rk4 { step }, ..*opts };
    fixed.validate()?;
    check_initial(metric, x0, v0, opts.v_min)?;
    if !(length > 0.0) {
        return Err(Error::Precondition("arc length must be positive".into()));
    }
    let n = metric.dim();
    let sys = Newton::new(field, metric, opts.v_min);
    let f = |y: &[f64]| sys.rhs(y, true);
    let guard = chart_guard::<f64>(n, opts.escape);
    let mut y: Vec<f64> = x0.iter().chain(v0).copied().chain([0.0]).collect();
    let mut t = 0.0;
    let mut states = vec![(0.0, y.clone())];
    let mut budget = opts.max_steps;
    let termination = loop {
        if budget == 0 {
            break Termination::MaxSteps { t };
        }
        budget -= 1;
        let next = match rk4_step(&f, &y, step) {
            Ok(next) => next,
            Err(e) => break Termination::from_error(t, e),
        };
        if next[2 * n] >= length {
            let from = y.clone();
            let partial = |tau: f64| -> Result<(f64, f64)> {
                let z = rk4_step(&f, &from, tau)?;
                let speed = metric.speed(&z[..n], &z[n..2 * n])?;
                Ok((z[2 * n] - length, speed))
            };
            let tau = match root::solve(partial, 0.0, step, RootOptions::default()) {
                Ok(tau) => tau,
                Err(e) => break Termination::from_error(t, e),
            };
            match rk4_step(&f, &from, tau) {
                Ok(mut z) => {
                    z[2 * n] = length;
                    states.push((t + tau, z));
                    break Termination::Completed;
                }
                Err(e) => break Termination::from_error(t, e),
            }
        }
        t += step;
        y = next;
        if let Some(stop) = guard(t, &y) {
            break stop;
        }
        states.push((t, y.clone()));
    };
    let arc_length = states.iter().map(|(_, y)| y[2 * n]).collect();
    let trajectory =
        Trajectory { x0: x0.to_vec(), v0: v0.to_vec(), samples: unpack(n, states), termination, backward: None };
    Ok(ArcTrajectory { trajectory, arc_length })
}

/// `d|v|/dt = Σ N^k F_k`.
pub fn speed_rate(field: &ForceField, metric: &Metric, x: &[f64], v: &[f64], v_min: f64) -> Result<f64> {
    let local = metric.local(x)?;
    let fib = local.fiber(v, v_min)?;
    let f = field.eval(metric, x, v, v_min)?;
    Ok(f.iter().zip(&fib.up).map(|(a, b)| a * b).sum())
}

/// Solve `dW0/dt = h(W0)` on `t_grid` (strictly increasing, containing 0)
/// with fixed RK4 steps.
pub fn w0_evolve(h: &OneVar, w0: f64, t_grid: &[f64], step: f64) -> Result<Vec<f64>> {
    validate_grid(t_grid)?;
    if h.is_zero() {
        return Ok(vec![w0; t_grid.len()]);
    }
    let f = |y: &[f64]| -> Result<Vec<f64>> { Ok(vec![h.eval(y[0])?]) };
    let guard = |t: f64, y: &[f64]| {
        (!(libm::fabs(y[0]) < BLOWUP_LEVEL)).then(|| Termination::StepFailure { t, reason: "blow-up".into() })
    };
    let opts = IntegratorOptions { max_steps: usize::MAX, ..IntegratorOptions::rk4(step) };
    opts.validate()?;
    let (states, fwd, back) = drive(&f, &[w0], t_grid, &opts, &guard, None);
    for term in core::iter::once(&fwd).chain(back.as_ref()) {
        match term {
            Termination::Completed => {}
            Termination::StepFailure { t, reason } if reason == "blow-up" => return Err(Error::BlowUp { t: *t }),
            other => {
                return Err(Error::Precondition(alloc::format!(
                    "W0 evolution stopped at t = {:?}: {}",
                    other.time(),
                    other.label()
                )))
            }
        }
    }
    Ok(states.into_iter().map(|(_, y)| y[0]).collect())
}
