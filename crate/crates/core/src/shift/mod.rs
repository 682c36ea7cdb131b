//! Normal shifts of hypersurfaces and normal blow-ups of points.
//!
//! A family is a lattice of trajectories started from `x(u)` with velocity
//! `ν(u) n(u)`. Along each trajectory the deviation functions
//! `φ_k = g(τ_k, v)` measure how far `S_t` is from being orthogonal to the
//! trajectories. Tangent frames `τ_k` come either from forward-mode
//! propagation of `∂/∂u^k` through the flow (exact up to the integrator) or
//! from central differences across the lattice.
//!
//! Building a family is split into [`ShiftPlan::run_node`], independent per
//! node, and [`ShiftPlan::assemble`], so callers can run nodes concurrently.

mod checks;
mod surface;

pub use checks::*;
pub use surface::*;

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::dynamics::{self, integrate, integrate_generic, IntegratorOptions, Method, Trajectory};
use crate::forcefield::{ForceField, GeneratingFunction};
use crate::geometry::Metric;
use crate::scalar::{Dual, Dual64, Scalar};
use crate::{Error, Result};

pub const DEFAULT_LATTICE: usize = 21;
pub const DEFAULT_T_SKIP: f64 = 0.05;
pub const DEFAULT_POLAR_MARGIN: f64 = 0.2;
pub const CAUSTIC_GRAM: f64 = 1e-8;
/// Default bound on `|φ_k| / (‖τ_k‖ |v|)` for a family to count as normal.
pub const NORMALITY_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FrameMethod {
    /// Propagate `∂x/∂u^k` with dual numbers through the integrator.
    #[default]
    Tangent,
    /// Difference trajectory positions across the lattice.
    CentralDifference,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShiftOptions {
    pub integrator: IntegratorOptions,
    pub frame: FrameMethod,
    pub caustic_gram: f64,
    pub t_skip: f64,
    pub polar_margin: f64,
}

impl Default for ShiftOptions {
    fn default() -> Self {
        ShiftOptions {
            integrator: IntegratorOptions::default(),
            frame: FrameMethod::Tangent,
            caustic_gram: CAUSTIC_GRAM,
            t_skip: DEFAULT_T_SKIP,
            polar_margin: DEFAULT_POLAR_MARGIN,
        }
    }
}

/// Node counts per parameter.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Lattice {
    pub counts: Vec<usize>,
}

impl Lattice {
    pub fn uniform(params: usize, count: usize) -> Self {
        Lattice { counts: vec![count; params] }
    }

    pub fn len(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.counts.len()];
        for d in (0..self.counts.len()).rev() {
            idx[d] = flat % self.counts[d];
            flat /= self.counts[d];
        }
        idx
    }

    fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.counts).fold(0, |acc, (i, c)| acc * c + i)
    }
}

/// How `ν(u)` is chosen on the initial hypersurface.
#[derive(Clone, Copy, Debug)]
pub enum NuRule<'a> {
    /// `W(x(u), ν(u)) = W0`.
    Level {
        gen: &'a GeneratingFunction,
        w0: f64,
    },
    Constant(f64),
}

/// `ν` with `W(x(u), ν) = W0`, to within `1e-12`.
pub fn solve_nu(gen: &GeneratingFunction, surf: &Hypersurface, u: &[f64], w0: f64) -> Result<f64> {
    nu_on_surface(gen, &surf.point(u)?, w0)
}

fn nu_on_surface<S: Scalar>(gen: &GeneratingFunction, x: &[S], w0: f64) -> Result<S> {
    let nu = gen.big_v(x, S::cst(w0))?;
    let xr: Vec<f64> = x.iter().map(|c| c.re()).collect();
    if !(nu.re() > 0.0) {
        return Err(Error::Precondition(format!(
            "level W0 = {w0} needs a nonpositive speed {} at x = {xr:?}",
            nu.re()
        )));
    }
    let residual = (gen.w(&xr, nu.re())? - w0).abs();
    if residual > 1e-12 * w0.abs().max(1.0) {
        return Err(Error::Precondition(format!("level equation residual {residual:e} at x = {xr:?}")));
    }
    Ok(nu)
}

impl NuRule<'_> {
    fn eval<S: Scalar>(&self, x: &[S]) -> Result<S> {
        match *self {
            NuRule::Level { gen, w0 } => nu_on_surface(gen, x, w0),
            NuRule::Constant(nu) => Ok(S::cst(nu)),
        }
    }
}

/// `φ̇_k(0) = ν ∂ν/∂u^k + g(τ_k, F)`, with exact derivatives.
pub fn initial_deviation_rate(
    field: &ForceField,
    metric: &Metric,
    surf: &Hypersurface,
    u: &[f64],
    nu: NuRule<'_>,
    v_min: f64,
) -> Result<Vec<f64>> {
    let source = Source::Surface { surf, nu };
    rate_from_source(&source, field, metric, u, v_min)
}

fn rate_from_source(
    source: &Source<'_>,
    field: &ForceField,
    metric: &Metric,
    u: &[f64],
    v_min: f64,
) -> Result<Vec<f64>> {
    let (x, v, _) = source.initial::<f64>(metric, u)?;
    let f = field.eval(metric, &x, &v, v_min)?;
    (0..u.len())
        .map(|k| {
            let (xd, _, nud) = source.initial::<Dual64>(metric, &Dual::seeded(u, Some(k)))?;
            let tau: Vec<f64> = xd.iter().map(|c| c.eps).collect();
            let g_tau_f: f64 = tau.iter().zip(&f).map(|(a, b)| a * b).sum();
            Ok(nud.re * nud.eps + g_tau_f)
        })
        .collect()
}

#[derive(Clone, Copy, Debug)]
enum Source<'a> {
    Surface { surf: &'a Hypersurface, nu: NuRule<'a> },
    Point { p0: &'a [f64], nu0: f64 },
}

/// Unit vector with hyperspherical angles `θ`, the last one azimuthal.
fn hyperspherical<S: Scalar>(theta: &[S]) -> Vec<S> {
    let n = theta.len() + 1;
    let mut out = Vec::with_capacity(n);
    let mut prod = S::one();
    for t in theta {
        out.push(prod * t.cos());
        prod *= t.sin();
    }
    out.push(prod);
    out
}

impl Source<'_> {
    /// `(x(u), v(u), ν(u))`.
    fn initial<S: Scalar>(&self, metric: &Metric, u: &[S]) -> Result<(Vec<S>, Vec<S>, S)> {
        match self {
            Source::Surface { surf, nu } => {
                let x = surf.point(u)?;
                let n = unit_normal(metric, surf, u)?;
                let nu = nu.eval(&x)?;
                let v = n.into_iter().map(|c| c * nu).collect();
                Ok((x, v, nu))
            }
            Source::Point { p0, nu0 } => {
                let x: Vec<S> = p0.iter().map(|c| S::cst(*c)).collect();
                let e = hyperspherical(u);
                let norm = metric.speed(&x, &e)?;
                let scale = S::cst(*nu0) / norm;
                Ok((x, e.into_iter().map(|c| c * scale).collect(), S::cst(*nu0)))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FamilyKind {
    Surface,
    /// Frames are meaningless before `t_skip`.
    Blowup {
        t_skip: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Deviation {
    pub phi: Vec<f64>,
    /// `max_k |φ_k| / (‖τ_k‖_g |v|)`.
    pub normalized: f64,
    /// Gram determinant of the frame under `g`.
    pub gram: f64,
    /// Frame from one-sided differences.
    pub boundary: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub index: Vec<usize>,
    pub u: Vec<f64>,
    pub nu: Option<f64>,
    pub trajectory: Option<Trajectory>,
    /// One entry per output time; `None` where no frame is available.
    pub deviations: Vec<Option<Deviation>>,
    pub initial_rate: Option<Vec<f64>>,
    pub failure: Option<String>,
}

/// First frame collapse, past which the family is truncated.
#[derive(Clone, Debug, PartialEq)]
pub struct Caustic {
    pub t: f64,
    pub t_index: usize,
    pub node: usize,
    pub gram: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShiftFamily {
    pub kind: FamilyKind,
    pub dim: usize,
    pub lattice: Lattice,
    pub periodic: Vec<bool>,
    pub spacing: Vec<f64>,
    pub t_grid: Vec<f64>,
    /// `x(p0)`.
    pub anchor: Vec<f64>,
    pub nu0: f64,
    pub w0: Option<f64>,
    /// `W0(t)` on `t_grid`.
    pub w0_trace: Option<Vec<f64>>,
    pub frame: FrameMethod,
    pub nodes: Vec<Node>,
    pub caustic: Option<Caustic>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeviationStats {
    pub max_abs: f64,
    pub max_normalized: f64,
    /// `(node, t_index)` of `max_normalized`.
    pub argmax: Option<(usize, usize)>,
    /// Maximum over interior frames only.
    pub interior_max_normalized: f64,
    pub evaluated: usize,
}

impl ShiftFamily {
    pub fn deviation(&self, node: usize, t_index: usize) -> Option<&Deviation> {
        self.nodes.get(node)?.deviations.get(t_index)?.as_ref()
    }

    /// Statistics over output times in `[t_lo, t_hi]`.
    pub fn deviation_stats(&self, t_lo: f64, t_hi: f64) -> DeviationStats {
        let mut s = DeviationStats {
            max_abs: 0.0,
            max_normalized: 0.0,
            argmax: None,
            interior_max_normalized: 0.0,
            evaluated: 0,
        };
        for (i, node) in self.nodes.iter().enumerate() {
            for (j, d) in node.deviations.iter().enumerate() {
                let t = self.t_grid[j];
                let Some(d) = d else { continue };
                if t < t_lo || t > t_hi {
                    continue;
                }
                s.evaluated += 1;
                let abs = d.phi.iter().fold(0.0, |m: f64, c| m.max(c.abs()));
                s.max_abs = s.max_abs.max(abs);
                if s.argmax.is_none() || d.normalized > s.max_normalized || d.normalized.is_nan() {
                    s.max_normalized = d.normalized;
                    s.argmax = Some((i, j));
                }
                if !d.boundary {
                    s.interior_max_normalized = s.interior_max_normalized.max(d.normalized);
                }
            }
        }
        s
    }

    pub fn max_initial_rate(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| n.initial_rate.as_ref())
            .flat_map(|r| r.iter())
            .fold(0.0, |m, c| m.max(c.abs()))
    }

    pub fn failed_nodes(&self) -> usize {
        self.nodes.iter().filter(|n| n.failure.is_some()).count()
    }

    /// Nodes whose trajectory covers the whole grid.
    pub fn complete_nodes(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| n.trajectory.as_ref().is_some_and(|t| t.samples.len() == self.t_grid.len()))
            .count()
    }
}

/// Output of one node's integration.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeRun {
    pub nu: Option<f64>,
    pub trajectory: Option<Trajectory>,
    /// `[t_index][k]`, present for [`FrameMethod::Tangent`].
    pub frames: Option<Vec<Vec<Vec<f64>>>>,
    pub initial_rate: Option<Vec<f64>>,
    pub failure: Option<String>,
}

impl NodeRun {
    fn failed(e: Error) -> Self {
        NodeRun { nu: None, trajectory: None, frames: None, initial_rate: None, failure: Some(e.to_string()) }
    }
}

/// Everything needed to integrate and assemble a family.
#[derive(Clone, Debug)]
pub struct ShiftPlan<'a> {
    field: &'a ForceField,
    metric: &'a Metric,
    gen: Option<&'a GeneratingFunction>,
    source: Source<'a>,
    kind: FamilyKind,
    lattice: Lattice,
    periodic: Vec<bool>,
    lo: Vec<f64>,
    spacing: Vec<f64>,
    t_grid: Vec<f64>,
    anchor: Vec<f64>,
    nu0: f64,
    w0: Option<f64>,
    opts: ShiftOptions,
}

fn check_common(nu0: f64, t_grid: &[f64], opts: &ShiftOptions) -> Result<()> {
    if !(nu0 > 0.0 && nu0.is_finite()) {
        return Err(Error::Precondition(format!("nu0 must be positive, got {nu0}")));
    }
    if t_grid.first() != Some(&0.0) || t_grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Precondition("shift output times must start at 0 and increase strictly".into()));
    }
    opts.integrator.validate()?;
    if opts.frame == FrameMethod::Tangent && !matches!(opts.integrator.method, Method::Rk4 { .. }) {
        return Err(Error::Precondition("tangent frames need the fixed-step RK4 integrator".into()));
    }
    Ok(())
}

fn axis(lo: f64, hi: f64, count: usize, periodic: bool) -> (f64, f64) {
    if periodic {
        (lo, (hi - lo) / count as f64)
    } else if count == 1 {
        (0.5 * (lo + hi), 0.0)
    } else {
        (lo, (hi - lo) / (count - 1) as f64)
    }
}

impl<'a> ShiftPlan<'a> {
    /// Normal shift of `surf`, normalized by `ν(u0) = ν0`.
    #[allow(clippy::too_many_arguments)]
    pub fn surface(
        field: &'a ForceField,
        gen: Option<&'a GeneratingFunction>,
        metric: &'a Metric,
        surf: &'a Hypersurface,
        u0: &[f64],
        nu0: f64,
        t_grid: &[f64],
        lattice: &Lattice,
        opts: &ShiftOptions,
    ) -> Result<Self> {
        check_common(nu0, t_grid, opts)?;
        let n = metric.dim();
        if surf.dim() != n || field_dim(field, metric) != n {
            return Err(Error::Shape("surface, metric and force field dimensions differ".into()));
        }
        if lattice.counts.len() != n - 1 || lattice.counts.contains(&0) {
            return Err(Error::Shape(format!("lattice needs {} positive counts", n - 1)));
        }
        if opts.frame == FrameMethod::CentralDifference && lattice.counts.iter().any(|c| *c < 3) {
            return Err(Error::Precondition("central differences need at least 3 nodes per parameter".into()));
        }
        if !surf.contains(u0) {
            return Err(Error::Precondition(format!("p0 parameters {u0:?} lie outside the rectangle")));
        }
        let anchor = surf.point(u0)?;
        let w0 = gen.map(|g| g.w(&anchor, nu0)).transpose()?;
        let nu = match (gen, w0) {
            (Some(gen), Some(w0)) => NuRule::Level { gen, w0 },
            _ => NuRule::Constant(nu0),
        };
        let (lo, spacing): (Vec<f64>, Vec<f64>) =
            surf.rect().iter().zip(&lattice.counts).map(|((a, b), c)| axis(*a, *b, *c, false)).unzip();
        Ok(ShiftPlan {
            field,
            metric,
            gen,
            source: Source::Surface { surf, nu },
            kind: FamilyKind::Surface,
            lattice: lattice.clone(),
            periodic: vec![false; n - 1],
            lo,
            spacing,
            t_grid: t_grid.to_vec(),
            anchor,
            nu0,
            w0,
            opts: *opts,
        })
    }

    /// Normal blow-up of `p0`: trajectories leave along every g-unit
    /// direction with speed `ν0`.
    #[allow(clippy::too_many_arguments)]
    pub fn blowup(
        field: &'a ForceField,
        gen: Option<&'a GeneratingFunction>,
        metric: &'a Metric,
        p0: &'a [f64],
        nu0: f64,
        t_grid: &[f64],
        lattice: &Lattice,
        opts: &ShiftOptions,
    ) -> Result<Self> {
        check_common(nu0, t_grid, opts)?;
        let n = metric.dim();
        if n < 3 {
            return Err(Error::Dimension(n));
        }
        if p0.len() != n || field_dim(field, metric) != n {
            return Err(Error::Shape("point, metric and force field dimensions differ".into()));
        }
        if lattice.counts.len() != n - 1 || lattice.counts.iter().any(|c| *c < 3) {
            return Err(Error::Shape(format!("blow-up lattice needs {} counts of at least 3", n - 1)));
        }
        let margin = opts.polar_margin;
        if !(margin > 0.0 && margin < core::f64::consts::FRAC_PI_2) {
            return Err(Error::Precondition("polar margin must lie in (0, pi/2)".into()));
        }
        let mut periodic = vec![false; n - 1];
        periodic[n - 2] = true;
        let (lo, spacing): (Vec<f64>, Vec<f64>) = lattice
            .counts
            .iter()
            .zip(&periodic)
            .map(|(c, p)| {
                if *p {
                    axis(0.0, 2.0 * core::f64::consts::PI, *c, true)
                } else {
                    axis(margin, core::f64::consts::PI - margin, *c, false)
                }
            })
            .unzip();
        let w0 = gen.map(|g| g.w(p0, nu0)).transpose()?;
        Ok(ShiftPlan {
            field,
            metric,
            gen,
            source: Source::Point { p0, nu0 },
            kind: FamilyKind::Blowup { t_skip: opts.t_skip },
            lattice: lattice.clone(),
            periodic,
            lo,
            spacing,
            t_grid: t_grid.to_vec(),
            anchor: p0.to_vec(),
            nu0,
            w0,
            opts: *opts,
        })
    }

    pub fn len(&self) -> usize {
        self.lattice.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn node_params(&self, i: usize) -> Vec<f64> {
        let idx = self.lattice.multi_index(i);
        idx.iter().enumerate().map(|(d, k)| self.lo[d] + *k as f64 * self.spacing[d]).collect()
    }

    /// Integrate node `i`. Failures are recorded, not returned.
    pub fn run_node(&self, i: usize) -> NodeRun {
        let u = self.node_params(i);
        let iopts = &self.opts.integrator;
        let v_min = iopts.v_min;
        let nu = match self.source.initial::<f64>(self.metric, &u) {
            Ok((_, _, nu)) => nu,
            Err(e) => return NodeRun::failed(e),
        };
        let initial_rate = match self.kind {
            FamilyKind::Surface => match rate_from_source(&self.source, self.field, self.metric, &u, v_min) {
                Ok(r) => Some(r),
                Err(e) => return NodeRun::failed(e),
            },
            FamilyKind::Blowup { .. } => None,
        };
        match self.opts.frame {
            FrameMethod::CentralDifference => {
                let (x0, v0, _) = match self.source.initial::<f64>(self.metric, &u) {
                    Ok(d) => d,
                    Err(e) => return NodeRun::failed(e),
                };
                match integrate(self.field, self.metric, &x0, &v0, &self.t_grid, iopts) {
                    Ok(tr) => NodeRun { nu: Some(nu), trajectory: Some(tr), frames: None, initial_rate, failure: None },
                    Err(e) => NodeRun::failed(e),
                }
            }
            FrameMethod::Tangent => {
                let step = match iopts.method {
                    Method::Rk4 { step } => step,
                    Method::Rk45 { .. } => dynamics::DEFAULT_STEP,
                };
                let mut frames: Vec<Vec<Vec<f64>>> = vec![Vec::new(); self.t_grid.len()];
                let mut trajectory = None;
                for k in 0..u.len() {
                    let ud = Dual::seeded(&u, Some(k));
                    let run = self.source.initial::<Dual64>(self.metric, &ud).and_then(|(x0, v0, _)| {
                        integrate_generic(self.field, self.metric, &x0, &v0, &self.t_grid, step, iopts)
                    });
                    let tr = match run {
                        Ok(tr) => tr,
                        Err(e) => return NodeRun::failed(e),
                    };
                    for (j, s) in tr.samples.iter().enumerate() {
                        frames[j].push(s.x.iter().map(|c| c.eps).collect());
                    }
                    if trajectory.is_none() {
                        trajectory = Some(real_part(&tr));
                    }
                }
                let len = trajectory.as_ref().map_or(0, |t| t.samples.len());
                frames.truncate(len);
                NodeRun { nu: Some(nu), trajectory, frames: Some(frames), initial_rate, failure: None }
            }
        }
    }

    /// Frames at every output time for node `i`, from the runs.
    fn frames_for(&self, runs: &[NodeRun], i: usize) -> Vec<Option<(Vec<Vec<f64>>, bool)>> {
        let nt = self.t_grid.len();
        if let Some(frames) = &runs[i].frames {
            let mut out: Vec<Option<(Vec<Vec<f64>>, bool)>> = frames.iter().map(|f| Some((f.clone(), false))).collect();
            out.resize(nt, None);
            return out;
        }
        let idx = self.lattice.multi_index(i);
        let position =
            |node: usize, j: usize| -> Option<&Vec<f64>> { Some(&runs[node].trajectory.as_ref()?.samples.get(j)?.x) };
        (0..nt)
            .map(|j| {
                let mut frame = Vec::with_capacity(idx.len());
                let mut boundary = false;
                for d in 0..idx.len() {
                    let c = self.lattice.counts[d];
                    let h = self.spacing[d];
                    let at = |k: usize| {
                        let mut m = idx.clone();
                        m[d] = k;
                        position(self.lattice.flat_index(&m), j)
                    };
                    let k = idx[d];
                    let tau: Vec<f64> = if self.periodic[d] {
                        let (p, q) = (at((k + 1) % c)?, at((k + c - 1) % c)?);
                        p.iter().zip(q).map(|(a, b)| (a - b) / (2.0 * h)).collect()
                    } else if k > 0 && k + 1 < c {
                        let (p, q) = (at(k + 1)?, at(k - 1)?);
                        p.iter().zip(q).map(|(a, b)| (a - b) / (2.0 * h)).collect()
                    } else {
                        boundary = true;
                        let (p0, p1, p2, sign) = if k == 0 {
                            (at(0)?, at(1)?, at(2)?, 1.0)
                        } else {
                            (at(c - 1)?, at(c - 2)?, at(c - 3)?, -1.0)
                        };
                        (0..p0.len()).map(|m| sign * (-3.0 * p0[m] + 4.0 * p1[m] - p2[m]) / (2.0 * h)).collect()
                    };
                    frame.push(tau);
                }
                Some((frame, boundary))
            })
            .collect()
    }

    /// Combine node runs (in node order) into a family.
    pub fn assemble(&self, runs: Vec<NodeRun>) -> Result<ShiftFamily> {
        if runs.len() != self.len() {
            return Err(Error::Shape(format!("expected {} node runs, got {}", self.len(), runs.len())));
        }
        let nt = self.t_grid.len();
        let t_from = match self.kind {
            FamilyKind::Surface => 0.0,
            FamilyKind::Blowup { t_skip } => t_skip,
        };
        let mut deviations: Vec<Vec<Option<Deviation>>> = Vec::with_capacity(runs.len());
        for i in 0..runs.len() {
            let frames = self.frames_for(&runs, i);
            let mut row = vec![None; nt];
            if let Some(tr) = &runs[i].trajectory {
                for (j, s) in tr.samples.iter().enumerate() {
                    if self.t_grid[j] < t_from {
                        continue;
                    }
                    if let Some((frame, boundary)) = &frames[j] {
                        row[j] = deviation_at(self.metric, &s.x, &s.v, frame, *boundary);
                    }
                }
            }
            deviations.push(row);
        }
        let mut caustic: Option<Caustic> = None;
        for j in 0..nt {
            if self.t_grid[j] == 0.0 {
                continue;
            }
            for (i, row) in deviations.iter().enumerate() {
                if let Some(d) = &row[j] {
                    if d.gram < self.opts.caustic_gram {
                        caustic = Some(Caustic { t: self.t_grid[j], t_index: j, node: i, gram: d.gram });
                        break;
                    }
                }
            }
            if caustic.is_some() {
                break;
            }
        }
        let w0_trace = match (self.gen, self.w0) {
            (Some(gen), Some(w0)) => {
                let step = match self.opts.integrator.method {
                    Method::Rk4 { step } => step,
                    Method::Rk45 { .. } => dynamics::DEFAULT_STEP,
                };
                Some(dynamics::w0_evolve(gen.h(), w0, &self.t_grid, step)?)
            }
            _ => None,
        };
        let nodes = runs
            .into_iter()
            .zip(deviations)
            .enumerate()
            .map(|(i, (mut run, mut devs))| {
                if let Some(c) = &caustic {
                    devs.truncate(c.t_index);
                    devs.resize(nt, None);
                    if let Some(tr) = run.trajectory.as_mut() {
                        tr.samples.truncate(c.t_index);
                    }
                }
                Node {
                    index: self.lattice.multi_index(i),
                    u: self.node_params(i),
                    nu: run.nu,
                    trajectory: run.trajectory,
                    deviations: devs,
                    initial_rate: run.initial_rate,
                    failure: run.failure,
                }
            })
            .collect();
        Ok(ShiftFamily {
            kind: self.kind.clone(),
            dim: self.metric.dim(),
            lattice: self.lattice.clone(),
            periodic: self.periodic.clone(),
            spacing: self.spacing.clone(),
            t_grid: self.t_grid.clone(),
            anchor: self.anchor.clone(),
            nu0: self.nu0,
            w0: self.w0,
            w0_trace,
            frame: self.opts.frame,
            nodes,
            caustic,
        })
    }

    /// Run every node in order and assemble.
    pub fn run(&self) -> Result<ShiftFamily> {
        self.assemble((0..self.len()).map(|i| self.run_node(i)).collect())
    }
}

fn field_dim(field: &ForceField, metric: &Metric) -> usize {
    match field {
        ForceField::Zero { n } | ForceField::Opaque { n, .. } => *n,
        ForceField::Generated(g) => g.dim(),
        ForceField::Custom { components } => components.len(),
        _ => metric.dim(),
    }
}

fn real_part(tr: &Trajectory<Dual64>) -> Trajectory {
    let re = |v: &[Dual64]| v.iter().map(|c| c.re).collect::<Vec<_>>();
    Trajectory {
        x0: re(&tr.x0),
        v0: re(&tr.v0),
        samples: tr.samples.iter().map(|s| dynamics::Sample { t: s.t, x: re(&s.x), v: re(&s.v) }).collect(),
        termination: tr.termination.clone(),
        backward: tr.backward.clone(),
    }
}

fn deviation_at(metric: &Metric, x: &[f64], v: &[f64], frame: &[Vec<f64>], boundary: bool) -> Option<Deviation> {
    let g = metric.g(x).ok()?;
    let speed = libm::sqrt(g.bilinear(v, v));
    let mut normalized: f64 = 0.0;
    let phi: Vec<f64> = frame
        .iter()
        .map(|tau| {
            let p = g.bilinear(tau, v);
            let scale = libm::sqrt(g.bilinear(tau, tau)) * speed;
            normalized = normalized.max(if scale > 0.0 { libm::fabs(p) / scale } else { f64::INFINITY });
            p
        })
        .collect();
    Some(Deviation { phi, normalized, gram: gram_det(frame, Some(&g)), boundary })
}

/// Normal shift of `surf` with `ν` fixed by `ν(u0) = ν0` (through `gen`
/// when given, otherwise constant).
#[allow(clippy::too_many_arguments)]
pub fn build_shift(
    field: &ForceField,
    gen: Option<&GeneratingFunction>,
    metric: &Metric,
    surf: &Hypersurface,
    u0: &[f64],
    nu0: f64,
    t_grid: &[f64],
    lattice: &Lattice,
    opts: &ShiftOptions,
) -> Result<ShiftFamily> {
    ShiftPlan::surface(field, gen, metric, surf, u0, nu0, t_grid, lattice, opts)?.run()
}

/// Normal blow-up of `p0`.
#[allow(clippy::too_many_arguments)]
pub fn blowup(
    field: &ForceField,
    gen: Option<&GeneratingFunction>,
    metric: &Metric,
    p0: &[f64],
    nu0: f64,
    t_grid: &[f64],
    lattice: &Lattice,
    opts: &ShiftOptions,
) -> Result<ShiftFamily> {
    ShiftPlan::blowup(field, gen, metric, p0, nu0, t_grid, lattice, opts)?.run()
}
