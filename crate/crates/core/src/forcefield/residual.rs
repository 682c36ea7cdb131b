//! Normality residuals of a force field, evaluated pointwise from its
//! first partial derivatives.

use alloc::vec;
use alloc::vec::Vec;

use super::force::{Differentiation, ForceField};
use super::generating::GeneratingFunction;
use crate::geometry::{
    spatial_gradient, spherical_partials, ExtendedPartials, FieldPartials, GradientMode, Local, Metric, Rank,
    SphericalPartials, SphericalScalar,
};
use crate::scalar::Dual64;
use crate::{Error, Result};

/// Tolerance when every derivative is exact.
pub const TOL_ANALYTIC: f64 = 1e-9;
/// Tolerance when derivatives come from finite differences.
pub const TOL_FINITE_DIFFERENCE: f64 = 1e-6;

pub const ROW_NAMES: [&str; 6] = ["weak.1", "weak.2", "additional.1", "additional.2", "reduced.b", "reduced.a"];

/// Both rows of the weak normality equations, indexed by `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeakResidual {
    pub row1: Vec<f64>,
    pub row2: Vec<f64>,
}

/// Both rows of the additional normality equations, `[ε*n + σ]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdditionalResidual {
    pub row1: Vec<f64>,
    pub row2: Vec<f64>,
}

/// Reduced equations on `(a, b)`: pairs `r < s`, then one entry per `s`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReducedResidual {
    pub b_rows: Vec<f64>,
    pub a_rows: Vec<f64>,
}

/// Pointwise quantities shared by both systems.
struct Pointwise {
    n: usize,
    s: f64,
    n_up: Vec<f64>,
    p: crate::linalg::Mat<f64>,
    f: Vec<f64>,
    f_up: Vec<f64>,
    /// `∇̃_m F_j` as `[m][j]`.
    dv: Vec<Vec<f64>>,
    /// `∇_m F_j` as `[m][j]`.
    grad: Vec<Vec<f64>>,
}

impl Pointwise {
    fn new(local: &Local<f64>, v: &[f64], partials: &ExtendedPartials, v_min: f64) -> Result<Self> {
        let n = local.dim();
        let fib = local.fiber(v, v_min)?;
        let grad = spatial_gradient(
            &FieldPartials::Extended(partials.clone()),
            Rank::Covector,
            local,
            v,
            GradientMode::Full,
            v_min,
        )?;
        Ok(Pointwise {
            n,
            s: fib.speed,
            p: fib.projector(),
            n_up: fib.up,
            f: partials.value.clone(),
            f_up: local.raise(&partials.value),
            dv: partials.dv.clone(),
            grad,
        })
    }
}

/// Weak normality residual from the force partials at `(x, v)`.
pub fn weak_normality_residual(
    local: &Local<f64>,
    v: &[f64],
    partials: &ExtendedPartials,
    v_min: f64,
) -> Result<WeakResidual> {
    let q = Pointwise::new(local, v, partials, v_min)?;
    Ok(weak_from(&q))
}

fn weak_from(q: &Pointwise) -> WeakResidual {
    let n = q.n;
    let s = q.s;
    // ∇̃_i A with A = N^j F_j and ∂N^j/∂v^i = P^j_i / s
    let grad_a: Vec<f64> =
        (0..n).map(|i| (0..n).map(|j| q.p[(j, i)] / s * q.f[j] + q.n_up[j] * q.dv[i][j]).sum()).collect();
    let row1 = (0..n).map(|k| (0..n).map(|i| (q.f[i] / s + grad_a[i]) * q.p[(i, k)]).sum()).collect();
    // Σ_r N^r N^j ∇̃_j F_r
    let nn_dv: f64 = (0..n).map(|j| (0..n).map(|r| q.n_up[r] * q.n_up[j] * q.dv[j][r]).sum::<f64>()).sum();
    let row2 = (0..n)
        .map(|k| {
            let mut acc = 0.0;
            for i in 0..n {
                let mut inner = 0.0;
                for j in 0..n {
                    inner += (q.grad[i][j] + q.grad[j][i] - 2.0 * q.f[i] * q.f[j] / (s * s)) * q.n_up[j];
                    inner += q.f_up[j] * q.dv[j][i] / s;
                }
                inner -= nn_dv * q.f[i] / s;
                acc += inner * q.p[(i, k)];
            }
            acc
        })
        .collect();
    WeakResidual { row1, row2 }
}

/// Additional normality residual from the force partials at `(x, v)`.
pub fn additional_normality_residual(
    local: &Local<f64>,
    v: &[f64],
    partials: &ExtendedPartials,
    v_min: f64,
) -> Result<AdditionalResidual> {
    let q = Pointwise::new(local, v, partials, v_min)?;
    Ok(additional_from(local, &q))
}

fn additional_from(local: &Local<f64>, q: &Pointwise) -> AdditionalResidual {
    let n = q.n;
    let s = q.s;
    // X_ij = Σ_m N^m F_i ∇̃_m F_j / s - ∇_i F_j
    let mut x = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for m in 0..n {
                acc += q.n_up[m] * q.f[i] * q.dv[m][j] / s;
            }
            x[i * n + j] = acc - q.grad[i][j];
        }
    }
    let mut row1 = vec![0.0; n * n];
    for e in 0..n {
        for sg in 0..n {
            let mut acc = 0.0;
            for i in 0..n {
                for j in 0..n {
                    acc += q.p[(i, e)] * q.p[(j, sg)] * (x[i * n + j] - x[j * n + i]);
                }
            }
            row1[e * n + sg] = acc;
        }
    }
    // T^i_j = ∇̃_j F^i
    let mut t = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            t[i * n + j] = (0..n).map(|a| local.g_inv[(i, a)] * q.dv[j][a]).sum();
        }
    }
    let mut trace = 0.0;
    for i in 0..n {
        for j in 0..n {
            for m in 0..n {
                trace += q.p[(j, m)] * t[i * n + j] * q.p[(m, i)];
            }
        }
    }
    let mut row2 = vec![0.0; n * n];
    for e in 0..n {
        for sg in 0..n {
            let mut acc = 0.0;
            for i in 0..n {
                for j in 0..n {
                    acc += q.p[(j, sg)] * t[i * n + j] * q.p[(e, i)];
                }
            }
            row2[e * n + sg] = acc - trace / (n as f64 - 1.0) * q.p[(e, sg)];
        }
    }
    AdditionalResidual { row1, row2 }
}

/// Reduced residuals from spherical partials of `a` (one component) and
/// `b` (`n` components).
pub fn reduced_residuals(
    a: &SphericalPartials,
    b: &SphericalPartials,
    local: &Local<f64>,
    v: &[f64],
    v_min: f64,
) -> Result<ReducedResidual> {
    let n = local.dim();
    if a.value.len() != 1 || b.value.len() != n {
        return Err(Error::Shape(alloc::format!(
            "reduced residuals need a scalar a and an {n}-covector b, got {} and {}",
            a.value.len(),
            b.value.len()
        )));
    }
    let grad_b = spatial_gradient(
        &FieldPartials::Spherical(b.clone()),
        Rank::Covector,
        local,
        v,
        GradientMode::Spherical,
        v_min,
    )?;
    let grad_a =
        spatial_gradient(&FieldPartials::Spherical(a.clone()), Rank::Scalar, local, v, GradientMode::Spherical, v_min)?;
    let (bv, db) = (&b.value, &b.ds);
    let mut b_rows = Vec::with_capacity(n * (n - 1) / 2);
    for r in 0..n {
        for s in (r + 1)..n {
            b_rows.push(grad_b[r][s] + bv[r] * db[s] - grad_b[s][r] - bv[s] * db[r]);
        }
    }
    let (av, da) = (a.value[0], a.ds[0]);
    let a_rows = (0..n).map(|s| grad_a[s][0] + bv[s] * da - av * db[s]).collect();
    Ok(ReducedResidual { b_rows, a_rows })
}

/// Reduced residuals for user-declared `a(x, v)` and `b_k(x, v)`.
pub fn reduced_residuals_for(
    a: &SphericalScalar,
    b: &[SphericalScalar],
    metric: &Metric,
    x: &[f64],
    v: &[f64],
    v_min: f64,
) -> Result<ReducedResidual> {
    let local = metric.local(x)?;
    let s = local.speed(v);
    let pa = spherical_partials(|x, s| Ok(vec![a.eval(x, s)?]), x, s)?;
    let pb = spherical_partials(|x, s| b.iter().map(|c| c.eval(x, s)).collect(), x, s)?;
    reduced_residuals(&pa, &pb, &local, v, v_min)
}

/// Reduced residuals of the `a`, `b` induced by a generating function.
pub fn generated_reduced_residuals(
    gen: &GeneratingFunction,
    metric: &Metric,
    x: &[f64],
    v: &[f64],
    v_min: f64,
) -> Result<ReducedResidual> {
    let local = metric.local(x)?;
    let s = local.speed(v);
    let ab = |x: &[Dual64], s: Dual64| -> Result<(Dual64, Vec<Dual64>)> { gen.ab(x, s) };
    let pa = spherical_partials(|x, s| Ok(vec![ab(x, s)?.0]), x, s)?;
    let pb = spherical_partials(|x, s| Ok(ab(x, s)?.1), x, s)?;
    reduced_residuals(&pa, &pb, &local, v, v_min)
}

/// Residual rows at one sample, in [`ROW_NAMES`] order (reduced rows only
/// for generated fields).
#[derive(Clone, Debug, PartialEq)]
pub struct SampleResidual {
    pub x: Vec<f64>,
    pub v: Vec<f64>,
    pub rows: Vec<(&'static str, Vec<f64>)>,
}

impl SampleResidual {
    pub fn norm(&self, row: usize) -> f64 {
        self.rows[row].1.iter().fold(0.0, |m, c| m.max(c.abs()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RowSummary {
    pub name: &'static str,
    pub max: f64,
    pub mean: f64,
    pub argmax: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormalityReport {
    pub samples: Vec<SampleResidual>,
    pub summary: Vec<RowSummary>,
    pub tolerance: f64,
    pub differentiation: Differentiation,
    pub pass: bool,
}

impl NormalityReport {
    pub fn max_norm(&self) -> f64 {
        self.summary.iter().fold(0.0, |m, r| m.max(r.max))
    }

    pub fn max_of(&self, name: &str) -> Option<f64> {
        self.summary.iter().find(|r| r.name == name).map(|r| r.max)
    }

    pub fn failing_rows(&self) -> Vec<&'static str> {
        self.summary.iter().filter(|r| !(r.max <= self.tolerance)).map(|r| r.name).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResidualOptions {
    /// Overrides the differentiation-dependent default.
    pub tolerance: Option<f64>,
    pub v_min: f64,
    pub richardson: bool,
}

impl Default for ResidualOptions {
    fn default() -> Self {
        ResidualOptions { tolerance: None, v_min: crate::geometry::DEFAULT_V_MIN, richardson: true }
    }
}

/// All residuals at one point.
pub fn sample_residual(
    field: &ForceField,
    metric: &Metric,
    x: &[f64],
    v: &[f64],
    opts: &ResidualOptions,
) -> Result<SampleResidual> {
    let local = metric.local(x)?;
    let partials = field.partials(metric, x, v, opts.v_min, opts.richardson)?;
    let q = Pointwise::new(&local, v, &partials, opts.v_min)?;
    let weak = weak_from(&q);
    let add = additional_from(&local, &q);
    let mut rows =
        vec![(ROW_NAMES[0], weak.row1), (ROW_NAMES[1], weak.row2), (ROW_NAMES[2], add.row1), (ROW_NAMES[3], add.row2)];
    if let Some(gen) = field.generating_function() {
        let red = generated_reduced_residuals(gen, metric, x, v, opts.v_min)?;
        rows.push((ROW_NAMES[4], red.b_rows));
        rows.push((ROW_NAMES[5], red.a_rows));
    }
    Ok(SampleResidual { x: x.to_vec(), v: v.to_vec(), rows })
}

/// Residuals over sample points, with max/mean summaries per row.
pub fn normality_report(
    field: &ForceField,
    metric: &Metric,
    points: &[(Vec<f64>, Vec<f64>)],
    opts: &ResidualOptions,
) -> Result<NormalityReport> {
    let samples = points.iter().map(|(x, v)| sample_residual(field, metric, x, v, opts)).collect::<Result<Vec<_>>>()?;
    Ok(summarize(samples, field.differentiation(), opts.tolerance))
}

/// Aggregate independently computed samples.
pub fn summarize(
    samples: Vec<SampleResidual>,
    differentiation: Differentiation,
    tolerance: Option<f64>,
) -> NormalityReport {
    let tolerance = tolerance.unwrap_or(match differentiation {
        Differentiation::Analytic => TOL_ANALYTIC,
        Differentiation::FiniteDifference => TOL_FINITE_DIFFERENCE,
    });
    let mut summary = Vec::new();
    if let Some(first) = samples.first() {
        for (r, (name, _)) in first.rows.iter().enumerate() {
            let mut max = 0.0;
            let mut argmax = 0;
            let mut sum = 0.0;
            for (i, s) in samples.iter().enumerate() {
                let v = s.norm(r);
                sum += v;
                if v > max || v.is_nan() {
                    max = v;
                    argmax = i;
                }
            }
            summary.push(RowSummary { name, max, mean: sum / samples.len() as f64, argmax });
        }
    }
    let pass = summary.iter().all(|r| r.max <= tolerance);
    NormalityReport { samples, summary, tolerance, differentiation, pass }
}
