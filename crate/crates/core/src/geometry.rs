//! Riemannian metrics, connection coefficients and the two covariant
//! differentiations of extended tensor fields.
//!
//! Points of the tangent bundle are passed as a pair of slices `(x, v)`.
//! Covectors are stored with lower indices; [`Local::raise`] and
//! [`Local::lower`] convert with the exact metric at the point.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::expr::{BinaryOp, Expr, Node, UnaryOp, VarSet};
use crate::linalg::Mat;
use crate::scalar::{Dual, Dual64, Scalar};
use crate::{Error, Result};

/// Default speed floor below which `N` and `P` are undefined.
pub const DEFAULT_V_MIN: f64 = 1e-8;

/// `x1..xn`.
pub fn coordinate_vars(n: usize) -> VarSet {
    VarSet::coords_and(n, &[])
}

/// `x1..xn, v` for fields depending on the velocity only through its modulus.
pub fn spherical_vars(n: usize) -> VarSet {
    VarSet::coords_and(n, &["v"])
}

/// `x1..xn, v1..vn, v` for general extended scalars.
pub fn extended_vars(n: usize) -> VarSet {
    let mut names: Vec<alloc::string::String> = coordinate_vars(n).names().to_vec();
    names.extend((1..=n).map(|i| format!("v{i}")));
    names.push("v".into());
    VarSet::new(names)
}

#[derive(Clone, Debug, PartialEq)]
pub enum MetricKind {
    Flat,
    /// `g = e^{-2f} δ`.
    Conformal {
        f: Expr,
    },
    General,
}

/// Analytic metric `g_ij(x)` stored as its upper triangle.
#[derive(Clone, Debug, PartialEq)]
pub struct Metric {
    n: usize,
    kind: MetricKind,
    upper: Vec<Expr>,
}

fn upper_index(n: usize, i: usize, j: usize) -> usize {
    let (i, j) = if i <= j { (i, j) } else { (j, i) };
    // rows before `i` hold n, n-1, .., n-i+1 entries
    i * (2 * n - i + 1) / 2 + (j - i)
}

impl Metric {
    pub fn flat(n: usize) -> Self {
        let vars = coordinate_vars(n);
        let mut upper = Vec::with_capacity(n * (n + 1) / 2);
        for i in 0..n {
            for j in i..n {
                upper.push(Expr::constant(if i == j { 1.0 } else { 0.0 }, &vars));
            }
        }
        Metric { n, kind: MetricKind::Flat, upper }
    }

    /// `e^{-2f} δ_ij` for a factor field `f(x)`.
    pub fn conformal(n: usize, f: &Expr) -> Result<Self> {
        let vars = coordinate_vars(n);
        let f = f.rebind(&vars)?;
        let factor = Node::Unary(
            UnaryOp::Exp,
            Box::new(Node::Binary(BinaryOp::Mul, Box::new(Node::Const(-2.0)), Box::new(f.root().clone()))),
        );
        let mut upper = Vec::with_capacity(n * (n + 1) / 2);
        for i in 0..n {
            for j in i..n {
                upper.push(if i == j {
                    Expr::from_node(factor.clone(), vars.clone())
                } else {
                    Expr::constant(0.0, &vars)
                });
            }
        }
        Ok(Metric { n, kind: MetricKind::Conformal { f }, upper })
    }

    /// Upper triangle in row order: `g11, g12, .., g1n, g22, ..`.
    pub fn general(n: usize, upper: Vec<Expr>) -> Result<Self> {
        if upper.len() != n * (n + 1) / 2 {
            return Err(Error::Shape(format!(
                "metric of dimension {n} needs {} entries, got {}",
                n * (n + 1) / 2,
                upper.len()
            )));
        }
        let vars = coordinate_vars(n);
        let upper = upper.iter().map(|e| e.rebind(&vars)).collect::<core::result::Result<_, _>>()?;
        Ok(Metric { n, kind: MetricKind::General, upper })
    }

    pub fn diagonal(diag: Vec<Expr>) -> Result<Self> {
        let n = diag.len();
        let vars = coordinate_vars(n);
        let mut upper = Vec::with_capacity(n * (n + 1) / 2);
        for i in 0..n {
            for j in i..n {
                upper.push(if i == j { diag[i].rebind(&vars)? } else { Expr::constant(0.0, &vars) });
            }
        }
        Ok(Metric { n, kind: MetricKind::General, upper })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn kind(&self) -> &MetricKind {
        &self.kind
    }

    pub fn entry(&self, i: usize, j: usize) -> &Expr {
        &self.upper[upper_index(self.n, i, j)]
    }

    fn check_dim<S>(&self, x: &[S]) -> Result<()> {
        if x.len() != self.n {
            return Err(Error::Shape(format!("expected {} coordinates, got {}", self.n, x.len())));
        }
        Ok(())
    }

    fn assemble<S: Scalar>(&self, values: &[S]) -> Mat<S> {
        Mat::from_fn(self.n, |i, j| values[upper_index(self.n, i, j)])
    }

    fn check_definite<S: Scalar>(g: &Mat<S>, x: &[S]) -> Result<()> {
        if g.map_re().cholesky().is_none() {
            return Err(Error::MetricDegenerate { x: x.iter().map(|c| c.re()).collect() });
        }
        Ok(())
    }

    /// `g_ij(x)`, checked positive definite.
    pub fn g<S: Scalar>(&self, x: &[S]) -> Result<Mat<S>> {
        self.check_dim(x)?;
        if self.kind == MetricKind::Flat {
            return Ok(Mat::identity(self.n));
        }
        let values = self.upper.iter().map(|e| e.eval(x)).collect::<core::result::Result<Vec<_>, _>>()?;
        let g = self.assemble(&values);
        Self::check_definite(&g, x)?;
        Ok(g)
    }

    /// Metric, inverse metric and connection coefficients at `x`.
    pub fn local<S: Scalar>(&self, x: &[S]) -> Result<Local<S>> {
        self.check_dim(x)?;
        let n = self.n;
        if self.kind == MetricKind::Flat {
            return Ok(Local { g: Mat::identity(n), g_inv: Mat::identity(n), gamma: Christoffel::zeros(n) });
        }
        // dg[m][idx] = ∂g/∂x^m for every stored entry
        let mut values = Vec::new();
        let mut dg = Vec::with_capacity(n);
        for m in 0..n {
            let lifted: Vec<Dual<S>> =
                x.iter().enumerate().map(|(k, &c)| if k == m { Dual::var(c) } else { Dual::constant(c) }).collect();
            let mut row = Vec::with_capacity(self.upper.len());
            let mut vals = Vec::with_capacity(self.upper.len());
            for e in &self.upper {
                let d = e.eval(&lifted)?;
                vals.push(d.re);
                row.push(d.eps);
            }
            if m == 0 {
                values = vals;
            }
            dg.push(row);
        }
        let g = self.assemble(&values);
        Self::check_definite(&g, x)?;
        let g_inv = g.spd_inverse().ok_or_else(|| Error::MetricDegenerate { x: x.iter().map(|c| c.re()).collect() })?;
        let d = |m: usize, i: usize, j: usize| dg[m][upper_index(n, i, j)];
        let mut lowered = vec![S::zero(); n * n * n];
        for q in 0..n {
            for i in 0..n {
                for j in i..n {
                    let c = (d(j, q, i) + d(i, q, j) - d(q, i, j)).scale(0.5);
                    lowered[(q * n + i) * n + j] = c;
                    lowered[(q * n + j) * n + i] = c;
                }
            }
        }
        let mut gamma = Christoffel::zeros(n);
        for k in 0..n {
            for i in 0..n {
                for j in i..n {
                    let mut acc = S::zero();
                    for q in 0..n {
                        acc += g_inv[(k, q)] * lowered[(q * n + i) * n + j];
                    }
                    gamma.set(k, i, j, acc);
                }
            }
        }
        Ok(Local { g, g_inv, gamma })
    }

    pub fn christoffel<S: Scalar>(&self, x: &[S]) -> Result<Christoffel<S>> {
        Ok(self.local(x)?.gamma)
    }

    /// `|v| = sqrt(g_ij v^i v^j)`.
    pub fn speed<S: Scalar>(&self, x: &[S], v: &[S]) -> Result<S> {
        self.check_dim(v)?;
        Ok(quadratic_speed(&self.g(x)?, v))
    }

    pub fn unit_direction(&self, x: &[f64], v: &[f64], v_min: f64) -> Result<Vec<f64>> {
        self.check_dim(v)?;
        Ok(Fiber::new(&self.g(x)?, v, v_min)?.up)
    }

    /// Mixed projector `P^i_j`, stored as `P[(i, j)]`.
    pub fn projector(&self, x: &[f64], v: &[f64], v_min: f64) -> Result<Mat<f64>> {
        self.check_dim(v)?;
        Ok(Fiber::new(&self.g(x)?, v, v_min)?.projector())
    }
}

fn quadratic_speed<S: Scalar>(g: &Mat<S>, v: &[S]) -> S {
    let q = g.bilinear(v, v);
    if q.re() <= 0.0 {
        S::zero()
    } else {
        q.sqrt()
    }
}

/// `Γ^k_ij`, symmetric in the lower pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Christoffel<S> {
    n: usize,
    data: Vec<S>,
}

impl<S: Scalar> Christoffel<S> {
    pub fn zeros(n: usize) -> Self {
        Christoffel { n, data: vec![S::zero(); n * n * n] }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, k: usize, i: usize, j: usize) -> S {
        self.data[(k * self.n + i) * self.n + j]
    }

    pub fn set(&mut self, k: usize, i: usize, j: usize, value: S) {
        let n = self.n;
        self.data[(k * n + i) * n + j] = value;
        self.data[(k * n + j) * n + i] = value;
    }

    /// `Σ_ij Γ^k_ij a^i b^j`.
    pub fn contract(&self, a: &[S], b: &[S]) -> Vec<S> {
        let n = self.n;
        (0..n)
            .map(|k| {
                let mut acc = S::zero();
                for i in 0..n {
                    for j in 0..n {
                        acc += self.get(k, i, j) * a[i] * b[j];
                    }
                }
                acc
            })
            .collect()
    }

    pub fn map_re(&self) -> Christoffel<f64> {
        Christoffel { n: self.n, data: self.data.iter().map(|c| c.re()).collect() }
    }
}

/// Pointwise metric data.
#[derive(Clone, Debug, PartialEq)]
pub struct Local<S> {
    pub g: Mat<S>,
    pub g_inv: Mat<S>,
    pub gamma: Christoffel<S>,
}

impl<S: Scalar> Local<S> {
    pub fn dim(&self) -> usize {
        self.g.dim()
    }

    pub fn lower(&self, v: &[S]) -> Vec<S> {
        self.g.mul_vec(v)
    }

    pub fn raise(&self, w: &[S]) -> Vec<S> {
        self.g_inv.mul_vec(w)
    }

    pub fn speed(&self, v: &[S]) -> S {
        quadratic_speed(&self.g, v)
    }

    pub fn inner(&self, a: &[S], b: &[S]) -> S {
        self.g.bilinear(a, b)
    }

    pub fn fiber(&self, v: &[S], v_min: f64) -> Result<Fiber<S>> {
        Fiber::new(&self.g, v, v_min)
    }
}

/// Speed and unit direction at a point of the tangent bundle.
#[derive(Clone, Debug, PartialEq)]
pub struct Fiber<S> {
    pub speed: S,
    /// `N^i`.
    pub up: Vec<S>,
    /// `N_i`.
    pub low: Vec<S>,
}

impl<S: Scalar> Fiber<S> {
    pub fn new(g: &Mat<S>, v: &[S], v_min: f64) -> Result<Self> {
        let speed = quadratic_speed(g, v);
        if !(speed.re() > v_min) {
            return Err(Error::SpeedFloor { speed: speed.re(), floor: v_min });
        }
        let up: Vec<S> = v.iter().map(|&c| c / speed).collect();
        let low = g.mul_vec(&up);
        Ok(Fiber { speed, up, low })
    }

    pub fn dim(&self) -> usize {
        self.up.len()
    }

    /// `P^i_j = δ^i_j - N^i N_j`.
    pub fn projector(&self) -> Mat<S> {
        Mat::from_fn(self.dim(), |i, j| {
            let d = if i == j { S::one() } else { S::zero() };
            d - self.up[i] * self.low[j]
        })
    }
}

/// Value and first partial derivatives of an extended field in `(x, v)`.
/// `dx[m][c]` is `∂X_c/∂x^m`, `dv[m][c]` is `∂X_c/∂v^m`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtendedPartials {
    pub value: Vec<f64>,
    pub dx: Vec<Vec<f64>>,
    pub dv: Vec<Vec<f64>>,
}

/// Value and derivatives of a field declared over `(x, |v|)`; `dx` is taken
/// at fixed `|v|`.
#[derive(Clone, Debug, PartialEq)]
pub struct SphericalPartials {
    pub value: Vec<f64>,
    pub dx: Vec<Vec<f64>>,
    pub ds: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum FieldPartials {
    Extended(ExtendedPartials),
    Spherical(SphericalPartials),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rank {
    Scalar,
    Covector,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradientMode {
    /// Partial derivatives in `(x, v)` with the velocity correction.
    Full,
    /// Reduced form for fiberwise spherically symmetric fields.
    Spherical,
}

/// Exact partials of a field written over dual numbers.
pub fn extended_partials<F>(f: F, x: &[f64], v: &[f64]) -> Result<ExtendedPartials>
where
    F: Fn(&[Dual64], &[Dual64]) -> Result<Vec<Dual64>>,
{
    let n = x.len();
    let xc = Dual::seeded(x, None);
    let vc = Dual::seeded(v, None);
    let mut dx = Vec::with_capacity(n);
    let mut value = Vec::new();
    for m in 0..n {
        let out = f(&Dual::seeded(x, Some(m)), &vc)?;
        if m == 0 {
            value = out.iter().map(|d| d.re).collect();
        }
        dx.push(out.iter().map(|d| d.eps).collect());
    }
    let mut dv = Vec::with_capacity(n);
    for m in 0..v.len() {
        let out = f(&xc, &Dual::seeded(v, Some(m)))?;
        if value.is_empty() {
            value = out.iter().map(|d| d.re).collect();
        }
        dv.push(out.iter().map(|d| d.eps).collect());
    }
    Ok(ExtendedPartials { value, dx, dv })
}

/// Exact partials of a field written over dual numbers in `(x, |v|)`.
pub fn spherical_partials<F>(f: F, x: &[f64], s: f64) -> Result<SphericalPartials>
where
    F: Fn(&[Dual64], Dual64) -> Result<Vec<Dual64>>,
{
    let mut dx = Vec::with_capacity(x.len());
    for m in 0..x.len() {
        let out = f(&Dual::seeded(x, Some(m)), Dual::constant(s))?;
        dx.push(out.iter().map(|d| d.eps).collect());
    }
    let out = f(&Dual::seeded(x, None), Dual::var(s))?;
    Ok(SphericalPartials { value: out.iter().map(|d| d.re).collect(), dx, ds: out.iter().map(|d| d.eps).collect() })
}

/// Central-difference step for coordinate value `c`.
pub fn fd_step(c: f64) -> f64 {
    c.abs().max(1.0) * libm::cbrt(f64::EPSILON)
}

fn central<F>(f: &F, at: f64, h: f64, richardson: bool) -> Result<Vec<f64>>
where
    F: Fn(f64) -> Result<Vec<f64>>,
{
    let diff = |h: f64| -> Result<Vec<f64>> {
        let p = f(at + h)?;
        let m = f(at - h)?;
        Ok(p.iter().zip(&m).map(|(a, b)| (a - b) / (2.0 * h)).collect())
    };
    let coarse = diff(h)?;
    if !richardson {
        return Ok(coarse);
    }
    let fine = diff(0.5 * h)?;
    Ok(fine.iter().zip(&coarse).map(|(f, c)| (4.0 * f - c) / 3.0).collect())
}

/// Partials of an opaque field by central differences.
pub fn extended_partials_fd<F>(f: F, x: &[f64], v: &[f64], richardson: bool) -> Result<ExtendedPartials>
where
    F: Fn(&[f64], &[f64]) -> Result<Vec<f64>>,
{
    let value = f(x, v)?;
    let mut dx = Vec::with_capacity(x.len());
    for m in 0..x.len() {
        let g = |c: f64| {
            let mut xs = x.to_vec();
            xs[m] = c;
            f(&xs, v)
        };
        dx.push(central(&g, x[m], fd_step(x[m]), richardson)?);
    }
    let mut dv = Vec::with_capacity(v.len());
    for m in 0..v.len() {
        let g = |c: f64| {
            let mut vs = v.to_vec();
            vs[m] = c;
            f(x, &vs)
        };
        dv.push(central(&g, v[m], fd_step(v[m]), richardson)?);
    }
    Ok(ExtendedPartials { value, dx, dv })
}

impl SphericalPartials {
    /// Re-express in `(x, v)` by the chain rule through `|v|`.
    pub fn to_extended(&self, local: &Local<f64>, v: &[f64], v_min: f64) -> Result<ExtendedPartials> {
        let n = local.dim();
        let fib = local.fiber(v, v_min)?;
        // ∂|v|/∂x^m = N_c Γ^c_mb v^b, ∂|v|/∂v^b = N_b
        let ds_dx: Vec<f64> = (0..n)
            .map(|m| {
                let mut acc = 0.0;
                for c in 0..n {
                    for b in 0..n {
                        acc += fib.low[c] * local.gamma.get(c, m, b) * v[b];
                    }
                }
                acc
            })
            .collect();
        let dx = (0..n).map(|m| self.dx[m].iter().zip(&self.ds).map(|(d, s)| d + s * ds_dx[m]).collect()).collect();
        let dv = (0..n).map(|m| self.ds.iter().map(|s| s * fib.low[m]).collect()).collect();
        Ok(ExtendedPartials { value: self.value.clone(), dx, dv })
    }
}

/// `∇̃_m X_c`, returned as `[m][c]`.
pub fn velocity_gradient(field: &FieldPartials, local: &Local<f64>, v: &[f64], v_min: f64) -> Result<Vec<Vec<f64>>> {
    match field {
        FieldPartials::Extended(p) => Ok(p.dv.clone()),
        FieldPartials::Spherical(p) => Ok(p.to_extended(local, v, v_min)?.dv),
    }
}

/// `∇_m X_c`, returned as `[m][c]`.
pub fn spatial_gradient(
    field: &FieldPartials,
    rank: Rank,
    local: &Local<f64>,
    v: &[f64],
    mode: GradientMode,
    v_min: f64,
) -> Result<Vec<Vec<f64>>> {
    let n = local.dim();
    let gamma = &local.gamma;
    let (value, mut grad) = match (field, mode) {
        (FieldPartials::Extended(_), GradientMode::Spherical) => return Err(Error::ModeMismatch),
        (FieldPartials::Spherical(p), GradientMode::Spherical) => (p.value.clone(), p.dx.clone()),
        (FieldPartials::Extended(_), GradientMode::Full) | (FieldPartials::Spherical(_), GradientMode::Full) => {
            let owned;
            let p = match field {
                FieldPartials::Extended(p) => p,
                FieldPartials::Spherical(s) => {
                    owned = s.to_extended(local, v, v_min)?;
                    &owned
                }
            };
            let mut grad = p.dx.clone();
            for (m, row) in grad.iter_mut().enumerate() {
                for (c, out) in row.iter_mut().enumerate() {
                    let mut corr = 0.0;
                    for a in 0..n {
                        for b in 0..n {
                            corr += v[a] * gamma.get(b, m, a) * p.dv[b][c];
                        }
                    }
                    *out -= corr;
                }
            }
            (p.value.clone(), grad)
        }
    };
    if rank == Rank::Covector {
        if value.len() != n {
            return Err(Error::Shape(format!("covector field has {} components, expected {n}", value.len())));
        }
        for (m, row) in grad.iter_mut().enumerate() {
            for (j, out) in row.iter_mut().enumerate() {
                for b in 0..n {
                    *out -= gamma.get(b, m, j) * value[b];
                }
            }
        }
    }
    Ok(grad)
}

/// Extended scalar over `x1..xn, v1..vn, v`, with `v` bound to the speed.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtendedScalar {
    n: usize,
    expr: Expr,
}

impl ExtendedScalar {
    pub fn parse(n: usize, src: &str) -> Result<Self> {
        Ok(ExtendedScalar { n, expr: Expr::parse(src, &extended_vars(n))? })
    }

    pub fn new(n: usize, expr: &Expr) -> Result<Self> {
        Ok(ExtendedScalar { n, expr: expr.rebind(&extended_vars(n))? })
    }

    pub fn expr(&self) -> &Expr {
        &self.expr
    }

    pub fn eval<S: Scalar>(&self, g: &Mat<S>, x: &[S], v: &[S]) -> Result<S> {
        let mut b = Vec::with_capacity(2 * self.n + 1);
        b.extend_from_slice(x);
        b.extend_from_slice(v);
        b.push(quadratic_speed(g, v));
        Ok(self.expr.eval(&b)?)
    }
}

/// Scalar over `x1..xn, v` (fiberwise spherically symmetric).
#[derive(Clone, Debug, PartialEq)]
pub struct SphericalScalar {
    n: usize,
    expr: Expr,
}

impl SphericalScalar {
    pub fn parse(n: usize, src: &str) -> Result<Self> {
        Ok(SphericalScalar { n, expr: Expr::parse(src, &spherical_vars(n))? })
    }

    pub fn new(n: usize, expr: &Expr) -> Result<Self> {
        Ok(SphericalScalar { n, expr: expr.rebind(&spherical_vars(n))? })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn expr(&self) -> &Expr {
        &self.expr
    }

    pub fn eval<S: Scalar>(&self, x: &[S], s: S) -> Result<S> {
        let mut b = Vec::with_capacity(self.n + 1);
        b.extend_from_slice(x);
        b.push(s);
        Ok(self.expr.eval(&b)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diag(n: usize, entries: &[&str]) -> Metric {
        let vars = coordinate_vars(n);
        Metric::diagonal(entries.iter().map(|s| Expr::parse(s, &vars).unwrap()).collect()).unwrap()
    }

    #[test]
    fn packed_indices_cover_the_triangle() {
        for n in 1..6 {
            let mut seen = vec![false; n * (n + 1) / 2];
            for i in 0..n {
                for j in i..n {
                    let k = upper_index(n, i, j);
                    assert!(!seen[k]);
                    seen[k] = true;
                    assert_eq!(k, upper_index(n, j, i));
                }
            }
            assert!(seen.iter().all(|s| *s));
        }
    }

    #[test]
    fn flat_connection_vanishes() {
        let g = Metric::flat(3);
        let gamma = g.christoffel(&[0.3, -1.0, 2.0]).unwrap();
        assert!(gamma.data.iter().all(|c| *c == 0.0));
    }

    #[test]
    fn polar_connection() {
        let g = diag(2, &["1", "x1^2"]);
        let gamma = g.christoffel(&[2.0, 0.7]).unwrap();
        assert!((gamma.get(0, 1, 1) + 2.0).abs() < 1e-15);
        assert!((gamma.get(1, 0, 1) - 0.5).abs() < 1e-15);
        assert!((gamma.get(1, 1, 0) - 0.5).abs() < 1e-15);
        for (k, i, j) in [(0, 0, 0), (0, 0, 1), (1, 0, 0), (1, 1, 1)] {
            assert_eq!(gamma.get(k, i, j), 0.0);
        }
    }

    #[test]
    fn conformal_connection_components() {
        let c = 0.3;
        let f = Expr::parse("0.3*x1", &coordinate_vars(3)).unwrap();
        let g = Metric::conformal(3, &f).unwrap();
        let gamma = g.christoffel(&[0.4, 0.1, -0.2]).unwrap();
        assert!((gamma.get(0, 0, 0) + c).abs() < 1e-14);
        assert!((gamma.get(0, 1, 1) - c).abs() < 1e-14);
        assert!((gamma.get(1, 0, 1) + c).abs() < 1e-14);
    }

    #[test]
    fn speed_examples() {
        let flat = Metric::flat(3);
        assert_eq!(flat.speed(&[0.0; 3], &[3.0, 4.0, 0.0]).unwrap(), 5.0);
        let g = diag(3, &["1", "4", "1"]);
        assert!((g.speed(&[0.0; 3], &[1.0, 1.0, 0.0]).unwrap() - 5f64.sqrt()).abs() < 1e-15);
        assert_eq!(g.speed(&[0.0; 3], &[0.0; 3]).unwrap(), 0.0);
    }

    #[test]
    fn unit_direction_examples() {
        let flat = Metric::flat(3);
        assert_eq!(flat.unit_direction(&[0.0; 3], &[0.0, 0.0, 2.0], DEFAULT_V_MIN).unwrap(), vec![0.0, 0.0, 1.0]);
        let n = flat.unit_direction(&[0.0; 3], &[3.0, 4.0, 0.0], DEFAULT_V_MIN).unwrap();
        assert!((n[0] - 0.6).abs() < 1e-15 && (n[1] - 0.8).abs() < 1e-15 && n[2] == 0.0);
        let e = flat.unit_direction(&[0.0; 3], &[1e-9, 0.0, 0.0], DEFAULT_V_MIN).unwrap_err();
        assert!(matches!(e, Error::SpeedFloor { .. }));
    }

    #[test]
    fn axis_projector() {
        let p = Metric::flat(3).projector(&[0.0; 3], &[0.0, 0.0, 1.0], DEFAULT_V_MIN).unwrap();
        assert_eq!(p, Mat::from_fn(3, |i, j| if i == j && i < 2 { 1.0 } else { 0.0 }));
    }

    #[test]
    fn degenerate_metric_is_an_error() {
        let g = diag(3, &["1", "x1", "1"]);
        assert!(matches!(g.g(&[-1.0, 0.0, 0.0]), Err(Error::MetricDegenerate { .. })));
        assert!(g.g(&[1.0, 0.0, 0.0]).is_ok());
    }

    #[test]
    fn velocity_gradient_of_speed_is_unit_direction() {
        let metric = diag(3, &["1", "2", "1 + x1^2"]);
        let a = ExtendedScalar::parse(3, "v").unwrap();
        let (x, v) = ([0.5, 0.0, 0.1], [0.3, -0.4, 1.1]);
        let field = extended_partials(|x, v| Ok(vec![a.eval(&metric.g(x)?, x, v)?]), &x, &v).unwrap();
        let local = metric.local(&x).unwrap();
        let fib = local.fiber(&v, DEFAULT_V_MIN).unwrap();
        let grad = velocity_gradient(&FieldPartials::Extended(field.clone()), &local, &v, DEFAULT_V_MIN).unwrap();
        for m in 0..3 {
            assert!((grad[m][0] - fib.low[m]).abs() < 1e-14);
        }
        // metricity: the full spatial gradient of |v| vanishes
        let sp = spatial_gradient(
            &FieldPartials::Extended(field),
            Rank::Scalar,
            &local,
            &v,
            GradientMode::Full,
            DEFAULT_V_MIN,
        )
        .unwrap();
        for row in sp {
            assert!(row[0].abs() < 1e-14);
        }
    }

    #[test]
    fn velocity_gradient_of_v_minus_x3() {
        let metric = Metric::flat(3);
        let w = SphericalScalar::parse(3, "v - x3").unwrap();
        let (x, v) = ([0.1, 0.2, 0.3], [1.0, 2.0, 2.0]);
        let sp = spherical_partials(|x, s| Ok(vec![w.eval(x, s)?]), &x, 3.0).unwrap();
        let local = metric.local(&x).unwrap();
        let grad = velocity_gradient(&FieldPartials::Spherical(sp), &local, &v, DEFAULT_V_MIN).unwrap();
        let fib = local.fiber(&v, DEFAULT_V_MIN).unwrap();
        let mut w_v = 0.0;
        for m in 0..3 {
            assert!((grad[m][0] - fib.low[m]).abs() < 1e-15);
            w_v += fib.up[m] * grad[m][0];
        }
        assert!((w_v - 1.0).abs() < 1e-15);
    }

    #[test]
    fn spherical_gradient_holds_speed_fixed() {
        let metric = Metric::flat(3);
        let w = SphericalScalar::parse(3, "v*exp(-0.1*x1)").unwrap();
        let (x, s) = ([0.7, 0.0, 0.0], 1.8);
        let sp = spherical_partials(|x, s| Ok(vec![w.eval(x, s)?]), &x, s).unwrap();
        let local = metric.local(&x).unwrap();
        let v = [0.0, s, 0.0];
        let grad = spatial_gradient(
            &FieldPartials::Spherical(sp),
            Rank::Scalar,
            &local,
            &v,
            GradientMode::Spherical,
            DEFAULT_V_MIN,
        )
        .unwrap();
        let h = 1e-5;
        let fd = (w.eval(&[x[0] + h, 0.0, 0.0], s).unwrap() - w.eval(&[x[0] - h, 0.0, 0.0], s).unwrap()) / (2.0 * h);
        let exact = -0.1 * s * libm::exp(-0.1 * x[0]);
        assert!((grad[0][0] - exact).abs() < 1e-15);
        assert!((fd - exact).abs() < 1e-9);
        assert!(grad[1][0] == 0.0 && grad[2][0] == 0.0);
    }

    #[test]
    fn spherical_mode_rejects_extended_fields() {
        let local = Metric::flat(3).local(&[0.0; 3]).unwrap();
        let p = ExtendedPartials { value: vec![0.0], dx: vec![vec![0.0]; 3], dv: vec![vec![0.0]; 3] };
        let e = spatial_gradient(
            &FieldPartials::Extended(p),
            Rank::Scalar,
            &local,
            &[1.0, 0.0, 0.0],
            GradientMode::Spherical,
            DEFAULT_V_MIN,
        );
        assert_eq!(e, Err(Error::ModeMismatch));
    }

    #[test]
    fn finite_difference_partials_match_exact() {
        let f = |x: &[f64], v: &[f64]| Ok(vec![libm::sin(x[0]) * v[1] * v[1], x[1] * v[0]]);
        let p = extended_partials_fd(f, &[0.3, 0.5], &[1.0, 2.0], true).unwrap();
        assert!((p.dx[0][0] - libm::cos(0.3) * 4.0).abs() < 1e-9);
        assert!((p.dv[1][0] - 4.0 * libm::sin(0.3)).abs() < 1e-9);
        assert!((p.dx[1][1] - 1.0).abs() < 1e-9);
    }
}
