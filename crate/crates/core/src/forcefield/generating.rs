//! Generating functions `W(x, v)` / `V(x, w)` and the scalar `h(w)`.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;

use crate::expr::{Expr, Node, VarSet};
use crate::geometry::{spherical_vars, SphericalScalar};
use crate::root::{self, RootOptions};
use crate::scalar::{Dual, Dual64, Scalar};
use crate::{Error, Result};

/// Default search interval for `w` when inverting a V-form.
pub const DEFAULT_W_BRACKET: (f64, f64) = (-1e3, 1e3);
/// Default search interval for the speed when inverting a W-form.
pub const DEFAULT_V_BRACKET: (f64, f64) = (1e-8, 1e3);
/// Refuse to construct forces when `|dW/dv|` falls below this.
pub const W_V_THRESHOLD: f64 = 1e-10;

const LIFT_STEPS: usize = 2;

/// Variable set of one-variable functions of `w`.
pub fn level_vars() -> VarSet {
    VarSet::new(["w"])
}

/// `x1..xn, w`.
pub fn inverse_vars(n: usize) -> VarSet {
    VarSet::coords_and(n, &["w"])
}

/// Lift a root `r0` of `g` (solved in f64) to `S` by Newton steps, so that
/// derivative parts follow the implicit function theorem. `g` returns
/// the value and derivative in the root variable.
fn lift<S, G>(r0: f64, g: G) -> Result<S>
where
    S: Scalar,
    G: Fn(S) -> Result<(S, S)>,
{
    let mut r = S::cst(r0);
    for _ in 0..LIFT_STEPS {
        let (val, der) = g(r)?;
        r -= val / der;
    }
    Ok(r)
}

fn eval_with_dual_last<S: Scalar>(expr: &Expr, head: &[S], last: S) -> Result<(S, S)> {
    let mut b: Vec<Dual<S>> = head.iter().map(|&c| Dual::constant(c)).collect();
    b.push(Dual::var(last));
    let d = expr.eval(&b)?;
    Ok((d.re, d.eps))
}

fn re_all<S: Scalar>(xs: &[S]) -> Vec<f64> {
    xs.iter().map(|c| c.re()).collect()
}

fn solve_monotone<F>(f: F, bracket: (f64, f64), what: &str) -> Result<f64>
where
    F: Fn(f64) -> Result<(f64, f64)>,
{
    let r = root::solve(&f, bracket.0, bracket.1, RootOptions::default())?;
    let sign = |x: f64| -> Result<f64> { Ok(f(x)?.1.signum()) };
    let s = sign(r)?;
    if s == 0.0 || sign(bracket.0)? != s || sign(bracket.1)? != s {
        return Err(Error::NotMonotone(what.to_string()));
    }
    Ok(r)
}

/// A function of one variable `w`.
#[derive(Clone, Debug, PartialEq)]
pub enum OneVar {
    Zero,
    Expr(Expr),
    /// `h(ρ⁻¹(w)) ρ'(ρ⁻¹(w))`, with `ρ⁻¹` found numerically on `range`.
    Gauged {
        h: Box<OneVar>,
        rho: Expr,
        range: (f64, f64),
    },
}

impl OneVar {
    pub fn parse(src: &str) -> Result<Self> {
        let e = Expr::parse(src, &level_vars())?;
        Ok(if e.is_zero() { OneVar::Zero } else { OneVar::Expr(e) })
    }

    pub fn is_zero(&self) -> bool {
        match self {
            OneVar::Zero => true,
            OneVar::Expr(e) => e.is_zero(),
            OneVar::Gauged { h, .. } => h.is_zero(),
        }
    }

    pub fn eval<S: Scalar>(&self, w: S) -> Result<S> {
        match self {
            OneVar::Zero => Ok(S::zero()),
            OneVar::Expr(e) => Ok(e.eval(&[w])?),
            OneVar::Gauged { h, rho, range } => {
                let r = invert_one(rho, w, *range)?;
                let (_, drho) = eval_with_dual_last(rho, &[], r)?;
                Ok(h.eval(r)? * drho)
            }
        }
    }
}

/// Solve `ρ(r) = w` for `r` in `range`.
fn invert_one<S: Scalar>(rho: &Expr, w: S, range: (f64, f64)) -> Result<S> {
    let target = w.re();
    let r0 = solve_monotone(
        |r| {
            let d = rho.eval(&[Dual64::var(r)])?;
            Ok((d.re - target, d.eps))
        },
        range,
        "gauge function",
    )?;
    lift(r0, |r: S| {
        let (val, der) = eval_with_dual_last(rho, &[], r)?;
        Ok((val - w, der))
    })
}

/// How `W` is represented.
#[derive(Clone, Debug, PartialEq)]
pub enum Potential {
    /// `W(x, v)` given explicitly.
    Direct(SphericalScalar),
    /// `V(x, w)` given explicitly; `W` solves `V(x, W) = v` on `w_bracket`.
    Inverse { v_expr: Expr, w_bracket: (f64, f64) },
    /// `ρ(W_inner)`, with `ρ` monotone on `range`.
    Gauged { rho: Expr, range: (f64, f64), inner: Box<Potential> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Form {
    W,
    V,
}

/// A requested inversion between the two forms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Given {
    /// Query `W(x, v)`.
    Speed(f64),
    /// Query `V(x, w)`.
    Level(f64),
}

/// First derivatives of `W` at fixed `|v|`.
#[derive(Clone, Debug, PartialEq)]
pub struct WJet<S> {
    pub value: S,
    pub dx: Vec<S>,
    pub dv: S,
}

/// The pair `(W, h)` parameterizing an admissible force field.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratingFunction {
    n: usize,
    potential: Potential,
    h: OneVar,
    v_bracket: (f64, f64),
}

impl GeneratingFunction {
    pub fn from_w(n: usize, w: &Expr, h: OneVar) -> Result<Self> {
        Ok(GeneratingFunction {
            n,
            potential: Potential::Direct(SphericalScalar::new(n, w)?),
            h,
            v_bracket: DEFAULT_V_BRACKET,
        })
    }

    pub fn parse_w(n: usize, w: &str, h: &str) -> Result<Self> {
        Self::from_w(n, &Expr::parse(w, &spherical_vars(n))?, OneVar::parse(h)?)
    }

    pub fn from_v(n: usize, v: &Expr, h: OneVar, w_bracket: (f64, f64)) -> Result<Self> {
        Ok(GeneratingFunction {
            n,
            potential: Potential::Inverse { v_expr: v.rebind(&inverse_vars(n))?, w_bracket },
            h,
            v_bracket: DEFAULT_V_BRACKET,
        })
    }

    pub fn parse_v(n: usize, v: &str, h: &str, w_bracket: (f64, f64)) -> Result<Self> {
        Self::from_v(n, &Expr::parse(v, &inverse_vars(n))?, OneVar::parse(h)?, w_bracket)
    }

    pub fn with_v_bracket(mut self, bracket: (f64, f64)) -> Self {
        self.v_bracket = bracket;
        self
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn potential(&self) -> &Potential {
        &self.potential
    }

    pub fn h(&self) -> &OneVar {
        &self.h
    }

    pub fn v_bracket(&self) -> (f64, f64) {
        self.v_bracket
    }

    pub fn form(&self) -> Form {
        fn of(p: &Potential) -> Form {
            match p {
                Potential::Direct(_) => Form::W,
                Potential::Inverse { .. } => Form::V,
                Potential::Gauged { inner, .. } => of(inner),
            }
        }
        of(&self.potential)
    }

    fn check_dim<S>(&self, x: &[S]) -> Result<()> {
        if x.len() != self.n {
            return Err(Error::Shape(format!("expected {} coordinates, got {}", self.n, x.len())));
        }
        Ok(())
    }

    /// `W(x, s)`.
    pub fn w<S: Scalar>(&self, x: &[S], s: S) -> Result<S> {
        self.check_dim(x)?;
        eval_potential(&self.potential, x, s, &mut None)
    }

    /// `h(w)`.
    pub fn h_at<S: Scalar>(&self, w: S) -> Result<S> {
        self.h.eval(w)
    }

    /// `W`, its coordinate gradient at fixed speed, and `dW/dv`.
    pub fn jet<S: Scalar>(&self, x: &[S], s: S) -> Result<WJet<S>> {
        self.check_dim(x)?;
        let mut cache = None;
        let sd = Dual::constant(s);
        let mut dx = Vec::with_capacity(self.n);
        for m in 0..self.n {
            let xd: Vec<Dual<S>> =
                x.iter().enumerate().map(|(k, &c)| if k == m { Dual::var(c) } else { Dual::constant(c) }).collect();
            dx.push(eval_potential(&self.potential, &xd, sd, &mut cache)?.eps);
        }
        let xd: Vec<Dual<S>> = x.iter().map(|&c| Dual::constant(c)).collect();
        let d = eval_potential(&self.potential, &xd, Dual::var(s), &mut cache)?;
        Ok(WJet { value: d.re, dx, dv: d.eps })
    }

    /// `a = h(W)/W_v` and `b_k = -(∂W/∂x^k)/W_v` at `(x, s)`.
    pub fn ab<S: Scalar>(&self, x: &[S], s: S) -> Result<(S, Vec<S>)> {
        let jet = self.jet(x, s)?;
        if !(jet.dv.re().abs() >= W_V_THRESHOLD) {
            return Err(Error::DegenerateDerivative { value: jet.dv.re(), threshold: W_V_THRESHOLD });
        }
        let a = self.h.eval(jet.value)? / jet.dv;
        let b = jet.dx.iter().map(|&d| -(d / jet.dv)).collect();
        Ok((a, b))
    }

    /// `V(x, w)`: the speed at which `W(x, ·)` takes the value `w`.
    pub fn big_v<S: Scalar>(&self, x: &[S], w: S) -> Result<S> {
        self.check_dim(x)?;
        potential_inverse(&self.potential, x, w, self.v_bracket)
    }

    /// Convert between the two forms at a point, checking the inversion
    /// identity `V(x, W(x, v)) = v`.
    pub fn dual_convert(&self, x: &[f64], given: Given) -> Result<f64> {
        let (out, back, target) = match given {
            Given::Speed(v) => {
                let w = self.w(x, v)?;
                (w, self.big_v(x, w)?, v)
            }
            Given::Level(w) => {
                let v = self.big_v(x, w)?;
                (v, self.w(x, v)?, w)
            }
        };
        let residual = (back - target).abs();
        if residual > 1e-12 * target.abs().max(1.0) {
            return Err(Error::Precondition(format!("inversion residual {residual:e} exceeds 1e-12 at x = {x:?}")));
        }
        Ok(out)
    }

    /// Reparameterize by a monotone `ρ(w)` checked on `range`. The force
    /// field is unchanged.
    pub fn gauge_transform(&self, rho: &Expr, range: (f64, f64)) -> Result<Self> {
        let rho = rho.rebind(&level_vars())?;
        if matches!(rho.root(), Node::Var(0)) {
            return Ok(self.clone());
        }
        check_monotone(&rho, range)?;
        let potential = match &self.potential {
            Potential::Direct(w) => {
                let composed = rho.compose("w", w.expr())?;
                Potential::Direct(SphericalScalar::new(self.n, &composed)?)
            }
            other => Potential::Gauged { rho: rho.clone(), range, inner: Box::new(other.clone()) },
        };
        let h =
            if self.h.is_zero() { OneVar::Zero } else { OneVar::Gauged { h: Box::new(self.h.clone()), rho, range } };
        Ok(GeneratingFunction { n: self.n, potential, h, v_bracket: self.v_bracket })
    }
}

fn check_monotone(rho: &Expr, range: (f64, f64)) -> Result<()> {
    const SAMPLES: usize = 64;
    let mut sign = 0.0;
    for i in 0..=SAMPLES {
        let w = range.0 + (range.1 - range.0) * i as f64 / SAMPLES as f64;
        let d = rho.eval(&[Dual64::var(w)])?.eps;
        let s = if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            return Err(Error::NotMonotone("gauge function".into()));
        };
        if sign != 0.0 && s != sign {
            return Err(Error::NotMonotone("gauge function".into()));
        }
        sign = s;
    }
    Ok(())
}

fn eval_potential<S: Scalar>(p: &Potential, x: &[S], s: S, cache: &mut Option<f64>) -> Result<S> {
    match p {
        Potential::Direct(w) => w.eval(x, s),
        Potential::Inverse { v_expr, w_bracket } => {
            let w0 = match *cache {
                Some(w0) => w0,
                None => {
                    let xr = re_all(x);
                    let sr = s.re();
                    let w0 = solve_monotone(
                        |w| {
                            let (val, der) = eval_with_dual_last(v_expr, &xr, w)?;
                            Ok((val - sr, der))
                        },
                        *w_bracket,
                        "V(x, w) in w",
                    )?;
                    *cache = Some(w0);
                    w0
                }
            };
            lift(w0, |w: S| {
                let (val, der) = eval_with_dual_last(v_expr, x, w)?;
                Ok((val - s, der))
            })
        }
        Potential::Gauged { rho, inner, .. } => {
            let w = eval_potential(inner, x, s, cache)?;
            Ok(rho.eval(&[w])?)
        }
    }
}

fn potential_inverse<S: Scalar>(p: &Potential, x: &[S], w: S, v_bracket: (f64, f64)) -> Result<S> {
    match p {
        Potential::Inverse { v_expr, .. } => {
            let mut b: Vec<S> = x.to_vec();
            b.push(w);
            Ok(v_expr.eval(&b)?)
        }
        Potential::Gauged { rho, range, inner } => {
            let r = invert_one(rho, w, *range)?;
            potential_inverse(inner, x, r, v_bracket)
        }
        Potential::Direct(wf) => {
            let xr = re_all(x);
            let target = w.re();
            let v0 = solve_monotone(
                |v| {
                    let d = wf.eval(&Dual::seeded(&xr, None), Dual64::var(v))?;
                    Ok((d.re - target, d.eps))
                },
                v_bracket,
                "W(x, v) in v",
            )?;
            lift(v0, |v: S| {
                let d = wf.eval(&x.iter().map(|&c| Dual::constant(c)).collect::<Vec<_>>(), Dual::var(v))?;
                Ok((d.re - w, d.eps))
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn identity_v_form() {
        let g = GeneratingFunction::parse_v(3, "w", "0", DEFAULT_W_BRACKET).unwrap();
        assert!(close(g.dual_convert(&[0.0; 3], Given::Speed(2.0)).unwrap(), 2.0, 1e-13));
    }

    #[test]
    fn exponential_v_form() {
        let g = GeneratingFunction::parse_v(3, "exp(0.1*x1)*w", "0", DEFAULT_W_BRACKET).unwrap();
        let w = g.dual_convert(&[1.0, 0.0, 0.0], Given::Speed(3.0)).unwrap();
        assert!(close(w, 3.0 * libm::exp(-0.1), 1e-13));
    }

    #[test]
    fn affine_v_form() {
        // phi = 0.5 at this point
        let g = GeneratingFunction::parse_v(3, "w + (1 - w)*0.5*x1", "0", DEFAULT_W_BRACKET).unwrap();
        let w = g.dual_convert(&[1.0, 0.0, 0.0], Given::Speed(2.0)).unwrap();
        assert!(close(w, 3.0, 1e-12));
    }

    #[test]
    fn w_form_inverts_to_v() {
        let g = GeneratingFunction::parse_w(3, "v*exp(-0.1*x1)", "0").unwrap();
        let v = g.dual_convert(&[2.0, 0.0, 0.0], Given::Level(1.0)).unwrap();
        assert!(close(v, libm::exp(0.2), 1e-12));
    }

    #[test]
    fn v_form_jet_matches_inverse_identities() {
        let g = GeneratingFunction::parse_v(3, "exp(0.1*x1)*w + 0.2*x2*w^3", "0", (-10.0, 10.0)).unwrap();
        let (x, s) = ([0.4, 0.3, -0.2], 1.3);
        let jet = g.jet(&x, s).unwrap();
        let w = jet.value;
        // V_w and V_i at (x, W)
        let v = Expr::parse("exp(0.1*x1)*w + 0.2*x2*w^3", &inverse_vars(3)).unwrap();
        let mut pt = x.to_vec();
        pt.push(w);
        assert!(close(v.eval_f64(&pt).unwrap(), s, 1e-13));
        let d = |i: usize| v.eval(&Dual::seeded(&pt, Some(i))).unwrap().eps;
        assert!(close(jet.dv, 1.0 / d(3), 1e-13));
        for k in 0..3 {
            assert!(close(jet.dx[k], -d(k) / d(3), 1e-13));
        }
    }

    #[test]
    fn gauge_normal_form_makes_h_one() {
        let g = GeneratingFunction::parse_w(3, "v*(2 + sin(x1))", "w").unwrap();
        let rho = Expr::parse("ln(w)", &level_vars()).unwrap();
        let t = g.gauge_transform(&rho, (0.01, 100.0)).unwrap();
        for w in [-1.0, 0.0, 0.5, 3.0] {
            assert!(close(t.h_at(w).unwrap(), 1.0, 1e-12));
        }
    }

    #[test]
    fn identity_gauge_is_a_no_op() {
        let g = GeneratingFunction::parse_w(3, "v - x3", "1").unwrap();
        let t = g.gauge_transform(&Expr::parse("w", &level_vars()).unwrap(), (-1.0, 1.0)).unwrap();
        assert_eq!(t, g);
    }

    #[test]
    fn non_monotone_gauge_is_rejected() {
        let g = GeneratingFunction::parse_w(3, "v", "1").unwrap();
        let rho = Expr::parse("w^2", &level_vars()).unwrap();
        assert!(matches!(g.gauge_transform(&rho, (-1.0, 1.0)), Err(Error::NotMonotone(_))));
    }

    #[test]
    fn missing_root_is_reported() {
        let g = GeneratingFunction::parse_v(3, "w", "0", (0.0, 1.0)).unwrap();
        assert!(matches!(g.w(&[0.0; 3], 5.0), Err(Error::Root(_))));
    }

    #[test]
    fn degenerate_derivative() {
        let g = GeneratingFunction::parse_w(3, "x1", "0").unwrap();
        assert!(matches!(g.ab(&[0.0; 3], 1.0), Err(Error::DegenerateDerivative { .. })));
    }
}
