//! Force fields `F_k(x, v)` in covariant components.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use super::generating::GeneratingFunction;
use crate::expr::{Expr, VarSet};
use crate::geometry::{
    coordinate_vars, extended_partials, extended_partials_fd, ExtendedPartials, ExtendedScalar, Fiber, Metric,
};
use crate::linalg::Mat;
use crate::metrizability::ConnectionDeformation;
use crate::scalar::{Dual, Scalar};
use crate::{Error, Result};

/// Opaque force evaluator `(x, v) -> F_k`, usable only over `f64`.
pub type OpaqueFn = Arc<dyn Fn(&[f64], &[f64]) -> Result<Vec<f64>> + Send + Sync>;

/// Variable set of the one-variable factor `H(s)` of metrizable fields.
pub fn speed_arg_vars() -> VarSet {
    VarSet::new(["s"])
}

#[derive(Clone)]
pub enum ForceField {
    Zero {
        n: usize,
    },
    Generated(GeneratingFunction),
    /// `-|v|² ∂_k f + 2 (∂f·v) v_k`, plus `H(|v| e^{-f}) e^f v_k/|v|` when `h` is set.
    Conformal {
        f: Expr,
        h: Option<Expr>,
    },
    /// `F^k = -M^k_ij v^i v^j + H N^k`.
    Inherited {
        deformation: ConnectionDeformation,
        h: Option<ExtendedScalar>,
    },
    /// Covariant components over `x1..xn, v1..vn, v`.
    Custom {
        components: Vec<ExtendedScalar>,
    },
    Opaque {
        n: usize,
        f: OpaqueFn,
    },
}

impl core::fmt::Debug for ForceField {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            ForceField::Zero { n } => write!(f, "Zero({n})"),
            ForceField::Generated(g) => f.debug_tuple("Generated").field(g).finish(),
            ForceField::Conformal { f: fx, h } => f.debug_struct("Conformal").field("f", fx).field("h", h).finish(),
            ForceField::Inherited { deformation, h } => {
                f.debug_struct("Inherited").field("deformation", deformation).field("h", h).finish()
            }
            ForceField::Custom { components } => f.debug_tuple("Custom").field(components).finish(),
            ForceField::Opaque { n, .. } => write!(f, "Opaque({n})"),
        }
    }
}

/// Where a force field came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    /// Built from a generating function; `h_zero` records the `h ≡ 0` branch.
    Generated {
        h_zero: bool,
    },
    UserSupplied,
    Conformal,
    Inherited,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Differentiation {
    Analytic,
    FiniteDifference,
}

impl ForceField {
    /// Force field of a generating function; requires `n ≥ 3`.
    pub fn generated(gen: GeneratingFunction) -> Result<Self> {
        if gen.dim() < 3 {
            return Err(Error::Dimension(gen.dim()));
        }
        Ok(ForceField::Generated(gen))
    }

    pub fn conformal(n: usize, f: &Expr, h: Option<&Expr>) -> Result<Self> {
        Ok(ForceField::Conformal {
            f: f.rebind(&coordinate_vars(n))?,
            h: h.map(|h| h.rebind(&speed_arg_vars())).transpose()?,
        })
    }

    pub fn custom(n: usize, components: &[&str]) -> Result<Self> {
        if components.len() != n {
            return Err(Error::Shape(format!("{} components for dimension {n}", components.len())));
        }
        Ok(ForceField::Custom {
            components: components.iter().map(|c| ExtendedScalar::parse(n, c)).collect::<Result<_>>()?,
        })
    }

    pub fn opaque<F>(n: usize, f: F) -> Self
    where
        F: Fn(&[f64], &[f64]) -> Result<Vec<f64>> + Send + Sync + 'static,
    {
        ForceField::Opaque { n, f: Arc::new(f) }
    }

    pub fn provenance(&self) -> Provenance {
        match self {
            ForceField::Generated(g) => Provenance::Generated { h_zero: g.h().is_zero() },
            ForceField::Zero { .. } | ForceField::Custom { .. } | ForceField::Opaque { .. } => Provenance::UserSupplied,
            ForceField::Conformal { .. } => Provenance::Conformal,
            ForceField::Inherited { .. } => Provenance::Inherited,
        }
    }

    pub fn differentiation(&self) -> Differentiation {
        match self {
            ForceField::Opaque { .. } => Differentiation::FiniteDifference,
            _ => Differentiation::Analytic,
        }
    }

    pub fn generating_function(&self) -> Option<&GeneratingFunction> {
        match self {
            ForceField::Generated(g) => Some(g),
            _ => None,
        }
    }

    /// Covariant components `F_k` at `(x, v)`.
    pub fn eval<S: Scalar>(&self, metric: &Metric, x: &[S], v: &[S], v_min: f64) -> Result<Vec<S>> {
        let n = metric.dim();
        if x.len() != n || v.len() != n {
            return Err(Error::Shape(format!("expected {n}-vectors, got {} and {}", x.len(), v.len())));
        }
        match self {
            ForceField::Zero { .. } => Ok(vec![S::zero(); n]),
            ForceField::Generated(gen) => {
                let g = metric.g(x)?;
                let fib = Fiber::new(&g, v, v_min)?;
                let (a, b) = gen.ab(x, fib.speed)?;
                Ok(from_ansatz(&fib, a, &b))
            }
            ForceField::Conformal { f, h } => {
                let g = metric.g(x)?;
                conformal_force(f, h.as_ref(), &g, x, v, v_min)
            }
            ForceField::Inherited { deformation, h } => {
                let local = metric.local(x)?;
                let m = deformation.eval(metric, &local, x)?;
                let quad = m.contract(v, v);
                let mut up: Vec<S> = quad.into_iter().map(|c| -c).collect();
                if let Some(h) = h {
                    let fib = Fiber::new(&local.g, v, v_min)?;
                    let hv = h.eval(&local.g, x, v)?;
                    for (k, c) in up.iter_mut().enumerate() {
                        *c += hv * fib.up[k];
                    }
                }
                Ok(local.lower(&up))
            }
            ForceField::Custom { components } => {
                let g = metric.g(x)?;
                components.iter().map(|c| c.eval(&g, x, v)).collect()
            }
            ForceField::Opaque { f, .. } => {
                let xs: Option<Vec<f64>> = x.iter().map(|c| c.to_f64()).collect();
                let vs: Option<Vec<f64>> = v.iter().map(|c| c.to_f64()).collect();
                match (xs, vs) {
                    (Some(xs), Some(vs)) => Ok(f(&xs, &vs)?.into_iter().map(S::cst).collect()),
                    _ => Err(Error::NotDifferentiable),
                }
            }
        }
    }

    /// Contravariant components `F^k`.
    pub fn eval_up<S: Scalar>(&self, metric: &Metric, x: &[S], v: &[S], v_min: f64) -> Result<Vec<S>> {
        let low = self.eval(metric, x, v, v_min)?;
        if matches!(self, ForceField::Zero { .. }) {
            return Ok(low);
        }
        let g = metric.g(x)?;
        let g_inv = g.spd_inverse().ok_or_else(|| Error::MetricDegenerate { x: x.iter().map(|c| c.re()).collect() })?;
        Ok(g_inv.mul_vec(&low))
    }

    /// Value and first partials in `(x, v)`: exact for analytic fields,
    /// central differences for opaque ones.
    pub fn partials(
        &self,
        metric: &Metric,
        x: &[f64],
        v: &[f64],
        v_min: f64,
        richardson: bool,
    ) -> Result<ExtendedPartials> {
        match self {
            ForceField::Opaque { .. } => extended_partials_fd(|x, v| self.eval(metric, x, v, v_min), x, v, richardson),
            _ => extended_partials(|x, v| self.eval(metric, x, v, v_min), x, v),
        }
    }
}

/// `F_k = a N_k + |v| Σ_i b_i (2 N^i N_k - δ^i_k)`.
pub fn from_ansatz<S: Scalar>(fib: &Fiber<S>, a: S, b: &[S]) -> Vec<S> {
    let mut bn = S::zero();
    for (bi, ni) in b.iter().zip(&fib.up) {
        bn += *bi * *ni;
    }
    let two_bn = bn + bn;
    (0..b.len()).map(|k| a * fib.low[k] + fib.speed * (two_bn * fib.low[k] - b[k])).collect()
}

/// Force of a generating function at one point.
pub fn build_force(gen: &GeneratingFunction, metric: &Metric, x: &[f64], v: &[f64], v_min: f64) -> Result<Vec<f64>> {
    ForceField::generated(gen.clone())?.eval(metric, x, v, v_min)
}

/// The same force computed from `V_w` and `V_i` at `(x, W(x, |v|))`;
/// only available for V-form generating functions.
pub fn build_force_from_v(
    gen: &GeneratingFunction,
    v_expr: &Expr,
    metric: &Metric,
    x: &[f64],
    v: &[f64],
    v_min: f64,
) -> Result<Vec<f64>> {
    let n = metric.dim();
    let g = metric.g(x)?;
    let fib = Fiber::new(&g, v, v_min)?;
    let w = gen.w(x, fib.speed)?;
    let mut pt = x.to_vec();
    pt.push(w);
    let d = |i: usize| -> Result<f64> { Ok(v_expr.eval(&Dual::seeded(&pt, Some(i)))?.eps) };
    let v_w = d(n)?;
    let a = gen.h_at(w)? * v_w;
    let b = (0..n).map(d).collect::<Result<Vec<_>>>()?;
    Ok(from_ansatz(&fib, a, &b))
}

fn conformal_force<S: Scalar>(f: &Expr, h: Option<&Expr>, g: &Mat<S>, x: &[S], v: &[S], v_min: f64) -> Result<Vec<S>> {
    let n = x.len();
    let mut df = Vec::with_capacity(n);
    let mut f0 = S::zero();
    for m in 0..n {
        let xd: Vec<Dual<S>> =
            x.iter().enumerate().map(|(k, &c)| if k == m { Dual::var(c) } else { Dual::constant(c) }).collect();
        let d = f.eval(&xd)?;
        f0 = d.re;
        df.push(d.eps);
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let v_low = g.mul_vec(v);
    let s2 = g.bilinear(v, v);
    let mut dfv = S::zero();
    for (a, b) in df.iter().zip(v) {
        dfv += *a * *b;
    }
    let mut out: Vec<S> = (0..n).map(|k| -(s2 * df[k]) + (dfv + dfv) * v_low[k]).collect();
    if let Some(h) = h {
        let fib = Fiber::new(g, v, v_min)?;
        let e = f0.exp();
        let hv = h.eval(&[fib.speed / e])?;
        let coef = hv * e / fib.speed;
        for (k, c) in out.iter_mut().enumerate() {
            *c += coef * v_low[k];
        }
    }
    Ok(out)
}
