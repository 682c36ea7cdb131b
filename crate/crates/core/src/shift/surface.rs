//! Parametrized hypersurfaces, their tangent frames and unit normals.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::expr::{Expr, VarSet};
use crate::geometry::Metric;
use crate::linalg::{self, Mat};
use crate::scalar::{Dual, Scalar};
use crate::{Error, Result};

/// Frames with Euclidean Gram determinant at or below this are rank deficient.
pub const RANK_THRESHOLD: f64 = 1e-10;

/// `x^i = x^i(u^1, …, u^{n-1})` over a parameter rectangle.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypersurface {
    n: usize,
    params: VarSet,
    maps: Vec<Expr>,
    rect: Vec<(f64, f64)>,
    orientation: f64,
}

impl Hypersurface {
    pub fn new(params: VarSet, maps: Vec<Expr>, rect: Vec<(f64, f64)>, orientation: f64) -> Result<Self> {
        let n = maps.len();
        if n < 2 || params.len() != n - 1 {
            return Err(Error::Shape(format!(
                "a hypersurface in dimension {n} needs {} parameters, got {}",
                n.saturating_sub(1),
                params.len()
            )));
        }
        if rect.len() != n - 1 || rect.iter().any(|(a, b)| !(a <= b)) {
            return Err(Error::Shape("parameter rectangle must give lo <= hi for every parameter".into()));
        }
        if orientation != 1.0 && orientation != -1.0 {
            return Err(Error::Precondition("orientation must be +1 or -1".into()));
        }
        let maps = maps.iter().map(|m| m.rebind(&params)).collect::<Result<Vec<_>, _>>()?;
        Ok(Hypersurface { n, params, maps, rect, orientation })
    }

    pub fn parse(params: &[&str], maps: &[&str], rect: Vec<(f64, f64)>, orientation: f64) -> Result<Self> {
        let vars = VarSet::new(params.iter().copied());
        let maps = maps.iter().map(|m| Expr::parse(m, &vars)).collect::<Result<Vec<_>, _>>()?;
        Self::new(vars, maps, rect, orientation)
    }

    /// The hyperplane `x^n = c` parametrized by `x^1..x^{n-1}` over `[lo, hi]^{n-1}`.
    pub fn coordinate_plane(n: usize, c: f64, lo: f64, hi: f64) -> Result<Self> {
        let names: Vec<String> = (1..n).map(|i| format!("u{i}")).collect();
        let vars = VarSet::new(names.iter().map(String::as_str));
        let mut maps: Vec<Expr> = names.iter().map(|p| Expr::parse(p, &vars)).collect::<Result<_, _>>()?;
        maps.push(Expr::constant(c, &vars));
        Self::new(vars, maps, alloc::vec![(lo, hi); n - 1], 1.0)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn params(&self) -> &VarSet {
        &self.params
    }

    pub fn maps(&self) -> &[Expr] {
        &self.maps
    }

    pub fn rect(&self) -> &[(f64, f64)] {
        &self.rect
    }

    pub fn orientation(&self) -> f64 {
        self.orientation
    }

    pub fn contains(&self, u: &[f64]) -> bool {
        u.len() == self.n - 1 && u.iter().zip(&self.rect).all(|(c, (a, b))| a <= c && c <= b)
    }

    pub fn point<S: Scalar>(&self, u: &[S]) -> Result<Vec<S>> {
        if u.len() != self.n - 1 {
            return Err(Error::Shape(format!("expected {} parameters, got {}", self.n - 1, u.len())));
        }
        self.maps.iter().map(|m| Ok(m.eval(u)?)).collect()
    }
}

/// `τ_k = ∂x/∂u^k`, exact, with a rank check.
pub fn tangent_frame<S: Scalar>(surf: &Hypersurface, u: &[S]) -> Result<Vec<Vec<S>>> {
    if !surf.contains(&u.iter().map(|c| c.re()).collect::<Vec<_>>()) {
        return Err(Error::Precondition(format!(
            "parameters {:?} lie outside the rectangle",
            u.iter().map(|c| c.re()).collect::<Vec<_>>()
        )));
    }
    let frame: Vec<Vec<S>> = (0..surf.n - 1)
        .map(|k| {
            let ud: Vec<Dual<S>> =
                u.iter().enumerate().map(|(j, &c)| if j == k { Dual::var(c) } else { Dual::constant(c) }).collect();
            Ok(surf.point(&ud)?.into_iter().map(|d| d.eps).collect())
        })
        .collect::<Result<_>>()?;
    let gram = gram_det(&frame, None);
    if !(gram > RANK_THRESHOLD) {
        return Err(Error::RankDeficient { gram });
    }
    Ok(frame)
}

/// Determinant of the Gram matrix of `frame` under `g` (Euclidean if `None`).
pub fn gram_det<S: Scalar>(frame: &[Vec<S>], g: Option<&Mat<f64>>) -> f64 {
    let m = frame.len();
    let re: Vec<Vec<f64>> = frame.iter().map(|t| t.iter().map(|c| c.re()).collect()).collect();
    let gram = Mat::from_fn(m, |i, j| match g {
        Some(g) => g.bilinear(&re[i], &re[j]),
        None => re[i].iter().zip(&re[j]).map(|(a, b)| a * b).sum(),
    });
    linalg::det(&gram)
}

/// Determinant by cofactor expansion; fine for the small sizes used here.
fn det_generic<S: Scalar>(rows: &[Vec<S>]) -> S {
    let m = rows.len();
    match m {
        0 => S::one(),
        1 => rows[0][0],
        2 => rows[0][0] * rows[1][1] - rows[0][1] * rows[1][0],
        _ => {
            let mut acc = S::zero();
            for c in 0..m {
                let minor: Vec<Vec<S>> = rows[1..]
                    .iter()
                    .map(|r| r.iter().enumerate().filter(|(j, _)| *j != c).map(|(_, v)| *v).collect())
                    .collect();
                let term = rows[0][c] * det_generic(&minor);
                if c % 2 == 0 {
                    acc += term;
                } else {
                    acc -= term;
                }
            }
            acc
        }
    }
}

/// Covector `n_i = det[τ_1; …; τ_{n-1}; e_i]`, which annihilates every `τ_k`.
pub fn cross_covector<S: Scalar>(frame: &[Vec<S>]) -> Vec<S> {
    let n = frame.len() + 1;
    (0..n)
        .map(|i| {
            let mut rows: Vec<Vec<S>> = frame.to_vec();
            rows.push((0..n).map(|j| if j == i { S::one() } else { S::zero() }).collect());
            det_generic(&rows)
        })
        .collect()
}

/// g-unit normal at `x(u)` with the surface's orientation sign.
pub fn unit_normal<S: Scalar>(metric: &Metric, surf: &Hypersurface, u: &[S]) -> Result<Vec<S>> {
    let frame = tangent_frame(surf, u)?;
    let x = surf.point(u)?;
    normal_from_frame(metric, &x, &frame, surf.orientation)
}

pub(crate) fn normal_from_frame<S: Scalar>(
    metric: &Metric,
    x: &[S],
    frame: &[Vec<S>],
    orientation: f64,
) -> Result<Vec<S>> {
    let local = metric.local(x)?;
    let low = cross_covector(frame);
    let up = local.raise(&low);
    let norm2: S = low.iter().zip(&up).fold(S::zero(), |a, (p, q)| a + *p * *q);
    if !(norm2.re() > 0.0) {
        return Err(Error::RankDeficient { gram: norm2.re() });
    }
    let scale = S::cst(orientation) / norm2.sqrt();
    Ok(up.into_iter().map(|c| c * scale).collect())
}
