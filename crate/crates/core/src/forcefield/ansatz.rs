//! The scalar ansatz `A = F·N` and its fiber-affine structure.

use alloc::vec::Vec;

use super::force::ForceField;
use crate::geometry::{Fiber, Metric};
use crate::linalg::{self, Mat};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ScalarAnsatz {
    /// `A = Σ F_k N^k`.
    pub big_a: f64,
    /// `a` and `b` of a generated field.
    pub a: Option<f64>,
    pub b: Option<Vec<f64>>,
    /// `|A - (a + Σ b_i v^i)|` when `a` and `b` are known.
    pub mismatch: Option<f64>,
}

pub fn scalar_ansatz(field: &ForceField, metric: &Metric, x: &[f64], v: &[f64], v_min: f64) -> Result<ScalarAnsatz> {
    let g = metric.g(x)?;
    let fib = Fiber::new(&g, v, v_min)?;
    let f = field.eval(metric, x, v, v_min)?;
    let big_a: f64 = f.iter().zip(&fib.up).map(|(a, b)| a * b).sum();
    let (a, b, mismatch) = match field.generating_function() {
        Some(gen) => {
            let (a, b) = gen.ab(x, fib.speed)?;
            let bv: f64 = b.iter().zip(v).map(|(p, q)| p * q).sum();
            (Some(a), Some(b), Some((big_a - (a + bv)).abs()))
        }
        None => (None, None, None),
    };
    Ok(ScalarAnsatz { big_a, a, b, mismatch })
}

/// Least-squares affine fit `A(N) ≈ c_0 + Σ c_i N^i` at fixed `x` and `|v|`.
#[derive(Clone, Debug, PartialEq)]
pub struct FiberFit {
    pub coefficients: Vec<f64>,
    pub max_residual: f64,
}

/// Fit `A` over the given directions (rescaled to g-unit length).
pub fn fiber_linearity(
    field: &ForceField,
    metric: &Metric,
    x: &[f64],
    speed: f64,
    directions: &[Vec<f64>],
    v_min: f64,
) -> Result<FiberFit> {
    let n = metric.dim();
    if directions.len() < 2 * n {
        return Err(Error::Precondition(alloc::format!(
            "need at least {} directions, got {}",
            2 * n,
            directions.len()
        )));
    }
    let g = metric.g(x)?;
    let mut rows = Vec::with_capacity(directions.len());
    for d in directions {
        let fib = Fiber::new(&g, d, 0.0)?;
        let v: Vec<f64> = fib.up.iter().map(|c| c * speed).collect();
        let f = field.eval(metric, x, &v, v_min)?;
        let big_a: f64 = f.iter().zip(&fib.up).map(|(a, b)| a * b).sum();
        let mut basis = Vec::with_capacity(n + 1);
        basis.push(1.0);
        basis.extend_from_slice(&fib.up);
        rows.push((basis, big_a));
    }
    let mut normal = Mat::zeros(n + 1);
    let mut rhs = alloc::vec![0.0; n + 1];
    for (basis, y) in &rows {
        for i in 0..=n {
            rhs[i] += basis[i] * y;
            for j in 0..=n {
                normal[(i, j)] += basis[i] * basis[j];
            }
        }
    }
    let coefficients =
        linalg::solve(&normal, &rhs).ok_or_else(|| Error::Precondition("directions do not span the fiber".into()))?;
    let max_residual = rows
        .iter()
        .map(|(basis, y)| {
            let fit: f64 = basis.iter().zip(&coefficients).map(|(p, q)| p * q).sum();
            (fit - y).abs()
        })
        .fold(0.0, f64::max);
    Ok(FiberFit { coefficients, max_residual })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::Expr;
    use crate::forcefield::GeneratingFunction;
    use crate::geometry::{coordinate_vars, DEFAULT_V_MIN};
    use alloc::vec;

    #[test]
    fn zero_field_has_zero_ansatz() {
        let gen = GeneratingFunction::parse_w(3, "v", "0").unwrap();
        let f = ForceField::generated(gen).unwrap();
        let s = scalar_ansatz(&f, &Metric::flat(3), &[0.0; 3], &[1.0, 2.0, 3.0], DEFAULT_V_MIN).unwrap();
        assert_eq!(s.big_a, 0.0);
        assert_eq!(s.a, Some(0.0));
        assert!(s.b.unwrap().iter().all(|c| *c == 0.0));
    }

    #[test]
    fn hand_values_for_v_minus_x3() {
        let gen = GeneratingFunction::parse_w(3, "v - x3", "1").unwrap();
        let f = ForceField::generated(gen).unwrap();
        let v = [0.3, -0.4, 1.2];
        let s = scalar_ansatz(&f, &Metric::flat(3), &[0.1, 0.2, 0.3], &v, DEFAULT_V_MIN).unwrap();
        assert_eq!(s.a, Some(1.0));
        assert_eq!(s.b.as_deref(), Some(&[0.0, 0.0, 1.0][..]));
        assert!((s.big_a - (1.0 + v[2])).abs() < 1e-14);
        assert!(s.mismatch.unwrap() < 1e-14);
    }

    #[test]
    fn generated_field_is_fiber_affine() {
        let vars = coordinate_vars(3);
        let metric = Metric::diagonal(vec![
            Expr::parse("1 + 0.1*x2^2", &vars).unwrap(),
            Expr::parse("1", &vars).unwrap(),
            Expr::parse("exp(0.2*x1)", &vars).unwrap(),
        ])
        .unwrap();
        let gen = GeneratingFunction::parse_w(3, "v*exp(sin(x1)) + x2*x3", "0.5*w").unwrap();
        let f = ForceField::generated(gen).unwrap();
        let dirs: Vec<Vec<f64>> = (0..12)
            .map(|i| {
                let t = i as f64 * 0.7;
                vec![libm::cos(t), libm::sin(t) * libm::cos(2.1 * t), libm::sin(t) * libm::sin(2.1 * t) + 0.1]
            })
            .collect();
        let fit = fiber_linearity(&f, &metric, &[0.3, -0.2, 0.5], 1.7, &dirs, DEFAULT_V_MIN).unwrap();
        assert!(fit.max_residual < 1e-12, "{}", fit.max_residual);
    }

    #[test]
    fn constant_field_is_not_ansatz_shaped_but_still_affine() {
        // A = 0.3 N^1 is affine in N, so the fit holds; only the residual tests catch it
        let f = ForceField::custom(3, &["0.3", "0", "0"]).unwrap();
        let dirs: Vec<Vec<f64>> = (0..6)
            .map(|i| {
                let mut d = vec![0.1; 3];
                d[i % 3] = if i < 3 { 1.0 } else { -1.0 };
                d
            })
            .collect();
        let fit = fiber_linearity(&f, &Metric::flat(3), &[0.0; 3], 1.0, &dirs, DEFAULT_V_MIN).unwrap();
        assert!(fit.max_residual < 1e-14);
        assert!((fit.coefficients[1] - 0.3).abs() < 1e-13);
    }
}
