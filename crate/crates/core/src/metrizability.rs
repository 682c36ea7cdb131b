//! Connection deformations, conformal connections and the numerical
//! trajectory-inheritance test.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::dynamics::{integrate_until_arc_length, IntegratorOptions, Method, Trajectory, DEFAULT_STEP};
use crate::expr::Expr;
use crate::forcefield::ForceField;
use crate::geometry::{coordinate_vars, Christoffel, ExtendedScalar, Local, Metric};
use crate::scalar::{Dual, Scalar};
use crate::{Error, Result};

/// Arc-length budget for comparing trajectories.
pub const DEFAULT_ARC_LENGTH: f64 = 1.0;
pub const DEFAULT_RESAMPLE: usize = 200;
pub const DEFAULT_INHERITANCE_TOLERANCE: f64 = 1e-5;

/// `M^k_ij = Γ̃^k_ij - Γ^k_ij`, symmetric in the lower pair.
#[derive(Clone, Debug, PartialEq)]
pub enum ConnectionDeformation {
    Zero,
    /// Deformation towards the connection of `e^{-2f} g`.
    Conformal {
        f: Expr,
    },
    /// Constant components, `m[(k*n + i)*n + j]`.
    Constant {
        n: usize,
        m: Vec<f64>,
    },
    /// `Γ(other) - Γ(g)`.
    MetricDifference {
        other: Metric,
    },
}

impl ConnectionDeformation {
    pub fn conformal(n: usize, f: &Expr) -> Result<Self> {
        Ok(ConnectionDeformation::Conformal { f: f.rebind(&coordinate_vars(n))? })
    }

    pub fn constant(n: usize, m: Vec<f64>) -> Result<Self> {
        if m.len() != n * n * n {
            return Err(Error::Shape(format!("deformation needs {} components, got {}", n * n * n, m.len())));
        }
        for k in 0..n {
            for i in 0..n {
                for j in 0..i {
                    if m[(k * n + i) * n + j] != m[(k * n + j) * n + i] {
                        return Err(Error::Shape(format!("deformation is not symmetric in ({i}, {j}) for k = {k}")));
                    }
                }
            }
        }
        Ok(ConnectionDeformation::Constant { n, m })
    }

    /// Components at `x`, given the background metric data there.
    pub fn eval<S: Scalar>(&self, metric: &Metric, local: &Local<S>, x: &[S]) -> Result<Christoffel<S>> {
        let n = metric.dim();
        let mut out = Christoffel::zeros(n);
        match self {
            ConnectionDeformation::Zero => {}
            ConnectionDeformation::Conformal { f } => {
                let df = gradient(f, x)?;
                let df_up = local.raise(&df);
                for k in 0..n {
                    for i in 0..n {
                        for j in i..n {
                            let mut c = df_up[k] * local.g[(i, j)];
                            if k == j {
                                c -= df[i];
                            }
                            if k == i {
                                c -= df[j];
                            }
                            out.set(k, i, j, c);
                        }
                    }
                }
            }
            ConnectionDeformation::Constant { m, .. } => {
                for k in 0..n {
                    for i in 0..n {
                        for j in i..n {
                            out.set(k, i, j, S::cst(m[(k * n + i) * n + j]));
                        }
                    }
                }
            }
            ConnectionDeformation::MetricDifference { other } => {
                let tilde = other.christoffel(x)?;
                for k in 0..n {
                    for i in 0..n {
                        for j in i..n {
                            out.set(k, i, j, tilde.get(k, i, j) - local.gamma.get(k, i, j));
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// `∂f/∂x^m` for a scalar field of the coordinates.
pub fn gradient<S: Scalar>(f: &Expr, x: &[S]) -> Result<Vec<S>> {
    (0..x.len())
        .map(|m| {
            let xd: Vec<Dual<S>> =
                x.iter().enumerate().map(|(k, &c)| if k == m { Dual::var(c) } else { Dual::constant(c) }).collect();
            Ok(f.eval(&xd)?.eps)
        })
        .collect()
}

/// `Γ̃ = Γ + M` for the conformal deformation by `f`.
pub fn conformal_connection(f: &Expr, metric: &Metric, x: &[f64]) -> Result<Christoffel<f64>> {
    let local = metric.local(x)?;
    let m = ConnectionDeformation::conformal(metric.dim(), f)?.eval(metric, &local, x)?;
    let n = metric.dim();
    let mut out = Christoffel::zeros(n);
    for k in 0..n {
        for i in 0..n {
            for j in i..n {
                out.set(k, i, j, local.gamma.get(k, i, j) + m.get(k, i, j));
            }
        }
    }
    Ok(out)
}

/// `F_k` lowered from `F^k = -M^k_ij v^i v^j + H N^k`.
pub fn inherited_force(
    deformation: &ConnectionDeformation,
    h: Option<&ExtendedScalar>,
    metric: &Metric,
    x: &[f64],
    v: &[f64],
    v_min: f64,
) -> Result<Vec<f64>> {
    ForceField::Inherited { deformation: deformation.clone(), h: h.cloned() }.eval(metric, x, v, v_min)
}

/// Conformal geodesic flow of `e^{-2f} g` plus the speed term `H(|v| e^{-f}) e^f v_k / |v|`.
pub fn metrizable_force(
    f: &Expr,
    h: Option<&Expr>,
    metric: &Metric,
    x: &[f64],
    v: &[f64],
    v_min: f64,
) -> Result<Vec<f64>> {
    ForceField::conformal(metric.dim(), f, h)?.eval(metric, x, v, v_min)
}

/// `max_k |F_k(x, αv) - α² F_k(x, v)|`.
pub fn homogeneity_defect(
    field: &ForceField,
    metric: &Metric,
    x: &[f64],
    v: &[f64],
    alpha: f64,
    v_min: f64,
) -> Result<f64> {
    let base = field.eval(metric, x, v, v_min)?;
    let scaled: Vec<f64> = v.iter().map(|c| c * alpha).collect();
    let f = field.eval(metric, x, &scaled, v_min)?;
    Ok(f.iter().zip(&base).fold(0.0, |m, (a, b)| m.max((a - alpha * alpha * b).abs())))
}

/// `|P(F_b - F_a)|_g` at `(x, v)`: zero iff the fields differ along `N` only.
pub fn transverse_difference(
    a: &ForceField,
    b: &ForceField,
    metric: &Metric,
    x: &[f64],
    v: &[f64],
    v_min: f64,
) -> Result<f64> {
    let local = metric.local(x)?;
    let fib = local.fiber(v, v_min)?;
    let fa = a.eval(metric, x, v, v_min)?;
    let fb = b.eval(metric, x, v, v_min)?;
    let d: Vec<f64> = fb.iter().zip(&fa).map(|(p, q)| p - q).collect();
    let along: f64 = d.iter().zip(&fib.up).map(|(p, q)| p * q).sum();
    let t: Vec<f64> = d.iter().zip(&fib.low).map(|(p, n)| p - along * n).collect();
    let t_up = local.raise(&t);
    Ok(libm::sqrt(t.iter().zip(&t_up).map(|(p, q)| p * q).sum::<f64>().max(0.0)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InheritanceOptions {
    pub integrator: IntegratorOptions,
    pub arc_length: f64,
    pub resample: usize,
    pub tolerance: f64,
}

impl Default for InheritanceOptions {
    fn default() -> Self {
        InheritanceOptions {
            integrator: IntegratorOptions::default(),
            arc_length: DEFAULT_ARC_LENGTH,
            resample: DEFAULT_RESAMPLE,
            tolerance: DEFAULT_INHERITANCE_TOLERANCE,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InheritanceSample {
    pub x0: Vec<f64>,
    pub v0: Vec<f64>,
    /// Symmetric max-min chart distance between the resampled curves.
    pub distance: Option<f64>,
    /// Largest `|P(F_b - F_a)|_g` along the first trajectory.
    pub transverse: Option<f64>,
    pub failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InheritanceReport {
    pub samples: Vec<InheritanceSample>,
    pub max_distance: f64,
    pub tolerance: f64,
    /// Every sample integrated and within tolerance.
    pub pass: bool,
}

/// Points at equal arc-length spacing along a polyline with known
/// cumulative arc length.
pub fn resample_by_arc_length(points: &[Vec<f64>], arc: &[f64], count: usize) -> Vec<Vec<f64>> {
    let total = *arc.last().unwrap_or(&0.0);
    let mut out = Vec::with_capacity(count);
    let mut seg = 0;
    for i in 0..count {
        let s = if count == 1 { 0.0 } else { total * i as f64 / (count - 1) as f64 };
        while seg + 2 < arc.len() && arc[seg + 1] < s {
            seg += 1;
        }
        let (a, b) = (arc[seg], arc[(seg + 1).min(arc.len() - 1)]);
        let w = if b > a { ((s - a) / (b - a)).clamp(0.0, 1.0) } else { 0.0 };
        let p = &points[seg];
        let q = &points[(seg + 1).min(points.len() - 1)];
        out.push(p.iter().zip(q).map(|(u, v)| u + w * (v - u)).collect());
    }
    out
}

fn point_segment(p: &[f64], a: &[f64], b: &[f64]) -> f64 {
    let ab: Vec<f64> = b.iter().zip(a).map(|(x, y)| x - y).collect();
    let ap: Vec<f64> = p.iter().zip(a).map(|(x, y)| x - y).collect();
    let len2: f64 = ab.iter().map(|c| c * c).sum();
    let t = if len2 > 0.0 { (ap.iter().zip(&ab).map(|(x, y)| x * y).sum::<f64>() / len2).clamp(0.0, 1.0) } else { 0.0 };
    libm::sqrt(ap.iter().zip(&ab).map(|(x, y)| (x - t * y) * (x - t * y)).sum())
}

fn one_sided(from: &[Vec<f64>], to: &[Vec<f64>]) -> f64 {
    from.iter()
        .map(|p| {
            if to.len() == 1 {
                return point_segment(p, &to[0], &to[0]);
            }
            to.windows(2).map(|w| point_segment(p, &w[0], &w[1])).fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max)
}

/// Symmetric max over points of the distance to the other polyline.
pub fn curve_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    one_sided(a, b).max(one_sided(b, a))
}

fn positions(tr: &Trajectory) -> Vec<Vec<f64>> {
    tr.samples.iter().map(|s| s.x.clone()).collect()
}

fn compare_one(
    a: &ForceField,
    b: &ForceField,
    metric: &Metric,
    x0: &[f64],
    v0: &[f64],
    opts: &InheritanceOptions,
) -> Result<(f64, f64)> {
    let step = match opts.integrator.method {
        Method::Rk4 { step } => step,
        Method::Rk45 { .. } => DEFAULT_STEP,
    };
    let ra = integrate_until_arc_length(a, metric, x0, v0, opts.arc_length, step, &opts.integrator)?;
    let rb = integrate_until_arc_length(b, metric, x0, v0, opts.arc_length, step, &opts.integrator)?;
    for r in [&ra, &rb] {
        if !r.trajectory.termination.is_completed() {
            return Err(Error::Precondition(format!(
                "trajectory stopped before arc length {}: {}",
                opts.arc_length,
                r.trajectory.termination.label()
            )));
        }
    }
    let pa = resample_by_arc_length(&positions(&ra.trajectory), &ra.arc_length, opts.resample);
    let pb = resample_by_arc_length(&positions(&rb.trajectory), &rb.arc_length, opts.resample);
    let mut transverse: f64 = 0.0;
    for s in &ra.trajectory.samples {
        transverse = transverse.max(transverse_difference(a, b, metric, &s.x, &s.v, opts.integrator.v_min)?);
    }
    Ok((curve_distance(&pa, &pb), transverse))
}

/// Integrate both fields from each initial state over a fixed arc length
/// and compare the traced curves.
pub fn inheritance_test(
    a: &ForceField,
    b: &ForceField,
    metric: &Metric,
    inits: &[(Vec<f64>, Vec<f64>)],
    opts: &InheritanceOptions,
) -> Result<InheritanceReport> {
    opts.integrator.validate()?;
    if opts.resample < 2 || !(opts.arc_length > 0.0) {
        return Err(Error::Precondition(
            "inheritance needs at least 2 resample points and a positive arc length".into(),
        ));
    }
    let samples: Vec<InheritanceSample> = inits
        .iter()
        .map(|(x0, v0)| {
            let (distance, transverse, failure) = match compare_one(a, b, metric, x0, v0, opts) {
                Ok((d, t)) => (Some(d), Some(t), None),
                Err(e) => (None, None, Some(e.to_string())),
            };
            InheritanceSample { x0: x0.clone(), v0: v0.clone(), distance, transverse, failure }
        })
        .collect();
    Ok(summarize_inheritance(samples, opts.tolerance))
}

/// Aggregate per-sample results.
pub fn summarize_inheritance(samples: Vec<InheritanceSample>, tolerance: f64) -> InheritanceReport {
    let max_distance = samples.iter().filter_map(|s| s.distance).fold(0.0, f64::max);
    let pass = !samples.is_empty() && samples.iter().all(|s| s.distance.is_some_and(|d| d <= tolerance));
    InheritanceReport { samples, max_distance, tolerance, pass }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forcefield::{normality_report, speed_arg_vars, ResidualOptions};
    use crate::geometry::DEFAULT_V_MIN;
    use alloc::vec;

    fn x3() -> crate::expr::VarSet {
        coordinate_vars(3)
    }

    fn samples() -> Vec<(Vec<f64>, Vec<f64>)> {
        (0..6)
            .map(|i| {
                let t = i as f64;
                (
                    vec![0.3 * libm::sin(t), 0.2 * libm::cos(1.3 * t), 0.1 * t - 0.2],
                    vec![libm::cos(0.7 * t) + 0.3, 0.8 * libm::sin(t), 0.5 - 0.1 * t],
                )
            })
            .collect()
    }

    #[test]
    fn conformal_connection_examples() {
        let flat = Metric::flat(3);
        let x = [0.3, -0.2, 0.5];
        let k = Expr::parse("2.5", &x3()).unwrap();
        assert_eq!(conformal_connection(&k, &flat, &x).unwrap(), Christoffel::zeros(3));
        let c = 0.7;
        let f = Expr::parse("0.7*x1", &x3()).unwrap();
        let g = conformal_connection(&f, &flat, &x).unwrap();
        assert!((g.get(0, 0, 0) + c).abs() < 1e-15);
        assert!((g.get(0, 1, 1) - c).abs() < 1e-15);
        assert!((g.get(1, 0, 1) + c).abs() < 1e-15);
        assert!((g.get(2, 0, 2) + c).abs() < 1e-15);
        assert!(g.get(0, 0, 1).abs() < 1e-15);
    }

    #[test]
    fn conformal_connection_matches_rescaled_metric() {
        let vars = x3();
        let base = Metric::diagonal(
            ["1 + 0.2*x2^2", "exp(0.3*x1)", "2"].iter().map(|s| Expr::parse(s, &vars).unwrap()).collect(),
        )
        .unwrap();
        let f = Expr::parse("0.2*sin(x1)*x3 + 0.1*x2", &vars).unwrap();
        let scaled = Metric::diagonal(
            [
                "(1 + 0.2*x2^2)*exp(-2*(0.2*sin(x1)*x3 + 0.1*x2))",
                "exp(0.3*x1)*exp(-2*(0.2*sin(x1)*x3 + 0.1*x2))",
                "2*exp(-2*(0.2*sin(x1)*x3 + 0.1*x2))",
            ]
            .iter()
            .map(|s| Expr::parse(s, &vars).unwrap())
            .collect(),
        )
        .unwrap();
        for (x, _) in samples() {
            let a = conformal_connection(&f, &base, &x).unwrap();
            let b = scaled.christoffel(&x).unwrap();
            for k in 0..3 {
                for i in 0..3 {
                    for j in 0..3 {
                        assert!((a.get(k, i, j) - b.get(k, i, j)).abs() <= 1e-8);
                    }
                }
            }
        }
    }

    #[test]
    fn inherited_force_examples() {
        let flat = Metric::flat(3);
        let (x, v) = (vec![0.1, 0.2, 0.3], vec![0.4, -0.5, 0.6]);
        assert_eq!(
            inherited_force(&ConnectionDeformation::Zero, None, &flat, &x, &v, DEFAULT_V_MIN).unwrap(),
            vec![0.0; 3]
        );
        let f = Expr::parse("0.1*x1", &x3()).unwrap();
        let conf = ConnectionDeformation::conformal(3, &f).unwrap();
        let direct = metrizable_force(&f, None, &flat, &x, &v, DEFAULT_V_MIN).unwrap();
        let via_m = inherited_force(&conf, None, &flat, &x, &v, DEFAULT_V_MIN).unwrap();
        let via_metric = inherited_force(
            &ConnectionDeformation::MetricDifference { other: Metric::conformal(3, &f).unwrap() },
            None,
            &flat,
            &x,
            &v,
            DEFAULT_V_MIN,
        )
        .unwrap();
        for k in 0..3 {
            assert!((direct[k] - via_m[k]).abs() <= 1e-10);
            assert!((direct[k] - via_metric[k]).abs() <= 1e-9);
        }
        let speed = ExtendedScalar::parse(3, "v").unwrap();
        let pushed = inherited_force(&ConnectionDeformation::Zero, Some(&speed), &flat, &x, &v, DEFAULT_V_MIN).unwrap();
        assert!(pushed.iter().zip(&v).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn metrizable_force_examples() {
        let flat = Metric::flat(3);
        let (x, v) = ([0.1, 0.2, 0.3], [0.4, -0.5, 0.6]);
        let s = speed_arg_vars();
        let zero = Expr::parse("0", &x3()).unwrap();
        let one = Expr::parse("1", &s).unwrap();
        let f = metrizable_force(&zero, Some(&one), &flat, &x, &v, DEFAULT_V_MIN).unwrap();
        let speed = flat.speed(&x, &v).unwrap();
        assert!(f.iter().zip(&v).all(|(a, b)| (a - b / speed).abs() < 1e-15));
        let vars = x3();
        let metric = Metric::diagonal(
            ["1 + 0.1*x3^2", "1", "exp(0.2*x2)"].iter().map(|e| Expr::parse(e, &vars).unwrap()).collect(),
        )
        .unwrap();
        for (fx, h) in [("0.1*x1", "s"), ("0.3*sin(x2) - 0.2*x1*x3", "1 + s^2")] {
            let field =
                ForceField::conformal(3, &Expr::parse(fx, &vars).unwrap(), Some(&Expr::parse(h, &s).unwrap())).unwrap();
            let pts: Vec<_> = samples();
            let r = normality_report(&field, &metric, &pts, &ResidualOptions::default()).unwrap();
            assert!(r.max_norm() <= 1e-6, "{fx}: {:?}", r.summary);
        }
    }

    #[test]
    fn non_conformal_deformation_fails_normality() {
        let mut m = vec![0.0; 27];
        m[0] = 0.5;
        m[(2 * 3 + 1) * 3 + 1] = 0.3;
        let dm = ConnectionDeformation::constant(3, m).unwrap();
        let field = ForceField::Inherited { deformation: dm, h: None };
        let r = normality_report(&field, &Metric::flat(3), &samples(), &ResidualOptions::default()).unwrap();
        assert!(r.max_norm() > 1e-3);
        assert!(ConnectionDeformation::constant(3, {
            let mut m = vec![0.0; 27];
            m[1] = 1.0;
            m
        })
        .is_err());
    }

    #[test]
    fn quadratic_fields_are_homogeneous() {
        let f = Expr::parse("0.2*x1*x2 + 0.1*sin(x3)", &x3()).unwrap();
        let field = ForceField::Inherited { deformation: ConnectionDeformation::conformal(3, &f).unwrap(), h: None };
        let flat = Metric::flat(3);
        for (x, v) in samples() {
            for alpha in [0.5, 2.0, 3.0] {
                assert!(homogeneity_defect(&field, &flat, &x, &v, alpha, DEFAULT_V_MIN).unwrap() <= 1e-14);
            }
        }
        let h = ExtendedScalar::parse(3, "1").unwrap();
        let forced =
            ForceField::Inherited { deformation: ConnectionDeformation::conformal(3, &f).unwrap(), h: Some(h) };
        for (x, v) in samples() {
            assert!(transverse_difference(&field, &forced, &flat, &x, &v, DEFAULT_V_MIN).unwrap() <= 1e-14);
        }
    }

    #[test]
    fn resampling_and_distance() {
        let pts = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![1.0, 1.0]];
        let r = resample_by_arc_length(&pts, &[0.0, 1.0, 2.0], 5);
        assert_eq!(r, vec![vec![0.0, 0.0], vec![0.5, 0.0], vec![1.0, 0.0], vec![1.0, 0.5], vec![1.0, 1.0]]);
        let shifted: Vec<Vec<f64>> = r.iter().map(|p| vec![p[0], p[1] + 0.1]).collect();
        assert!((curve_distance(&r, &shifted) - 0.1).abs() < 1e-15);
        assert_eq!(curve_distance(&r, &r), 0.0);
    }

    #[test]
    fn inheritance_examples() {
        let flat = Metric::flat(3);
        let f = Expr::parse("0.1*x1", &x3()).unwrap();
        let s = speed_arg_vars();
        let conf = ForceField::conformal(3, &f, None).unwrap();
        let with_h = ForceField::conformal(3, &f, Some(&Expr::parse("s", &s).unwrap())).unwrap();
        let inits = vec![(vec![0.0; 3], vec![0.0, 1.0, 0.0]), (vec![0.2, -0.1, 0.3], vec![0.3, 0.5, -0.8])];
        let opts = InheritanceOptions::default();
        let same = inheritance_test(&conf, &conf, &flat, &inits, &opts).unwrap();
        assert!(same.pass && same.max_distance <= 1e-12);
        let r = inheritance_test(&with_h, &conf, &flat, &inits, &opts).unwrap();
        assert!(r.pass, "{:?}", r.samples);
        assert!(r.samples.iter().all(|s| s.transverse.unwrap() <= 1e-6));
        let geo = inheritance_test(&conf, &ForceField::Zero { n: 3 }, &flat, &inits, &opts).unwrap();
        assert!(!geo.pass && geo.max_distance > 1e-2, "{}", geo.max_distance);
    }
}
