use normal_shift_core::expr::{BinaryOp, Expr, Node, UnaryOp, VarSet};
use normal_shift_core::forcefield::{
    build_force, build_force_from_v, fiber_linearity, normality_report, scalar_ansatz, ForceField, GeneratingFunction,
    ResidualOptions,
};
use normal_shift_core::geometry::{coordinate_vars, Metric, DEFAULT_V_MIN};
use normal_shift_core::scalar::Dual64;
use proptest::prelude::*;

fn vars3() -> VarSet {
    VarSet::new(["x", "y", "z"])
}

fn leaf() -> impl Strategy<Value = Node> {
    prop_oneof![
        (0.0f64..3.0).prop_map(Node::Const),
        prop::sample::select(vec![0.5, 1.0, 2.0, 0.25]).prop_map(Node::Const),
        (0usize..3).prop_map(Node::Var),
    ]
}

fn tree() -> impl Strategy<Value = Node> {
    leaf().prop_recursive(5, 64, 2, |inner| {
        prop_oneof![
            (
                prop::sample::select(vec![
                    UnaryOp::Neg,
                    UnaryOp::Sin,
                    UnaryOp::Cos,
                    UnaryOp::Exp,
                    UnaryOp::Ln,
                    UnaryOp::Sqrt,
                    UnaryOp::Tanh
                ]),
                inner.clone()
            )
                .prop_map(|(op, a)| Node::Unary(op, Box::new(a))),
            (
                prop::sample::select(vec![BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul, BinaryOp::Div]),
                inner.clone(),
                inner.clone()
            )
                .prop_map(|(op, a, b)| Node::Binary(op, Box::new(a), Box::new(b))),
            (inner, prop::sample::select(vec![2.0, 3.0, -1.0, 0.5])).prop_map(|(a, e)| Node::Binary(
                BinaryOp::Pow,
                Box::new(a),
                Box::new(Node::Const(e))
            )),
        ]
    })
}

fn point() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.5f64..1.5, 3)
}

/// Ridders extrapolation of central differences; returns the estimate and its error bound.
fn ridders(expr: &Expr, x: &[f64], i: usize) -> Option<(f64, f64)> {
    const SHRINK: f64 = 1.4;
    const LEVELS: usize = 10;
    let f = |d: f64| {
        let mut y = x.to_vec();
        y[i] += d;
        expr.eval_f64(&y).ok().filter(|v| v.is_finite())
    };
    let mut h = 0.05 * x[i].abs().max(1.0);
    let mut table = vec![vec![0.0; LEVELS]; LEVELS];
    let mut best = (0.0, f64::INFINITY);
    table[0][0] = (f(h)? - f(-h)?) / (2.0 * h);
    for k in 1..LEVELS {
        h /= SHRINK;
        table[0][k] = (f(h)? - f(-h)?) / (2.0 * h);
        let mut fac = SHRINK * SHRINK;
        for j in 1..=k {
            table[j][k] = (table[j - 1][k] * fac - table[j - 1][k - 1]) / (fac - 1.0);
            fac *= SHRINK * SHRINK;
            let err = (table[j][k] - table[j - 1][k]).abs().max((table[j][k] - table[j - 1][k - 1]).abs());
            if err <= best.1 {
                best = (table[j][k], err);
            }
        }
        if (table[k][k] - table[k - 1][k - 1]).abs() >= 2.0 * best.1 {
            break;
        }
    }
    Some(best)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn dual_derivatives_match_finite_differences(node in tree(), x in point()) {
        prop_assume!(node.depth() <= 6);
        let expr = Expr::from_node(node, vars3());
        let value = expr.eval_f64(&x);
        prop_assume!(value.as_ref().is_ok_and(|v| v.is_finite() && v.abs() < 1e4));
        for i in 0..3 {
            let exact = expr.eval(&Dual64::seeded(&x, Some(i))).unwrap().eps;
            prop_assume!(exact.is_finite() && exact.abs() < 1e4);
            let scale = exact.abs().max(value.as_ref().unwrap().abs()).max(1.0);
            // Points where the extrapolation cannot certify its own accuracy say nothing.
            let Some((approx, err)) = ridders(&expr, &x, i) else { continue };
            if err > 1e-8 * scale {
                continue;
            }
            prop_assert!((exact - approx).abs() <= 1e-6 * scale, "d/dx{i} of {expr}: dual {exact}, fd {approx}");
        }
    }

    #[test]
    fn print_then_parse_is_identity(node in tree(), x in point()) {
        // Negated literals fold into constants on parse, so the first pass may change the tree.
        let expr = Expr::from_node(node, vars3());
        let once = Expr::parse(&expr.to_string(), &vars3()).unwrap();
        let twice = Expr::parse(&once.to_string(), &vars3()).unwrap();
        prop_assert_eq!(&twice, &once);
        match (expr.eval_f64(&x), once.eval_f64(&x)) {
            (Ok(a), Ok(b)) if a.is_finite() => prop_assert_eq!(a, b),
            _ => {}
        }
    }
}

fn metric_from(p: &[f64]) -> Metric {
    let v = coordinate_vars(3);
    let e = |s: String| Expr::parse(&s, &v).unwrap();
    Metric::general(
        3,
        vec![
            e(format!("1 + {}*x1^2", p[0])),
            e(format!("{}*x1", p[3])),
            e("0".into()),
            e(format!("exp({}*x2)", p[1])),
            e(format!("{}*sin(x3)", p[3])),
            e(format!("1 + {}*sin(x3)^2", p[2])),
        ],
    )
    .unwrap()
}

fn metric_params() -> impl Strategy<Value = Vec<f64>> {
    (0.0f64..1.0, -0.5f64..0.5, 0.0f64..1.0, -0.15f64..0.15).prop_map(|(a, b, c, d)| vec![a, b, c, d])
}

fn velocity() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, 3).prop_filter("nonzero", |v| v.iter().map(|c| c * c).sum::<f64>() > 0.04)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn christoffel_symbols_are_metric_compatible(p in metric_params(), x in prop::collection::vec(-1.0f64..1.0, 3)) {
        let metric = metric_from(&p);
        let local = metric.local(&x).unwrap();
        let n = 3;
        for k in 0..n {
            let xd = Dual64::seeded(&x, Some(k));
            let dg = metric.g(&xd).unwrap();
            for i in 0..n {
                for j in 0..n {
                    prop_assert_eq!(local.gamma.get(k, i, j), local.gamma.get(k, j, i));
                    // ∂_k g_ij = Γ_{ik,j} + Γ_{jk,i} with Γ_{ik,j} = g_jm Γ^m_ik
                    let lower = |a: usize, b: usize, c: usize| (0..n).map(|m| local.g[(c, m)] * local.gamma.get(m, a, b)).sum::<f64>();
                    let rhs = lower(i, k, j) + lower(j, k, i);
                    prop_assert!((dg[(i, j)].eps - rhs).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn projector_is_an_orthogonal_idempotent(p in metric_params(), x in prop::collection::vec(-1.0f64..1.0, 3), v in velocity()) {
        let metric = metric_from(&p);
        let local = metric.local(&x).unwrap();
        let fib = local.fiber(&v, DEFAULT_V_MIN).unwrap();
        prop_assert!((local.speed(&fib.up) - 1.0).abs() <= 1e-14);
        let pm = fib.projector();
        for i in 0..3 {
            let pn: f64 = (0..3).map(|j| pm[(i, j)] * fib.up[j]).sum();
            prop_assert!(pn.abs() <= 1e-14);
            for j in 0..3 {
                let pp: f64 = (0..3).map(|m| pm[(i, m)] * pm[(m, j)]).sum();
                prop_assert!((pp - pm[(i, j)]).abs() <= 1e-13);
            }
        }
        let trace: f64 = (0..3).map(|i| pm[(i, i)]).sum();
        prop_assert!((trace - 2.0).abs() <= 1e-13);
    }
}

/// `W = v e^φ + ψ` with `V = (w - ψ) e^{-φ}` in closed form.
fn family(c: &[f64]) -> (String, String, String) {
    let phi = format!("({}*x1 + {}*sin(x2))", c[0], c[1]);
    let psi = format!("({}*x3 + {}*x1*x2)", c[2], c[3]);
    let h = format!("{} + {}*w", c[4], c[5]);
    (format!("v*exp{phi} + {psi}"), format!("(w - {psi})*exp(-{phi})"), h)
}

fn coefficients() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-0.5f64..0.5, 6)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generated_fields_are_admissible(c in coefficients(), p in metric_params(), x in prop::collection::vec(-0.8f64..0.8, 3), v in velocity()) {
        let (w, _, h) = family(&c);
        let field = ForceField::generated(GeneratingFunction::parse_w(3, &w, &h).unwrap()).unwrap();
        let r = normality_report(&field, &metric_from(&p), &[(x, v)], &ResidualOptions::default()).unwrap();
        prop_assert!(r.pass, "{:?}", r.summary);
    }

    #[test]
    fn gauge_transform_leaves_force_unchanged(c in coefficients(), x in prop::collection::vec(-0.8f64..0.8, 3), v in velocity()) {
        let (w, _, h) = family(&c);
        let gen = GeneratingFunction::parse_w(3, &w, &h).unwrap();
        let rho = Expr::parse("2*w + 1", &VarSet::new(["w"])).unwrap();
        let gauged = gen.gauge_transform(&rho, (-1e3, 1e3)).unwrap();
        let flat = Metric::flat(3);
        let a = build_force(&gen, &flat, &x, &v, DEFAULT_V_MIN).unwrap();
        let b = build_force(&gauged, &flat, &x, &v, DEFAULT_V_MIN).unwrap();
        for k in 0..3 {
            prop_assert!((a[k] - b[k]).abs() <= 1e-10, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn w_and_v_construction_paths_agree(c in coefficients(), x in prop::collection::vec(-0.8f64..0.8, 3), v in velocity()) {
        let (w, big_v, h) = family(&c);
        let gen = GeneratingFunction::parse_w(3, &w, &h).unwrap();
        let v_expr = Expr::parse(&big_v, &VarSet::coords_and(3, &["w"])).unwrap();
        let flat = Metric::flat(3);
        let a = build_force(&gen, &flat, &x, &v, DEFAULT_V_MIN).unwrap();
        let b = build_force_from_v(&gen, &v_expr, &flat, &x, &v, DEFAULT_V_MIN).unwrap();
        let from_v = GeneratingFunction::parse_v(3, &big_v, &h, (-1e3, 1e3)).unwrap();
        let d = build_force(&from_v, &flat, &x, &v, DEFAULT_V_MIN).unwrap();
        for k in 0..3 {
            prop_assert!((a[k] - b[k]).abs() <= 1e-8);
            prop_assert!((a[k] - d[k]).abs() <= 1e-8);
        }
    }

    #[test]
    fn scalar_ansatz_is_fiber_affine(c in coefficients(), p in metric_params(), x in prop::collection::vec(-0.8f64..0.8, 3), speed in 0.3f64..2.0) {
        let (w, _, h) = family(&c);
        let field = ForceField::generated(GeneratingFunction::parse_w(3, &w, &h).unwrap()).unwrap();
        let metric = metric_from(&p);
        let dirs: Vec<Vec<f64>> = (0..10)
            .map(|i| {
                let t = 0.9 * i as f64 + 0.3;
                vec![t.cos(), t.sin() * (1.7 * t).cos(), t.sin() * (1.7 * t).sin()]
            })
            .collect();
        let fit = fiber_linearity(&field, &metric, &x, speed, &dirs, DEFAULT_V_MIN).unwrap();
        prop_assert!(fit.max_residual <= 1e-9);
        let s = scalar_ansatz(&field, &metric, &x, &dirs[0], DEFAULT_V_MIN).unwrap();
        prop_assert!(s.mismatch.unwrap() <= 1e-10);
    }
}
