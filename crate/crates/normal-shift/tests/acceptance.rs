//! Acceptance suite: ten criteria, one result line each. Runs without the
//! libtest harness so the lines are always printed; exits nonzero if any
//! criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use normal_shift::pipeline::{self, run_plan, uniform_source, RunOptions};
use normal_shift::scenario::Scenario;
use normal_shift_core::dynamics::{integrate, IntegratorOptions};
use normal_shift_core::expr::{BinaryOp, Expr, Node, UnaryOp, VarSet};
use normal_shift_core::forcefield::{
    build_force, generated_reduced_residuals, normality_report, ForceField, GeneratingFunction, ResidualOptions,
};
use normal_shift_core::geometry::{coordinate_vars, Metric, DEFAULT_V_MIN};
use normal_shift_core::metrizability::{inherited_force, ConnectionDeformation};
use normal_shift_core::sampling::SampleDomain;
use normal_shift_core::scalar::Dual64;
use normal_shift_core::shift::{Hypersurface, Lattice, ShiftOptions, ShiftPlan};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn points(metric: &Metric, count: usize, seed: u64, half: f64, speed: (f64, f64)) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut u = uniform_source(seed);
    SampleDomain::cube(metric.dim(), half, speed).draw_many(metric, count, &mut u).unwrap()
}

fn scenario_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn weak_max(field: &ForceField, metric: &Metric, pts: &[(Vec<f64>, Vec<f64>)]) -> f64 {
    let r = normality_report(field, metric, pts, &ResidualOptions::default()).unwrap();
    r.summary.iter().fold(0.0f64, |m, row| m.max(row.max))
}

fn forward_equivalence() -> Outcome {
    let flat = Metric::flat(3);
    let gens = [
        ("W=v", GeneratingFunction::parse_w(3, "v", "0").unwrap()),
        ("W=v-x3,h=1", GeneratingFunction::parse_w(3, "v - x3", "1").unwrap()),
        ("W=v*exp(-0.1*x1),h=0", GeneratingFunction::parse_w(3, "v*exp(-0.1*x1)", "0").unwrap()),
        (
            "trigonometric",
            GeneratingFunction::parse_w(3, "v*(1 + 0.2*sin(x1)*cos(x2)) + 0.1*cos(x3)", "0.5 + 0.1*w").unwrap(),
        ),
        ("V-form", GeneratingFunction::parse_v(3, "w*exp(0.1*x2) + 0.05*x3", "1", (-1e3, 1e3)).unwrap()),
    ];
    let pts = points(&flat, 100, 101, 1.0, (0.5, 2.0));
    let mut worst: f64 = 0.0;
    for (_, g) in &gens {
        worst = worst.max(weak_max(&ForceField::generated(g.clone()).unwrap(), &flat, &pts));
    }
    verdict(worst <= 1e-6, format!("5 generating functions x 100 samples, max residual {worst:.3e} <= 1e-6"))
}

fn classical_limit() -> Outcome {
    let flat = Metric::flat(3);
    let zero = ForceField::Zero { n: 3 };
    let t_grid: Vec<f64> = (0..=10).map(|k| k as f64 * 0.05).collect();
    let opts = ShiftOptions { integrator: IntegratorOptions::rk4(1e-3), ..ShiftOptions::default() };
    let lattice = Lattice::uniform(2, 21);
    let plane = Hypersurface::coordinate_plane(3, 0.0, -1.0, 1.0).unwrap();
    let sphere = Hypersurface::parse(
        &["a", "b"],
        &["sin(a)*cos(b)", "sin(a)*sin(b)", "cos(a)"],
        vec![(0.6, 1.4), (-0.4, 0.4)],
        1.0,
    )
    .unwrap();
    let mut worst: f64 = 0.0;
    for (surf, u0) in [(&plane, [0.0, 0.0]), (&sphere, [1.0, 0.0])] {
        let plan = ShiftPlan::surface(&zero, None, &flat, surf, &u0, 1.0, &t_grid, &lattice, &opts).unwrap();
        let fam = run_plan(&plan, threads()).unwrap();
        if fam.failed_nodes() > 0 {
            return Err(format!("{} nodes failed", fam.failed_nodes()));
        }
        worst = worst.max(fam.deviation_stats(0.0, 0.5).max_normalized);
    }
    verdict(worst <= 1e-8, format!("plane and sphere patch, 21x21, max |phi|/(|tau||v|) {worst:.3e} <= 1e-8"))
}

/// `((1-|v|)/(1-φ)) (2(v·∇φ)v - |v|²∇φ)/|v|` for `φ = 0.2 x1` in flat space.
fn displayed_vform_force(x: &[f64], v: &[f64]) -> Vec<f64> {
    let phi = 0.2 * x[0];
    let grad = [0.2, 0.0, 0.0];
    let s = v.iter().map(|c| c * c).sum::<f64>().sqrt();
    let vg: f64 = v.iter().zip(&grad).map(|(a, b)| a * b).sum();
    (0..3).map(|k| (1.0 - s) / (1.0 - phi) * (2.0 * vg * v[k] - s * s * grad[k]) / s).collect()
}

fn vform_example() -> Outcome {
    let flat = Metric::flat(3);
    let gen = GeneratingFunction::parse_v(3, "w + (1 - w)*0.2*x1", "0", (-50.0, 50.0)).unwrap();
    let mut force_err: f64 = 0.0;
    for (x, v) in points(&flat, 50, 103, 1.0, (0.5, 1.5)) {
        let f = build_force(&gen, &flat, &x, &v, DEFAULT_V_MIN).unwrap();
        let g = displayed_vform_force(&x, &v);
        force_err = force_err.max(f.iter().zip(&g).fold(0.0, |m, (a, b)| m.max((a - b).abs())));
    }
    let sc = Scenario::from_path(&scenario_path("vform_plane.toml")).map_err(|d| d.to_string())?;
    let r = pipeline::shift(&sc, &RunOptions::default()).map_err(|e| e.to_string())?;
    let dev = r.verdict("shift.deviation").unwrap().value;
    let level = r.verdict("shift.level.x3").unwrap().value;
    let failed = r.verdict("shift.failed_nodes").unwrap().value;
    verdict(
        force_err <= 1e-9 && dev <= 1e-6 && level <= 1e-6 && failed == 0.0,
        format!(
            "force vs closed form {force_err:.3e} <= 1e-9, deviation {dev:.3e} <= 1e-6, x3 spread {level:.3e} <= 1e-6"
        ),
    )
}

fn conformal_triangle() -> Outcome {
    let flat = Metric::flat(3);
    let f = Expr::parse("0.1*x1", &coordinate_vars(3)).unwrap();
    let conformal = ForceField::conformal(3, &f, None).unwrap();
    let gen = GeneratingFunction::parse_w(3, "v*exp(-0.1*x1)", "0").unwrap();
    let deformation = ConnectionDeformation::conformal(3, &f).unwrap();
    let mut worst: f64 = 0.0;
    for (x, v) in points(&flat, 100, 104, 1.0, (0.5, 2.0)) {
        let a = conformal.eval(&flat, &x, &v, DEFAULT_V_MIN).unwrap();
        let b = build_force(&gen, &flat, &x, &v, DEFAULT_V_MIN).unwrap();
        let c = inherited_force(&deformation, None, &flat, &x, &v, DEFAULT_V_MIN).unwrap();
        for k in 0..3 {
            worst = worst.max((a[k] - b[k]).abs()).max((b[k] - c[k]).abs()).max((a[k] - c[k]).abs());
        }
    }
    verdict(worst <= 1e-9, format!("f = 0.1*x1, 100 samples, max pairwise difference {worst:.3e} <= 1e-9"))
}

fn w_transport() -> Outcome {
    let flat = Metric::flat(3);
    let gen = GeneratingFunction::parse_w(3, "v - x3", "1").unwrap();
    let field = ForceField::generated(gen.clone()).unwrap();
    let t_grid: Vec<f64> = (0..=20).map(|k| k as f64 * 0.05).collect();
    let inits = points(&flat, 20, 105, 0.5, (1.0, 2.0));
    let opts = IntegratorOptions::rk4(1e-3);
    let mut worst: f64 = 0.0;
    for (x0, v0) in &inits {
        let tr = integrate(&field, &flat, x0, v0, &t_grid, &opts).unwrap();
        if !tr.completed() {
            return Err(format!("trajectory from {x0:?} stopped: {}", tr.termination.label()));
        }
        let w0 = gen.w(x0, flat.speed(x0, v0).unwrap()).unwrap();
        for s in &tr.samples {
            let w = gen.w(&s.x, flat.speed(&s.x, &s.v).unwrap()).unwrap();
            worst = worst.max((w - (w0 + s.t)).abs());
        }
    }
    verdict(worst <= 1e-6, format!("20 trajectories, t in [0, 1], max |W - (W0 + t)| {worst:.3e} <= 1e-6"))
}

fn blowup() -> Outcome {
    let flat = Metric::flat(3);
    let zero = ForceField::Zero { n: 3 };
    let gen = GeneratingFunction::parse_w(3, "v - x3", "1").unwrap();
    let generated = ForceField::generated(gen.clone()).unwrap();
    let t_grid: Vec<f64> = (0..=10).map(|k| k as f64 * 0.05).collect();
    let opts = ShiftOptions { integrator: IntegratorOptions::rk4(1e-3), ..ShiftOptions::default() };
    let lattice = Lattice { counts: vec![9, 16] };
    let p0 = [0.0; 3];
    let mut dev: f64 = 0.0;
    let mut front: f64 = 0.0;
    for (field, g) in [(&zero, None), (&generated, Some(&gen))] {
        let plan = ShiftPlan::blowup(field, g, &flat, &p0, 1.0, &t_grid, &lattice, &opts).unwrap();
        let fam = run_plan(&plan, threads()).unwrap();
        if fam.failed_nodes() > 0 {
            return Err(format!("{} nodes failed", fam.failed_nodes()));
        }
        dev = dev.max(fam.deviation_stats(0.1, 0.5).max_normalized);
        if g.is_none() {
            for node in &fam.nodes {
                for s in &node.trajectory.as_ref().unwrap().samples {
                    if s.t >= 0.1 - 1e-12 {
                        let r = s.x.iter().map(|c| c * c).sum::<f64>().sqrt();
                        front = front.max((r - s.t).abs());
                    }
                }
            }
        }
    }
    verdict(
        dev <= 1e-6 && front <= 1e-8,
        format!("geodesic and h=1 fields, deviation on [0.1, 0.5] {dev:.3e} <= 1e-6, | |x| - t | {front:.3e} <= 1e-8"),
    )
}

fn negative_controls() -> Outcome {
    let flat = Metric::flat(3);
    let field = ForceField::custom(3, &["0.3", "0", "0"]).unwrap();
    let residual =
        normality_report(&field, &flat, &points(&flat, 100, 107, 1.0, (0.5, 2.0)), &ResidualOptions::default())
            .unwrap()
            .max_norm();
    let plane = Hypersurface::coordinate_plane(3, 0.0, -1.0, 1.0).unwrap();
    let t_grid: Vec<f64> = (0..=10).map(|k| k as f64 * 0.05).collect();
    let opts = ShiftOptions { integrator: IntegratorOptions::rk4(1e-3), ..ShiftOptions::default() };
    let plan =
        ShiftPlan::surface(&field, None, &flat, &plane, &[0.0, 0.0], 1.0, &t_grid, &Lattice::uniform(2, 11), &opts)
            .unwrap();
    let growth = run_plan(&plan, threads()).unwrap().deviation_stats(0.5, 0.5).max_abs;
    let tmp = tempfile::tempdir().unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_normal-shift"))
        .args(["check", "--config"])
        .arg(scenario_path("constant_force.toml"))
        .arg("--out")
        .arg(tmp.path())
        .output()
        .unwrap()
        .status
        .code();
    verdict(
        residual > 1e-2 && growth > 1e-3 && status == Some(1),
        format!("F = (0.3, 0, 0): residual {residual:.3e} > 1e-2, |phi| at t = 0.5 {growth:.3e} > 1e-3, CLI exit {status:?}"),
    )
}

fn reduced_property() -> Outcome {
    let vars = coordinate_vars(3);
    let metric = Metric::diagonal(
        ["1 + 0.2*x1^2", "exp(0.1*x2)", "1 + 0.1*sin(x3)^2"].iter().map(|s| Expr::parse(s, &vars).unwrap()).collect(),
    )
    .unwrap();
    let mut u = uniform_source(108);
    let mut c = || 0.6 * u() - 0.3;
    let mut worst: f64 = 0.0;
    for k in 0..3 {
        let w = format!("v*exp({}*x1 + {}*sin(x2)) + {}*x3 + {}*x1*x2 + {}*cos(x1 + x3)", c(), c(), c(), c(), c());
        let h = format!("{} + {}*w", c(), c());
        let gen = GeneratingFunction::parse_w(3, &w, &h).unwrap();
        for (x, v) in points(&metric, 40, 200 + k, 0.8, (0.5, 2.0)) {
            let r = generated_reduced_residuals(&gen, &metric, &x, &v, DEFAULT_V_MIN).unwrap();
            worst = r.b_rows.iter().chain(&r.a_rows).fold(worst, |m, c| m.max(c.abs()));
        }
    }
    verdict(worst <= 1e-7, format!("3 random W on a curved metric x 40 samples, max b/a residual {worst:.3e} <= 1e-7"))
}

fn metrizability() -> Outcome {
    let sc = Scenario::from_path(&scenario_path("metrizable.toml")).map_err(|d| d.to_string())?;
    let r = pipeline::metrizability(&sc, &RunOptions::default()).map_err(|e| e.to_string())?;
    let dist = r.verdict("metrizability.inheritance").unwrap();
    let norm = r.verdict("metrizability.normality").unwrap().value;
    verdict(
        dist.pass && dist.value <= 1e-5 && norm <= 1e-6,
        format!(
            "f = 0.1*x1, H(s) = s, 10 initial states, curve distance {:.3e} <= 1e-5, residual {norm:.3e} <= 1e-6",
            dist.value
        ),
    )
}

/// Random depth-limited expression over `x, y, z`.
fn random_tree(u: &mut dyn FnMut() -> f64, depth: usize) -> Node {
    let pick = (u() * 12.0) as usize;
    if depth == 0 || pick < 3 {
        return if u() < 0.5 {
            Node::Const(((u() * 4.0 - 2.0) * 100.0).round() / 100.0)
        } else {
            Node::Var((u() * 3.0) as usize)
        };
    }
    let unary = [UnaryOp::Neg, UnaryOp::Sin, UnaryOp::Cos, UnaryOp::Exp, UnaryOp::Ln, UnaryOp::Sqrt, UnaryOp::Tanh];
    let binary = [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul, BinaryOp::Div];
    match pick {
        3..=6 => Node::Unary(unary[(u() * unary.len() as f64) as usize], Box::new(random_tree(u, depth - 1))),
        7..=10 => Node::Binary(
            binary[(u() * binary.len() as f64) as usize],
            Box::new(random_tree(u, depth - 1)),
            Box::new(random_tree(u, depth - 1)),
        ),
        _ => {
            let e = [2.0, 3.0, -1.0, 0.5][(u() * 4.0) as usize];
            Node::Binary(BinaryOp::Pow, Box::new(random_tree(u, depth - 1)), Box::new(Node::Const(e)))
        }
    }
}

/// Ridders extrapolation of central differences, with its error estimate.
fn ridders(f: &dyn Fn(f64) -> Option<f64>, x: f64) -> Option<(f64, f64)> {
    const SHRINK: f64 = 1.4;
    const LEVELS: usize = 10;
    let mut h = 0.05 * x.abs().max(1.0);
    let mut a = vec![vec![0.0; LEVELS]; LEVELS];
    let mut best = (0.0, f64::INFINITY);
    a[0][0] = (f(x + h)? - f(x - h)?) / (2.0 * h);
    for i in 1..LEVELS {
        h /= SHRINK;
        a[0][i] = (f(x + h)? - f(x - h)?) / (2.0 * h);
        let mut fac = SHRINK * SHRINK;
        for j in 1..=i {
            a[j][i] = (a[j - 1][i] * fac - a[j - 1][i - 1]) / (fac - 1.0);
            fac *= SHRINK * SHRINK;
            let err = (a[j][i] - a[j - 1][i]).abs().max((a[j][i] - a[j - 1][i - 1]).abs());
            if err <= best.1 {
                best = (a[j][i], err);
            }
        }
        if (a[i][i] - a[i - 1][i - 1]).abs() >= 2.0 * best.1 {
            break;
        }
    }
    Some(best)
}

fn derivative_cases(target: usize) -> (usize, f64) {
    let vars = VarSet::new(["x", "y", "z"]);
    let mut u = uniform_source(110);
    let (mut accepted, mut worst) = (0, 0.0f64);
    for _ in 0..200 * target {
        if accepted == target {
            break;
        }
        let expr = Expr::from_node(random_tree(&mut u, 6), vars.clone());
        let x: Vec<f64> = (0..3).map(|_| 3.0 * u() - 1.5).collect();
        let i = (u() * 3.0) as usize;
        let Ok(value) = expr.eval_f64(&x) else { continue };
        let Ok(d) = expr.eval(&Dual64::seeded(&x, Some(i))) else { continue };
        if !(value.is_finite() && d.eps.is_finite() && value.abs() < 1e4 && d.eps.abs() < 1e4) {
            continue;
        }
        let f = |t: f64| {
            let mut y = x.clone();
            y[i] = t;
            expr.eval_f64(&y).ok().filter(|v| v.is_finite())
        };
        let scale = d.eps.abs().max(1.0);
        let Some((fd, err)) = ridders(&f, x[i]) else { continue };
        if err > 1e-9 * scale {
            continue;
        }
        accepted += 1;
        worst = worst.max((d.eps - fd).abs() / scale);
    }
    (accepted, worst)
}

fn step_halving_ratio() -> f64 {
    let vars = coordinate_vars(3);
    let metric =
        Metric::diagonal(["1 + 0.3*x2^2", "exp(0.2*x1)", "1"].iter().map(|s| Expr::parse(s, &vars).unwrap()).collect())
            .unwrap();
    let field =
        ForceField::generated(GeneratingFunction::parse_w(3, "v*exp(0.2*x3) - 0.3*sin(x1)", "1").unwrap()).unwrap();
    let x0 = [0.1, -0.2, 0.3];
    let v0 = [0.8, 0.5, -0.4];
    let end = |h: f64| {
        let tr = integrate(&field, &metric, &x0, &v0, &[0.0, 1.0], &IntegratorOptions::rk4(h)).unwrap();
        let s = tr.samples.last().unwrap();
        s.x.iter().chain(&s.v).copied().collect::<Vec<f64>>()
    };
    let (a, b, c) = (end(0.1), end(0.05), end(0.025));
    let dist = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    dist(&a, &b) / dist(&b, &c)
}

fn deterministic_outputs() -> bool {
    let dirs: Vec<_> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    for d in &dirs {
        for (action, file) in [("check", "transport.toml"), ("blowup", "transport.toml")] {
            let code = Command::new(env!("CARGO_BIN_EXE_normal-shift"))
                .args([action, "--seed", "77", "--config"])
                .arg(scenario_path(file))
                .arg("--out")
                .arg(d.path().join(action))
                .output()
                .unwrap()
                .status
                .code();
            assert_eq!(code, Some(0));
        }
    }
    ["check/report.json", "check/samples.csv", "check/trajectories.csv", "blowup/report.json", "blowup/family.csv"]
        .iter()
        .all(|f| std::fs::read(dirs[0].path().join(f)).unwrap() == std::fs::read(dirs[1].path().join(f)).unwrap())
}

fn numerical_hygiene() -> Outcome {
    let (cases, worst) = derivative_cases(500);
    let ratio = step_halving_ratio();
    let same = deterministic_outputs();
    verdict(
        cases == 500 && worst <= 1e-6 && (12.0..=20.0).contains(&ratio) && same,
        format!(
            "{cases} derivative cases, max relative error {worst:.3e} <= 1e-6; RK4 halving ratio {ratio:.2} in [12, 20]; reruns byte-identical: {same}"
        ),
    )
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("forward equivalence", forward_equivalence),
        ("classical limit", classical_limit),
        ("V-form plane example", vform_example),
        ("conformal consistency", conformal_triangle),
        ("W-invariant transport", w_transport),
        ("normal blow-up", blowup),
        ("negative controls", negative_controls),
        ("reduced equations", reduced_property),
        ("metrizability", metrizability),
        ("numerical hygiene", numerical_hygiene),
    ];
    if std::env::args().any(|a| a == "--list") {
        for (name, _) in &criteria {
            println!("{name}: test");
        }
        return;
    }
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default())
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("criterion {:>2} PASS  {name}: {d} ({secs:.1} s)", i + 1),
            Err(d) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {d} ({secs:.1} s)", i + 1);
            }
        }
    }
    println!("acceptance: {} of {} criteria pass", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
