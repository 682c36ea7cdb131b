//! The four pipelines behind the CLI actions. Each one computes in parallel
//! where the work splits cleanly, then assembles results in a fixed order so
//! that outputs depend only on the scenario and the seed.

use anyhow::{bail, Context, Result};
use normal_shift_core::dynamics::{integrate, w0_evolve, Method, Trajectory, DEFAULT_STEP};
use normal_shift_core::forcefield::{sample_residual, summarize, ResidualOptions};
use normal_shift_core::metrizability::{inheritance_test, summarize_inheritance, InheritanceOptions};
use normal_shift_core::sampling::SampleDomain;
use normal_shift_core::shift::{gnn_check, w_constancy, ShiftFamily, ShiftPlan};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{Map, Value};

use crate::report::{num, num_opt, nums, Csv, Report, Verdict};
use crate::scenario::Scenario;

/// Command-line overrides applied on top of a scenario.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub tolerance: Option<f64>,
    pub samples: Option<usize>,
    /// Worker threads; `None` uses the available parallelism.
    pub threads: Option<usize>,
}

impl RunOptions {
    fn threads(&self) -> usize {
        self.threads.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get())).max(1)
    }
}

/// Seeded uniform source on `[0, 1)`: ChaCha8 seeded from the 64-bit seed.
pub fn uniform_source(seed: u64) -> impl FnMut() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    move || rng.random::<f64>()
}

/// Map `f` over `items` on scoped threads, preserving order.
pub fn par_map<T, R, F>(items: &[T], threads: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    if items.is_empty() {
        return Vec::new();
    }
    let chunk = items.len().div_ceil(threads.clamp(1, items.len()));
    let mut out: Vec<Option<R>> = (0..items.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        for (c, slots) in out.chunks_mut(chunk).enumerate() {
            let f = &f;
            s.spawn(move || {
                for (k, slot) in slots.iter_mut().enumerate() {
                    let i = c * chunk + k;
                    *slot = Some(f(i, &items[i]));
                }
            });
        }
    });
    out.into_iter().map(|r| r.expect("every slot is filled")).collect()
}

/// Run every node of `plan` across threads and assemble the family.
pub fn run_plan(plan: &ShiftPlan<'_>, threads: usize) -> Result<ShiftFamily> {
    let indices: Vec<usize> = (0..plan.len()).collect();
    let runs = par_map(&indices, threads, |_, &i| plan.run_node(i));
    Ok(plan.assemble(runs)?)
}

fn coord_names(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix}{i}")).collect()
}

fn step_of(sc: &Scenario) -> f64 {
    match sc.integrator.method {
        Method::Rk4 { step } => step,
        Method::Rk45 { .. } => DEFAULT_STEP,
    }
}

fn w_of(sc: &Scenario, x: &[f64], v: &[f64]) -> f64 {
    let Some(gen) = &sc.force.generating else { return f64::NAN };
    sc.metric.speed(x, v).and_then(|s| gen.w(x, s)).unwrap_or(f64::NAN)
}

fn trajectory_rows(sc: &Scenario, id: usize, tr: &Trajectory, csv: &mut Csv) {
    for s in &tr.samples {
        let mut row = vec![id as f64, s.t];
        row.extend(&s.x);
        row.extend(&s.v);
        row.push(sc.metric.speed(&s.x, &s.v).unwrap_or(f64::NAN));
        row.push(w_of(sc, &s.x, &s.v));
        csv.push(row);
    }
}

fn trajectory_csv(n: usize) -> Csv {
    let mut h = vec!["trajectory".to_string(), "t".into()];
    h.extend(coord_names("x", n));
    h.extend(coord_names("v", n));
    h.extend(["speed".into(), "W".into()]);
    Csv::new(h)
}

pub fn check(sc: &Scenario, opts: &RunOptions) -> Result<Report> {
    let seed = opts.seed.unwrap_or(sc.seed);
    let n = sc.dim;
    let spec = &sc.check;
    let mut uniform = uniform_source(seed);
    let domain = SampleDomain { x_box: spec.x_box.clone(), speed: spec.speed };
    let count = opts.samples.unwrap_or(spec.samples);
    let points = domain.draw_many(&sc.metric, count, &mut uniform)?;
    let ropts = ResidualOptions {
        tolerance: opts.tolerance.or(spec.tolerance),
        v_min: sc.integrator.v_min,
        ..Default::default()
    };
    let field = &sc.force.field;
    let samples = par_map(&points, opts.threads(), |_, (x, v)| sample_residual(field, &sc.metric, x, v, &ropts))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()
        .context("evaluating normality residuals")?;
    let normality = summarize(samples, field.differentiation(), ropts.tolerance);

    let mut report = Report::new("check", &sc.name, seed);
    for row in &normality.summary {
        report.verdicts.push(Verdict::at_most(format!("normality.{}", row.name), row.max, normality.tolerance));
    }
    let rows: Vec<Value> = normality
        .summary
        .iter()
        .map(|r| {
            let mut m = Map::new();
            m.insert("name".into(), Value::String(r.name.into()));
            m.insert("max".into(), num(r.max));
            m.insert("mean".into(), num(r.mean));
            m.insert("argmax".into(), Value::Number(r.argmax.into()));
            Value::Object(m)
        })
        .collect();
    report.details.insert("force".into(), Value::String(sc.force.kind.clone()));
    report.details.insert("differentiation".into(), Value::String(format!("{:?}", normality.differentiation)));
    report.details.insert("samples".into(), Value::Number(count.into()));
    report.details.insert("tolerance".into(), num(normality.tolerance));
    report.details.insert("max_residual".into(), num(normality.max_norm()));
    report.details.insert("rows".into(), Value::Array(rows));
    let failing = normality.failing_rows();
    if !failing.is_empty() {
        report.notes.push(format!("failing equation rows: {}", failing.join(", ")));
    }

    let names: Vec<&str> = normality.summary.iter().map(|r| r.name).collect();
    let mut header = vec!["sample".to_string()];
    header.extend(coord_names("x", n));
    header.extend(coord_names("v", n));
    header.extend(names.iter().map(|s| s.to_string()));
    let mut csv = Csv::new(header);
    for (i, s) in normality.samples.iter().enumerate() {
        let mut row = vec![i as f64];
        row.extend(&s.x);
        row.extend(&s.v);
        row.extend((0..s.rows.len()).map(|r| s.norm(r)));
        csv.push(row);
    }
    report.tables.push(("samples.csv".into(), csv));

    if spec.transport > 0 {
        let Some(gen) = &sc.force.generating else { bail!("the W transport check needs a generated force") };
        let inits = domain.draw_many(&sc.metric, spec.transport, &mut uniform)?;
        let step = step_of(sc);
        let runs = par_map(&inits, opts.threads(), |_, (x0, v0)| -> Result<(Trajectory, Vec<f64>)> {
            let tr = integrate(field, &sc.metric, x0, v0, &sc.t_grid, &sc.integrator)?;
            let w0 = gen.w(x0, sc.metric.speed(x0, v0)?)?;
            Ok((tr, w0_evolve(gen.h(), w0, &sc.t_grid, step)?))
        });
        let mut csv = trajectory_csv(n);
        let mut worst: f64 = 0.0;
        let mut incomplete = 0;
        for (id, run) in runs.into_iter().enumerate() {
            let (tr, w0) = run.context("integrating a transport trajectory")?;
            if !tr.completed() {
                incomplete += 1;
            }
            for (j, s) in tr.samples.iter().enumerate() {
                worst = worst.max((w_of(sc, &s.x, &s.v) - w0[j]).abs());
            }
            trajectory_rows(sc, id, &tr, &mut csv);
        }
        let mut v = Verdict::at_most("transport.w", worst, spec.transport_tolerance);
        if incomplete > 0 {
            v = v.note(format!("{incomplete} trajectories stopped early"));
        }
        report.verdicts.push(v);
        report.tables.push(("trajectories.csv".into(), csv));
    }
    Ok(report)
}

fn family_csv(sc: &Scenario, family: &ShiftFamily) -> Csv {
    let n = sc.dim;
    let mut header: Vec<String> = coord_names("i", n - 1);
    header.extend(coord_names("u", n - 1));
    header.push("t".into());
    header.extend(coord_names("x", n));
    header.extend(coord_names("v", n));
    header.extend(coord_names("phi", n - 1));
    header.push("W".into());
    let mut csv = Csv::new(header);
    for (i, node) in family.nodes.iter().enumerate() {
        let Some(tr) = &node.trajectory else { continue };
        for (j, s) in tr.samples.iter().enumerate() {
            let mut row: Vec<f64> = node.index.iter().map(|&k| k as f64).collect();
            row.extend(&node.u);
            row.push(s.t);
            row.extend(&s.x);
            row.extend(&s.v);
            match family.deviation(i, j) {
                Some(d) => row.extend(&d.phi),
                None => row.extend(std::iter::repeat_n(f64::NAN, n - 1)),
            }
            row.push(w_of(sc, &s.x, &s.v));
            csv.push(row);
        }
    }
    csv
}

fn family_details(report: &mut Report, family: &ShiftFamily, t_lo: f64, t_hi: f64) -> f64 {
    let stats = family.deviation_stats(t_lo, t_hi);
    report.details.insert("nodes".into(), Value::Number(family.nodes.len().into()));
    report.details.insert("complete_nodes".into(), Value::Number(family.complete_nodes().into()));
    report.details.insert("failed_nodes".into(), Value::Number(family.failed_nodes().into()));
    report.details.insert("window".into(), nums(&[t_lo, t_hi]));
    report.details.insert("max_abs_deviation".into(), num(stats.max_abs));
    report.details.insert("max_normalized_deviation".into(), num(stats.max_normalized));
    report.details.insert("interior_max_normalized_deviation".into(), num(stats.interior_max_normalized));
    report.details.insert("evaluated".into(), Value::Number(stats.evaluated.into()));
    report.details.insert("max_initial_rate".into(), num(family.max_initial_rate()));
    report.details.insert("frame".into(), Value::String(format!("{:?}", family.frame)));
    if let Some(c) = &family.caustic {
        let mut m = Map::new();
        m.insert("t".into(), num(c.t));
        m.insert("node".into(), Value::Number(c.node.into()));
        m.insert("gram".into(), num(c.gram));
        report.details.insert("caustic".into(), Value::Object(m));
        report.notes.push(format!("caustic at t = {} (node {}); later times are excluded", c.t, c.node));
    }
    for node in family.nodes.iter().filter(|n| n.failure.is_some()) {
        report.notes.push(format!("node {:?}: {}", node.index, node.failure.as_deref().unwrap_or("")));
    }
    if let Some((node, t)) = stats.argmax {
        report.notes.push(format!("largest deviation at node {node}, t = {}", family.t_grid[t]));
    }
    stats.max_normalized
}

fn kinematics(sc: &Scenario, report: &mut Report, family: &ShiftFamily, w_tolerance: Option<f64>) -> Result<()> {
    let Some(gen) = &sc.force.generating else { return Ok(()) };
    let stats = w_constancy(family, gen, &sc.metric)?;
    let spread = stats.iter().fold(0.0f64, |m, s| m.max(s.spread));
    let mean_error = stats.iter().filter_map(|s| s.mean_error).fold(0.0f64, f64::max);
    report.details.insert("w_spread".into(), num(spread));
    report.details.insert("w_mean_error".into(), num(mean_error));
    report.details.insert("w0".into(), num_opt(family.w0));
    if let Some(tol) = w_tolerance {
        report.verdicts.push(Verdict::at_most("shift.w_spread", spread, tol));
    }
    if family.caustic.is_none() {
        let gnn = gnn_check(family, gen, &sc.metric)?;
        report.details.insert("gnn_speed_residual".into(), num(gnn.max_speed_residual));
    }
    Ok(())
}

pub fn shift(sc: &Scenario, opts: &RunOptions) -> Result<Report> {
    let Some(spec) = &sc.shift else { bail!("scenario has no [shift] block") };
    let plan = ShiftPlan::surface(
        &sc.force.field,
        sc.force.generating.as_ref(),
        &sc.metric,
        &spec.surface,
        &spec.u0,
        spec.nu0,
        &sc.t_grid,
        &spec.lattice,
        &spec.options,
    )?;
    let family = run_plan(&plan, opts.threads())?;
    let seed = opts.seed.unwrap_or(sc.seed);
    let mut report = Report::new("shift", &sc.name, seed);
    let end = *sc.t_grid.last().expect("grid is nonempty");
    let max = family_details(&mut report, &family, 0.0, end);
    report.verdicts.push(Verdict::at_most("shift.deviation", max, opts.tolerance.unwrap_or(spec.tolerance)));
    report.verdicts.push(Verdict::at_most("shift.failed_nodes", family.failed_nodes() as f64, 0.0));
    if let Some(k) = spec.level_coordinate {
        let spread = level_spread(&family, |x| x[k]);
        report.details.insert("level_spread".into(), num(spread));
        report.verdicts.push(Verdict::at_most(format!("shift.level.x{}", k + 1), spread, spec.level_tolerance));
    }
    kinematics(sc, &mut report, &family, spec.w_tolerance)?;
    report.tables.push(("family.csv".into(), family_csv(sc, &family)));
    Ok(report)
}

/// Largest spread over nodes of `q(x)` at a common time, over all times
/// in `[t_lo, t_hi]`.
fn spread_in(family: &ShiftFamily, t_lo: f64, t_hi: f64, q: impl Fn(&[f64]) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    for (j, &t) in family.t_grid.iter().enumerate() {
        if t < t_lo || t > t_hi {
            continue;
        }
        let values: Vec<f64> = family
            .nodes
            .iter()
            .filter_map(|n| n.trajectory.as_ref().and_then(|tr| tr.samples.get(j)).map(|s| q(&s.x)))
            .collect();
        if let (Some(lo), Some(hi)) = (values.iter().copied().reduce(f64::min), values.iter().copied().reduce(f64::max))
        {
            worst = worst.max(hi - lo);
        }
    }
    worst
}

fn level_spread(family: &ShiftFamily, q: impl Fn(&[f64]) -> f64) -> f64 {
    spread_in(family, f64::NEG_INFINITY, f64::INFINITY, q)
}

pub fn blowup(sc: &Scenario, opts: &RunOptions) -> Result<Report> {
    let Some(spec) = &sc.blowup else { bail!("scenario has no [blowup] block") };
    let plan = ShiftPlan::blowup(
        &sc.force.field,
        sc.force.generating.as_ref(),
        &sc.metric,
        &spec.p0,
        spec.nu0,
        &sc.t_grid,
        &spec.lattice,
        &spec.options,
    )?;
    let family = run_plan(&plan, opts.threads())?;
    let seed = opts.seed.unwrap_or(sc.seed);
    let mut report = Report::new("blowup", &sc.name, seed);
    let (lo, hi) = spec.window;
    let max = family_details(&mut report, &family, lo, hi);
    report.verdicts.push(Verdict::at_most("blowup.deviation", max, opts.tolerance.unwrap_or(spec.tolerance)));
    report.verdicts.push(Verdict::at_most("blowup.failed_nodes", family.failed_nodes() as f64, 0.0));
    let p0 = spec.p0.clone();
    let radius = |x: &[f64]| x.iter().zip(&p0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let front = spread_in(&family, lo, hi, radius);
    report.details.insert("front_radius_spread".into(), num(front));
    if let Some(tol) = spec.front_tolerance {
        report.verdicts.push(Verdict::at_most("blowup.front", front, tol));
    }
    kinematics(sc, &mut report, &family, None)?;
    report.tables.push(("family.csv".into(), family_csv(sc, &family)));
    Ok(report)
}

pub fn metrizability(sc: &Scenario, opts: &RunOptions) -> Result<Report> {
    let Some(spec) = &sc.metrizability else { bail!("scenario has no [metrizability] block") };
    let seed = opts.seed.unwrap_or(sc.seed);
    let n = sc.dim;
    let mut uniform = uniform_source(seed);
    let domain = SampleDomain { x_box: spec.x_box.clone(), speed: spec.speed };
    let count = opts.samples.unwrap_or(spec.samples);
    let inits = domain.draw_many(&sc.metric, count, &mut uniform)?;
    let tolerance = opts.tolerance.unwrap_or(spec.tolerance);
    let iopts = InheritanceOptions {
        integrator: sc.integrator,
        arc_length: spec.arc_length,
        resample: spec.resample,
        tolerance,
    };
    let field = &sc.force.field;
    let samples = par_map(&inits, opts.threads(), |_, init| {
        inheritance_test(field, &spec.reference, &sc.metric, std::slice::from_ref(init), &iopts)
            .map(|mut r| r.samples.remove(0))
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    let inheritance = summarize_inheritance(samples, tolerance);

    let points = domain.draw_many(&sc.metric, spec.normality_samples, &mut uniform)?;
    let ropts =
        ResidualOptions { tolerance: Some(spec.normality_tolerance), v_min: sc.integrator.v_min, ..Default::default() };
    let residuals = par_map(&points, opts.threads(), |_, (x, v)| sample_residual(field, &sc.metric, x, v, &ropts))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let normality = summarize(residuals, field.differentiation(), ropts.tolerance);

    let mut report = Report::new("metrizability", &sc.name, seed);
    let failed = inheritance.samples.iter().filter(|s| s.failure.is_some()).count();
    let mut v = Verdict::at_most("metrizability.inheritance", inheritance.max_distance, tolerance);
    if failed > 0 {
        v.pass = false;
        v = v.note(format!("{failed} trajectories failed"));
    }
    report.verdicts.push(v);
    report.verdicts.push(Verdict::at_most("metrizability.normality", normality.max_norm(), normality.tolerance));
    report.details.insert("max_distance".into(), num(inheritance.max_distance));
    report.details.insert("arc_length".into(), num(spec.arc_length));
    report.details.insert("max_residual".into(), num(normality.max_norm()));
    let t_max = inheritance.samples.iter().filter_map(|s| s.transverse).fold(0.0f64, f64::max);
    report.details.insert("max_transverse_difference".into(), num(t_max));
    for (i, s) in inheritance.samples.iter().enumerate() {
        if let Some(f) = &s.failure {
            report.notes.push(format!("sample {i}: {f}"));
        }
    }
    let failing = normality.failing_rows();
    if !failing.is_empty() {
        report.notes.push(format!("failing equation rows: {}", failing.join(", ")));
    }
    let mut header = vec!["sample".to_string()];
    header.extend(coord_names("x", n));
    header.extend(coord_names("v", n));
    header.extend(["distance".to_string(), "transverse".into()]);
    let mut csv = Csv::new(header);
    for (i, s) in inheritance.samples.iter().enumerate() {
        let mut row = vec![i as f64];
        row.extend(&s.x0);
        row.extend(&s.v0);
        row.push(s.distance.unwrap_or(f64::NAN));
        row.push(s.transverse.unwrap_or(f64::NAN));
        csv.push(row);
    }
    report.tables.push(("inheritance.csv".into(), csv));
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn par_map_keeps_order() {
        let items: Vec<usize> = (0..37).collect();
        for threads in [1, 2, 5, 64] {
            assert_eq!(
                par_map(&items, threads, |i, x| i * 100 + x * 2),
                items.iter().map(|x| x * 102).collect::<Vec<_>>()
            );
        }
        assert!(par_map(&Vec::<u8>::new(), 4, |_, x| *x).is_empty());
    }

    #[test]
    fn uniform_source_is_reproducible() {
        let mut a = uniform_source(42);
        let mut b = uniform_source(42);
        let xs: Vec<f64> = (0..8).map(|_| a()).collect();
        assert_eq!(xs, (0..8).map(|_| b()).collect::<Vec<_>>());
        assert!(xs.iter().all(|x| (0.0..1.0).contains(x)));
        assert_ne!(xs[0], uniform_source(43)());
    }
}
