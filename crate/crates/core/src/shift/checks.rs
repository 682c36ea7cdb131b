//! Kinematic checks over a built family: constancy of `W` on each `S_t` and
//! the metric components of the associated coordinates.

use alloc::vec::Vec;

use super::ShiftFamily;
use crate::forcefield::{GeneratingFunction, Given};
use crate::geometry::Metric;
use crate::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct WStat {
    pub t: f64,
    pub nodes: usize,
    pub min: f64,
    pub max: f64,
    pub spread: f64,
    pub mean: f64,
    /// `W0(t)` from the scalar evolution.
    pub w0: Option<f64>,
    /// `|mean - W0(t)|`.
    pub mean_error: Option<f64>,
}

/// `W(x(u, t), |v(u, t)|)` statistics over the lattice at each output time.
pub fn w_constancy(family: &ShiftFamily, gen: &GeneratingFunction, metric: &Metric) -> Result<Vec<WStat>> {
    let mut out = Vec::with_capacity(family.t_grid.len());
    for (j, &t) in family.t_grid.iter().enumerate() {
        let mut values = Vec::new();
        for node in &family.nodes {
            let Some(s) = node.trajectory.as_ref().and_then(|tr| tr.samples.get(j)) else { continue };
            values.push(gen.w(&s.x, metric.speed(&s.x, &s.v)?)?);
        }
        if values.is_empty() {
            continue;
        }
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let w0 = family.w0_trace.as_ref().map(|tr| tr[j]);
        out.push(WStat {
            t,
            nodes: values.len(),
            min,
            max,
            spread: max - min,
            mean,
            w0,
            mean_error: w0.map(|w| (mean - w).abs()),
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GnnReport {
    /// `max | |v| - V(x, W0(t)) |`.
    pub max_speed_residual: f64,
    /// `(node, t_index)` of the maximum.
    pub argmax: Option<(usize, usize)>,
    /// Largest normalized `g(τ_k, v)`, the off-diagonal components.
    pub max_offdiag: f64,
    pub evaluated: usize,
}

/// Compare `|v|` with `V(x, W0(t))` everywhere on the family.
pub fn gnn_check(family: &ShiftFamily, gen: &GeneratingFunction, metric: &Metric) -> Result<GnnReport> {
    let trace = match &family.w0_trace {
        Some(t) => t.clone(),
        None => {
            let w0 = gen.w(&family.anchor, family.nu0)?;
            crate::dynamics::w0_evolve(gen.h(), w0, &family.t_grid, crate::dynamics::DEFAULT_STEP)?
        }
    };
    let mut report = GnnReport { max_speed_residual: 0.0, argmax: None, max_offdiag: 0.0, evaluated: 0 };
    for (i, node) in family.nodes.iter().enumerate() {
        let Some(tr) = &node.trajectory else { continue };
        for (j, s) in tr.samples.iter().enumerate() {
            let speed = metric.speed(&s.x, &s.v)?;
            let v = gen.dual_convert(&s.x, Given::Level(trace[j]))?;
            let r = (speed - v).abs();
            report.evaluated += 1;
            if report.argmax.is_none() || r > report.max_speed_residual {
                report.max_speed_residual = r;
                report.argmax = Some((i, j));
            }
        }
    }
    report.max_offdiag = family.deviation_stats(f64::NEG_INFINITY, f64::INFINITY).max_normalized;
    Ok(report)
}
