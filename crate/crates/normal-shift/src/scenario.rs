//! Scenario files. A scenario is TOML with a mandatory `version` key, a
//! dimension, a metric, a force field, integrator settings and one block per
//! action. Loading never stops at the first problem: every expression and
//! every block is checked and the problems are returned together.

use std::fmt;
use std::path::{Path, PathBuf};

use normal_shift_core::dynamics::{IntegratorOptions, Method, DEFAULT_STEP};
use normal_shift_core::expr::{Expr, VarSet};
use normal_shift_core::forcefield::{
    level_vars, speed_arg_vars, ForceField, GeneratingFunction, OneVar, DEFAULT_V_BRACKET, DEFAULT_W_BRACKET,
};
use normal_shift_core::geometry::{coordinate_vars, extended_vars, spherical_vars, ExtendedScalar, Metric};
use normal_shift_core::metrizability::{
    ConnectionDeformation, DEFAULT_ARC_LENGTH, DEFAULT_INHERITANCE_TOLERANCE, DEFAULT_RESAMPLE,
};
use normal_shift_core::shift::{
    FrameMethod, Hypersurface, Lattice, ShiftOptions, ShiftPlan, DEFAULT_LATTICE, DEFAULT_POLAR_MARGIN, DEFAULT_T_SKIP,
    NORMALITY_TOLERANCE,
};
use serde::Deserialize;
use toml::Spanned;

pub const SCHEMA_VERSION: i64 = 1;

type Src = Spanned<String>;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    version: Option<Spanned<i64>>,
    name: Option<String>,
    dim: Spanned<usize>,
    seed: Option<u64>,
    output: Option<String>,
    metric: Option<RawMetric>,
    force: Option<Spanned<RawForce>>,
    integrate: Option<RawIntegrate>,
    check: Option<RawCheck>,
    shift: Option<RawShift>,
    blowup: Option<RawBlowup>,
    metrizability: Option<RawMetrizability>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMetric {
    kind: Option<String>,
    f: Option<Src>,
    diagonal: Option<Vec<Src>>,
    components: Option<Vec<Src>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawForce {
    kind: String,
    w: Option<Src>,
    v: Option<Src>,
    h: Option<Src>,
    w_bracket: Option<[f64; 2]>,
    v_bracket: Option<[f64; 2]>,
    f: Option<Src>,
    speed_term: Option<Src>,
    deformation: Option<String>,
    m: Option<Vec<f64>>,
    components: Option<Vec<Src>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawIntegrate {
    method: Option<String>,
    step: Option<f64>,
    rtol: Option<f64>,
    atol: Option<f64>,
    escape: Option<f64>,
    max_steps: Option<usize>,
    v_min: Option<f64>,
    t_end: Option<f64>,
    dt_out: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCheck {
    samples: Option<usize>,
    half_width: Option<f64>,
    x_box: Option<Vec<[f64; 2]>>,
    speed: Option<[f64; 2]>,
    tolerance: Option<f64>,
    transport: Option<usize>,
    transport_tolerance: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawShift {
    params: Vec<String>,
    maps: Vec<Src>,
    rect: Vec<[f64; 2]>,
    orientation: Option<f64>,
    u0: Option<Vec<f64>>,
    nu0: Option<f64>,
    lattice: Option<Vec<usize>>,
    frame: Option<String>,
    tolerance: Option<f64>,
    level_coordinate: Option<usize>,
    level_tolerance: Option<f64>,
    w_tolerance: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBlowup {
    p0: Vec<f64>,
    nu0: Option<f64>,
    lattice: Option<Vec<usize>>,
    frame: Option<String>,
    t_skip: Option<f64>,
    polar_margin: Option<f64>,
    window: Option<[f64; 2]>,
    tolerance: Option<f64>,
    front_tolerance: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawReference {
    deformation: String,
    f: Option<Src>,
    m: Option<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMetrizability {
    reference: RawReference,
    samples: Option<usize>,
    half_width: Option<f64>,
    speed: Option<[f64; 2]>,
    arc_length: Option<f64>,
    resample: Option<usize>,
    tolerance: Option<f64>,
    normality_samples: Option<usize>,
    normality_tolerance: Option<f64>,
}

/// One problem found while loading a scenario.
#[derive(Clone, Debug, PartialEq)]
pub struct Diagnostic {
    /// Dotted key path such as `force.w`.
    pub field: String,
    /// 1-based line and column in the scenario file.
    pub location: Option<(usize, usize)>,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.location {
            Some((line, col)) => write!(f, "{} (line {line}, column {col}): {}", self.field, self.message),
            None => write!(f, "{}: {}", self.field, self.message),
        }
    }
}

/// Every diagnostic from a failed load.
#[derive(Clone, Debug, PartialEq)]
pub struct Diagnostics(pub Vec<Diagnostic>);

impl fmt::Display for Diagnostics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for d in &self.0 {
            writeln!(f, "{d}")?;
        }
        Ok(())
    }
}

impl std::error::Error for Diagnostics {}

/// An expression field as written, with the variables it may use.
#[derive(Clone, Debug, PartialEq)]
pub struct Declared {
    pub field: String,
    pub source: String,
    pub vars: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct Force {
    pub kind: String,
    pub field: ForceField,
    pub generating: Option<GeneratingFunction>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckSpec {
    pub samples: usize,
    pub x_box: Vec<(f64, f64)>,
    pub speed: (f64, f64),
    /// `None` picks the default for the field's differentiation mode.
    pub tolerance: Option<f64>,
    /// Number of trajectories for the `W` transport check (generated fields only).
    pub transport: usize,
    pub transport_tolerance: f64,
}

#[derive(Clone, Debug)]
pub struct ShiftSpec {
    pub surface: Hypersurface,
    pub u0: Vec<f64>,
    pub nu0: f64,
    pub lattice: Lattice,
    pub options: ShiftOptions,
    pub tolerance: f64,
    /// 0-based coordinate that should stay constant on every `S_t`.
    pub level_coordinate: Option<usize>,
    pub level_tolerance: f64,
    pub w_tolerance: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct BlowupSpec {
    pub p0: Vec<f64>,
    pub nu0: f64,
    pub lattice: Lattice,
    pub options: ShiftOptions,
    pub window: (f64, f64),
    pub tolerance: f64,
    pub front_tolerance: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct MetrizabilitySpec {
    /// Geodesic flow of the deformed connection.
    pub reference: ForceField,
    pub samples: usize,
    pub x_box: Vec<(f64, f64)>,
    pub speed: (f64, f64),
    pub arc_length: f64,
    pub resample: usize,
    pub tolerance: f64,
    pub normality_samples: usize,
    pub normality_tolerance: f64,
}

#[derive(Clone, Debug)]
pub struct Scenario {
    pub name: String,
    pub dim: usize,
    pub seed: u64,
    pub output: Option<PathBuf>,
    pub metric: Metric,
    pub force: Force,
    pub integrator: IntegratorOptions,
    pub t_grid: Vec<f64>,
    pub check: CheckSpec,
    pub shift: Option<ShiftSpec>,
    pub blowup: Option<BlowupSpec>,
    pub metrizability: Option<MetrizabilitySpec>,
    pub declared: Vec<Declared>,
}

impl Scenario {
    pub fn from_path(path: &Path) -> Result<Self, Diagnostics> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Diagnostics(vec![Diagnostic { field: path.display().to_string(), location: None, message: e.to_string() }])
        })?;
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "scenario".into());
        Self::from_str_named(&text, &stem)
    }

    pub fn from_str_named(text: &str, default_name: &str) -> Result<Self, Diagnostics> {
        let raw: RawScenario = toml::from_str(text).map_err(|e| {
            let location = e.span().map(|s| line_col(text, s.start));
            Diagnostics(vec![Diagnostic { field: "scenario".into(), location, message: e.message().to_string() }])
        })?;
        Compiler { text, diags: Vec::new(), declared: Vec::new() }.compile(raw, default_name)
    }
}

/// Output times `0, dt, 2dt, …, t_end`.
pub fn time_grid(t_end: f64, dt_out: f64) -> Vec<f64> {
    let count = (t_end / dt_out - 1e-9).ceil() as usize;
    let mut grid: Vec<f64> = (0..=count).map(|k| (k as f64 * dt_out).min(t_end)).collect();
    grid.dedup();
    grid
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rfind('\n').map_or(before.len(), |p| before.len() - p - 1) + 1;
    (line, col)
}

struct Compiler<'t> {
    text: &'t str,
    diags: Vec<Diagnostic>,
    declared: Vec<Declared>,
}

impl Compiler<'_> {
    fn error(&mut self, field: &str, location: Option<usize>, message: impl Into<String>) {
        let location = location.map(|o| line_col(self.text, o));
        self.diags.push(Diagnostic { field: field.into(), location, message: message.into() });
    }

    fn expr(&mut self, field: &str, src: &Src, vars: &VarSet) -> Option<Expr> {
        self.declared.push(Declared {
            field: field.into(),
            source: src.get_ref().clone(),
            vars: vars.names().to_vec(),
        });
        match Expr::parse(src.get_ref(), vars) {
            Ok(e) => Some(e),
            Err(e) => {
                // The span covers the opening quote.
                self.error(field, Some(src.span().start + 1 + e.offset()), e.to_string());
                None
            }
        }
    }

    fn positive(&mut self, field: &str, value: f64) {
        if !(value > 0.0 && value.is_finite()) {
            self.error(field, None, format!("must be positive and finite, got {value}"));
        }
    }

    fn boxed(&mut self, field: &str, n: usize, half: Option<f64>, x_box: Option<Vec<[f64; 2]>>) -> Vec<(f64, f64)> {
        match x_box {
            Some(b) => {
                if b.len() != n {
                    self.error(field, None, format!("needs {n} intervals, got {}", b.len()));
                }
                if b.iter().any(|[lo, hi]| !(lo <= hi)) {
                    self.error(field, None, "every interval needs lo <= hi");
                }
                b.into_iter().map(|[lo, hi]| (lo, hi)).collect()
            }
            None => {
                let h = half.unwrap_or(1.0);
                self.positive(&format!("{field}.half_width"), h);
                vec![(-h, h); n]
            }
        }
    }

    fn speed_range(&mut self, field: &str, speed: Option<[f64; 2]>) -> (f64, f64) {
        let [lo, hi] = speed.unwrap_or([0.5, 2.0]);
        if !(lo > 0.0 && lo <= hi) {
            self.error(field, None, "speed range needs 0 < lo <= hi");
        }
        (lo, hi)
    }

    fn frame(&mut self, field: &str, s: Option<&str>) -> FrameMethod {
        match s {
            None | Some("tangent") => FrameMethod::Tangent,
            Some("central") | Some("central-difference") => FrameMethod::CentralDifference,
            Some(other) => {
                self.error(field, None, format!("unknown frame method {other:?}; expected \"tangent\" or \"central\""));
                FrameMethod::Tangent
            }
        }
    }

    fn compile(mut self, raw: RawScenario, default_name: &str) -> Result<Scenario, Diagnostics> {
        match &raw.version {
            None => {
                self.error("version", None, format!("missing mandatory key; this build reads version {SCHEMA_VERSION}"))
            }
            Some(v) if *v.get_ref() != SCHEMA_VERSION => self.error(
                "version",
                Some(v.span().start),
                format!("unsupported version {}, expected {SCHEMA_VERSION}", v.get_ref()),
            ),
            _ => {}
        }
        let n = *raw.dim.get_ref();
        if n < 2 {
            self.error("dim", Some(raw.dim.span().start), format!("dimension must be at least 2, got {n}"));
            return Err(Diagnostics(self.diags));
        }
        let metric = self.metric(n, raw.metric);
        let force = self.force(n, raw.force);
        let (integrator, t_grid) = self.integrate(raw.integrate.unwrap_or_default());
        let check = self.check(n, raw.check.unwrap_or_default(), force.as_ref());
        let shift = raw.shift.and_then(|s| self.shift(n, s, &integrator));
        let blowup = raw.blowup.and_then(|b| self.blowup(n, b, &integrator, &t_grid));
        let metrizability = raw.metrizability.and_then(|m| self.metrizability(n, m));

        if let (Some(metric), Some(force)) = (&metric, &force) {
            if let Some(s) = &shift {
                if let Err(e) = ShiftPlan::surface(
                    &force.field,
                    force.generating.as_ref(),
                    metric,
                    &s.surface,
                    &s.u0,
                    s.nu0,
                    &t_grid,
                    &s.lattice,
                    &s.options,
                ) {
                    self.error("shift", None, e.to_string());
                }
            }
            if let Some(b) = &blowup {
                if let Err(e) = ShiftPlan::blowup(
                    &force.field,
                    force.generating.as_ref(),
                    metric,
                    &b.p0,
                    b.nu0,
                    &t_grid,
                    &b.lattice,
                    &b.options,
                ) {
                    self.error("blowup", None, e.to_string());
                }
            }
        }

        if !self.diags.is_empty() {
            return Err(Diagnostics(self.diags));
        }
        Ok(Scenario {
            name: raw.name.unwrap_or_else(|| default_name.to_string()),
            dim: n,
            seed: raw.seed.unwrap_or(0),
            output: raw.output.map(PathBuf::from),
            metric: metric.expect("no diagnostics"),
            force: force.expect("no diagnostics"),
            integrator,
            t_grid,
            check,
            shift,
            blowup,
            metrizability,
            declared: self.declared,
        })
    }

    fn metric(&mut self, n: usize, raw: Option<RawMetric>) -> Option<Metric> {
        let Some(raw) = raw else { return Some(Metric::flat(n)) };
        let vars = coordinate_vars(n);
        let kind = raw.kind.as_deref().unwrap_or("flat");
        let list = |c: &mut Self, key: &str, items: &Option<Vec<Src>>, expected: usize| -> Option<Vec<Expr>> {
            let Some(items) = items else {
                c.error(&format!("metric.{key}"), None, format!("required for kind {kind:?}"));
                return None;
            };
            if items.len() != expected {
                c.error(&format!("metric.{key}"), None, format!("needs {expected} entries, got {}", items.len()));
            }
            let out: Vec<Option<Expr>> =
                items.iter().enumerate().map(|(i, s)| c.expr(&format!("metric.{key}[{i}]"), s, &vars)).collect();
            out.into_iter().collect::<Option<Vec<_>>>().filter(|v| v.len() == expected)
        };
        let built = match kind {
            "flat" => Ok(Metric::flat(n)),
            "conformal" => {
                let Some(src) = &raw.f else {
                    self.error("metric.f", None, "required for kind \"conformal\"");
                    return None;
                };
                Metric::conformal(n, &self.expr("metric.f", src, &vars)?)
            }
            "diagonal" => Metric::diagonal(list(self, "diagonal", &raw.diagonal, n)?),
            "general" => Metric::general(n, list(self, "components", &raw.components, n * (n + 1) / 2)?),
            other => {
                self.error(
                    "metric.kind",
                    None,
                    format!("unknown kind {other:?}; expected flat, conformal, diagonal or general"),
                );
                return None;
            }
        };
        match built {
            Ok(m) => {
                if let Err(e) = m.local(&vec![0.0; n]) {
                    self.error("metric", None, format!("at the origin: {e}"));
                }
                Some(m)
            }
            Err(e) => {
                self.error("metric", None, e.to_string());
                None
            }
        }
    }

    fn force(&mut self, n: usize, raw: Option<Spanned<RawForce>>) -> Option<Force> {
        let Some(raw) = raw else {
            return Some(Force { kind: "zero".into(), field: ForceField::Zero { n }, generating: None });
        };
        let at = raw.span().start;
        let raw = raw.into_inner();
        if n < 3 {
            self.error("force", Some(at), format!("force construction requires n ≥ 3, got n = {n}"));
        }
        let kind = raw.kind.clone();
        let mut generating = None;
        let field = match kind.as_str() {
            "zero" => Some(ForceField::Zero { n }),
            "generated" => {
                let h = match &raw.h {
                    Some(src) => self.expr("force.h", src, &level_vars()).map(|e| {
                        if e.is_zero() {
                            OneVar::Zero
                        } else {
                            OneVar::Expr(e)
                        }
                    }),
                    None => Some(OneVar::Zero),
                };
                let built = match (&raw.w, &raw.v) {
                    (Some(w), None) => {
                        let w = self.expr("force.w", w, &spherical_vars(n));
                        match (w, h) {
                            (Some(w), Some(h)) => Some(GeneratingFunction::from_w(n, &w, h)),
                            _ => None,
                        }
                    }
                    (None, Some(v)) => {
                        let v = self.expr("force.v", v, &normal_shift_core::forcefield::inverse_vars(n));
                        let [lo, hi] = raw.w_bracket.unwrap_or([DEFAULT_W_BRACKET.0, DEFAULT_W_BRACKET.1]);
                        match (v, h) {
                            (Some(v), Some(h)) => Some(GeneratingFunction::from_v(n, &v, h, (lo, hi))),
                            _ => None,
                        }
                    }
                    _ => {
                        self.error("force", Some(at), "a generated force needs exactly one of w or v");
                        None
                    }
                };
                match built {
                    Some(Ok(g)) => {
                        let g = match raw.v_bracket {
                            Some([lo, hi]) => g.with_v_bracket((lo, hi)),
                            None => g.with_v_bracket(DEFAULT_V_BRACKET),
                        };
                        if n >= 3 {
                            generating = Some(g.clone());
                            ForceField::generated(g).ok()
                        } else {
                            None
                        }
                    }
                    Some(Err(e)) => {
                        self.error("force", Some(at), e.to_string());
                        None
                    }
                    None => None,
                }
            }
            "conformal" => {
                let f = match &raw.f {
                    Some(src) => self.expr("force.f", src, &coordinate_vars(n)),
                    None => {
                        self.error("force.f", Some(at), "required for kind \"conformal\"");
                        None
                    }
                };
                let h = raw.speed_term.as_ref().map(|s| self.expr("force.speed_term", s, &speed_arg_vars()));
                match (f, h) {
                    (Some(f), None) => ForceField::conformal(n, &f, None).ok(),
                    (Some(f), Some(Some(h))) => ForceField::conformal(n, &f, Some(&h)).ok(),
                    _ => None,
                }
            }
            "inherited" => {
                let deformation =
                    self.deformation("force", n, raw.deformation.as_deref(), raw.f.as_ref(), raw.m.clone());
                let h = match &raw.speed_term {
                    Some(s) => match self.expr("force.speed_term", s, &extended_vars(n)) {
                        Some(e) => ExtendedScalar::new(n, &e).ok().map(Some),
                        None => None,
                    },
                    None => Some(None),
                };
                match (deformation, h) {
                    (Some(deformation), Some(h)) => Some(ForceField::Inherited { deformation, h }),
                    _ => None,
                }
            }
            "custom" => {
                let Some(items) = &raw.components else {
                    self.error("force.components", Some(at), "required for kind \"custom\"");
                    return None;
                };
                if items.len() != n {
                    self.error("force.components", Some(at), format!("needs {n} entries, got {}", items.len()));
                }
                let vars = extended_vars(n);
                let parsed: Vec<Option<Expr>> = items
                    .iter()
                    .enumerate()
                    .map(|(i, s)| self.expr(&format!("force.components[{i}]"), s, &vars))
                    .collect();
                let parsed: Option<Vec<Expr>> = parsed.into_iter().collect();
                parsed.filter(|p| p.len() == n).map(|p| ForceField::Custom {
                    components: p
                        .iter()
                        .map(|e| ExtendedScalar::new(n, e).expect("parsed over the extended variables"))
                        .collect(),
                })
            }
            other => {
                self.error(
                    "force.kind",
                    Some(at),
                    format!("unknown kind {other:?}; expected zero, generated, conformal, inherited or custom"),
                );
                None
            }
        };
        if n < 3 {
            return None;
        }
        field.map(|field| Force { kind, field, generating })
    }

    fn deformation(
        &mut self,
        block: &str,
        n: usize,
        kind: Option<&str>,
        f: Option<&Src>,
        m: Option<Vec<f64>>,
    ) -> Option<ConnectionDeformation> {
        match kind {
            Some("zero") => Some(ConnectionDeformation::Zero),
            Some("conformal") => {
                let Some(src) = f else {
                    self.error(&format!("{block}.f"), None, "required for a conformal deformation");
                    return None;
                };
                let e = self.expr(&format!("{block}.f"), src, &coordinate_vars(n))?;
                ConnectionDeformation::conformal(n, &e).ok()
            }
            Some("constant") => match m.map(|m| ConnectionDeformation::constant(n, m)) {
                Some(Ok(d)) => Some(d),
                Some(Err(e)) => {
                    self.error(&format!("{block}.m"), None, e.to_string());
                    None
                }
                None => {
                    self.error(&format!("{block}.m"), None, "required for a constant deformation");
                    None
                }
            },
            other => {
                self.error(
                    &format!("{block}.deformation"),
                    None,
                    format!("expected \"zero\", \"conformal\" or \"constant\", got {other:?}"),
                );
                None
            }
        }
    }

    fn integrate(&mut self, raw: RawIntegrate) -> (IntegratorOptions, Vec<f64>) {
        let mut opts = match raw.method.as_deref() {
            None | Some("rk4") => IntegratorOptions::rk4(raw.step.unwrap_or(DEFAULT_STEP)),
            Some("rk45") => IntegratorOptions::rk45(raw.rtol.unwrap_or(1e-10), raw.atol.unwrap_or(1e-12)),
            Some(other) => {
                self.error("integrate.method", None, format!("unknown method {other:?}; expected rk4 or rk45"));
                IntegratorOptions::default()
            }
        };
        if matches!(opts.method, Method::Rk45 { .. }) && raw.step.is_some() {
            self.error("integrate.step", None, "rk45 chooses its own steps; use rtol and atol");
        }
        if let Some(e) = raw.escape {
            opts.escape = e;
        }
        if let Some(m) = raw.max_steps {
            opts.max_steps = m;
        }
        if let Some(v) = raw.v_min {
            opts.v_min = v;
        }
        if let Err(e) = opts.validate() {
            self.error("integrate", None, e.to_string());
        }
        let t_end = raw.t_end.unwrap_or(1.0);
        let dt = raw.dt_out.unwrap_or(0.05);
        self.positive("integrate.t_end", t_end);
        self.positive("integrate.dt_out", dt);
        let grid = if t_end > 0.0 && dt > 0.0 { time_grid(t_end, dt) } else { vec![0.0] };
        (opts, grid)
    }

    fn check(&mut self, n: usize, raw: RawCheck, force: Option<&Force>) -> CheckSpec {
        let samples = raw.samples.unwrap_or(100);
        if samples == 0 {
            self.error("check.samples", None, "must be at least 1");
        }
        let transport = raw.transport.unwrap_or(0);
        if transport > 0 && force.is_some_and(|f| f.generating.is_none()) {
            self.error("check.transport", None, "the W transport check needs a generated force");
        }
        if let Some(t) = raw.tolerance {
            self.positive("check.tolerance", t);
        }
        CheckSpec {
            samples,
            x_box: self.boxed("check.x_box", n, raw.half_width, raw.x_box),
            speed: self.speed_range("check.speed", raw.speed),
            tolerance: raw.tolerance,
            transport,
            transport_tolerance: raw.transport_tolerance.unwrap_or(1e-6),
        }
    }

    fn shift(&mut self, n: usize, raw: RawShift, integrator: &IntegratorOptions) -> Option<ShiftSpec> {
        let vars = VarSet::new(raw.params.iter().map(String::as_str));
        if raw.params.len() + 1 != n {
            self.error("shift.params", None, format!("a hypersurface in dimension {n} needs {} parameters", n - 1));
        }
        if raw.maps.len() != n {
            self.error("shift.maps", None, format!("needs {n} coordinate maps, got {}", raw.maps.len()));
        }
        let maps: Vec<Option<Expr>> =
            raw.maps.iter().enumerate().map(|(i, s)| self.expr(&format!("shift.maps[{i}]"), s, &vars)).collect();
        let rect: Vec<(f64, f64)> = raw.rect.iter().map(|[a, b]| (*a, *b)).collect();
        let u0 = raw.u0.unwrap_or_else(|| rect.iter().map(|(a, b)| 0.5 * (a + b)).collect());
        let nu0 = raw.nu0.unwrap_or(1.0);
        let lattice = Lattice { counts: raw.lattice.unwrap_or_else(|| vec![DEFAULT_LATTICE; n - 1]) };
        let frame = self.frame("shift.frame", raw.frame.as_deref());
        if let Some(k) = raw.level_coordinate {
            if k == 0 || k > n {
                self.error("shift.level_coordinate", None, format!("must lie in 1..={n}"));
            }
        }
        let maps: Option<Vec<Expr>> = maps.into_iter().collect();
        let surface = match Hypersurface::new(vars, maps?, rect, raw.orientation.unwrap_or(1.0)) {
            Ok(s) => s,
            Err(e) => {
                self.error("shift", None, e.to_string());
                return None;
            }
        };
        Some(ShiftSpec {
            surface,
            u0,
            nu0,
            lattice,
            options: ShiftOptions { integrator: *integrator, frame, ..ShiftOptions::default() },
            tolerance: raw.tolerance.unwrap_or(NORMALITY_TOLERANCE),
            level_coordinate: raw.level_coordinate.map(|k| k.saturating_sub(1)),
            level_tolerance: raw.level_tolerance.unwrap_or(1e-6),
            w_tolerance: raw.w_tolerance,
        })
    }

    fn blowup(
        &mut self,
        n: usize,
        raw: RawBlowup,
        integrator: &IntegratorOptions,
        t_grid: &[f64],
    ) -> Option<BlowupSpec> {
        if raw.p0.len() != n {
            self.error("blowup.p0", None, format!("needs {n} coordinates, got {}", raw.p0.len()));
        }
        let frame = self.frame("blowup.frame", raw.frame.as_deref());
        let t_skip = raw.t_skip.unwrap_or(DEFAULT_T_SKIP);
        let end = t_grid.last().copied().unwrap_or(0.0);
        let window = raw.window.map_or((t_skip, end), |[a, b]| (a, b));
        if !(window.0 <= window.1) {
            self.error("blowup.window", None, "needs lo <= hi");
        }
        let mut counts = vec![9; n - 1];
        counts[n - 2] = 16;
        Some(BlowupSpec {
            p0: raw.p0,
            nu0: raw.nu0.unwrap_or(1.0),
            lattice: Lattice { counts: raw.lattice.unwrap_or(counts) },
            options: ShiftOptions {
                integrator: *integrator,
                frame,
                t_skip,
                polar_margin: raw.polar_margin.unwrap_or(DEFAULT_POLAR_MARGIN),
                ..ShiftOptions::default()
            },
            window,
            tolerance: raw.tolerance.unwrap_or(NORMALITY_TOLERANCE),
            front_tolerance: raw.front_tolerance,
        })
    }

    fn metrizability(&mut self, n: usize, raw: RawMetrizability) -> Option<MetrizabilitySpec> {
        let r = raw.reference;
        let deformation =
            self.deformation("metrizability.reference", n, Some(r.deformation.as_str()), r.f.as_ref(), r.m);
        let samples = raw.samples.unwrap_or(10);
        if samples == 0 {
            self.error("metrizability.samples", None, "must be at least 1");
        }
        let arc_length = raw.arc_length.unwrap_or(DEFAULT_ARC_LENGTH);
        self.positive("metrizability.arc_length", arc_length);
        Some(MetrizabilitySpec {
            reference: ForceField::Inherited { deformation: deformation?, h: None },
            samples,
            x_box: self.boxed("metrizability.x_box", n, raw.half_width, None),
            speed: self.speed_range("metrizability.speed", raw.speed),
            arc_length,
            resample: raw.resample.unwrap_or(DEFAULT_RESAMPLE),
            tolerance: raw.tolerance.unwrap_or(DEFAULT_INHERITANCE_TOLERANCE),
            normality_samples: raw.normality_samples.unwrap_or(100),
            normality_tolerance: raw.normality_tolerance.unwrap_or(1e-6),
        })
    }
}
