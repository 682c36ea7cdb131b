//! Bracketed Newton–bisection for monotone scalar equations.

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum RootError {
    #[error("no sign change on [{lo}, {hi}] (f = {flo:e}, {fhi:e})")]
    NotBracketed { lo: f64, hi: f64, flo: f64, fhi: f64 },
    #[error("function is not finite at {at}")]
    NonFinite { at: f64 },
    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RootOptions {
    /// Absolute residual accepted as converged.
    pub f_tol: f64,
    pub max_iter: usize,
}

impl Default for RootOptions {
    fn default() -> Self {
        RootOptions { f_tol: 1e-13, max_iter: 200 }
    }
}

/// Root of `f` in `[lo, hi]`. `f` returns `(value, derivative)`; errors from
/// `f` are passed through unchanged.
///
/// Newton steps are taken when they stay strictly inside the current
/// bracket and shrink it fast enough; otherwise the bracket is bisected.
pub fn solve<E, F>(mut f: F, lo: f64, hi: f64, opts: RootOptions) -> Result<f64, E>
where
    F: FnMut(f64) -> Result<(f64, f64), E>,
    E: From<RootError>,
{
    let (mut a, mut b) = if lo <= hi { (lo, hi) } else { (hi, lo) };
    let (fa, _) = f(a)?;
    let (fb, _) = f(b)?;
    if !fa.is_finite() {
        return Err(RootError::NonFinite { at: a }.into());
    }
    if !fb.is_finite() {
        return Err(RootError::NonFinite { at: b }.into());
    }
    if fa == 0.0 {
        return Ok(a);
    }
    if fb == 0.0 {
        return Ok(b);
    }
    if fa.signum() == fb.signum() {
        return Err(RootError::NotBracketed { lo: a, hi: b, flo: fa, fhi: fb }.into());
    }
    let rising = fb > 0.0;
    let mut x = 0.5 * (a + b);
    let mut step = b - a;
    let mut prev_step = step;
    let mut best = (f64::INFINITY, x);
    for _ in 0..opts.max_iter {
        let (fx, dfx) = f(x)?;
        if !fx.is_finite() {
            return Err(RootError::NonFinite { at: x }.into());
        }
        if fx.abs() < best.0 {
            best = (fx.abs(), x);
        }
        if fx.abs() <= opts.f_tol {
            return Ok(x);
        }
        if (fx > 0.0) == rising {
            b = x;
        } else {
            a = x;
        }
        if b - a <= 4.0 * f64::EPSILON * x.abs().max(1e-300) {
            return Ok(x);
        }
        let newton = x - fx / dfx;
        // bisect when Newton leaves the bracket or is not shrinking fast enough
        let usable = dfx.is_finite() && dfx != 0.0 && newton > a && newton < b;
        if usable && (2.0 * fx).abs() <= (prev_step * dfx).abs() {
            prev_step = step;
            step = x - newton;
            x = newton;
        } else {
            prev_step = step;
            step = 0.5 * (b - a);
            x = a + step;
        }
    }
    if best.0 <= 1e3 * opts.f_tol {
        return Ok(best.1);
    }
    Err(RootError::NoConvergence { iterations: opts.max_iter, residual: best.0 }.into())
}
