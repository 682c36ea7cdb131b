//! Random extended points for residual and inheritance sweeps. The caller
//! supplies the uniform source, so the core stays RNG-agnostic.

use alloc::vec::Vec;

use crate::geometry::Metric;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SampleDomain {
    /// Per-coordinate bounds for `x`.
    pub x_box: Vec<(f64, f64)>,
    /// Bounds for the g-speed `|v|`.
    pub speed: (f64, f64),
}

impl SampleDomain {
    pub fn cube(n: usize, half_width: f64, speed: (f64, f64)) -> Self {
        SampleDomain { x_box: alloc::vec![(-half_width, half_width); n], speed }
    }

    pub fn dim(&self) -> usize {
        self.x_box.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.x_box.iter().any(|(a, b)| !(a <= b)) || !(0.0 < self.speed.0 && self.speed.0 <= self.speed.1) {
            return Err(Error::Precondition("sample domain needs lo <= hi and a positive speed range".into()));
        }
        Ok(())
    }

    /// One `(x, v)` with `x` uniform in the box, direction uniform on the
    /// Euclidean sphere then g-normalized, speed uniform in range.
    /// `uniform` must return values in `[0, 1)`.
    pub fn draw(&self, metric: &Metric, uniform: &mut dyn FnMut() -> f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = self.dim();
        let x: Vec<f64> = self.x_box.iter().map(|(a, b)| a + (b - a) * uniform()).collect();
        let dir = loop {
            let d: Vec<f64> = (0..n).map(|_| gaussian(uniform)).collect();
            if d.iter().map(|c| c * c).sum::<f64>() > 1e-12 {
                break d;
            }
        };
        let g_norm = metric.speed(&x, &dir)?;
        let s = self.speed.0 + (self.speed.1 - self.speed.0) * uniform();
        Ok((x, dir.into_iter().map(|c| c * s / g_norm).collect()))
    }

    pub fn draw_many(
        &self,
        metric: &Metric,
        count: usize,
        uniform: &mut dyn FnMut() -> f64,
    ) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        self.validate()?;
        (0..count).map(|_| self.draw(metric, uniform)).collect()
    }
}

/// Box–Muller.
fn gaussian(uniform: &mut dyn FnMut() -> f64) -> f64 {
    let u1 = 1.0 - uniform();
    let u2 = uniform();
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * core::f64::consts::PI * u2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn draws_respect_the_domain() {
        let mut state = 12345u64;
        let mut uniform = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        let d = SampleDomain::cube(3, 0.5, (0.5, 2.0));
        let flat = Metric::flat(3);
        for (x, v) in d.draw_many(&flat, 200, &mut uniform).unwrap() {
            assert!(x.iter().all(|c| c.abs() <= 0.5));
            let s = flat.speed(&x, &v).unwrap();
            assert!((0.5..=2.0).contains(&s));
        }
        assert!(SampleDomain::cube(3, 0.5, (0.0, 1.0)).validate().is_err());
    }
}
