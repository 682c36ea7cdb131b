//! Admissible force fields and the normality residuals.

mod ansatz;
mod force;
mod generating;
mod residual;

pub use ansatz::*;
pub use force::*;
pub use generating::*;
pub use residual::*;
