//! Particle solver for McKean-Vlasov forward-backward SDEs driven by
//! Brownian motion and a finite-intensity Poisson random measure, with
//! extraction of the decoupling field V(t, x, mu), its first-order x- and
//! measure-derivatives, and master-equation residual checking.

pub mod backward;
pub mod cli;
pub mod drivers;
pub mod error;
pub mod forward;
pub mod master;
pub mod measure;
pub mod model;
pub mod oracle;
pub mod picard;
pub mod regression;
pub mod sensitivity;

pub use error::{Error, Result};
