//! Mixed-frequency panel imputation with approximate factor models.
//!
//! The crate covers calendar grids and aggregation, static and dynamic
//! factor estimators, a Kalman filter and smoother with missing data, and
//! the imputation methods built on top of them.

pub mod error;
pub mod evaluation;
pub mod factors;
pub mod grid;
pub mod imputers;
pub mod io;
pub mod linalg;
pub mod panel;
pub mod simulation;
pub mod state_space;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub use factors::{FactorEstimate, FactorMethod, VarDynamics};
pub use grid::{GridSpec, TimeGrid};
pub use linalg::{Mat, Vector};
pub use panel::{ObservationMask, Panel};
pub use state_space::StateSpaceModel;
