//! Heterogeneous treatment-effect estimation for survival outcomes under
//! staggered treatment adoption.

pub mod basis;
pub mod bench;
pub mod coxtv;
pub mod data;
pub mod error;
pub mod estimators;
pub mod heart;
pub mod penalized;
pub mod propensity;
pub mod simulate;

pub use coxtv::{newton_fit, NewtonConfig, PartialLikelihood, PartialLikelihoodProblem};
pub use data::{expand_to_episodes, risk_set, Dataset, EpisodeRow, FitResult, SubjectRecord};
pub use error::{Error, Result};
