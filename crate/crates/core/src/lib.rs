//! Joint finite-mixture model for longitudinal ordinal responses and survival times.
//!
//! Ordinal responses follow an ordered stereotype model and survival times a Cox model
//! whose linear predictor shares the latent group effect. Parameters are estimated by EM
//! with the Breslow baseline profiled out; standard errors come from the empirical
//! efficient information. The [`inference`] module holds numeric checks of the
//! efficiency theory and [`simulation`] a Monte Carlo harness.

pub mod data;
pub mod em;
pub mod error;
pub mod inference;
pub mod io;
pub mod math;
pub mod optim;
pub mod ordinal;
pub mod params;
pub mod simulation;
pub mod survival;

pub use data::{Dataset, SubjectRecord};
pub use em::{e_step, em_fit, m_step_pi, m_step_theta, observed_loglik, EMConfig, FitResult, Posterior};
pub use error::{Error, Result};
pub use ordinal::{OrdinalParams, ResponseCell, ResponseSet};
pub use params::{ModelParams, ParamLayout};
pub use survival::{Baseline, HazardSteps, SurvivalParams, SurvivalRecord};
