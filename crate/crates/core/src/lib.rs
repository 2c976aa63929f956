//! Two-stage density surface modelling for line-transect distance sampling.

pub mod abundance;
pub mod commands;
pub mod config;
pub mod data;
pub mod detection;
pub mod diagnostics;
pub mod error;
pub mod family;
pub mod gam;
pub mod groupsize;
pub mod linalg;
pub mod optim;
pub mod quadrature;
pub mod sim;
pub mod smooth;
pub mod varprop;

pub use error::{DsmError, Result};
