//! Command-line and HTTP front end for detector explanations.

pub mod api;
pub mod cli;
pub mod error;
pub mod ops;
pub mod session;
