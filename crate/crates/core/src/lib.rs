pub mod ansatz;
pub mod autograd;
pub mod config;
pub mod controller;
pub mod diagnostics;
pub mod error;
pub mod qrnn;
pub mod statevector;
pub mod tasks;
pub mod training;

pub use error::{Error, Result};
