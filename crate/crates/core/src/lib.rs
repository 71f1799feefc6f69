pub mod closed_loop;
pub mod config;
pub mod error;
pub mod harness;
pub mod integrate;
pub mod lqr;
pub mod mpc;
pub mod policy;
pub mod qp;
pub mod rl;
pub mod seed;
pub mod systems;

pub use error::{Error, Result};
