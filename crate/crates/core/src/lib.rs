pub mod baselines;
pub mod charfn;
pub mod error;
pub mod experiment;
pub mod fisher;
pub mod gmm;
pub mod levy_sim;
pub mod moments;
pub mod quad;
pub mod rng;
pub mod theta;

pub use error::{Error, Result};
