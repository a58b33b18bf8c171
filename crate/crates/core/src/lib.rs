//! Gradient-free few-shot adaptation: learn a drift field from bias
//! fine-tuning trajectories, then adapt unseen tasks by integrating it.

pub mod ablation;
pub mod autodiff;
pub mod checkpoint;
pub mod cost;
pub mod counters;
pub mod drift;
pub mod episodes;
pub mod model;
pub mod error;
pub mod eval;
pub mod flows;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod solver;
pub mod tensor;
pub mod trajectories;

mod binio;

pub use error::{Error, Result};
pub use tensor::Tensor;
