pub mod allocation;
pub mod autograd;
pub mod cka;
pub mod encoder;
pub mod error;
pub mod experiments;
pub mod fusion_loss;
pub mod io;
pub mod numerics;
pub mod optimizer;
pub mod stats;

pub use error::{Error, Result};

pub type Matrix = numerics::DenseMatrix<f64>;
pub type Matrix32 = numerics::DenseMatrix<f32>;
