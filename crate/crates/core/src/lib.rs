pub mod error;
pub mod linalg;
pub mod model;
pub mod rng;
pub mod schemes;
pub mod sphere;
pub mod stability;
pub mod weights;
pub mod quadrature;
pub mod montecarlo;
pub mod cli;
