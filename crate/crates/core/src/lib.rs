pub mod coupling;
pub mod distributions;
pub mod error;
pub mod experiment;
pub mod integrate;
pub mod linalg;
pub mod ot;
pub mod rectify;
pub mod rng;
pub mod scenario;
pub mod velocity;
