pub mod bmo;
pub mod dyadic;
pub mod error;
pub mod experiments;
pub mod kernel;
pub mod mesh;
pub mod models;
pub mod pairing;
pub mod quadrature;
pub mod representation;
pub mod rng;
pub mod sparse;
