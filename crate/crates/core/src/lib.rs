//! Monotonically disentangled graph variational autoencoder for molecules.

pub mod chem;
pub mod container;
pub mod dataset;
pub mod autodiff;
pub mod decoder;
pub mod encoder;
pub mod heads;
pub mod model;
pub mod objectives;
pub mod evaluation;
pub mod training;
