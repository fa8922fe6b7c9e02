//! Core physics and data layer: dense statevector simulation, Haar sampling,
//! classical shadows and their estimators, dataset generation, exact ground
//! states of the ANNNI chain and the local geometric entanglement measure.

pub mod datagen;
pub mod gem;
pub mod groundstate;
pub mod metrics;
pub mod qsim;
pub mod randunit;
pub mod rng;
pub mod shadows;

pub use num_complex::Complex64 as C64;
