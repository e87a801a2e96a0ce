pub mod config;
pub mod data;
pub mod decoder;
pub mod discriminator;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod invariants;
pub mod kvmn;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod train;
