pub mod diffusion;
pub mod framing;
pub mod metrics;
pub mod ndgrad;
pub mod nets;
pub mod rng;
pub mod schedule;
pub mod synthdata;
pub mod training;
