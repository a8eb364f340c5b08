pub mod checkpoint;
pub mod data;
pub mod decoders;
pub mod error;
pub mod mae;
pub mod model;
pub mod plot;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod vit;
