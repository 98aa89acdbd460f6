pub mod adapt;
pub mod augment;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod seed;
pub mod tensor;
pub mod volume;
