pub mod analysis;
pub mod attention;
pub mod bittensor;
pub mod error;
pub mod init;
pub mod kink;
pub mod layers;
pub mod model;
pub mod param;
pub mod quant;
pub mod tensor;
pub mod train;
