//! Semantic-guided learned image compression.
//!
//! An image is mapped to a visual latent by a convolutional analysis
//! transform, fused with a projected text embedding of an automatically
//! generated caption, and coded with a hyperprior plus channel-wise
//! autoregressive Gaussian entropy model driving a 64-bit rANS coder. The
//! decoder needs only the bitstream and the model weights.

pub mod autoencoder;
pub mod checkpoint;
pub mod codec;
pub mod coder;
pub mod config;
pub mod entropy;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod image;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod semantic;
pub mod train;

pub use coder::{check_fast_abi, CdfTable, CoderBackend, CoderBuffers, FAST_CODER_ABI_VERSION};
pub use config::{ModelConfig, LAMBDA_PRESETS};
pub use error::{Result, SelicError};
pub use fusion::{FusionStrategy, FusedLatent, SemanticVector};
pub use image::ImagePlane;
pub use codec::{decode_image, encode_image, SelicBitstream};
pub use model::SelicModel;
pub use checkpoint::Checkpoint;
pub use metrics::{bd_rate, ms_ssim, psnr, RdCurve, RdPoint};
pub use train::{RdLoss, TrainSchedule, Trainer};
pub use semantic::{Caption, RawTextEmbedding, SemanticPipeline};
pub use autoencoder::VisualLatent;
pub use entropy::{GaussianParams, HyperLatent, QuantizedLatent};
