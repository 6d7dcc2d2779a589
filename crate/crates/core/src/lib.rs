//! Joint tile-wise FP8 quantization and sliding-tile sparse attention over
//! 3D (frame, height, width) token grids.
//!
//! The crate is organised bottom-up:
//!
//! - [`grid`]: token grids, tile partitions and the tile-contiguous row order.
//! - [`fp8`]: bit-exact E4M3 / E5M2 emulation with round-to-nearest-even.
//! - [`quantize`]: per-tile, per-channel, per-tensor, per-token and per-group
//!   scaling of whole matrices.
//! - [`sparsity`]: sliding-tile neighbourhoods and block masks.
//! - [`attention`]: full-precision dense and sparse oracles plus the quantized
//!   sparse forward pass.
//! - [`schedule`]: the early / mid / late denoising-step parameter schedule.
//! - [`metrics`]: cosine similarity, MSE, SNR and FLOP accounting.
//! - [`experiment`]: deterministic synthetic inputs, the per-step experiment
//!   loop, ablation sweeps and CSV output.
//!
//! All host arithmetic is `f32`; metric reductions use `f64`.

pub mod attention;
pub mod error;
pub mod experiment;
pub mod fp8;
pub mod grid;
pub mod matrix;
pub mod metrics;
pub mod quantize;
pub mod schedule;
pub mod sparsity;

pub use attention::{
    dense_reference, fps_forward, sparse_reference, AttentionInputs, AttentionOutput, FpsConfig,
};
pub use error::{Error, Result};
pub use fp8::{Fp8Code, Fp8Format, Fp8Kind, ScaleFactor};
pub use grid::{GridShape, TileCoord, TileMap, TileScheme};
pub use matrix::Matrix;
pub use quantize::{Granularity, QuantizedTensor};
pub use schedule::{Regime, RegimeParams, ScheduleConfig};
pub use sparsity::{BlockMask, WindowSpec};
