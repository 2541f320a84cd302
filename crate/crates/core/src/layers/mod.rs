//! Non-attention building blocks.
//!
//! Activations are token matrices of shape `(batch · tokens) × channels`;
//! images in a batch are contiguous blocks of rows and each block is a
//! row-major walk over its spatial grid (optionally preceded by a cls row).
//! Every layer has a `forward` returning its output plus a cache, and a
//! `backward` consuming that cache, accumulating parameter gradients and
//! returning the input gradient.

pub mod bifc;
pub mod embed;
pub mod layerscale;
pub mod linear;
pub mod norm;
pub mod pool;
pub mod rprelu;
pub mod shortcut;

pub use bifc::{BiFCLayer, BinaryWeight};
pub use embed::{patchify, PatchEmbed, Precision};
pub use layerscale::LayerScale;
pub use linear::Linear;
pub use norm::BatchNorm;
pub use pool::{global_avg_pool, multi_pool_branches};
pub use rprelu::RPReLU;
pub use shortcut::shortcut_r;

use crate::quant::Quantizer;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalization layers.
    Train,
    /// Running statistics; the model is read-only.
    Infer,
}

/// Per-pass execution settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ctx {
    pub mode: Mode,
    pub quant: Quantizer,
}

impl Ctx {
    pub const INFER: Ctx = Ctx { mode: Mode::Infer, quant: Quantizer::Exact };
    pub const TRAIN: Ctx = Ctx { mode: Mode::Train, quant: Quantizer::Exact };
    /// Train-mode statistics with the smooth straight-through surrogate.
    pub const SURROGATE: Ctx = Ctx { mode: Mode::Train, quant: Quantizer::Surrogate };
}

/// Token layout of a batch of images.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    /// A leading class token precedes the spatial tokens of every image.
    pub cls: bool,
}

impl Grid {
    pub fn spatial(batch: usize, h: usize, w: usize) -> Self {
        Self { batch, h, w, cls: false }
    }

    pub fn tokens(&self) -> usize {
        self.h * self.w + usize::from(self.cls)
    }

    pub fn rows(&self) -> usize {
        self.batch * self.tokens()
    }
}
