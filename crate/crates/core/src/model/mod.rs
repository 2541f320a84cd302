//! Network assembly: pyramid (or flat) stages of patch embedding, position
//! embedding and transformer blocks, followed by a final normalization,
//! pooling and a full-precision classifier.

pub mod block;
pub mod config;
pub mod io;

pub use block::Block;
pub use config::{ModelConfig, Pooling, StageConfig};
pub use io::{load_weights, save_weights};

use crate::error::{shape_err, Result};
use crate::init::{Init, INIT_STD};
use crate::layers::embed::{EmbedCache, Projection};
use crate::layers::norm::BnCache;
use crate::layers::pool::{mean_pool_backward, mean_pool_batched};
use crate::layers::{BatchNorm, Ctx, Grid, Linear, PatchEmbed, Precision};
use crate::param::{join, Param, StateMut, StateRef, Stateful};
use crate::tensor::FloatTensor;

use block::BlockCache;

#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub embed: PatchEmbed,
    /// `tokens × C` learnable position embedding.
    pub pos: Option<Param>,
    pub blocks: Vec<Block>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub stages: Vec<Stage>,
    /// `1 × C₀`, present with class-token pooling.
    pub cls_token: Option<Param>,
    pub norm: BatchNorm,
    pub head: Linear,
}

#[derive(Debug, Clone)]
struct StageCache {
    embed: EmbedCache,
    blocks: Vec<BlockCache>,
}

/// Activations recorded by [`Model::forward_batch`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ModelCache {
    stages: Vec<StageCache>,
    grids: Vec<Grid>,
    norm: BnCache,
    pooled: FloatTensor,
}

impl ModelCache {
    /// Token grid of each stage, as traversed.
    pub fn grids(&self) -> &[Grid] {
        &self.grids
    }
}

pub fn build_model(cfg: ModelConfig, seed: u64) -> Result<Model> {
    Model::build(cfg, seed)
}

impl Model {
    pub fn build(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut init = Init::new(seed);
        let cls = cfg.pooling == Pooling::ClsToken;
        let sides = cfg.stage_sides();
        let mut c_in = cfg.in_channels;
        let mut stages = Vec::with_capacity(cfg.stages.len());
        for (i, (s, &side)) in cfg.stages.iter().zip(&sides).enumerate() {
            let d_in = s.patch * s.patch * c_in;
            let proj = if i == 0 || cfg.mid_patch_embed_precision == Precision::Full {
                Projection::Full(init.linear(d_in, s.dim))
            } else {
                Projection::Binary(init.bifc(d_in, s.dim)?)
            };
            let tokens = side * side + usize::from(cls);
            let pos = s.pos_embed.then(|| Param::new(init.trunc_normal(&[tokens, s.dim], INIT_STD)));
            let kv_side = side / s.reduction;
            let kv_tokens = kv_side * kv_side + usize::from(cls);
            let blocks = (0..s.blocks)
                .map(|_| Block::new(s, kv_tokens, cfg.use_layerscale, cfg.use_multibranch, &mut init))
                .collect::<Result<_>>()?;
            stages.push(Stage { embed: PatchEmbed { patch: s.patch, proj }, pos, blocks });
            c_in = s.dim;
        }
        let cls_token = cls.then(|| Param::new(init.trunc_normal(&[1, cfg.stages[0].dim], INIT_STD)));
        let head = init.linear(c_in, cfg.num_classes);
        Ok(Self { stages, cls_token, norm: BatchNorm::new(c_in), head, cfg })
    }

    /// Validates an `H × W × C` image of `[0, 255]` values and normalizes
    /// it into an `(H·W) × C` token matrix.
    pub fn preprocess(&self, image: &FloatTensor) -> Result<FloatTensor> {
        let cfg = &self.cfg;
        let want = [cfg.img_size, cfg.img_size, cfg.in_channels];
        if image.shape() != want {
            return shape_err(format!("expected a {want:?} image, got {:?}", image.shape()));
        }
        let c = cfg.in_channels;
        let mut x = image.as_matrix().reshape(vec![cfg.img_size * cfg.img_size, c])?;
        for row in x.data_mut().chunks_exact_mut(c) {
            for ((v, m), s) in row.iter_mut().zip(&cfg.norm_mean).zip(&cfg.norm_std) {
                *v = (*v - m) / s;
            }
        }
        Ok(x)
    }

    /// Logits of one image in inference mode.
    pub fn forward(&self, image: &FloatTensor) -> Result<Vec<f64>> {
        let x = self.preprocess(image)?;
        Ok(self.forward_batch(&x, 1, Ctx::INFER)?.0.into_data())
    }

    /// Token grid of every stage for one image.
    pub fn trace_grids(&self, image: &FloatTensor) -> Result<Vec<Grid>> {
        let x = self.preprocess(image)?;
        Ok(self.forward_batch(&x, 1, Ctx::INFER)?.1.grids)
    }

    /// Forward pass over `batch` preprocessed images stacked as
    /// `(batch·H·W) × C`; returns `batch × classes` logits.
    pub fn forward_batch(&self, x: &FloatTensor, batch: usize, ctx: Ctx) -> Result<(FloatTensor, ModelCache)> {
        let side = self.cfg.img_size;
        let mut grid = Grid::spatial(batch, side, side);
        if x.rows() != grid.rows() || x.cols() != self.cfg.in_channels {
            return shape_err(format!(
                "expected {} × {} input rows for {batch} images, got {:?}",
                grid.rows(),
                self.cfg.in_channels,
                x.shape()
            ));
        }
        let mut h = x.as_matrix();
        let mut caches = Vec::with_capacity(self.stages.len());
        let mut grids = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let (out, g, embed) = stage.embed.forward(&h, grid, ctx)?;
            h = out;
            grid = g;
            if let Some(cls) = &self.cls_token {
                h = prepend_cls(&h, cls.data(), grid);
                grid.cls = true;
            }
            if let Some(pos) = &stage.pos {
                add_per_image(&mut h, pos.data());
            }
            let mut blocks = Vec::with_capacity(stage.blocks.len());
            for block in &stage.blocks {
                let (out, c) = block.forward(&h, grid, ctx)?;
                h = out;
                blocks.push(c);
            }
            caches.push(StageCache { embed, blocks });
            grids.push(grid);
        }
        let (hn, norm) = self.norm.forward(&h, ctx)?;
        let pooled = match self.cfg.pooling {
            Pooling::ClsToken => {
                let rows = (0..batch).flat_map(|b| hn.row(b * grid.tokens()).to_vec()).collect();
                FloatTensor::matrix(batch, hn.cols(), rows)?
            }
            Pooling::GlobalAvg => mean_pool_batched(&hn, batch, grid.tokens())?,
        };
        let logits = self.head.forward(&pooled)?;
        Ok((logits, ModelCache { stages: caches, grids, norm, pooled }))
    }

    /// Accumulates gradients of every learnable tensor given the logits
    /// gradient; returns the gradient with respect to the model input.
    pub fn backward(&mut self, cache: ModelCache, dlogits: &FloatTensor) -> Result<FloatTensor> {
        let ModelCache { stages, grids, norm, pooled } = cache;
        let dpooled = self.head.backward(&pooled, dlogits);
        let last = *grids.last().expect("at least one stage");
        let dhn = match self.cfg.pooling {
            Pooling::ClsToken => {
                let mut d = FloatTensor::zeros(&[last.rows(), dpooled.cols()]);
                for b in 0..last.batch {
                    d.row_mut(b * last.tokens()).copy_from_slice(dpooled.row(b));
                }
                d
            }
            Pooling::GlobalAvg => mean_pool_backward(&dpooled, last.tokens()),
        };
        let mut dh = self.norm.backward(norm, &dhn);
        for ((stage, sc), grid) in self.stages.iter_mut().zip(stages).zip(grids).rev() {
            for (block, bc) in stage.blocks.iter_mut().zip(sc.blocks).rev() {
                dh = block.backward(bc, &dh)?;
            }
            if let Some(pos) = &mut stage.pos {
                pos.accumulate(&sum_per_image(&dh, grid.tokens()));
            }
            if let Some(cls) = &mut self.cls_token {
                let mut dcls = vec![0.0; dh.cols()];
                for b in 0..grid.batch {
                    for (d, s) in dcls.iter_mut().zip(dh.row(b * grid.tokens())) {
                        *d += s;
                    }
                }
                cls.accumulate(&dcls);
                dh = strip_cls(&dh, grid);
            }
            dh = stage.embed.backward(sc.embed, &dh)?;
        }
        Ok(dh)
    }

    /// Re-derives every binary weight from its latent copy.
    pub fn refresh_binary(&mut self) -> Result<()> {
        let mut all = Vec::new();
        self.state_mut("", &mut all);
        for (_, s) in all {
            if let StateMut::Binary(b) = s {
                b.refresh()?;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.params_mut("") {
            p.zero_grad();
        }
    }
}

fn prepend_cls(h: &FloatTensor, cls: &[f64], grid: Grid) -> FloatTensor {
    let n = grid.h * grid.w;
    let c = h.cols();
    let mut data = Vec::with_capacity((h.rows() + grid.batch) * c);
    for b in 0..grid.batch {
        data.extend_from_slice(cls);
        data.extend_from_slice(&h.data()[b * n * c..(b + 1) * n * c]);
    }
    FloatTensor::matrix(grid.batch * (n + 1), c, data).expect("consistent dims")
}

fn strip_cls(h: &FloatTensor, grid: Grid) -> FloatTensor {
    let t = grid.tokens();
    let c = h.cols();
    let mut data = Vec::with_capacity((h.rows() - grid.batch) * c);
    for b in 0..grid.batch {
        data.extend_from_slice(&h.data()[(b * t + 1) * c..(b + 1) * t * c]);
    }
    FloatTensor::matrix(grid.batch * (t - 1), c, data).expect("consistent dims")
}

/// Adds a `tokens × C` table to every image block of rows.
fn add_per_image(h: &mut FloatTensor, table: &[f64]) {
    for chunk in h.data_mut().chunks_exact_mut(table.len()) {
        for (v, p) in chunk.iter_mut().zip(table) {
            *v += p;
        }
    }
}

fn sum_per_image(dh: &FloatTensor, tokens: usize) -> Vec<f64> {
    let n = tokens * dh.cols();
    let mut out = vec![0.0; n];
    for chunk in dh.data().chunks_exact(n) {
        for (o, d) in out.iter_mut().zip(chunk) {
            *o += d;
        }
    }
    out
}

impl Stateful for Stage {
    fn state<'a>(&'a self, prefix: &str, out: &mut Vec<(String, StateRef<'a>)>) {
        self.embed.state(&join(prefix, "embed"), out);
        if let Some(p) = &self.pos {
            out.push((join(prefix, "pos"), StateRef::Param(p)));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            b.state(&join(prefix, &format!("blocks.{i}")), out);
        }
    }

    fn state_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, StateMut<'a>)>) {
        self.embed.state_mut(&join(prefix, "embed"), out);
        if let Some(p) = &mut self.pos {
            out.push((join(prefix, "pos"), StateMut::Param(p)));
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.state_mut(&join(prefix, &format!("blocks.{i}")), out);
        }
    }
}

impl Stateful for Model {
    fn state<'a>(&'a self, prefix: &str, out: &mut Vec<(String, StateRef<'a>)>) {
        if let Some(c) = &self.cls_token {
            out.push((join(prefix, "cls_token"), StateRef::Param(c)));
        }
        for (i, s) in self.stages.iter().enumerate() {
            s.state(&join(prefix, &format!("stages.{i}")), out);
        }
        self.norm.state(&join(prefix, "norm"), out);
        self.head.state(&join(prefix, "head"), out);
    }

    fn state_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, StateMut<'a>)>) {
        if let Some(c) = &mut self.cls_token {
            out.push((join(prefix, "cls_token"), StateMut::Param(c)));
        }
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.state_mut(&join(prefix, &format!("stages.{i}")), out);
        }
        self.norm.state_mut(&join(prefix, "norm"), out);
        self.head.state_mut(&join(prefix, "head"), out);
    }
}
