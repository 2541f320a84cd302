use crate::attention::{AttnCache, BiAttention, BiMHAConfig};
use crate::error::Result;
use crate::init::Init;
use crate::layers::bifc::BiFCCache;
use crate::layers::norm::BnCache;
use crate::layers::pool::{multi_pool_backward, multi_pool_forward};
use crate::layers::{BatchNorm, BiFCLayer, Ctx, Grid, LayerScale};
use crate::param::{join, StateMut, StateRef, Stateful};
use crate::tensor::FloatTensor;

use super::config::StageConfig;

/// One transformer block:
/// `H' = LS₁(Attn(BN₁(H))) + H`, `out = LS₂(FFN(BN₂(H')) [+ pools(BN₂(H'))]) + H'`.
/// Without LayerScale the residual adds are plain sums.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub bn1: BatchNorm,
    pub attn: BiAttention,
    pub ls1: Option<LayerScale>,
    pub bn2: BatchNorm,
    pub fc1: BiFCLayer,
    pub fc2: BiFCLayer,
    pub ls2: Option<LayerScale>,
    pub multibranch: bool,
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    grid: Grid,
    bn1: BnCache,
    attn: AttnCache,
    attn_out: FloatTensor,
    bn2: BnCache,
    fc1: BiFCCache,
    fc2: BiFCCache,
    ffn_out: FloatTensor,
}

fn residual(ls: &Option<LayerScale>, branch: &FloatTensor, skip: &FloatTensor) -> Result<FloatTensor> {
    match ls {
        Some(ls) => ls.forward(branch, skip),
        None => branch.zip_map(skip, |b, s| b + s),
    }
}

fn residual_backward(ls: &mut Option<LayerScale>, branch: &FloatTensor, dout: &FloatTensor) -> FloatTensor {
    match ls {
        Some(ls) => ls.backward(branch, dout),
        None => dout.clone(),
    }
}

impl Block {
    pub fn new(
        stage: &StageConfig,
        kv_tokens: usize,
        layerscale: bool,
        multibranch: bool,
        init: &mut Init,
    ) -> Result<Self> {
        let d = stage.dim;
        let cfg = BiMHAConfig::new(d, stage.heads, stage.reduction)?;
        let ls = || layerscale.then(|| LayerScale::new(d));
        Ok(Self {
            bn1: BatchNorm::new(d),
            attn: BiAttention::new(cfg, kv_tokens, init)?,
            ls1: ls(),
            bn2: BatchNorm::new(d),
            fc1: init.bifc(d, d * stage.ffn_expansion)?,
            fc2: init.bifc(d * stage.ffn_expansion, d)?,
            ls2: ls(),
            multibranch,
        })
    }

    pub fn forward(&self, x: &FloatTensor, grid: Grid, ctx: Ctx) -> Result<(FloatTensor, BlockCache)> {
        let (f1, bn1) = self.bn1.forward(x, ctx)?;
        let (attn_out, attn) = self.attn.forward(&f1, grid, ctx)?;
        let x1 = residual(&self.ls1, &attn_out, x)?;

        let (f2, bn2) = self.bn2.forward(&x1, ctx)?;
        let (hidden, fc1) = self.fc1.forward(&f2, ctx)?;
        let (mut ffn_out, fc2) = self.fc2.forward(&hidden, ctx)?;
        if self.multibranch {
            ffn_out.add_assign(&multi_pool_forward(&f2, grid)?);
        }
        let out = residual(&self.ls2, &ffn_out, &x1)?;
        Ok((out, BlockCache { grid, bn1, attn, attn_out, bn2, fc1, fc2, ffn_out }))
    }

    pub fn backward(&mut self, cache: BlockCache, dout: &FloatTensor) -> Result<FloatTensor> {
        let dffn = residual_backward(&mut self.ls2, &cache.ffn_out, dout);
        let dhidden = self.fc2.backward(cache.fc2, &dffn)?;
        let mut df2 = self.fc1.backward(cache.fc1, &dhidden)?;
        if self.multibranch {
            df2.add_assign(&multi_pool_backward(&dffn, cache.grid));
        }
        let mut dx1 = dout.clone();
        dx1.add_assign(&self.bn2.backward(cache.bn2, &df2));

        let dattn = residual_backward(&mut self.ls1, &cache.attn_out, &dx1);
        let df1 = self.attn.backward(cache.attn, &dattn)?;
        let mut dx = dx1;
        dx.add_assign(&self.bn1.backward(cache.bn1, &df1));
        Ok(dx)
    }
}

impl Stateful for Block {
    fn state<'a>(&'a self, prefix: &str, out: &mut Vec<(String, StateRef<'a>)>) {
        self.bn1.state(&join(prefix, "bn1"), out);
        self.attn.state(&join(prefix, "attn"), out);
        if let Some(ls) = &self.ls1 {
            ls.state(&join(prefix, "ls1"), out);
        }
        self.bn2.state(&join(prefix, "bn2"), out);
        self.fc1.state(&join(prefix, "fc1"), out);
        self.fc2.state(&join(prefix, "fc2"), out);
        if let Some(ls) = &self.ls2 {
            ls.state(&join(prefix, "ls2"), out);
        }
    }

    fn state_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, StateMut<'a>)>) {
        self.bn1.state_mut(&join(prefix, "bn1"), out);
        self.attn.state_mut(&join(prefix, "attn"), out);
        if let Some(ls) = &mut self.ls1 {
            ls.state_mut(&join(prefix, "ls1"), out);
        }
        self.bn2.state_mut(&join(prefix, "bn2"), out);
        self.fc1.state_mut(&join(prefix, "fc1"), out);
        self.fc2.state_mut(&join(prefix, "fc2"), out);
        if let Some(ls) = &mut self.ls2 {
            ls.state_mut(&join(prefix, "ls2"), out);
        }
    }
}
