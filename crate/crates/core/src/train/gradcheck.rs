//! Finite-difference verification of the surrogate backward passes.
//!
//! Each case builds a small module at a random point, evaluates the scalar
//! loss `L = Σ u ⊙ y` for a random `u`, and compares the analytic gradient
//! (input and every learnable tensor) against central differences. Points
//! whose forward pass comes within `min_margin` of a non-smooth site are
//! redrawn.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::attention::{BiAttention, BiMHAConfig};
use crate::error::{Error, Result};
use crate::init::Init;
use crate::kink;
use crate::layers::pool::{multi_pool_backward, multi_pool_forward};
use crate::layers::{BatchNorm, BiFCLayer, Ctx, Grid, LayerScale, RPReLU};
use crate::model::{Block, Model, ModelConfig, StageConfig};
use crate::param::{join, Param, StateMut, StateRef, Stateful};
use crate::quant::{attn_scale_local, lsq_grad_scale, quantize_probs_with, Quantizer};
use crate::tensor::FloatTensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub points: usize,
    pub step: f64,
    pub tolerance: f64,
    pub min_margin: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { points: 100, step: 1e-6, tolerance: 1e-4, min_margin: 1e-3, seed: 7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub name: String,
    pub points: usize,
    /// Draws discarded for being too close to a kink.
    pub rejected: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// A differentiable module with a single input tensor.
pub trait Probe: Stateful + Clone {
    type Cache;
    fn forward(&self, x: &FloatTensor) -> Result<(FloatTensor, Self::Cache)>;
    fn backward(&mut self, cache: Self::Cache, dy: &FloatTensor) -> Result<FloatTensor>;
    /// Factor by which the accumulated gradient of `name` deliberately
    /// differs from the true derivative.
    fn grad_scale(&self, _name: &str) -> f64 {
        1.0
    }
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> FloatTensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
    FloatTensor::new(shape.to_vec(), data).expect("shape product matches")
}

fn dot(a: &FloatTensor, b: &FloatTensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Moves every learnable tensor to a random nearby point and re-derives the
/// binary statistics from the moved latents.
fn jitter(m: &mut impl Stateful, rng: &mut ChaCha8Rng, std: f64) -> Result<()> {
    for (name, p) in m.params_mut("") {
        for v in p.value.data_mut() {
            let z: f64 = rng.sample(StandardNormal);
            if name.ends_with("alpha_p") {
                *v *= (0.5 * z).exp();
            } else {
                *v += std * z;
            }
        }
    }
    let mut all = Vec::new();
    m.state_mut("", &mut all);
    for (_, s) in all {
        if let StateMut::Binary(b) = s {
            b.refresh()?;
        }
    }
    Ok(())
}

fn loss<P: Probe>(p: &P, x: &FloatTensor, u: &FloatTensor) -> Result<f64> {
    Ok(dot(&p.forward(x)?.0, u))
}

/// Relative error between analytic and numeric gradients at one point.
fn point_error<P: Probe>(probe: &P, x: &FloatTensor, h: f64, rng: &mut ChaCha8Rng) -> Result<f64> {
    let (y, cache) = probe.forward(x)?;
    let u = normal(rng, y.shape(), 1.0);
    let mut analytic_mod = probe.clone();
    for (_, p) in analytic_mod.params_mut("") {
        p.zero_grad();
    }
    let dx = analytic_mod.backward(cache, &u)?;

    let mut analytic = dx.data().to_vec();
    let mut numeric = Vec::with_capacity(analytic.len());
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        numeric.push((loss(probe, &xp, &u)? - loss(probe, &xm, &u)?) / (2.0 * h));
    }

    let mut sizes = Vec::new();
    for (name, p) in analytic_mod.params_mut("") {
        let s = probe.grad_scale(&name);
        let g = if p.grad.is_empty() { vec![0.0; p.len()] } else { p.grad.clone() };
        analytic.extend(g.iter().map(|v| v / s));
        sizes.push(p.len());
    }
    let mut moved = probe.clone();
    for (pi, &n) in sizes.iter().enumerate() {
        for j in 0..n {
            let mut at = |delta: f64| -> Result<f64> {
                let orig = moved.params_mut("")[pi].1.value.data()[j];
                moved.params_mut("")[pi].1.value.data_mut()[j] = orig + delta;
                let l = loss(&moved, x, &u);
                moved.params_mut("")[pi].1.value.data_mut()[j] = orig;
                l
            };
            let lp = at(h)?;
            let lm = at(-h)?;
            numeric.push((lp - lm) / (2.0 * h));
        }
    }

    let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let denom = na.max(nn);
    Ok(if denom == 0.0 { 0.0 } else { diff / denom })
}

/// Runs one case: `sample` draws a module and an input at a random point.
pub fn check_case<P: Probe>(
    name: &str,
    cfg: &GradCheckConfig,
    mut sample: impl FnMut(&mut ChaCha8Rng) -> Result<(P, FloatTensor)>,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut max_err: f64 = 0.0;
    let mut done = 0;
    let mut rejected = 0;
    let max_draws = cfg.points.max(1) * 200;
    while done < cfg.points {
        if done + rejected >= max_draws {
            return Err(Error::Internal(format!(
                "gradient check {name}: only {done} of {} points away from kinks after {max_draws} draws",
                cfg.points
            )));
        }
        let (probe, x) = sample(&mut rng)?;
        let (fwd, margin) = kink::track(|| probe.forward(&x).map(|_| ()));
        fwd?;
        if margin < cfg.min_margin {
            rejected += 1;
            continue;
        }
        max_err = max_err.max(point_error(&probe, &x, cfg.step, &mut rng)?);
        done += 1;
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        points: done,
        rejected,
        max_rel_err: max_err,
        tolerance: cfg.tolerance,
        passed: max_err <= cfg.tolerance,
    })
}

// ---------------------------------------------------------------------------
// Probes

macro_rules! forward_state {
    ($ty:ty, $field:tt, $prefix:literal) => {
        impl Stateful for $ty {
            fn state<'a>(&'a self, prefix: &str, out: &mut Vec<(String, StateRef<'a>)>) {
                self.$field.state(&join(prefix, $prefix), out);
            }
            fn state_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, StateMut<'a>)>) {
                self.$field.state_mut(&join(prefix, $prefix), out);
            }
        }
    };
}

#[derive(Clone)]
pub struct BiFCProbe(pub BiFCLayer);
forward_state!(BiFCProbe, 0, "fc");

impl Probe for BiFCProbe {
    type Cache = crate::layers::bifc::BiFCCache;
    fn forward(&self, x: &FloatTensor) -> Result<(FloatTensor, Self::Cache)> {
        self.0.forward(x, Ctx::SURROGATE)
    }
    fn backward(&mut self, cache: Self::Cache, dy: &FloatTensor) -> Result<FloatTensor> {
        self.0.backward(cache, dy)
    }
}

#[derive(Clone)]
pub struct RPReLUProbe(pub RPReLU);
forward_state!(RPReLUProbe, 0, "act");

impl Probe for RPReLUProbe {
    type Cache = FloatTensor;
    fn forward(&self, x: &FloatTensor) -> Result<(FloatTensor, FloatTensor)> {
        Ok((self.0.forward(x)?, x.clone()))
    }
    fn backward(&mut self, x: FloatTensor, dy: &FloatTensor) -> Result<FloatTensor> {
        Ok(self.0.backward(&x, dy))
    }
}

#[derive(Clone)]
pub struct BatchNormProbe(pub BatchNorm);
forward_state!(BatchNormProbe, 0, "bn");

impl Probe for BatchNormProbe {
    type Cache = crate::layers::norm::BnCache;
    fn forward(&self, x: &FloatTensor) -> Result<(FloatTensor, Self::Cache)> {
        self.0.forward(x, Ctx::TRAIN)
    }
    fn backward(&mut self, cache: Self::Cache, dy: &FloatTensor) -> Result<FloatTensor> {
        Ok(self.0.backward(cache, dy))
    }
}

/// Input is `[branch | skip]` side by side.
#[derive(Clone)]
pub struct LayerScaleProbe(pub LayerScale);
forward_state!(LayerScaleProbe, 0, "ls");

impl Probe for LayerScaleProbe {
    type Cache = FloatTensor;
    fn forward(&self, x: &FloatTensor) -> Result<(FloatTensor, FloatTensor)> {
        let c = x.cols() / 2;
        let branch = x.slice_cols(0, c);
        Ok((self.0.forward(&branch, &x.slice_cols(c, 2 * c))?, branch))
    }
    fn backward(&mut self, branch: FloatTensor, dy: &FloatTensor) -> Result<FloatTensor> {
        let c = branch.cols();
        let db = self.0.backward(&branch, dy);
        let mut dx = FloatTensor::zeros(&[dy.rows(), 2 * c]);
        dx.set_cols(0, &db);
        dx.set_cols(c, dy);
        Ok(dx)
    }
}

/// Surrogate attention-probability quantizer `α·clip(p/α, 0, 1)` with a
/// learnable `α`, using the same LSQ-scaled scale gradient as attention.
#[derive(Clone)]
pub struct ProbQuantProbe {
    pub alpha_p: Param,
}

impl Stateful for ProbQuantProbe {
    fn state<'a>(&'a self, prefix: &str, out: &mut Vec<(String, StateRef<'a>)>) {
        out.push((join(prefix, "alpha_p"), StateRef::Param(&self.alpha_p)));
    }
    fn state_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, StateMut<'a>)>) {
        out.push((join(prefix, "alpha_p"), StateMut::Param(&mut self.alpha_p)));
    }
}

impl Probe for ProbQuantProbe {
    type Cache = FloatTensor;
    fn forward(&self, p: &FloatTensor) -> Result<(FloatTensor, FloatTensor)> {
        Ok((quantize_probs_with(p, self.alpha_p.data()[0], Quantizer::Surrogate), p.clone()))
    }
    fn backward(&mut self, p: FloatTensor, dy: &FloatTensor) -> Result<FloatTensor> {
        let a = self.alpha_p.data()[0];
        let q = Quantizer::Surrogate;
        let raw: f64 = p.data().iter().zip(dy.data()).map(|(&s, &g)| g * attn_scale_local(s, a, q)).sum();
        self.alpha_p.accumulate(&[raw * lsq_grad_scale(p.len())]);
        let dp = p.zip_map(dy, |s, g| {
            let v = s / a;
            if v > 0.0 && v < 1.0 {
                g
            } else {
                0.0
            }
        })?;
        Ok(dp)
    }
    fn grad_scale(&self, _name: &str) -> f64 {
        lsq_grad_scale(PROB_ROWS * PROB_COLS)
    }
}

const PROB_ROWS: usize = 6;
const PROB_COLS: usize = 5;

#[derive(Clone)]
pub struct MultiPoolProbe {
    pub grid: Grid,
}

impl Stateful for MultiPoolProbe {
    fn state<'a>(&'a self, _: &str, _: &mut Vec<(String, StateRef<'a>)>) {}
    fn state_mut<'a>(&'a mut self, _: &str, _: &mut Vec<(String, StateMut<'a>)>) {}
}

impl Probe for MultiPoolProbe {
    type Cache = ();
    fn forward(&self, x: &FloatTensor) -> Result<(FloatTensor, ())> {
        Ok((multi_pool_forward(x, self.grid)?, ()))
    }
    fn backward(&mut self, _: (), dy: &FloatTensor) -> Result<FloatTensor> {
        Ok(multi_pool_backward(dy, self.grid))
    }
}

#[derive(Clone)]
pub struct AttentionProbe {
    pub attn: BiAttention,
    pub grid: Grid,
}
forward_state!(AttentionProbe, attn, "attn");

impl Probe for AttentionProbe {
    type Cache = crate::attention::AttnCache;
    fn forward(&self, x: &FloatTensor) -> Result<(FloatTensor, Self::Cache)> {
        self.attn.forward(x, self.grid, Ctx::SURROGATE)
    }
    fn backward(&mut self, cache: Self::Cache, dy: &FloatTensor) -> Result<FloatTensor> {
        self.attn.backward(cache, dy)
    }
    fn grad_scale(&self, name: &str) -> f64 {
        if name.ends_with("alpha_p") {
            attn_grad_scale(self.grid, self.attn.cfg.reduction)
        } else {
            1.0
        }
    }
}

fn attn_grad_scale(grid: Grid, reduction: usize) -> f64 {
    let kv = (grid.h / reduction) * (grid.w / reduction) + usize::from(grid.cls);
    lsq_grad_scale(grid.tokens() * kv)
}

#[derive(Clone)]
pub struct BlockProbe {
    pub block: Block,
    pub grid: Grid,
}
forward_state!(BlockProbe, block, "block");

impl Probe for BlockProbe {
    type Cache = crate::model::block::BlockCache;
    fn forward(&self, x: &FloatTensor) -> Result<(FloatTensor, Self::Cache)> {
        self.block.forward(x, self.grid, Ctx::SURROGATE)
    }
    fn backward(&mut self, cache: Self::Cache, dy: &FloatTensor) -> Result<FloatTensor> {
        self.block.backward(cache, dy)
    }
    fn grad_scale(&self, name: &str) -> f64 {
        if name.ends_with("alpha_p") {
            attn_grad_scale(self.grid, self.block.attn.cfg.reduction)
        } else {
            1.0
        }
    }
}

// ---------------------------------------------------------------------------
// Cases

fn bifc_case(d_in: usize, d_out: usize) -> impl FnMut(&mut ChaCha8Rng) -> Result<(BiFCProbe, FloatTensor)> {
    move |rng| {
        let mut init = Init::new(rng.random());
        let mut layer = init.bifc(d_in, d_out)?;
        // latents spread across the clip window
        for v in layer.weight.latent.as_mut().expect("fresh layer").value.data_mut() {
            *v = rng.random_range(-1.5..1.5);
        }
        let mut probe = BiFCProbe(layer);
        jitter(&mut probe, rng, 0.3)?;
        Ok((probe, normal(rng, &[6, d_in], 0.8)))
    }
}

fn attention_case(reduction: usize) -> impl FnMut(&mut ChaCha8Rng) -> Result<(AttentionProbe, FloatTensor)> {
    move |rng| {
        let grid = Grid::spatial(1, 4, 4);
        let kv = (4 / reduction) * (4 / reduction);
        let mut init = Init::new(rng.random());
        let attn = BiAttention::new(BiMHAConfig::new(8, 2, reduction)?, kv, &mut init)?;
        let mut probe = AttentionProbe { attn, grid };
        jitter(&mut probe, rng, 0.3)?;
        Ok((probe, normal(rng, &[grid.rows(), 8], 0.8)))
    }
}

/// The per-layer suite.
pub fn run_layer_checks(cfg: &GradCheckConfig) -> Result<Vec<GradCheckReport>> {
    let mut out = vec![
        check_case("bifc", cfg, bifc_case(8, 8))?,
        check_case("bifc_expand", cfg, bifc_case(4, 8))?,
        check_case("bifc_reduce", cfg, bifc_case(8, 4))?,
        check_case("rprelu", cfg, |rng| {
            let mut probe = RPReLUProbe(RPReLU::new(5));
            jitter(&mut probe, rng, 0.5)?;
            Ok((probe, normal(rng, &[4, 5], 1.0)))
        })?,
        check_case("batchnorm_train", cfg, |rng| {
            let mut probe = BatchNormProbe(BatchNorm::new(4));
            jitter(&mut probe, rng, 0.5)?;
            Ok((probe, normal(rng, &[6, 4], 1.5)))
        })?,
        check_case("layerscale", cfg, |rng| {
            let mut probe = LayerScaleProbe(LayerScale::new(4));
            jitter(&mut probe, rng, 0.5)?;
            Ok((probe, normal(rng, &[5, 8], 1.0)))
        })?,
        check_case("attn_prob_quantizer", cfg, |rng| {
            let mut probs = FloatTensor::zeros(&[PROB_ROWS, PROB_COLS]);
            for v in probs.data_mut() {
                *v = rng.random_range(0.0..1.0);
            }
            let alpha = rng.random_range(0.2..1.2);
            Ok((ProbQuantProbe { alpha_p: Param::filled(&[1], alpha) }, probs))
        })?,
        check_case("multi_pool", cfg, |rng| {
            let grid = Grid::spatial(2, 4, 6);
            Ok((MultiPoolProbe { grid }, normal(rng, &[grid.rows(), 3], 1.0)))
        })?,
    ];
    out.push(check_case("attention", cfg, attention_case(1))?);
    out.push(check_case("attention_reduced", cfg, attention_case(2))?);
    Ok(out)
}

/// One full block at a smaller number of points.
pub fn check_block(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    check_case("block", cfg, |rng| {
        let stage =
            StageConfig { dim: 8, reduction: 2, heads: 2, ffn_expansion: 2, blocks: 1, patch: 1, pos_embed: false };
        let grid = Grid::spatial(2, 4, 4);
        let mut init = Init::new(rng.random());
        let block = Block::new(&stage, 4, true, true, &mut init)?;
        let mut probe = BlockProbe { block, grid };
        jitter(&mut probe, rng, 0.3)?;
        Ok((probe, normal(rng, &[grid.rows(), 8], 0.8)))
    })
}

/// The smallest pyramid exercising every block feature: two stages,
/// spatial reduction, binary mid embedding, LayerScale and multi-pooling.
pub fn micro_config() -> ModelConfig {
    let mut cfg = ModelConfig::toy();
    cfg.name = "micro".into();
    cfg.img_size = 8;
    cfg.num_classes = 3;
    cfg.stages[0].dim = 8;
    cfg.stages[0].patch = 2;
    cfg.stages[0].reduction = 2;
    cfg.stages[1].dim = 16;
    cfg.stages[1].patch = 2;
    cfg
}

/// Directional check of a whole surrogate network: the analytic gradient
/// projected on a random direction against the central difference of the
/// loss along that direction.
pub fn check_network(model_cfg: &ModelConfig, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let batch = 2;
    let side = model_cfg.img_size;
    let c = model_cfg.in_channels;
    let (mut done, mut rejected, mut max_err) = (0, 0, 0.0f64);
    let max_draws = cfg.points.max(1) * 200;
    while done < cfg.points {
        if done + rejected >= max_draws {
            return Err(Error::Internal(format!(
                "network gradient check: only {done} of {} points away from kinks",
                cfg.points
            )));
        }
        let mut model = Model::build(model_cfg.clone(), rng.random())?;
        jitter(&mut model, &mut rng, 0.3)?;
        let x = normal(&mut rng, &[batch * side * side, c], 1.0);
        let (logits, margin) = kink::track(|| model.forward_batch(&x, batch, Ctx::SURROGATE));
        let (logits, cache) = logits?;
        if margin < cfg.min_margin {
            rejected += 1;
            continue;
        }
        let u = normal(&mut rng, logits.shape(), 1.0);
        model.zero_grad();
        let dx = model.backward(cache, &u)?;

        let dir_x = normal(&mut rng, x.shape(), 1.0);
        let mut analytic = dot(&dx, &dir_x);
        let mut dirs = Vec::new();
        let scales = network_grad_scales(&model);
        for ((_, p), s) in model.params_mut("").into_iter().zip(&scales) {
            let d = normal(&mut rng, p.value.shape(), 1.0);
            let g = if p.grad.is_empty() { vec![0.0; p.len()] } else { p.grad.clone() };
            analytic += g.iter().zip(d.data()).map(|(a, b)| a * b).sum::<f64>() / s;
            dirs.push(d);
        }
        let eval = |t: f64| -> Result<f64> {
            let mut m = model.clone();
            for ((_, p), d) in m.params_mut("").into_iter().zip(&dirs) {
                for (v, dv) in p.value.data_mut().iter_mut().zip(d.data()) {
                    *v += t * dv;
                }
            }
            let xs = x.zip_map(&dir_x, |a, b| a + t * b)?;
            Ok(dot(&m.forward_batch(&xs, batch, Ctx::SURROGATE)?.0, &u))
        };
        let numeric = (eval(cfg.step)? - eval(-cfg.step)?) / (2.0 * cfg.step);
        let denom = analytic.abs().max(numeric.abs());
        max_err = max_err.max(if denom == 0.0 { 0.0 } else { (analytic - numeric).abs() / denom });
        done += 1;
    }
    Ok(GradCheckReport {
        name: "network".into(),
        points: done,
        rejected,
        max_rel_err: max_err,
        tolerance: cfg.tolerance,
        passed: max_err <= cfg.tolerance,
    })
}

/// Per-parameter gradient scale in `params_mut` order: the LSQ factor of
/// the owning stage for attention scales, 1 elsewhere.
fn network_grad_scales(model: &Model) -> Vec<f64> {
    let cfg = &model.cfg;
    let sides = cfg.stage_sides();
    let cls = cfg.pooling == crate::model::Pooling::ClsToken;
    let mut all = Vec::new();
    model.state("", &mut all);
    all.iter()
        .filter(|(_, s)| match s {
            StateRef::Param(_) => true,
            StateRef::Binary(b) => b.latent.is_some(),
            StateRef::Buffer(_) => false,
        })
        .map(|(name, _)| {
            if !name.ends_with("alpha_p") {
                return 1.0;
            }
            let stage: usize = name.split('.').nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
            let grid = Grid { batch: 1, h: sides[stage], w: sides[stage], cls };
            attn_grad_scale(grid, cfg.stages[stage].reduction)
        })
        .collect()
}
