//! Static multiply-accumulate and parameter accounting.
//!
//! One multiply-accumulate counts as one FLOP (full precision) or one BOP
//! (binary). Elementwise work, softmax and normalization are free.
//! `OPs = BOPs/64 + FLOPs`.

use std::fmt;

use serde::Serialize;

use crate::layers::shortcut::ShortcutKind;
use crate::layers::Precision;
use crate::model::{ModelConfig, Pooling, StageConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    FullLinear,
    BinaryLinear,
    /// Activation-by-activation binary product inside attention.
    BinaryMatmul,
    /// Parameters without multiply-accumulates (norms, scales, embeddings).
    Params,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerCost {
    pub name: String,
    pub kind: LayerKind,
    pub flops: u64,
    pub bops: u64,
    pub params: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub flops: u64,
    pub bops: u64,
    pub ops: f64,
    pub params: u64,
    pub per_layer: Vec<LayerCost>,
}

pub fn effective_ops(bops: u64, flops: u64) -> f64 {
    bops as f64 / 64.0 + flops as f64
}

impl CostReport {
    pub fn from_layers(per_layer: Vec<LayerCost>) -> Self {
        let flops = per_layer.iter().map(|l| l.flops).sum();
        let bops = per_layer.iter().map(|l| l.bops).sum();
        let params = per_layer.iter().map(|l| l.params).sum();
        Self { flops, bops, ops: effective_ops(bops, flops), params, per_layer }
    }

    /// Concatenation of several reports.
    pub fn sum<'a>(parts: impl IntoIterator<Item = &'a CostReport>) -> Self {
        Self::from_layers(parts.into_iter().flat_map(|r| r.per_layer.iter().cloned()).collect())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<40} {:>14} {:>14} {:>12}", "layer", "flops", "bops", "params")?;
        for l in &self.per_layer {
            writeln!(f, "{:<40} {:>14} {:>14} {:>12}", l.name, l.flops, l.bops, l.params)?;
        }
        writeln!(f, "flops  {} ({:.3e})", self.flops, self.flops as f64)?;
        writeln!(f, "bops   {} ({:.3e})", self.bops, self.bops as f64)?;
        writeln!(f, "ops    {:.6e} (= bops/64 + flops)", self.ops)?;
        write!(f, "params {} ({:.3}M)", self.params, self.params as f64 / 1e6)
    }
}

struct Acc {
    layers: Vec<LayerCost>,
}

impl Acc {
    fn push(&mut self, name: String, kind: LayerKind, macs: u64, params: u64) {
        let (flops, bops) = match kind {
            LayerKind::FullLinear => (macs, 0),
            LayerKind::BinaryLinear | LayerKind::BinaryMatmul => (0, macs),
            LayerKind::Params => (0, 0),
        };
        self.layers.push(LayerCost { name, kind, flops, bops, params });
    }

    fn full_linear(&mut self, name: String, tokens: u64, d_in: u64, d_out: u64) {
        self.push(name, LayerKind::FullLinear, tokens * d_in * d_out, d_in * d_out + d_out);
    }

    /// Binary weight plus its RSign threshold, BN and RPReLU parameters.
    fn binary_linear(&mut self, name: String, tokens: u64, d_in: u64, d_out: u64) {
        self.push(name, LayerKind::BinaryLinear, tokens * d_in * d_out, d_in * d_out + d_in + 5 * d_out);
    }

    fn params(&mut self, name: String, params: u64) {
        self.push(name, LayerKind::Params, 0, params);
    }
}

fn block_costs(acc: &mut Acc, prefix: &str, s: &StageConfig, tokens: u64, kv_tokens: u64, cfg: &ModelConfig) {
    let c = s.dim as u64;
    let e = c * s.ffn_expansion as u64;
    acc.params(format!("{prefix}.bn1"), 2 * c);
    acc.binary_linear(format!("{prefix}.attn.q"), tokens, c, c);
    if s.reduction > 1 {
        acc.binary_linear(format!("{prefix}.attn.sr"), kv_tokens, c, c);
    }
    acc.binary_linear(format!("{prefix}.attn.k"), kv_tokens, c, c);
    acc.binary_linear(format!("{prefix}.attn.v"), kv_tokens, c, c);
    acc.push(format!("{prefix}.attn.qk"), LayerKind::BinaryMatmul, tokens * kv_tokens * c, 0);
    acc.push(format!("{prefix}.attn.pv"), LayerKind::BinaryMatmul, tokens * kv_tokens * c, 0);
    // RSign thresholds of Q, K, V, the shared BN and RPReLU, and α_P
    acc.params(format!("{prefix}.attn.mix"), 3 * c + 2 * c + 3 * c + 1);
    acc.binary_linear(format!("{prefix}.attn.o"), tokens, c, c);
    if cfg.use_layerscale {
        acc.params(format!("{prefix}.ls1"), 2 * c);
    }
    acc.params(format!("{prefix}.bn2"), 2 * c);
    acc.binary_linear(format!("{prefix}.fc1"), tokens, c, e);
    acc.binary_linear(format!("{prefix}.fc2"), tokens, e, c);
    if cfg.use_layerscale {
        acc.params(format!("{prefix}.ls2"), 2 * c);
    }
}

/// Per-layer costs of one forward pass over a single image.
pub fn count_costs(cfg: &ModelConfig) -> CostReport {
    let mut acc = Acc { layers: Vec::new() };
    let cls = u64::from(cfg.pooling == Pooling::ClsToken);
    let mut c_in = cfg.in_channels as u64;
    for (i, (s, side)) in cfg.stages.iter().zip(cfg.stage_sides()).enumerate() {
        let side = side as u64;
        let c = s.dim as u64;
        let spatial = side * side;
        let d_in = (s.patch * s.patch) as u64 * c_in;
        let name = format!("stages.{i}.embed");
        if i == 0 || cfg.mid_patch_embed_precision == Precision::Full {
            acc.full_linear(name, spatial, d_in, c);
        } else {
            debug_assert!(ShortcutKind::for_dims(d_in as usize, s.dim).is_ok());
            acc.binary_linear(name, spatial, d_in, c);
        }
        if i == 0 && cls == 1 {
            acc.params("cls_token".into(), c);
        }
        let tokens = spatial + cls;
        if s.pos_embed {
            acc.params(format!("stages.{i}.pos"), tokens * c);
        }
        let kv_side = side / s.reduction as u64;
        let kv_tokens = kv_side * kv_side + cls;
        for b in 0..s.blocks {
            block_costs(&mut acc, &format!("stages.{i}.blocks.{b}"), s, tokens, kv_tokens, cfg);
        }
        c_in = c;
    }
    acc.params("norm".into(), 2 * c_in);
    acc.full_linear("head".into(), 1, c_in, cfg.num_classes as u64);
    CostReport::from_layers(acc.layers)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ops_identity() {
        let r = CostReport::from_layers(vec![LayerCost {
            name: "x".into(),
            kind: LayerKind::BinaryLinear,
            flops: 100_000_000,
            bops: 6_400_000_000,
            params: 0,
        }]);
        assert_eq!(r.ops, 2e8);
    }

    #[test]
    fn totals_are_sums() {
        let r = count_costs(&ModelConfig::binaryvit());
        assert_eq!(r.flops, r.per_layer.iter().map(|l| l.flops).sum::<u64>());
        assert_eq!(r.bops, r.per_layer.iter().map(|l| l.bops).sum::<u64>());
        assert_eq!(r.params, r.per_layer.iter().map(|l| l.params).sum::<u64>());
        assert_eq!(r.ops, r.bops as f64 / 64.0 + r.flops as f64);
    }

    #[test]
    fn params_match_built_models() {
        use crate::model::Model;
        use crate::param::Stateful;
        let mut cfgs = vec![ModelConfig::toy()];
        let mut flat = ModelConfig::deit_s_baseline();
        flat.img_size = 32;
        flat.stages[0].patch = 8;
        cfgs.push(flat);
        let mut small = ModelConfig::binaryvit();
        small.img_size = 64;
        small.stages.iter_mut().for_each(|s| {
            s.dim /= 4;
            s.blocks = 1;
            s.reduction = s.reduction.min(2);
        });
        cfgs.push(small.clone());
        small.mid_patch_embed_precision = Precision::Full;
        small.use_layerscale = false;
        cfgs.push(small);
        for cfg in cfgs {
            let m = Model::build(cfg.clone(), 0).unwrap();
            assert_eq!(count_costs(&cfg).params, m.num_params() as u64, "{}", cfg.name);
        }
    }

    #[test]
    fn baseline_patch_embed_flops() {
        let r = count_costs(&ModelConfig::deit_s_baseline());
        let embed = r.per_layer.iter().find(|l| l.name == "stages.0.embed").unwrap();
        assert_eq!(embed.flops, 196 * 768 * 384);
    }
}
