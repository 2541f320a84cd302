use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::shortcut::ShortcutKind;
use crate::layers::Precision;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Classify from the class token prepended in the first stage.
    ClsToken,
    GlobalAvg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub dim: usize,
    pub reduction: usize,
    pub heads: usize,
    pub ffn_expansion: usize,
    pub blocks: usize,
    /// Downsampling factor of the patch embedding into this stage.
    pub patch: usize,
    #[serde(default = "default_true")]
    pub pos_embed: bool,
}

fn default_true() -> bool {
    true
}

fn default_mean() -> Vec<f64> {
    vec![123.675, 116.28, 103.53]
}

fn default_std() -> Vec<f64> {
    vec![58.395, 57.12, 57.375]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub name: String,
    pub img_size: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub pooling: Pooling,
    #[serde(default)]
    pub use_multibranch: bool,
    #[serde(default)]
    pub use_layerscale: bool,
    /// Precision of the patch embeddings between stages; the first patch
    /// embedding is always full precision.
    #[serde(default)]
    pub mid_patch_embed_precision: Precision,
    /// Per-channel normalization applied to `[0, 255]` pixel values.
    #[serde(default = "default_mean")]
    pub norm_mean: Vec<f64>,
    #[serde(default = "default_std")]
    pub norm_std: Vec<f64>,
    #[serde(rename = "stage")]
    pub stages: Vec<StageConfig>,
}

macro_rules! bundled {
    ($($fn_name:ident => $file:literal),* $(,)?) => {
        $(
            pub fn $fn_name() -> ModelConfig {
                ModelConfig::from_toml(include_str!(concat!("../../configs/", $file)))
                    .expect(concat!("bundled config ", $file, " is valid"))
            }
        )*
    };
}

impl ModelConfig {
    bundled! {
        binaryvit => "binaryvit.toml",
        binaryvit_star => "binaryvit_star.toml",
        deit_s_baseline => "deit_s.toml",
        toy => "toy.toml",
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ModelConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Side length of the token grid of every stage.
    pub fn stage_sides(&self) -> Vec<usize> {
        let mut side = self.img_size;
        self.stages
            .iter()
            .map(|s| {
                side /= s.patch.max(1);
                side
            })
            .collect()
    }

    /// Checks every structural constraint, naming the first violated one.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.stages.is_empty() {
            return fail("at least one stage is required".into());
        }
        if self.img_size == 0 || self.in_channels == 0 || self.num_classes == 0 {
            return fail("img_size, in_channels and num_classes must be positive".into());
        }
        if self.norm_mean.len() != self.in_channels || self.norm_std.len() != self.in_channels {
            return fail(format!("norm_mean and norm_std need one entry per channel ({})", self.in_channels));
        }
        if self.norm_std.iter().any(|&s| !(s > 0.0)) {
            return fail("norm_std entries must be positive".into());
        }
        let mut side = self.img_size;
        let mut prev_dim = None;
        for (i, s) in self.stages.iter().enumerate() {
            if s.dim == 0 || s.heads == 0 || s.ffn_expansion == 0 || s.blocks == 0 {
                return fail(format!("stage {i}: dim, heads, ffn_expansion and blocks must be positive"));
            }
            if s.dim % s.heads != 0 {
                return fail(format!("stage {i}: heads ({}) must divide dim ({})", s.heads, s.dim));
            }
            if s.patch == 0 || !side.is_multiple_of(s.patch) {
                return fail(format!(
                    "stage {i}: patch {} must divide the incoming grid side {side} \
                     (img_size must be divisible by the cumulative downsampling)",
                    s.patch
                ));
            }
            side /= s.patch;
            if s.reduction == 0 || !side.is_multiple_of(s.reduction) {
                return fail(format!("stage {i}: reduction {} must divide the grid side {side}", s.reduction));
            }
            if let Some(prev) = prev_dim {
                if self.mid_patch_embed_precision == Precision::Binary {
                    ShortcutKind::for_dims(s.patch * s.patch * prev, s.dim).map_err(|_| {
                        Error::Config(format!(
                            "stage {i}: dims {prev} -> {} are not related by an integer ratio",
                            s.dim
                        ))
                    })?;
                }
            }
            prev_dim = Some(s.dim);
        }
        if self.pooling == Pooling::ClsToken {
            if self.stages.len() != 1 {
                return fail("cls_token pooling requires a single stage".into());
            }
            if self.use_multibranch {
                return fail("multi-pooling branches need a token grid without a class token".into());
            }
            if self.stages[0].reduction != 1 {
                return fail("spatial reduction needs a token grid without a class token".into());
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_configs_parse() {
        let b = ModelConfig::binaryvit();
        let dims: Vec<_> = b.stages.iter().map(|s| s.dim).collect();
        assert_eq!(dims, [64, 128, 256, 512]);
        assert_eq!(b.stages.iter().map(|s| s.reduction).collect::<Vec<_>>(), [8, 4, 1, 1]);
        assert_eq!(b.stages.iter().map(|s| s.heads).collect::<Vec<_>>(), [1, 2, 4, 8]);
        assert_eq!(b.stages.iter().map(|s| s.ffn_expansion).collect::<Vec<_>>(), [8, 8, 4, 4]);
        assert_eq!(b.stages.iter().map(|s| s.blocks).collect::<Vec<_>>(), [3, 4, 8, 4]);
        assert_eq!(b.stage_sides(), [56, 28, 14, 7]);
        assert_eq!(ModelConfig::binaryvit_star().mid_patch_embed_precision, Precision::Full);
        let d = ModelConfig::deit_s_baseline();
        assert_eq!((d.stages[0].dim, d.stages[0].heads, d.stages[0].blocks), (384, 6, 12));
        ModelConfig::toy();
    }

    #[test]
    fn round_trips_through_text() {
        let b = ModelConfig::binaryvit();
        assert_eq!(ModelConfig::from_toml(&b.to_toml()).unwrap(), b);
    }

    fn expect_config_error(cfg: &ModelConfig, needle: &str) {
        match cfg.validate() {
            Err(Error::Config(msg)) => assert!(msg.contains(needle), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn violated_constraints_are_named() {
        let mut c = ModelConfig::binaryvit();
        c.stages[1].heads = 3;
        expect_config_error(&c, "heads (3) must divide dim (128)");

        let mut c = ModelConfig::binaryvit();
        c.img_size = 200;
        c.stages.iter_mut().for_each(|s| s.reduction = 1);
        expect_config_error(&c, "cumulative downsampling");

        let mut c = ModelConfig::binaryvit();
        c.stages[2].dim = 300;
        expect_config_error(&c, "integer ratio");

        let mut c = ModelConfig::deit_s_baseline();
        c.use_multibranch = true;
        expect_config_error(&c, "class token");

        let mut c = ModelConfig::binaryvit();
        c.stages[0].reduction = 3;
        expect_config_error(&c, "reduction 3");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = ModelConfig::toy().to_toml() + "\nbogus = 1\n";
        assert!(matches!(ModelConfig::from_toml(&text), Err(Error::Config(_))));
    }
}
