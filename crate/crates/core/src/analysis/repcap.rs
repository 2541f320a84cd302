//! Element-wise representational capability: how many distinct absolute
//! values one activation can take, accumulated along a network.
//!
//! A full-precision first layer over `K² · C` integer inputs bounded by
//! `max` starts the chain at `⌊K²·C·max / 2⌋` (zero-mean halving). Every
//! binary layer adds `D_in · K²`; every pooling that aggregates `n` values
//! multiplies the running total by `n`. Affine maps contribute nothing.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FirstLayer {
    pub kernel: u64,
    pub channels: u64,
    pub max_input: u64,
}

/// One kind of contributing layer: either an explicit `value`, or a
/// binary layer with `d_in` inputs per kernel position and a `kernel`
/// (1 for fully-connected layers).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerEntry {
    #[serde(default)]
    pub label: String,
    pub value: Option<u64>,
    pub d_in: Option<u64>,
    pub kernel: Option<u64>,
    #[serde(default = "one")]
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageEntry {
    #[serde(default)]
    pub label: String,
    /// How many times the `layers` group repeats (e.g. blocks).
    #[serde(default = "one")]
    pub repeat: u64,
    #[serde(default)]
    pub layers: Vec<LayerEntry>,
    /// Multiplier applied after this stage (downsampling aggregation).
    pub transition: Option<u64>,
}

fn one() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapabilityDesc {
    #[serde(default)]
    pub name: String,
    pub first_layer: Option<FirstLayer>,
    #[serde(default, rename = "stage")]
    pub stages: Vec<StageEntry>,
    /// Aggregation count of the final global pooling, if any.
    pub final_pool: Option<u64>,
    /// Published total to compare against.
    pub reference_total: Option<u64>,
}

macro_rules! bundled_desc {
    ($($fn_name:ident => $file:literal),* $(,)?) => {
        $(
            pub fn $fn_name() -> CapabilityDesc {
                CapabilityDesc::from_toml(include_str!(concat!("../../descs/", $file)))
                    .expect(concat!("bundled description ", $file, " is valid"))
            }
        )*
    };
}

impl CapabilityDesc {
    bundled_desc! {
        resnet34 => "resnet34.toml",
        deit_s => "deit_s.toml",
        pyramid_example => "pyramid_example.toml",
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Input(e.message().to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    FirstLayer,
    AddContribution,
    MultiplyTransition,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Step {
    pub label: String,
    pub kind: StepKind,
    pub value: u64,
    /// Running total after this step.
    pub running: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RepCapChain {
    pub name: String,
    pub steps: Vec<Step>,
    pub total: u64,
    pub reference_total: Option<u64>,
}

impl RepCapChain {
    /// Running totals right after each multiplying step.
    pub fn transition_totals(&self) -> Vec<u64> {
        self.steps.iter().filter(|s| s.kind == StepKind::MultiplyTransition).map(|s| s.running).collect()
    }

    pub fn first_layer_value(&self) -> Option<u64> {
        self.steps.iter().find(|s| s.kind == StepKind::FirstLayer).map(|s| s.value)
    }

    /// True when a reference total is given and differs from the evaluated one.
    pub fn diverges(&self) -> bool {
        self.reference_total.is_some_and(|r| r != self.total)
    }

    /// Left-to-right re-evaluation of the steps.
    pub fn evaluate_steps(&self) -> u64 {
        self.steps.iter().fold(0, |acc, s| match s.kind {
            StepKind::FirstLayer | StepKind::AddContribution => acc + s.value,
            StepKind::MultiplyTransition => acc * s.value,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("chain serializes")
    }
}

impl fmt::Display for RepCapChain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "capability chain {}", self.name)?;
        for s in &self.steps {
            let op = match s.kind {
                StepKind::FirstLayer => "start",
                StepKind::AddContribution => "add",
                StepKind::MultiplyTransition => "mul",
            };
            writeln!(f, "  {op:<5} {:<24} {:>12} -> {}", s.label, s.value, s.running)?;
        }
        write!(f, "total {}", self.total)?;
        if let Some(r) = self.reference_total {
            if r == self.total {
                write!(f, "\nreference {r} (matches)")?;
            } else {
                write!(
                    f,
                    "\nreference {r} DIVERGES from evaluated total {} by {}",
                    self.total,
                    self.total.abs_diff(r)
                )?;
            }
        }
        Ok(())
    }
}

fn positive(v: u64, what: &str) -> Result<u64> {
    if v == 0 {
        return Err(Error::Input(format!("{what} must be positive")));
    }
    Ok(v)
}

fn overflow(what: &str) -> Error {
    Error::Input(format!("capability overflows 64 bits at {what}"))
}

fn layer_value(l: &LayerEntry) -> Result<u64> {
    let what = if l.label.is_empty() { "layer" } else { &l.label };
    match (l.value, l.d_in) {
        (Some(v), None) if l.kernel.is_none() => positive(v, what),
        (None, Some(d)) => {
            let k = positive(l.kernel.unwrap_or(1), what)?;
            positive(d, what)?.checked_mul(k * k).ok_or_else(|| overflow(what))
        }
        _ => Err(Error::Input(format!("{what}: give either value, or d_in with an optional kernel"))),
    }
}

pub fn repcap(desc: &CapabilityDesc) -> Result<RepCapChain> {
    let mut steps = Vec::new();
    let mut running: u64 = 0;
    let mut push = |label: String, kind: StepKind, value: u64| -> Result<()> {
        running = match kind {
            StepKind::FirstLayer | StepKind::AddContribution => running.checked_add(value),
            StepKind::MultiplyTransition => running.checked_mul(value),
        }
        .ok_or_else(|| overflow(&label))?;
        steps.push(Step { label, kind, value, running });
        Ok(())
    };
    if let Some(fl) = &desc.first_layer {
        let k = positive(fl.kernel, "first-layer kernel")?;
        let c = positive(fl.channels, "first-layer channels")?;
        let m = positive(fl.max_input, "first-layer max input")?;
        let range = k.checked_mul(k).and_then(|v| v.checked_mul(c)).and_then(|v| v.checked_mul(m));
        push("first_layer".into(), StepKind::FirstLayer, range.ok_or_else(|| overflow("first layer"))? / 2)?;
    }
    for (i, s) in desc.stages.iter().enumerate() {
        let stage = if s.label.is_empty() { format!("stage{}", i + 1) } else { s.label.clone() };
        let repeat = positive(s.repeat, &format!("{stage} repeat"))?;
        for l in &s.layers {
            let v = layer_value(l)?;
            let count = positive(l.count, &format!("{stage} layer count"))?;
            let total = v.checked_mul(count).and_then(|t| t.checked_mul(repeat)).ok_or_else(|| overflow(&stage))?;
            let label = if l.label.is_empty() { stage.clone() } else { format!("{stage}.{}", l.label) };
            push(label, StepKind::AddContribution, total)?;
        }
        if let Some(t) = s.transition {
            push(format!("{stage}.transition"), StepKind::MultiplyTransition, positive(t, "transition")?)?;
        }
    }
    if let Some(p) = desc.final_pool {
        push("global_pool".into(), StepKind::MultiplyTransition, positive(p, "final pool")?)?;
    }
    Ok(RepCapChain { name: desc.name.clone(), steps, total: running, reference_total: desc.reference_total })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn resnet34_chain() {
        let c = repcap(&CapabilityDesc::resnet34()).unwrap();
        assert_eq!(c.first_layer_value(), Some(18_742));
        assert_eq!(c.transition_totals(), [81_880, 345_952, 1_439_104, 71_193_472]);
        assert_eq!(c.total, 71_193_472);
        assert!(!c.diverges());
    }

    #[test]
    fn deit_chain_is_flagged() {
        let c = repcap(&CapabilityDesc::deit_s()).unwrap();
        assert_eq!(c.first_layer_value(), Some(97_920));
        assert_eq!(c.total, 155_568);
        assert_eq!(c.reference_total, Some(153_216));
        assert!(c.diverges());
        assert!(c.to_string().contains("DIVERGES"));
    }

    #[test]
    fn pyramid_example() {
        assert_eq!(repcap(&CapabilityDesc::pyramid_example()).unwrap().total, 200_704);
    }

    #[test]
    fn non_positive_is_input_error() {
        let mut d = CapabilityDesc::resnet34();
        d.stages[1].transition = Some(0);
        assert!(matches!(repcap(&d), Err(Error::Input(_))));
        let mut d = CapabilityDesc::resnet34();
        d.stages[0].layers[0].d_in = Some(0);
        assert!(matches!(repcap(&d), Err(Error::Input(_))));
        assert!(CapabilityDesc::from_toml("final_pool = -3").is_err());
    }

    fn fc(d_in: u64, kernel: Option<u64>) -> CapabilityDesc {
        CapabilityDesc {
            name: String::new(),
            first_layer: None,
            stages: vec![StageEntry {
                label: String::new(),
                repeat: 1,
                layers: vec![LayerEntry { label: String::new(), value: None, d_in: Some(d_in), kernel, count: 1 }],
                transition: None,
            }],
            final_pool: None,
            reference_total: None,
        }
    }

    #[test]
    fn unit_kernel_conv_is_fully_connected() {
        assert_eq!(repcap(&fc(384, Some(1))).unwrap().total, repcap(&fc(384, None)).unwrap().total);
        assert_eq!(repcap(&fc(128, Some(3))).unwrap().total, 3 * repcap(&fc(384, None)).unwrap().total);
    }

    proptest! {
        #[test]
        fn monotone_in_every_input(
            stage in 0usize..4, bump in 1u64..1000, which in 0usize..3,
        ) {
            let base = CapabilityDesc::resnet34();
            let mut more = base.clone();
            match which {
                0 => *more.stages[stage].layers[0].d_in.as_mut().unwrap() += bump,
                1 => more.stages[stage].layers[0].count += bump,
                _ => {
                    let t = more.stages[stage].transition.get_or_insert(1);
                    *t += bump;
                }
            }
            let a = repcap(&base).unwrap();
            let b = repcap(&more).unwrap();
            prop_assert!(b.total >= a.total);
            prop_assert_eq!(b.evaluate_steps(), b.total);
        }
    }
}
