//! Static analyzers over configurations and capability descriptions.

pub mod cost;
pub mod repcap;

pub use cost::{count_costs, CostReport, LayerCost, LayerKind};
pub use repcap::{repcap, CapabilityDesc, RepCapChain, StepKind};
