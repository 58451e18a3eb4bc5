//! Named ablation variants: each flips a fixed set of config flags and
//! nothing else, so variant runs stay comparable to the base model.

use crate::error::{Error, Result};
use crate::model::{BlockOrder, ModelConfig};
use crate::training::TrainConfig;

/// Every recognized variant, in the order reports list them.
pub const VARIANTS: &[&str] = &[
    "switch",
    "w/o-gate",
    "w/o-res",
    "w/o-decouple",
    "w/o-dg",
    "w/o-apt",
    "w/o-gru",
    "w/o-msa",
    "w/o-ar",
    "w/o-cl",
];

/// Applies `variant` to copies of the base configs. The base values are
/// never touched; callers keep them for the reference run.
pub fn apply_variant(
    model: &ModelConfig,
    train: &TrainConfig,
    variant: &str,
) -> Result<(ModelConfig, TrainConfig)> {
    let mut m = model.clone();
    let mut t = train.clone();
    match variant {
        "switch" => m.block_order = BlockOrder::InherentFirst,
        "w/o-gate" => m.use_gate = false,
        "w/o-res" => m.use_residual = false,
        "w/o-decouple" => {
            m.use_gate = false;
            m.use_residual = false;
        }
        "w/o-dg" => m.use_dynamic_graph = false,
        "w/o-apt" => m.use_adaptive = false,
        "w/o-gru" => m.use_gru = false,
        "w/o-msa" => m.use_attention = false,
        "w/o-ar" => m.autoregressive = false,
        "w/o-cl" => t.use_curriculum = false,
        other => {
            return Err(Error::config(format!(
                "unknown ablation variant {other:?}; expected one of {}",
                VARIANTS.join(", ")
            )))
        }
    }
    Ok((m, t))
}
