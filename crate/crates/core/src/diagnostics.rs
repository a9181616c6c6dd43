//! Whole-model gradient check grouped by module.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{build_model, ForwardOptions, ModelConfig};
use crate::tensor::gradcheck::{sample_coords, CoordCheck, DEFAULT_STEP};
use crate::tensor::{grad_check_finite_diff, Tensor};

/// Module a registry name belongs to.
pub fn module_of(name: &str) -> &'static str {
    if name.contains(".lrc.") {
        "lrc"
    } else if name.contains(".nll") {
        "nll"
    } else if name.contains(".attn.") {
        "attention"
    } else if name.contains(".ffn.") || name.contains("_mix.") {
        "ffn"
    } else if name.contains("norm") {
        "norm"
    } else if name.starts_with("stem") {
        "stem"
    } else if name.starts_with("pool") {
        "pool"
    } else if name.starts_with("pos_embed") {
        "embedding"
    } else if name.contains("head") {
        "head"
    } else {
        "other"
    }
}

#[derive(Debug, Clone)]
pub struct ModelGradCheck {
    /// Coordinates compared, not counting those straddling a ReLU kink.
    pub coords: usize,
    pub kinks: usize,
    /// Worst relative error per module.
    pub per_module: BTreeMap<&'static str, f64>,
    pub worst: Option<CoordCheck>,
    pub max_rel_error: f64,
}

/// Central-difference check of a freshly built 64-bit model on a random
/// batch, sampling `per_tensor` coordinates from every trainable tensor.
/// Runs the training-mode forward (batch statistics, sampled permutations)
/// and, when `mixed_depth` is set, both branches.
///
/// The checked scalar is a fixed random projection of the logits. Its value
/// stays near zero, so the rounding floor of the difference quotient (about
/// one ulp of the loss over `2h`) sits well below the smallest gradients; a
/// cross-entropy value near `ln c` would put that floor at the 1e-4 level
/// for gradients around 1e-7.
pub fn model_gradcheck(config: &ModelConfig, seed: u64, per_tensor: usize, mixed_depth: bool) -> Result<ModelGradCheck> {
    let mut model = build_model::<f64>(config, seed)?;
    if mixed_depth {
        model.build_mixed_depth()?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = config.input_resolution;
    let batch = 2;
    let images = Tensor::from_fn(&[batch, 3, r, r], |_| rng.random_range(-1.0..1.0));
    let c = config.num_classes;
    let projection = Tensor::from_fn(&[batch, c], |_| rng.random_range(-1.0..1.0));
    let coords = sample_coords(&model.store, per_tensor, &mut rng, |_| true);
    let net = &model.net;
    let report = grad_check_finite_diff(&mut model.store, &coords, DEFAULT_STEP, |tape, store| {
        let mut opts = ForwardOptions::train(seed);
        if mixed_depth {
            opts = opts.with_mixed_depth();
        }
        let out = net.forward(store, tape, &images, opts)?;
        let r = tape.constant(projection.clone());
        let mut loss = out.logits.mul(r)?.sum();
        if let Some(u) = out.unrolled_logits {
            loss = loss.add(u.mul(r)?.sum())?;
        }
        Ok(loss)
    })?;
    let mut per_module = BTreeMap::new();
    for c in report.smooth() {
        let m = per_module.entry(module_of(&model.store.entry(c.param).name)).or_insert(0.0f64);
        *m = m.max(c.rel_error);
    }
    Ok(ModelGradCheck {
        coords: report.smooth().count(),
        kinks: report.coords.len() - report.smooth().count(),
        per_module,
        worst: report.worst().cloned(),
        max_rel_error: report.max_rel_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::preset;

    #[test]
    fn names_map_to_modules() {
        assert_eq!(module_of("s0.b0.lrc.alpha"), "lrc");
        assert_eq!(module_of("s1.b0.nll0.fc1.weight"), "nll");
        assert_eq!(module_of("s0.b0.attn.qkv.weight"), "attention");
        assert_eq!(module_of("s0.b0.ffn.fc2.bias"), "ffn");
        assert_eq!(module_of("s0.b0.norm1.gain"), "norm");
        assert_eq!(module_of("stem.0.conv"), "stem");
        assert_eq!(module_of("pool0.weight"), "pool");
        assert_eq!(module_of("pos_embed"), "embedding");
        assert_eq!(module_of("head.weight"), "head");
        assert_eq!(module_of("unrolled_head.bias"), "head");
    }

    #[test]
    fn desk_model_passes_with_every_module_covered() {
        let report = model_gradcheck(&preset("desk").unwrap(), 1, 3, false).unwrap();
        assert!(report.coords >= 200, "{}", report.coords);
        for m in ["lrc", "nll", "attention", "ffn", "norm", "stem", "pool", "embedding", "head"] {
            assert!(report.per_module.contains_key(m), "missing {m}");
        }
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
