//! Multi-scale prediction with a trained network.

use crate::error::{bail, Result};
use crate::fusion::{
    fuse_average, fuse_explicit, fuse_hierarchical, fuse_max, resize_map, FusionMode, ScaleInput,
    ScaleSet,
};
use crate::segnet::{LogitMap, Network, ScaledForward};
use crate::tensor::Tensor;

/// Fused prediction brought back to the input image resolution.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub logits: LogitMap,
    /// Per-scale `[1, H, W]` weights for modes that define them.
    pub effective_weights: Option<Vec<Tensor<f32>>>,
    pub per_scale: Vec<ScaledForward>,
}

/// Runs one forward pass per scale.
pub fn forward_scales(net: &Network, image: &Tensor<f32>, scales: &ScaleSet) -> Result<Vec<ScaledForward>> {
    scales
        .scales()
        .iter()
        .map(|&s| net.forward_at_scale(image, s))
        .collect()
}

/// Combines precomputed per-scale outputs and resizes to `(height, width)`.
pub fn fuse_outputs(
    per_scale: &[ScaledForward],
    mode: FusionMode,
    height: usize,
    width: usize,
) -> Result<(LogitMap, Option<Vec<Tensor<f32>>>)> {
    let inputs: Vec<ScaleInput> = per_scale.iter().map(ScaleInput::from).collect();
    let (fused, weights) = match mode {
        FusionMode::Hierarchical => {
            let r = fuse_hierarchical(&inputs)?;
            (r.fused, Some(r.effective_weights))
        }
        FusionMode::Explicit => {
            let att: Vec<_> = per_scale.iter().map(|f| f.attention.clone()).collect();
            let r = fuse_explicit(&inputs, &att)?;
            (r.fused, Some(r.effective_weights))
        }
        FusionMode::Average => (fuse_average(&inputs)?, None),
        FusionMode::Max => (fuse_max(&inputs)?, None),
        FusionMode::Single => {
            if inputs.len() != 1 {
                bail!(Config, "single-scale inference takes exactly one scale, got {}", inputs.len());
            }
            (inputs[0].logits.clone(), None)
        }
    };
    let logits = if (fused.height(), fused.width()) == (height, width) {
        fused
    } else {
        LogitMap(resize_map(&fused.0, height, width)?)
    };
    let weights = weights
        .map(|ws| {
            ws.iter()
                .map(|w| match w.shape()[1..] == [height, width] {
                    true => Ok(w.clone()),
                    false => resize_map(w, height, width),
                })
                .collect::<Result<Vec<_>>>()
        })
        .transpose()?;
    Ok((logits, weights))
}

/// Predicts logits for a `[3, H, W]` image at the image's own resolution.
pub fn predict(net: &Network, image: &Tensor<f32>, scales: &ScaleSet, mode: FusionMode) -> Result<Prediction> {
    let shape = image.shape();
    if shape.len() != 3 {
        bail!(Dimension, "image must be [3, H, W], got {shape:?}");
    }
    let per_scale = forward_scales(net, image, scales)?;
    let (logits, effective_weights) = fuse_outputs(&per_scale, mode, shape[1], shape[2])?;
    Ok(Prediction {
        logits,
        effective_weights,
        per_scale,
    })
}
