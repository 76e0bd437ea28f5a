//! Combining per-scale predictions.
//!
//! The hierarchical chain runs from the lowest scale upwards. At every step
//! the running result plays the lower member of a pair and is merged with
//! the next scale as
//!
//! ```text
//! C ← U(C · α_lower) + (1 − U(α_lower)) · L_next
//! ```
//!
//! where `U` is bilinear upsampling to the next scale's resolution and
//! `α_lower` is the attention produced by the lower scale's forward pass. The
//! product is formed before upsampling. Because the chain is linear in the
//! logits for fixed attention, running it on one-hot indicator maps yields
//! each scale's effective per-pixel weight.

use crate::error::{bail, Result};
use crate::labels::LabelMap;
use crate::segnet::{AttentionMap, LogitMap, ScaledForward};
use crate::tensor::kernels::bilinear_forward;
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Ordered inference scales.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleSet {
    scales: Vec<f64>,
    target_index: usize,
}

impl ScaleSet {
    /// Scales must be positive and strictly increasing; the output
    /// resolution defaults to the largest.
    pub fn new(scales: Vec<f64>) -> Result<Self> {
        if scales.is_empty() {
            bail!(Config, "a scale set needs at least one scale");
        }
        if let Some(bad) = scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            bail!(Config, "scales must be positive, got {bad}");
        }
        if scales.windows(2).any(|w| w[0] >= w[1]) {
            bail!(Config, "scales must be distinct and increasing, got {scales:?}");
        }
        let target_index = scales.len() - 1;
        Ok(Self {
            scales,
            target_index,
        })
    }

    pub fn with_target(mut self, index: usize) -> Result<Self> {
        if index >= self.scales.len() {
            bail!(Config, "target index {index} outside {} scales", self.scales.len());
        }
        self.target_index = index;
        Ok(self)
    }

    /// Parses a comma-separated list such as `0.5,1.0,2.0`.
    pub fn parse(text: &str) -> Result<Self> {
        let scales = text
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| crate::Error::Config(format!("bad scale {s:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(scales)
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn target_index(&self) -> usize {
        self.target_index
    }

    pub fn len(&self) -> usize {
        self.scales.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scales.is_empty()
    }
}

/// One scale's contribution to a fusion.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleInput {
    pub scale: f64,
    pub logits: LogitMap,
    pub attention: Option<AttentionMap>,
}

impl From<ScaledForward> for ScaleInput {
    fn from(f: ScaledForward) -> Self {
        Self {
            scale: f.scale,
            logits: f.logits,
            attention: Some(f.attention),
        }
    }
}

impl From<&ScaledForward> for ScaleInput {
    fn from(f: &ScaledForward) -> Self {
        f.clone().into()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionResult {
    pub fused: LogitMap,
    /// One `[1, H, W]` map per scale, in input order.
    pub effective_weights: Vec<Tensor<f32>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    Hierarchical,
    Explicit,
    Average,
    Max,
    /// One scale, no fusion.
    Single,
}

impl std::str::FromStr for FusionMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "hier" | "hierarchical" => Self::Hierarchical,
            "explicit" => Self::Explicit,
            "avg" | "average" => Self::Average,
            "max" => Self::Max,
            "single" => Self::Single,
            other => bail!(
                Config,
                "unknown fusion mode {other:?}; expected hier, explicit, avg, max or single"
            ),
        })
    }
}

/// `U(L_lo · α_lo) + (1 − U(α_lo)) · L_hi` on the tape.
///
/// `lower_logits` is `[1, C, h, w]` or `[1, 1, h, w]`, `lower_attention` is
/// `[1, 1, h, w]` and `higher_logits` sets the output resolution.
pub fn fuse_pair_on<T: Scalar>(
    tape: &mut Tape<T>,
    lower_logits: Var,
    lower_attention: Var,
    higher_logits: Var,
) -> Result<Var> {
    let shape = tape.value(higher_logits).shape().to_vec();
    if shape.len() != 4 {
        bail!(Dimension, "fusion expects [1, C, H, W] logits, got {shape:?}");
    }
    let (h, w) = (shape[2], shape[3]);
    let weighted = tape.mul(lower_logits, lower_attention)?;
    let up_weighted = tape.bilinear_resize(weighted, h, w)?;
    let up_alpha = tape.bilinear_resize(lower_attention, h, w)?;
    let complement = tape.affine(up_alpha, -T::one(), T::one());
    let kept = tape.mul(complement, higher_logits)?;
    tape.add(up_weighted, kept)
}

/// Chains [`fuse_pair_on`] from the first (lowest) to the last entry.
pub fn fuse_hierarchical_on<T: Scalar>(
    tape: &mut Tape<T>,
    logits: &[Var],
    attentions: &[Option<Var>],
) -> Result<Var> {
    if logits.is_empty() {
        bail!(Usage, "hierarchical fusion needs at least one scale");
    }
    if attentions.len() != logits.len() {
        bail!(
            Usage,
            "{} attention slots for {} scales",
            attentions.len(),
            logits.len()
        );
    }
    let mut running = logits[0];
    for i in 1..logits.len() {
        let Some(alpha) = attentions[i - 1] else {
            bail!(Usage, "scale {} has no attention map but is not the largest", i - 1);
        };
        running = fuse_pair_on(tape, running, alpha, logits[i])?;
    }
    Ok(running)
}

fn to4(t: &Tensor<f32>) -> Tensor<f32> {
    let [_, c, h, w] = t.dims4();
    t.clone().reshape(&[1, c, h, w]).expect("same length")
}

fn to3(t: Tensor<f32>) -> Tensor<f32> {
    let [_, c, h, w] = t.dims4();
    t.reshape(&[c, h, w]).expect("same length")
}

fn check_consistent(inputs: &[ScaleInput]) -> Result<usize> {
    let Some(first) = inputs.first() else {
        bail!(Usage, "fusion needs at least one scale");
    };
    let classes = first.logits.classes();
    for s in inputs {
        if s.logits.0.shape().len() != 3 {
            bail!(Dimension, "logits must be [C, H, W], got {:?}", s.logits.0.shape());
        }
        if s.logits.classes() != classes {
            bail!(
                Dimension,
                "scale {} has {} classes, expected {classes}",
                s.scale,
                s.logits.classes()
            );
        }
        if let Some(a) = &s.attention {
            let dims = a.0.shape();
            if dims.len() != 3
                || dims[0] != 1
                || (a.height(), a.width()) != (s.logits.height(), s.logits.width())
            {
                bail!(
                    Dimension,
                    "attention {:?} does not align with logits {:?} at scale {}",
                    dims,
                    s.logits.0.shape(),
                    s.scale
                );
            }
        }
    }
    Ok(classes)
}

fn check_ascending(inputs: &[ScaleInput]) -> Result<()> {
    if inputs.windows(2).any(|w| w[0].scale >= w[1].scale) {
        let scales: Vec<f64> = inputs.iter().map(|s| s.scale).collect();
        bail!(Usage, "scales must be strictly ascending, got {scales:?}");
    }
    Ok(())
}

/// Two-scale fusion; `lower` must have the smaller scale and an attention map.
pub fn fuse_pair(lower: &ScaleInput, higher: &ScaleInput) -> Result<LogitMap> {
    if lower.scale >= higher.scale {
        bail!(
            Usage,
            "lower scale {} is not below higher scale {}",
            lower.scale,
            higher.scale
        );
    }
    let inputs = [lower.clone(), higher.clone()];
    check_consistent(&inputs)?;
    let Some(alpha) = &lower.attention else {
        bail!(Usage, "the lower scale needs an attention map");
    };
    let mut tape = Tape::<f32>::new();
    let ll = tape.constant(to4(&lower.logits.0));
    let la = tape.constant(to4(&alpha.0));
    let hl = tape.constant(to4(&higher.logits.0));
    let out = fuse_pair_on(&mut tape, ll, la, hl)?;
    Ok(LogitMap(to3(tape.take_value(out))))
}

/// N-scale hierarchical fusion over inputs in ascending scale order. The
/// output has the resolution of the largest scale.
pub fn fuse_hierarchical(inputs: &[ScaleInput]) -> Result<FusionResult> {
    check_consistent(inputs)?;
    check_ascending(inputs)?;
    let mut tape = Tape::<f32>::new();
    let logits: Vec<Var> = inputs.iter().map(|s| tape.constant(to4(&s.logits.0))).collect();
    let attentions: Vec<Option<Var>> = inputs
        .iter()
        .map(|s| s.attention.as_ref().map(|a| tape.constant(to4(&a.0))))
        .collect();
    let fused = fuse_hierarchical_on(&mut tape, &logits, &attentions)?;
    let fused = LogitMap(to3(tape.take_value(fused)));

    let mut effective_weights = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let indicators: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(j, s)| {
                let v = if i == j { 1.0 } else { 0.0 };
                let t = Tensor::full(&[1, 1, s.logits.height(), s.logits.width()], v)
                    .expect("valid extents");
                tape.constant(t)
            })
            .collect();
        let w = fuse_hierarchical_on(&mut tape, &indicators, &attentions)?;
        effective_weights.push(to3(tape.take_value(w)));
    }
    Ok(FusionResult {
        fused,
        effective_weights,
    })
}

fn largest(inputs: &[ScaleInput]) -> (usize, usize) {
    inputs
        .iter()
        .map(|s| (s.logits.height(), s.logits.width()))
        .max_by_key(|&(h, w)| h * w)
        .expect("non-empty")
}

fn upsample(t: &Tensor<f32>, to: (usize, usize)) -> Vec<f32> {
    let [_, c, h, w] = t.dims4();
    bilinear_forward(t.data(), c, (h, w), to)
}

/// Explicit per-scale attention: every attention map is upsampled to the
/// output resolution and normalised to sum to one per pixel.
pub fn fuse_explicit(inputs: &[ScaleInput], attention: &[AttentionMap]) -> Result<FusionResult> {
    let classes = check_consistent(inputs)?;
    if attention.len() != inputs.len() {
        bail!(
            Usage,
            "{} attention maps for {} scales",
            attention.len(),
            inputs.len()
        );
    }
    let (h, w) = largest(inputs);
    let hw = h * w;
    let raw: Vec<Vec<f32>> = attention.iter().map(|a| upsample(&a.0, (h, w))).collect();
    if let Some(neg) = raw.iter().flatten().find(|v| v.is_nan() || **v < 0.0) {
        bail!(Data, "attention weights must be non-negative, found {neg}");
    }
    let mut weights = vec![vec![0.0f32; hw]; inputs.len()];
    for p in 0..hw {
        let total: f32 = raw.iter().map(|a| a[p]).sum();
        for (i, a) in raw.iter().enumerate() {
            weights[i][p] = if total > 0.0 {
                a[p] / total
            } else {
                1.0 / inputs.len() as f32
            };
        }
    }
    let mut fused = vec![0.0f32; classes * hw];
    for (s, wmap) in inputs.iter().zip(&weights) {
        let up = upsample(&s.logits.0, (h, w));
        for c in 0..classes {
            for p in 0..hw {
                fused[c * hw + p] += up[c * hw + p] * wmap[p];
            }
        }
    }
    Ok(FusionResult {
        fused: LogitMap(Tensor::new(&[classes, h, w], fused)?),
        effective_weights: weights
            .into_iter()
            .map(|w_| Tensor::new(&[1, h, w], w_))
            .collect::<Result<_>>()?,
    })
}

fn fuse_pointwise(inputs: &[ScaleInput], reduce: impl Fn(f32, f32) -> f32, finish: impl Fn(f32) -> f32) -> Result<LogitMap> {
    let classes = check_consistent(inputs)?;
    let (h, w) = largest(inputs);
    let mut acc: Option<Vec<f32>> = None;
    for s in inputs {
        let up = upsample(&s.logits.0, (h, w));
        acc = Some(match acc {
            None => up,
            Some(mut a) => {
                for (x, y) in a.iter_mut().zip(up) {
                    *x = reduce(*x, y);
                }
                a
            }
        });
    }
    let data = acc.expect("non-empty").into_iter().map(finish).collect();
    Ok(LogitMap(Tensor::new(&[classes, h, w], data)?))
}

/// Pointwise mean of all scales upsampled to the largest resolution.
pub fn fuse_average(inputs: &[ScaleInput]) -> Result<LogitMap> {
    let n = inputs.len() as f32;
    fuse_pointwise(inputs, |a, b| a + b, |v| v / n)
}

/// Pointwise per-channel maximum of all scales upsampled to the largest resolution.
pub fn fuse_max(inputs: &[ScaleInput]) -> Result<LogitMap> {
    fuse_pointwise(inputs, f32::max, |v| v)
}

/// Per-pixel channel argmax; ties go to the lowest class id.
pub fn argmax_prediction(fused: &LogitMap) -> Result<LabelMap> {
    let (c, h, w) = (fused.classes(), fused.height(), fused.width());
    if c > 254 {
        bail!(Dimension, "{c} classes do not fit 8-bit labels");
    }
    let hw = h * w;
    let d = fused.0.data();
    let labels = (0..hw)
        .map(|p| {
            let mut best = 0;
            for k in 1..c {
                if d[k * hw + p] > d[best * hw + p] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::new(h, w, c.max(2) as u8, labels)
}

/// Resizes a `[C, H, W]` map to a new resolution.
pub fn resize_map(t: &Tensor<f32>, h: usize, w: usize) -> Result<Tensor<f32>> {
    let [_, c, _, _] = t.dims4();
    Tensor::new(&[c, h, w], upsample(t, (h, w)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(scale: f64, c: usize, h: usize, w: usize, v: f32, alpha: Option<f32>) -> ScaleInput {
        ScaleInput {
            scale,
            logits: LogitMap(Tensor::full(&[c, h, w], v).unwrap()),
            attention: alpha.map(|a| AttentionMap(Tensor::full(&[1, h, w], a).unwrap())),
        }
    }

    #[test]
    fn scale_set_validation() {
        assert!(ScaleSet::new(vec![]).is_err());
        assert!(ScaleSet::new(vec![1.0, 0.5]).is_err());
        assert!(ScaleSet::new(vec![0.5, 0.5]).is_err());
        assert!(ScaleSet::new(vec![0.0, 1.0]).is_err());
        let s = ScaleSet::parse("0.25, 0.5,1.0,2.0").unwrap();
        assert_eq!(s.scales(), &[0.25, 0.5, 1.0, 2.0]);
        assert_eq!(s.target_index(), 3);
        assert!(s.clone().with_target(4).is_err());
    }

    #[test]
    fn misordered_pair_is_usage_error() {
        let lo = input(0.5, 2, 2, 2, 1.0, Some(0.5));
        let hi = input(1.0, 2, 4, 4, 1.0, Some(0.5));
        assert!(matches!(fuse_pair(&hi, &lo), Err(crate::Error::Usage(_))));
        assert!(matches!(
            fuse_hierarchical(&[hi, lo]),
            Err(crate::Error::Usage(_))
        ));
    }

    #[test]
    fn missing_attention_is_usage_error() {
        let lo = input(0.5, 2, 2, 2, 1.0, None);
        let hi = input(1.0, 2, 4, 4, 1.0, None);
        assert!(matches!(
            fuse_hierarchical(&[lo, hi.clone()]),
            Err(crate::Error::Usage(_))
        ));
        // The largest scale never needs one.
        assert!(fuse_hierarchical(&[hi]).is_ok());
    }

    #[test]
    fn constant_maps_through_average_and_max() {
        let a = input(0.5, 3, 2, 2, 1.0, None);
        let b = input(1.0, 3, 4, 4, 4.0, None);
        let avg = fuse_average(&[a.clone(), b.clone()]).unwrap();
        assert!(avg.0.data().iter().all(|&v| v == 2.5));
        let max = fuse_max(&[a, b]).unwrap();
        assert!(max.0.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn explicit_count_mismatch() {
        let a = input(1.0, 2, 2, 2, 1.0, None);
        assert!(matches!(fuse_explicit(&[a], &[]), Err(crate::Error::Usage(_))));
    }

    #[test]
    fn argmax_ties_go_low() {
        let t = Tensor::new(&[3, 1, 2], vec![1.0, 0.0, 1.0, 2.0, 0.5, 2.0]).unwrap();
        let l = argmax_prediction(&LogitMap(t)).unwrap();
        assert_eq!(l.data(), &[0, 1]);
    }
}
