//! Segmentation network: a strided convolutional trunk shared across image
//! scales, a semantic head, an attention head and an optional auxiliary head.
//!
//! All heads read the trunk's stride-4 features. The semantic and attention
//! heads are `3x3 conv → norm → relu → 3x3 conv → norm → relu → 1x1 conv`,
//! differing only in output width (classes vs. one channel). The attention
//! output goes through a sigmoid so it can weight two scales against each
//! other. The auxiliary head is `1x1 conv → norm → relu → 1x1 conv`.

mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::tensor::{Parameter, Scalar, Tape, Tensor, Var};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};

/// Ratio between input resolution and trunk feature resolution.
pub const OUTPUT_STRIDE: usize = 4;
/// Inner width of every head.
pub const HEAD_WIDTH: usize = 64;
pub const NORM_EPS: f64 = 1e-5;
const MAX_NORM_GROUPS: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrunkConfig {
    /// Width of each stage. The first two stages open with a stride-2 block.
    pub channels: Vec<usize>,
    pub blocks_per_stage: usize,
}

impl Default for TrunkConfig {
    fn default() -> Self {
        Self {
            channels: vec![16, 32, 64],
            blocks_per_stage: 2,
        }
    }
}

impl TrunkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.len() < 2 {
            bail!(
                Config,
                "trunk needs at least two stages to reach output stride {OUTPUT_STRIDE}"
            );
        }
        if self.channels.contains(&0) {
            bail!(Config, "trunk stage widths must be positive");
        }
        if self.blocks_per_stage == 0 {
            bail!(Config, "blocks_per_stage must be positive");
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        *self.channels.last().expect("validated non-empty")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub trunk: TrunkConfig,
    pub num_classes: usize,
    pub with_aux: bool,
}

/// Largest divisor of `channels` not above eight.
pub fn norm_groups(channels: usize) -> usize {
    (1..=MAX_NORM_GROUPS.min(channels))
        .rev()
        .find(|g| channels.is_multiple_of(*g))
        .unwrap_or(1)
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    weight: usize,
    bias: usize,
    stride: usize,
    padding: usize,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: usize,
    beta: usize,
    groups: usize,
}

/// conv → group norm → relu
#[derive(Debug, Clone, Copy)]
struct Block {
    conv: Conv,
    norm: Norm,
}

#[derive(Debug, Clone)]
struct Head {
    blocks: Vec<Block>,
    out: Conv,
}

/// Per-scale outputs recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct ScaledVars {
    pub scale: f64,
    /// `[1, C, h, w]` at the scaled image resolution.
    pub logits: Var,
    /// `[1, 1, h, w]`, values in (0, 1).
    pub attention: Var,
    pub aux_logits: Option<Var>,
}

/// Class scores `[C, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMap(pub Tensor<f32>);

/// Relative weights `[1, H, W]` in (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap(pub Tensor<f32>);

impl LogitMap {
    pub fn classes(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }
}

impl AttentionMap {
    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }
}

/// Plain-tensor outputs of one forward pass at scale `scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledForward {
    pub scale: f64,
    pub logits: LogitMap,
    pub attention: AttentionMap,
    pub aux_logits: Option<LogitMap>,
}

/// Parameters of a [`Network`] registered on one tape.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Debug, Clone)]
pub struct Network<T: Scalar = f32> {
    config: NetworkConfig,
    params: Vec<Parameter<T>>,
    trunk: Vec<Block>,
    semantic: Head,
    attention: Head,
    aux: Option<Head>,
}

struct Builder<'a, T: Scalar> {
    params: Vec<Parameter<T>>,
    rng: &'a mut ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    fn push(&mut self, name: String, value: Tensor<T>) -> usize {
        self.params.push(Parameter::new(name, value));
        self.params.len() - 1
    }

    fn conv(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        gain: f64,
    ) -> Result<Conv> {
        let fan_in = (cin * k * k) as f64;
        let normal = Normal::new(0.0, gain / fan_in.sqrt()).expect("finite std");
        let rng = &mut *self.rng;
        let w = Tensor::from_fn(&[cout, cin, k, k], |_| T::from_f64(normal.sample(rng)))?;
        let weight = self.push(format!("{name}.weight"), w);
        let bias = self.push(format!("{name}.bias"), Tensor::zeros(&[cout])?);
        Ok(Conv {
            weight,
            bias,
            stride,
            padding: k / 2,
        })
    }

    fn norm(&mut self, name: &str, channels: usize) -> Result<Norm> {
        let gamma = self.push(format!("{name}.gamma"), Tensor::ones(&[channels])?);
        let beta = self.push(format!("{name}.beta"), Tensor::zeros(&[channels])?);
        Ok(Norm {
            gamma,
            beta,
            groups: norm_groups(channels),
        })
    }

    fn block(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Result<Block> {
        Ok(Block {
            conv: self.conv(&format!("{name}.conv"), cin, cout, k, stride, 2f64.sqrt())?,
            norm: self.norm(&format!("{name}.norm"), cout)?,
        })
    }

    fn head(&mut self, name: &str, cin: usize, cout: usize, k: usize, out_gain: f64) -> Result<Head> {
        let blocks = vec![
            self.block(&format!("{name}.0"), cin, HEAD_WIDTH, k, 1)?,
            self.block(&format!("{name}.1"), HEAD_WIDTH, HEAD_WIDTH, k, 1)?,
        ];
        let out = self.conv(&format!("{name}.out"), HEAD_WIDTH, cout, 1, 1, out_gain)?;
        Ok(Head { blocks, out })
    }
}

impl<T: Scalar> Network<T> {
    /// Deterministic He-normal initialization from `seed`; biases start at
    /// zero, so the attention head initially outputs 0.5 everywhere up to the
    /// small random final weights.
    pub fn build(trunk: TrunkConfig, num_classes: usize, with_aux: bool, seed: u64) -> Result<Self> {
        trunk.validate()?;
        if !(2..=254).contains(&num_classes) {
            bail!(Config, "num_classes must be in 2..=254, got {num_classes}");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::<T> {
            params: Vec::new(),
            rng: &mut rng,
        };
        let mut layers = Vec::new();
        let mut cin = 3;
        for (s, &width) in trunk.channels.iter().enumerate() {
            for i in 0..trunk.blocks_per_stage {
                let stride = if i == 0 && s < 2 { 2 } else { 1 };
                layers.push(b.block(&format!("trunk.{s}.{i}"), cin, width, 3, stride)?);
                cin = width;
            }
        }
        let feat = trunk.out_channels();
        let semantic = b.head("semantic", feat, num_classes, 3, 1.0)?;
        let attention = b.head("attention", feat, 1, 3, 0.1)?;
        let aux = if with_aux {
            let first = b.block("aux.0", feat, HEAD_WIDTH, 1, 1)?;
            let out = b.conv("aux.out", HEAD_WIDTH, num_classes, 1, 1, 1.0)?;
            Some(Head {
                blocks: vec![first],
                out,
            })
        } else {
            None
        };
        let params = b.params;
        Ok(Self {
            config: NetworkConfig {
                trunk,
                num_classes,
                with_aux,
            },
            params,
            trunk: layers,
            semantic,
            attention,
            aux,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    /// Converts parameters to another precision, keeping the layout.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Parameter::new(p.name.clone(), p.value.cast()))
                .collect(),
            trunk: self.trunk.clone(),
            semantic: self.semantic.clone(),
            attention: self.attention.clone(),
            aux: self.aux.clone(),
        }
    }

    /// Registers every parameter as a leaf. One binding is shared by all
    /// scales evaluated on the tape, which is what ties the trunk weights.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| tape.leaf(p.value.clone(), requires_grad && p.requires_grad))
                .collect(),
        }
    }

    /// Adds the gradients recorded on `tape` into each parameter.
    pub fn accumulate_grads(&mut self, tape: &Tape<T>, bound: &Bound) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(&bound.vars) {
            match tape.grad(v) {
                Some(g) => p.accumulate_grad(g)?,
                None if p.grad.is_none() => p.grad = Some(Tensor::zeros(p.value.shape())?),
                None => {}
            }
        }
        Ok(())
    }

    /// Image size a forward pass at `scale` would use, validated against the
    /// output stride.
    pub fn scaled_size(height: usize, width: usize, scale: f64) -> Result<(usize, usize)> {
        if !(scale.is_finite() && scale > 0.0) {
            bail!(Config, "scale must be a positive number, got {scale}");
        }
        let round = |v: usize| (v as f64 * scale).round() as usize;
        let (h, w) = (round(height), round(width));
        if h == 0 || w == 0 || h % OUTPUT_STRIDE != 0 || w % OUTPUT_STRIDE != 0 {
            let fix = |v: usize| {
                (v..v + 64 * OUTPUT_STRIDE)
                    .find(|&p| {
                        let s = round(p);
                        s > 0 && s % OUTPUT_STRIDE == 0
                    })
                    .map(|p| p - v)
            };
            let pad = |v| fix(v).map_or("none found".to_string(), |p| p.to_string());
            bail!(
                Config,
                "scale {scale} maps {height}x{width} to {h}x{w}, which is not a multiple of the \
                 output stride {OUTPUT_STRIDE}; pad the image by {} rows and {} columns",
                pad(height),
                pad(width)
            );
        }
        Ok((h, w))
    }

    /// Runs trunk and heads on `image` (`[1, 3, H, W]` on the tape) resized by `scale`.
    pub fn forward_at_scale_on(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        image: Var,
        scale: f64,
    ) -> Result<ScaledVars> {
        let shape = tape.value(image).shape().to_vec();
        if shape.len() != 4 || shape[0] != 1 || shape[1] != 3 {
            bail!(Dimension, "image must be [1, 3, H, W], got {shape:?}");
        }
        let (h, w) = Self::scaled_size(shape[2], shape[3], scale)?;
        let x = tape.bilinear_resize(image, h, w)?;
        let mut feat = x;
        for block in &self.trunk {
            feat = self.run_block(tape, bound, feat, block)?;
        }
        let logits = self.run_head(tape, bound, feat, &self.semantic)?;
        let logits = tape.bilinear_resize(logits, h, w)?;
        let att = self.run_head(tape, bound, feat, &self.attention)?;
        let att = tape.sigmoid(att);
        let attention = tape.bilinear_resize(att, h, w)?;
        let aux_logits = match &self.aux {
            Some(head) => {
                let a = self.run_head(tape, bound, feat, head)?;
                Some(tape.bilinear_resize(a, h, w)?)
            }
            None => None,
        };
        Ok(ScaledVars {
            scale,
            logits,
            attention,
            aux_logits,
        })
    }

    fn run_conv(&self, tape: &mut Tape<T>, bound: &Bound, x: Var, c: &Conv) -> Result<Var> {
        tape.conv2d(x, bound.vars[c.weight], bound.vars[c.bias], c.stride, c.padding)
    }

    fn run_block(&self, tape: &mut Tape<T>, bound: &Bound, x: Var, b: &Block) -> Result<Var> {
        let y = self.run_conv(tape, bound, x, &b.conv)?;
        let y = tape.group_norm(
            y,
            b.norm.groups,
            bound.vars[b.norm.gamma],
            bound.vars[b.norm.beta],
            T::from_f64(NORM_EPS),
        )?;
        Ok(tape.relu(y))
    }

    fn run_head(&self, tape: &mut Tape<T>, bound: &Bound, x: Var, head: &Head) -> Result<Var> {
        let mut y = x;
        for b in &head.blocks {
            y = self.run_block(tape, bound, y, b)?;
        }
        self.run_conv(tape, bound, y, &head.out)
    }
}

impl Network<f32> {
    /// Inference-only forward pass on a `[3, H, W]` image.
    pub fn forward_at_scale(&self, image: &Tensor<f32>, scale: f64) -> Result<ScaledForward> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let img = image_var(&mut tape, image)?;
        let out = self.forward_at_scale_on(&mut tape, &bound, img, scale)?;
        Ok(scaled_forward_from(&mut tape, &out))
    }
}

/// Puts a `[3, H, W]` image on the tape as `[1, 3, H, W]`.
pub fn image_var<T: Scalar>(tape: &mut Tape<T>, image: &Tensor<T>) -> Result<Var> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        bail!(Dimension, "image must be [3, H, W], got {shape:?}");
    }
    let t = image.clone().reshape(&[1, 3, shape[1], shape[2]])?;
    Ok(tape.constant(t))
}

/// Copies tape outputs into plain per-scale maps.
pub fn scaled_forward_from(tape: &mut Tape<f32>, v: &ScaledVars) -> ScaledForward {
    let squeeze = |t: Tensor<f32>| {
        let [_, c, h, w] = t.dims4();
        t.reshape(&[c, h, w]).expect("same element count")
    };
    ScaledForward {
        scale: v.scale,
        logits: LogitMap(squeeze(tape.take_value(v.logits))),
        attention: AttentionMap(squeeze(tape.take_value(v.attention))),
        aux_logits: v.aux_logits.map(|a| LogitMap(squeeze(tape.take_value(a)))),
    }
}
