use super::kernels::{self, ConvGeometry, GroupNormCache};
use super::{Scalar, Tensor};
use crate::error::{bail, Result};
use crate::labels::LabelMap;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Mul,
    Sub,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Relu,
    Sigmoid,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeometry,
        cols: Option<Vec<T>>,
    },
    GroupNorm {
        input: Var,
        gamma: Var,
        groups: usize,
        beta: Var,
        cache: Option<GroupNormCache<T>>,
    },
    Resize {
        input: Var,
        planes: usize,
        from: (usize, usize),
        to: (usize, usize),
    },
    Elementwise {
        op: ElementwiseOp,
        a: Var,
        b: Var,
    },
    Unary {
        op: UnaryOp,
        input: Var,
    },
    Affine {
        input: Var,
        mul: T,
    },
    Softmax {
        input: Var,
    },
    Sum {
        input: Var,
    },
    CrossEntropy {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<u8>,
        ignore_id: u8,
        counted: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Define-by-run record of executed operations.
///
/// Nodes are appended in execution order, so inputs always precede their
/// consumers and a reverse sweep is a valid topological traversal. A fresh
/// tape is built for every forward pass.
#[derive(Debug)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    conv_macs: u64,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            conv_macs: 0,
        }
    }

    /// Drops every recorded node and the MAC counter.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.conv_macs = 0;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Convolution multiply-accumulates executed since creation or the last reset.
    pub fn conv_macs(&self) -> u64 {
        self.conv_macs
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by [`Tape::backward`], if any reached this value.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_value(&mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::scalar(T::zero()))
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        if x.shape().len() != 4 || w.shape().len() != 4 {
            bail!(
                Dimension,
                "conv2d needs 4-D input and weight, got {:?} and {:?}",
                x.shape(),
                w.shape()
            );
        }
        let geom = ConvGeometry::new(x.dims4(), w.dims4(), stride, padding)?;
        let b = self.value(bias);
        if b.len() != geom.out_channels {
            bail!(
                Dimension,
                "conv bias has {} entries for {} output channels",
                b.len(),
                geom.out_channels
            );
        }
        let (out, cols) = kernels::conv2d_forward(x.data(), w.data(), b.data(), &geom);
        self.conv_macs += geom.macs();
        let track = self.any_grad(&[input, weight, bias]);
        let value = Tensor::new(
            &[geom.batch, geom.out_channels, geom.out_h, geom.out_w],
            out,
        )?;
        Ok(self.push(
            value,
            track,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols: if track { cols } else { None },
            },
        ))
    }

    pub fn group_norm(
        &mut self,
        input: Var,
        groups: usize,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<Var> {
        let x = self.value(input);
        if x.shape().len() != 4 {
            bail!(Dimension, "group_norm needs a 4-D input, got {:?}", x.shape());
        }
        let dims = x.dims4();
        let channels = dims[1];
        if groups == 0 || !channels.is_multiple_of(groups) {
            bail!(
                Config,
                "{channels} channels cannot be split into {groups} groups"
            );
        }
        if self.value(gamma).len() != channels || self.value(beta).len() != channels {
            bail!(Dimension, "group_norm affine parameters must have {channels} entries");
        }
        let (out, cache) = kernels::group_norm_forward(
            x.data(),
            dims,
            groups,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        let track = self.any_grad(&[input, gamma, beta]);
        let value = Tensor::new(x.shape(), out)?;
        Ok(self.push(
            value,
            track,
            Op::GroupNorm {
                input,
                gamma,
                groups,
                beta,
                cache: track.then_some(cache),
            },
        ))
    }

    /// Half-pixel bilinear resize of the two trailing axes.
    pub fn bilinear_resize(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        if out_h == 0 || out_w == 0 {
            bail!(Dimension, "resize target must be at least 1x1");
        }
        let x = self.value(input);
        if x.shape().len() < 2 {
            bail!(Dimension, "resize needs at least 2 extents, got {:?}", x.shape());
        }
        let rank = x.shape().len();
        let (in_h, in_w) = (x.shape()[rank - 2], x.shape()[rank - 1]);
        let planes = x.len() / (in_h * in_w);
        let out = kernels::bilinear_forward(x.data(), planes, (in_h, in_w), (out_h, out_w));
        let mut shape = x.shape().to_vec();
        shape[rank - 2] = out_h;
        shape[rank - 1] = out_w;
        let track = self.any_grad(&[input]);
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(
            value,
            track,
            Op::Resize {
                input,
                planes,
                from: (in_h, in_w),
                to: (out_h, out_w),
            },
        ))
    }

    /// Pointwise add/mul/sub. Either operand may have a single channel, in
    /// which case it is broadcast across the other's channels.
    pub fn elementwise(&mut self, op: ElementwiseOp, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a), self.value(b));
        let layout = Broadcast::new(sa, sb)?;
        let (da, db) = (sa.data(), sb.data());
        let mut out = vec![T::zero(); layout.len()];
        for (i, o) in out.iter_mut().enumerate() {
            let (x, y) = (da[layout.a_index(i)], db[layout.b_index(i)]);
            *o = match op {
                ElementwiseOp::Add => x + y,
                ElementwiseOp::Mul => x * y,
                ElementwiseOp::Sub => x - y,
            };
        }
        let shape = if sa.len() >= sb.len() { sa.shape() } else { sb.shape() }.to_vec();
        let track = self.any_grad(&[a, b]);
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, track, Op::Elementwise { op, a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Add, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Mul, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseOp::Sub, a, b)
    }

    pub fn activation(&mut self, op: UnaryOp, input: Var) -> Var {
        let x = self.value(input);
        let value = match op {
            UnaryOp::Relu => x.map(|v| v.max(T::zero())),
            UnaryOp::Sigmoid => x.map(sigmoid),
        };
        let track = self.any_grad(&[input]);
        self.push(value, track, Op::Unary { op, input })
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.activation(UnaryOp::Relu, input)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.activation(UnaryOp::Sigmoid, input)
    }

    /// `mul * x + add`, e.g. loss weighting or the `1 - α` complement.
    pub fn affine(&mut self, input: Var, mul: T, add: T) -> Var {
        let value = self.value(input).map(|v| mul * v + add);
        let track = self.any_grad(&[input]);
        self.push(value, track, Op::Affine { input, mul })
    }

    pub fn softmax_channels(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        if x.shape().len() != 4 {
            bail!(Dimension, "softmax_channels needs [B,C,H,W], got {:?}", x.shape());
        }
        let out = kernels::softmax_channels(x.data(), x.dims4());
        let track = self.any_grad(&[input]);
        let value = Tensor::new(x.shape(), out)?;
        Ok(self.push(value, track, Op::Softmax { input }))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let value = Tensor::scalar(self.value(input).sum());
        let track = self.any_grad(&[input]);
        self.push(value, track, Op::Sum { input })
    }

    /// Mean negative log-softmax over pixels whose label is not `ignore_id`.
    ///
    /// When every pixel is ignored the loss is 0 and no gradient flows.
    pub fn cross_entropy_ignore(
        &mut self,
        logits: Var,
        labels: &LabelMap,
        ignore_id: u8,
    ) -> Result<Var> {
        let x = self.value(logits);
        let [batch, classes, h, w] = x.dims4();
        if x.shape().len() != 4 || batch != 1 {
            bail!(
                Dimension,
                "cross_entropy_ignore expects [1,C,H,W] logits, got {:?}",
                x.shape()
            );
        }
        if (labels.height(), labels.width()) != (h, w) {
            bail!(
                Dimension,
                "labels are {}x{}, logits are {h}x{w}",
                labels.height(),
                labels.width()
            );
        }
        if let Some((i, &bad)) = labels
            .data()
            .iter()
            .enumerate()
            .find(|&(_, &l)| l != ignore_id && l as usize >= classes)
        {
            bail!(
                Data,
                "label {bad} at pixel {i} is outside 0..{classes} and not the ignore id {ignore_id}"
            );
        }
        let probs = kernels::softmax_channels(x.data(), x.dims4());
        let hw = h * w;
        let mut total = 0.0f64;
        let mut counted = 0usize;
        for (p, &l) in labels.data().iter().enumerate() {
            if l == ignore_id {
                continue;
            }
            let at = |c: usize| c * hw + p;
            let max = (0..classes)
                .map(|c| x.data()[at(c)].as_f64())
                .fold(f64::NEG_INFINITY, f64::max);
            let lse = max
                + (0..classes)
                    .map(|c| (x.data()[at(c)].as_f64() - max).exp())
                    .sum::<f64>()
                    .ln();
            total += lse - x.data()[at(l as usize)].as_f64();
            counted += 1;
        }
        let loss = if counted == 0 {
            0.0
        } else {
            total / counted as f64
        };
        let track = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(T::from_f64(loss)),
            track,
            Op::CrossEntropy {
                logits,
                probs: if track { probs } else { Vec::new() },
                labels: labels.data().to_vec(),
                ignore_id,
                counted,
            },
        ))
    }

    /// Reverse sweep from a scalar loss. Gradients are summed into the
    /// `grad` slot of every node that requires one; existing gradients from
    /// an earlier sweep are added to, not replaced.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            bail!(
                Usage,
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            );
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            let node = &mut self.nodes[idx];
            match node.grad.as_mut() {
                Some(existing) => {
                    for (e, &v) in existing.data_mut().iter_mut().zip(&g) {
                        *e = *e + v;
                    }
                }
                None => node.grad = Some(Tensor::new(node.value.shape(), g)?),
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        // Input gradient buffers are moved out while a kernel writes into them
        // and put back afterwards, so two inputs never alias.
        let take = |grads: &mut [Option<Vec<T>>], v: Var| -> Option<Vec<T>> {
            wants(v).then(|| {
                grads[v.0]
                    .take()
                    .unwrap_or_else(|| vec![T::zero(); nodes[v.0].value.len()])
            })
        };
        match &nodes[idx].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            } => {
                let mut dx = take(grads, *input);
                let mut dw = take(grads, *weight);
                let mut db = take(grads, *bias);
                kernels::conv2d_backward(
                    nodes[input.0].value.data(),
                    nodes[weight.0].value.data(),
                    cols.as_deref(),
                    g,
                    geom,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                restore(grads, *input, dx);
                restore(grads, *weight, dw);
                restore(grads, *bias, db);
            }
            Op::GroupNorm {
                input,
                gamma,
                groups,
                beta,
                cache,
            } => {
                let cache = cache
                    .as_ref()
                    .expect("group norm cache recorded for tracked node");
                let mut dx = take(grads, *input);
                let mut dg = take(grads, *gamma);
                let mut db = take(grads, *beta);
                kernels::group_norm_backward(
                    g,
                    nodes[input.0].value.dims4(),
                    *groups,
                    nodes[gamma.0].value.data(),
                    cache,
                    dx.as_deref_mut(),
                    dg.as_deref_mut(),
                    db.as_deref_mut(),
                );
                restore(grads, *input, dx);
                restore(grads, *gamma, dg);
                restore(grads, *beta, db);
            }
            Op::Resize {
                input,
                planes,
                from,
                to,
            } => {
                if let Some(mut dx) = take(grads, *input) {
                    kernels::bilinear_backward(g, *planes, *from, *to, &mut dx);
                    grads[input.0] = Some(dx);
                }
            }
            Op::Elementwise { op, a, b } => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                let layout = Broadcast::new(va, vb).expect("validated in forward");
                if let Some(mut da) = take(grads, *a) {
                    for (i, &gi) in g.iter().enumerate() {
                        let d = match op {
                            ElementwiseOp::Add | ElementwiseOp::Sub => gi,
                            ElementwiseOp::Mul => gi * vb.data()[layout.b_index(i)],
                        };
                        let ai = layout.a_index(i);
                        da[ai] = da[ai] + d;
                    }
                    grads[a.0] = Some(da);
                }
                if let Some(mut db) = take(grads, *b) {
                    for (i, &gi) in g.iter().enumerate() {
                        let d = match op {
                            ElementwiseOp::Add => gi,
                            ElementwiseOp::Sub => -gi,
                            ElementwiseOp::Mul => gi * va.data()[layout.a_index(i)],
                        };
                        let bi = layout.b_index(i);
                        db[bi] = db[bi] + d;
                    }
                    grads[b.0] = Some(db);
                }
            }
            Op::Unary { op, input } => {
                if let Some(mut dx) = take(grads, *input) {
                    let y = nodes[idx].value.data();
                    for ((d, &gi), &yi) in dx.iter_mut().zip(g).zip(y) {
                        let local = match op {
                            UnaryOp::Relu if yi > T::zero() => T::one(),
                            UnaryOp::Relu => T::zero(),
                            UnaryOp::Sigmoid => yi * (T::one() - yi),
                        };
                        *d = *d + gi * local;
                    }
                    grads[input.0] = Some(dx);
                }
            }
            Op::Affine { input, mul } => {
                if let Some(mut dx) = take(grads, *input) {
                    for (d, &gi) in dx.iter_mut().zip(g) {
                        *d = *d + *mul * gi;
                    }
                    grads[input.0] = Some(dx);
                }
            }
            Op::Softmax { input } => {
                if let Some(mut dx) = take(grads, *input) {
                    let y = &nodes[idx].value;
                    let [batch, channels, h, w] = y.dims4();
                    let hw = h * w;
                    for b in 0..batch {
                        let base = b * channels * hw;
                        for p in 0..hw {
                            let at = |c: usize| base + c * hw + p;
                            let dot: T = (0..channels).map(|c| y.data()[at(c)] * g[at(c)]).sum();
                            for c in 0..channels {
                                let i = at(c);
                                dx[i] = dx[i] + y.data()[i] * (g[i] - dot);
                            }
                        }
                    }
                    grads[input.0] = Some(dx);
                }
            }
            Op::Sum { input } => {
                if let Some(mut dx) = take(grads, *input) {
                    for d in dx.iter_mut() {
                        *d = *d + g[0];
                    }
                    grads[input.0] = Some(dx);
                }
            }
            Op::CrossEntropy {
                logits,
                probs,
                labels,
                ignore_id,
                counted,
            } => {
                if let Some(mut dx) = take(grads, *logits) {
                    if *counted > 0 {
                        let [_, classes, h, w] = nodes[logits.0].value.dims4();
                        let hw = h * w;
                        let scale = g[0] / T::from_f64(*counted as f64);
                        for (p, &l) in labels.iter().enumerate() {
                            if l == *ignore_id {
                                continue;
                            }
                            for c in 0..classes {
                                let i = c * hw + p;
                                let target = if c == l as usize { T::one() } else { T::zero() };
                                dx[i] = dx[i] + scale * (probs[i] - target);
                            }
                        }
                    }
                    grads[logits.0] = Some(dx);
                }
            }
        }
    }
}

fn restore<T>(grads: &mut [Option<Vec<T>>], v: Var, taken: Option<Vec<T>>) {
    if let Some(buf) = taken {
        grads[v.0] = Some(buf);
    }
}

// Clamped so the result stays strictly inside (0, 1) even where the
// exact value rounds to an endpoint.
fn sigmoid<T: Scalar>(v: T) -> T {
    let y = if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    };
    let half_ulp = T::epsilon() / T::from_f64(2.0);
    y.max(T::min_positive_value()).min(T::one() - half_ulp)
}

/// Index mapping for channel broadcasting between two operands.
struct Broadcast {
    len: usize,
    hw: usize,
    channels: usize,
    a_channels: usize,
    b_channels: usize,
}

impl Broadcast {
    fn new<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Self> {
        if a.shape() == b.shape() {
            return Ok(Self {
                len: a.len(),
                hw: 1,
                channels: 1,
                a_channels: 1,
                b_channels: 1,
            });
        }
        let ([ba, ca, ha, wa], [bb, cb, hb, wb]) = (a.dims4(), b.dims4());
        let compatible = a.shape().len() == b.shape().len()
            && ba == bb
            && ha == hb
            && wa == wb
            && (ca == 1 || cb == 1);
        if !compatible {
            bail!(
                Dimension,
                "shapes {:?} and {:?} are not equal or channel-broadcastable",
                a.shape(),
                b.shape()
            );
        }
        let channels = ca.max(cb);
        Ok(Self {
            len: ba * channels * ha * wa,
            hw: ha * wa,
            channels,
            a_channels: ca,
            b_channels: cb,
        })
    }

    fn len(&self) -> usize {
        self.len
    }

    fn map(&self, i: usize, own: usize) -> usize {
        if own == self.channels {
            return i;
        }
        let p = i % self.hw;
        let b = i / (self.hw * self.channels);
        b * self.hw + p
    }

    fn a_index(&self, i: usize) -> usize {
        self.map(i, self.a_channels)
    }

    fn b_index(&self, i: usize) -> usize {
        self.map(i, self.b_channels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1, 1, 2, 2], &[1.0, -2.0, 3.0, 4.0]), true);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn square_gradient_is_twice_input() {
        let mut tape = Tape::<f64>::new();
        let data = [1.0, -2.0, 3.0, 0.5];
        let x = tape.leaf(t(&[4], &data), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        let expect: Vec<f64> = data.iter().map(|v| 2.0 * v).collect();
        assert_eq!(tape.grad(x).unwrap().data(), expect.as_slice());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        assert!(matches!(tape.backward(x), Err(crate::Error::Usage(_))));
    }

    #[test]
    fn gradients_accumulate_across_sweeps() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 2.0]);
        tape.reset();
        assert!(tape.is_empty());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let c = tape.constant(t(&[2], &[3.0, 4.0]));
        let p = tape.mul(x, c).unwrap();
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(x).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn mismatched_elementwise_shapes_are_rejected() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[1, 2, 3, 3]).unwrap());
        let b = tape.constant(Tensor::zeros(&[1, 3, 3, 3]).unwrap());
        let c = tape.constant(Tensor::zeros(&[1, 1, 2, 3]).unwrap());
        assert!(matches!(tape.add(a, b), Err(crate::Error::Dimension(_))));
        assert!(matches!(tape.mul(a, c), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn activations_at_reference_points() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[3], &[-1.0, 2.0, 0.0]), true);
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 2.0, 0.0]);
        let s = tape.sigmoid(x);
        assert_eq!(tape.value(s).data()[2], 0.5);
        let total = tape.sum(s);
        tape.backward(total).unwrap();
        assert!((tape.grad(x).unwrap().data()[2] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_stays_inside_open_interval() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new(&[4], vec![-30.0, -5.0, 5.0, 12.0]).unwrap());
        let s = tape.sigmoid(x);
        assert!(tape.value(s).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}
