#![allow(dead_code)]

use hmsa::tensor::{Scalar, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(-1.0..1.0))).unwrap()
}

/// Naive six-loop cross-correlation on NCHW data.
pub fn conv2d_loops(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: &Tensor<f64>,
    stride: usize,
    pad: usize,
) -> Tensor<f64> {
    let [n, cin, h, wd] = x.dims4();
    let [cout, _, kh, kw] = w.dims4();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * cout * oh * ow];
    for bi in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.data()[co];
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()
                                    [((bi * cin + ci) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((co * cin + ci) * kh + ky) * kw + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((bi * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, cout, oh, ow], out).unwrap()
}

/// Builds a scalar loss from leaf tensors on a tape of either precision.
pub trait LossBuilder {
    fn build<T: Scalar>(&self, tape: &mut Tape<T>, vars: &[Var]) -> Var;
}

/// Relative error `‖a − n‖ / max(‖a‖, ‖n‖)` between autodiff gradients in
/// precision `T` and central finite differences (step `h`) evaluated in f64.
pub fn gradcheck<T: Scalar>(inputs: &[Tensor<f64>], loss: &impl LossBuilder, h: f64) -> f64 {
    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::<T>::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.cast(), true)).collect();
        let l = loss.build(&mut tape, &vars);
        tape.backward(l).unwrap();
        vars.iter()
            .map(|&v| match tape.grad(v) {
                Some(g) => g.data().iter().map(|x| x.as_f64()).collect(),
                None => vec![0.0; tape.value(v).len()],
            })
            .collect()
    };
    let eval = |ts: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = ts.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let l = loss.build(&mut tape, &vars);
        tape.value(l).data()[0]
    };
    let mut diff2 = 0.0;
    let mut a2 = 0.0;
    let mut n2 = 0.0;
    for (which, grads) in analytic.iter().enumerate() {
        for (i, &a) in grads.iter().enumerate() {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
        }
    }
    let scale = a2.sqrt().max(n2.sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff2.sqrt() / scale
    }
}

/// Differentiable operation under test, wrapped so that its output is
/// contracted against a fixed random probe into a scalar.
#[derive(Clone)]
pub enum OpCase {
    Conv2d { stride: usize, padding: usize },
    GroupNorm { groups: usize },
    Resize { out_h: usize, out_w: usize },
    Elementwise(hmsa::tensor::ElementwiseOp),
    Relu,
    Sigmoid,
    Affine { mul: f64, add: f64 },
    Softmax,
    Sum,
    CrossEntropy(hmsa::LabelMap),
    /// conv → group norm → relu → conv → sigmoid → resize.
    ThreeLayer,
}

pub struct Case {
    pub name: &'static str,
    pub op: OpCase,
    pub inputs: Vec<Tensor<f64>>,
    probe_seed: u64,
}

impl Case {
    pub fn new(name: &'static str, op: OpCase, inputs: Vec<Tensor<f64>>, probe_seed: u64) -> Self {
        Self {
            name,
            op,
            inputs,
            probe_seed,
        }
    }

    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, v: &[Var]) -> Var {
        match &self.op {
            OpCase::Conv2d { stride, padding } => {
                tape.conv2d(v[0], v[1], v[2], *stride, *padding).unwrap()
            }
            OpCase::GroupNorm { groups } => tape
                .group_norm(v[0], *groups, v[1], v[2], T::from_f64(1e-5))
                .unwrap(),
            OpCase::Resize { out_h, out_w } => tape.bilinear_resize(v[0], *out_h, *out_w).unwrap(),
            OpCase::Elementwise(op) => tape.elementwise(*op, v[0], v[1]).unwrap(),
            OpCase::Relu => tape.relu(v[0]),
            OpCase::Sigmoid => tape.sigmoid(v[0]),
            OpCase::Affine { mul, add } => tape.affine(v[0], T::from_f64(*mul), T::from_f64(*add)),
            OpCase::Softmax => tape.softmax_channels(v[0]).unwrap(),
            OpCase::Sum => tape.sum(v[0]),
            OpCase::CrossEntropy(labels) => {
                tape.cross_entropy_ignore(v[0], labels, hmsa::IGNORE_ID).unwrap()
            }
            OpCase::ThreeLayer => {
                let h = tape.conv2d(v[0], v[1], v[2], 1, 1).unwrap();
                let h = tape.group_norm(h, 2, v[3], v[4], T::from_f64(1e-5)).unwrap();
                let h = tape.relu(h);
                let h = tape.conv2d(h, v[5], v[6], 2, 1).unwrap();
                let h = tape.sigmoid(h);
                tape.bilinear_resize(h, 7, 5).unwrap()
            }
        }
    }
}

impl LossBuilder for Case {
    fn build<T: Scalar>(&self, tape: &mut Tape<T>, vars: &[Var]) -> Var {
        let out = self.forward(tape, vars);
        if tape.value(out).len() == 1 {
            return out;
        }
        let shape = tape.value(out).shape().to_vec();
        let mut r = rng(self.probe_seed);
        let probe = tape.constant(random_tensor::<T>(&mut r, &shape));
        let weighted = tape.mul(out, probe).unwrap();
        tape.sum(weighted)
    }
}

/// One case per differentiable operation, on small random tensors.
pub fn op_cases(seed: u64) -> Vec<Case> {
    use hmsa::tensor::ElementwiseOp::*;
    let mut r = rng(seed);
    let mut t = |shape: &[usize]| random_tensor::<f64>(&mut r, shape);
    // Keep relu inputs away from the kink so central differences are valid.
    let relu_in = t(&[1, 2, 3, 3]).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
    let labels = hmsa::LabelMap::new(3, 3, 4, vec![0, 1, 2, 3, 255, 1, 2, 2, 0]).unwrap();
    vec![
        Case::new(
            "conv2d stride 1 pad 1",
            OpCase::Conv2d { stride: 1, padding: 1 },
            vec![t(&[2, 3, 5, 4]), t(&[4, 3, 3, 3]), t(&[4])],
            1,
        ),
        Case::new(
            "conv2d stride 2 pad 1",
            OpCase::Conv2d { stride: 2, padding: 1 },
            vec![t(&[1, 2, 6, 6]), t(&[3, 2, 3, 3]), t(&[3])],
            2,
        ),
        Case::new(
            "conv2d 1x1",
            OpCase::Conv2d { stride: 1, padding: 0 },
            vec![t(&[1, 3, 4, 4]), t(&[2, 3, 1, 1]), t(&[2])],
            3,
        ),
        Case::new(
            "group_norm",
            OpCase::GroupNorm { groups: 2 },
            vec![t(&[2, 4, 3, 3]), t(&[4]), t(&[4])],
            4,
        ),
        Case::new(
            "bilinear upsample",
            OpCase::Resize { out_h: 7, out_w: 9 },
            vec![t(&[1, 2, 3, 4])],
            5,
        ),
        Case::new(
            "bilinear downsample",
            OpCase::Resize { out_h: 3, out_w: 2 },
            vec![t(&[1, 2, 7, 5])],
            6,
        ),
        Case::new(
            "add broadcast",
            OpCase::Elementwise(Add),
            vec![t(&[1, 3, 2, 3]), t(&[1, 1, 2, 3])],
            7,
        ),
        Case::new(
            "mul broadcast",
            OpCase::Elementwise(Mul),
            vec![t(&[1, 1, 2, 3]), t(&[1, 3, 2, 3])],
            8,
        ),
        Case::new(
            "sub",
            OpCase::Elementwise(Sub),
            vec![t(&[1, 2, 2, 3]), t(&[1, 2, 2, 3])],
            9,
        ),
        Case::new("relu", OpCase::Relu, vec![relu_in], 10),
        Case::new("sigmoid", OpCase::Sigmoid, vec![t(&[1, 2, 3, 3])], 11),
        Case::new(
            "affine",
            OpCase::Affine { mul: -1.0, add: 1.0 },
            vec![t(&[1, 1, 3, 3])],
            12,
        ),
        Case::new("softmax_channels", OpCase::Softmax, vec![t(&[1, 4, 2, 3])], 13),
        Case::new("sum", OpCase::Sum, vec![t(&[2, 3])], 14),
        Case::new(
            "cross_entropy_ignore",
            OpCase::CrossEntropy(labels),
            vec![t(&[1, 4, 3, 3]).map(|v| 3.0 * v)],
            15,
        ),
        Case::new(
            "three-layer graph",
            OpCase::ThreeLayer,
            vec![
                t(&[1, 2, 6, 6]),
                t(&[4, 2, 3, 3]),
                t(&[4]),
                t(&[4]).map(|v| 1.0 + 0.5 * v),
                t(&[4]),
                t(&[3, 4, 3, 3]),
                t(&[3]),
            ],
            16,
        ),
    ]
}
