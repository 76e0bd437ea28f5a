//! Built-in invariant suite: gradient checks, fusion identities and the
//! cost arithmetic, runnable from the command line.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autolabel::{storage_cost, LabelMode, StorageEstimate};
use crate::error::Result;
use crate::fusion::{fuse_average, fuse_explicit, fuse_hierarchical, fuse_pair, fuse_pair_on, ScaleInput};
use crate::labels::LabelMap;
use crate::segnet::{AttentionMap, LogitMap, Network, TrunkConfig};
use crate::synth::relative_training_cost;
use crate::tensor::{Tape, Tensor, Var};
use crate::trainer::forward_macs;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Names accepted by the corruption hook.
pub const CHECK_NAMES: [&str; 16] = [
    "grad.conv2d",
    "grad.group_norm",
    "grad.bilinear",
    "grad.mul_broadcast",
    "grad.relu",
    "grad.sigmoid",
    "grad.softmax",
    "grad.cross_entropy",
    "grad.fuse_pair",
    "fusion.limits",
    "fusion.partition_of_unity",
    "fusion.linearity",
    "fusion.explicit_uniform",
    "cost.arithmetic",
    "cost.mac_ratio",
    "storage.arithmetic",
];

type Builder = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;
type GradCase = (&'static str, Vec<Tensor<f64>>, Box<Builder>);

fn random(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0)).expect("valid shape")
}

/// Relative error between reverse-mode and central-difference gradients of
/// `probe · f(inputs)`. `skew` scales the analytic side.
fn gradcheck(inputs: &[Tensor<f64>], f: &Builder, skew: f64) -> Result<f64> {
    let probe_shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).shape().to_vec()
    };
    let probe = random(&mut ChaCha8Rng::seed_from_u64(99), &probe_shape);
    let eval = |tape: &mut Tape<f64>, vars: &[Var]| -> Result<Var> {
        let out = f(tape, vars)?;
        let p = tape.constant(probe.clone());
        let m = tape.mul(out, p)?;
        Ok(tape.sum(m))
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = eval(&mut tape, &vars)?;
    tape.backward(loss)?;
    let h = 1e-6;
    let (mut diff, mut an, mut nn) = (0.0, 0.0, 0.0);
    for (k, input) in inputs.iter().enumerate() {
        let grad = tape.grad(vars[k]).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; input.len()]);
        for (i, &g) in grad.iter().enumerate() {
            let value_at = |delta: f64| -> Result<f64> {
                let mut shifted = inputs.to_vec();
                shifted[k].data_mut()[i] += delta;
                let mut t = Tape::new();
                let vs: Vec<Var> = shifted.into_iter().map(|x| t.constant(x)).collect();
                let l = eval(&mut t, &vs)?;
                Ok(t.value(l).data()[0])
            };
            let numeric = (value_at(h)? - value_at(-h)?) / (2.0 * h);
            let analytic = g * skew;
            diff += (analytic - numeric).powi(2);
            an += analytic * analytic;
            nn += numeric * numeric;
        }
    }
    let scale = an.sqrt().max(nn.sqrt());
    Ok(if scale == 0.0 { 0.0 } else { diff.sqrt() / scale })
}

fn grad_cases() -> Vec<GradCase> {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let labels = LabelMap::new(2, 3, 3, vec![0, 1, 2, 255, 1, 0]).expect("valid labels");
    let relu_in = random(&mut r, &[1, 2, 3, 3]).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
    vec![
        (
            "grad.conv2d",
            vec![random(&mut r, &[1, 2, 5, 5]), random(&mut r, &[3, 2, 3, 3]), random(&mut r, &[3])],
            Box::new(|t: &mut Tape<f64>, v: &[Var]| t.conv2d(v[0], v[1], v[2], 2, 1)),
        ),
        (
            "grad.group_norm",
            vec![random(&mut r, &[1, 4, 3, 3]), random(&mut r, &[4]), random(&mut r, &[4])],
            Box::new(|t: &mut Tape<f64>, v: &[Var]| t.group_norm(v[0], 2, v[1], v[2], 1e-5)),
        ),
        (
            "grad.bilinear",
            vec![random(&mut r, &[1, 2, 3, 4])],
            Box::new(|t: &mut Tape<f64>, v: &[Var]| t.bilinear_resize(v[0], 5, 7)),
        ),
        (
            "grad.mul_broadcast",
            vec![random(&mut r, &[1, 3, 2, 3]), random(&mut r, &[1, 1, 2, 3])],
            Box::new(|t: &mut Tape<f64>, v: &[Var]| t.mul(v[0], v[1])),
        ),
        ("grad.relu", vec![relu_in], Box::new(|t: &mut Tape<f64>, v: &[Var]| Ok(t.relu(v[0])))),
        (
            "grad.sigmoid",
            vec![random(&mut r, &[1, 1, 3, 3])],
            Box::new(|t: &mut Tape<f64>, v: &[Var]| Ok(t.sigmoid(v[0]))),
        ),
        (
            "grad.softmax",
            vec![random(&mut r, &[1, 3, 2, 2])],
            Box::new(|t: &mut Tape<f64>, v: &[Var]| t.softmax_channels(v[0])),
        ),
        (
            "grad.cross_entropy",
            vec![random(&mut r, &[1, 3, 2, 3])],
            Box::new(move |t: &mut Tape<f64>, v: &[Var]| t.cross_entropy_ignore(v[0], &labels, 255)),
        ),
        (
            "grad.fuse_pair",
            vec![
                random(&mut r, &[1, 2, 2, 2]),
                random(&mut r, &[1, 1, 2, 2]).map(|v| 0.5 + 0.4 * v),
                random(&mut r, &[1, 2, 4, 4]),
            ],
            Box::new(|t: &mut Tape<f64>, v: &[Var]| fuse_pair_on(t, v[0], v[1], v[2])),
        ),
    ]
}

fn input(r: &mut ChaCha8Rng, scale: f64, base: usize, classes: usize) -> ScaleInput {
    let s = (base as f64 * scale).round() as usize;
    ScaleInput {
        scale,
        logits: LogitMap(Tensor::from_fn(&[classes, s, s], |_| r.gen_range(-2.0..2.0)).expect("shape")),
        attention: Some(AttentionMap(
            Tensor::from_fn(&[1, s, s], |_| r.gen_range(0.05..0.95)).expect("shape"),
        )),
    }
}

fn fusion_limits(corrupt: bool) -> Result<(bool, String)> {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let lo = input(&mut r, 0.5, 8, 2);
    let hi = input(&mut r, 1.0, 8, 2);
    let with_alpha = |a: f32| ScaleInput {
        attention: Some(AttentionMap(Tensor::full(&[1, 4, 4], a).expect("shape"))),
        ..lo.clone()
    };
    let zero = fuse_pair(&with_alpha(0.0), &hi)?;
    let one = fuse_pair(&with_alpha(1.0), &hi)?;
    let half = fuse_pair(&with_alpha(0.5), &hi)?;
    let up = crate::fusion::resize_map(&lo.logits.0, 8, 8)?;
    let avg = fuse_average(&[lo.clone(), hi.clone()])?;
    let mut e = [
        zero.0.max_abs_diff(&hi.logits.0),
        one.0.max_abs_diff(&up),
        half.0.max_abs_diff(&avg.0),
    ];
    if corrupt {
        e[0] += 1.0;
    }
    let worst = e.iter().cloned().fold(0.0, f32::max);
    Ok((worst <= 1e-6, format!("max deviation {worst:.2e}")))
}

fn partition(corrupt: bool) -> Result<(bool, String)> {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let all = [0.25, 0.5, 1.0, 2.0];
    let mut worst = 0.0f32;
    for n in 1..=4 {
        let inputs: Vec<_> = all[4 - n..].iter().map(|&s| input(&mut r, s, 8, 2)).collect();
        let res = fuse_hierarchical(&inputs)?;
        for p in 0..res.effective_weights[0].len() {
            let total: f32 = res.effective_weights.iter().map(|w| w.data()[p]).sum();
            worst = worst.max((total - 1.0).abs());
        }
    }
    if corrupt {
        worst += 0.1;
    }
    Ok((worst <= 1e-5, format!("max |Σw − 1| {worst:.2e}")))
}

fn linearity(corrupt: bool) -> Result<(bool, String)> {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let xs: Vec<_> = [0.5, 1.0, 2.0].iter().map(|&s| input(&mut r, s, 8, 2)).collect();
    let ys: Vec<_> = xs
        .iter()
        .map(|x| ScaleInput { attention: x.attention.clone(), ..input(&mut r, x.scale, 8, 2) })
        .collect();
    let (a, b) = (0.7f32, -1.3f32);
    let combo: Vec<_> = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| {
            let data = x.logits.0.data().iter().zip(y.logits.0.data()).map(|(p, q)| a * p + b * q).collect();
            ScaleInput { logits: LogitMap(Tensor::new(x.logits.0.shape(), data).expect("shape")), ..x.clone() }
        })
        .collect();
    let fx = fuse_hierarchical(&xs)?.fused;
    let fy = fuse_hierarchical(&ys)?.fused;
    let fc = fuse_hierarchical(&combo)?.fused;
    let mut worst = fc
        .0
        .data()
        .iter()
        .zip(fx.0.data().iter().zip(fy.0.data()))
        .map(|(c, (x, y))| (c - (a * x + b * y)).abs())
        .fold(0.0, f32::max);
    if corrupt {
        worst += 1.0;
    }
    Ok((worst <= 1e-5, format!("max deviation {worst:.2e}")))
}

fn explicit_uniform(corrupt: bool) -> Result<(bool, String)> {
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let inputs: Vec<_> = [0.5, 1.0, 2.0].iter().map(|&s| input(&mut r, s, 8, 3)).collect();
    let att: Vec<_> = inputs
        .iter()
        .map(|s| AttentionMap(Tensor::full(&[1, s.logits.height(), s.logits.width()], 0.4).expect("shape")))
        .collect();
    let exp = fuse_explicit(&inputs, &att)?.fused;
    let avg = fuse_average(&inputs)?;
    let mut worst = exp.0.max_abs_diff(&avg.0);
    if corrupt {
        worst += 1.0;
    }
    Ok((worst <= 1e-6, format!("max deviation {worst:.2e}")))
}

fn cost_arithmetic(corrupt: bool) -> Result<(bool, String)> {
    let three = relative_training_cost(&[0.5, 1.0, 2.0])? + if corrupt { 0.25 } else { 0.0 };
    let two = relative_training_cost(&[0.5, 1.0])?;
    Ok((three == 5.25 && two == 1.25, format!("{three} and {two}")))
}

fn mac_ratio(corrupt: bool) -> Result<(bool, String)> {
    let net = Network::<f32>::build(TrunkConfig::default(), 4, true, 0)?;
    let single = forward_macs(&net, 64, 64, &[1.0])? as f64;
    let pair = forward_macs(&net, 64, 64, &[0.5, 1.0])? as f64;
    let ratio = pair / single * if corrupt { 1.2 } else { 1.0 };
    Ok(((ratio - 1.25).abs() <= 0.05 * 1.25, format!("two-scale / single-scale MACs = {ratio:.4}")))
}

fn storage(corrupt: bool) -> Result<(bool, String)> {
    let est = StorageEstimate { images: 20_000, width: 2048, height: 1024, classes: 19, bytes_per_value: 4 };
    let soft = storage_cost(&est, LabelMode::Soft)? + corrupt as u64;
    let hard = storage_cost(&est, LabelMode::Hard)?;
    let ok = soft == 3_187_671_040_000 && soft.is_multiple_of(hard) && soft / hard == 76;
    Ok((ok, format!("soft {soft} B, hard {hard} B")))
}

/// Runs every check. `corrupt` names one check whose computation is
/// deliberately perturbed, to prove the suite can fail.
pub fn run(corrupt: Option<&str>) -> Vec<Check> {
    let mut out = Vec::new();
    for (name, inputs, f) in grad_cases() {
        let skew = if corrupt == Some(name) { 1.01 } else { 1.0 };
        let (passed, detail) = match gradcheck(&inputs, f.as_ref(), skew) {
            Ok(e) => (e <= 1e-6, format!("relative error {e:.2e}")),
            Err(e) => (false, e.to_string()),
        };
        out.push(Check { name, passed, detail });
    }
    type Fn_ = fn(bool) -> Result<(bool, String)>;
    let rest: [(&'static str, Fn_); 7] = [
        ("fusion.limits", fusion_limits),
        ("fusion.partition_of_unity", partition),
        ("fusion.linearity", linearity),
        ("fusion.explicit_uniform", explicit_uniform),
        ("cost.arithmetic", cost_arithmetic),
        ("cost.mac_ratio", mac_ratio),
        ("storage.arithmetic", storage),
    ];
    for (name, f) in rest {
        let (passed, detail) = match f(corrupt == Some(name)) {
            Ok(r) => r,
            Err(e) => (false, e.to_string()),
        };
        out.push(Check { name, passed, detail });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_cover_every_check() {
        let got: Vec<&str> = run(None).iter().map(|c| c.name).collect();
        assert_eq!(got, CHECK_NAMES);
    }

    #[test]
    fn corruption_fails_only_the_named_check() {
        for name in CHECK_NAMES {
            let failed: Vec<&str> = run(Some(name)).iter().filter(|c| !c.passed).map(|c| c.name).collect();
            assert_eq!(failed, [name]);
        }
    }
}
