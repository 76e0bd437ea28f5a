use super::{Scalar, Tensor};
use crate::error::{bail, Result};

/// A trainable tensor with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T: Scalar = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub requires_grad: bool,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Self {
            name: name.into(),
            value,
            grad: None,
            requires_grad: true,
        }
    }

    /// Adds `g` to the stored gradient.
    pub fn accumulate_grad(&mut self, g: &Tensor<T>) -> Result<()> {
        if g.shape() != self.value.shape() {
            bail!(
                Dimension,
                "gradient shape {:?} does not match parameter {} {:?}",
                g.shape(),
                self.name,
                self.value.shape()
            );
        }
        match self.grad.as_mut() {
            Some(acc) => {
                for (a, &v) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a = *a + v;
                }
            }
            None => self.grad = Some(g.clone()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

/// SGD with heavy-ball momentum and L2 weight decay folded into the velocity.
#[derive(Debug, Clone, Default)]
pub struct Sgd<T: Scalar = f32> {
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new() -> Self {
        Self {
            velocity: Vec::new(),
        }
    }

    /// `v ← momentum·v + grad + weight_decay·param; param ← param − lr·v`.
    ///
    /// Velocities are matched to parameters by position, so the same ordered
    /// list must be passed on every call.
    pub fn step(
        &mut self,
        params: &mut [&mut Parameter<T>],
        lr: T,
        momentum: T,
        weight_decay: T,
    ) -> Result<()> {
        if let Some(p) = params.iter().find(|p| p.requires_grad && p.grad.is_none()) {
            bail!(Usage, "parameter {} has no gradient; run backward first", p.name);
        }
        if self.velocity.is_empty() {
            self.velocity = params
                .iter()
                .map(|p| vec![T::zero(); p.value.len()])
                .collect();
        } else if self.velocity.len() != params.len()
            || self
                .velocity
                .iter()
                .zip(params.iter())
                .any(|(v, p)| v.len() != p.value.len())
        {
            bail!(Usage, "optimizer state does not match the parameter list");
        }
        for (p, v) in params.iter_mut().zip(&mut self.velocity) {
            if !p.requires_grad {
                continue;
            }
            let grad = p.grad.take().expect("checked above");
            for ((w, vel), &g) in p.value.data_mut().iter_mut().zip(v.iter_mut()).zip(grad.data()) {
                *vel = momentum * *vel + g + weight_decay * *w;
                *w = *w - lr * *vel;
            }
            p.grad = Some(grad);
        }
        Ok(())
    }

    pub fn velocity(&self) -> &[Vec<T>] {
        &self.velocity
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f64, g: Option<f64>) -> Parameter<f64> {
        let mut p = Parameter::new("p", Tensor::scalar(v));
        p.grad = g.map(Tensor::scalar);
        p
    }

    #[test]
    fn plain_step_moves_against_gradient() {
        let mut p = param(1.0, Some(0.5));
        Sgd::new().step(&mut [&mut p], 0.1, 0.0, 0.0).unwrap();
        assert!((p.value.data()[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut p = param(1.0, Some(0.0));
        Sgd::new().step(&mut [&mut p], 0.1, 0.9, 0.0).unwrap();
        assert_eq!(p.value.data()[0], 1.0);
    }

    #[test]
    fn two_momentum_steps_match_recurrence() {
        // v1 = g, w1 = w0 - lr·g; v2 = 0.9·g + g, w2 = w1 - lr·1.9·g
        let (w0, g, lr) = (2.0, 0.5, 0.1);
        let mut p = param(w0, Some(g));
        let mut opt = Sgd::new();
        opt.step(&mut [&mut p], lr, 0.9, 0.0).unwrap();
        opt.step(&mut [&mut p], lr, 0.9, 0.0).unwrap();
        let expect = w0 - lr * g - lr * 1.9 * g;
        assert!((p.value.data()[0] - expect).abs() < 1e-15);
        assert!((expect - 1.855).abs() < 1e-12);
    }

    #[test]
    fn missing_gradient_is_a_usage_error() {
        let mut p = param(1.0, None);
        let err = Sgd::new().step(&mut [&mut p], 0.1, 0.9, 0.0).unwrap_err();
        assert!(matches!(err, crate::Error::Usage(_)));
    }
}
