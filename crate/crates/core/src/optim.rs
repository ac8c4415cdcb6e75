//! Named parameter collections and the SGD optimizer.

use crate::tensor::{Result, Tensor, TensorError};

/// A fixed, ordered collection of named tensors.
///
/// `visit` and `visit_mut` must enumerate the same tensors in the same order;
/// optimizer state and checkpoints rely on that order.
pub trait Parameters {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Tensor));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));

    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((name.to_string(), t)));
        out
    }

    fn scalar_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }

    fn set_requires_grad(&mut self, on: bool) {
        self.visit_mut(&mut |_, t| t.set_requires_grad(on));
    }

    fn zero_grads(&mut self) {
        self.visit_mut(&mut |_, t| t.clear_grad());
    }

    fn has_grad_buffers(&self) -> bool {
        let mut any = false;
        self.visit(&mut |_, t| any |= t.grad().is_some());
        any
    }

    fn checksum(&self) -> u64 {
        let mut h: u64 = 0;
        self.visit(&mut |_, t| h = h.rotate_left(7) ^ t.checksum());
        h
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, t| ok &= t.is_finite());
        ok
    }
}

/// Stochastic gradient descent with optional heavy-ball momentum:
/// `v ← μ·v + g`, `θ ← θ − lr·v`. The first step initializes `v = g`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        validate(lr, momentum)?;
        Ok(Self {
            lr,
            momentum,
            velocity: Vec::new(),
        })
    }

    /// Momentum buffers in parameter-visit order; empty before the first step.
    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    pub fn set_velocity(&mut self, v: Vec<Vec<f64>>) {
        self.velocity = v;
    }

    /// Applies one update to every tensor that carries a gradient, then
    /// clears all gradients. Tensors without gradients are left in place.
    pub fn step(&mut self, params: &mut dyn Parameters) -> Result<()> {
        validate(self.lr, self.momentum)?;
        let mut sizes = Vec::new();
        params.visit(&mut |_, t| sizes.push(t.numel()));
        if self.velocity.is_empty() {
            self.velocity = sizes.iter().map(|&n| Vec::with_capacity(n)).collect();
        } else if self.velocity.len() != sizes.len() {
            return Err(TensorError::Shape(
                "optimizer state does not match parameter set".into(),
            ));
        }
        let (lr, mu) = (self.lr, self.momentum);
        let mut idx = 0;
        let velocity = &mut self.velocity;
        params.visit_mut(&mut |_, t| {
            let i = idx;
            idx += 1;
            let Some(g) = t.grad().map(<[f64]>::to_vec) else {
                return;
            };
            let v = &mut velocity[i];
            if mu == 0.0 {
                v.clear();
                v.extend_from_slice(&g);
            } else if v.is_empty() {
                v.extend_from_slice(&g);
            } else {
                v.iter_mut().zip(&g).for_each(|(v, g)| *v = mu * *v + g);
            }
            t.data_mut()
                .iter_mut()
                .zip(v.iter())
                .for_each(|(p, v)| *p -= lr * v);
            t.clear_grad();
        });
        Ok(())
    }
}

fn validate(lr: f64, momentum: f64) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(TensorError::Param(format!(
            "learning rate must be positive, got {lr}"
        )));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(TensorError::Param(format!(
            "momentum must lie in [0, 1), got {momentum}"
        )));
    }
    Ok(())
}

/// A single free tensor treated as a one-element parameter set.
impl Parameters for Tensor {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Tensor)) {
        f("tensor", self);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("tensor", self);
    }
}

impl Parameters for Vec<Tensor> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Tensor)) {
        for (i, t) in self.iter().enumerate() {
            f(&i.to_string(), t);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, t) in self.iter_mut().enumerate() {
            f(&i.to_string(), t);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f64, g: f64) -> Tensor {
        let mut t = Tensor::scalar(v).with_grad();
        t.accumulate_grad(&[g]).unwrap();
        t
    }

    #[test]
    fn plain_step() {
        let mut t = param(1.0, 0.5);
        Sgd::new(0.1, 0.0).unwrap().step(&mut t).unwrap();
        assert!((t.item() - 0.95).abs() < 1e-15);
        assert!(t.grad().is_none());
    }

    #[test]
    fn zero_gradient_leaves_value() {
        let mut t = param(0.7, 0.0);
        Sgd::new(0.1, 0.9).unwrap().step(&mut t).unwrap();
        assert_eq!(t.item(), 0.7);
    }

    #[test]
    fn momentum_recurrence_two_steps() {
        let mut t = param(0.0, 1.0);
        let mut opt = Sgd::new(0.1, 0.9).unwrap();
        opt.step(&mut t).unwrap();
        t.accumulate_grad(&[1.0]).unwrap();
        opt.step(&mut t).unwrap();
        assert!((t.item() + 0.29).abs() < 1e-12, "{}", t.item());
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        assert!(matches!(Sgd::new(0.0, 0.0), Err(TensorError::Param(_))));
        assert!(matches!(Sgd::new(-1.0, 0.0), Err(TensorError::Param(_))));
        assert!(matches!(Sgd::new(0.1, 1.0), Err(TensorError::Param(_))));
    }
}
