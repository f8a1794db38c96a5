use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First-order optimizer over an ordered list of parameter tensors.
///
/// Moment buffers are allocated on the first step and must keep matching the
/// parameter shapes afterwards.
#[derive(Clone, Debug)]
pub struct Optimizer<F: Scalar = f32> {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
}

impl<F: Scalar> Optimizer<F> {
    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", lr)));
        }
        if let OptimizerKind::Adam { beta1, beta2, .. } = kind {
            if !(0.0 < beta1 && beta1 < 1.0 && 0.0 < beta2 && beta2 < 1.0) {
                return Err(Error::Config(format!("adam betas ({}, {}) outside (0,1)", beta1, beta2)));
            }
        }
        Ok(Optimizer { kind, lr, step: 0, m: Vec::new(), v: Vec::new() })
    }

    pub fn sgd(lr: f64) -> Result<Self> {
        Self::new(OptimizerKind::Sgd, lr)
    }

    pub fn adam(lr: f64) -> Result<Self> {
        Self::new(OptimizerKind::adam(), lr)
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. `grads[i]` belongs to `params[i]`; a missing gradient is a
    /// state error and leaves every parameter untouched.
    pub fn step(&mut self, params: &mut [&mut Tensor<F>], grads: &[Option<&Tensor<F>>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::State(format!("{} params but {} grads", params.len(), grads.len())));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            match g {
                None => return Err(Error::State(format!("parameter {} has no gradient", i))),
                Some(g) if g.shape() != p.shape() => {
                    return Err(Error::State(format!("gradient {} shape {:?} vs {:?}", i, g.shape(), p.shape())))
                }
                _ => {}
            }
        }
        if let OptimizerKind::Adam { .. } = self.kind {
            if self.m.is_empty() {
                self.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
                self.v = self.m.clone();
            } else if self.m.len() != params.len() || self.m.iter().zip(params.iter()).any(|(m, p)| m.shape() != p.shape()) {
                return Err(Error::State("parameter list changed between optimizer steps".into()));
            }
        }
        self.step += 1;
        let lr = F::c(self.lr);
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    let g = g.unwrap();
                    for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= lr * *d;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.step as i32;
                let bc1 = F::c(1.0 - beta1.powi(t));
                let bc2 = F::c(1.0 - beta2.powi(t));
                let (b1, b2, eps) = (F::c(beta1), F::c(beta2), F::c(eps));
                let one = F::one();
                for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
                    let g = g.unwrap();
                    let (md, vd) = (m.data_mut(), v.data_mut());
                    for (k, (w, d)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        md[k] = b1 * md[k] + (one - b1) * *d;
                        vd[k] = b2 * vd[k] + (one - b2) * *d * *d;
                        let mh = md[k] / bc1;
                        let vh = vd[k] / bc2;
                        *w -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
