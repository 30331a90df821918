use serde::{Deserialize, Serialize};

use crate::error::{GcldrError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

/// Moment buffers and step counter for one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

/// First-order update rule over a fixed list of parameter tensors.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: OptimizerState,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, shapes: &[&[usize]]) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(GcldrError::config(format!("learning rate must be > 0, got {lr}")));
        }
        let zeros = |s: &&[usize]| Tensor::zeros(s);
        let (first, second) = match kind {
            OptimizerKind::Adam => (shapes.iter().map(zeros).collect(), shapes.iter().map(zeros).collect()),
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
        };
        Ok(Optimizer { kind, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, state: OptimizerState { step: 0, first, second } })
    }

    pub fn state(&self) -> &OptimizerState {
        &self.state
    }

    /// Applies one update in place. Rejects non-finite gradients before
    /// touching any parameter.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(GcldrError::dim("one gradient per parameter"));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(GcldrError::dim(format!("gradient {i} shape {:?} vs {:?}", g.shape(), p.shape())));
            }
            if !g.all_finite() {
                return Err(GcldrError::Divergence { context: format!("non-finite gradient for parameter {i}") });
            }
        }
        self.state.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    p.axpy(-self.lr, g);
                }
            }
            OptimizerKind::Adam => {
                if self.state.first.len() != params.len() {
                    return Err(GcldrError::dim("optimizer built for a different parameter list"));
                }
                let t = self.state.step as i32;
                let c1 = 1.0 - self.beta1.powi(t);
                let c2 = 1.0 - self.beta2.powi(t);
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let m = self.state.first[i].data_mut();
                    let v = self.state.second[i].data_mut();
                    for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                        *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                        *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                        let mhat = *mv / c1;
                        let vhat = *vv / c2;
                        *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
                    }
                }
            }
        }
        Ok(())
    }
}
