//! AdaDelta and plain SGD over a [`ParamStore`], with the decay applied
//! when validation accuracy drops.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{GradBuffer, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adadelta,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// AdaDelta decay of the running averages.
    pub rho: f64,
    pub adadelta_eps: f64,
    /// Factor applied to epsilon on a validation drop.
    pub adadelta_eps_decay: f64,
    /// Factor applied to the SGD learning rate on a validation drop.
    pub sgd_decay_factor: f64,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adadelta,
            lr: 1.0,
            rho: 0.95,
            adadelta_eps: 1e-8,
            adadelta_eps_decay: 1e-2,
            sgd_decay_factor: 1e-1,
        }
    }
}

impl OptimizerSpec {
    pub fn sgd(lr: f64) -> Self {
        Self { kind: OptimizerKind::Sgd, lr, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| v > 0.0 && v <= 1.0;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(self.adadelta_eps > 0.0) || !(0.0..1.0).contains(&self.rho) {
            return Err(Error::Config("adadelta needs eps > 0 and rho in [0, 1)".into()));
        }
        if !in_unit(self.adadelta_eps_decay) || !in_unit(self.sgd_decay_factor) {
            return Err(Error::Config("decay factors must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Accumulators {
    sq_grad: Tensor<f64>,
    sq_update: Tensor<f64>,
}

/// Optimizer state: current learning rate and epsilon plus per-parameter
/// AdaDelta accumulators.
#[derive(Clone, Debug)]
pub struct Optimizer {
    spec: OptimizerSpec,
    lr: f64,
    eps: f64,
    acc: Vec<Option<Accumulators>>,
}

impl Optimizer {
    pub fn new(spec: OptimizerSpec, params: &ParamStore<f64>) -> Result<Self> {
        spec.validate()?;
        Ok(Self { lr: spec.lr, eps: spec.adadelta_eps, acc: vec![None; params.len()], spec })
    }

    pub fn spec(&self) -> &OptimizerSpec {
        &self.spec
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    /// Applies `grads` to every parameter that has one. A non-finite
    /// gradient rejects the whole step and leaves parameters untouched.
    pub fn step(&mut self, params: &mut ParamStore<f64>, grads: &GradBuffer<f64>) -> Result<()> {
        if !grads.all_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        for (id, g) in grads.iter() {
            let p = params.get_mut(id);
            if p.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "optimizer",
                    detail: format!("{:?} parameter, {:?} gradient", p.shape(), g.shape()),
                });
            }
            match self.spec.kind {
                OptimizerKind::Sgd => {
                    for (v, d) in p.data_mut().iter_mut().zip(g.data()) {
                        *v -= self.lr * d;
                    }
                }
                OptimizerKind::Adadelta => {
                    let acc = self.acc[id.index()].get_or_insert_with(|| Accumulators {
                        sq_grad: Tensor::zeros(g.shape()),
                        sq_update: Tensor::zeros(g.shape()),
                    });
                    let rho = self.spec.rho;
                    let eps = self.eps;
                    let it = p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(acc.sq_grad.data_mut().iter_mut().zip(acc.sq_update.data_mut()));
                    for ((v, &d), (eg, ex)) in it {
                        *eg = rho * *eg + (1.0 - rho) * d * d;
                        let dx = -((*ex + eps).sqrt() / (*eg + eps).sqrt()) * d;
                        *ex = rho * *ex + (1.0 - rho) * dx * dx;
                        *v += self.lr * dx;
                    }
                }
            }
        }
        Ok(())
    }

    /// Reaction to a drop in validation accuracy: SGD decays the learning
    /// rate, AdaDelta decays epsilon.
    pub fn decay(&mut self) {
        match self.spec.kind {
            OptimizerKind::Sgd => self.lr *= self.spec.sgd_decay_factor,
            OptimizerKind::Adadelta => self.eps *= self.spec.adadelta_eps_decay,
        }
    }
}
