//! Adam over a name-sorted parameter list, with optional global-norm clipping.

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var};
use candle_nn::{AdamW, Optimizer as _, ParamsAdamW, VarMap};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Multiplier on `lr` for the softmax logits of the modulation and fusion
    /// weights (variables named `raw`).
    #[serde(default = "unit")]
    pub logit_lr_scale: f64,
}

fn unit() -> f64 {
    1.0
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            logit_lr_scale: 1.0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let betas_ok = (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2);
        let scale_ok = self.logit_lr_scale > 0.0 && self.logit_lr_scale.is_finite();
        if !(self.lr > 0.0 && self.lr.is_finite()) || !betas_ok || self.eps <= 0.0 || !scale_ok {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// Variables of `varmap` whose names start with `prefix`, sorted by name so
/// that reductions over them are reproducible.
pub fn sorted_vars(varmap: &VarMap, prefix: &str) -> Vec<(String, Var)> {
    let data = varmap.data().lock().expect("varmap lock");
    let mut vars: Vec<(String, Var)> = data
        .iter()
        .filter(|(n, _)| n.starts_with(prefix))
        .map(|(n, v)| (n.clone(), v.clone()))
        .collect();
    vars.sort_by(|a, b| a.0.cmp(&b.0));
    vars
}

pub struct Optimizer {
    vars: Vec<Var>,
    adam: AdamW,
    logits: AdamW,
    clip: Option<f64>,
}

fn is_logit(name: &str) -> bool {
    name == "raw" || name.ends_with(".raw")
}

impl Optimizer {
    pub fn new(varmap: &VarMap, prefix: &str, cfg: AdamConfig, clip: Option<f64>) -> Result<Self> {
        cfg.validate()?;
        let named = sorted_vars(varmap, prefix);
        let params = |lr| ParamsAdamW {
            lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: 0.0,
        };
        let pick = |logit: bool| -> Vec<Var> {
            named
                .iter()
                .filter(|(n, _)| is_logit(n) == logit)
                .map(|(_, v)| v.clone())
                .collect()
        };
        Ok(Self {
            vars: named.iter().map(|(_, v)| v.clone()).collect(),
            adam: AdamW::new(pick(false), params(cfg.lr))?,
            logits: AdamW::new(pick(true), params(cfg.lr * cfg.logit_lr_scale))?,
            clip,
        })
    }

    /// Global L2 norm of the gradients of the optimised variables.
    pub fn grad_norm(&self, grads: &GradStore) -> Result<f64> {
        let mut sq = 0.0;
        for v in &self.vars {
            if let Some(g) = grads.get(v.as_tensor()) {
                sq += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
            }
        }
        Ok(sq.sqrt())
    }

    /// Backpropagates `loss`, clips, and applies one Adam update. Returns the
    /// pre-clipping gradient norm.
    pub fn backward_step(&mut self, loss: &Tensor) -> Result<f64> {
        let mut grads = loss.backward()?;
        let norm = self.grad_norm(&grads)?;
        if !norm.is_finite() {
            return Err(Error::NonFinite("gradients".into()));
        }
        if let Some(max) = self.clip {
            if norm > max {
                let scale = max / norm;
                for v in &self.vars {
                    if let Some(g) = grads.remove(v.as_tensor()) {
                        grads.insert(v.as_tensor(), (g * scale)?);
                    }
                }
            }
        }
        self.adam.step(&grads)?;
        self.logits.step(&grads)?;
        Ok(norm)
    }
}
