//! SGD with optional momentum, plus the single training step that ties
//! forward, loss, backward, and the parameter update together.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::loss::{loss_and_grad, LossSpec};
use crate::nn::net::{backward, forward_cached, Cache, Gradients};
use crate::nn::spec::LayerSpec;
use crate::nn::state::{trainable_tensors_mut, LayerParams, Mode, ModelState};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 0.01,
            momentum: 0.0,
        }
    }
}

/// SGD state. Velocity buffers are allocated lazily on the first step.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub cfg: OptimizerConfig,
    velocity: Option<Gradients>,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Optimizer {
            cfg,
            velocity: None,
        }
    }

    fn apply(&mut self, state: &mut ModelState, grads: &Gradients) {
        let lr = self.cfg.learning_rate;
        let mu = self.cfg.momentum;
        if mu == 0.0 {
            for (lp, lg) in state.params.iter_mut().zip(grads) {
                for (p, g) in trainable_tensors_mut(lp).into_iter().zip(lg) {
                    for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *pv -= lr * gv;
                    }
                }
            }
            return;
        }
        let velocity = self.velocity.get_or_insert_with(|| {
            grads
                .iter()
                .map(|lg| lg.iter().map(|g| Tensor::zeros(g.shape())).collect())
                .collect()
        });
        for ((lp, lg), lv) in state.params.iter_mut().zip(grads).zip(velocity) {
            for ((p, g), v) in trainable_tensors_mut(lp).into_iter().zip(lg).zip(lv) {
                for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                    *vv = mu * *vv + gv;
                    *pv -= lr * *vv;
                }
            }
        }
    }
}

/// One gradient step. Returns the pre-step loss value.
///
/// Batchnorm moving statistics are updated here (and only here) from the
/// batch statistics of the forward pass. A zero learning rate makes the
/// whole step a no-op on the state, moving statistics included.
pub fn train_step(
    state: &mut ModelState,
    opt: &mut Optimizer,
    batch: &Tensor,
    labels: &[usize],
    soft_targets: Option<&Tensor>,
    loss: &LossSpec,
) -> Result<f64> {
    Ok(train_step_detailed(state, opt, batch, labels, soft_targets, loss)?.0)
}

/// Like `train_step` but returns the (total, hard, distill) pre-step
/// decomposition.
pub fn train_step_detailed(
    state: &mut ModelState,
    opt: &mut Optimizer,
    batch: &Tensor,
    labels: &[usize],
    soft_targets: Option<&Tensor>,
    loss: &LossSpec,
) -> Result<(f64, f64, f64)> {
    let pass = forward_cached(state, batch, Mode::Train)?;
    let eval = loss_and_grad(&pass.logits, labels, soft_targets, loss)?;
    let grads = backward(state, &pass, &eval.dlogits)?;
    if opt.cfg.learning_rate != 0.0 {
        update_moving_stats(state, &pass.caches);
        opt.apply(state, &grads);
    }
    Ok((eval.total, eval.student, eval.distill))
}

fn update_moving_stats(state: &mut ModelState, caches: &[Cache]) {
    for ((layer, params), cache) in state
        .spec
        .layers
        .iter()
        .zip(state.params.iter_mut())
        .zip(caches)
    {
        if let (
            LayerSpec::Batchnorm { momentum, .. },
            LayerParams::Bn {
                moving_mean,
                moving_var,
                ..
            },
            Cache::Bn {
                batch_stats: Some((mean, var)),
                ..
            },
        ) = (layer, params, cache)
        {
            for (mm, m) in moving_mean.data_mut().iter_mut().zip(mean) {
                *mm = momentum * *mm + (1.0 - momentum) * m;
            }
            for (mv, v) in moving_var.data_mut().iter_mut().zip(var) {
                *mv = momentum * *mv + (1.0 - momentum) * v;
            }
        }
    }
}
