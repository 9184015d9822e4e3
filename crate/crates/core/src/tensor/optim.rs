use std::collections::HashSet;

use super::{Gradients, ParamSet};
use crate::error::{Error, Result};

/// SGD with heavy-ball momentum and L2 weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub base_lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    /// Parameter names that never receive weight decay.
    pub decay_exempt: HashSet<String>,
    buffers: Vec<Option<Vec<f32>>>,
}

/// Bias terms and normalization offsets are exempt from decay.
pub fn is_decay_exempt(name: &str) -> bool {
    name.ends_with(".bias") || name.ends_with(".beta")
}

impl OptimizerState {
    pub fn new(params: &ParamSet, base_lr: f32, momentum: f32, weight_decay: f32) -> Self {
        let decay_exempt = params
            .iter()
            .filter(|(_, name, _)| is_decay_exempt(name))
            .map(|(_, name, _)| name.to_string())
            .collect();
        Self {
            base_lr,
            momentum,
            weight_decay,
            decay_exempt,
            buffers: vec![None; params.len()],
        }
    }

    pub fn momentum_buffer(&self, index: usize) -> Option<&[f32]> {
        self.buffers.get(index).and_then(|b| b.as_deref())
    }
}

/// One update: `v = momentum*v + g + wd*p` (no decay for exempt names), then
/// `p -= lr*v`. Parameters without a gradient are left untouched.
pub fn sgd_step(
    state: &mut OptimizerState,
    params: &mut ParamSet,
    grads: &Gradients,
    lr: f32,
) -> Result<()> {
    if !(lr >= 0.0) {
        return Err(Error::Contract(format!("learning rate must be >= 0, got {lr}")));
    }
    if state.buffers.len() != params.len() {
        state.buffers.resize(params.len(), None);
    }
    for id in params.ids() {
        let Some(g) = grads.param(id) else { continue };
        if let Some(bad) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of {} at index {bad} is {}",
                params.name(id),
                g[bad]
            )));
        }
        let decay = if state.decay_exempt.contains(params.name(id)) {
            0.0
        } else {
            state.weight_decay
        };
        let p = params.get_mut(id).data_mut();
        if p.len() != g.len() {
            return Err(Error::Dimension(format!(
                "gradient length {} for parameter of {} values",
                g.len(),
                p.len()
            )));
        }
        let buf = state.buffers[id.index()].get_or_insert_with(|| vec![0.0; p.len()]);
        for ((pi, gi), vi) in p.iter_mut().zip(g).zip(buf.iter_mut()) {
            let d = if decay != 0.0 { gi + decay * *pi } else { *gi };
            *vi = state.momentum * *vi + d;
            *pi -= lr * *vi;
        }
    }
    Ok(())
}
