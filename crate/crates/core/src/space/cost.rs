//! Analytic MAC and parameter counts for a subnet.
//!
//! Convolutions cost `Hout * Wout * K^2 * (Cin / groups) * Cout` MACs, fully
//! connected layers `in * out`. Squeeze-excitation counts both of its FC
//! layers. Normalization, activations, pooling and residual adds are not
//! counted as MACs. Parameters include weights, biases and BN scale/shift.

use super::{SearchSpace, SubnetConfig};
use crate::error::Result;

/// Spatial size after a "same"-padded convolution.
pub fn conv_out(size: usize, k: usize, stride: usize) -> usize {
    (size + 2 * (k / 2) - k) / stride + 1
}

/// Channels of the squeeze-excitation bottleneck for `channels` inputs.
pub fn se_reduced(channels: usize) -> usize {
    (channels / 4).max(1)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerCost {
    pub name: String,
    pub macs: u64,
    pub params: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Cost {
    pub macs: u64,
    pub params: u64,
    pub layers: Vec<LayerCost>,
}

impl Cost {
    fn push(&mut self, name: String, macs: usize, params: usize) {
        self.macs += macs as u64;
        self.params += params as u64;
        self.layers.push(LayerCost {
            name,
            macs: macs as u64,
            params: params as u64,
        });
    }
}

impl SearchSpace {
    /// Full cost of `config` with a `num_classes`-way classifier. With
    /// `num_classes == 0` the classifier is left out.
    pub fn cost(&self, config: &SubnetConfig, num_classes: usize) -> Result<Cost> {
        self.check(config)?;
        let mut cost = Cost::default();
        let mut h = config.resolution;
        let mut cin = self.in_channels;

        let k = self.stem.kernel;
        let ho = conv_out(h, k, self.stem.stride);
        let c = config.stem_width;
        cost.push("stem".into(), ho * ho * k * k * cin * c, k * k * cin * c + 2 * c);
        h = ho;
        cin = c;

        for (si, (spec, sc)) in self.stages.iter().zip(&config.stages).enumerate() {
            for li in 0..sc.depth {
                let stride = if li == 0 { spec.stride } else { 1 };
                let mid = cin * sc.expansion;
                let name = format!("stage{}.{}", si + 1, li);
                let mut macs = 0;
                let mut params = 0;
                if sc.expansion != 1 {
                    macs += h * h * cin * mid;
                    params += cin * mid + 2 * mid;
                }
                let ho = conv_out(h, sc.kernel, stride);
                macs += ho * ho * sc.kernel * sc.kernel * mid;
                params += sc.kernel * sc.kernel * mid + 2 * mid;
                if spec.use_se {
                    let r = se_reduced(mid);
                    macs += 2 * mid * r;
                    params += 2 * mid * r + r + mid;
                }
                macs += ho * ho * mid * sc.width;
                params += mid * sc.width + 2 * sc.width;
                cost.push(name, macs, params);
                h = ho;
                cin = sc.width;
            }
        }

        let hw = config.head_width;
        cost.push("head".into(), h * h * cin * hw, cin * hw + 2 * hw);
        if num_classes > 0 {
            cost.push("classifier".into(), hw * num_classes, hw * num_classes + num_classes);
        }
        Ok(cost)
    }

    /// MACs of the backbone and head, excluding the classifier, so the value
    /// does not depend on the target task.
    pub fn flops(&self, config: &SubnetConfig) -> Result<u64> {
        Ok(self.cost(config, 0)?.macs)
    }

    pub fn param_count(&self, config: &SubnetConfig, num_classes: usize) -> Result<u64> {
        Ok(self.cost(config, num_classes)?.params)
    }
}
