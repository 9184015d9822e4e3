use crate::error::{Error, Result};
use crate::losses::LossVariant;

/// Hyper-parameters of supernet training. Field names double as keys of the
/// flat `key = value` config format.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub max_iters: usize,
    pub base_lr: f32,
    pub warmup_epochs: usize,
    pub momentum: f32,
    pub weight_decay: f32,
    pub label_smoothing: f32,
    pub dropout: f32,
    pub drop_connect: f32,
    pub tau: f32,
    pub batch_l: usize,
    /// Unlabeled batch size; `batch_u / batch_l` is the unlabeled ratio.
    pub batch_u: usize,
    pub loss_variant: LossVariant,
    pub seed: u64,
    /// Iterations between anchor evaluations; 0 disables them.
    pub eval_interval: usize,
    pub bn_recalib_batches: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_iters: 10_000,
            base_lr: 0.01,
            warmup_epochs: 5,
            momentum: 0.9,
            weight_decay: 1e-5,
            label_smoothing: 0.1,
            dropout: 0.3,
            drop_connect: 0.2,
            tau: 0.95,
            batch_l: 32,
            batch_u: 32,
            loss_variant: LossVariant::Full,
            seed: 0,
            eval_interval: 500,
            bn_recalib_batches: 8,
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "max_iters",
    "base_lr",
    "warmup_epochs",
    "momentum",
    "weight_decay",
    "label_smoothing",
    "dropout",
    "drop_connect",
    "tau",
    "batch_l",
    "batch_u",
    "loss_variant",
    "seed",
    "eval_interval",
    "bn_recalib_batches",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

impl TrainConfig {
    /// Learning-rate warmup length: `warmup_epochs` passes over the labeled set.
    pub fn warmup_iters(&self, labeled: usize) -> usize {
        self.warmup_epochs * labeled.div_ceil(self.batch_l.max(1))
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "max_iters" => self.max_iters = parse(key, value)?,
            "base_lr" => self.base_lr = parse(key, value)?,
            "warmup_epochs" => self.warmup_epochs = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "label_smoothing" => self.label_smoothing = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "drop_connect" => self.drop_connect = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "batch_l" => self.batch_l = parse(key, value)?,
            "batch_u" => self.batch_u = parse(key, value)?,
            "loss_variant" => self.loss_variant = value.trim().parse()?,
            "seed" => self.seed = parse(key, value)?,
            "eval_interval" => self.eval_interval = parse(key, value)?,
            "bn_recalib_batches" => self.bn_recalib_batches = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "max_iters" => self.max_iters.to_string(),
            "base_lr" => self.base_lr.to_string(),
            "warmup_epochs" => self.warmup_epochs.to_string(),
            "momentum" => self.momentum.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "label_smoothing" => self.label_smoothing.to_string(),
            "dropout" => self.dropout.to_string(),
            "drop_connect" => self.drop_connect.to_string(),
            "tau" => self.tau.to_string(),
            "batch_l" => self.batch_l.to_string(),
            "batch_u" => self.batch_u.to_string(),
            "loss_variant" => self.loss_variant.to_string(),
            "seed" => self.seed.to_string(),
            "eval_interval" => self.eval_interval.to_string(),
            "bn_recalib_batches" => self.bn_recalib_batches.to_string(),
            _ => return None,
        })
    }

    /// Every field as `key = value` lines.
    pub fn to_kv(&self) -> String {
        CONFIG_KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", self.get(k).unwrap()))
            .collect()
    }

    /// Applies `key = value` lines on top of `self`. `#` starts a comment.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            self.set(k.trim(), v.trim()).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f32, hi_open: bool| {
            let ok = v >= 0.0 && if hi_open { v < 1.0 } else { v <= 1.0 };
            if ok {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {v} is out of range")))
            }
        };
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("base_lr = {} must be positive", self.base_lr)));
        }
        unit("momentum", self.momentum, true)?;
        unit("label_smoothing", self.label_smoothing, true)?;
        unit("dropout", self.dropout, true)?;
        unit("drop_connect", self.drop_connect, true)?;
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay = {} must be >= 0", self.weight_decay)));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Config(format!("tau = {} must lie in (0, 1)", self.tau)));
        }
        if self.batch_l == 0 || self.batch_u == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.bn_recalib_batches == 0 {
            return Err(Error::Config("bn_recalib_batches must be at least 1".into()));
        }
        Ok(())
    }

    /// Checks that warmup ends before training does.
    pub fn validate_for(&self, labeled: usize) -> Result<()> {
        self.validate()?;
        let w = self.warmup_iters(labeled);
        if self.max_iters > 0 && w >= self.max_iters {
            return Err(Error::Config(format!(
                "warmup of {w} iterations does not fit in max_iters = {}",
                self.max_iters
            )));
        }
        Ok(())
    }
}
