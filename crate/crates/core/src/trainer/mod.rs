//! Supernet training with the sandwich rule and the semi-supervised loss.
//!
//! Every iteration trains the maxnet on labeled (and optionally pseudo-
//! labeled) data, then distills its detached outputs into two uniformly
//! sampled subnets and the minnet, sums all terms and takes one SGD step.

mod config;
mod ledger;

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{TrainConfig, CONFIG_KEYS};
pub use ledger::{LedgerEntry, SampleLedger};

use crate::data::{resize_batch, BatchStream, Dataset, Normalizer};
use crate::error::{Error, Result};
use crate::losses::{
    compose_step_loss, distill_loss, fixmatch_loss, labeled_loss, zero_term, LossParts, LossVariant,
    PseudoLabels, StepLossReport,
};
use crate::selection::{calibrate_and_evaluate, CalibrationSource};
use crate::space::{SearchSpace, SubnetConfig};
use crate::supernet::{save_checkpoint, Mode, Supernet};
use crate::tensor::{cosine_warmup_lr, sgd_step, softmax_rows, Graph, OptimizerState, ParamSet};

/// Metadata key holding the encoded input normalization.
pub const NORMALIZER_KEY: &str = "normalizer";

/// The datasets a run reads.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub labeled: &'a Dataset,
    pub unlabeled: Option<&'a Dataset>,
    /// Held-out set for periodic anchor evaluation.
    pub eval: Option<&'a Dataset>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterRecord {
    pub iter: usize,
    pub lr: f32,
    pub report: StepLossReport,
    /// Keys of the three distilled students, in sampling order.
    pub students: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub iter: usize,
    pub minnet_acc: f64,
    pub maxnet_acc: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub iters: Vec<IterRecord>,
    pub evals: Vec<EvalRecord>,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f32> {
        self.iters.iter().map(|r| r.report.total).collect()
    }

    /// One `key=value` line per iteration and per evaluation.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.iters {
            let d: Vec<String> = r.report.distill_terms.iter().map(|v| format!("{v:?}")).collect();
            let _ = writeln!(
                s,
                "iter={} lr={:?} total={:?} labeled={:?} fm={:?} fm_mask={} distill={} students={}",
                r.iter,
                r.lr,
                r.report.total,
                r.report.labeled_term,
                r.report.fm_term,
                r.report.fm_mask_count,
                d.join(","),
                r.students.join(",")
            );
        }
        for e in &self.evals {
            let _ = writeln!(
                s,
                "eval iter={} minnet_acc={:.4} maxnet_acc={:.4}",
                e.iter, e.minnet_acc, e.maxnet_acc
            );
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub report: StepLossReport,
    pub lr: f32,
    /// Architectures whose loss terms entered the backward pass:
    /// maxnet, two random subnets and the minnet.
    pub trained: Vec<SubnetConfig>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub ledger: SampleLedger,
    pub log: TrainLog,
}

/// Mutable state carried across iterations.
pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    pub data: TrainData<'a>,
    pub norm: Normalizer,
    /// Variant after accounting for a missing unlabeled set.
    pub variant: LossVariant,
    pub warmup: usize,
    labeled: BatchStream,
    unlabeled: Option<BatchStream>,
    sample_rng: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
    optim: OptimizerState,
}

impl<'a> Trainer<'a> {
    pub fn new(net: &mut Supernet, data: TrainData<'a>, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate_for(data.labeled.len())?;
        if data.labeled.is_empty() {
            return Err(Error::Contract("training needs labeled data".into()));
        }
        if !data.labeled.is_fully_labeled() {
            return Err(Error::Contract("the labeled set contains unlabeled samples".into()));
        }
        if data.labeled.num_classes != net.num_classes {
            return Err(Error::Contract(format!(
                "labeled set has {} classes, network has {}",
                data.labeled.num_classes, net.num_classes
            )));
        }
        if data.labeled.channels != net.space.in_channels {
            return Err(Error::Contract(format!(
                "images have {} channels, network expects {}",
                data.labeled.channels, net.space.in_channels
            )));
        }
        let unlabeled_data = data.unlabeled.filter(|d| !d.is_empty());
        let variant = if unlabeled_data.is_some() {
            cfg.loss_variant
        } else {
            LossVariant::Lab
        };
        let norm = Normalizer::fit(data.labeled)?;
        net.meta.insert(NORMALIZER_KEY.into(), norm.encode());
        net.dropout = cfg.dropout;
        net.drop_connect = cfg.drop_connect;
        let seed = cfg.seed;
        let labeled = BatchStream::new(data.labeled.len(), cfg.batch_l, seed ^ 0x1abe1)?;
        let unlabeled = match (variant.uses_unlabeled(), unlabeled_data) {
            (true, Some(d)) => Some(BatchStream::new(d.len(), cfg.batch_u, seed ^ 0x0a1ab)?),
            _ => None,
        };
        Ok(Self {
            cfg: cfg.clone(),
            data: TrainData {
                unlabeled: unlabeled_data,
                ..data
            },
            norm,
            variant,
            warmup: cfg.warmup_iters(data.labeled.len()),
            labeled,
            unlabeled,
            sample_rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5a4d_71c4),
            dropout_rng: ChaCha8Rng::seed_from_u64(seed ^ 0xd40f),
            optim: OptimizerState::new(&net.params, cfg.base_lr, cfg.momentum, cfg.weight_decay),
        })
    }

    /// One training iteration `t >= 1`.
    pub fn step(&mut self, net: &mut Supernet, t: usize) -> Result<StepOutcome> {
        if t == 0 {
            return Err(Error::Contract("iterations are numbered from 1".into()));
        }
        let cfg = &self.cfg;
        let alpha = cfg.label_smoothing;
        let maxnet = net.maxnet();
        let minnet = net.minnet();
        let res = maxnet.resolution;
        let lab = self.labeled.next_labeled(self.data.labeled, res, &self.norm)?;
        let unlab = match (&mut self.unlabeled, self.data.unlabeled) {
            (Some(s), Some(d)) => Some(s.next_unlabeled(d, res, &self.norm)?),
            _ => None,
        };

        let mut g = Graph::new(&net.params);
        let mut parts = LossParts::default();
        let rng = &mut self.dropout_rng;

        let x_l = g.input(lab.images.clone());
        let z_max = net.forward(&mut g, &maxnet, x_l, &mut Mode::Train { rng })?;
        parts.labeled = Some(labeled_loss(&mut g, z_max, &lab.labels, alpha)?);
        let teacher_l = g.value(z_max).to_vec();

        let mut teacher_u = None;
        if let Some(u) = &unlab {
            // pseudo-labels and distillation targets come from a detached
            // weak-view pass with batch statistics and no dropout
            let logits = net.subnet_forward(&maxnet, &u.weak, Mode::Calibrate)?;
            let classes = net.num_classes;
            if self.variant.uses_fixmatch() {
                let probs = softmax_rows(logits.data(), classes);
                let pseudo = PseudoLabels::from_probs(&probs, classes, cfg.tau)?;
                parts.fixmatch = Some(if pseudo.count() > 0 {
                    let x_s = g.input(u.strong.clone());
                    let z_s = net.forward(&mut g, &maxnet, x_s, &mut Mode::Train { rng })?;
                    fixmatch_loss(&mut g, &probs, z_s, cfg.tau, alpha)?
                } else {
                    (zero_term(&mut g), 0)
                });
            }
            teacher_u = Some(logits.into_data());
        }

        let [a1, a2] = [
            net.space.sample_uniform(&mut self.sample_rng),
            net.space.sample_uniform(&mut self.sample_rng),
        ];
        let students = [a1, a2, minnet.clone()];
        for a in &students {
            let x = g.input(resize_batch(&lab.images, a.resolution)?);
            let z = net.forward(&mut g, a, x, &mut Mode::Train { rng })?;
            parts.distill_labeled.push(distill_loss(&mut g, &teacher_l, z)?);
            if let (true, Some(u), Some(tu)) = (self.variant.uses_unlabeled_distill(), &unlab, &teacher_u) {
                let x = g.input(resize_batch(&u.weak, a.resolution)?);
                let z = net.forward(&mut g, a, x, &mut Mode::Train { rng })?;
                parts.distill_unlabeled.push(distill_loss(&mut g, tu, z)?);
            }
        }
        let (total, report) = compose_step_loss(&mut g, self.variant, &parts)?;
        if !report.total.is_finite() {
            return Err(Error::Diverged {
                iteration: t,
                reason: format!("loss is {}", report.total),
            });
        }
        let grads = g.backward(total)?;
        drop(g);
        let lr = cosine_warmup_lr(t - 1, cfg.max_iters, self.warmup, cfg.base_lr);
        sgd_step(&mut self.optim, &mut net.params, &grads, lr)?;

        let mut trained = vec![maxnet];
        trained.extend(students);
        Ok(StepOutcome { report, lr, trained })
    }

    /// Recalibrates and evaluates both anchors on the eval set.
    pub fn evaluate_anchors(&self, net: &mut Supernet, iter: usize) -> Result<Option<EvalRecord>> {
        let Some(eval) = self.data.eval else { return Ok(None) };
        let calib = self.calibration_source();
        let (min, max) = (net.minnet(), net.maxnet());
        let minnet_acc = calibrate_and_evaluate(net, &min, &calib, eval, &self.norm, self.cfg.bn_recalib_batches)?;
        let maxnet_acc = calibrate_and_evaluate(net, &max, &calib, eval, &self.norm, self.cfg.bn_recalib_batches)?;
        Ok(Some(EvalRecord {
            iter,
            minnet_acc,
            maxnet_acc,
        }))
    }

    pub fn calibration_source(&self) -> CalibrationSource<'a> {
        CalibrationSource {
            labeled: self.data.labeled,
            unlabeled: self.data.unlabeled,
            batch_size: self.cfg.batch_l,
            seed: self.cfg.seed,
        }
    }
}

struct Snapshot {
    params: ParamSet,
    running: Vec<crate::supernet::RunningStats>,
}

/// Runs `cfg.max_iters` iterations. With `run_dir`, writes the config, a
/// checkpoint at every evaluation, and the final checkpoint, ledger and log.
/// On divergence the network is restored to the last evaluated state (saved
/// as `last_good.ckpt` when a run directory is given) and an error returned.
pub fn train(
    net: &mut Supernet,
    space: &SearchSpace,
    data: TrainData<'_>,
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    net.check_space_compatible(space)?;
    let mut trainer = Trainer::new(net, data, cfg)?;
    if let Some(dir) = run_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.txt"), cfg.to_kv())?;
    }
    let mut ledger = SampleLedger::new();
    let mut log = TrainLog::default();
    let mut good = Snapshot {
        params: net.params.clone(),
        running: net.running.clone(),
    };
    let mut initial = None;
    let mut blown = 0usize;
    let maxnet = net.maxnet();
    let minnet = net.minnet();

    for t in 1..=cfg.max_iters {
        let out = match trainer.step(net, t) {
            Ok(o) => o,
            Err(e @ (Error::Diverged { .. } | Error::NonFinite(_))) => {
                return Err(abort(net, good, run_dir, t, e.to_string()));
            }
            Err(e) => return Err(e),
        };
        let loss = out.report.total;
        let first = *initial.get_or_insert(loss);
        blown = if loss > 10.0 * first { blown + 1 } else { 0 };
        if blown >= 100 {
            let reason = format!("loss above 10x its initial value {first} for 100 iterations");
            return Err(abort(net, good, run_dir, t, reason));
        }
        ledger.update_maxnet(t, &maxnet);
        ledger.update(t, &out.trained[1..], &minnet);
        log.iters.push(IterRecord {
            iter: t,
            lr: out.lr,
            report: out.report,
            students: out.trained[1..].iter().map(SubnetConfig::encode).collect(),
        });
        if cfg.eval_interval > 0 && (t % cfg.eval_interval == 0 || t == cfg.max_iters) {
            if let Some(rec) = trainer.evaluate_anchors(net, t)? {
                log.evals.push(rec);
            }
            good = Snapshot {
                params: net.params.clone(),
                running: net.running.clone(),
            };
            if let Some(dir) = run_dir {
                net.meta.insert("iteration".into(), t.to_string());
                save_checkpoint(net, &dir.join(format!("checkpoint_{t:06}.ckpt")))?;
            }
        }
    }
    net.meta.insert("iteration".into(), cfg.max_iters.to_string());
    net.meta.insert("loss_variant".into(), trainer.variant.to_string());
    if let Some(dir) = run_dir {
        save_checkpoint(net, &dir.join("supernet.ckpt"))?;
        ledger.save(dir, "ledger")?;
        std::fs::write(dir.join("train_log.txt"), log.to_text())?;
    }
    Ok(TrainOutcome { ledger, log })
}

fn abort(net: &mut Supernet, good: Snapshot, run_dir: Option<&Path>, t: usize, reason: String) -> Error {
    net.params = good.params;
    net.running = good.running;
    if let Some(dir) = run_dir {
        if let Err(e) = save_checkpoint(net, &dir.join("last_good.ckpt")) {
            return e;
        }
    }
    Error::Diverged { iteration: t, reason }
}

/// Fully supervised training on a source task, for use as initialization.
/// Records the source dataset and iteration count in the checkpoint metadata.
pub fn pretrain(
    space: &SearchSpace,
    source: &Dataset,
    cfg: &TrainConfig,
    init_seed: u64,
    run_dir: Option<&Path>,
) -> Result<(Supernet, TrainOutcome)> {
    if !source.is_fully_labeled() {
        return Err(Error::Contract("pretraining needs a fully labeled dataset".into()));
    }
    let mut net = Supernet::init(space, source.num_classes, init_seed)?;
    net.meta.insert("pretrain_source".into(), source.name.clone());
    net.meta.insert("pretrain_iters".into(), cfg.max_iters.to_string());
    net.meta.insert("pretrain_profile".into(), space.name.clone());
    let cfg = TrainConfig {
        loss_variant: LossVariant::Lab,
        ..cfg.clone()
    };
    let data = TrainData {
        labeled: source,
        unlabeled: None,
        eval: None,
    };
    let out = train(&mut net, space, data, &cfg, run_dir)?;
    Ok((net, out))
}
