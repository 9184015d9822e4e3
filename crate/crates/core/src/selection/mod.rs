//! Picking deployable subnets after training: the zero-cost rule over the
//! sample ledger, validation-based selection, evaluation and timing.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;

use crate::data::{eval_batch, BatchStream, Dataset, Normalizer};
use crate::error::{Error, Result};
use crate::space::{SearchSpace, SubnetConfig};
use crate::supernet::{Mode, StandaloneNet, Supernet};
use crate::tensor::Tensor;
use crate::trainer::SampleLedger;

/// Rows evaluated per forward pass.
const EVAL_CHUNK: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Flops,
    Params,
    /// Median single-image latency of the materialized subnet, in ms.
    Latency,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Self::Flops => "flops",
            Self::Params => "params",
            Self::Latency => "latency",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flops" | "macs" => Ok(Self::Flops),
            "params" => Ok(Self::Params),
            "latency" | "measured-latency" => Ok(Self::Latency),
            _ => Err(Error::Config(format!("unknown metric `{s}` (flops, params, latency)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rule {
    /// Largest ledger index.
    LastSampled,
    /// Smallest ledger index.
    FirstSampled,
    /// Largest metric value within the budget.
    ClosestToBudget,
}

impl Rule {
    pub const ALL: [Rule; 3] = [Self::LastSampled, Self::FirstSampled, Self::ClosestToBudget];

    pub fn name(self) -> &'static str {
        match self {
            Self::LastSampled => "last_sampled",
            Self::FirstSampled => "first_sampled",
            Self::ClosestToBudget => "closest_to_budget",
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Rule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown rule `{s}` (last_sampled, first_sampled, closest_to_budget)")))
    }
}

/// A ledger entry chosen under a budget.
#[derive(Debug, Clone, PartialEq)]
pub struct Selected {
    pub key: String,
    pub metric: f64,
    pub index: u64,
}

/// Chooses among ledger entries with `cost(key) <= budget`. Ties on the
/// rule's criterion go to the larger metric, then the smaller key.
pub fn select_fixed(
    ledger: &SampleLedger,
    cost: &mut dyn FnMut(&str) -> Result<f64>,
    budget: f64,
    rule: Rule,
    exclude_anchors: bool,
    metric_name: &str,
) -> Result<Selected> {
    if ledger.is_empty() {
        return Err(Error::Contract("the ledger is empty".into()));
    }
    let mut best: Option<Selected> = None;
    let mut cheapest = f64::INFINITY;
    for (key, e) in &ledger.entries {
        if exclude_anchors && e.anchor.is_some() {
            continue;
        }
        let p = cost(key)?;
        cheapest = cheapest.min(p);
        if p > budget {
            continue;
        }
        let cand = Selected {
            key: key.clone(),
            metric: p,
            index: e.index,
        };
        let better = match &best {
            None => true,
            Some(b) => {
                let primary = match rule {
                    Rule::LastSampled => cand.index.cmp(&b.index),
                    Rule::FirstSampled => b.index.cmp(&cand.index),
                    Rule::ClosestToBudget => cand.metric.total_cmp(&b.metric),
                };
                // keys iterate in ascending order, so an equal candidate
                // never displaces the earlier key
                primary.then(cand.metric.total_cmp(&b.metric)).is_gt()
            }
        };
        if better {
            best = Some(cand);
        }
    }
    best.ok_or_else(|| Error::Infeasible {
        metric: metric_name.to_string(),
        budget,
        min_available: cheapest,
    })
}

/// Cost model closure for a metric. Latency materializes and times each
/// config with `reps` repetitions.
pub fn metric_fn<'a>(
    net: &'a Supernet,
    metric: Metric,
    reps: usize,
) -> impl FnMut(&str) -> Result<f64> + 'a {
    move |key: &str| {
        let c = net.space.decode(key)?;
        Ok(match metric {
            Metric::Flops => net.space.flops(&c)? as f64,
            Metric::Params => net.space.param_count(&c, net.num_classes)? as f64,
            Metric::Latency => measure_latency(&net.materialize(&c)?, 2, reps.max(3))?.median_ms,
        })
    }
}

/// Where recalibration batches come from: plain views of the training pool.
#[derive(Debug, Clone, Copy)]
pub struct CalibrationSource<'a> {
    pub labeled: &'a Dataset,
    pub unlabeled: Option<&'a Dataset>,
    pub batch_size: usize,
    pub seed: u64,
}

impl CalibrationSource<'_> {
    /// `k` batches at `res`. The same seed always yields the same batches.
    pub fn batches(&self, res: usize, norm: &Normalizer, k: usize) -> Result<Vec<Tensor>> {
        let pool = match self.unlabeled {
            Some(u) if !u.is_empty() => {
                let mut u = u.clone();
                u.labels.iter_mut().for_each(|y| *y = crate::data::UNLABELED);
                let mut l = self.labeled.clone();
                l.labels.iter_mut().for_each(|y| *y = crate::data::UNLABELED);
                l.concat(&u)?
            }
            _ => self.labeled.clone(),
        };
        let mut stream = BatchStream::new(pool.len(), self.batch_size, self.seed ^ 0xca1b)?;
        (0..k)
            .map(|_| eval_batch(&pool, &stream.next_indices(), res, norm))
            .collect()
    }
}

fn accuracy_of(logits: &Tensor, labels: &[usize]) -> usize {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .zip(labels)
        .filter(|(row, &y)| {
            let arg = row
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
                .0;
            arg == y
        })
        .count()
}

fn labeled_indices(d: &Dataset) -> Result<(Vec<usize>, Vec<usize>)> {
    let idx: Vec<usize> = (0..d.len()).filter(|&i| d.label(i).is_some()).collect();
    if idx.is_empty() {
        return Err(Error::Contract("evaluation needs labeled samples".into()));
    }
    let labels = idx.iter().map(|&i| d.label(i).unwrap()).collect();
    Ok((idx, labels))
}

/// Top-1 accuracy of `config` in eval mode, using the stored running
/// statistics. Recalibrate first.
pub fn evaluate(net: &Supernet, config: &SubnetConfig, d: &Dataset, norm: &Normalizer) -> Result<f64> {
    let (idx, labels) = labeled_indices(d)?;
    let mut correct = 0;
    for (ic, lc) in idx.chunks(EVAL_CHUNK).zip(labels.chunks(EVAL_CHUNK)) {
        let x = eval_batch(d, ic, config.resolution, norm)?;
        correct += accuracy_of(&net.subnet_forward(config, &x, Mode::Eval)?, lc);
    }
    Ok(correct as f64 / idx.len() as f64)
}

/// Top-1 accuracy of a materialized network.
pub fn evaluate_standalone(net: &StandaloneNet, d: &Dataset, norm: &Normalizer) -> Result<f64> {
    let (idx, labels) = labeled_indices(d)?;
    let mut correct = 0;
    for (ic, lc) in idx.chunks(EVAL_CHUNK).zip(labels.chunks(EVAL_CHUNK)) {
        let x = eval_batch(d, ic, net.config.resolution, norm)?;
        correct += accuracy_of(&net.forward(&x)?, lc);
    }
    Ok(correct as f64 / idx.len() as f64)
}

/// Recalibrates batch norm for `config` from `k` batches, then evaluates.
pub fn calibrate_and_evaluate(
    net: &mut Supernet,
    config: &SubnetConfig,
    calib: &CalibrationSource<'_>,
    d: &Dataset,
    norm: &Normalizer,
    k: usize,
) -> Result<f64> {
    let batches = calib.batches(config.resolution, norm, k)?;
    net.bn_recalibrate(config, &batches, k)?;
    evaluate(net, config, d, norm)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Latency {
    pub median_ms: f64,
    pub p90_ms: f64,
}

/// Wall-clock time of single-image forwards after `warmup` discarded runs.
pub fn measure_latency(net: &StandaloneNet, warmup: usize, reps: usize) -> Result<Latency> {
    if reps < 3 {
        return Err(Error::Contract(format!("latency needs at least 3 repetitions, got {reps}")));
    }
    let r = net.config.resolution;
    let img = vec![0.5f32; net.in_channels * r * r];
    for _ in 0..warmup {
        std::hint::black_box(net.forward_image(&img));
    }
    let mut times: Vec<f64> = (0..reps)
        .map(|_| {
            let t = Instant::now();
            std::hint::black_box(net.forward_image(std::hint::black_box(&img)));
            t.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    times.sort_by(f64::total_cmp);
    let at = |q: f64| times[((q * (reps - 1) as f64).round() as usize).min(reps - 1)];
    Ok(Latency {
        median_ms: at(0.5),
        p90_ms: at(0.9),
    })
}

/// One validated candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub config: SubnetConfig,
    pub flops: u64,
    pub accuracy: f64,
}

/// Samples `n_candidates` configs, recalibrates and evaluates each once on
/// `val`, and returns for every budget the most accurate candidate whose
/// flops fit. Ties go to the earlier candidate.
#[allow(clippy::too_many_arguments)]
pub fn select_by_validation(
    net: &mut Supernet,
    val: &Dataset,
    budgets: &[f64],
    n_candidates: usize,
    rng: &mut impl Rng,
    calib: &CalibrationSource<'_>,
    norm: &Normalizer,
    k: usize,
) -> Result<Vec<Result<Candidate>>> {
    if n_candidates == 0 {
        return Err(Error::Contract("need at least one candidate".into()));
    }
    let space: SearchSpace = net.space.clone();
    let mut pool = Vec::with_capacity(n_candidates);
    for _ in 0..n_candidates {
        let config = space.sample_uniform(rng);
        let flops = space.flops(&config)?;
        let accuracy = calibrate_and_evaluate(net, &config, calib, val, norm, k)?;
        pool.push(Candidate {
            config,
            flops,
            accuracy,
        });
    }
    Ok(budgets
        .iter()
        .map(|&b| {
            pool.iter()
                .filter(|c| c.flops as f64 <= b)
                .fold(None::<&Candidate>, |best, c| match best {
                    Some(x) if x.accuracy >= c.accuracy => Some(x),
                    _ => Some(c),
                })
                .cloned()
                .ok_or_else(|| Error::Infeasible {
                    metric: "flops".into(),
                    budget: b,
                    min_available: pool.iter().map(|c| c.flops as f64).fold(f64::INFINITY, f64::min),
                })
        })
        .collect())
}

/// One rung of an exported palette.
#[derive(Debug, Clone, PartialEq)]
pub struct PaletteEntry {
    pub budget: f64,
    pub config: SubnetConfig,
    pub metric: f64,
    pub index: u64,
    pub flops: u64,
    pub params: u64,
    pub accuracy: Option<f64>,
}

/// Selects, recalibrates and materializes one subnet per budget into
/// `out_dir/budget_<i>/`, and writes `out_dir/summary.txt`. Budgets with no
/// feasible subnet are listed in the summary as infeasible.
#[allow(clippy::too_many_arguments)]
pub fn export_palette(
    net: &mut Supernet,
    ledger: &SampleLedger,
    budgets: &[f64],
    metric: Metric,
    rule: Rule,
    calib: &CalibrationSource<'_>,
    norm: &Normalizer,
    k: usize,
    eval: Option<&Dataset>,
    out_dir: &Path,
) -> Result<Vec<Option<PaletteEntry>>> {
    std::fs::create_dir_all(out_dir)?;
    let mut summary = String::from("# budget key flops params metric accuracy\n");
    let mut entries = Vec::new();
    for (i, &budget) in budgets.iter().enumerate() {
        let chosen = {
            let mut cost = metric_fn(net, metric, 10);
            select_fixed(ledger, &mut cost, budget, rule, true, metric.name())
        };
        let sel = match chosen {
            Ok(s) => s,
            Err(Error::Infeasible { .. }) => {
                summary.push_str(&format!("{budget} infeasible - - - -\n"));
                entries.push(None);
                continue;
            }
            Err(e) => return Err(e),
        };
        let config = net.space.decode(&sel.key)?;
        let batches = calib.batches(config.resolution, norm, k)?;
        net.bn_recalibrate(&config, &batches, k)?;
        let accuracy = eval.map(|d| evaluate(net, &config, d, norm)).transpose()?;
        let standalone = net.materialize(&config)?;
        let dir = out_dir.join(format!("budget_{i}"));
        std::fs::create_dir_all(&dir)?;
        standalone.save(&dir.join("subnet.ckpt"))?;
        let entry = PaletteEntry {
            budget,
            flops: net.space.flops(&config)?,
            params: standalone.param_count(),
            config,
            metric: sel.metric,
            index: sel.index,
            accuracy,
        };
        let acc = accuracy.map_or("-".to_string(), |a| format!("{a:.4}"));
        std::fs::write(
            dir.join("subnet.txt"),
            format!(
                "key={}\nbudget={budget}\nmetric={}\nvalue={}\nflops={}\nparams={}\nindex={}\naccuracy={acc}\nnormalizer={}\n",
                sel.key,
                metric,
                sel.metric,
                entry.flops,
                entry.params,
                sel.index,
                norm.encode()
            ),
        )?;
        summary.push_str(&format!(
            "{budget} {} {} {} {} {acc}\n",
            sel.key, entry.flops, entry.params, sel.metric
        ));
        entries.push(Some(entry));
    }
    std::fs::write(out_dir.join("summary.txt"), summary)?;
    Ok(entries)
}
