use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tofa::data::{import_cifar, split_labeled, synth_blobs, Dataset, Normalizer, SynthSpec, UNLABELED};
use tofa::selection::{
    calibrate_and_evaluate, evaluate_standalone, export_palette, metric_fn, select_by_validation, select_fixed,
    CalibrationSource, Metric, Rule,
};
use tofa::space::{bundled_profile, load_profile, Anchor, SearchSpace, SubnetConfig};
use tofa::supernet::{load_checkpoint, save_checkpoint, HeadReinit, StandaloneNet, Supernet};
use tofa::trainer::{pretrain, train, SampleLedger, TrainConfig, TrainData, NORMALIZER_KEY};

use crate::manifest::{sha256_file, RunManifest};
use crate::{Cli, Command, TrainFlags};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or settings, detected before any work starts.
    Usage(String),
    Runtime(String),
}

type Result<T> = std::result::Result<T, CliError>;

impl From<tofa::Error> for CliError {
    fn from(e: tofa::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn usage(msg: impl Display) -> CliError {
    CliError::Usage(msg.to_string())
}

fn runtime(msg: impl Display) -> CliError {
    CliError::Runtime(msg.to_string())
}

/// `TOFA_NUM_THREADS`, if set, must be a positive integer. All kernels run
/// on the calling thread, so any cap is already satisfied.
fn thread_cap() -> Result<Option<usize>> {
    match std::env::var("TOFA_NUM_THREADS") {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(usage(format!("TOFA_NUM_THREADS must be a positive integer, got `{v}`"))),
        },
    }
}

/// Fails if `path` exists (a file, or a non-empty directory) unless forced.
fn guard_output(path: &Path, force: bool) -> Result<()> {
    if force {
        return Ok(());
    }
    let occupied = if path.is_dir() {
        fs::read_dir(path)?.next().is_some()
    } else {
        path.exists()
    };
    if occupied {
        return Err(runtime(format!(
            "{} already exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// A bundled profile name or a path to a profile file.
fn resolve_profile(name: &str) -> Result<SearchSpace> {
    match bundled_profile(name) {
        Ok(s) => Ok(s),
        Err(_) if Path::new(name).is_file() => Ok(load_profile(&fs::read_to_string(name)?)?),
        Err(e) => Err(usage(e)),
    }
}

fn resolve_config(space: &SearchSpace, key: &str) -> Result<SubnetConfig> {
    match key {
        "min" => Ok(space.anchor(Anchor::Min)),
        "max" => Ok(space.anchor(Anchor::Max)),
        _ => space.decode(key).map_err(usage),
    }
}

fn read_tds(path: &Path) -> Result<Dataset> {
    Dataset::read_tds(path).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn erase_labels(mut d: Dataset) -> Dataset {
    d.labels.iter_mut().for_each(|y| *y = UNLABELED);
    d
}

/// Default < config file < `--set` < dedicated flags; validated up front.
fn train_config(
    flags: &TrainFlags,
    iters: Option<usize>,
    variant: Option<&str>,
    labeled: Option<usize>,
) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &flags.config_file {
        let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        cfg.apply_kv(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    }
    for kv in &flags.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim()).map_err(usage)?;
    }
    if let Some(n) = iters {
        cfg.max_iters = n;
    }
    if let Some(v) = variant {
        cfg.set("loss_variant", v).map_err(usage)?;
    }
    if let Some(s) = flags.seed {
        cfg.seed = s;
    }
    match labeled {
        Some(n) => cfg.validate_for(n).map_err(usage)?,
        None => cfg.validate().map_err(usage)?,
    }
    Ok(cfg)
}

fn record_config(m: &mut RunManifest, cfg: &TrainConfig) {
    for k in tofa::trainer::CONFIG_KEYS {
        m.set(k, cfg.get(k).unwrap());
    }
    m.seed = Some(cfg.seed);
}

fn begin(path: PathBuf, command: &str) -> Result<RunManifest> {
    let mut m = RunManifest::new(path, command);
    if let Some(n) = thread_cap()? {
        m.set("num_threads", n);
    }
    Ok(m)
}

pub fn run(cli: Cli) -> Result<()> {
    thread_cap()?;
    let force = cli.force;
    match cli.command {
        Command::Convert { cifar_dir, out } => convert(&cifar_dir, &out, force),
        Command::Synth {
            classes,
            size,
            n,
            seed,
            task,
            out,
        } => synth(
            SynthSpec {
                classes,
                size,
                n,
                seed,
                task,
            },
            &out,
            force,
        ),
        Command::Pretrain {
            data,
            profile,
            iters,
            out,
            train,
        } => run_pretrain(&data, &profile, iters, &out, &train, force),
        Command::Train {
            labeled,
            data,
            per_class,
            unlabeled_from_rest,
            unlabeled,
            eval,
            variant,
            init,
            reinit_head,
            profile,
            iters,
            out_dir,
            train,
        } => {
            let source = match (labeled, data, per_class) {
                (Some(l), None, None) => LabeledSource::File(l),
                (None, Some(d), Some(k)) => LabeledSource::Split { data: d, per_class: k },
                (Some(_), None, Some(_)) => return Err(usage("--per-class applies to --data, not --labeled")),
                _ => return Err(usage("give either --labeled or --data with --per-class")),
            };
            let unlabeled = match (unlabeled_from_rest, unlabeled) {
                (true, _) => UnlabeledSource::Rest,
                (false, Some(p)) => UnlabeledSource::File(p),
                (false, None) => UnlabeledSource::None,
            };
            run_train(TrainArgs {
                source,
                unlabeled,
                eval,
                variant,
                init,
                reinit_head,
                profile,
                iters,
                out_dir,
                flags: train,
                force,
            })
        }
        Command::Select {
            run_dir,
            budgets,
            rule,
            metric,
            include_anchors,
            val,
            candidates,
            seed,
        } => select(&run_dir, &budgets, &rule, &metric, include_anchors, val.as_deref(), candidates, seed),
        Command::Eval {
            checkpoint,
            run_dir,
            config,
            data,
            calib,
        } => eval(checkpoint.as_deref(), run_dir.as_deref(), config.as_deref(), &data, calib.as_deref()),
        Command::Flops {
            profile,
            config,
            classes,
        } => flops(&profile, &config, classes),
        Command::Export {
            run_dir,
            budgets,
            out_dir,
            rule,
            metric,
            eval,
        } => export(&run_dir, &budgets, &out_dir, &rule, &metric, eval.as_deref(), force),
    }
}

fn convert(cifar_dir: &Path, out: &Path, force: bool) -> Result<()> {
    guard_output(out, force)?;
    let mut m = begin(out.join("manifest.txt"), "convert")?;
    let mut files: Vec<PathBuf> = fs::read_dir(cifar_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "bin"))
        .collect();
    files.sort();
    for f in &files {
        m.input(&f.file_name().unwrap().to_string_lossy(), f)?;
    }
    m.write()?;
    let (train, test) = import_cifar(cifar_dir)?;
    train.write_tds(&out.join("train.tds"))?;
    test.write_tds(&out.join("test.tds"))?;
    m.finish()?;
    println!(
        "train={} train_n={} test={} test_n={} classes={}",
        out.join("train.tds").display(),
        train.len(),
        out.join("test.tds").display(),
        test.len(),
        train.num_classes
    );
    Ok(())
}

fn synth(spec: SynthSpec, out: &Path, force: bool) -> Result<()> {
    guard_output(out, force)?;
    let mut m = begin(sibling(out, ".manifest.txt"), "synth")?;
    m.set("classes", spec.classes);
    m.set("size", spec.size);
    m.set("n", spec.n);
    m.set("task", spec.task);
    m.seed = Some(spec.seed);
    m.write()?;
    let d = synth_blobs(&spec).map_err(usage)?;
    d.write_tds(out)?;
    m.finish()?;
    println!(
        "out={} n={} classes={} size={} sha256={}",
        out.display(),
        d.len(),
        d.num_classes,
        spec.size,
        sha256_file(out)?
    );
    Ok(())
}

fn run_pretrain(
    data: &Path,
    profile: &str,
    iters: Option<usize>,
    out: &Path,
    flags: &TrainFlags,
    force: bool,
) -> Result<()> {
    let space = resolve_profile(profile)?;
    let src = read_tds(data)?;
    let cfg = train_config(flags, iters, None, Some(src.len()))?;
    guard_output(out, force)?;
    let mut m = begin(sibling(out, ".manifest.txt"), "pretrain")?;
    m.set("profile", &space.name);
    record_config(&mut m, &cfg);
    m.input("data", data)?;
    m.write()?;
    let (net, outcome) = pretrain(&space, &src, &cfg, cfg.seed, None)?;
    save_checkpoint(&net, out)?;
    m.finish()?;
    let last = outcome.log.losses().last().copied().unwrap_or(f32::NAN);
    println!(
        "checkpoint={} iters={} classes={} final_loss={last:.6}",
        out.display(),
        cfg.max_iters,
        net.num_classes
    );
    Ok(())
}

enum LabeledSource {
    File(PathBuf),
    Split { data: PathBuf, per_class: usize },
}

enum UnlabeledSource {
    None,
    Rest,
    File(PathBuf),
}

struct TrainArgs {
    source: LabeledSource,
    unlabeled: UnlabeledSource,
    eval: Option<PathBuf>,
    variant: Option<String>,
    init: Option<PathBuf>,
    reinit_head: bool,
    profile: String,
    iters: Option<usize>,
    out_dir: PathBuf,
    flags: TrainFlags,
    force: bool,
}

/// Where a run's data came from, so later commands can rebuild the same
/// calibration pool.
#[derive(Debug, Default)]
struct DataRecord {
    entries: Vec<(String, String)>,
}

impl DataRecord {
    fn push(&mut self, k: &str, v: impl ToString) {
        self.entries.push((k.into(), v.to_string()));
    }

    fn get(&self, k: &str) -> Option<&str> {
        self.entries.iter().find(|(a, _)| a == k).map(|(_, v)| v.as_str())
    }

    fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    fn parse(text: &str) -> Self {
        let entries = text
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
            .collect();
        Self { entries }
    }
}

fn absolute(p: &Path) -> PathBuf {
    fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}

/// Labeled and unlabeled sets built from the sources, plus their record.
fn load_sources(
    source: &LabeledSource,
    unlabeled: &UnlabeledSource,
    split_seed: u64,
) -> Result<(Dataset, Option<Dataset>, DataRecord)> {
    let mut rec = DataRecord::default();
    let (labeled, rest) = match source {
        LabeledSource::File(p) => {
            rec.push("labeled", absolute(p).display());
            rec.push("labeled_sha256", sha256_file(p)?);
            (read_tds(p)?, None)
        }
        LabeledSource::Split { data, per_class } => {
            let d = read_tds(data)?;
            rec.push("split_data", absolute(data).display());
            rec.push("split_sha256", sha256_file(data)?);
            rec.push("per_class", per_class);
            rec.push("split_seed", split_seed);
            let (l, u) = split_labeled(&d, *per_class, split_seed).map_err(usage)?;
            (l, Some(u))
        }
    };
    let unlabeled = match unlabeled {
        UnlabeledSource::None => None,
        UnlabeledSource::Rest => {
            rec.push("unlabeled", "rest");
            rest
        }
        UnlabeledSource::File(p) => {
            rec.push("unlabeled", absolute(p).display());
            rec.push("unlabeled_sha256", sha256_file(p)?);
            Some(erase_labels(read_tds(p)?))
        }
    };
    Ok((labeled, unlabeled, rec))
}

fn run_train(a: TrainArgs) -> Result<()> {
    let space = resolve_profile(&a.profile)?;
    // the split seed is the run seed, so resolve the config first
    let seed_probe = train_config(&a.flags, a.iters, a.variant.as_deref(), None)?;
    let (labeled, unlabeled, mut rec) = load_sources(&a.source, &a.unlabeled, seed_probe.seed)?;
    let cfg = train_config(&a.flags, a.iters, a.variant.as_deref(), Some(labeled.len()))?;
    let eval = a.eval.as_deref().map(read_tds).transpose()?;
    guard_output(&a.out_dir, a.force)?;
    fs::create_dir_all(&a.out_dir)?;

    let mut m = begin(a.out_dir.join("manifest.txt"), "train")?;
    m.set("profile", &space.name);
    record_config(&mut m, &cfg);
    match &a.source {
        LabeledSource::File(p) => m.input("labeled", p)?,
        LabeledSource::Split { data, per_class } => {
            m.input("data", data)?;
            m.set("per_class", per_class);
        }
    }
    if let UnlabeledSource::File(p) = &a.unlabeled {
        m.input("unlabeled", p)?;
    }
    if let Some(p) = &a.eval {
        m.input("eval", p)?;
    }
    if let Some(p) = &a.init {
        m.input("init", p)?;
    }
    m.write()?;

    let mut net = match &a.init {
        Some(p) => {
            let probe = load_checkpoint(p, None)?;
            let reinit = (a.reinit_head || probe.num_classes != labeled.num_classes).then_some(HeadReinit {
                num_classes: labeled.num_classes,
                seed: cfg.seed,
            });
            let net = match reinit {
                Some(h) => load_checkpoint(p, Some(h))?,
                None => probe,
            };
            net.check_space_compatible(&space)?;
            net
        }
        None => Supernet::init(&space, labeled.num_classes, cfg.seed)?,
    };
    rec.push("labeled_count", labeled.len());
    rec.push("unlabeled_count", unlabeled.as_ref().map_or(0, Dataset::len));
    fs::write(a.out_dir.join("data.txt"), rec.to_text())?;

    let data = TrainData {
        labeled: &labeled,
        unlabeled: unlabeled.as_ref(),
        eval: eval.as_ref(),
    };
    let outcome = train(&mut net, &space, data, &cfg, Some(&a.out_dir))?;
    m.finish()?;
    for e in &outcome.log.evals {
        println!("eval iter={} minnet_acc={:.4} maxnet_acc={:.4}", e.iter, e.minnet_acc, e.maxnet_acc);
    }
    let last = outcome.log.losses().last().copied().unwrap_or(f32::NAN);
    println!(
        "run_dir={} iters={} variant={} final_loss={last:.6} ledger_size={} labeled={} unlabeled={}",
        a.out_dir.display(),
        cfg.max_iters,
        net.meta.get("loss_variant").map_or("-", String::as_str),
        outcome.ledger.len(),
        labeled.len(),
        unlabeled.as_ref().map_or(0, Dataset::len)
    );
    Ok(())
}

/// A finished training run reloaded from disk.
struct Run {
    net: Supernet,
    ledger: SampleLedger,
    cfg: TrainConfig,
    labeled: Dataset,
    unlabeled: Option<Dataset>,
    norm: Normalizer,
}

impl Run {
    fn calib(&self) -> CalibrationSource<'_> {
        CalibrationSource {
            labeled: &self.labeled,
            unlabeled: self.unlabeled.as_ref(),
            batch_size: self.cfg.batch_l,
            seed: self.cfg.seed,
        }
    }
}

fn check_digest(path: &str, expected: Option<&str>) -> Result<PathBuf> {
    let p = PathBuf::from(path);
    if let Some(d) = expected {
        let actual = sha256_file(&p).map_err(|e| runtime(format!("{path}: {e}")))?;
        if actual != d {
            return Err(runtime(format!("{path} changed since training (sha256 mismatch)")));
        }
    }
    Ok(p)
}

fn load_run(dir: &Path) -> Result<Run> {
    let need = |f: &str| -> Result<PathBuf> {
        let p = dir.join(f);
        if p.exists() {
            Ok(p)
        } else {
            Err(runtime(format!("{} is not a finished run directory (no {f})", dir.display())))
        }
    };
    let net = load_checkpoint(&need("supernet.ckpt")?, None)?;
    need("ledger.txt")?;
    let ledger = SampleLedger::load(dir, "ledger")?;
    let mut cfg = TrainConfig::default();
    cfg.apply_kv(&fs::read_to_string(need("config.txt")?)?)?;
    let rec = DataRecord::parse(&fs::read_to_string(need("data.txt")?)?);
    let source = match (rec.get("labeled"), rec.get("split_data")) {
        (Some(p), _) => LabeledSource::File(check_digest(p, rec.get("labeled_sha256"))?),
        (None, Some(p)) => LabeledSource::Split {
            data: check_digest(p, rec.get("split_sha256"))?,
            per_class: rec
                .get("per_class")
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| runtime("data.txt lacks per_class"))?,
        },
        _ => return Err(runtime("data.txt names no labeled source")),
    };
    let unlabeled = match rec.get("unlabeled") {
        None => UnlabeledSource::None,
        Some("rest") => UnlabeledSource::Rest,
        Some(p) => UnlabeledSource::File(check_digest(p, rec.get("unlabeled_sha256"))?),
    };
    let split_seed = rec.get("split_seed").and_then(|v| v.parse().ok()).unwrap_or(cfg.seed);
    let (labeled, unlabeled, _) = load_sources(&source, &unlabeled, split_seed)?;
    let norm = Normalizer::decode(
        net.meta
            .get(NORMALIZER_KEY)
            .ok_or_else(|| runtime("checkpoint lacks its input normalization"))?,
    )?;
    Ok(Run {
        net,
        ledger,
        cfg,
        labeled,
        unlabeled,
        norm,
    })
}

#[allow(clippy::too_many_arguments)]
fn select(
    run_dir: &Path,
    budgets: &[f64],
    rule: &str,
    metric: &str,
    include_anchors: bool,
    val: Option<&Path>,
    candidates: Option<usize>,
    seed: u64,
) -> Result<()> {
    let rule: Rule = rule.parse().map_err(usage)?;
    let metric: Metric = metric.parse().map_err(usage)?;
    let mut run = load_run(run_dir)?;
    let val = val.map(read_tds).transpose()?;
    let k = run.cfg.bn_recalib_batches;
    for &b in budgets {
        let picked = {
            let mut cost = metric_fn(&run.net, metric, 10);
            select_fixed(&run.ledger, &mut cost, b, rule, !include_anchors, metric.name())
        };
        match picked {
            Ok(sel) => {
                let mut line = format!(
                    "budget={b} rule={} metric={} key={} value={} index={}",
                    rule.name(),
                    metric.name(),
                    sel.key,
                    sel.metric,
                    sel.index
                );
                if let Some(v) = &val {
                    let config = run.net.space.decode(&sel.key)?;
                    let (mut net, calib) = (run.net.clone(), run.calib());
                    let acc = calibrate_and_evaluate(&mut net, &config, &calib, v, &run.norm, k)?;
                    line.push_str(&format!(" val_acc={acc:.4}"));
                }
                println!("{line}");
            }
            Err(tofa::Error::Infeasible { min_available, .. }) => {
                println!("budget={b} rule={} infeasible min_available={min_available}", rule.name());
            }
            Err(e) => return Err(e.into()),
        }
    }
    if let (Some(v), Some(n)) = (&val, candidates) {
        if metric != Metric::Flops {
            return Err(usage("validation selection constrains flops; use --metric flops"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let calib_net = &mut run.net;
        let calib = CalibrationSource {
            labeled: &run.labeled,
            unlabeled: run.unlabeled.as_ref(),
            batch_size: run.cfg.batch_l,
            seed: run.cfg.seed,
        };
        let picks = select_by_validation(calib_net, v, budgets, n, &mut rng, &calib, &run.norm, k)?;
        for (b, p) in budgets.iter().zip(picks) {
            match p {
                Ok(c) => println!(
                    "budget={b} rule=validation key={} flops={} val_acc={:.4}",
                    c.config.encode(),
                    c.flops,
                    c.accuracy
                ),
                Err(e) => println!("budget={b} rule=validation infeasible reason=\"{e}\""),
            }
        }
    }
    Ok(())
}

fn normalizer_near(checkpoint: &Path) -> Result<Normalizer> {
    let txt = checkpoint.with_file_name("subnet.txt");
    let text = fs::read_to_string(&txt)
        .map_err(|_| runtime(format!("{} not found; it records the input normalization", txt.display())))?;
    let line = text
        .lines()
        .find_map(|l| l.strip_prefix("normalizer="))
        .ok_or_else(|| runtime(format!("{} has no normalizer line", txt.display())))?;
    Ok(Normalizer::decode(line)?)
}

fn eval(
    checkpoint: Option<&Path>,
    run_dir: Option<&Path>,
    config: Option<&str>,
    data: &Path,
    calib: Option<&Path>,
) -> Result<()> {
    let d = read_tds(data)?;
    let (acc, key) = match (checkpoint, run_dir) {
        (_, Some(dir)) => {
            let mut run = load_run(dir)?;
            let key = config.ok_or_else(|| usage("--config is required with --run-dir"))?;
            let c = resolve_config(&run.net.space, key)?;
            let (calib, norm, k) = (run.calib(), run.norm.clone(), run.cfg.bn_recalib_batches);
            let mut net = run.net.clone();
            let acc = calibrate_and_evaluate(&mut net, &c, &calib, &d, &norm, k)?;
            run.net = net;
            (acc, c.encode())
        }
        (Some(ckpt), None) => match StandaloneNet::load(ckpt) {
            Ok(sn) => {
                let norm = normalizer_near(ckpt)?;
                (evaluate_standalone(&sn, &d, &norm)?, sn.config.encode())
            }
            Err(tofa::Error::Format(_)) => {
                let mut net = load_checkpoint(ckpt, None)?;
                let key = config.ok_or_else(|| usage("--config is required for supernet checkpoints"))?;
                let c = resolve_config(&net.space, key)?;
                let calib_path = calib.ok_or_else(|| usage("a bare supernet checkpoint needs --calib images"))?;
                let calib_set = read_tds(calib_path)?;
                let norm = Normalizer::decode(
                    net.meta
                        .get(NORMALIZER_KEY)
                        .ok_or_else(|| runtime("checkpoint lacks its input normalization"))?,
                )?;
                let source = CalibrationSource {
                    labeled: &calib_set,
                    unlabeled: None,
                    batch_size: 32,
                    seed: 0,
                };
                (calibrate_and_evaluate(&mut net, &c, &source, &d, &norm, 8)?, c.encode())
            }
            Err(e) => return Err(e.into()),
        },
        (None, None) => return Err(usage("give --checkpoint or --run-dir")),
    };
    println!("accuracy={acc:.4} config={key} n={}", d.len());
    Ok(())
}

fn flops(profile: &str, key: &str, classes: usize) -> Result<()> {
    let space = resolve_profile(profile)?;
    let c = resolve_config(&space, key)?;
    let macs = space.flops(&c)?;
    let cost = space.cost(&c, classes).map_err(usage)?;
    println!(
        "profile={} config={} macs={macs} mflops={:.3} params={} classifier_macs={}",
        space.name,
        c.encode(),
        macs as f64 / 1e6,
        cost.params,
        cost.macs - macs
    );
    Ok(())
}

fn export(
    run_dir: &Path,
    budgets: &[f64],
    out_dir: &Path,
    rule: &str,
    metric: &str,
    eval: Option<&Path>,
    force: bool,
) -> Result<()> {
    let rule: Rule = rule.parse().map_err(usage)?;
    let metric: Metric = metric.parse().map_err(usage)?;
    guard_output(out_dir, force)?;
    let mut run = load_run(run_dir)?;
    let eval_set = eval.map(read_tds).transpose()?;
    let mut m = begin(out_dir.join("manifest.txt"), "export")?;
    m.set("rule", rule.name());
    m.set("metric", metric.name());
    m.set("budgets", budgets.iter().map(f64::to_string).collect::<Vec<_>>().join(","));
    m.input("supernet", &run_dir.join("supernet.ckpt"))?;
    m.input("ledger", &run_dir.join("ledger.txt"))?;
    if let Some(p) = eval {
        m.input("eval", p)?;
    }
    m.write()?;
    let calib = CalibrationSource {
        labeled: &run.labeled,
        unlabeled: run.unlabeled.as_ref(),
        batch_size: run.cfg.batch_l,
        seed: run.cfg.seed,
    };
    let k = run.cfg.bn_recalib_batches;
    let entries = export_palette(
        &mut run.net,
        &run.ledger,
        budgets,
        metric,
        rule,
        &calib,
        &run.norm,
        k,
        eval_set.as_ref(),
        out_dir,
    )?;
    m.finish()?;
    for (i, (b, e)) in budgets.iter().zip(&entries).enumerate() {
        match e {
            Some(e) => println!(
                "budget={b} dir={} key={} flops={} params={} accuracy={}",
                out_dir.join(format!("budget_{i}")).display(),
                e.config.encode(),
                e.flops,
                e.params,
                e.accuracy.map_or("-".into(), |a| format!("{a:.4}"))
            ),
            None => println!("budget={b} infeasible"),
        }
    }
    Ok(())
}
