//! WebAssembly bindings for the browser demo. Every function returns plain
//! text (whitespace-separated rows) that the page parses and draws, so the
//! same functions are tested natively.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tofa::selection::{select_fixed, Rule};
use tofa::space::{bundled_profile, Anchor, SearchSpace, SubnetConfig, BUNDLED_PROFILES};
use tofa::tensor::cosine_warmup_lr;
use tofa::trainer::SampleLedger;
use wasm_bindgen::prelude::*;

fn space(profile: &str) -> Result<SearchSpace, JsError> {
    bundled_profile(profile).map_err(|e| JsError::new(&e.to_string()))
}

fn js(e: tofa::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Names of the bundled search-space profiles, one per line.
#[wasm_bindgen]
pub fn profiles() -> String {
    BUNDLED_PROFILES.iter().map(|(n, _)| format!("{n}\n")).collect()
}

/// `n` uniform samples from a profile plus its two anchors, as
/// `kind macs params key` rows with kind `min`, `max` or `sample`.
#[wasm_bindgen]
pub fn sample_costs(profile: &str, n: u32, classes: u32, seed: u64) -> Result<String, JsError> {
    let s = space(profile)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::new();
    let mut row = |kind: &str, c: &SubnetConfig| -> Result<(), JsError> {
        let cost = s.cost(c, classes as usize).map_err(js)?;
        let _ = writeln!(out, "{kind} {} {} {}", cost.macs, cost.params, c.encode());
        Ok(())
    };
    row("min", &s.anchor(Anchor::Min))?;
    row("max", &s.anchor(Anchor::Max))?;
    for _ in 0..n {
        row("sample", &s.sample_uniform(&mut rng))?;
    }
    Ok(out)
}

/// Per-layer cost of one config key as `layer macs params` rows, followed by
/// a `total` row.
#[wasm_bindgen]
pub fn layer_costs(profile: &str, key: &str, classes: u32) -> Result<String, JsError> {
    let s = space(profile)?;
    let c = s.decode(key).map_err(js)?;
    let cost = s.cost(&c, classes as usize).map_err(js)?;
    let mut out = String::new();
    for l in &cost.layers {
        let _ = writeln!(out, "{} {} {}", l.name, l.macs, l.params);
    }
    let _ = writeln!(out, "total {} {}", cost.macs, cost.params);
    Ok(out)
}

/// Learning rate at `points` evenly spaced iterations, as `iter lr` rows.
#[wasm_bindgen]
pub fn lr_curve(total: u32, warmup: u32, base_lr: f32, points: u32) -> String {
    let points = points.max(2) as usize;
    let total = total as usize;
    let mut out = String::new();
    for i in 0..points {
        let it = (i * total.saturating_sub(1)) / (points - 1);
        let _ = writeln!(out, "{it} {}", cosine_warmup_lr(it, total, warmup as usize, base_lr));
    }
    out
}

/// Runs the sandwich sampler for `iters` iterations without training,
/// recording the ledger, then selects one subnet per budget with each fixed
/// rule. Budgets are `rungs` evenly spaced flops values between the anchors.
/// Rows: `budget rule key flops index`, or `budget rule - - -` when nothing
/// fits.
#[wasm_bindgen]
pub fn simulate_selection(profile: &str, iters: u32, rungs: u32, seed: u64) -> Result<String, JsError> {
    let s = space(profile)?;
    let (max, min) = (s.anchor(Anchor::Max), s.anchor(Anchor::Min));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ledger = SampleLedger::new();
    for t in 1..=iters as usize {
        let sampled = [s.sample_uniform(&mut rng), s.sample_uniform(&mut rng), min.clone()];
        ledger.update_maxnet(t, &max);
        ledger.update(t, &sampled, &min);
    }
    let lo = s.flops(&min).map_err(js)? as f64;
    let hi = s.flops(&max).map_err(js)? as f64;
    let rungs = rungs.max(1);
    let mut out = String::new();
    for i in 1..=rungs {
        let budget = (lo + (hi - lo) * i as f64 / rungs as f64).round();
        for rule in [Rule::LastSampled, Rule::FirstSampled, Rule::ClosestToBudget] {
            let mut cost = |k: &str| -> tofa::Result<f64> { Ok(s.flops(&s.decode(k)?)? as f64) };
            match select_fixed(&ledger, &mut cost, budget, rule, true, "flops") {
                Ok(sel) => {
                    let _ = writeln!(out, "{budget} {} {} {} {}", rule.name(), sel.key, sel.metric, sel.index);
                }
                Err(tofa::Error::Infeasible { .. }) => {
                    let _ = writeln!(out, "{budget} {} - - -", rule.name());
                }
                Err(e) => return Err(js(e)),
            }
        }
    }
    Ok(out)
}
