//! Independent oracles shared by the integration suites: central finite
//! differences, a naive direct-loop convolution and a brute-force selector.
#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tofa::selection::Rule;
use tofa::space::{load_profile, Anchor, SearchSpace, SubnetConfig};
use tofa::supernet::{Mode, Supernet};
use tofa::tensor::{BnMode, ConvSpec, Graph, ParamSet, Tensor, Var};
use tofa::trainer::{LedgerEntry, SampleLedger};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Direct convolution with six nested loops, weights `[cout, cin/g, k, k]`.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv2d(
    x: &[f32],
    [n, cin, h, w]: [usize; 4],
    weight: &[f32],
    cout: usize,
    k: usize,
    bias: Option<&[f32]>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> (Vec<f32>, [usize; 4]) {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let cin_g = cin / groups;
    let cout_g = cout / groups;
    let mut out = vec![0.0f32; n * cout * oh * ow];
    for b in 0..n {
        for co in 0..cout {
            let g = co / cout_g;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0f64, |bv| bv[co] as f64);
                    for ci in 0..cin_g {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xi = ((b * cin + g * cin_g + ci) * h + iy as usize) * w + ix as usize;
                                let wi = ((co * cin_g + ci) * k + ky) * k + kx;
                                acc += x[xi] as f64 * weight[wi] as f64;
                            }
                        }
                    }
                    out[((b * cout + co) * oh + oy) * ow + ox] = acc as f32;
                }
            }
        }
    }
    (out, [n, cout, oh, ow])
}

/// Result of a finite-difference comparison.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// `|g_fd - g| / max(|g_fd|, |g|)` over the concatenated gradient.
    pub rel_err: f64,
    pub checked: usize,
}

fn projection(values: &[f32], weights: &[f32]) -> f64 {
    values
        .iter()
        .zip(weights)
        .map(|(v, w)| *v as f64 * *w as f64)
        .sum()
}

/// Compares analytic gradients of `L = sum(r * f(inputs, params))` with
/// central differences, for a fixed random projection `r`. Every input
/// element and every parameter element is perturbed.
pub fn check_gradients<F>(params: &ParamSet, inputs: &[Tensor], seed: u64, build: F) -> GradCheck
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    check_gradients_step(params, inputs, seed, 1e-3, build)
}

/// [`check_gradients`] with relative step `step`. Smooth reductions with
/// small outputs need a larger step to rise above f32 rounding.
pub fn check_gradients_step<F>(params: &ParamSet, inputs: &[Tensor], seed: u64, step: f32, build: F) -> GradCheck
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut r = rng(seed ^ 0x5eed);
    let eval = |params: &ParamSet, inputs: &[Tensor]| -> Vec<f32> {
        let mut g = Graph::new(params);
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let y = build(&mut g, &vars);
        g.value(y).to_vec()
    };
    let base = eval(params, inputs);
    let weights: Vec<f32> = (0..base.len()).map(|_| r.random_range(-1.0f32..1.0)).collect();

    let mut g = Graph::new(params);
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let y = build(&mut g, &vars);
    let shape = g.shape(y).to_vec();
    let wv = g.input(Tensor::new(shape, weights.clone()).unwrap());
    let prod = g.mul(y, wv).unwrap();
    let loss = g.sum(prod);
    let grads = g.backward(loss).unwrap();

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        let ga = grads.var(vars[i]).map(|g| g.to_vec()).unwrap_or(vec![0.0; t.numel()]);
        for j in 0..t.numel() {
            let x0 = t.data()[j];
            let h = step * x0.abs().max(1.0);
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] = x0 + h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] = x0 - h;
            let fp = projection(&eval(params, &plus), &weights);
            let fm = projection(&eval(params, &minus), &weights);
            numeric.push((fp - fm) / (2.0 * h as f64));
            analytic.push(ga[j] as f64);
        }
    }
    for (id, _, t) in params.iter() {
        let ga = grads.param(id).map(|g| g.to_vec()).unwrap_or(vec![0.0; t.numel()]);
        for j in 0..t.numel() {
            let x0 = t.data()[j];
            let h = step * x0.abs().max(1.0);
            let mut p = params.clone();
            p.get_mut(id).data_mut()[j] = x0 + h;
            let fp = projection(&eval(&p, inputs), &weights);
            p.get_mut(id).data_mut()[j] = x0 - h;
            let fm = projection(&eval(&p, inputs), &weights);
            numeric.push((fp - fm) / (2.0 * h as f64));
            analytic.push(ga[j] as f64);
        }
    }
    let diff: f64 = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    GradCheck {
        rel_err: diff / na.max(nn).max(1e-12),
        checked: analytic.len(),
    }
}

pub fn params_with(entries: Vec<(&str, Tensor)>) -> ParamSet {
    let mut p = ParamSet::new();
    for (n, t) in entries {
        p.add(n, t);
    }
    p
}

fn bn_params(c: usize, r: &mut impl Rng) -> ParamSet {
    let gamma = Tensor::new(vec![c], (0..c).map(|_| r.random_range(0.5f32..1.5)).collect()).unwrap();
    let beta = random_tensor(&[c], r);
    params_with(vec![("bn.gamma", gamma), ("bn.beta", beta)])
}

/// Finite-difference checks of every differentiable graph primitive on five
/// random shapes. Returns one labeled result per primitive and shape.
pub fn primitive_gradient_checks(seed: u64) -> Vec<(String, GradCheck)> {
    let mut r = rng(seed);
    let mut out = Vec::new();
    let shapes = [[2, 3, 5, 5], [3, 2, 4, 6], [2, 4, 3, 3], [4, 1, 6, 4], [2, 2, 7, 7]];
    for (si, &[n, c, h, w]) in shapes.iter().enumerate() {
        let seed = seed + 1000 + si as u64;
        let x = random_tensor(&[n, c, h, w], &mut r);

        // dense conv with bias, stride 1 and 2
        for stride in [1usize, 2] {
            let params = params_with(vec![
                ("conv.weight", random_tensor(&[3, c, 3, 3], &mut r)),
                ("conv.bias", random_tensor(&[3], &mut r)),
            ]);
            let chk = check_gradients(&params, &[x.clone()], seed, |g, v| {
                let p = g.params();
                g.conv2d(
                    v[0],
                    p.view(p.id("conv.weight").unwrap()),
                    Some(p.view(p.id("conv.bias").unwrap())),
                    ConvSpec::same(3, stride),
                )
                .unwrap()
            });
            out.push((format!("conv s{stride} {si}"), chk));
        }
        // depthwise with a cropped kernel view
        let params = params_with(vec![("dw.weight", random_tensor(&[c + 1, 1, 5, 5], &mut r))]);
        let chk = check_gradients(&params, &[x.clone()], seed, |g, v| {
            let p = g.params();
            let view = p.view(p.id("dw.weight").unwrap()).sliced(c, 1, 3);
            g.conv2d(v[0], view, None, ConvSpec::depthwise(3, 1, c)).unwrap()
        });
        out.push((format!("depthwise {si}"), chk));

        let params = bn_params(c, &mut r);
        let chk = check_gradients(&params, &[x.clone()], seed, |g, v| {
            let p = g.params();
            g.batch_norm(
                v[0],
                p.view(p.id("bn.gamma").unwrap()),
                p.view(p.id("bn.beta").unwrap()),
                BnMode::Train,
                1e-5,
                None,
            )
            .unwrap()
        });
        out.push((format!("batchnorm {si}"), chk));

        let empty = ParamSet::new();
        // keep inputs away from the relu kink so central differences are valid
        let mut xk = x.clone();
        xk.data_mut()
            .iter_mut()
            .filter(|v| v.abs() < 0.01)
            .for_each(|v| *v = 0.01f32.copysign(*v));
        for (name, f) in [("relu", 0), ("hswish", 1), ("sigmoid", 2)] {
            let chk = check_gradients(&empty, &[xk.clone()], seed, |g, v| match f {
                0 => g.relu(v[0]),
                1 => g.hard_swish(v[0]),
                _ => g.sigmoid(v[0]),
            });
            out.push((format!("{name} {si}"), chk));
        }

        let s = random_tensor(&[n, c], &mut r);
        let chk = check_gradients(&empty, &[x.clone(), s], seed, |g, v| g.scale_channels(v[0], v[1]).unwrap());
        out.push((format!("scale_channels {si}"), chk));

        let y = random_tensor(&[n, c, h, w], &mut r);
        let chk = check_gradients(&empty, &[x.clone(), y], seed, |g, v| {
            let m = g.mul(v[0], v[1]).unwrap();
            g.add(m, v[0]).unwrap()
        });
        out.push((format!("mul/add {si}"), chk));

        let chk = check_gradients(&empty, &[x.clone()], seed, |g, v| {
            let p = g.zero_pad(v[0], 2).unwrap();
            let q = g.global_avg_pool(p).unwrap();
            g.scale(q, 1.5)
        });
        out.push((format!("pad/pool/scale {si}"), chk));

        let chk = check_gradients(&empty, &[x.clone()], seed, |g, v| {
            let m = g.mean(v[0]);
            let s = g.sum(v[0]);
            let s = g.scale(s, 0.25);
            g.add(m, s).unwrap()
        });
        out.push((format!("mean/sum {si}"), chk));

        // masks are redrawn from the same seed on every evaluation
        let chk = check_gradients(&empty, &[x.clone()], seed, |g, v| {
            let mut mr = rng(seed);
            let d = g.dropout(v[0], 0.3, true, &mut mr);
            g.drop_connect(d, 0.4, true, &mut mr)
        });
        out.push((format!("dropout/drop_connect {si}"), chk));

        let params = params_with(vec![
            ("fc.weight", random_tensor(&[4, c * h], &mut r)),
            ("fc.bias", random_tensor(&[4], &mut r)),
        ]);
        let flat = random_tensor(&[n, c * h], &mut r);
        let chk = check_gradients(&params, &[flat], seed, |g, v| {
            let p = g.params();
            g.linear(
                v[0],
                p.view(p.id("fc.weight").unwrap()).sliced(3, c * h, 1),
                Some(p.view(p.id("fc.bias").unwrap()).rows(3)),
            )
            .unwrap()
        });
        out.push((format!("linear {si}"), chk));

        // soft and weighted cross entropy against random probability targets
        let logits = random_tensor(&[n, c + 2], &mut r);
        let mut t: Vec<f32> = (0..n * (c + 2)).map(|_| r.random_range(0.0f32..1.0)).collect();
        for row in t.chunks_mut(c + 2) {
            let s: f32 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        let chk = check_gradients(&empty, &[logits.clone()], seed, |g, v| g.soft_cross_entropy(v[0], &t).unwrap());
        out.push((format!("soft_ce {si}"), chk));
        let weights: Vec<f32> = (0..n).map(|i| if i == 0 { 0.0 } else { r.random_range(0.5f32..2.0) }).collect();
        let chk = check_gradients(&empty, &[logits], seed, |g, v| {
            g.weighted_cross_entropy(v[0], &t, &weights).unwrap()
        });
        out.push((format!("weighted_ce {si}"), chk));
    }
    out
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

/// Randomizes BN affine parameters, biases and running statistics so that
/// eval-mode comparisons exercise every term.
pub fn perturb(net: &mut Supernet, seed: u64) {
    perturb_with_gamma(net, seed, 0.5..1.5);
}

pub fn perturb_with_gamma(net: &mut Supernet, seed: u64, gamma: std::ops::Range<f32>) {
    let mut r = rng(seed);
    let ids: Vec<_> = net.params.ids().collect();
    for id in ids {
        let name = net.params.name(id).to_string();
        if name.ends_with(".gamma") || name.ends_with(".beta") || name.ends_with(".bias") {
            let t = net.params.get_mut(id);
            for v in t.data_mut() {
                *v = if name.ends_with(".gamma") {
                    r.random_range(gamma.clone())
                } else {
                    r.random_range(-0.5..0.5)
                };
            }
        }
    }
    for rs in &mut net.running {
        rs.mean.iter_mut().for_each(|v| *v = r.random_range(-0.3..0.3));
        rs.var.iter_mut().for_each(|v| *v = r.random_range(0.5..2.0));
    }
}

/// Finite-difference checks of a one-stage SE profile with elastic kernel,
/// depth and expansion, small enough to perturb every weight, on six configs.
///
/// Central differences are wrong wherever an activation input sits within
/// the step of a kink. BN scales of at most 1 keep hard-swish inputs well
/// inside its kinks at -3 and 3, and the head uses hard-swish because relu
/// has a kink at 0 where pooled features concentrate.
pub fn elastic_block_checks(seed: u64) -> Vec<(String, GradCheck)> {
    let text = "name = tiny\nin_channels = 2\nresolutions = 5, 6\n[stem]\nwidth = 3\nkernel = 3\nstride = 1\n\
                [stage]\nwidth = 3, 4\ndepth = 1, 2\nkernel = 3, 5\nexpansion = 1, 2\nse = yes\n\
                stride = 1\nact = hswish\n[head]\nwidth = 5\nact = hswish\n";
    let s = load_profile(text).unwrap();
    let mut r = rng(seed);
    let mut configs = vec![s.anchor(Anchor::Max), s.anchor(Anchor::Min)];
    while configs.len() < 6 {
        configs.push(s.sample_uniform(&mut r));
    }
    let mut out = Vec::new();
    for (i, c) in configs.iter().enumerate() {
        let i = i as u64;
        let mut net = Supernet::init(&s, 3, seed + i).unwrap();
        perturb_with_gamma(&mut net, seed + 10 + i, 0.5..1.0);
        let x = random_tensor(&[3, 2, c.resolution, c.resolution], &mut r);
        let chk = check_gradients(&net.params, &[x], seed + 20 + i, |g, v| {
            net.forward(g, c, v[0], &mut Mode::Calibrate).unwrap()
        });
        out.push((c.encode(), chk));
    }
    out
}

/// Backward through one training-mode forward of `c`. Returns the gradient
/// elements outside the config's slices that are nonzero, and the count of
/// nonzero elements inside.
pub fn gradient_locality(net: &Supernet, c: &SubnetConfig, seed: u64) -> (Vec<String>, usize) {
    let mut r = rng(seed);
    let mut g = Graph::new(&net.params);
    let x = g.input(random_tensor(&[2, 3, c.resolution, c.resolution], &mut r));
    let mut dropout_rng = rng(seed ^ 0xd);
    let y = net.forward(&mut g, c, x, &mut Mode::Train { rng: &mut dropout_rng }).unwrap();
    let w = g.input(random_tensor(g.shape(y).to_vec().as_slice(), &mut r));
    let p = g.mul(y, w).unwrap();
    let loss = g.sum(p);
    let grads = g.backward(loss).unwrap();
    let slices = net.slice_rules(c).unwrap();
    let mut outside = Vec::new();
    let mut inside = 0;
    for (id, name, t) in net.params.iter() {
        let Some(gr) = grads.param(id) else { continue };
        let (inp, k) = match t.shape() {
            [_] => (1, 1),
            [_, i] => (*i, 1),
            [_, i, kk, _] => (*i, *kk),
            s => panic!("unexpected parameter shape {s:?}"),
        };
        let mine: Vec<_> = slices.iter().filter(|sl| sl.param == id).collect();
        for (flat, v) in gr.iter().enumerate() {
            let kx = flat % k;
            let ky = (flat / k) % k;
            let ii = (flat / (k * k)) % inp;
            let o = flat / (k * k * inp);
            if mine.iter().any(|sl| sl.contains(o, ii, ky, kx)) {
                inside += (*v != 0.0) as usize;
            } else if *v != 0.0 {
                outside.push(format!("{name}[{o},{ii},{ky},{kx}] = {v}"));
            }
        }
    }
    (outside, inside)
}

/// Linear scan: filter by budget, then sort by (rule key, cost, reversed key).
pub fn brute_force_select(
    ledger: &SampleLedger,
    cost: &BTreeMap<String, f64>,
    budget: f64,
    rule: Rule,
    exclude: bool,
) -> Option<String> {
    let mut feasible: Vec<(&String, &LedgerEntry)> = ledger
        .entries
        .iter()
        .filter(|(k, e)| !(exclude && e.anchor.is_some()) && cost[*k] <= budget)
        .collect();
    feasible.sort_by(|(ka, a), (kb, b)| {
        let primary = match rule {
            Rule::LastSampled => a.index.cmp(&b.index),
            Rule::FirstSampled => b.index.cmp(&a.index),
            Rule::ClosestToBudget => cost[*ka].total_cmp(&cost[*kb]),
        };
        primary.then(cost[*ka].total_cmp(&cost[*kb])).then(kb.cmp(ka))
    });
    feasible.last().map(|(k, _)| (*k).clone())
}

/// A random ledger over `space` with a small index range that forces ties,
/// together with its flops table. Every third trial collapses costs so the
/// key tie-break is exercised.
pub fn random_ledger(space: &SearchSpace, trial: usize, r: &mut impl Rng) -> (SampleLedger, BTreeMap<String, f64>) {
    let mut ledger = SampleLedger::new();
    let n = r.random_range(1..30);
    let mut cost = BTreeMap::new();
    for _ in 0..n {
        let c = space.sample_uniform(r);
        let key = c.encode();
        let index = r.random_range(1..8u64);
        let anchor = match r.random_range(0..10) {
            0 => Some(Anchor::Min),
            1 => Some(Anchor::Max),
            _ => None,
        };
        cost.insert(key.clone(), space.flops(&c).unwrap() as f64);
        ledger.entries.insert(key, LedgerEntry { index, first: 1, last: 1, anchor });
    }
    if trial % 3 == 0 {
        let v = *cost.values().next().unwrap();
        cost.values_mut().for_each(|c| *c = (*c).min(v));
    }
    (ledger, cost)
}
