mod common;

use common::{max_abs_diff, naive_conv2d, perturb, random_tensor, rng};
use rand::Rng;
use tofa::space::{bundled_profile, SearchSpace, SubnetConfig};
use tofa::supernet::{Mode, Supernet};
use tofa::tensor::{Graph, Tensor};

fn desk() -> SearchSpace {
    bundled_profile("desk-small").unwrap()
}

#[test]
fn eval_forward_matches_materialized_network_on_50_configs() {
    let s = desk();
    let mut net = Supernet::init(&s, 5, 11).unwrap();
    perturb(&mut net, 12);
    let mut r = rng(13);
    let mut worst = 0.0f32;
    for i in 0..50 {
        let c = if i == 0 { net.minnet() } else if i == 1 { net.maxnet() } else { s.sample_uniform(&mut r) };
        let x = random_tensor(&[2, 3, c.resolution, c.resolution], &mut r);
        let elastic = net.subnet_forward(&c, &x, Mode::Eval).unwrap();
        let standalone = net.materialize(&c).unwrap().forward(&x).unwrap();
        worst = worst.max(max_abs_diff(elastic.data(), standalone.data()));
    }
    assert!(worst < 1e-5, "max abs logit diff {worst}");
}

#[test]
fn materialized_copy_is_independent_and_counts_match_cost_model() {
    let s = desk();
    let net = Supernet::init(&s, 7, 3).unwrap();
    let max = net.maxnet();
    let mut sn = net.materialize(&max).unwrap();
    assert_eq!(sn.param_count(), s.param_count(&max, 7).unwrap());
    let mut r = rng(5);
    for _ in 0..10 {
        let c = s.sample_uniform(&mut r);
        assert_eq!(net.materialize(&c).unwrap().param_count(), s.param_count(&c, 7).unwrap());
    }
    let before = net.clone();
    sn.stem.weight.iter_mut().for_each(|v| *v += 1.0);
    assert_eq!(net, before);
}

#[test]
fn minnet_matches_materialized_on_10_batches() {
    let s = desk();
    let mut net = Supernet::init(&s, 4, 21).unwrap();
    perturb(&mut net, 22);
    let min = net.minnet();
    let sn = net.materialize(&min).unwrap();
    let mut r = rng(23);
    for _ in 0..10 {
        let x = random_tensor(&[3, 3, min.resolution, min.resolution], &mut r);
        let a = net.subnet_forward(&min, &x, Mode::Eval).unwrap();
        assert!(max_abs_diff(a.data(), sn.forward(&x).unwrap().data()) < 1e-5);
    }
}

#[test]
fn gradients_vanish_outside_the_active_slices() {
    let s = desk();
    let net = Supernet::init(&s, 4, 31).unwrap();
    let mut r = rng(32);
    for i in 0..20 {
        let c = if i == 0 { net.minnet() } else { s.sample_uniform(&mut r) };
        let (outside, inside) = common::gradient_locality(&net, &c, 100 + i);
        assert!(outside.is_empty(), "config {i}: {}", outside[0]);
        assert!(inside > 0);
    }
}

fn lower(choices: &[usize], v: usize, r: &mut impl Rng) -> usize {
    let opts: Vec<usize> = choices.iter().copied().filter(|&x| x <= v).collect();
    opts[r.random_range(0..opts.len())]
}

fn shrink(c: &SubnetConfig, s: &SearchSpace, r: &mut impl Rng) -> SubnetConfig {
    let mut d = c.clone();
    d.resolution = lower(&s.resolutions, c.resolution, r);
    d.stem_width = lower(&s.stem.width_choices, c.stem_width, r);
    d.head_width = lower(&s.head.width_choices, c.head_width, r);
    for (st, spec) in d.stages.iter_mut().zip(&s.stages) {
        st.width = lower(&spec.width_choices, st.width, r);
        st.depth = lower(&spec.depth_choices, st.depth, r);
        st.kernel = lower(&spec.kernel_choices, st.kernel, r);
        st.expansion = lower(&spec.expansion_choices, st.expansion, r);
    }
    d
}

#[test]
fn dominated_configs_read_nested_slices() {
    let s = desk();
    let net = Supernet::init(&s, 4, 41).unwrap();
    let mut r = rng(42);
    for _ in 0..100 {
        let big = s.sample_uniform(&mut r);
        let small = shrink(&big, &s, &mut r);
        assert!(big.dominates(&small));
        let outer = net.slice_rules(&big).unwrap();
        for sl in net.slice_rules(&small).unwrap() {
            assert!(
                outer.iter().any(|o| o.param == sl.param && sl.is_subset_of(o)),
                "{} not nested",
                net.params.name(sl.param)
            );
        }
    }
}

#[test]
fn executed_macs_equal_the_cost_model() {
    let s = desk();
    let net = Supernet::init(&s, 6, 51).unwrap();
    let mut r = rng(52);
    for i in 0..20 {
        let c = if i == 0 { net.maxnet() } else { s.sample_uniform(&mut r) };
        let mut g = Graph::inference(&net.params);
        let x = g.input(random_tensor(&[1, 3, c.resolution, c.resolution], &mut r));
        net.forward(&mut g, &c, x, &mut Mode::Eval).unwrap();
        let classifier = (c.head_width * 6) as u64;
        assert_eq!(g.macs(), s.flops(&c).unwrap() + classifier);
        assert_eq!(g.macs(), s.cost(&c, 6).unwrap().macs);
    }
}

#[test]
fn elastic_block_passes_finite_differences() {
    for (key, chk) in common::elastic_block_checks(60) {
        assert!(chk.rel_err < 1e-3, "config {key}: {chk:?}");
    }
}

#[test]
fn recalibration_reproduces_direct_statistics() {
    let s = desk();
    let mut net = Supernet::init(&s, 4, 91).unwrap();
    let max = net.maxnet();
    let res = max.resolution;
    let mut r = rng(92);
    let batches: Vec<Tensor> = (0..4).map(|_| random_tensor(&[8, 3, res, res], &mut r)).collect();
    let params_before = net.params.clone();
    net.bn_recalibrate(&max, &batches, 4).unwrap();
    assert_eq!(net.params, params_before);

    // stem statistics straight from a direct-loop convolution over all 32 images
    let stem_w = net.params.get(net.stem).data().to_vec();
    let cout = net.params.get(net.stem).shape()[0];
    let mut sum = vec![0.0f64; cout];
    let mut sq = vec![0.0f64; cout];
    let mut count = 0usize;
    for b in &batches {
        let (y, [n, c, oh, ow]) =
            naive_conv2d(b.data(), [8, 3, res, res], &stem_w, cout, 3, None, 2, 1, 1);
        for bi in 0..n {
            for ch in 0..c {
                for v in &y[(bi * c + ch) * oh * ow..(bi * c + ch + 1) * oh * ow] {
                    sum[ch] += *v as f64;
                    sq[ch] += (*v as f64).powi(2);
                }
            }
        }
        count += n * oh * ow;
    }
    let rs = &net.running[net.stem_bn.stats];
    for ch in 0..cout {
        let mean = sum[ch] / count as f64;
        let var = (sq[ch] - count as f64 * mean * mean) / (count - 1) as f64;
        assert!((rs.mean[ch] as f64 - mean).abs() < 1e-4, "mean {ch}");
        assert!((rs.var[ch] as f64 - var).abs() < 1e-3 * var.max(1.0), "var {ch}");
    }
}

#[test]
fn initial_loss_is_near_log_classes() {
    let s = desk();
    for classes in [4usize, 10] {
        let net = Supernet::init(&s, classes, 101).unwrap();
        let max = net.maxnet();
        let mut r = rng(102);
        let x = random_tensor(&[16, 3, max.resolution, max.resolution], &mut r);
        let labels: Vec<usize> = (0..16).map(|i| i % classes).collect();
        let mut g = Graph::new(&net.params);
        let xv = g.input(x);
        let mut dr = rng(103);
        let y = net.forward(&mut g, &max, xv, &mut Mode::Train { rng: &mut dr }).unwrap();
        let l = tofa::losses::labeled_loss(&mut g, y, &labels, 0.0).unwrap();
        let ln_c = (classes as f32).ln();
        assert!((g.value(l)[0] - ln_c).abs() < 0.1 * ln_c, "loss {}", g.value(l)[0]);
    }
}
