mod common;

use std::collections::{BTreeMap, HashSet};

use common::rng;
use num_bigint::BigUint;
use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use tofa::space::{bundled_profile, Anchor, SearchSpace, StageConfig, SubnetConfig};

fn desk() -> SearchSpace {
    bundled_profile("desk-small").unwrap()
}

/// Every searched dimension as (name, choices, reader).
fn dimensions(s: &SearchSpace) -> Vec<(String, Vec<usize>, Box<dyn Fn(&SubnetConfig) -> usize>)> {
    let mut dims: Vec<(String, Vec<usize>, Box<dyn Fn(&SubnetConfig) -> usize>)> = vec![
        ("resolution".into(), s.resolutions.clone(), Box::new(|c| c.resolution)),
        ("stem".into(), s.stem.width_choices.clone(), Box::new(|c| c.stem_width)),
        ("head".into(), s.head.width_choices.clone(), Box::new(|c| c.head_width)),
    ];
    for (i, st) in s.stages.iter().enumerate() {
        dims.push((format!("s{i}.width"), st.width_choices.clone(), Box::new(move |c| c.stages[i].width)));
        dims.push((format!("s{i}.depth"), st.depth_choices.clone(), Box::new(move |c| c.stages[i].depth)));
        dims.push((format!("s{i}.kernel"), st.kernel_choices.clone(), Box::new(move |c| c.stages[i].kernel)));
        dims.push((
            format!("s{i}.expansion"),
            st.expansion_choices.clone(),
            Box::new(move |c| c.stages[i].expansion),
        ));
    }
    dims
}

#[test]
fn uniform_sampling_passes_chi_square_per_dimension() {
    let s = desk();
    let mut r = rng(2024);
    let samples: Vec<SubnetConfig> = (0..10_000).map(|_| s.sample_uniform(&mut r)).collect();
    for (name, choices, read) in dimensions(&s) {
        let k = choices.len();
        if k < 2 {
            assert!(samples.iter().all(|c| read(c) == choices[0]));
            continue;
        }
        let mut counts = BTreeMap::new();
        for c in &samples {
            *counts.entry(read(c)).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), k, "{name}: some choice never drawn");
        let expected = samples.len() as f64 / k as f64;
        let stat: f64 = counts.values().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
        let critical = ChiSquared::new((k - 1) as f64).unwrap().inverse_cdf(0.99);
        assert!(stat < critical, "{name}: chi2 {stat:.2} >= {critical:.2}");
    }
}

#[test]
fn seeded_sampling_is_reproducible() {
    let s = desk();
    let a: Vec<_> = (0..5).scan(rng(9), |r, _| Some(s.sample_uniform(r))).collect();
    let b: Vec<_> = (0..5).scan(rng(9), |r, _| Some(s.sample_uniform(r))).collect();
    assert_eq!(a, b);
}

#[test]
fn flops_are_bracketed_by_the_anchors() {
    for s in [desk(), bundled_profile("paper-table1").unwrap()] {
        let lo = s.flops(&s.anchor(Anchor::Min)).unwrap();
        let hi = s.flops(&s.anchor(Anchor::Max)).unwrap();
        let mut r = rng(3);
        for _ in 0..1000 {
            let f = s.flops(&s.sample_uniform(&mut r)).unwrap();
            assert!(lo <= f && f <= hi, "{}: {lo} <= {f} <= {hi}", s.name);
        }
    }
}

fn enumerate(s: &SearchSpace) -> Vec<SubnetConfig> {
    let mut stage_opts: Vec<Vec<StageConfig>> = Vec::new();
    for st in &s.stages {
        let mut v = Vec::new();
        for &width in &st.width_choices {
            for &depth in &st.depth_choices {
                for &kernel in &st.kernel_choices {
                    for &expansion in &st.expansion_choices {
                        v.push(StageConfig { width, depth, kernel, expansion });
                    }
                }
            }
        }
        stage_opts.push(v);
    }
    let mut stacks: Vec<Vec<StageConfig>> = vec![vec![]];
    for opts in &stage_opts {
        stacks = stacks
            .iter()
            .flat_map(|p| opts.iter().map(move |o| [p.clone(), vec![o.clone()]].concat()))
            .collect();
    }
    let mut out = Vec::new();
    for &resolution in &s.resolutions {
        for &stem_width in &s.stem.width_choices {
            for &head_width in &s.head.width_choices {
                for st in &stacks {
                    out.push(SubnetConfig { resolution, stem_width, stages: st.clone(), head_width });
                }
            }
        }
    }
    out
}

#[test]
fn truncated_space_count_matches_enumeration() {
    let mut s = desk();
    s.stages.truncate(2);
    let all = enumerate(&s);
    let keys: HashSet<String> = all.iter().map(SubnetConfig::encode).collect();
    assert_eq!(keys.len(), all.len());
    assert!(all.iter().all(|c| s.check(c).is_ok()));
    assert_eq!(s.count_configs(), BigUint::from(all.len()));
    // 3 resolutions, stage 1 has 8 options, stage 2 has 36
    assert_eq!(all.len(), 3 * 8 * 36);
}

#[test]
fn table_space_choice_sets_and_anchors() {
    let s = bundled_profile("paper-table1").unwrap();
    assert_eq!(s.stages.len(), 7);
    assert_eq!(s.stages[4].depth_choices, vec![3, 4, 5, 6, 7, 8]);
    assert_eq!(s.stages[1].expansion_choices, vec![2, 4, 6]);
    assert!(!s.stages[1].use_se);
    assert_eq!(s.resolutions, vec![192, 224, 256, 288, 320]);
    let max = s.anchor(Anchor::Max);
    assert_eq!((max.resolution, max.stages[4].depth, max.stages[4].expansion), (320, 8, 6));
    let min = s.anchor(Anchor::Min);
    assert_eq!((min.resolution, min.stages[0].depth, min.stages[0].kernel), (192, 1, 3));
    // 5 * 2 * 8 * 36 * 48 * 48 * 72 * 72 * 24 * 2, about 1.65e12
    assert_eq!(s.count_configs(), BigUint::from(1_651_129_712_640u64));
}

#[test]
fn encode_is_injective_over_10k_samples() {
    let s = desk();
    let mut r = rng(17);
    let mut seen: BTreeMap<String, SubnetConfig> = BTreeMap::new();
    for _ in 0..10_000 {
        let c = s.sample_uniform(&mut r);
        if let Some(prev) = seen.insert(c.encode(), c.clone()) {
            assert_eq!(prev, c);
        }
    }
}

/// Moves one dimension of `c` to its next larger choice, if any.
fn bump(s: &SearchSpace, c: &SubnetConfig, dim: usize) -> Option<SubnetConfig> {
    let next = |choices: &[usize], v: usize| choices.iter().copied().find(|&x| x > v);
    let mut d = c.clone();
    match dim {
        0 => d.resolution = next(&s.resolutions, c.resolution)?,
        1 => d.stem_width = next(&s.stem.width_choices, c.stem_width)?,
        2 => d.head_width = next(&s.head.width_choices, c.head_width)?,
        _ => {
            let i = (dim - 3) / 4;
            let (st, sc) = (&s.stages[i], &mut d.stages[i]);
            match (dim - 3) % 4 {
                0 => sc.width = next(&st.width_choices, sc.width)?,
                1 => sc.depth = next(&st.depth_choices, sc.depth)?,
                2 => sc.kernel = next(&st.kernel_choices, sc.kernel)?,
                _ => sc.expansion = next(&st.expansion_choices, sc.expansion)?,
            }
        }
    }
    Some(d)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 256, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn decode_inverts_encode(seed in any::<u64>(), table in any::<bool>()) {
        let s = if table { bundled_profile("paper-table1").unwrap() } else { desk() };
        let c = s.sample_uniform(&mut rng(seed));
        prop_assert_eq!(s.decode(&c.encode()).unwrap(), c);
    }

    #[test]
    fn growing_one_dimension_never_lowers_cost(seed in any::<u64>(), dim in 0usize..64, table in any::<bool>()) {
        let s = if table { bundled_profile("paper-table1").unwrap() } else { desk() };
        let dim = dim % (3 + 4 * s.stages.len());
        let c = s.sample_uniform(&mut rng(seed));
        if let Some(d) = bump(&s, &c, dim) {
            prop_assert!(s.flops(&d).unwrap() >= s.flops(&c).unwrap());
            prop_assert!(s.param_count(&d, 10).unwrap() >= s.param_count(&c, 10).unwrap());
        }
    }
}

#[test]
fn tampered_keys_are_rejected() {
    let s = desk();
    let key = s.anchor(Anchor::Max).encode();
    let bad = key.replacen("k5", "k4", 1);
    assert!(matches!(s.decode(&bad), Err(tofa::Error::Decode(_))));
    assert!(s.decode("r32-garbage").is_err());
}
