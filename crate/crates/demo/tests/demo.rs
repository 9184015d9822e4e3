use tofa::space::{bundled_profile, Anchor};
use tofa::tensor::cosine_warmup_lr;
use tofa_demo::{layer_costs, lr_curve, profiles, sample_costs, simulate_selection};

#[test]
fn lists_the_bundled_profiles() {
    let names: Vec<String> = profiles().lines().map(String::from).collect();
    assert!(names.contains(&"desk-small".to_string()));
    assert!(names.contains(&"paper-table1".to_string()));
}

#[test]
fn sampled_costs_lie_between_the_anchors() {
    let text = sample_costs("desk-small", 50, 10, 3).ok().unwrap();
    let rows: Vec<Vec<&str>> = text.lines().map(|l| l.split(' ').collect()).collect();
    assert_eq!(rows.len(), 52);
    let macs = |r: &Vec<&str>| r[1].parse::<u64>().unwrap();
    let (lo, hi) = (macs(&rows[0]), macs(&rows[1]));
    assert!(rows[2..].iter().all(|r| r[0] == "sample" && (lo..=hi).contains(&macs(r))));
    let s = bundled_profile("desk-small").unwrap();
    assert_eq!(lo, s.cost(&s.anchor(Anchor::Min), 10).unwrap().macs);
}

#[test]
fn layer_costs_sum_to_the_total() {
    let s = bundled_profile("desk-small").unwrap();
    let key = s.anchor(Anchor::Max).encode();
    let text = layer_costs("desk-small", &key, 10).ok().unwrap();
    let mut sum = (0u64, 0u64);
    let mut total = None;
    for l in text.lines() {
        let f: Vec<&str> = l.split(' ').collect();
        let (m, p) = (f[1].parse::<u64>().unwrap(), f[2].parse::<u64>().unwrap());
        if f[0] == "total" {
            total = Some((m, p));
        } else {
            sum = (sum.0 + m, sum.1 + p);
        }
    }
    assert_eq!(Some(sum), total);
}

#[test]
fn lr_curve_follows_the_schedule() {
    let text = lr_curve(1000, 100, 0.05, 11);
    for l in text.lines() {
        let (it, lr) = l.split_once(' ').unwrap();
        let it: usize = it.parse().unwrap();
        assert_eq!(lr.parse::<f32>().unwrap(), cosine_warmup_lr(it, 1000, 100, 0.05));
    }
    assert_eq!(text.lines().count(), 11);
}

#[test]
fn simulated_selection_respects_budgets() {
    let text = simulate_selection("desk-small", 200, 4, 1).ok().unwrap();
    let rows: Vec<Vec<&str>> = text.lines().map(|l| l.split(' ').collect()).collect();
    assert_eq!(rows.len(), 12);
    for r in &rows {
        if r[2] != "-" {
            assert!(r[3].parse::<f64>().unwrap() <= r[0].parse::<f64>().unwrap());
        }
    }
    // the top rung admits everything but the excluded maxnet, so every rule
    // finds a subnet there
    assert!(rows[9..].iter().all(|r| r[2] != "-"));
}
