//! The architecture space: per-stage choice sets, subnet configurations,
//! uniform sampling, anchors, stable string keys, and the cost model.

mod cost;
mod profile;

pub use cost::{conv_out, se_reduced, Cost, LayerCost};
pub use profile::{bundled_profile, load_profile, BUNDLED_PROFILES};

use std::fmt;

use num_bigint::BigUint;
use rand::seq::IndexedRandom;
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    HardSwish,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::HardSwish => "hswish",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StemSpec {
    pub width_choices: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub act: Activation,
}

/// One searched stage of inverted-residual layers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageSpec {
    pub width_choices: Vec<usize>,
    pub depth_choices: Vec<usize>,
    pub kernel_choices: Vec<usize>,
    pub expansion_choices: Vec<usize>,
    pub use_se: bool,
    /// Applied by the first layer of the stage only.
    pub stride: usize,
    pub act: Activation,
}

impl StageSpec {
    pub fn max_width(&self) -> usize {
        *self.width_choices.last().unwrap()
    }

    pub fn max_depth(&self) -> usize {
        *self.depth_choices.last().unwrap()
    }

    pub fn max_kernel(&self) -> usize {
        *self.kernel_choices.last().unwrap()
    }

    pub fn max_expansion(&self) -> usize {
        *self.expansion_choices.last().unwrap()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadSpec {
    pub width_choices: Vec<usize>,
    pub act: Activation,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SearchSpace {
    pub name: String,
    pub in_channels: usize,
    pub resolutions: Vec<usize>,
    pub stem: StemSpec,
    pub stages: Vec<StageSpec>,
    pub head: HeadSpec,
    /// Admissible MAC range for subnets, classifier excluded.
    pub flops_min: Option<u64>,
    pub flops_max: Option<u64>,
    /// Source text the space was parsed from; stored in checkpoints.
    pub profile_text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StageConfig {
    pub width: usize,
    pub depth: usize,
    pub kernel: usize,
    pub expansion: usize,
}

/// One point of the architecture space.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SubnetConfig {
    pub resolution: usize,
    pub stem_width: usize,
    pub stages: Vec<StageConfig>,
    pub head_width: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Anchor {
    Min,
    Max,
}

fn pick(choices: &[usize], anchor: Anchor) -> usize {
    match anchor {
        Anchor::Min => choices[0],
        Anchor::Max => *choices.last().unwrap(),
    }
}

fn check_choices(what: &str, choices: &[usize]) -> Result<()> {
    if choices.is_empty() {
        return Err(Error::Validation(format!("{what}: empty choice list")));
    }
    if choices.contains(&0) {
        return Err(Error::Validation(format!("{what}: choices must be positive")));
    }
    if choices.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Validation(format!(
            "{what}: choices {choices:?} are not strictly increasing"
        )));
    }
    Ok(())
}

fn set_string(choices: &[usize]) -> String {
    let items: Vec<String> = choices.iter().map(|c| c.to_string()).collect();
    format!("{{{}}}", items.join(","))
}

impl SearchSpace {
    /// Structural checks; cost bounds are checked separately by
    /// [`SearchSpace::check_flops_bounds`].
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::Validation("in_channels must be positive".into()));
        }
        check_choices("resolutions", &self.resolutions)?;
        check_choices("stem width", &self.stem.width_choices)?;
        if self.stem.kernel % 2 == 0 {
            return Err(Error::Validation("stem kernel must be odd".into()));
        }
        if !(1..=2).contains(&self.stem.stride) {
            return Err(Error::Validation("stem stride must be 1 or 2".into()));
        }
        if self.stages.is_empty() {
            return Err(Error::Validation("profile defines no stages".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            let name = format!("stage {}", i + 1);
            check_choices(&format!("{name} width"), &s.width_choices)?;
            check_choices(&format!("{name} depth"), &s.depth_choices)?;
            check_choices(&format!("{name} kernel"), &s.kernel_choices)?;
            check_choices(&format!("{name} expansion"), &s.expansion_choices)?;
            if s.kernel_choices.iter().any(|k| k % 2 == 0) {
                return Err(Error::Validation(format!("{name}: kernel choices must be odd")));
            }
            if !(1..=2).contains(&s.stride) {
                return Err(Error::Validation(format!("{name}: stride must be 1 or 2")));
            }
        }
        check_choices("head width", &self.head.width_choices)?;
        Ok(())
    }

    /// Checks `flops(minnet) >= flops_min` and `flops(maxnet) <= flops_max`.
    pub fn check_flops_bounds(&self) -> Result<()> {
        let lo = self.flops(&self.anchor(Anchor::Min))?;
        let hi = self.flops(&self.anchor(Anchor::Max))?;
        if let Some(min) = self.flops_min {
            if lo < min {
                return Err(Error::Validation(format!(
                    "minnet uses {lo} MACs, below flops_min {min}"
                )));
            }
        }
        if let Some(max) = self.flops_max {
            if hi > max {
                return Err(Error::Validation(format!(
                    "maxnet uses {hi} MACs, above flops_max {max}"
                )));
            }
        }
        Ok(())
    }

    pub fn max_resolution(&self) -> usize {
        *self.resolutions.last().unwrap()
    }

    /// Smallest (`Min`) or largest (`Max`) element of every choice set.
    pub fn anchor(&self, which: Anchor) -> SubnetConfig {
        SubnetConfig {
            resolution: pick(&self.resolutions, which),
            stem_width: pick(&self.stem.width_choices, which),
            stages: self
                .stages
                .iter()
                .map(|s| StageConfig {
                    width: pick(&s.width_choices, which),
                    depth: pick(&s.depth_choices, which),
                    kernel: pick(&s.kernel_choices, which),
                    expansion: pick(&s.expansion_choices, which),
                })
                .collect(),
            head_width: pick(&self.head.width_choices, which),
        }
    }

    /// Independent uniform draw for every dimension.
    pub fn sample_uniform(&self, rng: &mut impl Rng) -> SubnetConfig {
        let mut draw = |c: &[usize]| *c.choose(rng).expect("choice lists are non-empty");
        let resolution = draw(&self.resolutions);
        let stem_width = draw(&self.stem.width_choices);
        let stages = self
            .stages
            .iter()
            .map(|s| StageConfig {
                width: draw(&s.width_choices),
                depth: draw(&s.depth_choices),
                kernel: draw(&s.kernel_choices),
                expansion: draw(&s.expansion_choices),
            })
            .collect();
        let head_width = draw(&self.head.width_choices);
        SubnetConfig {
            resolution,
            stem_width,
            stages,
            head_width,
        }
    }

    /// Checks that every field of `config` comes from this space.
    pub fn check(&self, config: &SubnetConfig) -> Result<()> {
        let member = |what: &str, v: usize, c: &[usize]| -> Result<()> {
            if c.contains(&v) {
                Ok(())
            } else {
                Err(Error::Validation(format!(
                    "{what}={v} not in {}",
                    set_string(c)
                )))
            }
        };
        member("resolution", config.resolution, &self.resolutions)?;
        member("stem width", config.stem_width, &self.stem.width_choices)?;
        if config.stages.len() != self.stages.len() {
            return Err(Error::Validation(format!(
                "config has {} stages, space has {}",
                config.stages.len(),
                self.stages.len()
            )));
        }
        for (i, (c, s)) in config.stages.iter().zip(&self.stages).enumerate() {
            let n = i + 1;
            member(&format!("stage {n} width"), c.width, &s.width_choices)?;
            member(&format!("stage {n} depth"), c.depth, &s.depth_choices)?;
            member(&format!("stage {n} kernel"), c.kernel, &s.kernel_choices)?;
            member(&format!("stage {n} expansion"), c.expansion, &s.expansion_choices)?;
        }
        member("head width", config.head_width, &self.head.width_choices)
    }

    /// Number of distinct configurations: the product of all choice-set
    /// sizes.
    pub fn count_configs(&self) -> BigUint {
        let mut total = BigUint::from(self.resolutions.len());
        total *= self.stem.width_choices.len();
        for s in &self.stages {
            total *= s.width_choices.len();
            total *= s.depth_choices.len();
            total *= s.kernel_choices.len();
            total *= s.expansion_choices.len();
        }
        total *= self.head.width_choices.len();
        total
    }

    /// Decodes a key produced by [`SubnetConfig::encode`] and validates it
    /// against this space.
    pub fn decode(&self, key: &str) -> Result<SubnetConfig> {
        let config = parse_key(key)?;
        self.check(&config).map_err(|e| match e {
            Error::Validation(msg) => Error::Decode(format!("{key}: {msg}")),
            other => other,
        })?;
        Ok(config)
    }
}

impl SubnetConfig {
    /// Stable, shell- and filename-safe key, e.g.
    /// `r32-s8-w12d2k5e1-w24d3k5e6-w40d3k5e6-h64`.
    pub fn encode(&self) -> String {
        let mut out = format!("r{}-s{}", self.resolution, self.stem_width);
        for s in &self.stages {
            out.push_str(&format!("-w{}d{}k{}e{}", s.width, s.depth, s.kernel, s.expansion));
        }
        out.push_str(&format!("-h{}", self.head_width));
        out
    }

    /// True when every dimension of `self` is >= the matching dimension of
    /// `other`.
    pub fn dominates(&self, other: &SubnetConfig) -> bool {
        self.resolution >= other.resolution
            && self.stem_width >= other.stem_width
            && self.head_width >= other.head_width
            && self.stages.len() == other.stages.len()
            && self.stages.iter().zip(&other.stages).all(|(a, b)| {
                a.width >= b.width
                    && a.depth >= b.depth
                    && a.kernel >= b.kernel
                    && a.expansion >= b.expansion
            })
    }
}

impl fmt::Display for SubnetConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.encode())
    }
}

fn parse_field(key: &str, token: &str, prefix: char, what: &str) -> Result<usize> {
    token
        .strip_prefix(prefix)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Decode(format!("{key}: bad {what} field `{token}`")))
}

fn parse_key(key: &str) -> Result<SubnetConfig> {
    let parts: Vec<&str> = key.trim().split('-').collect();
    if parts.len() < 4 {
        return Err(Error::Decode(format!("{key}: too few fields")));
    }
    let resolution = parse_field(key, parts[0], 'r', "resolution")?;
    let stem_width = parse_field(key, parts[1], 's', "stem")?;
    let head_width = parse_field(key, parts[parts.len() - 1], 'h', "head")?;
    let mut stages = Vec::new();
    for (i, tok) in parts[2..parts.len() - 1].iter().enumerate() {
        let bad = || Error::Decode(format!("{key}: stage {} field `{tok}` is malformed", i + 1));
        let mut nums = [0usize; 4];
        let mut rest = *tok;
        for (slot, tag) in nums.iter_mut().zip(['w', 'd', 'k', 'e']) {
            rest = rest.strip_prefix(tag).ok_or_else(bad)?;
            let end = rest.find(|c: char| !c.is_ascii_digit()).unwrap_or(rest.len());
            *slot = rest[..end].parse().map_err(|_| bad())?;
            rest = &rest[end..];
        }
        if !rest.is_empty() {
            return Err(bad());
        }
        stages.push(StageConfig {
            width: nums[0],
            depth: nums[1],
            kernel: nums[2],
            expansion: nums[3],
        });
    }
    Ok(SubnetConfig {
        resolution,
        stem_width,
        stages,
        head_width,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn singleton_space() -> SearchSpace {
        load_profile(
            "resolutions = 8\n[stem]\nwidth = 4\nkernel = 3\nstride = 1\n\
             [stage]\nwidth = 4\ndepth = 1\nkernel = 3\nexpansion = 2\nse = no\nstride = 1\n\
             [head]\nwidth = 8\n",
        )
        .unwrap()
    }

    #[test]
    fn singleton_space_has_one_config() {
        let s = singleton_space();
        assert_eq!(s.count_configs(), BigUint::from(1u32));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(s.sample_uniform(&mut rng), s.anchor(Anchor::Min));
        assert_eq!(s.anchor(Anchor::Min), s.anchor(Anchor::Max));
    }

    #[test]
    fn key_roundtrip_and_tamper() {
        let s = bundled_profile("desk-small").unwrap();
        let max = s.anchor(Anchor::Max);
        assert_eq!(max.encode(), "r32-s8-w12d2k5e1-w24d3k5e6-w40d3k5e6-h64");
        assert_eq!(s.decode(&max.encode()).unwrap(), max);
        let tampered = max.encode().replace("k5e6-w40", "k4e6-w40");
        let err = s.decode(&tampered).unwrap_err();
        assert!(matches!(err, Error::Decode(ref m) if m.contains("kernel=4")), "{err}");
        assert!(matches!(s.decode("r32-s8-h64"), Err(Error::Decode(_))));
        assert!(matches!(s.decode("garbage"), Err(Error::Decode(_))));
        assert!(matches!(
            s.decode("r32-s8-w12d2k5x1-w24d3k5e6-w40d3k5e6-h64"),
            Err(Error::Decode(_))
        ));
    }

    #[test]
    fn dominance_is_reflexive_and_anchored() {
        let s = bundled_profile("desk-small").unwrap();
        let (lo, hi) = (s.anchor(Anchor::Min), s.anchor(Anchor::Max));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let c = s.sample_uniform(&mut rng);
            assert!(c.dominates(&c));
            assert!(hi.dominates(&c));
            assert!(c.dominates(&lo));
        }
    }
}
