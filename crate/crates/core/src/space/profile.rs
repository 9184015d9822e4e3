//! Text format for search-space profiles.
//!
//! ```text
//! name = desk-small
//! resolutions = 16, 24, 32
//! [stem]
//! width = 8
//! [stage]
//! width = 8, 12
//! depth = 1, 2
//! ...
//! [head]
//! width = 64
//! ```
//!
//! `#` starts a comment. Every `[stage]` block opens a new stage.

use super::{Activation, HeadSpec, SearchSpace, StageSpec, StemSpec};
use crate::error::{Error, Result};

/// Profiles shipped with the crate, by name.
pub const BUNDLED_PROFILES: &[(&str, &str)] = &[
    ("desk-small", include_str!("../../profiles/desk-small")),
    ("desk-native", include_str!("../../profiles/desk-native")),
    ("paper-table1", include_str!("../../profiles/paper-table1")),
];

pub fn bundled_profile(name: &str) -> Result<SearchSpace> {
    let text = BUNDLED_PROFILES
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| *t)
        .ok_or_else(|| {
            let known: Vec<&str> = BUNDLED_PROFILES.iter().map(|(n, _)| *n).collect();
            Error::Config(format!("unknown profile `{name}` (bundled: {})", known.join(", ")))
        })?;
    load_profile(text)
}

#[derive(Default)]
struct Block {
    line: usize,
    width: Option<Vec<usize>>,
    depth: Option<Vec<usize>>,
    kernel: Option<Vec<usize>>,
    expansion: Option<Vec<usize>>,
    se: Option<bool>,
    stride: Option<usize>,
    act: Option<Activation>,
}

#[derive(Clone, Copy, PartialEq)]
enum Section {
    Top,
    Stem,
    Stage,
    Head,
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}

fn parse_list(line: usize, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| parse_err(line, format!("`{}` is not a non-negative integer", v.trim())))
        })
        .collect()
}

fn parse_one(line: usize, value: &str) -> Result<usize> {
    let list = parse_list(line, value)?;
    match list.as_slice() {
        [v] => Ok(*v),
        _ => Err(parse_err(line, format!("expected a single integer, got `{value}`"))),
    }
}

fn parse_bool(line: usize, value: &str) -> Result<bool> {
    match value {
        "yes" | "true" | "1" => Ok(true),
        "no" | "false" | "0" => Ok(false),
        _ => Err(parse_err(line, format!("expected yes/no, got `{value}`"))),
    }
}

fn parse_act(line: usize, value: &str) -> Result<Activation> {
    match value {
        "relu" => Ok(Activation::Relu),
        "hswish" | "hard_swish" => Ok(Activation::HardSwish),
        _ => Err(parse_err(line, format!("unknown activation `{value}`"))),
    }
}

impl Block {
    fn set(&mut self, line: usize, key: &str, value: &str, section: Section) -> Result<()> {
        let allowed: &[&str] = match section {
            Section::Stem => &["width", "kernel", "stride", "act"],
            Section::Stage => &["width", "depth", "kernel", "expansion", "se", "stride", "act"],
            Section::Head => &["width", "act"],
            Section::Top => unreachable!(),
        };
        if !allowed.contains(&key) {
            return Err(parse_err(line, format!("unknown key `{key}` in this section")));
        }
        match key {
            "width" => self.width = Some(parse_list(line, value)?),
            "depth" => self.depth = Some(parse_list(line, value)?),
            "kernel" => self.kernel = Some(parse_list(line, value)?),
            "expansion" => self.expansion = Some(parse_list(line, value)?),
            "se" => self.se = Some(parse_bool(line, value)?),
            "stride" => self.stride = Some(parse_one(line, value)?),
            "act" => self.act = Some(parse_act(line, value)?),
            _ => unreachable!(),
        }
        Ok(())
    }

    fn require<T: Clone>(field: &Option<T>, what: &str, ctx: &str) -> Result<T> {
        field
            .clone()
            .ok_or_else(|| Error::Validation(format!("{ctx}: missing `{what}`")))
    }
}

/// Parses and validates a profile.
pub fn load_profile(text: &str) -> Result<SearchSpace> {
    let mut name = String::from("custom");
    let mut in_channels = 3;
    let mut resolutions = None;
    let mut flops_min = None;
    let mut flops_max = None;
    let mut stem: Option<Block> = None;
    let mut head: Option<Block> = None;
    let mut stages: Vec<Block> = Vec::new();
    let mut section = Section::Top;

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap().trim();
        if content.is_empty() {
            continue;
        }
        if let Some(header) = content.strip_prefix('[') {
            let header = header
                .strip_suffix(']')
                .ok_or_else(|| parse_err(line, "unterminated section header"))?
                .trim();
            section = match header {
                "stem" if stem.is_none() => Section::Stem,
                "head" if head.is_none() => Section::Head,
                "stem" | "head" => return Err(parse_err(line, format!("duplicate [{header}] section"))),
                "stage" => Section::Stage,
                other => return Err(parse_err(line, format!("unknown section [{other}]"))),
            };
            let block = Block {
                line,
                ..Block::default()
            };
            match section {
                Section::Stem => stem = Some(block),
                Section::Head => head = Some(block),
                Section::Stage => stages.push(block),
                Section::Top => unreachable!(),
            }
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| parse_err(line, format!("expected `key = value`, got `{content}`")))?;
        let (key, value) = (key.trim(), value.trim());
        if value.is_empty() {
            return Err(parse_err(line, format!("`{key}` has no value")));
        }
        match section {
            Section::Top => match key {
                "name" => name = value.to_string(),
                "in_channels" => in_channels = parse_one(line, value)?,
                "resolutions" => resolutions = Some(parse_list(line, value)?),
                "flops_min" => flops_min = Some(parse_one(line, value)? as u64),
                "flops_max" => flops_max = Some(parse_one(line, value)? as u64),
                _ => return Err(parse_err(line, format!("unknown top-level key `{key}`"))),
            },
            Section::Stem => stem.as_mut().unwrap().set(line, key, value, section)?,
            Section::Head => head.as_mut().unwrap().set(line, key, value, section)?,
            Section::Stage => stages.last_mut().unwrap().set(line, key, value, section)?,
        }
    }

    let resolutions = resolutions.ok_or_else(|| Error::Validation("missing `resolutions`".into()))?;
    let stem = stem.ok_or_else(|| Error::Validation("missing [stem] section".into()))?;
    let head = head.ok_or_else(|| Error::Validation("missing [head] section".into()))?;

    let stem = StemSpec {
        width_choices: Block::require(&stem.width, "width", "stem")?,
        kernel: stem.kernel.map(|k| k[0]).unwrap_or(3),
        stride: stem.stride.unwrap_or(2),
        act: stem.act.unwrap_or(Activation::HardSwish),
    };
    let stages = stages
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let ctx = format!("stage {} (line {})", i + 1, b.line);
            Ok(StageSpec {
                width_choices: Block::require(&b.width, "width", &ctx)?,
                depth_choices: Block::require(&b.depth, "depth", &ctx)?,
                kernel_choices: Block::require(&b.kernel, "kernel", &ctx)?,
                expansion_choices: Block::require(&b.expansion, "expansion", &ctx)?,
                use_se: b.se.unwrap_or(false),
                stride: b.stride.unwrap_or(1),
                act: b.act.unwrap_or(Activation::Relu),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let head = HeadSpec {
        width_choices: Block::require(&head.width, "width", "head")?,
        act: head.act.unwrap_or(Activation::HardSwish),
    };

    let space = SearchSpace {
        name,
        in_channels,
        resolutions,
        stem,
        stages,
        head,
        flops_min,
        flops_max,
        profile_text: text.to_string(),
    };
    space.validate()?;
    space.check_flops_bounds()?;
    Ok(space)
}
