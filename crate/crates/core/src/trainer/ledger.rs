//! Record of every subnet sampled during training.
//!
//! Each architecture `a` carries an index `s(a)`: the sum of the iteration
//! numbers at which it was sampled. A larger index means the architecture
//! was sampled more often or more recently.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::error::{Error, Result};
use crate::space::{Anchor, SubnetConfig};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerEntry {
    pub index: u64,
    pub first: usize,
    pub last: usize,
    pub anchor: Option<Anchor>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SampleLedger {
    pub entries: BTreeMap<String, LedgerEntry>,
    /// `(iteration, key)` in update order.
    pub log: Vec<(usize, String)>,
}

impl SampleLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index(&self, key: &str) -> u64 {
        self.entries.get(key).map_or(0, |e| e.index)
    }

    fn add(&mut self, key: String, t: usize, anchor: Option<Anchor>) {
        let e = self.entries.entry(key.clone()).or_insert(LedgerEntry {
            index: 0,
            first: t,
            last: t,
            anchor: None,
        });
        e.index += t as u64;
        e.last = t;
        if anchor.is_some() {
            e.anchor = anchor;
        }
        self.log.push((t, key));
    }

    /// Adds `t` to the index of every distinct config in `sampled`. The
    /// configs equal to `minnet` are flagged as the minimum anchor.
    pub fn update(&mut self, t: usize, sampled: &[SubnetConfig], minnet: &SubnetConfig) {
        let distinct: BTreeSet<&SubnetConfig> = sampled.iter().collect();
        for c in distinct {
            let anchor = (c == minnet).then_some(Anchor::Min);
            self.add(c.encode(), t, anchor);
        }
    }

    /// Records the maxnet, which is trained every iteration.
    pub fn update_maxnet(&mut self, t: usize, maxnet: &SubnetConfig) {
        self.add(maxnet.encode(), t, Some(Anchor::Max));
    }

    /// Indices rebuilt from the insertion log alone.
    pub fn replay(log: &[(usize, String)]) -> BTreeMap<String, u64> {
        let mut s = BTreeMap::new();
        for (t, key) in log {
            *s.entry(key.clone()).or_insert(0) += *t as u64;
        }
        s
    }

    /// Writes `<stem>.txt` (one row per architecture) and `<stem>_log.txt`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let mut table = String::from("# key index first last anchor\n");
        for (k, e) in &self.entries {
            let anchor = match e.anchor {
                Some(Anchor::Min) => "min",
                Some(Anchor::Max) => "max",
                None => "-",
            };
            table.push_str(&format!("{k} {} {} {} {anchor}\n", e.index, e.first, e.last));
        }
        std::fs::write(dir.join(format!("{stem}.txt")), table)?;
        let log: String = self.log.iter().map(|(t, k)| format!("{t} {k}\n")).collect();
        std::fs::write(dir.join(format!("{stem}_log.txt")), log)?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let table = std::fs::read_to_string(dir.join(format!("{stem}.txt")))?;
        let mut entries = BTreeMap::new();
        for (i, line) in table.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || Error::Parse {
                line: i + 1,
                msg: format!("bad ledger row `{line}`"),
            };
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 5 {
                return Err(bad());
            }
            let anchor = match f[4] {
                "min" => Some(Anchor::Min),
                "max" => Some(Anchor::Max),
                "-" => None,
                _ => return Err(bad()),
            };
            entries.insert(
                f[0].to_string(),
                LedgerEntry {
                    index: f[1].parse().map_err(|_| bad())?,
                    first: f[2].parse().map_err(|_| bad())?,
                    last: f[3].parse().map_err(|_| bad())?,
                    anchor,
                },
            );
        }
        let text = std::fs::read_to_string(dir.join(format!("{stem}_log.txt")))?;
        let mut log = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let (t, k) = line.split_once(' ').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("bad ledger log row `{line}`"),
            })?;
            let t = t.parse().map_err(|_| Error::Parse {
                line: i + 1,
                msg: format!("bad iteration `{t}`"),
            })?;
            log.push((t, k.to_string()));
        }
        let ledger = Self { entries, log };
        let replayed = Self::replay(&ledger.log);
        if replayed.len() != ledger.entries.len()
            || ledger.entries.iter().any(|(k, e)| replayed.get(k) != Some(&e.index))
        {
            return Err(Error::Format("ledger table disagrees with its log".into()));
        }
        Ok(ledger)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::bundled_profile;

    #[test]
    fn indices_accumulate_iteration_numbers() {
        let s = bundled_profile("desk-small").unwrap();
        let (min, max) = (s.anchor(Anchor::Min), s.anchor(Anchor::Max));
        let mut other = min.clone();
        other.head_width = max.head_width;
        other.stages[0].depth = 2;
        let mut l = SampleLedger::new();
        l.update(3, &[other.clone(), min.clone()], &min);
        l.update(7, &[min.clone(), min.clone()], &min);
        l.update(9, &[other.clone(), min.clone()], &min);
        assert_eq!(l.index(&other.encode()), 12);
        assert_eq!(l.index(&min.encode()), 3 + 7 + 9);
        assert_eq!(l.entries[&min.encode()].anchor, Some(Anchor::Min));
        assert_eq!(l.entries[&other.encode()].first, 3);
        assert_eq!(l.entries[&other.encode()].last, 9);
        let replayed = SampleLedger::replay(&l.log);
        assert!(l.entries.iter().all(|(k, e)| replayed[k] == e.index));
    }
}
