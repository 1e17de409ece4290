//! Train/validation/test splits and their leakage audit.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::config::derive_sample_seed;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::record::{Regime, SampleRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    Train,
    Val,
    Test,
}

impl Subset {
    pub const ALL: [Subset; 3] = [Subset::Train, Subset::Val, Subset::Test];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitStrategy {
    ByCellPrimary,
    ByRecordOptimisticBaseline,
}

impl SplitStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::ByCellPrimary => "by_cell_primary",
            Self::ByRecordOptimisticBaseline => "by_record_optimistic_baseline",
        }
    }
}

impl fmt::Display for SplitStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "by_cell_primary" => Ok(Self::ByCellPrimary),
            "by_record_optimistic_baseline" => Ok(Self::ByRecordOptimisticBaseline),
            _ => Err(Error::InvalidInput(format!("unknown split strategy {s:?}"))),
        }
    }
}

/// Default train/val/test proportions.
pub const DEFAULT_RATIOS: [f64; 3] = [0.667, 0.159, 0.174];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub name: String,
    pub seed: u64,
    pub ratios: [f64; 3],
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitAssignment {
    pub fn subset(&self, s: Subset) -> &[String] {
        match s {
            Subset::Train => &self.train,
            Subset::Val => &self.val,
            Subset::Test => &self.test,
        }
    }

    pub fn sizes(&self) -> [usize; 3] {
        [self.train.len(), self.val.len(), self.test.len()]
    }

    /// Subset of every listed id. An id listed twice keeps its first subset.
    pub fn lookup(&self) -> HashMap<&str, Subset> {
        let mut out = HashMap::new();
        for s in Subset::ALL {
            for id in self.subset(s) {
                out.entry(id.as_str()).or_insert(s);
            }
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::malformed(path, e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub cells_in_multiple_subsets: usize,
    pub cross_split_parent_child_pairs: usize,
    pub sample_id_overlap: usize,
}

impl LeakageReport {
    pub fn is_clean(&self) -> bool {
        *self == Self::default()
    }
}

fn check_ratios(ratios: [f64; 3]) -> Result<()> {
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| !(r.is_finite() && *r > 0.0)) || (sum - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidInput(format!(
            "split ratios {ratios:?} must be positive and sum to 1"
        )));
    }
    Ok(())
}

/// Parses `"a,b,c"` into split ratios.
pub fn parse_ratios(text: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::InvalidInput(format!("bad ratios {text:?}")))?;
    let ratios: [f64; 3] = parts
        .try_into()
        .map_err(|_| Error::InvalidInput(format!("expected three ratios, got {text:?}")))?;
    check_ratios(ratios)?;
    Ok(ratios)
}

/// The group a row must share a subset with: its root parent's cell, or its
/// anchor for Regime-B rows.
fn group_key(row: &SampleRecord, by_id: &HashMap<&str, &SampleRecord>) -> String {
    let mut root = row;
    let mut hops = 0;
    while let Some(parent) = root.parent_sample_id.as_deref().and_then(|p| by_id.get(p)) {
        root = parent;
        hops += 1;
        if hops > by_id.len() {
            break;
        }
    }
    match (&root.cell_id, root.regime) {
        (Some(cell), _) => format!("cell:{cell}"),
        (None, Regime::RegimeB) => format!("anchor:{}", root.nearest_anchor),
        (None, Regime::Grounded) => format!("row:{}", root.sample_id),
    }
}

pub fn build_split(
    rows: &[SampleRecord],
    strategy: SplitStrategy,
    ratios: [f64; 3],
    seed: u64,
) -> Result<SplitAssignment> {
    check_ratios(ratios)?;
    if rows.is_empty() {
        return Err(Error::InvalidInput(
            "cannot split an empty dataset".to_string(),
        ));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(derive_sample_seed(seed, strategy.as_str()));
    let mut out: [Vec<String>; 3] = Default::default();
    match strategy {
        SplitStrategy::ByCellPrimary => {
            if rows.iter().all(|r| r.cell_id.is_none()) {
                return Err(Error::InvalidInput("dataset has no cells".to_string()));
            }
            let by_id: HashMap<&str, &SampleRecord> =
                rows.iter().map(|r| (r.sample_id.as_str(), r)).collect();
            let mut groups: BTreeMap<String, Vec<&str>> = BTreeMap::new();
            for r in rows {
                groups
                    .entry(group_key(r, &by_id))
                    .or_default()
                    .push(&r.sample_id);
            }
            let mut order: Vec<(String, Vec<&str>)> = groups.into_iter().collect();
            order.shuffle(&mut rng);
            order.sort_by(|a, b| b.1.len().cmp(&a.1.len()));
            let n = rows.len() as f64;
            let targets = ratios.map(|r| r * n);
            let mut filled = [0usize; 3];
            for (_, ids) in order {
                let k = (0..3)
                    .max_by(|&a, &b| {
                        let gap = |k: usize| {
                            if targets[k] > 0.0 {
                                1.0 - filled[k] as f64 / targets[k]
                            } else {
                                f64::NEG_INFINITY
                            }
                        };
                        gap(a).total_cmp(&gap(b)).then(b.cmp(&a))
                    })
                    .expect("three subsets");
                filled[k] += ids.len();
                out[k].extend(ids.into_iter().map(str::to_string));
            }
        }
        SplitStrategy::ByRecordOptimisticBaseline => {
            let mut ids: Vec<&str> = rows.iter().map(|r| r.sample_id.as_str()).collect();
            ids.shuffle(&mut rng);
            let n = ids.len() as f64;
            let cut1 = (ratios[0] * n).round() as usize;
            let cut2 = (((ratios[0] + ratios[1]) * n).round() as usize).max(cut1);
            for (i, id) in ids.into_iter().enumerate() {
                let k = if i < cut1 {
                    0
                } else if i < cut2 {
                    1
                } else {
                    2
                };
                out[k].push(id.to_string());
            }
        }
    }
    for subset in out.iter_mut() {
        subset.sort();
    }
    let [train, val, test] = out;
    Ok(SplitAssignment {
        name: strategy.as_str().to_string(),
        seed,
        ratios,
        train,
        val,
        test,
    })
}

/// Brute-force leakage counts. Every dataset row must be listed; listing an
/// unknown id is an error.
pub fn audit_split(rows: &[SampleRecord], split: &SplitAssignment) -> Result<LeakageReport> {
    let known: HashSet<&str> = rows.iter().map(|r| r.sample_id.as_str()).collect();
    let mut memberships: HashMap<&str, Vec<Subset>> = HashMap::new();
    for s in Subset::ALL {
        for id in split.subset(s) {
            if !known.contains(id.as_str()) {
                return Err(Error::InvalidInput(format!(
                    "split {} lists unknown sample_id {id}",
                    split.name
                )));
            }
            memberships.entry(id.as_str()).or_default().push(s);
        }
    }
    if let Some(r) = rows
        .iter()
        .find(|r| !memberships.contains_key(r.sample_id.as_str()))
    {
        return Err(Error::InvalidInput(format!(
            "split {} does not cover {}",
            split.name, r.sample_id
        )));
    }
    let sample_id_overlap = memberships
        .values()
        .filter(|subs| subs.iter().collect::<HashSet<_>>().len() > 1)
        .count();

    let mut cell_subsets: HashMap<&str, HashSet<Subset>> = HashMap::new();
    for r in rows {
        if let Some(cell) = &r.cell_id {
            cell_subsets
                .entry(cell)
                .or_default()
                .extend(memberships[r.sample_id.as_str()].iter().copied());
        }
    }
    let cells_in_multiple_subsets = cell_subsets.values().filter(|s| s.len() > 1).count();

    let cross_split_parent_child_pairs = rows
        .iter()
        .filter_map(|r| {
            let parent = r.parent_sample_id.as_deref()?;
            let p = memberships.get(parent)?;
            let c = &memberships[r.sample_id.as_str()];
            Some(p.iter().any(|s| !c.contains(s)) || c.iter().any(|s| !p.contains(s)))
        })
        .filter(|&crossed| crossed)
        .count();

    Ok(LeakageReport {
        cells_in_multiple_subsets,
        cross_split_parent_child_pairs,
        sample_id_overlap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_parsing() {
        assert_eq!(parse_ratios("0.5, 0.25,0.25").unwrap(), [0.5, 0.25, 0.25]);
        assert!(parse_ratios("0.5,0.5").is_err());
        assert!(parse_ratios("0.5,0.6,0.1").is_err());
        assert!(parse_ratios("1,0,0").is_err());
        assert!(parse_ratios("a,b,c").is_err());
    }

    #[test]
    fn strategy_names() {
        for s in [
            SplitStrategy::ByCellPrimary,
            SplitStrategy::ByRecordOptimisticBaseline,
        ] {
            assert_eq!(s.as_str().parse::<SplitStrategy>().unwrap(), s);
        }
        assert!("random".parse::<SplitStrategy>().is_err());
    }
}
