//! Per-cell conditioning labels: state of health, state of charge, and the
//! pulse-voltage feature vector.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::config::derive_sample_seed;
use crate::error::{Error, Result};
use crate::record::{Chemistry, SecondLifeClass, U_DIM};

/// Released SOH range for demo draws.
pub const SOH_RANGE: (f64, f64) = (0.744, 0.962);
/// SOC grid for demo records, percent.
pub const SOC_GRID: [f64; 10] = [5.0, 10.0, 15.0, 20.0, 25.0, 30.0, 35.0, 40.0, 45.0, 50.0];
/// Second-life cutoff; reuse strictly above.
pub const REUSE_THRESHOLD: f64 = 0.85;

const U_NOISE_STD: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningRecord {
    pub cell_id: String,
    pub soh: f64,
    pub soc: f64,
    pub u: [f64; U_DIM],
    pub chemistry: Chemistry,
    /// The cell's true SOH. Equal to `soh` unless labels were shuffled.
    pub original_soh: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConditioningSource {
    Demo { n_cells: usize, seed: u64 },
    File(PathBuf),
}

impl ConditioningSource {
    /// Parses `demo:N` (seeded later) or a file path.
    pub fn parse(spec: &str, seed: u64) -> Result<Self> {
        match spec.strip_prefix("demo:") {
            Some(n) => {
                let n_cells = n
                    .parse()
                    .map_err(|_| Error::InvalidInput(format!("bad demo cell count in {spec:?}")))?;
                Ok(Self::Demo { n_cells, seed })
            }
            None => Ok(Self::File(PathBuf::from(spec))),
        }
    }
}

impl fmt::Display for ConditioningSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Demo { n_cells, seed } => write!(f, "demo:{n_cells} (seed {seed})"),
            Self::File(p) => write!(f, "{}", p.display()),
        }
    }
}

pub fn load_conditioning(source: &ConditioningSource) -> Result<Vec<ConditioningRecord>> {
    match source {
        ConditioningSource::Demo { n_cells, seed } => demo_conditioning(*n_cells, *seed),
        ConditioningSource::File(path) => read_conditioning_table(path),
    }
}

/// Fixed linear model of pulse-voltage features against SOH: intercept and
/// slope per feature.
fn u_coefficients(j: usize) -> (f64, f64) {
    let x = j as f64;
    let intercept = 3.05 + 0.012 * x;
    let slope = 0.12 + 0.08 * (0.9 * x).sin();
    (intercept, slope)
}

pub fn demo_conditioning(n_cells: usize, seed: u64) -> Result<Vec<ConditioningRecord>> {
    if n_cells < 2 {
        return Err(Error::InvalidInput(
            "demo conditioning needs at least 2 cells".to_string(),
        ));
    }
    let noise = Normal::new(0.0, U_NOISE_STD).expect("valid std");
    let records = (0..n_cells)
        .map(|i| {
            let cell_id = format!("cell-{i:04}");
            let mut rng = ChaCha20Rng::seed_from_u64(derive_sample_seed(
                seed,
                &format!("conditioning/{cell_id}"),
            ));
            let soh = rng.random_range(SOH_RANGE.0..=SOH_RANGE.1);
            let soc = SOC_GRID[rng.random_range(0..SOC_GRID.len())];
            let mut u = [0.0; U_DIM];
            for (j, uj) in u.iter_mut().enumerate() {
                let (p, q) = u_coefficients(j);
                *uj = p + q * soh + noise.sample(&mut rng);
            }
            ConditioningRecord {
                cell_id,
                soh,
                soc,
                u,
                chemistry: Chemistry::Lfp,
                original_soh: soh,
            }
        })
        .collect();
    Ok(records)
}

fn u_header(j: usize) -> String {
    format!("u_{}", j + 1)
}

pub fn table_header() -> Vec<String> {
    let mut h = vec!["cell_id".to_string(), "soh".to_string(), "soc".to_string()];
    h.extend((0..U_DIM).map(u_header));
    h.push("chemistry".to_string());
    h
}

pub fn write_conditioning_table(path: &Path, records: &[ConditioningRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(table_header())?;
    for r in records {
        let mut row = vec![r.cell_id.clone(), r.soh.to_string(), r.soc.to_string()];
        row.extend(r.u.iter().map(|v| v.to_string()));
        row.push(r.chemistry.to_string());
        w.write_record(row)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    crate::io::write_atomic(path, &bytes)
}

pub fn read_conditioning_table(path: &Path) -> Result<Vec<ConditioningRecord>> {
    let mut rdr =
        csv::Reader::from_path(path).map_err(|e| Error::malformed(path, e.to_string()))?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != table_header() {
        return Err(Error::malformed(path, "unexpected header row"));
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (line, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| Error::malformed(path, e.to_string()))?;
        let bad = |what: &str| Error::malformed(path, format!("row {}: {what}", line + 1));
        if row.len() != U_DIM + 4 {
            return Err(bad("wrong column count"));
        }
        let num = |i: usize| -> Result<f64> {
            let v: f64 = row[i]
                .trim()
                .parse()
                .map_err(|_| bad("non-numeric field"))?;
            if !v.is_finite() {
                return Err(bad("non-finite field"));
            }
            Ok(v)
        };
        let cell_id = row[0].to_string();
        if cell_id.is_empty() {
            return Err(bad("empty cell_id"));
        }
        if !seen.insert(cell_id.clone()) {
            return Err(bad(&format!("duplicate cell_id {cell_id}")));
        }
        let soh = num(1)?;
        if !(soh > 0.0 && soh <= 1.0) {
            return Err(bad(&format!("soh {soh} outside (0, 1]")));
        }
        let soc = num(2)?;
        let mut u = [0.0; U_DIM];
        for (j, uj) in u.iter_mut().enumerate() {
            *uj = num(3 + j)?;
        }
        let chemistry = row[U_DIM + 3]
            .parse::<Chemistry>()
            .map_err(|e| bad(&e.to_string()))?;
        out.push(ConditioningRecord {
            cell_id,
            soh,
            soc,
            u,
            chemistry,
            original_soh: soh,
        });
    }
    Ok(out)
}

/// Reuse strictly above 0.85, recondition otherwise.
pub fn second_life_label(soh: f64) -> Result<SecondLifeClass> {
    if !soh.is_finite() {
        return Err(Error::InvalidInput(format!("soh {soh} is not finite")));
    }
    Ok(if soh > REUSE_THRESHOLD {
        SecondLifeClass::Reuse
    } else {
        SecondLifeClass::Recondition
    })
}

/// Permutes SOH labels uniformly across cells. Each record keeps its true
/// value in `original_soh`.
pub fn shuffle_soh(records: &[ConditioningRecord], seed: u64) -> Vec<ConditioningRecord> {
    let mut rng = ChaCha20Rng::seed_from_u64(derive_sample_seed(seed, "shuffle_soh"));
    let mut sohs: Vec<f64> = records.iter().map(|r| r.soh).collect();
    sohs.shuffle(&mut rng);
    records
        .iter()
        .zip(sohs)
        .map(|(r, soh)| ConditioningRecord {
            soh,
            original_soh: r.original_soh,
            ..r.clone()
        })
        .collect()
}
