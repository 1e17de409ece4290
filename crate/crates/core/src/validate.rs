//! Sanity invariants, the two-sample Kolmogorov–Smirnov test, and the anchor
//! fidelity report.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::bank::BaseMode;
use crate::conditioning::demo_conditioning;
use crate::config::derive_sample_seed;
use crate::emit::{Bridge, NEUTRAL_SOC};
use crate::error::{Error, Result};
use crate::noise::apply_noise;
use crate::record::{AnomalySubtype, GenerationRequest, Regime, SampleRecord, U_DIM};
use crate::regime::classify;
use crate::signature::{Signature, C, T};

// ---- Kolmogorov–Smirnov ----------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Smallest sample size accepted by [`ks_two_sample`].
pub const KS_MIN_LEN: usize = 5;

/// Two-sample KS statistic with an asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsResult> {
    if a.len() < KS_MIN_LEN || b.len() < KS_MIN_LEN {
        return Err(Error::InvalidInput(format!(
            "KS needs at least {KS_MIN_LEN} values per sample (got {} and {})",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(
            "KS input contains non-finite values".to_string(),
        ));
    }
    let statistic = ks_statistic(a, b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let en = na * nb / (na + nb);
    Ok(KsResult {
        statistic,
        p_value: kolmogorov_sf(en.sqrt() * statistic),
    })
}

/// `sup |F_a - F_b|`, evaluated after each distinct pooled value.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Survival function of the Kolmogorov distribution,
/// `P(K > x) = 2 sum_{k>=1} (-1)^(k-1) exp(-2 k^2 x^2)`. Small arguments use
/// the theta-function form of the CDF, which converges there.
pub fn kolmogorov_sf(x: f64) -> f64 {
    if !(x > 0.0) {
        return 1.0;
    }
    if x < 1.0 {
        let y = -PI * PI / (8.0 * x * x);
        let mut s = 0.0;
        for k in 1..=50 {
            let m = (2 * k - 1) as f64;
            let term = (m * m * y).exp();
            s += term;
            if term < 1e-300 {
                break;
            }
        }
        (1.0 - (2.0 * PI).sqrt() / x * s).clamp(0.0, 1.0)
    } else {
        let mut s = 0.0;
        for k in 1..=100 {
            let kf = k as f64;
            let term = (-2.0 * kf * kf * x * x).exp();
            s += if k % 2 == 1 { term } else { -term };
            if term < 1e-300 {
                break;
            }
        }
        (2.0 * s).clamp(0.0, 1.0)
    }
}

// ---- sanity suite ----------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SanityEntry {
    pub id: u8,
    pub name: String,
    pub passed: bool,
    pub detail: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SanityReport {
    pub config_hash: String,
    pub seed: u64,
    pub entries: Vec<SanityEntry>,
}

impl SanityReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn n_passed(&self) -> usize {
        self.entries.iter().filter(|e| e.passed).count()
    }
}

pub const SOH_LADDER: [f64; 6] = [1.0, 0.95, 0.90, 0.85, 0.80, 0.75];
pub const MONOTONE_VOLTAGES: [f64; 2] = [3.10, 2.81];
pub const SMOOTHNESS_PROBES: [f64; 3] = [2.7, 2.9, 3.2];
pub const REPLICA_TOL: f64 = 1e-10;

/// Expected regime of each boundary-table voltage.
pub const BOUNDARY_TABLE: [(f64, Regime); 6] = [
    (2.54, Regime::RegimeB),
    (2.81, Regime::RegimeB),
    (3.00, Regime::RegimeB),
    (3.06, Regime::Grounded),
    (3.10, Regime::Grounded),
    (3.34, Regime::Grounded),
];
pub const REJECTED_VOLTAGES: [f64; 2] = [2.00, 4.00];

/// The pulse-feature vector used by validation probes.
pub fn probe_u(seed: u64) -> [f64; U_DIM] {
    demo_conditioning(2, seed).expect("two demo cells")[0].u
}

/// Runs the five structural invariants. Failures are report entries.
pub fn run_sanity_suite(bridge: &Bridge, seed: u64) -> Result<SanityReport> {
    let entries = vec![
        replica_check(bridge),
        monotonicity_check(bridge, seed)?,
        smoothness_check(bridge, seed)?,
        boundary_check(bridge),
        flag_check(bridge, seed)?,
    ];
    Ok(SanityReport {
        config_hash: bridge.config_hash().to_string(),
        seed,
        entries,
    })
}

fn entry(id: u8, name: &str, passed: bool, detail: serde_json::Value) -> SanityEntry {
    SanityEntry {
        id,
        name: name.to_string(),
        passed,
        detail,
    }
}

/// Max deviation of the replica draw from the directly averaged scans, per
/// anchor.
pub fn replica_deviations(bridge: &Bridge) -> Vec<(f64, f64)> {
    let bank = bridge.bank();
    let mut rng = ChaCha20Rng::seed_from_u64(0);
    bank.anchors()
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            let samples = bank.samples(i);
            let mut mean = Array2::<f64>::zeros((T, C));
            for s in samples {
                mean += &s.values();
            }
            mean /= samples.len() as f64;
            let dev = match bank.base_morphology(a, BaseMode::Replica, &mut rng) {
                Ok(r) => (&r.values() - &mean)
                    .iter()
                    .fold(0.0f64, |m, v| m.max(v.abs())),
                Err(_) => f64::INFINITY,
            };
            (a, dev)
        })
        .collect()
}

fn replica_check(bridge: &Bridge) -> SanityEntry {
    let devs = replica_deviations(bridge);
    let worst = devs.iter().map(|d| d.1).fold(0.0, f64::max);
    entry(
        1,
        "anchor_replica_identity",
        devs.iter().all(|d| d.1 <= REPLICA_TOL),
        serde_json::json!({ "tolerance": REPLICA_TOL, "max_deviation": worst, "per_anchor": devs }),
    )
}

/// L2 distance from the `soh = 1` output for each rung of [`SOH_LADDER`],
/// with base and noise draws shared across rungs.
pub fn soh_distance_profile(bridge: &Bridge, v: f64, seed: u64) -> Result<Vec<f64>> {
    let u = probe_u(seed);
    let stream = derive_sample_seed(seed, &format!("sanity/monotone/{v}"));
    let reference = bridge.synthesize(v, 1.0, NEUTRAL_SOC, &u, stream)?;
    SOH_LADDER
        .iter()
        .map(|&soh| {
            Ok(bridge
                .synthesize(v, soh, NEUTRAL_SOC, &u, stream)?
                .l2_distance(&reference))
        })
        .collect()
}

fn monotonicity_check(bridge: &Bridge, seed: u64) -> Result<SanityEntry> {
    let mut passed = true;
    let mut detail = serde_json::Map::new();
    for v in MONOTONE_VOLTAGES {
        let d = soh_distance_profile(bridge, v, seed)?;
        passed &= d.windows(2).all(|w| w[1] > w[0]);
        detail.insert(format!("{v:.2}"), serde_json::json!(d));
    }
    Ok(entry(2, "soh_monotonicity", passed, detail.into()))
}

/// `(L2 change for +0.01 V, L2 change for +0.10 V)` at `v`, with healthy
/// outputs drawn from one shared stream.
pub fn voltage_step_changes(bridge: &Bridge, v: f64, seed: u64) -> Result<(f64, f64)> {
    let u = probe_u(seed);
    let stream = derive_sample_seed(seed, &format!("sanity/smooth/{v}"));
    let at = |x: f64| bridge.synthesize(x, 1.0, NEUTRAL_SOC, &u, stream);
    let here = at(v)?;
    Ok((
        at(v + 0.01)?.l2_distance(&here),
        at(v + 0.10)?.l2_distance(&here),
    ))
}

fn smoothness_check(bridge: &Bridge, seed: u64) -> Result<SanityEntry> {
    let mut passed = true;
    let mut detail = serde_json::Map::new();
    for v in SMOOTHNESS_PROBES {
        let (small, large) = voltage_step_changes(bridge, v, seed)?;
        passed &= small < large;
        detail.insert(
            format!("{v:.2}"),
            serde_json::json!({ "step_0.01": small, "step_0.10": large }),
        );
    }
    Ok(entry(3, "voltage_smoothness", passed, detail.into()))
}

fn boundary_check(bridge: &Bridge) -> SanityEntry {
    let mut passed = true;
    let mut rows = Vec::new();
    for (v, expected) in BOUNDARY_TABLE {
        let got = classify(v, bridge.bank(), bridge.config()).map(|c| c.regime);
        let ok = got.as_ref().is_ok_and(|r| *r == expected);
        passed &= ok;
        rows.push(serde_json::json!({
            "voltage": v,
            "expected": expected.as_str(),
            "got": got.map(|r| r.as_str().to_string()).unwrap_or_else(|e| e.to_string()),
        }));
    }
    for v in REJECTED_VOLTAGES {
        let rejected = classify(v, bridge.bank(), bridge.config()).is_err();
        passed &= rejected;
        rows.push(
            serde_json::json!({ "voltage": v, "expected": "rejected", "rejected": rejected }),
        );
    }
    entry(
        4,
        "regime_boundaries",
        passed,
        serde_json::Value::Array(rows),
    )
}

/// Rows satisfying every record invariant, and the total.
pub fn flag_consistency(rows: &[SampleRecord]) -> (usize, usize) {
    let ok = rows
        .iter()
        .filter(|r| r.invariant_violations().is_empty())
        .count();
    (ok, rows.len())
}

fn flag_check(bridge: &Bridge, seed: u64) -> Result<SanityEntry> {
    let cells = demo_conditioning(4, seed)?;
    let grounded: Vec<GenerationRequest> = (0..8)
        .map(|i| {
            let c = &cells[i % cells.len()];
            let v = 3.06 + 0.04 * i as f64;
            GenerationRequest::grounded(
                format!("probe-g-{i}"),
                v,
                c.soc,
                c.soh,
                c.u.to_vec(),
                c.cell_id.clone(),
            )
        })
        .collect();
    let mut rows = bridge.generate_batch(&grounded, seed)?;
    for (j, subtype) in AnomalySubtype::INJECTABLE.iter().enumerate() {
        let child = bridge.derive_anomaly(&rows[j], &format!("probe-a-{j}"), *subtype, seed)?;
        rows.push(child);
    }
    let regime_b: Vec<GenerationRequest> = [2.54, 2.81, 3.00, 2.6, 2.9, 3.05]
        .iter()
        .enumerate()
        .map(|(i, &v)| GenerationRequest::regime_b(format!("probe-b-{i}"), v))
        .collect();
    rows.extend(bridge.generate_batch(&regime_b, seed)?);
    let (ok, total) = flag_consistency(&rows);
    Ok(entry(
        5,
        "anomaly_flag_consistency",
        ok == total,
        serde_json::json!({ "consistent": ok, "total": total }),
    ))
}

// ---- anchor fidelity -------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelFidelity {
    pub channel: usize,
    pub ks_statistic: f64,
    pub ks_p_value: f64,
    pub ks_pass: bool,
    /// Fraction of timesteps whose own KS test passes.
    pub per_timestep_pass_fraction: f64,
    pub std_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub anchor: f64,
    pub n_synthetic: usize,
    pub n_real: usize,
    pub alpha: f64,
    pub channels: Vec<ChannelFidelity>,
    pub channels_passed: usize,
    pub correlation_mad: f64,
    /// Whether the first synthetic sample equals the unmodulated base plus
    /// noise drawn from its own stream.
    pub modulation_bypassed: bool,
}

impl FidelityReport {
    pub fn std_ratio_range(&self) -> (f64, f64) {
        self.channels
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), c| {
                (lo.min(c.std_ratio), hi.max(c.std_ratio))
            })
    }
}

/// Compares `n` healthy synthetic samples at a grounded anchor with the real
/// scans there.
pub fn anchor_fidelity_report(
    bridge: &Bridge,
    anchor: f64,
    n: usize,
    alpha: f64,
    seed: u64,
) -> Result<FidelityReport> {
    let bank = bridge.bank();
    let idx = bank
        .anchor_index(anchor)
        .ok_or_else(|| Error::InvalidInput(format!("{anchor} V is not a bank anchor")))?;
    if classify(anchor, bank, bridge.config())?.regime != Regime::Grounded {
        return Err(Error::InvalidInput(format!(
            "anchor {anchor} V is not grounded"
        )));
    }
    let u = probe_u(seed);
    let reqs: Vec<GenerationRequest> = (0..n)
        .map(|i| {
            GenerationRequest::grounded(
                format!("fidelity-{anchor}-{i}"),
                anchor,
                NEUTRAL_SOC,
                1.0,
                u.to_vec(),
                "fidelity",
            )
        })
        .collect();
    let synthetic: Vec<Signature> = bridge
        .generate_batch(&reqs, seed)?
        .into_iter()
        .map(|r| r.signature)
        .collect();
    let real = bank.samples(idx);

    let modulation_bypassed = {
        let mut rng = ChaCha20Rng::seed_from_u64(derive_sample_seed(seed, &reqs[0].sample_id));
        let base = bank.base_morphology(anchor, BaseMode::Stochastic, &mut rng)?;
        let direct = apply_noise(&base, NEUTRAL_SOC, bank.std(idx), bridge.config(), &mut rng)?;
        direct == synthetic[0]
    };

    let pooled = |sigs: &[Signature], c: usize| -> Vec<f64> {
        sigs.iter().flat_map(|s| s.channel(c).to_vec()).collect()
    };
    let mut channels = Vec::with_capacity(C);
    let mut syn_cols = Vec::with_capacity(C);
    let mut real_cols = Vec::with_capacity(C);
    for c in 0..C {
        let s = pooled(&synthetic, c);
        let r = pooled(real, c);
        let ks = ks_two_sample(&s, &r)?;
        let mut passes = 0;
        for t in 0..T {
            let st: Vec<f64> = synthetic.iter().map(|x| x.values()[[t, c]]).collect();
            let rt: Vec<f64> = real.iter().map(|x| x.values()[[t, c]]).collect();
            if ks_two_sample(&st, &rt)?.p_value > alpha {
                passes += 1;
            }
        }
        channels.push(ChannelFidelity {
            channel: c,
            ks_statistic: ks.statistic,
            ks_p_value: ks.p_value,
            ks_pass: ks.p_value > alpha,
            per_timestep_pass_fraction: passes as f64 / T as f64,
            std_ratio: population_std(&s) / population_std(&r),
        });
        syn_cols.push(s);
        real_cols.push(r);
    }
    let cs = correlation_matrix(&syn_cols);
    let cr = correlation_matrix(&real_cols);
    let correlation_mad = cs
        .iter()
        .zip(cr.iter())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / (C * C) as f64;
    Ok(FidelityReport {
        anchor,
        n_synthetic: n,
        n_real: real.len(),
        alpha,
        channels_passed: channels.iter().filter(|c| c.ks_pass).count(),
        channels,
        correlation_mad,
        modulation_bypassed,
    })
}

pub fn population_std(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Pearson correlation; 0 when either side is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

fn correlation_matrix(cols: &[Vec<f64>]) -> Array2<f64> {
    Array2::from_shape_fn((cols.len(), cols.len()), |(i, j)| {
        pearson(&cols[i], &cols[j])
    })
}
