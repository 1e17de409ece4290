//! Synthetic sensor anomalies derived from clean grounded parents.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::Rng;

use crate::config::BridgeConfig;
use crate::error::{Error, Result};
use crate::record::{AnomalyOrigin, AnomalySubtype, Regime, SampleRecord};
use crate::signature::{Signature, C, T};

/// Channel groups of the two sensors: B_s1Y, B_s1Z, B_s1C5 and
/// B_s2Y, B_s2Z, B_s2C6.
pub const SENSOR_GROUPS: [[usize; 3]; 2] = [[0, 1, 4], [2, 3, 5]];

/// Severity levels used by the dataset plans.
pub const SEVERITY_LEVELS: [f64; 4] = [0.25, 0.5, 0.75, 1.0];

/// Builds the anomalous child of `parent`. The child keeps the parent's state
/// labels and takes `child_id` and `generation_seed` as its own.
pub fn inject_anomaly<R: Rng + ?Sized>(
    parent: &SampleRecord,
    child_id: &str,
    generation_seed: u64,
    subtype: AnomalySubtype,
    severity: f64,
    config: &BridgeConfig,
    rng: &mut R,
) -> Result<SampleRecord> {
    if parent.regime != Regime::Grounded {
        return Err(Error::InvalidInput(format!(
            "parent {} is not grounded",
            parent.sample_id
        )));
    }
    if parent.anomaly_flag {
        return Err(Error::InvalidInput(format!(
            "parent {} is already anomalous",
            parent.sample_id
        )));
    }
    if subtype == AnomalySubtype::None {
        return Err(Error::InvalidInput(
            "anomaly subtype must not be none".to_string(),
        ));
    }
    if child_id.is_empty() {
        return Err(Error::InvalidInput("empty child sample_id".to_string()));
    }
    let signature = perturb(&parent.signature, subtype, severity, config, rng)?;
    Ok(SampleRecord {
        signature,
        sample_id: child_id.to_string(),
        parent_sample_id: Some(parent.sample_id.clone()),
        generation_seed,
        anomaly_flag: true,
        anomaly_subtype: subtype,
        anomaly_origin: AnomalyOrigin::SyntheticSensor,
        anomaly_severity: severity,
        ..parent.clone()
    })
}

/// Applies one perturbation to a signature.
pub fn perturb<R: Rng + ?Sized>(
    sig: &Signature,
    subtype: AnomalySubtype,
    severity: f64,
    config: &BridgeConfig,
    rng: &mut R,
) -> Result<Signature> {
    if !(severity > 0.0 && severity <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "severity {severity} outside (0, 1]"
        )));
    }
    let x = sig.values();
    let ranges = sig.channel_ranges();
    let mut out = x.to_owned();
    match subtype {
        AnomalySubtype::None => {
            return Err(Error::InvalidInput(
                "anomaly subtype must not be none".to_string(),
            ))
        }
        AnomalySubtype::SensorDropout => {
            let len = dropout_len(severity, config);
            let group = SENSOR_GROUPS[rng.random_range(0..SENSOR_GROUPS.len())];
            let start = rng.random_range(0..=T - len);
            for t in start..start + len {
                for &c in &group {
                    out[[t, c]] = 0.0;
                }
            }
        }
        AnomalySubtype::CalibrationDrift => {
            for t in 0..T {
                let r = t as f64 / (T - 1) as f64;
                for c in 0..C {
                    let gain = 1.0 + config.drift_gain * severity * r;
                    let offset = config.drift_offset_frac * severity * ranges[c] * r;
                    out[[t, c]] = x[[t, c]] * gain + offset;
                }
            }
        }
        AnomalySubtype::TemporalWarp => {
            let shift = severity * config.warp_frac * T as f64;
            for t in 0..T {
                let pos = (t as f64 + shift * (2.0 * PI * t as f64 / T as f64).sin())
                    .clamp(0.0, (T - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(T - 1);
                let frac = pos - lo as f64;
                for c in 0..C {
                    out[[t, c]] = (1.0 - frac) * x[[lo, c]] + frac * x[[hi, c]];
                }
            }
        }
        AnomalySubtype::PeriodicInterference => {
            for c in 0..C {
                let f =
                    rng.random_range(config.interference_freq_min..=config.interference_freq_max);
                let phase = rng.random_range(0.0..2.0 * PI);
                let amp = severity * config.interference_amp_frac * ranges[c];
                for t in 0..T {
                    out[[t, c]] += amp * (2.0 * PI * f * t as f64 / T as f64 + phase).sin();
                }
            }
        }
    }
    Signature::new(out)
}

/// `round(base + slope * severity)`, capped at `T`.
pub fn dropout_len(severity: f64, config: &BridgeConfig) -> usize {
    ((config.dropout_base_len + config.dropout_len_slope * severity).round() as usize).clamp(1, T)
}

/// Timesteps where any channel of `group` differs from `reference`, per group.
pub fn zeroed_groups(child: &Array2<f64>, reference: &Array2<f64>) -> [usize; 2] {
    let mut out = [0; 2];
    for (g, group) in SENSOR_GROUPS.iter().enumerate() {
        out[g] = (0..T)
            .filter(|&t| group.iter().any(|&c| child[[t, c]] != reference[[t, c]]))
            .count();
    }
    out
}
