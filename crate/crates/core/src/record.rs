//! Labels and metadata attached to every generated signature.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signature::Signature;

/// Length of the pulse-voltage feature vector.
pub const U_DIM: usize = 21;

macro_rules! label_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(Error::InvalidInput(format!(
                        concat!("unknown ", stringify!($name), " {:?}"),
                        other
                    ))),
                }
            }
        }
    };
}

label_enum!(Chemistry { Lfp => "LFP" });

label_enum!(Regime {
    Grounded => "grounded",
    RegimeB => "regime_b",
});

label_enum!(SecondLifeClass {
    Reuse => "reuse",
    Recondition => "recondition",
});

label_enum!(AnomalySubtype {
    None => "none",
    SensorDropout => "sensor_dropout",
    CalibrationDrift => "calibration_drift",
    TemporalWarp => "temporal_warp",
    PeriodicInterference => "periodic_interference",
});

label_enum!(AnomalyOrigin {
    None => "none",
    SyntheticSensor => "synthetic_sensor",
    RegimeB => "regime_b",
});

impl AnomalySubtype {
    /// The four injectable perturbations, excluding `None`.
    pub const INJECTABLE: [AnomalySubtype; 4] = [
        AnomalySubtype::SensorDropout,
        AnomalySubtype::CalibrationDrift,
        AnomalySubtype::TemporalWarp,
        AnomalySubtype::PeriodicInterference,
    ];
}

/// A request to the bridge. Grounded requests carry the full conditioning;
/// Regime-B requests carry only a voltage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub sample_id: String,
    pub voltage: f64,
    pub soc: Option<f64>,
    pub soh: Option<f64>,
    pub u: Option<Vec<f64>>,
    pub cell_id: Option<String>,
}

impl GenerationRequest {
    pub fn grounded(
        sample_id: impl Into<String>,
        voltage: f64,
        soc: f64,
        soh: f64,
        u: Vec<f64>,
        cell_id: impl Into<String>,
    ) -> Self {
        Self {
            sample_id: sample_id.into(),
            voltage,
            soc: Some(soc),
            soh: Some(soh),
            u: Some(u),
            cell_id: Some(cell_id.into()),
        }
    }

    pub fn regime_b(sample_id: impl Into<String>, voltage: f64) -> Self {
        Self {
            sample_id: sample_id.into(),
            voltage,
            soc: None,
            soh: None,
            u: None,
            cell_id: None,
        }
    }
}

/// One dataset row: a signature plus its full metadata. Absent numeric labels
/// are `NaN`; absent strings and enums are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub signature: Signature,
    pub sample_id: String,
    pub parent_sample_id: Option<String>,
    pub cell_id: Option<String>,
    pub generation_seed: u64,
    pub bridge_version: String,
    pub bridge_config_hash: String,
    pub schema_version: String,
    pub voltage: f64,
    pub soc: f64,
    pub soh: f64,
    pub chemistry: Chemistry,
    pub regime: Regime,
    pub nearest_anchor: f64,
    pub u_features: [f64; U_DIM],
    pub second_life_class: Option<SecondLifeClass>,
    pub anomaly_flag: bool,
    pub anomaly_subtype: AnomalySubtype,
    pub anomaly_origin: AnomalyOrigin,
    pub anomaly_severity: f64,
}

impl SampleRecord {
    pub fn is_clean_grounded(&self) -> bool {
        self.regime == Regime::Grounded && !self.anomaly_flag
    }

    /// Returns every violated record invariant, empty when consistent.
    pub fn invariant_violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.regime == Regime::RegimeB {
            if !self.anomaly_flag {
                out.push("regime_b row without anomaly_flag".to_string());
            }
            if !self.soh.is_nan() {
                out.push("regime_b row with soh".to_string());
            }
            if self.u_features.iter().any(|u| !u.is_nan()) {
                out.push("regime_b row with u_features".to_string());
            }
            if self.second_life_class.is_some() {
                out.push("regime_b row with second_life_class".to_string());
            }
            if self.anomaly_origin != AnomalyOrigin::RegimeB {
                out.push("regime_b row with wrong anomaly_origin".to_string());
            }
        }
        if self.anomaly_subtype != AnomalySubtype::None {
            if self.parent_sample_id.is_none() {
                out.push("anomaly subtype without parent".to_string());
            }
            if !self.anomaly_flag {
                out.push("anomaly subtype without anomaly_flag".to_string());
            }
            if !(self.anomaly_severity > 0.0 && self.anomaly_severity <= 1.0) {
                out.push("anomaly severity outside (0, 1]".to_string());
            }
        }
        if self.regime == Regime::Grounded && self.anomaly_subtype == AnomalySubtype::None {
            if self.anomaly_flag {
                out.push("clean grounded row flagged anomalous".to_string());
            }
            if self.anomaly_origin != AnomalyOrigin::None {
                out.push("clean grounded row with anomaly origin".to_string());
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_round_trip_through_text() {
        for s in AnomalySubtype::ALL {
            assert_eq!(s.as_str().parse::<AnomalySubtype>().unwrap(), *s);
        }
        assert_eq!("regime_b".parse::<Regime>().unwrap(), Regime::RegimeB);
        assert_eq!("LFP".parse::<Chemistry>().unwrap(), Chemistry::Lfp);
        assert!("NMC".parse::<Chemistry>().is_err());
    }
}
