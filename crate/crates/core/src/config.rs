//! Bridge configuration, canonical hashing, and seed derivation.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const BRIDGE_VERSION: &str = "v1.0";
pub const SCHEMA_VERSION: &str = "1.0";

/// Every tunable parameter of the bridge. The whole struct is pinned by
/// [`config_hash`], so adding a field changes every hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BridgeConfig {
    /// Perturbation gain in the discriminant subspace.
    pub gamma: f64,
    pub k_nn: usize,
    /// Softmin temperature.
    pub tau: f64,
    pub cone_half_angle_deg: f64,
    pub blend_slope: f64,
    pub sensor_noise_frac: f64,
    pub soc_fluct_frac: f64,
    pub boxcar_window: usize,
    pub amp_scale_coeff: f64,
    pub broaden_base_width: f64,
    pub broaden_u_coeff: f64,
    pub grounded_range: [f64; 2],
    /// Half-open `[lo, hi)`.
    pub regime_b_range: [f64; 2],
    pub lda_shrinkage: f64,
    pub reservoir_seed: u64,
    pub dropout_base_len: f64,
    pub dropout_len_slope: f64,
    pub drift_gain: f64,
    pub drift_offset_frac: f64,
    pub warp_frac: f64,
    pub interference_amp_frac: f64,
    pub interference_freq_min: f64,
    pub interference_freq_max: f64,
    pub bridge_version: String,
    pub schema_version: String,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        Self {
            gamma: 800.0,
            k_nn: 8,
            tau: 50.0,
            cone_half_angle_deg: 75.0,
            blend_slope: 1.5,
            sensor_noise_frac: 0.05,
            soc_fluct_frac: 0.04,
            boxcar_window: 9,
            amp_scale_coeff: 0.1,
            broaden_base_width: 2.0,
            broaden_u_coeff: 0.5,
            grounded_range: [3.06, 3.34],
            regime_b_range: [2.54, 3.06],
            lda_shrinkage: 0.1,
            reservoir_seed: 0x5EED_0001,
            dropout_base_len: 10.0,
            dropout_len_slope: 40.0,
            drift_gain: 0.3,
            drift_offset_frac: 0.05,
            warp_frac: 0.08,
            interference_amp_frac: 0.05,
            interference_freq_min: 5.0,
            interference_freq_max: 15.0,
            bridge_version: BRIDGE_VERSION.to_string(),
            schema_version: SCHEMA_VERSION.to_string(),
        }
    }
}

impl BridgeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        let reals = [
            self.gamma,
            self.tau,
            self.cone_half_angle_deg,
            self.blend_slope,
            self.sensor_noise_frac,
            self.soc_fluct_frac,
            self.amp_scale_coeff,
            self.broaden_base_width,
            self.broaden_u_coeff,
            self.lda_shrinkage,
            self.dropout_base_len,
            self.dropout_len_slope,
            self.drift_gain,
            self.drift_offset_frac,
            self.warp_frac,
            self.interference_amp_frac,
            self.interference_freq_min,
            self.interference_freq_max,
        ];
        if reals.iter().any(|v| !v.is_finite()) {
            return bad("all numeric parameters must be finite");
        }
        if self.gamma <= 0.0 {
            return bad("gamma must be > 0");
        }
        if self.k_nn < 1 {
            return bad("k_nn must be >= 1");
        }
        if self.tau <= 0.0 {
            return bad("tau must be > 0");
        }
        if !(self.cone_half_angle_deg > 0.0 && self.cone_half_angle_deg < 180.0) {
            return bad("cone_half_angle_deg must lie in (0, 180)");
        }
        if self.boxcar_window < 1 {
            return bad("boxcar_window must be >= 1");
        }
        if !(0.0..1.0).contains(&self.lda_shrinkage) || self.lda_shrinkage == 0.0 {
            return bad("lda_shrinkage must lie in (0, 1)");
        }
        if self.sensor_noise_frac < 0.0 || self.soc_fluct_frac < 0.0 {
            return bad("noise fractions must be non-negative");
        }
        let [g_lo, g_hi] = self.grounded_range;
        let [b_lo, b_hi] = self.regime_b_range;
        if !(g_lo < g_hi && b_lo < b_hi) {
            return bad("voltage ranges must be non-empty");
        }
        if b_hi != g_lo {
            return bad("regime-B range must end exactly where the grounded range starts");
        }
        if self.interference_freq_min > self.interference_freq_max {
            return bad("interference_freq_min exceeds interference_freq_max");
        }
        Ok(())
    }

    /// Lowest and highest accepted request voltage.
    pub fn supported_range(&self) -> (f64, f64) {
        (self.regime_b_range[0], self.grounded_range[1])
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    /// Canonical text: sorted keys, no whitespace, reals with 17 significant
    /// digits, integers exact.
    pub fn canonical_text(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        canonical_json(&value)
    }
}

/// SHA-256 hex digest of the canonical serialization of `config`.
pub fn config_hash(config: &BridgeConfig) -> String {
    sha256_hex(config.canonical_text().as_bytes())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Renders a JSON value canonically (see [`BridgeConfig::canonical_text`]).
pub fn canonical_json(value: &Value) -> String {
    let mut out = String::new();
    write_canonical(value, &mut out);
    out
}

fn write_canonical(value: &Value, out: &mut String) {
    match value {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if let Some(u) = n.as_u64() {
                out.push_str(&u.to_string());
            } else if let Some(i) = n.as_i64() {
                out.push_str(&i.to_string());
            } else {
                out.push_str(&format!("{:.16e}", n.as_f64().expect("finite number")));
            }
        }
        Value::String(s) => out.push_str(&Value::String(s.clone()).to_string()),
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(item, out);
            }
            out.push(']');
        }
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, key) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&Value::String(key.clone()).to_string());
                out.push(':');
                write_canonical(&map[key], out);
            }
            out.push('}');
        }
    }
}

/// Per-sample seed: the first 8 bytes (big-endian) of
/// `SHA-256(master_seed.to_be_bytes() || sample_id)`.
pub fn derive_sample_seed(master_seed: u64, sample_id: &str) -> u64 {
    debug_assert!(!sample_id.is_empty(), "sample_id must be non-empty");
    let mut hasher = Sha256::new();
    hasher.update(master_seed.to_be_bytes());
    hasher.update(sample_id.as_bytes());
    let digest = hasher.finalize();
    u64::from_be_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn seed_golden_value() {
        // First 8 bytes of SHA-256(0x0000000000000000 || "x"), computed externally.
        assert_eq!(derive_sample_seed(0, "x"), 12794946726399426790);
        assert_eq!(derive_sample_seed(0, "x"), 0xb190c841d315c0e6);
    }

    #[test]
    fn seed_distinguishes_ids() {
        assert_eq!(derive_sample_seed(42, "a"), derive_sample_seed(42, "a"));
        assert_ne!(derive_sample_seed(42, "a"), derive_sample_seed(42, "b"));
        assert_ne!(derive_sample_seed(42, "a"), derive_sample_seed(43, "a"));
    }

    #[test]
    fn empty_object_hash() {
        assert_eq!(canonical_json(&serde_json::json!({})), "{}");
        assert_eq!(
            sha256_hex(b"{}"),
            "44136fa355b3678a1146ad16f7e8649e94fb4fc21fe77e8310c060f61caaff8a"
        );
    }

    #[test]
    fn canonical_text_format() {
        let text = BridgeConfig::default().canonical_text();
        assert!(text.starts_with("{\"amp_scale_coeff\":1.0000000000000001e-1,"));
        assert!(text.contains("\"gamma\":8.0000000000000000e2"));
        assert!(text.contains("\"k_nn\":8,"));
        assert!(!text.contains(' '));
    }

    #[test]
    fn default_config_is_valid() {
        BridgeConfig::default().validate().unwrap();
    }

    #[test]
    fn validation_rejects_bad_values() {
        let cases: Vec<Box<dyn Fn(&mut BridgeConfig)>> = vec![
            Box::new(|c| c.gamma = 0.0),
            Box::new(|c| c.k_nn = 0),
            Box::new(|c| c.tau = -1.0),
            Box::new(|c| c.cone_half_angle_deg = 180.0),
            Box::new(|c| c.cone_half_angle_deg = 0.0),
            Box::new(|c| c.regime_b_range = [2.54, 3.00]),
            Box::new(|c| c.grounded_range = [3.34, 3.06]),
            Box::new(|c| c.tau = f64::NAN),
        ];
        for mutate in cases {
            let mut cfg = BridgeConfig::default();
            mutate(&mut cfg);
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn hash_ignores_key_order_in_file() {
        let a = "gamma = 801.0\nk_nn = 4\ntau = 25.0\n";
        let b = "tau = 25.0\ngamma = 801.0\nk_nn = 4\n";
        let ca = BridgeConfig::from_toml_str(a).unwrap();
        let cb = BridgeConfig::from_toml_str(b).unwrap();
        assert_eq!(config_hash(&ca), config_hash(&cb));
    }

    #[test]
    fn gamma_changes_hash() {
        let a = BridgeConfig::default();
        let b = BridgeConfig {
            gamma: 801.0,
            ..a.clone()
        };
        assert_ne!(config_hash(&a), config_hash(&b));
    }

    #[test]
    fn unknown_key_is_an_error() {
        assert!(BridgeConfig::from_toml_str("gamma = 800.0\nwarp_speed = 9\n").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = BridgeConfig::default();
        let back = BridgeConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(config_hash(&cfg), config_hash(&back));
    }

    #[test]
    fn every_field_is_hash_sensitive() {
        let base = BridgeConfig::default();
        let base_hash = config_hash(&base);
        let Value::Object(map) = serde_json::to_value(&base).unwrap() else {
            unreachable!()
        };
        for key in map.keys() {
            let mut changed = map.clone();
            let v = changed.get_mut(key).unwrap();
            *v = match v.clone() {
                Value::Number(n) if n.is_u64() => Value::from(n.as_u64().unwrap() + 1),
                Value::Number(n) => Value::from(n.as_f64().unwrap() * 1.001 + 1e-6),
                Value::String(s) => Value::from(format!("{s}x")),
                Value::Array(items) => {
                    let mut items = items.clone();
                    items[0] = Value::from(items[0].as_f64().unwrap() - 0.01);
                    Value::Array(items)
                }
                other => panic!("unexpected field type {other:?}"),
            };
            let cfg: BridgeConfig = serde_json::from_value(Value::Object(changed)).unwrap();
            assert_ne!(config_hash(&cfg), base_hash, "field {key} not hashed");
        }
    }

    proptest! {
        #[test]
        fn seed_is_pure(master in any::<u64>(), id in "[a-z0-9-]{1,24}") {
            let first = derive_sample_seed(master, &id);
            for _ in 0..1000 {
                prop_assert_eq!(derive_sample_seed(master, &id), first);
            }
        }

        #[test]
        fn canonical_text_ignores_insertion_order(perm in Just((0..26usize).collect::<Vec<_>>()).prop_shuffle()) {
            let Value::Object(map) = serde_json::to_value(BridgeConfig::default()).unwrap() else {
                unreachable!()
            };
            let entries: Vec<(String, Value)> = map.into_iter().collect();
            let mut shuffled = serde_json::Map::new();
            for &i in perm.iter().filter(|&&i| i < entries.len()) {
                shuffled.insert(entries[i].0.clone(), entries[i].1.clone());
            }
            prop_assert_eq!(
                canonical_json(&Value::Object(shuffled)),
                BridgeConfig::default().canonical_text()
            );
        }
    }
}
