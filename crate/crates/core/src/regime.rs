//! Request-voltage classification.

use crate::bank::MorphologyBank;
use crate::config::BridgeConfig;
use crate::error::{Error, Result};
use crate::record::Regime;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Classification {
    pub regime: Regime,
    pub nearest_anchor: f64,
}

/// Grounded on the closed grounded range, Regime B on the half-open range
/// below it, rejected elsewhere.
pub fn classify(v: f64, bank: &MorphologyBank, config: &BridgeConfig) -> Result<Classification> {
    let (min, max) = config.supported_range();
    if !v.is_finite() || v < min || v > max {
        return Err(Error::VoltageRejected {
            voltage: v,
            min,
            max,
        });
    }
    let regime = if v >= config.grounded_range[0] {
        Regime::Grounded
    } else {
        Regime::RegimeB
    };
    let nearest_anchor = bank.anchors()[bank.nearest_anchor_index(v)];
    Ok(Classification {
        regime,
        nearest_anchor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::generate_demo_bank;
    use proptest::prelude::*;

    #[test]
    fn boundary_table() {
        let bank = generate_demo_bank(1);
        let cfg = BridgeConfig::default();
        let cases = [
            (2.54, Regime::RegimeB),
            (2.81, Regime::RegimeB),
            (3.00, Regime::RegimeB),
            (3.06, Regime::Grounded),
            (3.10, Regime::Grounded),
            (3.34, Regime::Grounded),
        ];
        for (v, regime) in cases {
            assert_eq!(classify(v, &bank, &cfg).unwrap().regime, regime, "{v}");
        }
        for v in [2.00, 4.00, 2.5399, 3.3401, f64::NAN] {
            let err = classify(v, &bank, &cfg).unwrap_err();
            assert!(err.to_string().contains("[2.54, 3.34]"), "{err}");
        }
    }

    #[test]
    fn nearest_anchor_selection() {
        let bank = generate_demo_bank(1);
        let cfg = BridgeConfig::default();
        assert_eq!(classify(3.08, &bank, &cfg).unwrap().nearest_anchor, 3.10);
        assert_eq!(classify(3.06, &bank, &cfg).unwrap().nearest_anchor, 3.10);
        assert_eq!(classify(3.2201, &bank, &cfg).unwrap().nearest_anchor, 3.34);
        assert_eq!(classify(2.60, &bank, &cfg).unwrap().nearest_anchor, 2.54);
    }

    proptest! {
        #[test]
        fn regimes_partition_supported_range(v in 2.54f64..=3.34) {
            let bank = generate_demo_bank(1);
            let cfg = BridgeConfig::default();
            let c = classify(v, &bank, &cfg).unwrap();
            let grounded = (3.06..=3.34).contains(&v);
            let regime_b = (2.54..3.06).contains(&v);
            prop_assert!(grounded != regime_b);
            prop_assert_eq!(c.regime == Regime::Grounded, grounded);
            prop_assert!(bank.anchors().contains(&c.nearest_anchor));
        }
    }
}
