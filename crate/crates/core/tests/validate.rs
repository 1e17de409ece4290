//! Sanity suite, fidelity report, and KS checks against reference values.

use std::sync::OnceLock;

use magsig_core::emit::Bridge;
use magsig_core::validate::{anchor_fidelity_report, ks_two_sample, run_sanity_suite};
use magsig_core::{generate_demo_bank, BridgeConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Deserialize;

mod oracles;
use oracles::brute_force_ks;

fn bridge() -> &'static Bridge {
    static B: OnceLock<Bridge> = OnceLock::new();
    B.get_or_init(|| Bridge::fit(generate_demo_bank(7), BridgeConfig::default()).unwrap())
}

#[derive(Deserialize)]
struct KsCase {
    a: Vec<f64>,
    b: Vec<f64>,
    statistic: f64,
    p_value: f64,
}

fn ks_cases() -> Vec<KsCase> {
    let text = include_str!("fixtures/ks_reference.json");
    serde_json::from_str(text).unwrap()
}

#[test]
fn ks_matches_reference_cases() {
    let cases = ks_cases();
    assert_eq!(cases.len(), 100);
    for (i, c) in cases.iter().enumerate() {
        let r = ks_two_sample(&c.a, &c.b).unwrap();
        assert!(
            (r.statistic - c.statistic).abs() <= 1e-15,
            "case {i}: {} vs {}",
            r.statistic,
            c.statistic
        );
        assert!(
            (r.p_value - c.p_value).abs() <= 1e-6,
            "case {i}: {} vs {}",
            r.p_value,
            c.p_value
        );
    }
}

#[test]
fn ks_statistic_equals_brute_force_sup() {
    let mut rng = ChaCha20Rng::seed_from_u64(17);
    for _ in 0..100 {
        let na = rng.random_range(5..60);
        let nb = rng.random_range(5..60);
        let shift: f64 = rng.random_range(-1.0..1.0);
        // Coarse rounding forces ties across and within samples.
        let a: Vec<f64> = (0..na)
            .map(|_| (rng.random_range(-3.0..3.0f64) * 4.0).round() / 4.0)
            .collect();
        let b: Vec<f64> = (0..nb)
            .map(|_| (rng.random_range(-3.0..3.0f64) + shift) * 10.0)
            .collect();
        let r = ks_two_sample(&a, &b).unwrap();
        assert_eq!(r.statistic, brute_force_ks(&a, &b));
    }
}

#[test]
fn demo_pipeline_passes_all_invariants() {
    let report = run_sanity_suite(bridge(), 7).unwrap();
    for e in &report.entries {
        println!("{} {} {} {}", e.id, e.name, e.passed, e.detail);
    }
    assert_eq!(report.entries.len(), 5);
    assert!(report.passed());
}

#[test]
fn zero_gain_fails_monotonicity() {
    let b = bridge();
    let config = BridgeConfig {
        gamma: 0.0,
        ..BridgeConfig::default()
    };
    assert!(Bridge::with_model(b.bank().clone(), b.model().clone(), config.clone()).is_err());
    let flat = Bridge::with_model_unchecked(b.bank().clone(), b.model().clone(), config);
    let report = run_sanity_suite(&flat, 7).unwrap();
    let failed: Vec<u8> = report
        .entries
        .iter()
        .filter(|e| !e.passed)
        .map(|e| e.id)
        .collect();
    assert_eq!(failed, vec![2]);
}

#[test]
fn grounded_anchor_fidelity() {
    for anchor in [3.10, 3.34] {
        let r = anchor_fidelity_report(bridge(), anchor, 41, 0.05, 7).unwrap();
        println!("{anchor}: {:?} mad {}", r.channels, r.correlation_mad);
        assert_eq!(r.channels_passed, 6);
        let (lo, hi) = r.std_ratio_range();
        assert!(lo >= 0.95 && hi <= 1.05, "{lo} {hi}");
        assert!(r.modulation_bypassed);
        assert!(r.correlation_mad.is_finite());
    }
    assert!(anchor_fidelity_report(bridge(), 3.00, 41, 0.05, 7).is_err());
    assert!(anchor_fidelity_report(bridge(), 3.20, 41, 0.05, 7).is_err());
}
