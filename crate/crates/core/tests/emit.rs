//! Sample generation, dataset emission, and the integrity audit.

use std::path::Path;
use std::sync::OnceLock;

use magsig_core::bank::BaseMode;
use magsig_core::conditioning::demo_conditioning;
use magsig_core::emit::{
    audit_integrity, emit_dataset, load_dataset, verify_checksums, Bridge, DatasetPlan, PlanKind,
    SIGNAL_BYTES,
};
use magsig_core::{
    generate_demo_bank, AnomalyOrigin, AnomalySubtype, BridgeConfig, ConditioningSource,
    GenerationRequest, Regime,
};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn bridge() -> &'static Bridge {
    static B: OnceLock<Bridge> = OnceLock::new();
    B.get_or_init(|| Bridge::fit(generate_demo_bank(7), BridgeConfig::default()).unwrap())
}

fn tiny_plan(seed: u64) -> DatasetPlan {
    DatasetPlan {
        n_grounded: 40,
        n_anomaly: 8,
        n_regime_b: 12,
        ..DatasetPlan::new(
            PlanKind::DemoSmall,
            ConditioningSource::Demo {
                n_cells: 6,
                seed: 3,
            },
            seed,
        )
    }
}

fn grounded_request(id: &str, v: f64, soh: f64) -> GenerationRequest {
    let cell = &demo_conditioning(3, 1).unwrap()[1];
    GenerationRequest::grounded(id, v, cell.soc, soh, cell.u.to_vec(), cell.cell_id.clone())
}

#[test]
fn generation_is_deterministic_and_batch_invariant() {
    let b = bridge();
    let reqs: Vec<_> = (0..5)
        .map(|i| {
            grounded_request(
                &format!("g-{i}"),
                3.07 + 0.05 * i as f64,
                0.8 + 0.03 * i as f64,
            )
        })
        .chain([GenerationRequest::regime_b("b-0", 2.81)])
        .collect();
    let batch = b.generate_batch(&reqs, 42).unwrap();
    for (req, rec) in reqs.iter().zip(&batch) {
        let single = b.generate_sample(req, 42).unwrap();
        assert_eq!(single.signature.to_le_bytes(), rec.signature.to_le_bytes());
        assert_eq!(format!("{single:?}"), format!("{rec:?}"));
        assert!(rec.invariant_violations().is_empty());
    }
    let other = b.generate_sample(&reqs[0], 43).unwrap();
    assert_ne!(other.signature, batch[0].signature);
}

#[test]
fn grounded_records_match_the_direct_chain() {
    let req = grounded_request("g-direct", 3.21, 0.83);
    let rec = bridge().generate_sample(&req, 77).unwrap();
    let direct = bridge()
        .synthesize(
            3.21,
            0.83,
            req.soc.unwrap(),
            req.u.as_ref().unwrap(),
            rec.generation_seed,
        )
        .unwrap();
    assert_eq!(rec.signature, direct);
}

#[test]
fn regime_b_rows_carry_no_state_labels() {
    let rec = bridge()
        .generate_sample(&GenerationRequest::regime_b("b-1", 2.81), 1)
        .unwrap();
    assert_eq!(rec.regime, Regime::RegimeB);
    assert!(rec.soh.is_nan() && rec.soc.is_nan());
    assert!(rec.u_features.iter().all(|u| u.is_nan()));
    assert!(rec.second_life_class.is_none());
    assert!(rec.anomaly_flag);
    assert_eq!(rec.anomaly_origin, AnomalyOrigin::RegimeB);
    let mut bad = GenerationRequest::regime_b("b-2", 2.81);
    bad.soh = Some(0.9);
    assert!(bridge().generate_sample(&bad, 1).is_err());
    assert!(bridge()
        .generate_sample(&GenerationRequest::regime_b("b-3", 4.0), 1)
        .is_err());
}

#[test]
fn healthy_noiseless_sample_is_the_base_draw() {
    let b = bridge();
    let config = BridgeConfig {
        sensor_noise_frac: 0.0,
        ..BridgeConfig::default()
    };
    let quiet = Bridge::with_model(b.bank().clone(), b.model().clone(), config).unwrap();
    let mut req = grounded_request("g-quiet", 3.10, 1.0);
    req.soc = Some(50.0);
    let rec = quiet.generate_sample(&req, 9).unwrap();
    let seed = magsig_core::derive_sample_seed(9, "g-quiet");
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let base = b
        .bank()
        .base_morphology(3.10, BaseMode::Stochastic, &mut rng)
        .unwrap();
    assert_eq!(rec.signature, base);
    assert_eq!(rec.generation_seed, seed);
}

#[test]
fn grounded_requests_must_be_complete() {
    let mut req = grounded_request("g-x", 3.2, 0.9);
    req.u = None;
    assert!(bridge().generate_sample(&req, 1).is_err());
    let req = grounded_request("g-y", 3.2, 0.0);
    assert!(bridge().generate_sample(&req, 1).is_err());
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn emission_round_trip_and_audit() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let summary = emit_dataset(&tiny_plan(5), bridge(), &a).unwrap();
    emit_dataset(&tiny_plan(5), bridge(), &b).unwrap();
    assert_eq!(read(&a.join("SHA256SUMS")), read(&b.join("SHA256SUMS")));
    for f in &summary.files {
        assert_eq!(read(&a.join(f)), read(&b.join(f)), "{f}");
    }
    assert_eq!(summary.counts.total, 60);
    assert_eq!(summary.counts.anomaly, 8);
    assert!(summary.counts.anomaly_subtypes.values().all(|&n| n == 2));

    let rows = load_dataset(&a).unwrap();
    assert_eq!(rows.len(), 60);
    assert!(rows.iter().all(|r| r.invariant_violations().is_empty()));
    let children: Vec<_> = rows
        .iter()
        .filter(|r| r.anomaly_subtype != AnomalySubtype::None)
        .collect();
    for c in &children {
        let parent = rows
            .iter()
            .find(|r| Some(&r.sample_id) == c.parent_sample_id.as_ref())
            .unwrap();
        assert!(parent.is_clean_grounded());
        assert_eq!(parent.soh, c.soh);
        assert_eq!(parent.cell_id, c.cell_id);
    }
    // A regenerated row matches the stored one bit for bit.
    let g = &rows[3];
    let req = GenerationRequest::grounded(
        g.sample_id.clone(),
        g.voltage,
        g.soc,
        g.soh,
        g.u_features.to_vec(),
        g.cell_id.clone().unwrap(),
    );
    let again = bridge().generate_sample(&req, 5).unwrap();
    assert_eq!(format!("{again:?}"), format!("{g:?}"));

    assert!(audit_integrity(&a).unwrap().is_clean());
    assert!(verify_checksums(&a).unwrap().is_ok());

    let other = dir.path().join("c");
    emit_dataset(&tiny_plan(6), bridge(), &other).unwrap();
    assert_ne!(read(&a.join("SHA256SUMS")), read(&other.join("SHA256SUMS")));
}

#[test]
fn audit_counts_constructed_violations() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d");
    emit_dataset(&tiny_plan(8), bridge(), &d).unwrap();

    // Copy row 0's signal over row 1 in the first shard.
    let shard = d.join("shards/part-0000.signals.bin");
    let mut bytes = read(&shard);
    let first = bytes[..SIGNAL_BYTES].to_vec();
    bytes[SIGNAL_BYTES..2 * SIGNAL_BYTES].copy_from_slice(&first);
    std::fs::write(&shard, &bytes).unwrap();
    let report = audit_integrity(&d).unwrap();
    assert_eq!(report.duplicate_signal_hashes, 1);
    assert_eq!(report.violations(), 1);
    let sums = verify_checksums(&d).unwrap();
    assert_eq!(
        sums.mismatched,
        vec!["shards/part-0000.signals.bin".to_string()]
    );

    // Drop one anomaly's parent from every table.
    let rows = load_dataset(&d).unwrap();
    let child = rows
        .iter()
        .find(|r| r.anomaly_subtype != AnomalySubtype::None)
        .unwrap();
    let parent = child.parent_sample_id.clone().unwrap();
    let mut files = vec![d.join("metadata.csv")];
    for i in 0..5 {
        files.push(d.join(format!("shards/part-{i:04}.meta.csv")));
    }
    for f in files {
        let text = std::fs::read_to_string(&f).unwrap();
        let kept: String = text
            .lines()
            .filter(|l| !l.starts_with(&format!("{parent},")))
            .map(|l| format!("{l}\n"))
            .collect();
        std::fs::write(&f, kept).unwrap();
    }
    let report = audit_integrity(&d).unwrap();
    assert_eq!(report.invalid_parents, 1);
    assert_eq!(report.duplicate_signal_hashes, 1);
    assert_eq!(report.id_mismatches, 0);
}

#[test]
fn audit_rejects_unreadable_dataset() {
    let dir = tempfile::tempdir().unwrap();
    assert!(audit_integrity(dir.path()).is_err());
}
