//! Split construction and leakage audit over hand-built datasets.

use magsig_core::splits::{
    audit_split, build_split, SplitAssignment, SplitStrategy, DEFAULT_RATIOS,
};
use magsig_core::{
    AnomalyOrigin, AnomalySubtype, Chemistry, Regime, SampleRecord, SecondLifeClass, Signature,
    U_DIM,
};
use proptest::prelude::*;

fn row(id: String, cell: Option<String>, regime: Regime) -> SampleRecord {
    let grounded = regime == Regime::Grounded;
    SampleRecord {
        signature: Signature::zeros(),
        sample_id: id,
        parent_sample_id: None,
        cell_id: cell,
        generation_seed: 0,
        bridge_version: "v1.0".into(),
        bridge_config_hash: String::new(),
        schema_version: "1.0".into(),
        voltage: if grounded { 3.2 } else { 2.81 },
        soc: if grounded { 20.0 } else { f64::NAN },
        soh: if grounded { 0.9 } else { f64::NAN },
        chemistry: Chemistry::Lfp,
        regime,
        nearest_anchor: if grounded { 3.1 } else { 2.81 },
        u_features: [if grounded { 1.0 } else { f64::NAN }; U_DIM],
        second_life_class: grounded.then_some(SecondLifeClass::Reuse),
        anomaly_flag: !grounded,
        anomaly_subtype: AnomalySubtype::None,
        anomaly_origin: if grounded {
            AnomalyOrigin::None
        } else {
            AnomalyOrigin::RegimeB
        },
        anomaly_severity: f64::NAN,
    }
}

/// `n_cells` cells of `per_cell` rows, one child per `child_every` grounded
/// rows, and Regime-B rows spread over three anchors.
fn dataset(
    n_cells: usize,
    per_cell: usize,
    child_every: usize,
    n_regime_b: usize,
) -> Vec<SampleRecord> {
    let mut rows = Vec::new();
    for i in 0..n_cells * per_cell {
        rows.push(row(
            format!("g-{i:06}"),
            Some(format!("cell-{:04}", i % n_cells)),
            Regime::Grounded,
        ));
    }
    let parents: Vec<SampleRecord> = rows.iter().step_by(child_every).cloned().collect();
    for (j, p) in parents.iter().enumerate() {
        let mut c = p.clone();
        c.sample_id = format!("a-{j:06}");
        c.parent_sample_id = Some(p.sample_id.clone());
        c.anomaly_flag = true;
        c.anomaly_subtype = AnomalySubtype::TemporalWarp;
        c.anomaly_origin = AnomalyOrigin::SyntheticSensor;
        c.anomaly_severity = 0.5;
        rows.push(c);
    }
    for i in 0..n_regime_b {
        let mut b = row(format!("b-{i:06}"), None, Regime::RegimeB);
        b.nearest_anchor = [2.54, 2.81, 3.0][i % 3];
        rows.push(b);
    }
    rows
}

#[test]
fn primary_split_is_leakage_free_and_proportional() {
    let rows = dataset(80, 70, 10, 560);
    let split = build_split(&rows, SplitStrategy::ByCellPrimary, DEFAULT_RATIOS, 1).unwrap();
    assert_eq!(audit_split(&rows, &split).unwrap().is_clean(), true);
    let n = rows.len() as f64;
    for (size, r) in split.sizes().iter().zip(DEFAULT_RATIOS) {
        assert!(
            (*size as f64 / n - r).abs() <= 0.03 * r,
            "{:?}",
            split.sizes()
        );
    }
    // Each Regime-B anchor stays in one subset.
    let lookup = split.lookup();
    for anchor in [2.54, 2.81, 3.0] {
        let subs: std::collections::HashSet<_> = rows
            .iter()
            .filter(|r| r.regime == Regime::RegimeB && r.nearest_anchor == anchor)
            .map(|r| lookup[r.sample_id.as_str()])
            .collect();
        assert_eq!(subs.len(), 1);
    }
}

#[test]
fn optimistic_split_leaks() {
    let rows = dataset(30, 20, 5, 30);
    for seed in 0..5 {
        let split = build_split(
            &rows,
            SplitStrategy::ByRecordOptimisticBaseline,
            DEFAULT_RATIOS,
            seed,
        )
        .unwrap();
        let report = audit_split(&rows, &split).unwrap();
        assert!(report.cells_in_multiple_subsets > 0);
        assert!(report.cross_split_parent_child_pairs > 0);
        assert_eq!(report.sample_id_overlap, 0);
    }
}

#[test]
fn single_cell_goes_to_train() {
    let rows = dataset(1, 12, 4, 0);
    let split = build_split(&rows, SplitStrategy::ByCellPrimary, DEFAULT_RATIOS, 3).unwrap();
    assert_eq!(split.sizes(), [rows.len(), 0, 0]);
    assert!(audit_split(&rows, &split).unwrap().is_clean());
}

#[test]
fn constructed_cross_pair_is_counted() {
    let rows = dataset(2, 2, 4, 0);
    // g-000000 (cell-0000) has child a-000000.
    let split = SplitAssignment {
        name: "hand".into(),
        seed: 0,
        ratios: DEFAULT_RATIOS,
        train: vec![
            "g-000000".into(),
            "g-000002".into(),
            "g-000001".into(),
            "g-000003".into(),
        ],
        val: vec![],
        test: vec!["a-000000".into()],
    };
    let report = audit_split(&rows, &split).unwrap();
    assert_eq!(report.cross_split_parent_child_pairs, 1);
    assert_eq!(report.cells_in_multiple_subsets, 1);
    assert_eq!(report.sample_id_overlap, 0);

    let mut dup = split.clone();
    dup.val.push("g-000001".into());
    assert_eq!(audit_split(&rows, &dup).unwrap().sample_id_overlap, 1);

    let mut unknown = split.clone();
    unknown.val.push("zzz".into());
    assert!(audit_split(&rows, &unknown).is_err());
    let mut partial = split;
    partial.train.pop();
    assert!(audit_split(&rows, &partial).is_err());
}

#[test]
fn errors_on_degenerate_inputs() {
    let rows = dataset(3, 3, 3, 3);
    assert!(build_split(&rows, SplitStrategy::ByCellPrimary, [0.5, 0.5, 0.0], 0).is_err());
    assert!(build_split(&rows, SplitStrategy::ByCellPrimary, [0.5, 0.4, 0.2], 0).is_err());
    let only_b: Vec<_> = rows
        .into_iter()
        .filter(|r| r.regime == Regime::RegimeB)
        .collect();
    assert!(build_split(&only_b, SplitStrategy::ByCellPrimary, DEFAULT_RATIOS, 0).is_err());
}

#[test]
fn split_file_round_trips() {
    let rows = dataset(5, 4, 3, 6);
    let split = build_split(&rows, SplitStrategy::ByCellPrimary, DEFAULT_RATIOS, 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("split.json");
    split.write(&path).unwrap();
    assert_eq!(SplitAssignment::read(&path).unwrap(), split);
    assert_eq!(
        build_split(&rows, SplitStrategy::ByCellPrimary, DEFAULT_RATIOS, 9).unwrap(),
        split
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn primary_partitions_and_closes(
        n_cells in 1usize..12,
        per_cell in 1usize..8,
        child_every in 1usize..6,
        n_b in 0usize..9,
        seed in any::<u64>(),
    ) {
        let rows = dataset(n_cells, per_cell, child_every, n_b);
        let split = build_split(&rows, SplitStrategy::ByCellPrimary, DEFAULT_RATIOS, seed).unwrap();
        prop_assert_eq!(split.sizes().iter().sum::<usize>(), rows.len());
        prop_assert!(audit_split(&rows, &split).unwrap().is_clean());
        let lookup = split.lookup();
        for r in &rows {
            if let Some(p) = &r.parent_sample_id {
                prop_assert_eq!(lookup[p.as_str()], lookup[r.sample_id.as_str()]);
            }
        }
    }

    #[test]
    fn optimistic_partitions(n_cells in 1usize..12, per_cell in 1usize..8, seed in any::<u64>()) {
        let rows = dataset(n_cells, per_cell, 3, 3);
        let split = build_split(&rows, SplitStrategy::ByRecordOptimisticBaseline, DEFAULT_RATIOS, seed).unwrap();
        prop_assert_eq!(split.sizes().iter().sum::<usize>(), rows.len());
        prop_assert_eq!(audit_split(&rows, &split).unwrap().sample_id_overlap, 0);
    }
}
