//! Fixtures shared by the criterion benches in `benches/`.

use magsig_core::conditioning::demo_conditioning;
use magsig_core::emit::Bridge;
use magsig_core::{generate_demo_bank, BridgeConfig, GenerationRequest, Signature};

/// Bridge fitted on the demo bank with default configuration.
pub fn demo_bridge() -> Bridge {
    Bridge::fit(generate_demo_bank(7), BridgeConfig::default()).expect("demo bank fits")
}

/// `n` grounded requests spread over the grounded range and a few demo cells.
pub fn grounded_requests(n: usize) -> Vec<GenerationRequest> {
    let cells = demo_conditioning(8, 1).expect("demo cells");
    (0..n)
        .map(|i| {
            let c = &cells[i % cells.len()];
            let v = 3.06 + 0.28 * i as f64 / n.max(1) as f64;
            GenerationRequest::grounded(
                format!("bench-{i}"),
                v,
                c.soc,
                c.soh,
                c.u.to_vec(),
                c.cell_id.clone(),
            )
        })
        .collect()
}

/// The first `n` real scans of the demo bank.
pub fn bank_signatures(bridge: &Bridge, n: usize) -> Vec<Signature> {
    bridge
        .bank()
        .labelled_samples()
        .map(|(_, s)| s.clone())
        .take(n)
        .collect()
}
