use std::time::Instant;

use magsig_core::bench::{run_ablation_suite, Scenario};
use magsig_core::conditioning::demo_conditioning;
use magsig_core::emit::Bridge;
use magsig_core::{generate_demo_bank, BridgeConfig};

fn main() {
    let t = Instant::now();
    let bridge = Bridge::fit(generate_demo_bank(7), BridgeConfig::default()).unwrap();
    eprintln!("fit {:?}", t.elapsed());
    let cells = demo_conditioning(40, 7).unwrap();
    let report = run_ablation_suite(&bridge, &cells, 310, 7).unwrap();
    eprintln!("ablation {:?}", t.elapsed());
    for s in Scenario::ALL {
        let r = report.scenario(s).unwrap();
        println!("{} r2 {:?} ba {:?}", r.scenario, r.t1_r2, r.t2_ba);
    }
    println!("skipped {:?}", report.skipped);
}
