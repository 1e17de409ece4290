use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use magsig_core::bench::{
    aggregate, aggregate_csv, chance_level_check, metrics_csv, run_ablation_suite, run_benchmark,
    Task,
};
use magsig_core::conditioning::load_conditioning;
use magsig_core::emit::{
    audit_integrity, emit_dataset, load_dataset, verify_checksums, Bridge, DatasetPlan, PlanKind,
};
use magsig_core::splits::{audit_split, build_split, parse_ratios, SplitStrategy, DEFAULT_RATIOS};
use magsig_core::validate::{anchor_fidelity_report, run_sanity_suite};
use magsig_core::{
    classify, generate_demo_bank, ingest_bank, BridgeConfig, ConditioningSource, MorphologyBank,
    Regime,
};
use serde::Serialize;

const DEMO_BANK_SEED: u64 = 7;

/// Synthetic battery magnetic-signature generation, validation and benchmarking.
#[derive(Parser)]
#[command(name = "magsig", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct BridgeArgs {
    /// Morphology bank: `demo`, `demo:SEED`, or a bank file.
    #[arg(long, default_value = "demo")]
    bank: String,
    /// Bridge configuration file (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct Common {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Write the command's report document (JSON) here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the procedural demo morphology bank.
    DemoBank {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEMO_BANK_SEED)]
        seed: u64,
        /// Also store per-anchor mean and std.
        #[arg(long)]
        with_stats: bool,
    },
    /// Fit the discriminant subspace and write the model.
    Fit {
        #[command(flatten)]
        bridge: BridgeArgs,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Emit a dataset directory from a plan.
    Generate {
        #[command(flatten)]
        bridge: BridgeArgs,
        #[arg(long, default_value = "demo-small")]
        plan: PlanKind,
        /// `demo:N` or a conditioning table.
        #[arg(long, default_value = "demo:100")]
        conditioning: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run the seven integrity checks on a dataset directory.
    Audit {
        dataset: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Verify every digest in a dataset's SHA256SUMS.
    Checksum {
        dataset: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Build a split of a dataset and audit it for leakage.
    Split {
        dataset: PathBuf,
        #[arg(
            long = "split-strategy",
            alias = "strategy",
            default_value = "by_cell_primary"
        )]
        split_strategy: SplitStrategy,
        #[arg(long)]
        ratios: Option<String>,
        /// Write the split assignment (JSON) here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Run the five-invariant sanity suite.
    Sanity {
        #[command(flatten)]
        bridge: BridgeArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Compare healthy synthetic samples with the real scans at grounded anchors.
    Fidelity {
        #[command(flatten)]
        bridge: BridgeArgs,
        /// Single anchor voltage; every grounded anchor when omitted.
        #[arg(long)]
        anchor: Option<f64>,
        #[arg(long, default_value_t = 41)]
        n: usize,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[command(flatten)]
        common: Common,
    },
    /// Run tasks T1-T4 on a dataset and write metric tables.
    Bench {
        dataset: PathBuf,
        #[arg(long = "split-strategy", default_value = "by_cell_primary")]
        split_strategy: SplitStrategy,
        #[arg(long)]
        ratios: Option<String>,
        /// Directory for metrics.csv and metrics_summary.csv.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run ablation scenarios A0-A3 on a grounded pilot.
    Ablate {
        #[command(flatten)]
        bridge: BridgeArgs,
        #[arg(long, default_value = "demo:40")]
        conditioning: String,
        #[arg(long, default_value_t = 310)]
        n: usize,
        /// Directory for the per-seed metric table.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn load_bank(spec: &str) -> Result<MorphologyBank> {
    if spec == "demo" {
        return Ok(generate_demo_bank(DEMO_BANK_SEED));
    }
    if let Some(seed) = spec.strip_prefix("demo:") {
        let seed = seed
            .parse()
            .with_context(|| format!("bad demo bank seed in {spec:?}"))?;
        return Ok(generate_demo_bank(seed));
    }
    Ok(ingest_bank(spec)?)
}

fn load_bridge(args: &BridgeArgs) -> Result<Bridge> {
    let config = match &args.config {
        Some(path) => BridgeConfig::load(path)?,
        None => BridgeConfig::default(),
    };
    Ok(Bridge::fit(load_bank(&args.bank)?, config)?)
}

fn write_report<T: Serialize>(path: Option<&Path>, report: &T) -> Result<()> {
    if let Some(path) = path {
        let text = serde_json::to_string_pretty(report)?;
        fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn status(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

fn ratios(text: Option<&str>) -> Result<[f64; 3]> {
    Ok(match text {
        Some(t) => parse_ratios(t)?,
        None => DEFAULT_RATIOS,
    })
}

fn run(command: Command) -> Result<bool> {
    match command {
        Command::DemoBank {
            out,
            seed,
            with_stats,
        } => {
            let bank = generate_demo_bank(seed);
            bank.write(&out, with_stats)?;
            println!(
                "wrote {} scans at {} anchors to {}",
                bank.len(),
                bank.anchors().len(),
                out.display()
            );
            Ok(true)
        }
        Command::Fit {
            bridge,
            out,
            common,
        } => {
            let b = load_bridge(&bridge)?;
            b.model().write(&out)?;
            let g = b.model().geometry();
            println!(
                "within-class scatter {:.4}  mean separation {:.4}  min separation {:.4}  ratio {:.2}",
                g.within_scatter,
                g.mean_separation,
                g.min_separation,
                g.ratio()
            );
            println!("state direction {:?}", b.model().state_direction().to_vec());
            println!("config hash {}", b.config_hash());
            write_report(
                common.report.as_deref(),
                &serde_json::json!({
                    "config_hash": b.config_hash(),
                    "state_direction": b.model().state_direction().to_vec(),
                    "within_scatter": g.within_scatter,
                    "mean_separation": g.mean_separation,
                    "min_separation": g.min_separation,
                }),
            )?;
            Ok(true)
        }
        Command::Generate {
            bridge,
            plan,
            conditioning,
            out,
            common,
        } => {
            let b = load_bridge(&bridge)?;
            let source = ConditioningSource::parse(&conditioning, common.seed)?;
            let plan = DatasetPlan::new(plan, source, common.seed);
            let summary = emit_dataset(&plan, &b, &out)?;
            println!(
                "wrote {} rows ({} grounded, {} anomaly, {} regime_b) to {}",
                summary.counts.total,
                summary.counts.grounded_clean,
                summary.counts.anomaly,
                summary.counts.regime_b,
                out.display()
            );
            write_report(common.report.as_deref(), &summary.counts)?;
            Ok(true)
        }
        Command::Audit { dataset, common } => {
            let report = audit_integrity(&dataset)?;
            for (name, n) in report.checks() {
                println!("{} {name}: {n}", status(n == 0));
            }
            println!("{} rows audited", report.rows);
            write_report(common.report.as_deref(), &report)?;
            Ok(report.is_clean())
        }
        Command::Checksum { dataset, common } => {
            let report = verify_checksums(&dataset)?;
            for f in &report.mismatched {
                println!("MISMATCH {f}");
            }
            for f in &report.missing {
                println!("MISSING {f}");
            }
            println!(
                "{} {} files checked",
                status(report.is_ok()),
                report.checked
            );
            write_report(common.report.as_deref(), &report)?;
            Ok(report.is_ok())
        }
        Command::Split {
            dataset,
            split_strategy,
            ratios: r,
            out,
            common,
        } => {
            let rows = load_dataset(&dataset)?;
            let split = build_split(&rows, split_strategy, ratios(r.as_deref())?, common.seed)?;
            let leak = audit_split(&rows, &split)?;
            let [a, b, c] = split.sizes();
            println!("{split_strategy}: train {a}  val {b}  test {c}");
            println!(
                "cells in multiple subsets {}  cross-split parent-child pairs {}  sample id overlap {}",
                leak.cells_in_multiple_subsets, leak.cross_split_parent_child_pairs, leak.sample_id_overlap
            );
            if let Some(out) = out {
                split.write(&out)?;
            }
            write_report(common.report.as_deref(), &leak)?;
            Ok(split_strategy != SplitStrategy::ByCellPrimary || leak.is_clean())
        }
        Command::Sanity { bridge, common } => {
            let b = load_bridge(&bridge)?;
            let report = run_sanity_suite(&b, common.seed)?;
            for e in &report.entries {
                println!("{} {} {}", status(e.passed), e.id, e.name);
            }
            println!(
                "{}/{} invariants hold",
                report.n_passed(),
                report.entries.len()
            );
            write_report(common.report.as_deref(), &report)?;
            Ok(report.passed())
        }
        Command::Fidelity {
            bridge,
            anchor,
            n,
            alpha,
            common,
        } => {
            let b = load_bridge(&bridge)?;
            let anchors = match anchor {
                Some(v) => vec![v],
                None => b
                    .bank()
                    .anchors()
                    .iter()
                    .copied()
                    .filter(|&v| {
                        classify(v, b.bank(), b.config())
                            .is_ok_and(|c| c.regime == Regime::Grounded)
                    })
                    .collect(),
            };
            let mut ok = true;
            let mut reports = Vec::new();
            for v in anchors {
                let r = anchor_fidelity_report(&b, v, n, alpha, common.seed)?;
                let (lo, hi) = r.std_ratio_range();
                let pass = r.channels_passed == r.channels.len() && lo >= 0.95 && hi <= 1.05;
                ok &= pass;
                println!(
                    "{} {v:.2} V: KS {}/{} channels  std ratio [{lo:.4}, {hi:.4}]  correlation MAD {:.4}",
                    status(pass),
                    r.channels_passed,
                    r.channels.len(),
                    r.correlation_mad
                );
                reports.push(r);
            }
            write_report(common.report.as_deref(), &reports)?;
            Ok(ok)
        }
        Command::Bench {
            dataset,
            split_strategy,
            ratios: r,
            out,
            common,
        } => {
            let rows = load_dataset(&dataset)?;
            let split = build_split(&rows, split_strategy, ratios(r.as_deref())?, common.seed)?;
            let outcome = run_benchmark(&rows, &split, common.seed)?;
            let summary = aggregate(&outcome.rows);
            fs::create_dir_all(&out)?;
            fs::write(out.join("metrics.csv"), metrics_csv(&outcome.rows)?)?;
            fs::write(out.join("metrics_summary.csv"), aggregate_csv(&summary)?)?;
            for a in summary.iter().filter(|a| a.model == "best") {
                println!(
                    "{} {} {} {}: {:.3} ± {:.3}",
                    a.task, a.protocol, a.shot, a.metric, a.mean, a.std
                );
            }
            for s in &outcome.skipped {
                println!("skipped: {s}");
            }
            let mut ok = true;
            let mut checks = Vec::new();
            for task in [Task::T2SecondLife, Task::T3Anomaly3Way, Task::T4Subtype4Way] {
                for c in chance_level_check(&rows, &split, task, common.seed)? {
                    println!(
                        "{} chance {} {}: {:.3} (expected {:.3})",
                        status(c.passed),
                        c.task,
                        c.model,
                        c.balanced_accuracy,
                        c.chance
                    );
                    ok &= c.passed;
                    checks.push(c);
                }
            }
            write_report(
                common.report.as_deref(),
                &serde_json::json!({ "summary": summary, "skipped": outcome.skipped, "chance": checks }),
            )?;
            Ok(ok)
        }
        Command::Ablate {
            bridge,
            conditioning,
            n,
            out,
            common,
        } => {
            let b = load_bridge(&bridge)?;
            let cells = load_conditioning(&ConditioningSource::parse(&conditioning, common.seed)?)?;
            let report = run_ablation_suite(&b, &cells, n, common.seed)?;
            for s in &report.scenarios {
                let r2: Vec<String> = s
                    .t1_r2
                    .iter()
                    .map(|(k, v)| format!("k={k} {v:.3}"))
                    .collect();
                let ba: Vec<String> = s
                    .t2_ba
                    .iter()
                    .map(|(k, v)| format!("k={k} {v:.3}"))
                    .collect();
                println!(
                    "{}  T1 r2 [{}]  T2 BA [{}]",
                    s.scenario,
                    r2.join(", "),
                    ba.join(", ")
                );
            }
            let checks = report.threshold_checks();
            for c in &checks {
                println!("{} {}: {:.4}", status(c.passed), c.name, c.value);
            }
            if let Some(out) = out {
                fs::create_dir_all(&out)?;
                fs::write(
                    out.join("ablation_metrics.csv"),
                    metrics_csv(&report.metrics)?,
                )?;
            }
            write_report(common.report.as_deref(), &report)?;
            Ok(checks.iter().all(|c| c.passed))
        }
    }
}
