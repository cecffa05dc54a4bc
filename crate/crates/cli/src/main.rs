//! Scenario runner and property-suite entry points.
//!
//! ```text
//! opaxos --scenario common-case --seed 1 --out-dir out/
//! opaxos --scenario failover --config failover.toml --seed 7 --out-dir out/
//! opaxos --scenario checker --checker-budget 500000
//! opaxos --scenario suite-all --seed 3
//! ```
//!
//! The config file is flat `key = value` TOML mirroring the scenario
//! configuration; command-line flags override it. The exit code is nonzero
//! whenever any property or audit fails.

use anyhow::{bail, Context, Result};
use clap::Parser;
use opaxos::checker::{explore, ExploreConfig, Protocol};
use opaxos::scenario::{run_common_case, run_failover, run_threaded, Mode, ScenarioConfig};
use opaxos::suites::{calibration_suite, lemma_suite, safety_suite, smr_suite, SuiteReport};
use std::path::PathBuf;

#[derive(Parser, Debug)]
#[command(
    name = "opaxos",
    about = "One-sided consensus simulator: scenarios, property suites, bounded checking"
)]
struct Args {
    /// common-case | failover | threaded | checker |
    /// suite-lemmas | suite-safety | suite-smr | suite-all
    #[arg(long)]
    scenario: String,

    /// Flat key = value TOML file with scenario settings.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Seed for the deterministic run (mandatory for virtual-time scenarios).
    #[arg(long)]
    seed: Option<u64>,

    /// Directory for trace.jsonl, metrics.csv and counters.txt.
    #[arg(long)]
    out_dir: Option<PathBuf>,

    /// virtual | threaded (overrides the config file).
    #[arg(long)]
    mode: Option<String>,

    /// Feature toggles: piggyback, indirection, write-baseline; prefix with
    /// no- to disable (e.g. --flag no-indirection). Repeatable.
    #[arg(long = "flag")]
    flags: Vec<String>,

    /// Transition budget for checker runs.
    #[arg(long)]
    checker_budget: Option<u64>,

    /// Protocol for --scenario checker:
    /// refpaxos | onesided-direct | onesided-streamlined | smr-single-slot
    #[arg(long, default_value = "onesided-streamlined")]
    protocol: String,
}

fn load_config(args: &Args) -> Result<ScenarioConfig> {
    let mut cfg: ScenarioConfig = match &args.config {
        None => ScenarioConfig::default(),
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
    };
    if args.seed.is_some() {
        cfg.seed = args.seed;
    }
    if let Some(mode) = &args.mode {
        cfg.mode = match mode.as_str() {
            "virtual" => Mode::Virtual,
            "threaded" => Mode::Threaded,
            other => bail!("unknown mode {other}"),
        };
    }
    for flag in &args.flags {
        match flag.as_str() {
            "piggyback" => cfg.piggyback = true,
            "no-piggyback" => cfg.piggyback = false,
            "indirection" => cfg.indirection = true,
            "no-indirection" => cfg.indirection = false,
            "write-baseline" => cfg.write_baseline = true,
            "no-write-baseline" => cfg.write_baseline = false,
            other => bail!("unknown flag {other}"),
        }
    }
    Ok(cfg)
}

fn print_suite(report: &SuiteReport) -> bool {
    print!("{}", report.render());
    report.pass()
}

fn main() -> Result<()> {
    let args = Args::parse();
    let cfg = load_config(&args)?;
    let out_dir = args.out_dir.as_deref();
    let seed = cfg.seed.unwrap_or(0);

    let ok = match args.scenario.as_str() {
        "common-case" => {
            let r = run_common_case(&cfg, out_dir)?;
            println!(
                "common-case: {} slots decided, median latency {:.3} virtual-us, \
                 {} critical rounds, {} total rounds",
                r.decided, r.median_latency_us, r.critical_rounds, r.total_rounds
            );
            if let Some(dir) = out_dir {
                println!("artifacts in {}", dir.display());
            }
            true
        }
        "failover" => {
            let mut cfg = cfg;
            if cfg.crash_at_us.is_none() {
                // Default: crash the initial leader mid-run.
                cfg.crash_at_us = Some((cfg.run_length as f64) * 2.5 * 0.5);
            }
            let r = run_failover(&cfg, out_dir)?;
            println!(
                "failover: crash at {:.1} virtual-us, detection {:.1}, gap {:.1}, \
                 steady throughput {} per 100 virtual-us, {} slots decided",
                r.crash_us, r.detection_us, r.gap_us, r.steady_throughput_per_100us, r.decided
            );
            print!("{}", r.summary_csv);
            true
        }
        "threaded" => {
            let r = run_threaded(&cfg)?;
            println!(
                "threaded stress: {} instances, {} decided, {} attempts, chains consistent: {}",
                r.instances, r.decided_instances, r.total_attempts, r.chain_ok
            );
            r.chain_ok
        }
        "checker" => {
            let protocol = Protocol::ALL
                .into_iter()
                .find(|p| p.name() == args.protocol)
                .with_context(|| format!("unknown protocol {}", args.protocol))?;
            let mut explore_cfg = ExploreConfig::new(protocol);
            if let Some(budget) = args.checker_budget {
                explore_cfg.budget = budget;
            }
            let report = explore(&explore_cfg);
            print!("{}", report.render());
            if let Some(dir) = out_dir {
                std::fs::create_dir_all(dir)?;
                std::fs::write(
                    dir.join("checker_report.json"),
                    serde_json::to_string_pretty(&report)?,
                )?;
            }
            report.ok()
        }
        "suite-lemmas" => print_suite(&lemma_suite(seed, 100_000)),
        "suite-safety" => print_suite(&safety_suite(
            args.checker_budget.unwrap_or(5_000_000),
            true,
        )),
        "suite-smr" => print_suite(&smr_suite(seed)),
        "suite-all" => {
            let mut pass = print_suite(&lemma_suite(seed, 100_000));
            pass &= print_suite(&smr_suite(seed));
            pass &= print_suite(&calibration_suite(seed));
            pass &= print_suite(&safety_suite(
                args.checker_budget.unwrap_or(5_000_000),
                true,
            ));
            pass
        }
        other => bail!("unknown scenario {other}"),
    };

    if !ok {
        bail!("property violations detected");
    }
    Ok(())
}
