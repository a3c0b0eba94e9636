// SPDX-License-Identifier: Apache-2.0

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use confidant_core::policy::{PolicyLayer, PolicySet};
use confidant_sim::conformance::conformance_report;
use confidant_sim::scenarios::{generated_policy, POLICY_BUDGET};
use confidant_sim::{parse_seed, replay_transcript, run_scenario, SimConfig, SimError, Verdict, SCENARIOS};

#[derive(Parser)]
#[command(
    name = "confidant",
    version,
    about = "Scenario harness for attested confidential job routing"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario, or `all`, and print its verdict.
    Run {
        scenario: String,
        /// Up to 64 hex digits, left-padded with zeros.
        #[arg(long, default_value = "0")]
        seed: String,
        /// TOML config; defaults to the scenario's built-in config.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory for transcripts and verdicts.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-validate a JSON-lines transcript.
    Replay {
        transcript: PathBuf,
    },
    ListScenarios,
    /// Print a scenario's built-in config.
    ShowConfig {
        scenario: String,
    },
    Policy {
        #[command(subcommand)]
        command: PolicyCommand,
    },
    /// Run every scenario and print the conformance table.
    Conformance {
        #[arg(long, default_value = "0")]
        seed: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum PolicyCommand {
    /// Summarize a serialized policy file.
    Show { file: PathBuf },
    /// Write a generated policy with `entries` measurements.
    Generate {
        #[arg(long, default_value_t = 1000)]
        entries: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: &Path) -> Result<SimConfig, SimError> {
    let text = std::fs::read_to_string(path)?;
    SimConfig::from_toml(&text)
}

fn print_verdicts(verdicts: &[Verdict]) -> bool {
    for v in verdicts {
        println!("{v}");
        if let Some(p) = &v.transcript {
            println!("transcript {}", p.display());
        }
    }
    verdicts.iter().all(Verdict::passed)
}

fn run_all(seed: &[u8; 32], out: Option<&Path>) -> Result<Vec<Verdict>, SimError> {
    SCENARIOS
        .iter()
        .map(|s| run_scenario(s.name, None, seed, out))
        .collect()
}

fn show_policy(p: &PolicySet, bytes: usize) {
    println!(
        "version {}  entries {}  bytes {bytes}  budget {POLICY_BUDGET}",
        p.version(),
        p.len()
    );
    for (layer, name) in [
        (PolicyLayer::Vendor, "vendor accept"),
        (PolicyLayer::Platform, "platform accept"),
        (PolicyLayer::Community, "community reject"),
    ] {
        let entries = p.layer(layer);
        println!("{name} ({})", entries.len());
        for m in entries {
            println!("  {:<9} {}  {}", format!("{:?}", m.class), m.digest.to_hex(), m.label);
        }
    }
}

fn execute(cli: Cli) -> Result<bool, SimError> {
    match cli.command {
        Command::Run {
            scenario,
            seed,
            config,
            out,
        } => {
            let seed = parse_seed(&seed)?;
            let verdicts = if scenario == "all" {
                if config.is_some() {
                    return Err(SimError::ConfigInvalid("--config needs a single scenario".into()));
                }
                run_all(&seed, out.as_deref())?
            } else {
                let config = config.as_deref().map(load_config).transpose()?;
                vec![run_scenario(&scenario, config, &seed, out.as_deref())?]
            };
            Ok(print_verdicts(&verdicts))
        }
        Command::Replay { transcript } => {
            let report = replay_transcript(&transcript)?;
            println!(
                "{} events, {} heights, {} nodes, {} jobs, {} completed",
                report.events, report.heights, report.nodes, report.jobs, report.completed
            );
            for v in &report.violations {
                println!("  {v}");
            }
            println!("{}", if report.is_clean() { "VALID" } else { "INVALID" });
            Ok(report.is_clean())
        }
        Command::ListScenarios => {
            for s in SCENARIOS {
                println!("{:<28} {}", s.name, s.summary);
            }
            Ok(true)
        }
        Command::ShowConfig { scenario } => {
            print!("{}", confidant_sim::find_scenario(&scenario)?.config);
            Ok(true)
        }
        Command::Policy { command } => match command {
            PolicyCommand::Show { file } => {
                let bytes = std::fs::read(&file)?;
                let p = PolicySet::deserialize(&bytes).map_err(|e| SimError::ConfigInvalid(e.to_string()))?;
                show_policy(&p, bytes.len());
                Ok(bytes.len() <= POLICY_BUDGET)
            }
            PolicyCommand::Generate { entries, out } => {
                let bytes = generated_policy(entries).serialize();
                std::fs::write(&out, &bytes)?;
                println!("{entries} entries, {} bytes -> {}", bytes.len(), out.display());
                Ok(true)
            }
        },
        Command::Conformance { seed, out } => {
            let verdicts = run_all(&parse_seed(&seed)?, None)?;
            let names: Vec<&str> = SCENARIOS.iter().map(|s| s.name).collect();
            let report = conformance_report(&names, &verdicts)?;
            match out {
                Some(path) => std::fs::write(path, &report)?,
                None => print!("{report}"),
            }
            Ok(verdicts.iter().all(Verdict::passed))
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
