use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cpow_core::chain::parse_golden;
use cpow_core::experiments::{
    compare, emit_report, run_all, write_audit, Check, ExperimentError, Mode, ScenarioSpec,
};
use cpow_core::simnet::{ScenarioConfig, SimError};

const EXIT_FAILED: u8 = 1;
const EXIT_CONFIG: u8 = 2;

#[derive(Parser)]
#[command(name = "cpow", version, about = "Collaborative proof-of-work simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario for several seeds and write reports plus audit logs.
    Run {
        /// Scenario JSON; omitted fields take the built-in desk values.
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long, default_value = "collab")]
        mode: Mode,
        /// Blocks per run; defaults to the scenario's own target.
        #[arg(long)]
        blocks: Option<u64>,
        /// `a..b` (inclusive) or a comma-separated list.
        #[arg(long, default_value = "1..5", value_parser = parse_seeds)]
        seeds: Seeds,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check header hashes against a vector file.
    VerifyGolden {
        #[arg(long)]
        vectors: PathBuf,
    },
    /// Compare a solo baseline against a collaborative candidate.
    Compare {
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        candidate: PathBuf,
    },
}

#[derive(Clone, Debug)]
struct Seeds(Vec<u64>);

fn parse_seeds(s: &str) -> Result<Seeds, String> {
    let bad = |e: std::num::ParseIntError| format!("bad seed list {s:?}: {e}");
    let seeds: Vec<u64> = match s.split_once("..") {
        Some((a, b)) => {
            let (a, b) = (a.trim().parse().map_err(bad)?, b.trim().trim_start_matches('=').parse().map_err(bad)?);
            (a..=b).collect()
        }
        None => s.split(',').map(|x| x.trim().parse().map_err(bad)).collect::<Result<_, _>>()?,
    };
    if seeds.is_empty() {
        return Err(format!("seed list {s:?} is empty"));
    }
    Ok(Seeds(seeds))
}

fn exit_for(e: &ExperimentError) -> u8 {
    match e {
        ExperimentError::ConfigInvalid(_) | ExperimentError::Sim(SimError::ConfigInvalid(_)) => EXIT_CONFIG,
        ExperimentError::Json { .. } | ExperimentError::Io { .. } => EXIT_CONFIG,
        ExperimentError::Sim(_) => EXIT_FAILED,
    }
}

fn run(scenario: Option<&Path>, mode: Mode, blocks: Option<u64>, seeds: Vec<u64>, out: &Path) -> Result<bool, ExperimentError> {
    let cfg = match scenario {
        Some(p) => ScenarioConfig::load(p)?,
        None => ScenarioConfig::desk(),
    };
    let blocks = blocks.unwrap_or(cfg.blocks_target);
    let spec = ScenarioSpec::new(cfg, mode, blocks, seeds);
    let runs = run_all(&spec)?;
    let metrics: Vec<_> = runs.iter().map(|(m, _)| m.clone()).collect();
    let summary = emit_report(&metrics, out)?;
    for (m, r) in &runs {
        write_audit(r, &out.join(format!("audit-{}-{}.jsonl", m.mode.as_str(), m.seed)))?;
    }
    let mut ok = true;
    for m in &metrics {
        let sound = m.conserved && m.coordination_ok && m.errors.is_empty();
        ok &= sound;
        println!(
            "seed {:>3}  {} blocks  weak blocks {:>3}  conserved {}  coordination {}{}",
            m.seed,
            m.blocks_target,
            m.weak_blocks,
            m.conserved,
            m.coordination_ok,
            if m.errors.is_empty() { String::new() } else { format!("  errors: {}", m.errors.join("; ")) }
        );
    }
    if let Some(s) = summary.mode(mode) {
        for (class, stats) in &s.reward {
            println!("{} reward mean {:.6} ETH, std {:.6}", class.as_str(), stats.mean, stats.std);
        }
    }
    println!("wrote {}", out.display());
    Ok(ok)
}

fn print_checks(checks: &[Check]) -> bool {
    for c in checks {
        println!("{:<22} {}  {}", c.name, if c.passed { "PASS" } else { "FAIL" }, c.detail);
    }
    checks.iter().all(|c| c.passed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { scenario, mode, blocks, seeds, out } => run(scenario.as_deref(), mode, blocks, seeds.0, &out),
        Command::Compare { baseline, candidate } => compare(&baseline, &candidate).map(|c| print_checks(&c)),
        Command::VerifyGolden { vectors } => {
            let text = match std::fs::read_to_string(&vectors) {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("error: {}: {e}", vectors.display());
                    return ExitCode::from(EXIT_CONFIG);
                }
            };
            match parse_golden(&text) {
                Ok(vs) => {
                    let bad: Vec<usize> = vs.iter().enumerate().filter(|(_, v)| !v.holds()).map(|(i, _)| i + 1).collect();
                    println!("{} vectors, {} mismatched", vs.len(), bad.len());
                    for i in &bad {
                        println!("vector {i} does not hash to its digest");
                    }
                    Ok(bad.is_empty())
                }
                Err(e) => {
                    eprintln!("error: {}: {e}", vectors.display());
                    return ExitCode::from(EXIT_CONFIG);
                }
            }
        }
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_FAILED),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_for(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use clap::CommandFactory;

    use super::{parse_seeds, Cli};

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn seed_ranges_are_inclusive() {
        assert_eq!(parse_seeds("1..5").unwrap().0, vec![1, 2, 3, 4, 5]);
        assert_eq!(parse_seeds("2..=3").unwrap().0, vec![2, 3]);
        assert_eq!(parse_seeds("7, 9").unwrap().0, vec![7, 9]);
        assert!(parse_seeds("5..1").is_err());
        assert!(parse_seeds("x").is_err());
    }
}
