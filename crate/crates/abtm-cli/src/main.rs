//! Command-line front end: validate and run mission trees, drive the
//! multi-replica simulator, and run the engine benchmark.

use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use abtm::bench::{self, BenchConfig, Mode};
use abtm::dsl::{self, Severity};
use abtm::memory::Sample;
use abtm::sim::{self, ScenarioConfig};

#[derive(Parser)]
#[command(name = "abtm", version, about = "Asynchronous behavior tree runtime")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and validate a tree file.
    Check { file: PathBuf },
    /// Run a mission: activate the tree, then apply one sample per input
    /// line, printing each non-empty output map as a JSON line.
    Run {
        file: PathBuf,
        /// Sample source: a file of JSON lines, or `-` for stdin.
        #[arg(long, default_value = "-")]
        samples: String,
    },
    /// Run a multi-replica scenario from a JSON configuration.
    Simulate {
        scenario: PathBuf,
        /// Write the full JSON report here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Compare classical and asynchronous execution on random trees.
    Bench {
        #[arg(long, default_value_t = 200)]
        trees: usize,
        /// Height range, e.g. 3..5.
        #[arg(long, default_value = "3..5", value_parser = parse_range)]
        height: (u32, u32),
        /// Children per control node, e.g. 3..7.
        #[arg(long, default_value = "3..7", value_parser = parse_range)]
        children: (u32, u32),
        #[arg(long, value_enum, default_value_t = ModeArg::Both)]
        mode: ModeArg,
        /// Samples per tree and mode.
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        /// Generator seed; the ABTM_SEED environment variable overrides it.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for bench.csv and bench_aggregate.json.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Dense,
    Sparse,
    Both,
}

impl ModeArg {
    fn modes(self) -> Vec<Mode> {
        match self {
            ModeArg::Dense => vec![Mode::Dense],
            ModeArg::Sparse => vec![Mode::Sparse],
            ModeArg::Both => vec![Mode::Dense, Mode::Sparse],
        }
    }
}

fn parse_range(text: &str) -> Result<(u32, u32), String> {
    let (lo, hi) = text
        .split_once("..")
        .ok_or_else(|| format!("expected A..B, got `{text}`"))?;
    let lo = lo.trim().parse().map_err(|e| format!("bad lower bound: {e}"))?;
    let hi = hi.trim().parse().map_err(|e| format!("bad upper bound: {e}"))?;
    if lo > hi {
        return Err(format!("empty range {lo}..{hi}"));
    }
    Ok((lo, hi))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Check { file } => cmd_check(&file),
        Command::Run { file, samples } => cmd_run(&file, &samples),
        Command::Simulate { scenario, report } => cmd_simulate(&scenario, report.as_deref()),
        Command::Bench {
            trees,
            height,
            children,
            mode,
            samples,
            seed,
            out,
        } => {
            let seed = std::env::var("ABTM_SEED")
                .ok()
                .and_then(|s| s.parse().ok())
                .unwrap_or(seed);
            let cfg = BenchConfig {
                tree_count: trees,
                height,
                children,
                modes: mode.modes(),
                samples_per_tree: samples,
                seed,
                node_filter: None,
                repetitions: 3,
            };
            cmd_bench(&cfg, &out)
        }
    };
    ExitCode::from(code)
}

fn cmd_check(file: &Path) -> u8 {
    let text = match fs::read_to_string(file) {
        Ok(text) => text,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", file.display());
            return 2;
        }
    };
    let def = match dsl::parse_tree(&text) {
        Ok(def) => def,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    let diagnostics = dsl::validate(&def);
    for d in &diagnostics {
        println!("{d}");
    }
    if diagnostics.iter().any(|d| d.severity == Severity::Error) {
        1
    } else {
        println!("ok");
        0
    }
}

fn cmd_run(file: &Path, samples: &str) -> u8 {
    let text = match fs::read_to_string(file) {
        Ok(text) => text,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", file.display());
            return 2;
        }
    };
    let mut tree = match dsl::parse_tree(&text).and_then(|def| dsl::build(&def)) {
        Ok(tree) => tree,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };

    let reader: Box<dyn Read> = if samples == "-" {
        Box::new(std::io::stdin())
    } else {
        match fs::File::open(samples) {
            Ok(f) => Box::new(f),
            Err(e) => {
                eprintln!("error: cannot read {samples}: {e}");
                return 2;
            }
        }
    };

    match tree.start() {
        Ok(outputs) => print_outputs(&outputs),
        Err(e) => {
            eprintln!("error: activation failed: {e}");
            return 1;
        }
    }
    for (index, line) in BufReader::new(reader).lines().enumerate() {
        let line = match line {
            Ok(line) => line,
            Err(e) => {
                eprintln!("error: reading samples: {e}");
                return 2;
            }
        };
        if line.trim().is_empty() {
            continue;
        }
        let sample: Sample = match serde_json::from_str(&line) {
            Ok(sample) => sample,
            Err(e) => {
                eprintln!("error: sample {index}: {e}");
                return 1;
            }
        };
        match tree.callback(&sample) {
            Ok(outputs) => print_outputs(&outputs),
            Err(e) => {
                eprintln!("error: sample {index}: {e}");
                return 1;
            }
        }
    }
    0
}

fn print_outputs(outputs: &Sample) {
    if !outputs.is_empty() {
        println!("{}", serde_json::to_string(outputs).expect("outputs serialize"));
    }
}

fn cmd_simulate(scenario: &Path, report_path: Option<&Path>) -> u8 {
    let text = match fs::read_to_string(scenario) {
        Ok(text) => text,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", scenario.display());
            return 2;
        }
    };
    let cfg: ScenarioConfig = match serde_json::from_str(&text) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: bad scenario: {e}");
            return 2;
        }
    };
    let report = match sim::run_scenario(&cfg) {
        Ok(report) => report,
        Err(e @ abtm::Error::Config(_)) => {
            eprintln!("error: {e}");
            return 2;
        }
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    print!("{}", report.summary());
    if let Some(path) = report_path {
        if let Err(e) = fs::write(path, report.to_json()) {
            eprintln!("error: cannot write report: {e}");
            return 2;
        }
    }
    if report.consistent {
        0
    } else {
        eprintln!("error: replica hashes diverged in a completed round");
        1
    }
}

fn cmd_bench(cfg: &BenchConfig, out: &Path) -> u8 {
    let report = match bench::run_bench(cfg) {
        Ok(report) => report,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    if let Err(e) = fs::create_dir_all(out) {
        eprintln!("error: cannot create {}: {e}", out.display());
        return 2;
    }
    let csv = out.join("bench.csv");
    let json = out.join("bench_aggregate.json");
    if let Err(e) = fs::write(&csv, report.to_csv()).and_then(|_| fs::write(&json, report.aggregate_json())) {
        eprintln!("error: cannot write reports: {e}");
        return 2;
    }
    for (label, stats) in &report.aggregates {
        println!(
            "{label}: median R {:.2} (min {:.2}, max {:.2})",
            stats.median, stats.min, stats.max
        );
    }
    println!("wrote {} and {}", csv.display(), json.display());
    0
}
