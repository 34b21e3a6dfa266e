use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};

use psiot_sdn::scenario::{self, CsvSink, Scenario};
use psiot_sdn::TickLength;

/// Simulates pub/sub IoT traffic over an SDN-managed network.
#[derive(Debug, Parser)]
#[command(name = "psiot-sdn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a scenario and write links.csv, subscriptions.csv and summary.txt.
    Run {
        /// Scenario file, or `paper-poc` for the built-in one.
        scenario: String,
        #[arg(long, action = ArgAction::Set)]
        integrated: Option<bool>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Tick length in milliseconds.
        #[arg(long)]
        tick: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run with and without integration and write compare.csv and summary.txt.
    Compare {
        scenario: String,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Parse and check a scenario without running it.
    Validate { scenario: String },
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, String> {
    let path = dir.join(name);
    File::create(&path)
        .map(BufWriter::new)
        .map_err(|e| format!("cannot create {}: {e}", path.display()))
}

fn execute(cli: Cli) -> Result<(), String> {
    match cli.command {
        Command::Run {
            scenario,
            integrated,
            out,
            tick,
            seed,
        } => {
            let mut s = Scenario::load(&scenario).map_err(|e| e.to_string())?;
            if let Some(i) = integrated {
                s.integrated = i;
            }
            if let Some(ms) = tick {
                s.tick = TickLength::from_millis(ms).ok_or("--tick must be positive")?;
            }
            if let Some(seed) = seed {
                s.seed = seed;
            }
            fs::create_dir_all(&out).map_err(|e| format!("cannot create {}: {e}", out.display()))?;
            let mut sink = CsvSink::new(create(&out, "links.csv")?, create(&out, "subscriptions.csv")?)
                .map_err(|e| e.to_string())?;
            let summary = scenario::run(s, &mut sink).map_err(|e| e.to_string())?;
            sink.finish().map_err(|e| e.to_string())?;
            let text = summary.to_string();
            fs::write(out.join("summary.txt"), &text).map_err(|e| e.to_string())?;
            print!("{text}");
        }
        Command::Compare { scenario, out } => {
            let s = Scenario::load(&scenario).map_err(|e| e.to_string())?;
            let report = scenario::compare(&s).map_err(|e| e.to_string())?;
            fs::create_dir_all(&out).map_err(|e| format!("cannot create {}: {e}", out.display()))?;
            report
                .write_csv(create(&out, "compare.csv")?)
                .map_err(|e| e.to_string())?;
            let text = report.to_string();
            fs::write(out.join("summary.txt"), &text).map_err(|e| e.to_string())?;
            print!("{text}");
        }
        Command::Validate { scenario } => {
            let s = Scenario::load(&scenario).map_err(|e| e.to_string())?;
            println!(
                "scenario {} ok: {} nodes, {} links, {} topics, {} sources, {} events, {} ticks",
                s.name,
                s.topology.node_count(),
                s.topology.link_count(),
                s.topics.len(),
                s.sources.len(),
                s.events.len(),
                s.end_tick()
            );
        }
    }
    Ok(())
}
