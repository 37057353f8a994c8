use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use seccluster::adversary::{self, Run};
use seccluster::metrics::{self, Format, RunMetrics};
use seccluster::{Error, Result, Scenario};

#[derive(Parser)]
#[command(name = "seccluster", version, about = "Secure energy-aware clustering simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario and write metrics.json, epochs.csv and transcript.jsonl.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Paired energy-aware vs uniform election runs over consecutive seeds.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 30)]
        seeds: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run all six property checkers; exits non-zero if any fails.
    Verify {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Election repetitions for the unpredictability check.
        #[arg(long, default_value_t = adversary::DEFAULT_TRIALS)]
        trials: u32,
    },
    /// Dump the observable transcript as JSON lines.
    Trace {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(config: &Path, seed: Option<u64>) -> Result<Scenario> {
    let mut s = Scenario::load(config)?;
    if let Some(seed) = seed {
        s.seed = seed;
    }
    Ok(s)
}

fn write_transcript(run: &Run, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
    run.sim.network().transcript().write_jsonl(BufWriter::new(f)).map_err(|e| Error::Io { path: path.into(), source: e })
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })
}

fn run(cli: Cli) -> Result<bool> {
    match cli.cmd {
        Cmd::Simulate { config, seed, out } => {
            let s = load(&config, seed)?;
            let run = Run::execute(&s, None)?;
            let m = RunMetrics::from_run(&run);
            mkdir(&out)?;
            metrics::export(&m, &out.join("metrics.json"), Format::Json)?;
            metrics::export(&m, &out.join("epochs.csv"), Format::Csv)?;
            write_transcript(&run, &out.join("transcript.jsonl"))?;
            let show = |v: Option<u32>| v.map_or("none".to_string(), |e| e.to_string());
            println!(
                "seed {}: {} epochs, first death {}, half death {}, {:.6} J, {} messages, jain {:.4}",
                m.seed,
                m.epochs_run,
                show(m.first_death_epoch),
                show(m.half_death_epoch),
                m.total_energy_consumed_j,
                m.messages.total(),
                m.jain_fairness
            );
            if let Some(r) = &m.stop_reason {
                println!("stopped: {r}");
            }
            Ok(true)
        }
        Cmd::Compare { config, seeds, out } => {
            let s = Scenario::load(&config)?;
            let c = metrics::compare_policies(&s, seeds)?;
            mkdir(&out)?;
            metrics::write_json(&c, &out.join("comparison.json"))?;
            metrics::write_comparison_csv(&c, &out.join("comparison.csv"))?;
            println!("seeds            {}", c.rows.len());
            println!("win rate         {:.3}", c.win_rate);
            println!("no-earlier rate  {:.3}", c.at_least_rate);
            println!("mean jain        energy-aware {:.4}, uniform {:.4}", c.mean_jain_energy_aware, c.mean_jain_uniform);
            Ok(true)
        }
        Cmd::Verify { config, seed, trials } => {
            let s = load(&config, seed)?;
            let run = Run::execute(&s, None)?;
            let verdicts = [
                adversary::check_termination(&run),
                adversary::check_completeness(&run),
                adversary::check_consistency(&run),
                adversary::check_nonmanipulability(&run, &run),
                adversary::check_unpredictability(&s, trials)?,
                adversary::check_unidentifiability(&s)?,
            ];
            for v in &verdicts {
                println!("{v}");
            }
            Ok(verdicts.iter().all(|v| v.holds))
        }
        Cmd::Trace { config, seed, out } => {
            let s = load(&config, seed)?;
            let run = Run::execute(&s, None)?;
            write_transcript(&run, &out)?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
