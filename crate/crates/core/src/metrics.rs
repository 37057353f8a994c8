//! Lifetime and fairness metrics, the election-policy comparison, and
//! file export.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adversary::{check_completeness, check_consistency, check_termination, PropertyVerdict, Run};
use crate::error::{Error, Result};
use crate::netsim::NodeId;
use crate::protocol::PhaseCounts;
use crate::scenario::{ElectionPolicy, Scenario};

pub const CSV_HEADER: [&str; 5] = ["epoch", "alive_count", "energy_consumed_J", "messages", "elected_node_ids"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u32,
    pub alive_count: usize,
    pub energy_consumed_j: f64,
    pub messages: u64,
    pub elected: Vec<NodeId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub n: usize,
    pub election_policy: ElectionPolicy,
    pub epochs_run: u32,
    /// Epoch (1-based) in which the first node died.
    pub first_death_epoch: Option<u32>,
    /// Epoch in which at least half the nodes were dead.
    pub half_death_epoch: Option<u32>,
    pub total_energy_consumed_j: f64,
    pub election_counts: Vec<u32>,
    pub jain_fairness: f64,
    pub messages: PhaseCounts,
    pub epochs: Vec<EpochRecord>,
    pub verdicts: Vec<PropertyVerdict>,
    pub stop_reason: Option<String>,
}

/// `(Σx)² / (n·Σx²)`; 1 when every count is zero.
pub fn jain_index(counts: &[u32]) -> f64 {
    let sum: f64 = counts.iter().map(|&c| c as f64).sum();
    let sq: f64 = counts.iter().map(|&c| (c as f64).powi(2)).sum();
    if sq == 0.0 {
        return 1.0;
    }
    sum * sum / (counts.len() as f64 * sq)
}

impl RunMetrics {
    pub fn from_run(run: &Run) -> Self {
        let s = run.sim.scenario();
        let mut counts = vec![0u32; s.n];
        let mut messages = PhaseCounts::default();
        let mut epochs = Vec::new();
        let (mut first, mut half) = (None, None);
        for ep in &run.epochs {
            let elected = ep.elected();
            for id in &elected {
                counts[id.index()] += 1;
            }
            messages.merge(&ep.messages);
            let dead = s.n - ep.alive_end;
            if dead > 0 && first.is_none() {
                first = Some(ep.epoch);
            }
            if dead >= s.n.div_ceil(2) && half.is_none() {
                half = Some(ep.epoch);
            }
            epochs.push(EpochRecord {
                epoch: ep.epoch,
                alive_count: ep.alive_end,
                energy_consumed_j: ep.energy_consumed,
                messages: ep.messages.total(),
                elected,
            });
        }
        RunMetrics {
            seed: s.seed,
            n: s.n,
            election_policy: s.election_policy,
            epochs_run: run.epochs.len() as u32,
            first_death_epoch: first,
            half_death_epoch: half,
            total_energy_consumed_j: epochs.iter().map(|e| e.energy_consumed_j).sum(),
            jain_fairness: jain_index(&counts),
            election_counts: counts,
            messages,
            epochs,
            verdicts: vec![check_termination(run), check_completeness(run), check_consistency(run)],
            stop_reason: run.stop_reason.clone(),
        }
    }
}

/// Runs the scenario honestly and summarises it.
pub fn run_scenario(scenario: &Scenario) -> Result<RunMetrics> {
    Ok(RunMetrics::from_run(&Run::execute(scenario, None)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub seed: u64,
    pub energy_aware_first_death: Option<u32>,
    pub uniform_first_death: Option<u32>,
    pub energy_aware_jain: f64,
    pub uniform_jain: f64,
}

impl ComparisonRow {
    /// 1 if energy-aware lasted longer, 0.5 on a tie, 0 otherwise. A run
    /// without deaths outlasts any run with one.
    pub fn score(&self) -> f64 {
        let key = |d: Option<u32>| d.unwrap_or(u32::MAX);
        match key(self.energy_aware_first_death).cmp(&key(self.uniform_first_death)) {
            std::cmp::Ordering::Greater => 1.0,
            std::cmp::Ordering::Equal => 0.5,
            std::cmp::Ordering::Less => 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    /// Share of seeds won by energy-aware, ties counting half.
    pub win_rate: f64,
    /// Share of seeds where energy-aware first death is no earlier.
    pub at_least_rate: f64,
    pub mean_jain_energy_aware: f64,
    pub mean_jain_uniform: f64,
}

/// Paired runs of both policies on seeds `scenario.seed ..`.
pub fn compare_policies(scenario: &Scenario, n_seeds: u32) -> Result<Comparison> {
    if n_seeds < 30 {
        return Err(Error::InvalidParameter(format!("comparison needs at least 30 seeds, got {n_seeds}")));
    }
    scenario.validate()?;
    let mut rows = Vec::with_capacity(n_seeds as usize);
    for i in 0..n_seeds as u64 {
        let seeded = Scenario { seed: scenario.seed.wrapping_add(i), ..scenario.clone() };
        let ea = run_scenario(&seeded.with_policy(ElectionPolicy::EnergyAware))?;
        let un = run_scenario(&seeded.with_policy(ElectionPolicy::Uniform))?;
        rows.push(ComparisonRow {
            seed: seeded.seed,
            energy_aware_first_death: ea.first_death_epoch,
            uniform_first_death: un.first_death_epoch,
            energy_aware_jain: ea.jain_fairness,
            uniform_jain: un.jain_fairness,
        });
    }
    let k = rows.len() as f64;
    Ok(Comparison {
        win_rate: rows.iter().map(ComparisonRow::score).sum::<f64>() / k,
        at_least_rate: rows.iter().filter(|r| r.score() > 0.0).count() as f64 / k,
        mean_jain_energy_aware: rows.iter().map(|r| r.energy_aware_jain).sum::<f64>() / k,
        mean_jain_uniform: rows.iter().map(|r| r.uniform_jain).sum::<f64>() / k,
        rows,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    /// Full metrics as pretty JSON.
    Json,
    /// Per-epoch table.
    Csv,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::io(path, e.into()))?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_reader(BufReader::new(f)).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn export(metrics: &RunMetrics, path: &Path, format: Format) -> Result<()> {
    match format {
        Format::Json => write_json(metrics, path),
        Format::Csv => write_epochs_csv(&metrics.epochs, path),
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Config(format!("{}: {other:?}", path.display())),
    }
}

pub fn write_epochs_csv(epochs: &[EpochRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(CSV_HEADER).map_err(|e| csv_err(path, e))?;
    for e in epochs {
        let ids: Vec<String> = e.elected.iter().map(|id| id.0.to_string()).collect();
        w.write_record([
            e.epoch.to_string(),
            e.alive_count.to_string(),
            e.energy_consumed_j.to_string(),
            e.messages.to_string(),
            ids.join(";"),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_epochs_csv(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let bad = |line: usize, what: &str| Error::Config(format!("{} line {line}: bad {what}", path.display()));
    let header = r.headers().map_err(|e| csv_err(path, e))?;
    if header.iter().ne(CSV_HEADER) {
        return Err(Error::Config(format!("{}: unexpected header {header:?}", path.display())));
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = i + 2;
        let elected = match &rec[4] {
            "" => Vec::new(),
            s => s.split(';').map(|x| x.parse().map(NodeId)).collect::<std::result::Result<_, _>>()
                .map_err(|_| bad(line, "elected_node_ids"))?,
        };
        out.push(EpochRecord {
            epoch: rec[0].parse().map_err(|_| bad(line, "epoch"))?,
            alive_count: rec[1].parse().map_err(|_| bad(line, "alive_count"))?,
            energy_consumed_j: rec[2].parse().map_err(|_| bad(line, "energy_consumed_J"))?,
            messages: rec[3].parse().map_err(|_| bad(line, "messages"))?,
            elected,
        });
    }
    Ok(out)
}

pub fn write_comparison_csv(cmp: &Comparison, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let opt = |d: Option<u32>| d.map(|v| v.to_string()).unwrap_or_default();
    w.write_record(["seed", "energy_aware_first_death", "uniform_first_death", "energy_aware_jain", "uniform_jain"])
        .map_err(|e| csv_err(path, e))?;
    for r in &cmp.rows {
        w.write_record([
            r.seed.to_string(),
            opt(r.energy_aware_first_death),
            opt(r.uniform_first_death),
            r.energy_aware_jain.to_string(),
            r.uniform_jain.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
