use std::path::Path;

use seccluster::metrics::{
    compare_policies, export, jain_index, read_epochs_csv, read_json, run_scenario, Format, RunMetrics,
};
use seccluster::netsim::Field;
use seccluster::protocol::ReadingRange;
use seccluster::scenario::StopRule;
use seccluster::{Error, Scenario};

fn dense(n: usize, seed: u64) -> Scenario {
    Scenario {
        n,
        field: Field { width: 40.0, height: 40.0 },
        radio_radius: 60.0,
        reading_range: ReadingRange { lo: 1000, hi: 1009 },
        seed,
        epochs: 4,
        ..Default::default()
    }
}

fn comparison() -> Scenario {
    Scenario::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/comparison.toml")).unwrap()
}

#[test]
fn zero_epochs_is_empty() {
    let m = run_scenario(&Scenario { epochs: 0, ..dense(8, 1) }).unwrap();
    assert_eq!(m.epochs_run, 0);
    assert_eq!(m.total_energy_consumed_j, 0.0);
    assert_eq!(m.first_death_epoch, None);
    assert_eq!(m.half_death_epoch, None);
    assert_eq!(m.jain_fairness, 1.0);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("e.csv");
    export(&m, &p, Format::Csv).unwrap();
    assert_eq!(std::fs::read_to_string(&p).unwrap(), "epoch,alive_count,energy_consumed_J,messages,elected_node_ids\n");
    assert!(read_epochs_csv(&p).unwrap().is_empty());
}

#[test]
fn deterministic_per_seed() {
    let a = run_scenario(&dense(12, 5)).unwrap();
    let b = run_scenario(&dense(12, 5)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, run_scenario(&dense(12, 6)).unwrap());
}

#[test]
fn battery_below_first_frame_dies_in_epoch_one() {
    // a 96-bit beacon costs 96 * 50 nJ = 4.8 uJ before amplification
    let s = Scenario { battery_capacity: 1e-6, ..dense(10, 2) };
    let m = run_scenario(&s).unwrap();
    assert_eq!(m.first_death_epoch, Some(1));
    assert!(m.half_death_epoch.is_some_and(|h| h >= 1));
}

#[test]
fn metrics_are_consistent() {
    let m = run_scenario(&dense(24, 3)).unwrap();
    assert_eq!(m.epochs_run, 4);
    assert_eq!(m.epochs.len(), 4);
    let total: u32 = m.election_counts.iter().sum();
    let listed: usize = m.epochs.iter().map(|e| e.elected.len()).sum();
    assert_eq!(total as usize, listed);
    assert_eq!(m.jain_fairness, jain_index(&m.election_counts));
    assert!(m.jain_fairness >= 1.0 / 24.0 && m.jain_fairness <= 1.0);
    let per_epoch: f64 = m.epochs.iter().map(|e| e.energy_consumed_j).sum();
    assert_eq!(m.total_energy_consumed_j, per_epoch);
    assert_eq!(m.messages.total(), m.epochs.iter().map(|e| e.messages).sum::<u64>());
    assert!(m.verdicts.iter().all(|v| v.holds));
}

#[test]
fn stop_rules_end_runs_early() {
    let s = Scenario { epochs: 200, stop: StopRule::FirstDeath, ..comparison() };
    let m = run_scenario(&s).unwrap();
    let first = m.first_death_epoch.expect("a node dies");
    assert_eq!(m.epochs_run, first);
    assert!(m.stop_reason.unwrap().contains("first node died"));

    let m = run_scenario(&Scenario { stop: StopRule::HalfDeath, ..s }).unwrap();
    let (f, h) = (m.first_death_epoch.unwrap(), m.half_death_epoch.unwrap());
    assert!(f <= h);
    assert_eq!(m.epochs_run, h);
}

#[test]
fn exports_round_trip_and_are_byte_stable() {
    let m = run_scenario(&dense(12, 9)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (j1, j2, c1, c2) =
        (dir.path().join("a.json"), dir.path().join("b.json"), dir.path().join("a.csv"), dir.path().join("b.csv"));
    export(&m, &j1, Format::Json).unwrap();
    export(&run_scenario(&dense(12, 9)).unwrap(), &j2, Format::Json).unwrap();
    export(&m, &c1, Format::Csv).unwrap();
    export(&m, &c2, Format::Csv).unwrap();
    assert_eq!(std::fs::read(&j1).unwrap(), std::fs::read(&j2).unwrap());
    assert_eq!(std::fs::read(&c1).unwrap(), std::fs::read(&c2).unwrap());
    let back: RunMetrics = read_json(&j1).unwrap();
    assert_eq!(back, m);
    assert_eq!(read_epochs_csv(&c1).unwrap(), m.epochs);
}

#[test]
fn export_errors_name_the_path() {
    let m = run_scenario(&Scenario { epochs: 1, ..dense(6, 1) }).unwrap();
    let p = Path::new("/nonexistent-dir/metrics.json");
    match export(&m, p, Format::Json) {
        Err(Error::Io { path, .. }) => assert_eq!(path, p),
        other => panic!("expected io error, got {other:?}"),
    }
}

#[test]
fn comparison_shape() {
    let s = Scenario { epochs: 3, ..dense(12, 1) };
    assert!(matches!(compare_policies(&s, 29), Err(Error::InvalidParameter(_))));
    let c = compare_policies(&s, 30).unwrap();
    assert_eq!(c.rows.len(), 30);
    assert_eq!(c.rows.iter().map(|r| r.seed).collect::<Vec<_>>(), (1..=30).collect::<Vec<_>>());
}

#[test]
fn zero_beta_makes_policies_identical() {
    let s = Scenario { beta: 0.0, epochs: 200, stop: StopRule::FirstDeath, low_energy_fraction: 0.0, ..comparison() };
    let c = compare_policies(&s, 30).unwrap();
    let sigma = (0.25f64 / 30.0).sqrt();
    assert!((c.win_rate - 0.5).abs() <= 3.0 * sigma, "{}", c.win_rate);
    assert_eq!(c.mean_jain_energy_aware, c.mean_jain_uniform);
}

#[test]
fn energy_aware_outlives_uniform_on_mixed_batteries() {
    let c = compare_policies(&comparison(), 30).unwrap();
    let at_least = c.rows.iter().filter(|r| r.score() > 0.0).count();
    assert!(at_least * 2 > c.rows.len(), "{at_least}/30");
}
