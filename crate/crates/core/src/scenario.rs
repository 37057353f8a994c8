//! Scenario configuration: deployment, radio, energy and protocol knobs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::energy::EnergyModel;
use crate::error::{Error, Result};
use crate::netsim::{Field, Point, DEFAULT_EVENT_BUDGET};
use crate::protocol::recovery::{validate_range, ReadingRange};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ElectionPolicy {
    EnergyAware,
    /// Same protocol with `beta = 0`.
    Uniform,
}

/// When a multi-epoch run stops early.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopRule {
    #[default]
    AllEpochs,
    FirstDeath,
    HalfDeath,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Scenario {
    pub n: usize,
    pub field: Field,
    /// Defaults to the field centre.
    pub base_station: Option<Point>,
    pub radio_radius: f64,
    /// Initial charge of a full battery, J.
    pub battery_capacity: f64,
    /// Fraction of nodes that start partially drained.
    pub low_energy_fraction: f64,
    /// Starting charge of those nodes as a fraction of capacity.
    pub low_energy_level: f64,
    pub energy: EnergyModel,
    /// Beacons per clustering round; defaults to `ceil(n / 10)`.
    pub k_beacons: Option<usize>,
    /// Base election chance; defaults to `target_aggregators / ring_size`.
    pub p_base: Option<f64>,
    pub target_aggregators: f64,
    pub beta: f64,
    /// Parity rounds per existence check.
    pub rounds: u32,
    /// Election reruns before the starter self-appoints.
    pub retries: u32,
    pub reading_range: ReadingRange,
    pub election_policy: ElectionPolicy,
    pub epochs: u32,
    pub seed: u64,
    /// Rebuild clusters every epoch instead of only when a ring loses a member.
    pub recluster_every_epoch: bool,
    /// Length of the base station's one-way key chain.
    pub chain_length: usize,
    /// Largest number of missed disclosures a node tolerates.
    pub max_gap: usize,
    pub event_budget: u64,
    pub stop: StopRule,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            n: 100,
            field: Field { width: 100.0, height: 100.0 },
            base_station: None,
            radio_radius: 30.0,
            battery_capacity: 0.5,
            low_energy_fraction: 0.0,
            low_energy_level: 0.5,
            energy: EnergyModel::default(),
            k_beacons: None,
            p_base: None,
            target_aggregators: 1.0,
            beta: 1.0,
            rounds: 20,
            retries: 3,
            reading_range: ReadingRange { lo: 1000, hi: 1009 },
            election_policy: ElectionPolicy::EnergyAware,
            epochs: 10,
            seed: 1,
            recluster_every_epoch: true,
            chain_length: 1024,
            max_gap: 16,
            event_budget: DEFAULT_EVENT_BUDGET,
            stop: StopRule::AllEpochs,
        }
    }
}

impl Scenario {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let s: Scenario = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn base_station_position(&self) -> Point {
        self.base_station.unwrap_or_else(|| self.field.center())
    }

    pub fn beacons(&self) -> usize {
        self.k_beacons.unwrap_or(self.n.div_ceil(10))
    }

    /// `beta` after applying the election policy.
    pub fn effective_beta(&self) -> f64 {
        match self.election_policy {
            ElectionPolicy::EnergyAware => self.beta,
            ElectionPolicy::Uniform => 0.0,
        }
    }

    pub fn with_policy(&self, policy: ElectionPolicy) -> Self {
        Self { election_policy: policy, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidScenario(msg));
        if self.n < 3 {
            return bad(format!("n must be at least 3, got {}", self.n));
        }
        if !(self.field.width > 0.0 && self.field.height > 0.0) {
            return bad("field dimensions must be positive".into());
        }
        if let Some(bs) = self.base_station {
            if !(bs.x.is_finite() && bs.y.is_finite()) {
                return bad("base station position must be finite".into());
            }
        }
        if !(self.radio_radius > 0.0 && self.radio_radius.is_finite()) {
            return bad(format!("radio_radius must be positive, got {}", self.radio_radius));
        }
        if !(self.battery_capacity > 0.0 && self.battery_capacity.is_finite()) {
            return bad(format!("battery_capacity must be positive, got {}", self.battery_capacity));
        }
        if !(0.0..=1.0).contains(&self.low_energy_fraction) {
            return bad(format!("low_energy_fraction must be in [0, 1], got {}", self.low_energy_fraction));
        }
        if !(self.low_energy_level > 0.0 && self.low_energy_level <= 1.0) {
            return bad(format!("low_energy_level must be in (0, 1], got {}", self.low_energy_level));
        }
        self.energy.validate().map_err(|e| Error::InvalidScenario(e.to_string()))?;
        let k = self.beacons();
        if k == 0 || k > self.n {
            return bad(format!("k_beacons must be in 1..={}, got {k}", self.n));
        }
        if let Some(p) = self.p_base {
            if !(p > 0.0 && p <= 1.0) {
                return bad(format!("p_base must be in (0, 1], got {p}"));
            }
        }
        if !(self.target_aggregators > 0.0 && self.target_aggregators.is_finite()) {
            return bad(format!("target_aggregators must be positive, got {}", self.target_aggregators));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be >= 0, got {}", self.beta));
        }
        if self.rounds == 0 || self.rounds > u16::MAX as u32 {
            return bad(format!("rounds must be in 1..=65535, got {}", self.rounds));
        }
        if self.retries > u16::MAX as u32 {
            return bad(format!("retries must be at most 65535, got {}", self.retries));
        }
        if self.reading_range.lo > self.reading_range.hi {
            return bad(format!("reading_range [{}, {}] is empty", self.reading_range.lo, self.reading_range.hi));
        }
        if self.chain_length < self.epochs as usize {
            return bad(format!("chain_length {} cannot cover {} epochs", self.chain_length, self.epochs));
        }
        if self.chain_length == 0 {
            return bad("chain_length must be positive".into());
        }
        if self.max_gap == 0 {
            return bad("max_gap must be positive".into());
        }
        if self.event_budget == 0 {
            return bad("event_budget must be positive".into());
        }
        validate_range(self.reading_range, self.n as u32)
    }
}
