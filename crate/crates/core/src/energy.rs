//! First-order radio energy model and battery accounting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergyModel {
    /// Electronics cost, J/bit.
    pub e_elec: f64,
    /// Amplifier cost, J/bit/m².
    pub eps_amp: f64,
    /// Fixed per-epoch cost for every alive node (sensing, idle listening).
    pub e_idle_round: f64,
    /// Per-epoch cost of holding the aggregator duty (storage and fusion).
    pub e_aggregator_round: f64,
}

impl Default for EnergyModel {
    fn default() -> Self {
        Self { e_elec: 50e-9, eps_amp: 100e-12, e_idle_round: 0.0, e_aggregator_round: 0.0 }
    }
}

impl EnergyModel {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("e_elec", self.e_elec),
            ("eps_amp", self.eps_amp),
            ("e_idle_round", self.e_idle_round),
            ("e_aggregator_round", self.e_aggregator_round),
        ];
        for (name, v) in fields {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn tx_cost(&self, bits: u64, distance: f64) -> Result<f64> {
        if !(distance >= 0.0 && distance.is_finite()) {
            return Err(Error::InvalidParameter(format!("distance must be >= 0, got {distance}")));
        }
        let b = bits as f64;
        Ok(self.e_elec * b + self.eps_amp * b * distance * distance)
    }

    pub fn rx_cost(&self, bits: u64) -> f64 {
        self.e_elec * bits as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Battery {
    remaining: f64,
    capacity: f64,
    alive: bool,
}

impl Battery {
    pub fn full(capacity: f64) -> Self {
        Self::with_level(capacity, capacity)
    }

    /// A battery holding `remaining` J, clamped into `[0, capacity]`.
    pub fn with_level(capacity: f64, remaining: f64) -> Self {
        let remaining = remaining.clamp(0.0, capacity);
        Self { remaining, capacity, alive: remaining > 0.0 }
    }

    pub fn remaining(&self) -> f64 {
        self.remaining
    }

    pub fn capacity(&self) -> f64 {
        self.capacity
    }

    pub fn is_alive(&self) -> bool {
        self.alive
    }

    /// Returns the battery after drawing `amount`, clamped at zero.
    pub fn debit(self, amount: f64) -> Self {
        let mut b = self;
        b.draw(amount);
        b
    }

    /// Draws `amount` in place and returns the energy actually removed.
    pub fn draw(&mut self, amount: f64) -> f64 {
        let taken = amount.max(0.0).min(self.remaining);
        self.remaining -= taken;
        if self.remaining <= 0.0 {
            self.remaining = 0.0;
            self.alive = false;
        }
        taken
    }
}
