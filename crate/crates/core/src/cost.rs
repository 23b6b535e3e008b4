//! Communication and computation cost accounting.
//!
//! Every model transfer sends `bits_per_element * d` bits over an AWGN link
//! whose rate is the Shannon capacity `B log2(1 + P / (N0 B))`. Transfer time
//! is bits over rate and transfer energy is transmit power times time.
//! Compute energy is compute time times a nominal device power; compute time
//! is either measured wall-clock time or a deterministic estimate derived from
//! the number of per-sample gradient evaluations.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CostError {
    #[error("channel parameter {name} must be positive and finite, got {value}")]
    InvalidChannel { name: &'static str, value: f64 },
    #[error("energy parameter {name} must be positive and finite, got {value}")]
    InvalidEnergy { name: &'static str, value: f64 },
}

/// `B log2(1 + P / (N0 B))` in bit/s. Zero power gives zero rate.
pub fn shannon_rate(bandwidth_hz: f64, tx_power_w: f64, noise_psd: f64) -> f64 {
    bandwidth_hz * (1.0 + tx_power_w / (noise_psd * bandwidth_hz)).log2()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    bandwidth_hz: f64,
    tx_power_w: f64,
    noise_psd: f64,
    bits_per_element: u32,
}

impl Default for ChannelConfig {
    /// 5 kHz per agent, 2 W transmit power, 1e-4 W/Hz noise, 32-bit floats.
    fn default() -> Self {
        Self {
            bandwidth_hz: 5000.0,
            tx_power_w: 2.0,
            noise_psd: 1e-4,
            bits_per_element: 32,
        }
    }
}

impl ChannelConfig {
    pub fn new(bandwidth_hz: f64, tx_power_w: f64, noise_psd: f64, bits_per_element: u32) -> Result<Self, CostError> {
        for (name, value) in [
            ("bandwidth_hz", bandwidth_hz),
            ("tx_power_w", tx_power_w),
            ("noise_psd", noise_psd),
            ("bits_per_element", f64::from(bits_per_element)),
        ] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(CostError::InvalidChannel { name, value });
            }
        }
        Ok(Self {
            bandwidth_hz,
            tx_power_w,
            noise_psd,
            bits_per_element,
        })
    }

    pub fn bandwidth_hz(&self) -> f64 {
        self.bandwidth_hz
    }

    pub fn tx_power_w(&self) -> f64 {
        self.tx_power_w
    }

    pub fn noise_psd(&self) -> f64 {
        self.noise_psd
    }

    pub fn bits_per_element(&self) -> u32 {
        self.bits_per_element
    }

    /// Linear signal-to-noise ratio `P / (N0 B)`.
    pub fn snr(&self) -> f64 {
        self.tx_power_w / (self.noise_psd * self.bandwidth_hz)
    }

    pub fn rate(&self) -> f64 {
        shannon_rate(self.bandwidth_hz, self.tx_power_w, self.noise_psd)
    }

    pub fn model_bits(&self, d: usize) -> u64 {
        u64::from(self.bits_per_element) * d as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransferCost {
    pub time_s: f64,
    pub energy_j: f64,
}

/// Time and energy to send one `d`-element model.
pub fn transfer_cost(d: usize, ch: &ChannelConfig) -> TransferCost {
    let time_s = ch.model_bits(d) as f64 / ch.rate();
    TransferCost {
        time_s,
        energy_j: ch.tx_power_w * time_s,
    }
}

/// How a server-to-all-agents message is charged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BroadcastAccounting {
    /// One unicast transfer per receiving agent.
    PerAgent,
    /// A single transfer regardless of the number of receivers.
    Single,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComputeClock {
    /// `6 * m * d` floating point operations per gradient over `m` samples,
    /// at a nominal device throughput. Reproducible across machines.
    Modeled,
    /// Measured monotonic wall-clock time of the compute sections.
    Wall,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyConfig {
    pub device_watts: f64,
    pub clock: ComputeClock,
    pub flops_per_second: f64,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        Self {
            device_watts: 15.0,
            clock: ComputeClock::Modeled,
            flops_per_second: 1e9,
        }
    }
}

impl EnergyConfig {
    pub fn validate(&self) -> Result<(), CostError> {
        for (name, value) in [
            ("device_watts", self.device_watts),
            ("flops_per_second", self.flops_per_second),
        ] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(CostError::InvalidEnergy { name, value });
            }
        }
        Ok(())
    }
}

/// Everything needed to price a round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostModel {
    pub channel: ChannelConfig,
    pub energy: EnergyConfig,
    pub broadcast: BroadcastAccounting,
    /// Number of elements per transferred model.
    pub model_size: usize,
}

impl CostModel {
    pub fn new(model_size: usize) -> Self {
        Self {
            channel: ChannelConfig::default(),
            energy: EnergyConfig::default(),
            broadcast: BroadcastAccounting::PerAgent,
            model_size,
        }
    }
}

/// What one round did, as reported by the orchestrator.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RoundUsage {
    /// Agent-to-server model uploads.
    pub uplinks: u64,
    /// Agents receiving the server broadcast.
    pub broadcast_receivers: u64,
    /// Gradient evaluations, each on one mini-batch.
    pub grad_evals: u64,
    /// Total samples touched by those gradient evaluations.
    pub sample_grads: u64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct RoundRecord {
    pub round: usize,
    pub uplinks: u64,
    pub downlinks: u64,
    pub uplink_bits: u64,
    pub downlink_bits: u64,
    pub comm_time_s: f64,
    pub comm_energy_j: f64,
    pub grad_evals: u64,
    pub sample_grads: u64,
    pub wall_time_s: f64,
    pub compute_time_s: f64,
    pub compute_energy_j: f64,
}

impl RoundRecord {
    pub fn bits(&self) -> u64 {
        self.uplink_bits + self.downlink_bits
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LedgerTotals {
    pub rounds: usize,
    pub uplinks: u64,
    pub downlinks: u64,
    pub bits: u64,
    pub comm_time_s: f64,
    pub comm_energy_j: f64,
    pub grad_evals: u64,
    pub sample_grads: u64,
    pub wall_time_s: f64,
    pub compute_time_s: f64,
    pub compute_energy_j: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostLedger {
    model: CostModel,
    rounds: Vec<RoundRecord>,
}

impl CostLedger {
    pub fn new(model: CostModel) -> Self {
        Self {
            model,
            rounds: Vec::new(),
        }
    }

    pub fn model(&self) -> &CostModel {
        &self.model
    }

    pub fn rounds(&self) -> &[RoundRecord] {
        &self.rounds
    }

    /// Prices `usage` and appends it as the next round.
    pub fn record_round(&mut self, usage: RoundUsage) -> &RoundRecord {
        let m = &self.model;
        let downlinks = match m.broadcast {
            BroadcastAccounting::PerAgent => usage.broadcast_receivers,
            BroadcastAccounting::Single => u64::from(usage.broadcast_receivers > 0),
        };
        let per_model = m.channel.model_bits(m.model_size);
        let uplink_bits = usage.uplinks * per_model;
        let downlink_bits = downlinks * per_model;
        let comm_time_s = (uplink_bits + downlink_bits) as f64 / m.channel.rate();
        let compute_time_s = match m.energy.clock {
            ComputeClock::Wall => usage.wall_time_s,
            ComputeClock::Modeled => {
                6.0 * usage.sample_grads as f64 * m.model_size as f64 / m.energy.flops_per_second
            }
        };
        self.rounds.push(RoundRecord {
            round: self.rounds.len(),
            uplinks: usage.uplinks,
            downlinks,
            uplink_bits,
            downlink_bits,
            comm_time_s,
            comm_energy_j: m.channel.tx_power_w * comm_time_s,
            grad_evals: usage.grad_evals,
            sample_grads: usage.sample_grads,
            wall_time_s: usage.wall_time_s,
            compute_time_s,
            compute_energy_j: compute_time_s * m.energy.device_watts,
        });
        self.rounds.last().unwrap()
    }

    /// Totals over the first `rounds` rounds.
    pub fn totals_through(&self, rounds: usize) -> LedgerTotals {
        let rounds = &self.rounds[..rounds.min(self.rounds.len())];
        let mut t = LedgerTotals {
            rounds: rounds.len(),
            ..Default::default()
        };
        for r in rounds {
            t.uplinks += r.uplinks;
            t.downlinks += r.downlinks;
            t.bits += r.bits();
            t.grad_evals += r.grad_evals;
            t.sample_grads += r.sample_grads;
            t.wall_time_s += r.wall_time_s;
            t.compute_time_s += r.compute_time_s;
            t.compute_energy_j += r.compute_energy_j;
        }
        // From the integer bit count, so the total does not depend on the
        // order rounds were summed in.
        t.comm_time_s = t.bits as f64 / self.model.channel.rate();
        t.comm_energy_j = self.model.channel.tx_power_w * t.comm_time_s;
        t
    }

    pub fn totals(&self) -> LedgerTotals {
        self.totals_through(self.rounds.len())
    }

    /// One row per round plus a closing `total` row. Columns:
    /// `round,bits,time_s,comm_j,grad_evals,compute_j`. Reals use the shortest
    /// representation that parses back to the same value.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("round,bits,time_s,comm_j,grad_evals,compute_j\n");
        for r in &self.rounds {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.round,
                r.bits(),
                r.comm_time_s,
                r.comm_energy_j,
                r.grad_evals,
                r.compute_energy_j
            );
        }
        let t = self.totals();
        let _ = writeln!(
            out,
            "total,{},{},{},{},{}",
            t.bits, t.comm_time_s, t.comm_energy_j, t.grad_evals, t.compute_energy_j
        );
        out
    }

    /// Measured wall-clock time per round (`round,wall_s`). Not reproducible
    /// across runs, so kept apart from [`CostLedger::to_csv`].
    pub fn timing_csv(&self) -> String {
        let mut out = String::from("round,wall_s\n");
        for r in &self.rounds {
            let _ = writeln!(out, "{},{}", r.round, r.wall_time_s);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn default_channel_rate() {
        let ch = ChannelConfig::default();
        assert_eq!(ch.rate(), 5000.0 * 5f64.log2());
        assert_relative_eq!(ch.rate(), 11609.640474436812, max_relative = 1e-15);
        assert_eq!(ch.snr(), 4.0);
    }

    #[test]
    fn zero_power_and_bandwidth_scaling() {
        assert_eq!(shannon_rate(5000.0, 0.0, 1e-4), 0.0);
        // Double B and P together: SNR fixed, rate doubles.
        assert_eq!(shannon_rate(10000.0, 4.0, 1e-4), 2.0 * shannon_rate(5000.0, 2.0, 1e-4));
    }

    #[test]
    fn channel_rejects_non_positive() {
        assert!(ChannelConfig::new(5000.0, 0.0, 1e-4, 32).is_err());
        assert!(ChannelConfig::new(0.0, 2.0, 1e-4, 32).is_err());
        assert!(ChannelConfig::new(5000.0, 2.0, 1e-4, 0).is_err());
        assert!(ChannelConfig::new(5000.0, 2.0, 1e-4, 32).is_ok());
    }

    #[test]
    fn model_transfer() {
        let ch = ChannelConfig::default();
        let one = transfer_cost(6442, &ch);
        assert_eq!(one.time_s, 206144.0 / ch.rate());
        assert_relative_eq!(one.time_s, 17.756, max_relative = 1e-4);
        assert_relative_eq!(one.energy_j, 35.51, max_relative = 1e-3);
        let two = transfer_cost(2 * 6442, &ch);
        assert_eq!(two.time_s, 2.0 * one.time_s);
        assert_eq!(two.energy_j, 2.0 * one.energy_j);
    }

    #[test]
    fn empty_round_is_zero() {
        let mut ledger = CostLedger::new(CostModel::new(10));
        let r = *ledger.record_round(RoundUsage::default());
        assert_eq!(r, RoundRecord::default());
    }

    #[test]
    fn identical_rounds_double_totals() {
        let mut ledger = CostLedger::new(CostModel::new(100));
        let usage = RoundUsage {
            uplinks: 3,
            broadcast_receivers: 3,
            grad_evals: 3,
            sample_grads: 300,
            wall_time_s: 0.25,
        };
        ledger.record_round(usage);
        let one = ledger.totals();
        ledger.record_round(usage);
        let two = ledger.totals();
        assert_eq!(two.bits, 2 * one.bits);
        assert_eq!(two.grad_evals, 2 * one.grad_evals);
        assert_eq!(two.comm_energy_j, 2.0 * one.comm_energy_j);
        assert_eq!(two.compute_energy_j, 2.0 * one.compute_energy_j);
    }

    #[test]
    fn broadcast_accounting_modes() {
        let usage = RoundUsage {
            uplinks: 3,
            broadcast_receivers: 3,
            ..Default::default()
        };
        let mut per_agent = CostLedger::new(CostModel::new(10));
        assert_eq!(per_agent.record_round(usage).downlinks, 3);
        let mut single = CostLedger::new(CostModel {
            broadcast: BroadcastAccounting::Single,
            ..CostModel::new(10)
        });
        assert_eq!(single.record_round(usage).downlinks, 1);
    }

    #[test]
    fn clocks() {
        let usage = RoundUsage {
            grad_evals: 2,
            sample_grads: 200,
            wall_time_s: 3.0,
            ..Default::default()
        };
        let mut wall = CostLedger::new(CostModel {
            energy: EnergyConfig {
                clock: ComputeClock::Wall,
                ..Default::default()
            },
            ..CostModel::new(1000)
        });
        assert_eq!(wall.record_round(usage).compute_energy_j, 45.0);
        let mut modeled = CostLedger::new(CostModel::new(1000));
        let r = modeled.record_round(usage);
        assert_eq!(r.compute_time_s, 6.0 * 200.0 * 1000.0 / 1e9);
        assert_eq!(r.compute_energy_j, r.compute_time_s * 15.0);
    }

    #[test]
    fn comm_energy_is_power_times_time_per_round() {
        let mut ledger = CostLedger::new(CostModel::new(6442));
        for k in 0..5 {
            let r = ledger.record_round(RoundUsage {
                uplinks: k,
                broadcast_receivers: 3,
                ..Default::default()
            });
            assert_eq!(r.comm_energy_j, 2.0 * r.comm_time_s);
        }
    }

    #[test]
    fn csv_layout() {
        let mut ledger = CostLedger::new(CostModel::new(10));
        ledger.record_round(RoundUsage {
            uplinks: 1,
            ..Default::default()
        });
        let csv = ledger.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "round,bits,time_s,comm_j,grad_evals,compute_j");
        assert!(lines[1].starts_with("0,320,"));
        assert!(lines[2].starts_with("total,320,"));
        assert_eq!(lines.len(), 3);
    }
}
