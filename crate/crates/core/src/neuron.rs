//! Analog integrate-and-fire neuron: capacitor charging, spike times,
//! clock quantization and capacitor sizing.
//!
//! The computing array drives a current proportional to the MAC level
//! (`I(q) = q * I_on`) into the membrane capacitor. The capacitor charges as
//!
//! ```text
//! V(t) = V0 * (1 - exp(-(t / C) * (I / V0)))
//! ```
//!
//! and the neuron fires when `V(t)` reaches `Vth`, which happens at
//! `t = kappa * C / I` with `kappa = -V0 * ln(1 - Vth / V0)`. A flip-flop
//! latches the comparator output on the next rising clock edge, so the
//! observable spike time is a cycle index.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Relative tolerance used to decide that an ideal crossing sits exactly on a
/// clock edge. Needed because minimal capacitors put the tightest pair of
/// spike times on edges, where `t * f_clk` is an integer up to rounding.
const EDGE_SNAP_TOL: f64 = 1e-9;

/// Electrical and timing constants of the neuron circuit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeuronCircuitParams {
    /// Supply voltage `V0` in volts.
    #[serde(rename = "v0")]
    pub supply_voltage: f64,
    /// Comparator threshold `Vth` in volts.
    #[serde(rename = "vth")]
    pub threshold_voltage: f64,
    /// Current of one conducting XNOR cell, in amperes.
    #[serde(rename = "ion")]
    pub cell_on_current: f64,
    /// Clock frequency of the latching flip-flop, in hertz.
    #[serde(rename = "f_clk")]
    pub clock_frequency: f64,
    /// Membrane capacitance in farads.
    pub capacitance: f64,
    /// Number of XNOR cells in the computing array.
    pub array_size: u32,
    /// Largest representable MAC level.
    pub x_max: u32,
}

impl Default for NeuronCircuitParams {
    fn default() -> Self {
        Self {
            supply_voltage: 0.9,
            threshold_voltage: 0.225,
            cell_on_current: 1e-6,
            clock_frequency: 2e9,
            capacitance: 1e-12,
            array_size: 32,
            x_max: 32,
        }
    }
}

impl NeuronCircuitParams {
    pub fn with_capacitance(mut self, capacitance: f64) -> Self {
        self.capacitance = capacitance;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let v0 = self.supply_voltage;
        let vth = self.threshold_voltage;
        if !(v0.is_finite() && vth.is_finite() && vth > 0.0 && vth < v0) {
            return Err(invalid(format!(
                "need 0 < Vth < V0, got Vth = {vth}, V0 = {v0}"
            )));
        }
        for (name, value) in [
            ("cell on-current", self.cell_on_current),
            ("clock frequency", self.clock_frequency),
            ("capacitance", self.capacitance),
        ] {
            if !(value.is_finite() && value > 0.0) {
                return Err(invalid(format!("{name} must be positive, got {value}")));
            }
        }
        if self.array_size == 0 {
            return Err(invalid("array size must be at least 1"));
        }
        if self.x_max == 0 {
            return Err(invalid("x_max must be at least 1"));
        }
        let kappa = self.kappa();
        if !(kappa.is_finite() && kappa > 0.0) {
            return Err(invalid(format!("degenerate charging constant {kappa}")));
        }
        Ok(())
    }

    /// `-V0 * ln(1 - Vth/V0)`, in volts. Spike time is `kappa * C / I`.
    pub fn kappa(&self) -> f64 {
        -self.supply_voltage * (-self.threshold_voltage / self.supply_voltage).ln_1p()
    }

    pub fn clock_period(&self) -> f64 {
        1.0 / self.clock_frequency
    }

    /// `tau = R_eq * C` for a given initial current.
    pub fn time_constant(&self, i_init: f64) -> Result<f64> {
        Ok(equivalent_resistance(i_init, self)? * self.capacitance)
    }

    /// `v = x_max * C * Vth / I_on`, the constant relating spike time to MAC
    /// value in the reciprocal decode `v / t_fire = MAC`.
    pub fn decode_constant(&self) -> f64 {
        self.x_max as f64 * self.capacitance * self.threshold_voltage / self.cell_on_current
    }
}

fn check_non_negative(name: &str, value: f64) -> Result<()> {
    if value.is_finite() && value >= 0.0 {
        Ok(())
    } else {
        Err(invalid(format!("{name} must be finite and non-negative, got {value}")))
    }
}

fn check_positive(name: &str, value: f64) -> Result<()> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(invalid(format!("{name} must be finite and positive, got {value}")))
    }
}

/// Voltage across the membrane capacitor after charging for `t` seconds from
/// an initial current `i_init`.
pub fn capacitor_voltage(t: f64, params: &NeuronCircuitParams, i_init: f64) -> Result<f64> {
    check_non_negative("time", t)?;
    check_positive("initial current", i_init)?;
    params.validate()?;
    let v0 = params.supply_voltage;
    let exponent = -(t / params.capacitance) * (i_init / v0);
    Ok(-v0 * exponent.exp_m1())
}

/// Ideal (unquantized) threshold crossing time for a constant initial current.
pub fn ideal_spike_time(current: f64, params: &NeuronCircuitParams) -> Result<f64> {
    check_positive("current", current)?;
    params.validate()?;
    Ok(params.kappa() * params.capacitance / current)
}

/// Current delivered by the array for a MAC level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LevelCurrent {
    /// Level 0: no cell conducts and the neuron never fires.
    NoCurrent,
    Amperes(f64),
}

impl LevelCurrent {
    pub fn amperes(self) -> Option<f64> {
        match self {
            LevelCurrent::NoCurrent => None,
            LevelCurrent::Amperes(a) => Some(a),
        }
    }
}

pub fn level_current(level: i64, params: &NeuronCircuitParams) -> Result<LevelCurrent> {
    if level < 0 || level > params.array_size as i64 {
        return Err(invalid(format!(
            "MAC level {level} outside [0, {}]",
            params.array_size
        )));
    }
    if level == 0 {
        return Ok(LevelCurrent::NoCurrent);
    }
    Ok(LevelCurrent::Amperes(level as f64 * params.cell_on_current))
}

/// `R_eq = V0 / I_init`.
pub fn equivalent_resistance(i_init: f64, params: &NeuronCircuitParams) -> Result<f64> {
    check_positive("initial current", i_init)?;
    Ok(params.supply_voltage / i_init)
}

/// First rising clock edge at or after `t_ideal`, as a 1-based cycle index.
pub fn quantize_spike_time(t_ideal: f64, clock_frequency: f64) -> Result<u64> {
    check_positive("spike time", t_ideal)?;
    check_positive("clock frequency", clock_frequency)?;
    let edges = t_ideal * clock_frequency;
    let nearest = edges.round();
    let cycle = if nearest >= 1.0 && (edges - nearest).abs() <= EDGE_SNAP_TOL * nearest {
        nearest
    } else {
        edges.ceil()
    };
    if cycle > u64::MAX as f64 {
        return Err(invalid(format!("spike time {t_ideal} s overflows the cycle counter")));
    }
    Ok((cycle as u64).max(1))
}

/// One included MAC level together with its spike time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpikeEntry {
    pub level: u32,
    pub t_ideal_s: f64,
    pub t_cycles: u64,
}

/// Ordered mapping between included MAC levels and spike times. Entries are
/// sorted by increasing spike time, hence decreasing level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpikeTimeSet {
    pub entries: Vec<SpikeEntry>,
    pub params: NeuronCircuitParams,
    pub grt_cycles: u64,
    /// Level reported when no spike arrives by the GRT: 0 when level 0 was
    /// part of the requested set, otherwise the lowest included level.
    pub timeout_level: u32,
}

impl SpikeTimeSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Levels in time order (fastest first).
    pub fn levels(&self) -> Vec<u32> {
        self.entries.iter().map(|e| e.level).collect()
    }

    pub fn ideal_times(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.t_ideal_s).collect()
    }

    pub fn index_of(&self, level: u32) -> Option<usize> {
        self.entries.iter().position(|e| e.level == level)
    }

    /// Guaranteed response time: the last edge at which any included level
    /// can latch.
    pub fn grt(&self) -> f64 {
        self.grt_cycles as f64 / self.params.clock_frequency
    }

    /// Smallest gap between adjacent ideal spike times, in clock periods.
    /// `None` for a single entry.
    pub fn min_ideal_gap_cycles(&self) -> Option<f64> {
        self.entries
            .windows(2)
            .map(|w| (w[1].t_ideal_s - w[0].t_ideal_s) * self.params.clock_frequency)
            .reduce(f64::min)
    }

    /// True when every adjacent pair of ideal crossings is at least one clock
    /// period apart, so the levels latch on distinct edges regardless of the
    /// clock phase.
    pub fn is_phase_robust(&self) -> bool {
        self.min_ideal_gap_cycles()
            .is_none_or(|gap| gap >= 1.0 - EDGE_SNAP_TOL)
    }

    /// Sub-set of this spike-time set restricted to `levels`, keeping the
    /// original times and cycles. GRT is recomputed over the survivors.
    pub fn restrict_to(&self, levels: &[u32]) -> Result<SpikeTimeSet> {
        let entries: Vec<SpikeEntry> = self
            .entries
            .iter()
            .filter(|e| levels.contains(&e.level))
            .copied()
            .collect();
        if entries.len() != levels.len() {
            return Err(invalid("restriction names a level outside the spike-time set"));
        }
        let grt_cycles = entries.iter().map(|e| e.t_cycles).max().unwrap_or(0);
        let timeout_level = if self.timeout_level == 0 {
            0
        } else {
            entries.iter().map(|e| e.level).min().unwrap_or(0)
        };
        Ok(SpikeTimeSet {
            entries,
            params: self.params,
            grt_cycles,
            timeout_level,
        })
    }
}

/// Positive levels of `levels`, sorted ascending and deduplicated. Level 0 is
/// dropped: it is represented by a timeout, not a spike.
fn spiking_levels(levels: &[u32], params: &NeuronCircuitParams) -> Result<Vec<u32>> {
    let mut out: Vec<u32> = Vec::with_capacity(levels.len());
    for &q in levels {
        if q > params.array_size {
            return Err(invalid(format!(
                "MAC level {q} outside [0, {}]",
                params.array_size
            )));
        }
        if q > 0 {
            out.push(q);
        }
    }
    out.sort_unstable();
    out.dedup();
    if out.is_empty() {
        return Err(invalid("level set has no spiking (non-zero) level"));
    }
    Ok(out)
}

/// Assigns every included level its ideal and latched spike time. Level 0 is
/// accepted and skipped. Fails if two levels latch on the same clock edge.
pub fn build_spike_time_set(levels: &[u32], params: &NeuronCircuitParams) -> Result<SpikeTimeSet> {
    params.validate()?;
    let ascending = spiking_levels(levels, params)?;
    let mut entries = Vec::with_capacity(ascending.len());
    // Highest level fires first.
    for &q in ascending.iter().rev() {
        let current = level_current(q as i64, params)?
            .amperes()
            .expect("positive level has a current");
        let t_ideal_s = ideal_spike_time(current, params)?;
        let t_cycles = quantize_spike_time(t_ideal_s, params.clock_frequency)?;
        entries.push(SpikeEntry {
            level: q,
            t_ideal_s,
            t_cycles,
        });
    }
    for pair in entries.windows(2) {
        if pair[0].t_cycles == pair[1].t_cycles {
            return Err(Error::CapacitorTooSmall {
                fast_level: pair[0].level,
                slow_level: pair[1].level,
                cycle: pair[0].t_cycles,
            });
        }
    }
    let grt_cycles = entries.last().map(|e| e.t_cycles).unwrap_or(0);
    let timeout_level = if levels.contains(&0) { 0 } else { ascending[0] };
    Ok(SpikeTimeSet {
        entries,
        params: *params,
        grt_cycles,
        timeout_level,
    })
}

/// Smallest capacitance for which adjacent included levels cross the
/// threshold at least one clock period apart. The `capacitance` field of
/// `params` is ignored.
///
/// With `t(q) = kappa * C / (q * I_on)` the gap between levels `lo < hi` is
/// `kappa * C / I_on * (hi - lo) / (lo * hi)`, so the binding pair is the one
/// maximizing `lo * hi / (hi - lo)`. A single level is sized so that it fires
/// exactly one clock period after start.
pub fn size_capacitor(levels: &[u32], params: &NeuronCircuitParams) -> Result<f64> {
    params.with_capacitance(1.0).validate()?;
    let ascending = spiking_levels(levels, params)?;
    let worst = if ascending.len() == 1 {
        ascending[0] as f64
    } else {
        ascending
            .windows(2)
            .map(|w| {
                let (lo, hi) = (w[0] as f64, w[1] as f64);
                lo * hi / (hi - lo)
            })
            .fold(f64::MIN, f64::max)
    };
    Ok(params.clock_period() * params.cell_on_current * worst / params.kappa())
}

/// Energy stored in the membrane capacitor per MAC, `C * Vth^2 / 2`.
pub fn energy_per_mac(capacitance: f64, threshold_voltage: f64) -> f64 {
    0.5 * capacitance * threshold_voltage * threshold_voltage
}
