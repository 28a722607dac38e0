//! Cycle-level model of the filtering/attention co-processor.
//!
//! A head first waits for the DRAM first-access latency and its K/V preload,
//! then streams its queries through the filtering unit (IPU + Selector) and
//! the attention unit (MAC, softmax, prob x V). Heads are chained either
//! back-to-back or with the next head's load overlapped on the current head's
//! compute when double buffering is on.

mod config;
mod engine;
mod head;
mod workload;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::perf::{buffering_rule, estimate};

pub use config::{DoubleBufferMode, HardwareConfig, PowerConfig, HW_CONFIG_VERSION};
pub use head::{
    plan_on_demand_fetch, transfer_cycles, FetchPlan, QUERY_WINDOW, SELECTOR_DRAIN_CYCLES, SRAM_BANKS, SRAM_ROW_BITS,
};
pub use workload::{Selections, Workload};

use head::{run_head, HeadRun};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleReport {
    pub heads: usize,
    pub total_cycles: u64,
    /// K/V preload transfer cycles, summed over heads.
    pub load_cycles: u64,
    /// Query-pipeline span, summed over heads.
    pub compute_cycles: u64,
    /// IPU busy cycles.
    pub fu_cycles: u64,
    /// MAC array busy cycles.
    pub au_cycles: u64,
    pub selector_cycles: u64,
    pub softmax_cycles: u64,
    pub probv_cycles: u64,
    pub dram_bytes_read: u64,
    pub dram_bytes_written: u64,
    /// K/V share of `dram_bytes_read`.
    pub kv_bytes_read: u64,
    /// Cycles inside the query pipelines where the MAC array sat idle.
    pub pipeline_stalls: u64,
    pub energy_joules: f64,
    pub keys_fetched_fraction: f64,
    pub double_buffered: bool,
}

/// Static power over the run plus the per-byte DRAM term.
pub fn energy_joules(hw: &HardwareConfig, total_cycles: u64, bytes: u64) -> f64 {
    hw.power.static_w() * total_cycles as f64 / hw.clock_hz + hw.power.dram_j_per_byte * bytes as f64
}

fn report(runs: &[HeadRun], total_cycles: u64, buffered: bool, hw: &HardwareConfig) -> CycleReport {
    let sum = |f: fn(&HeadRun) -> u64| runs.iter().map(f).sum::<u64>();
    let dram_bytes_read = sum(|r| r.bytes_read);
    let dram_bytes_written = sum(|r| r.bytes_written);
    let fetched: f64 = runs.iter().map(|r| r.keys_fetched as f64 / r.n as f64).sum();
    CycleReport {
        heads: runs.len(),
        total_cycles,
        load_cycles: sum(|r| r.load_cycles),
        compute_cycles: sum(|r| r.compute_cycles),
        fu_cycles: sum(|r| r.ipu_busy),
        au_cycles: sum(|r| r.mac_busy),
        selector_cycles: sum(|r| r.selector_busy),
        softmax_cycles: sum(|r| r.softmax_busy),
        probv_cycles: sum(|r| r.probv_busy),
        dram_bytes_read,
        dram_bytes_written,
        kv_bytes_read: sum(|r| r.kv_bytes),
        pipeline_stalls: sum(|r| r.compute_cycles - r.mac_busy),
        energy_joules: energy_joules(hw, total_cycles, dram_bytes_read + dram_bytes_written),
        keys_fetched_fraction: fetched / runs.len() as f64,
        double_buffered: buffered,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Buffering {
    On,
    Off,
}

impl Buffering {
    pub fn is_on(self) -> bool {
        self == Self::On
    }
}

/// The gating rule applied to the analytical load/compute ratio of `w`.
pub fn decide_double_buffering(w: &Workload, hw: &HardwareConfig) -> Result<Buffering> {
    let est = estimate(&w.perf_inputs(hw))?;
    Ok(if buffering_rule(est.ratio, hw.gating_threshold) {
        Buffering::On
    } else {
        Buffering::Off
    })
}

fn resolve_buffering(heads: &[Workload], hw: &HardwareConfig) -> Result<bool> {
    Ok(match hw.double_buffer {
        DoubleBufferMode::On => true,
        DoubleBufferMode::Off => false,
        DoubleBufferMode::Auto => {
            let mut on = false;
            for w in heads {
                on |= decide_double_buffering(w, hw)?.is_on();
            }
            on
        }
    })
}

/// Simulates one head, fetching K/V on demand when the config asks for it.
pub fn simulate_head(w: &Workload, hw: &HardwareConfig) -> Result<CycleReport> {
    simulate_model(std::slice::from_ref(w), hw)
}

/// Simulates one head with on-demand K/V fetching regardless of the config.
pub fn simulate_odf(w: &Workload, hw: &HardwareConfig) -> Result<CycleReport> {
    let mut hw = hw.clone();
    hw.on_demand_fetch = true;
    simulate_head(w, &hw)
}

/// Head-level schedule. Buffered:
/// `load_0 + sum_h max(load_{h+1}, comp_h) + comp_last`; unbuffered:
/// `sum_h (load_h + comp_h)`.
pub fn head_schedule(loads: &[u64], comps: &[u64], buffered: bool) -> u64 {
    debug_assert_eq!(loads.len(), comps.len());
    if loads.is_empty() {
        return 0;
    }
    if !buffered {
        return loads.iter().sum::<u64>() + comps.iter().sum::<u64>();
    }
    let h = loads.len();
    let overlapped: u64 = (0..h - 1).map(|i| loads[i + 1].max(comps[i])).sum();
    loads[0] + overlapped + comps[h - 1]
}

pub fn simulate_model(heads: &[Workload], hw: &HardwareConfig) -> Result<CycleReport> {
    if heads.is_empty() {
        return Err(Error::Empty("heads"));
    }
    let runs = heads
        .iter()
        .map(|w| run_head(w, hw, hw.on_demand_fetch))
        .collect::<Result<Vec<_>>>()?;
    let buffered = resolve_buffering(heads, hw)?;
    let loads: Vec<u64> = runs.iter().map(HeadRun::load_phase).collect();
    let comps: Vec<u64> = runs.iter().map(|r| r.compute_cycles).collect();
    Ok(report(&runs, head_schedule(&loads, &comps, buffered), buffered, hw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mrf::{KeyIndexSet, SelectionTrace};

    fn server() -> HardwareConfig {
        HardwareConfig::server()
    }

    #[test]
    fn edge_load_cycles() {
        let w = Workload::synthetic(512, 512, 64, 0.25, 0.5).unwrap();
        let r = simulate_head(&w, &HardwareConfig::edge()).unwrap();
        assert_eq!(r.load_cycles, 5760);
        assert_eq!(r.kv_bytes_read, 147_456);
    }

    #[test]
    fn single_wave_mac() {
        // m = 2 * beta * n: each query needs one MAC wave of two cycles
        let mut hw = server();
        hw.mac_units = 16;
        let w = Workload::synthetic(64, 1, 64, 0.125, 0.5).unwrap();
        let r = simulate_head(&w, &hw).unwrap();
        assert_eq!(r.au_cycles, 2);
    }

    #[test]
    fn server_head_tracks_model() {
        let w = Workload::synthetic(512, 512, 64, 0.25, 0.5).unwrap();
        let hw = server();
        let r = simulate_head(&w, &hw).unwrap();
        let est = estimate(&w.perf_inputs(&hw)).unwrap();
        let predicted = est.t_load + est.t_comp;
        let rel = (r.total_cycles as f64 - predicted).abs() / predicted;
        assert!(rel < 0.1, "{r:?} vs {predicted}");
        assert!(r.total_cycles >= r.fu_cycles.max(r.au_cycles).max(r.load_cycles));
    }

    #[test]
    fn overflow_is_reported() {
        let w = Workload::synthetic(1024, 1, 64, 0.25, 0.5).unwrap();
        match simulate_head(&w, &HardwareConfig::edge()) {
            Err(Error::BufferOverflow { buffer, .. }) => assert_eq!(buffer, "AU K/V buffer"),
            other => panic!("{other:?}"),
        }
    }

    fn same_keys(l: usize, keys: &[usize]) -> Workload {
        let set = KeyIndexSet::new(keys.to_vec()).unwrap();
        let t = SelectionTrace {
            survivors_per_round: vec![set.clone()],
            selected: set,
        };
        Workload {
            n: 64,
            l,
            d: 16,
            bitwidths: vec![4],
            reuse_round0: true,
            selections: Selections::Explicit(vec![t; l]),
        }
    }

    #[test]
    fn odf_perfect_reuse() {
        let hw = server();
        let fu = 64 * 16 / 2;
        for l in [1, 8, 32] {
            let r = simulate_odf(&same_keys(l, &[3, 9, 27]), &hw).unwrap();
            assert_eq!(r.kv_bytes_read, fu + 3 * 4 * 16);
        }
    }

    #[test]
    fn odf_needs_traces() {
        let w = Workload::synthetic(64, 4, 16, 0.25, 0.5).unwrap();
        assert!(simulate_odf(&w, &server()).is_err());
    }

    #[test]
    fn schedule_formulas() {
        assert_eq!(head_schedule(&[10, 10, 10], &[5, 5, 5], false), 45);
        assert_eq!(head_schedule(&[10, 10, 10], &[5, 5, 5], true), 10 + 10 + 10 + 5);
        assert_eq!(head_schedule(&[3, 3], &[8, 8], true), 3 + 8 + 8);
        let loads = [100u64; 12];
        let comps = [100u64; 12];
        assert_eq!(head_schedule(&loads, &comps, true), 100 + 12 * 100);
    }

    #[test]
    fn model_of_one_head_is_the_head() {
        let w = Workload::synthetic(256, 64, 64, 0.25, 0.5).unwrap();
        let hw = server();
        assert_eq!(simulate_model(std::slice::from_ref(&w), &hw).unwrap(), simulate_head(&w, &hw).unwrap());
        assert!(simulate_model(&[], &hw).is_err());
    }

    #[test]
    fn forced_buffering_modes() {
        let heads = vec![Workload::synthetic(256, 64, 64, 0.25, 0.5).unwrap(); 4];
        let mut hw = server();
        hw.double_buffer = DoubleBufferMode::On;
        let on = simulate_model(&heads, &hw).unwrap();
        hw.double_buffer = DoubleBufferMode::Off;
        let off = simulate_model(&heads, &hw).unwrap();
        assert!(on.double_buffered && !off.double_buffered);
        assert!(on.total_cycles <= off.total_cycles);
        assert!(off.total_cycles - on.total_cycles <= off.load_cycles + 4 * hw.dram_latency_cycles);
    }

    #[test]
    fn energy_scales_with_time() {
        let hw = server();
        let e1 = energy_joules(&hw, 1000, 0);
        let e2 = energy_joules(&hw, 2000, 0);
        assert_eq!(e2, 2.0 * e1);
    }

    #[test]
    fn deterministic() {
        let w = Workload::synthetic(512, 128, 64, 0.125, 0.5).unwrap();
        let hw = HardwareConfig::edge();
        assert_eq!(simulate_head(&w, &hw).unwrap(), simulate_head(&w, &hw).unwrap());
    }
}
