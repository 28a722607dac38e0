//! Query-level pipeline of one head.
//!
//! Each query becomes a chain of tasks: Q fetch, one IPU pass and one Selector
//! pass per filtering round, optional on-demand K/V fetch, MAC, softmax,
//! prob x V and writeback. The 4-bit and 16-bit Q registers are double
//! buffered and loaded separately: the filtering unit takes query `i` once it
//! has finished query `i - 2`, the attention unit once its MAC pass of query
//! `i - 2` is done. The filtering unit may run at most `QUERY_WINDOW` queries
//! ahead of the MAC array.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mrf::{KeyIndexSet, SelectionTrace};

use super::config::HardwareConfig;
use super::engine::{Priority, Scheduler, TaskId};
use super::workload::{Candidates, Workload};

pub const SRAM_ROW_BITS: usize = 512;
pub const SRAM_BANKS: usize = 8;
/// Divider and threshold comparator latency after the last score arrives.
pub const SELECTOR_DRAIN_CYCLES: u64 = 4;
/// Queries the filtering unit may have in flight ahead of the MAC array.
pub const QUERY_WINDOW: usize = 4;

const CHANNEL: usize = 0;
const IPU: usize = 1;
const SELECTOR: usize = 2;
const MAC: usize = 3;
const SOFTMAX: usize = 4;
const PROBV: usize = 5;
const RESOURCES: usize = 6;

const FETCH: u64 = 0;
const WRITEBACK: u64 = 1;

pub(crate) fn div_ceil(a: u64, b: u64) -> u64 {
    a.div_ceil(b)
}

/// Cycles to move `bytes` over a channel of `bandwidth` bytes per cycle,
/// rounded up but robust to binary representation error in `bandwidth`.
pub fn transfer_cycles(bytes: u64, bandwidth: f64) -> u64 {
    if bytes == 0 {
        return 0;
    }
    let x = bytes as f64 / bandwidth;
    let r = x.round();
    if (x - r).abs() <= 1e-9 * x.max(1.0) {
        r as u64
    } else {
        x.ceil() as u64
    }
}

/// Bytes for `count` values of `bits` bits each.
fn packed_bytes(count: usize, bits: usize) -> u64 {
    div_ceil((count * bits) as u64, 8)
}

/// Which 2-bit planes of the 4-bit keys a round reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Planes {
    Msb,
    Lsb,
    Both,
}

/// Worst per-bank row count for reading `cands` from the K buffer. Keys are
/// packed into 512-bit rows; the MSB row of a group sits in bank `row % 8` and
/// the LSB row four banks over, so both planes of a group can be read together.
fn bank_cycles(cands: Candidates<'_>, planes: Planes, d: usize) -> u64 {
    let plane_bits = 2 * d;
    let tokens_per_row = (SRAM_ROW_BITS / plane_bits).max(1);
    let rows_per_group = plane_bits.div_ceil(SRAM_ROW_BITS);
    let mut counts = [0u64; SRAM_BANKS];
    let mut last_group = usize::MAX;
    cands.for_each(|j| {
        let g = j / tokens_per_row;
        if g == last_group {
            return;
        }
        last_group = g;
        for t in 0..rows_per_group {
            let row = g * rows_per_group + t;
            if planes != Planes::Lsb {
                counts[row % SRAM_BANKS] += 1;
            }
            if planes != Planes::Msb {
                counts[(row + SRAM_BANKS / 2) % SRAM_BANKS] += 1;
            }
        }
    });
    counts.into_iter().max().unwrap_or(0)
}

/// Keys fetched on demand for a sequence of queries: each key is fetched by
/// the first query that selects it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FetchPlan {
    /// Union of all selections.
    pub fetched: KeyIndexSet,
    /// Keys newly fetched by each query.
    pub misses_per_query: Vec<usize>,
}

pub fn plan_on_demand_fetch(n: usize, traces: &[SelectionTrace]) -> Result<FetchPlan> {
    let mut seen = vec![false; n];
    let mut misses = Vec::with_capacity(traces.len());
    for t in traces {
        let mut fresh = 0;
        for j in t.selected.iter() {
            let slot = seen
                .get_mut(j)
                .ok_or_else(|| Error::InvalidArgument(format!("key {j} beyond n = {n}")))?;
            if !*slot {
                *slot = true;
                fresh += 1;
            }
        }
        misses.push(fresh);
    }
    let union: Vec<usize> = (0..n).filter(|&j| seen[j]).collect();
    Ok(FetchPlan {
        fetched: KeyIndexSet::new(union)?,
        misses_per_query: misses,
    })
}

/// Raw timing and traffic of one simulated head.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct HeadRun {
    pub latency: u64,
    pub load_cycles: u64,
    pub compute_cycles: u64,
    pub ipu_busy: u64,
    pub selector_busy: u64,
    pub mac_busy: u64,
    pub softmax_busy: u64,
    pub probv_busy: u64,
    pub bytes_read: u64,
    pub bytes_written: u64,
    pub kv_bytes: u64,
    pub keys_fetched: usize,
    pub n: usize,
}

impl HeadRun {
    /// Cycles before compute may start: first-access latency plus preload.
    pub fn load_phase(&self) -> u64 {
        self.latency + self.load_cycles
    }
}

fn overflow(buffer: &'static str, required: u64, capacity: u64) -> Result<()> {
    if required > capacity {
        Err(Error::BufferOverflow {
            buffer,
            required,
            capacity,
        })
    } else {
        Ok(())
    }
}

pub(crate) fn run_head(w: &Workload, hw: &HardwareConfig, on_demand: bool) -> Result<HeadRun> {
    w.validate()?;
    hw.validate()?;
    let (n, l, d) = (w.n, w.l, w.d);
    let rounds = w.rounds();

    let fu_bytes = packed_bytes(n * d, 4);
    overflow("FU K buffer", fu_bytes, hw.fu_kbuf_bytes)?;
    let kv_row = 4 * d as u64;
    let plan = if on_demand {
        let traces = w
            .traces()
            .ok_or_else(|| Error::InvalidArgument("on-demand fetch needs explicit selections".into()))?;
        Some(plan_on_demand_fetch(n, traces)?)
    } else {
        None
    };
    let (preload, keys_fetched) = match &plan {
        None => {
            overflow("AU K/V buffer", kv_row * n as u64, hw.au_kvbuf_bytes)?;
            (fu_bytes + kv_row * n as u64, n)
        }
        Some(p) => {
            overflow("AU K/V buffer", kv_row * p.fetched.len() as u64, hw.au_kvbuf_bytes)?;
            (fu_bytes, p.fetched.len())
        }
    };

    let bw = hw.dram_bandwidth;
    let fu_q_bytes = packed_bytes(d, 4);
    let au_q_bytes = 2 * d as u64;
    let q_bytes = fu_q_bytes + au_q_bytes;
    let wb_bytes = 2 * d as u64;
    let fu_q_cycles = transfer_cycles(fu_q_bytes, bw);
    let au_q_cycles = transfer_cycles(au_q_bytes, bw);
    let wb_cycles = transfer_cycles(wb_bytes, bw);
    let (p, m, s) = (hw.ipu_pes as u64, hw.mac_units as u64, hw.selector_parallelism as u64);
    let exp_lanes = (hw.softmax_units * hw.exp_units_per_softmax) as u64;
    let mults = hw.probv_multipliers as u64;

    let planes: Vec<Planes> = (0..rounds)
        .map(|r| match w.bitwidths[r] {
            2 => Planes::Msb,
            _ if w.reuses_previous(r) => Planes::Lsb,
            _ => Planes::Both,
        })
        .collect();

    let mut sched = Scheduler::new(RESOURCES);
    let mut fu_done: Vec<TaskId> = Vec::with_capacity(l);
    let mut au_done: Vec<TaskId> = Vec::with_capacity(l);
    let mut odf_bytes = 0u64;
    let stages = rounds as u64 + 1;
    for i in 0..l {
        let key = |stage: u64| Priority(0, i as u64 * stages + stage);
        let mut deps = Vec::new();
        if i >= 2 {
            deps.push(fu_done[i - 2]);
        }
        if i >= QUERY_WINDOW {
            deps.push(au_done[i - QUERY_WINDOW]);
        }
        let mut last = sched.add(CHANNEL, fu_q_cycles, Priority(FETCH, i as u64), &deps);
        for (r, &pl) in planes.iter().enumerate() {
            let cands = w.round_candidates(i, r);
            let c = cands.len() as u64;
            let ipu = (2 * div_ceil(c, p)).max(bank_cycles(cands, pl, d));
            let score = sched.add(IPU, ipu, key(r as u64), &[last]);
            last = sched.add(SELECTOR, SELECTOR_DRAIN_CYCLES + div_ceil(c, s), key(r as u64), &[score]);
        }
        fu_done.push(last);

        let au_q_deps: &[TaskId] = if i >= 2 { &au_done[i - 2..i - 1] } else { &[] };
        let au_q = sched.add(CHANNEL, au_q_cycles, Priority(FETCH, i as u64), au_q_deps);

        let k = w.selected(i).len() as u64;
        let misses = plan.as_ref().map_or(0, |p| p.misses_per_query[i] as u64);
        let hits = k - misses;
        let mut mac_last = last;
        if hits > 0 {
            mac_last = sched.add(MAC, 2 * div_ceil(hits, m), key(rounds as u64), &[mac_last, au_q]);
        }
        if misses > 0 {
            let bytes = misses * kv_row;
            odf_bytes += bytes;
            let fetch = sched.add(CHANNEL, transfer_cycles(bytes, bw), Priority(FETCH, i as u64), &[last]);
            mac_last = sched.add(MAC, 2 * div_ceil(misses, m), key(rounds as u64), &[mac_last, fetch, au_q]);
        }
        au_done.push(mac_last);
        let smx = sched.add(SOFTMAX, div_ceil(k, exp_lanes), key(rounds as u64), &[mac_last]);
        let pv = sched.add(PROBV, div_ceil(k * d as u64, mults), key(rounds as u64), &[smx]);
        sched.add(CHANNEL, wb_cycles, Priority(WRITEBACK, i as u64), &[pv]);
    }
    let compute_cycles = sched.run();

    Ok(HeadRun {
        latency: hw.dram_latency_cycles,
        load_cycles: transfer_cycles(preload, bw),
        compute_cycles,
        ipu_busy: sched.busy(IPU),
        selector_busy: sched.busy(SELECTOR),
        mac_busy: sched.busy(MAC),
        softmax_busy: sched.busy(SOFTMAX),
        probv_busy: sched.busy(PROBV),
        bytes_read: preload + odf_bytes + q_bytes * l as u64,
        bytes_written: wb_bytes * l as u64,
        kv_bytes: preload + odf_bytes,
        keys_fetched,
        n,
    })
}
