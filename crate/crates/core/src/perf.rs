//! Closed-form pipeline model: per-head load and compute cycles, their ratio,
//! the double-buffering rule and the FU/AU parallelism balance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bytes loaded per token per feature for one head: 16-bit K and V for the
/// attention unit (4 B) plus the 4-bit K copy for the filtering unit (0.5 B).
pub const LOAD_BYTES_PER_TOKEN_FEATURE: f64 = 4.5;

/// Default load/compute ratio at or above which double buffering stays on.
pub const DEFAULT_GATING_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerfInputs {
    /// Sequence length (keys per head).
    pub n: usize,
    /// Queries per head.
    pub l: usize,
    /// Per-head feature size.
    pub d: usize,
    /// DRAM bandwidth in bytes per cycle.
    pub bandwidth: f64,
    /// Fraction of keys kept after the last round.
    pub beta: f64,
    /// Fraction of keys kept after round 0.
    pub gamma: f64,
    /// MAC units in the attention unit.
    pub m: usize,
    /// PEs in the inner-product unit.
    pub p: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineEstimate {
    pub t_load: f64,
    pub t_comp: f64,
    /// Filtering-unit cycles per query.
    pub t_comp_fu: f64,
    pub ratio: f64,
    pub balanced_m_over_p: f64,
}

fn check_fraction(name: &str, x: f64) -> Result<()> {
    if x.is_finite() && x > 0.0 && x <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{name} = {x} outside (0, 1]")))
    }
}

pub fn estimate(inp: &PerfInputs) -> Result<PipelineEstimate> {
    for (name, v) in [("n", inp.n), ("l", inp.l), ("d", inp.d), ("m", inp.m), ("p", inp.p)] {
        if v == 0 {
            return Err(Error::InvalidArgument(format!("{name} must be positive")));
        }
    }
    if !(inp.bandwidth.is_finite() && inp.bandwidth > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "bandwidth = {} must be positive",
            inp.bandwidth
        )));
    }
    check_fraction("beta", inp.beta)?;
    check_fraction("gamma", inp.gamma)?;

    let (n, l, d) = (inp.n as f64, inp.l as f64, inp.d as f64);
    let t_load = LOAD_BYTES_PER_TOKEN_FEATURE * d * n / inp.bandwidth;
    let t_comp = 2.0 * inp.beta * n * l / inp.m as f64;
    let t_comp_fu = 2.0 * (1.0 + inp.gamma) * n / inp.p as f64;
    Ok(PipelineEstimate {
        t_load,
        t_comp,
        t_comp_fu,
        ratio: t_load / t_comp,
        balanced_m_over_p: inp.beta / (1.0 + inp.gamma),
    })
}

/// The shared gating rule: keep both K/V buffers when loading is within
/// `threshold` of compute or slower; gate one off otherwise.
pub fn buffering_rule(ratio: f64, threshold: f64) -> bool {
    ratio >= threshold
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Advice {
    pub double_buffer: bool,
    /// `m / p` rounded to the nearest power of two.
    pub m_to_p_hint: f64,
    /// The hint written as `1:N` or `N:1`.
    pub m_to_p_label: String,
}

pub fn advise(est: &PipelineEstimate) -> Advice {
    advise_with_threshold(est, DEFAULT_GATING_THRESHOLD)
}

pub fn advise_with_threshold(est: &PipelineEstimate, threshold: f64) -> Advice {
    let exp = est.balanced_m_over_p.log2().round() as i32;
    let hint = 2f64.powi(exp);
    let label = if exp <= 0 {
        format!("1:{}", 1u64 << (-exp))
    } else {
        format!("{}:1", 1u64 << exp)
    };
    Advice {
        double_buffer: buffering_rule(est.ratio, threshold),
        m_to_p_hint: hint,
        m_to_p_label: label,
    }
}
