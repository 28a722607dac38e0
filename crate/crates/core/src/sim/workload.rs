use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mrf::{FilterConfig, KeyIndexSet, SelectionTrace};
use crate::perf::PerfInputs;

use super::config::HardwareConfig;

/// Per-query key selections, either measured or described by keep fractions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selections {
    /// Every intermediate round keeps `gamma * n` keys and the last round
    /// keeps `beta * n`.
    Synthetic { beta: f64, gamma: f64 },
    Explicit(Vec<SelectionTrace>),
}

/// One attention head as seen by the simulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Workload {
    pub n: usize,
    pub l: usize,
    pub d: usize,
    #[serde(default = "default_bitwidths")]
    pub bitwidths: Vec<u32>,
    #[serde(default = "default_reuse")]
    pub reuse_round0: bool,
    pub selections: Selections,
}

fn default_bitwidths() -> Vec<u32> {
    vec![2, 4]
}

fn default_reuse() -> bool {
    true
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum Candidates<'a> {
    /// The first `count` keys.
    Prefix(usize),
    Set(&'a KeyIndexSet),
}

impl Candidates<'_> {
    pub fn len(&self) -> usize {
        match self {
            Self::Prefix(c) => *c,
            Self::Set(s) => s.len(),
        }
    }

    pub fn for_each(&self, mut f: impl FnMut(usize)) {
        match self {
            Self::Prefix(c) => (0..*c).for_each(f),
            Self::Set(s) => s.iter().for_each(&mut f),
        }
    }
}

fn keep_count(frac: f64, n: usize) -> usize {
    ((frac * n as f64).ceil() as usize).clamp(1, n)
}

impl Workload {
    /// Default two-round (2-bit, 4-bit) filtering with the given keep fractions.
    pub fn synthetic(n: usize, l: usize, d: usize, beta: f64, gamma: f64) -> Result<Self> {
        let w = Self {
            n,
            l,
            d,
            bitwidths: default_bitwidths(),
            reuse_round0: true,
            selections: Selections::Synthetic { beta, gamma },
        };
        w.validate()?;
        Ok(w)
    }

    pub fn from_traces(n: usize, d: usize, cfg: &FilterConfig, traces: Vec<SelectionTrace>) -> Result<Self> {
        let w = Self {
            n,
            l: traces.len(),
            d,
            bitwidths: cfg.bitwidths.clone(),
            reuse_round0: cfg.reuse_round0,
            selections: Selections::Explicit(traces),
        };
        w.validate()?;
        Ok(w)
    }

    pub fn rounds(&self) -> usize {
        self.bitwidths.len()
    }

    pub fn traces(&self) -> Option<&[SelectionTrace]> {
        match &self.selections {
            Selections::Explicit(t) => Some(t),
            Selections::Synthetic { .. } => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d == 0 || self.l == 0 {
            return Err(Error::InvalidArgument("n, l and d must be positive".into()));
        }
        if self.l > self.n {
            return Err(Error::InvalidArgument(format!("l = {} exceeds n = {}", self.l, self.n)));
        }
        if let Some(&b) = self.bitwidths.iter().find(|&&b| b != 2 && b != 4) {
            return Err(Error::UnsupportedBits(b));
        }
        match &self.selections {
            Selections::Synthetic { beta, gamma } => {
                for (name, v) in [("beta", *beta), ("gamma", *gamma)] {
                    if !(v.is_finite() && v > 0.0 && v <= 1.0) {
                        return Err(Error::InvalidArgument(format!("{name} = {v} outside (0, 1]")));
                    }
                }
                if beta > gamma {
                    return Err(Error::InvalidArgument(format!("beta = {beta} exceeds gamma = {gamma}")));
                }
            }
            Selections::Explicit(traces) => {
                if traces.len() != self.l {
                    return Err(Error::Shape(format!("{} traces for l = {}", traces.len(), self.l)));
                }
                for t in traces {
                    if t.survivors_per_round.len() != self.rounds() {
                        return Err(Error::Shape(format!(
                            "trace has {} rounds, workload {}",
                            t.survivors_per_round.len(),
                            self.rounds()
                        )));
                    }
                    if t.selected.last() >= self.n {
                        return Err(Error::InvalidArgument(format!("key {} beyond n", t.selected.last())));
                    }
                    let mut prev: Option<&KeyIndexSet> = None;
                    for s in &t.survivors_per_round {
                        if s.last() >= self.n || prev.is_some_and(|p| !s.is_subset_of(p)) {
                            return Err(Error::InvalidArgument("survivor sets must nest within [0, n)".into()));
                        }
                        prev = Some(s);
                    }
                    if prev.is_some_and(|p| *p != t.selected) {
                        return Err(Error::InvalidArgument("selection differs from last round survivors".into()));
                    }
                }
            }
        }
        Ok(())
    }

    /// Candidates scored in round `r` of query `i`.
    pub(crate) fn round_candidates(&self, i: usize, r: usize) -> Candidates<'_> {
        if r == 0 {
            return Candidates::Prefix(self.n);
        }
        match &self.selections {
            Selections::Synthetic { gamma, .. } => Candidates::Prefix(keep_count(*gamma, self.n)),
            Selections::Explicit(t) => Candidates::Set(&t[i].survivors_per_round[r - 1]),
        }
    }

    pub(crate) fn selected(&self, i: usize) -> Candidates<'_> {
        match &self.selections {
            Selections::Synthetic { .. } if self.rounds() == 0 => Candidates::Prefix(self.n),
            Selections::Synthetic { beta, .. } => Candidates::Prefix(keep_count(*beta, self.n)),
            Selections::Explicit(t) => Candidates::Set(&t[i].selected),
        }
    }

    /// Whether round `r` scores only the low bit pair on top of round `r - 1`.
    pub(crate) fn reuses_previous(&self, r: usize) -> bool {
        self.reuse_round0 && r > 0 && self.bitwidths[r - 1] == 2 && self.bitwidths[r] == 4
    }

    /// Effective `(beta, gamma)`: final and round-0 keep fractions.
    pub fn keep_fractions(&self) -> (f64, f64) {
        if self.rounds() == 0 {
            return (1.0, 1.0);
        }
        match &self.selections {
            Selections::Synthetic { beta, .. } if self.rounds() == 1 => (*beta, *beta),
            Selections::Synthetic { beta, gamma } => (*beta, *gamma),
            Selections::Explicit(t) => {
                let n = self.n as f64 * t.len() as f64;
                let kept: usize = t.iter().map(|t| t.selected.len()).sum();
                let first: usize = t.iter().map(|t| t.survivors_per_round[0].len()).sum();
                (kept as f64 / n, first as f64 / n)
            }
        }
    }

    pub fn perf_inputs(&self, hw: &HardwareConfig) -> PerfInputs {
        let (beta, gamma) = self.keep_fractions();
        PerfInputs {
            n: self.n,
            l: self.l,
            d: self.d,
            bandwidth: hw.dram_bandwidth,
            beta,
            gamma,
            m: hw.mac_units,
            p: hw.ipu_pes,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(rounds: &[&[usize]]) -> SelectionTrace {
        let sets: Vec<KeyIndexSet> = rounds.iter().map(|r| KeyIndexSet::new(r.to_vec()).unwrap()).collect();
        SelectionTrace {
            selected: sets.last().unwrap().clone(),
            survivors_per_round: sets,
        }
    }

    #[test]
    fn synthetic_counts() {
        let w = Workload::synthetic(512, 512, 64, 0.25, 0.5).unwrap();
        assert_eq!(w.round_candidates(0, 0).len(), 512);
        assert_eq!(w.round_candidates(0, 1).len(), 256);
        assert_eq!(w.selected(3).len(), 128);
        assert!(w.reuses_previous(1));
        assert_eq!(w.keep_fractions(), (0.25, 0.5));
    }

    #[test]
    fn validation() {
        assert!(Workload::synthetic(8, 9, 4, 0.5, 0.5).is_err());
        assert!(Workload::synthetic(8, 8, 4, 0.0, 0.5).is_err());
        assert!(Workload::synthetic(8, 8, 4, 0.75, 0.5).is_err());
        let cfg = FilterConfig::default();
        let ok = trace(&[&[0, 2, 5], &[2]]);
        assert!(Workload::from_traces(8, 4, &cfg, vec![ok.clone()]).is_ok());
        let loose = trace(&[&[0, 2], &[3]]);
        assert!(Workload::from_traces(8, 4, &cfg, vec![loose]).is_err());
        let wide = trace(&[&[0, 9], &[9]]);
        assert!(Workload::from_traces(8, 4, &cfg, vec![wide]).is_err());
        let mut w = Workload::from_traces(8, 4, &cfg, vec![ok]).unwrap();
        w.bitwidths = vec![2, 16];
        assert!(w.validate().is_err());
    }

    #[test]
    fn explicit_keep_fractions() {
        let cfg = FilterConfig::default();
        let w = Workload::from_traces(
            8,
            4,
            &cfg,
            vec![trace(&[&[0, 1, 2, 3], &[1]]), trace(&[&[4, 5], &[4, 5]])],
        )
        .unwrap();
        assert_eq!(w.keep_fractions(), (3.0 / 16.0, 6.0 / 16.0));
        assert_eq!(w.round_candidates(1, 1).len(), 2);
    }

    #[test]
    fn serde_round_trip() {
        let w = Workload::synthetic(64, 1, 16, 0.125, 0.5).unwrap();
        let text = serde_json::to_string(&w).unwrap();
        assert!(text.contains("\"synthetic\""));
        assert_eq!(serde_json::from_str::<Workload>(&text).unwrap(), w);
    }
}
