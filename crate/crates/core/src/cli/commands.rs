use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::mrf::{pruning_ratio, select, select_traced, FilterConfig, KeyIndexSet, SelectionTrace};
use crate::perf::{advise_with_threshold, estimate, Advice, PerfInputs, PipelineEstimate};
use crate::quant::quantize_int16;
use crate::sim::{simulate_model, CycleReport, DoubleBufferMode, HardwareConfig, Workload};
use crate::sparse::{energon_attention, EnergonOutput, LayerPolicy};
use crate::tensor::{dense_mha, split_heads, Matrix, SoftmaxMode};

use super::manifest::{Dataset, RunManifest, SimSelections, WorkloadSpec};
use super::tensor_file::TensorFile;
use super::{write_atomic, CliError};

fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("report serializes");
    v.push(b'\n');
    v
}

fn deviation(a: &Matrix, b: &Matrix) -> (f64, f64) {
    let diffs = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs());
    let (max, sum) = diffs.fold((0.0f64, 0.0), |(m, s), d| (m.max(d), s + d));
    (max, sum / a.data().len() as f64)
}

fn run_attention(data: &Dataset, cfg: &FilterConfig, policy: &LayerPolicy, mode: SoftmaxMode) -> Result<EnergonOutput, CliError> {
    Ok(energon_attention(&data.q, &data.k, &data.v, data.heads, cfg, policy, mode)?)
}

fn dense_reference(data: &Dataset) -> Result<Matrix, CliError> {
    Ok(dense_mha(&split_heads(&data.q, &data.k, &data.v, data.heads)?)?)
}

/// Contents of `stats.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttendReport {
    pub manifest_sha256: String,
    pub heads: usize,
    pub n: usize,
    pub d_model: usize,
    pub softmax: SoftmaxMode,
    pub filter: FilterConfig,
    pub per_head_pruning_ratio: Vec<f64>,
    pub per_head_coverage: Vec<f64>,
    pub overall_pruning_ratio: f64,
    pub mean_coverage: Option<f64>,
    pub keys_touched_fraction: f64,
    pub max_abs_deviation: f64,
    pub mean_abs_deviation: f64,
    /// Mean fraction of planted keys kept by pruned heads.
    pub planted_recall: Option<f64>,
}

fn planted_recall(out: &EnergonOutput, planted: &[Vec<Vec<usize>>]) -> Option<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for (head, keys) in out.heads.iter().zip(planted) {
        if !head.pruned {
            continue;
        }
        for (trace, p) in head.traces.iter().zip(keys) {
            hit += p.iter().filter(|&&j| trace.selected.contains(j)).count();
            total += p.len();
        }
    }
    (total > 0).then(|| hit as f64 / total as f64)
}

#[derive(Serialize)]
struct TraceFile<'a> {
    manifest_sha256: &'a str,
    heads: Vec<&'a [SelectionTrace]>,
}

/// Writes `output.eqkv`, `stats.json` and `trace.json` into `out`.
pub fn attend(m: &RunManifest, base: &Path, out: &Path) -> Result<AttendReport, CliError> {
    let data = m.load_data(base)?;
    let result = run_attention(&data, &m.filter, &m.layer_policy, m.softmax)?;
    let (max_dev, mean_dev) = deviation(&result.output, &dense_reference(&data)?);
    let hash = m.sha256();
    let report = AttendReport {
        manifest_sha256: hash.clone(),
        heads: data.heads,
        n: data.q.rows(),
        d_model: data.q.cols(),
        softmax: m.softmax,
        filter: m.filter.clone(),
        per_head_pruning_ratio: result.stats.per_head_pruning_ratio.clone(),
        per_head_coverage: result.heads.iter().map(|h| h.coverage).collect(),
        overall_pruning_ratio: result.stats.overall_pruning_ratio(),
        mean_coverage: result.stats.mean_coverage,
        keys_touched_fraction: result.stats.keys_touched_fraction,
        max_abs_deviation: max_dev,
        mean_abs_deviation: mean_dev,
        planted_recall: data.planted.as_deref().and_then(|p| planted_recall(&result, p)),
    };
    let traces = TraceFile {
        manifest_sha256: &hash,
        heads: result.heads.iter().map(|h| h.traces.as_slice()).collect(),
    };
    write_atomic(&out.join("output.eqkv"), &TensorFile::from_matrix(&result.output).to_bytes())?;
    write_atomic(&out.join("stats.json"), &to_json(&report))?;
    write_atomic(&out.join("trace.json"), &to_json(&traces))?;
    Ok(report)
}

pub const SWEEP_COLUMNS: [&str; 7] = [
    "alpha0",
    "alpha1",
    "pruning_ratio",
    "coverage",
    "max_abs_dev",
    "mean_abs_dev",
    "keys_touched_fraction",
];

/// One grid point. `coverage` is empty when no head is pruned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha0: f64,
    pub alpha1: f64,
    pub pruning_ratio: f64,
    pub coverage: Option<f64>,
    pub max_abs_dev: f64,
    pub mean_abs_dev: f64,
    pub keys_touched_fraction: f64,
}

pub fn sweep_csv(rows: &[SweepRow]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Io(e.to_string()))?;
    }
    let mut bytes = w.into_inner().map_err(|e| CliError::Io(e.to_string()))?;
    if rows.is_empty() {
        bytes = format!("{}\n", SWEEP_COLUMNS.join(",")).into_bytes();
    }
    Ok(bytes)
}

/// Alpha pair found for a target pruning ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub manifest_sha256: String,
    pub target_pruning: f64,
    pub alpha0: f64,
    pub alpha1: f64,
    pub pruning_ratio: f64,
}

fn with_alphas(base: &FilterConfig, a0: f64, a1: f64) -> Result<FilterConfig, CliError> {
    if base.rounds() != 2 {
        return Err(CliError::Validation(format!(
            "alpha grids need a two-round filter, manifest has {} rounds",
            base.rounds()
        )));
    }
    Ok(FilterConfig::new(base.bitwidths.clone(), vec![a0, a1], base.reuse_round0)?)
}

/// Pooled pruning ratio of `cfg` over the pruned heads, with unpruned heads
/// counting as 1x.
fn pruning_only(data: &Dataset, policy: &LayerPolicy, cfg: &FilterConfig) -> Result<f64, CliError> {
    let set = split_heads(&data.q, &data.k, &data.v, data.heads)?;
    let n = set.seq_len();
    let mut inv = 0.0;
    for (h, head) in set.heads().iter().enumerate() {
        if !policy.prunes(h) {
            inv += 1.0;
            continue;
        }
        let (qq, kq) = (quantize_int16(&head.q), quantize_int16(&head.k));
        let sel = (0..n).map(|i| select(i, &qq, &kq, cfg)).collect::<Result<Vec<KeyIndexSet>, _>>()?;
        inv += 1.0 / pruning_ratio(&sel, n)?;
    }
    Ok(set.len() as f64 / inv)
}

/// Bisects `alpha1` (with `alpha0` fixed) towards `target` pruning; the
/// pruning ratio is nondecreasing in `alpha1`.
pub fn calibrate_alpha1(
    data: &Dataset,
    policy: &LayerPolicy,
    base: &FilterConfig,
    alpha0: f64,
    target: f64,
) -> Result<(f64, f64), CliError> {
    let eval = |a1: f64| -> Result<f64, CliError> { pruning_only(data, policy, &with_alphas(base, alpha0, a1)?) };
    let (mut lo, mut hi) = (-0.999, 0.999);
    let (mut lo_r, mut hi_r) = (eval(lo)?, eval(hi)?);
    if target <= lo_r {
        return Ok((lo, lo_r));
    }
    if target >= hi_r {
        return Ok((hi, hi_r));
    }
    for _ in 0..24 {
        let mid = 0.5 * (lo + hi);
        let r = eval(mid)?;
        if r < target {
            (lo, lo_r) = (mid, r);
        } else {
            (hi, hi_r) = (mid, r);
        }
    }
    Ok(if (target - lo_r).abs() <= (hi_r - target).abs() {
        (lo, lo_r)
    } else {
        (hi, hi_r)
    })
}

fn sweep_point(data: &Dataset, m: &RunManifest, dense: &Matrix, a0: f64, a1: f64) -> Result<SweepRow, CliError> {
    let cfg = with_alphas(&m.filter, a0, a1)?;
    let out = run_attention(data, &cfg, &m.layer_policy, m.softmax)?;
    let (max_dev, mean_dev) = deviation(&out.output, dense);
    Ok(SweepRow {
        alpha0: a0,
        alpha1: a1,
        pruning_ratio: out.stats.overall_pruning_ratio(),
        coverage: out.stats.mean_coverage,
        max_abs_dev: max_dev,
        mean_abs_dev: mean_dev,
        keys_touched_fraction: out.stats.keys_touched_fraction,
    })
}

/// Evaluates every `(alpha0, alpha1)` pair of the manifest's grid (the default
/// 5x5 grid from -0.2 to 0.2 when absent) and writes `sweep.csv`, plus
/// `calibration.json` when a target pruning ratio is set.
pub fn sweep(m: &RunManifest, base: &Path, out: &Path, jobs: Option<usize>) -> Result<Vec<SweepRow>, CliError> {
    let spec = m.sweep.clone().unwrap_or_default();
    let data = m.load_data(base)?;
    let dense = dense_reference(&data)?;
    let grid: Vec<(f64, f64)> = spec
        .alpha0
        .iter()
        .flat_map(|&a0| spec.alpha1.iter().map(move |&a1| (a0, a1)))
        .collect();
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs {
        builder = builder.num_threads(j.max(1));
    }
    let pool = builder.build().map_err(|e| CliError::Validation(e.to_string()))?;
    let rows = pool.install(|| {
        grid.par_iter()
            .map(|&(a0, a1)| sweep_point(&data, m, &dense, a0, a1))
            .collect::<Result<Vec<_>, _>>()
    })?;
    write_atomic(&out.join("sweep.csv"), &sweep_csv(&rows)?)?;

    if let Some(target) = spec.target_pruning {
        let nearest = rows
            .iter()
            .min_by(|a, b| (a.pruning_ratio - target).abs().total_cmp(&(b.pruning_ratio - target).abs()))
            .expect("grid is non-empty");
        let (alpha1, ratio) = calibrate_alpha1(&data, &m.layer_policy, &m.filter, nearest.alpha0, target)?;
        let cal = Calibration {
            manifest_sha256: m.sha256(),
            target_pruning: target,
            alpha0: nearest.alpha0,
            alpha1,
            pruning_ratio: ratio,
        };
        write_atomic(&out.join("calibration.json"), &to_json(&cal))?;
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub per_head: Vec<PipelineEstimate>,
    /// Analytical per-head `t_load` and `t_comp` chained with the simulated
    /// run's buffering decision.
    pub predicted_cycles: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateReport {
    pub manifest_sha256: String,
    pub hardware: String,
    pub on_demand_fetch: bool,
    pub double_buffer: DoubleBufferMode,
    pub report: CycleReport,
    /// The same selections with every K/V prefetched, when on-demand fetch is on.
    pub prefetch_baseline: Option<CycleReport>,
    pub prediction: Prediction,
    /// `100 * min(simulated, predicted) / max(simulated, predicted)`.
    pub agreement_pct: f64,
}

fn agreement(sim: u64, predicted: f64) -> f64 {
    let s = sim as f64;
    if s == 0.0 && predicted == 0.0 {
        return 100.0;
    }
    100.0 * s.min(predicted) / s.max(predicted)
}

fn predict(heads: &[Workload], hw: &HardwareConfig, buffered: bool) -> Result<Prediction, CliError> {
    let per_head = heads
        .iter()
        .map(|w| estimate(&w.perf_inputs(hw)))
        .collect::<Result<Vec<_>, _>>()?;
    let loads: Vec<f64> = per_head.iter().map(|e| e.t_load).collect();
    let comps: Vec<f64> = per_head.iter().map(|e| e.t_comp).collect();
    let predicted_cycles = if buffered {
        let overlapped: f64 = (0..loads.len() - 1).map(|h| loads[h + 1].max(comps[h])).sum();
        loads[0] + overlapped + comps[comps.len() - 1]
    } else {
        loads.iter().sum::<f64>() + comps.iter().sum::<f64>()
    };
    Ok(Prediction {
        predicted_cycles,
        per_head,
    })
}

fn sim_workloads(m: &RunManifest, base: &Path) -> Result<Vec<Workload>, CliError> {
    let selections = m.simulate.clone().unwrap_or_default().selections;
    let heads = m.heads();
    match selections {
        SimSelections::Synthetic { beta, gamma } => {
            let (n, l, d) = match &m.workload {
                WorkloadSpec::Synthetic(s) => (s.n, s.l.unwrap_or(s.n), s.d),
                WorkloadSpec::Tensors(_) => {
                    let data = m.load_data(base)?;
                    let n = data.q.rows();
                    (n, n, data.q.cols() / heads)
                }
            };
            let mut w = Workload::synthetic(n, l, d, beta, gamma)?;
            w.bitwidths = m.filter.bitwidths.clone();
            w.reuse_round0 = m.filter.reuse_round0;
            w.validate()?;
            Ok(vec![w; heads])
        }
        SimSelections::Measured => {
            let data = m.load_data(base)?;
            let set = split_heads(&data.q, &data.k, &data.v, data.heads)?;
            let n = set.seq_len();
            let l = match &m.workload {
                WorkloadSpec::Synthetic(s) => s.l.unwrap_or(n),
                WorkloadSpec::Tensors(_) => n,
            };
            set.heads()
                .iter()
                .enumerate()
                .map(|(h, head)| {
                    let cfg = if m.layer_policy.prunes(h) {
                        m.filter.clone()
                    } else {
                        FilterConfig::passthrough()
                    };
                    let (qq, kq) = (quantize_int16(&head.q), quantize_int16(&head.k));
                    let traces = (0..l)
                        .map(|i| select_traced(i, &qq, &kq, &cfg))
                        .collect::<Result<Vec<_>, _>>()?;
                    Ok(Workload::from_traces(n, set.head_dim(), &cfg, traces)?)
                })
                .collect()
        }
    }
}

const SIM_COLUMNS: [&str; 18] = [
    "mode",
    "heads",
    "total_cycles",
    "load_cycles",
    "compute_cycles",
    "fu_cycles",
    "au_cycles",
    "selector_cycles",
    "softmax_cycles",
    "probv_cycles",
    "dram_bytes_read",
    "dram_bytes_written",
    "kv_bytes_read",
    "pipeline_stalls",
    "energy_joules",
    "keys_fetched_fraction",
    "double_buffered",
    "agreement_pct",
];

fn sim_row(mode: &str, r: &CycleReport, agreement_pct: f64) -> Vec<String> {
    vec![
        mode.to_string(),
        r.heads.to_string(),
        r.total_cycles.to_string(),
        r.load_cycles.to_string(),
        r.compute_cycles.to_string(),
        r.fu_cycles.to_string(),
        r.au_cycles.to_string(),
        r.selector_cycles.to_string(),
        r.softmax_cycles.to_string(),
        r.probv_cycles.to_string(),
        r.dram_bytes_read.to_string(),
        r.dram_bytes_written.to_string(),
        r.kv_bytes_read.to_string(),
        r.pipeline_stalls.to_string(),
        r.energy_joules.to_string(),
        r.keys_fetched_fraction.to_string(),
        r.double_buffered.to_string(),
        agreement_pct.to_string(),
    ]
}

/// Writes `simulate.json` and `simulate.csv` into `out`.
pub fn simulate(
    m: &RunManifest,
    base: &Path,
    out: &Path,
    odf: Option<bool>,
    double_buffer: Option<DoubleBufferMode>,
) -> Result<SimulateReport, CliError> {
    let mut hw = m
        .hardware
        .as_ref()
        .ok_or_else(|| CliError::Validation("no hardware config: pass --hw or set `hardware`".into()))?
        .resolve(base)?;
    if let Some(on) = odf {
        hw.on_demand_fetch = on;
    }
    if let Some(mode) = double_buffer {
        hw.double_buffer = mode;
    }
    let heads = sim_workloads(m, base)?;
    let report = simulate_model(&heads, &hw)?;
    let prediction = predict(&heads, &hw, report.double_buffered)?;
    let agreement_pct = agreement(report.total_cycles, prediction.predicted_cycles);
    let prefetch_baseline = if hw.on_demand_fetch {
        let mut plain = hw.clone();
        plain.on_demand_fetch = false;
        Some(simulate_model(&heads, &plain)?)
    } else {
        None
    };

    let result = SimulateReport {
        manifest_sha256: m.sha256(),
        hardware: hw.name.clone(),
        on_demand_fetch: hw.on_demand_fetch,
        double_buffer: hw.double_buffer,
        report,
        prefetch_baseline,
        prediction,
        agreement_pct,
    };

    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| CliError::Io(e.to_string());
    w.write_record(SIM_COLUMNS).map_err(io)?;
    let mode = if hw.on_demand_fetch { "odf" } else { "prefetch" };
    w.write_record(sim_row(mode, &result.report, agreement_pct)).map_err(io)?;
    if let Some(b) = &result.prefetch_baseline {
        let pct = agreement(b.total_cycles, result.prediction.predicted_cycles);
        w.write_record(sim_row("prefetch", b, pct)).map_err(io)?;
    }
    let csv_bytes = w.into_inner().map_err(|e| CliError::Io(e.to_string()))?;
    write_atomic(&out.join("simulate.json"), &to_json(&result))?;
    write_atomic(&out.join("simulate.csv"), &csv_bytes)?;
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdviseReport {
    pub inputs: PerfInputs,
    pub estimate: PipelineEstimate,
    pub gating_threshold: f64,
    pub advice: Advice,
    pub note: Option<String>,
}

/// Published reference value for the short-sequence low-power case.
const REFERENCE_SHORT_RATIO: f64 = 1.44;

pub fn advise(inputs: &PerfInputs, threshold: f64) -> Result<AdviseReport, CliError> {
    if !(threshold.is_finite() && threshold > 0.0) {
        return Err(CliError::Validation(format!("threshold {threshold} must be positive")));
    }
    let est = estimate(inputs)?;
    let note = ((est.ratio - REFERENCE_SHORT_RATIO).abs() < 0.05).then(|| {
        format!(
            "the commonly quoted ratio for this configuration is {REFERENCE_SHORT_RATIO}; \
             2.25*d*m/(B*beta*l) evaluates to {:.3}, so the quoted figure is a rounding",
            est.ratio
        )
    });
    Ok(AdviseReport {
        inputs: *inputs,
        estimate: est,
        gating_threshold: threshold,
        advice: advise_with_threshold(&est, threshold),
        note,
    })
}
