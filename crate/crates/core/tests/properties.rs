use proptest::prelude::*;

use energon::cli::tensor_file::TensorFile;
use energon::mrf::{filter_scores, threshold, FilterConfig, KeyIndexSet, RoundScores, SelectionTrace};
use energon::quant::{truncate, BitWidth};
use energon::sim::{simulate_head, simulate_odf, DoubleBufferMode, HardwareConfig, Workload};

fn roomy(m: usize, p: usize, bandwidth: f64) -> HardwareConfig {
    let mut hw = HardwareConfig::server();
    hw.mac_units = m;
    hw.ipu_pes = p;
    hw.dram_bandwidth = bandwidth;
    hw.fu_kbuf_bytes = 1 << 20;
    hw.au_kvbuf_bytes = 1 << 24;
    hw.double_buffer = DoubleBufferMode::Off;
    hw
}

fn workload() -> impl Strategy<Value = Workload> {
    (16usize..=256, 1usize..=32, prop::sample::select(vec![16usize, 32, 64]), 0.05f64..=1.0, 0.0f64..=1.0)
        .prop_map(|(n, l, d, gamma, t)| Workload::synthetic(n, l.min(n), d, gamma * t.max(0.01), gamma).unwrap())
}

/// Two-round traces with random nested survivor sets.
fn traced_workload() -> impl Strategy<Value = Workload> {
    (16usize..=128, 1usize..=16).prop_flat_map(|(n, l)| {
        let query = (
            prop::collection::btree_set(0..n, 1..=n),
            prop::collection::vec(any::<bool>(), n),
        );
        prop::collection::vec(query, l).prop_map(move |qs| {
            let traces = qs
                .into_iter()
                .map(|(r0, keep)| {
                    let first = *r0.iter().next().unwrap();
                    let r1: Vec<usize> = r0.iter().copied().filter(|&j| j == first || keep[j]).collect();
                    let r0 = KeyIndexSet::from_unsorted(r0).unwrap();
                    let r1 = KeyIndexSet::new(r1).unwrap();
                    SelectionTrace {
                        survivors_per_round: vec![r0, r1.clone()],
                        selected: r1,
                    }
                })
                .collect();
            Workload::from_traces(n, 16, &FilterConfig::default(), traces).unwrap()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn threshold_between_extremes(scores in prop::collection::vec(-1_000_000i64..1_000_000, 1..64), alpha in -1.0f64..1.0) {
        let t = threshold(&scores, alpha).unwrap();
        let lo = i128::from(*scores.iter().min().unwrap());
        let hi = i128::from(*scores.iter().max().unwrap());
        prop_assert!(lo * t.denominator() <= t.numerator());
        prop_assert!(t.numerator() <= hi * t.denominator());
    }

    #[test]
    fn survivors_nonempty_and_above_threshold(scores in prop::collection::vec(-500i64..500, 1..64), alpha in -1.0f64..1.0) {
        let n = scores.len();
        let rs = RoundScores::new(scores.clone(), KeyIndexSet::all(n).unwrap()).unwrap();
        let kept = filter_scores(&rs, alpha).unwrap();
        prop_assert!(!kept.is_empty());
        let t = threshold(&scores, alpha).unwrap();
        if kept.iter().any(|j| t.is_exceeded_by(scores[j])) {
            prop_assert!(kept.iter().all(|j| t.is_exceeded_by(scores[j])));
        } else {
            let max = *scores.iter().max().unwrap();
            prop_assert_eq!(kept.as_slice(), &[scores.iter().position(|&s| s == max).unwrap()][..]);
        }
        prop_assert!(n == 1 || kept.len() < n);
    }

    #[test]
    fn truncation_is_monotone(a in any::<i16>(), b in any::<i16>()) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        for w in [BitWidth::Two, BitWidth::Four, BitWidth::Sixteen] {
            prop_assert!(truncate(lo, w) <= truncate(hi, w));
        }
    }

    #[test]
    fn tensor_file_round_trip(rows in 1usize..8, cols in 1usize..8, seed in any::<u32>()) {
        let data: Vec<f32> = (0..rows * cols).map(|i| (i as f32 - seed as f32).sin()).collect();
        let file = TensorFile::new(vec![rows as u32, cols as u32], data).unwrap();
        prop_assert_eq!(TensorFile::from_bytes(&file.to_bytes()).unwrap(), file);
    }

    #[test]
    fn simulation_is_deterministic(w in workload(), bw in 4.0f64..512.0) {
        let hw = roomy(2, 16, bw);
        prop_assert_eq!(simulate_head(&w, &hw).unwrap(), simulate_head(&w, &hw).unwrap());
    }

    #[test]
    fn more_units_never_busier(w in workload(), bw in 4.0f64..512.0, m in 1usize..4, p in 1usize..32) {
        let base = simulate_head(&w, &roomy(m, p, bw)).unwrap();
        prop_assert!(simulate_head(&w, &roomy(2 * m, p, bw)).unwrap().au_cycles <= base.au_cycles);
        prop_assert!(simulate_head(&w, &roomy(m, 2 * p, bw)).unwrap().fu_cycles <= base.fu_cycles);
    }

    #[test]
    fn odf_reads_no_more(w in traced_workload(), bw in 4.0f64..512.0) {
        let hw = roomy(2, 16, bw);
        let odf = simulate_odf(&w, &hw).unwrap();
        prop_assert!(odf.dram_bytes_read <= simulate_head(&w, &hw).unwrap().dram_bytes_read);
    }

    #[test]
    fn bounded_below_by_busiest_unit(w in workload(), bw in 4.0f64..512.0) {
        let r = simulate_head(&w, &roomy(2, 16, bw)).unwrap();
        let busiest = [r.fu_cycles, r.au_cycles, r.selector_cycles, r.softmax_cycles, r.probv_cycles]
            .into_iter()
            .max()
            .unwrap();
        prop_assert!(r.total_cycles >= r.load_cycles + busiest);
    }
}
