mod common;

use proptest::prelude::*;
use swapflow_core::cache::CacheState;
use swapflow_core::model::{forward_dense, DType, OpType};
use swapflow_core::planner::{
    estimate_hr_si, memory_cost, plan, predict_decode_time, sparsity_for_budget, CostParams, ModelStats, PlanOptions,
    DEFAULT_HR, DEFAULT_SI,
};
use swapflow_core::store::BandwidthModel;
use swapflow_core::Error;

const MB: f64 = 1e6;
const GB: f64 = 1e9;

fn fixture() -> CostParams {
    CostParams {
        sp: 0.5,
        hr: 0.6,
        si: 0.9,
        bw_mem: 8.0 * GB,
        bw_small: 0.5 * GB,
        bw_large: 4.0 * GB,
        s_m: 400.0 * MB,
        s_l: 100.0 * MB,
        n_layers: 4,
        n: 2,
        m_max: 1.0 * GB,
        m_cache: 0.0,
        m_kv: 0.0,
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

#[test]
fn hand_evaluated_fixture() {
    let t = predict_decode_time(&fixture()).unwrap();
    let expect = [
        (t.m_cl, 100.0 * MB),
        (t.t_load, 0.080),
        (t.t_comp, 0.0125),
        (t.t_preload, 0.010),
        (t.t_onload, 0.004),
        (t.t_overlap, 0.0165),
        (t.t_decode, 0.109),
    ];
    for (got, want) in expect {
        assert!(rel(got, want) <= 1e-9, "{got} vs {want}");
    }
    assert_eq!(t.groups, 2);
}

#[test]
fn memory_fixture() {
    let p = CostParams { sp: 0.75, n: 4, n_layers: 4, m_cache: 200.0 * MB, m_kv: 50.0 * MB, ..fixture() };
    assert!(rel(memory_cost(&p), 350.0 * MB) <= 1e-12);
    let degenerate = CostParams { sp: 1.0, ..fixture() };
    assert_eq!(memory_cost(&degenerate), 0.0);
}

#[test]
fn degenerate_components() {
    let full_hit = predict_decode_time(&CostParams { hr: 1.0, ..fixture() }).unwrap();
    assert_eq!((full_hit.t_load, full_hit.t_onload, full_hit.t_preload), (0.0, 0.0, 0.0));
    assert!(rel(full_hit.t_decode, 2.0 * full_hit.t_comp) <= 1e-12);
    let sparse = predict_decode_time(&CostParams { sp: 1.0, ..fixture() }).unwrap();
    assert_eq!(sparse.t_decode, 0.0);
    assert!(matches!(predict_decode_time(&CostParams { si: 1.5, ..fixture() }), Err(Error::Input(_))));
    assert!(matches!(predict_decode_time(&CostParams { n: 0, ..fixture() }), Err(Error::Input(_))));
}

fn big_stats() -> ModelStats {
    ModelStats { s_m: 16.0 * GB, s_l: 0.5 * GB, n_layers: 32, channel_bytes: 8192.0 }
}

#[test]
fn budget_sets_sparsity() {
    assert_eq!(sparsity_for_budget(4.0 * GB, 16.0 * GB), 0.75);
    assert_eq!(sparsity_for_budget(16.0 * GB, 16.0 * GB), 0.0);
    assert_eq!(sparsity_for_budget(20.0 * GB, 16.0 * GB), 0.0);
    let p = plan(&big_stats(), &BandwidthModel::default(), &PlanOptions::new(4.0 * GB, 0.1 * GB)).unwrap();
    assert_eq!(p.sp(), 0.75);
    assert!(p.memory <= 4.0 * GB);
    assert!(p.weight_buffers + p.m_cache() + p.params.m_kv <= 4.0 * GB * (1.0 + 1e-12));
    assert!(p.assumptions.iter().any(|a| a.contains("default")));
}

/// Independent evaluation of the search: the first N whose preload time does
/// not exceed its compute time, or the last N whose double buffer fits.
fn first_balanced_n(stats: &ModelStats, bw: &BandwidthModel, hr: f64, m_max: f64) -> usize {
    let sp = 1.0 - m_max / stats.s_m;
    for n in 1..=stats.n_layers {
        let m_cl = stats.s_l * (1.0 - sp) * n as f64;
        let buffers = if n < stats.n_layers { 2.0 * m_cl } else { m_cl };
        if buffers > m_max {
            return n - 1;
        }
        let chunk = (stats.channel_bytes * n as f64).round();
        let thr = bw.bw_table.iter().rev().find(|e| e.0 as f64 <= chunk).unwrap_or(&bw.bw_table[0]).1;
        let bw_large = chunk / (bw.req_latency_s + chunk / thr);
        if (1.0 - hr) / bw_large <= 1.0 / bw.bw_mem {
            return n;
        }
    }
    stats.n_layers
}

#[test]
fn stops_at_first_balanced_n() {
    let stats = big_stats();
    for bw_mem in [2.0 * GB, 3.0 * GB, 5.0 * GB, 8.0 * GB, 24.0 * GB] {
        for hr in [0.0, 0.3, 0.6] {
            let bw = BandwidthModel { bw_mem, ..BandwidthModel::default() };
            let opts = PlanOptions { hr, stop_threshold: 0.0, ..PlanOptions::new(6.0 * GB, 0.0) };
            let p = plan(&stats, &bw, &opts).unwrap();
            let want = first_balanced_n(&stats, &bw, hr, 6.0 * GB);
            assert_eq!(p.group_size(), want, "bw_mem {bw_mem} hr {hr}: {}", p.stop_reason);
            for c in &p.candidates[..p.candidates.len() - 1] {
                assert!(c.t_preload > c.t_comp);
            }
        }
    }
}

#[test]
fn immediate_stop_when_already_balanced() {
    let bw = BandwidthModel { bw_mem: 0.05 * GB, ..BandwidthModel::default() };
    let p = plan(&big_stats(), &bw, &PlanOptions::new(8.0 * GB, 0.0)).unwrap();
    assert_eq!(p.group_size(), 1);
    assert_eq!(p.candidates.len(), 1);
}

#[test]
fn threshold_stop_keeps_previous_n() {
    // Constant large-read bandwidth: per-layer preload time never improves.
    let opts = PlanOptions { bw_large: Some(0.5 * GB), bw_small: Some(0.5 * GB), ..PlanOptions::new(6.0 * GB, 0.0) };
    let p = plan(&big_stats(), &BandwidthModel::default(), &opts).unwrap();
    assert_eq!(p.group_size(), 1);
    assert!(p.stop_reason.contains("threshold"), "{}", p.stop_reason);
}

#[test]
fn infeasible_budget_is_a_planning_error() {
    let err = plan(&big_stats(), &BandwidthModel::default(), &PlanOptions::new(1.0 * GB, 1.0 * GB)).unwrap_err();
    assert!(matches!(err, Error::Planning(_)), "{err}");
}

#[test]
fn plan_json_round_trip() {
    let p = plan(&big_stats(), &BandwidthModel::default(), &PlanOptions::new(4.0 * GB, 0.1 * GB)).unwrap();
    let back = swapflow_core::planner::Plan::from_json(&p.to_json().unwrap()).unwrap();
    assert_eq!(back, p);
    assert!(swapflow_core::planner::Plan::from_json("{}").is_err());
}

proptest! {
    #[test]
    fn decode_time_monotone(
        sp in 0.0f64..0.95, hr in 0.0f64..1.0, si in 0.0f64..1.0,
        dsp in 0.0f64..0.05, dhr in 0.0f64..0.05, dsi in 0.0f64..0.05,
        n in 1usize..9,
    ) {
        let base = CostParams { sp, hr, si, n, n_layers: 8, s_m: 800.0 * MB, ..fixture() };
        let t = predict_decode_time(&base).unwrap().t_decode;
        let more_sp = predict_decode_time(&CostParams { sp: sp + dsp, ..base.clone() }).unwrap().t_decode;
        let more_hr = predict_decode_time(&CostParams { hr: (hr + dhr).min(1.0), ..base.clone() }).unwrap().t_decode;
        let more_si = predict_decode_time(&CostParams { si: (si + dsi).min(1.0), ..base.clone() }).unwrap().t_decode;
        prop_assert!(more_sp <= t * (1.0 + 1e-12));
        prop_assert!(more_hr <= t * (1.0 + 1e-12));
        prop_assert!(more_si <= t * (1.0 + 1e-12));
        let doubled = CostParams { n: 2 * n, n_layers: 16, s_m: 1600.0 * MB, ..base.clone() };
        prop_assert!(rel(doubled.m_cl(), 2.0 * base.m_cl()) <= 1e-12);
    }

    #[test]
    fn plan_respects_budget(frac in 0.05f64..1.5, kv in 0.0f64..0.05) {
        let stats = big_stats();
        let m_max = frac * stats.s_m;
        match plan(&stats, &BandwidthModel::default(), &PlanOptions::new(m_max, kv * stats.s_m)) {
            Ok(p) => {
                prop_assert!(p.memory <= m_max * (1.0 + 1e-12));
                prop_assert!(p.weight_buffers + p.m_cache() + p.params.m_kv <= m_max * (1.0 + 1e-12));
                prop_assert!(rel(p.sp(), (1.0 - frac).max(0.0)) <= 1e-9 || p.sp() == 0.0);
            }
            Err(e) => prop_assert!(matches!(e, Error::Planning(_))),
        }
    }
}

#[test]
fn measured_hr_si_against_direct_counts() {
    let model = common::toy_model(4, DType::F32, 6, 0.1);
    let spec = model.spec().clone();
    let steps: Vec<_> = (0..4u32).map(|t| forward_dense(&model, &[t + 1, t + 7, 2 * t + 3]).unwrap().trace()).collect();
    let sp = 0.5;

    let none = estimate_hr_si(&spec, None, sp, &vec![0; spec.op_ids().count()]).unwrap();
    assert_eq!((none.hr, none.si, none.measured), (DEFAULT_HR, DEFAULT_SI, false));

    let zero = estimate_hr_si(&spec, Some(&steps), sp, &vec![0; spec.op_ids().count()]).unwrap();
    assert_eq!(zero.hr, 0.0);

    // With unlimited capacity each tensor misses exactly once per distinct channel.
    let full = CacheState::for_budget(&spec, u64::MAX).capacities();
    let est = estimate_hr_si(&spec, Some(&steps), sp, &full).unwrap();
    let (mut total, mut distinct) = (0usize, 0usize);
    for layer in 0..spec.n_layers {
        for op in OpType::ALL {
            let site = match op {
                OpType::Q | OpType::K | OpType::V => swapflow_core::model::Site::AttnIn,
                OpType::Gate | OpType::Up => swapflow_core::model::Site::FfnIn,
                OpType::Down => swapflow_core::model::Site::DownIn,
                OpType::O => continue,
            };
            let mut seen = std::collections::BTreeSet::new();
            for acts in &steps {
                let a = acts.iter().find(|a| a.layer == layer && a.site == site).unwrap();
                let mut idx: Vec<usize> = (0..a.values.len()).collect();
                idx.sort_by(|&x, &y| a.values[y].abs().total_cmp(&a.values[x].abs()).then(x.cmp(&y)));
                let k = a.values.len() / 2;
                total += k;
                seen.extend(idx[..k].iter().copied());
            }
            distinct += seen.len();
        }
    }
    let want = 1.0 - distinct as f64 / total as f64;
    assert!((est.hr - want).abs() < 1e-12, "{} vs {want}", est.hr);
    assert!(est.measured && (0.0..=1.0).contains(&est.si));
}
