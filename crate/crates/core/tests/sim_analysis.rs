//! Latency model, synthetic generators, analysis statistics and trace
//! persistence.

mod common;

use proptest::prelude::*;
use steproute_core::analysis::{
    alignment_by_bin, bimodality_coefficient, divergence_pairs, even_edges, histogram, metric_samples, ngram_overlap,
    sweep_table, AlignmentPair, MetricName,
};
use steproute_core::backend::Model;
use steproute_core::record::{append_jsonl, read_jsonl, TraceRecord};
use steproute_core::routing::{sweep, PolicyConfig, Router, RouterConfig, SweepCase, DEFAULT_THRESHOLDS};
use steproute_core::sim::{
    apply_simulated_latency, build_distribution_scenario, events_from_trace, simulate_latency, simulate_trace,
    BackendProfile, BimodalParams, Scenario, ScriptedBackend, SimEvent,
};
use steproute_core::trace::{answer_matches, Policy, Trace};

fn run(s: &Scenario, policy: Policy, tau: f64) -> Trace {
    let cfg = RouterConfig { policy: PolicyConfig::with_policy(policy, tau), ..RouterConfig::default() };
    let (small, large) = ScriptedBackend::pair(s, &cfg);
    Router::new(&small, &large, &cfg).unwrap().run_trace(&s.question).unwrap()
}

/// Spreadsheet-style recomputation: one term per event, from first
/// principles, with its own bookkeeping of what each model has seen.
fn latency_oracle(prompt: u64, events: &[SimEvent], p: &BackendProfile) -> u64 {
    let mut seen_small = 0u64;
    let mut seen_large = 0u64;
    let mut shared = prompt;
    let mut prev: Option<Model> = None;
    let mut total = 0u64;
    for e in events {
        let seen = if e.model == Model::Small { &mut seen_small } else { &mut seen_large };
        let switch = if prev.is_some() && prev != Some(e.model) { p.switch_overhead_ms } else { 0 };
        let prefill = (shared - *seen) * p.prefill_ms_per_token;
        let per_token = if e.model == Model::Small { p.small_decode_ms } else { p.large_decode_ms };
        let decode = match (e.model, p.spec_decoding) {
            (Model::Large, Some(spec)) => {
                let a = spec.acceptance_rate;
                let mut accepted = 0.0;
                for i in 1..=spec.draft_length {
                    accepted += a.powi(i as i32);
                }
                let cycles = (e.tokens as f64 / (accepted + 1.0) - 1e-9).ceil() as u64;
                cycles * (spec.draft_length as u64 * p.small_decode_ms + p.large_decode_ms)
            }
            _ => per_token * e.tokens as u64,
        };
        total += switch + prefill + decode;
        *seen = shared;
        if e.kept {
            shared += e.tokens as u64;
            *seen = shared;
        }
        prev = Some(e.model);
    }
    total
}

fn events() -> impl Strategy<Value = Vec<SimEvent>> {
    prop::collection::vec((any::<bool>(), 1usize..60, any::<bool>()), 1..40).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (large, tokens, kept))| SimEvent {
                step: Some(i),
                model: if large { Model::Large } else { Model::Small },
                tokens,
                kept,
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn latency_is_the_sum_of_event_terms(ev in events(), prompt in 0usize..200, spec in any::<bool>(), alpha in 0.0f64..=1.0) {
        let mut p = BackendProfile::default();
        if spec {
            p = p.with_spec(3, alpha);
        }
        let got = simulate_latency(prompt, &ev, &p).unwrap();
        prop_assert_eq!(got.total_ms, latency_oracle(prompt as u64, &ev, &p));
        let per_step: u64 = got.steps.iter().map(|s| s.small_ms + s.large_ms).sum();
        prop_assert_eq!(per_step + got.answer_ms, got.total_ms);
    }

    #[test]
    fn histogram_conserves_mass(xs in prop::collection::vec(-100.0f64..100.0, 1..500), bins in 1usize..50) {
        let h = histogram(&xs, bins).unwrap();
        prop_assert_eq!(h.counts().iter().sum::<usize>(), xs.len());
        prop_assert_eq!(h.bins.len(), bins);
    }

    #[test]
    fn self_overlap_is_one(words in prop::collection::vec("[a-z]{1,6}", 1..30)) {
        let text = words.join(" ");
        prop_assert!((ngram_overlap(&text, &text, 4).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_bin_is_the_global_mean(seed in any::<u64>(), n in 1usize..80) {
        let pairs = divergence_pairs(seed, n, 12, 2.5, &BimodalParams::default());
        let lo = pairs.iter().map(|p| p.h_init).fold(f64::INFINITY, f64::min);
        let hi = pairs.iter().map(|p| p.h_init).fold(f64::NEG_INFINITY, f64::max) + 1e-9;
        let report = alignment_by_bin(&pairs, &[lo, hi]).unwrap();
        let mean = pairs.iter().map(|p| ngram_overlap(&p.large_text, &p.small_text, 4).unwrap()).sum::<f64>() / n as f64;
        prop_assert!((report.bins[0].mean_overlap.unwrap() - mean).abs() < 1e-12);
    }
}

#[test]
fn trace_latency_examples() {
    // routed beats large-only when a third of the steps intervene
    let params = BimodalParams { high_weight: 0.3, ..BimodalParams::default() };
    let s = build_distribution_scenario(21, 10, &params).unwrap();
    let p = BackendProfile::default();
    let routed = run(&s, Policy::InitEntropy, 0.9);
    let large = run(&s, Policy::AlwaysLarge, 0.0);
    assert!(routed.accounting.intervention_rate < 1.0);
    let r = simulate_trace(&routed, &p).unwrap();
    let l = simulate_trace(&large, &p).unwrap();
    assert_eq!(r.total_ms, latency_oracle(steproute_core::sim::token_count(&routed.prompt) as u64, &events_from_trace(&routed), &p));
    assert!(r.total_ms < l.total_ms);

    let mut t = routed.clone();
    let b = apply_simulated_latency(&mut t, &p).unwrap();
    assert_eq!(t.accounting.total_ms(), b.total_ms as f64);
    assert_eq!(t.accounting.think_ms(), b.think_ms() as f64);
}

#[test]
fn pareto_shape_over_the_threshold_sweep() {
    let p = BackendProfile::default();
    for seed in 0..10 {
        let s = build_distribution_scenario(seed, 40, &BimodalParams::default()).unwrap();
        let points: Vec<(f64, u64)> = DEFAULT_THRESHOLDS
            .iter()
            .map(|&tau| {
                let t = run(&s, Policy::InitEntropy, tau);
                (t.accounting.intervention_rate, simulate_trace(&t, &p).unwrap().total_ms)
            })
            .collect();
        for w in points.windows(2) {
            assert!(w[1].0 <= w[0].0, "seed {seed}: {points:?}");
            assert!(w[1].1 <= w[0].1, "seed {seed}: {points:?}");
        }
    }
}

#[test]
fn accuracy_proxy_is_sound_when_small_steps_are_right() {
    let params = BimodalParams { high_error_prob: 0.0, ..BimodalParams::default() };
    for seed in 0..10 {
        let s = build_distribution_scenario(seed, 20, &params).unwrap();
        let oracle = |t: &Trace| answer_matches(t.final_answer(), &s.answer_oracle);
        let large = oracle(&run(&s, Policy::AlwaysLarge, 0.0));
        for &tau in &DEFAULT_THRESHOLDS {
            assert_eq!(oracle(&run(&s, Policy::InitEntropy, tau)), large);
        }
    }
    // with errors in pivot steps, delegating everything loses accuracy
    let params = BimodalParams { high_error_prob: 1.0, high_weight: 0.5, ..BimodalParams::default() };
    let s = build_distribution_scenario(3, 20, &params).unwrap();
    assert!(!answer_matches(run(&s, Policy::AlwaysSmall, 0.0).final_answer(), &s.answer_oracle));
    assert!(answer_matches(run(&s, Policy::InitEntropy, 0.9).final_answer(), &s.answer_oracle));
}

fn mixture_samples(n_scenarios: u64, steps: usize) -> (Vec<f64>, Vec<f64>) {
    let params = BimodalParams::default();
    let mut traces_init = Vec::new();
    let mut traces_step = Vec::new();
    for seed in 0..n_scenarios {
        let s = build_distribution_scenario(seed, steps, &params).unwrap();
        traces_init.push(run(&s, Policy::InitEntropy, 0.9));
        traces_step.push(run(&s, Policy::StepEntropy, 1e9));
    }
    let h_init = metric_samples(&traces_init, MetricName::HInit).into_iter().map(|m| m.value).collect();
    let h_step = metric_samples(&traces_step, MetricName::HStep).into_iter().map(|m| m.value).collect();
    (h_init, h_step)
}

#[test]
fn generated_h_init_histogram_has_two_peaks() {
    let (h_init, _) = mixture_samples(100, 100);
    assert_eq!(h_init.len(), 10_000);
    let h = histogram(&h_init, 20).unwrap();
    let c = h.counts();
    // two local maxima with a trough below half of the smaller one
    let peaks: Vec<usize> = (0..c.len())
        .filter(|&i| (i == 0 || c[i] > c[i - 1]) && (i + 1 == c.len() || c[i] >= c[i + 1]))
        .collect();
    let low_peak = peaks[0];
    let high_peak = *peaks.iter().skip(1).max_by_key(|&&i| c[i]).unwrap();
    let trough = (low_peak..=high_peak).map(|i| c[i]).min().unwrap();
    assert!(trough * 2 < c[low_peak].min(c[high_peak]), "{c:?}");
    // the low peak sits near the low component's mean
    let centre = 0.5 * (h.bins[low_peak].lo + h.bins[low_peak].hi);
    assert!(centre < 0.5, "{centre}");
}

#[test]
fn bimodality_of_generated_metrics() {
    let (h_init, h_step) = mixture_samples(20, 50);
    assert!(bimodality_coefficient(&h_init).unwrap() > 5.0 / 9.0);
    assert!(bimodality_coefficient(&h_step).unwrap() < 5.0 / 9.0);
}

#[test]
fn alignment_falls_with_entropy() {
    let params = BimodalParams::default();
    let pairs = divergence_pairs(1, 2000, 20, 2.5, &params);
    let hi = pairs.iter().map(|p| p.h_init).fold(0.0, f64::max) + 1e-9;
    let report = alignment_by_bin(&pairs, &even_edges(0.0, hi, 5)).unwrap();
    let means = report.occupied_means();
    assert!(means.len() >= 3);
    for w in means.windows(2) {
        assert!(w[1] <= w[0], "{means:?}");
    }
    // identical texts score 1 everywhere
    let same: Vec<AlignmentPair> = pairs
        .iter()
        .map(|p| AlignmentPair { large_text: p.small_text.clone(), ..p.clone() })
        .collect();
    let r = alignment_by_bin(&same, &even_edges(0.0, hi, 5)).unwrap();
    assert!(r.occupied_means().iter().all(|&m| m == 1.0));

    // diverging only above 1.0: strictly higher below than above
    let split: Vec<AlignmentPair> = pairs
        .iter()
        .map(|p| if p.h_init < 1.0 { AlignmentPair { large_text: p.small_text.clone(), ..p.clone() } } else { p.clone() })
        .collect();
    let r = alignment_by_bin(&split, &[0.0, 1.0, hi]).unwrap();
    assert!(r.bins[0].mean_overlap.unwrap() > r.bins[1].mean_overlap.unwrap());
}

#[test]
fn sweep_table_from_simulated_sweep() {
    let params = BimodalParams::default();
    let scenarios: Vec<Scenario> = (0..5).map(|i| build_distribution_scenario(i, 20, &params).unwrap()).collect();
    let base = RouterConfig::default();
    let backends: Vec<_> = scenarios.iter().map(|s| ScriptedBackend::pair(s, &base)).collect();
    let cases: Vec<SweepCase> = scenarios
        .iter()
        .zip(&backends)
        .map(|(s, (small, large))| SweepCase { question: s.question.clone(), small, large, expected: Some(s.answer_oracle.clone()) })
        .collect();
    let profile = BackendProfile::default();
    let latency = |_: usize, t: &Trace| simulate_trace(t, &profile).unwrap().total_ms as f64;
    let report = sweep(&cases, &DEFAULT_THRESHOLDS, &base, &latency).unwrap();
    let table = sweep_table(&report);
    let mut rdr = csv::Reader::from_reader(table.csv.as_bytes());
    let rates: Vec<f64> = rdr.records().map(|r| r.unwrap()[5].parse().unwrap()).collect();
    assert_eq!(rates.len(), 5);
    for w in rates.windows(2) {
        assert!(w[1] <= w[0]);
    }
    assert_eq!(table.text.lines().count(), 6);
}

#[test]
fn jsonl_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("traces.jsonl");
    let params = BimodalParams::default();
    let mut traces = Vec::new();
    for (i, policy) in Policy::ALL.into_iter().enumerate() {
        let s = build_distribution_scenario(i as u64, 12, &params).unwrap();
        let t = run(&s, policy, 0.9);
        append_jsonl(&path, &TraceRecord::from_trace(format!("id-{i}"), "2026-10-16T00:00:00Z", &t)).unwrap();
        traces.push(t);
    }
    let records = read_jsonl(&path).unwrap();
    assert_eq!(records.len(), traces.len());
    for (r, t) in records.iter().zip(&traces) {
        r.validate().unwrap();
        assert_eq!(&r.to_trace(), t);
        assert_eq!(r.rows.len(), t.steps.len());
    }
    std::fs::write(&path, "{not json}\n").unwrap();
    assert!(read_jsonl(&path).is_err());
}
