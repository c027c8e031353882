//! Property tests for the uncertainty metrics and the step segmenter.

mod common;

use proptest::prelude::*;
use steproute_core::segmenter::{Boundary, Phase, SegmentEvent, SegmenterConfig, StepSegmenter};
use steproute_core::uncertainty::{
    normalize_probe, shannon_entropy, step_entropy, step_perplexity, StepLogprobs, TokenDistribution, TokenProb,
    TokenStat, TruncationPolicy,
};

use common::{naive_entropy, naive_mean, reference_steps, rel_close};

fn distribution() -> impl Strategy<Value = (Vec<f64>, f64)> {
    (prop::collection::vec(0.001f64..1.0, 1..40), 0.0f64..0.5, any::<bool>()).prop_map(|(w, tail, has_tail)| {
        let tail = if has_tail { tail } else { 0.0 };
        let sum: f64 = w.iter().sum();
        let probs = w.iter().map(|x| x / sum * (1.0 - tail)).collect();
        (probs, tail)
    })
}

fn build(probs: &[f64], tail: f64) -> TokenDistribution {
    let entries = probs
        .iter()
        .enumerate()
        .map(|(i, &p)| TokenProb { token: format!("t{i}"), prob: p })
        .collect();
    TokenDistribution::new(entries, tail).unwrap()
}

proptest! {
    #[test]
    fn entropy_matches_oracle_and_bounds((probs, tail) in distribution()) {
        let d = build(&probs, tail);
        let h = shannon_entropy(&d);
        prop_assert!(rel_close(h, naive_entropy(&probs, tail), 1e-9));
        prop_assert!(h >= 0.0);
        prop_assert!(h <= (d.support() as f64).ln() + 1e-9);
    }

    #[test]
    fn entropy_is_permutation_invariant((probs, tail) in distribution(), seed in any::<u64>()) {
        let mut shuffled = probs.clone();
        let n = shuffled.len();
        let mut s = seed;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (s >> 33) as usize % (i + 1));
        }
        let a = shannon_entropy(&build(&probs, tail));
        let b = shannon_entropy(&build(&shuffled, tail));
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn step_metrics_match_oracles(stats in prop::collection::vec((-20.0f64..=0.0, 0.0f64..5.0), 1..200)) {
        let tokens: Vec<TokenStat> = stats.iter().map(|&(logprob, entropy)| TokenStat { logprob, entropy }).collect();
        let lp = StepLogprobs::new(tokens).unwrap();
        let h = step_entropy(&lp).unwrap();
        let entropies: Vec<f64> = stats.iter().map(|s| s.1).collect();
        let logprobs: Vec<f64> = stats.iter().map(|s| s.0).collect();
        prop_assert!(rel_close(h, naive_mean(&entropies), 1e-9));
        let ppl = step_perplexity(&lp).unwrap();
        prop_assert!(rel_close(ppl, (-naive_mean(&logprobs)).exp(), 1e-9));
        prop_assert!(ppl >= 1.0);
    }

    #[test]
    fn tail_bucket_conserves_mass(logprobs in prop::collection::vec(-12.0f64..0.0, 1..30)) {
        let pairs: Vec<(String, f64)> = logprobs.iter().enumerate().map(|(i, &l)| (format!("t{i}"), l)).collect();
        let sum: f64 = logprobs.iter().map(|l| l.exp()).sum();
        match normalize_probe(&pairs, TruncationPolicy::TailBucket) {
            Ok(d) => {
                let total: f64 = d.entries().iter().map(|e| e.prob).sum::<f64>() + d.tail_mass();
                prop_assert!((total - 1.0).abs() < 1e-9);
            }
            Err(_) => prop_assert!(sum > 1.0),
        }
        if let Ok(r) = normalize_probe(&pairs, TruncationPolicy::Renormalize) {
            prop_assert_eq!(r.tail_mass(), 0.0);
            let total: f64 = r.entries().iter().map(|e| e.prob).sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
        }
    }
}

fn split_text() -> impl Strategy<Value = (String, Vec<usize>)> {
    let chars = prop::sample::select(vec!['a', 'b', ' ', '\n', '\n', '\n', 'é', '.']);
    (prop::collection::vec(chars, 1..120), prop::collection::vec(1usize..6, 1..120)).prop_map(|(cs, cuts)| {
        let text: String = cs.into_iter().collect();
        let boundaries: Vec<usize> = text.char_indices().map(|(i, _)| i).skip(1).chain([text.len()]).collect();
        // token ends: walk the char boundaries in random strides
        let mut ends = Vec::new();
        let mut k = 0;
        let mut c = 0;
        while k < boundaries.len() {
            k = (k + cuts[c % cuts.len()]).min(boundaries.len());
            ends.push(boundaries[k - 1]);
            c += 1;
        }
        (text, ends)
    })
}

fn segment(text: &str, ends: &[usize]) -> Vec<(String, Boundary)> {
    let mut seg = StepSegmenter::new(SegmenterConfig::default(), usize::MAX).in_phase(Phase::Thinking);
    let mut out = Vec::new();
    let mut start = 0;
    let mut events = Vec::new();
    for &e in ends {
        events.extend(seg.feed(&text[start..e]));
        start = e;
    }
    events.extend(seg.flush());
    for ev in events {
        if let SegmentEvent::StepComplete { text, boundary, .. } = ev {
            out.push((text, boundary));
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn segmenter_round_trip((text, ends) in split_text()) {
        let steps = segment(&text, &ends);
        let joined: String = steps.iter().map(|s| s.0.as_str()).collect();
        prop_assert_eq!(&joined, &text);
        let (want, runs) = reference_steps(&text, &ends);
        let got: Vec<String> = steps.iter().map(|s| s.0.clone()).collect();
        prop_assert_eq!(&got, &want);
        // each delimiter boundary lies inside its newline run
        let mut pos = 0;
        let mut delimiters = 0;
        for (t, b) in &steps {
            pos += t.len();
            if *b == Boundary::Delimiter && t.ends_with("\n\n") && !t.trim_matches('\n').is_empty() {
                let (lo, hi) = runs[delimiters];
                prop_assert!(pos >= lo + 2 && pos <= hi);
                delimiters += 1;
            }
        }
        prop_assert_eq!(delimiters, runs.len());
    }

    #[test]
    fn split_invariance_of_step_count((text, ends) in split_text()) {
        // a single token per character only moves boundaries inside runs
        let fine: Vec<usize> = text.char_indices().map(|(i, _)| i).skip(1).chain([text.len()]).collect();
        let a = segment(&text, &ends).iter().filter(|s| s.1 == Boundary::Delimiter).count();
        let b = segment(&text, &fine).iter().filter(|s| s.1 == Boundary::Delimiter).count();
        prop_assert_eq!(a, b);
    }
}
