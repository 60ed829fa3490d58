use proptest::prelude::*;

use vq2_core::rejection::{reject_filter, ScoredSample};
use vq2_core::Tensor;

fn samples(scores: &[f64]) -> Vec<ScoredSample> {
    scores
        .iter()
        .enumerate()
        .map(|(i, &s)| ScoredSample { sample_id: i, class_label: 0, score: s, image: Tensor::zeros(&[1, 1, 1]) })
        .collect()
}

/// Ids of the `ceil(tenths/10 · n)` best scores, found by a stable descending sort.
fn oracle(scores: &[f64], tenths: usize) -> Vec<usize> {
    let keep = (tenths * scores.len()).div_ceil(10);
    let mut ids: Vec<usize> = (0..scores.len()).collect();
    ids.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    ids.truncate(keep);
    ids
}

fn score_strategy() -> impl Strategy<Value = Vec<f64>> {
    // Coarse values so ties are common.
    prop::collection::vec(prop_oneof![(0u32..8).prop_map(|v| v as f64 / 8.0), 0.0f64..1.0], 1..120)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn top_fraction_matches_sort_oracle(scores in score_strategy()) {
        let all = samples(&scores);
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        for tenths in 1..=10 {
            let kept = reject_filter(&all, tenths as f64 / 10.0).unwrap();
            let expected = oracle(&scores, tenths);
            prop_assert_eq!(kept.len(), expected.len());
            let ids: Vec<usize> = kept.iter().map(|s| s.sample_id).collect();
            prop_assert_eq!(&ids, &expected);
            let kept_mean = kept.iter().map(|s| s.score).sum::<f64>() / kept.len() as f64;
            prop_assert!(kept_mean >= mean - 1e-12, "kept mean {} below overall {}", kept_mean, mean);
        }
    }
}
