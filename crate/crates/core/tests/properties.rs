//! Property-based invariants over randomized inputs.

use proptest::prelude::*;

use cgcd_core::embedding::{normalize, Proxy, ProxyOrigin, ProxySet};
use cgcd_core::evt::{psi_from_distance, split_known_unknown, PsiClassifier, WeibullParams};
use cgcd_core::losses::{pa_loss, LabeledBatch, LossConfig};
use cgcd_core::metrics::{discovery, forgetting, hungarian_accuracy, recall_at_k};
use cgcd_core::numerics::{adamw_step, OptimizerState, ParamVector};

fn unit_vec(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-1.0f64..1.0, dim).prop_filter_map("zero vector", |v| {
        let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        (n > 1e-6).then(|| normalize(&v))
    })
}

fn batch(dim: usize, classes: usize) -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>)> {
    proptest::collection::vec((unit_vec(dim), 0..classes), 1..8)
        .prop_map(|rows| rows.into_iter().unzip())
}

fn proxy_set(dim: usize, classes: usize) -> impl Strategy<Value = ProxySet> {
    proptest::collection::vec(unit_vec(dim), classes).prop_map(move |vs| {
        ProxySet::new(
            vs.into_iter()
                .enumerate()
                .map(|(i, v)| Proxy::new(v, i, ProxyOrigin::Initial))
                .collect(),
            classes,
        )
        .unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pa_loss_is_batch_order_invariant(
        (embeddings, labels) in batch(5, 3),
        proxies in proxy_set(5, 3),
        rotate in 0usize..8,
    ) {
        let cfg = LossConfig::default();
        let a = pa_loss(&LabeledBatch::new(embeddings.clone(), labels.clone()).unwrap(), &proxies, &cfg).unwrap();
        let r = rotate % embeddings.len();
        let mut e2 = embeddings;
        let mut l2 = labels;
        e2.rotate_left(r);
        l2.rotate_left(r);
        let b = pa_loss(&LabeledBatch::new(e2, l2).unwrap(), &proxies, &cfg).unwrap();
        prop_assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }

    #[test]
    fn recall_is_monotone_in_k(
        points in proptest::collection::vec((unit_vec(4), 0usize..3), 6..24),
    ) {
        let (embeddings, labels): (Vec<_>, Vec<_>) = points.into_iter().unzip();
        let ks: Vec<usize> = (1..embeddings.len()).collect();
        let r = recall_at_k(&embeddings, &labels, &ks).unwrap();
        let vals: Vec<f64> = ks.iter().map(|k| r[k]).collect();
        prop_assert!(vals.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn split_partitions_the_input(
        points in proptest::collection::vec(unit_vec(4), 1..32),
        proxies in proxy_set(4, 2),
        threshold in 0.05f64..0.95,
    ) {
        let w = WeibullParams { shape: 2.0, scale: 0.4, tail_size_used: 10 };
        let clf = PsiClassifier::new(proxies, vec![w.clone(), w], threshold).unwrap();
        let (known, unknown) = split_known_unknown(&points, &clf);
        let mut all: Vec<usize> = known.iter().map(|&(i, _)| i).chain(unknown.iter().copied()).collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..points.len()).collect::<Vec<_>>());
    }

    #[test]
    fn adamw_zero_grad_zero_decay_is_identity(
        values in proptest::collection::vec(-5.0f64..5.0, 1..16),
        steps in 1usize..5,
    ) {
        let mut params = ParamVector::new(values.clone());
        let grads = ParamVector::new(vec![0.0; values.len()]);
        let mut state = OptimizerState::new(values.len(), 1e-3, 0.0);
        for _ in 0..steps {
            adamw_step(&mut params, &grads, &mut state).unwrap();
        }
        prop_assert_eq!(params.values, values);
    }

    #[test]
    fn hungarian_accuracy_survives_relabeling(
        pairs in proptest::collection::vec((0usize..4, 0usize..4), 2..24),
        offset_p in 1usize..50,
        offset_t in 1usize..50,
    ) {
        let (predicted, truth): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let base = hungarian_accuracy(&predicted, &truth).unwrap();
        let p2: Vec<usize> = predicted.iter().map(|&p| p * 7 + offset_p).collect();
        let t2: Vec<usize> = truth.iter().map(|&t| t * 13 + offset_t).collect();
        let relabeled = hungarian_accuracy(&p2, &t2).unwrap();
        prop_assert!((base - relabeled).abs() < 1e-12);
    }

    #[test]
    fn psi_is_monotone_in_distance(
        shape in 0.2f64..8.0,
        scale in 0.05f64..3.0,
        d1 in 0.0f64..2.0,
        d2 in 0.0f64..2.0,
    ) {
        let w = WeibullParams { shape, scale, tail_size_used: 10 };
        let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
        prop_assert!(psi_from_distance(lo, &w) >= psi_from_distance(hi, &w));
    }

    #[test]
    fn forgetting_and_discovery_are_exact(history in proptest::collection::vec(0.0f64..1.0, 2..10)) {
        let first = history[0];
        let expected = history[1..]
            .iter()
            .map(|&m| first - m)
            .fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(forgetting(&history).unwrap(), expected);
        let mean = history.iter().sum::<f64>() / history.len() as f64;
        prop_assert!((discovery(&history).unwrap() - mean).abs() < 1e-15);
    }
}
