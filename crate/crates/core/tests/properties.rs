//! Cross-module invariants checked on random inputs.

use ndarray::Array2;
use proptest::prelude::*;
use wgat_core::data::{self, PreprocessConfig, RawInteraction};
use wgat_core::encoder::{Encoder, EncoderConfig, EncoderKind, NodeTables, VarianceRule};
use wgat_core::eval::{ndcg_at_k, recall_at_k, top_k_from_scores};
use wgat_core::graph::build_graph;
use wgat_core::synth::toy_interactions;

fn tables(n: usize, d: usize, seed: u64) -> NodeTables {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    NodeTables::new(
        Array2::from_shape_simple_fn((n, d), || rng.gen_range(-1.0..1.0)),
        Array2::from_shape_simple_fn((n, d), || rng.gen_range(0.1..2.0)),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn propagated_variance_stays_within_layer0_range(
        users in 2usize..12, items in 2usize..12, extra in 0usize..20, seed in 0u64..1000,
        layers in 1usize..4, single in any::<bool>(), lightgcn in any::<bool>(),
    ) {
        let edges = (users.max(items) + extra).min(users * items);
        let g = build_graph(&toy_interactions(users, items, edges, seed).unwrap()).unwrap();
        let t = tables(g.num_nodes(), 3, seed);
        let cfg = EncoderConfig {
            kind: if lightgcn { EncoderKind::LightgcnGauss } else { EncoderKind::Wgat },
            layers,
            variance_rule: if single { VarianceRule::ASingle } else { VarianceRule::ASquared },
        };
        let out = Encoder::new(&g, cfg).forward(&t).unwrap().output;
        prop_assert!(out.variance.iter().all(|v| v.is_finite() && *v > 0.0));
        if !lightgcn {
            let lo = t.variance.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = t.variance.iter().cloned().fold(0.0, f64::max);
            prop_assert!(out.variance.iter().all(|v| *v >= lo * (1.0 - 1e-12) && *v <= hi * (1.0 + 1e-12)));
        }
    }

    #[test]
    fn metrics_are_bounded_and_recall_grows_with_k(
        scores in prop::collection::vec(-5.0f64..5.0, 5..40),
        test_mask in prop::collection::vec(any::<bool>(), 40),
        k in 1usize..10,
    ) {
        let n = scores.len();
        let test: Vec<u32> = (0..n as u32).filter(|&i| test_mask[i as usize]).collect();
        prop_assume!(!test.is_empty());
        let small = top_k_from_scores(&scores, &[], k);
        let large = top_k_from_scores(&scores, &[], k + 3);
        prop_assert_eq!(&large.items[..small.items.len()], &small.items[..]);
        let (r1, r2) = (recall_at_k(&small.items, &test).unwrap(), recall_at_k(&large.items, &test).unwrap());
        prop_assert!((0.0..=1.0).contains(&r1) && r1 <= r2);
        let ndcg = ndcg_at_k(&small.items, &test, k).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&ndcg));
    }

    #[test]
    fn cache_round_trips(pairs in prop::collection::btree_set((0u8..15, 0u8..15), 10..80), seed in 0u64..100) {
        let raw: Vec<RawInteraction> = pairs
            .iter()
            .map(|&(u, i)| RawInteraction { user: format!("u{u}"), item: format!("m{i}"), rating: 4.0, timestamp: 0 })
            .collect();
        let cfg = PreprocessConfig { k_core: 1, seed, ..Default::default() };
        let bundle = data::preprocess(&raw, &cfg).unwrap();
        prop_assert_eq!(bundle.train.len() + bundle.test.len(), pairs.len());
        let dir = tempfile::tempdir().unwrap();
        let sha = data::write_cache(dir.path(), &bundle).unwrap();
        let (back, sha_back) = data::read_cache(dir.path()).unwrap();
        prop_assert_eq!(back, bundle);
        prop_assert_eq!(sha, sha_back);
    }
}
