use graphdiff::diffusion::{
    forward_sample, posterior, reverse_step, timestep_grid, truncate_top_k, CleanPrediction, NoiseSchedule,
    TransitionMatrix,
};
use graphdiff::molgraph::{parse_smiles, AtomTable};
use graphdiff::vocab::{encode_instance, SequenceLayout, Target, TokenSequence, Vocabulary, EDGE_CLEAN, EDGE_MASK};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn distribution(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, n).prop_map(|w| {
        let s: f64 = w.iter().sum();
        w.into_iter().map(|x| x / s).collect()
    })
}

fn setup(slots: usize) -> (Vocabulary, TokenSequence) {
    let vocab = Vocabulary::build(["an ether with two carbons"], 1, &AtomTable::default()).unwrap();
    let layout = SequenceLayout { max_text: 8, max_source: 0, target_slots: slots };
    let g = parse_smiles("COC").unwrap();
    let seq = encode_instance(&vocab, &layout, "an ether with two carbons", None, Target::Graph(&g)).unwrap();
    (vocab, seq)
}

fn uniform_prediction(vocab: &Vocabulary, m: usize) -> CleanPrediction {
    let c = vocab.node_categories() - 1;
    CleanPrediction {
        node_categories: c,
        node_probs: vec![1.0 / c as f64; m * c],
        edge_probs: vec![1.0 / EDGE_CLEAN as f64; m * m * EDGE_CLEAN],
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn posterior_is_a_distribution(
        p in distribution(5),
        z in 0usize..5,
        t in 1u32..50,
        kf in 0.0f64..1.0,
    ) {
        let k = 1 + ((f64::from(t - 1)) * kf) as u32;
        let d = posterior(z, z, &p, t, k).unwrap();
        prop_assert!((d.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(d.probs.iter().all(|&x| x >= 0.0));
        // Unmasked inputs are copied.
        let other = (z + 1) % 5;
        let kept = posterior(other, z, &p, t, k).unwrap();
        prop_assert_eq!(kept.probs[other], 1.0);
    }

    #[test]
    fn transition_products_compose(t1 in 0u32..30, d1 in 0u32..30, d2 in 0u32..30) {
        let s = NoiseSchedule::new(100).unwrap();
        let (t2, t3) = (t1 + d1, t1 + d1 + d2);
        let a = TransitionMatrix::product(&s, t1, t2, 4, 3).unwrap();
        let b = TransitionMatrix::product(&s, t2, t3, 4, 3).unwrap();
        let c = TransitionMatrix::product(&s, t1, t3, 4, 3).unwrap();
        let ab = a.matmul(&b);
        for i in 0..4 {
            prop_assert!((c.row_sums()[i] - 1.0).abs() < 1e-12);
            for j in 0..4 {
                prop_assert!((ab.get(i, j) - c.get(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn top_k_keeps_the_largest(p in distribution(8), k in 1usize..10) {
        let q = truncate_top_k(&p, k).unwrap();
        let kept = q.iter().filter(|&&x| x > 0.0).count();
        prop_assert_eq!(kept, k.min(8));
        prop_assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let min_kept = p.iter().zip(&q).filter(|(_, &y)| y > 0.0).map(|(&x, _)| x).fold(f64::INFINITY, f64::min);
        prop_assert!(p.iter().zip(&q).filter(|(_, &y)| y == 0.0).all(|(&x, _)| x <= min_kept));
    }

    #[test]
    fn grids_descend_to_zero(horizon in 1u32..2000, frac in 0.0f64..1.0) {
        let steps = 1 + ((f64::from(horizon - 1)) * frac) as u32;
        let g = timestep_grid(horizon, steps).unwrap();
        prop_assert_eq!(g.len(), steps as usize + 1);
        prop_assert_eq!((g[0], *g.last().unwrap()), (horizon, 0));
        prop_assert!(g.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn reverse_step_only_touches_masked_positions(seed in any::<u64>(), t in 2u32..100) {
        let (vocab, clean) = setup(5);
        let s = NoiseSchedule::new(100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noisy = forward_sample(&clean, &vocab, &s, t, &mut rng).unwrap();
        let pred = uniform_prediction(&vocab, 5);
        let next = reverse_step(&noisy, &vocab, &pred, t, 1, 15, &mut rng).unwrap();
        for i in noisy.target_range() {
            if noisy.token_ids[i] != vocab.mask_id() {
                prop_assert_eq!(next.token_ids[i], noisy.token_ids[i]);
            }
        }
        for i in 0..5 {
            for j in 0..5 {
                if noisy.tgt_edges.get(i, j) as usize != EDGE_MASK {
                    prop_assert_eq!(next.tgt_edges.get(i, j), noisy.tgt_edges.get(i, j));
                }
            }
        }
        prop_assert!(next.tgt_edges.is_symmetric());
        // A full stride clears every mask.
        let done = reverse_step(&noisy, &vocab, &pred, t, t, 15, &mut rng).unwrap();
        prop_assert!(done.target_tokens().iter().all(|&id| id != vocab.mask_id()));
        prop_assert!(done.tgt_edges.as_slice().iter().all(|&c| c as usize != EDGE_MASK));
    }
}

#[test]
fn forward_marginal_matches_schedule() {
    let (vocab, clean) = setup(12);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (horizon, t) in [(10u32, 3u32), (100, 37), (1000, 900)] {
        let s = NoiseSchedule::new(horizon).unwrap();
        let (mut masked, mut total) = (0usize, 0usize);
        for _ in 0..500 {
            let noisy = forward_sample(&clean, &vocab, &s, t, &mut rng).unwrap();
            masked += noisy.target_tokens().iter().filter(|&&id| id == vocab.mask_id()).count();
            total += 12;
            for i in 0..12 {
                for j in i + 1..12 {
                    masked += usize::from(noisy.tgt_edges.get(i, j) as usize == EDGE_MASK);
                    total += 1;
                }
            }
            assert_eq!(noisy.text_range().map(|r| noisy.token_ids[r]).collect::<Vec<_>>(),
                clean.text_range().map(|r| clean.token_ids[r]).collect::<Vec<_>>());
        }
        let p = f64::from(t) / f64::from(horizon);
        let rate = masked as f64 / total as f64;
        let sigma = (p * (1.0 - p) / total as f64).sqrt();
        assert!((rate - p).abs() < 4.0 * sigma + 1e-12, "T={horizon} t={t}: {rate} vs {p}");
    }
}
