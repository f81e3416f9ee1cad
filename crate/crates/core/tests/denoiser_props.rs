use graphdiff::denoiser::{generate, permute_positions, DenoiserConfig, Model};
use graphdiff::diffusion::{forward_sample, NoiseSchedule};
use graphdiff::molgraph::{parse_smiles, AtomTable};
use graphdiff::vocab::{encode_instance, SequenceLayout, Target, TokenSequence, Vocabulary, EDGE_VOCAB};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MOLECULES: [&str; 8] = ["C", "CO", "CCO", "C1CC1", "CC(=O)O", "c1ccccc1", "CNC(=O)S", "ClC(Cl)Cl"];

fn vocab() -> Vocabulary {
    Vocabulary::build(["a small molecule with a ring", "an acid"], 1, &AtomTable::default()).unwrap()
}

fn config(vocab: &Vocabulary, layout: &SequenceLayout, bias_recursion: bool) -> DenoiserConfig {
    DenoiserConfig {
        layers: 2,
        hidden: 16,
        heads: 2,
        max_positions: layout.max_positions(),
        vocab_size: vocab.size(),
        edge_vocab: EDGE_VOCAB,
        target_slots: layout.target_slots,
        bias_recursion,
    }
}

/// A randomly corrupted instance with `m` target slots.
fn instance(vocab: &Vocabulary, layout: &SequenceLayout, rng: &mut ChaCha8Rng) -> TokenSequence {
    let smiles = MOLECULES[rng.random_range(0..MOLECULES.len())];
    let g = parse_smiles(smiles).unwrap();
    let clean = encode_instance(vocab, layout, "a small molecule", None, Target::Graph(&g)).unwrap();
    let s = NoiseSchedule::new(100).unwrap();
    forward_sample(&clean, vocab, &s, rng.random_range(1..=100), rng).unwrap()
}

#[test]
fn joint_permutation_permutes_outputs() {
    let v = vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for round in 0..20 {
        let m = rng.random_range(6..=8);
        let layout = SequenceLayout { max_text: 6, max_source: 0, target_slots: m };
        let model = Model::new(config(&v, &layout, round % 2 == 0), &mut rng).unwrap();
        let seq = instance(&v, &layout, &mut rng);
        let mut perm: Vec<usize> = (0..m).collect();
        perm.shuffle(&mut rng);
        let a = model.forward(&seq).unwrap();
        let b = model.forward(&seq.permute_target(&perm)).unwrap();
        let cols = a.token_logits.cols();
        let base = seq.target_range().start;
        let mut worst: f64 = 0.0;
        for (x, &p) in perm.iter().enumerate() {
            for c in 0..cols {
                let lhs = b.token_logits.data()[(base + x) * cols + c];
                let rhs = a.token_logits.data()[(base + p) * cols + c];
                worst = worst.max((lhs - rhs).abs());
            }
            for (y, &q) in perm.iter().enumerate() {
                for c in 0..EDGE_VOCAB {
                    let lhs = b.edge_logits.data()[(x * m + y) * EDGE_VOCAB + c];
                    let rhs = a.edge_logits.data()[(p * m + q) * EDGE_VOCAB + c];
                    worst = worst.max((lhs - rhs).abs());
                }
            }
        }
        // text rows are untouched by a target permutation
        for row in seq.text_range() {
            for c in 0..cols {
                worst = worst.max((a.token_logits.data()[row * cols + c] - b.token_logits.data()[row * cols + c]).abs());
            }
        }
        assert!(worst < 1e-9, "round {round}: deviation {worst}");
    }
}

fn layer_norm(x: &mut [f64], g: &[f64], b: &[f64]) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let r = 1.0 / (var + 1e-5).sqrt();
    for (i, v) in x.iter_mut().enumerate() {
        *v = (*v - mean) * r * g[i] + b[i];
    }
}

fn affine(x: &[Vec<f64>], w: &[f64], b: &[f64]) -> Vec<Vec<f64>> {
    let out = b.len();
    x.iter()
        .map(|row| (0..out).map(|j| b[j] + row.iter().enumerate().map(|(i, v)| v * w[i * out + j]).sum::<f64>()).collect())
        .collect()
}

/// Plain post-LN transformer encoder with no attention bias of any kind.
fn plain_transformer(model: &Model, seq: &TokenSequence) -> Vec<Vec<f64>> {
    let cfg = &model.config;
    let p = |name: &str| model.params.get(model.params.by_name(name).unwrap()).data().to_vec();
    let (d, heads) = (cfg.hidden, cfg.heads);
    let dk = d / heads;
    let (tok, pos) = (p("tok_emb"), p("pos_emb"));
    let mut x: Vec<Vec<f64>> = seq
        .token_ids
        .iter()
        .zip(&seq.position_ids)
        .map(|(&t, &q)| (0..d).map(|c| tok[t as usize * d + c] + pos[q as usize * d + c]).collect())
        .collect();
    let (g, b) = (p("emb_ln.g"), p("emb_ln.b"));
    x.iter_mut().for_each(|r| layer_norm(r, &g, &b));
    let s = x.len();
    for l in 0..cfg.layers {
        let n = |k: &str| p(&format!("layer{l}.{k}"));
        let q = affine(&x, &n("wq"), &n("bq"));
        let k = affine(&x, &n("wk"), &n("bk"));
        let v = affine(&x, &n("wv"), &n("bv"));
        let mut ctx = vec![vec![0.0; d]; s];
        for h in 0..heads {
            for i in 0..s {
                let scores: Vec<f64> = (0..s)
                    .map(|j| (0..dk).map(|c| q[i][h * dk + c] * k[j][h * dk + c]).sum::<f64>() / (dk as f64).sqrt())
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|z| (z - max).exp()).collect();
                let total: f64 = e.iter().sum();
                for j in 0..s {
                    for c in 0..dk {
                        ctx[i][h * dk + c] += e[j] / total * v[j][h * dk + c];
                    }
                }
            }
        }
        let o = affine(&ctx, &n("wo"), &n("bo"));
        let (g1, b1) = (n("ln1.g"), n("ln1.b"));
        let x1: Vec<Vec<f64>> = x
            .iter()
            .zip(&o)
            .map(|(a, b)| {
                let mut r: Vec<f64> = a.iter().zip(b).map(|(u, w)| u + w).collect();
                layer_norm(&mut r, &g1, &b1);
                r
            })
            .collect();
        let hidden: Vec<Vec<f64>> = affine(&x1, &n("w1"), &n("b1"))
            .into_iter()
            .map(|r| {
                r.into_iter()
                    .map(|z| 0.5 * z * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (z + 0.044715 * z * z * z)).tanh()))
                    .collect()
            })
            .collect();
        let f = affine(&hidden, &n("w2"), &n("b2"));
        let (g2, b2) = (n("ln2.g"), n("ln2.b"));
        x = x1
            .iter()
            .zip(&f)
            .map(|(a, b)| {
                let mut r: Vec<f64> = a.iter().zip(b).map(|(u, w)| u + w).collect();
                layer_norm(&mut r, &g2, &b2);
                r
            })
            .collect();
    }
    affine(&x, &p("tok_out.w"), &p("tok_out.b"))
}

#[test]
fn zero_bias_without_recursion_is_a_plain_transformer() {
    let v = vocab();
    let layout = SequenceLayout { max_text: 6, max_source: 0, target_slots: 5 };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut model = Model::new(config(&v, &layout, false), &mut rng).unwrap();
    let id = model.params.by_name("edge_bias").unwrap();
    model.params.get_mut(id).data_mut().fill(0.0);
    for _ in 0..5 {
        let seq = instance(&v, &layout, &mut rng);
        let out = model.forward(&seq).unwrap();
        let oracle = plain_transformer(&model, &seq);
        let cols = out.token_logits.cols();
        for (r, row) in oracle.iter().enumerate() {
            for (c, want) in row.iter().enumerate() {
                let got = out.token_logits.data()[r * cols + c];
                assert!((got - want).abs() < 1e-9, "row {r} col {c}: {got} vs {want}");
            }
        }
    }
}

#[test]
fn edge_bias_reaches_token_logits() {
    let v = vocab();
    let layout = SequenceLayout { max_text: 6, max_source: 0, target_slots: 5 };
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let model = Model::new(config(&v, &layout, true), &mut rng).unwrap();
    let seq = instance(&v, &layout, &mut rng);
    let mut other = seq.clone();
    let cur = other.tgt_edges.get(0, 1);
    other.tgt_edges.set(0, 1, (cur + 1) % EDGE_VOCAB as u8);
    let (a, b) = (model.forward(&seq).unwrap(), model.forward(&other).unwrap());
    assert_ne!(a.token_logits, b.token_logits);
}

#[test]
fn position_permutation_is_uniform() {
    let v = vocab();
    let layout = SequenceLayout { max_text: 6, max_source: 0, target_slots: 3 };
    let g = parse_smiles("CO").unwrap();
    let seq = encode_instance(&v, &layout, "an acid", None, Target::Graph(&g)).unwrap();
    let base = seq.target_range();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut counts = std::collections::BTreeMap::new();
    let draws = 6000;
    for _ in 0..draws {
        let (p, perm) = permute_positions(&seq, &mut rng);
        assert_eq!(p.token_ids, seq.token_ids);
        assert_eq!(p.tgt_edges, seq.tgt_edges);
        assert_eq!(p.position_ids[..base.start], seq.position_ids[..base.start]);
        *counts.entry(p.position_ids[base.clone()].to_vec()).or_insert(0usize) += 1;
        let mut undone = p.clone();
        for (a, &q) in perm.iter().enumerate() {
            undone.position_ids[base.start + q] = p.position_ids[base.start + a];
        }
        assert_eq!(undone, seq);
    }
    assert_eq!(counts.len(), 6);
    let expected = draws as f64 / 6.0;
    let chi2: f64 = counts.values().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 5 degrees of freedom, p = 0.001
    assert!(chi2 < 20.52, "chi-square {chi2}");
}

#[test]
fn generation_is_reproducible_per_seed() {
    let v = vocab();
    let layout = SequenceLayout { max_text: 6, max_source: 0, target_slots: 4 };
    let model = Model::new(config(&v, &layout, true), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let seq = encode_instance(&v, &layout, "an acid", None, Target::Masked).unwrap();
    let s = NoiseSchedule::new(50).unwrap();
    let run = |seed| generate(&model, &v, &s, &seq, 10, 15, true, &mut ChaCha8Rng::seed_from_u64(seed));
    assert_eq!(format!("{:?}", run(1)), format!("{:?}", run(1)));
}
