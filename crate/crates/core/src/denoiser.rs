//! Text-graph transformer denoiser.
//!
//! Text, source-graph and target-graph tokens share one sequence. Inside each
//! graph segment, attention scores receive a per-head additive bias: layer 0
//! reads it from an edge-category table and every later layer reuses the
//! previous layer's attention probabilities. Node and text logits come from
//! a token head over the final hidden states; edge logits come from a linear
//! head over the final per-head bias of each target pair.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::{sample, CleanPrediction, CleanPredictor, DiffusionError, NoiseSchedule};
use crate::molgraph::MolGraph;
use crate::numerics::{softmax_in_place, NumericsError, ParamId, ParamSet, Tape, Tensor, Var};
use crate::vocab::{TokenSequence, Vocabulary, EDGE_CLEAN, EDGE_VOCAB};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DenoiserError {
    #[error("invalid denoiser config: {0}")]
    Config(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
    pub edge_vocab: usize,
    pub target_slots: usize,
    /// When false every layer reuses the layer-0 edge bias.
    pub bias_recursion: bool,
}

impl DenoiserConfig {
    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<(), DenoiserError> {
        if self.layers == 0 || self.hidden == 0 || self.heads == 0 {
            return Err(DenoiserError::Config("layers, hidden and heads must be positive".into()));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(DenoiserError::Config(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.edge_vocab != EDGE_VOCAB {
            return Err(DenoiserError::Config(format!("edge vocab must be {EDGE_VOCAB}")));
        }
        if self.vocab_size == 0 || self.max_positions == 0 {
            return Err(DenoiserError::Config("empty vocabulary or position table".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LayerIds {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
struct ModelIds {
    tok_emb: ParamId,
    pos_emb: ParamId,
    emb_ln_g: ParamId,
    emb_ln_b: ParamId,
    edge_bias: ParamId,
    layers: Vec<LayerIds>,
    tok_out_w: ParamId,
    tok_out_b: ParamId,
    edge_out_w: ParamId,
    edge_out_b: ParamId,
}

/// Model architecture plus its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: DenoiserConfig,
    pub params: ParamSet,
    ids: ModelIds,
}

/// Token logits `[S, V]` and symmetric edge logits `[m, m, EDGE_VOCAB]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserOutput {
    pub token_logits: Tensor,
    pub edge_logits: Tensor,
}

/// Tape handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub token_logits: Var,
    pub edge_logits: Var,
    /// Post-softmax attention per layer and head, each `[S, S]`.
    pub attention: Vec<Vec<Var>>,
}

const INIT_STD: f64 = 0.02;

fn layer_names(l: usize) -> [String; 16] {
    [
        "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln1.g", "ln1.b", "w1", "b1", "w2", "b2", "ln2.g",
        "ln2.b",
    ]
    .map(|n| format!("layer{l}.{n}"))
}

impl Model {
    /// Fresh model: weights drawn from N(0, 0.02²), biases zero, layer-norm
    /// gains one.
    pub fn new(config: DenoiserConfig, rng: &mut ChaCha8Rng) -> Result<Self, DenoiserError> {
        config.validate()?;
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut draw = |shape: &[usize]| {
            let n: usize = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect()).expect("shape")
        };
        let (d, h, v) = (config.hidden, config.heads, config.vocab_size);
        let mut p = ParamSet::new();
        p.add("tok_emb", draw(&[v, d]));
        p.add("pos_emb", draw(&[config.max_positions, d]));
        p.add("emb_ln.g", Tensor::filled(&[d], 1.0));
        p.add("emb_ln.b", Tensor::zeros(&[d]));
        p.add("edge_bias", draw(&[EDGE_VOCAB, h]));
        for l in 0..config.layers {
            let n = layer_names(l);
            p.add(&n[0], draw(&[d, d]));
            p.add(&n[1], Tensor::zeros(&[d]));
            p.add(&n[2], draw(&[d, d]));
            p.add(&n[3], Tensor::zeros(&[d]));
            p.add(&n[4], draw(&[d, d]));
            p.add(&n[5], Tensor::zeros(&[d]));
            p.add(&n[6], draw(&[d, d]));
            p.add(&n[7], Tensor::zeros(&[d]));
            p.add(&n[8], Tensor::filled(&[d], 1.0));
            p.add(&n[9], Tensor::zeros(&[d]));
            p.add(&n[10], draw(&[d, 4 * d]));
            p.add(&n[11], Tensor::zeros(&[4 * d]));
            p.add(&n[12], draw(&[4 * d, d]));
            p.add(&n[13], Tensor::zeros(&[d]));
            p.add(&n[14], Tensor::filled(&[d], 1.0));
            p.add(&n[15], Tensor::zeros(&[d]));
        }
        p.add("tok_out.w", draw(&[d, v]));
        p.add("tok_out.b", Tensor::zeros(&[v]));
        p.add("edge_out.w", draw(&[h, EDGE_VOCAB]));
        p.add("edge_out.b", Tensor::zeros(&[EDGE_VOCAB]));
        Self::from_params(config, p)
    }

    /// Rebinds a parameter set (for example one read from a checkpoint).
    pub fn from_params(config: DenoiserConfig, params: ParamSet) -> Result<Self, DenoiserError> {
        config.validate()?;
        let (d, h, v) = (config.hidden, config.heads, config.vocab_size);
        let get = |name: &str, shape: &[usize]| -> Result<ParamId, DenoiserError> {
            let id = params
                .by_name(name)
                .ok_or_else(|| DenoiserError::Config(format!("missing parameter {name}")))?;
            if params.get(id).shape() != shape {
                return Err(DenoiserError::Config(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    params.get(id).shape()
                )));
            }
            Ok(id)
        };
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let n = layer_names(l);
            layers.push(LayerIds {
                wq: get(&n[0], &[d, d])?,
                bq: get(&n[1], &[d])?,
                wk: get(&n[2], &[d, d])?,
                bk: get(&n[3], &[d])?,
                wv: get(&n[4], &[d, d])?,
                bv: get(&n[5], &[d])?,
                wo: get(&n[6], &[d, d])?,
                bo: get(&n[7], &[d])?,
                ln1_g: get(&n[8], &[d])?,
                ln1_b: get(&n[9], &[d])?,
                w1: get(&n[10], &[d, 4 * d])?,
                b1: get(&n[11], &[4 * d])?,
                w2: get(&n[12], &[4 * d, d])?,
                b2: get(&n[13], &[d])?,
                ln2_g: get(&n[14], &[d])?,
                ln2_b: get(&n[15], &[d])?,
            });
        }
        let ids = ModelIds {
            tok_emb: get("tok_emb", &[v, d])?,
            pos_emb: get("pos_emb", &[config.max_positions, d])?,
            emb_ln_g: get("emb_ln.g", &[d])?,
            emb_ln_b: get("emb_ln.b", &[d])?,
            edge_bias: get("edge_bias", &[EDGE_VOCAB, h])?,
            layers,
            tok_out_w: get("tok_out.w", &[d, v])?,
            tok_out_b: get("tok_out.b", &[v])?,
            edge_out_w: get("edge_out.w", &[h, EDGE_VOCAB])?,
            edge_out_b: get("edge_out.b", &[EDGE_VOCAB])?,
        };
        Ok(Model { config, params, ids })
    }

    /// Per-head bias blocks `[size, size]` from an edge-category matrix.
    fn initial_bias(&self, tape: &mut Tape<'_>, cats: &[u8], size: usize) -> Result<Vec<Var>, NumericsError> {
        let table = tape.param(self.ids.edge_bias);
        let ids: Vec<usize> = cats.iter().map(|&c| c as usize).collect();
        let emb = tape.embedding(table, &ids)?;
        (0..self.config.heads)
            .map(|h| {
                let col = tape.slice_cols(emb, h, 1)?;
                tape.reshape(col, &[size, size])
            })
            .collect()
    }

    /// Records the forward pass on `tape`, reading parameters by id from the
    /// tape's parameter set.
    pub fn forward_tape(&self, tape: &mut Tape<'_>, seq: &TokenSequence) -> Result<ForwardVars, NumericsError> {
        let cfg = &self.config;
        let s = seq.len();
        let heads = cfg.heads;
        let dk = cfg.head_dim();
        let tgt = seq.target_range();
        let src = seq.source_range();
        let m = seq.tgt_edges.size();
        let ms = seq.src_edges.size();
        if tgt.len() != m || src.len() != ms || seq.position_ids.len() != s {
            return Err(NumericsError::ShapeMismatch {
                op: "forward",
                lhs: vec![tgt.len(), src.len(), s],
                rhs: vec![m, ms, seq.position_ids.len()],
            });
        }

        let ids: Vec<usize> = seq.token_ids.iter().map(|&t| t as usize).collect();
        let pos: Vec<usize> = seq.position_ids.iter().map(|&p| p as usize).collect();
        let tok_emb = tape.param(self.ids.tok_emb);
        let pos_emb = tape.param(self.ids.pos_emb);
        let te = tape.embedding(tok_emb, &ids)?;
        let pe = tape.embedding(pos_emb, &pos)?;
        let h0 = tape.add(te, pe)?;
        let (g, b) = (tape.param(self.ids.emb_ln_g), tape.param(self.ids.emb_ln_b));
        let mut x = tape.layer_norm(h0, g, b)?;

        let tgt_b0 = if m > 0 {
            self.initial_bias(tape, seq.tgt_edges.as_slice(), m)?
        } else {
            Vec::new()
        };
        let src_b0 = if ms > 0 {
            self.initial_bias(tape, seq.src_edges.as_slice(), ms)?
        } else {
            Vec::new()
        };
        let (mut tgt_b, mut src_b) = (tgt_b0.clone(), src_b0.clone());
        let scale = 1.0 / (dk as f64).sqrt();
        let mut attention = Vec::with_capacity(cfg.layers);

        for layer in &self.ids.layers {
            let p = |tape: &mut Tape<'_>, id| tape.param(id);
            let (wq, bq) = (p(tape, layer.wq), p(tape, layer.bq));
            let (wk, bk) = (p(tape, layer.wk), p(tape, layer.bk));
            let (wv, bv) = (p(tape, layer.wv), p(tape, layer.bv));
            let q = tape.matmul(x, wq)?;
            let q = tape.add_row(q, bq)?;
            let k = tape.matmul(x, wk)?;
            let k = tape.add_row(k, bk)?;
            let v = tape.matmul(x, wv)?;
            let v = tape.add_row(v, bv)?;

            let mut outs = Vec::with_capacity(heads);
            let mut layer_attn = Vec::with_capacity(heads);
            let (mut next_tgt, mut next_src) = (Vec::with_capacity(heads), Vec::with_capacity(heads));
            for h in 0..heads {
                let qh = tape.slice_cols(q, h * dk, dk)?;
                let kh = tape.slice_cols(k, h * dk, dk)?;
                let vh = tape.slice_cols(v, h * dk, dk)?;
                let raw = tape.matmul_t(qh, kh)?;
                let mut scores = tape.scale(raw, scale);
                if m > 0 {
                    scores = tape.add_block(scores, tgt_b[h], tgt.start)?;
                }
                if ms > 0 {
                    scores = tape.add_block(scores, src_b[h], src.start)?;
                }
                let a = tape.softmax_rows(scores);
                if m > 0 {
                    next_tgt.push(tape.extract_block(a, tgt.start, m)?);
                }
                if ms > 0 {
                    next_src.push(tape.extract_block(a, src.start, ms)?);
                }
                outs.push(tape.matmul(a, vh)?);
                layer_attn.push(a);
            }
            attention.push(layer_attn);
            if cfg.bias_recursion {
                tgt_b = next_tgt;
                src_b = next_src;
            } else {
                // the edge head still reads the last layer's attention
                tgt_b = if std::ptr::eq(layer, self.ids.layers.last().expect("layers")) {
                    next_tgt
                } else {
                    tgt_b0.clone()
                };
                src_b = src_b0.clone();
            }

            let cat = tape.concat_cols(&outs)?;
            let (wo, bo) = (p(tape, layer.wo), p(tape, layer.bo));
            let o = tape.matmul(cat, wo)?;
            let o = tape.add_row(o, bo)?;
            let r = tape.add(x, o)?;
            let (g1, b1) = (p(tape, layer.ln1_g), p(tape, layer.ln1_b));
            let x1 = tape.layer_norm(r, g1, b1)?;
            let (w1, fb1) = (p(tape, layer.w1), p(tape, layer.b1));
            let f = tape.matmul(x1, w1)?;
            let f = tape.add_row(f, fb1)?;
            let f = tape.gelu(f);
            let (w2, fb2) = (p(tape, layer.w2), p(tape, layer.b2));
            let f = tape.matmul(f, w2)?;
            let f = tape.add_row(f, fb2)?;
            let r2 = tape.add(x1, f)?;
            let (g2, b2) = (p(tape, layer.ln2_g), p(tape, layer.ln2_b));
            x = tape.layer_norm(r2, g2, b2)?;
        }

        let (tw, tb) = (tape.param(self.ids.tok_out_w), tape.param(self.ids.tok_out_b));
        let logits = tape.matmul(x, tw)?;
        let token_logits = tape.add_row(logits, tb)?;

        let edge_logits = if m > 0 {
            // Attention probabilities are O(1/S); rescaling by S keeps the
            // head's input O(1) without changing the function class.
            let cols: Vec<Var> = tgt_b
                .iter()
                .map(|&blk| {
                    let scaled = tape.scale(blk, s as f64);
                    tape.reshape(scaled, &[m * m, 1])
                })
                .collect::<Result<_, _>>()?;
            let feats = tape.concat_cols(&cols)?;
            let (ew, eb) = (tape.param(self.ids.edge_out_w), tape.param(self.ids.edge_out_b));
            let e = tape.matmul(feats, ew)?;
            let e = tape.add_row(e, eb)?;
            tape.symmetrize_pairs(e, m)?
        } else {
            tape.input(Tensor::zeros(&[0, EDGE_VOCAB]))
        };
        Ok(ForwardVars {
            token_logits,
            edge_logits,
            attention,
        })
    }

    pub fn forward(&self, seq: &TokenSequence) -> Result<DenoiserOutput, NumericsError> {
        let mut tape = Tape::new(&self.params);
        let fv = self.forward_tape(&mut tape, seq)?;
        let m = seq.tgt_edges.size();
        let token_logits = tape.tensor(fv.token_logits);
        let edge_logits = Tensor::new(vec![m, m, EDGE_VOCAB], tape.value(fv.edge_logits).to_vec())?;
        Ok(DenoiserOutput {
            token_logits,
            edge_logits,
        })
    }
}

/// Randomly permutes the position ids of target slots; tokens, edges and all
/// other positions are unchanged. Returns the permutation applied
/// (slot `a` receives the position id previously at slot `perm[a]`).
pub fn permute_positions(seq: &TokenSequence, rng: &mut ChaCha8Rng) -> (TokenSequence, Vec<usize>) {
    let r = seq.target_range();
    let mut perm: Vec<usize> = (0..r.len()).collect();
    perm.shuffle(rng);
    let mut out = seq.clone();
    for (a, &p) in perm.iter().enumerate() {
        out.position_ids[r.start + a] = seq.position_ids[r.start + p];
    }
    (out, perm)
}

/// Node and edge distributions over clean categories from raw logits.
///
/// Node probabilities are a softmax over the node columns of the token head
/// excluding `[MASK]`; edge probabilities a softmax over the five bond
/// categories.
pub fn clean_prediction(vocab: &Vocabulary, seq: &TokenSequence, out: &DenoiserOutput) -> CleanPrediction {
    let v = out.token_logits.cols();
    let clean = vocab.node_categories() - 1;
    let base = vocab.node_base() as usize;
    let mut node_probs = Vec::with_capacity(seq.target_slots() * clean);
    for row in seq.target_range() {
        let mut r = out.token_logits.data()[row * v + base..row * v + base + clean].to_vec();
        softmax_in_place(&mut r);
        node_probs.extend(r);
    }
    let mut edge_probs = Vec::with_capacity(out.edge_logits.len() / EDGE_VOCAB * EDGE_CLEAN);
    for cell in out.edge_logits.data().chunks(EDGE_VOCAB) {
        let mut r = cell[..EDGE_CLEAN].to_vec();
        softmax_in_place(&mut r);
        edge_probs.extend(r);
    }
    CleanPrediction {
        node_categories: clean,
        node_probs,
        edge_probs,
    }
}

/// Adapter that lets the reverse chain query a model.
pub struct ModelPredictor<'a> {
    pub model: &'a Model,
    pub vocab: &'a Vocabulary,
}

impl CleanPredictor for ModelPredictor<'_> {
    fn predict_clean(&self, seq: &TokenSequence, _rng: &mut ChaCha8Rng) -> Result<CleanPrediction, DiffusionError> {
        let out = self.model.forward(seq)?;
        Ok(clean_prediction(self.vocab, seq, &out))
    }
}

/// Runs one reverse chain with the model. With `permute`, the target
/// position ids are shuffled once before the chain starts and kept for all
/// of its steps, so every call sees the same slot order.
#[allow(clippy::too_many_arguments)]
pub fn generate(
    model: &Model,
    vocab: &Vocabulary,
    schedule: &NoiseSchedule,
    seq: &TokenSequence,
    steps: u32,
    top_k: usize,
    permute: bool,
    rng: &mut ChaCha8Rng,
) -> Result<MolGraph, DiffusionError> {
    let start = if permute {
        permute_positions(seq, rng).0
    } else {
        seq.clone()
    };
    sample(&ModelPredictor { model, vocab }, vocab, schedule, &start, steps, top_k, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molgraph::{parse_smiles, AtomTable};
    use crate::vocab::{encode_instance, SequenceLayout, Target};
    use rand::SeedableRng;

    fn small_config(vocab: &Vocabulary, layout: &SequenceLayout) -> DenoiserConfig {
        DenoiserConfig {
            layers: 2,
            hidden: 16,
            heads: 2,
            max_positions: layout.max_positions(),
            vocab_size: vocab.size(),
            edge_vocab: EDGE_VOCAB,
            target_slots: layout.target_slots,
            bias_recursion: true,
        }
    }

    fn setup() -> (Vocabulary, SequenceLayout, TokenSequence) {
        let vocab = Vocabulary::build(["a small alcohol", "an ether"], 1, &AtomTable::default()).unwrap();
        let layout = SequenceLayout { max_text: 5, max_source: 0, target_slots: 5 };
        let g = parse_smiles("CCO").unwrap();
        let seq = encode_instance(&vocab, &layout, "a small alcohol", None, Target::Graph(&g)).unwrap();
        (vocab, layout, seq)
    }

    #[test]
    fn config_validation() {
        let (vocab, layout, _) = setup();
        let mut c = small_config(&vocab, &layout);
        c.heads = 3;
        assert!(matches!(c.validate(), Err(DenoiserError::Config(_))));
    }

    #[test]
    fn output_shapes_and_symmetry() {
        let (vocab, layout, seq) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = Model::new(small_config(&vocab, &layout), &mut rng).unwrap();
        let out = model.forward(&seq).unwrap();
        assert_eq!(out.token_logits.shape(), [seq.len(), vocab.size()]);
        assert_eq!(out.edge_logits.shape(), [5, 5, EDGE_VOCAB]);
        let e = out.edge_logits.data();
        for i in 0..5 {
            for j in 0..5 {
                for c in 0..EDGE_VOCAB {
                    assert_eq!(e[(i * 5 + j) * EDGE_VOCAB + c], e[(j * 5 + i) * EDGE_VOCAB + c]);
                }
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let (vocab, layout, seq) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = Model::new(small_config(&vocab, &layout), &mut rng).unwrap();
        let mut tape = Tape::new(&model.params);
        let fv = model.forward_tape(&mut tape, &seq).unwrap();
        for layer in &fv.attention {
            for &a in layer {
                for row in tape.value(a).chunks(seq.len()) {
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn mask_edge_row_differs_from_none() {
        let (vocab, layout, _) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = Model::new(small_config(&vocab, &layout), &mut rng).unwrap();
        let t = model.params.get(model.params.by_name("edge_bias").unwrap());
        let h = model.config.heads;
        assert_ne!(t.data()[..h], t.data()[5 * h..6 * h]);
    }

    #[test]
    fn single_position_permutation_is_identity() {
        let (vocab, _, _) = setup();
        let layout = SequenceLayout { max_text: 5, max_source: 0, target_slots: 1 };
        let seq = encode_instance(&vocab, &layout, "an ether", None, Target::Masked).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (p, perm) = permute_positions(&seq, &mut rng);
        assert_eq!(perm, [0]);
        assert_eq!(p, seq);
    }

    #[test]
    fn clean_prediction_rows_normalized() {
        let (vocab, layout, seq) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = Model::new(small_config(&vocab, &layout), &mut rng).unwrap();
        let pred = clean_prediction(&vocab, &seq, &model.forward(&seq).unwrap());
        assert_eq!(pred.slots(), 5);
        for a in 0..5 {
            assert!((pred.node(a).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for b in 0..5 {
                assert!((pred.edge(a, b).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn from_params_rejects_missing_tensor() {
        let (vocab, layout, _) = setup();
        let cfg = small_config(&vocab, &layout);
        assert!(matches!(Model::from_params(cfg, ParamSet::new()), Err(DenoiserError::Config(_))));
    }
}
