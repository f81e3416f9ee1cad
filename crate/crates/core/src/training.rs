//! Losses, the optimisation loop and checkpoints.
//!
//! One optimizer step consumes `batch_size × accumulation` instances and
//! applies the mean gradient, so accumulation is exactly equivalent to a
//! larger batch. Every instance draws its timestep, text mask and corruption
//! from a single ChaCha stream whose position is checkpointed, which makes
//! resumed runs reproduce uninterrupted ones bit for bit.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::denoiser::{DenoiserConfig, DenoiserError, DenoiserOutput, Model};
use crate::diffusion::{derive_seed, forward_sample, DiffusionError, NoiseSchedule};
use crate::numerics::{AdamW, AdamWConfig, CeItem, Grads, NumericsError, ParamSet, Tape, Tensor};
use crate::vocab::{Segment, SequenceLayout, TokenSequence, Vocabulary, EDGE_CLEAN, EDGE_MASK, EDGE_VOCAB};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("pretraining corpus is empty")]
    EmptyCorpus,
    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: u64, loss: f64 },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    /// Linear warm-up length in optimizer steps; 0 disables it.
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// `(first epoch, accumulation steps)`, epochs counted from 1.
    pub accumulation: Vec<(u32, u32)>,
    pub horizon: u32,
    pub text_mask_probability: f64,
    /// Masking rate for the masked-LM objective.
    pub mlm_probability: f64,
    pub seed: u64,
    pub max_epochs: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-5,
            warmup_steps: 0,
            weight_decay: 0.01,
            batch_size: 16,
            accumulation: vec![(1, 1), (4, 4), (16, 16), (64, 64)],
            horizon: 1000,
            text_mask_probability: 0.15,
            mlm_probability: 0.15,
            seed: 42,
            max_epochs: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.horizon == 0 {
            return bad("horizon must be positive");
        }
        for p in [self.text_mask_probability, self.mlm_probability] {
            if !(0.0..=1.0).contains(&p) {
                return bad("probabilities must lie in [0, 1]");
            }
        }
        if self.accumulation.is_empty() || self.accumulation[0].0 > 1 {
            return bad("accumulation schedule must start at epoch 1");
        }
        let ordered = self
            .accumulation
            .windows(2)
            .all(|w| w[0].0 < w[1].0 && w[0].1 <= w[1].1);
        if !ordered || self.accumulation.iter().any(|&(_, k)| k == 0) {
            return bad("accumulation steps must be positive and non-decreasing");
        }
        if self.lr.is_nan() || self.lr <= 0.0 {
            return bad("lr must be positive");
        }
        Ok(())
    }

    /// Accumulation factor in effect during `epoch` (1-based).
    pub fn accumulation_at(&self, epoch: u32) -> u32 {
        self.accumulation
            .iter()
            .take_while(|&&(e, _)| e <= epoch)
            .last()
            .map_or(1, |&(_, k)| k)
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.lr
        } else {
            self.lr * (step + 1) as f64 / self.warmup_steps as f64
        }
    }
}

/// Which positions are scored, per head.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossItems {
    pub node: Vec<CeItem>,
    pub edge: Vec<CeItem>,
    pub text: Vec<CeItem>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub node: f64,
    pub edge: f64,
    pub text: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.node + self.edge + self.text
    }
}

fn node_item(vocab: &Vocabulary, row: usize, id: u32) -> Result<CeItem, TrainError> {
    let target = vocab
        .node_category(id)
        .filter(|&c| c < vocab.node_mask_category())
        .ok_or_else(|| TrainError::ShapeMismatch(format!("token {id} at row {row} is not a clean node")))?;
    Ok(CeItem {
        row,
        start: vocab.node_base() as usize,
        len: vocab.node_categories() - 1,
        target,
    })
}

fn edge_item(m: usize, i: usize, j: usize, cat: u8) -> Result<CeItem, TrainError> {
    if cat as usize >= EDGE_CLEAN {
        return Err(TrainError::ShapeMismatch(format!("edge ({i},{j}) has no clean category")));
    }
    Ok(CeItem {
        row: i * m + j,
        start: 0,
        len: EDGE_CLEAN,
        target: cat as usize,
    })
}

fn text_item(vocab: &Vocabulary, row: usize, id: u32) -> CeItem {
    CeItem {
        row,
        start: 0,
        len: vocab.text_len(),
        target: id as usize,
    }
}

/// Diffusion objective: every target slot, every unordered target pair, and
/// the text positions whose token was replaced by `[MASK]` in `noisy`.
pub fn diffusion_items(vocab: &Vocabulary, clean: &TokenSequence, noisy: &TokenSequence) -> Result<LossItems, TrainError> {
    check_pair(clean, noisy)?;
    let mut items = LossItems::default();
    for row in clean.target_range() {
        items.node.push(node_item(vocab, row, clean.token_ids[row])?);
    }
    let m = clean.tgt_edges.size();
    for i in 0..m {
        for j in i + 1..m {
            items.edge.push(edge_item(m, i, j, clean.tgt_edges.get(i, j))?);
        }
    }
    for row in clean.text_range() {
        if noisy.token_ids[row] == vocab.mask_id() && clean.token_ids[row] != vocab.mask_id() {
            items.text.push(text_item(vocab, row, clean.token_ids[row]));
        }
    }
    Ok(items)
}

/// Masked-LM objective: only positions masked in `noisy` are scored.
pub fn mlm_items(vocab: &Vocabulary, clean: &TokenSequence, noisy: &TokenSequence) -> Result<LossItems, TrainError> {
    check_pair(clean, noisy)?;
    let mut items = LossItems::default();
    let mask = vocab.mask_id();
    for row in 0..clean.len() {
        if noisy.token_ids[row] != mask || clean.token_ids[row] == mask {
            continue;
        }
        match clean.segment_tags[row] {
            Segment::Text => items.text.push(text_item(vocab, row, clean.token_ids[row])),
            Segment::SourceGraph | Segment::TargetGraph => {
                items.node.push(node_item(vocab, row, clean.token_ids[row])?)
            }
        }
    }
    let m = clean.tgt_edges.size();
    for i in 0..m {
        for j in i + 1..m {
            if noisy.tgt_edges.get(i, j) as usize == EDGE_MASK {
                items.edge.push(edge_item(m, i, j, clean.tgt_edges.get(i, j))?);
            }
        }
    }
    Ok(items)
}

fn check_pair(clean: &TokenSequence, noisy: &TokenSequence) -> Result<(), TrainError> {
    if clean.len() != noisy.len() || clean.tgt_edges.size() != noisy.tgt_edges.size() {
        return Err(TrainError::ShapeMismatch(format!(
            "clean sequence {} / {} slots vs noisy {} / {}",
            clean.len(),
            clean.tgt_edges.size(),
            noisy.len(),
            noisy.tgt_edges.size()
        )));
    }
    Ok(())
}

fn ce_sum(logits: &Tensor, items: &[CeItem]) -> Result<f64, TrainError> {
    let cols = logits.cols();
    let mut total = 0.0;
    for it in items {
        if it.row >= logits.rows() || it.start + it.len > cols {
            return Err(TrainError::ShapeMismatch(format!("loss item {it:?} outside logits")));
        }
        let row = &logits.data()[it.row * cols + it.start..it.row * cols + it.start + it.len];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        total += lse - row[it.target];
    }
    Ok(total)
}

/// Evaluates the three loss terms on precomputed logits.
pub fn loss_value(out: &DenoiserOutput, items: &LossItems) -> Result<LossParts, TrainError> {
    let m2 = out.edge_logits.len() / EDGE_VOCAB;
    let edges = Tensor::new(vec![m2, EDGE_VOCAB], out.edge_logits.data().to_vec())?;
    Ok(LossParts {
        node: ce_sum(&out.token_logits, &items.node)?,
        edge: ce_sum(&edges, &items.edge)?,
        text: ce_sum(&out.token_logits, &items.text)?,
    })
}

/// Node and edge terms of the diffusion objective (no text term).
pub fn diffusion_loss(vocab: &Vocabulary, out: &DenoiserOutput, clean: &TokenSequence) -> Result<f64, TrainError> {
    let items = diffusion_items(vocab, clean, clean)?;
    let parts = loss_value(out, &LossItems { text: Vec::new(), ..items })?;
    Ok(parts.node + parts.edge)
}

/// Forward, loss and gradient for one prepared instance.
pub fn instance_gradients(
    model: &Model,
    params: &ParamSet,
    noisy: &TokenSequence,
    items: &LossItems,
) -> Result<(Grads, LossParts), TrainError> {
    let mut tape = Tape::new(params);
    let fv = model.forward_tape(&mut tape, noisy)?;
    let node = tape.cross_entropy(fv.token_logits, &items.node)?;
    let edge = tape.cross_entropy(fv.edge_logits, &items.edge)?;
    let text = tape.cross_entropy(fv.token_logits, &items.text)?;
    let parts = LossParts {
        node: tape.value(node)[0],
        edge: tape.value(edge)[0],
        text: tape.value(text)[0],
    };
    let ne = tape.add(node, edge)?;
    let total = tape.add(ne, text)?;
    Ok((tape.backward(total)?, parts))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Objective {
    Diffusion,
    MaskedLm,
}

/// A corrupted instance together with the positions its loss scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub noisy: TokenSequence,
    pub items: LossItems,
}

fn mask_text(seq: &mut TokenSequence, vocab: &Vocabulary, p: f64, rng: &mut ChaCha8Rng) {
    for row in seq.text_range() {
        let draw = rng.random::<f64>();
        if seq.token_ids[row] != vocab.sep_id() && draw < p {
            seq.token_ids[row] = vocab.mask_id();
        }
    }
}

/// Draws the corruption for one training instance.
pub fn prepare(
    clean: &TokenSequence,
    vocab: &Vocabulary,
    config: &TrainConfig,
    objective: Objective,
    rng: &mut ChaCha8Rng,
) -> Result<Prepared, TrainError> {
    match objective {
        Objective::Diffusion => {
            let schedule = NoiseSchedule::new(config.horizon)?;
            let t = rng.random_range(1..=config.horizon);
            let mut noisy = forward_sample(clean, vocab, &schedule, t, rng)?;
            mask_text(&mut noisy, vocab, config.text_mask_probability, rng);
            let items = diffusion_items(vocab, clean, &noisy)?;
            Ok(Prepared { noisy, items })
        }
        Objective::MaskedLm => {
            let p = config.mlm_probability;
            let mut noisy = clean.clone();
            for row in 0..clean.len() {
                let draw = rng.random::<f64>();
                if clean.token_ids[row] != vocab.sep_id() && draw < p {
                    noisy.token_ids[row] = vocab.mask_id();
                }
            }
            let m = clean.tgt_edges.size();
            for i in 0..m {
                for j in i + 1..m {
                    if rng.random::<f64>() < p {
                        noisy.tgt_edges.set(i, j, EDGE_MASK as u8);
                    }
                }
            }
            let items = mlm_items(vocab, clean, &noisy)?;
            Ok(Prepared { noisy, items })
        }
    }
}

/// Mean gradient and mean loss parts over a group of prepared instances.
pub fn group_gradients(model: &Model, group: &[Prepared]) -> Result<(Grads, LossParts), TrainError> {
    let mut grads = Grads::zeros_like(&model.params);
    let mut parts = LossParts::default();
    for p in group {
        let (g, l) = instance_gradients(model, &model.params, &p.noisy, &p.items)?;
        grads.add_assign(&g);
        parts.node += l.node;
        parts.edge += l.edge;
        parts.text += l.text;
    }
    let n = group.len().max(1) as f64;
    grads.scale(1.0 / n);
    parts.node /= n;
    parts.edge /= n;
    parts.text /= n;
    Ok((grads, parts))
}

/// One JSONL trace line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub node_loss: f64,
    pub edge_loss: f64,
    pub text_loss: f64,
}

/// Position in the data stream; everything needed to resume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    /// Current epoch, 1-based.
    pub epoch: u32,
    /// Index into the current epoch's shuffled order.
    pub cursor: usize,
    pub rng_seed: String,
    pub rng_stream: u64,
    /// Stored as a decimal string because JSON numbers cannot hold a u128.
    pub rng_word_pos: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<[u8; 32]> {
    if s.len() != 64 {
        return None;
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).ok()?;
    }
    Some(out)
}

pub struct Trainer {
    pub model: Model,
    pub optimizer: AdamW,
    pub config: TrainConfig,
    pub objective: Objective,
    pub step: u64,
    pub epoch: u32,
    pub cursor: usize,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    order_epoch: Option<(u32, usize)>,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig, objective: Objective) -> Result<Self, TrainError> {
        config.validate()?;
        let optimizer = AdamW::new(
            AdamWConfig {
                lr: config.lr,
                weight_decay: config.weight_decay,
                ..AdamWConfig::default()
            },
            &model.params,
        );
        let rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0x0074_7261_696e));
        Ok(Trainer {
            model,
            optimizer,
            config,
            objective,
            step: 0,
            epoch: 1,
            cursor: 0,
            rng,
            order: Vec::new(),
            order_epoch: None,
        })
    }

    pub fn state(&self) -> TrainState {
        TrainState {
            step: self.step,
            epoch: self.epoch,
            cursor: self.cursor,
            rng_seed: hex(&self.rng.get_seed()),
            rng_stream: self.rng.get_stream(),
            rng_word_pos: self.rng.get_word_pos().to_string(),
        }
    }

    /// Restores a trainer from checkpoint contents.
    pub fn resume(
        model: Model,
        optimizer: AdamW,
        config: TrainConfig,
        objective: Objective,
        state: &TrainState,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        let seed = unhex(&state.rng_seed).ok_or_else(|| TrainError::Config("bad rng seed".into()))?;
        let pos: u128 = state
            .rng_word_pos
            .parse()
            .map_err(|_| TrainError::Config("bad rng position".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(state.rng_stream);
        rng.set_word_pos(pos);
        Ok(Trainer {
            model,
            optimizer,
            config,
            objective,
            step: state.step,
            epoch: state.epoch,
            cursor: state.cursor,
            rng,
            order: Vec::new(),
            order_epoch: None,
        })
    }

    fn epoch_order(&mut self, n: usize) -> &[usize] {
        if self.order_epoch != Some((self.epoch, n)) {
            let mut order: Vec<usize> = (0..n).collect();
            let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, u64::from(self.epoch)));
            order.shuffle(&mut shuffle_rng);
            self.order = order;
            self.order_epoch = Some((self.epoch, n));
        }
        &self.order
    }

    /// Instances consumed by the next optimizer step.
    pub fn instances_per_step(&self) -> usize {
        self.config.batch_size * self.config.accumulation_at(self.epoch) as usize
    }

    /// Draws the next group of instances (crossing epoch boundaries) and
    /// their corruption.
    pub fn next_group(&mut self, data: &[TokenSequence], vocab: &Vocabulary) -> Result<Vec<Prepared>, TrainError> {
        if data.is_empty() {
            return Err(match self.objective {
                Objective::Diffusion => TrainError::EmptyDataset,
                Objective::MaskedLm => TrainError::EmptyCorpus,
            });
        }
        let count = self.instances_per_step();
        let mut group = Vec::with_capacity(count);
        for _ in 0..count {
            if self.cursor >= data.len() {
                self.epoch += 1;
                self.cursor = 0;
            }
            let cursor = self.cursor;
            let idx = self.epoch_order(data.len())[cursor];
            self.cursor += 1;
            let (config, objective) = (self.config.clone(), self.objective);
            group.push(prepare(&data[idx], vocab, &config, objective, &mut self.rng)?);
        }
        Ok(group)
    }

    /// Applies a mean gradient with the scheduled learning rate.
    pub fn apply(&mut self, grads: &Grads) -> Result<(), TrainError> {
        self.optimizer.config.lr = self.config.lr_at(self.step);
        self.optimizer.update(&mut self.model.params, grads)?;
        self.step += 1;
        Ok(())
    }

    /// One optimizer step.
    pub fn train_step(&mut self, data: &[TokenSequence], vocab: &Vocabulary) -> Result<StepRecord, TrainError> {
        let group = self.next_group(data, vocab)?;
        let (grads, parts) = group_gradients(&self.model, &group)?;
        let loss = parts.total();
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { step: self.step, loss });
        }
        self.apply(&grads)?;
        Ok(StepRecord {
            step: self.step,
            loss,
            node_loss: parts.node,
            edge_loss: parts.edge,
            text_loss: parts.text,
        })
    }

    /// Runs until `max_steps` optimizer steps or `max_epochs` epochs, calling
    /// `on_step` after every step.
    pub fn run<F>(&mut self, data: &[TokenSequence], vocab: &Vocabulary, max_steps: u64, mut on_step: F) -> Result<Vec<StepRecord>, TrainError>
    where
        F: FnMut(&Trainer, &StepRecord) -> Result<(), TrainError>,
    {
        let mut trace = Vec::new();
        while self.step < max_steps && self.epoch <= self.config.max_epochs {
            let rec = self.train_step(data, vocab)?;
            on_step(self, &rec)?;
            trace.push(rec);
        }
        Ok(trace)
    }
}

/// Fresh model plus trainer for the diffusion objective.
pub fn train_loop(
    model: Model,
    data: &[TokenSequence],
    vocab: &Vocabulary,
    config: TrainConfig,
    max_steps: u64,
) -> Result<(Model, Vec<StepRecord>), TrainError> {
    let mut trainer = Trainer::new(model, config, Objective::Diffusion)?;
    let trace = trainer.run(data, vocab, max_steps, |_, _| Ok(()))?;
    Ok((trainer.model, trace))
}

/// Masked-LM pretraining over mixed text-only, graph-only and paired records.
pub fn pretrain_mlm(
    model: Model,
    corpus: &[TokenSequence],
    vocab: &Vocabulary,
    config: TrainConfig,
    max_steps: u64,
) -> Result<(Model, Vec<StepRecord>), TrainError> {
    let mut trainer = Trainer::new(model, config, Objective::MaskedLm)?;
    let trace = trainer.run(corpus, vocab, max_steps, |_, _| Ok(()))?;
    Ok((trainer.model, trace))
}

// ---------------------------------------------------------------------------
// Checkpoints

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GDIFFCK\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    VersionUnsupported(u32),
    #[error("vocabulary digest mismatch: checkpoint {found}, expected {expected}")]
    DigestMismatch { expected: String, found: String },
    #[error("checkpoint truncated")]
    TruncatedFile,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct OptimizerHeader {
    config: AdamWConfig,
    step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    model: DenoiserConfig,
    layout: Option<SequenceLayout>,
    train: Option<TrainConfig>,
    objective: Option<Objective>,
    vocab_digest: String,
    state: Option<TrainState>,
    optimizer: Option<OptimizerHeader>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub vocab_digest: String,
    /// Sequence layout the model was trained with.
    pub layout: Option<SequenceLayout>,
    pub train: Option<TrainConfig>,
    pub objective: Option<Objective>,
    pub state: Option<TrainState>,
    pub optimizer: Option<AdamW>,
}

impl Checkpoint {
    pub fn from_trainer(trainer: &Trainer, vocab_digest: &str, layout: Option<SequenceLayout>) -> Self {
        Checkpoint {
            model: trainer.model.clone(),
            vocab_digest: vocab_digest.to_string(),
            layout,
            train: Some(trainer.config.clone()),
            objective: Some(trainer.objective),
            state: Some(trainer.state()),
            optimizer: Some(trainer.optimizer.clone()),
        }
    }

    pub fn into_trainer(self) -> Result<Trainer, TrainError> {
        let (Some(cfg), Some(obj), Some(state), Some(opt)) = (self.train, self.objective, self.state, self.optimizer)
        else {
            return Err(TrainError::Config("checkpoint has no training state".into()));
        };
        Trainer::resume(self.model, opt, cfg, obj, &state)
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>, CheckpointError> {
    let mut tensors = Vec::new();
    let mut blobs: Vec<&[f64]> = Vec::new();
    let mut offset = 0u64;
    let mut push = |name: String, t: &'_ Tensor, tensors: &mut Vec<TensorEntry>| {
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset,
        });
        offset += 8 * t.len() as u64;
    };
    for p in ck.model.params.iter() {
        push(p.name.clone(), &p.value, &mut tensors);
        blobs.push(p.value.data());
    }
    if let Some(opt) = &ck.optimizer {
        for (p, m) in ck.model.params.iter().zip(&opt.m) {
            push(format!("adam.m.{}", p.name), m, &mut tensors);
            blobs.push(m.data());
        }
        for (p, v) in ck.model.params.iter().zip(&opt.v) {
            push(format!("adam.v.{}", p.name), v, &mut tensors);
            blobs.push(v.data());
        }
    }
    let header = Header {
        model: ck.model.config.clone(),
        layout: ck.layout,
        train: ck.train.clone(),
        objective: ck.objective,
        vocab_digest: ck.vocab_digest.clone(),
        state: ck.state.clone(),
        optimizer: ck.optimizer.as_ref().map(|o| OptimizerHeader {
            config: o.config,
            step: o.step,
        }),
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + json.len() + 8 * blobs.iter().map(|b| b.len()).sum::<usize>());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for b in blobs {
        for x in b {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses a checkpoint; when `expected_digest` is given it must match.
pub fn decode_checkpoint(bytes: &[u8], expected_digest: Option<&str>) -> Result<Checkpoint, CheckpointError> {
    if bytes.len() < 8 {
        return Err(if CHECKPOINT_MAGIC.starts_with(bytes) {
            CheckpointError::TruncatedFile
        } else {
            CheckpointError::BadMagic
        });
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let take = |from: usize, n: usize| bytes.get(from..from + n).ok_or(CheckpointError::TruncatedFile);
    let version = u32::from_le_bytes(take(8, 4)?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::VersionUnsupported(version));
    }
    let hlen = u64::from_le_bytes(take(12, 8)?.try_into().expect("8 bytes")) as usize;
    let header: Header = serde_json::from_slice(take(20, hlen)?)?;
    if let Some(expected) = expected_digest {
        if expected != header.vocab_digest {
            return Err(CheckpointError::DigestMismatch {
                expected: expected.to_string(),
                found: header.vocab_digest,
            });
        }
    }
    let data_start = 20 + hlen;
    let mut tensors = std::collections::HashMap::new();
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let raw = take(data_start + e.offset as usize, 8 * n)?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(e.shape.clone(), values).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        tensors.insert(e.name.clone(), t);
    }
    let mut params = ParamSet::new();
    let mut names = Vec::new();
    for e in header.tensors.iter().filter(|e| !e.name.starts_with("adam.")) {
        params.add(e.name.clone(), tensors[&e.name].clone());
        names.push(e.name.clone());
    }
    let model = Model::from_params(header.model.clone(), params).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let optimizer = match header.optimizer {
        None => None,
        Some(oh) => {
            let mut get = |prefix: &str| -> Result<Vec<Tensor>, CheckpointError> {
                names
                    .iter()
                    .map(|n| {
                        tensors
                            .remove(&format!("{prefix}{n}"))
                            .ok_or_else(|| CheckpointError::Malformed(format!("missing {prefix}{n}")))
                    })
                    .collect()
            };
            let m = get("adam.m.")?;
            let v = get("adam.v.")?;
            Some(AdamW {
                config: oh.config,
                step: oh.step,
                m,
                v,
            })
        }
    };
    Ok(Checkpoint {
        model,
        vocab_digest: header.vocab_digest,
        layout: header.layout,
        train: header.train,
        objective: header.objective,
        state: header.state,
        optimizer,
    })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<(), CheckpointError> {
    let bytes = encode_checkpoint(ck)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, expected_digest: Option<&str>) -> Result<Checkpoint, CheckpointError> {
    decode_checkpoint(&fs::read(path)?, expected_digest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molgraph::{parse_smiles, AtomTable};
    use crate::vocab::{encode_instance, SequenceLayout, Target};

    fn setup() -> (Vocabulary, SequenceLayout, Vec<TokenSequence>) {
        let vocab = Vocabulary::build(["an alcohol", "an ether"], 1, &AtomTable::default()).unwrap();
        let layout = SequenceLayout { max_text: 4, max_source: 0, target_slots: 4 };
        let data = [("an alcohol", "CCO"), ("an ether", "COC")]
            .iter()
            .map(|(t, s)| {
                let g = parse_smiles(s).unwrap();
                encode_instance(&vocab, &layout, t, None, Target::Graph(&g)).unwrap()
            })
            .collect();
        (vocab, layout, data)
    }

    fn model(vocab: &Vocabulary, layout: &SequenceLayout, seed: u64) -> Model {
        let cfg = DenoiserConfig {
            layers: 1,
            hidden: 8,
            heads: 2,
            max_positions: layout.max_positions(),
            vocab_size: vocab.size(),
            edge_vocab: EDGE_VOCAB,
            target_slots: layout.target_slots,
            bias_recursion: true,
        };
        Model::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn accumulation_schedule_lookup() {
        let c = TrainConfig::default();
        assert_eq!(c.accumulation_at(1), 1);
        assert_eq!(c.accumulation_at(3), 1);
        assert_eq!(c.accumulation_at(4), 4);
        assert_eq!(c.accumulation_at(20), 16);
        assert_eq!(c.accumulation_at(1000), 64);
        let bad = TrainConfig {
            accumulation: vec![(1, 4), (2, 1)],
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn uniform_logits_give_count_times_ln_k() {
        let (vocab, _, data) = setup();
        let seq = &data[0];
        let out = DenoiserOutput {
            token_logits: Tensor::zeros(&[seq.len(), vocab.size()]),
            edge_logits: Tensor::zeros(&[4, 4, EDGE_VOCAB]),
        };
        let clean_nodes = (vocab.node_categories() - 1) as f64;
        let want = 4.0 * clean_nodes.ln() + 6.0 * (EDGE_CLEAN as f64).ln();
        assert!((diffusion_loss(&vocab, &out, seq).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn perfect_logits_give_zero_loss() {
        let (vocab, _, data) = setup();
        let seq = &data[1];
        let v = vocab.size();
        let mut tl = Tensor::zeros(&[seq.len(), v]);
        for row in seq.target_range() {
            tl.data_mut()[row * v + seq.token_ids[row] as usize] = 1e4;
        }
        let mut el = Tensor::zeros(&[4, 4, EDGE_VOCAB]);
        for i in 0..4 {
            for j in 0..4 {
                el.data_mut()[(i * 4 + j) * EDGE_VOCAB + seq.tgt_edges.get(i, j) as usize] = 1e4;
            }
        }
        let out = DenoiserOutput { token_logits: tl, edge_logits: el };
        assert_eq!(diffusion_loss(&vocab, &out, seq).unwrap(), 0.0);
    }

    #[test]
    fn mlm_with_zero_probability_scores_nothing() {
        let (vocab, _, data) = setup();
        let cfg = TrainConfig { mlm_probability: 0.0, ..TrainConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = prepare(&data[0], &vocab, &cfg, Objective::MaskedLm, &mut rng).unwrap();
        assert_eq!(p.items, LossItems::default());
        assert_eq!(p.noisy, data[0]);
    }

    #[test]
    fn text_mask_zero_has_no_text_items() {
        let (vocab, _, data) = setup();
        let cfg = TrainConfig { text_mask_probability: 0.0, ..TrainConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let p = prepare(&data[0], &vocab, &cfg, Objective::Diffusion, &mut rng).unwrap();
            assert!(p.items.text.is_empty());
            assert_eq!(p.items.node.len(), 4);
            assert_eq!(p.items.edge.len(), 6);
        }
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let (vocab, layout, _) = setup();
        let r = train_loop(model(&vocab, &layout, 1), &[], &vocab, TrainConfig::default(), 3);
        assert!(matches!(r, Err(TrainError::EmptyDataset)));
        let r = pretrain_mlm(model(&vocab, &layout, 1), &[], &vocab, TrainConfig::default(), 3);
        assert!(matches!(r, Err(TrainError::EmptyCorpus)));
    }

    #[test]
    fn checkpoint_errors() {
        let (vocab, layout, _) = setup();
        let ck = Checkpoint {
            model: model(&vocab, &layout, 2),
            vocab_digest: vocab.digest(),
            layout: Some(layout),
            train: None,
            objective: None,
            state: None,
            optimizer: None,
        };
        let bytes = encode_checkpoint(&ck).unwrap();
        assert_eq!(decode_checkpoint(&bytes, Some(&vocab.digest())).unwrap(), ck);
        assert!(matches!(decode_checkpoint(b"NOTACKPT....", None), Err(CheckpointError::BadMagic)));
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 3], None),
            Err(CheckpointError::TruncatedFile)
        ));
        assert!(matches!(
            decode_checkpoint(&bytes, Some("other")),
            Err(CheckpointError::DigestMismatch { .. })
        ));
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert!(matches!(decode_checkpoint(&v2, None), Err(CheckpointError::VersionUnsupported(2))));
    }

    #[test]
    fn short_run_reduces_loss_and_is_deterministic() {
        let (vocab, layout, data) = setup();
        let cfg = TrainConfig {
            lr: 1e-2,
            batch_size: 2,
            accumulation: vec![(1, 1)],
            ..TrainConfig::default()
        };
        let (_, a) = train_loop(model(&vocab, &layout, 3), &data, &vocab, cfg.clone(), 40).unwrap();
        let (_, b) = train_loop(model(&vocab, &layout, 3), &data, &vocab, cfg, 40).unwrap();
        assert_eq!(a, b);
        let head: f64 = a[..5].iter().map(|r| r.loss).sum();
        let tail: f64 = a[35..].iter().map(|r| r.loss).sum();
        assert!(tail < head, "{head} -> {tail}");
    }
}
