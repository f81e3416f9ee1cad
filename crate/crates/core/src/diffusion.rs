//! Absorbing-state discrete diffusion over target nodes and edges.
//!
//! Every clean category decays into `[MASK]` with rate β(t) = 1/(T−t+1), so
//! a category survives to step t with probability (T−t)/T. The reverse
//! process is x0-parameterized: the model predicts clean categories and the
//! step-(t−k) distribution follows from re-noising that prediction.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::molgraph::MolGraph;
use crate::numerics::NumericsError;
use crate::vocab::{decode_graph, DecodeError, TokenSequence, Vocabulary, EDGE_CLEAN, EDGE_MASK};

pub const DEFAULT_HORIZON: u32 = 1000;
pub const DEFAULT_TOP_K: usize = 15;

#[derive(Debug, Error, PartialEq)]
pub enum DiffusionError {
    #[error("diffusion horizon must be positive")]
    ZeroHorizon,
    #[error("step {t} outside 1..={horizon}")]
    StepOutOfRange { t: u32, horizon: u32 },
    #[error("stride {k} exceeds step {t}")]
    StrideTooLarge { k: u32, t: u32 },
    #[error("stride must be at least 1")]
    ZeroStride,
    #[error("mask index {z} outside vocabulary of {k}")]
    MaskOutOfRange { z: usize, k: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("top_k must be at least 1")]
    InvalidTopK,
    #[error("steps must lie in 1..={horizon}, got {steps}")]
    InvalidSteps { steps: u32, horizon: u32 },
    #[error("degenerate distribution")]
    Degenerate,
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

type Result<T> = std::result::Result<T, DiffusionError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoiseSchedule {
    horizon: u32,
}

impl NoiseSchedule {
    pub fn new(horizon: u32) -> Result<Self> {
        if horizon == 0 {
            return Err(DiffusionError::ZeroHorizon);
        }
        Ok(NoiseSchedule { horizon })
    }

    pub fn horizon(&self) -> u32 {
        self.horizon
    }

    fn check(&self, t: u32) -> Result<()> {
        if t == 0 || t > self.horizon {
            return Err(DiffusionError::StepOutOfRange { t, horizon: self.horizon });
        }
        Ok(())
    }

    pub fn beta(&self, t: u32) -> Result<f64> {
        self.check(t)?;
        Ok(1.0 / f64::from(self.horizon - t + 1))
    }

    /// Probability that a clean category is still unmasked at step t.
    pub fn survival(&self, t: u32) -> f64 {
        f64::from(self.horizon - t.min(self.horizon)) / f64::from(self.horizon)
    }

    pub fn mask_probability(&self, t: u32) -> f64 {
        1.0 - self.survival(t)
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule { horizon: DEFAULT_HORIZON }
    }
}

/// Row-stochastic K×K matrix with absorbing index `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    k: usize,
    z: usize,
    entries: Vec<f64>,
}

impl TransitionMatrix {
    pub fn identity(k: usize, z: usize) -> Self {
        let mut entries = vec![0.0; k * k];
        for i in 0..k {
            entries[i * k + i] = 1.0;
        }
        TransitionMatrix { k, z, entries }
    }

    /// Single-step kernel Q^t.
    pub fn step(schedule: &NoiseSchedule, t: u32, k: usize, z: usize) -> Result<Self> {
        let beta = schedule.beta(t)?;
        if z >= k {
            return Err(DiffusionError::MaskOutOfRange { z, k });
        }
        let mut q = Self::identity(k, z);
        for i in (0..k).filter(|&i| i != z) {
            q.entries[i * k + i] = 1.0 - beta;
            q.entries[i * k + z] = beta;
        }
        Ok(q)
    }

    /// Numeric product Q^{from+1} ⋯ Q^{to}; the identity when `from == to`.
    pub fn product(schedule: &NoiseSchedule, from: u32, to: u32, k: usize, z: usize) -> Result<Self> {
        let mut acc = Self::identity(k, z);
        for t in from + 1..=to {
            acc = acc.matmul(&Self::step(schedule, t, k, z)?);
        }
        Ok(acc)
    }

    /// Cumulative kernel Q̄^t = Q^1 ⋯ Q^t.
    pub fn cumulative(schedule: &NoiseSchedule, t: u32, k: usize, z: usize) -> Result<Self> {
        Self::product(schedule, 0, t, k, z)
    }

    pub fn matmul(&self, other: &TransitionMatrix) -> TransitionMatrix {
        let k = self.k;
        let mut entries = vec![0.0; k * k];
        for i in 0..k {
            for l in 0..k {
                let a = self.entries[i * k + l];
                if a != 0.0 {
                    for j in 0..k {
                        entries[i * k + j] += a * other.entries[l * k + j];
                    }
                }
            }
        }
        TransitionMatrix { k, z: self.z, entries }
    }

    pub fn size(&self) -> usize {
        self.k
    }

    pub fn mask_index(&self) -> usize {
        self.z
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.k + j]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.entries.chunks(self.k).map(|r| r.iter().sum()).collect()
    }
}

/// Categorical distribution over a fixed vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalDist {
    pub probs: Vec<f64>,
}

impl CategoricalDist {
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Result<usize> {
        let w = WeightedIndex::new(&self.probs).map_err(|_| DiffusionError::Degenerate)?;
        Ok(w.sample(rng))
    }
}

/// Keeps the `top_k` largest entries (earlier index wins ties), zeroes the
/// rest and renormalizes.
pub fn truncate_top_k(probs: &[f64], top_k: usize) -> Result<Vec<f64>> {
    if top_k == 0 {
        return Err(DiffusionError::InvalidTopK);
    }
    if top_k >= probs.len() {
        let sum: f64 = probs.iter().sum();
        return Ok(probs.iter().map(|p| p / sum).collect());
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut out = vec![0.0; probs.len()];
    let mut sum = 0.0;
    for &i in &order[..top_k] {
        out[i] = probs[i];
        sum += probs[i];
    }
    if sum <= 0.0 || !sum.is_finite() {
        return Err(DiffusionError::Degenerate);
    }
    for p in &mut out {
        *p /= sum;
    }
    Ok(out)
}

/// x0-parameterized posterior over categories at step t−k.
///
/// `p_hat` covers the full vocabulary of size K (mask index `z` included; its
/// entry is ignored). The result has length K.
pub fn posterior(x_t: usize, z: usize, p_hat: &[f64], t: u32, k: u32) -> Result<CategoricalDist> {
    let n = p_hat.len();
    if z >= n || x_t >= n {
        return Err(DiffusionError::MaskOutOfRange { z, k: n });
    }
    if k == 0 {
        return Err(DiffusionError::ZeroStride);
    }
    if k > t {
        return Err(DiffusionError::StrideTooLarge { k, t });
    }
    let mut probs = vec![0.0; n];
    if x_t != z {
        probs[x_t] = 1.0;
        return Ok(CategoricalDist { probs });
    }
    let clean: f64 = p_hat.iter().enumerate().filter(|&(j, _)| j != z).map(|(_, p)| p).sum();
    let unmask = f64::from(k) / f64::from(t);
    for (j, p) in p_hat.iter().enumerate() {
        if j != z {
            probs[j] = unmask * p / clean;
        }
    }
    probs[z] = f64::from(t - k) / f64::from(t);
    Ok(CategoricalDist { probs })
}

/// Corrupts target nodes and the upper edge triangle (mirrored), each masked
/// independently with probability t/T.
pub fn forward_sample(
    clean: &TokenSequence,
    vocab: &Vocabulary,
    schedule: &NoiseSchedule,
    t: u32,
    rng: &mut ChaCha8Rng,
) -> Result<TokenSequence> {
    schedule.check(t)?;
    let p = schedule.mask_probability(t);
    let mut out = clean.clone();
    for i in clean.target_range() {
        if rng.random::<f64>() < p {
            out.token_ids[i] = vocab.mask_id();
        }
    }
    let m = clean.tgt_edges.size();
    for i in 0..m {
        for j in i + 1..m {
            if rng.random::<f64>() < p {
                out.tgt_edges.set(i, j, EDGE_MASK as u8);
            }
        }
    }
    Ok(out)
}

/// Clean-category distributions predicted for every target slot and pair.
#[derive(Debug, Clone, PartialEq)]
pub struct CleanPrediction {
    /// Number of clean node categories (atoms and `[EMPTY]`, no `[MASK]`).
    pub node_categories: usize,
    /// `[m, node_categories]`, rows sum to 1.
    pub node_probs: Vec<f64>,
    /// `[m, m, EDGE_CLEAN]`, rows sum to 1.
    pub edge_probs: Vec<f64>,
}

impl CleanPrediction {
    pub fn slots(&self) -> usize {
        self.node_probs.len() / self.node_categories.max(1)
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.node_probs[i * self.node_categories..(i + 1) * self.node_categories]
    }

    pub fn edge(&self, i: usize, j: usize) -> &[f64] {
        let m = self.slots();
        let at = (i * m + j) * EDGE_CLEAN;
        &self.edge_probs[at..at + EDGE_CLEAN]
    }
}

/// Anything that predicts clean target categories from a corrupted sequence.
pub trait CleanPredictor {
    fn predict_clean(&self, seq: &TokenSequence, rng: &mut ChaCha8Rng) -> Result<CleanPrediction>;
}

fn masked_draw(p_hat: &[f64], t: u32, k: u32, top_k: usize, rng: &mut ChaCha8Rng) -> Result<Option<usize>> {
    let truncated = truncate_top_k(p_hat, top_k)?;
    let mut full = truncated;
    let z = full.len();
    full.push(0.0);
    let post = posterior(z, z, &full, t, k)?;
    let draw = post.sample(rng)?;
    Ok((draw != z).then_some(draw))
}

/// One reverse jump from step t to t−k. Unmasked entries are copied; each
/// masked node and upper-triangle edge is drawn from the top-k truncated
/// posterior, and edges are mirrored.
pub fn reverse_step(
    state: &TokenSequence,
    vocab: &Vocabulary,
    pred: &CleanPrediction,
    t: u32,
    k: u32,
    top_k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TokenSequence> {
    let m = state.tgt_edges.size();
    let clean_nodes = vocab.node_categories() - 1;
    if pred.node_categories != clean_nodes
        || pred.node_probs.len() != m * clean_nodes
        || pred.edge_probs.len() != m * m * EDGE_CLEAN
        || state.target_range().len() != m
    {
        return Err(DiffusionError::ShapeMismatch(format!(
            "prediction for {} slots x {} categories, state has {} slots",
            pred.slots(),
            pred.node_categories,
            m
        )));
    }
    if k == 0 {
        return Err(DiffusionError::ZeroStride);
    }
    if k > t {
        return Err(DiffusionError::StrideTooLarge { k, t });
    }
    let mut out = state.clone();
    let base = state.target_range().start;
    for a in 0..m {
        if state.token_ids[base + a] != vocab.mask_id() {
            continue;
        }
        if let Some(c) = masked_draw(pred.node(a), t, k, top_k, rng)? {
            out.token_ids[base + a] = vocab.node_token(c);
        }
    }
    for i in 0..m {
        for j in i + 1..m {
            if state.tgt_edges.get(i, j) as usize != EDGE_MASK {
                continue;
            }
            if let Some(c) = masked_draw(pred.edge(i, j), t, k, top_k, rng)? {
                out.tgt_edges.set(i, j, c as u8);
            }
        }
    }
    Ok(out)
}

/// Descending timestep grid `round(T·i/steps)` for i = steps..=0.
pub fn timestep_grid(horizon: u32, steps: u32) -> Result<Vec<u32>> {
    if steps == 0 || steps > horizon {
        return Err(DiffusionError::InvalidSteps { steps, horizon });
    }
    Ok((0..=steps)
        .rev()
        .map(|i| (f64::from(horizon) * f64::from(i) / f64::from(steps)).round() as u32)
        .collect())
}

/// Runs the reverse chain from an all-masked target and returns the final
/// sequence, which is guaranteed to contain no `[MASK]`.
pub fn sample_sequence<P: CleanPredictor + ?Sized>(
    predictor: &P,
    vocab: &Vocabulary,
    schedule: &NoiseSchedule,
    seq: &TokenSequence,
    steps: u32,
    top_k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TokenSequence> {
    let grid = timestep_grid(schedule.horizon(), steps)?;
    let mut state = seq.clone();
    for w in grid.windows(2) {
        let (t, next) = (w[0], w[1]);
        let pred = predictor.predict_clean(&state, rng)?;
        state = reverse_step(&state, vocab, &pred, t, t - next, top_k, rng)?;
    }
    assert!(
        state.target_tokens().iter().all(|&id| id != vocab.mask_id())
            && state.tgt_edges.as_slice().iter().all(|&c| c as usize != EDGE_MASK),
        "reverse chain ended with residual masks"
    );
    Ok(state)
}

/// Full sampling: reverse chain then decoding of the target segment.
pub fn sample<P: CleanPredictor + ?Sized>(
    predictor: &P,
    vocab: &Vocabulary,
    schedule: &NoiseSchedule,
    seq: &TokenSequence,
    steps: u32,
    top_k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<MolGraph> {
    let state = sample_sequence(predictor, vocab, schedule, seq, steps, top_k, rng)?;
    Ok(decode_graph(vocab, state.target_tokens(), &state.tgt_edges)?)
}

/// Deterministic child seed, used for per-chain and per-epoch streams.
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    // splitmix64 finalizer over the combined value
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molgraph::{parse_smiles, AtomTable};
    use crate::vocab::{encode_instance, SequenceLayout, Target};
    use rand::SeedableRng;

    #[test]
    fn schedule_basics() {
        let s = NoiseSchedule::new(4).unwrap();
        assert_eq!(s.beta(4).unwrap(), 1.0);
        assert_eq!(s.beta(1).unwrap(), 0.25);
        assert!(matches!(s.beta(0), Err(DiffusionError::StepOutOfRange { .. })));
        assert!(matches!(s.beta(5), Err(DiffusionError::StepOutOfRange { .. })));
        assert!(NoiseSchedule::new(0).is_err());
        for t in 1..4 {
            assert!(s.beta(t).unwrap() < s.beta(t + 1).unwrap());
        }
    }

    #[test]
    fn single_step_kernel() {
        let s = NoiseSchedule::new(4).unwrap();
        let q = TransitionMatrix::step(&s, 1, 3, 2).unwrap();
        assert_eq!((q.get(0, 0), q.get(1, 1), q.get(2, 2)), (0.75, 0.75, 1.0));
        assert_eq!((q.get(0, 2), q.get(1, 2)), (0.25, 0.25));
        assert_eq!(q.get(0, 1), 0.0);
        let last = TransitionMatrix::step(&s, 4, 3, 2).unwrap();
        assert_eq!((last.get(0, 2), last.get(1, 2), last.get(0, 0)), (1.0, 1.0, 0.0));
        assert!(TransitionMatrix::step(&s, 1, 3, 3).is_err());
    }

    #[test]
    fn posterior_examples() {
        let p = [0.0, 1.0, 0.0, 0.0];
        let d = posterior(3, 3, &p, 5, 1).unwrap();
        assert!((d.probs[1] - 0.2).abs() < 1e-15 && (d.probs[3] - 0.8).abs() < 1e-15);
        let keep = posterior(0, 3, &[0.3, 0.3, 0.4, 0.0], 9, 2).unwrap();
        assert_eq!(keep.probs, [1.0, 0.0, 0.0, 0.0]);
        let last = posterior(3, 3, &[0.3, 0.3, 0.4, 0.0], 7, 7).unwrap();
        assert_eq!(last.probs, [0.3, 0.3, 0.4, 0.0]);
        assert_eq!(
            posterior(3, 3, &p, 2, 3),
            Err(DiffusionError::StrideTooLarge { k: 3, t: 2 })
        );
    }

    #[test]
    fn top_k_truncation() {
        let p = [0.1, 0.4, 0.2, 0.2, 0.1];
        assert_eq!(truncate_top_k(&p, 1).unwrap(), [0.0, 1.0, 0.0, 0.0, 0.0]);
        let two = truncate_top_k(&p, 2).unwrap();
        assert!((two[1] - 2.0 / 3.0).abs() < 1e-15 && (two[2] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(two[3], 0.0);
        let all = truncate_top_k(&p, 5).unwrap();
        assert!(all.iter().zip(&p).all(|(a, b)| (a - b).abs() < 1e-15));
        assert_eq!(truncate_top_k(&p, 0), Err(DiffusionError::InvalidTopK));
    }

    #[test]
    fn grid_shapes() {
        assert_eq!(timestep_grid(1000, 1).unwrap(), [1000, 0]);
        assert_eq!(timestep_grid(10, 3).unwrap(), [10, 7, 3, 0]);
        let g = timestep_grid(1000, 1000).unwrap();
        assert!(g.windows(2).all(|w| w[0] - w[1] == 1));
        assert!(timestep_grid(10, 11).is_err());
        assert!(timestep_grid(10, 0).is_err());
    }

    fn toy_setup() -> (Vocabulary, SequenceLayout, TokenSequence) {
        let vocab = Vocabulary::build(["an alcohol"], 1, &AtomTable::default()).unwrap();
        let layout = SequenceLayout { max_text: 4, max_source: 0, target_slots: 5 };
        let g = parse_smiles("CCO").unwrap();
        let seq = encode_instance(&vocab, &layout, "an alcohol", None, Target::Graph(&g)).unwrap();
        (vocab, layout, seq)
    }

    #[test]
    fn forward_sample_masks_only_target() {
        let (vocab, _, seq) = toy_setup();
        let s = NoiseSchedule::new(10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let full = forward_sample(&seq, &vocab, &s, 10, &mut rng).unwrap();
        assert!(full.target_tokens().iter().all(|&t| t == vocab.mask_id()));
        assert_eq!(full.token_ids[..seq.target_range().start], seq.token_ids[..seq.target_range().start]);
        for i in 0..5 {
            assert_eq!(full.tgt_edges.get(i, i), 0);
            for j in 0..5 {
                if i != j {
                    assert_eq!(full.tgt_edges.get(i, j) as usize, EDGE_MASK);
                }
            }
        }
        for t in 1..=10 {
            let c = forward_sample(&seq, &vocab, &s, t, &mut rng).unwrap();
            assert!(c.tgt_edges.is_symmetric());
            assert_eq!(c.text_range(), seq.text_range());
        }
    }

    struct Fixed(CleanPrediction);

    impl CleanPredictor for Fixed {
        fn predict_clean(&self, _: &TokenSequence, _: &mut ChaCha8Rng) -> Result<CleanPrediction> {
            Ok(self.0.clone())
        }
    }

    fn uniform(vocab: &Vocabulary, m: usize) -> CleanPrediction {
        let c = vocab.node_categories() - 1;
        CleanPrediction {
            node_categories: c,
            node_probs: vec![1.0 / c as f64; m * c],
            edge_probs: vec![1.0 / EDGE_CLEAN as f64; m * m * EDGE_CLEAN],
        }
    }

    #[test]
    fn sampling_terminates_for_all_step_counts() {
        let (vocab, layout, _) = toy_setup();
        let seq = encode_instance(&vocab, &layout, "an alcohol", None, Target::Masked).unwrap();
        let stub = Fixed(uniform(&vocab, 5));
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for steps in [1, 10, 100, 1000] {
            let out = sample_sequence(&stub, &vocab, &s, &seq, steps, 15, &mut rng).unwrap();
            assert!(out.tgt_edges.is_symmetric());
            assert!(out.target_tokens().iter().all(|&t| t != vocab.mask_id()));
        }
    }

    #[test]
    fn top1_final_jump_is_argmax() {
        let (vocab, layout, _) = toy_setup();
        let seq = encode_instance(&vocab, &layout, "an alcohol", None, Target::Masked).unwrap();
        let mut pred = uniform(&vocab, 5);
        let c = pred.node_categories;
        for a in 0..5 {
            let row = &mut pred.node_probs[a * c..(a + 1) * c];
            row.fill(0.01);
            row[a % c] = 0.9;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let out = reverse_step(&seq, &vocab, &pred, 7, 7, 1, &mut rng).unwrap();
        for a in 0..5 {
            assert_eq!(out.target_tokens()[a], vocab.node_token(a % c));
        }
        let wrong = CleanPrediction { node_probs: vec![0.5; 2], ..pred };
        assert!(matches!(
            reverse_step(&seq, &vocab, &wrong, 7, 7, 1, &mut rng),
            Err(DiffusionError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(42, 0), derive_seed(42, 1));
        assert_eq!(derive_seed(42, 3), derive_seed(42, 3));
    }
}
