//! Unified text/graph vocabulary and sequence layout.
//!
//! Token ids are laid out as `text | atoms | [EMPTY] | [MASK] | [PAD] | [SEP]`.
//! Node categories (atoms, then `[EMPTY]`, then `[MASK]`) therefore map onto a
//! contiguous token-id range, with `[MASK]` as the last node category.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::molgraph::{AtomTable, BondKind, MolGraph};

pub const VOCAB_FORMAT_VERSION: u32 = 1;

pub const UNK: &str = "[UNK]";
pub const MASK: &str = "[MASK]";
pub const EMPTY: &str = "[EMPTY]";
pub const PAD: &str = "[PAD]";
pub const SEP: &str = "[SEP]";

/// Number of edge categories including the absorbing `[MASK]` edge.
pub const EDGE_VOCAB: usize = 6;
/// Edge category index of `[MASK]`.
pub const EDGE_MASK: usize = 5;
/// Edge categories a clean graph can carry (`None`..`Aromatic`).
pub const EDGE_CLEAN: usize = 5;

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("unsupported vocabulary version {0}")]
    Version(u32),
    #[error("vocabulary file is inconsistent: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EncodeError {
    #[error("molecule has {atoms} atoms but only {slots} target slots")]
    TargetTooLong { atoms: usize, slots: usize },
    #[error("source molecule has {atoms} atoms but only {slots} source slots")]
    SourceTooLong { atoms: usize, slots: usize },
    #[error("atom {0:?} is not in the node vocabulary")]
    UnknownAtom(String),
    #[error("target slot count must be at least 1")]
    NoTargetSlots,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("[MASK] remains at target position {0}")]
    ResidualMask(usize),
    #[error("every target slot is [EMPTY]")]
    NoAtoms,
    #[error("token id {0} is not a node category")]
    NotANode(u32),
    #[error("edge category {0} is invalid")]
    BadEdge(u8),
    #[error("node and edge sizes disagree")]
    ShapeMismatch,
}

/// Lower-cased word tokens: alphanumeric runs, plus each other non-space
/// character on its own.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.extend(ch.to_lowercase());
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_lowercase().collect());
            }
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    text: Vec<String>,
    text_index: HashMap<String, u32>,
    atoms: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    version: u32,
    text_tokens: BTreeMap<String, u32>,
    node_tokens: BTreeMap<String, u32>,
    special: BTreeMap<String, u32>,
    edge_categories: BTreeMap<String, u32>,
}

impl Vocabulary {
    /// Builds the text vocabulary from a corpus; words seen fewer than
    /// `min_count` times map to `[UNK]`. Text ids are ordered by descending
    /// frequency, then lexicographically.
    pub fn build<I, S>(corpus: I, min_count: usize, atoms: &AtomTable) -> Result<Self, VocabError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut lines = 0usize;
        for line in corpus {
            lines += 1;
            for tok in tokenize(line.as_ref()) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if lines == 0 {
            return Err(VocabError::EmptyCorpus);
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= min_count.max(1) && w != UNK)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut text = vec![UNK.to_string()];
        text.extend(kept.into_iter().map(|(w, _)| w));
        Ok(Self::from_parts(text, atoms.kinds().iter().map(|k| k.symbol.clone()).collect()))
    }

    fn from_parts(text: Vec<String>, atoms: Vec<String>) -> Self {
        let text_index = text.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        let v = Vocabulary { text, text_index, atoms };
        debug_assert!(v.ids_disjoint());
        v
    }

    fn ids_disjoint(&self) -> bool {
        let mut all: Vec<u32> = (0..self.text.len() as u32).collect();
        all.extend((0..self.atoms.len() as u32).map(|i| self.node_base() + i));
        all.extend([self.empty_id(), self.mask_id(), self.pad_id(), self.sep_id()]);
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        all.len() == n && n == self.size()
    }

    pub fn text_len(&self) -> usize {
        self.text.len()
    }

    pub fn text_tokens(&self) -> &[String] {
        &self.text
    }

    pub fn atom_symbols(&self) -> &[String] {
        &self.atoms
    }

    pub fn unk_id(&self) -> u32 {
        0
    }

    pub fn node_base(&self) -> u32 {
        self.text.len() as u32
    }

    pub fn empty_id(&self) -> u32 {
        self.node_base() + self.atoms.len() as u32
    }

    pub fn mask_id(&self) -> u32 {
        self.empty_id() + 1
    }

    pub fn pad_id(&self) -> u32 {
        self.empty_id() + 2
    }

    pub fn sep_id(&self) -> u32 {
        self.empty_id() + 3
    }

    /// Total token vocabulary size.
    pub fn size(&self) -> usize {
        self.text.len() + self.atoms.len() + 4
    }

    /// Node categories including `[EMPTY]` and the trailing `[MASK]`.
    pub fn node_categories(&self) -> usize {
        self.atoms.len() + 2
    }

    /// Index of `[MASK]` within the node categories.
    pub fn node_mask_category(&self) -> usize {
        self.atoms.len() + 1
    }

    pub fn node_empty_category(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_text_id(&self, id: u32) -> bool {
        (id as usize) < self.text.len()
    }

    /// Node category index for a token id (atoms, `[EMPTY]`, `[MASK]`).
    pub fn node_category(&self, id: u32) -> Option<usize> {
        let base = self.node_base();
        (id >= base && id <= self.mask_id()).then(|| (id - base) as usize)
    }

    pub fn node_token(&self, category: usize) -> u32 {
        self.node_base() + category as u32
    }

    pub fn atom_id(&self, symbol: &str) -> Option<u32> {
        self.atoms
            .iter()
            .position(|s| s == symbol)
            .map(|i| self.node_base() + i as u32)
    }

    pub fn text_id(&self, word: &str) -> u32 {
        self.text_index.get(word).copied().unwrap_or(0)
    }

    pub fn encode_text(&self, text: &str) -> Vec<u32> {
        tokenize(text).iter().map(|w| self.text_id(w)).collect()
    }

    pub fn to_json(&self) -> String {
        let text_tokens = self.text.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        let node_tokens = self
            .atoms
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), self.node_base() + i as u32))
            .collect();
        let special = [
            (MASK, self.mask_id()),
            (EMPTY, self.empty_id()),
            (PAD, self.pad_id()),
            (SEP, self.sep_id()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        let mut edge_categories: BTreeMap<String, u32> = BondKind::ALL
            .iter()
            .map(|b| (format!("{b:?}"), b.index() as u32))
            .collect();
        edge_categories.insert(MASK.to_string(), EDGE_MASK as u32);
        let file = VocabFile {
            version: VOCAB_FORMAT_VERSION,
            text_tokens,
            node_tokens,
            special,
            edge_categories,
        };
        let mut s = serde_json::to_string_pretty(&file).expect("vocabulary serializes");
        s.push('\n');
        s
    }

    pub fn from_json(json: &str) -> Result<Self, VocabError> {
        let file: VocabFile = serde_json::from_str(json)?;
        if file.version != VOCAB_FORMAT_VERSION {
            return Err(VocabError::Version(file.version));
        }
        let mut text = vec![String::new(); file.text_tokens.len()];
        for (w, id) in file.text_tokens {
            let slot = text
                .get_mut(id as usize)
                .ok_or_else(|| VocabError::Inconsistent(format!("text id {id} out of range")))?;
            *slot = w;
        }
        let base = text.len() as u32;
        let mut atoms = vec![String::new(); file.node_tokens.len()];
        for (s, id) in file.node_tokens {
            let slot = id
                .checked_sub(base)
                .and_then(|i| atoms.get_mut(i as usize))
                .ok_or_else(|| VocabError::Inconsistent(format!("node id {id} out of range")))?;
            *slot = s;
        }
        if text.iter().chain(&atoms).any(String::is_empty) || text.first().map(String::as_str) != Some(UNK) {
            return Err(VocabError::Inconsistent("missing token ids".into()));
        }
        let v = Self::from_parts(text, atoms);
        let expect = [
            (MASK, v.mask_id()),
            (EMPTY, v.empty_id()),
            (PAD, v.pad_id()),
            (SEP, v.sep_id()),
        ];
        for (name, id) in expect {
            if file.special.get(name) != Some(&id) {
                return Err(VocabError::Inconsistent(format!("special token {name} id mismatch")));
            }
        }
        Ok(v)
    }

    /// SHA-256 of the serialized vocabulary, hex encoded.
    pub fn digest(&self) -> String {
        let hash = Sha256::digest(self.to_json().as_bytes());
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }
}

// ---------------------------------------------------------------------------
// Sequence layout

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Segment {
    Text,
    SourceGraph,
    TargetGraph,
}

/// Fixed segment capacities. Position ids are assigned per segment from fixed
/// offsets: text from 0, source graph from `max_text`, target graph from
/// `max_text + max_source`, so target slot `k` always has the same id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceLayout {
    /// Text capacity, including the trailing `[SEP]`.
    pub max_text: usize,
    pub max_source: usize,
    pub target_slots: usize,
}

impl SequenceLayout {
    pub fn max_positions(&self) -> usize {
        self.max_text + self.max_source + self.target_slots
    }

    pub fn source_offset(&self) -> usize {
        self.max_text
    }

    pub fn target_offset(&self) -> usize {
        self.max_text + self.max_source
    }
}

/// Square edge-category matrix (row-major).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EdgeMatrix {
    size: usize,
    cats: Vec<u8>,
}

impl EdgeMatrix {
    pub fn filled(size: usize, off_diagonal: u8) -> Self {
        let mut cats = vec![off_diagonal; size * size];
        for i in 0..size {
            cats[i * size + i] = BondKind::None as u8;
        }
        EdgeMatrix { size, cats }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.cats[i * self.size + j]
    }

    /// Sets both `(i, j)` and `(j, i)`.
    pub fn set(&mut self, i: usize, j: usize, cat: u8) {
        self.cats[i * self.size + j] = cat;
        self.cats[j * self.size + i] = cat;
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.cats
    }

    pub fn is_symmetric(&self) -> bool {
        let n = self.size;
        (0..n).all(|i| self.get(i, i) == 0 && (0..i).all(|j| self.get(i, j) == self.get(j, i)))
    }

    /// Matrix with both axes permuted: new `(a, b)` = old `(perm[a], perm[b])`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.size;
        let mut cats = vec![0; n * n];
        for a in 0..n {
            for b in 0..n {
                cats[a * n + b] = self.get(perm[a], perm[b]);
            }
        }
        EdgeMatrix { size: n, cats }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub token_ids: Vec<u32>,
    pub segment_tags: Vec<Segment>,
    pub position_ids: Vec<u32>,
    pub src_edges: EdgeMatrix,
    pub tgt_edges: EdgeMatrix,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    fn range_of(&self, seg: Segment) -> std::ops::Range<usize> {
        let start = self.segment_tags.iter().position(|s| *s == seg).unwrap_or(self.len());
        let end = self.segment_tags.iter().rposition(|s| *s == seg).map_or(start, |e| e + 1);
        start..end.max(start)
    }

    pub fn text_range(&self) -> std::ops::Range<usize> {
        self.range_of(Segment::Text)
    }

    pub fn source_range(&self) -> std::ops::Range<usize> {
        let r = self.range_of(Segment::SourceGraph);
        if r.is_empty() {
            self.text_range().end..self.text_range().end
        } else {
            r
        }
    }

    pub fn target_range(&self) -> std::ops::Range<usize> {
        let r = self.range_of(Segment::TargetGraph);
        if r.is_empty() {
            self.len()..self.len()
        } else {
            r
        }
    }

    pub fn target_slots(&self) -> usize {
        self.tgt_edges.size()
    }

    pub fn target_tokens(&self) -> &[u32] {
        &self.token_ids[self.target_range()]
    }

    /// Permutes target slots jointly: tokens, position ids and both edge axes.
    /// New slot `a` takes the content of old slot `perm[a]`.
    pub fn permute_target(&self, perm: &[usize]) -> TokenSequence {
        let r = self.target_range();
        assert_eq!(perm.len(), r.len(), "permutation length must equal target slots");
        let mut out = self.clone();
        for (a, &p) in perm.iter().enumerate() {
            out.token_ids[r.start + a] = self.token_ids[r.start + p];
            out.position_ids[r.start + a] = self.position_ids[r.start + p];
        }
        out.tgt_edges = self.tgt_edges.permuted(perm);
        out
    }

    pub fn check_invariants(&self, layout: &SequenceLayout) -> bool {
        let n = self.len();
        let ordered = self.segment_tags.windows(2).all(|w| {
            let rank = |s: Segment| s as u8;
            rank(w[0]) <= rank(w[1])
        });
        ordered
            && self.position_ids.len() == n
            && self.segment_tags.len() == n
            && self.src_edges.is_symmetric()
            && self.tgt_edges.is_symmetric()
            && self.target_range().len() == self.tgt_edges.size()
            && self.source_range().len() == self.src_edges.size()
            && self.tgt_edges.size() <= layout.target_slots
    }
}

/// Target segment content for [`encode_instance`].
#[derive(Debug, Clone, Copy)]
pub enum Target<'a> {
    /// Ground truth molecule, padded with `[EMPTY]` (training).
    Graph(&'a MolGraph),
    /// All `[MASK]` (sampling).
    Masked,
    /// No target segment (text-only pretraining records).
    Absent,
}

fn graph_tokens(vocab: &Vocabulary, g: &MolGraph) -> Result<Vec<u32>, EncodeError> {
    g.atoms()
        .iter()
        .map(|s| vocab.atom_id(s).ok_or_else(|| EncodeError::UnknownAtom(s.clone())))
        .collect()
}

fn graph_edges(g: &MolGraph, size: usize) -> EdgeMatrix {
    let mut e = EdgeMatrix::filled(size, BondKind::None as u8);
    for (i, j, k) in g.edges() {
        e.set(i, j, k.index() as u8);
    }
    e
}

/// Lays out `text [SEP] source target`. Text longer than the layout allows is
/// truncated so that `[SEP]` always fits.
pub fn encode_instance(
    vocab: &Vocabulary,
    layout: &SequenceLayout,
    instruction: &str,
    source: Option<&MolGraph>,
    target: Target<'_>,
) -> Result<TokenSequence, EncodeError> {
    let mut text = vocab.encode_text(instruction);
    let cap = layout.max_text.saturating_sub(1);
    if text.len() > cap {
        log::debug!("instruction truncated from {} to {} tokens", text.len(), cap);
        text.truncate(cap);
    }
    text.push(vocab.sep_id());

    let mut token_ids = text.clone();
    let mut segment_tags = vec![Segment::Text; text.len()];
    let mut position_ids: Vec<u32> = (0..text.len() as u32).collect();

    let src_edges = match source {
        Some(g) => {
            if g.atom_count() > layout.max_source {
                return Err(EncodeError::SourceTooLong {
                    atoms: g.atom_count(),
                    slots: layout.max_source,
                });
            }
            token_ids.extend(graph_tokens(vocab, g)?);
            segment_tags.extend(std::iter::repeat_n(Segment::SourceGraph, g.atom_count()));
            position_ids.extend((0..g.atom_count()).map(|k| (layout.source_offset() + k) as u32));
            graph_edges(g, g.atom_count())
        }
        None => EdgeMatrix::filled(0, 0),
    };

    let slots = layout.target_slots;
    let tgt_edges = match target {
        Target::Absent => EdgeMatrix::filled(0, 0),
        Target::Graph(g) => {
            if slots == 0 {
                return Err(EncodeError::NoTargetSlots);
            }
            if g.atom_count() > slots {
                return Err(EncodeError::TargetTooLong { atoms: g.atom_count(), slots });
            }
            let mut toks = graph_tokens(vocab, g)?;
            toks.resize(slots, vocab.empty_id());
            token_ids.extend(toks);
            graph_edges(g, slots)
        }
        Target::Masked => {
            if slots == 0 {
                return Err(EncodeError::NoTargetSlots);
            }
            token_ids.extend(std::iter::repeat_n(vocab.mask_id(), slots));
            EdgeMatrix::filled(slots, EDGE_MASK as u8)
        }
    };
    let m = tgt_edges.size();
    segment_tags.extend(std::iter::repeat_n(Segment::TargetGraph, m));
    position_ids.extend((0..m).map(|k| (layout.target_offset() + k) as u32));

    Ok(TokenSequence {
        token_ids,
        segment_tags,
        position_ids,
        src_edges,
        tgt_edges,
    })
}

/// Drops `[EMPTY]` slots (and their edges) and returns the remaining graph.
pub fn decode_graph(vocab: &Vocabulary, node_ids: &[u32], edges: &EdgeMatrix) -> Result<MolGraph, DecodeError> {
    if edges.size() != node_ids.len() {
        return Err(DecodeError::ShapeMismatch);
    }
    let mut keep = Vec::new();
    for (slot, &id) in node_ids.iter().enumerate() {
        if id == vocab.mask_id() {
            return Err(DecodeError::ResidualMask(slot));
        }
        if id == vocab.empty_id() {
            continue;
        }
        match vocab.node_category(id) {
            Some(c) if c < vocab.atom_symbols().len() => keep.push((slot, c)),
            _ => return Err(DecodeError::NotANode(id)),
        }
    }
    for i in 0..edges.size() {
        for j in i + 1..edges.size() {
            if edges.get(i, j) as usize == EDGE_MASK {
                return Err(DecodeError::ResidualMask(i));
            }
        }
    }
    if keep.is_empty() {
        return Err(DecodeError::NoAtoms);
    }
    let mut g = MolGraph::new(keep.iter().map(|&(_, c)| vocab.atom_symbols()[c].clone()));
    for a in 0..keep.len() {
        for b in a + 1..keep.len() {
            let cat = edges.get(keep[a].0, keep[b].0);
            let kind = BondKind::from_index(cat as usize).ok_or(DecodeError::BadEdge(cat))?;
            g.set_bond(a, b, kind);
        }
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molgraph::{exact_match, is_valid, parse_smiles};

    fn vocab() -> Vocabulary {
        Vocabulary::build(["sulfur oxide", "'x' is the description of molecule:"], 1, &AtomTable::default()).unwrap()
    }

    #[test]
    fn text_vocab_cutoff() {
        let v = Vocabulary::build(["a b a"], 1, &AtomTable::default()).unwrap();
        assert_eq!(v.text_tokens(), ["[UNK]", "a", "b"]);
        let v = Vocabulary::build(["a b a"], 2, &AtomTable::default()).unwrap();
        assert_eq!(v.text_tokens(), ["[UNK]", "a"]);
        assert_eq!(v.text_id("b"), v.unk_id());
        assert!(matches!(
            Vocabulary::build(Vec::<String>::new(), 1, &AtomTable::default()),
            Err(VocabError::EmptyCorpus)
        ));
    }

    #[test]
    fn ids_are_disjoint_and_serialize_bitwise() {
        let v = vocab();
        assert!(v.ids_disjoint());
        assert_ne!(v.mask_id(), v.empty_id());
        let json = v.to_json();
        let back = Vocabulary::from_json(&json).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.to_json(), json);
        assert_eq!(back.digest(), v.digest());
    }

    #[test]
    fn tokenizer_splits_punctuation() {
        assert_eq!(tokenize("'CCO' is: fine"), ["'", "cco", "'", "is", ":", "fine"]);
    }

    #[test]
    fn sulfur_oxide_target_padding() {
        let v = vocab();
        let layout = SequenceLayout { max_text: 8, max_source: 0, target_slots: 4 };
        let g = parse_smiles("O=S=O").unwrap().reordered(&[1, 0, 2]);
        let seq = encode_instance(&v, &layout, "sulfur oxide", None, Target::Graph(&g)).unwrap();
        let s = v.atom_id("S").unwrap();
        let o = v.atom_id("O").unwrap();
        assert_eq!(seq.target_tokens(), [s, o, o, v.empty_id()]);
        assert_eq!(seq.tgt_edges.get(0, 1), BondKind::Double as u8);
        assert_eq!(seq.tgt_edges.get(3, 0), BondKind::None as u8);
        assert!(seq.check_invariants(&layout));
        assert_eq!(seq.position_ids[seq.target_range()], [8, 9, 10, 11]);
    }

    #[test]
    fn sampling_mode_is_all_masked() {
        let v = vocab();
        let layout = SequenceLayout { max_text: 8, max_source: 0, target_slots: 3 };
        let seq = encode_instance(&v, &layout, "sulfur oxide", None, Target::Masked).unwrap();
        assert!(seq.target_tokens().iter().all(|&t| t == v.mask_id()));
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 0 } else { EDGE_MASK as u8 };
                assert_eq!(seq.tgt_edges.get(i, j), want);
            }
        }
    }

    #[test]
    fn editing_layout() {
        let v = vocab();
        let layout = SequenceLayout { max_text: 8, max_source: 5, target_slots: 4 };
        let src = parse_smiles("CCO").unwrap();
        let seq = encode_instance(&v, &layout, "sulfur oxide", Some(&src), Target::Masked).unwrap();
        let mut want = vec![Segment::Text; 3];
        want.extend([Segment::SourceGraph; 3]);
        want.extend([Segment::TargetGraph; 4]);
        assert_eq!(seq.segment_tags, want);
        assert_eq!(seq.position_ids, [0, 1, 2, 8, 9, 10, 13, 14, 15, 16]);
        assert_eq!(seq.src_edges.get(1, 2), BondKind::Single as u8);
        assert!(seq.check_invariants(&layout));
    }

    #[test]
    fn encode_errors() {
        let v = vocab();
        let layout = SequenceLayout { max_text: 8, max_source: 1, target_slots: 2 };
        let g = parse_smiles("CCO").unwrap();
        assert_eq!(
            encode_instance(&v, &layout, "x", None, Target::Graph(&g)),
            Err(EncodeError::TargetTooLong { atoms: 3, slots: 2 })
        );
        assert_eq!(
            encode_instance(&v, &layout, "x", Some(&g), Target::Masked),
            Err(EncodeError::SourceTooLong { atoms: 3, slots: 1 })
        );
        let long = "word ".repeat(50);
        let seq = encode_instance(&v, &layout, &long, None, Target::Masked).unwrap();
        assert_eq!(seq.text_range().len(), 8);
        assert_eq!(*seq.token_ids.get(7).unwrap(), v.sep_id());
    }

    #[test]
    fn decode_drops_empty_slots() {
        let v = vocab();
        let c = v.atom_id("C").unwrap();
        let o = v.atom_id("O").unwrap();
        let mut e = EdgeMatrix::filled(3, 0);
        e.set(0, 2, BondKind::Single as u8);
        e.set(0, 1, BondKind::Double as u8);
        let g = decode_graph(&v, &[c, v.empty_id(), o], &e).unwrap();
        assert!(exact_match(&g, &parse_smiles("CO").unwrap()));
        assert_eq!(
            decode_graph(&v, &[v.empty_id(); 3], &EdgeMatrix::filled(3, 0)),
            Err(DecodeError::NoAtoms)
        );
        assert_eq!(
            decode_graph(&v, &[c, v.mask_id(), o], &EdgeMatrix::filled(3, 0)),
            Err(DecodeError::ResidualMask(1))
        );
    }

    #[test]
    fn decode_sulfur_dioxide_is_valid() {
        let v = vocab();
        let s = v.atom_id("S").unwrap();
        let o = v.atom_id("O").unwrap();
        let mut e = EdgeMatrix::filled(3, 0);
        e.set(0, 1, BondKind::Double as u8);
        e.set(0, 2, BondKind::Double as u8);
        let g = decode_graph(&v, &[s, o, o], &e).unwrap();
        assert!(is_valid(&g).0);
    }

    #[test]
    fn permute_target_moves_everything() {
        let v = vocab();
        let layout = SequenceLayout { max_text: 8, max_source: 0, target_slots: 3 };
        let g = parse_smiles("CCO").unwrap();
        let seq = encode_instance(&v, &layout, "x", None, Target::Graph(&g)).unwrap();
        let perm = [2, 0, 1];
        let p = seq.permute_target(&perm);
        let r = seq.target_range();
        assert_eq!(p.token_ids[r.start], seq.token_ids[r.start + 2]);
        assert_eq!(p.position_ids[r.start], seq.position_ids[r.start + 2]);
        assert_eq!(p.tgt_edges.get(0, 2), seq.tgt_edges.get(2, 1));
        let inverse = [1, 2, 0];
        assert_eq!(p.permute_target(&inverse), seq);
    }
}
