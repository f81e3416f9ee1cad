//! Molecular graphs: atom/bond model, a SMILES-subset reader and writer,
//! valence checking and canonical labelling.
//!
//! Hydrogens are implicit: a graph only holds the atoms written in the
//! SMILES string. Charges, isotopes, chirality and explicit hydrogen counts
//! inside bracket atoms are read and dropped.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Bond categories. The discriminant is the edge category index used by the
/// diffusion vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BondKind {
    None = 0,
    Single = 1,
    Double = 2,
    Triple = 3,
    Aromatic = 4,
}

impl BondKind {
    pub const ALL: [BondKind; 5] = [
        BondKind::None,
        BondKind::Single,
        BondKind::Double,
        BondKind::Triple,
        BondKind::Aromatic,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<BondKind> {
        Self::ALL.get(index).copied()
    }

    /// Bond order in half units (aromatic = 3, i.e. 1.5).
    pub fn half_order(self) -> u32 {
        match self {
            BondKind::None => 0,
            BondKind::Single => 2,
            BondKind::Double => 4,
            BondKind::Triple => 6,
            BondKind::Aromatic => 3,
        }
    }

    pub fn order(self) -> f64 {
        f64::from(self.half_order()) / 2.0
    }

    fn smiles_symbol(self) -> &'static str {
        match self {
            BondKind::None | BondKind::Single => "",
            BondKind::Double => "=",
            BondKind::Triple => "#",
            BondKind::Aromatic => ":",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AtomKind {
    pub symbol: String,
    pub max_valences: Vec<u32>,
}

impl AtomKind {
    pub fn max_valence(&self) -> u32 {
        self.max_valences.iter().copied().max().unwrap_or(0)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AtomTableError {
    #[error("atom symbol {0:?} already present")]
    DuplicateSymbol(String),
    #[error("atom symbol {0:?} has no allowed valences")]
    EmptyValences(String),
}

/// Element table: symbol plus the set of allowed total bond orders.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AtomTable {
    kinds: Vec<AtomKind>,
}

impl Default for AtomTable {
    fn default() -> Self {
        let entries: [(&str, &[u32]); 11] = [
            ("C", &[4]),
            ("N", &[3]),
            ("O", &[2]),
            ("S", &[2, 4, 6]),
            ("P", &[3, 5]),
            ("F", &[1]),
            ("Cl", &[1]),
            ("Br", &[1]),
            ("I", &[1]),
            ("H", &[1]),
            // noble gas: no bonds allowed
            ("He", &[0]),
        ];
        AtomTable {
            kinds: entries
                .iter()
                .map(|(s, v)| AtomKind {
                    symbol: (*s).to_string(),
                    max_valences: v.to_vec(),
                })
                .collect(),
        }
    }
}

impl AtomTable {
    pub fn extend(&mut self, kind: AtomKind) -> Result<(), AtomTableError> {
        if kind.max_valences.is_empty() {
            return Err(AtomTableError::EmptyValences(kind.symbol));
        }
        if self.get(&kind.symbol).is_some() {
            return Err(AtomTableError::DuplicateSymbol(kind.symbol));
        }
        self.kinds.push(kind);
        Ok(())
    }

    pub fn get(&self, symbol: &str) -> Option<&AtomKind> {
        self.kinds.iter().find(|k| k.symbol == symbol)
    }

    pub fn kinds(&self) -> &[AtomKind] {
        &self.kinds
    }

    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }
}

/// Labeled undirected graph with a dense symmetric bond matrix.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MolGraph {
    atoms: Vec<String>,
    bonds: Vec<BondKind>,
}

impl MolGraph {
    pub fn new<S: Into<String>>(atoms: impl IntoIterator<Item = S>) -> Self {
        let atoms: Vec<String> = atoms.into_iter().map(Into::into).collect();
        let n = atoms.len();
        MolGraph {
            atoms,
            bonds: vec![BondKind::None; n * n],
        }
    }

    pub fn atom_count(&self) -> usize {
        self.atoms.len()
    }

    pub fn atoms(&self) -> &[String] {
        &self.atoms
    }

    pub fn atom(&self, i: usize) -> &str {
        &self.atoms[i]
    }

    pub fn bond(&self, i: usize, j: usize) -> BondKind {
        self.bonds[i * self.atoms.len() + j]
    }

    /// Sets the bond between `i` and `j` in both directions.
    ///
    /// # Panics
    /// If `i == j` and `kind` is not `None`, or an index is out of range.
    pub fn set_bond(&mut self, i: usize, j: usize, kind: BondKind) {
        assert!(i != j || kind == BondKind::None, "self bonds are not allowed");
        let n = self.atoms.len();
        self.bonds[i * n + j] = kind;
        self.bonds[j * n + i] = kind;
    }

    pub fn push_atom(&mut self, symbol: impl Into<String>) -> usize {
        let n = self.atoms.len();
        let mut bonds = vec![BondKind::None; (n + 1) * (n + 1)];
        for i in 0..n {
            bonds[i * (n + 1)..i * (n + 1) + n].copy_from_slice(&self.bonds[i * n..(i + 1) * n]);
        }
        self.bonds = bonds;
        self.atoms.push(symbol.into());
        n
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = (usize, BondKind)> + '_ {
        let n = self.atoms.len();
        self.bonds[i * n..(i + 1) * n]
            .iter()
            .enumerate()
            .filter(|(_, b)| **b != BondKind::None)
            .map(|(j, b)| (j, *b))
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors(i).count()
    }

    /// Sum of incident bond orders in half units.
    pub fn half_valence(&self, i: usize) -> u32 {
        self.neighbors(i).map(|(_, b)| b.half_order()).sum()
    }

    pub fn bond_count(&self) -> usize {
        self.edges().count()
    }

    /// Bonds as `(i, j, kind)` with `i < j`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, BondKind)> + '_ {
        let n = self.atoms.len();
        (0..n).flat_map(move |i| {
            (i + 1..n).filter_map(move |j| {
                let b = self.bond(i, j);
                (b != BondKind::None).then_some((i, j, b))
            })
        })
    }

    pub fn is_connected(&self) -> bool {
        let n = self.atoms.len();
        if n == 0 {
            return false;
        }
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(u) = stack.pop() {
            for (v, _) in self.neighbors(u) {
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Graph with atoms reordered so that new atom `k` is old atom `order[k]`.
    pub fn reordered(&self, order: &[usize]) -> MolGraph {
        let mut g = MolGraph::new(order.iter().map(|&i| self.atoms[i].clone()));
        for a in 0..order.len() {
            for b in a + 1..order.len() {
                g.set_bond(a, b, self.bond(order[a], order[b]));
            }
        }
        g
    }

    /// Checks the symmetry/diagonal invariants.
    pub fn check_invariants(&self) -> bool {
        let n = self.atoms.len();
        (0..n).all(|i| self.bond(i, i) == BondKind::None && (0..n).all(|j| self.bond(i, j) == self.bond(j, i)))
    }
}

// ---------------------------------------------------------------------------
// SMILES reading

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SmilesError {
    #[error("empty SMILES input")]
    EmptyInput,
    #[error("unknown element {symbol:?} at byte {offset}")]
    UnknownElement { symbol: String, offset: usize },
    #[error("unbalanced parenthesis at byte {offset}")]
    UnbalancedParenthesis { offset: usize },
    #[error("ring closure {label} opened at byte {offset} is never closed")]
    DanglingRingClosure { label: u32, offset: usize },
    #[error("unexpected character {ch:?} at byte {offset}")]
    UnexpectedCharacter { ch: char, offset: usize },
    #[error("multi-fragment SMILES ('.') at byte {offset} is not supported")]
    MultipleFragments { offset: usize },
    #[error("ring closure at byte {offset} would create a self or duplicate bond")]
    InvalidRingBond { offset: usize },
    #[error("bond symbol at byte {offset} is not followed by an atom")]
    DanglingBond { offset: usize },
}

struct RingOpen {
    atom: usize,
    bond: Option<BondKind>,
    offset: usize,
}

struct Parser<'a> {
    text: &'a str,
    bytes: &'a [u8],
    pos: usize,
    table: &'a AtomTable,
    graph: MolGraph,
    aromatic: Vec<bool>,
}

const ORGANIC_TWO: [&str; 2] = ["Cl", "Br"];
const ORGANIC_ONE: [u8; 8] = *b"BCNOPSFI";
const AROMATIC_ONE: [u8; 6] = *b"bcnops";

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn unexpected(&self, offset: usize) -> SmilesError {
        let ch = self.text[offset..].chars().next().unwrap_or('\0');
        SmilesError::UnexpectedCharacter { ch, offset }
    }

    fn add_atom(&mut self, symbol: String, aromatic: bool, offset: usize) -> Result<usize, SmilesError> {
        if self.table.get(&symbol).is_none() {
            return Err(SmilesError::UnknownElement { symbol, offset });
        }
        self.aromatic.push(aromatic);
        Ok(self.graph.push_atom(symbol))
    }

    /// Reads an organic-subset or bracket atom at the cursor, if any.
    fn atom(&mut self) -> Result<Option<usize>, SmilesError> {
        let start = self.pos;
        let Some(c) = self.peek() else { return Ok(None) };
        if c == b'[' {
            return self.bracket_atom().map(Some);
        }
        for two in ORGANIC_TWO {
            if self.text[start..].starts_with(two) {
                self.pos += 2;
                return self.add_atom(two.to_string(), false, start).map(Some);
            }
        }
        if ORGANIC_ONE.contains(&c) {
            self.pos += 1;
            return self.add_atom((c as char).to_string(), false, start).map(Some);
        }
        if AROMATIC_ONE.contains(&c) {
            self.pos += 1;
            return self
                .add_atom((c.to_ascii_uppercase() as char).to_string(), true, start)
                .map(Some);
        }
        Ok(None)
    }

    fn bracket_atom(&mut self) -> Result<usize, SmilesError> {
        let open = self.pos;
        let close = match self.text[open..].find(']') {
            Some(rel) => open + rel,
            None => return Err(self.unexpected(open)),
        };
        let inner = &self.text[open + 1..close];
        let ib = inner.as_bytes();
        let mut i = 0;
        while i < ib.len() && ib[i].is_ascii_digit() {
            i += 1;
        }
        let had_isotope = i > 0;
        let sym_start = i;
        if i >= ib.len() || !ib[i].is_ascii_alphabetic() {
            return Err(self.unexpected(open + 1 + i.min(inner.len())));
        }
        let aromatic = ib[i].is_ascii_lowercase();
        i += 1;
        // two-letter symbols: second char lowercase; aromatic 'se'/'as' are two lowercase letters
        if i < ib.len() && ib[i].is_ascii_lowercase() {
            let candidate = if aromatic {
                let mut s = String::new();
                s.push((ib[sym_start] as char).to_ascii_uppercase());
                s.push(ib[i] as char);
                s
            } else {
                inner[sym_start..i + 1].to_string()
            };
            if self.table.get(&candidate).is_some() || !aromatic {
                i += 1;
            }
        }
        let raw = &inner[sym_start..i];
        let symbol = if aromatic {
            let mut s = raw.to_string();
            s[..1].make_ascii_uppercase();
            s
        } else {
            raw.to_string()
        };
        let rest = &inner[i..];
        let mut discarded = had_isotope;
        for ch in rest.chars() {
            match ch {
                '@' | 'H' | '0'..='9' | ':' => {}
                '+' | '-' => discarded = true,
                _ => return Err(self.unexpected(open + 1 + i)),
            }
        }
        if discarded {
            log::warn!("charge/isotope in bracket atom [{inner}] discarded");
        }
        self.pos = close + 1;
        self.add_atom(symbol, aromatic, open + 1 + sym_start)
    }

    fn bond_symbol(&mut self) -> Option<BondKind> {
        let kind = match self.peek()? {
            b'-' | b'/' | b'\\' => BondKind::Single,
            b'=' => BondKind::Double,
            b'#' => BondKind::Triple,
            b':' => BondKind::Aromatic,
            _ => return None,
        };
        self.pos += 1;
        Some(kind)
    }

    fn ring_label(&mut self) -> Result<Option<u32>, SmilesError> {
        match self.peek() {
            Some(c) if c.is_ascii_digit() => {
                self.pos += 1;
                Ok(Some(u32::from(c - b'0')))
            }
            Some(b'%') => {
                let at = self.pos;
                let digits = self.bytes.get(at + 1..at + 3);
                match digits {
                    Some(d) if d.iter().all(u8::is_ascii_digit) => {
                        self.pos += 3;
                        Ok(Some(u32::from(d[0] - b'0') * 10 + u32::from(d[1] - b'0')))
                    }
                    _ => Err(self.unexpected(at)),
                }
            }
            _ => Ok(None),
        }
    }

    fn implicit_bond(&self, a: usize, b: usize) -> BondKind {
        if self.aromatic[a] && self.aromatic[b] {
            BondKind::Aromatic
        } else {
            BondKind::Single
        }
    }

    fn parse(mut self) -> Result<MolGraph, SmilesError> {
        if self.text.trim().is_empty() {
            return Err(SmilesError::EmptyInput);
        }
        let mut rings: BTreeMap<u32, RingOpen> = BTreeMap::new();
        let mut branch_stack: Vec<(usize, usize)> = Vec::new();
        let mut prev: Option<usize> = None;
        let mut pending_bond: Option<(BondKind, usize)> = None;

        while self.pos < self.bytes.len() {
            let at = self.pos;
            let c = self.bytes[at];
            if c == b'(' {
                let Some(p) = prev else {
                    return Err(SmilesError::UnbalancedParenthesis { offset: at });
                };
                if pending_bond.is_some() {
                    return Err(self.unexpected(at));
                }
                branch_stack.push((p, at));
                self.pos += 1;
                continue;
            }
            if c == b')' {
                let Some((p, _)) = branch_stack.pop() else {
                    return Err(SmilesError::UnbalancedParenthesis { offset: at });
                };
                if let Some((_, off)) = pending_bond {
                    return Err(SmilesError::DanglingBond { offset: off });
                }
                prev = Some(p);
                self.pos += 1;
                continue;
            }
            if c == b'.' {
                return Err(SmilesError::MultipleFragments { offset: at });
            }
            if let Some(kind) = self.bond_symbol() {
                if pending_bond.is_some() || prev.is_none() {
                    return Err(self.unexpected(at));
                }
                pending_bond = Some((kind, at));
                continue;
            }
            if let Some(label) = self.ring_label()? {
                let Some(p) = prev else {
                    return Err(self.unexpected(at));
                };
                let explicit = pending_bond.take().map(|(k, _)| k);
                match rings.remove(&label) {
                    None => {
                        rings.insert(label, RingOpen { atom: p, bond: explicit, offset: at });
                    }
                    Some(open) => {
                        if open.atom == p || self.graph.bond(open.atom, p) != BondKind::None {
                            return Err(SmilesError::InvalidRingBond { offset: at });
                        }
                        let kind = explicit
                            .or(open.bond)
                            .unwrap_or_else(|| self.implicit_bond(open.atom, p));
                        self.graph.set_bond(open.atom, p, kind);
                    }
                }
                continue;
            }
            match self.atom()? {
                Some(idx) => {
                    if let Some(p) = prev {
                        let kind = pending_bond
                            .take()
                            .map(|(k, _)| k)
                            .unwrap_or_else(|| self.implicit_bond(p, idx));
                        self.graph.set_bond(p, idx, kind);
                    } else if !self.graph.atoms.is_empty() && idx > 0 {
                        return Err(self.unexpected(at));
                    }
                    prev = Some(idx);
                }
                None => return Err(self.unexpected(at)),
            }
        }
        if let Some((_, off)) = pending_bond {
            return Err(SmilesError::DanglingBond { offset: off });
        }
        if let Some((_, off)) = branch_stack.pop() {
            return Err(SmilesError::UnbalancedParenthesis { offset: off });
        }
        if let Some((label, open)) = rings.into_iter().next() {
            return Err(SmilesError::DanglingRingClosure { label, offset: open.offset });
        }
        if self.graph.atoms.is_empty() {
            return Err(SmilesError::EmptyInput);
        }
        debug_assert!(self.graph.check_invariants());
        Ok(self.graph)
    }
}

/// Parses a SMILES string against the default atom table.
pub fn parse_smiles(text: &str) -> Result<MolGraph, SmilesError> {
    parse_smiles_with(text, &AtomTable::default())
}

pub fn parse_smiles_with(text: &str, table: &AtomTable) -> Result<MolGraph, SmilesError> {
    let text = text.trim();
    Parser {
        text,
        bytes: text.as_bytes(),
        pos: 0,
        table,
        graph: MolGraph::new(Vec::<String>::new()),
        aromatic: Vec::new(),
    }
    .parse()
}

// ---------------------------------------------------------------------------
// SMILES writing

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WriteError {
    #[error("graph is disconnected")]
    DisconnectedGraph,
}

const ORGANIC_SUBSET: [&str; 10] = ["B", "C", "N", "O", "P", "S", "F", "Cl", "Br", "I"];

fn atom_text(symbol: &str) -> String {
    if ORGANIC_SUBSET.contains(&symbol) {
        symbol.to_string()
    } else {
        format!("[{symbol}]")
    }
}

fn ring_text(label: usize) -> String {
    if label < 10 {
        label.to_string()
    } else {
        format!("%{label:02}")
    }
}

/// Writes a connected graph as SMILES. Traversal follows the canonical atom
/// order, so isomorphic graphs produce identical strings.
pub fn write_smiles(g: &MolGraph) -> Result<String, WriteError> {
    if !g.is_connected() {
        return Err(WriteError::DisconnectedGraph);
    }
    let rank = {
        let order = canonical_order(g);
        let mut rank = vec![0; order.len()];
        for (r, &a) in order.iter().enumerate() {
            rank[a] = r;
        }
        rank
    };
    let n = g.atom_count();
    let start = (0..n).min_by_key(|&a| rank[a]).unwrap_or(0);

    // pass 1: DFS tree and ring-closure edges
    let sorted_neighbors = |a: usize| {
        let mut nb: Vec<(usize, BondKind)> = g.neighbors(a).collect();
        nb.sort_by_key(|&(b, _)| rank[b]);
        nb
    };
    let mut visited = vec![false; n];
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut parent = vec![usize::MAX; n];
    let mut order = Vec::with_capacity(n);
    let mut stack = vec![(start, usize::MAX)];
    while let Some((a, p)) = stack.pop() {
        if visited[a] {
            continue;
        }
        visited[a] = true;
        parent[a] = p;
        if p != usize::MAX {
            children[p].push(a);
        }
        order.push(a);
        for (b, _) in sorted_neighbors(a).into_iter().rev() {
            if !visited[b] {
                stack.push((b, a));
            }
        }
    }
    let mut position = vec![0; n];
    for (i, &a) in order.iter().enumerate() {
        position[a] = i;
    }
    // ring edges incident to each atom, in partner-rank order
    let mut ring_edges: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (a, b, _) in g.edges() {
        if parent[a] != b && parent[b] != a {
            ring_edges[a].push(b);
            ring_edges[b].push(a);
        }
    }
    for list in &mut ring_edges {
        list.sort_by_key(|&b| (position[b], rank[b]));
    }

    // pass 2: emission
    let mut out = String::new();
    let mut open_labels: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut free: Vec<bool> = vec![true; 100];
    let mut emitted = vec![false; n];
    emit(
        g,
        start,
        &children,
        &ring_edges,
        &mut emitted,
        &mut open_labels,
        &mut free,
        &mut out,
    );
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn emit(
    g: &MolGraph,
    a: usize,
    children: &[Vec<usize>],
    ring_edges: &[Vec<usize>],
    emitted: &mut [bool],
    open_labels: &mut BTreeMap<(usize, usize), usize>,
    free: &mut [bool],
    out: &mut String,
) {
    out.push_str(&atom_text(g.atom(a)));
    emitted[a] = true;
    // closings first so their labels can be reused by openings
    for &b in ring_edges[a].iter().filter(|&&b| emitted[b] && b != a) {
        if let Some(label) = open_labels.remove(&(b.min(a), b.max(a))) {
            out.push_str(&ring_text(label));
            free[label] = true;
        }
    }
    for &b in ring_edges[a].iter().filter(|&&b| !emitted[b]) {
        let label = (1..free.len()).find(|&l| free[l]).expect("ring labels exhausted");
        free[label] = false;
        open_labels.insert((a.min(b), a.max(b)), label);
        out.push_str(g.bond(a, b).smiles_symbol());
        out.push_str(&ring_text(label));
    }
    let kids = &children[a];
    for (i, &c) in kids.iter().enumerate() {
        let last = i + 1 == kids.len();
        if !last {
            out.push('(');
        }
        out.push_str(g.bond(a, c).smiles_symbol());
        emit(g, c, children, ring_edges, emitted, open_labels, free, out);
        if !last {
            out.push(')');
        }
    }
}

// ---------------------------------------------------------------------------
// Valence

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValenceViolation {
    pub atom_index: usize,
    pub bond_order_sum: f64,
    pub max_valence: u32,
}

/// Validity against the default atom table.
pub fn is_valid(g: &MolGraph) -> (bool, Vec<ValenceViolation>) {
    is_valid_with(g, &AtomTable::default())
}

/// An atom is valid when its summed bond order does not exceed its largest
/// allowed valence; aromatic bonds count 1.5. Unknown symbols are reported
/// with a maximum valence of 0.
pub fn is_valid_with(g: &MolGraph, table: &AtomTable) -> (bool, Vec<ValenceViolation>) {
    let violations: Vec<ValenceViolation> = (0..g.atom_count())
        .filter_map(|i| {
            let max = table.get(g.atom(i)).map_or(0, AtomKind::max_valence);
            let half = g.half_valence(i);
            (half > 2 * max || table.get(g.atom(i)).is_none()).then(|| ValenceViolation {
                atom_index: i,
                bond_order_sum: f64::from(half) / 2.0,
                max_valence: max,
            })
        })
        .collect();
    (violations.is_empty(), violations)
}

// ---------------------------------------------------------------------------
// Canonical labelling

/// Dense ranks: rank = number of distinct smaller keys.
fn dense_ranks<K: Ord + Clone>(keys: &[K]) -> Vec<usize> {
    let mut sorted: Vec<K> = keys.to_vec();
    sorted.sort();
    sorted.dedup();
    keys.iter()
        .map(|k| sorted.binary_search(k).expect("key present"))
        .collect()
}

/// Ranks in "number of strictly smaller elements" form, so a tied class of
/// size s at rank r occupies [r, r+s).
fn count_ranks<K: Ord + Clone>(keys: &[K]) -> Vec<usize> {
    let mut sorted: Vec<K> = keys.to_vec();
    sorted.sort();
    keys.iter().map(|k| sorted.partition_point(|x| x < k)).collect()
}

fn refine(g: &MolGraph, ranks: &mut Vec<usize>) {
    let n = g.atom_count();
    loop {
        let classes_before = dense_ranks(ranks).iter().max().map_or(0, |m| m + 1);
        let keys: Vec<(usize, Vec<(usize, usize)>)> = (0..n)
            .map(|a| {
                let mut nb: Vec<(usize, usize)> = g.neighbors(a).map(|(b, k)| (ranks[b], k.index())).collect();
                nb.sort_unstable();
                (ranks[a], nb)
            })
            .collect();
        let next = count_ranks(&keys);
        let classes_after = dense_ranks(&next).iter().max().map_or(0, |m| m + 1);
        *ranks = next;
        if classes_after == classes_before {
            break;
        }
    }
}

fn labelled_string(g: &MolGraph, order: &[usize]) -> String {
    let mut pos = vec![0; order.len()];
    for (i, &a) in order.iter().enumerate() {
        pos[a] = i;
    }
    let labels: Vec<&str> = order.iter().map(|&a| g.atom(a)).collect();
    let mut edges: Vec<(usize, usize, usize)> = g
        .edges()
        .map(|(a, b, k)| {
            let (x, y) = (pos[a].min(pos[b]), pos[a].max(pos[b]));
            (x, y, k.index())
        })
        .collect();
    edges.sort_unstable();
    let mut s = labels.join(",");
    s.push('|');
    let e: Vec<String> = edges.iter().map(|(x, y, k)| format!("{x}-{y}:{k}")).collect();
    s.push_str(&e.join(","));
    s
}

fn search(g: &MolGraph, mut ranks: Vec<usize>, best: &mut Option<(String, Vec<usize>)>) {
    refine(g, &mut ranks);
    let n = g.atom_count();
    // first non-singleton cell (lowest rank)
    let mut cell_rank = None;
    let mut counts = vec![0usize; n];
    for &r in &ranks {
        counts[r] += 1;
    }
    for (r, &c) in counts.iter().enumerate() {
        if c > 1 {
            cell_rank = Some(r);
            break;
        }
    }
    match cell_rank {
        None => {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by_key(|&a| ranks[a]);
            let s = labelled_string(g, &order);
            if best.as_ref().is_none_or(|(b, _)| s < *b) {
                *best = Some((s, order));
            }
        }
        Some(r) => {
            let members: Vec<usize> = (0..n).filter(|&a| ranks[a] == r).collect();
            for &v in &members {
                let mut next = ranks.clone();
                for &u in &members {
                    if u != v {
                        next[u] = r + 1;
                    }
                }
                search(g, next, best);
            }
        }
    }
}

fn canonical_search(g: &MolGraph) -> (String, Vec<usize>) {
    let n = g.atom_count();
    let initial: Vec<(String, usize, Vec<usize>)> = (0..n)
        .map(|a| {
            let mut kinds: Vec<usize> = g.neighbors(a).map(|(_, k)| k.index()).collect();
            kinds.sort_unstable();
            (g.atom(a).to_string(), kinds.len(), kinds)
        })
        .collect();
    let ranks = count_ranks(&initial);
    let mut best = None;
    search(g, ranks, &mut best);
    best.unwrap_or_else(|| (String::from("|"), Vec::new()))
}

/// Atom indices in canonical order.
pub fn canonical_order(g: &MolGraph) -> Vec<usize> {
    canonical_search(g).1
}

/// Canonical string: equal for two graphs iff they are isomorphic under a
/// label- and bond-preserving map.
///
/// Atoms are ranked by iterative neighbourhood refinement; remaining ties are
/// broken by individualising each member of the first tied cell in turn and
/// keeping the lexicographically smallest labelled listing.
pub fn canonical_form(g: &MolGraph) -> String {
    canonical_search(g).0
}

pub fn exact_match(a: &MolGraph, b: &MolGraph) -> bool {
    a.atom_count() == b.atom_count() && a.bond_count() == b.bond_count() && canonical_form(a) == canonical_form(b)
}

impl fmt::Display for MolGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match write_smiles(self) {
            Ok(s) => f.write_str(&s),
            Err(_) => f.write_str(&canonical_form(self)),
        }
    }
}
