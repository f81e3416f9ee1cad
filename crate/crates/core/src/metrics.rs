//! Validity, exact match and Morgan fingerprint similarity.

use std::hash::Hasher;
use std::io;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::molgraph::{exact_match, is_valid, parse_smiles, write_smiles, MolGraph};

pub const DEFAULT_RADIUS: usize = 2;
pub const DEFAULT_WIDTH: usize = 2048;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("fingerprint widths differ: {0} vs {1}")]
    WidthMismatch(usize, usize),
    #[error("fingerprint width {0} is not a power of two")]
    BadWidth(usize),
    #[error("nothing to evaluate")]
    EmptyInput,
    #[error("{generated} generations for {references} references")]
    LengthMismatch { generated: usize, references: usize },
    #[error("reference {index} is not a valid molecule: {reason}")]
    BadReference { index: usize, reason: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Fixed-width bitset.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Fingerprint {
    width: usize,
    words: Vec<u64>,
}

impl Fingerprint {
    pub fn empty(width: usize) -> Result<Self, MetricsError> {
        if !width.is_power_of_two() {
            return Err(MetricsError::BadWidth(width));
        }
        Ok(Fingerprint {
            width,
            words: vec![0; width.div_ceil(64)],
        })
    }

    pub fn from_bits(width: usize, bits: impl IntoIterator<Item = usize>) -> Result<Self, MetricsError> {
        let mut fp = Self::empty(width)?;
        for b in bits {
            fp.set(b % width);
        }
        Ok(fp)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn set(&mut self, bit: usize) {
        self.words[bit / 64] |= 1 << (bit % 64);
    }

    pub fn get(&self, bit: usize) -> bool {
        self.words[bit / 64] >> (bit % 64) & 1 == 1
    }

    pub fn count_ones(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }
}

fn atom_code(g: &MolGraph, i: usize) -> u64 {
    let mut h = FnvHasher::default();
    h.write(g.atom(i).as_bytes());
    h.write(&[0]);
    h.write(&(g.degree(i) as u32).to_le_bytes());
    h.write(&g.half_valence(i).to_le_bytes());
    h.finish()
}

/// Per-round atom codes; `codes[r][i]` is atom i's code after r rounds.
///
/// Round 0 hashes the element symbol, a zero byte, the degree and the doubled
/// bond-order sum (u32 LE each). Round r hashes r, the atom's previous code
/// and its sorted `(bond category u8, neighbour code u64 LE)` list.
pub fn morgan_codes(g: &MolGraph, radius: usize) -> Vec<Vec<u64>> {
    let n = g.atom_count();
    let mut rounds = vec![(0..n).map(|i| atom_code(g, i)).collect::<Vec<_>>()];
    for r in 1..=radius {
        let prev = &rounds[r - 1];
        let next = (0..n)
            .map(|i| {
                let mut nb: Vec<(u8, u64)> = g.neighbors(i).map(|(j, b)| (b.index() as u8, prev[j])).collect();
                nb.sort_unstable();
                let mut h = FnvHasher::default();
                h.write(&(r as u32).to_le_bytes());
                h.write(&prev[i].to_le_bytes());
                for (b, c) in nb {
                    h.write(&[b]);
                    h.write(&c.to_le_bytes());
                }
                h.finish()
            })
            .collect();
        rounds.push(next);
    }
    rounds
}

pub fn morgan_fingerprint(g: &MolGraph, radius: usize, width: usize) -> Result<Fingerprint, MetricsError> {
    let mut fp = Fingerprint::empty(width)?;
    for round in morgan_codes(g, radius) {
        for code in round {
            fp.set((code % width as u64) as usize);
        }
    }
    Ok(fp)
}

pub fn tanimoto(a: &Fingerprint, b: &Fingerprint) -> Result<f64, MetricsError> {
    if a.width != b.width {
        return Err(MetricsError::WidthMismatch(a.width, b.width));
    }
    let (mut inter, mut union) = (0u32, 0u32);
    for (x, y) in a.words.iter().zip(&b.words) {
        inter += (x & y).count_ones();
        union += (x | y).count_ones();
    }
    Ok(if union == 0 { 1.0 } else { f64::from(inter) / f64::from(union) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub reference: String,
    pub generated: String,
    pub valid: bool,
    pub exact: bool,
    pub fts: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_total: usize,
    pub valid_fraction: f64,
    pub exact_fraction: f64,
    pub morgan_fts_mean: f64,
    /// Reserved; not computed.
    pub maccs_fts_mean: Option<f64>,
    /// Reserved; not computed.
    pub rdk_fts_mean: Option<f64>,
    /// Reserved; not computed.
    pub fcd: Option<f64>,
    pub records: Vec<InstanceRecord>,
}

/// Scores generations against references. A generation is `None` when it
/// could not be produced or parsed; it then counts as invalid with similarity
/// 0. Invalid parsed generations also score 0 similarity, and the mean is
/// taken over all instances.
pub fn evaluate(pairs: &[(Option<MolGraph>, MolGraph)]) -> Result<EvalReport, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut records = Vec::with_capacity(pairs.len());
    for (index, (gen, reference)) in pairs.iter().enumerate() {
        let ref_smiles = write_smiles(reference).map_err(|e| MetricsError::BadReference {
            index,
            reason: e.to_string(),
        })?;
        let record = match gen {
            None => InstanceRecord {
                reference: ref_smiles,
                generated: String::new(),
                valid: false,
                exact: false,
                fts: 0.0,
            },
            Some(g) => {
                let written = write_smiles(g);
                let valid = written.is_ok() && is_valid(g).0;
                let exact = valid && exact_match(g, reference);
                let fts = if valid {
                    let a = morgan_fingerprint(g, DEFAULT_RADIUS, DEFAULT_WIDTH)?;
                    let b = morgan_fingerprint(reference, DEFAULT_RADIUS, DEFAULT_WIDTH)?;
                    tanimoto(&a, &b)?
                } else {
                    0.0
                };
                InstanceRecord {
                    reference: ref_smiles,
                    generated: written.unwrap_or_default(),
                    valid,
                    exact,
                    fts,
                }
            }
        };
        records.push(record);
    }
    let n = records.len() as f64;
    let frac = |f: fn(&InstanceRecord) -> bool| records.iter().filter(|r| f(r)).count() as f64 / n;
    Ok(EvalReport {
        n_total: records.len(),
        valid_fraction: frac(|r| r.valid),
        exact_fraction: frac(|r| r.exact),
        morgan_fts_mean: records.iter().map(|r| r.fts).sum::<f64>() / n,
        maccs_fts_mean: None,
        rdk_fts_mean: None,
        fcd: None,
        records,
    })
}

/// Line-parallel SMILES evaluation. Empty or unparseable generated lines are
/// failures; every reference must parse.
pub fn evaluate_smiles<G: AsRef<str>, R: AsRef<str>>(generated: &[G], references: &[R]) -> Result<EvalReport, MetricsError> {
    if generated.len() != references.len() {
        return Err(MetricsError::LengthMismatch {
            generated: generated.len(),
            references: references.len(),
        });
    }
    let mut pairs = Vec::with_capacity(references.len());
    for (index, (g, r)) in generated.iter().zip(references).enumerate() {
        let reference = parse_smiles(r.as_ref().trim()).map_err(|e| MetricsError::BadReference {
            index,
            reason: e.to_string(),
        })?;
        let text = g.as_ref().trim();
        let gen = if text.is_empty() { None } else { parse_smiles(text).ok() };
        pairs.push((gen, reference));
    }
    evaluate(&pairs)
}

/// Per-instance CSV with a header row.
pub fn write_csv<W: io::Write>(report: &EvalReport, out: W) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(out);
    for r in &report.records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn fnv(bytes: &[u8]) -> u64 {
        // reference FNV-1a 64 loop
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for &b in bytes {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }

    #[test]
    fn fnv_crate_matches_reference_loop() {
        let mut h = FnvHasher::default();
        h.write(b"C\0abc");
        assert_eq!(h.finish(), fnv(b"C\0abc"));
    }

    #[test]
    fn hand_enumerated_codes_for_ethanol() {
        let g = parse_smiles("CCO").unwrap();
        let init = |sym: &str, deg: u32, half: u32| {
            let mut b = sym.as_bytes().to_vec();
            b.push(0);
            b.extend(deg.to_le_bytes());
            b.extend(half.to_le_bytes());
            fnv(&b)
        };
        let c_end = init("C", 1, 2);
        let c_mid = init("C", 2, 4);
        let o = init("O", 1, 2);
        let codes = morgan_codes(&g, 1);
        assert_eq!(codes[0], [c_end, c_mid, o]);
        let round1 = |own: u64, mut nb: Vec<(u8, u64)>| {
            nb.sort_unstable();
            let mut b = 1u32.to_le_bytes().to_vec();
            b.extend(own.to_le_bytes());
            for (k, c) in nb {
                b.push(k);
                b.extend(c.to_le_bytes());
            }
            fnv(&b)
        };
        assert_eq!(
            codes[1],
            [
                round1(c_end, vec![(1, c_mid)]),
                round1(c_mid, vec![(1, c_end), (1, o)]),
                round1(o, vec![(1, c_mid)]),
            ]
        );
        // ethane's terminal carbons share the radius-0 code with ethanol's end carbon
        let cc = morgan_codes(&parse_smiles("CC").unwrap(), 0);
        assert_eq!(cc[0], [c_end, c_end]);
    }

    #[test]
    fn single_atoms_differ() {
        let c = morgan_fingerprint(&parse_smiles("C").unwrap(), 2, 2048).unwrap();
        let o = morgan_fingerprint(&parse_smiles("O").unwrap(), 2, 2048).unwrap();
        assert_ne!(c, o);
    }

    #[test]
    fn tanimoto_examples() {
        let a = Fingerprint::from_bits(64, [1, 2, 3]).unwrap();
        let b = Fingerprint::from_bits(64, [2, 3, 4]).unwrap();
        assert_eq!(tanimoto(&a, &b).unwrap(), 0.5);
        assert_eq!(tanimoto(&a, &a).unwrap(), 1.0);
        let c = Fingerprint::from_bits(64, [10]).unwrap();
        assert_eq!(tanimoto(&a, &c).unwrap(), 0.0);
        let z = Fingerprint::empty(64).unwrap();
        assert_eq!(tanimoto(&z, &z).unwrap(), 1.0);
        let w = Fingerprint::empty(128).unwrap();
        assert!(matches!(tanimoto(&a, &w), Err(MetricsError::WidthMismatch(64, 128))));
        assert!(matches!(Fingerprint::empty(100), Err(MetricsError::BadWidth(100))));
    }

    #[test]
    fn report_identity_and_failures() {
        let refs = ["CCO", "C1CC1", "CN"];
        let r = evaluate_smiles(&refs, &refs).unwrap();
        assert_eq!((r.valid_fraction, r.exact_fraction, r.morgan_fts_mean), (1.0, 1.0, 1.0));
        let r = evaluate_smiles(&["", "C(", "xx"], &refs).unwrap();
        assert_eq!((r.valid_fraction, r.exact_fraction, r.morgan_fts_mean), (0.0, 0.0, 0.0));
        assert!(matches!(evaluate(&[]), Err(MetricsError::EmptyInput)));
        let json = serde_json::to_value(&r).unwrap();
        assert!(json["fcd"].is_null() && json["maccs_fts_mean"].is_null());
    }

    #[test]
    fn mixed_report_counts() {
        // exact, exact, valid but different, invalid (pentavalent carbon)
        let gens = ["CCO", "CN", "CCC", "C(C)(C)(C)(C)C"];
        let refs = ["OCC", "NC", "CCO", "CC"];
        let r = evaluate_smiles(&gens, &refs).unwrap();
        assert_eq!(r.exact_fraction, 0.5);
        assert_eq!(r.valid_fraction, 0.75);
        assert!(r.records.iter().filter(|x| x.exact).all(|x| x.fts == 1.0));
        assert_eq!(r.records[3].fts, 0.0);
        let mut buf = Vec::new();
        write_csv(&r, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("reference,generated,valid,exact,fts\n"));
        assert_eq!(text.lines().count(), 5);
    }

    #[test]
    fn fingerprint_bits_come_from_all_rounds() {
        let g = parse_smiles("CCO").unwrap();
        let fp = morgan_fingerprint(&g, 2, 2048).unwrap();
        let bits: BTreeSet<usize> = morgan_codes(&g, 2)
            .into_iter()
            .flatten()
            .map(|c| (c % 2048) as usize)
            .collect();
        assert_eq!(fp.count_ones() as usize, bits.len());
        assert!(bits.iter().all(|&b| fp.get(b)));
    }
}
