//! Templated description/molecule corpus.
//!
//! Families: linear alkanes, primary alcohols, primary amines, carbon rings,
//! ethers and secondary amines, all at most 12 heavy atoms. Each molecule has
//! several phrasings; numbers are spelled out so that counts are shared words
//! across families. Held-out molecules come only from the chain families so
//! every held-out description combines words seen during training.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::molgraph::{canonical_form, parse_smiles};

use super::data::DatasetRecord;

pub const MAX_TOY_ATOMS: usize = 12;

const NUMBERS: [&str; 12] = [
    "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven", "twelve",
];

fn word(n: usize) -> &'static str {
    NUMBERS[n - 1]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Family {
    Alkane,
    Alcohol,
    Amine,
    Ring,
    Ether,
    SecondaryAmine,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToyMolecule {
    pub family: Family,
    pub smiles: String,
    pub phrasings: Vec<String>,
}

fn chain(n: usize) -> String {
    "C".repeat(n)
}

fn single_chain(family: Family, n: usize, tail: &str, templates: &[&str]) -> ToyMolecule {
    ToyMolecule {
        family,
        smiles: format!("{}{tail}", chain(n)),
        phrasings: templates.iter().map(|t| t.replace("{n}", word(n))).collect(),
    }
}

fn two_chain(family: Family, a: usize, b: usize, link: &str, noun: &str) -> ToyMolecule {
    let mut phrasings = Vec::new();
    for (x, y) in [(a, b), (b, a)] {
        phrasings.push(format!(
            "{noun} with {} carbon atoms on one side and {} on the other",
            word(x),
            word(y)
        ));
        phrasings.push(format!("{noun} joining chains of {} and {} carbon atoms", word(x), word(y)));
    }
    phrasings.dedup();
    ToyMolecule {
        family,
        smiles: format!("{}{link}{}", chain(a), chain(b)),
        phrasings,
    }
}

/// Every molecule of the toy universe, in a fixed order.
pub fn toy_molecules() -> Vec<ToyMolecule> {
    let mut out = Vec::new();
    for n in 1..=12 {
        out.push(single_chain(
            Family::Alkane,
            n,
            "",
            &[
                "a linear alkane with {n} carbon atoms",
                "an unbranched alkane containing {n} carbon atoms",
                "a straight chain saturated hydrocarbon of {n} carbon atoms",
            ],
        ));
    }
    for n in 1..=11 {
        out.push(single_chain(
            Family::Alcohol,
            n,
            "O",
            &[
                "a primary alcohol with {n} carbon atoms",
                "a linear alcohol containing {n} carbon atoms and a terminal hydroxy group",
                "an unbranched primary alcohol of {n} carbon atoms",
            ],
        ));
        out.push(single_chain(
            Family::Amine,
            n,
            "N",
            &[
                "a primary amine with {n} carbon atoms",
                "a linear amine containing {n} carbon atoms and a terminal amino group",
                "an unbranched primary amine of {n} carbon atoms",
            ],
        ));
    }
    for n in 3..=8 {
        out.push(ToyMolecule {
            family: Family::Ring,
            smiles: format!("C1{}1", chain(n - 1)),
            phrasings: vec![
                format!("a carbon ring of size {}", word(n)),
                format!("a saturated carbocycle with {} ring atoms", word(n)),
                format!("a cycloalkane with {} carbon atoms in the ring", word(n)),
            ],
        });
    }
    for a in 1..=11 {
        for b in a..=11 - a {
            out.push(two_chain(Family::Ether, a, b, "O", "an ether"));
            out.push(two_chain(Family::SecondaryAmine, a, b, "N", "a secondary amine"));
        }
    }
    out
}

/// Train and test records with disjoint molecules (by canonical form).
/// About a tenth of the chain-family molecules are held out.
pub fn gen_toy(n_train: usize, n_test: usize, seed: u64) -> (Vec<DatasetRecord>, Vec<DatasetRecord>) {
    let mols = toy_molecules();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut candidates: Vec<usize> = (0..mols.len())
        .filter(|&i| mols[i].family != Family::Ring && parse_smiles(&mols[i].smiles).is_ok_and(|g| g.atom_count() > 1))
        .collect();
    candidates.shuffle(&mut rng);
    let held: BTreeSet<String> = candidates[..mols.len() / 10]
        .iter()
        .map(|&i| canonical_form(&parse_smiles(&mols[i].smiles).expect("toy smiles")))
        .collect();
    let is_held = |m: &ToyMolecule| held.contains(&canonical_form(&parse_smiles(&m.smiles).expect("toy smiles")));

    let pool = |test: bool| -> Vec<(String, String)> {
        mols.iter()
            .filter(|m| is_held(m) == test)
            .flat_map(|m| m.phrasings.iter().map(move |p| (m.smiles.clone(), p.clone())))
            .collect()
    };
    let mut draw = |mut pool: Vec<(String, String)>, n: usize, tag: &str| -> Vec<DatasetRecord> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n && !pool.is_empty() {
            pool.shuffle(&mut rng);
            for (smiles, description) in pool.iter().take(n - out.len()) {
                out.push(DatasetRecord {
                    id: format!("toy-{tag}-{:05}", out.len() + 1),
                    description: description.clone(),
                    smiles: smiles.clone(),
                    source_smiles: None,
                    verbatim: false,
                });
            }
        }
        out
    };
    let train = draw(pool(false), n_train, "train");
    let test = draw(pool(true), n_test, "test");
    (train, test)
}
