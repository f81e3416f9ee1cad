//! Dataset records and their TSV / JSONL readers.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::molgraph::{parse_smiles, MolGraph};

use super::CliError;

/// Prompt wrapped around a free-text description for generation records.
pub fn generation_prompt(description: &str) -> String {
    format!("'{description}' is the description of molecule:")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    /// Description (generation) or task sentence (editing).
    pub description: String,
    pub smiles: String,
    pub source_smiles: Option<String>,
    /// Use `description` as the instruction without the generation prompt.
    #[serde(default)]
    pub verbatim: bool,
}

impl DatasetRecord {
    /// Instruction text as fed to the model.
    pub fn instruction(&self) -> String {
        if self.verbatim {
            self.description.clone()
        } else {
            generation_prompt(&self.description)
        }
    }
}

/// A record whose molecules parsed.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedRecord {
    pub record: DatasetRecord,
    pub target: MolGraph,
    pub source: Option<MolGraph>,
}

fn is_header(fields: &[&str]) -> bool {
    fields.first().is_some_and(|f| f.eq_ignore_ascii_case("id") || f.eq_ignore_ascii_case("cid"))
}

/// `id<TAB>smiles<TAB>description`; an optional header row is skipped.
pub fn parse_tsv(text: &str) -> Vec<DatasetRecord> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.splitn(3, '\t').collect();
        if lineno == 0 && is_header(&fields) {
            continue;
        }
        if fields.len() != 3 {
            log::warn!("line {}: expected 3 tab-separated fields, skipping", lineno + 1);
            continue;
        }
        out.push(DatasetRecord {
            id: fields[0].trim().to_string(),
            smiles: fields[1].trim().to_string(),
            description: fields[2].trim().to_string(),
            source_smiles: None,
            verbatim: false,
        });
    }
    out
}

#[derive(Debug, Deserialize)]
struct EditLine {
    instruction: String,
    #[serde(alias = "input_smiles")]
    input: Option<String>,
    #[serde(alias = "output_smiles")]
    output: String,
    id: Option<String>,
}

/// `{instruction, input, output}` per line; `input` may be absent, making it
/// a plain generation record with a verbatim instruction.
pub fn parse_jsonl(text: &str) -> Vec<DatasetRecord> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<EditLine>(line) {
            Ok(r) => out.push(DatasetRecord {
                id: r.id.unwrap_or_else(|| format!("{}", lineno + 1)),
                description: r.instruction,
                smiles: r.output,
                source_smiles: Some(r.input.unwrap_or_default()).filter(|s| !s.is_empty()),
                verbatim: true,
            }),
            Err(e) => log::warn!("line {}: malformed record ({e}), skipping", lineno + 1),
        }
    }
    out
}

pub fn read_records(path: &Path) -> Result<Vec<DatasetRecord>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let is_jsonl = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("jsonl") || e.eq_ignore_ascii_case("json"));
    Ok(if is_jsonl { parse_jsonl(&text) } else { parse_tsv(&text) })
}

/// Parses molecules, skipping records that fail with a logged reason.
pub fn parse_records(records: Vec<DatasetRecord>) -> Vec<ParsedRecord> {
    let mut out = Vec::with_capacity(records.len());
    for record in records {
        let target = match parse_smiles(&record.smiles) {
            Ok(g) => g,
            Err(e) => {
                log::warn!("record {}: target {:?} skipped: {e}", record.id, record.smiles);
                continue;
            }
        };
        let source = match &record.source_smiles {
            None => None,
            Some(s) => match parse_smiles(s) {
                Ok(g) => Some(g),
                Err(e) => {
                    log::warn!("record {}: source {s:?} skipped: {e}", record.id);
                    continue;
                }
            },
        };
        out.push(ParsedRecord { record, target, source });
    }
    out
}

pub fn to_tsv(records: &[DatasetRecord]) -> String {
    let mut s = String::from("id\tsmiles\tdescription\n");
    for r in records {
        s.push_str(&format!("{}\t{}\t{}\n", r.id, r.smiles, r.description));
    }
    s
}
