//! Command-line surface: configuration, datasets, the toy corpus and the
//! `gen-toy`, `build-vocab`, `pretrain`, `train`, `sample` and `eval`
//! commands.

pub mod config;
pub mod data;
pub mod toy;

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::denoiser::{generate, DenoiserError, Model};
use crate::diffusion::{derive_seed, DiffusionError, NoiseSchedule};
use crate::metrics::{evaluate_smiles, write_csv, MetricsError};
use crate::molgraph::{write_smiles, AtomTable};
use crate::training::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, Objective, TrainError, Trainer};
use crate::vocab::{encode_instance, EncodeError, SequenceLayout, Target, TokenSequence, VocabError, Vocabulary};

use config::RunConfig;
use data::{parse_records, read_records, DatasetRecord, ParsedRecord};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "graphdiff", version, about = "Instruction-conditioned graph diffusion for molecules")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// key = value configuration file
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a configuration key (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a templated toy corpus (train.tsv, test.tsv)
    GenToy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        n_train: usize,
        #[arg(long, default_value_t = 200)]
        n_test: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Build the text vocabulary from dataset instructions
    BuildVocab {
        #[arg(long, required = true, num_args = 1..)]
        corpus: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        min_count: Option<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Masked-LM pretraining
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Diffusion training
    Train {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Start from the parameters of an existing (e.g. pretrained) checkpoint
        #[arg(long, conflicts_with = "resume")]
        init: Option<PathBuf>,
        /// Continue an interrupted run
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Generate one SMILES line per input record
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// TSV or JSONL dataset, or a text file with one instruction per line
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score generated SMILES against references
    Eval {
        #[arg(long)]
        generated: PathBuf,
        /// TSV or JSONL dataset, or one SMILES per line
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: Option<u64>,
    config: BTreeMap<String, String>,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
}

fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn write_manifest(
    path: &Path,
    command: &str,
    seed: Option<u64>,
    config: Option<&RunConfig>,
    inputs: &[&Path],
    outputs: &[&Path],
) -> Result<(), CliError> {
    let mut digests = BTreeMap::new();
    for p in inputs {
        digests.insert(p.display().to_string(), sha256_file(p)?);
    }
    let m = Manifest {
        command,
        version: VERSION,
        seed,
        config: config.map(|c| c.values().clone()).unwrap_or_default(),
        inputs: digests,
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
    };
    let mut json = serde_json::to_string_pretty(&m)?;
    json.push('\n');
    write_file(path, json.as_bytes())
}

fn file_manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn resolve_config(args: &ConfigArgs) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        cfg.apply_file(&text)?;
    }
    cfg.apply_overrides(&args.set)?;
    Ok(cfg)
}

fn read_vocab(path: &Path) -> Result<Vocabulary, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(Vocabulary::from_json(&text)?)
}

fn load_parsed(path: &Path) -> Result<Vec<ParsedRecord>, CliError> {
    let records = read_records(path)?;
    let parsed = parse_records(records);
    if parsed.is_empty() {
        return Err(CliError::Data(format!("{}: no usable records", path.display())));
    }
    Ok(parsed)
}

/// Encodes records for training; records that do not fit the layout or the
/// vocabulary are skipped with a warning.
pub fn encode_records(vocab: &Vocabulary, layout: &SequenceLayout, records: &[ParsedRecord]) -> Vec<TokenSequence> {
    records
        .iter()
        .filter_map(|r| {
            match encode_instance(vocab, layout, &r.record.instruction(), r.source.as_ref(), Target::Graph(&r.target)) {
                Ok(seq) => Some(seq),
                Err(e) => {
                    log::warn!("record {} skipped: {e}", r.record.id);
                    None
                }
            }
        })
        .collect()
}

/// Paired, text-only and graph-only views of every record.
pub fn pretraining_corpus(vocab: &Vocabulary, layout: &SequenceLayout, records: &[ParsedRecord]) -> Vec<TokenSequence> {
    let mut out = encode_records(vocab, layout, records);
    for r in records {
        if let Ok(s) = encode_instance(vocab, layout, &r.record.instruction(), r.source.as_ref(), Target::Absent) {
            out.push(s);
        }
        if let Ok(s) = encode_instance(vocab, layout, "", None, Target::Graph(&r.target)) {
            out.push(s);
        }
    }
    out
}

fn run_training(
    objective: Objective,
    data_path: &Path,
    vocab_path: &Path,
    out: &Path,
    init: Option<&Path>,
    resume: Option<&Path>,
    cfg_args: &ConfigArgs,
) -> Result<(), CliError> {
    let cfg = resolve_config(cfg_args)?;
    let vocab = read_vocab(vocab_path)?;
    let digest = vocab.digest();
    let layout = cfg.layout()?;
    let records = load_parsed(data_path)?;
    let data = match objective {
        Objective::Diffusion => encode_records(&vocab, &layout, &records),
        Objective::MaskedLm => pretraining_corpus(&vocab, &layout, &records),
    };
    log::info!("{} training sequences", data.len());
    let train_cfg = cfg.train()?;
    let seed = train_cfg.seed;

    let mut trainer = if let Some(path) = resume {
        let ck = load_checkpoint(path, Some(&digest))?;
        ck.into_trainer()?
    } else {
        let model = match init {
            Some(path) => load_checkpoint(path, Some(&digest))?.model,
            None => Model::new(cfg.denoiser(&vocab)?, &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 1)))?,
        };
        Trainer::new(model, train_cfg, objective)?
    };

    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let trace_path = out.join("trace.jsonl");
    let ck_path = out.join("checkpoint.bin");
    let trace_file = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .open(&trace_path)
        .map_err(|e| CliError::io(&trace_path, e))?;
    let mut trace = BufWriter::new(trace_file);
    let max_steps: u64 = cfg.get("max_steps")?;
    let every: u64 = cfg.get("checkpoint_every")?;
    let mut io_error = None;
    let result = trainer.run(&data, &vocab, max_steps, |t, rec| {
        let line = serde_json::to_string(rec).expect("record serializes");
        if let Err(e) = writeln!(trace, "{line}") {
            io_error.get_or_insert(CliError::io(&trace_path, e));
        }
        if every > 0 && t.step % every == 0 {
            if let Err(e) = trace.flush() {
                io_error.get_or_insert(CliError::io(&trace_path, e));
            }
            if let Err(e) = save_checkpoint(&ck_path, &Checkpoint::from_trainer(t, &digest, Some(layout))) {
                io_error.get_or_insert(e.into());
            }
            log::info!("step {} loss {:.4}", t.step, rec.loss);
        }
        Ok(())
    });
    trace.flush().map_err(|e| CliError::io(&trace_path, e))?;
    result?;
    if let Some(e) = io_error {
        return Err(e);
    }
    save_checkpoint(&ck_path, &Checkpoint::from_trainer(&trainer, &digest, Some(layout)))?;
    let mut inputs = vec![data_path, vocab_path];
    inputs.extend(init);
    inputs.extend(resume);
    let command = match objective {
        Objective::Diffusion => "train",
        Objective::MaskedLm => "pretrain",
    };
    write_manifest(
        &out.join("manifest.json"),
        command,
        Some(seed),
        Some(&cfg),
        &inputs,
        &[&ck_path, &trace_path],
    )
}

fn sample_inputs(path: &Path) -> Result<Vec<DatasetRecord>, CliError> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    if ["tsv", "jsonl", "json"].iter().any(|e| ext.eq_ignore_ascii_case(e)) {
        return read_records(path);
    }
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| DatasetRecord {
            id: format!("{}", i + 1),
            description: l.trim().to_string(),
            smiles: String::new(),
            source_smiles: None,
            verbatim: true,
        })
        .collect())
}

fn run_sample(checkpoint: &Path, vocab_path: &Path, input: &Path, out: &Path, cfg_args: &ConfigArgs) -> Result<(), CliError> {
    let cfg = resolve_config(cfg_args)?;
    let vocab = read_vocab(vocab_path)?;
    let ck = load_checkpoint(checkpoint, Some(&vocab.digest()))?;
    let layout = match ck.layout {
        Some(l) => l,
        None => cfg.layout()?,
    };
    let seed: u64 = cfg.get("seed")?;
    let steps: u32 = cfg.get("sample_steps")?;
    let top_k: usize = cfg.get("top_k")?;
    let horizon: u32 = ck.train.as_ref().map_or(cfg.get("horizon")?, |t| t.horizon);
    let schedule = NoiseSchedule::new(horizon)?;
    let permute: bool = cfg.get("permute_positions")?;
    let records = sample_inputs(input)?;
    let mut lines = String::new();
    let mut failures = 0usize;
    for (i, r) in records.iter().enumerate() {
        let source = match &r.source_smiles {
            Some(s) => match crate::molgraph::parse_smiles(s) {
                Ok(g) => Some(g),
                Err(e) => {
                    log::warn!("record {}: source skipped: {e}", r.id);
                    None
                }
            },
            None => None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
        let generated = encode_instance(&vocab, &layout, &r.instruction(), source.as_ref(), Target::Masked)
            .map_err(CliError::from)
            .and_then(|seq| Ok(generate(&ck.model, &vocab, &schedule, &seq, steps, top_k, permute, &mut rng)?))
            .and_then(|g| write_smiles(&g).map_err(|e| CliError::Data(e.to_string())));
        match generated {
            Ok(s) => lines.push_str(&s),
            Err(e) => {
                failures += 1;
                log::debug!("record {}: generation failed: {e}", r.id);
            }
        }
        lines.push('\n');
    }
    log::info!("{} records, {} generation failures", records.len(), failures);
    write_file(out, lines.as_bytes())?;
    write_manifest(
        &file_manifest_path(out),
        "sample",
        Some(seed),
        Some(&cfg),
        &[checkpoint, vocab_path, input],
        &[out],
    )
}

fn reference_smiles(path: &Path) -> Result<Vec<String>, CliError> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    if ["tsv", "jsonl", "json"].iter().any(|e| ext.eq_ignore_ascii_case(e)) {
        return Ok(read_records(path)?.into_iter().map(|r| r.smiles).collect());
    }
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(text.lines().map(|l| l.trim().to_string()).collect())
}

fn run_eval(generated: &Path, reference: &Path, out: &Path, csv: Option<&Path>) -> Result<(), CliError> {
    let text = fs::read_to_string(generated).map_err(|e| CliError::io(generated, e))?;
    let gen: Vec<&str> = text.lines().collect();
    let refs = reference_smiles(reference)?;
    let report = evaluate_smiles(&gen, &refs)?;
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    write_file(out, json.as_bytes())?;
    let mut outputs = vec![out];
    if let Some(path) = csv {
        let f = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
        write_csv(&report, f)?;
        outputs.push(path);
    }
    log::info!(
        "valid {:.3} exact {:.3} morgan fts {:.3}",
        report.valid_fraction,
        report.exact_fraction,
        report.morgan_fts_mean
    );
    write_manifest(&file_manifest_path(out), "eval", None, None, &[generated, reference], &outputs)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenToy {
            out,
            n_train,
            n_test,
            seed,
        } => {
            if n_train == 0 || n_test == 0 {
                return Err(CliError::Config("n_train and n_test must be at least 1".into()));
            }
            let (train, test) = toy::gen_toy(n_train, n_test, seed);
            let (tp, sp) = (out.join("train.tsv"), out.join("test.tsv"));
            write_file(&tp, data::to_tsv(&train).as_bytes())?;
            write_file(&sp, data::to_tsv(&test).as_bytes())?;
            let mut cfg = BTreeMap::new();
            cfg.insert("n_train".to_string(), n_train.to_string());
            cfg.insert("n_test".to_string(), n_test.to_string());
            let manifest = Manifest {
                command: "gen-toy",
                version: VERSION,
                seed: Some(seed),
                config: cfg,
                inputs: BTreeMap::new(),
                outputs: vec![tp.display().to_string(), sp.display().to_string()],
            };
            let mut json = serde_json::to_string_pretty(&manifest)?;
            json.push('\n');
            write_file(&out.join("manifest.json"), json.as_bytes())
        }
        Command::BuildVocab {
            corpus,
            out,
            min_count,
            cfg,
        } => {
            let cfg = resolve_config(&cfg)?;
            let min_count = match min_count {
                Some(m) => m,
                None => cfg.get("min_count")?,
            };
            let mut instructions = Vec::new();
            for path in &corpus {
                instructions.extend(read_records(path)?.iter().map(|r| r.instruction()));
            }
            let vocab = Vocabulary::build(instructions.iter().map(String::as_str), min_count, &AtomTable::default())?;
            write_file(&out, vocab.to_json().as_bytes())?;
            let inputs: Vec<&Path> = corpus.iter().map(PathBuf::as_path).collect();
            write_manifest(&file_manifest_path(&out), "build-vocab", None, Some(&cfg), &inputs, &[&out])
        }
        Command::Pretrain {
            corpus,
            vocab,
            out,
            resume,
            cfg,
        } => run_training(Objective::MaskedLm, &corpus, &vocab, &out, None, resume.as_deref(), &cfg),
        Command::Train {
            train,
            vocab,
            out,
            init,
            resume,
            cfg,
        } => run_training(
            Objective::Diffusion,
            &train,
            &vocab,
            &out,
            init.as_deref(),
            resume.as_deref(),
            &cfg,
        ),
        Command::Sample {
            checkpoint,
            vocab,
            input,
            out,
            cfg,
        } => run_sample(&checkpoint, &vocab, &input, &out, &cfg),
        Command::Eval {
            generated,
            reference,
            out,
            csv,
        } => run_eval(&generated, &reference, &out, csv.as_deref()),
    }
}
