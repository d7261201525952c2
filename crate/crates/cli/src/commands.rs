use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context as _};
use clap::Args;
use newscap::bpe::{train_merges, BpeError, BpeVocab};
use newscap::checkpoint::{check_config, load_checkpoint, save_checkpoint, CheckpointError};
use newscap::context::ContextError;
use newscap::dataset::{load_jsonl, load_manifest, prepare, DatasetError, NewsExample, PreparedExample, Split};
use newscap::generation::{generate as decode, write_predictions, DecodeMode, Prediction};
use newscap::gradsuite::{check_names, run_suite};
use newscap::metrics::evaluate_run;
use newscap::model::CaptionModel;
use newscap::trainer::{dataset_accuracy, train as run_training, write_log};
use newscap::{par, Error};

use crate::config::{self, Loaded};
use crate::Invalid;

pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<Invalid>() {
            return 1;
        }
        if let Some(err) = cause.downcast_ref::<Error>() {
            return core_code(err);
        }
        if let Some(err) = cause.downcast_ref::<DatasetError>() {
            return dataset_code(err);
        }
        if let Some(err) = cause.downcast_ref::<CheckpointError>() {
            return checkpoint_code(err);
        }
        if let Some(err) = cause.downcast_ref::<BpeError>() {
            return bpe_code(err);
        }
    }
    2
}

fn core_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::Dataset(d) => dataset_code(d),
        Error::Checkpoint(c) => checkpoint_code(c),
        Error::Bpe(b) => bpe_code(b),
        Error::Context(c) => context_code(c),
        _ => 2,
    }
}

fn dataset_code(e: &DatasetError) -> u8 {
    match e {
        DatasetError::Io(_) => 2,
        DatasetError::Context { source, .. } => context_code(source),
        _ => 1,
    }
}

fn context_code(e: &ContextError) -> u8 {
    match e {
        ContextError::Io(_) => 2,
        _ => 1,
    }
}

fn checkpoint_code(e: &CheckpointError) -> u8 {
    match e {
        CheckpointError::Io(_) => 2,
        _ => 1,
    }
}

fn bpe_code(e: &BpeError) -> u8 {
    match e {
        BpeError::Io(_) => 2,
        _ => 1,
    }
}

#[derive(Args)]
pub struct BpeTrainArgs {
    /// Text corpus; each non-empty line is one document.
    #[arg(long)]
    corpus: PathBuf,
    /// Target vocabulary size, special and byte tokens included.
    #[arg(long, default_value_t = newscap::bpe::DEFAULT_VOCAB_SIZE)]
    vocab_size: usize,
    #[arg(long)]
    out: PathBuf,
}

pub fn bpe_train(a: BpeTrainArgs) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(&a.corpus).with_context(|| format!("reading corpus {}", a.corpus.display()))?;
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    let vocab = train_merges(&lines, a.vocab_size)?;
    vocab.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    println!("merges {} vocab_size {}", vocab.merges().len(), vocab.len());
    Ok(())
}

/// Options shared by every command that reads the dataset.
#[derive(Args)]
pub struct DataArgs {
    /// Dataset JSONL; context paths resolve against its directory.
    #[arg(long)]
    data: PathBuf,
    /// Run configuration (JSON). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// BPE vocabulary; overrides `paths.vocab`.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Split manifest; overrides `paths.manifest`.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.peak_lr=3e-4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

struct Workspace {
    loaded: Loaded,
    vocab: BpeVocab,
    examples: Vec<NewsExample>,
}

impl DataArgs {
    fn open(&self) -> anyhow::Result<Workspace> {
        let loaded = config::load(self.config.as_deref(), &self.overrides)?;
        let vocab_path = match (&self.vocab, &loaded.config.paths.vocab) {
            (Some(p), _) => p.clone(),
            (None, Some(p)) => loaded.resolve(p),
            (None, None) => return Err(Invalid("no vocabulary: pass --vocab or set paths.vocab".into()).into()),
        };
        let vocab = BpeVocab::load(&vocab_path).with_context(|| format!("loading vocabulary {}", vocab_path.display()))?;
        let mut examples = load_jsonl(&self.data).with_context(|| format!("loading dataset {}", self.data.display()))?;
        let manifest = match (&self.manifest, &loaded.config.paths.manifest) {
            (Some(p), _) => Some(p.clone()),
            (None, Some(p)) => Some(loaded.resolve(p)),
            (None, None) => None,
        };
        if let Some(p) = manifest {
            let m = load_manifest(&p).with_context(|| format!("loading manifest {}", p.display()))?;
            m.validate(&examples)?;
            m.apply(&mut examples);
        }
        Ok(Workspace { loaded, vocab, examples })
    }

    fn base_dir(&self) -> PathBuf {
        self.data.parent().map(Path::to_path_buf).unwrap_or_default()
    }
}

impl Workspace {
    fn prepare_split(&self, split: Split, base_dir: &Path) -> anyhow::Result<Vec<PreparedExample>> {
        let c = &self.loaded.config;
        let selected: Vec<&NewsExample> = self.examples.iter().filter(|e| e.split == split).collect();
        par::map_indexed(&selected, |_, ex| prepare(ex, base_dir, &c.model.context, &self.vocab, c.window))
            .into_iter()
            .collect::<Result<_, _>>()
            .map_err(Into::into)
    }
}

fn check_vocab(vocab: &BpeVocab, vocab_size: usize) -> Result<(), Invalid> {
    if vocab.len() != vocab_size {
        return Err(Invalid(format!("vocabulary has {} tokens but model.vocab_size is {vocab_size}", vocab.len())));
    }
    Ok(())
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Checkpoint to write (TNT1).
    #[arg(long)]
    out: PathBuf,
    /// JSONL step log; defaults to `<out>.log.jsonl`.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Seeds both initialization and batch order.
    #[arg(long)]
    seed: Option<u64>,
}

pub fn train(a: TrainArgs) -> anyhow::Result<()> {
    let mut ws = a.data.open()?;
    if let Some(s) = a.seed {
        ws.loaded.config.seed = s;
        ws.loaded.config.train.seed = s;
    }
    let c = ws.loaded.config.clone();
    check_vocab(&ws.vocab, c.model.vocab_size)?;
    let data = ws.prepare_split(Split::Train, &a.data.base_dir())?;
    if data.is_empty() {
        return Err(Invalid("the train split is empty".into()).into());
    }
    let max_positions = c.model.decoder.max_positions;
    if let Some(ex) = data.iter().find(|e| e.caption_ids.len() + 1 > max_positions) {
        return Err(Invalid(format!(
            "example {}: caption has {} tokens but decoder.max_positions {max_positions} allows {}",
            ex.id,
            ex.caption_ids.len(),
            max_positions - 1
        ))
        .into());
    }
    let mut model = CaptionModel::new(c.model.clone(), c.seed)?;
    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut s = a.out.clone().into_os_string();
        s.push(".log.jsonl");
        PathBuf::from(s)
    });
    let mut log = BufWriter::new(File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    let report = run_training(&mut model, &data, &c.train, |entry, _| write_log(&mut log, entry))?;
    log.flush()?;
    save_checkpoint(&a.out, &model).with_context(|| format!("writing {}", a.out.display()))?;
    let final_loss = report.log.last().map_or(f64::NAN, |e| e.loss);
    let acc = dataset_accuracy(&model, &data)?;
    println!("steps {} final_loss {final_loss:.6} train_token_accuracy {acc:.6}", report.log.len());
    Ok(())
}

#[derive(Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Predictions JSONL, one line per example of the split.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long)]
    mode: Option<DecodeMode>,
    #[arg(long)]
    beam_size: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
}

pub fn generate(a: GenerateArgs) -> anyhow::Result<()> {
    let mut ws = a.data.open()?;
    let model = load_checkpoint(&a.checkpoint).with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    if a.data.config.is_some() {
        check_config(&ws.loaded.config.model, model.config())?;
    } else {
        // Without a config file the checkpoint defines the context shapes.
        ws.loaded.config.model = model.config().clone();
    }
    check_vocab(&ws.vocab, model.config().vocab_size)?;
    let g = &mut ws.loaded.config.generate;
    if let Some(m) = a.mode {
        g.mode = m;
    }
    if let Some(b) = a.beam_size {
        g.beam_size = b;
    }
    if let Some(n) = a.max_len {
        g.max_len = n;
    }
    config::validate(&ws.loaded.config)?;
    let gen_cfg = ws.loaded.config.generate.clone();
    let max_positions = model.config().decoder.max_positions;
    if gen_cfg.max_len + 1 > max_positions {
        return Err(Invalid(format!("generate.max_len {} needs {} decoder positions; the checkpoint has {max_positions}", gen_cfg.max_len, gen_cfg.max_len + 1)).into());
    }
    let data = ws.prepare_split(a.split, &a.data.base_dir())?;
    let preds: Vec<Prediction> = par::map_indexed(&data, |_, ex| {
        let g = decode(&model, &ex.bundle, &gen_cfg)?;
        Prediction::new(&ex.id, &g, &ws.vocab)
    })
    .into_iter()
    .collect::<Result<_, _>>()?;
    let mut w = BufWriter::new(File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?);
    write_predictions(&mut w, &preds)?;
    w.flush()?;
    println!("predictions {}", preds.len());
    Ok(())
}

#[derive(Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    predictions: PathBuf,
    /// Dataset JSONL holding the reference captions and entities.
    #[arg(long)]
    data: PathBuf,
    /// Report JSON to write.
    #[arg(long)]
    out: PathBuf,
    /// Split manifest applied before the rare-entity index is built.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

pub fn evaluate(a: EvaluateArgs) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(&a.predictions).with_context(|| format!("reading {}", a.predictions.display()))?;
    let preds = newscap::generation::parse_predictions(&text)?;
    let mut examples = load_jsonl(&a.data).with_context(|| format!("loading dataset {}", a.data.display()))?;
    if let Some(p) = &a.manifest {
        let m = load_manifest(p)?;
        m.validate(&examples)?;
        m.apply(&mut examples);
    }
    let report = evaluate_run(&preds, &examples).map_err(|e| match e {
        Error::Domain(msg) => anyhow!(Invalid(msg)),
        other => other.into(),
    })?;
    let json = serde_json::to_string_pretty(&report)?;
    std::fs::write(&a.out, format!("{json}\n")).with_context(|| format!("writing {}", a.out.display()))?;
    println!("{json}");
    Ok(())
}

#[derive(Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Perturb one check's analytic gradient to confirm the harness fails.
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

pub fn gradcheck(a: GradcheckArgs) -> anyhow::Result<()> {
    let loaded = config::load(a.config.as_deref(), &a.overrides)?;
    if let Some(name) = &a.inject_fault {
        let names = check_names(&loaded.config.gradcheck)?;
        if !names.contains(name) {
            return Err(Invalid(format!("unknown check {name:?}; known checks: {}", names.join(", "))).into());
        }
    }
    let results = run_suite(&loaded.config.gradcheck, a.inject_fault.as_deref())?;
    let mut failed = Vec::new();
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!(
            "{status:4} {:<28} max_rel_err {:.3e} max_abs_err {:.3e} threshold {:.0e} coords {}",
            r.name, r.report.max_rel_err, r.report.max_abs_err, r.threshold, r.report.checked
        );
        if !r.passed() {
            failed.push(r.name.clone());
        }
    }
    if failed.is_empty() {
        println!("all {} checks passed", results.len());
        Ok(())
    } else {
        Err(Invalid(format!("{} of {} gradient checks failed: {}", failed.len(), results.len(), failed.join(", "))).into())
    }
}
