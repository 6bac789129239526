//! Command-line plumbing: the run configuration document, data
//! assembly, the experiment grids, and table rendering. The binary
//! parses flags and dispatches here so everything stays testable.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use crate::backtrans::{pipeline_run, PipelineConfig, PipelineData, PipelineReport};
use crate::data::{
    bpe_train, gen_synthetic, synthetic_vocab, ParallelCorpus, SubwordModel, SyntheticTask,
    Vocabulary,
};
use crate::decode::{DecodeConfig, Translator};
use crate::eval::{bleu, BleuReport};
use crate::model::{
    decoder_layer_param_count, encoder_layer_param_count, param_count, tensor_inventory,
    ModelConfig, ModelParams, StackingMode,
};
use crate::train::{
    average_checkpoints, list_checkpoints, save_checkpoint, train_loop, Checkpoint, TrainOptions,
};


/// Synthetic-task spec and/or paths to prepared corpus files. When
/// `train_src` is set the run reads files; otherwise it generates data
/// from the task description.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub task: String,
    pub train_pairs: usize,
    pub dev_pairs: usize,
    pub test_pairs: usize,
    pub mono_lines: usize,
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Corpus generation stream; independent of the run seed so a seed
    /// sweep trains different models on identical data.
    pub seed: u64,
    pub train_src: Option<PathBuf>,
    pub train_tgt: Option<PathBuf>,
    pub dev_src: Option<PathBuf>,
    pub dev_tgt: Option<PathBuf>,
    pub test_src: Option<PathBuf>,
    pub test_tgt: Option<PathBuf>,
    pub mono_tgt: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub bpe_model: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            task: "cipher_reorder".into(),
            train_pairs: 10_000,
            dev_pairs: 500,
            test_pairs: 500,
            mono_lines: 30_000,
            vocab_size: 64,
            min_len: 3,
            max_len: 12,
            seed: 11,
            train_src: None,
            train_tgt: None,
            dev_src: None,
            dev_tgt: None,
            test_src: None,
            test_tgt: None,
            mono_tgt: None,
            vocab: None,
            bpe_model: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    /// K: table1 trains recurrent 1..K plus vanilla-K; table2 trains
    /// recurrent 1..K.
    pub depths: usize,
    /// table2 decodes at overrides 1..K+overrides_beyond.
    pub overrides_beyond: usize,
    /// table3 runs the back-translation pipeline for depths 1..this.
    pub table3_depths: usize,
    pub seeds: Vec<u64>,
    /// Independent grid cells run concurrently at this degree.
    pub cell_workers: usize,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            depths: 4,
            overrides_beyond: 2,
            table3_depths: 2,
            seeds: vec![1, 2, 3],
            cell_workers: 1,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BacktransSection {
    pub reverse_depth: usize,
    pub step_growth_cap: f64,
}

impl Default for BacktransSection {
    fn default() -> Self {
        BacktransSection {
            reverse_depth: 1,
            step_growth_cap: 4.0,
        }
    }
}

/// The complete declarative experiment description. A run is
/// reproducible from this document plus the seed; flags override fields.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out: PathBuf,
    pub seed: u64,
    pub workers: usize,
    pub data: DataSection,
    pub model: ModelConfig,
    pub train: TrainOptions,
    pub decode: DecodeConfig,
    pub experiment: ExperimentSection,
    pub backtrans: BacktransSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out: PathBuf::from("runs/out"),
            seed: 1,
            workers: 1,
            data: DataSection::default(),
            model: ModelConfig {
                src_vocab_size: 64,
                tgt_vocab_size: 64,
                ..ModelConfig::default()
            },
            train: TrainOptions::default(),
            decode: DecodeConfig::default(),
            experiment: ExperimentSection::default(),
            backtrans: BacktransSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

/// Flag values that take precedence over the config document.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub depth: Option<usize>,
    pub stacking: Option<StackingMode>,
    pub decode_depth: Option<usize>,
    pub beam: Option<usize>,
    pub alpha: Option<f64>,
    pub workers: Option<usize>,
}

pub fn apply_overrides(cfg: &mut RunConfig, o: &Overrides) {
    if let Some(v) = o.seed {
        cfg.seed = v;
    }
    if let Some(v) = &o.out {
        cfg.out = v.clone();
    }
    if let Some(v) = o.depth {
        cfg.model.depth = v;
    }
    if let Some(v) = o.stacking {
        cfg.model.stacking = v;
    }
    if let Some(v) = o.decode_depth {
        cfg.decode.depth_override = Some(v);
    }
    if let Some(v) = o.beam {
        cfg.decode.beam_size = v;
    }
    if let Some(v) = o.alpha {
        cfg.decode.alpha = v;
    }
    if let Some(v) = o.workers {
        cfg.workers = v;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TableKind {
    Table1,
    Table2,
    Table3,
}

impl FromStr for TableKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "table1" => Ok(TableKind::Table1),
            "table2" => Ok(TableKind::Table2),
            "table3" => Ok(TableKind::Table3),
            other => Err(format!(
                "unknown experiment {other}, expected table1|table2|table3"
            )),
        }
    }
}

// ---------------------------------------------------------------- io helpers

fn read_text_lines(path: &Path) -> Result<Vec<String>> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines: Vec<String> = text.split('\n').map(str::to_string).collect();
    if lines.last().is_some_and(String::is_empty) {
        lines.pop();
    }
    Ok(lines)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut text = lines.join("\n");
    if !lines.is_empty() {
        text.push('\n');
    }
    write_text(path, &text)
}

// ------------------------------------------------------------ table rendering

pub fn fmt_cell(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.2}"),
        None => "NA".into(),
    }
}

pub fn median(mut xs: Vec<f64>) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len();
    Some(if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    })
}

/// Aligned text table: first column left-aligned, the rest right-aligned.
pub fn format_table(header: &[String], rows: &[Vec<String>]) -> String {
    let cols = header.len();
    let mut width: Vec<usize> = header.iter().map(String::len).collect();
    for row in rows {
        for (i, cell) in row.iter().enumerate().take(cols) {
            width[i] = width[i].max(cell.len());
        }
    }
    let render = |cells: &[String]| -> String {
        let line = cells
            .iter()
            .enumerate()
            .map(|(i, c)| {
                if i == 0 {
                    format!("{c:<w$}", w = width[0])
                } else {
                    format!("{c:>w$}", w = width[i])
                }
            })
            .collect::<Vec<_>>()
            .join("  ");
        line.trim_end().to_string()
    };
    let mut out = render(header);
    out.push('\n');
    for row in rows {
        out.push_str(&render(row));
        out.push('\n');
    }
    out
}

pub fn format_tsv(header: &[String], rows: &[Vec<String>]) -> String {
    let mut out = header.join("\t");
    out.push('\n');
    for row in rows {
        out.push_str(&row.join("\t"));
        out.push('\n');
    }
    out
}

fn emit_table(
    out_dir: &Path,
    name: &str,
    text_header: &[String],
    text_rows: &[Vec<String>],
    tsv_header: &[String],
    tsv_rows: &[Vec<String>],
) -> Result<Vec<PathBuf>> {
    let text = format_table(text_header, text_rows);
    print!("{text}");
    let txt_path = out_dir.join(format!("{name}.txt"));
    let tsv_path = out_dir.join(format!("{name}.tsv"));
    write_text(&txt_path, &text)?;
    write_text(&tsv_path, &format_tsv(tsv_header, tsv_rows))?;
    Ok(vec![txt_path, tsv_path])
}

// ------------------------------------------------------------- cell running

/// Runs independent jobs with bounded concurrency, preserving order.
pub fn run_cells<'a, R: Send + 'a>(
    jobs: Vec<Box<dyn FnOnce() -> R + Send + 'a>>,
    workers: usize,
) -> Vec<R> {
    let n = jobs.len();
    let workers = workers.max(1).min(n.max(1));
    if workers <= 1 {
        return jobs.into_iter().map(|j| j()).collect();
    }
    let queue: Vec<Mutex<Option<Box<dyn FnOnce() -> R + Send + 'a>>>> =
        jobs.into_iter().map(|j| Mutex::new(Some(j))).collect();
    let slots: Vec<Mutex<Option<R>>> = (0..n).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let job = queue[i].lock().unwrap().take().expect("job taken once");
                let r = job();
                *slots[i].lock().unwrap() = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("every job ran"))
        .collect()
}

// ------------------------------------------------------------- data assembly

#[derive(Debug)]
pub struct TaskData {
    pub vocab: Vocabulary,
    pub subword: Option<SubwordModel>,
    pub train: ParallelCorpus,
    pub dev: Option<ParallelCorpus>,
    pub test: Option<ParallelCorpus>,
    pub mono: Vec<Vec<usize>>,
}

fn require<'a, T>(field: &'a Option<T>, name: &str) -> Result<&'a T> {
    field
        .as_ref()
        .ok_or_else(|| anyhow!("config field {name} is required here"))
}

fn corpus_from_files(
    vocab: &Vocabulary,
    subword: Option<&SubwordModel>,
    src: &Path,
    tgt: &Path,
) -> Result<ParallelCorpus> {
    let to_ids = |line: &str| -> Vec<usize> {
        match subword {
            Some(m) => crate::data::bpe_encode(m, vocab, line),
            None => vocab.ids_from_line(line),
        }
    };
    let src_ids: Vec<Vec<usize>> = read_text_lines(src)?.iter().map(|l| to_ids(l)).collect();
    let tgt_ids: Vec<Vec<usize>> = read_text_lines(tgt)?.iter().map(|l| to_ids(l)).collect();
    ParallelCorpus::new(src_ids, tgt_ids)
        .with_context(|| format!("corpus {} / {}", src.display(), tgt.display()))
}

pub fn load_task_data(cfg: &RunConfig) -> Result<TaskData> {
    let d = &cfg.data;
    if d.train_src.is_none() {
        let task: SyntheticTask = d.task.parse().map_err(|e: String| anyhow!(e))?;
        let vocab = synthetic_vocab(d.vocab_size)?;
        let lens = (d.min_len, d.max_len);
        let gen = |n: usize, seed: u64| -> Result<Option<ParallelCorpus>> {
            if n == 0 {
                return Ok(None);
            }
            Ok(Some(gen_synthetic(task, n, d.vocab_size, lens, seed)?))
        };
        let train = gen(d.train_pairs, d.seed)?
            .ok_or_else(|| anyhow!("config field data.train_pairs must be positive"))?;
        let dev = gen(d.dev_pairs, d.seed + 1)?;
        let test = gen(d.test_pairs, d.seed + 2)?;
        let mono = gen(d.mono_lines, d.seed + 3)?.map(|c| c.tgt).unwrap_or_default();
        return Ok(TaskData {
            vocab,
            subword: None,
            train,
            dev,
            test,
            mono,
        });
    }
    let vocab = Vocabulary::load(require(&d.vocab, "data.vocab")?)?;
    let subword = match &d.bpe_model {
        Some(p) => Some(SubwordModel::load(p)?),
        None => None,
    };
    let train = corpus_from_files(
        &vocab,
        subword.as_ref(),
        require(&d.train_src, "data.train_src")?,
        require(&d.train_tgt, "data.train_tgt")?,
    )?;
    let pair = |src: &Option<PathBuf>, tgt: &Option<PathBuf>, s: &str, t: &str| -> Result<Option<ParallelCorpus>> {
        match (src, tgt) {
            (None, None) => Ok(None),
            (Some(_), None) => bail!("config field {t} is required when {s} is set"),
            (None, Some(_)) => bail!("config field {s} is required when {t} is set"),
            (Some(a), Some(b)) => Ok(Some(corpus_from_files(&vocab, subword.as_ref(), a, b)?)),
        }
    };
    let dev = pair(&d.dev_src, &d.dev_tgt, "data.dev_src", "data.dev_tgt")?;
    let test = pair(&d.test_src, &d.test_tgt, "data.test_src", "data.test_tgt")?;
    let mono = match &d.mono_tgt {
        Some(p) => read_text_lines(p)?
            .iter()
            .map(|l| match &subword {
                Some(m) => crate::data::bpe_encode(m, &vocab, l),
                None => vocab.ids_from_line(l),
            })
            .collect(),
        None => Vec::new(),
    };
    Ok(TaskData {
        vocab,
        subword,
        train,
        dev,
        test,
        mono,
    })
}

fn check_vocab(model: &ModelConfig, vocab: &Vocabulary) -> Result<()> {
    if model.src_vocab_size != vocab.len() || model.tgt_vocab_size != vocab.len() {
        bail!(
            "model.src_vocab_size/tgt_vocab_size ({}/{}) must equal the vocabulary size ({})",
            model.src_vocab_size,
            model.tgt_vocab_size,
            vocab.len()
        );
    }
    Ok(())
}

fn text_lines(vocab: &Vocabulary, rows: &[Vec<usize>]) -> Vec<String> {
    rows.iter().map(|r| vocab.line_from_ids(r)).collect()
}

// ----------------------------------------------------------------- manifest

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    seed: u64,
    artifacts: Vec<String>,
    config: &'a RunConfig,
}

/// Records the resolved config and the artifacts a command produced.
pub fn write_manifest(cfg: &RunConfig, command: &str, artifacts: &[PathBuf]) -> Result<PathBuf> {
    let rel: Vec<String> = artifacts
        .iter()
        .map(|p| {
            p.strip_prefix(&cfg.out)
                .unwrap_or(p)
                .display()
                .to_string()
        })
        .collect();
    let manifest = RunManifest {
        command,
        seed: cfg.seed,
        artifacts: rel,
        config: cfg,
    };
    fs::create_dir_all(&cfg.out)?;
    let path = cfg.out.join("manifest.json");
    write_text(
        &path,
        &serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;
    Ok(path)
}

// ---------------------------------------------------------------- subcommands

pub fn cmd_gen_data(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let d = &cfg.data;
    if d.train_src.is_some() {
        bail!("gen-data synthesizes corpora, but the config already points at data files");
    }
    let task: SyntheticTask = d.task.parse().map_err(|e: String| anyhow!(e))?;
    let vocab = synthetic_vocab(d.vocab_size)?;
    let lens = (d.min_len, d.max_len);
    let dir = cfg.out.join("data");
    fs::create_dir_all(&dir)?;
    let mut artifacts = Vec::new();
    let mut dump = |name: &str, rows: &[Vec<usize>]| -> Result<()> {
        let path = dir.join(name);
        write_lines(&path, &text_lines(&vocab, rows))?;
        artifacts.push(path);
        Ok(())
    };
    let train = gen_synthetic(task, d.train_pairs, d.vocab_size, lens, d.seed)?;
    dump("train.src", &train.src)?;
    dump("train.tgt", &train.tgt)?;
    let dev = gen_synthetic(task, d.dev_pairs, d.vocab_size, lens, d.seed + 1)?;
    dump("dev.src", &dev.src)?;
    dump("dev.tgt", &dev.tgt)?;
    let test = gen_synthetic(task, d.test_pairs, d.vocab_size, lens, d.seed + 2)?;
    dump("test.src", &test.src)?;
    dump("test.tgt", &test.tgt)?;
    let mono = gen_synthetic(task, d.mono_lines.max(1), d.vocab_size, lens, d.seed + 3)?;
    dump("mono.tgt", &mono.tgt[..d.mono_lines.min(mono.tgt.len())])?;
    let vocab_path = dir.join("vocab.txt");
    vocab.save(&vocab_path)?;
    artifacts.push(vocab_path);
    println!(
        "wrote {} train / {} dev / {} test pairs, {} mono lines, vocab {} ({})",
        d.train_pairs,
        d.dev_pairs,
        d.test_pairs,
        d.mono_lines,
        d.vocab_size,
        d.task
    );
    Ok(artifacts)
}

pub fn cmd_bpe_train(cfg: &RunConfig, inputs: &[PathBuf], merges: usize) -> Result<Vec<PathBuf>> {
    let mut lines = Vec::new();
    for path in inputs {
        lines.extend(read_text_lines(path)?);
    }
    let model = bpe_train(&lines, merges)?;
    fs::create_dir_all(&cfg.out)?;
    let model_path = cfg.out.join("bpe.model");
    model.save(&model_path)?;
    let vocab_path = cfg.out.join("bpe.vocab");
    model.vocabulary().save(&vocab_path)?;
    println!(
        "learned {} merges over {} lines; vocabulary {}",
        model.merges().len(),
        lines.len(),
        model.vocabulary().len()
    );
    Ok(vec![model_path, vocab_path])
}

pub fn cmd_bpe_apply(cfg: &RunConfig, input: &Path, model_path: &Path) -> Result<Vec<PathBuf>> {
    let model = SubwordModel::load(model_path)?;
    let lines = read_text_lines(input)?;
    let segmented: Vec<String> = lines
        .iter()
        .map(|line| {
            line.split_whitespace()
                .flat_map(|w| model.segment(w))
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect();
    let name = input
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("input");
    let out_path = cfg.out.join(format!("{name}.bpe"));
    write_lines(&out_path, &segmented)?;
    println!("segmented {} lines -> {}", lines.len(), out_path.display());
    Ok(vec![out_path])
}

pub fn cmd_train(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let td = load_task_data(cfg)?;
    check_vocab(&cfg.model, &td.vocab)?;
    cfg.model.validate()?;
    let ckpt_dir = cfg.out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    let opts = TrainOptions {
        seed: cfg.seed,
        ckpt_dir: Some(ckpt_dir.clone()),
        ..cfg.train.clone()
    };
    let mut params = ModelParams::<f32>::init(&cfg.model, cfg.seed)?;
    let report = train_loop(&mut params, &td.train, td.dev.as_ref(), &opts)?;
    let final_path = ckpt_dir.join("final.ckpt");
    save_checkpoint(&final_path, &params, report.final_step as u64)?;
    let log_path = cfg.out.join("train_log.tsv");
    report.save_tsv(&log_path)?;
    let dev_part = report
        .final_dev_loss()
        .map(|v| format!(", dev loss {v:.4}"))
        .unwrap_or_default();
    println!(
        "trained {} steps; final loss {:.4}{dev_part}; checkpoints in {}",
        report.final_step,
        report.final_loss().unwrap_or(f64::NAN),
        ckpt_dir.display()
    );
    if report.skipped_lines > 0 {
        eprintln!("skipped {} over-budget lines", report.skipped_lines);
    }
    Ok(vec![final_path, log_path])
}

pub fn cmd_translate(cfg: &RunConfig, input: &Path, ckpt_path: &Path) -> Result<Vec<PathBuf>> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let params: ModelParams<f32> = ckpt.to_params()?;
    let vocab = match &cfg.data.vocab {
        Some(p) => Vocabulary::load(p)?,
        None => synthetic_vocab(cfg.data.vocab_size)?,
    };
    check_vocab(&params.config, &vocab)?;
    let subword = match &cfg.data.bpe_model {
        Some(p) => Some(SubwordModel::load(p)?),
        None => None,
    };
    let tr = Translator {
        params: &params,
        src_vocab: &vocab,
        tgt_vocab: &vocab,
        subword: subword.as_ref(),
        config: cfg.decode.clone(),
    };
    let lines = read_text_lines(input)?;
    let out = tr.translate_corpus(&lines, cfg.workers);
    fs::create_dir_all(&cfg.out)?;
    let out_path = cfg.out.join("translations.txt");
    write_lines(&out_path, &out.lines)?;
    let err_path = cfg.out.join("translate_errors.log");
    let err_lines: Vec<String> = out
        .errors
        .iter()
        .map(|e| format!("{}\t{}", e.line, e.message))
        .collect();
    write_lines(&err_path, &err_lines)?;
    println!(
        "translated {} lines ({} failures) -> {}",
        lines.len(),
        out.errors.len(),
        out_path.display()
    );
    Ok(vec![out_path, err_path])
}

pub fn cmd_evaluate(cfg: &RunConfig, hyp: &Path, reference: &Path) -> Result<Vec<PathBuf>> {
    let hyp_lines = read_text_lines(hyp)?;
    let ref_lines = read_text_lines(reference)?;
    let report = bleu(&hyp_lines, &ref_lines)?;
    println!("{report}");
    if let Some(w) = &report.warning {
        eprintln!("warning: {w}");
    }
    let path = cfg.out.join("bleu.tsv");
    write_text(
        &path,
        &format!("{}\n{}\n", BleuReport::tsv_header(), report.tsv_line()),
    )?;
    Ok(vec![path])
}

pub fn cmd_average_ckpt(cfg: &RunConfig, ckpt_dir: &Path, last: usize) -> Result<Vec<PathBuf>> {
    if last == 0 {
        bail!("--last must be at least 1");
    }
    let found = list_checkpoints(ckpt_dir)?;
    if found.is_empty() {
        bail!("no ckpt-*.ckpt files in {}", ckpt_dir.display());
    }
    let take = found.len().min(last);
    let chosen: Vec<PathBuf> = found[found.len() - take..]
        .iter()
        .map(|(_, p)| p.clone())
        .collect();
    let averaged = average_checkpoints(&chosen)?;
    fs::create_dir_all(&cfg.out)?;
    let path = cfg.out.join("averaged.ckpt");
    averaged.save(&path)?;
    println!(
        "averaged {} checkpoints (steps {}..{}) -> {}",
        take,
        found[found.len() - take].0,
        found[found.len() - 1].0,
        path.display()
    );
    Ok(vec![path])
}

pub fn cmd_params(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    cfg.model.validate()?;
    let m = &cfg.model;
    let inv = tensor_inventory(m);
    let header: Vec<String> = ["tensor", "shape", "elements"]
        .map(String::from)
        .to_vec();
    let rows: Vec<Vec<String>> = inv
        .iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            let dims = shape
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join("x");
            vec![name.clone(), dims, n.to_string()]
        })
        .collect();
    let mut text = format_table(&header, &rows);
    let raw = param_count(m, false);
    let with_slots = param_count(m, true);
    let vanilla = ModelConfig {
        stacking: StackingMode::Vanilla,
        ..m.clone()
    };
    let recurrent = ModelConfig {
        stacking: StackingMode::Recurrent,
        ..m.clone()
    };
    let v = param_count(&vanilla, false);
    let r = param_count(&recurrent, false);
    let diff = v - r;
    let per_pair = encoder_layer_param_count(m.d_model, m.d_ff)
        + decoder_layer_param_count(m.d_model, m.d_ff);
    writeln!(text).unwrap();
    writeln!(
        text,
        "stacking: {:?}, depth {}, d_model {}, d_ff {}, vocab {}/{}",
        m.stacking, m.depth, m.d_model, m.d_ff, m.src_vocab_size, m.tgt_vocab_size
    )
    .unwrap();
    writeln!(text, "total parameters: {raw}").unwrap();
    writeln!(text, "with optimizer slots (x3): {with_slots}").unwrap();
    writeln!(text).unwrap();
    writeln!(text, "per layer pair (encoder+decoder): {per_pair}").unwrap();
    writeln!(text, "vanilla depth-{} total: {v}", m.depth).unwrap();
    writeln!(text, "recurrent depth-{} total: {r}", m.depth).unwrap();
    writeln!(text, "raw difference (vanilla - recurrent): {diff}").unwrap();
    let annotation = if diff * 3 == 110_254_080 {
        " = 158894599 - 48640519"
    } else {
        ""
    };
    writeln!(
        text,
        "difference with optimizer slots (x3): {}{annotation}",
        diff * 3
    )
    .unwrap();
    writeln!(
        text,
        "vanilla/recurrent size ratio: {:.2}x",
        v as f64 / r as f64
    )
    .unwrap();
    print!("{text}");
    let txt_path = cfg.out.join("params.txt");
    write_text(&txt_path, &text)?;
    let tsv_path = cfg.out.join("params.tsv");
    write_text(&tsv_path, &format_tsv(&header, &rows))?;
    Ok(vec![txt_path, tsv_path])
}

fn pipeline_for(cfg: &RunConfig, depth: usize, seed: u64) -> PipelineConfig {
    PipelineConfig {
        forward_model: ModelConfig {
            depth,
            stacking: StackingMode::Recurrent,
            ..cfg.model.clone()
        },
        reverse_model: ModelConfig {
            depth: cfg.backtrans.reverse_depth,
            stacking: StackingMode::Recurrent,
            ..cfg.model.clone()
        },
        train: cfg.train.clone(),
        decode: cfg.decode.clone(),
        step_growth_cap: cfg.backtrans.step_growth_cap,
        seed,
        workers: cfg.workers,
    }
}

pub fn cmd_backtranslate(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let td = load_task_data(cfg)?;
    check_vocab(&cfg.model, &td.vocab)?;
    let test = require(&td.test, "data.test_src")?;
    let dir = cfg.out.join("backtrans");
    let pc = pipeline_for(cfg, cfg.model.depth, cfg.seed);
    let data = PipelineData {
        real: &td.train,
        mono_tgt: &td.mono,
        dev: td.dev.as_ref(),
        test,
        vocab: &td.vocab,
    };
    let report: PipelineReport = pipeline_run::<f32>(&dir, &data, &pc)?;
    println!(
        "baseline BLEU {:.2} ({} steps) vs augmented BLEU {:.2} ({} steps)",
        report.baseline_bleu,
        report.baseline_steps,
        report.augmented_bleu,
        report.augmented_steps
    );
    println!(
        "mixed corpus: {} real + {} pseudo lines ({} dropped)",
        report.real_lines, report.pseudo_lines, report.dropped_pseudo
    );
    Ok(vec![
        dir.join("reports").join("bleu.tsv"),
        dir.join("manifest.json"),
    ])
}

// ------------------------------------------------------------ experiment grids

fn train_cell(
    cfg: &RunConfig,
    td: &TaskData,
    model: &ModelConfig,
    seed: u64,
) -> Result<ModelParams<f32>> {
    check_vocab(model, &td.vocab)?;
    model.validate()?;
    let mut params = ModelParams::<f32>::init(model, seed)?;
    let opts = TrainOptions {
        seed,
        ckpt_dir: None,
        ..cfg.train.clone()
    };
    train_loop(&mut params, &td.train, td.dev.as_ref(), &opts)?;
    Ok(params)
}

fn eval_cell(
    cfg: &RunConfig,
    td: &TaskData,
    params: &ModelParams<f32>,
    decode: &DecodeConfig,
    test_src: &[String],
    test_refs: &[String],
) -> Result<f64> {
    let tr = Translator {
        params,
        src_vocab: &td.vocab,
        tgt_vocab: &td.vocab,
        subword: td.subword.as_ref(),
        config: decode.clone(),
    };
    let out = tr.translate_corpus(test_src, cfg.workers);
    for e in &out.errors {
        eprintln!("decode failure on test line {}: {}", e.line, e.message);
    }
    Ok(bleu(&out.lines, test_refs)?.bleu)
}

fn seed_headers(seeds: &[u64]) -> Vec<String> {
    seeds.iter().map(|s| format!("seed-{s}")).collect()
}

pub fn cmd_experiment(cfg: &RunConfig, kind: TableKind) -> Result<Vec<PathBuf>> {
    let td = load_task_data(cfg)?;
    let test = require(&td.test, "data.test_src")?;
    let test_src = text_lines(&td.vocab, &test.src);
    let test_refs = text_lines(&td.vocab, &test.tgt);
    let seeds = &cfg.experiment.seeds;
    if seeds.is_empty() {
        bail!("config field experiment.seeds must not be empty");
    }
    fs::create_dir_all(&cfg.out)?;
    match kind {
        TableKind::Table1 => {
            let k = cfg.experiment.depths.max(1);
            let mut specs: Vec<(String, ModelConfig)> = (1..=k)
                .map(|depth| {
                    (
                        format!("recurrent-{depth}"),
                        ModelConfig {
                            depth,
                            stacking: StackingMode::Recurrent,
                            ..cfg.model.clone()
                        },
                    )
                })
                .collect();
            specs.push((
                format!("vanilla-{k}"),
                ModelConfig {
                    depth: k,
                    stacking: StackingMode::Vanilla,
                    ..cfg.model.clone()
                },
            ));
            let mut jobs: Vec<Box<dyn FnOnce() -> Option<f64> + Send + '_>> = Vec::new();
            for (label, model) in &specs {
                for &seed in seeds {
                    let (cfg, td, test_src, test_refs) = (cfg, &td, &test_src, &test_refs);
                    jobs.push(Box::new(move || {
                        train_cell(cfg, td, model, seed)
                            .and_then(|p| {
                                eval_cell(cfg, td, &p, &cfg.decode, test_src, test_refs)
                            })
                            .map_err(|e| eprintln!("cell {label} seed {seed}: {e:#}"))
                            .ok()
                    }));
                }
            }
            let cells = run_cells(jobs, cfg.experiment.cell_workers);
            let mut header = vec!["model".to_string()];
            header.extend(seed_headers(seeds));
            header.push("median".to_string());
            let rows: Vec<Vec<String>> = specs
                .iter()
                .enumerate()
                .map(|(i, (label, _))| {
                    let per_seed = &cells[i * seeds.len()..(i + 1) * seeds.len()];
                    let mut row = vec![label.clone()];
                    row.extend(per_seed.iter().map(|c| fmt_cell(*c)));
                    row.push(fmt_cell(median(per_seed.iter().flatten().copied().collect())));
                    row
                })
                .collect();
            emit_table(&cfg.out, "table1", &header, &rows, &header, &rows)
        }
        TableKind::Table2 => {
            let k = cfg.experiment.depths.max(1);
            let max_override = k + cfg.experiment.overrides_beyond;
            let mut jobs: Vec<Box<dyn FnOnce() -> Vec<Option<f64>> + Send + '_>> = Vec::new();
            for depth in 1..=k {
                for &seed in seeds {
                    let (cfg, td, test_src, test_refs) = (cfg, &td, &test_src, &test_refs);
                    jobs.push(Box::new(move || {
                        let model = ModelConfig {
                            depth,
                            stacking: StackingMode::Recurrent,
                            ..cfg.model.clone()
                        };
                        let params = match train_cell(cfg, td, &model, seed) {
                            Ok(p) => p,
                            Err(e) => {
                                eprintln!("cell depth {depth} seed {seed}: {e:#}");
                                return vec![None; max_override];
                            }
                        };
                        (1..=max_override)
                            .map(|m| {
                                let decode = DecodeConfig {
                                    depth_override: Some(m),
                                    ..cfg.decode.clone()
                                };
                                eval_cell(cfg, td, &params, &decode, test_src, test_refs)
                                    .map_err(|e| {
                                        eprintln!(
                                            "decode depth {m} of trained-{depth} seed {seed}: {e:#}"
                                        )
                                    })
                                    .ok()
                            })
                            .collect()
                    }));
                }
            }
            let cells = run_cells(jobs, cfg.experiment.cell_workers);
            let mut header = vec!["#recurrence".to_string()];
            header.extend((1..=max_override).map(|m| format!("decode-{m}")));
            let mut tsv_header = vec!["trained_depth".to_string()];
            tsv_header.extend((1..=max_override).map(|m| format!("decode_{m}")));
            let mut text_rows = Vec::new();
            let mut tsv_rows = Vec::new();
            for (i, depth) in (1..=k).enumerate() {
                let per_seed = &cells[i * seeds.len()..(i + 1) * seeds.len()];
                let mut text_row = vec![depth.to_string()];
                let mut tsv_row = vec![depth.to_string()];
                for m in 1..=max_override {
                    let med = median(
                        per_seed
                            .iter()
                            .filter_map(|seed_cells| seed_cells[m - 1])
                            .collect(),
                    );
                    let cell = fmt_cell(med);
                    // the trained depth's own column gets the diagonal mark
                    text_row.push(if m == depth { format!("*{cell}") } else { cell.clone() });
                    tsv_row.push(cell);
                }
                text_rows.push(text_row);
                tsv_rows.push(tsv_row);
            }
            emit_table(&cfg.out, "table2", &header, &text_rows, &tsv_header, &tsv_rows)
        }
        TableKind::Table3 => {
            let depths: Vec<usize> = (1..=cfg.experiment.table3_depths.max(1)).collect();
            let mut jobs: Vec<Box<dyn FnOnce() -> Option<(f64, f64)> + Send + '_>> = Vec::new();
            for &depth in &depths {
                for &seed in seeds {
                    let (cfg, td, test) = (cfg, &td, test);
                    jobs.push(Box::new(move || {
                        let dir = cfg
                            .out
                            .join("table3")
                            .join(format!("depth-{depth}"))
                            .join(format!("seed-{seed}"));
                        let pc = pipeline_for(cfg, depth, seed);
                        let data = PipelineData {
                            real: &td.train,
                            mono_tgt: &td.mono,
                            dev: td.dev.as_ref(),
                            test,
                            vocab: &td.vocab,
                        };
                        pipeline_run::<f32>(&dir, &data, &pc)
                            .map(|r| (r.baseline_bleu, r.augmented_bleu))
                            .map_err(|e| eprintln!("pipeline depth {depth} seed {seed}: {e:#}"))
                            .ok()
                    }));
                }
            }
            let cells = run_cells(jobs, cfg.experiment.cell_workers);
            let header: Vec<String> = ["depth", "no", "yes"].map(String::from).to_vec();
            let rows: Vec<Vec<String>> = depths
                .iter()
                .enumerate()
                .map(|(i, depth)| {
                    let per_seed = &cells[i * seeds.len()..(i + 1) * seeds.len()];
                    let no = median(per_seed.iter().flatten().map(|c| c.0).collect());
                    let yes = median(per_seed.iter().flatten().map(|c| c.1).collect());
                    vec![depth.to_string(), fmt_cell(no), fmt_cell(yes)]
                })
                .collect();
            emit_table(&cfg.out, "table3", &header, &rows, &header, &rows)
        }
    }
}
