//! Back-translation: pseudo-parallel corpus generation with a reverse
//! model, real/pseudo mixing, and the staged retraining pipeline.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{ParallelCorpus, Vocabulary};
use crate::decode::{greedy_decode_batch, DecodeConfig, LineError, Translator};
use crate::eval::{bleu, BleuReport};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::{Rng, Scalar};
use crate::train::{save_checkpoint, train_loop, Checkpoint, TrainOptions};


#[derive(Debug, thiserror::Error)]
pub enum BtError {
    #[error("{corpus} corpus line {line} holds id {id}, outside a vocabulary of {vocab}")]
    VocabMismatch {
        corpus: String,
        line: usize,
        id: usize,
        vocab: usize,
    },
    #[error("pipeline stage {stage} failed: {message}")]
    Stage { stage: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn stage_err<E: std::fmt::Display>(stage: &str) -> impl Fn(E) -> BtError + '_ {
    move |e| BtError::Stage {
        stage: stage.to_string(),
        message: e.to_string(),
    }
}

/// Where each mixed line came from. Pseudo pairs have a machine source
/// and a human target; the monolingual corpus is always the target side.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Real,
    Pseudo,
}

#[derive(Clone, Debug)]
pub struct MixedCorpus {
    pub corpus: ParallelCorpus,
    pub provenance: Vec<Provenance>,
}

impl MixedCorpus {
    pub fn real_lines(&self) -> usize {
        self.provenance.iter().filter(|p| **p == Provenance::Real).count()
    }

    pub fn pseudo_lines(&self) -> usize {
        self.provenance.len() - self.real_lines()
    }
}

/// Textual back-translation result: `src_lines[i]` is the greedy
/// reverse translation of `tgt_lines[i]`, which is the i-th monolingual
/// input verbatim. Failed lines keep an empty source and an error entry.
#[derive(Clone, Debug, Default)]
pub struct BacktransOutput {
    pub src_lines: Vec<String>,
    pub tgt_lines: Vec<String>,
    pub errors: Vec<LineError>,
}

impl BacktransOutput {
    /// Drop pairs whose source came back empty (failures or degenerate
    /// translations) and convert the rest to an id corpus.
    pub fn usable_corpus(&self, vocab: &Vocabulary) -> (ParallelCorpus, usize) {
        let mut src = Vec::new();
        let mut tgt = Vec::new();
        let mut dropped = 0usize;
        for (s, t) in self.src_lines.iter().zip(&self.tgt_lines) {
            let s_ids = vocab.ids_from_line(s);
            let t_ids = vocab.ids_from_line(t);
            if s_ids.is_empty() || t_ids.is_empty() {
                dropped += 1;
                continue;
            }
            src.push(s_ids);
            tgt.push(t_ids);
        }
        let corpus = ParallelCorpus::new(src, tgt).expect("filtered pairs are aligned and nonempty");
        (corpus, dropped)
    }
}

const BT_CHUNK: usize = 64;

fn backtranslate_shard<T: Scalar, S: AsRef<str>>(
    reverse: &Translator<'_, T>,
    lines: &[S],
    base_line: usize,
) -> BacktransOutput {
    let greedy = DecodeConfig {
        beam_size: 1,
        ..reverse.config.clone()
    };
    let mut out = BacktransOutput::default();
    for (chunk_idx, chunk) in lines.chunks(BT_CHUNK).enumerate() {
        let chunk_start = base_line + chunk_idx * BT_CHUNK;
        let ids: Vec<Vec<usize>> = chunk.iter().map(|l| reverse.line_to_ids(l.as_ref())).collect();
        let nonempty: Vec<Vec<usize>> = ids.iter().filter(|v| !v.is_empty()).cloned().collect();
        match greedy_decode_batch(reverse.params, &nonempty, &greedy) {
            Ok(hyps) => {
                let mut it = hyps.into_iter();
                for (off, line_ids) in ids.iter().enumerate() {
                    if line_ids.is_empty() {
                        out.src_lines.push(String::new());
                    } else {
                        let h = it.next().expect("one hypothesis per nonempty line");
                        out.src_lines.push(reverse.ids_to_line(h.generated()));
                    }
                    out.tgt_lines.push(chunk[off].as_ref().to_string());
                }
            }
            // a whole-chunk failure (say one over-length line) falls back
            // to per-line decoding so the healthy neighbors still land
            Err(_) => {
                for (off, line) in chunk.iter().enumerate() {
                    match reverse.translate_line(line.as_ref()) {
                        Ok(text) => out.src_lines.push(text),
                        Err(e) => {
                            out.errors.push(LineError {
                                line: chunk_start + off,
                                message: e.to_string(),
                            });
                            out.src_lines.push(String::new());
                        }
                    }
                    out.tgt_lines.push(line.as_ref().to_string());
                }
            }
        }
    }
    out
}

/// Greedy-translate a monolingual target-side corpus with the reverse
/// model. Output is line-aligned with the input; the per-line failure
/// policy matches corpus translation (empty placeholder plus an error
/// entry). Shards run on worker threads and each decodes its lines in
/// lockstep batches; rows decode independently, so worker count and
/// batch boundaries never change the output.
pub fn backtranslate_corpus<T: Scalar, S: AsRef<str> + Sync>(
    reverse: &Translator<'_, T>,
    mono_lines: &[S],
    workers: usize,
) -> BacktransOutput {
    if mono_lines.is_empty() {
        return BacktransOutput::default();
    }
    let workers = crate::decode::effective_workers(workers);
    let shard = mono_lines.len().div_ceil(workers);
    let parts: Vec<BacktransOutput> = std::thread::scope(|scope| {
        let handles: Vec<_> = mono_lines
            .chunks(shard)
            .enumerate()
            .map(|(w, part)| scope.spawn(move || backtranslate_shard(reverse, part, w * shard)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("backtranslation worker panicked"))
            .collect()
    });
    let mut out = BacktransOutput::default();
    for part in parts {
        out.src_lines.extend(part.src_lines);
        out.tgt_lines.extend(part.tgt_lines);
        out.errors.extend(part.errors);
    }
    out
}

fn check_ids(name: &str, corpus: &ParallelCorpus, vocab_size: usize) -> Result<(), BtError> {
    for (line, (s, t)) in corpus.src.iter().zip(&corpus.tgt).enumerate() {
        for &id in s.iter().chain(t) {
            if id >= vocab_size {
                return Err(BtError::VocabMismatch {
                    corpus: name.to_string(),
                    line,
                    id,
                    vocab: vocab_size,
                });
            }
        }
    }
    Ok(())
}

/// Concatenate real and pseudo pairs, then shuffle with the seed.
/// Provenance flags ride along for reporting.
pub fn mix_corpora(
    real: &ParallelCorpus,
    pseudo: &ParallelCorpus,
    vocab_size: usize,
    seed: u64,
) -> Result<MixedCorpus, BtError> {
    check_ids("real", real, vocab_size)?;
    check_ids("pseudo", pseudo, vocab_size)?;
    let n = real.len() + pseudo.len();
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(seed).shuffle(&mut order);
    let mut src = Vec::with_capacity(n);
    let mut tgt = Vec::with_capacity(n);
    let mut provenance = Vec::with_capacity(n);
    for i in order {
        if i < real.len() {
            src.push(real.src[i].clone());
            tgt.push(real.tgt[i].clone());
            provenance.push(Provenance::Real);
        } else {
            src.push(pseudo.src[i - real.len()].clone());
            tgt.push(pseudo.tgt[i - real.len()].clone());
            provenance.push(Provenance::Pseudo);
        }
    }
    let corpus = ParallelCorpus::new(src, tgt).expect("inputs were valid corpora");
    Ok(MixedCorpus { corpus, provenance })
}

/// The whole back-translation experiment for one depth/seed cell.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub forward_model: ModelConfig,
    pub reverse_model: ModelConfig,
    pub train: TrainOptions,
    pub decode: DecodeConfig,
    /// Augmented training runs baseline_steps x data growth, capped here.
    pub step_growth_cap: f64,
    pub seed: u64,
    pub workers: usize,
}

pub struct PipelineData<'a> {
    pub real: &'a ParallelCorpus,
    pub mono_tgt: &'a [Vec<usize>],
    pub dev: Option<&'a ParallelCorpus>,
    pub test: &'a ParallelCorpus,
    pub vocab: &'a Vocabulary,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PipelineReport {
    pub baseline_bleu: f64,
    pub augmented_bleu: f64,
    pub real_lines: usize,
    pub pseudo_lines: usize,
    pub dropped_pseudo: usize,
    pub baseline_steps: usize,
    pub augmented_steps: usize,
}

/// Stage completion record; lives at `<dir>/manifest.json` and makes
/// the pipeline restartable from the last completed stage.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct PipelineManifest {
    pub seed: u64,
    pub completed: BTreeSet<String>,
    pub pseudo_dropped: usize,
    pub report: Option<PipelineReport>,
}

impl PipelineManifest {
    fn path(dir: &Path) -> PathBuf {
        dir.join("manifest.json")
    }

    fn load_or_default(dir: &Path, seed: u64) -> Self {
        let p = Self::path(dir);
        if let Ok(text) = std::fs::read_to_string(&p) {
            if let Ok(m) = serde_json::from_str::<PipelineManifest>(&text) {
                if m.seed == seed {
                    return m;
                }
            }
        }
        PipelineManifest {
            seed,
            ..Default::default()
        }
    }

    fn save(&self, dir: &Path) -> Result<(), BtError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        let mut f = std::fs::File::create(Self::path(dir))?;
        f.write_all(text.as_bytes())?;
        Ok(())
    }

    fn done(&self, stage: &str, artifact: &Path) -> bool {
        self.completed.contains(stage) && artifact.exists()
    }
}

fn write_lines(path: &Path, lines: &[String]) -> Result<(), BtError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for line in lines {
        writeln!(f, "{line}")?;
    }
    f.flush()?;
    Ok(())
}

fn read_lines(path: &Path) -> Result<Vec<String>, BtError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines: Vec<String> = text.split('\n').map(str::to_string).collect();
    if lines.last().is_some_and(String::is_empty) {
        lines.pop();
    }
    Ok(lines)
}

#[allow(clippy::too_many_arguments)]
fn train_stage<T: Scalar>(
    stage: &str,
    root: &Path,
    dir: &Path,
    manifest: &mut PipelineManifest,
    config: &ModelConfig,
    corpus: &ParallelCorpus,
    dev: Option<&ParallelCorpus>,
    opts: &TrainOptions,
    init_seed: u64,
) -> Result<ModelParams<T>, BtError> {
    let ckpt = dir.join("final.ckpt");
    if manifest.done(stage, &ckpt) {
        let loaded = Checkpoint::load(&ckpt)
            .and_then(|c| c.to_params::<T>())
            .map_err(stage_err(stage))?;
        return Ok(loaded);
    }
    std::fs::create_dir_all(dir)?;
    let mut params = ModelParams::<T>::init(config, init_seed).map_err(stage_err(stage))?;
    let report = train_loop(&mut params, corpus, dev, opts).map_err(stage_err(stage))?;
    save_checkpoint(&ckpt, &params, report.final_step as u64).map_err(stage_err(stage))?;
    report
        .save_tsv(&dir.join("train_log.tsv"))
        .map_err(stage_err(stage))?;
    manifest.completed.insert(stage.to_string());
    manifest.save(root)?;
    Ok(params)
}

fn corpus_to_text(vocab: &Vocabulary, rows: &[Vec<usize>]) -> Vec<String> {
    rows.iter().map(|r| vocab.line_from_ids(r)).collect()
}

fn evaluate_model<T: Scalar>(
    params: &ModelParams<T>,
    data: &PipelineData,
    decode: &DecodeConfig,
    workers: usize,
) -> Result<BleuReport, String> {
    let tr = Translator {
        params,
        src_vocab: data.vocab,
        tgt_vocab: data.vocab,
        subword: None,
        config: decode.clone(),
    };
    let src_text = corpus_to_text(data.vocab, &data.test.src);
    let out = tr.translate_corpus(&src_text, workers);
    if !out.errors.is_empty() {
        return Err(format!(
            "{} of {} test lines failed to decode",
            out.errors.len(),
            src_text.len()
        ));
    }
    let refs = corpus_to_text(data.vocab, &data.test.tgt);
    bleu(&out.lines, &refs).map_err(|e| e.to_string())
}

/// Reverse training -> back-translation -> mixing -> from-scratch
/// forward training on both the real and the mixed corpora -> one BLEU
/// per forward model on the shared test set. Each stage leaves its
/// artifacts in a subdirectory and is skipped on rerun once recorded
/// in the manifest.
pub fn pipeline_run<T: Scalar>(
    dir: &Path,
    data: &PipelineData,
    config: &PipelineConfig,
) -> Result<PipelineReport, BtError> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = PipelineManifest::load_or_default(dir, config.seed);
    if let Some(report) = &manifest.report {
        if manifest.done("report", &dir.join("reports").join("bleu.tsv")) {
            return Ok(report.clone());
        }
    }
    let vocab_size = data.vocab.len();

    // 1. reverse model: swapped direction, trains target -> source
    let reverse_dir = dir.join("reverse_ckpt");
    let swapped = ParallelCorpus::new(data.real.tgt.clone(), data.real.src.clone())
        .map_err(stage_err("reverse"))?;
    let reverse_params: ModelParams<T> = train_stage(
        "reverse",
        dir,
        &reverse_dir,
        &mut manifest,
        &config.reverse_model,
        &swapped,
        None,
        &TrainOptions {
            seed: config.seed.wrapping_add(1),
            ckpt_dir: None,
            ..config.train.clone()
        },
        config.seed.wrapping_add(1),
    )?;

    // 2. pseudo corpus: greedy reverse translations of the monolingual side
    let pseudo_dir = dir.join("pseudo_corpus");
    let pseudo_src_path = pseudo_dir.join("pseudo.src");
    let pseudo_tgt_path = pseudo_dir.join("pseudo.tgt");
    let pseudo = if manifest.done("pseudo", &pseudo_src_path) {
        BacktransOutput {
            src_lines: read_lines(&pseudo_src_path)?,
            tgt_lines: read_lines(&pseudo_tgt_path)?,
            errors: Vec::new(),
        }
    } else {
        std::fs::create_dir_all(&pseudo_dir)?;
        let reverse_tr = Translator {
            params: &reverse_params,
            src_vocab: data.vocab,
            tgt_vocab: data.vocab,
            subword: None,
            config: DecodeConfig {
                beam_size: 1,
                ..config.decode.clone()
            },
        };
        let mono_text = corpus_to_text(data.vocab, data.mono_tgt);
        let out = backtranslate_corpus(&reverse_tr, &mono_text, config.workers);
        write_lines(&pseudo_src_path, &out.src_lines)?;
        write_lines(&pseudo_tgt_path, &out.tgt_lines)?;
        let errors: Vec<String> = out
            .errors
            .iter()
            .map(|e| format!("{}\t{}", e.line, e.message))
            .collect();
        write_lines(&pseudo_dir.join("errors.log"), &errors)?;
        manifest.completed.insert("pseudo".to_string());
        manifest.save(dir)?;
        out
    };

    // 3. mixed corpus with provenance
    let mixed_dir = dir.join("mixed_corpus");
    let (pseudo_corpus, dropped) = pseudo.usable_corpus(data.vocab);
    manifest.pseudo_dropped = dropped;
    let mixed = mix_corpora(
        data.real,
        &pseudo_corpus,
        vocab_size,
        config.seed.wrapping_add(2),
    )?;
    if !manifest.done("mixed", &mixed_dir.join("mixed.src")) {
        std::fs::create_dir_all(&mixed_dir)?;
        write_lines(
            &mixed_dir.join("mixed.src"),
            &corpus_to_text(data.vocab, &mixed.corpus.src),
        )?;
        write_lines(
            &mixed_dir.join("mixed.tgt"),
            &corpus_to_text(data.vocab, &mixed.corpus.tgt),
        )?;
        let flags: Vec<String> = mixed
            .provenance
            .iter()
            .map(|p| match p {
                Provenance::Real => "real".to_string(),
                Provenance::Pseudo => "pseudo".to_string(),
            })
            .collect();
        write_lines(&mixed_dir.join("mixed.flags"), &flags)?;
        manifest.completed.insert("mixed".to_string());
        manifest.save(dir)?;
    }

    // 4. forward models, both from fresh inits
    let baseline_steps = config.train.total_steps;
    let growth = mixed.corpus.len() as f64 / data.real.len().max(1) as f64;
    let augmented_steps =
        ((baseline_steps as f64) * growth.min(config.step_growth_cap)).round() as usize;
    let baseline_params: ModelParams<T> = train_stage(
        "forward_baseline",
        dir,
        &dir.join("forward_ckpt").join("baseline"),
        &mut manifest,
        &config.forward_model,
        data.real,
        data.dev,
        &TrainOptions {
            seed: config.seed,
            ckpt_dir: None,
            ..config.train.clone()
        },
        config.seed,
    )?;
    let augmented_params: ModelParams<T> = train_stage(
        "forward_augmented",
        dir,
        &dir.join("forward_ckpt").join("augmented"),
        &mut manifest,
        &config.forward_model,
        &mixed.corpus,
        data.dev,
        &TrainOptions {
            total_steps: augmented_steps.max(1),
            seed: config.seed,
            ckpt_dir: None,
            ..config.train.clone()
        },
        config.seed,
    )?;

    // 5. shared-test-set evaluation of both models
    let reports_dir = dir.join("reports");
    std::fs::create_dir_all(&reports_dir)?;
    let baseline_bleu = evaluate_model(&baseline_params, data, &config.decode, config.workers)
        .map_err(stage_err("evaluate"))?;
    let augmented_bleu = evaluate_model(&augmented_params, data, &config.decode, config.workers)
        .map_err(stage_err("evaluate"))?;
    let report = PipelineReport {
        baseline_bleu: baseline_bleu.bleu,
        augmented_bleu: augmented_bleu.bleu,
        real_lines: mixed.real_lines(),
        pseudo_lines: mixed.pseudo_lines(),
        dropped_pseudo: dropped,
        baseline_steps,
        augmented_steps: augmented_steps.max(1),
    };
    write_lines(
        &reports_dir.join("bleu.tsv"),
        &[
            format!("model\t{}", BleuReport::tsv_header()),
            format!("baseline\t{}", baseline_bleu.tsv_line()),
            format!("augmented\t{}", augmented_bleu.tsv_line()),
        ],
    )?;
    manifest.completed.insert("report".to_string());
    manifest.report = Some(report.clone());
    manifest.save(dir)?;
    Ok(report)
}
