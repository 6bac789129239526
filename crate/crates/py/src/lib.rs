//! Python bindings: enough surface to build a corpus, train a small
//! model, decode it, and score the output from a notebook.

use std::path::PathBuf;
use std::str::FromStr;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use rsnmt::data::{
    bpe_train, gen_synthetic, synthetic_vocab, ParallelCorpus, SubwordModel, SyntheticTask,
    Vocabulary,
};
use rsnmt::decode::{DecodeConfig, Translator};
use rsnmt::eval;
use rsnmt::model::{param_count, EmbeddingSharing, ModelConfig as CoreConfig, ModelParams, StackingMode};
use rsnmt::train::{lr_at, train_loop, Checkpoint, TrainOptions};

fn value_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_stacking(s: &str) -> PyResult<StackingMode> {
    match s {
        "recurrent" => Ok(StackingMode::Recurrent),
        "vanilla" => Ok(StackingMode::Vanilla),
        other => Err(PyValueError::new_err(format!(
            "stacking must be \"recurrent\" or \"vanilla\", got {other:?}"
        ))),
    }
}

fn parse_sharing(s: &str) -> PyResult<EmbeddingSharing> {
    match s {
        "joint_all_tied" => Ok(EmbeddingSharing::JointAllTied),
        "tgt_softmax_tied" => Ok(EmbeddingSharing::TgtSoftmaxTied),
        "separate" => Ok(EmbeddingSharing::Separate),
        other => Err(PyValueError::new_err(format!(
            "embedding_sharing must be joint_all_tied, tgt_softmax_tied, or separate, got {other:?}"
        ))),
    }
}

/// Architecture settings; construct once and hand to `Model`.
#[pyclass(name = "ModelConfig")]
#[derive(Clone)]
struct PyModelConfig {
    inner: CoreConfig,
}

#[pymethods]
impl PyModelConfig {
    #[new]
    #[pyo3(signature = (
        d_model = 64, n_heads = 4, d_ff = 256, depth = 2, stacking = "recurrent",
        dropout_p = 0.1, label_smoothing = 0.1, src_vocab_size = 64, tgt_vocab_size = 64,
        embedding_sharing = "joint_all_tied", max_len = 256
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        d_model: usize,
        n_heads: usize,
        d_ff: usize,
        depth: usize,
        stacking: &str,
        dropout_p: f64,
        label_smoothing: f64,
        src_vocab_size: usize,
        tgt_vocab_size: usize,
        embedding_sharing: &str,
        max_len: usize,
    ) -> PyResult<Self> {
        let inner = CoreConfig {
            d_model,
            n_heads,
            d_ff,
            depth,
            stacking: parse_stacking(stacking)?,
            dropout_p,
            label_smoothing,
            src_vocab_size,
            tgt_vocab_size,
            embedding_sharing: parse_sharing(embedding_sharing)?,
            max_len,
        };
        inner.validate().map_err(value_err)?;
        Ok(PyModelConfig { inner })
    }

    #[getter]
    fn d_model(&self) -> usize {
        self.inner.d_model
    }

    #[getter]
    fn depth(&self) -> usize {
        self.inner.depth
    }

    #[getter]
    fn stacking(&self) -> &'static str {
        match self.inner.stacking {
            StackingMode::Recurrent => "recurrent",
            StackingMode::Vanilla => "vanilla",
        }
    }

    /// Trainable parameters; with_slots adds the two Adam accumulators.
    #[pyo3(signature = (with_slots = false))]
    fn param_count(&self, with_slots: bool) -> usize {
        param_count(&self.inner, with_slots)
    }

    fn __repr__(&self) -> String {
        format!(
            "ModelConfig(d_model={}, n_heads={}, d_ff={}, depth={}, stacking=\"{}\", vocab={}/{})",
            self.inner.d_model,
            self.inner.n_heads,
            self.inner.d_ff,
            self.inner.depth,
            self.stacking(),
            self.inner.src_vocab_size,
            self.inner.tgt_vocab_size,
        )
    }
}

/// Corpus BLEU with per-order precisions and the brevity penalty.
#[pyclass(name = "BleuReport")]
struct PyBleuReport {
    #[pyo3(get)]
    bleu: f64,
    #[pyo3(get)]
    precisions: [f64; 4],
    #[pyo3(get)]
    brevity_penalty: f64,
    #[pyo3(get)]
    hyp_tokens: usize,
    #[pyo3(get)]
    ref_tokens: usize,
    #[pyo3(get)]
    warning: Option<String>,
    text: String,
}

#[pymethods]
impl PyBleuReport {
    fn __repr__(&self) -> &str {
        &self.text
    }
}

/// A parameter set plus the vocabulary it indexes. Lines passed to
/// `translate` are whitespace-tokenized against that vocabulary.
#[pyclass(name = "Model")]
struct PyModel {
    params: ModelParams<f32>,
    vocab: Vocabulary,
}

impl PyModel {
    fn vocab_for(config: &CoreConfig, tokens: Option<Vec<String>>) -> PyResult<Vocabulary> {
        let vocab = match tokens {
            Some(content) => Vocabulary::new(content),
            None => synthetic_vocab(config.src_vocab_size).map_err(value_err)?,
        };
        if vocab.len() != config.src_vocab_size || vocab.len() != config.tgt_vocab_size {
            return Err(PyValueError::new_err(format!(
                "vocabulary has {} entries but the model expects {}/{}",
                vocab.len(),
                config.src_vocab_size,
                config.tgt_vocab_size
            )));
        }
        Ok(vocab)
    }
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (config, seed = 1, tokens = None))]
    fn new(config: &PyModelConfig, seed: u64, tokens: Option<Vec<String>>) -> PyResult<Self> {
        let vocab = Self::vocab_for(&config.inner, tokens)?;
        let params = ModelParams::<f32>::init(&config.inner, seed).map_err(value_err)?;
        Ok(PyModel { params, vocab })
    }

    /// Train in place on id corpora; returns (step, loss, dev_loss) rows
    /// at checkpoint intervals.
    #[pyo3(signature = (
        src, tgt, steps, dev = None, token_budget = 2048, warmup_steps = 400,
        checkpoint_every = 50, seed = 1, beta2 = 0.997, grad_clip = None, ckpt_dir = None
    ))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        &mut self,
        src: Vec<Vec<usize>>,
        tgt: Vec<Vec<usize>>,
        steps: usize,
        dev: Option<(Vec<Vec<usize>>, Vec<Vec<usize>>)>,
        token_budget: usize,
        warmup_steps: usize,
        checkpoint_every: usize,
        seed: u64,
        beta2: f64,
        grad_clip: Option<f64>,
        ckpt_dir: Option<PathBuf>,
    ) -> PyResult<Vec<(usize, f64, Option<f64>)>> {
        let corpus = ParallelCorpus::new(src, tgt).map_err(value_err)?;
        let dev_corpus = dev
            .map(|(s, t)| ParallelCorpus::new(s, t))
            .transpose()
            .map_err(value_err)?;
        let opts = TrainOptions {
            total_steps: steps,
            checkpoint_every,
            warmup_steps,
            token_budget,
            beta2,
            grad_clip,
            seed,
            ckpt_dir,
            ..TrainOptions::default()
        };
        let report = train_loop(&mut self.params, &corpus, dev_corpus.as_ref(), &opts)
            .map_err(value_err)?;
        Ok(report
            .rows
            .iter()
            .map(|r| (r.step, r.loss, r.dev_loss))
            .collect())
    }

    /// Translate text lines; raises on any failed line.
    #[pyo3(signature = (lines, beam = 4, alpha = 0.6, depth = None, max_len = None, workers = 1))]
    fn translate(
        &self,
        lines: Vec<String>,
        beam: usize,
        alpha: f64,
        depth: Option<usize>,
        max_len: Option<usize>,
        workers: usize,
    ) -> PyResult<Vec<String>> {
        let translator = Translator {
            params: &self.params,
            src_vocab: &self.vocab,
            tgt_vocab: &self.vocab,
            subword: None,
            config: DecodeConfig {
                beam_size: beam,
                alpha,
                max_len,
                depth_override: depth,
            },
        };
        let out = translator.translate_corpus(&lines, workers);
        if let Some(e) = out.errors.first() {
            return Err(PyValueError::new_err(format!(
                "line {}: {}",
                e.line, e.message
            )));
        }
        Ok(out.lines)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint::from_params(&self.params, 0)
            .save(&path)
            .map_err(value_err)
    }

    #[staticmethod]
    #[pyo3(signature = (path, tokens = None))]
    fn load(path: PathBuf, tokens: Option<Vec<String>>) -> PyResult<Self> {
        let params = Checkpoint::load(&path)
            .and_then(|c| c.to_params::<f32>())
            .map_err(value_err)?;
        let vocab = Self::vocab_for(&params.config, tokens)?;
        Ok(PyModel { params, vocab })
    }

    fn param_count(&self) -> usize {
        param_count(&self.params.config, false)
    }

    #[getter]
    fn config(&self) -> PyModelConfig {
        PyModelConfig {
            inner: self.params.config.clone(),
        }
    }

    fn ids_to_line(&self, ids: Vec<usize>) -> String {
        self.vocab.line_from_ids(&ids)
    }

    fn line_to_ids(&self, line: &str) -> Vec<usize> {
        self.vocab.ids_from_line(line)
    }
}

/// Byte-pair subword inventory learned from whitespace-tokenized text.
#[pyclass(name = "SubwordModel")]
struct PySubwordModel {
    inner: SubwordModel,
}

#[pymethods]
impl PySubwordModel {
    #[staticmethod]
    fn train(lines: Vec<String>, merges: usize) -> PyResult<Self> {
        Ok(PySubwordModel {
            inner: bpe_train(&lines, merges).map_err(value_err)?,
        })
    }

    fn segment(&self, word: &str) -> Vec<String> {
        self.inner.segment(word)
    }

    fn segment_line(&self, line: &str) -> Vec<String> {
        line.split_whitespace()
            .flat_map(|w| self.inner.segment(w))
            .collect()
    }

    fn merge_count(&self) -> usize {
        self.inner.merges().len()
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(value_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PySubwordModel {
            inner: SubwordModel::load(&path).map_err(value_err)?,
        })
    }
}

/// Deterministic synthetic parallel corpus as (src, tgt) id lists.
#[pyfunction]
#[pyo3(name = "gen_synthetic")]
#[pyo3(signature = (task, n_pairs, vocab_size, min_len, max_len, seed = 1))]
fn py_gen_synthetic(
    task: &str,
    n_pairs: usize,
    vocab_size: usize,
    min_len: usize,
    max_len: usize,
    seed: u64,
) -> PyResult<(Vec<Vec<usize>>, Vec<Vec<usize>>)> {
    let task = SyntheticTask::from_str(task).map_err(PyValueError::new_err)?;
    let corpus =
        gen_synthetic(task, n_pairs, vocab_size, (min_len, max_len), seed).map_err(value_err)?;
    Ok((corpus.src, corpus.tgt))
}

/// Content tokens "w4", "w5", ... matching the synthetic corpora.
#[pyfunction]
#[pyo3(name = "synthetic_tokens")]
fn py_synthetic_tokens(vocab_size: usize) -> PyResult<Vec<String>> {
    let vocab = synthetic_vocab(vocab_size).map_err(value_err)?;
    Ok(vocab.tokens().to_vec())
}

#[pyfunction]
#[pyo3(name = "bleu")]
fn py_bleu(hypotheses: Vec<String>, references: Vec<String>) -> PyResult<PyBleuReport> {
    let r = eval::bleu(&hypotheses, &references).map_err(value_err)?;
    Ok(PyBleuReport {
        bleu: r.bleu,
        precisions: r.precisions,
        brevity_penalty: r.brevity_penalty,
        hyp_tokens: r.hyp_tokens,
        ref_tokens: r.ref_tokens,
        warning: r.warning.clone(),
        text: r.to_string(),
    })
}

/// Inverse-sqrt schedule with linear warmup, scaled by d_model^-0.5.
#[pyfunction]
#[pyo3(name = "lr_at")]
fn py_lr_at(step: usize, d_model: usize, warmup_steps: usize) -> f64 {
    lr_at(step, d_model, warmup_steps)
}

/// ((5 + length) / 6)^alpha, the beam-ranking divisor.
#[pyfunction]
#[pyo3(name = "length_penalty")]
fn py_length_penalty(length: usize, alpha: f64) -> f64 {
    rsnmt::decode::length_penalty(length, alpha)
}

#[pymodule]
fn rsnmt_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModelConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PySubwordModel>()?;
    m.add_class::<PyBleuReport>()?;
    m.add_function(wrap_pyfunction!(py_gen_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(py_synthetic_tokens, m)?)?;
    m.add_function(wrap_pyfunction!(py_bleu, m)?)?;
    m.add_function(wrap_pyfunction!(py_lr_at, m)?)?;
    m.add_function(wrap_pyfunction!(py_length_penalty, m)?)?;
    Ok(())
}
