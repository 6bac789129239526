//! Adam training with warmup, divergence guard, checkpointing.

mod adam;
mod checkpoint;

pub use adam::{adam_step, clip_gradients, lr_at, AdamState};
pub use checkpoint::{
    average_checkpoints, checkpoint_filename, list_checkpoints, save_checkpoint, Checkpoint,
    CkptTensor,
};

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::data::{build_batches, Batch, ParallelCorpus, PAD};
use crate::model::{decode_forward, encode, Bound, IdMatrix, ModelError, ModelParams};
use crate::tensor::{Graph, Rng, Scalar, TensorError, TensorId};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("total_steps must be at least 1")]
    ZeroSteps,
    #[error("no trainable batches (corpus empty or every line over budget)")]
    NoBatches,
    #[error("non-finite gradient in tensor {name} at step {step}")]
    NonFiniteGradient { name: String, step: u64 },
    #[error(
        "training diverged at step {step}: loss {loss:.4} exceeded 10x initial ({initial:.4}) for {window} consecutive steps"
    )]
    Diverged {
        step: usize,
        loss: f64,
        initial: f64,
        window: usize,
        report: TrainReport,
    },
    #[error("checkpoint {path}: {reason}")]
    BadCheckpoint { path: PathBuf, reason: String },
    #[error("no checkpoints to average")]
    NoCheckpoints,
    #[error("checkpoint inventories differ: expected {expected}, found {found}")]
    InventoryMismatch { expected: String, found: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Model(ModelError::from(e))
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub total_steps: usize,
    pub checkpoint_every: usize,
    pub warmup_steps: usize,
    pub token_budget: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: Option<f64>,
    pub seed: u64,
    /// Checkpoints land here as ckpt-<step>.ckpt; None trains in memory only.
    pub ckpt_dir: Option<PathBuf>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            total_steps: 1000,
            checkpoint_every: 50,
            warmup_steps: 400,
            token_budget: 2048,
            beta1: 0.9,
            beta2: 0.997,
            eps: 1e-9,
            grad_clip: None,
            seed: 1,
            ckpt_dir: None,
        }
    }
}

/// One logged interval.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub step: usize,
    pub loss: f64,
    pub dev_loss: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub rows: Vec<ReportRow>,
    pub skipped_lines: usize,
    pub final_step: usize,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.loss)
    }

    pub fn final_dev_loss(&self) -> Option<f64> {
        self.rows.iter().rev().find_map(|r| r.dev_loss)
    }

    /// Tab-separated log: step, loss, dev_loss, lr.
    pub fn save_tsv(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "step\tloss\tdev_loss\tlr")?;
        for r in &self.rows {
            let dev = r
                .dev_loss
                .map_or_else(|| "NA".to_string(), |d| format!("{d:.6}"));
            writeln!(f, "{}\t{:.6}\t{}\t{:.8}", r.step, r.loss, dev, r.lr)?;
        }
        f.flush()
    }
}

/// Label-smoothed loss of one padded batch, mean over non-PAD target
/// positions.
pub fn batch_loss<T: Scalar>(
    g: &mut Graph<T>,
    params: &ModelParams<T>,
    bound: &Bound,
    batch: &Batch,
    train: bool,
    rng: &mut Rng,
) -> Result<TensorId, ModelError> {
    let src = IdMatrix::new(batch.rows, batch.src_cols, batch.src.clone());
    let tgt_in = IdMatrix::new(batch.rows, batch.tgt_cols, batch.tgt_input.clone());
    let enc = encode(g, params, bound, &src, None, train, rng)?;
    let logits = decode_forward(g, params, bound, &tgt_in, enc, &src, None, train, rng)?;
    let vocab = params.config.tgt_vocab_size;
    let flat = g.reshape(logits, vec![batch.rows * batch.tgt_cols, vocab])?;
    let loss = g.cross_entropy_label_smoothed(
        flat,
        &batch.tgt_output,
        params.config.label_smoothing,
        PAD,
    )?;
    Ok(loss)
}

/// Mean dev loss over a corpus, weighted by non-PAD target tokens.
pub fn evaluate_loss<T: Scalar>(
    params: &ModelParams<T>,
    corpus: &ParallelCorpus,
    token_budget: usize,
) -> Result<f64, TrainError> {
    let (batches, _) = build_batches(corpus, token_budget, 0);
    if batches.is_empty() {
        return Err(TrainError::NoBatches);
    }
    let mut rng = Rng::new(0);
    let mut total = 0.0;
    let mut tokens = 0usize;
    for batch in &batches {
        let mut g = Graph::new();
        let bound = params.bind(&mut g, false);
        let loss = batch_loss(&mut g, params, &bound, batch, false, &mut rng)?;
        let n = batch.target_tokens();
        total += g.value(loss).data()[0].to_f64() * n as f64;
        tokens += n;
    }
    Ok(total / tokens as f64)
}

const DIVERGENCE_FACTOR: f64 = 10.0;
const DIVERGENCE_WINDOW: usize = 100;

/// Trips once the loss has exceeded `factor` x the first observed loss for
/// `window` consecutive observations.
#[derive(Debug, Clone)]
pub struct DivergenceGuard {
    factor: f64,
    window: usize,
    initial: Option<f64>,
    over: usize,
}

impl DivergenceGuard {
    pub fn new(factor: f64, window: usize) -> Self {
        DivergenceGuard {
            factor,
            window,
            initial: None,
            over: 0,
        }
    }

    pub fn initial(&self) -> Option<f64> {
        self.initial
    }

    /// Returns true when training should abort.
    pub fn observe(&mut self, loss: f64) -> bool {
        let initial = *self.initial.get_or_insert(loss);
        if loss > self.factor * initial {
            self.over += 1;
        } else {
            self.over = 0;
        }
        self.over >= self.window
    }
}

/// Step-driven training. Batches are rebuilt (reshuffled) every epoch from
/// the same seed stream; a checkpoint is written every `checkpoint_every`
/// steps and at the end. Dev loss is reported at checkpoint intervals.
pub fn train_loop<T: Scalar>(
    params: &mut ModelParams<T>,
    train_corpus: &ParallelCorpus,
    dev_corpus: Option<&ParallelCorpus>,
    opts: &TrainOptions,
) -> Result<TrainReport, TrainError> {
    if opts.total_steps == 0 {
        return Err(TrainError::ZeroSteps);
    }
    if let Some(dir) = &opts.ckpt_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut state = AdamState::new(params, opts.beta1, opts.beta2, opts.eps);
    let mut dropout_rng = Rng::new(opts.seed).split(0x64726f70);
    let mut report = TrainReport::default();

    let n_entries = params.entries().len();
    let d_model = params.config.d_model;
    let mut step = 0usize;
    let mut epoch = 0u64;
    let mut guard = DivergenceGuard::new(DIVERGENCE_FACTOR, DIVERGENCE_WINDOW);

    'steps: loop {
        let (batches, skipped) =
            build_batches(train_corpus, opts.token_budget, opts.seed.wrapping_add(epoch));
        if epoch == 0 {
            report.skipped_lines = skipped;
        }
        if batches.is_empty() {
            return Err(TrainError::NoBatches);
        }
        epoch += 1;
        for batch in &batches {
            step += 1;
            let mut g = Graph::new();
            let bound = params.bind(&mut g, true);
            let loss_id = batch_loss(&mut g, params, &bound, batch, true, &mut dropout_rng)?;
            let loss = g.value(loss_id).data()[0].to_f64();
            g.backward(loss_id)?;

            if guard.observe(loss) {
                return Err(TrainError::Diverged {
                    step,
                    loss,
                    initial: guard.initial().unwrap_or(loss),
                    window: DIVERGENCE_WINDOW,
                    report,
                });
            }

            let mut grads: Vec<Option<Vec<T>>> = (0..n_entries)
                .map(|i| g.grad(bound.ids[i]).map(|s| s.to_vec()))
                .collect();
            drop(g);
            if let Some(max_norm) = opts.grad_clip {
                clip_gradients(&mut grads, max_norm);
            }
            let lr = lr_at(step, d_model, opts.warmup_steps);
            adam_step(params, &grads, &mut state, lr)?;

            let at_interval = step % opts.checkpoint_every == 0;
            let done = step >= opts.total_steps;
            if at_interval || done {
                let dev_loss = match dev_corpus {
                    Some(dev) => Some(evaluate_loss(params, dev, opts.token_budget)?),
                    None => None,
                };
                report.rows.push(ReportRow {
                    step,
                    loss,
                    dev_loss,
                    lr,
                });
                if let Some(dir) = &opts.ckpt_dir {
                    save_checkpoint(&dir.join(checkpoint_filename(step as u64)), params, step as u64)?;
                }
            }
            if done {
                break 'steps;
            }
        }
    }
    report.final_step = step;
    Ok(report)
}
