//! Beam and greedy decoding with length-normalized scoring, plus batch
//! corpus translation over worker threads.

use crate::data::{bpe_decode, bpe_encode, SubwordModel, Vocabulary, BOS, EOS, PAD};
use crate::model::{decode_forward, encode, IdMatrix, ModelError, ModelParams};
use crate::tensor::{Graph, Rng, Scalar, Tensor};


/// Search settings. `max_len` counts generated tokens (EOS included);
/// when unset it defaults to twice the source length plus ten. The
/// depth override reruns a recurrently stacked model at a different
/// recurrence count than it was trained with.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub alpha: f64,
    pub max_len: Option<usize>,
    pub depth_override: Option<usize>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_size: 4,
            alpha: 0.6,
            max_len: None,
            depth_override: None,
        }
    }
}

/// A (possibly partial) target sequence. `tokens` starts at BOS;
/// `log_prob` is the sum of per-step next-token log-probabilities.
/// Finished hypotheses end in EOS and are never extended.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Generated tokens, BOS stripped.
    pub fn generated(&self) -> &[usize] {
        &self.tokens[1..]
    }

    /// Length-penalized score used for ranking.
    pub fn score(&self, alpha: f64) -> f64 {
        self.log_prob / length_penalty(self.generated().len().max(1), alpha)
    }
}

/// ((5 + length) / 6)^alpha. Grows with length for alpha > 0, so
/// dividing a (negative) log-probability by it favors longer outputs.
pub fn length_penalty(length: usize, alpha: f64) -> f64 {
    debug_assert!(length >= 1);
    ((5.0 + length as f64) / 6.0).powf(alpha)
}

fn source_matrix(src_ids: &[usize]) -> IdMatrix {
    // mirror the training batches: EOS closes every source row
    let mut row = src_ids.to_vec();
    row.push(EOS);
    let cols = row.len();
    IdMatrix::new(1, cols, row)
}

fn effective_max_len(
    config: &DecodeConfig,
    src_len: usize,
    model_max_len: usize,
) -> Result<usize, ModelError> {
    let requested = match config.max_len {
        Some(0) => return Err(ModelError::Config("max_len must be at least 1".into())),
        Some(n) => n,
        None => 2 * src_len + 10,
    };
    // BOS occupies one decoder position
    Ok(requested.min(model_max_len.saturating_sub(1)).max(1))
}

/// Run the encoder once and snapshot the result so every decode step
/// can reuse it as a constant.
fn encode_source<T: Scalar>(
    params: &ModelParams<T>,
    src: &IdMatrix,
    depth_override: Option<usize>,
) -> Result<Tensor<T>, ModelError> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let mut rng = Rng::new(0);
    let id = encode(&mut g, params, &bound, src, depth_override, false, &mut rng)?;
    Ok(g.value(id).clone())
}

fn log_softmax_f64<T: Scalar>(row: &[T]) -> Vec<f64> {
    let mut mx = f64::NEG_INFINITY;
    for &x in row {
        mx = mx.max(x.to_f64());
    }
    let mut z = 0.0;
    for &x in row {
        z += (x.to_f64() - mx).exp();
    }
    let lz = z.ln() + mx;
    row.iter().map(|&x| x.to_f64() - lz).collect()
}

/// Next-token log-probabilities at the last position of every row of
/// a BOS-led prefix matrix. One fresh graph per call; the precomputed
/// encoding enters as a constant and broadcasts across rows when it
/// has a single row itself.
fn last_position_logprobs<T: Scalar>(
    params: &ModelParams<T>,
    src: &IdMatrix,
    enc_values: &Tensor<T>,
    tgt: &IdMatrix,
    depth_override: Option<usize>,
) -> Result<Vec<Vec<f64>>, ModelError> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let enc = g.constant(enc_values.clone());
    let mut rng = Rng::new(0);
    let logits = decode_forward(
        &mut g,
        params,
        &bound,
        tgt,
        enc,
        src,
        depth_override,
        false,
        &mut rng,
    )?;
    let t = g.value(logits);
    let v = *t.shape().last().expect("logits rank");
    let data = t.data();
    let cols = tgt.cols;
    Ok((0..tgt.rows)
        .map(|b| {
            let last = (b * cols + (cols - 1)) * v;
            log_softmax_f64(&data[last..last + v])
        })
        .collect())
}

/// Next-token log-probabilities for a batch of equal-length prefixes
/// over one shared source row.
fn step_logprobs<T: Scalar>(
    params: &ModelParams<T>,
    src: &IdMatrix,
    enc_values: &Tensor<T>,
    prefixes: &[&[usize]],
    depth_override: Option<usize>,
) -> Result<Vec<Vec<f64>>, ModelError> {
    let cols = prefixes[0].len();
    let mut ids = Vec::with_capacity(prefixes.len() * cols);
    for p in prefixes {
        debug_assert_eq!(p.len(), cols);
        ids.extend_from_slice(p);
    }
    let tgt = IdMatrix::new(prefixes.len(), cols, ids);
    last_position_logprobs(params, src, enc_values, &tgt, depth_override)
}

fn argmax(row: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    (best, row[best])
}

/// Argmax next token each step until EOS or the length cap.
/// `finished == false` on the result flags a max-length truncation.
pub fn greedy_decode<T: Scalar>(
    params: &ModelParams<T>,
    src_ids: &[usize],
    config: &DecodeConfig,
) -> Result<Hypothesis, ModelError> {
    let src = source_matrix(src_ids);
    let enc = encode_source(params, &src, config.depth_override)?;
    let max_new = effective_max_len(config, src_ids.len(), params.config.max_len)?;
    let mut tokens = vec![BOS];
    let mut log_prob = 0.0;
    for _ in 0..max_new {
        let rows = step_logprobs(params, &src, &enc, &[&tokens], config.depth_override)?;
        let (tok, lp) = argmax(&rows[0]);
        tokens.push(tok);
        log_prob += lp;
        if tok == EOS {
            return Ok(Hypothesis {
                tokens,
                log_prob,
                finished: true,
            });
        }
    }
    Ok(Hypothesis {
        tokens,
        log_prob,
        finished: false,
    })
}

/// Greedy decoding of many sources in lockstep, sharing one encoder
/// pass and one decoder graph per step. Padded source keys and the
/// padding that backfills rows after they finish are masked to exactly
/// zero attention weight, so each row's result is identical to a
/// standalone `greedy_decode` call.
pub fn greedy_decode_batch<T: Scalar>(
    params: &ModelParams<T>,
    srcs: &[Vec<usize>],
    config: &DecodeConfig,
) -> Result<Vec<Hypothesis>, ModelError> {
    if srcs.is_empty() {
        return Ok(Vec::new());
    }
    let src_rows: Vec<Vec<usize>> = srcs
        .iter()
        .map(|s| {
            let mut r = s.clone();
            r.push(EOS);
            r
        })
        .collect();
    let src = IdMatrix::from_rows(&src_rows);
    let enc = encode_source(params, &src, config.depth_override)?;
    let limits: Vec<usize> = srcs
        .iter()
        .map(|s| effective_max_len(config, s.len(), params.config.max_len))
        .collect::<Result<_, _>>()?;
    let horizon = *limits.iter().max().expect("nonempty batch");

    let mut hyps: Vec<Hypothesis> = srcs
        .iter()
        .map(|_| Hypothesis {
            tokens: vec![BOS],
            log_prob: 0.0,
            finished: false,
        })
        .collect();
    let mut open: Vec<bool> = vec![true; srcs.len()];

    for t in 1..=horizon {
        if !open.iter().any(|&o| o) {
            break;
        }
        let mut ids = Vec::with_capacity(hyps.len() * t);
        for h in &hyps {
            ids.extend_from_slice(&h.tokens[..h.tokens.len().min(t)]);
            ids.resize(ids.len() + t.saturating_sub(h.tokens.len()), PAD);
        }
        let tgt = IdMatrix::new(hyps.len(), t, ids);
        let rows = last_position_logprobs(params, &src, &enc, &tgt, config.depth_override)?;
        for (b, row) in rows.iter().enumerate() {
            if !open[b] {
                continue;
            }
            let (tok, lp) = argmax(row);
            hyps[b].tokens.push(tok);
            hyps[b].log_prob += lp;
            if tok == EOS {
                hyps[b].finished = true;
                open[b] = false;
            } else if hyps[b].generated().len() >= limits[b] {
                open[b] = false;
            }
        }
    }
    Ok(hyps)
}

/// Largest penalized score this live hypothesis could still reach:
/// future log-probability increments are never positive, and the
/// penalty over reachable lengths is bracketed by its endpoints.
fn upper_bound(h: &Hypothesis, alpha: f64, max_new: usize) -> f64 {
    let cur = h.generated().len().max(1);
    let near = length_penalty((cur + 1).min(max_new), alpha);
    let far = length_penalty(max_new, alpha);
    if h.log_prob >= 0.0 {
        h.log_prob / near.min(far)
    } else {
        h.log_prob / near.max(far)
    }
}

/// Standard beam search. Every live hypothesis is expanded over the
/// whole vocabulary; the `beam_size` best extensions by penalized score
/// survive, with those ending in EOS retiring to a finished pool. The
/// search stops once no live upper bound can beat the best finished
/// score, or at the length cap (returning the best live hypothesis if
/// nothing ever finished).
pub fn beam_decode<T: Scalar>(
    params: &ModelParams<T>,
    src_ids: &[usize],
    config: &DecodeConfig,
) -> Result<Hypothesis, ModelError> {
    if config.beam_size == 0 {
        return Err(ModelError::Config("beam size must be at least 1".into()));
    }
    let src = source_matrix(src_ids);
    let enc = encode_source(params, &src, config.depth_override)?;
    let max_new = effective_max_len(config, src_ids.len(), params.config.max_len)?;
    let alpha = config.alpha;

    let mut live = vec![Hypothesis {
        tokens: vec![BOS],
        log_prob: 0.0,
        finished: false,
    }];
    let mut best_finished: Option<Hypothesis> = None;

    for step in 1..=max_new {
        let prefixes: Vec<&[usize]> = live.iter().map(|h| h.tokens.as_slice()).collect();
        let rows = step_logprobs(params, &src, &enc, &prefixes, config.depth_override)?;

        let penalty = length_penalty(step, alpha);
        let mut cands: Vec<(f64, usize, usize, f64)> = Vec::with_capacity(rows.len() * rows[0].len());
        for (b, row) in rows.iter().enumerate() {
            for (tok, &lp) in row.iter().enumerate() {
                let total = live[b].log_prob + lp;
                cands.push((total / penalty, b, tok, total));
            }
        }
        cands.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
        cands.truncate(config.beam_size);

        let mut next_live = Vec::with_capacity(cands.len());
        for (score, b, tok, total) in cands {
            let mut tokens = live[b].tokens.clone();
            tokens.push(tok);
            let hyp = Hypothesis {
                tokens,
                log_prob: total,
                finished: tok == EOS,
            };
            if hyp.finished {
                let better = best_finished
                    .as_ref()
                    .map_or(true, |bf| score > bf.score(alpha));
                if better {
                    best_finished = Some(hyp);
                }
            } else {
                next_live.push(hyp);
            }
        }
        live = next_live;
        if live.is_empty() {
            break;
        }
        if let Some(bf) = &best_finished {
            let bf_score = bf.score(alpha);
            let best_ub = live
                .iter()
                .map(|h| upper_bound(h, alpha, max_new))
                .fold(f64::NEG_INFINITY, f64::max);
            if best_ub <= bf_score {
                break;
            }
        }
    }

    if let Some(h) = best_finished {
        return Ok(h);
    }
    live.sort_by(|x, y| y.score(alpha).total_cmp(&x.score(alpha)));
    Ok(live.into_iter().next().expect("a live hypothesis remains"))
}

/// Cumulative log-probability of a given generated sequence under the
/// model, computed in one full forward pass. Independent of the
/// stepwise accumulation in the searches, so it doubles as a
/// consistency oracle for their reported scores.
pub fn score_sequence<T: Scalar>(
    params: &ModelParams<T>,
    src_ids: &[usize],
    generated: &[usize],
    depth_override: Option<usize>,
) -> Result<f64, ModelError> {
    if generated.is_empty() {
        return Ok(0.0);
    }
    let src = source_matrix(src_ids);
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let mut rng = Rng::new(0);
    let enc = encode(&mut g, params, &bound, &src, depth_override, false, &mut rng)?;
    let mut input = Vec::with_capacity(generated.len());
    input.push(BOS);
    input.extend_from_slice(&generated[..generated.len() - 1]);
    let cols = input.len();
    let tgt = IdMatrix::new(1, cols, input);
    let logits = decode_forward(
        &mut g,
        params,
        &bound,
        &tgt,
        enc,
        &src,
        depth_override,
        false,
        &mut rng,
    )?;
    let t = g.value(logits);
    let v = *t.shape().last().expect("logits rank");
    let mut total = 0.0;
    for (i, &gold) in generated.iter().enumerate() {
        let row = &t.data()[i * v..(i + 1) * v];
        total += log_softmax_f64(row)[gold];
    }
    Ok(total)
}

/// Worker count after the RSNMT_THREADS cap.
pub fn effective_workers(requested: usize) -> usize {
    let cap = std::env::var("RSNMT_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1);
    workers_with_cap(requested, cap)
}

fn workers_with_cap(requested: usize, cap: Option<usize>) -> usize {
    let n = requested.max(1);
    match cap {
        Some(c) => n.min(c),
        None => n,
    }
}

/// One translation failure; the output keeps an empty line in place.
#[derive(Clone, Debug)]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

#[derive(Clone, Debug, Default)]
pub struct TranslationOutput {
    pub lines: Vec<String>,
    pub errors: Vec<LineError>,
}

/// Text-in, text-out decoding bundle. Without a subword model, lines
/// are whitespace-tokenized against the vocabularies directly.
pub struct Translator<'a, T: Scalar> {
    pub params: &'a ModelParams<T>,
    pub src_vocab: &'a Vocabulary,
    pub tgt_vocab: &'a Vocabulary,
    pub subword: Option<&'a SubwordModel>,
    pub config: DecodeConfig,
}

impl<'a, T: Scalar> Translator<'a, T> {
    pub fn line_to_ids(&self, line: &str) -> Vec<usize> {
        match self.subword {
            Some(m) => bpe_encode(m, self.src_vocab, line),
            None => self.src_vocab.ids_from_line(line),
        }
    }

    pub fn ids_to_line(&self, ids: &[usize]) -> String {
        match self.subword {
            Some(_) => bpe_decode(self.tgt_vocab, ids),
            None => self.tgt_vocab.line_from_ids(ids),
        }
    }

    pub fn translate_line(&self, line: &str) -> Result<String, ModelError> {
        let ids = self.line_to_ids(line);
        if ids.is_empty() {
            return Ok(String::new());
        }
        let hyp = if self.config.beam_size == 1 {
            greedy_decode(self.params, &ids, &self.config)?
        } else {
            beam_decode(self.params, &ids, &self.config)?
        };
        Ok(self.ids_to_line(hyp.generated()))
    }

    /// Translate every line, sharding across `workers` threads over
    /// read-only parameters. Output line i corresponds to input line i
    /// regardless of worker count; failed lines come back empty with an
    /// error entry instead of aborting the corpus.
    pub fn translate_corpus<S: AsRef<str> + Sync>(
        &self,
        lines: &[S],
        workers: usize,
    ) -> TranslationOutput {
        let workers = effective_workers(workers);
        if lines.is_empty() {
            return TranslationOutput::default();
        }
        let chunk = lines.len().div_ceil(workers);
        let per_worker: Vec<Vec<Result<String, String>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = lines
                .chunks(chunk)
                .map(|part| {
                    scope.spawn(move || {
                        part.iter()
                            .map(|line| {
                                self.translate_line(line.as_ref()).map_err(|e| e.to_string())
                            })
                            .collect()
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("translation worker panicked"))
                .collect()
        });

        let mut out = TranslationOutput {
            lines: Vec::with_capacity(lines.len()),
            errors: Vec::new(),
        };
        for result in per_worker.into_iter().flatten() {
            match result {
                Ok(text) => out.lines.push(text),
                Err(message) => {
                    out.errors.push(LineError {
                        line: out.lines.len(),
                        message,
                    });
                    out.lines.push(String::new());
                }
            }
        }
        out
    }
}
