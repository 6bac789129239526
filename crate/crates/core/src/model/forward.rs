//! Forward passes: attention, layer stacking, encoder and decoder.

use super::params::{AttnIdx, Bound, DecLayerIdx, EncLayerIdx, NormIdx};
use super::{ModelConfig, ModelError, ModelParams, StackingMode};
use crate::data::PAD;
use crate::tensor::{Graph, Rng, Scalar, Tensor, TensorId};

const NORM_EPS: f64 = 1e-6;
const MASKED: f64 = -1e9;
/// Anything at or below this is treated as a masked score.
const MASK_FLOOR: f64 = -1e8;

/// Padded id matrix, row-major `[rows x cols]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdMatrix {
    pub ids: Vec<usize>,
    pub rows: usize,
    pub cols: usize,
}

impl IdMatrix {
    pub fn new(rows: usize, cols: usize, ids: Vec<usize>) -> Self {
        assert_eq!(ids.len(), rows * cols);
        IdMatrix { ids, rows, cols }
    }

    /// Pad ragged rows to the longest with PAD.
    pub fn from_rows(rows: &[Vec<usize>]) -> Self {
        let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            ids.extend_from_slice(row);
            ids.extend(std::iter::repeat(PAD).take(cols - row.len()));
        }
        IdMatrix {
            ids,
            rows: rows.len(),
            cols,
        }
    }

    pub fn row(&self, r: usize) -> &[usize] {
        &self.ids[r * self.cols..(r + 1) * self.cols]
    }
}

/// Sinusoidal position table: PE(pos, 2i) = sin(pos/10000^(2i/d)),
/// PE(pos, 2i+1) = cos of the same angle.
pub fn sinusoidal_positions<T: Scalar>(
    max_len: usize,
    d_model: usize,
) -> Result<Tensor<T>, ModelError> {
    if d_model % 2 != 0 {
        return Err(ModelError::Config(format!(
            "sinusoidal positions need an even width, got {d_model}"
        )));
    }
    let mut data = Vec::with_capacity(max_len * d_model);
    for pos in 0..max_len {
        for i in 0..d_model {
            let angle = pos as f64 / 10000f64.powf((2 * (i / 2)) as f64 / d_model as f64);
            let v = if i % 2 == 0 { angle.sin() } else { angle.cos() };
            data.push(T::from_f64(v));
        }
    }
    Ok(Tensor::new(vec![max_len, d_model], data).expect("table shape"))
}

/// Additive attention bias from padding: 0 at real keys, a large negative
/// number at PAD keys; shape [rows, 1, 1, cols]. Errors if a row has no
/// unmasked key at all.
fn padding_key_bias<T: Scalar>(
    g: &mut Graph<T>,
    ids: &IdMatrix,
) -> Result<TensorId, ModelError> {
    let mut data = Vec::with_capacity(ids.ids.len());
    for r in 0..ids.rows {
        let row = ids.row(r);
        if row.iter().all(|&t| t == PAD) {
            return Err(ModelError::AllKeysMasked { query: r });
        }
        data.extend(
            row.iter()
                .map(|&t| T::from_f64(if t == PAD { MASKED } else { 0.0 })),
        );
    }
    let t = Tensor::new(vec![ids.rows, 1, 1, ids.cols], data)?;
    Ok(g.constant(t))
}

/// Causal bias [1, 1, len, len]: position t may attend keys 0..=t.
fn causal_bias<T: Scalar>(g: &mut Graph<T>, len: usize) -> TensorId {
    let mut data = Vec::with_capacity(len * len);
    for q in 0..len {
        for k in 0..len {
            data.push(T::from_f64(if k > q { MASKED } else { 0.0 }));
        }
    }
    let t = Tensor::new(vec![1, 1, len, len], data).expect("causal shape");
    g.constant(t)
}

/// Projection leaves for one attention block.
#[derive(Debug, Clone, Copy)]
pub struct AttnProj {
    pub wq: TensorId,
    pub wk: TensorId,
    pub wv: TensorId,
    pub wo: TensorId,
}

impl AttnProj {
    fn from_idx(bound: &Bound, idx: &AttnIdx) -> Self {
        AttnProj {
            wq: bound.ids[idx.wq],
            wk: bound.ids[idx.wk],
            wv: bound.ids[idx.wv],
            wo: bound.ids[idx.wo],
        }
    }
}

/// Scaled dot-product attention over `n_heads` heads with an optional
/// additive mask bias (broadcastable to [B, H, Tq, Tk]). Every query
/// must keep at least one unmasked key.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention<T: Scalar>(
    g: &mut Graph<T>,
    q_in: TensorId,
    k_in: TensorId,
    v_in: TensorId,
    mask_bias: Option<TensorId>,
    proj: AttnProj,
    n_heads: usize,
    dropout_p: f64,
    train: bool,
    rng: &mut Rng,
) -> Result<TensorId, ModelError> {
    let (b, tq, d) = {
        let s = g.shape(q_in);
        (s[0], s[1], s[2])
    };
    let tk = g.shape(k_in)[1];
    if d % n_heads != 0 {
        return Err(ModelError::Config(format!(
            "width {d} not divisible by {n_heads} heads"
        )));
    }
    if let Some(mask) = mask_bias {
        check_mask_rows(g.value(mask).shape(), g.value(mask).data())?;
    }
    let dh = d / n_heads;

    // Key/value inputs may carry a batch of 1 against a wider query batch
    // (a shared encoding attended by several hypotheses); matmul broadcasts
    // the leading dims, so each projection keeps its own row count.
    let split = |g: &mut Graph<T>, x: TensorId, t: usize, w: TensorId| {
        let rows = g.shape(x)[0];
        let p = g.matmul(x, w)?;
        let p = g.reshape(p, vec![rows, t, n_heads, dh])?;
        g.permute(p, &[0, 2, 1, 3])
    };
    let q = split(g, q_in, tq, proj.wq)?;
    let k = split(g, k_in, tk, proj.wk)?;
    let v = split(g, v_in, tk, proj.wv)?;

    let scores = g.matmul_nt(q, k)?;
    let mut scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
    if let Some(mask) = mask_bias {
        scores = g.add(scores, mask)?;
    }
    let weights = g.softmax(scores, 3)?;
    let weights = g.dropout(weights, dropout_p, train, rng)?;
    let ctx = g.matmul(weights, v)?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, vec![b, tq, d])?;
    Ok(g.matmul(ctx, proj.wo)?)
}

fn check_mask_rows<T: Scalar>(shape: &[usize], data: &[T]) -> Result<(), ModelError> {
    let keys = *shape.last().unwrap_or(&0);
    if keys == 0 {
        return Err(ModelError::AllKeysMasked { query: 0 });
    }
    for (lane, row) in data.chunks(keys).enumerate() {
        if row.iter().all(|&v| v.to_f64() <= MASK_FLOOR) {
            return Err(ModelError::AllKeysMasked { query: lane });
        }
    }
    Ok(())
}

/// residual -> add -> layer norm, with dropout on the sublayer output.
fn post_norm<T: Scalar>(
    g: &mut Graph<T>,
    x: TensorId,
    sub_out: TensorId,
    norm: &NormIdx,
    bound: &Bound,
    dropout_p: f64,
    train: bool,
    rng: &mut Rng,
) -> Result<TensorId, ModelError> {
    let dropped = g.dropout(sub_out, dropout_p, train, rng)?;
    let summed = g.add(x, dropped)?;
    Ok(g.layer_norm(summed, bound.ids[norm.gain], bound.ids[norm.bias], NORM_EPS)?)
}

fn feed_forward<T: Scalar>(
    g: &mut Graph<T>,
    x: TensorId,
    w1: TensorId,
    b1: TensorId,
    w2: TensorId,
    b2: TensorId,
) -> Result<TensorId, ModelError> {
    let h = g.matmul(x, w1)?;
    let h = g.add(h, b1)?;
    let h = g.relu(h)?;
    let h = g.matmul(h, w2)?;
    Ok(g.add(h, b2)?)
}

#[allow(clippy::too_many_arguments)]
pub(super) fn encoder_layer<T: Scalar>(
    g: &mut Graph<T>,
    bound: &Bound,
    idx: &EncLayerIdx,
    x: TensorId,
    key_bias: Option<TensorId>,
    config: &ModelConfig,
    train: bool,
    rng: &mut Rng,
) -> Result<TensorId, ModelError> {
    let attn = multi_head_attention(
        g,
        x,
        x,
        x,
        key_bias,
        AttnProj::from_idx(bound, &idx.self_attn),
        config.n_heads,
        config.dropout_p,
        train,
        rng,
    )?;
    let x = post_norm(g, x, attn, &idx.norm1, bound, config.dropout_p, train, rng)?;
    let ff = feed_forward(
        g,
        x,
        bound.ids[idx.ffn.w1],
        bound.ids[idx.ffn.b1],
        bound.ids[idx.ffn.w2],
        bound.ids[idx.ffn.b2],
    )?;
    post_norm(g, x, ff, &idx.norm2, bound, config.dropout_p, train, rng)
}

#[allow(clippy::too_many_arguments)]
fn decoder_layer<T: Scalar>(
    g: &mut Graph<T>,
    bound: &Bound,
    idx: &DecLayerIdx,
    x: TensorId,
    self_bias: Option<TensorId>,
    enc_out: TensorId,
    cross_bias: Option<TensorId>,
    config: &ModelConfig,
    train: bool,
    rng: &mut Rng,
) -> Result<TensorId, ModelError> {
    let attn = multi_head_attention(
        g,
        x,
        x,
        x,
        self_bias,
        AttnProj::from_idx(bound, &idx.self_attn),
        config.n_heads,
        config.dropout_p,
        train,
        rng,
    )?;
    let x = post_norm(g, x, attn, &idx.norm1, bound, config.dropout_p, train, rng)?;
    let cross = multi_head_attention(
        g,
        x,
        enc_out,
        enc_out,
        cross_bias,
        AttnProj::from_idx(bound, &idx.cross_attn),
        config.n_heads,
        config.dropout_p,
        train,
        rng,
    )?;
    let x = post_norm(g, x, cross, &idx.norm2, bound, config.dropout_p, train, rng)?;
    let ff = feed_forward(
        g,
        x,
        bound.ids[idx.ffn.w1],
        bound.ids[idx.ffn.b1],
        bound.ids[idx.ffn.w2],
        bound.ids[idx.ffn.b2],
    )?;
    post_norm(g, x, ff, &idx.norm3, bound, config.dropout_p, train, rng)
}

/// Which stored layer to use at each of `depth` applications.
fn application_sequence(
    stacking: StackingMode,
    depth: usize,
    stored: usize,
) -> Result<Vec<usize>, ModelError> {
    if depth == 0 {
        return Err(ModelError::Config("depth must be at least 1".into()));
    }
    match stacking {
        StackingMode::Recurrent => Ok(vec![0; depth]),
        StackingMode::Vanilla => {
            if depth != stored {
                return Err(ModelError::Config(format!(
                    "vanilla stacking stores {stored} layers and cannot run at depth {depth}"
                )));
            }
            Ok((0..stored).collect())
        }
    }
}

/// One side's layer pipeline.
pub enum StackSide {
    Encoder {
        key_bias: Option<TensorId>,
    },
    Decoder {
        self_bias: Option<TensorId>,
        enc_out: TensorId,
        cross_bias: Option<TensorId>,
    },
}

/// Run `depth` layer applications over `x`. Recurrent stacking applies
/// the single stored layer repeatedly, feeding each application's output
/// into the next, with fresh dropout masks every time; no per-step
/// embedding is added. Vanilla stacking applies the stored layers in
/// order and rejects any other depth.
#[allow(clippy::too_many_arguments)]
pub fn layer_stack<T: Scalar>(
    g: &mut Graph<T>,
    params: &ModelParams<T>,
    bound: &Bound,
    x: TensorId,
    side: &StackSide,
    depth: usize,
    train: bool,
    rng: &mut Rng,
) -> Result<TensorId, ModelError> {
    let config = &params.config;
    let stored = match side {
        StackSide::Encoder { .. } => params.layout().enc_layers.len(),
        StackSide::Decoder { .. } => params.layout().dec_layers.len(),
    };
    let seq = application_sequence(config.stacking, depth, stored)?;
    let mut h = x;
    for layer in seq {
        h = match side {
            StackSide::Encoder { key_bias } => encoder_layer(
                g,
                bound,
                &params.layout().enc_layers[layer],
                h,
                *key_bias,
                config,
                train,
                rng,
            )?,
            StackSide::Decoder {
                self_bias,
                enc_out,
                cross_bias,
            } => decoder_layer(
                g,
                bound,
                &params.layout().dec_layers[layer],
                h,
                *self_bias,
                *enc_out,
                *cross_bias,
                config,
                train,
                rng,
            )?,
        };
    }
    Ok(h)
}

fn embed_sequence<T: Scalar>(
    g: &mut Graph<T>,
    table: TensorId,
    ids: &IdMatrix,
    config: &ModelConfig,
    train: bool,
    rng: &mut Rng,
) -> Result<TensorId, ModelError> {
    if ids.cols > config.max_len {
        return Err(ModelError::Config(format!(
            "sequence length {} exceeds max_len {}",
            ids.cols, config.max_len
        )));
    }
    let e = g.embedding(table, &ids.ids)?;
    let e = g.reshape(e, vec![ids.rows, ids.cols, config.d_model])?;
    let e = g.scale(e, (config.d_model as f64).sqrt())?;
    let pos = g.constant(sinusoidal_positions::<T>(ids.cols, config.d_model)?);
    let e = g.add(e, pos)?;
    Ok(g.dropout(e, config.dropout_p, train, rng)?)
}

fn resolve_depth(
    config: &ModelConfig,
    depth_override: Option<usize>,
) -> Result<usize, ModelError> {
    match depth_override {
        None => Ok(config.depth),
        Some(_) if config.stacking == StackingMode::Vanilla => Err(ModelError::Config(
            "depth override requires recurrent stacking".into(),
        )),
        Some(d) if d == 0 => Err(ModelError::Config("depth override must be >= 1".into())),
        Some(d) => Ok(d),
    }
}

/// Embed, position, and encode a padded source batch into
/// [batch, src_len, d_model].
pub fn encode<T: Scalar>(
    g: &mut Graph<T>,
    params: &ModelParams<T>,
    bound: &Bound,
    src: &IdMatrix,
    depth_override: Option<usize>,
    train: bool,
    rng: &mut Rng,
) -> Result<TensorId, ModelError> {
    let depth = resolve_depth(&params.config, depth_override)?;
    let key_bias = padding_key_bias(g, src)?;
    let x = embed_sequence(
        g,
        bound.ids[params.layout().src_embed],
        src,
        &params.config,
        train,
        rng,
    )?;
    layer_stack(
        g,
        params,
        bound,
        x,
        &StackSide::Encoder {
            key_bias: Some(key_bias),
        },
        depth,
        train,
        rng,
    )
}

/// Next-token logits [batch, tgt_len, tgt_vocab] for a BOS-led target
/// prefix, causally masked; the output projection follows the config's
/// embedding sharing.
#[allow(clippy::too_many_arguments)]
pub fn decode_forward<T: Scalar>(
    g: &mut Graph<T>,
    params: &ModelParams<T>,
    bound: &Bound,
    tgt_in: &IdMatrix,
    enc_out: TensorId,
    src: &IdMatrix,
    depth_override: Option<usize>,
    train: bool,
    rng: &mut Rng,
) -> Result<TensorId, ModelError> {
    let depth = resolve_depth(&params.config, depth_override)?;
    let causal = causal_bias(g, tgt_in.cols);
    let tgt_pad = padding_key_bias(g, tgt_in)?;
    let self_bias = g.add(causal, tgt_pad)?;
    let cross_bias = padding_key_bias(g, src)?;
    let x = embed_sequence(
        g,
        bound.ids[params.layout().tgt_embed],
        tgt_in,
        &params.config,
        train,
        rng,
    )?;
    let h = layer_stack(
        g,
        params,
        bound,
        x,
        &StackSide::Decoder {
            self_bias: Some(self_bias),
            enc_out,
            cross_bias: Some(cross_bias),
        },
        depth,
        train,
        rng,
    )?;
    let logits = match params.layout().out_proj {
        Some(w) => g.matmul(h, bound.ids[w])?,
        None => g.matmul_nt(h, bound.ids[params.layout().tgt_embed])?,
    };
    Ok(logits)
}
