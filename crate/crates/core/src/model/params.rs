//! Parameter storage and layout.
//!
//! All parameters live in one ordered store. Tying is positional: two
//! roles that share a tensor hold the same store index, so "tied" means
//! the same object rather than values kept in sync. Each training step
//! leases every entry into the compute graph as a leaf; the graph's
//! gradient accumulation then sums the contributions of every use of a
//! tensor, including its reuse across recurrence applications.

use super::{EmbeddingSharing, ModelConfig, ModelError, StackingMode};
use crate::tensor::{Graph, Rng, Scalar, Tensor, TensorId};

#[derive(Debug, Clone)]
pub struct ParamEntry<T: Scalar> {
    pub name: String,
    pub tensor: Tensor<T>,
}

#[derive(Debug, Clone, Copy)]
pub struct AttnIdx {
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct FfnIdx {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct NormIdx {
    pub gain: usize,
    pub bias: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct EncLayerIdx {
    pub self_attn: AttnIdx,
    pub norm1: NormIdx,
    pub ffn: FfnIdx,
    pub norm2: NormIdx,
}

#[derive(Debug, Clone, Copy)]
pub struct DecLayerIdx {
    pub self_attn: AttnIdx,
    pub norm1: NormIdx,
    pub cross_attn: AttnIdx,
    pub norm2: NormIdx,
    pub ffn: FfnIdx,
    pub norm3: NormIdx,
}

/// Store indices for every parameter role. Tied roles repeat an index.
#[derive(Debug, Clone)]
pub struct Layout {
    pub src_embed: usize,
    pub tgt_embed: usize,
    /// None means the softmax projection is the target embedding,
    /// applied transposed.
    pub out_proj: Option<usize>,
    pub enc_layers: Vec<EncLayerIdx>,
    pub dec_layers: Vec<DecLayerIdx>,
}

/// A full model: config, parameter store, role layout.
#[derive(Debug, Clone)]
pub struct ModelParams<T: Scalar> {
    pub config: ModelConfig,
    entries: Vec<ParamEntry<T>>,
    layout: Layout,
}

/// Graph leaves for one leased parameter set, aligned to store indices.
#[derive(Debug, Clone)]
pub struct Bound {
    pub ids: Vec<TensorId>,
}

/// (name, shape) inventory a config implies, in store order. This is the
/// single source of truth shared by initialization and param_count.
pub fn tensor_inventory(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = config.d_model;
    let f = config.d_ff;
    let mut inv: Vec<(String, Vec<usize>)> = Vec::new();
    match config.embedding_sharing {
        EmbeddingSharing::JointAllTied => {
            inv.push(("embed".into(), vec![config.src_vocab_size, d]));
        }
        EmbeddingSharing::TgtSoftmaxTied => {
            inv.push(("src_embed".into(), vec![config.src_vocab_size, d]));
            inv.push(("tgt_embed".into(), vec![config.tgt_vocab_size, d]));
        }
        EmbeddingSharing::Separate => {
            inv.push(("src_embed".into(), vec![config.src_vocab_size, d]));
            inv.push(("tgt_embed".into(), vec![config.tgt_vocab_size, d]));
            inv.push(("out_proj".into(), vec![d, config.tgt_vocab_size]));
        }
    }
    let stored_layers = match config.stacking {
        StackingMode::Recurrent => 1,
        StackingMode::Vanilla => config.depth,
    };
    for side in ["enc", "dec"] {
        for layer in 0..stored_layers {
            let tag = match config.stacking {
                StackingMode::Recurrent => format!("{side}.shared"),
                StackingMode::Vanilla => format!("{side}.{layer}"),
            };
            for w in ["wq", "wk", "wv", "wo"] {
                inv.push((format!("{tag}.self.{w}"), vec![d, d]));
            }
            inv.push((format!("{tag}.norm1.gain"), vec![d]));
            inv.push((format!("{tag}.norm1.bias"), vec![d]));
            if side == "dec" {
                for w in ["wq", "wk", "wv", "wo"] {
                    inv.push((format!("{tag}.cross.{w}"), vec![d, d]));
                }
                inv.push((format!("{tag}.norm2.gain"), vec![d]));
                inv.push((format!("{tag}.norm2.bias"), vec![d]));
            }
            inv.push((format!("{tag}.ffn.w1"), vec![d, f]));
            inv.push((format!("{tag}.ffn.b1"), vec![f]));
            inv.push((format!("{tag}.ffn.w2"), vec![f, d]));
            inv.push((format!("{tag}.ffn.b2"), vec![d]));
            let last_norm = if side == "dec" { "norm3" } else { "norm2" };
            inv.push((format!("{tag}.{last_norm}.gain"), vec![d]));
            inv.push((format!("{tag}.{last_norm}.bias"), vec![d]));
        }
    }
    inv
}

impl<T: Scalar> ModelParams<T> {
    /// Fresh seeded initialization. Projections get Glorot-uniform
    /// weights, embeddings N(0, d^-1/2), biases zero, norm gains one.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = Rng::new(seed).split(0x70617261); // parameter stream
        let inv = tensor_inventory(config);
        let mut entries = Vec::with_capacity(inv.len());
        for (name, shape) in inv {
            let tensor = init_tensor(&name, &shape, config, &mut rng);
            entries.push(ParamEntry { name, tensor });
        }
        let layout = build_layout(config, &entries);
        Ok(ModelParams {
            config: config.clone(),
            entries,
            layout,
        })
    }

    /// Reassemble from loaded tensors; names must cover the config's
    /// inventory exactly.
    pub fn from_tensors(
        config: &ModelConfig,
        mut tensors: Vec<(String, Tensor<T>)>,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let inv = tensor_inventory(config);
        let mut entries = Vec::with_capacity(inv.len());
        for (name, shape) in &inv {
            let pos = tensors
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| ModelError::Config(format!("missing tensor {name}")))?;
            let (_, mut tensor) = tensors.swap_remove(pos);
            if tensor.shape() != shape.as_slice() {
                return Err(ModelError::Config(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    tensor.shape(),
                    shape
                )));
            }
            tensor.requires_grad = true;
            tensor.grad = None;
            entries.push(ParamEntry {
                name: name.clone(),
                tensor,
            });
        }
        if let Some((name, _)) = tensors.first() {
            return Err(ModelError::Config(format!("unexpected tensor {name}")));
        }
        let layout = build_layout(config, &entries);
        Ok(ModelParams {
            config: config.clone(),
            entries,
            layout,
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn tensor(&self, index: usize) -> &Tensor<T> {
        &self.entries[index].tensor
    }

    pub fn tensor_mut(&mut self, index: usize) -> &mut Tensor<T> {
        &mut self.entries[index].tensor
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    /// Lease every parameter into `g` as a leaf. With `trainable`, leaves
    /// track gradients and `Bound.ids[i]` aligns with store entry i.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let ids = self
            .entries
            .iter()
            .map(|e| {
                let mut t = e.tensor.clone();
                t.requires_grad = trainable;
                t.grad = None;
                g.leaf(t)
            })
            .collect();
        Bound { ids }
    }

    /// Total stored elements (tied tensors once by construction).
    pub fn n_elements(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            entries: self
                .entries
                .iter()
                .map(|e| {
                    let mut tensor = e.tensor.cast::<U>();
                    tensor.requires_grad = true;
                    ParamEntry {
                        name: e.name.clone(),
                        tensor,
                    }
                })
                .collect(),
            layout: self.layout.clone(),
        }
    }
}

fn init_tensor<T: Scalar>(
    name: &str,
    shape: &[usize],
    config: &ModelConfig,
    rng: &mut Rng,
) -> Tensor<T> {
    let numel: usize = shape.iter().product();
    let is_embedding = name == "embed" || name.ends_with("_embed");
    let data: Vec<T> = if is_embedding {
        let scale = 1.0 / (config.d_model as f64).sqrt();
        (0..numel)
            .map(|_| T::from_f64(rng.normal() * scale))
            .collect()
    } else if name.ends_with(".gain") {
        vec![T::ONE; numel]
    } else if name.ends_with(".bias") || name.ends_with(".b1") || name.ends_with(".b2") {
        vec![T::ZERO; numel]
    } else {
        // rank-2 projection: Glorot uniform
        let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
        (0..numel)
            .map(|_| T::from_f64(rng.uniform_in(-bound, bound)))
            .collect()
    };
    let mut t = Tensor::new(shape.to_vec(), data).expect("inventory shape");
    t.requires_grad = true;
    t
}

fn build_layout<T: Scalar>(config: &ModelConfig, entries: &[ParamEntry<T>]) -> Layout {
    let find = |name: &str| -> usize {
        entries
            .iter()
            .position(|e| e.name == name)
            .unwrap_or_else(|| panic!("inventory missing {name}"))
    };
    let (src_embed, tgt_embed, out_proj) = match config.embedding_sharing {
        EmbeddingSharing::JointAllTied => {
            let e = find("embed");
            (e, e, None)
        }
        EmbeddingSharing::TgtSoftmaxTied => (find("src_embed"), find("tgt_embed"), None),
        EmbeddingSharing::Separate => (
            find("src_embed"),
            find("tgt_embed"),
            Some(find("out_proj")),
        ),
    };
    let stored_layers = match config.stacking {
        StackingMode::Recurrent => 1,
        StackingMode::Vanilla => config.depth,
    };
    let attn = |tag: &str, block: &str| AttnIdx {
        wq: find(&format!("{tag}.{block}.wq")),
        wk: find(&format!("{tag}.{block}.wk")),
        wv: find(&format!("{tag}.{block}.wv")),
        wo: find(&format!("{tag}.{block}.wo")),
    };
    let norm = |tag: &str, which: &str| NormIdx {
        gain: find(&format!("{tag}.{which}.gain")),
        bias: find(&format!("{tag}.{which}.bias")),
    };
    let ffn = |tag: &str| FfnIdx {
        w1: find(&format!("{tag}.ffn.w1")),
        b1: find(&format!("{tag}.ffn.b1")),
        w2: find(&format!("{tag}.ffn.w2")),
        b2: find(&format!("{tag}.ffn.b2")),
    };
    let tag_for = |side: &str, layer: usize| match config.stacking {
        StackingMode::Recurrent => format!("{side}.shared"),
        StackingMode::Vanilla => format!("{side}.{layer}"),
    };
    let enc_layers = (0..stored_layers)
        .map(|l| {
            let tag = tag_for("enc", l);
            EncLayerIdx {
                self_attn: attn(&tag, "self"),
                norm1: norm(&tag, "norm1"),
                ffn: ffn(&tag),
                norm2: norm(&tag, "norm2"),
            }
        })
        .collect();
    let dec_layers = (0..stored_layers)
        .map(|l| {
            let tag = tag_for("dec", l);
            DecLayerIdx {
                self_attn: attn(&tag, "self"),
                norm1: norm(&tag, "norm1"),
                cross_attn: attn(&tag, "cross"),
                norm2: norm(&tag, "norm2"),
                ffn: ffn(&tag),
                norm3: norm(&tag, "norm3"),
            }
        })
        .collect();
    Layout {
        src_embed,
        tgt_embed,
        out_proj,
        enc_layers,
        dec_layers,
    }
}
