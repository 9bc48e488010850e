//! Condition encoders: learnable scene graph, room mask and prompt text.

use std::collections::HashMap;

use candle_core::{DType, Device, Tensor, D};
use layoutdiff_core::generator::prompt_vocabulary;
use layoutdiff_core::scene::NUM_RELATIONS;
use layoutdiff_core::{CategoryTaxonomy, RoomMask, SceneGraph};

use crate::error::{Error, Result};
use crate::nn::{key_bias, Embedding, EncoderBlock, Linear};
use crate::params::ParamStore;

/// Relation names in id order, as written into checkpoint headers.
pub const RELATION_NAMES: [&str; NUM_RELATIONS] = [
    "left_of",
    "right_of",
    "in_front_of",
    "behind",
    "close_to",
    "on_top_of",
    "facing",
];

/// Padded edge lists for a batch of graphs.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    pub src_class: Tensor,
    pub src_instance: Tensor,
    pub dst_class: Tensor,
    pub dst_instance: Tensor,
    pub relation: Tensor,
    /// `[B, E]`, 1 for real edges.
    pub mask: Tensor,
}

impl GraphBatch {
    /// Pads every graph to the longest edge list (at least one masked slot).
    /// `pad_to` forces extra masked edges.
    pub fn new(
        graphs: &[&SceneGraph],
        instance_slots: usize,
        pad_to: usize,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let e = graphs
            .iter()
            .map(|g| g.edges.len())
            .max()
            .unwrap_or(0)
            .max(pad_to)
            .max(1);
        let b = graphs.len();
        let mut cols = vec![vec![0u32; b * e]; 5];
        let mut mask = vec![0f64; b * e];
        for (i, g) in graphs.iter().enumerate() {
            for (j, edge) in g.edges.iter().enumerate() {
                if edge.relation as usize >= NUM_RELATIONS {
                    return Err(layoutdiff_core::Error::RelationType(edge.relation).into());
                }
                let (s, d) = match (g.vertices.get(edge.src), g.vertices.get(edge.dst)) {
                    (Some(s), Some(d)) => (s, d),
                    _ => {
                        return Err(layoutdiff_core::Error::Edge {
                            src: edge.src,
                            dst: edge.dst,
                            vertices: g.vertices.len(),
                        }
                        .into())
                    }
                };
                if s.instance >= instance_slots || d.instance >= instance_slots {
                    return Err(Error::Shape(format!(
                        "instance index {} exceeds the {instance_slots}-row table",
                        s.instance.max(d.instance)
                    )));
                }
                let k = i * e + j;
                cols[0][k] = s.class as u32;
                cols[1][k] = s.instance as u32;
                cols[2][k] = d.class as u32;
                cols[3][k] = d.instance as u32;
                cols[4][k] = edge.relation as u32;
                mask[k] = 1.0;
            }
        }
        let t = |v: &Vec<u32>| Tensor::from_slice(v, (b, e), device);
        Ok(Self {
            src_class: t(&cols[0])?,
            src_instance: t(&cols[1])?,
            dst_class: t(&cols[2])?,
            dst_instance: t(&cols[3])?,
            relation: t(&cols[4])?,
            mask: Tensor::from_vec(mask, (b, e), device)?.to_dtype(dtype)?,
        })
    }
}

/// Learnable scene graph encoder: endpoint tables per direction, relation
/// table, edge MLP, edge transformer and masked mean pooling into one token.
#[derive(Debug, Clone)]
pub struct LsgEncoder {
    src_class: Embedding,
    src_instance: Embedding,
    dst_class: Embedding,
    dst_instance: Embedding,
    relation: Embedding,
    mlp_in: Linear,
    mlp_out: Linear,
    blocks: Vec<EncoderBlock>,
}

#[derive(Debug, Clone)]
pub struct GraphEncoding {
    /// `[B, d]`; zero where a graph has no edges.
    pub token: Tensor,
    /// `[B]`, 1 where a graph has at least one edge.
    pub present: Tensor,
}

impl LsgEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        num_classes: usize,
        instance_slots: usize,
        dim: usize,
        heads: usize,
        blocks: usize,
        ffn_mult: usize,
    ) -> Result<Self> {
        Ok(Self {
            src_class: Embedding::new(store, &format!("{name}.src_class"), num_classes, dim)?,
            src_instance: Embedding::new(
                store,
                &format!("{name}.src_instance"),
                instance_slots,
                dim,
            )?,
            dst_class: Embedding::new(store, &format!("{name}.dst_class"), num_classes, dim)?,
            dst_instance: Embedding::new(
                store,
                &format!("{name}.dst_instance"),
                instance_slots,
                dim,
            )?,
            relation: Embedding::new(store, &format!("{name}.relation"), NUM_RELATIONS, dim)?,
            mlp_in: Linear::new(store, &format!("{name}.mlp.0"), 3 * dim, dim)?,
            mlp_out: Linear::new(store, &format!("{name}.mlp.1"), dim, dim)?,
            blocks: (0..blocks)
                .map(|i| {
                    EncoderBlock::new(store, &format!("{name}.block{i}"), dim, heads, ffn_mult)
                })
                .collect::<Result<_>>()?,
        })
    }

    pub fn relation_rows(&self) -> usize {
        self.relation.rows()
    }

    /// Endpoint embeddings `(e_src, e_dst)`, each `[B, E, d]`.
    pub fn endpoints(&self, g: &GraphBatch) -> Result<(Tensor, Tensor)> {
        let src = (self.src_class.forward(&g.src_class)?
            + self.src_instance.forward(&g.src_instance)?)?;
        let dst = (self.dst_class.forward(&g.dst_class)?
            + self.dst_instance.forward(&g.dst_instance)?)?;
        Ok((src, dst))
    }

    /// Initial edge features `h_ij = MLP([e_src || e_dst || E_rel(r)])`, `[B, E, d]`.
    pub fn edge_features(&self, g: &GraphBatch) -> Result<Tensor> {
        let (src, dst) = self.endpoints(g)?;
        let rel = self.relation.forward(&g.relation)?;
        let cat = Tensor::cat(&[&src, &dst, &rel], D::Minus1)?;
        self.mlp_out
            .forward(&self.mlp_in.forward(&cat)?.gelu_erf()?)
    }

    pub fn forward(&self, g: &GraphBatch) -> Result<GraphEncoding> {
        let mut h = self.edge_features(g)?;
        let bias = key_bias(&g.mask)?;
        for block in &self.blocks {
            h = block.forward(&h, Some(&bias))?;
        }
        let m = g.mask.unsqueeze(D::Minus1)?;
        let count = g.mask.sum_keepdim(1)?;
        let sum = h.broadcast_mul(&m)?.sum(1)?;
        let token = sum.broadcast_div(&count.clamp(1.0, f64::INFINITY)?)?;
        let present = count.squeeze(1)?.clamp(0.0, 1.0)?;
        Ok(GraphEncoding { token, present })
    }
}

/// Binary masks resized to `size x size`, as a `[B, 1, size, size]` tensor in `[0, 1]`.
pub fn mask_batch(
    masks: &[&RoomMask],
    size: usize,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let mut data = Vec::with_capacity(masks.len() * size * size);
    for m in masks {
        let r = if m.height == size && m.width == size {
            (*m).clone()
        } else {
            m.resized(size)
        };
        if r.count() == 0 {
            log::warn!("empty room mask");
        }
        data.extend(r.cells.iter().map(|&c| c as f32));
    }
    Ok(Tensor::from_vec(data, (masks.len(), 1, size, size), device)?.to_dtype(dtype)?)
}

/// Four stride-2 convolutions, global average pooling and a linear map.
#[derive(Debug, Clone)]
pub struct RoomEncoder {
    convs: Vec<(Tensor, Tensor)>,
    head: Linear,
}

impl RoomEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: [usize; 4],
        dim: usize,
    ) -> Result<Self> {
        let mut convs = Vec::new();
        let mut c_in = 1;
        for (i, &c_out) in channels.iter().enumerate() {
            let bound = 1.0 / ((c_in * 9) as f64).sqrt();
            let w = store.uniform(
                &format!("{name}.conv{i}.weight"),
                &[c_out, c_in, 3, 3],
                bound,
            )?;
            let b = store.uniform(&format!("{name}.conv{i}.bias"), &[c_out], bound)?;
            convs.push((w, b));
            c_in = c_out;
        }
        Ok(Self {
            convs,
            head: Linear::new(store, &format!("{name}.head"), c_in, dim)?,
        })
    }

    /// `[B, 1, H, W]` to `[B, d]`.
    pub fn forward(&self, masks: &Tensor) -> Result<Tensor> {
        let mut x = masks.clone();
        for (w, b) in &self.convs {
            x = x.conv2d(w, 1, 2, 1, 1)?;
            let c = b.dim(0)?;
            x = x.broadcast_add(&b.reshape((1, c, 1, 1))?)?.silu()?;
        }
        let pooled = x.mean(D::Minus1)?.mean(D::Minus1)?;
        self.head.forward(&pooled)
    }
}

/// Whitespace vocabulary. Id 0 is padding, id 1 is the unknown word.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;

impl Vocab {
    pub fn new(words: &[String]) -> Self {
        let mut index = HashMap::new();
        let mut kept = Vec::new();
        for w in words {
            if !index.contains_key(w) {
                index.insert(w.clone(), kept.len() as u32 + 2);
                kept.push(w.clone());
            }
        }
        Self { words: kept, index }
    }

    pub fn for_taxonomy(taxonomy: &CategoryTaxonomy) -> Self {
        Self::new(&prompt_vocabulary(taxonomy))
    }

    /// Table rows, including padding and unknown.
    pub fn size(&self) -> usize {
        self.words.len() + 2
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn tokenize(&self, text: &str, max_len: usize) -> Vec<u32> {
        text.split_whitespace()
            .take(max_len)
            .map(|w| self.index.get(w).copied().unwrap_or(UNK_ID))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct TextBatch {
    /// `[B, L]` token ids.
    pub ids: Tensor,
    /// `[B, L]`, 1 for real words.
    pub mask: Tensor,
}

impl TextBatch {
    /// An empty prompt becomes a single masked padding token.
    pub fn new(
        prompts: &[&str],
        vocab: &Vocab,
        max_len: usize,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let toks: Vec<Vec<u32>> = prompts.iter().map(|p| vocab.tokenize(p, max_len)).collect();
        let l = toks.iter().map(Vec::len).max().unwrap_or(0).max(1);
        let b = prompts.len();
        let mut ids = vec![PAD_ID; b * l];
        let mut mask = vec![0f64; b * l];
        for (i, t) in toks.iter().enumerate() {
            for (j, &id) in t.iter().enumerate() {
                ids[i * l + j] = id;
                mask[i * l + j] = 1.0;
            }
        }
        Ok(Self {
            ids: Tensor::from_vec(ids, (b, l), device)?,
            mask: Tensor::from_vec(mask, (b, l), device)?.to_dtype(dtype)?,
        })
    }
}

/// Word and position embeddings followed by a small transformer encoder.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    words: Embedding,
    positions: Embedding,
    blocks: Vec<EncoderBlock>,
}

impl TextEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        vocab_size: usize,
        max_len: usize,
        dim: usize,
        heads: usize,
        blocks: usize,
        ffn_mult: usize,
    ) -> Result<Self> {
        Ok(Self {
            words: Embedding::new(store, &format!("{name}.words"), vocab_size, dim)?,
            positions: Embedding::new(store, &format!("{name}.positions"), max_len, dim)?,
            blocks: (0..blocks)
                .map(|i| {
                    EncoderBlock::new(store, &format!("{name}.block{i}"), dim, heads, ffn_mult)
                })
                .collect::<Result<_>>()?,
        })
    }

    /// Word embeddings with positions, before the transformer, `[B, L, d]`.
    pub fn embed(&self, text: &TextBatch) -> Result<Tensor> {
        let (_, l) = text.ids.dims2()?;
        let pos = Tensor::arange(0u32, l as u32, text.ids.device())?;
        let pos = self.positions.forward(&pos)?.unsqueeze(0)?;
        Ok(self.words.forward(&text.ids)?.broadcast_add(&pos)?)
    }

    pub fn forward(&self, text: &TextBatch) -> Result<Tensor> {
        let mut h = self.embed(text)?;
        let bias = key_bias(&text.mask)?;
        for block in &self.blocks {
            h = block.forward(&h, Some(&bias))?;
        }
        Ok(h)
    }
}
