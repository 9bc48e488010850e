//! Transformer denoiser over object slots and the per-stage model that owns it
//! together with its condition encoders.

use candle_core::{DType, Device, Tensor, D};
use layoutdiff_core::scene::GEOMETRY_DIM;
use layoutdiff_core::{Caps, CategoryTaxonomy};
use serde::{Deserialize, Serialize};

use crate::conditions::{GraphBatch, LsgEncoder, RoomEncoder, TextBatch, TextEncoder, Vocab};
use crate::config::{ConditionSwitches, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{key_bias, layer_norm, modulate, sinusoid, Attention, FeedForward, Linear};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Slg,
    Clg,
    Single,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Slg => "slg",
            Stage::Clg => "clg",
            Stage::Single => "single",
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        match s {
            "slg" => Some(Stage::Slg),
            "clg" => Some(Stage::Clg),
            "single" => Some(Stage::Single),
            _ => None,
        }
    }

    /// `(anchor slots, noisy slots)`.
    pub fn slots(self, caps: Caps) -> (usize, usize) {
        match self {
            Stage::Slg => (0, caps.primary),
            Stage::Clg => (caps.primary, caps.secondary),
            Stage::Single => (0, caps.primary + caps.secondary),
        }
    }
}

/// Per-attribute embeddings plus the gated spatial encoding `x + gamma * e_pos`.
#[derive(Debug, Clone)]
pub struct TokenBuilder {
    class: Linear,
    translation: Linear,
    size: Linear,
    orientation: Linear,
    spatial: Linear,
    frequencies: Tensor,
    gamma: Tensor,
    num_classes: usize,
}

impl TokenBuilder {
    fn new(
        store: &mut ParamStore,
        name: &str,
        num_classes: usize,
        cfg: &ModelConfig,
    ) -> Result<Self> {
        let d = cfg.d_h;
        let f = cfg.pos_frequencies;
        let freqs: Vec<f64> = (0..f)
            .map(|k| std::f64::consts::PI * 2f64.powi(k as i32))
            .collect();
        Ok(Self {
            class: Linear::new(store, &format!("{name}.class"), num_classes, d)?,
            translation: Linear::new(store, &format!("{name}.translation"), 3, d)?,
            size: Linear::new(store, &format!("{name}.size"), 3, d)?,
            orientation: Linear::new(store, &format!("{name}.orientation"), 2, d)?,
            spatial: Linear::new(store, &format!("{name}.spatial"), 6 * f, d)?,
            frequencies: Tensor::from_vec(freqs, f, store.device())?.to_dtype(store.dtype())?,
            gamma: store.constant(
                &format!("{name}.gamma_pos"),
                &[1],
                cfg.gamma_init,
                cfg.gamma_learnable,
            )?,
            num_classes,
        })
    }

    pub fn gamma(&self) -> &Tensor {
        &self.gamma
    }

    /// Sum of the class, translation, size and orientation embeddings, `[B, N, d]`.
    pub fn attributes(&self, slots: &Tensor) -> Result<Tensor> {
        let c = self.num_classes;
        let x = self.class.forward(&slots.narrow(D::Minus1, 0, c)?)?;
        let x = (x + self.translation.forward(&slots.narrow(D::Minus1, c, 3)?)?)?;
        let x = (x + self.size.forward(&slots.narrow(D::Minus1, c + 3, 3)?)?)?;
        Ok((x + self
            .orientation
            .forward(&slots.narrow(D::Minus1, c + 6, 2)?)?)?)
    }

    /// Spatial encoding of each slot's translation, `[B, N, d]`.
    pub fn spatial(&self, slots: &Tensor) -> Result<Tensor> {
        let (b, n, _) = slots.dims3()?;
        let f = self.frequencies.dim(0)?;
        let t = slots
            .narrow(D::Minus1, self.num_classes, 3)?
            .unsqueeze(D::Minus1)?;
        let phase = t.broadcast_mul(&self.frequencies.reshape((1, 1, 1, f))?)?;
        let feats =
            Tensor::cat(&[phase.sin()?, phase.cos()?], D::Minus1)?.reshape((b, n, 6 * f))?;
        self.spatial.forward(&feats)
    }

    pub fn forward(&self, slots: &Tensor) -> Result<Tensor> {
        let x = self.attributes(slots)?;
        let e = self.spatial(slots)?;
        Ok((x + e.broadcast_mul(&self.gamma)?)?)
    }
}

/// Sinusoidal timestep features followed by a two-layer map.
#[derive(Debug, Clone)]
pub struct TimestepEmbedding {
    fc1: Linear,
    fc2: Linear,
    dim: usize,
}

impl TimestepEmbedding {
    fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, dim)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), dim, dim)?,
            dim,
        })
    }

    pub fn forward(&self, ts: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
        let mut feats = Vec::with_capacity(ts.len() * self.dim);
        for &t in ts {
            feats.extend(sinusoid(t as f64, self.dim, 10_000.0));
        }
        let x = Tensor::from_vec(feats, (ts.len(), self.dim), device)?.to_dtype(dtype)?;
        self.fc2.forward(&self.fc1.forward(&x)?.silu()?)
    }
}

/// Self-attention, cross-attention and feed-forward sublayers, each with
/// AdaLN shift/scale/gate from the conditioning vector.
#[derive(Debug, Clone)]
struct DenoiserBlock {
    modulation: Linear,
    self_attn: Attention,
    cross_attn: Attention,
    ffn: FeedForward,
}

impl DenoiserBlock {
    fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.d_h;
        Ok(Self {
            modulation: Linear::normal(store, &format!("{name}.adaln"), d, 9 * d, 0.02)?,
            self_attn: Attention::new(store, &format!("{name}.self_attn"), d, cfg.heads)?,
            cross_attn: Attention::new(store, &format!("{name}.cross_attn"), d, cfg.heads)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, d * cfg.ffn_mult)?,
        })
    }

    fn forward(
        &self,
        x: &Tensor,
        cond: &Tensor,
        ctx: &Tensor,
        ctx_bias: &Tensor,
    ) -> Result<Tensor> {
        let m = self
            .modulation
            .forward(&cond.silu()?)?
            .unsqueeze(1)?
            .chunk(9, D::Minus1)?;
        let h = modulate(&layer_norm(x)?, &m[0], &m[1])?;
        let x = (x + self.self_attn.forward(&h, &h, None)?.broadcast_mul(&m[2])?)?;
        let h = modulate(&layer_norm(&x)?, &m[3], &m[4])?;
        let x = (&x
            + self
                .cross_attn
                .forward(&h, ctx, Some(ctx_bias))?
                .broadcast_mul(&m[5])?)?;
        let h = modulate(&layer_norm(&x)?, &m[6], &m[7])?;
        Ok((&x + self.ffn.forward(&h)?.broadcast_mul(&m[8])?)?)
    }
}

/// Encoded conditions for a batch: AdaLN room term and cross-attention context.
#[derive(Debug, Clone)]
pub struct ConditionBundle {
    /// `[B, d]`.
    pub room: Tensor,
    /// `[B, M, d]`: text tokens followed by the graph token.
    pub context: Tensor,
    /// `[B, M]`.
    pub context_mask: Tensor,
    /// `[B]` graph presence flags.
    pub graph_present: Tensor,
}

/// Raw condition inputs for a batch. `None` means the condition is absent for
/// the whole batch.
#[derive(Debug, Clone, Default)]
pub struct ConditionInputs {
    pub graph: Option<GraphBatch>,
    pub mask: Option<Tensor>,
    pub text: Option<TextBatch>,
}

/// One stage's trainable model: token builder, backbone and condition encoders.
pub struct StageModel {
    pub stage: Stage,
    pub caps: Caps,
    pub switches: ConditionSwitches,
    pub config: ModelConfig,
    pub num_classes: usize,
    pub vocab: Vocab,
    pub store: ParamStore,
    tokens: TokenBuilder,
    time: TimestepEmbedding,
    blocks: Vec<DenoiserBlock>,
    final_mod: Linear,
    head: Linear,
    anchor_type: Option<Tensor>,
    lsg: Option<LsgEncoder>,
    room: Option<RoomEncoder>,
    text: Option<TextEncoder>,
    null_graph: Tensor,
    null_room: Tensor,
    null_text: Tensor,
}

impl StageModel {
    pub fn new(
        stage: Stage,
        caps: Caps,
        switches: ConditionSwitches,
        config: &ModelConfig,
        taxonomy: &CategoryTaxonomy,
        seed: u64,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let mut store = ParamStore::new(seed, dtype, device);
        let s = &mut store;
        let c = taxonomy.num_classes();
        let d = config.d_h;
        let dim = c + GEOMETRY_DIM;
        let vocab = Vocab::for_taxonomy(taxonomy);
        let tokens = TokenBuilder::new(s, "backbone.tokens", c, config)?;
        let time = TimestepEmbedding::new(s, "backbone.time", d)?;
        let blocks = (0..config.layers)
            .map(|i| DenoiserBlock::new(s, &format!("backbone.block{i}"), config))
            .collect::<Result<_>>()?;
        let final_mod = Linear::normal(s, "backbone.final_adaln", d, 2 * d, 0.02)?;
        let head = Linear::new(s, "backbone.head", d, dim)?;
        let anchor_type = match stage {
            Stage::Clg => Some(s.normal("anchor_type", &[d], 1.0 / (d as f64).sqrt())?),
            _ => None,
        };
        let lsg = if switches.graph {
            Some(LsgEncoder::new(
                s,
                "cond.lsg",
                c,
                config.instance_slots,
                d,
                config.heads,
                config.lsg_blocks,
                config.ffn_mult,
            )?)
        } else {
            None
        };
        let room = if switches.mask {
            Some(RoomEncoder::new(s, "cond.room", config.room_channels, d)?)
        } else {
            None
        };
        let text = if switches.text {
            Some(TextEncoder::new(
                s,
                "cond.text",
                vocab.size(),
                config.text_max_len,
                d,
                config.heads,
                config.text_blocks,
                config.ffn_mult,
            )?)
        } else {
            None
        };
        let std = 1.0 / (d as f64).sqrt();
        let null_graph = s.normal("cond.null_graph", &[d], std)?;
        let null_room = s.normal("cond.null_room", &[d], std)?;
        let null_text = s.normal("cond.null_text", &[d], std)?;
        Ok(Self {
            stage,
            caps,
            switches,
            config: config.clone(),
            num_classes: c,
            vocab,
            store,
            tokens,
            time,
            blocks,
            final_mod,
            head,
            anchor_type,
            lsg,
            room,
            text,
            null_graph,
            null_room,
            null_text,
        })
    }

    pub fn dim(&self) -> usize {
        self.num_classes + GEOMETRY_DIM
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn tokens(&self) -> &TokenBuilder {
        &self.tokens
    }

    pub fn lsg(&self) -> Option<&LsgEncoder> {
        self.lsg.as_ref()
    }

    pub fn room_encoder(&self) -> Option<&RoomEncoder> {
        self.room.as_ref()
    }

    pub fn text_encoder(&self) -> Option<&TextEncoder> {
        self.text.as_ref()
    }

    /// Scalar count of the denoising backbone (token builder, timestep map,
    /// blocks and head).
    pub fn backbone_parameters(&self) -> usize {
        self.store.count("backbone.")
    }

    pub fn timestep_embedding(&self, ts: &[usize]) -> Result<Tensor> {
        self.time.forward(ts, self.dtype(), self.device())
    }

    /// Encodes whichever conditions are both switched on and supplied.
    pub fn encode_conditions(
        &self,
        batch: usize,
        inputs: &ConditionInputs,
    ) -> Result<ConditionBundle> {
        let dev = self.device().clone();
        let dtype = self.dtype();
        let d = self.config.d_h;
        let expand = |t: &Tensor, n: usize| -> Result<Tensor> {
            Ok(t.reshape((1, 1, d))?
                .broadcast_as((batch, n, d))?
                .contiguous()?)
        };
        let check = |b: usize, what: &str| -> Result<()> {
            if b != batch {
                Err(Error::Shape(format!(
                    "{what} batch {b} vs layout batch {batch}"
                )))
            } else {
                Ok(())
            }
        };

        let room = match (&self.room, &inputs.mask) {
            (Some(enc), Some(m)) => {
                check(m.dim(0)?, "room mask")?;
                enc.forward(m)?
            }
            _ => expand(&self.null_room, 1)?.squeeze(1)?,
        };

        let (text_tokens, text_mask) = match (&self.text, &inputs.text) {
            (Some(enc), Some(t)) => {
                check(t.ids.dim(0)?, "text")?;
                let tokens = enc.forward(t)?;
                // Prompts with no words fall back to the null text token.
                let any = t.mask.sum_keepdim(1)?.clamp(0.0, 1.0)?;
                let null = expand(&self.null_text, 1)?;
                let tokens = Tensor::cat(&[&tokens, &null], 1)?;
                let none = (any.ones_like()? - &any)?;
                (tokens, Tensor::cat(&[&t.mask, &none], 1)?)
            }
            _ => (
                expand(&self.null_text, 1)?,
                Tensor::ones((batch, 1), dtype, &dev)?,
            ),
        };

        let (graph_token, graph_present) = match (&self.lsg, &inputs.graph) {
            (Some(enc), Some(g)) => {
                check(g.mask.dim(0)?, "graph")?;
                let enc_out = enc.forward(g)?;
                let p = enc_out.present.unsqueeze(1)?;
                let null = expand(&self.null_graph, 1)?.squeeze(1)?;
                let tok = (enc_out.token.broadcast_mul(&p)?
                    + null.broadcast_mul(&(p.ones_like()? - &p)?)?)?;
                (tok.unsqueeze(1)?, enc_out.present)
            }
            _ => (
                expand(&self.null_graph, 1)?,
                Tensor::zeros(batch, dtype, &dev)?,
            ),
        };

        let context = Tensor::cat(&[&text_tokens, &graph_token], 1)?;
        let context_mask = Tensor::cat(&[&text_mask, &Tensor::ones((batch, 1), dtype, &dev)?], 1)?;
        Ok(ConditionBundle {
            room,
            context,
            context_mask,
            graph_present,
        })
    }

    /// Predicts `v` for the noisy slots `x_t` `[B, N, D]`. `anchors` `[B, N_L, D]`
    /// are clean primary slots placed before the noisy ones (CLG only).
    pub fn denoise(
        &self,
        x_t: &Tensor,
        ts: &[usize],
        conditions: &ConditionBundle,
        anchors: Option<&Tensor>,
    ) -> Result<Tensor> {
        let (b, n, dim) = x_t.dims3()?;
        if dim != self.dim() || ts.len() != b {
            return Err(Error::Shape(format!(
                "x_t {:?} with {} timesteps, expected D = {}",
                x_t.dims(),
                ts.len(),
                self.dim()
            )));
        }
        if conditions.room.dim(0)? != b || conditions.context.dim(0)? != b {
            return Err(Error::Shape(
                "condition batch does not match layout batch".into(),
            ));
        }
        let mut h = self.tokens.forward(x_t)?;
        let mut n_anchor = 0;
        if let Some(a) = anchors {
            let anchor_type = self.anchor_type.as_ref().ok_or_else(|| {
                Error::Shape(format!("{} stage takes no anchors", self.stage.name()))
            })?;
            if a.dim(0)? != b || a.dim(2)? != dim {
                return Err(Error::Shape(format!("anchors {:?}", a.dims())));
            }
            n_anchor = a.dim(1)?;
            let at = self.tokens.forward(a)?.broadcast_add(anchor_type)?;
            h = Tensor::cat(&[&at, &h], 1)?;
        }
        let cond = (self.timestep_embedding(ts)? + &conditions.room)?;
        let bias = key_bias(&conditions.context_mask)?;
        for block in &self.blocks {
            h = block.forward(&h, &cond, &conditions.context, &bias)?;
        }
        let h = h.narrow(1, n_anchor, n)?;
        let m = self
            .final_mod
            .forward(&cond.silu()?)?
            .unsqueeze(1)?
            .chunk(2, D::Minus1)?;
        self.head
            .forward(&modulate(&layer_norm(&h)?, &m[0], &m[1])?)
    }
}
