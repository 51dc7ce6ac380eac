//! End-to-end vision-language model: tiles → vision encoder → pixel shuffle
//! → projector → spliced into the text stream → MoE decoder → logits.

mod config;
mod merge;
mod vision;

pub use config::{build_config, build_config_named, ModelConfig, Stage, Variant};
pub use merge::{
    merge_embeddings, merged_length, next_token_batch, next_token_loss, plan_sequence,
    SequenceBatch, Source,
};
pub use vision::{patchify, VisionEncoder};

use crate::adaptor::{
    layout_with_side, pixel_shuffle, pixel_shuffle_backward, Mlp, MlpCache, TileFeatures,
    VisualLayout, MAX_TILED_IMAGES,
};
use crate::attention::{
    attention_backward, attention_forward, attention_train_forward, AttnCache, AttnWeights, KVCache,
};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::moe::{
    moe_layer_backward, moe_layer_forward, update_bias, ExpertBias, MoeCache, MoeLayer,
};
use crate::numcore::{
    linear, linear_backward, rms_norm, rms_norm_backward, seeded, Params, Tensor, INIT_STD,
};
use crate::tiling::{candidate_resolutions, tile_image, ResolutionCandidate, TilingPlan};

use merge::{gather, scatter};
use vision::VisionCache;

pub const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub attn_norm: Tensor,
    pub attn: AttnWeights,
    pub moe_norm: Tensor,
    pub moe: MoeLayer,
}

impl Params for Block {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Tensor)) {
        f(&self.attn_norm);
        self.attn.visit(f);
        f(&self.moe_norm);
        self.moe.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        f(&mut self.attn_norm);
        self.attn.visit_mut(f);
        f(&mut self.moe_norm);
        self.moe.visit_mut(f);
    }
}

/// Parameter groups, used for stage freezing and learning-rate multipliers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Vision,
    Adaptor,
    Language,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub vision: VisionEncoder,
    pub projector: Mlp,
    /// Text vocabulary rows, then tile-newline, then view-separator.
    pub embed: Tensor,
    pub blocks: Vec<Block>,
    pub final_norm: Tensor,
    /// `[vocab, d_model]`
    pub head: Tensor,
}

impl ModelParams {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seeded(seed);
        let d = cfg.d_model;
        let moe_cfg = cfg.moe_config(Stage::new(1)?);
        Ok(Self {
            vision: VisionEncoder::init(&mut rng, cfg),
            projector: Mlp::init(&mut rng, cfg.projector_in(), d, d),
            embed: Tensor::randn(&mut rng, &[cfg.embedding_rows(), d], INIT_STD),
            blocks: (0..cfg.n_layers)
                .map(|_| Block {
                    attn_norm: Tensor::ones(&[d]),
                    attn: AttnWeights::init(&mut rng, &cfg.attn_config()),
                    moe_norm: Tensor::ones(&[d]),
                    moe: MoeLayer::init(&mut rng, &moe_cfg),
                })
                .collect(),
            final_norm: Tensor::ones(&[d]),
            head: Tensor::randn(&mut rng, &[cfg.vocab_size, d], INIT_STD),
        })
    }

    /// Visit every tensor with its group, in [`Params`] order.
    pub fn visit_groups_mut(&mut self, f: &mut dyn FnMut(ParamGroup, &mut Tensor)) {
        self.vision.visit_mut(&mut |t| f(ParamGroup::Vision, t));
        self.projector.visit_mut(&mut |t| f(ParamGroup::Adaptor, t));
        f(ParamGroup::Language, &mut self.embed);
        self.blocks.visit_mut(&mut |t| f(ParamGroup::Language, t));
        f(ParamGroup::Language, &mut self.final_norm);
        f(ParamGroup::Language, &mut self.head);
    }
}

impl Params for ModelParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Tensor)) {
        self.vision.visit(f);
        self.projector.visit(f);
        f(&self.embed);
        self.blocks.visit(f);
        f(&self.final_norm);
        f(&self.head);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.visit_groups_mut(&mut |_, t| f(t));
    }
}

/// An image after tiling, with the visual-token layout it will occupy.
#[derive(Debug, Clone)]
pub struct PreparedImage {
    pub plan: TilingPlan,
    /// Thumbnail first, then local tiles; only the first
    /// `layout.tiles_used()` are encoded.
    pub tiles: Vec<Image>,
    pub layout: VisualLayout,
}

/// Per-layer, per-token expert selections.
pub type RoutingPlan = Vec<Vec<Vec<usize>>>;

#[derive(Debug, Clone)]
struct ImageTrace {
    vision: Vec<VisionCache>,
    projector: MlpCache,
}

#[derive(Debug, Clone)]
struct BlockTrace {
    x: Tensor,
    attn: AttnCache,
    h: Tensor,
    moe: MoeCache,
}

/// Everything a backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    sources: Vec<Source>,
    images: Vec<ImageTrace>,
    tiles_used: Vec<usize>,
    blocks: Vec<BlockTrace>,
    x_final: Tensor,
    normed: Tensor,
    pub logits: Tensor,
    /// Sum of the per-layer auxiliary balance losses.
    pub aux_loss: f64,
}

impl Trace {
    /// Selections made in this pass, replayable through `frozen` routing.
    pub fn routing(&self) -> RoutingPlan {
        self.blocks
            .iter()
            .map(|b| b.moe.decisions.iter().map(|d| d.selected.clone()).collect())
            .collect()
    }

    pub fn load_counts(&self) -> Vec<Vec<usize>> {
        self.blocks
            .iter()
            .map(|b| b.moe.load_counts.clone())
            .collect()
    }

    pub fn sources(&self) -> &[Source] {
        &self.sources
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub lm_loss: f64,
    pub aux_loss: f64,
}

impl LossReport {
    pub fn total(&self) -> f64 {
        self.lm_loss + self.aux_loss
    }
}

/// Output of the cached decoding path.
#[derive(Debug, Clone)]
pub struct Inference {
    pub logits: Tensor,
    pub kv_floats_per_token: usize,
    pub kv_total_floats: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
    /// Expert selection bias, one per layer.
    pub biases: Vec<ExpertBias>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, seed)?;
        let biases = vec![ExpertBias::zeros(config.n_routed); config.n_layers];
        Ok(Self {
            config,
            params,
            biases,
        })
    }

    /// Tile `img` for a context holding `images_in_context` images.
    pub fn prepare_image(&self, img: &Image, images_in_context: usize) -> Result<PreparedImage> {
        let cfg = &self.config;
        let tiled = images_in_context <= MAX_TILED_IMAGES;
        let candidates = if tiled {
            candidate_resolutions(cfg.base_tile, cfg.max_tiles)
        } else {
            vec![ResolutionCandidate {
                m: 1,
                n: 1,
                base: cfg.base_tile,
            }]
        };
        let (plan, mut tiles) = tile_image(img, &candidates)?;
        let c = plan.candidate;
        let layout = layout_with_side(c.m, c.n, images_in_context, cfg.shuffled_side())?;
        tiles.truncate(layout.tiles_used());
        Ok(PreparedImage {
            plan,
            tiles,
            layout,
        })
    }

    fn layouts(images: &[PreparedImage]) -> Vec<VisualLayout> {
        images.iter().map(|i| i.layout.clone()).collect()
    }

    fn encode_image(&self, image: &PreparedImage) -> Result<(Tensor, ImageTrace)> {
        let cfg = &self.config;
        let used = image.layout.tiles_used();
        if image.tiles.len() < used {
            return Err(Error::contract(format!(
                "layout needs {used} tiles, image has {}",
                image.tiles.len()
            )));
        }
        if image.layout.side != cfg.shuffled_side() {
            return Err(Error::contract("layout side does not match the model"));
        }
        let g = cfg.patch_grid;
        let mut tokens = Vec::with_capacity(used);
        let mut vision = Vec::with_capacity(used);
        for tile in &image.tiles[..used] {
            let (feat, cache) = self.params.vision.forward(tile, cfg)?;
            let grid = TileFeatures::new(feat.reshape(&[g, g, cfg.vision_channels])?)?;
            tokens.push(pixel_shuffle(&grid, 2)?.tokens());
            vision.push(cache);
        }
        let stacked = Tensor::concat_rows(&tokens.iter().collect::<Vec<_>>())?;
        let (projected, projector) = self.params.projector.forward(&stacked)?;
        Ok((projected, ImageTrace { vision, projector }))
    }

    /// Full forward keeping intermediates. `routing` replays fixed expert
    /// selections instead of routing afresh.
    pub fn forward_traced(
        &self,
        batch: &SequenceBatch,
        images: &[PreparedImage],
        stage: Stage,
        routing: Option<&RoutingPlan>,
    ) -> Result<Trace> {
        let cfg = &self.config;
        let layouts = Self::layouts(images);
        let sources = plan_sequence(&batch.token_ids, &batch.image_slots, &layouts)?;
        if let Some(r) = routing {
            if r.len() != cfg.n_layers {
                return Err(Error::contract("routing plan must cover every layer"));
            }
        }
        let mut visual = Vec::with_capacity(images.len());
        let mut image_traces = Vec::with_capacity(images.len());
        for image in images {
            let (v, t) = self.encode_image(image)?;
            visual.push(v);
            image_traces.push(t);
        }
        let mut x = gather(&sources, &self.params.embed, &visual, &layouts)?;

        let attn_cfg = cfg.attn_config();
        let moe_cfg = cfg.moe_config(stage);
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        let mut aux_loss = 0.0;
        for (l, block) in self.params.blocks.iter().enumerate() {
            let a = rms_norm(&x, &block.attn_norm, NORM_EPS)?;
            let (att, attn) = attention_train_forward(&a, &attn_cfg, &block.attn, true)?;
            let h = x.add(&att)?;
            let m = rms_norm(&h, &block.moe_norm, NORM_EPS)?;
            let frozen = routing.map(|r| r[l].as_slice());
            let (mo, moe) = moe_layer_forward(&m, &block.moe, &self.biases[l], &moe_cfg, frozen)?;
            let out = h.add(&mo)?;
            aux_loss += moe.aux_loss;
            blocks.push(BlockTrace { x, attn, h, moe });
            x = out;
        }
        let normed = rms_norm(&x, &self.params.final_norm, NORM_EPS)?;
        let logits = linear(&normed, &self.params.head, None)?;
        Ok(Trace {
            sources,
            tiles_used: images.iter().map(|i| i.layout.tiles_used()).collect(),
            images: image_traces,
            blocks,
            x_final: x,
            normed,
            logits,
            aux_loss,
        })
    }

    /// Logits `[merged_len, vocab]`.
    pub fn forward(&self, batch: &SequenceBatch, images: &[PreparedImage]) -> Result<Tensor> {
        Ok(self
            .forward_traced(batch, images, Stage::new(1)?, None)?
            .logits)
    }

    /// Gradients of `dlogits · logits + aux_scale · aux_loss` for every parameter.
    pub fn backward(
        &self,
        trace: &Trace,
        dlogits: &Tensor,
        aux_scale: f64,
        stage: Stage,
    ) -> Result<ModelParams> {
        let cfg = &self.config;
        let p = &self.params;
        let mut grads = p.zeros_like();
        let (dnormed, dhead, _) = linear_backward(&trace.normed, &p.head, dlogits)?;
        grads.head.add_assign(&dhead)?;
        let (mut dx, dgf) = rms_norm_backward(&trace.x_final, &p.final_norm, NORM_EPS, &dnormed);
        grads.final_norm.add_assign(&dgf)?;

        let attn_cfg = cfg.attn_config();
        let moe_cfg = cfg.moe_config(stage);
        for ((block, bt), g) in p
            .blocks
            .iter()
            .zip(&trace.blocks)
            .zip(grads.blocks.iter_mut())
            .rev()
        {
            let dm = moe_layer_backward(&block.moe, &moe_cfg, &bt.moe, &dx, aux_scale, &mut g.moe)?;
            let (dh_norm, dgm) = rms_norm_backward(&bt.h, &block.moe_norm, NORM_EPS, &dm);
            g.moe_norm.add_assign(&dgm)?;
            let dh = dx.add(&dh_norm)?;
            let da = attention_backward(&attn_cfg, &block.attn, &bt.attn, &dh, &mut g.attn)?;
            let (dx_norm, dga) = rms_norm_backward(&bt.x, &block.attn_norm, NORM_EPS, &da);
            g.attn_norm.add_assign(&dga)?;
            dx = dh.add(&dx_norm)?;
        }

        let cells = cfg.shuffled_side() * cfg.shuffled_side();
        let mut dvisual: Vec<Tensor> = trace
            .tiles_used
            .iter()
            .map(|&t| Tensor::zeros(&[t * cells, cfg.d_model]))
            .collect();
        scatter(&trace.sources, &dx, &mut grads.embed, &mut dvisual);

        let g = cfg.patch_grid;
        let side = cfg.shuffled_side();
        for (it, dv) in trace.images.iter().zip(&dvisual) {
            let dtokens = p
                .projector
                .backward(&it.projector, dv, &mut grads.projector)?;
            for (t, vc) in it.vision.iter().enumerate() {
                let block = dtokens.slice_rows(t * cells, (t + 1) * cells)?;
                let block = block.reshape(&[side, side, cfg.projector_in()])?;
                let dfeat = pixel_shuffle_backward(&block, g, g, cfg.vision_channels, 2)?
                    .reshape(&[g * g, cfg.vision_channels])?;
                p.vision.backward(cfg, vc, &dfeat, &mut grads.vision)?;
            }
        }
        Ok(grads)
    }

    /// Loss (masked next-token plus auxiliary balance) and its gradient.
    pub fn loss_and_grad(
        &self,
        batch: &SequenceBatch,
        images: &[PreparedImage],
        stage: Stage,
        routing: Option<&RoutingPlan>,
    ) -> Result<(LossReport, ModelParams, Trace)> {
        let trace = self.forward_traced(batch, images, stage, routing)?;
        let (lm_loss, dlogits) = next_token_loss(&trace.logits, &batch.labels, &batch.loss_mask)?;
        let grads = self.backward(&trace, &dlogits, 1.0, stage)?;
        let report = LossReport {
            lm_loss,
            aux_loss: trace.aux_loss,
        };
        Ok((report, grads, trace))
    }

    /// Scalar loss only, for finite differences.
    pub fn loss(
        &self,
        batch: &SequenceBatch,
        images: &[PreparedImage],
        stage: Stage,
        routing: Option<&RoutingPlan>,
    ) -> Result<LossReport> {
        let trace = self.forward_traced(batch, images, stage, routing)?;
        let (lm_loss, _) = next_token_loss(&trace.logits, &batch.labels, &batch.loss_mask)?;
        Ok(LossReport {
            lm_loss,
            aux_loss: trace.aux_loss,
        })
    }

    /// Prefill through per-layer KV caches (the decoding path).
    pub fn infer(&self, batch: &SequenceBatch, images: &[PreparedImage]) -> Result<Inference> {
        let cfg = &self.config;
        let layouts = Self::layouts(images);
        let sources = plan_sequence(&batch.token_ids, &batch.image_slots, &layouts)?;
        let visual = images
            .iter()
            .map(|i| self.encode_image(i).map(|(v, _)| v))
            .collect::<Result<Vec<_>>>()?;
        let mut x = gather(&sources, &self.params.embed, &visual, &layouts)?;
        let attn_cfg = cfg.attn_config();
        let moe_cfg = cfg.moe_config(Stage::new(1)?);
        let mut total = 0;
        let mut per_token = 0;
        for (l, block) in self.params.blocks.iter().enumerate() {
            let mut cache = KVCache::new(&attn_cfg);
            let a = rms_norm(&x, &block.attn_norm, NORM_EPS)?;
            let att = attention_forward(&a, &attn_cfg, &block.attn, &mut cache, true)?.output;
            let h = x.add(&att)?;
            let m = rms_norm(&h, &block.moe_norm, NORM_EPS)?;
            let (mo, _) = moe_layer_forward(&m, &block.moe, &self.biases[l], &moe_cfg, None)?;
            x = h.add(&mo)?;
            total += cache.total_floats();
            per_token += cache.floats_per_token();
        }
        let normed = rms_norm(&x, &self.params.final_norm, NORM_EPS)?;
        Ok(Inference {
            logits: linear(&normed, &self.params.head, None)?,
            kv_floats_per_token: per_token,
            kv_total_floats: total,
        })
    }
}

/// Plain SGD: `params -= lr · grads`.
pub fn sgd_step<P: Params>(params: &mut P, grads: &P, lr: f64) {
    params.axpy(-lr, grads);
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub loss: LossReport,
    pub load_counts: Vec<Vec<usize>>,
}

/// One optimizer step. Stage 1 leaves the language model untouched; the
/// vision encoder steps at `lr · vision_lr_multiplier`. With bias correction
/// enabled, each layer's expert bias then moves toward balanced load.
pub fn train_step(
    model: &mut Model,
    batch: &SequenceBatch,
    images: &[PreparedImage],
    stage: Stage,
    lr: f64,
) -> Result<StepReport> {
    if !(lr >= 0.0) {
        return Err(Error::contract(format!(
            "learning rate must be >= 0, got {lr}"
        )));
    }
    let (loss, grads, trace) = model.loss_and_grad(batch, images, stage, None)?;
    let flat = grads.flatten();
    let mut offset = 0;
    let vision_lr = lr * model.config.vision_lr_multiplier;
    let freeze = stage.freezes_language_model();
    model.params.visit_groups_mut(&mut |group, t| {
        let n = t.numel();
        let step = match group {
            ParamGroup::Language if freeze => 0.0,
            ParamGroup::Vision => vision_lr,
            _ => lr,
        };
        if step != 0.0 {
            for (v, g) in t.data_mut().iter_mut().zip(&flat[offset..offset + n]) {
                *v -= step * g;
            }
        }
        offset += n;
    });
    let load_counts = trace.load_counts();
    let moe_cfg = model.config.moe_config(stage);
    if moe_cfg.bias_enabled && moe_cfg.bias_step > 0.0 {
        for (bias, loads) in model.biases.iter_mut().zip(&load_counts) {
            *bias = update_bias(bias, loads, moe_cfg.bias_step)?;
        }
    }
    Ok(StepReport { loss, load_counts })
}
