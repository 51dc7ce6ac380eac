use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{AttnConfig, AttnMode};
use crate::error::{Error, Result};
use crate::moe::{MoEConfig, Routing};
use crate::tiling::{BASE_TILE, DEFAULT_MAX_TILES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Tiny,
    Small,
    Base,
    Toy,
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tiny" => Ok(Variant::Tiny),
            "small" => Ok(Variant::Small),
            "base" => Ok(Variant::Base),
            "toy" => Ok(Variant::Toy),
            other => Err(Error::Config(format!("unknown variant `{other}`"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Tiny => "tiny",
            Variant::Small => "small",
            Variant::Base => "base",
            Variant::Toy => "toy",
        })
    }
}

/// Training stage: 1 = alignment, 2 = pretraining, 3 = fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stage(u8);

impl Stage {
    pub fn new(stage: u8) -> Result<Self> {
        if (1..=3).contains(&stage) {
            Ok(Stage(stage))
        } else {
            Err(Error::contract(format!(
                "stage must be 1, 2 or 3, got {stage}"
            )))
        }
    }

    pub fn get(self) -> u8 {
        self.0
    }

    fn index(self) -> usize {
        (self.0 - 1) as usize
    }

    /// Stage 1 trains only the vision encoder and adaptor.
    pub fn freezes_language_model(self) -> bool {
        self.0 == 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub attention: AttnMode,
    pub n_routed: usize,
    pub n_shared: usize,
    pub top_k: usize,
    pub routing: Routing,
    pub bias_correction: bool,
    pub max_tiles: usize,
    pub base_tile: usize,
    pub patch_grid: usize,
    pub vision_channels: usize,
    pub vision_heads: usize,
    pub d_expert_hidden: usize,
    pub max_seq_len: usize,
    /// Placeholder id marking where an image is spliced into the prompt.
    pub image_token_id: usize,
    /// Auxiliary balance loss weight per stage.
    pub aux_loss_weight: [f64; 3],
    /// Expert bias correction step per stage.
    pub bias_update_step: [f64; 3],
    pub vision_lr_multiplier: f64,
}

impl ModelConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Embedding rows: text vocabulary, then tile-newline, then view-separator.
    pub fn embedding_rows(&self) -> usize {
        self.vocab_size + 2
    }

    pub fn newline_id(&self) -> usize {
        self.vocab_size
    }

    pub fn separator_id(&self) -> usize {
        self.vocab_size + 1
    }

    pub fn patch_size(&self) -> usize {
        self.base_tile / self.patch_grid
    }

    /// Post-shuffle cells per tile side.
    pub fn shuffled_side(&self) -> usize {
        self.patch_grid.div_ceil(2)
    }

    pub fn projector_in(&self) -> usize {
        4 * self.vision_channels
    }

    pub fn attn_config(&self) -> AttnConfig {
        AttnConfig {
            n_heads: self.n_heads,
            d_head: self.d_head(),
            mode: self.attention,
            max_len: self.max_seq_len,
        }
    }

    pub fn vision_attn_config(&self) -> AttnConfig {
        AttnConfig {
            n_heads: self.vision_heads,
            d_head: self.vision_channels / self.vision_heads,
            mode: AttnMode::Mha,
            max_len: self.patch_grid * self.patch_grid,
        }
    }

    pub fn moe_config(&self, stage: Stage) -> MoEConfig {
        MoEConfig {
            n_routed: self.n_routed,
            n_shared: self.n_shared,
            top_k: self.top_k,
            routing: self.routing,
            bias_enabled: self.bias_correction,
            bias_step: self.bias_update_step[stage.index()],
            aux_weight: self.aux_loss_weight[stage.index()],
            d_model: self.d_model,
            d_expert_hidden: self.d_expert_hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab_size == 0 || self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 {
            return fail("vocab, d_model, layers and heads must be >= 1".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.n_heads
            ));
        }
        if self.patch_grid == 0 || self.patch_grid > self.base_tile {
            return fail(format!(
                "patch grid {} does not fit a {}px tile",
                self.patch_grid, self.base_tile
            ));
        }
        if self.vision_heads == 0 || !self.vision_channels.is_multiple_of(self.vision_heads) {
            return fail("vision channels must split evenly over vision heads".into());
        }
        if self.max_tiles == 0 {
            return fail("max_tiles must be >= 1".into());
        }
        if self.image_token_id < self.vocab_size {
            return fail("image placeholder id must lie outside the text vocabulary".into());
        }
        if self
            .aux_loss_weight
            .iter()
            .chain(&self.bias_update_step)
            .any(|v| !(*v >= 0.0))
            || !(self.vision_lr_multiplier >= 0.0)
        {
            return fail("stage hyperparameters must be >= 0".into());
        }
        self.attn_config().validate()?;
        self.moe_config(Stage(1)).validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("invalid config JSON: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Published architecture of each variant, plus the desk-scale `Toy`.
///
/// Expert hidden widths are not published; every variant uses
/// `2·d_model / top_k`.
pub fn build_config(variant: Variant) -> ModelConfig {
    let mla = AttnMode::Mla {
        rank: 512,
        d_rope: 64,
    };
    let (vocab, d_model, heads, layers, attention, routed, routing, bias) = match variant {
        Variant::Tiny => (
            129_280,
            1280,
            10,
            12,
            AttnMode::Mha,
            64,
            Routing::Softmax,
            false,
        ),
        Variant::Small => (102_400, 2048, 16, 27, mla, 64, Routing::Softmax, false),
        Variant::Base => (129_280, 2560, 32, 30, mla, 72, Routing::Sigmoid, true),
        Variant::Toy => return toy_config(),
    };
    let top_k = 6;
    ModelConfig {
        variant,
        vocab_size: vocab,
        d_model,
        n_heads: heads,
        n_layers: layers,
        attention,
        n_routed: routed,
        n_shared: 2,
        top_k,
        routing,
        bias_correction: bias,
        max_tiles: DEFAULT_MAX_TILES,
        base_tile: BASE_TILE,
        patch_grid: 27,
        vision_channels: 1152,
        vision_heads: 16,
        d_expert_hidden: 2 * d_model / top_k,
        max_seq_len: 4096,
        image_token_id: vocab + 2,
        aux_loss_weight: if variant == Variant::Base {
            [1e-4; 3]
        } else {
            [1e-3; 3]
        },
        bias_update_step: if bias { [0.0, 1e-3, 0.0] } else { [0.0; 3] },
        vision_lr_multiplier: 0.1,
    }
}

fn toy_config() -> ModelConfig {
    ModelConfig {
        variant: Variant::Toy,
        vocab_size: 128,
        d_model: 32,
        n_heads: 2,
        n_layers: 2,
        attention: AttnMode::Mla {
            rank: 16,
            d_rope: 4,
        },
        n_routed: 8,
        n_shared: 2,
        top_k: 2,
        routing: Routing::Softmax,
        bias_correction: false,
        max_tiles: DEFAULT_MAX_TILES,
        base_tile: BASE_TILE,
        patch_grid: 6,
        vision_channels: 16,
        vision_heads: 2,
        d_expert_hidden: 32,
        max_seq_len: 512,
        image_token_id: 130,
        aux_loss_weight: [1e-3; 3],
        bias_update_step: [0.0, 1e-3, 0.0],
        vision_lr_multiplier: 0.1,
    }
}

/// [`build_config`] keyed by name; unknown names are a config error.
pub fn build_config_named(name: &str) -> Result<ModelConfig> {
    name.parse().map(build_config)
}
