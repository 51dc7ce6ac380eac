//! Desk-scale vision encoder: linear patch embedding followed by one
//! pre-norm transformer block (bidirectional MHA + GELU MLP).

use rand::Rng;

use crate::adaptor::{Mlp, MlpCache};
use crate::attention::{attention_backward, attention_train_forward, AttnCache, AttnWeights};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::numcore::{
    linear, linear_backward, rms_norm, rms_norm_backward, Params, Tensor, INIT_STD,
};

use super::config::ModelConfig;
use super::NORM_EPS;

#[derive(Debug, Clone, PartialEq)]
pub struct VisionEncoder {
    /// `[channels, patch_size² · 3]`
    pub patch_w: Tensor,
    pub patch_b: Tensor,
    pub norm1: Tensor,
    pub attn: AttnWeights,
    pub norm2: Tensor,
    pub mlp: Mlp,
}

#[derive(Debug, Clone)]
pub struct VisionCache {
    patches: Tensor,
    x0: Tensor,
    a: Tensor,
    attn: AttnCache,
    x1: Tensor,
    mlp: MlpCache,
}

/// Flatten a square tile into `[grid², ps·ps·3]` rows of `pixel / 255`,
/// patches in row-major order, each patch row-major with RGB innermost.
pub fn patchify(tile: &Image, grid: usize, patch: usize) -> Result<Tensor> {
    let side = grid * patch;
    if tile.width() != side || tile.height() != side {
        return Err(Error::shape(format!(
            "tile is {}x{}, expected {side}x{side}",
            tile.width(),
            tile.height()
        )));
    }
    let dim = patch * patch * 3;
    let mut data = Vec::with_capacity(grid * grid * dim);
    for py in 0..grid {
        for px in 0..grid {
            for y in 0..patch {
                for x in 0..patch {
                    let rgb = tile.pixel(px * patch + x, py * patch + y);
                    data.extend(rgb.iter().map(|&v| v as f64 / 255.0));
                }
            }
        }
    }
    Tensor::new(&[grid * grid, dim], data)
}

impl VisionEncoder {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, cfg: &ModelConfig) -> Self {
        let c = cfg.vision_channels;
        let ps = cfg.patch_size();
        Self {
            patch_w: Tensor::randn(rng, &[c, ps * ps * 3], INIT_STD),
            patch_b: Tensor::zeros(&[c]),
            norm1: Tensor::ones(&[c]),
            attn: AttnWeights::init(rng, &cfg.vision_attn_config()),
            norm2: Tensor::ones(&[c]),
            mlp: Mlp::init(rng, c, 2 * c, c),
        }
    }

    /// Encode one tile into `[grid², channels]` features.
    pub fn forward(&self, tile: &Image, cfg: &ModelConfig) -> Result<(Tensor, VisionCache)> {
        let patches = patchify(tile, cfg.patch_grid, cfg.patch_size())?;
        let x0 = linear(&patches, &self.patch_w, Some(&self.patch_b))?;
        let a = rms_norm(&x0, &self.norm1, NORM_EPS)?;
        let (att, attn) =
            attention_train_forward(&a, &cfg.vision_attn_config(), &self.attn, false)?;
        let x1 = x0.add(&att)?;
        let m = rms_norm(&x1, &self.norm2, NORM_EPS)?;
        let (mo, mlp) = self.mlp.forward(&m)?;
        let x2 = x1.add(&mo)?;
        Ok((
            x2,
            VisionCache {
                patches,
                x0,
                a,
                attn,
                x1,
                mlp,
            },
        ))
    }

    pub fn backward(
        &self,
        cfg: &ModelConfig,
        cache: &VisionCache,
        dy: &Tensor,
        grads: &mut VisionEncoder,
    ) -> Result<()> {
        let dm = self.mlp.backward(&cache.mlp, dy, &mut grads.mlp)?;
        let (dx1_norm, dg2) = rms_norm_backward(&cache.x1, &self.norm2, NORM_EPS, &dm);
        grads.norm2.add_assign(&dg2)?;
        let dx1 = dy.add(&dx1_norm)?;
        let da = attention_backward(
            &cfg.vision_attn_config(),
            &self.attn,
            &cache.attn,
            &dx1,
            &mut grads.attn,
        )?;
        debug_assert_eq!(da.shape(), cache.a.shape());
        let (dx0_norm, dg1) = rms_norm_backward(&cache.x0, &self.norm1, NORM_EPS, &da);
        grads.norm1.add_assign(&dg1)?;
        let dx0 = dx1.add(&dx0_norm)?;
        let (_, dw, db) = linear_backward(&cache.patches, &self.patch_w, &dx0)?;
        grads.patch_w.add_assign(&dw)?;
        grads.patch_b.add_assign(&db)?;
        Ok(())
    }
}

impl Params for VisionEncoder {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Tensor)) {
        f(&self.patch_w);
        f(&self.patch_b);
        f(&self.norm1);
        self.attn.visit(f);
        f(&self.norm2);
        self.mlp.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        f(&mut self.patch_w);
        f(&mut self.patch_b);
        f(&mut self.norm1);
        self.attn.visit_mut(f);
        f(&mut self.norm2);
        self.mlp.visit_mut(f);
    }
}
