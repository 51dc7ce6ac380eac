//! Dynamic tiling: enumerate candidate grids, pick the one that needs the
//! least padding, and cut the padded canvas into a thumbnail plus local tiles.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{pad_to, resize_bilinear, Image, PAD_FILL};

pub const BASE_TILE: usize = 384;
pub const DEFAULT_MAX_TILES: usize = 9;

/// An `m × n` grid of base tiles; `m` counts rows, so the canvas is
/// `m·base` pixels high and `n·base` pixels wide.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ResolutionCandidate {
    pub m: usize,
    pub n: usize,
    pub base: usize,
}

impl ResolutionCandidate {
    pub fn height(&self) -> usize {
        self.m * self.base
    }

    pub fn width(&self) -> usize {
        self.n * self.base
    }

    pub fn local_tiles(&self) -> usize {
        self.m * self.n
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TilingPlan {
    pub candidate: ResolutionCandidate,
    pub scale: f64,
    pub resized_h: usize,
    pub resized_w: usize,
    pub padding_area: usize,
}

impl TilingPlan {
    /// Local tiles plus the global thumbnail.
    pub fn tile_count(&self) -> usize {
        1 + self.candidate.local_tiles()
    }
}

/// All `(m, n)` with `m·n ≤ max_tiles`, ordered by `m` then `n`.
pub fn candidate_resolutions(base: usize, max_tiles: usize) -> Vec<ResolutionCandidate> {
    let mut out = Vec::new();
    for m in 1..=max_tiles {
        for n in 1..=max_tiles / m {
            out.push(ResolutionCandidate { m, n, base });
        }
    }
    out
}

/// `round(num / den)` with halves rounded away from zero, for non-negative operands.
fn div_round(num: u128, den: u128) -> u128 {
    (2 * num + den) / (2 * den)
}

/// Uniform fit of an `h × w` image into `c`: returns `(resized_h, resized_w, scale)`.
///
/// The binding side matches the candidate exactly; the other side is rounded
/// and clamped into `[1, candidate side]`.
pub fn fit_into(h: usize, w: usize, c: &ResolutionCandidate) -> (usize, usize, f64) {
    let (ch, cw) = (c.height() as u128, c.width() as u128);
    let (h128, w128) = (h as u128, w as u128);
    // ch/h <= cw/w  <=>  ch·w <= cw·h
    if ch * w128 <= cw * h128 {
        let rw = div_round(w128 * ch, h128).clamp(1, cw);
        (ch as usize, rw as usize, ch as f64 / h as f64)
    } else {
        let rh = div_round(h128 * cw, w128).clamp(1, ch);
        (rh as usize, cw as usize, cw as f64 / w as f64)
    }
}

/// Picks the candidate that minimizes padding area; ties go to fewer tiles,
/// then to fewer rows.
pub fn select_resolution(
    h: usize,
    w: usize,
    candidates: &[ResolutionCandidate],
) -> Result<TilingPlan> {
    if h == 0 || w == 0 {
        return Err(Error::contract(format!(
            "image size {h}x{w} must be positive"
        )));
    }
    let mut best: Option<TilingPlan> = None;
    for c in candidates {
        let (rh, rw, scale) = fit_into(h, w, c);
        let plan = TilingPlan {
            candidate: *c,
            scale,
            resized_h: rh,
            resized_w: rw,
            padding_area: c.height() * c.width() - rh * rw,
        };
        let better = match &best {
            None => true,
            Some(b) => {
                let key =
                    |p: &TilingPlan| (p.padding_area, p.candidate.local_tiles(), p.candidate.m);
                key(&plan) < key(b)
            }
        };
        if better {
            best = Some(plan);
        }
    }
    best.ok_or_else(|| Error::contract("no candidate resolutions"))
}

/// Resize and pad `img` onto the canvas described by `plan`.
pub fn build_canvas(img: &Image, plan: &TilingPlan) -> Result<Image> {
    let resized = resize_bilinear(img, plan.resized_h, plan.resized_w)?;
    pad_to(
        &resized,
        plan.candidate.height(),
        plan.candidate.width(),
        PAD_FILL,
    )
}

/// Global thumbnail first, then the `m·n` local tiles in row-major order.
pub fn slice_tiles(canvas: &Image, plan: &TilingPlan) -> Result<Vec<Image>> {
    let c = &plan.candidate;
    if canvas.height() != c.height() || canvas.width() != c.width() {
        return Err(Error::contract(format!(
            "canvas {}x{} does not match candidate {}x{}",
            canvas.width(),
            canvas.height(),
            c.width(),
            c.height()
        )));
    }
    let mut tiles = Vec::with_capacity(plan.tile_count());
    tiles.push(resize_bilinear(canvas, c.base, c.base)?);
    for row in 0..c.m {
        for col in 0..c.n {
            tiles.push(canvas.crop(col * c.base, row * c.base, c.base, c.base)?);
        }
    }
    Ok(tiles)
}

/// Full preprocessing of one image: plan, canvas, tiles.
pub fn tile_image(
    img: &Image,
    candidates: &[ResolutionCandidate],
) -> Result<(TilingPlan, Vec<Image>)> {
    let plan = select_resolution(img.height(), img.width(), candidates)?;
    let canvas = build_canvas(img, &plan)?;
    let tiles = slice_tiles(&canvas, &plan)?;
    Ok((plan, tiles))
}
