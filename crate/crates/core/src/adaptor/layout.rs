use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Post-shuffle tile side at production scale (27×27 patches → 14×14).
pub const PRODUCTION_SIDE: usize = 14;

/// Tiling is switched off once more than this many images share a context.
pub const MAX_TILED_IMAGES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VisualTokenKind {
    /// Cell `(row, col)` of tile `tile`; tile 0 is the global thumbnail,
    /// local tiles follow in row-major order starting at 1.
    Patch {
        tile: usize,
        row: usize,
        col: usize,
    },
    TileNewline,
    ViewSeparator,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VisualLayout {
    pub m: usize,
    pub n: usize,
    /// Cells per tile side after pixel shuffle.
    pub side: usize,
    pub tiled: bool,
    pub sequence: Vec<VisualTokenKind>,
}

impl VisualLayout {
    pub fn len(&self) -> usize {
        self.sequence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequence.is_empty()
    }

    pub fn patch_count(&self) -> usize {
        self.count(|k| matches!(k, VisualTokenKind::Patch { .. }))
    }

    pub fn newline_count(&self) -> usize {
        self.count(|k| *k == VisualTokenKind::TileNewline)
    }

    pub fn separator_count(&self) -> usize {
        self.count(|k| *k == VisualTokenKind::ViewSeparator)
    }

    fn count(&self, pred: impl Fn(&VisualTokenKind) -> bool) -> usize {
        self.sequence.iter().filter(|k| pred(k)).count()
    }

    /// Number of tiles whose patch features this layout consumes.
    pub fn tiles_used(&self) -> usize {
        if self.tiled {
            1 + self.m * self.n
        } else {
            1
        }
    }

    /// One line per token: `P t r c`, `NL` or `SEP`.
    pub fn dump(&self) -> String {
        let mut out = String::with_capacity(self.len() * 8);
        for k in &self.sequence {
            match k {
                VisualTokenKind::Patch { tile, row, col } => {
                    writeln!(out, "P {tile} {row} {col}").expect("write to string")
                }
                VisualTokenKind::TileNewline => out.push_str("NL\n"),
                VisualTokenKind::ViewSeparator => out.push_str("SEP\n"),
            }
        }
        out
    }
}

/// `side·(side+1) + 1 + m·side·(n·side + 1)` when tiled, else the thumbnail block alone.
pub fn visual_token_count(m: usize, n: usize, side: usize, tiled: bool) -> usize {
    let thumb = side * (side + 1);
    if tiled {
        thumb + 1 + m * side * (n * side + 1)
    } else {
        thumb
    }
}

/// Layout at production scale (14 cells per tile side).
pub fn layout_visual_tokens(m: usize, n: usize, images_in_context: usize) -> Result<VisualLayout> {
    layout_with_side(m, n, images_in_context, PRODUCTION_SIDE)
}

/// Thumbnail rows each closed by a newline, a view separator, then the local
/// tiles as one `m·side × n·side` grid scanned row by row across tile
/// boundaries, each grid row closed by a newline.
pub fn layout_with_side(
    m: usize,
    n: usize,
    images_in_context: usize,
    side: usize,
) -> Result<VisualLayout> {
    if m == 0 || n == 0 || side == 0 {
        return Err(Error::contract(format!(
            "layout needs m, n, side >= 1 (got {m}, {n}, {side})"
        )));
    }
    let tiled = images_in_context <= MAX_TILED_IMAGES;
    let mut seq = Vec::with_capacity(visual_token_count(m, n, side, tiled));
    for row in 0..side {
        for col in 0..side {
            seq.push(VisualTokenKind::Patch { tile: 0, row, col });
        }
        seq.push(VisualTokenKind::TileNewline);
    }
    if tiled {
        seq.push(VisualTokenKind::ViewSeparator);
        for grid_row in 0..m * side {
            let (tile_row, row) = (grid_row / side, grid_row % side);
            for grid_col in 0..n * side {
                let (tile_col, col) = (grid_col / side, grid_col % side);
                seq.push(VisualTokenKind::Patch {
                    tile: 1 + tile_row * n + tile_col,
                    row,
                    col,
                });
            }
            seq.push(VisualTokenKind::TileNewline);
        }
    }
    Ok(VisualLayout {
        m,
        n,
        side,
        tiled,
        sequence: seq,
    })
}
