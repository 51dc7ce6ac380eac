//! Splicing visual tokens into the text stream, and the masked
//! next-token objective over the merged sequence.

use crate::adaptor::{VisualLayout, VisualTokenKind};
use crate::error::{Error, Result};
use crate::numcore::{cross_entropy, Tensor};

/// One training or inference sequence.
///
/// `token_ids` is the prompt before expansion: each entry of `image_slots`
/// names a position whose token is replaced by that image's visual tokens.
/// `labels` and `loss_mask` are indexed by the merged sequence; position `p`
/// is trained to predict `labels[p]` when `loss_mask[p]` is set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceBatch {
    pub token_ids: Vec<usize>,
    pub image_slots: Vec<usize>,
    pub labels: Vec<usize>,
    pub loss_mask: Vec<bool>,
}

/// Where each merged position takes its embedding from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Text(usize),
    /// Row of the projected visual tokens of `image`.
    Visual {
        image: usize,
        row: usize,
    },
    Newline,
    Separator,
}

impl Source {
    pub fn is_text(&self) -> bool {
        matches!(self, Source::Text(_))
    }
}

/// Expand the prompt into merged positions.
pub fn plan_sequence(
    token_ids: &[usize],
    image_slots: &[usize],
    layouts: &[VisualLayout],
) -> Result<Vec<Source>> {
    if image_slots.len() != layouts.len() {
        return Err(Error::contract(format!(
            "{} image slots but {} layouts",
            image_slots.len(),
            layouts.len()
        )));
    }
    if image_slots.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::contract("image slots must be strictly increasing"));
    }
    if let Some(&last) = image_slots.last() {
        if last >= token_ids.len() {
            return Err(Error::contract(format!(
                "image slot {last} is outside a {}-token prompt",
                token_ids.len()
            )));
        }
    }
    let extra: usize = layouts.iter().map(|l| l.len()).sum();
    let mut out = Vec::with_capacity(token_ids.len() + extra);
    let mut next = 0;
    for (i, &id) in token_ids.iter().enumerate() {
        if image_slots.get(next) == Some(&i) {
            let layout = &layouts[next];
            let cells = layout.side * layout.side;
            for kind in &layout.sequence {
                out.push(match *kind {
                    VisualTokenKind::Patch { tile, row, col } => Source::Visual {
                        image: next,
                        row: tile * cells + row * layout.side + col,
                    },
                    VisualTokenKind::TileNewline => Source::Newline,
                    VisualTokenKind::ViewSeparator => Source::Separator,
                });
            }
            next += 1;
        } else {
            out.push(Source::Text(id));
        }
    }
    Ok(out)
}

/// Merged sequence length for a prompt of `prompt_len` tokens.
pub fn merged_length(prompt_len: usize, layouts: &[VisualLayout]) -> usize {
    prompt_len - layouts.len() + layouts.iter().map(|l| l.len()).sum::<usize>()
}

/// Build a batch whose targets are the next text tokens.
///
/// `supervised[i]` marks prompt position `i` as a target. A merged
/// position carries loss only when it is text and the following position is
/// a supervised text token.
pub fn next_token_batch(
    token_ids: Vec<usize>,
    image_slots: Vec<usize>,
    layouts: &[VisualLayout],
    supervised: &[bool],
) -> Result<SequenceBatch> {
    if supervised.len() != token_ids.len() {
        return Err(Error::contract("supervision mask must cover the prompt"));
    }
    let sources = plan_sequence(&token_ids, &image_slots, layouts)?;
    let mut origin = Vec::with_capacity(sources.len());
    let mut next = 0;
    for i in 0..token_ids.len() {
        if image_slots.get(next) == Some(&i) {
            origin.extend(std::iter::repeat_n(None, layouts[next].len()));
            next += 1;
        } else {
            origin.push(Some(i));
        }
    }
    let len = sources.len();
    let mut labels = vec![0; len];
    let mut loss_mask = vec![false; len];
    for p in 0..len.saturating_sub(1) {
        if let (Some(_), Some(target)) = (origin[p], origin[p + 1]) {
            if supervised[target] {
                labels[p] = token_ids[target];
                loss_mask[p] = true;
            }
        }
    }
    Ok(SequenceBatch {
        token_ids,
        image_slots,
        labels,
        loss_mask,
    })
}

/// Gather merged embeddings. `table` holds the text vocabulary followed by
/// the tile-newline and view-separator rows; `visual[i]` holds the projected
/// tokens of image `i`, tile-major.
pub fn merge_embeddings(
    batch: &SequenceBatch,
    table: &Tensor,
    visual: &[Tensor],
    layouts: &[VisualLayout],
) -> Result<Tensor> {
    let sources = plan_sequence(&batch.token_ids, &batch.image_slots, layouts)?;
    gather(&sources, table, visual, layouts)
}

pub(crate) fn gather(
    sources: &[Source],
    table: &Tensor,
    visual: &[Tensor],
    layouts: &[VisualLayout],
) -> Result<Tensor> {
    let (rows, d) = table.dims2()?;
    if rows < 3 {
        return Err(Error::shape(
            "embedding table needs text rows plus two special rows",
        ));
    }
    let vocab = rows - 2;
    if visual.len() != layouts.len() {
        return Err(Error::contract("one visual token block per layout"));
    }
    for (v, l) in visual.iter().zip(layouts) {
        let needed = l.tiles_used() * l.side * l.side;
        if v.ndim() != 2 || v.rows() != needed || v.cols() != d {
            return Err(Error::contract(format!(
                "visual tokens {:?} do not match a layout needing [{needed}, {d}]",
                v.shape()
            )));
        }
    }
    let mut out = Vec::with_capacity(sources.len() * d);
    for s in sources {
        let row = match *s {
            Source::Text(id) if id >= vocab => {
                return Err(Error::contract(format!(
                    "token id {id} outside vocabulary {vocab}"
                )))
            }
            Source::Text(id) => table.row(id),
            Source::Visual { image, row } => visual[image].row(row),
            Source::Newline => table.row(vocab),
            Source::Separator => table.row(vocab + 1),
        };
        out.extend_from_slice(row);
    }
    Tensor::new(&[sources.len(), d], out)
}

/// Scatter the gradient of [`gather`] back onto the table and visual blocks.
pub(crate) fn scatter(
    sources: &[Source],
    dx: &Tensor,
    dtable: &mut Tensor,
    dvisual: &mut [Tensor],
) {
    let vocab = dtable.rows() - 2;
    for (p, s) in sources.iter().enumerate() {
        let dst = match *s {
            Source::Text(id) => dtable.row_mut(id),
            Source::Visual { image, row } => dvisual[image].row_mut(row),
            Source::Newline => dtable.row_mut(vocab),
            Source::Separator => dtable.row_mut(vocab + 1),
        };
        for (a, &g) in dst.iter_mut().zip(dx.row(p)) {
            *a += g;
        }
    }
}

/// Mean cross-entropy over masked-in positions, and its gradient.
/// With nothing masked in, the loss and gradient are zero.
pub fn next_token_loss(logits: &Tensor, labels: &[usize], mask: &[bool]) -> Result<(f64, Tensor)> {
    let (t, vocab) = logits.dims2()?;
    if labels.len() != t || mask.len() != t {
        return Err(Error::shape(format!(
            "{t} logit rows but {} labels and {} mask entries",
            labels.len(),
            mask.len()
        )));
    }
    let count = mask.iter().filter(|&&m| m).count();
    let mut grad = Tensor::zeros(&[t, vocab]);
    if count == 0 {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / count as f64;
    let mut loss = 0.0;
    for p in 0..t {
        if !mask[p] {
            continue;
        }
        if labels[p] >= vocab {
            return Err(Error::contract(format!(
                "label {} outside vocabulary {vocab}",
                labels[p]
            )));
        }
        let (l, g) = cross_entropy(logits.row(p), labels[p]);
        loss += l;
        for (dst, v) in grad.row_mut(p).iter_mut().zip(g) {
            *dst = v * inv;
        }
    }
    Ok((loss * inv, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adaptor::layout_with_side;

    #[test]
    fn splice_positions() {
        let layout = layout_with_side(1, 1, 1, 1).unwrap();
        // thumbnail P NL, SEP, local P NL
        assert_eq!(layout.len(), 5);
        let s = plan_sequence(&[5, 99, 7], &[1], &[layout]).unwrap();
        assert_eq!(
            s,
            vec![
                Source::Text(5),
                Source::Visual { image: 0, row: 0 },
                Source::Newline,
                Source::Separator,
                Source::Visual { image: 0, row: 1 },
                Source::Newline,
                Source::Text(7),
            ]
        );
    }

    #[test]
    fn mask_skips_visual_positions() {
        let layout = layout_with_side(1, 1, 1, 1).unwrap();
        let b = next_token_batch(vec![1, 99, 2, 3], vec![1], &[layout], &[true; 4]).unwrap();
        assert_eq!(
            b.loss_mask,
            vec![false, false, false, false, false, false, true, false]
        );
        assert_eq!(b.labels[6], 3);
    }

    #[test]
    fn bad_slots() {
        let l = layout_with_side(1, 1, 1, 1).unwrap();
        assert!(plan_sequence(&[1, 2], &[2], std::slice::from_ref(&l)).is_err());
        assert!(plan_sequence(&[1, 2], &[1, 1], &[l.clone(), l.clone()]).is_err());
        assert!(plan_sequence(&[1, 2], &[], &[l]).is_err());
    }

    #[test]
    fn visual_count_mismatch() {
        let l = layout_with_side(1, 1, 1, 1).unwrap();
        let b = next_token_batch(
            vec![0, 1],
            vec![0],
            std::slice::from_ref(&l),
            &[false, true],
        )
        .unwrap();
        let table = Tensor::zeros(&[6, 3]);
        assert!(merge_embeddings(
            &b,
            &table,
            &[Tensor::zeros(&[3, 3])],
            std::slice::from_ref(&l)
        )
        .is_err());
        assert!(merge_embeddings(&b, &table, &[Tensor::zeros(&[2, 3])], &[l]).is_ok());
    }

    #[test]
    fn empty_mask_loss() {
        let (l, g) = next_token_loss(&Tensor::ones(&[2, 3]), &[0, 0], &[false, false]).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g.sum(), 0.0);
    }

    #[test]
    fn uniform_logits_loss() {
        let (l, _) = next_token_loss(&Tensor::zeros(&[2, 4]), &[1, 3], &[true, true]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-15);
    }
}
