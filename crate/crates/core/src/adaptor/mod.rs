//! Vision-language adaptor: pixel shuffle of per-tile feature grids, the
//! special-token layout of the visual sequence, and the MLP projector.

mod layout;
mod projector;
mod shuffle;

pub use layout::{
    layout_visual_tokens, layout_with_side, visual_token_count, VisualLayout, VisualTokenKind,
    MAX_TILED_IMAGES, PRODUCTION_SIDE,
};
pub use projector::{project, Mlp, MlpCache};
pub use shuffle::{pixel_shuffle, pixel_shuffle_backward, TileFeatures};
