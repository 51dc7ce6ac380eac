mod common;

use common::*;
use proptest::prelude::*;
use vlkit_core::adaptor::{layout_visual_tokens, visual_token_count};
use vlkit_core::imaging::Image;
use vlkit_core::tiling::{candidate_resolutions, select_resolution, tile_image, BASE_TILE};

#[test]
fn candidate_sets_match_enumeration() {
    for max in [1, 2, 4, 9, 18] {
        let got: Vec<_> = candidate_resolutions(BASE_TILE, max)
            .iter()
            .map(|c| (c.m, c.n))
            .collect();
        assert_eq!(got, enumerate_grids(max), "max_tiles {max}");
    }
    assert_eq!(enumerate_grids(9).len(), 23);
    assert_eq!(enumerate_grids(18).len(), 58);
}

#[test]
fn every_layout_matches_formula() {
    for (m, n) in enumerate_grids(9) {
        let l = layout_visual_tokens(m, n, 1).unwrap();
        assert_eq!(l.len(), layout_len_formula(m, n), "({m}, {n})");
        assert_eq!(l.len(), visual_token_count(m, n, 14, true));
        assert_eq!(l.patch_count(), 196 * (1 + m * n));
        assert_eq!(l.separator_count(), 1);
        assert_eq!(l.newline_count(), 14 + 14 * m);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn selection_matches_brute_force(h in 1usize..5000, w in 1usize..5000) {
        let plan = select_resolution(h, w, &candidate_resolutions(BASE_TILE, 9)).unwrap();
        let (m, n, rh, rw, pad) = brute_force_select(h, w, 9);
        prop_assert_eq!((plan.candidate.m, plan.candidate.n), (m, n));
        prop_assert_eq!((plan.resized_h, plan.resized_w, plan.padding_area), (rh, rw, pad));
        prop_assert!(plan.resized_h <= plan.candidate.height());
        prop_assert!(plan.resized_w <= plan.candidate.width());
    }

    #[test]
    fn tiles_are_base_sized(h in 1usize..900, w in 1usize..900) {
        let img = Image::filled(w, h, [9, 9, 9]);
        let (plan, tiles) = tile_image(&img, &candidate_resolutions(BASE_TILE, 4)).unwrap();
        prop_assert_eq!(tiles.len(), 1 + plan.candidate.m * plan.candidate.n);
        for t in &tiles {
            prop_assert_eq!((t.width(), t.height()), (BASE_TILE, BASE_TILE));
        }
    }
}
