mod common;

use common::*;
use vlkit_core::attention::{
    attention_forward, kv_cache_floats_per_token, AttnConfig, AttnMode, AttnWeights, KVCache,
};
use vlkit_core::model::{build_config, Variant};
use vlkit_core::numcore::{seeded, Tensor};

fn mha_cfg() -> AttnConfig {
    AttnConfig {
        n_heads: 2,
        d_head: 4,
        mode: AttnMode::Mha,
        max_len: 64,
    }
}

fn mla_cfg() -> AttnConfig {
    AttnConfig {
        mode: AttnMode::Mla { rank: 5, d_rope: 2 },
        ..mha_cfg()
    }
}

#[test]
fn full_rank_mla_equals_mha() {
    for seed in 0..20 {
        let mut rng = seeded(seed);
        let cfg = mha_cfg();
        let AttnWeights::Mha(mha) = AttnWeights::init(&mut rng, &cfg) else {
            unreachable!()
        };
        let mha_w = AttnWeights::Mha(mha.clone());
        let mla_cfg = full_rank_mla_cfg(&cfg);
        let mla_w = mla_from_mha(&mha, cfg.d_model());
        let x = Tensor::randn(&mut rng, &[7, cfg.d_model()], 1.0);
        let a = attention_forward(&x, &cfg, &mha_w, &mut KVCache::new(&cfg), true).unwrap();
        let b = attention_forward(&x, &mla_cfg, &mla_w, &mut KVCache::new(&mla_cfg), true).unwrap();
        assert!(a.output.max_abs_diff(&b.output) <= 1e-9, "seed {seed}");
    }
}

#[test]
fn incremental_equals_full() {
    for cfg in [mha_cfg(), mla_cfg()] {
        for len in [1, 2, 5, 17, 32] {
            let mut rng = seeded(len as u64);
            let w = AttnWeights::init(&mut rng, &cfg);
            let x = Tensor::randn(&mut rng, &[len, cfg.d_model()], 1.0);
            let full = attention_forward(&x, &cfg, &w, &mut KVCache::new(&cfg), true).unwrap();
            let mut cache = KVCache::new(&cfg);
            for t in 0..len {
                let step =
                    attention_forward(&x.slice_rows(t, t + 1).unwrap(), &cfg, &w, &mut cache, true)
                        .unwrap();
                let diff = step
                    .output
                    .row(0)
                    .iter()
                    .zip(full.output.row(t))
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                assert!(diff <= 1e-9, "{:?} len {len} t {t}", cfg.mode);
            }
            assert_eq!(cache.len(), len);
        }
    }
}

#[test]
fn small_variant_cache_ratio() {
    let small = build_config(Variant::Small).attn_config();
    let mha = AttnConfig {
        mode: AttnMode::Mha,
        ..small
    };
    let (full, latent) = (
        kv_cache_floats_per_token(&mha),
        kv_cache_floats_per_token(&small),
    );
    assert_eq!((full, latent), (4096, 576));
    assert!(latent * 7 < full);
}

#[test]
fn gradients_both_modes() {
    for cfg in [mha_cfg(), mla_cfg()] {
        for seed in 0..20 {
            let e = attention_weight_grad_check(cfg, seed);
            assert!(e <= 1e-5, "{:?} weights, seed {seed}: {e}", cfg.mode);
            let e = attention_input_grad_check(cfg, seed);
            assert!(e <= 1e-5, "{:?} input, seed {seed}: {e}", cfg.mode);
        }
    }
}
