//! Independent reference implementations shared by the integration suites.
#![allow(dead_code)]

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use vlkit_core::adaptor::Mlp;
use vlkit_core::attention::{
    attention_backward, attention_train_forward, AttnConfig, AttnMode, AttnWeights, MhaWeights,
    MlaWeights,
};
use vlkit_core::grounding::{BoundingBox, GroundedMessage, GroundedSpan, Segment};
use vlkit_core::imaging::Image;
use vlkit_core::model::{
    next_token_batch, Model, PreparedImage, RoutingPlan, SequenceBatch, Stage,
};
use vlkit_core::moe::{
    moe_layer_backward, moe_layer_forward, ExpertBias, MoEConfig, MoeLayer, Routing,
};
use vlkit_core::numcore::{
    grad_check, grad_check_report, seeded, GradCheckReport, Params, SeededRng, Tensor,
};

/// Visual sequence length at production scale, straight from the closed form.
pub fn layout_len_formula(m: usize, n: usize) -> usize {
    210 + 1 + m * 14 * (n * 14 + 1)
}

/// Every `(m, n)` grid with `m·n ≤ max`, by double enumeration over `[1, max]²`.
pub fn enumerate_grids(max: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for m in 1..=max {
        for n in 1..=max {
            if m * n <= max {
                out.push((m, n));
            }
        }
    }
    out
}

/// Brute-force resolution choice: `(m, n, resized_h, resized_w, padding)`.
pub fn brute_force_select(
    h: usize,
    w: usize,
    max_tiles: usize,
) -> (usize, usize, usize, usize, usize) {
    let mut best: Option<(usize, usize, usize, usize, usize)> = None;
    for (m, n) in enumerate_grids(max_tiles) {
        let (ch, cw) = (384 * m, 384 * n);
        let (rh, rw) = if ch * w <= cw * h {
            let rw = ((w * ch) as f64 / h as f64).round() as usize;
            (ch, rw.clamp(1, cw))
        } else {
            let rh = ((h * cw) as f64 / w as f64).round() as usize;
            (rh.clamp(1, ch), cw)
        };
        let pad = ch * cw - rh * rw;
        let cand = (m, n, rh, rw, pad);
        best = match best {
            None => Some(cand),
            Some(b) => {
                if (pad, m * n, m) < (b.4, b.0 * b.1, b.0) {
                    Some(cand)
                } else {
                    Some(b)
                }
            }
        };
    }
    best.unwrap()
}

/// Minimum achievable max stage cost over every boundary set, and the
/// lexicographically smallest boundary set achieving it.
pub fn brute_force_stages(costs: &[f64], stages: usize) -> (f64, Vec<usize>) {
    let n = costs.len();
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut current = Vec::new();
    fn rec(
        costs: &[f64],
        start: usize,
        left: usize,
        current: &mut Vec<usize>,
        best: &mut Option<(f64, Vec<usize>)>,
    ) {
        let n = costs.len();
        if left == 0 {
            let mut bounds = vec![0];
            bounds.extend(current.iter().copied());
            bounds.push(n);
            let worst = bounds
                .windows(2)
                .map(|w| costs[w[0]..w[1]].iter().sum::<f64>())
                .fold(f64::NEG_INFINITY, f64::max);
            let replace = match best {
                None => true,
                Some((b, bb)) => worst < *b || (worst == *b && current.as_slice() < bb.as_slice()),
            };
            if replace {
                *best = Some((worst, current.clone()));
            }
            return;
        }
        for b in start..n {
            if n - b < left {
                break;
            }
            current.push(b);
            rec(costs, b + 1, left - 1, current, best);
            current.pop();
        }
    }
    assert!(stages >= 1 && stages <= n);
    rec(costs, 1, stages - 1, &mut current, &mut best);
    best.unwrap()
}

/// Exact minimum makespan by depth-first search with pruning.
pub fn optimal_makespan(jobs: &[u64], ranks: usize) -> u64 {
    let mut sorted = jobs.to_vec();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    let mut loads = vec![0u64; ranks];
    let mut best = sorted.iter().sum::<u64>();
    fn dfs(jobs: &[u64], i: usize, loads: &mut [u64], best: &mut u64) {
        if i == jobs.len() {
            *best = (*best).min(*loads.iter().max().unwrap());
            return;
        }
        let mut tried = Vec::with_capacity(loads.len());
        for r in 0..loads.len() {
            if tried.contains(&loads[r]) {
                continue;
            }
            tried.push(loads[r]);
            if loads[r] + jobs[i] >= *best {
                continue;
            }
            loads[r] += jobs[i];
            dfs(jobs, i + 1, loads, best);
            loads[r] -= jobs[i];
        }
    }
    // the all-on-one-rank bound is always achievable, so start one above it
    best += 1;
    dfs(&sorted, 0, &mut loads, &mut best);
    best
}

const TEXT_ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz ABCXYZ0123456789,.!?[]";

fn random_text<R: Rng>(rng: &mut R, max: usize) -> String {
    let len = rng.random_range(1..=max);
    (0..len)
        .map(|_| *TEXT_ALPHABET.choose(rng).unwrap() as char)
        .collect()
}

pub fn random_box<R: Rng>(rng: &mut R) -> BoundingBox {
    let (a, b) = (rng.random_range(0..=999u16), rng.random_range(0..=999u16));
    let (c, d) = (rng.random_range(0..=999u16), rng.random_range(0..=999u16));
    BoundingBox::new(a.min(b), c.min(d), a.max(b), c.max(d)).unwrap()
}

/// A random message in canonical form (no two adjacent text segments).
pub fn random_message<R: Rng>(rng: &mut R) -> GroundedMessage {
    let mut segments = Vec::new();
    let count = rng.random_range(0..6);
    for _ in 0..count {
        let text_ok = !matches!(segments.last(), Some(Segment::Text(_)));
        if text_ok && rng.random_bool(0.5) {
            segments.push(Segment::Text(random_text(rng, 12)));
        } else {
            let boxes = (0..rng.random_range(0..4))
                .map(|_| random_box(rng))
                .collect();
            segments.push(Segment::Span(GroundedSpan {
                ref_text: random_text(rng, 10),
                boxes,
            }));
        }
    }
    GroundedMessage {
        grounding_prefix: rng.random_bool(0.5),
        segments,
    }
}

/// MLA weights that reproduce `mha` exactly: identity down-projection at
/// full rank, the MHA key/value maps as up-projections, no rotary part.
pub fn mla_from_mha(mha: &MhaWeights, d_model: usize) -> AttnWeights {
    AttnWeights::Mla(MlaWeights {
        wq: mha.wq.clone(),
        w_dkv: Tensor::eye(d_model),
        w_uk: mha.wk.clone(),
        w_uv: mha.wv.clone(),
        wo: mha.wo.clone(),
        rope: None,
    })
}

pub fn full_rank_mla_cfg(mha: &AttnConfig) -> AttnConfig {
    AttnConfig {
        mode: AttnMode::Mla {
            rank: mha.d_model(),
            d_rope: 0,
        },
        ..*mha
    }
}

pub fn random_image<R: Rng>(rng: &mut R, w: usize, h: usize) -> Image {
    let pixels = (0..w * h * 3).map(|_| rng.random::<u8>()).collect();
    Image::new(w, h, pixels).unwrap()
}

/// Add `N(0, std)` noise to every parameter so gradients are far from zero.
pub fn jitter<P: Params, R: Rng>(params: &mut P, rng: &mut R, std: f64) {
    params.visit_mut(&mut |t| {
        let noise = Tensor::randn(rng, t.shape(), std);
        t.add_assign(&noise).unwrap();
    });
}

/// Fan-in scaled noise: `N(0, scale / sqrt(cols))` on matrices and
/// `N(0, scale / 4)` on vectors, keeping activations of order one.
pub fn jitter_fan_in<P: Params, R: Rng>(params: &mut P, rng: &mut R, scale: f64) {
    params.visit_mut(&mut |t| {
        let std = if t.ndim() == 2 {
            scale / (t.cols() as f64).sqrt()
        } else {
            scale / 4.0
        };
        let noise = Tensor::randn(rng, t.shape(), std);
        t.add_assign(&noise).unwrap();
    });
}

/// `[image, t0, t1]`: one image followed by two text tokens, the last supervised.
pub fn image_then_two_tokens(model: &Model, img: &Image) -> (SequenceBatch, Vec<PreparedImage>) {
    let prepared = model.prepare_image(img, 1).unwrap();
    let ids = vec![model.config.image_token_id, 17, 42];
    let batch = next_token_batch(
        ids,
        vec![0],
        std::slice::from_ref(&prepared.layout),
        &[false, false, true],
    )
    .unwrap();
    (batch, vec![prepared])
}

/// Finite-difference check of the full model loss on `per_tensor` sampled
/// coordinates of every parameter tensor, with routing frozen at the
/// selections of the unperturbed forward pass.
pub fn model_grad_check(
    model: &Model,
    batch: &SequenceBatch,
    images: &[PreparedImage],
    stage: Stage,
    per_tensor: usize,
    h: f64,
    rng: &mut SeededRng,
) -> GradCheckReport {
    let plan: RoutingPlan = model
        .forward_traced(batch, images, stage, None)
        .unwrap()
        .routing();
    let (_, grads, _) = model
        .loss_and_grad(batch, images, stage, Some(&plan))
        .unwrap();
    let x = Tensor::from_vec(model.params.flatten());
    let mut coords = Vec::new();
    for (offset, len) in model.params.segments() {
        let mut idx: Vec<usize> = (0..len).collect();
        idx.shuffle(rng);
        coords.extend(idx.into_iter().take(per_tensor).map(|i| offset + i));
    }
    let flat_grads = Tensor::from_vec(grads.flatten());
    grad_check_report(
        |x: &Tensor| {
            let mut m = model.clone();
            m.params.load_flat(x.data());
            let loss = m.loss(batch, images, stage, Some(&plan))?;
            Ok(Tensor::scalar(loss.total()))
        },
        |_: &Tensor| Ok(flat_grads.clone()),
        &x,
        h,
        Some(&coords),
    )
    .unwrap()
}

/// Finite-difference step for single-layer checks.
pub const LAYER_STEP: f64 = 3e-5;

pub fn attention_weight_grad_check(cfg: AttnConfig, seed: u64) -> f64 {
    let mut rng = seeded(seed);
    let mut w = AttnWeights::init(&mut rng, &cfg);
    w.visit_mut(&mut |t| *t = Tensor::randn(&mut rng, t.shape(), 0.4));
    let x = Tensor::randn(&mut rng, &[5, cfg.d_model()], 1.0);
    let probe = Tensor::randn(&mut rng, &[5, cfg.d_model()], 1.0);
    let base = w.clone();
    grad_check(
        |flat| {
            let mut w = base.clone();
            w.load_flat(flat.data());
            let (y, cache) = attention_train_forward(&x, &cfg, &w, true)?;
            let mut g = w.zeros_like();
            attention_backward(&cfg, &w, &cache, &probe, &mut g)?;
            Ok((Tensor::scalar(y.dot(&probe)), Tensor::from_vec(g.flatten())))
        },
        &Tensor::from_vec(base.flatten()),
        LAYER_STEP,
    )
    .unwrap()
}

pub fn attention_input_grad_check(cfg: AttnConfig, seed: u64) -> f64 {
    let mut rng = seeded(seed);
    let w = AttnWeights::init(&mut rng, &cfg);
    let mut w2 = w.clone();
    w2.visit_mut(&mut |t| *t = Tensor::randn(&mut rng, t.shape(), 0.4));
    let x = Tensor::randn(&mut rng, &[5, cfg.d_model()], 1.0);
    let probe = Tensor::randn(&mut rng, &[5, cfg.d_model()], 1.0);
    grad_check(
        |x| {
            let (y, cache) = attention_train_forward(x, &cfg, &w2, true)?;
            let mut g = w2.zeros_like();
            let dx = attention_backward(&cfg, &w2, &cache, &probe, &mut g)?;
            Ok((Tensor::scalar(y.dot(&probe)), dx))
        },
        &x,
        LAYER_STEP,
    )
    .unwrap()
}

/// Gradient check of a jittered projector MLP, weights then input.
pub fn projector_grad_check(d_in: usize, hidden: usize, d_out: usize, seed: u64) -> (f64, f64) {
    let mut rng = seeded(seed);
    let mut mlp = Mlp::init(&mut rng, d_in, hidden, d_out);
    jitter(&mut mlp, &mut rng, 0.4);
    let x = Tensor::randn(&mut rng, &[3, d_in], 1.0);
    let probe = Tensor::randn(&mut rng, &[3, d_out], 1.0);
    let objective = |x: &Tensor, mlp: &Mlp| -> (Tensor, Mlp, Tensor) {
        let (y, cache) = mlp.forward(x).unwrap();
        let mut g = mlp.zeros_like();
        let dx = mlp.backward(&cache, &probe, &mut g).unwrap();
        (Tensor::scalar(y.dot(&probe)), g, dx)
    };
    let wrt_weights = grad_check(
        |flat| {
            let mut m = mlp.clone();
            m.load_flat(flat.data());
            let (v, g, _) = objective(&x, &m);
            Ok((v, Tensor::from_vec(g.flatten())))
        },
        &Tensor::from_vec(mlp.flatten()),
        LAYER_STEP,
    )
    .unwrap();
    let wrt_input = grad_check(
        |x| {
            let (v, _, dx) = objective(x, &mlp);
            Ok((v, dx))
        },
        &x,
        LAYER_STEP,
    )
    .unwrap();
    (wrt_weights, wrt_input)
}

pub fn moe_cfg(routing: Routing) -> MoEConfig {
    MoEConfig {
        n_routed: 8,
        n_shared: 2,
        top_k: 2,
        routing,
        bias_enabled: true,
        bias_step: 0.001,
        aux_weight: 0.01,
        d_model: 6,
        d_expert_hidden: 5,
    }
}

pub fn moe_grad_check(c: &MoEConfig, seed: u64) -> (f64, f64) {
    let c = *c;
    let mut rng = seeded(seed);
    let mut layer = MoeLayer::init(&mut rng, &c);
    jitter(&mut layer, &mut rng, 0.4);
    let x = Tensor::randn(&mut rng, &[6, c.d_model], 1.0);
    let probe = Tensor::randn(&mut rng, &[6, c.d_model], 1.0);
    let bias = ExpertBias::zeros(c.n_routed);
    let (_, cache) = moe_layer_forward(&x, &layer, &bias, &c, None).unwrap();
    let frozen: Vec<Vec<usize>> = cache.decisions.iter().map(|d| d.selected.clone()).collect();
    let objective = |x: &Tensor, layer: &MoeLayer| -> (Tensor, MoeLayer, Tensor) {
        let (y, cache) = moe_layer_forward(x, layer, &bias, &c, Some(&frozen)).unwrap();
        let mut g = layer.zeros_like();
        let dx = moe_layer_backward(layer, &c, &cache, &probe, 1.0, &mut g).unwrap();
        (Tensor::scalar(y.dot(&probe) + cache.aux_loss), g, dx)
    };
    let wrt_weights = grad_check(
        |flat| {
            let mut l = layer.clone();
            l.load_flat(flat.data());
            let (v, g, _) = objective(&x, &l);
            Ok((v, Tensor::from_vec(g.flatten())))
        },
        &Tensor::from_vec(layer.flatten()),
        LAYER_STEP,
    )
    .unwrap();
    let wrt_input = grad_check(
        |x| {
            let (v, _, dx) = objective(x, &layer);
            Ok((v, dx))
        },
        &x,
        LAYER_STEP,
    )
    .unwrap();
    (wrt_weights, wrt_input)
}
