//! Causal self-attention in two flavours: reference multi-head attention and
//! multi-head latent attention (MLA), which caches one low-rank latent and a
//! shared rotary key per token instead of full per-head keys and values.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{
    linear, linear_backward, softmax_backward_slice, softmax_slice, Params, Tensor, INIT_STD,
};

pub const ROPE_BASE: f64 = 10_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AttnMode {
    Mha,
    Mla { rank: usize, d_rope: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttnConfig {
    pub n_heads: usize,
    pub d_head: usize,
    pub mode: AttnMode,
    pub max_len: usize,
}

impl AttnConfig {
    pub fn d_model(&self) -> usize {
        self.n_heads * self.d_head
    }

    pub fn d_rope(&self) -> usize {
        match self.mode {
            AttnMode::Mha => 0,
            AttnMode::Mla { d_rope, .. } => d_rope,
        }
    }

    pub fn scale(&self) -> f64 {
        1.0 / ((self.d_head + self.d_rope()) as f64).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_head == 0 || self.max_len == 0 {
            return Err(Error::Config(
                "attention needs heads, head dim and max_len >= 1".into(),
            ));
        }
        if let AttnMode::Mla { rank, d_rope } = self.mode {
            if rank == 0 {
                return Err(Error::Config("MLA rank must be >= 1".into()));
            }
            if d_rope % 2 != 0 {
                return Err(Error::Config(format!("rotary dim {d_rope} must be even")));
            }
        }
        Ok(())
    }
}

/// Floats cached per token: `2·heads·d_head` for MHA, `rank + d_rope` for MLA.
pub fn kv_cache_floats_per_token(cfg: &AttnConfig) -> usize {
    match cfg.mode {
        AttnMode::Mha => 2 * cfg.n_heads * cfg.d_head,
        AttnMode::Mla { rank, d_rope } => rank + d_rope,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MhaWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

/// Rotary query/key projections of the decoupled positional part.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoupledRope {
    /// `[heads·d_rope, d_model]`
    pub wq: Tensor,
    /// `[d_rope, d_model]`, shared by every head.
    pub wk: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlaWeights {
    /// `[heads·d_head, d_model]`
    pub wq: Tensor,
    /// Down-projection to the cached latent, `[rank, d_model]`.
    pub w_dkv: Tensor,
    /// Per-head key up-projection, `[heads·d_head, rank]`.
    pub w_uk: Tensor,
    /// Per-head value up-projection, `[heads·d_head, rank]`.
    pub w_uv: Tensor,
    pub wo: Tensor,
    pub rope: Option<DecoupledRope>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AttnWeights {
    Mha(MhaWeights),
    Mla(MlaWeights),
}

impl AttnWeights {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, cfg: &AttnConfig) -> Self {
        let d = cfg.d_model();
        let mut w = |shape: &[usize]| Tensor::randn(rng, shape, INIT_STD);
        match cfg.mode {
            AttnMode::Mha => AttnWeights::Mha(MhaWeights {
                wq: w(&[d, d]),
                wk: w(&[d, d]),
                wv: w(&[d, d]),
                wo: w(&[d, d]),
            }),
            AttnMode::Mla { rank, d_rope } => {
                let hd = cfg.n_heads * cfg.d_head;
                AttnWeights::Mla(MlaWeights {
                    wq: w(&[hd, d]),
                    w_dkv: w(&[rank, d]),
                    w_uk: w(&[hd, rank]),
                    w_uv: w(&[hd, rank]),
                    wo: w(&[d, hd]),
                    rope: (d_rope > 0).then(|| DecoupledRope {
                        wq: w(&[cfg.n_heads * d_rope, d]),
                        wk: w(&[d_rope, d]),
                    }),
                })
            }
        }
    }

    fn check(&self, cfg: &AttnConfig) -> Result<()> {
        cfg.validate()?;
        let d = cfg.d_model();
        let hd = cfg.n_heads * cfg.d_head;
        let want = |t: &Tensor, r: usize, c: usize, name: &str| -> Result<()> {
            if t.shape() != [r, c] {
                return Err(Error::shape(format!(
                    "{name}: expected [{r}, {c}], got {:?}",
                    t.shape()
                )));
            }
            Ok(())
        };
        match (self, cfg.mode) {
            (AttnWeights::Mha(w), AttnMode::Mha) => {
                want(&w.wq, d, d, "wq")?;
                want(&w.wk, d, d, "wk")?;
                want(&w.wv, d, d, "wv")?;
                want(&w.wo, d, d, "wo")
            }
            (AttnWeights::Mla(w), AttnMode::Mla { rank, d_rope }) => {
                want(&w.wq, hd, d, "wq")?;
                want(&w.w_dkv, rank, d, "w_dkv")?;
                want(&w.w_uk, hd, rank, "w_uk")?;
                want(&w.w_uv, hd, rank, "w_uv")?;
                want(&w.wo, d, hd, "wo")?;
                match (&w.rope, d_rope) {
                    (None, 0) => Ok(()),
                    (Some(r), dr) if dr > 0 => {
                        want(&r.wq, cfg.n_heads * dr, d, "rope wq")?;
                        want(&r.wk, dr, d, "rope wk")
                    }
                    _ => Err(Error::shape("rotary weights do not match d_rope")),
                }
            }
            _ => Err(Error::contract(
                "attention weights do not match the configured mode",
            )),
        }
    }
}

impl Params for AttnWeights {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Tensor)) {
        match self {
            AttnWeights::Mha(w) => {
                f(&w.wq);
                f(&w.wk);
                f(&w.wv);
                f(&w.wo);
            }
            AttnWeights::Mla(w) => {
                f(&w.wq);
                f(&w.w_dkv);
                f(&w.w_uk);
                f(&w.w_uv);
                f(&w.wo);
                if let Some(r) = &w.rope {
                    f(&r.wq);
                    f(&r.wk);
                }
            }
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        match self {
            AttnWeights::Mha(w) => {
                f(&mut w.wq);
                f(&mut w.wk);
                f(&mut w.wv);
                f(&mut w.wo);
            }
            AttnWeights::Mla(w) => {
                f(&mut w.wq);
                f(&mut w.w_dkv);
                f(&mut w.w_uk);
                f(&mut w.w_uv);
                f(&mut w.wo);
                if let Some(r) = &mut w.rope {
                    f(&mut r.wq);
                    f(&mut r.wk);
                }
            }
        }
    }
}

/// Append-only per-token decoding state.
#[derive(Debug, Clone, PartialEq)]
pub enum KVCache {
    /// Full keys and values, `heads·d_head` floats each per token.
    Mha {
        width: usize,
        keys: Vec<f64>,
        values: Vec<f64>,
    },
    /// One latent (`rank` floats) and one rotated key (`d_rope` floats) per token.
    Mla {
        rank: usize,
        d_rope: usize,
        latents: Vec<f64>,
        rope_keys: Vec<f64>,
    },
}

impl KVCache {
    pub fn new(cfg: &AttnConfig) -> Self {
        match cfg.mode {
            AttnMode::Mha => KVCache::Mha {
                width: cfg.d_model(),
                keys: Vec::new(),
                values: Vec::new(),
            },
            AttnMode::Mla { rank, d_rope } => KVCache::Mla {
                rank,
                d_rope,
                latents: Vec::new(),
                rope_keys: Vec::new(),
            },
        }
    }

    pub fn len(&self) -> usize {
        match self {
            KVCache::Mha { width, keys, .. } => keys.len() / width,
            KVCache::Mla { rank, latents, .. } => latents.len() / rank,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn floats_per_token(&self) -> usize {
        match self {
            KVCache::Mha { width, .. } => 2 * width,
            KVCache::Mla { rank, d_rope, .. } => rank + d_rope,
        }
    }

    /// Every cached float, across all tokens.
    pub fn total_floats(&self) -> usize {
        match self {
            KVCache::Mha { keys, values, .. } => keys.len() + values.len(),
            KVCache::Mla {
                latents, rope_keys, ..
            } => latents.len() + rope_keys.len(),
        }
    }

    fn matches(&self, cfg: &AttnConfig) -> bool {
        match (self, cfg.mode) {
            (KVCache::Mha { width, .. }, AttnMode::Mha) => *width == cfg.d_model(),
            (
                KVCache::Mla { rank, d_rope, .. },
                AttnMode::Mla {
                    rank: r,
                    d_rope: dr,
                },
            ) => *rank == r && *d_rope == dr,
            _ => false,
        }
    }
}

/// Rotates consecutive pairs of `v` by `position·base^(-2i/d)`; `sign = -1` inverts.
fn rotate(v: &mut [f64], position: usize, sign: f64) {
    let d = v.len();
    for i in 0..d / 2 {
        let theta = position as f64 * ROPE_BASE.powf(-2.0 * i as f64 / d as f64);
        let (s, c) = (sign * theta).sin_cos();
        let (a, b) = (v[2 * i], v[2 * i + 1]);
        v[2 * i] = a * c - b * s;
        v[2 * i + 1] = a * s + b * c;
    }
}

/// Applies rotary rotation to every `width`-sized chunk of each row; row `i`
/// sits at position `start + i`.
fn rope_rows(t: &Tensor, width: usize, start: usize, sign: f64) -> Tensor {
    let mut out = t.clone();
    let cols = t.cols();
    for (i, row) in out.data_mut().chunks_mut(cols).enumerate() {
        for chunk in row.chunks_mut(width) {
            rotate(chunk, start + i, sign);
        }
    }
    out
}

/// Per-head query and key material for the scaled dot-product core.
struct HeadInputs<'a> {
    q: &'a Tensor,
    qr: Option<&'a Tensor>,
    k: &'a Tensor,
    kr: Option<&'a Tensor>,
    v: &'a Tensor,
}

/// Scaled dot-product attention over `heads`; query `i` sits at absolute
/// position `q_offset + i`. Returns the concatenated head outputs and the
/// per-head probability matrices `[t_q, t_k]`.
fn attend(
    cfg: &AttnConfig,
    inp: &HeadInputs<'_>,
    q_offset: usize,
    causal: bool,
) -> (Tensor, Vec<Tensor>) {
    let (tq, tk) = (inp.q.rows(), inp.k.rows());
    let (dh, dr) = (cfg.d_head, cfg.d_rope());
    let scale = cfg.scale();
    let mut out = Tensor::zeros(&[tq, cfg.n_heads * dh]);
    let mut probs = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let mut p = Tensor::zeros(&[tq, tk]);
        for i in 0..tq {
            let visible = if causal {
                (q_offset + i + 1).min(tk)
            } else {
                tk
            };
            let qi = &inp.q.row(i)[h * dh..(h + 1) * dh];
            let logits: Vec<f64> = (0..visible)
                .map(|j| {
                    let kj = &inp.k.row(j)[h * dh..(h + 1) * dh];
                    let mut s: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                    if let (Some(qr), Some(kr)) = (inp.qr, inp.kr) {
                        let qri = &qr.row(i)[h * dr..(h + 1) * dr];
                        s += qri.iter().zip(kr.row(j)).map(|(a, b)| a * b).sum::<f64>();
                    }
                    s * scale
                })
                .collect();
            let w = softmax_slice(&logits);
            let orow = &mut out.row_mut(i)[h * dh..(h + 1) * dh];
            for (j, &pij) in w.iter().enumerate() {
                let vj = &inp.v.row(j)[h * dh..(h + 1) * dh];
                for (o, &vv) in orow.iter_mut().zip(vj) {
                    *o += pij * vv;
                }
            }
            p.row_mut(i)[..visible].copy_from_slice(&w);
        }
        probs.push(p);
    }
    (out, probs)
}

struct HeadGrads {
    dq: Tensor,
    dqr: Option<Tensor>,
    dk: Tensor,
    dkr: Option<Tensor>,
    dv: Tensor,
}

fn attend_backward(
    cfg: &AttnConfig,
    inp: &HeadInputs<'_>,
    probs: &[Tensor],
    d_out: &Tensor,
    causal: bool,
) -> HeadGrads {
    let (tq, tk) = (inp.q.rows(), inp.k.rows());
    let (dh, dr) = (cfg.d_head, cfg.d_rope());
    let scale = cfg.scale();
    let mut g = HeadGrads {
        dq: Tensor::zeros(inp.q.shape()),
        dqr: inp.qr.map(|t| Tensor::zeros(t.shape())),
        dk: Tensor::zeros(inp.k.shape()),
        dkr: inp.kr.map(|t| Tensor::zeros(t.shape())),
        dv: Tensor::zeros(inp.v.shape()),
    };
    for (h, p) in probs.iter().enumerate() {
        let hs = h * dh..(h + 1) * dh;
        let rs = h * dr..(h + 1) * dr;
        for i in 0..tq {
            let visible = if causal { (i + 1).min(tk) } else { tk };
            let pi = &p.row(i)[..visible];
            let doi = &d_out.row(i)[hs.clone()];
            let dp: Vec<f64> = (0..visible)
                .map(|j| {
                    let vj = &inp.v.row(j)[hs.clone()];
                    doi.iter().zip(vj).map(|(a, b)| a * b).sum()
                })
                .collect();
            for (j, &pij) in pi.iter().enumerate() {
                for (dv, &d) in g.dv.row_mut(j)[hs.clone()].iter_mut().zip(doi) {
                    *dv += pij * d;
                }
            }
            let ds = softmax_backward_slice(pi, &dp);
            for (j, &dsij) in ds.iter().enumerate() {
                let w = dsij * scale;
                let kj = inp.k.row(j)[hs.clone()].to_vec();
                let qi = inp.q.row(i)[hs.clone()].to_vec();
                for (a, b) in g.dq.row_mut(i)[hs.clone()].iter_mut().zip(&kj) {
                    *a += w * b;
                }
                for (a, b) in g.dk.row_mut(j)[hs.clone()].iter_mut().zip(&qi) {
                    *a += w * b;
                }
                if let (Some(qr), Some(kr), Some(dqr), Some(dkr)) =
                    (inp.qr, inp.kr, g.dqr.as_mut(), g.dkr.as_mut())
                {
                    for (a, b) in dqr.row_mut(i)[rs.clone()].iter_mut().zip(kr.row(j)) {
                        *a += w * b;
                    }
                    for (a, b) in dkr.row_mut(j).iter_mut().zip(&qr.row(i)[rs.clone()]) {
                        *a += w * b;
                    }
                }
            }
        }
    }
    g
}

/// Result of a forward pass: outputs plus per-head attention probabilities
/// `[new tokens, cached + new tokens]`.
#[derive(Debug, Clone)]
pub struct AttnOutput {
    pub output: Tensor,
    pub probs: Vec<Tensor>,
}

fn check_input(x: &Tensor, cfg: &AttnConfig) -> Result<()> {
    if x.ndim() != 2 || x.cols() != cfg.d_model() {
        return Err(Error::shape(format!(
            "attention expects [t, {}], got {:?}",
            cfg.d_model(),
            x.shape()
        )));
    }
    Ok(())
}

/// Decoding-path forward: appends the new tokens to `cache`, then attends
/// from each new token over every cached token.
pub fn attention_forward(
    x: &Tensor,
    cfg: &AttnConfig,
    weights: &AttnWeights,
    cache: &mut KVCache,
    causal: bool,
) -> Result<AttnOutput> {
    weights.check(cfg)?;
    check_input(x, cfg)?;
    if !cache.matches(cfg) {
        return Err(Error::contract(
            "KV cache mode does not match attention config",
        ));
    }
    let start = cache.len();
    let t = x.rows();
    if start + t > cfg.max_len {
        return Err(Error::Capacity {
            position: start + t - 1,
            max_len: cfg.max_len,
        });
    }

    let (attn, wo) = match (weights, &mut *cache) {
        (
            AttnWeights::Mha(w),
            KVCache::Mha {
                keys,
                values,
                width,
            },
        ) => {
            let q = linear(x, &w.wq, None)?;
            keys.extend_from_slice(linear(x, &w.wk, None)?.data());
            values.extend_from_slice(linear(x, &w.wv, None)?.data());
            let total = keys.len() / *width;
            let k = Tensor::new(&[total, *width], keys.clone())?;
            let v = Tensor::new(&[total, *width], values.clone())?;
            let inp = HeadInputs {
                q: &q,
                qr: None,
                k: &k,
                kr: None,
                v: &v,
            };
            (attend(cfg, &inp, start, causal), &w.wo)
        }
        (
            AttnWeights::Mla(w),
            KVCache::Mla {
                rank,
                d_rope,
                latents,
                rope_keys,
            },
        ) => {
            let q = linear(x, &w.wq, None)?;
            latents.extend_from_slice(linear(x, &w.w_dkv, None)?.data());
            let qr = match &w.rope {
                Some(r) => {
                    let kr = rope_rows(&linear(x, &r.wk, None)?, *d_rope, start, 1.0);
                    rope_keys.extend_from_slice(kr.data());
                    Some(rope_rows(&linear(x, &r.wq, None)?, *d_rope, start, 1.0))
                }
                None => None,
            };
            let total = latents.len() / *rank;
            let c = Tensor::new(&[total, *rank], latents.clone())?;
            let kr = match qr {
                Some(_) => Some(Tensor::new(&[total, *d_rope], rope_keys.clone())?),
                None => None,
            };
            let k = linear(&c, &w.w_uk, None)?;
            let v = linear(&c, &w.w_uv, None)?;
            let inp = HeadInputs {
                q: &q,
                qr: qr.as_ref(),
                k: &k,
                kr: kr.as_ref(),
                v: &v,
            };
            (attend(cfg, &inp, start, causal), &w.wo)
        }
        _ => unreachable!("checked above"),
    };
    let (o, probs) = attn;
    Ok(AttnOutput {
        output: linear(&o, wo, None)?,
        probs,
    })
}

/// Intermediates of a training-path forward (no cache, positions from 0).
#[derive(Debug, Clone)]
pub struct AttnCache {
    x: Tensor,
    causal: bool,
    q: Tensor,
    qr: Option<Tensor>,
    latent: Option<Tensor>,
    k: Tensor,
    kr: Option<Tensor>,
    v: Tensor,
    o: Tensor,
    probs: Vec<Tensor>,
}

impl AttnCache {
    pub fn probs(&self) -> &[Tensor] {
        &self.probs
    }
}

/// Training-path forward over a whole sequence, keeping what backward needs.
pub fn attention_train_forward(
    x: &Tensor,
    cfg: &AttnConfig,
    weights: &AttnWeights,
    causal: bool,
) -> Result<(Tensor, AttnCache)> {
    weights.check(cfg)?;
    check_input(x, cfg)?;
    if x.rows() > cfg.max_len {
        return Err(Error::Capacity {
            position: x.rows() - 1,
            max_len: cfg.max_len,
        });
    }
    let dr = cfg.d_rope();
    let (q, qr, latent, k, kr, v, wo) = match weights {
        AttnWeights::Mha(w) => (
            linear(x, &w.wq, None)?,
            None,
            None,
            linear(x, &w.wk, None)?,
            None,
            linear(x, &w.wv, None)?,
            &w.wo,
        ),
        AttnWeights::Mla(w) => {
            let c = linear(x, &w.w_dkv, None)?;
            let (qr, kr) = match &w.rope {
                Some(r) => (
                    Some(rope_rows(&linear(x, &r.wq, None)?, dr, 0, 1.0)),
                    Some(rope_rows(&linear(x, &r.wk, None)?, dr, 0, 1.0)),
                ),
                None => (None, None),
            };
            (
                linear(x, &w.wq, None)?,
                qr,
                Some(c.clone()),
                linear(&c, &w.w_uk, None)?,
                kr,
                linear(&c, &w.w_uv, None)?,
                &w.wo,
            )
        }
    };
    let inp = HeadInputs {
        q: &q,
        qr: qr.as_ref(),
        k: &k,
        kr: kr.as_ref(),
        v: &v,
    };
    let (o, probs) = attend(cfg, &inp, 0, causal);
    let y = linear(&o, wo, None)?;
    Ok((
        y,
        AttnCache {
            x: x.clone(),
            causal,
            q,
            qr,
            latent,
            k,
            kr,
            v,
            o,
            probs,
        },
    ))
}

/// Accumulates weight gradients into `grads` and returns `dL/dx`.
pub fn attention_backward(
    cfg: &AttnConfig,
    weights: &AttnWeights,
    cache: &AttnCache,
    dy: &Tensor,
    grads: &mut AttnWeights,
) -> Result<Tensor> {
    let dr = cfg.d_rope();
    let x = &cache.x;
    let wo = match weights {
        AttnWeights::Mha(w) => &w.wo,
        AttnWeights::Mla(w) => &w.wo,
    };
    let (d_o, dwo, _) = linear_backward(&cache.o, wo, dy)?;
    let inp = HeadInputs {
        q: &cache.q,
        qr: cache.qr.as_ref(),
        k: &cache.k,
        kr: cache.kr.as_ref(),
        v: &cache.v,
    };
    let hg = attend_backward(cfg, &inp, &cache.probs, &d_o, cache.causal);

    match (weights, grads) {
        (AttnWeights::Mha(w), AttnWeights::Mha(g)) => {
            g.wo.add_assign(&dwo)?;
            let (mut dx, dwq, _) = linear_backward(x, &w.wq, &hg.dq)?;
            let (dxk, dwk, _) = linear_backward(x, &w.wk, &hg.dk)?;
            let (dxv, dwv, _) = linear_backward(x, &w.wv, &hg.dv)?;
            g.wq.add_assign(&dwq)?;
            g.wk.add_assign(&dwk)?;
            g.wv.add_assign(&dwv)?;
            dx.add_assign(&dxk)?;
            dx.add_assign(&dxv)?;
            Ok(dx)
        }
        (AttnWeights::Mla(w), AttnWeights::Mla(g)) => {
            g.wo.add_assign(&dwo)?;
            let c = cache.latent.as_ref().expect("MLA cache holds latents");
            let (mut dc, dwuk, _) = linear_backward(c, &w.w_uk, &hg.dk)?;
            let (dc_v, dwuv, _) = linear_backward(c, &w.w_uv, &hg.dv)?;
            dc.add_assign(&dc_v)?;
            g.w_uk.add_assign(&dwuk)?;
            g.w_uv.add_assign(&dwuv)?;
            let (mut dx, dwdkv, _) = linear_backward(x, &w.w_dkv, &dc)?;
            g.w_dkv.add_assign(&dwdkv)?;
            let (dxq, dwq, _) = linear_backward(x, &w.wq, &hg.dq)?;
            g.wq.add_assign(&dwq)?;
            dx.add_assign(&dxq)?;
            if let (Some(r), Some(gr), Some(dqr), Some(dkr)) =
                (&w.rope, g.rope.as_mut(), &hg.dqr, &hg.dkr)
            {
                let dqr_pre = rope_rows(dqr, dr, 0, -1.0);
                let dkr_pre = rope_rows(dkr, dr, 0, -1.0);
                let (dxqr, dwqr, _) = linear_backward(x, &r.wq, &dqr_pre)?;
                let (dxkr, dwkr, _) = linear_backward(x, &r.wk, &dkr_pre)?;
                gr.wq.add_assign(&dwqr)?;
                gr.wk.add_assign(&dwkr)?;
                dx.add_assign(&dxqr)?;
                dx.add_assign(&dxkr)?;
            }
            Ok(dx)
        }
        _ => Err(Error::contract(
            "gradient buffer does not match attention mode",
        )),
    }
}
