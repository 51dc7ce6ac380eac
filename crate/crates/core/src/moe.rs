//! Mixture-of-experts feed-forward: shared experts that see every token,
//! routed experts picked top-K per token, a per-expert selection bias nudged
//! toward balanced load, and the auxiliary balance loss.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adaptor::{Mlp, MlpCache};
use crate::error::{Error, Result};
use crate::numcore::{linear, softmax_backward_slice, softmax_slice, Params, Tensor, INIT_STD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Routing {
    Softmax,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MoEConfig {
    pub n_routed: usize,
    pub n_shared: usize,
    pub top_k: usize,
    pub routing: Routing,
    pub bias_enabled: bool,
    /// Bias correction step γ.
    pub bias_step: f64,
    /// Auxiliary balance loss weight α.
    pub aux_weight: f64,
    pub d_model: usize,
    pub d_expert_hidden: usize,
}

impl MoEConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 || self.top_k > self.n_routed {
            return Err(Error::Config(format!(
                "top_k {} must lie in [1, {}]",
                self.top_k, self.n_routed
            )));
        }
        if !(self.bias_step >= 0.0) || !(self.aux_weight >= 0.0) {
            return Err(Error::Config(
                "bias step and aux weight must be >= 0".into(),
            ));
        }
        if self.d_model == 0 || self.d_expert_hidden == 0 {
            return Err(Error::Config("expert dims must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-expert additive selection bias, persistent across steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertBias {
    pub b: Vec<f64>,
}

impl ExpertBias {
    pub fn zeros(n_routed: usize) -> Self {
        Self {
            b: vec![0.0; n_routed],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision {
    /// Affinity of every routed expert, before bias.
    pub affinities: Vec<f64>,
    /// Selected expert ids, ascending.
    pub selected: Vec<usize>,
    /// Gate weight of each selected expert, aligned with `selected`.
    pub gates: Vec<f64>,
    pub load_counts: Vec<usize>,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn affinities(z: &[f64], routing: Routing) -> Vec<f64> {
    match routing {
        Routing::Softmax => softmax_slice(z),
        Routing::Sigmoid => z.iter().map(|&v| sigmoid(v)).collect(),
    }
}

/// Top-`k` ids of `s + b` (ties to the lower id), returned ascending.
fn select_top_k(s: &[f64], bias: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&i, &j| {
        (s[j] + bias[j])
            .partial_cmp(&(s[i] + bias[i]))
            .expect("finite scores")
            .then(i.cmp(&j))
    });
    let mut sel = order[..k].to_vec();
    sel.sort_unstable();
    sel
}

fn gates_for(s: &[f64], selected: &[usize], routing: Routing) -> Vec<f64> {
    let raw: Vec<f64> = selected.iter().map(|&i| s[i]).collect();
    match routing {
        Routing::Softmax => raw,
        Routing::Sigmoid => {
            let total: f64 = raw.iter().sum();
            raw.into_iter().map(|g| g / total).collect()
        }
    }
}

fn decision(s: Vec<f64>, selected: Vec<usize>, routing: Routing) -> RoutingDecision {
    let gates = gates_for(&s, &selected, routing);
    let mut load_counts = vec![0; s.len()];
    for &e in &selected {
        load_counts[e] += 1;
    }
    RoutingDecision {
        affinities: s,
        selected,
        gates,
        load_counts,
    }
}

/// Routes from precomputed gate logits.
pub fn route_logits(z: &[f64], bias: &ExpertBias, cfg: &MoEConfig) -> Result<RoutingDecision> {
    cfg.validate()?;
    if z.len() != cfg.n_routed || bias.b.len() != cfg.n_routed {
        return Err(Error::shape(format!(
            "routing over {} experts got {} logits and {} biases",
            cfg.n_routed,
            z.len(),
            bias.b.len()
        )));
    }
    let s = affinities(z, cfg.routing);
    let selected = select_top_k(&s, &bias.b, cfg.top_k);
    Ok(decision(s, selected, cfg.routing))
}

/// Scores `h` against every routed expert and picks the top-K.
///
/// The bias only shifts which experts are selected; gate values come from
/// the unbiased affinities.
pub fn route(
    h: &Tensor,
    w_gate: &Tensor,
    bias: &ExpertBias,
    cfg: &MoEConfig,
) -> Result<RoutingDecision> {
    if w_gate.shape() != [cfg.n_routed, cfg.d_model] || h.numel() != cfg.d_model {
        return Err(Error::shape(format!(
            "gate {:?} and hidden {:?} do not match [{}, {}]",
            w_gate.shape(),
            h.shape(),
            cfg.n_routed,
            cfg.d_model
        )));
    }
    let z: Vec<f64> = (0..cfg.n_routed)
        .map(|e| w_gate.row(e).iter().zip(h.data()).map(|(a, b)| a * b).sum())
        .collect();
    route_logits(&z, bias, cfg)
}

/// `Σ shared(h) + Σ gate_k · routed_{selected_k}(h)` for one token.
pub fn moe_forward(
    h: &Tensor,
    shared: &[Mlp],
    routed: &[Mlp],
    decision: &RoutingDecision,
) -> Result<Tensor> {
    if decision.selected.iter().any(|&e| e >= routed.len()) {
        return Err(Error::contract("routing decision names a missing expert"));
    }
    let x = h.clone().reshape(&[1, h.numel()])?;
    let mut y = Tensor::zeros(&[1, h.numel()]);
    for expert in shared {
        y.add_assign(&expert.forward(&x)?.0)?;
    }
    for (&e, &g) in decision.selected.iter().zip(&decision.gates) {
        y.axpy(g, &routed[e].forward(&x)?.0)?;
    }
    y.reshape(&[h.numel()])
}

/// Sign-rule correction: overloaded experts (above mean load) step down by γ,
/// underloaded ones step up, experts exactly at the mean stay put.
pub fn update_bias(bias: &ExpertBias, load_counts: &[usize], step: f64) -> Result<ExpertBias> {
    if !(step >= 0.0) {
        return Err(Error::contract(format!("bias step {step} must be >= 0")));
    }
    if load_counts.len() != bias.b.len() {
        return Err(Error::shape(format!(
            "{} load counts for {} experts",
            load_counts.len(),
            bias.b.len()
        )));
    }
    let n = load_counts.len() as u128;
    let total: u128 = load_counts.iter().map(|&c| c as u128).sum();
    let b = bias
        .b
        .iter()
        .zip(load_counts)
        .map(|(&b, &c)| match (c as u128 * n).cmp(&total) {
            std::cmp::Ordering::Greater => b - step,
            std::cmp::Ordering::Less => b + step,
            std::cmp::Ordering::Equal => b,
        })
        .collect();
    Ok(ExpertBias { b })
}

/// `α · n_routed · Σ f_i · P_i`.
pub fn aux_balance_loss(
    load_fractions: &[f64],
    mean_gate_probs: &[f64],
    aux_weight: f64,
    n_routed: usize,
) -> Result<f64> {
    if load_fractions.len() != n_routed || mean_gate_probs.len() != n_routed {
        return Err(Error::shape(
            "aux loss vectors must have one entry per routed expert",
        ));
    }
    if load_fractions
        .iter()
        .chain(mean_gate_probs)
        .any(|&v| v < 0.0)
    {
        return Err(Error::contract("aux loss inputs must be nonnegative"));
    }
    let dot: f64 = load_fractions
        .iter()
        .zip(mean_gate_probs)
        .map(|(f, p)| f * p)
        .sum();
    Ok(aux_weight * n_routed as f64 * dot)
}

/// Gate matrix plus expert MLPs of one MoE layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeLayer {
    /// `[n_routed, d_model]`
    pub gate: Tensor,
    pub shared: Vec<Mlp>,
    pub routed: Vec<Mlp>,
}

impl MoeLayer {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, cfg: &MoEConfig) -> Self {
        let (d, hid) = (cfg.d_model, cfg.d_expert_hidden);
        Self {
            gate: Tensor::randn(rng, &[cfg.n_routed, d], INIT_STD),
            shared: (0..cfg.n_shared)
                .map(|_| Mlp::init(rng, d, hid, d))
                .collect(),
            routed: (0..cfg.n_routed)
                .map(|_| Mlp::init(rng, d, hid, d))
                .collect(),
        }
    }
}

impl Params for MoeLayer {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Tensor)) {
        f(&self.gate);
        self.shared.visit(f);
        self.routed.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        f(&mut self.gate);
        self.shared.visit_mut(f);
        self.routed.visit_mut(f);
    }
}

/// Intermediates of a batched MoE forward.
#[derive(Debug, Clone)]
pub struct MoeCache {
    x: Tensor,
    pub decisions: Vec<RoutingDecision>,
    shared: Vec<MlpCache>,
    /// Per routed expert: token rows it processed, its cache and its outputs.
    routed: Vec<Option<(Vec<usize>, MlpCache, Tensor)>>,
    /// Load counts summed over the batch.
    pub load_counts: Vec<usize>,
    /// Auxiliary balance loss of this batch (already weighted by α).
    pub aux_loss: f64,
}

fn normalized_affinities(s: &[f64], routing: Routing) -> Vec<f64> {
    match routing {
        Routing::Softmax => s.to_vec(),
        Routing::Sigmoid => {
            let total: f64 = s.iter().sum();
            s.iter().map(|v| v / total).collect()
        }
    }
}

/// Batched forward over token rows `x: [t, d_model]`.
///
/// With `frozen` set, each token reuses the given expert selection instead of
/// re-ranking; gates are still recomputed from the current affinities, so
/// the function stays differentiable for gradient checks.
pub fn moe_layer_forward(
    x: &Tensor,
    layer: &MoeLayer,
    bias: &ExpertBias,
    cfg: &MoEConfig,
    frozen: Option<&[Vec<usize>]>,
) -> Result<(Tensor, MoeCache)> {
    cfg.validate()?;
    let (t, d) = x.dims2()?;
    if d != cfg.d_model || layer.routed.len() != cfg.n_routed || layer.shared.len() != cfg.n_shared
    {
        return Err(Error::shape("MoE layer does not match its config"));
    }
    if let Some(f) = frozen {
        if f.len() != t {
            return Err(Error::contract("frozen routing must cover every token"));
        }
    }
    let logits = linear(x, &layer.gate, None)?;
    let mut decisions = Vec::with_capacity(t);
    for i in 0..t {
        let dec = match frozen {
            None => route_logits(logits.row(i), bias, cfg)?,
            Some(f) => {
                let sel = f[i].clone();
                if sel.len() != cfg.top_k || sel.iter().any(|&e| e >= cfg.n_routed) {
                    return Err(Error::contract("frozen selection is not a valid top-K set"));
                }
                decision(affinities(logits.row(i), cfg.routing), sel, cfg.routing)
            }
        };
        decisions.push(dec);
    }

    let mut y = Tensor::zeros(&[t, d]);
    let mut shared = Vec::with_capacity(cfg.n_shared);
    for expert in &layer.shared {
        let (out, cache) = expert.forward(x)?;
        y.add_assign(&out)?;
        shared.push(cache);
    }

    let mut routed = Vec::with_capacity(cfg.n_routed);
    for (e, expert) in layer.routed.iter().enumerate() {
        let rows: Vec<usize> = (0..t)
            .filter(|&i| decisions[i].selected.contains(&e))
            .collect();
        if rows.is_empty() {
            routed.push(None);
            continue;
        }
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in &rows {
            data.extend_from_slice(x.row(r));
        }
        let xe = Tensor::new(&[rows.len(), d], data)?;
        let (out, cache) = expert.forward(&xe)?;
        for (k, &r) in rows.iter().enumerate() {
            let dec = &decisions[r];
            let slot = dec
                .selected
                .iter()
                .position(|&s| s == e)
                .expect("expert selected");
            let g = dec.gates[slot];
            for (yv, &ov) in y.row_mut(r).iter_mut().zip(out.row(k)) {
                *yv += g * ov;
            }
        }
        routed.push(Some((rows, cache, out)));
    }

    let mut load_counts = vec![0usize; cfg.n_routed];
    let mut mean_probs = vec![0.0; cfg.n_routed];
    for dec in &decisions {
        for (acc, c) in load_counts.iter_mut().zip(&dec.load_counts) {
            *acc += c;
        }
        for (acc, p) in mean_probs
            .iter_mut()
            .zip(normalized_affinities(&dec.affinities, cfg.routing))
        {
            *acc += p / t as f64;
        }
    }
    let fractions: Vec<f64> = load_counts.iter().map(|&c| c as f64 / t as f64).collect();
    let aux_loss = aux_balance_loss(&fractions, &mean_probs, cfg.aux_weight, cfg.n_routed)?;

    Ok((
        y,
        MoeCache {
            x: x.clone(),
            decisions,
            shared,
            routed,
            load_counts,
            aux_loss,
        },
    ))
}

/// Backward of [`moe_layer_forward`] for upstream `dy`, with `aux_scale`
/// multiplying the auxiliary loss term (0 to ignore it). Selections are
/// treated as constants.
pub fn moe_layer_backward(
    layer: &MoeLayer,
    cfg: &MoEConfig,
    cache: &MoeCache,
    dy: &Tensor,
    aux_scale: f64,
    grads: &mut MoeLayer,
) -> Result<Tensor> {
    let x = &cache.x;
    let (t, d) = x.dims2()?;
    let mut dx = Tensor::zeros(&[t, d]);

    for ((expert, c), g) in layer
        .shared
        .iter()
        .zip(&cache.shared)
        .zip(grads.shared.iter_mut())
    {
        dx.add_assign(&expert.backward(c, dy, g)?)?;
    }

    // d loss / d gate, per token and selected slot.
    let mut dgates: Vec<Vec<f64>> = cache
        .decisions
        .iter()
        .map(|dec| vec![0.0; dec.selected.len()])
        .collect();
    for (e, entry) in cache.routed.iter().enumerate() {
        let Some((rows, mcache, out)) = entry else {
            continue;
        };
        let mut dye = Tensor::zeros(&[rows.len(), d]);
        for (k, &r) in rows.iter().enumerate() {
            let dec = &cache.decisions[r];
            let slot = dec
                .selected
                .iter()
                .position(|&s| s == e)
                .expect("expert selected");
            let g = dec.gates[slot];
            for (dv, &u) in dye.row_mut(k).iter_mut().zip(dy.row(r)) {
                *dv = g * u;
            }
            dgates[r][slot] = dy.row(r).iter().zip(out.row(k)).map(|(a, b)| a * b).sum();
        }
        let dxe = layer.routed[e].backward(mcache, &dye, &mut grads.routed[e])?;
        for (k, &r) in rows.iter().enumerate() {
            for (a, &b) in dx.row_mut(r).iter_mut().zip(dxe.row(k)) {
                *a += b;
            }
        }
    }

    // Aux loss: α·n·Σ_i f_i·P_i with P_i = mean_t ŝ_{t,i}; f is constant.
    let n = cfg.n_routed as f64;
    let aux_coef: Vec<f64> = cache
        .load_counts
        .iter()
        .map(|&c| aux_scale * cfg.aux_weight * n * (c as f64 / t as f64) / t as f64)
        .collect();

    let mut dz = Tensor::zeros(&[t, cfg.n_routed]);
    for (r, dec) in cache.decisions.iter().enumerate() {
        let s = &dec.affinities;
        let mut ds = vec![0.0; cfg.n_routed];
        match cfg.routing {
            Routing::Softmax => {
                for (slot, &e) in dec.selected.iter().enumerate() {
                    ds[e] += dgates[r][slot];
                }
                for (a, &c) in ds.iter_mut().zip(&aux_coef) {
                    *a += c;
                }
                dz.row_mut(r)
                    .copy_from_slice(&softmax_backward_slice(s, &ds));
            }
            Routing::Sigmoid => {
                let sel_total: f64 = dec.selected.iter().map(|&e| s[e]).sum();
                let inner: f64 = dgates[r].iter().zip(&dec.gates).map(|(a, b)| a * b).sum();
                for (slot, &e) in dec.selected.iter().enumerate() {
                    ds[e] += (dgates[r][slot] - inner) / sel_total;
                }
                let total: f64 = s.iter().sum();
                let inner_aux: f64 = aux_coef.iter().zip(s).map(|(c, v)| c * v / total).sum();
                for (a, &c) in ds.iter_mut().zip(&aux_coef) {
                    *a += (c - inner_aux) / total;
                }
                for ((z, &d), &v) in dz.row_mut(r).iter_mut().zip(&ds).zip(s) {
                    *z = d * v * (1.0 - v);
                }
            }
        }
    }
    // logits = x · gateᵀ
    grads.gate.add_assign(&crate::numcore::matmul_tn(&dz, x)?)?;
    dx.add_assign(&crate::numcore::matmul(&dz, &layer.gate)?)?;
    Ok(dx)
}

/// Per-step load counts of a synthetic routing stream with bias correction.
///
/// Each step draws `tokens_per_step` logit vectors from `N(0, 1)` with
/// `margin` added to expert 0, routes them, and applies [`update_bias`] with
/// `cfg.bias_step` when `cfg.bias_enabled`.
pub fn balance_stream<R: Rng + ?Sized>(
    rng: &mut R,
    cfg: &MoEConfig,
    steps: usize,
    tokens_per_step: usize,
    margin: f64,
) -> Result<(Vec<Vec<usize>>, ExpertBias)> {
    let mut bias = ExpertBias::zeros(cfg.n_routed);
    let mut history = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut loads = vec![0usize; cfg.n_routed];
        for _ in 0..tokens_per_step {
            let mut z: Vec<f64> = (0..cfg.n_routed)
                .map(|_| StandardNormal.sample(rng))
                .collect();
            z[0] += margin;
            let dec = route_logits(&z, &bias, cfg)?;
            for (a, c) in loads.iter_mut().zip(&dec.load_counts) {
                *a += c;
            }
        }
        if cfg.bias_enabled {
            bias = update_bias(&bias, &loads, cfg.bias_step)?;
        }
        history.push(loads);
    }
    Ok((history, bias))
}

/// Coefficient of variation (population std / mean) of a load vector.
pub fn load_cv(loads: &[usize]) -> f64 {
    let n = loads.len() as f64;
    let mean = loads.iter().sum::<usize>() as f64 / n;
    if mean == 0.0 {
        return 0.0;
    }
    let var = loads
        .iter()
        .map(|&c| (c as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    var.sqrt() / mean
}
