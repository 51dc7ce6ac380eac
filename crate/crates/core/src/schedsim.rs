//! Training-infrastructure balancing at desk scale: spreading image tiles
//! over data-parallel ranks and cutting a layer stack into pipeline stages.

use crate::error::{Error, Result};
use crate::tiling::{select_resolution, ResolutionCandidate};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankAssignment {
    /// Sample indices per rank, in assignment order.
    pub assignments: Vec<Vec<usize>>,
    pub loads: Vec<u64>,
}

impl RankAssignment {
    pub fn max_load(&self) -> u64 {
        self.loads.iter().copied().max().unwrap_or(0)
    }
}

/// Longest-processing-time greedy: largest samples first (ties by index), each
/// onto the least-loaded rank (ties by rank id).
pub fn balance_tiles(tile_counts: &[u64], ranks: usize) -> Result<RankAssignment> {
    if ranks == 0 {
        return Err(Error::contract("need at least one rank"));
    }
    if tile_counts.is_empty() || tile_counts.contains(&0) {
        return Err(Error::contract("tile counts must be nonempty and positive"));
    }
    let mut order: Vec<usize> = (0..tile_counts.len()).collect();
    // Stable sort keeps lower indices first among equal counts.
    order.sort_by(|&a, &b| tile_counts[b].cmp(&tile_counts[a]));

    let mut assignments = vec![Vec::new(); ranks];
    let mut loads = vec![0u64; ranks];
    for i in order {
        let r = (0..ranks)
            .min_by_key(|&r| (loads[r], r))
            .expect("ranks >= 1");
        loads[r] += tile_counts[i];
        assignments[r].push(i);
    }
    Ok(RankAssignment { assignments, loads })
}

/// Tiles per image (thumbnail plus local tiles) for a batch of `(h, w)` sizes.
pub fn tile_counts_for(
    sizes: &[(usize, usize)],
    candidates: &[ResolutionCandidate],
) -> Result<Vec<u64>> {
    sizes
        .iter()
        .map(|&(h, w)| select_resolution(h, w, candidates).map(|p| p.tile_count() as u64))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct StagePartition {
    /// Layer counts before each split: stage `s` spans
    /// `boundaries[s-1]..boundaries[s]` (with implicit 0 and N at the ends).
    pub boundaries: Vec<usize>,
    pub stage_costs: Vec<f64>,
}

impl StagePartition {
    pub fn max_cost(&self) -> f64 {
        self.stage_costs
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// `(start, end)` layer range of every stage.
    pub fn ranges(&self, n_layers: usize) -> Vec<(usize, usize)> {
        let mut edges = vec![0];
        edges.extend(&self.boundaries);
        edges.push(n_layers);
        edges.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

/// Left-to-right sum of `costs[a..b]`; every caller sums ranges the same way so
/// equal partitions compare exactly.
pub fn range_cost(costs: &[f64], a: usize, b: usize) -> f64 {
    costs[a..b].iter().sum()
}

/// Contiguous split into `stages` non-empty stages minimizing the largest
/// stage cost; among optimal splits the lexicographically earliest
/// boundaries win.
pub fn split_pipeline_stages(layer_costs: &[f64], stages: usize) -> Result<StagePartition> {
    let n = layer_costs.len();
    if stages == 0 || stages > n {
        return Err(Error::contract(format!(
            "cannot split {n} layers into {stages} stages"
        )));
    }
    if layer_costs.iter().any(|&c| !(c > 0.0) || !c.is_finite()) {
        return Err(Error::contract("layer costs must be positive and finite"));
    }

    // best[s][i]: minimal max cost of splitting layers i..n into s stages.
    let mut best = vec![vec![f64::INFINITY; n + 1]; stages + 1];
    for i in 0..n {
        best[1][i] = range_cost(layer_costs, i, n);
    }
    for s in 2..=stages {
        for i in 0..=n - s {
            let mut v = f64::INFINITY;
            for j in i + 1..=n - s + 1 {
                v = v.min(range_cost(layer_costs, i, j).max(best[s - 1][j]));
            }
            best[s][i] = v;
        }
    }
    let target = best[stages][0];

    // Earliest feasible cut at every step keeps the overall max at `target`.
    let mut boundaries = Vec::with_capacity(stages - 1);
    let mut start = 0;
    for left in (2..=stages).rev() {
        let cut = (start + 1..=n - left + 1)
            .find(|&j| range_cost(layer_costs, start, j) <= target && best[left - 1][j] <= target)
            .expect("optimal value is attainable");
        boundaries.push(cut);
        start = cut;
    }

    let mut edges = vec![0];
    edges.extend(&boundaries);
    edges.push(n);
    let stage_costs = edges
        .windows(2)
        .map(|w| range_cost(layer_costs, w[0], w[1]))
        .collect();
    Ok(StagePartition {
        boundaries,
        stage_costs,
    })
}
