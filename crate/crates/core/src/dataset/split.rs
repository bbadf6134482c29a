use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{GraphBundle, Splits};
use crate::error::{Error, Result};
use crate::numerics::CsrMatrix;

/// Residual tolerance for the push-based PageRank approximation.
pub const PPR_TOLERANCE: f64 = 1e-6;

/// Parameters of the localized (biased) training-set sampler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub per_class_train: usize,
    pub val_total: usize,
    pub test_total: usize,
    pub bias_seed: u64,
    /// Teleport (restart) probability of the personalized PageRank walk.
    pub ppr_teleport: f64,
}

impl SplitSpec {
    /// Planetoid-style sizes: 20 training nodes per class, 500 val, 1000 test.
    pub fn planetoid(bias_seed: u64) -> Self {
        Self {
            per_class_train: 20,
            val_total: 500,
            test_total: 1000,
            bias_seed,
            ppr_teleport: 0.15,
        }
    }
}

/// Approximate personalized PageRank from `seed` by residual pushing.
///
/// Invariant maintained by the push loop: `p + PPR(r) = PPR(e_seed)`; pushing
/// stops once every residual satisfies `r[u] < tol · deg(u)`. Dangling nodes
/// keep their whole residual.
pub fn ppr_push(adj: &CsrMatrix, seed: usize, teleport: f64, tol: f64) -> Vec<f64> {
    let n = adj.n();
    let degree: Vec<f64> = (0..n).map(|u| adj.row(u).1.iter().sum()).collect();
    let mut p = vec![0.0; n];
    let mut r = vec![0.0; n];
    let mut queued = vec![false; n];
    let mut queue = VecDeque::new();
    r[seed] = 1.0;
    queue.push_back(seed);
    queued[seed] = true;

    while let Some(u) = queue.pop_front() {
        queued[u] = false;
        let ru = r[u];
        if degree[u] == 0.0 {
            p[u] += ru;
            r[u] = 0.0;
            continue;
        }
        if ru < tol * degree[u] {
            continue;
        }
        p[u] += teleport * ru;
        r[u] = 0.0;
        let share = (1.0 - teleport) * ru / degree[u];
        let (cols, vals) = adj.row(u);
        for (&v, &w) in cols.iter().zip(vals) {
            r[v] += share * w;
            if !queued[v] && (degree[v] == 0.0 || r[v] >= tol * degree[v]) {
                queued[v] = true;
                queue.push_back(v);
            }
        }
    }
    p
}

/// Draws a localized training set plus uniformly random val/test sets.
///
/// A uniformly random seed node is drawn from `spec.bias_seed`; nodes are
/// ranked by personalized PageRank from that seed (ties broken by a seeded
/// random permutation) and training nodes are taken greedily from the ranking
/// until every class has `per_class_train` members. Validation and test nodes
/// are then sampled uniformly from the remainder.
pub fn biased_split(g: &GraphBundle, spec: &SplitSpec) -> Result<Splits> {
    let n = g.num_nodes();
    if n == 0 {
        return Err(Error::InvalidArgument("cannot split an empty graph".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.bias_seed);
    let seed_node = rng.random_range(0..n);
    biased_split_from(g, spec, seed_node, &mut rng)
}

/// [`biased_split`] with an explicit PageRank seed node.
pub fn biased_split_with_seed_node(
    g: &GraphBundle,
    spec: &SplitSpec,
    seed_node: usize,
) -> Result<Splits> {
    if seed_node >= g.num_nodes() {
        return Err(Error::InvalidArgument(format!(
            "seed node {seed_node} out of range"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.bias_seed);
    biased_split_from(g, spec, seed_node, &mut rng)
}

fn biased_split_from(
    g: &GraphBundle,
    spec: &SplitSpec,
    seed_node: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Splits> {
    let n = g.num_nodes();
    check_feasible(g, spec)?;

    let scores = ppr_push(&g.adjacency, seed_node, spec.ppr_teleport, PPR_TOLERANCE);
    let mut tiebreak: Vec<usize> = (0..n).collect();
    tiebreak.shuffle(rng);
    let mut key = vec![0usize; n];
    for (pos, &node) in tiebreak.iter().enumerate() {
        key[node] = pos;
    }
    let mut ranking: Vec<usize> = (0..n).collect();
    ranking.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(key[a].cmp(&key[b])));

    let mut per_class = vec![0usize; g.num_classes];
    let mut train = vec![false; n];
    for &v in &ranking {
        let c = g.labels[v];
        if per_class[c] < spec.per_class_train {
            per_class[c] += 1;
            train[v] = true;
        }
    }

    let mut rest: Vec<usize> = (0..n).filter(|&v| !train[v]).collect();
    rest.shuffle(rng);
    let mut val = vec![false; n];
    let mut test = vec![false; n];
    for &v in &rest[..spec.val_total] {
        val[v] = true;
    }
    for &v in &rest[spec.val_total..spec.val_total + spec.test_total] {
        test[v] = true;
    }
    Ok(Splits { train, val, test })
}

fn check_feasible(g: &GraphBundle, spec: &SplitSpec) -> Result<()> {
    if !(spec.ppr_teleport > 0.0 && spec.ppr_teleport <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "ppr_teleport {} outside (0, 1]",
            spec.ppr_teleport
        )));
    }
    let mut class_sizes = vec![0usize; g.num_classes];
    for &l in &g.labels {
        class_sizes[l] += 1;
    }
    if let Some((c, &size)) = class_sizes
        .iter()
        .enumerate()
        .find(|(_, &s)| s < spec.per_class_train)
    {
        return Err(Error::InvalidArgument(format!(
            "class {c} has {size} nodes, fewer than per_class_train {}",
            spec.per_class_train
        )));
    }
    let need = spec.per_class_train * g.num_classes + spec.val_total + spec.test_total;
    if need > g.num_nodes() {
        return Err(Error::InvalidArgument(format!(
            "split needs {need} nodes, graph has {}",
            g.num_nodes()
        )));
    }
    Ok(())
}
