//! Graph bundles: ingestion, normalization, biased splits, synthetic graphs,
//! and PCA feature reduction.

mod bundle;
mod split;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use bundle::{
    adjacency_from_edges, load_bundle, load_split_ids, save_bundle, save_split_ids, BundleMeta,
    GraphBundle, SplitIds, Splits,
};
pub use bundle::{read_json, write_json};
pub use split::{biased_split, biased_split_with_seed_node, ppr_push, SplitSpec, PPR_TOLERANCE};

use crate::error::{Error, Result};
use crate::numerics::{pca_fit, CsrMatrix, DenseMatrix, PcaModel};

/// Symmetric normalization with self-loops: `D̃^{-1/2} (A + I) D̃^{-1/2}`.
pub fn normalize_adjacency(a: &CsrMatrix) -> CsrMatrix {
    let n = a.n();
    let deg: Vec<f64> = (0..n)
        .map(|i| 1.0 + a.row(i).1.iter().sum::<f64>())
        .collect();
    let inv_sqrt: Vec<f64> = deg.iter().map(|d| 1.0 / d.sqrt()).collect();
    let mut trip = Vec::with_capacity(a.nnz() + n);
    for i in 0..n {
        trip.push((i, i, inv_sqrt[i] * inv_sqrt[i]));
        let (cols, vals) = a.row(i);
        for (&j, &v) in cols.iter().zip(vals) {
            if j != i {
                trip.push((i, j, inv_sqrt[i] * v * inv_sqrt[j]));
            }
        }
    }
    CsrMatrix::from_triplets(n, trip).expect("indices come from a valid matrix")
}

/// Planted-partition graph generator parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub blocks: usize,
    pub nodes_per_block: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub feature_dim: usize,
    pub seed: u64,
}

/// Samples a planted-partition graph where node `i` belongs to block
/// `i / nodes_per_block`, which is also its class. Features are the class
/// mean (standard normal per coordinate) plus unit Gaussian noise.
pub fn synth_graph(spec: &SynthSpec) -> Result<GraphBundle> {
    if spec.blocks == 0 || spec.nodes_per_block == 0 || spec.feature_dim == 0 {
        return Err(Error::InvalidArgument(
            "blocks, nodes_per_block and feature_dim must be positive".into(),
        ));
    }
    for (name, p) in [("p_in", spec.p_in), ("p_out", spec.p_out)] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!(
                "{name} = {p} outside [0, 1]"
            )));
        }
    }
    let n = spec.blocks * spec.nodes_per_block;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let labels: Vec<usize> = (0..n).map(|i| i / spec.nodes_per_block).collect();

    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            let p = if labels[u] == labels[v] {
                spec.p_in
            } else {
                spec.p_out
            };
            if rng.random_bool(p) {
                edges.push((u, v));
            }
        }
    }

    let means: Vec<Vec<f64>> = (0..spec.blocks)
        .map(|_| {
            (0..spec.feature_dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect()
        })
        .collect();
    let features = DenseMatrix::from_fn(n, spec.feature_dim, |i, j| {
        let noise: f64 = StandardNormal.sample(&mut rng);
        means[labels[i]][j] + noise
    });

    Ok(GraphBundle {
        name: format!(
            "sbm-{}x{}-s{}",
            spec.blocks, spec.nodes_per_block, spec.seed
        ),
        num_classes: spec.blocks,
        adjacency: adjacency_from_edges(n, edges)?,
        features,
        labels,
        splits: None,
    })
}

/// Replaces node features by their projection on the top-`k` principal
/// components, fit over all nodes.
pub fn reduce_features(g: &GraphBundle, k: usize) -> Result<(GraphBundle, PcaModel)> {
    if k > g.feature_dim() {
        return Err(Error::InvalidArgument(format!(
            "cannot reduce {} features to {k}",
            g.feature_dim()
        )));
    }
    let pca = pca_fit(&g.features, k)?;
    let reduced = pca.transform(&g.features)?;
    let mut out = g.clone();
    out.features = reduced;
    Ok((out, pca))
}
