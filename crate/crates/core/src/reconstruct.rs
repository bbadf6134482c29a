//! Test-time feature replacement with the class representative `h* = f_θ(Y)`,
//! accuracy evaluation and embedding export.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::GraphBundle;
use crate::error::{Error, Result};
use crate::neuralnet::{one_hot, Mlp};
use crate::numerics::{argmax, dist2, DenseMatrix};
use crate::sgc::{propagate, NodeAffineSystem, SgcModel};

/// `h* = f_θ(one-hot(class_id))`.
pub fn class_representative(
    controller: &Mlp,
    class_id: usize,
    num_classes: usize,
) -> Result<Vec<f64>> {
    controller.eval(&one_hot(class_id, num_classes)?)
}

/// Predictions after replacing the features of `nodes` with `h_star` and
/// repropagating.
pub fn replace_nodes_and_predict(
    g: &GraphBundle,
    model: &SgcModel,
    h_star: &[f64],
    nodes: &[usize],
) -> Result<DenseMatrix> {
    if h_star.len() != g.feature_dim() {
        return Err(Error::dims(
            "replace_and_predict",
            g.feature_dim(),
            h_star.len(),
        ));
    }
    if let Some(&bad) = nodes.iter().find(|&&v| v >= g.num_nodes()) {
        return Err(Error::InvalidArgument(format!("node {bad} out of range")));
    }
    let mut replaced = g.clone();
    for &v in nodes {
        replaced.features.row_mut(v).copy_from_slice(h_star);
    }
    model.predict_features(&propagate(&replaced, model.k_steps)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Replacement {
    pub predictions: DenseMatrix,
    pub n_replaced: usize,
}

/// Replaces every training node labeled `class_id` with `h_star`. Without
/// such nodes a warning is logged and the original predictions are returned.
pub fn replace_and_predict(
    g: &GraphBundle,
    model: &SgcModel,
    h_star: &[f64],
    class_id: usize,
) -> Result<Replacement> {
    let splits = g.splits()?;
    let nodes: Vec<usize> = (0..g.num_nodes())
        .filter(|&v| splits.train[v] && g.labels[v] == class_id)
        .collect();
    if nodes.is_empty() {
        log::warn!("no labeled nodes of class {class_id}; predictions unchanged");
        return Ok(Replacement {
            predictions: model.predict(None)?,
            n_replaced: 0,
        });
    }
    Ok(Replacement {
        predictions: replace_nodes_and_predict(g, model, h_star, &nodes)?,
        n_replaced: nodes.len(),
    })
}

/// Whether the plant maps `h_star` to within `eps` of `one-hot(class_id)`.
pub fn check_representative(
    plant: &NodeAffineSystem,
    h_star: &[f64],
    class_id: usize,
    eps: f64,
) -> Result<bool> {
    let p = plant.predict(h_star)?;
    Ok(dist2(&p, &one_hot(class_id, plant.num_classes())?) <= eps)
}

/// Argmax accuracy over the rows flagged in `mask`; ties go to the lowest
/// class index.
pub fn accuracy(predictions: &DenseMatrix, labels: &[usize], mask: &[bool]) -> Result<f64> {
    if predictions.rows() != labels.len() || mask.len() != labels.len() {
        return Err(Error::dims("accuracy", labels.len(), predictions.rows()));
    }
    let rows: Vec<usize> = (0..labels.len()).filter(|&i| mask[i]).collect();
    if rows.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation mask".into()));
    }
    let correct = rows
        .iter()
        .filter(|&&i| argmax(predictions.row(i)) == labels[i])
        .count();
    Ok(correct as f64 / rows.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyPair {
    pub before: f64,
    pub after: f64,
}

/// Test-set accuracy before and after replacement.
pub fn evaluate(
    g: &GraphBundle,
    before: &DenseMatrix,
    after: &DenseMatrix,
) -> Result<AccuracyPair> {
    let test = &g.splits()?.test;
    Ok(AccuracyPair {
        before: accuracy(before, &g.labels, test)?,
        after: accuracy(after, &g.labels, test)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
        }
    }
}

/// Outcome of one seed's experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub class_id: usize,
    pub node_id: usize,
    pub certified: bool,
    pub representative_ok: bool,
    pub n_replaced: usize,
    pub accuracy_before: f64,
    /// All labeled nodes of the class replaced.
    pub accuracy_after: f64,
    /// Only the controlled node replaced.
    pub accuracy_after_single: f64,
}

/// `results.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub class_id: usize,
    pub per_seed: Vec<SeedResult>,
    pub accuracy_before: MeanStd,
    pub accuracy_after: MeanStd,
    pub accuracy_after_single: MeanStd,
    pub n_certified: usize,
}

impl EvalReport {
    pub fn aggregate(class_id: usize, per_seed: Vec<SeedResult>) -> Self {
        let col =
            |f: fn(&SeedResult) -> f64| MeanStd::of(&per_seed.iter().map(f).collect::<Vec<_>>());
        Self {
            class_id,
            accuracy_before: col(|r| r.accuracy_before),
            accuracy_after: col(|r| r.accuracy_after),
            accuracy_after_single: col(|r| r.accuracy_after_single),
            n_certified: per_seed.iter().filter(|r| r.certified).count(),
            per_seed,
        }
    }

    /// Plain-text table in percent, `mean ± std` with two decimals.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<8} {:>10} {:>10} {:>12} {:>9}",
            "seed", "before", "after", "after(node)", "certified"
        );
        for r in &self.per_seed {
            let _ = writeln!(
                s,
                "{:<8} {:>10.2} {:>10.2} {:>12.2} {:>9}",
                r.seed,
                100.0 * r.accuracy_before,
                100.0 * r.accuracy_after,
                100.0 * r.accuracy_after_single,
                if r.certified { "yes" } else { "no" }
            );
        }
        let _ = writeln!(s, "\nmethod                 mean ± std");
        for (name, m) in [
            ("SGC", self.accuracy_before),
            ("SGC + replacement", self.accuracy_after),
            ("SGC + node only", self.accuracy_after_single),
        ] {
            let _ = writeln!(s, "{name:<22} {:.2} ± {:.2}", 100.0 * m.mean, 100.0 * m.std);
        }
        s
    }
}

/// CSV of the propagated embeddings: `node_id,split,label,e0..`. Values are
/// printed with 17 significant digits so they parse back exactly.
pub fn export_embeddings(g: &GraphBundle, model: &SgcModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let emb = &model.propagated;
    if emb.rows() != g.num_nodes() {
        return Err(Error::dims("export_embeddings", g.num_nodes(), emb.rows()));
    }
    let mut out = String::from("node_id,split,label");
    for j in 0..emb.cols() {
        let _ = write!(out, ",e{j}");
    }
    out.push('\n');
    for i in 0..g.num_nodes() {
        let split = g.splits.as_ref().map_or("none", |s| s.name_of(i));
        let _ = write!(out, "{i},{split},{}", g.labels[i]);
        for v in emb.row(i) {
            let _ = write!(out, ",{v:.16e}");
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
