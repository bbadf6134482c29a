//! Simplified graph convolution: K-step propagation, a linear softmax
//! classifier, and the per-node affine plant obtained by freezing every other
//! node's features.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{normalize_adjacency, GraphBundle, Splits};
use crate::error::{Error, Result};
use crate::neuralnet::{AdamConfig, AdamState};
use crate::numerics::{argmax, softmax, CsrMatrix, DenseMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgcConfig {
    pub k_steps: usize,
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for SgcConfig {
    fn default() -> Self {
        Self {
            k_steps: 3,
            lr: 1e-3,
            max_epochs: 1000,
            patience: 50,
            seed: 0,
        }
    }
}

/// Trained SGC: cached `Ŝ^K X` plus the linear classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct SgcModel {
    pub k_steps: usize,
    pub propagated: DenseMatrix,
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
    /// Content hash of the graph whose features were propagated.
    pub graph_hash: String,
}

/// `sgc.json`. The propagated cache is rebuilt from the graph on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgcCheckpoint {
    pub k_steps: usize,
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
    pub graph_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgcTrainReport {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    /// Full-batch training loss before each epoch's update.
    pub train_loss: Vec<f64>,
}

/// `Ŝ^k X` by repeated sparse products.
pub fn propagate(g: &GraphBundle, k: usize) -> Result<DenseMatrix> {
    let s = normalize_adjacency(&g.adjacency);
    propagate_with(&s, &g.features, k)
}

fn propagate_with(s: &CsrMatrix, x: &DenseMatrix, k: usize) -> Result<DenseMatrix> {
    let mut out = x.clone();
    for _ in 0..k {
        out = s.spmm(&out)?;
    }
    Ok(out)
}

fn logits_row(weight: &DenseMatrix, bias: &[f64], x: &[f64]) -> Vec<f64> {
    let mut l = weight.vecmat(x).expect("feature width checked");
    l.iter_mut().zip(bias).for_each(|(a, b)| *a += b);
    l
}

/// Mean cross-entropy over `rows`, optionally accumulating the gradient.
fn cross_entropy(
    x: &DenseMatrix,
    labels: &[usize],
    rows: &[usize],
    weight: &DenseMatrix,
    bias: &[f64],
    mut grad: Option<(&mut [f64], &mut [f64])>,
) -> (f64, f64) {
    let c = bias.len();
    let n = rows.len() as f64;
    let mut loss = 0.0;
    let mut correct = 0usize;
    for &i in rows {
        let xi = x.row(i);
        let p = softmax(&logits_row(weight, bias, xi));
        let y = labels[i];
        loss -= p[y].max(f64::MIN_POSITIVE).ln();
        if argmax(&p) == y {
            correct += 1;
        }
        if let Some((gw, gb)) = grad.as_mut() {
            for j in 0..c {
                let d = (p[j] - if j == y { 1.0 } else { 0.0 }) / n;
                gb[j] += d;
                for (k, &xk) in xi.iter().enumerate() {
                    gw[k * c + j] += xk * d;
                }
            }
        }
    }
    (loss / n, correct as f64 / n)
}

/// Fits the linear classifier on the rows of `propagated` flagged in
/// `splits.train` with full-batch Adam. Early stopping keeps the parameters
/// of the epoch with the best validation accuracy (ties: lower validation
/// loss); without validation nodes the training set is monitored instead.
pub fn train_sgc(
    propagated: &DenseMatrix,
    labels: &[usize],
    splits: &Splits,
    num_classes: usize,
    cfg: &SgcConfig,
) -> Result<(SgcModel, SgcTrainReport)> {
    let n = propagated.rows();
    if labels.len() != n || splits.train.len() != n {
        return Err(Error::dims("train_sgc", n, labels.len()));
    }
    let train: Vec<usize> = (0..n).filter(|&i| splits.train[i]).collect();
    if train.is_empty() {
        return Err(Error::InvalidArgument("empty training mask".into()));
    }
    if num_classes == 0 || labels.iter().any(|&l| l >= num_classes) {
        return Err(Error::InvalidArgument("labels out of range".into()));
    }
    let mut val: Vec<usize> = (0..n).filter(|&i| splits.val[i]).collect();
    if val.is_empty() {
        val = train.clone();
    }

    let d = propagated.cols();
    let c = num_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let bound = 1.0 / (d.max(1) as f64).sqrt();
    let mut weight = DenseMatrix::from_fn(d, c, |_, _| rng.random_range(-bound..=bound));
    let mut bias = vec![0.0; c];

    let mut params = vec![0.0; d * c + c];
    let mut adam = AdamState::new(params.len(), AdamConfig::with_lr(cfg.lr));
    let (mut best_w, mut best_b) = (weight.clone(), bias.clone());
    let (mut best_acc, mut best_loss) = (f64::NEG_INFINITY, f64::INFINITY);
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut losses = Vec::new();
    let mut epochs_run = 0;

    for epoch in 0..cfg.max_epochs {
        let (val_loss, val_acc) = cross_entropy(propagated, labels, &val, &weight, &bias, None);
        if val_acc > best_acc || (val_acc == best_acc && val_loss < best_loss) {
            best_acc = val_acc;
            best_loss = val_loss;
            best_w = weight.clone();
            best_b = bias.clone();
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > cfg.patience {
                break;
            }
        }

        let mut gw = vec![0.0; d * c];
        let mut gb = vec![0.0; c];
        let (loss, _) = cross_entropy(
            propagated,
            labels,
            &train,
            &weight,
            &bias,
            Some((&mut gw, &mut gb)),
        );
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                detail: "SGC cross-entropy".into(),
            });
        }
        losses.push(loss);
        params[..d * c].copy_from_slice(weight.data());
        params[d * c..].copy_from_slice(&bias);
        gw.extend_from_slice(&gb);
        adam.step(&mut params, &gw)?;
        weight.data_mut().copy_from_slice(&params[..d * c]);
        bias.copy_from_slice(&params[d * c..]);
        epochs_run = epoch + 1;
    }
    // the parameters after the final update have not been scored yet
    let (val_loss, val_acc) = cross_entropy(propagated, labels, &val, &weight, &bias, None);
    if val_acc > best_acc || (val_acc == best_acc && val_loss < best_loss) {
        best_acc = val_acc;
        best_w = weight;
        best_b = bias;
        best_epoch = epochs_run;
    }

    Ok((
        SgcModel {
            k_steps: cfg.k_steps,
            propagated: propagated.clone(),
            weight: best_w,
            bias: best_b,
            graph_hash: String::new(),
        },
        SgcTrainReport {
            epochs_run,
            best_epoch,
            best_val_accuracy: best_acc,
            train_loss: losses,
        },
    ))
}

/// Propagates `g`'s features and trains on its stored splits.
pub fn fit_sgc(g: &GraphBundle, cfg: &SgcConfig) -> Result<(SgcModel, SgcTrainReport)> {
    let propagated = propagate(g, cfg.k_steps)?;
    let (mut model, report) = train_sgc(&propagated, &g.labels, g.splits()?, g.num_classes, cfg)?;
    model.graph_hash = g.content_hash();
    Ok((model, report))
}

impl SgcModel {
    pub fn num_classes(&self) -> usize {
        self.bias.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn checkpoint(&self) -> SgcCheckpoint {
        SgcCheckpoint {
            k_steps: self.k_steps,
            weight: self.weight.clone(),
            bias: self.bias.clone(),
            graph_hash: self.graph_hash.clone(),
        }
    }

    /// Restores a model for `g`, rejecting checkpoints trained on a
    /// different graph.
    pub fn from_checkpoint(ck: SgcCheckpoint, g: &GraphBundle) -> Result<Self> {
        if ck.bias.len() != ck.weight.cols() {
            return Err(Error::Validation(format!(
                "sgc checkpoint: {} biases for {} classes",
                ck.bias.len(),
                ck.weight.cols()
            )));
        }
        if ck.weight.rows() != g.feature_dim() || ck.bias.len() != g.num_classes {
            return Err(Error::Validation(format!(
                "sgc checkpoint is {}x{}, graph has {} features and {} classes",
                ck.weight.rows(),
                ck.weight.cols(),
                g.feature_dim(),
                g.num_classes
            )));
        }
        if ck.bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::NonFinite("sgc checkpoint bias".into()));
        }
        let hash = g.content_hash();
        if ck.graph_hash != hash {
            return Err(Error::Validation(format!(
                "sgc checkpoint was trained on graph {}, not {hash}",
                ck.graph_hash
            )));
        }
        Ok(Self {
            k_steps: ck.k_steps,
            propagated: propagate(g, ck.k_steps)?,
            weight: ck.weight,
            bias: ck.bias,
            graph_hash: ck.graph_hash,
        })
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        logits_row(&self.weight, &self.bias, x)
    }

    /// Softmax probabilities for the cached rows (all rows if `rows` is None).
    pub fn predict(&self, rows: Option<&[usize]>) -> Result<DenseMatrix> {
        match rows {
            None => self.predict_features(&self.propagated),
            Some(r) => {
                if let Some(&bad) = r.iter().find(|&&i| i >= self.propagated.rows()) {
                    return Err(Error::InvalidArgument(format!("node {bad} out of range")));
                }
                self.predict_features(&self.propagated.select_rows(r))
            }
        }
    }

    /// Softmax probabilities for arbitrary propagated features.
    pub fn predict_features(&self, propagated: &DenseMatrix) -> Result<DenseMatrix> {
        if propagated.cols() != self.feature_dim() {
            return Err(Error::dims(
                "predict",
                self.feature_dim(),
                propagated.cols(),
            ));
        }
        let c = self.num_classes();
        let mut out = DenseMatrix::zeros(propagated.rows(), c);
        for i in 0..propagated.rows() {
            let p = softmax(&self.logits(propagated.row(i)));
            out.row_mut(i).copy_from_slice(&p);
        }
        Ok(out)
    }
}

/// Affine plant `z ↦ softmax(gain·(z·W) + offset)` of one node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPlant")]
pub struct NodeAffineSystem {
    pub node_id: usize,
    pub gain: f64,
    pub offset: Vec<f64>,
    pub weight: DenseMatrix,
}

#[derive(Deserialize)]
struct RawPlant {
    node_id: usize,
    gain: f64,
    offset: Vec<f64>,
    weight: DenseMatrix,
}

impl TryFrom<RawPlant> for NodeAffineSystem {
    type Error = Error;

    fn try_from(r: RawPlant) -> Result<Self> {
        NodeAffineSystem::new(r.node_id, r.gain, r.offset, r.weight)
    }
}

impl NodeAffineSystem {
    pub fn new(node_id: usize, gain: f64, offset: Vec<f64>, weight: DenseMatrix) -> Result<Self> {
        // (Ŝ^K)_ii is at most 1 in exact arithmetic; allow rounding above it
        if !(gain > 0.0 && gain <= 1.0 + 1e-12) {
            return Err(Error::Validation(format!(
                "plant gain {gain} outside (0, 1]"
            )));
        }
        if offset.len() != weight.cols() {
            return Err(Error::dims("NodeAffineSystem", weight.cols(), offset.len()));
        }
        if offset.iter().any(|v| !v.is_finite()) || !weight.is_finite() {
            return Err(Error::NonFinite("plant parameters".into()));
        }
        Ok(Self {
            node_id,
            gain,
            offset,
            weight,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.offset.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn logits(&self, z: &[f64]) -> Result<Vec<f64>> {
        let mut l = self.weight.vecmat(z)?;
        for (li, oi) in l.iter_mut().zip(&self.offset) {
            *li = self.gain * *li + oi;
        }
        Ok(l)
    }

    pub fn predict(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(z)?))
    }
}

/// Plant of `node_id`: with `u = Ŝ^K e_i`, the gain is `u_i` and the offset is
/// `Σ_{j≠i} u_j x_j W + bias`.
pub fn extract_node_plant(
    model: &SgcModel,
    g: &GraphBundle,
    node_id: usize,
) -> Result<NodeAffineSystem> {
    let n = g.num_nodes();
    if node_id >= n {
        return Err(Error::InvalidArgument(format!(
            "node {node_id} out of range ({n} nodes)"
        )));
    }
    if g.feature_dim() != model.feature_dim() {
        return Err(Error::dims(
            "extract_node_plant",
            model.feature_dim(),
            g.feature_dim(),
        ));
    }
    let s = normalize_adjacency(&g.adjacency);
    let mut e = DenseMatrix::zeros(n, 1);
    e.set(node_id, 0, 1.0);
    // Ŝ is symmetric, so column i of Ŝ^K is row i
    let u = propagate_with(&s, &e, model.k_steps)?;
    let gain = u.get(node_id, 0);
    let mut agg = vec![0.0; g.feature_dim()];
    for j in 0..n {
        let uj = u.get(j, 0);
        if j == node_id || uj == 0.0 {
            continue;
        }
        for (a, &x) in agg.iter_mut().zip(g.features.row(j)) {
            *a += uj * x;
        }
    }
    let offset = logits_row(&model.weight, &model.bias, &agg);
    NodeAffineSystem::new(node_id, gain, offset, model.weight.clone())
}
