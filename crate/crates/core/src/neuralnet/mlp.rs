use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;

/// Dense layer `y = x · weight + bias` with `weight` shaped `in × out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self
            .weight
            .vecmat(x)
            .expect("layer input width checked by caller");
        out.iter_mut().zip(&self.bias).for_each(|(o, b)| *o += b);
        out
    }
}

/// Multi-layer perceptron: rectifier on hidden layers, identity output.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "MlpCheckpoint", into = "MlpCheckpoint")]
pub struct Mlp {
    layers: Vec<Layer>,
    /// Bumped on every parameter update; forward caches remember it.
    generation: u64,
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

/// On-disk network format: layer list plus the dimension chain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpCheckpoint {
    pub shape: Vec<usize>,
    pub layers: Vec<Layer>,
}

impl TryFrom<MlpCheckpoint> for Mlp {
    type Error = Error;

    fn try_from(ck: MlpCheckpoint) -> Result<Self> {
        let mlp = Mlp::from_layers(ck.layers)?;
        if mlp.shape() != ck.shape {
            return Err(Error::Validation(format!(
                "checkpoint shape {:?} disagrees with layers {:?}",
                ck.shape,
                mlp.shape()
            )));
        }
        Ok(mlp)
    }
}

impl From<Mlp> for MlpCheckpoint {
    fn from(m: Mlp) -> Self {
        MlpCheckpoint {
            shape: m.shape(),
            layers: m.layers,
        }
    }
}

/// Intermediate values of one forward pass, consumed by [`Mlp::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    generation: u64,
    /// Input to each layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation output of each layer.
    pre: Vec<Vec<f64>>,
}

impl Mlp {
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Validation("network needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.out_dim() {
                return Err(Error::Validation(format!(
                    "layer {i}: bias has {} entries for {} outputs",
                    l.bias.len(),
                    l.out_dim()
                )));
            }
            if !l.weight.is_finite() || l.bias.iter().any(|b| !b.is_finite()) {
                return Err(Error::NonFinite(format!("layer {i} parameters")));
            }
        }
        for (i, w) in layers.windows(2).enumerate() {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(Error::Validation(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    w[0].out_dim(),
                    i + 1,
                    w[1].in_dim()
                )));
            }
        }
        Ok(Self {
            layers,
            generation: 0,
        })
    }

    /// Seeded network with layer widths `shape`; weights and biases drawn
    /// from `U(−1/√fan_in, 1/√fan_in)`.
    pub fn init(shape: &[usize], seed: u64) -> Result<Self> {
        if shape.len() < 2 || shape.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "bad network shape {shape:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = shape
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                let weight =
                    DenseMatrix::from_fn(w[0], w[1], |_, _| rng.random_range(-bound..=bound));
                let bias = (0..w[1])
                    .map(|_| rng.random_range(-bound..=bound))
                    .collect();
                Layer { weight, bias }
            })
            .collect();
        Self::from_layers(layers)
    }

    /// Network with every parameter zero.
    pub fn zeros(shape: &[usize]) -> Result<Self> {
        if shape.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "bad network shape {shape:?}"
            )));
        }
        Self::from_layers(
            shape
                .windows(2)
                .map(|w| Layer {
                    weight: DenseMatrix::zeros(w[0], w[1]),
                    bias: vec![0.0; w[1]],
                })
                .collect(),
        )
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn shape(&self) -> Vec<usize> {
        let mut s = vec![self.layers[0].in_dim()];
        s.extend(self.layers.iter().map(Layer::out_dim));
        s
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("nonempty").out_dim()
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.data().len() + l.bias.len())
            .sum()
    }

    /// Parameters flattened layer by layer: weight (row-major), then bias.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            p.extend_from_slice(l.weight.data());
            p.extend_from_slice(&l.bias);
        }
        p
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.num_params() {
            return Err(Error::dims("Mlp::set_params", self.num_params(), p.len()));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.weight.data().len();
            l.weight.data_mut().copy_from_slice(&p[off..off + nw]);
            off += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&p[off..off + nb]);
            off += nb;
        }
        self.generation += 1;
        Ok(())
    }

    /// Mutable access to the layers; invalidates outstanding caches.
    pub fn layers_mut(&mut self) -> &mut [Layer] {
        self.generation += 1;
        &mut self.layers
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.in_dim() {
            return Err(Error::dims("mlp_forward", self.in_dim(), x.len()));
        }
        Ok(())
    }

    /// Output only, no cache.
    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.eval_unchecked(x))
    }

    pub(crate) fn eval_unchecked(&self, x: &[f64]) -> Vec<f64> {
        let last = self.layers.len() - 1;
        let mut h = x.to_vec();
        for (i, l) in self.layers.iter().enumerate() {
            h = l.apply(&h);
            if i < last {
                h.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        h
    }

    pub(crate) fn eval_scalar(&self, x: &[f64]) -> f64 {
        self.eval_unchecked(x)[0]
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        self.check_input(x)?;
        Ok(self.forward_unchecked(x))
    }

    pub(crate) fn forward_unchecked(&self, x: &[f64]) -> (Vec<f64>, ForwardCache) {
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        for (i, l) in self.layers.iter().enumerate() {
            let z = l.apply(&h);
            inputs.push(h);
            h = if i < last {
                z.iter().map(|v| v.max(0.0)).collect()
            } else {
                z.clone()
            };
            pre.push(z);
        }
        (
            h,
            ForwardCache {
                generation: self.generation,
                inputs,
                pre,
            },
        )
    }

    /// Parameter gradients (flattened like [`Mlp::params`]) and input gradient
    /// for the scalar objective whose gradient w.r.t. the output is `upstream`.
    pub fn backward(&self, cache: &ForwardCache, upstream: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut grads = vec![0.0; self.num_params()];
        let gx = self.backward_accumulate(cache, upstream, &mut grads)?;
        Ok((grads, gx))
    }

    /// Like [`Mlp::backward`] but adds into `grads`.
    pub fn backward_accumulate(
        &self,
        cache: &ForwardCache,
        upstream: &[f64],
        grads: &mut [f64],
    ) -> Result<Vec<f64>> {
        if cache.generation != self.generation || cache.inputs.len() != self.layers.len() {
            return Err(Error::StaleCache);
        }
        if upstream.len() != self.out_dim() {
            return Err(Error::dims("mlp_backward", self.out_dim(), upstream.len()));
        }
        if grads.len() != self.num_params() {
            return Err(Error::dims("mlp_backward", self.num_params(), grads.len()));
        }
        let offsets: Vec<usize> = self
            .layers
            .iter()
            .scan(0, |acc, l| {
                let o = *acc;
                *acc += l.weight.data().len() + l.bias.len();
                Some(o)
            })
            .collect();
        let last = self.layers.len() - 1;
        let mut g = upstream.to_vec();
        for i in (0..self.layers.len()).rev() {
            let l = &self.layers[i];
            if i < last {
                for (gv, &z) in g.iter_mut().zip(&cache.pre[i]) {
                    if z <= 0.0 {
                        *gv = 0.0;
                    }
                }
            }
            let input = &cache.inputs[i];
            let (rows, cols) = (l.in_dim(), l.out_dim());
            let off = offsets[i];
            for (k, &xk) in input.iter().enumerate().take(rows) {
                if xk == 0.0 {
                    continue;
                }
                let gw = &mut grads[off + k * cols..off + (k + 1) * cols];
                for (gwj, &gj) in gw.iter_mut().zip(&g) {
                    *gwj += xk * gj;
                }
            }
            let gb = &mut grads[off + rows * cols..off + rows * cols + cols];
            for (gbj, &gj) in gb.iter_mut().zip(&g) {
                *gbj += gj;
            }
            g = l.weight.matvec(&g).expect("layer dims chain");
        }
        Ok(g)
    }
}
