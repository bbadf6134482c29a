//! Interval branch-and-bound verification of the discrete-time Lyapunov
//! conditions, plus a gradient falsifier that finds cheap counterexamples.
//!
//! A state `x` is a counterexample when `‖x − Y‖₂ ≥ ε` and `V(x) ≤ 0` or
//! `ΔV(x) ≥ 0`. The verifier works on axis-aligned boxes of the state space;
//! interval bound propagation through controller, plant, softmax and the
//! Lyapunov network prunes boxes where both conditions hold everywhere.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neuralnet::{ClosedLoop, Mlp};
use crate::numerics::{dist2, norm2, DenseMatrix};

const EPS: f64 = f64::EPSILON;

/// Axis-aligned box `[lower, upper]` in state space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl StateBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::dims("StateBox", lower.len(), upper.len()));
        }
        if lower.iter().chain(&upper).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("box bounds".into()));
        }
        if lower.iter().zip(&upper).any(|(l, u)| l > u) {
            return Err(Error::InvalidArgument(
                "box lower bound exceeds upper bound".into(),
            ));
        }
        Ok(Self { lower, upper })
    }

    /// The unit cube `[0, 1]^dim`.
    pub fn unit(dim: usize) -> Self {
        Self {
            lower: vec![0.0; dim],
            upper: vec![1.0; dim],
        }
    }

    pub fn point(x: &[f64]) -> Self {
        Self {
            lower: x.to_vec(),
            upper: x.to_vec(),
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| 0.5 * (l + u))
            .collect()
    }

    /// Euclidean length of the diagonal.
    pub fn diameter(&self) -> f64 {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| (u - l) * (u - l))
            .sum::<f64>()
            .sqrt()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (l, u))| l <= v && v <= u)
    }

    /// Distance from `y` to the farthest corner.
    pub fn farthest_corner_distance(&self, y: &[f64]) -> f64 {
        self.lower
            .iter()
            .zip(&self.upper)
            .zip(y)
            .map(|((l, u), c)| {
                let d = (l - c).abs().max((u - c).abs());
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Splits along the widest dimension; ties go to the lowest index.
    pub fn bisect(&self) -> (StateBox, StateBox) {
        let mut k = 0;
        for i in 1..self.dim() {
            if self.upper[i] - self.lower[i] > self.upper[k] - self.lower[k] {
                k = i;
            }
        }
        let mid = self.lower[k] + 0.5 * (self.upper[k] - self.lower[k]);
        let mut left = self.clone();
        let mut right = self.clone();
        left.upper[k] = mid;
        right.lower[k] = mid;
        (left, right)
    }

    fn clamp(&self, x: &mut [f64]) {
        for ((v, l), u) in x.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.clamp(*l, *u);
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(&l, &u)| if l == u { l } else { rng.random_range(l..=u) })
            .collect()
    }
}

/// Per-coordinate closed intervals.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalVector {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl IntervalVector {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::dims("IntervalVector", lo.len(), hi.len()));
        }
        if lo
            .iter()
            .zip(&hi)
            .any(|(l, h)| !(l <= h) || !l.is_finite() || !h.is_finite())
        {
            return Err(Error::InvalidArgument(
                "interval bounds must be finite with lo <= hi".into(),
            ));
        }
        Ok(Self { lo, hi })
    }

    pub fn point(x: &[f64]) -> Self {
        Self {
            lo: x.to_vec(),
            hi: x.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.lo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lo.is_empty()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.len()
            && x.iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(v, (l, h))| l <= v && v <= h)
    }

    /// Center and a radius rounded so that `[c − r, c + r]` covers `[lo, hi]`.
    fn center_radius(&self) -> (Vec<f64>, Vec<f64>) {
        let c: Vec<f64> = self
            .lo
            .iter()
            .zip(&self.hi)
            .map(|(l, h)| 0.5 * (l + h))
            .collect();
        let r = self
            .lo
            .iter()
            .zip(&self.hi)
            .zip(&c)
            .map(|((l, h), c)| (h - c).max(c - l) * (1.0 + 2.0 * EPS))
            .collect();
        (c, r)
    }
}

impl From<&StateBox> for IntervalVector {
    fn from(b: &StateBox) -> Self {
        Self {
            lo: b.lower.clone(),
            hi: b.upper.clone(),
        }
    }
}

/// Enclosure of `{x·W·scale + b : x ∈ input}` in center/radius form.
///
/// The center is computed in the same order as [`DenseMatrix::vecmat`], so a
/// point interval reproduces the forward value up to the rounding slack that
/// is added to keep the enclosure sound.
fn affine_scaled(
    x: &IntervalVector,
    w: &DenseMatrix,
    scale: f64,
    b: &[f64],
) -> Result<IntervalVector> {
    if x.len() != w.rows() || b.len() != w.cols() {
        return Err(Error::dims(
            "interval_affine",
            format!("{}x{} with {} biases", w.rows(), w.cols(), w.cols()),
            format!("{} inputs, {} biases", x.len(), b.len()),
        ));
    }
    let (c, r) = x.center_radius();
    let center = w.vecmat(&c)?;
    let n = x.len() as f64;
    let mut lo = Vec::with_capacity(w.cols());
    let mut hi = Vec::with_capacity(w.cols());
    for j in 0..w.cols() {
        let mut rad = 0.0;
        let mut mag = 0.0;
        for k in 0..w.rows() {
            let a = w.get(k, j).abs();
            rad += r[k] * a;
            mag += c[k].abs() * a;
        }
        let s = scale.abs();
        let mid = scale * center[j] + b[j];
        let rad = s * rad;
        let slack =
            (n + 4.0) * EPS * (s * (mag + rad) + b[j].abs() + mid.abs()) + f64::MIN_POSITIVE;
        lo.push(mid - rad - slack);
        hi.push(mid + rad + slack);
    }
    Ok(IntervalVector { lo, hi })
}

/// Sound enclosure of `x·W + b` over the interval `x`.
pub fn interval_affine(x: &IntervalVector, w: &DenseMatrix, b: &[f64]) -> Result<IntervalVector> {
    affine_scaled(x, w, 1.0, b)
}

pub fn interval_relu(x: &IntervalVector) -> IntervalVector {
    IntervalVector {
        lo: x.lo.iter().map(|v| v.max(0.0)).collect(),
        hi: x.hi.iter().map(|v| v.max(0.0)).collect(),
    }
}

/// Coordinatewise softmax enclosure. Output `i` increases in logit `i` and
/// decreases in every other logit, so its extremes sit at opposite corners:
/// `1 / (1 + Σ_{j≠i} exp(l_j − h_i))` above and the mirrored form below.
pub fn interval_softmax(logits: &IntervalVector) -> IntervalVector {
    let n = logits.len();
    let widen = (2.0 * n as f64 + 8.0) * EPS;
    let mut lo = Vec::with_capacity(n);
    let mut hi = Vec::with_capacity(n);
    for i in 0..n {
        let mut s_hi = 0.0;
        let mut s_lo = 0.0;
        for j in 0..n {
            if j != i {
                s_hi += (logits.lo[j] - logits.hi[i]).exp();
                s_lo += (logits.hi[j] - logits.lo[i]).exp();
            }
        }
        let upper = 1.0 / (1.0 + s_hi);
        let lower = 1.0 / (1.0 + s_lo);
        lo.push((lower * (1.0 - widen)).max(0.0));
        hi.push((upper * (1.0 + widen)).min(1.0));
    }
    IntervalVector { lo, hi }
}

/// Interval forward pass through an [`Mlp`].
pub fn interval_mlp(m: &Mlp, x: &IntervalVector) -> Result<IntervalVector> {
    let last = m.layers().len() - 1;
    let mut h = x.clone();
    for (i, l) in m.layers().iter().enumerate() {
        h = interval_affine(&h, &l.weight, &l.bias)?;
        if i < last {
            h = interval_relu(&h);
        }
    }
    Ok(h)
}

/// Interval closed-loop successor of every state in `x`.
pub fn interval_step(cl: &ClosedLoop, x: &IntervalVector) -> Result<IntervalVector> {
    let h = interval_mlp(&cl.controller, x)?;
    let logits = affine_scaled(&h, &cl.plant.weight, cl.plant.gain, &cl.plant.offset)?;
    Ok(interval_softmax(&logits))
}

/// Enclosures `([v_lo, v_hi], [dv_lo, dv_hi])` of `V` and `ΔV` over a box.
/// `ΔV` is bounded by the difference of the two independent enclosures.
pub fn bound_conditions(cl: &ClosedLoop, b: &StateBox) -> Result<([f64; 2], [f64; 2])> {
    let x = IntervalVector::from(b);
    let v = interval_mlp(&cl.lyapunov, &x)?;
    let next = interval_step(cl, &x)?;
    let vn = interval_mlp(&cl.lyapunov, &next)?;
    let (v_lo, v_hi) = (v.lo[0], v.hi[0]);
    let dv_lo = vn.lo[0] - v_hi;
    let dv_hi = vn.hi[0] - v_lo;
    // one extra ulp-scale margin for the subtraction itself
    let m = 2.0 * EPS * (vn.lo[0].abs().max(vn.hi[0].abs()) + v_lo.abs().max(v_hi.abs()));
    Ok(([v_lo, v_hi], [dv_lo - m, dv_hi + m]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Violation {
    NonPositiveV,
    NonDecreasingV,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counterexample {
    pub state: Vec<f64>,
    pub violation: Violation,
    pub v: f64,
    pub dv: f64,
}

/// Violation tag of `x`, or `None` if `x` satisfies both conditions or lies
/// strictly inside the ε-ball. `V ≤ 0` takes precedence.
pub fn check_state(cl: &ClosedLoop, x: &[f64], eps: f64) -> Option<Violation> {
    evaluate_state(cl, x, eps).map(|ce| ce.violation)
}

fn evaluate_state(cl: &ClosedLoop, x: &[f64], eps: f64) -> Option<Counterexample> {
    if dist2(x, &cl.equilibrium) < eps {
        return None;
    }
    let (v, dv) = cl.v_and_delta_unchecked(x);
    let violation = if v <= 0.0 {
        Violation::NonPositiveV
    } else if dv >= 0.0 {
        Violation::NonDecreasingV
    } else {
        return None;
    };
    Some(Counterexample {
        state: x.to_vec(),
        violation,
        v,
        dv,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FalsifierConfig {
    pub restarts: usize,
    pub steps: usize,
    pub step_size: f64,
    pub seed: u64,
}

impl Default for FalsifierConfig {
    fn default() -> Self {
        Self {
            restarts: 32,
            steps: 50,
            step_size: 0.05,
            seed: 0,
        }
    }
}

/// Clamp into `d`, then push points inside the ε-ball radially onto its
/// boundary (slightly outside, so the exact distance check accepts them).
fn project(x: &mut [f64], d: &StateBox, y: &[f64], eps: f64) {
    d.clamp(x);
    let dist = dist2(x, y);
    if dist >= eps {
        return;
    }
    let target = eps * (1.0 + 1e-9);
    if dist == 0.0 {
        // move toward the box center
        let c = d.center();
        let dir: Vec<f64> = c.iter().zip(y).map(|(a, b)| a - b).collect();
        let n = norm2(&dir);
        if n == 0.0 {
            return;
        }
        for (v, (yi, di)) in x.iter_mut().zip(y.iter().zip(&dir)) {
            *v = yi + target * di / n;
        }
    } else {
        for (v, yi) in x.iter_mut().zip(y) {
            *v = yi + (*v - yi) * target / dist;
        }
    }
    d.clamp(x);
}

/// Projected gradient ascent on `max(−V(x), ΔV(x))` over `d ∖ B_ε(Y)` from
/// seeded uniform starts. Every returned state was confirmed by exact
/// evaluation; states closer than 1e-9 to an earlier one are dropped.
pub fn falsify_gradient_all(
    cl: &ClosedLoop,
    d: &StateBox,
    eps: f64,
    cfg: &FalsifierConfig,
) -> Vec<Counterexample> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let y = &cl.equilibrium;
    let mut found: Vec<Counterexample> = Vec::new();
    for _ in 0..cfg.restarts {
        let mut x = d.sample(&mut rng);
        project(&mut x, d, y, eps);
        let mut hit = evaluate_state(cl, &x, eps);
        for t in 0..cfg.steps {
            if hit.is_some() {
                break;
            }
            let Ok(g) = cl.state_gradients(&x) else { break };
            let dir = if -g.v > g.dv {
                g.grad_v.iter().map(|v| -v).collect::<Vec<_>>()
            } else {
                g.grad_dv
            };
            let n = norm2(&dir);
            if n == 0.0 || !n.is_finite() {
                break;
            }
            let alpha = cfg.step_size / (1.0 + t as f64).sqrt();
            for (xi, di) in x.iter_mut().zip(&dir) {
                *xi += alpha * di / n;
            }
            project(&mut x, d, y, eps);
            hit = evaluate_state(cl, &x, eps);
        }
        if let Some(ce) = hit {
            if found.iter().all(|f| dist2(&f.state, &ce.state) > 1e-9) {
                found.push(ce);
            }
        }
    }
    found
}

/// The most severe counterexample found by [`falsify_gradient_all`].
pub fn falsify_gradient(
    cl: &ClosedLoop,
    d: &StateBox,
    eps: f64,
    cfg: &FalsifierConfig,
) -> Option<Counterexample> {
    falsify_gradient_all(cl, d, eps, cfg)
        .into_iter()
        .max_by(|a, b| (-a.v).max(a.dv).total_cmp(&(-b.v).max(b.dv)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifierConfig {
    pub eps: f64,
    pub delta: f64,
    pub max_counterexamples: usize,
    pub max_boxes: usize,
    pub parallel: bool,
}

impl Default for VerifierConfig {
    fn default() -> Self {
        Self {
            eps: 0.1,
            delta: 1e-3,
            max_counterexamples: 32,
            max_boxes: 5_000_000,
            parallel: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum VerifierOutcome {
    Certified {
        resolution: f64,
        boxes_processed: usize,
        /// Boxes no larger than δ accepted on their center value alone.
        resolved_at_delta: usize,
    },
    Violations {
        counterexamples: Vec<Counterexample>,
        boxes_processed: usize,
    },
}

impl VerifierOutcome {
    pub fn is_certified(&self) -> bool {
        matches!(self, VerifierOutcome::Certified { .. })
    }

    pub fn boxes_processed(&self) -> usize {
        match self {
            VerifierOutcome::Certified {
                boxes_processed, ..
            }
            | VerifierOutcome::Violations {
                boxes_processed, ..
            } => *boxes_processed,
        }
    }
}

enum BoxResult {
    Pruned,
    Violation(Counterexample),
    Split(StateBox, StateBox),
    Resolved,
}

fn process_box(cl: &ClosedLoop, b: &StateBox, cfg: &VerifierConfig) -> Result<BoxResult> {
    if b.farthest_corner_distance(&cl.equilibrium) < cfg.eps {
        return Ok(BoxResult::Pruned);
    }
    let (v, dv) = bound_conditions(cl, b)?;
    if v[0] > 0.0 && dv[1] < 0.0 {
        return Ok(BoxResult::Pruned);
    }
    if let Some(ce) = evaluate_state(cl, &b.center(), cfg.eps) {
        return Ok(BoxResult::Violation(ce));
    }
    if b.diameter() > cfg.delta {
        let (l, r) = b.bisect();
        Ok(BoxResult::Split(l, r))
    } else {
        Ok(BoxResult::Resolved)
    }
}

/// Breadth-first branch and bound over `d`.
///
/// Boxes are processed level by level in a canonical order; parallel mode
/// evaluates each chunk of a level concurrently and merges in that same
/// order, so both modes return identical outcomes. Stops early once
/// `max_counterexamples` violations are collected. Exceeding `max_boxes`
/// without any violation is an [`Error::Inconclusive`].
pub fn branch_and_bound(
    cl: &ClosedLoop,
    d: &StateBox,
    cfg: &VerifierConfig,
) -> Result<VerifierOutcome> {
    if !(cfg.delta > 0.0 && cfg.eps > 0.0) {
        return Err(Error::InvalidArgument(
            "delta and eps must be positive".into(),
        ));
    }
    if d.dim() != cl.num_classes() {
        return Err(Error::dims("branch_and_bound", cl.num_classes(), d.dim()));
    }
    const CHUNK: usize = 4096;
    let mut level = vec![d.clone()];
    let mut processed = 0usize;
    let mut resolved = 0usize;
    let mut counterexamples = Vec::new();

    while !level.is_empty() {
        let mut next = Vec::new();
        for (ci, chunk) in level.chunks(CHUNK).enumerate() {
            let results: Vec<Result<BoxResult>> = if cfg.parallel {
                chunk.par_iter().map(|b| process_box(cl, b, cfg)).collect()
            } else {
                chunk.iter().map(|b| process_box(cl, b, cfg)).collect()
            };
            for (i, r) in results.into_iter().enumerate() {
                if processed >= cfg.max_boxes {
                    let remaining = level.len() - (ci * CHUNK + i) + next.len();
                    if counterexamples.is_empty() {
                        return Err(Error::Inconclusive {
                            remaining,
                            boxes_processed: processed,
                        });
                    }
                    return Ok(VerifierOutcome::Violations {
                        counterexamples,
                        boxes_processed: processed,
                    });
                }
                processed += 1;
                match r? {
                    BoxResult::Pruned => {}
                    BoxResult::Resolved => resolved += 1,
                    BoxResult::Split(a, b) => {
                        next.push(a);
                        next.push(b);
                    }
                    BoxResult::Violation(ce) => {
                        counterexamples.push(ce);
                        if counterexamples.len() >= cfg.max_counterexamples {
                            return Ok(VerifierOutcome::Violations {
                                counterexamples,
                                boxes_processed: processed,
                            });
                        }
                    }
                }
            }
        }
        level = next;
    }

    if counterexamples.is_empty() {
        Ok(VerifierOutcome::Certified {
            resolution: cfg.delta,
            boxes_processed: processed,
            resolved_at_delta: resolved,
        })
    } else {
        Ok(VerifierOutcome::Violations {
            counterexamples,
            boxes_processed: processed,
        })
    }
}

/// Verifier report JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifierReport {
    pub verdict: String,
    pub delta: f64,
    pub eps: f64,
    pub boxes_processed: usize,
    pub counterexamples: Vec<Counterexample>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub remaining_boxes: Option<usize>,
}

impl VerifierReport {
    /// Builds the report for a branch-and-bound result. Errors other than
    /// [`Error::Inconclusive`] are returned unchanged.
    pub fn from_result(result: Result<VerifierOutcome>, cfg: &VerifierConfig) -> Result<Self> {
        let mut rep = Self {
            verdict: String::new(),
            delta: cfg.delta,
            eps: cfg.eps,
            boxes_processed: 0,
            counterexamples: Vec::new(),
            remaining_boxes: None,
        };
        match result {
            Ok(VerifierOutcome::Certified {
                boxes_processed, ..
            }) => {
                rep.verdict = "certified".into();
                rep.boxes_processed = boxes_processed;
            }
            Ok(VerifierOutcome::Violations {
                counterexamples,
                boxes_processed,
            }) => {
                rep.verdict = "violations".into();
                rep.boxes_processed = boxes_processed;
                rep.counterexamples = counterexamples;
            }
            Err(Error::Inconclusive {
                remaining,
                boxes_processed,
            }) => {
                rep.verdict = "inconclusive".into();
                rep.boxes_processed = boxes_processed;
                rep.remaining_boxes = Some(remaining);
            }
            Err(e) => return Err(e),
        }
        Ok(rep)
    }
}
