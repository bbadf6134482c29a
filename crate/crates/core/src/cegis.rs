//! Counterexample-guided training of controller and Lyapunov network.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::GraphBundle;
use crate::error::{Error, Result};
use crate::neuralnet::{lyapunov_loss, one_hot, AdamConfig, AdamState, ClosedLoop, Mlp};
use crate::numerics::{dist2, spectral_norm};
use crate::sgc::{extract_node_plant, SgcModel};
use crate::verifier::{
    branch_and_bound, falsify_gradient_all, Counterexample, FalsifierConfig, StateBox,
    VerifierConfig, VerifierOutcome, VerifierReport,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CegisConfig {
    pub max_rounds: usize,
    pub epochs_per_round: usize,
    pub lr: f64,
    pub eps: f64,
    pub delta: f64,
    pub lambda_eq: f64,
    pub seed: u64,
    pub loss_stop: f64,
    /// Uniform samples from the domain added to the initial training set.
    pub n_aug: usize,
    pub hidden: usize,
    pub max_counterexamples: usize,
    pub max_boxes: usize,
    pub falsifier_restarts: usize,
    pub falsifier_steps: usize,
    pub parallel_verifier: bool,
    /// Off for byte-reproducible reports.
    pub record_wall_time: bool,
}

impl Default for CegisConfig {
    fn default() -> Self {
        Self {
            max_rounds: 50,
            epochs_per_round: 500,
            lr: 1e-3,
            eps: 0.1,
            delta: 1e-3,
            lambda_eq: 1.0,
            seed: 0,
            loss_stop: 1e-6,
            n_aug: 64,
            hidden: 16,
            max_counterexamples: 32,
            max_boxes: 2_000_000,
            falsifier_restarts: 32,
            falsifier_steps: 50,
            parallel_verifier: false,
            record_wall_time: true,
        }
    }
}

impl CegisConfig {
    pub fn verifier(&self) -> VerifierConfig {
        VerifierConfig {
            eps: self.eps,
            delta: self.delta,
            max_counterexamples: self.max_counterexamples,
            max_boxes: self.max_boxes,
            parallel: self.parallel_verifier,
        }
    }

    fn falsifier(&self, round: usize) -> FalsifierConfig {
        FalsifierConfig {
            restarts: self.falsifier_restarts,
            steps: self.falsifier_steps,
            seed: self
                .seed
                .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                .wrapping_add(round as u64),
            ..FalsifierConfig::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.delta > 0.0 && self.lr > 0.0) {
            return Err(Error::InvalidArgument(
                "eps, delta and lr must be positive".into(),
            ));
        }
        if self.hidden == 0 || self.max_counterexamples == 0 || self.max_boxes == 0 {
            return Err(Error::InvalidArgument(
                "hidden and verifier budgets must be positive".into(),
            ));
        }
        if !(self.lambda_eq >= 0.0) {
            return Err(Error::InvalidArgument(
                "lambda_eq must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// Loss after the round's last training epoch.
    pub loss: f64,
    pub epochs: usize,
    pub n_counterexamples: usize,
    /// `certified`, `falsified` (gradient falsifier hit), `violations`
    /// (branch and bound hit) or `inconclusive`.
    pub verdict: String,
    pub wall_time_ms: u64,
}

#[derive(Debug, Clone)]
pub struct CegisState {
    pub training_states: Vec<Vec<f64>>,
    pub round: usize,
    pub history: Vec<RoundRecord>,
    adam_controller: AdamState,
    adam_lyapunov: AdamState,
}

impl CegisState {
    pub fn new(cl: &ClosedLoop, training_states: Vec<Vec<f64>>, lr: f64) -> Self {
        Self {
            training_states,
            round: 0,
            history: Vec::new(),
            adam_controller: AdamState::new(cl.controller.num_params(), AdamConfig::with_lr(lr)),
            adam_lyapunov: AdamState::new(cl.lyapunov.num_params(), AdamConfig::with_lr(lr)),
        }
    }

    /// Appends states not within 1e-9 of an existing one; returns how many
    /// were new.
    pub fn add_states(&mut self, states: impl IntoIterator<Item = Vec<f64>>) -> usize {
        let mut added = 0;
        for s in states {
            if self.training_states.iter().all(|t| dist2(t, &s) > 1e-9) {
                self.training_states.push(s);
                added += 1;
            }
        }
        added
    }
}

/// Closed loop for `node_id` driven toward `one-hot(class_id)`, with freshly
/// initialized networks and the initial training set: the node's current
/// prediction plus `n_aug` uniform samples from `[0, 1]^C`.
pub fn init_training_set(
    model: &SgcModel,
    g: &GraphBundle,
    node_id: usize,
    class_id: usize,
    cfg: &CegisConfig,
) -> Result<(ClosedLoop, CegisState)> {
    cfg.validate()?;
    if node_id >= g.num_nodes() {
        return Err(Error::InvalidArgument(format!(
            "node {node_id} out of range"
        )));
    }
    if g.labels[node_id] != class_id {
        return Err(Error::InvalidArgument(format!(
            "node {node_id} has label {}, not {class_id}",
            g.labels[node_id]
        )));
    }
    let c = model.num_classes();
    let plant = extract_node_plant(model, g, node_id)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let controller = Mlp::init(&[c, cfg.hidden, model.feature_dim()], rng.random())?;
    let lyapunov = Mlp::init(&[c, cfg.hidden, 1], rng.random())?;
    let cl = ClosedLoop::new(controller, plant, lyapunov, one_hot(class_id, c)?)?;

    let current = model.predict(Some(&[node_id]))?.row(0).to_vec();
    let mut state = CegisState::new(&cl, vec![current], cfg.lr);
    let domain = StateBox::unit(c);
    let samples: Vec<Vec<f64>> = (0..cfg.n_aug).map(|_| domain.sample(&mut rng)).collect();
    state.add_states(samples);
    Ok((cl, state))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundTraining {
    pub epochs: usize,
    /// Loss at the start of each epoch, plus the final loss.
    pub trace: Vec<f64>,
}

impl RoundTraining {
    pub fn final_loss(&self) -> f64 {
        *self
            .trace
            .last()
            .expect("trace holds at least the final loss")
    }
}

/// Up to `epochs_per_round` full-batch Adam steps on the Lyapunov loss,
/// stopping once the loss drops below `loss_stop`.
pub fn train_round(
    cl: &mut ClosedLoop,
    state: &mut CegisState,
    cfg: &CegisConfig,
) -> Result<RoundTraining> {
    if state.training_states.is_empty() {
        return Err(Error::InvalidArgument("no training states".into()));
    }
    let mut trace = Vec::new();
    let mut epochs = 0;
    let mut p_ctrl = cl.controller.params();
    let mut p_lyap = cl.lyapunov.params();
    loop {
        let (loss, grads) = lyapunov_loss(cl, &state.training_states, cfg.lambda_eq)?;
        if !loss.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: epochs,
                detail: format!(
                    "round {}: hinge {} V(Y)^2 {} residual {}",
                    state.round, loss.hinge, loss.v_eq_sq, loss.eq_residual_sq
                ),
            });
        }
        trace.push(loss.total);
        if epochs >= cfg.epochs_per_round || loss.total < cfg.loss_stop {
            break;
        }
        state.adam_controller.step(&mut p_ctrl, &grads.controller)?;
        state.adam_lyapunov.step(&mut p_lyap, &grads.lyapunov)?;
        cl.controller.set_params(&p_ctrl)?;
        cl.lyapunov.set_params(&p_lyap)?;
        epochs += 1;
    }
    Ok(RoundTraining { epochs, trace })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CegisReport {
    pub certified: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    pub eps: f64,
    pub delta: f64,
    pub lambda_eq: f64,
    pub node_id: usize,
    pub class_id: usize,
    pub n_training_states: usize,
    pub lipschitz_bound: f64,
    pub rounds: Vec<RoundRecord>,
    /// Last branch-and-bound report, if the verifier ran.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verifier: Option<VerifierReport>,
}

/// Alternates training rounds with counterexample search until the verifier
/// certifies or `max_rounds` is used up. Each round runs the gradient
/// falsifier first and falls back to branch and bound only when it finds
/// nothing.
pub fn cegis_loop(
    cl: &mut ClosedLoop,
    state: &mut CegisState,
    cfg: &CegisConfig,
) -> Result<CegisReport> {
    cfg.validate()?;
    let domain = StateBox::unit(cl.num_classes());
    let vcfg = cfg.verifier();
    let mut certified = false;
    let mut reason = None;
    let mut last_report = None;

    while state.round < cfg.max_rounds {
        state.round += 1;
        let started = Instant::now();
        let training = train_round(cl, state, cfg)?;

        let mut found: Vec<Counterexample> =
            falsify_gradient_all(cl, &domain, cfg.eps, &cfg.falsifier(state.round));
        let verdict = if !found.is_empty() {
            "falsified"
        } else {
            let result = branch_and_bound(cl, &domain, &vcfg);
            let verdict = match &result {
                Ok(VerifierOutcome::Certified { .. }) => "certified",
                Ok(VerifierOutcome::Violations {
                    counterexamples, ..
                }) => {
                    found = counterexamples.clone();
                    "violations"
                }
                Err(Error::Inconclusive { .. }) => "inconclusive",
                Err(_) => "error",
            };
            last_report = Some(VerifierReport::from_result(result, &vcfg)?);
            verdict
        };
        for ce in &found {
            log::debug!(
                "round {}: {:?} at {:?} (V={:.3e}, dV={:.3e})",
                state.round,
                ce.violation,
                ce.state,
                ce.v,
                ce.dv
            );
        }
        state.add_states(found.iter().map(|ce| ce.state.clone()));
        let wall_time_ms = if cfg.record_wall_time {
            started.elapsed().as_millis() as u64
        } else {
            0
        };
        state.history.push(RoundRecord {
            round: state.round,
            loss: training.final_loss(),
            epochs: training.epochs,
            n_counterexamples: found.len(),
            verdict: verdict.to_string(),
            wall_time_ms,
        });
        log::info!(
            "cegis round {}: loss {:.3e}, {} counterexamples, {verdict}",
            state.round,
            training.final_loss(),
            found.len()
        );
        if verdict == "certified" {
            certified = true;
            break;
        }
    }
    if !certified {
        reason = Some(match state.history.last() {
            Some(r) if r.verdict == "inconclusive" => {
                format!(
                    "verifier inconclusive after {} rounds (box budget exhausted)",
                    state.round
                )
            }
            Some(_) => format!("not certified within {} rounds", cfg.max_rounds),
            None => "max_rounds is 0".to_string(),
        });
    }

    Ok(CegisReport {
        certified,
        reason,
        eps: cfg.eps,
        delta: cfg.delta,
        lambda_eq: cfg.lambda_eq,
        node_id: cl.plant.node_id,
        class_id: cl.equilibrium_class(),
        n_training_states: state.training_states.len(),
        lipschitz_bound: lipschitz_certificate(cl)?,
        rounds: state.history.clone(),
        verifier: last_report,
    })
}

/// Upper bound `gain · Π‖W_i‖₂ · ‖W‖₂` on the Lipschitz constant of the map
/// from state to plant logits. Softmax is 1-Lipschitz, so the bound carries
/// over to the closed-loop step.
pub fn lipschitz_certificate(cl: &ClosedLoop) -> Result<f64> {
    let mut l = cl.plant.gain * spectral_norm(&cl.plant.weight, 10_000, 1e-12)?;
    for layer in cl.controller.layers() {
        l *= spectral_norm(&layer.weight, 10_000, 1e-12)?;
    }
    Ok(l)
}
