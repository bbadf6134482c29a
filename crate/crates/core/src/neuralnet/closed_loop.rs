use crate::error::{Error, Result};
use crate::neuralnet::Mlp;
use crate::numerics::{dist2, softmax};
use crate::sgc::NodeAffineSystem;

/// Controller, plant and Lyapunov candidate around a one-hot equilibrium.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoop {
    pub controller: Mlp,
    pub plant: NodeAffineSystem,
    pub lyapunov: Mlp,
    pub equilibrium: Vec<f64>,
}

/// Value of the training loss split into its terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub total: f64,
    /// Mean of the two hinge terms over the batch.
    pub hinge: f64,
    /// `V(Y)²`.
    pub v_eq_sq: f64,
    /// `‖step(Y) − Y‖²` (before weighting).
    pub eq_residual_sq: f64,
}

/// Gradients flattened like [`Mlp::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrads {
    pub controller: Vec<f64>,
    pub lyapunov: Vec<f64>,
}

/// `V`, `ΔV` and their input gradients at one state.
#[derive(Debug, Clone)]
pub struct StateGradients {
    pub v: f64,
    pub dv: f64,
    pub grad_v: Vec<f64>,
    pub grad_dv: Vec<f64>,
}

pub fn one_hot(class_id: usize, num_classes: usize) -> Result<Vec<f64>> {
    if class_id >= num_classes {
        return Err(Error::InvalidArgument(format!(
            "class {class_id} out of range for {num_classes} classes"
        )));
    }
    let mut y = vec![0.0; num_classes];
    y[class_id] = 1.0;
    Ok(y)
}

/// Backpropagates `g_next = ∂L/∂step(x)` through softmax and the plant to the
/// controller output.
fn through_plant(plant: &NodeAffineSystem, next: &[f64], g_next: &[f64]) -> Vec<f64> {
    let s_dot_g: f64 = next.iter().zip(g_next).map(|(s, g)| s * g).sum();
    let g_logits: Vec<f64> = next
        .iter()
        .zip(g_next)
        .map(|(s, g)| s * (g - s_dot_g))
        .collect();
    let mut g_h = plant.weight.matvec(&g_logits).expect("plant dims checked");
    g_h.iter_mut().for_each(|v| *v *= plant.gain);
    g_h
}

impl ClosedLoop {
    pub fn new(
        controller: Mlp,
        plant: NodeAffineSystem,
        lyapunov: Mlp,
        equilibrium: Vec<f64>,
    ) -> Result<Self> {
        let c = plant.num_classes();
        if controller.in_dim() != c || controller.out_dim() != plant.feature_dim() {
            return Err(Error::dims(
                "ClosedLoop controller",
                format!("{c} -> {}", plant.feature_dim()),
                format!("{} -> {}", controller.in_dim(), controller.out_dim()),
            ));
        }
        if lyapunov.in_dim() != c || lyapunov.out_dim() != 1 {
            return Err(Error::dims(
                "ClosedLoop lyapunov",
                format!("{c} -> 1"),
                format!("{} -> {}", lyapunov.in_dim(), lyapunov.out_dim()),
            ));
        }
        let ones = equilibrium.iter().filter(|&&v| v == 1.0).count();
        let zeros = equilibrium.iter().filter(|&&v| v == 0.0).count();
        if equilibrium.len() != c || ones != 1 || ones + zeros != c {
            return Err(Error::Validation(format!(
                "equilibrium {equilibrium:?} is not a one-hot vector of length {c}"
            )));
        }
        Ok(Self {
            controller,
            plant,
            lyapunov,
            equilibrium,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.equilibrium.len()
    }

    pub fn equilibrium_class(&self) -> usize {
        self.equilibrium
            .iter()
            .position(|&v| v == 1.0)
            .expect("validated one-hot")
    }

    fn check(&self, y: &[f64]) -> Result<()> {
        if y.len() != self.num_classes() {
            return Err(Error::dims("closed_loop", self.num_classes(), y.len()));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("closed-loop state".into()));
        }
        Ok(())
    }

    /// `softmax(gain·(f_θ(y)·W) + offset)`.
    pub fn step(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.check(y)?;
        Ok(self.step_unchecked(y))
    }

    pub(crate) fn step_unchecked(&self, y: &[f64]) -> Vec<f64> {
        let h = self.controller.eval_unchecked(y);
        softmax(&self.plant.logits(&h).expect("plant dims checked"))
    }

    pub fn v(&self, y: &[f64]) -> Result<f64> {
        self.check(y)?;
        Ok(self.lyapunov.eval_scalar(y))
    }

    /// `V(step(y)) − V(y)`.
    pub fn delta_v(&self, y: &[f64]) -> Result<f64> {
        self.check(y)?;
        Ok(self.v_and_delta_unchecked(y).1)
    }

    pub(crate) fn v_and_delta_unchecked(&self, y: &[f64]) -> (f64, f64) {
        let v = self.lyapunov.eval_scalar(y);
        let next = self.step_unchecked(y);
        (v, self.lyapunov.eval_scalar(&next) - v)
    }

    pub fn distance_to_equilibrium(&self, y: &[f64]) -> f64 {
        dist2(y, &self.equilibrium)
    }

    /// Input gradients of `V` and `ΔV`; used by the falsifier.
    pub fn state_gradients(&self, y: &[f64]) -> Result<StateGradients> {
        self.check(y)?;
        let (v_out, v_cache) = self.lyapunov.forward_unchecked(y);
        let (h, c_cache) = self.controller.forward_unchecked(y);
        let next = softmax(&self.plant.logits(&h)?);
        let (vn_out, vn_cache) = self.lyapunov.forward_unchecked(&next);
        let (_, grad_v) = self.lyapunov.backward(&v_cache, &[1.0])?;
        let (_, g_next) = self.lyapunov.backward(&vn_cache, &[1.0])?;
        let g_h = through_plant(&self.plant, &next, &g_next);
        let (_, g_y) = self.controller.backward(&c_cache, &g_h)?;
        let grad_dv = g_y.iter().zip(&grad_v).map(|(a, b)| a - b).collect();
        Ok(StateGradients {
            v: v_out[0],
            dv: vn_out[0] - v_out[0],
            grad_v,
            grad_dv,
        })
    }
}

/// Free-function form of [`ClosedLoop::step`].
pub fn closed_loop_step(cl: &ClosedLoop, y: &[f64]) -> Result<Vec<f64>> {
    cl.step(y)
}

/// Free-function form of [`ClosedLoop::delta_v`].
pub fn delta_v(cl: &ClosedLoop, y: &[f64]) -> Result<f64> {
    cl.delta_v(y)
}

/// Lyapunov training loss
///
/// `(1/N) Σ [relu(−V(ŷ)) + relu(ΔV(ŷ))] + V(Y)² + λ_eq ‖step(Y) − Y‖²`
///
/// with gradients for both networks. The plant is frozen. Hinges at exactly
/// zero contribute no gradient.
pub fn lyapunov_loss(
    cl: &ClosedLoop,
    batch: &[Vec<f64>],
    lambda_eq: f64,
) -> Result<(LossValue, LossGrads)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty training batch".into()));
    }
    for y in batch {
        cl.check(y)?;
    }
    let mut g_ctrl = vec![0.0; cl.controller.num_params()];
    let mut g_lyap = vec![0.0; cl.lyapunov.num_params()];
    let inv_n = 1.0 / batch.len() as f64;
    let mut hinge = 0.0;

    for y in batch {
        let (v_out, v_cache) = cl.lyapunov.forward_unchecked(y);
        let v = v_out[0];
        let (h, c_cache) = cl.controller.forward_unchecked(y);
        let next = softmax(&cl.plant.logits(&h)?);
        let (vn_out, vn_cache) = cl.lyapunov.forward_unchecked(&next);
        let dv = vn_out[0] - v;

        // d/dV(y) collects −1 from the first hinge and −1 from ΔV's second term
        let mut coef_v = 0.0;
        if v < 0.0 {
            hinge -= v;
            coef_v -= inv_n;
        }
        if dv > 0.0 {
            hinge += dv;
            coef_v -= inv_n;
            let g_next = cl
                .lyapunov
                .backward_accumulate(&vn_cache, &[inv_n], &mut g_lyap)?;
            let g_h = through_plant(&cl.plant, &next, &g_next);
            cl.controller
                .backward_accumulate(&c_cache, &g_h, &mut g_ctrl)?;
        }
        if coef_v != 0.0 {
            cl.lyapunov
                .backward_accumulate(&v_cache, &[coef_v], &mut g_lyap)?;
        }
    }
    hinge *= inv_n;

    let y_eq = &cl.equilibrium;
    let (v_eq_out, v_eq_cache) = cl.lyapunov.forward_unchecked(y_eq);
    let v_eq = v_eq_out[0];
    cl.lyapunov
        .backward_accumulate(&v_eq_cache, &[2.0 * v_eq], &mut g_lyap)?;

    let (h_eq, c_eq_cache) = cl.controller.forward_unchecked(y_eq);
    let next_eq = softmax(&cl.plant.logits(&h_eq)?);
    let resid: Vec<f64> = next_eq.iter().zip(y_eq).map(|(a, b)| a - b).collect();
    let resid_sq: f64 = resid.iter().map(|r| r * r).sum();
    if lambda_eq != 0.0 {
        let g_next: Vec<f64> = resid.iter().map(|r| 2.0 * lambda_eq * r).collect();
        let g_h = through_plant(&cl.plant, &next_eq, &g_next);
        cl.controller
            .backward_accumulate(&c_eq_cache, &g_h, &mut g_ctrl)?;
    }

    let total = hinge + v_eq * v_eq + lambda_eq * resid_sq;
    Ok((
        LossValue {
            total,
            hinge,
            v_eq_sq: v_eq * v_eq,
            eq_residual_sq: resid_sq,
        },
        LossGrads {
            controller: g_ctrl,
            lyapunov: g_lyap,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuralnet::Layer;
    use crate::numerics::DenseMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_loop(c: usize, feat: usize, seed: u64) -> ClosedLoop {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weight = DenseMatrix::from_fn(feat, c, |_, _| rng.random_range(-1.0..1.0));
        let offset = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let plant = NodeAffineSystem::new(0, rng.random_range(0.2..1.0), offset, weight).unwrap();
        ClosedLoop::new(
            Mlp::init(&[c, 16, feat], seed + 1).unwrap(),
            plant,
            Mlp::init(&[c, 16, 1], seed + 2).unwrap(),
            one_hot(0, c).unwrap(),
        )
        .unwrap()
    }

    /// Lyapunov net with a single linear layer and given bias, weights zero.
    fn constant_v(c: usize, value: f64) -> Mlp {
        Mlp::from_layers(vec![Layer {
            weight: DenseMatrix::zeros(c, 1),
            bias: vec![value],
        }])
        .unwrap()
    }

    #[test]
    fn zero_controller_gives_softmax_offset() {
        let mut cl = random_loop(3, 5, 1);
        cl.controller = Mlp::zeros(&[3, 16, 5]).unwrap();
        let y = cl.step(&[0.2, 0.3, 0.5]).unwrap();
        assert_eq!(y, softmax(&cl.plant.offset));
    }

    #[test]
    fn step_lands_in_simplex() {
        let cl = random_loop(4, 6, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let y: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..1.0)).collect();
            let next = cl.step(&y).unwrap();
            assert!(next.iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!((next.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn delta_v_matches_two_forward_passes() {
        let cl = random_loop(3, 4, 4);
        let y = [0.1, 0.7, 0.4];
        let h = cl.controller.eval(&y).unwrap();
        let next = softmax(&cl.plant.logits(&h).unwrap());
        let expect = cl.lyapunov.eval(&next).unwrap()[0] - cl.lyapunov.eval(&y).unwrap()[0];
        assert!((cl.delta_v(&y).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn constant_v_has_zero_delta() {
        let mut cl = random_loop(3, 4, 5);
        cl.lyapunov = constant_v(3, 0.7);
        assert_eq!(cl.delta_v(&[0.3, 0.3, 0.9]).unwrap(), 0.0);
    }

    #[test]
    fn fixed_point_has_zero_delta() {
        // zero controller makes softmax(offset) a fixed point
        let mut cl = random_loop(2, 3, 6);
        cl.controller = Mlp::zeros(&[2, 16, 3]).unwrap();
        let fp = softmax(&cl.plant.offset);
        assert_eq!(cl.delta_v(&fp).unwrap(), 0.0);
    }

    #[test]
    fn rejects_bad_equilibrium_and_dims() {
        let cl = random_loop(3, 4, 7);
        assert!(ClosedLoop::new(
            cl.controller.clone(),
            cl.plant.clone(),
            cl.lyapunov.clone(),
            vec![0.5, 0.5, 0.0]
        )
        .is_err());
        assert!(ClosedLoop::new(
            Mlp::init(&[3, 16, 5], 0).unwrap(),
            cl.plant.clone(),
            cl.lyapunov.clone(),
            one_hot(1, 3).unwrap()
        )
        .is_err());
        assert!(cl.step(&[0.1, 0.2]).is_err());
    }

    /// Builds a C=2 loop whose V and ΔV at the single batch state and at Y
    /// are prescribed. V is affine: V(x) = a·x + b. The controller is zero so
    /// every state steps to s = softmax(offset).
    fn affine_v_loop(v_state: f64, dv: f64, v_eq: f64) -> (ClosedLoop, Vec<f64>) {
        let plant =
            NodeAffineSystem::new(0, 1.0, vec![0.0, 0.0], DenseMatrix::zeros(3, 2)).unwrap();
        // s = (0.5, 0.5); choose state x = (0, 0). V(x)=b, V(Y)=a0+b, V(s)=(a0+a1)/2+b
        let b = v_state;
        let a0 = v_eq - b;
        let a1 = 2.0 * (dv + v_state - b) - a0;
        let lyap = Mlp::from_layers(vec![Layer {
            weight: DenseMatrix::new(2, 1, vec![a0, a1]).unwrap(),
            bias: vec![b],
        }])
        .unwrap();
        let cl = ClosedLoop::new(
            Mlp::zeros(&[2, 4, 3]).unwrap(),
            plant,
            lyap,
            one_hot(0, 2).unwrap(),
        )
        .unwrap();
        (cl, vec![0.0, 0.0])
    }

    #[test]
    fn loss_inactive_hinges() {
        let (cl, x) = affine_v_loop(0.5, -0.2, 0.1);
        assert!((cl.v(&x).unwrap() - 0.5).abs() < 1e-12);
        assert!((cl.delta_v(&x).unwrap() + 0.2).abs() < 1e-12);
        let (loss, _) = lyapunov_loss(&cl, &[x], 0.0).unwrap();
        assert!((loss.total - 0.01).abs() < 1e-12);
    }

    #[test]
    fn loss_single_active_hinge() {
        let (cl, x) = affine_v_loop(-0.3, -0.1, 0.0);
        let (loss, _) = lyapunov_loss(&cl, &[x], 0.0).unwrap();
        assert!((loss.total - 0.3).abs() < 1e-12);
    }

    #[test]
    fn empty_batch_rejected() {
        let cl = random_loop(2, 3, 8);
        assert!(lyapunov_loss(&cl, &[], 1.0).is_err());
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        let scale = a
            .iter()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
            .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
        if scale < 1e-8 {
            diff
        } else {
            diff / scale
        }
    }

    #[test]
    fn state_gradients_match_finite_differences() {
        let cl = random_loop(3, 5, 9);
        let y = vec![0.3, 0.55, 0.8];
        let g = cl.state_gradients(&y).unwrap();
        let h = 1e-6;
        let mut fd_v = vec![0.0; 3];
        let mut fd_dv = vec![0.0; 3];
        for i in 0..3 {
            let mut p = y.clone();
            let mut m = y.clone();
            p[i] += h;
            m[i] -= h;
            fd_v[i] = (cl.v(&p).unwrap() - cl.v(&m).unwrap()) / (2.0 * h);
            fd_dv[i] = (cl.delta_v(&p).unwrap() - cl.delta_v(&m).unwrap()) / (2.0 * h);
        }
        assert!(rel_err(&g.grad_v, &fd_v) < 1e-5);
        assert!(rel_err(&g.grad_dv, &fd_dv) < 1e-5);
    }

    fn fd_grad(cl: &ClosedLoop, batch: &[Vec<f64>], lyapunov: bool) -> Vec<f64> {
        let h = 1e-5;
        let base = if lyapunov {
            cl.lyapunov.params()
        } else {
            cl.controller.params()
        };
        let mut probe = cl.clone();
        let mut eval = |p: &[f64]| {
            let net = if lyapunov {
                &mut probe.lyapunov
            } else {
                &mut probe.controller
            };
            net.set_params(p).unwrap();
            lyapunov_loss(&probe, batch, 1.0).unwrap().0.total
        };
        (0..base.len())
            .map(|k| {
                let mut p = base.clone();
                p[k] += h;
                let up = eval(&p);
                p[k] -= 2.0 * h;
                let dn = eval(&p);
                (up - dn) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        for (seed, c) in [(10u64, 2usize), (11, 3), (12, 7)] {
            let cl = random_loop(c, 6, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let batch: Vec<Vec<f64>> = (0..8)
                .map(|_| (0..c).map(|_| rng.random_range(0.0..1.0)).collect())
                .collect();
            let (_, grads) = lyapunov_loss(&cl, &batch, 1.0).unwrap();
            assert!(
                rel_err(&grads.controller, &fd_grad(&cl, &batch, false)) < 1e-4,
                "controller, C={c}"
            );
            assert!(
                rel_err(&grads.lyapunov, &fd_grad(&cl, &batch, true)) < 1e-4,
                "lyapunov, C={c}"
            );
        }
    }
}
