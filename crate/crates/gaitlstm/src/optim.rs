//! Loss assembly (cross-entropy + L2) and the Adam update rule.
//!
//! The regularized objective is `l(w) + λ·Σ|w_i|²` where the sum runs over
//! weight-matrix entries only — biases are exempt, both because that is
//! standard practice and because penalizing the forget-gate bias would fight
//! its 1.0 initialization. The L2 gradient (2λw) is added analytically to the
//! batch gradient, not applied as decoupled weight decay.

use crate::error::{Error, Result};
use crate::model::{Gradients, ModelParams};
use crate::numerics::Vector;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// −Σ p(x)·log q(x), with q clamped to [1e-12, 1] before the log so a
/// confidently wrong prediction yields a large finite loss instead of ∞.
pub fn cross_entropy(true_dist: &Vector, pred_dist: &Vector) -> f64 {
    assert_eq!(
        true_dist.len(),
        pred_dist.len(),
        "cross_entropy length mismatch: {} vs {}",
        true_dist.len(),
        pred_dist.len()
    );
    let mut loss = 0.0;
    for k in 0..true_dist.len() {
        if true_dist[k] != 0.0 {
            let q = pred_dist[k].clamp(1e-12, 1.0);
            loss -= true_dist[k] * q.ln();
        }
    }
    loss
}

/// λ times the sum of squares over every weight-matrix entry.
pub fn l2_penalty(params: &ModelParams, lambda: f64) -> f64 {
    assert!(lambda >= 0.0, "l2 strength must be nonnegative, got {lambda}");
    if lambda == 0.0 {
        return 0.0;
    }
    let sum: f64 = params
        .tensor_views()
        .iter()
        .filter(|t| t.is_weight)
        .flat_map(|t| t.data.iter().map(|w| w * w))
        .sum();
    lambda * sum
}

/// Add the analytic regularization gradient 2λw to `grads` (weights only).
pub fn add_l2_gradient(grads: &mut Gradients, params: &ModelParams, lambda: f64) {
    if lambda == 0.0 {
        return;
    }
    let weight_flags: Vec<bool> = params.tensor_views().iter().map(|t| t.is_weight).collect();
    let weights: Vec<Vec<f64>> = params
        .tensor_views()
        .iter()
        .map(|t| t.data.to_vec())
        .collect();
    for ((g, w), is_weight) in grads
        .tensor_data_mut()
        .into_iter()
        .zip(&weights)
        .zip(&weight_flags)
    {
        if !is_weight {
            continue;
        }
        assert_eq!(g.len(), w.len(), "gradient/parameter shape mismatch");
        for (gi, wi) in g.iter_mut().zip(w) {
            *gi += 2.0 * lambda * wi;
        }
    }
}

/// Data term, regularization term, and their sum for one prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub data_loss: f64,
    pub reg_loss: f64,
    pub total: f64,
}

/// Cross-entropy of `probs` against the one-hot `label` plus the L2 term.
pub fn total_loss(probs: &Vector, label: usize, params: &ModelParams, lambda: f64) -> LossBreakdown {
    let target = crate::model::one_hot(label, probs.len());
    let data_loss = cross_entropy(&target, probs);
    let reg_loss = l2_penalty(params, lambda);
    LossBreakdown {
        data_loss,
        reg_loss,
        total: data_loss + reg_loss,
    }
}

/// First/second moment buffers and step counter for Adam, shaped after the
/// model's canonical tensor sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub lr: f64,
}

impl AdamState {
    /// Fresh zeroed state for `params` with default decay rates. A zero
    /// learning rate is legal (it turns training into a parameter-preserving
    /// dry run); a negative one is not.
    pub fn new(params: &ModelParams, lr: f64) -> Result<Self> {
        if lr < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be nonnegative, got {lr}"
            )));
        }
        let shapes: Vec<usize> = params.tensor_views().iter().map(|t| t.data.len()).collect();
        Ok(AdamState {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            epsilon: ADAM_EPSILON,
            lr,
        })
    }
}

/// One Adam step on a single tensor. `t` is the already-incremented step
/// counter shared by every tensor of the same update.
pub fn adam_update_slice(
    m: &mut [f64],
    v: &mut [f64],
    w: &mut [f64],
    g: &[f64],
    t: u64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    lr: f64,
) {
    assert!(
        m.len() == w.len() && v.len() == w.len() && g.len() == w.len(),
        "adam buffers/grads length mismatch: m {} v {} w {} g {}",
        m.len(),
        v.len(),
        w.len(),
        g.len()
    );
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    for idx in 0..w.len() {
        m[idx] = beta1 * m[idx] + (1.0 - beta1) * g[idx];
        v[idx] = beta2 * v[idx] + (1.0 - beta2) * g[idx] * g[idx];
        let m_hat = m[idx] / bc1;
        let v_hat = v[idx] / bc2;
        w[idx] -= lr * m_hat / (v_hat.sqrt() + epsilon);
    }
}

/// One Adam step over the whole model: t ← t+1, then the standard
/// bias-corrected moment update per coordinate.
pub fn adam_update(state: &mut AdamState, params: &mut ModelParams, grads: &Gradients) {
    let grad_data: Vec<Vec<f64>> = grads.tensor_views().iter().map(|t| t.data.to_vec()).collect();
    let param_slices = params.tensor_data_mut();
    assert_eq!(
        state.m.len(),
        param_slices.len(),
        "adam state holds {} tensors, model has {}",
        state.m.len(),
        param_slices.len()
    );
    assert_eq!(grad_data.len(), param_slices.len(), "gradient tensor count mismatch");
    state.t += 1;
    for (((m, v), w), g) in state
        .m
        .iter_mut()
        .zip(state.v.iter_mut())
        .zip(param_slices)
        .zip(&grad_data)
    {
        adam_update_slice(
            m,
            v,
            w,
            g,
            state.t,
            state.beta1,
            state.beta2,
            state.epsilon,
            state.lr,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use rand::Rng;

    fn scalar_state() -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        (vec![0.0], vec![0.0], vec![0.0])
    }

    #[test]
    fn cross_entropy_reference_values() {
        let p10 = Vector::from_vec(vec![1.0, 0.0]);
        let p01 = Vector::from_vec(vec![0.0, 1.0]);
        assert_eq!(cross_entropy(&p10, &Vector::from_vec(vec![1.0, 0.0])), 0.0);
        let half = cross_entropy(&p10, &Vector::from_vec(vec![0.5, 0.5]));
        assert!((half - 0.6931471805599453).abs() < 1e-15);
        let wrong = cross_entropy(&p01, &Vector::from_vec(vec![0.9, 0.1]));
        assert!((wrong - 2.3025850929940455).abs() < 1e-14);
    }

    #[test]
    fn cross_entropy_clamps_zero_probability() {
        let p = Vector::from_vec(vec![1.0, 0.0]);
        let q = Vector::from_vec(vec![0.0, 1.0]);
        let loss = cross_entropy(&p, &q);
        assert!(loss.is_finite());
        assert!((loss - (-(1e-12f64).ln())).abs() < 1e-9);
    }

    #[test]
    #[should_panic(expected = "cross_entropy length mismatch")]
    fn cross_entropy_rejects_length_mismatch() {
        cross_entropy(&Vector::zeros(2), &Vector::zeros(3));
    }

    #[test]
    fn l2_penalty_reference_values() {
        let mut params = ModelParams::zeros(1, 1, None, 2);
        assert_eq!(l2_penalty(&params, 0.0), 0.0);
        // Single nonzero weight of 2.0.
        params.lstm.w_xi.set(0, 0, 2.0);
        assert!((l2_penalty(&params, 0.0005) - 0.002).abs() < 1e-15);
        // Weights {1, −1, 2}.
        let mut params = ModelParams::zeros(2, 1, None, 2);
        params.lstm.w_xi.set(0, 0, 1.0);
        params.lstm.w_xf.set(0, 1, -1.0);
        params.head.w_out.set(1, 0, 2.0);
        assert!((l2_penalty(&params, 0.005) - 0.03).abs() < 1e-15);
    }

    #[test]
    fn l2_penalty_ignores_biases_and_sign() {
        let mut params = ModelParams::zeros(2, 3, None, 2);
        params.lstm.b_f = Vector::filled(3, 5.0);
        params.lstm.b_c = Vector::filled(3, -7.0);
        assert_eq!(l2_penalty(&params, 0.01), 0.0);
        let pos = init_params(3, 4, None, 5);
        let mut neg = pos.clone();
        neg.scale_assign(-1.0);
        assert_eq!(l2_penalty(&pos, 0.37), l2_penalty(&neg, 0.37));
    }

    #[test]
    fn total_loss_assembles_terms() {
        let params = ModelParams::zeros(2, 2, None, 2);
        let perfect = total_loss(&Vector::from_vec(vec![1.0, 0.0]), 0, &params, 0.0);
        assert_eq!(perfect.total, 0.0);
        let even = total_loss(&Vector::from_vec(vec![0.5, 0.5]), 1, &params, 0.0005);
        assert!((even.total - 0.6931471805599453).abs() < 1e-15);
        assert_eq!(even.reg_loss, 0.0);
        let mut params = params;
        params.lstm.w_hc.set(0, 0, 3.0);
        let with_reg = total_loss(&Vector::from_vec(vec![0.5, 0.5]), 1, &params, 0.1);
        assert!((with_reg.total - (with_reg.data_loss + with_reg.reg_loss)).abs() < 1e-12);
        assert!((with_reg.reg_loss - 0.9).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_parameters_bit_identical() {
        let mut params = init_params(3, 4, None, 11);
        let before = params.clone();
        let grads = params.zeros_like();
        let mut state = AdamState::new(&params, 0.001).unwrap();
        for _ in 0..5 {
            adam_update(&mut state, &mut params, &grads);
        }
        assert_eq!(params, before);
        assert_eq!(state.t, 5);
    }

    #[test]
    fn first_step_magnitude_matches_closed_form() {
        let (mut m, mut v, mut w) = scalar_state();
        adam_update_slice(&mut m, &mut v, &mut w, &[0.001], 1, ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON, 0.0001);
        let delta = w[0].abs();
        // m̂ = g, v̂ = g² on the first step, so |Δw| = lr·|g|/(|g|+ε).
        assert!((delta - 9.999900000999991e-5).abs() < 1e-17);
        let formula = 0.0001 * 0.001 / (0.001 + ADAM_EPSILON);
        assert!((delta - formula).abs() / formula < 1e-12);
    }

    #[test]
    fn two_identical_steps_match_hand_trace() {
        let (mut m, mut v, mut w) = scalar_state();
        for t in 1..=2 {
            adam_update_slice(&mut m, &mut v, &mut w, &[1.0], t, ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON, 0.001);
        }
        assert!((w[0] - (-0.001999999979999993)).abs() < 1e-12);
        assert!((w[0] - (-0.002 / (1.0 + ADAM_EPSILON))).abs() < 1e-12);
    }

    #[test]
    fn step_magnitude_stays_bounded_on_random_gradients() {
        let mut rng = crate::seeds::rng_for(4242, "adam-bound");
        let lr = 0.01;
        let (mut m, mut v, mut w) = (vec![0.0; 16], vec![0.0; 16], vec![0.0; 16]);
        for t in 1..=200u64 {
            let g: Vec<f64> = (0..16).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let before = w.clone();
            adam_update_slice(&mut m, &mut v, &mut w, &g, t, ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON, lr);
            for (after, before) in w.iter().zip(&before) {
                assert!((after - before).abs() <= 2.0 * lr);
            }
        }
        assert!(v.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn update_is_deterministic() {
        let run = || {
            let mut params = init_params(3, 4, None, 17);
            let mut grads = params.zeros_like();
            for t in grads.tensor_data_mut() {
                for (idx, g) in t.iter_mut().enumerate() {
                    *g = (idx as f64 * 0.37).sin();
                }
            }
            let mut state = AdamState::new(&params, 0.005).unwrap();
            for _ in 0..3 {
                adam_update(&mut state, &mut params, &grads);
            }
            params
        };
        let a = run();
        let b = run();
        for (ta, tb) in a.tensor_views().iter().zip(b.tensor_views()) {
            for (xa, xb) in ta.data.iter().zip(tb.data) {
                assert_eq!(xa.to_bits(), xb.to_bits());
            }
        }
    }

    #[test]
    fn negative_learning_rate_is_rejected_zero_allowed() {
        let params = ModelParams::zeros(2, 2, None, 2);
        assert!(AdamState::new(&params, -0.001).is_err());
        assert!(AdamState::new(&params, 0.0).is_ok());
    }

    #[test]
    fn l2_gradient_matches_finite_differences() {
        let params = init_params(2, 3, None, 23);
        let lambda = 0.01;
        let mut grads = params.zeros_like();
        add_l2_gradient(&mut grads, &params, lambda);
        let views = params.tensor_views();
        let eps = 1e-6;
        for (ti, view) in views.iter().enumerate() {
            for ei in 0..view.data.len() {
                let mut probe = params.clone();
                probe.tensor_data_mut()[ti][ei] += eps;
                let plus = l2_penalty(&probe, lambda);
                probe.tensor_data_mut()[ti][ei] -= 2.0 * eps;
                let minus = l2_penalty(&probe, lambda);
                let numeric = (plus - minus) / (2.0 * eps);
                let analytic = grads.tensor_views()[ti].data[ei];
                assert!(
                    (numeric - analytic).abs() < 1e-8,
                    "{}[{}]: {} vs {}",
                    view.name,
                    ei,
                    analytic,
                    numeric
                );
            }
        }
    }
}
