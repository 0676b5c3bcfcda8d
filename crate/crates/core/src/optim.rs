//! Local optimizers: heavy-ball SGD and sharpness-aware minimization (SAM).
//!
//! Both share the update `v <- mu * v + g; w <- w - lr * v`. SAM differs only
//! in which gradient is fed in: the gradient at the ascent point
//! `w + rho * g / ||g||`, evaluated on the same minibatch as `g`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Batch, Objective, ParameterVector};

/// Gradients with norm at or below this are treated as having no direction.
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    /// Base learning rate.
    pub lr: f64,
    /// Inverse-time decay applied per communication round.
    pub lr_decay: f64,
    pub momentum: f64,
    /// SAM perturbation radius. Ignored by plain SGD.
    pub rho: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            lr_decay: 0.005,
            momentum: 0.5,
            rho: 0.5,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(
                "lr",
                format!("must be finite and >= 0, got {}", self.lr),
            ));
        }
        if !(self.lr_decay >= 0.0 && self.lr_decay.is_finite()) {
            return Err(Error::invalid(
                "lr_decay",
                format!("must be finite and >= 0, got {}", self.lr_decay),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(
                "momentum",
                format!("must lie in [0, 1), got {}", self.momentum),
            ));
        }
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return Err(Error::invalid(
                "rho",
                format!("must be finite and >= 0, got {}", self.rho),
            ));
        }
        Ok(())
    }

    /// `lr / (1 + decay * round)`, constant within a round.
    pub fn learning_rate(&self, round: usize) -> f64 {
        self.lr / (1.0 + self.lr_decay * round as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    velocity: ParameterVector,
    steps: u64,
    lr: f64,
    config: OptimizerConfig,
}

impl OptimizerState {
    /// Fresh state for communication round `round`: zero momentum, the
    /// round's scheduled learning rate.
    pub fn new(num_params: usize, config: OptimizerConfig, round: usize) -> Self {
        Self {
            velocity: ParameterVector::zeros(num_params),
            steps: 0,
            lr: config.learning_rate(round),
            config,
        }
    }

    pub fn velocity(&self) -> &ParameterVector {
        &self.velocity
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    fn apply(&mut self, w: &ParameterVector, grad: &ParameterVector) -> ParameterVector {
        let mu = self.config.momentum;
        let mut next = w.clone();
        for ((v, g), x) in self
            .velocity
            .iter_mut()
            .zip(grad.iter())
            .zip(next.iter_mut())
        {
            *v = mu * *v + g;
            *x -= self.lr * *v;
        }
        self.steps += 1;
        next
    }
}

/// Result of one local step: the new parameters and the minibatch loss at
/// the pre-step parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub params: ParameterVector,
    pub loss: f64,
}

/// `rho * g / ||g||`, or zero when `||g|| <= DEGENERATE_NORM`.
pub fn sam_perturbation(grad: &[f64], rho: f64) -> ParameterVector {
    let norm = crate::nn::l2_norm(grad);
    if norm <= DEGENERATE_NORM {
        return ParameterVector::zeros(grad.len());
    }
    let scale = rho / norm;
    ParameterVector::new(grad.iter().map(|g| g * scale).collect())
}

pub fn sgd_step<O: Objective + ?Sized>(
    objective: &O,
    w: &ParameterVector,
    state: &mut OptimizerState,
    batch: &Batch,
) -> Result<Step> {
    let (loss, grad) = objective.loss_and_grad(w, batch)?;
    let params = state.apply(w, &grad);
    Ok(Step { params, loss })
}

pub fn sam_step<O: Objective + ?Sized>(
    objective: &O,
    w: &ParameterVector,
    state: &mut OptimizerState,
    batch: &Batch,
) -> Result<Step> {
    let (loss, grad) = objective.loss_and_grad(w, batch)?;
    let delta = sam_perturbation(&grad, state.config.rho);
    let ascent = w.add_scaled(1.0, &delta);
    let (_, sharp_grad) = objective.loss_and_grad(&ascent, batch)?;
    let params = state.apply(w, &sharp_grad);
    Ok(Step { params, loss })
}

#[cfg(test)]
#[allow(clippy::single_range_in_vec_init)]
mod tests {
    use super::*;
    use crate::nn::{init_params, MlpArchitecture};

    fn batch() -> Batch {
        Batch::new(
            vec![0.2, -0.4, 1.0, 0.7, -0.1, 0.3, 0.9, -1.2, 0.0],
            3,
            vec![0, 2, 1],
        )
        .unwrap()
    }

    fn cfg(momentum: f64, rho: f64) -> OptimizerConfig {
        OptimizerConfig {
            lr: 0.1,
            lr_decay: 0.0,
            momentum,
            rho,
        }
    }

    #[test]
    fn perturbation_examples() {
        let d = sam_perturbation(&[3.0, 4.0], 0.5);
        assert!((d[0] - 0.3).abs() < 1e-15 && (d[1] - 0.4).abs() < 1e-15);
        assert_eq!(
            sam_perturbation(&[0.0, 0.0], 0.7).as_ref() as &[f64],
            &[0.0, 0.0]
        );
        let d = sam_perturbation(&[1e-3, -2.0, 7.5, 0.25], 0.37);
        assert!((d.norm() - 0.37).abs() < 1e-12);
    }

    #[test]
    fn sgd_without_momentum_is_plain_descent() {
        let arch = MlpArchitecture::relu(&[3, 4, 3]).unwrap();
        let w = init_params(&arch, 5);
        let mut state = OptimizerState::new(arch.num_params(), cfg(0.0, 0.0), 0);
        let step = sgd_step(&arch, &w, &mut state, &batch()).unwrap();
        let (_, g) = arch.loss_and_grad(&w, &batch()).unwrap();
        let expected = w.add_scaled(-0.1, &g);
        for (a, b) in step.params.iter().zip(expected.iter()) {
            assert_eq!(a, b);
        }
        assert_eq!(state.steps(), 1);
    }

    #[test]
    fn halving_lr_halves_displacement() {
        let arch = MlpArchitecture::relu(&[3, 4, 3]).unwrap();
        let w = init_params(&arch, 5);
        let mut full = OptimizerState::new(arch.num_params(), cfg(0.0, 0.0), 0);
        let mut half = OptimizerState::new(
            arch.num_params(),
            OptimizerConfig {
                lr: 0.05,
                ..cfg(0.0, 0.0)
            },
            0,
        );
        let a = sgd_step(&arch, &w, &mut full, &batch())
            .unwrap()
            .params
            .sub(&w);
        let b = sgd_step(&arch, &w, &mut half, &batch())
            .unwrap()
            .params
            .sub(&w);
        // Differences against w carry rounding on the scale of |w|.
        for ((x, y), w0) in a.iter().zip(b.iter()).zip(w.iter()) {
            assert!((x - 2.0 * y).abs() <= 1e-15 * (1.0 + w0.abs()));
        }
    }

    struct Flat;

    impl Objective for Flat {
        fn num_params(&self) -> usize {
            4
        }
        fn loss(&self, _: &[f64], _: &Batch) -> Result<f64> {
            Ok(1.0)
        }
        fn loss_and_grad(&self, _: &[f64], _: &Batch) -> Result<(f64, ParameterVector)> {
            Ok((1.0, ParameterVector::zeros(4)))
        }
        fn param_blocks(&self) -> Vec<std::ops::Range<usize>> {
            vec![0..4]
        }
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let w = ParameterVector::new(vec![0.3, -1.0, 2.5, 0.0]);
        let mut state = OptimizerState::new(4, cfg(0.5, 0.5), 0);
        let step = sgd_step(&Flat, &w, &mut state, &batch()).unwrap();
        assert_eq!(step.params, w);
        let step = sam_step(&Flat, &w, &mut state, &batch()).unwrap();
        assert_eq!(step.params, w);
    }

    #[test]
    fn sam_with_zero_radius_matches_sgd_bitwise() {
        let arch = MlpArchitecture::relu(&[3, 6, 3]).unwrap();
        let w = init_params(&arch, 8);
        let mut s1 = OptimizerState::new(arch.num_params(), cfg(0.5, 0.0), 3);
        let mut s2 = s1.clone();
        let mut w1 = w.clone();
        let mut w2 = w.clone();
        for _ in 0..4 {
            w1 = sgd_step(&arch, &w1, &mut s1, &batch()).unwrap().params;
            w2 = sam_step(&arch, &w2, &mut s2, &batch()).unwrap().params;
        }
        assert_eq!(w1, w2);
        assert_eq!(s1, s2);
    }

    /// `0.5 * sum_i a_i w_i^2`.
    struct Diagonal(Vec<f64>);

    impl Objective for Diagonal {
        fn num_params(&self) -> usize {
            self.0.len()
        }
        fn loss(&self, w: &[f64], _: &Batch) -> Result<f64> {
            Ok(0.5 * self.0.iter().zip(w).map(|(a, x)| a * x * x).sum::<f64>())
        }
        fn loss_and_grad(&self, w: &[f64], b: &Batch) -> Result<(f64, ParameterVector)> {
            let g = self.0.iter().zip(w).map(|(a, x)| a * x).collect();
            Ok((self.loss(w, b)?, ParameterVector::new(g)))
        }
        fn param_blocks(&self) -> Vec<std::ops::Range<usize>> {
            vec![0..self.0.len()]
        }
    }

    #[test]
    fn sam_on_quadratic_matches_closed_form() {
        let a = vec![4.0, 1.0, 0.25];
        let w = ParameterVector::new(vec![0.5, -1.0, 2.0]);
        let mut state = OptimizerState::new(3, cfg(0.0, 0.3), 0);
        let step = sam_step(&Diagonal(a.clone()), &w, &mut state, &batch()).unwrap();
        let g: Vec<f64> = a.iter().zip(w.iter()).map(|(a, x)| a * x).collect();
        let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        for i in 0..3 {
            let expected = w[i] - 0.1 * a[i] * (w[i] + 0.3 * g[i] / gn);
            assert!((step.params[i] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn sam_is_deterministic() {
        let arch = MlpArchitecture::relu(&[3, 6, 3]).unwrap();
        let w = init_params(&arch, 8);
        let mut s1 = OptimizerState::new(arch.num_params(), cfg(0.5, 0.5), 0);
        let mut s2 = s1.clone();
        let a = sam_step(&arch, &w, &mut s1, &batch()).unwrap();
        let b = sam_step(&arch, &w, &mut s2, &batch()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn schedule_is_monotone_and_positive() {
        let c = OptimizerConfig::default();
        let rates: Vec<f64> = (0..1000).map(|t| c.learning_rate(t)).collect();
        assert_eq!(rates[0], 0.1);
        assert!(rates.windows(2).all(|p| p[1] <= p[0]));
        assert!(rates.iter().all(|&r| r > 0.0));
        assert!((c.learning_rate(200) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(OptimizerConfig::default().validate().is_ok());
        assert!(cfg(1.0, 0.1).validate().is_err());
        assert!(cfg(0.5, -0.1).validate().is_err());
        assert!(OptimizerConfig {
            lr: f64::NAN,
            ..cfg(0.0, 0.0)
        }
        .validate()
        .is_err());
    }
}
