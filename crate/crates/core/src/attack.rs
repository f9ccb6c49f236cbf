//! L∞ projected-gradient attacks on policy networks.
//!
//! The attack maximizes the cross-entropy of the policy's output against
//! the action the clean observation would have taken, by iterated signed
//! gradient ascent projected onto the ε-ball around the clean input
//! intersected with the pixel box [0,1].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::policy::{ActionDistribution, Observation, PolicyNetwork};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::{Tensor, TensorError, TensorResult};

/// Default ε grid for evaluation sweeps.
pub const DEFAULT_EPSILON_GRID: [f64; 4] = [0.01, 0.05, 0.1, 0.5];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackLoss {
    /// Cross-entropy against the argmax action on the clean input.
    #[default]
    CeVsCleanArgmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    /// L∞ radius in normalized pixel units.
    pub epsilon: f64,
    /// Step size α; when absent, 2.5·ε/iterations.
    pub step_size: Option<f64>,
    pub iterations: usize,
    pub random_start: bool,
    pub loss: AttackLoss,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            step_size: None,
            iterations: 10,
            random_start: false,
            loss: AttackLoss::CeVsCleanArgmax,
        }
    }
}

impl AttackConfig {
    pub fn new(epsilon: f64) -> Self {
        Self {
            epsilon,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> TensorResult<()> {
        if !self.epsilon.is_finite() || self.epsilon < 0.0 {
            return Err(TensorError::InvalidArgument {
                context: "attack config",
                message: format!("epsilon {} must be finite and non-negative", self.epsilon),
            });
        }
        if self.iterations > 0 && self.resolved_step_size() <= 0.0 && self.epsilon > 0.0 {
            return Err(TensorError::InvalidArgument {
                context: "attack config",
                message: "step size must be positive when iterating".to_string(),
            });
        }
        Ok(())
    }

    pub fn resolved_step_size(&self) -> f64 {
        match self.step_size {
            Some(a) => a,
            None if self.iterations == 0 => 0.0,
            None => 2.5 * self.epsilon / self.iterations as f64,
        }
    }
}

/// A perturbed observation together with attack diagnostics.
#[derive(Debug, Clone)]
pub struct AdversarialObservation<E: Scalar = f32> {
    pub observation: Observation<E>,
    pub linf_distance: E,
    pub iterations_used: usize,
    pub loss_trace: Vec<f64>,
}

/// One signed-ascent step plus projection, driven by a caller-supplied
/// gradient oracle (the attack loss gradient at the current iterate).
fn pgd_iterate<E: Scalar>(
    s: &Tensor<E>,
    cfg: &AttackConfig,
    start: Tensor<E>,
    mut grad_and_loss: impl FnMut(&Tensor<E>) -> TensorResult<(Tensor<E>, f64)>,
) -> TensorResult<AdversarialObservation<E>> {
    let eps = E::from_f64(cfg.epsilon);
    let alpha = E::from_f64(cfg.resolved_step_size());
    let project = |x: Tensor<E>| -> Tensor<E> {
        let mut x = x;
        let data = x.data_mut();
        for (v, &si) in data.iter_mut().zip(s.data()) {
            let lo = (si - eps).max(E::zero());
            let hi = (si + eps).min(E::one());
            *v = (*v).max(lo).min(hi);
        }
        x
    };

    let mut x = project(start);
    let mut trace = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let (g, loss) = grad_and_loss(&x)?;
        if !g.all_finite() {
            return Err(TensorError::NonFinite {
                context: "attack gradient",
            });
        }
        trace.push(loss);
        let stepped = Tensor::from_fn(x.shape(), |i| {
            let gi = g.data()[i];
            let sign = if gi > E::zero() {
                E::one()
            } else if gi < E::zero() {
                -E::one()
            } else {
                E::zero()
            };
            x.data()[i] + alpha * sign
        });
        x = project(stepped);
    }
    let linf = x.linf_distance(s);
    Ok(AdversarialObservation {
        observation: x,
        linf_distance: linf,
        iterations_used: cfg.iterations,
        loss_trace: trace,
    })
}

/// Adversarial observation s_A within ε of s under the L∞ norm.
///
/// The label is the clean argmax action, fixed before iterating. With
/// `random_start` the iterate starts uniformly inside the ball, drawn
/// from `rng`; otherwise the attack is fully deterministic and `rng` is
/// untouched. ε = 0 returns the input bit-exactly.
pub fn pgd_attack<E: Scalar, R: Rng + ?Sized>(
    net: &PolicyNetwork<E>,
    s: &Observation<E>,
    cfg: &AttackConfig,
    rng: &mut R,
) -> TensorResult<AdversarialObservation<E>> {
    cfg.validate()?;
    if cfg.epsilon == 0.0 {
        return Ok(AdversarialObservation {
            observation: s.clone(),
            linf_distance: E::zero(),
            iterations_used: 0,
            loss_trace: Vec::new(),
        });
    }
    let (clean, _) = net.forward(s)?;
    let label = clean.argmax();

    let start = if cfg.random_start {
        let eps = E::from_f64(cfg.epsilon);
        let two = E::from_f64(2.0);
        Tensor::from_fn(s.shape(), |i| {
            let u = E::sample_uniform(rng);
            s.data()[i] + (u * two - E::one()) * eps
        })
    } else {
        s.clone()
    };

    let batched = net.batchify(s, 1)?;
    let obs_shape = batched.shape().to_vec();
    pgd_iterate(s, cfg, start, |x| {
        let tape = Tape::new();
        let bound = net.bind(&tape, false);
        let xv = tape.leaf(x.reshape(&obs_shape)?, true);
        let out = bound.run(&tape, xv, 1, net.num_layers())?;
        let lp = tape.log_softmax(out.out, 1)?;
        let picked = tape.gather_rows(lp, &[label])?;
        let nll = tape.sum(picked);
        let loss = tape.scale(nll, -E::one());
        let loss_val = tape.value(loss).item().to_f64();
        let grads = tape.backward(loss)?;
        Ok((grads.wrt(xv).reshape(s.shape())?, loss_val))
    })
}

/// True when the attack switched the argmax action (ties go to the
/// lowest index on both sides).
pub fn attack_success<E: Scalar>(
    clean: &ActionDistribution<E>,
    attacked: &ActionDistribution<E>,
) -> bool {
    clean.argmax() != attacked.argmax()
}
