//! PPO with a clipped surrogate objective, generalized advantage
//! estimation, and an optional adversarial rollout schedule that perturbs
//! every k-th observation with the white-box attack before the policy
//! acts on it.
//!
//! Hyper-parameter defaults follow the common published PPO values
//! (clip 0.2, GAE λ 0.95, γ 0.99, lr 2.5e-4, Adam ε 1e-5, value coef 0.5,
//! entropy coef 0.01, gradient norm clip 0.5).

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{pgd_attack, AttackConfig};
use crate::env::{Action, CatchEnv, EnvConfig};
use crate::policy::PolicyNetwork;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::{Tensor, TensorError, TensorResult};

/// Completed episodes considered by the rolling reward mean.
pub const REWARD_WINDOW: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdvTraining {
    pub attack: AttackConfig,
    /// Attack every k-th rollout step (0-based indices 0, k, 2k, ...).
    pub every_k: usize,
}

impl Default for AdvTraining {
    fn default() -> Self {
        Self {
            attack: AttackConfig::default(),
            every_k: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub rollout_len: usize,
    pub minibatch_size: usize,
    pub epochs: usize,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_ratio: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub learning_rate: f64,
    pub adam_epsilon: f64,
    pub max_grad_norm: Option<f64>,
    pub adv_training: Option<AdvTraining>,
    /// Stop once the rolling episode-reward mean reaches this value.
    pub early_stop_reward: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 200_000,
            rollout_len: 320,
            minibatch_size: 64,
            epochs: 4,
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_ratio: 0.2,
            entropy_coef: 0.01,
            value_coef: 0.5,
            learning_rate: 2.5e-4,
            adam_epsilon: 1e-5,
            max_grad_norm: Some(0.5),
            adv_training: None,
            early_stop_reward: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> TensorResult<()> {
        let err = |message: String| {
            Err(TensorError::InvalidArgument {
                context: "train config",
                message,
            })
        };
        if self.rollout_len == 0 || self.minibatch_size == 0 {
            return err("rollout and minibatch sizes must be positive".to_string());
        }
        if self.rollout_len % self.minibatch_size != 0 {
            return err(format!(
                "rollout length {} must be divisible by minibatch size {}",
                self.rollout_len, self.minibatch_size
            ));
        }
        if self.epochs == 0 {
            return err("need at least one epoch per update".to_string());
        }
        for (name, v) in [("gamma", self.gamma), ("gae_lambda", self.gae_lambda)] {
            if !(0.0..=1.0).contains(&v) {
                return err(format!("{name} {v} outside [0,1]"));
            }
        }
        if !(self.clip_ratio > 0.0) || !(self.learning_rate > 0.0) || !(self.adam_epsilon > 0.0) {
            return err("clip ratio, learning rate, and Adam epsilon must be positive".to_string());
        }
        if let Some(adv) = &self.adv_training {
            if adv.every_k == 0 {
                return err("adversarial schedule needs every_k >= 1".to_string());
            }
            adv.attack.validate()?;
        }
        Ok(())
    }
}

/// Per-step advantage and return targets from the GAE recursion
/// δ_t = r_t + γ·V_{t+1}·(1−done_t) − V_t, accumulated right to left
/// with factor γλ·(1−done_t). `values` carries one bootstrap extra.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    gamma: f64,
    lambda: f64,
) -> TensorResult<(Vec<f64>, Vec<f64>)> {
    if values.len() != rewards.len() + 1 || dones.len() != rewards.len() {
        return Err(TensorError::InvalidArgument {
            context: "gae",
            message: format!(
                "lengths: rewards {}, values {} (want rewards+1), dones {}",
                rewards.len(),
                values.len(),
                dones.len()
            ),
        });
    }
    let t = rewards.len();
    let mut advantages = vec![0.0; t];
    let mut acc = 0.0;
    for i in (0..t).rev() {
        let cont = if dones[i] { 0.0 } else { 1.0 };
        let delta = rewards[i] + gamma * values[i + 1] * cont - values[i];
        acc = delta + gamma * lambda * cont * acc;
        advantages[i] = acc;
    }
    let returns = advantages.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((advantages, returns))
}

/// One rollout of stored transitions. Observations are the (possibly
/// attacked) tensors the policy actually sampled from.
#[derive(Debug, Clone, Default)]
pub struct RolloutBuffer {
    pub observations: Vec<Tensor<f32>>,
    pub actions: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub dones: Vec<bool>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    pub attacked: Vec<bool>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn attacked_fraction(&self) -> f64 {
        if self.attacked.is_empty() {
            return 0.0;
        }
        self.attacked.iter().filter(|&&a| a).count() as f64 / self.attacked.len() as f64
    }
}

/// Collect `rollout_len` transitions, sampling actions from the current
/// policy. Under an adversarial schedule, observations at rollout indices
/// 0, k, 2k, ... are replaced by the white-box attack on the current
/// parameters before the action is sampled. Episode rewards completed
/// during the rollout are appended to `completed`.
pub fn collect_rollout(
    net: &PolicyNetwork<f32>,
    env: &mut CatchEnv,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    episode_acc: &mut f64,
    completed: &mut Vec<f64>,
) -> TensorResult<RolloutBuffer> {
    let mut buf = RolloutBuffer::default();
    for t in 0..cfg.rollout_len {
        let clean = env.observation().clone();
        let mut attacked = false;
        let obs = match &cfg.adv_training {
            Some(adv) if t % adv.every_k == 0 => {
                attacked = true;
                pgd_attack(net, &clean, &adv.attack, rng)?.observation
            }
            _ => clean,
        };
        let (dist, value) = net.forward(&obs)?;
        let action = dist.sample(rng);
        let log_prob = dist.log_prob(action).to_f64();

        let action = Action::from_index(action).ok_or_else(|| TensorError::InvalidArgument {
            context: "rollout",
            message: format!("policy chose action {action}, env has {}", Action::COUNT),
        })?;
        let (_, reward, done) = env.step(action)?;
        *episode_acc += reward as f64;

        buf.observations.push(obs);
        buf.actions.push(action.index());
        buf.log_probs.push(log_prob);
        buf.rewards.push(reward as f64);
        buf.values.push(value.to_f64());
        buf.dones.push(done);
        buf.attacked.push(attacked);

        if done {
            completed.push(*episode_acc);
            *episode_acc = 0.0;
            let seed = rng.gen();
            env.reset(seed)?;
        }
    }
    let bootstrap = if *buf.dones.last().expect("non-empty rollout") {
        0.0
    } else {
        net.forward(env.observation())?.1.to_f64()
    };
    let mut values = buf.values.clone();
    values.push(bootstrap);
    let (advantages, returns) = gae(&buf.rewards, &values, &buf.dones, cfg.gamma, cfg.gae_lambda)?;
    buf.advantages = advantages;
    buf.returns = returns;
    Ok(buf)
}

/// Adam with bias correction; moment buffers are shaped lazily from the
/// first gradients it sees.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
}

impl Adam {
    pub fn new(lr: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(
        &mut self,
        params: Vec<&mut Tensor<f32>>,
        grads: &[Tensor<f32>],
    ) -> TensorResult<()> {
        if params.len() != grads.len() {
            return Err(TensorError::InvalidArgument {
                context: "adam",
                message: format!("{} params but {} gradients", params.len(), grads.len()),
            });
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != grads.len() {
            return Err(TensorError::InvalidArgument {
                context: "adam",
                message: format!(
                    "optimizer tracks {} tensors, got {}",
                    self.m.len(),
                    grads.len()
                ),
            });
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(TensorError::InvalidArgument {
                    context: "adam",
                    message: format!(
                        "param {i}: shape {:?} vs gradient {:?}",
                        p.shape(),
                        g.shape()
                    ),
                });
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let pd = p.data_mut();
            for ((pj, gj), (mj, vj)) in pd.iter_mut().zip(g.data()).zip(m.iter_mut().zip(v.iter_mut())) {
                let g64 = *gj as f64;
                let m64 = self.beta1 * *mj as f64 + (1.0 - self.beta1) * g64;
                let v64 = self.beta2 * *vj as f64 + (1.0 - self.beta2) * g64 * g64;
                *mj = m64 as f32;
                *vj = v64 as f32;
                let update = self.lr * (m64 / bc1) / ((v64 / bc2).sqrt() + self.eps);
                *pj = (*pj as f64 - update) as f32;
            }
        }
        Ok(())
    }
}

/// Scale gradients so their global L2 norm is at most `max_norm`;
/// returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Tensor<f32>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter().map(|&x| (x as f64) * (x as f64)))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = (max_norm / (norm + 1e-6)) as f32;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= scale;
            }
        }
    }
    norm
}

/// Minibatch-averaged statistics of one update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
}

/// One PPO update: `epochs` passes of shuffled minibatches minimizing
/// −E[min(ρÂ, clip(ρ)Â)] + c_v·MSE(V, returns) − c_e·H(π), with
/// advantages normalized per minibatch. A non-finite loss aborts before
/// touching the parameters of that minibatch.
pub fn ppo_update(
    net: &mut PolicyNetwork<f32>,
    buffer: &RolloutBuffer,
    cfg: &TrainConfig,
    adam: &mut Adam,
    rng: &mut ChaCha8Rng,
) -> TensorResult<UpdateStats> {
    let n = buffer.len();
    if n == 0 || n % cfg.minibatch_size != 0 {
        return Err(TensorError::InvalidArgument {
            context: "ppo update",
            message: format!(
                "buffer length {n} must be a positive multiple of minibatch size {}",
                cfg.minibatch_size
            ),
        });
    }
    let obs_shape = buffer.observations[0].shape().to_vec();
    let obs_numel: usize = obs_shape.iter().product();
    let b = cfg.minibatch_size;
    let inv_b = 1.0 / b as f32;

    let mut totals = UpdateStats {
        policy_loss: 0.0,
        value_loss: 0.0,
        entropy: 0.0,
        clip_fraction: 0.0,
    };
    let mut batches = 0usize;

    let mut indices: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.epochs {
        indices.shuffle(rng);
        for chunk in indices.chunks(b) {
            let mut obs_data = Vec::with_capacity(b * obs_numel);
            for &i in chunk {
                obs_data.extend_from_slice(buffer.observations[i].data());
            }
            let mut batched_shape = vec![b];
            batched_shape.extend_from_slice(&obs_shape);
            let obs_batch = Tensor::from_vec(&batched_shape, obs_data)?;

            let actions: Vec<usize> = chunk.iter().map(|&i| buffer.actions[i]).collect();
            let old_lp: Vec<f32> = chunk.iter().map(|&i| buffer.log_probs[i] as f32).collect();
            let returns: Vec<f32> = chunk.iter().map(|&i| buffer.returns[i] as f32).collect();

            let raw_adv: Vec<f64> = chunk.iter().map(|&i| buffer.advantages[i]).collect();
            let mean = raw_adv.iter().sum::<f64>() / b as f64;
            let std = (raw_adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / b as f64).sqrt();
            let adv: Vec<f32> = raw_adv
                .iter()
                .map(|a| ((a - mean) / (std + 1e-8)) as f32)
                .collect();

            let tape = Tape::new();
            let bound = net.bind(&tape, true);
            let x = tape.constant(obs_batch);
            let out = bound.run(&tape, x, 1, net.num_layers())?;
            let value = out.value.ok_or(TensorError::InvalidArgument {
                context: "ppo update",
                message: "network has no value head".to_string(),
            })?;

            let lp_all = tape.log_softmax(out.out, 1)?;
            let lp_taken = tape.gather_rows(lp_all, &actions)?;
            let lp_old = tape.constant(Tensor::from_vec(&[b], old_lp)?);
            let ratio = tape.exp(tape.sub(lp_taken, lp_old)?);

            let adv_var = tape.constant(Tensor::from_vec(&[b], adv)?);
            let surr_raw = tape.mul(ratio, adv_var)?;
            let clipped = tape.clamp(
                ratio,
                1.0 - cfg.clip_ratio as f32,
                1.0 + cfg.clip_ratio as f32,
            )?;
            let surr_clipped = tape.mul(clipped, adv_var)?;
            let surrogate = tape.min(surr_raw, surr_clipped)?;
            let policy_loss = tape.scale(tape.sum(surrogate), -inv_b);

            let ret_var = tape.constant(Tensor::from_vec(&[b], returns)?);
            let vdiff = tape.sub(value, ret_var)?;
            let vsq = tape.mul(vdiff, vdiff)?;
            let value_loss = tape.scale(tape.sum(vsq), inv_b);

            let probs = tape.softmax(out.out, 1)?;
            let plogp = tape.mul(probs, lp_all)?;
            let entropy = tape.scale(tape.sum(plogp), -inv_b);

            let weighted_value = tape.scale(value_loss, cfg.value_coef as f32);
            let weighted_entropy = tape.scale(entropy, -(cfg.entropy_coef as f32));
            let loss = tape.add(tape.add(policy_loss, weighted_value)?, weighted_entropy)?;

            let loss_val = tape.value(loss).item();
            if !loss_val.is_finite() {
                return Err(TensorError::NonFinite {
                    context: "ppo update loss",
                });
            }
            let grads = tape.backward(loss)?;
            let mut grad_list: Vec<Tensor<f32>> = bound
                .param_vars()
                .into_iter()
                .map(|v| grads.wrt(v))
                .collect();
            if let Some(max_norm) = cfg.max_grad_norm {
                clip_global_norm(&mut grad_list, max_norm);
            }
            adam.step(net.params_mut(), &grad_list)?;

            let ratio_vals = tape.value(ratio);
            let clip_frac = ratio_vals
                .data()
                .iter()
                .filter(|&&r| (r - 1.0).abs() > cfg.clip_ratio as f32)
                .count() as f64
                / b as f64;

            totals.policy_loss += tape.value(policy_loss).item() as f64;
            totals.value_loss += tape.value(value_loss).item() as f64;
            totals.entropy += tape.value(entropy).item() as f64;
            totals.clip_fraction += clip_frac;
            batches += 1;
        }
    }
    let k = batches as f64;
    Ok(UpdateStats {
        policy_loss: totals.policy_loss / k,
        value_loss: totals.value_loss / k,
        entropy: totals.entropy / k,
        clip_fraction: totals.clip_fraction / k,
    })
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRow {
    pub update_index: usize,
    pub env_steps: usize,
    pub mean_episode_reward: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub attacked_step_fraction: f64,
}

pub fn history_to_csv(rows: &[TrainRow]) -> String {
    let mut out = String::from(
        "update_index,env_steps,mean_episode_reward,policy_loss,value_loss,\
         entropy,clip_fraction,attacked_step_fraction\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.update_index,
            r.env_steps,
            r.mean_episode_reward,
            r.policy_loss,
            r.value_loss,
            r.entropy,
            r.clip_fraction,
            r.attacked_step_fraction
        ));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainOutcome {
    /// Ran the configured number of environment steps.
    Completed,
    /// Rolling reward mean reached the early-stop target.
    EarlyStopped { env_steps: usize },
    /// A non-finite loss or parameter appeared; the network was rolled
    /// back to the state before the offending update.
    Diverged { env_steps: usize },
}

/// Owns the network, environment, optimizer, and RNG for one training
/// run. A fixed seed fixes the whole trajectory bit-for-bit.
pub struct Trainer {
    net: PolicyNetwork<f32>,
    env: CatchEnv,
    cfg: TrainConfig,
    rng: ChaCha8Rng,
    adam: Adam,
    history: Vec<TrainRow>,
    recent: VecDeque<f64>,
    episode_acc: f64,
    env_steps: usize,
}

impl Trainer {
    pub fn new(
        net: PolicyNetwork<f32>,
        env_cfg: &EnvConfig,
        cfg: TrainConfig,
    ) -> TensorResult<Self> {
        cfg.validate()?;
        if net.config().actions != Action::COUNT {
            return Err(TensorError::InvalidArgument {
                context: "trainer",
                message: format!(
                    "network outputs {} actions, env expects {}",
                    net.config().actions,
                    Action::COUNT
                ),
            });
        }
        if !net.config().value_head {
            return Err(TensorError::InvalidArgument {
                context: "trainer",
                message: "training requires a value head".to_string(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let env_seed = rng.gen();
        let env = CatchEnv::new(env_cfg.clone(), env_seed)?;
        let adam = Adam::new(cfg.learning_rate, cfg.adam_epsilon);
        Ok(Self {
            net,
            env,
            cfg,
            rng,
            adam,
            history: Vec::new(),
            recent: VecDeque::new(),
            episode_acc: 0.0,
            env_steps: 0,
        })
    }

    /// Train until `total_steps`, the early-stop target, or divergence.
    pub fn run(&mut self) -> TensorResult<TrainOutcome> {
        while self.env_steps < self.cfg.total_steps {
            let snapshot = self.net.clone();
            let update = self.one_update();
            match update {
                Ok(()) => {}
                Err(TensorError::NonFinite { .. }) => {
                    self.net = snapshot;
                    return Ok(TrainOutcome::Diverged {
                        env_steps: self.env_steps,
                    });
                }
                Err(e) => return Err(e),
            }
            if let Some(target) = self.cfg.early_stop_reward {
                if self.recent.len() >= REWARD_WINDOW && self.rolling_mean() >= target {
                    return Ok(TrainOutcome::EarlyStopped {
                        env_steps: self.env_steps,
                    });
                }
            }
        }
        Ok(TrainOutcome::Completed)
    }

    fn one_update(&mut self) -> TensorResult<()> {
        let mut completed = Vec::new();
        let buffer = collect_rollout(
            &self.net,
            &mut self.env,
            &self.cfg,
            &mut self.rng,
            &mut self.episode_acc,
            &mut completed,
        )?;
        for r in completed {
            if self.recent.len() == REWARD_WINDOW {
                self.recent.pop_front();
            }
            self.recent.push_back(r);
        }
        let stats = ppo_update(&mut self.net, &buffer, &self.cfg, &mut self.adam, &mut self.rng)?;
        let mut finite = true;
        self.net.visit_params(&mut |_, t| finite &= t.all_finite());
        if !finite {
            return Err(TensorError::NonFinite {
                context: "parameters after update",
            });
        }
        self.env_steps += buffer.len();
        self.history.push(TrainRow {
            update_index: self.history.len() + 1,
            env_steps: self.env_steps,
            mean_episode_reward: self.rolling_mean(),
            policy_loss: stats.policy_loss,
            value_loss: stats.value_loss,
            entropy: stats.entropy,
            clip_fraction: stats.clip_fraction,
            attacked_step_fraction: buffer.attacked_fraction(),
        });
        Ok(())
    }

    fn rolling_mean(&self) -> f64 {
        if self.recent.is_empty() {
            return f64::NAN;
        }
        self.recent.iter().sum::<f64>() / self.recent.len() as f64
    }

    pub fn net(&self) -> &PolicyNetwork<f32> {
        &self.net
    }

    pub fn into_net(self) -> PolicyNetwork<f32> {
        self.net
    }

    pub fn history(&self) -> &[TrainRow] {
        &self.history
    }

    pub fn env_steps(&self) -> usize {
        self.env_steps
    }

    pub fn recent_mean_reward(&self) -> f64 {
        self.rolling_mean()
    }
}
