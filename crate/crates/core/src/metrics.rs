//! Defense metrics and episode-reward evaluation.
//!
//! Per attacked step we record three action distributions: clean `p` on
//! the unperturbed observation, attacked `q` on the perturbed one, and
//! recovered `r` from the recovery path. The four aggregate metrics are
//! percentages over ALL evaluated attacked steps (not only successful
//! attacks): an unsuccessful attack counts toward Reversed-ANY by
//! definition.

use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{pgd_attack, AttackConfig};
use crate::env::{greedy_action, Action, CatchEnv, EnvConfig};
use crate::policy::{ActionDistribution, PolicyNetwork};
use crate::recovery::{recovery_effect, RecoveryConfig};
use crate::scalar::Scalar;
use crate::tensor::{TensorError, TensorResult};

/// Decorrelates the attack's RNG stream from the environment seed.
pub const ATTACK_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// One evaluated attacked step: clean, attacked, and recovered
/// distributions plus their derived argmaxes and the clean top-2 set.
#[derive(Debug, Clone)]
pub struct StepRecord<E: Scalar = f32> {
    pub clean: ActionDistribution<E>,
    pub attacked: ActionDistribution<E>,
    pub recovered: ActionDistribution<E>,
    pub a_p: usize,
    pub a_q: usize,
    pub a_r: usize,
    pub top2_p: [usize; 2],
}

impl<E: Scalar> StepRecord<E> {
    pub fn new(
        clean: ActionDistribution<E>,
        attacked: ActionDistribution<E>,
        recovered: ActionDistribution<E>,
    ) -> TensorResult<Self> {
        let n = clean.n_actions();
        if n < 2 {
            return Err(TensorError::InvalidArgument {
                context: "step record",
                message: format!("need at least 2 actions for a top-2 set, got {n}"),
            });
        }
        if attacked.n_actions() != n || recovered.n_actions() != n {
            return Err(TensorError::InvalidArgument {
                context: "step record",
                message: format!(
                    "distribution sizes differ: clean {n}, attacked {}, recovered {}",
                    attacked.n_actions(),
                    recovered.n_actions()
                ),
            });
        }
        let a_p = clean.argmax();
        let a_q = attacked.argmax();
        let a_r = recovered.argmax();
        let top2_p = clean.top2();
        Ok(Self {
            clean,
            attacked,
            recovered,
            a_p,
            a_q,
            a_r,
            top2_p,
        })
    }
}

/// Counts and percentages of the four defense metrics over a record set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseMetrics {
    pub steps: usize,
    pub successful_attacks: usize,
    pub reversed_top1: usize,
    pub reversed_top2: usize,
    pub reversed_any: usize,
    pub successful_attacks_pct: f64,
    pub reversed_top1_pct: f64,
    pub reversed_top2_pct: f64,
    pub reversed_any_pct: f64,
}

/// Aggregate over all records: successful = argmax changed under attack;
/// Reversed-TOP-1 = recovery restores the clean argmax; Reversed-TOP-2 =
/// recovered action lies in the clean top-2; Reversed-ANY = recovered
/// action differs from the attacked one, or the attack never changed it.
pub fn compute_metrics<E: Scalar>(records: &[StepRecord<E>]) -> TensorResult<DefenseMetrics> {
    if records.is_empty() {
        return Err(TensorError::InvalidArgument {
            context: "metrics",
            message: "no step records to aggregate".to_string(),
        });
    }
    let mut successful = 0usize;
    let mut rt1 = 0usize;
    let mut rt2 = 0usize;
    let mut rany = 0usize;
    for rec in records {
        if rec.a_q != rec.a_p {
            successful += 1;
        }
        if rec.a_r == rec.a_p {
            rt1 += 1;
        }
        if rec.top2_p.contains(&rec.a_r) {
            rt2 += 1;
        }
        if rec.a_r != rec.a_q || rec.a_q == rec.a_p {
            rany += 1;
        }
    }
    let n = records.len();
    let pct = |c: usize| c as f64 * 100.0 / n as f64;
    Ok(DefenseMetrics {
        steps: n,
        successful_attacks: successful,
        reversed_top1: rt1,
        reversed_top2: rt2,
        reversed_any: rany,
        successful_attacks_pct: pct(successful),
        reversed_top1_pct: pct(rt1),
        reversed_top2_pct: pct(rt2),
        reversed_any_pct: pct(rany),
    })
}

/// Mean, population standard deviation, and the raw per-episode rewards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardStats {
    pub mean: f64,
    pub std: f64,
    pub per_episode: Vec<f64>,
}

pub fn reward_stats(per_episode: &[f64]) -> RewardStats {
    let n = per_episode.len() as f64;
    let mean = per_episode.iter().sum::<f64>() / n;
    let var = per_episode.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    RewardStats {
        mean,
        std: var.sqrt(),
        per_episode: per_episode.to_vec(),
    }
}

/// Defended-over-baseline reward ratio; `None` when the baseline reward
/// is not positive (the ratio is undefined, not zero or infinite).
pub fn improvement_ratio(defended: f64, baseline: f64) -> Option<f64> {
    (baseline > 0.0).then(|| defended / baseline)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalRegime {
    Clean,
    Attacked,
    AttackedRecovery,
}

impl EvalRegime {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Clean => "clean",
            Self::Attacked => "attacked",
            Self::AttackedRecovery => "attacked_recovery",
        }
    }
}

/// Result of evaluating one regime: reward statistics, plus per-step
/// records when the regime exercises recovery.
#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub rewards: RewardStats,
    pub records: Vec<StepRecord<f32>>,
}

struct EpisodeOutcome {
    reward: f64,
    records: Vec<StepRecord<f32>>,
}

/// Evaluate greedy play over one episode per seed. In attacked regimes
/// every observation is perturbed before the policy sees it; in the
/// recovery regime actions come from the recovered distribution.
/// Episodes may run on several worker threads; results merge in seed
/// order, so the outcome is independent of `workers`.
pub fn evaluate_reward(
    net: &PolicyNetwork<f32>,
    env_cfg: &EnvConfig,
    regime: EvalRegime,
    attack: &AttackConfig,
    recovery: &RecoveryConfig,
    seeds: &[u64],
    workers: usize,
) -> TensorResult<EvalOutcome> {
    if seeds.is_empty() {
        return Err(TensorError::InvalidArgument {
            context: "evaluate",
            message: "need at least one episode seed".to_string(),
        });
    }
    attack.validate()?;
    let workers = workers.clamp(1, seeds.len());
    let cells: Vec<Mutex<Option<TensorResult<EpisodeOutcome>>>> =
        seeds.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for w in 0..workers {
            let cells = &cells;
            scope.spawn(move || {
                let mut i = w;
                while i < seeds.len() {
                    let out = run_episode(net, env_cfg, regime, attack, recovery, seeds[i]);
                    *cells[i].lock().expect("episode cell") = Some(out);
                    i += workers;
                }
            });
        }
    });
    let mut rewards = Vec::with_capacity(seeds.len());
    let mut records = Vec::new();
    for cell in cells {
        let out = cell
            .into_inner()
            .expect("episode cell")
            .expect("worker covered every index")?;
        rewards.push(out.reward);
        records.extend(out.records);
    }
    Ok(EvalOutcome {
        rewards: reward_stats(&rewards),
        records,
    })
}

fn run_episode(
    net: &PolicyNetwork<f32>,
    env_cfg: &EnvConfig,
    regime: EvalRegime,
    attack: &AttackConfig,
    recovery: &RecoveryConfig,
    seed: u64,
) -> TensorResult<EpisodeOutcome> {
    let mut env = CatchEnv::new(env_cfg.clone(), seed)?;
    let mut attack_rng = ChaCha8Rng::seed_from_u64(seed ^ ATTACK_SEED_SALT);
    let mut obs = env.observation().clone();
    let mut reward = 0.0f64;
    let mut records = Vec::new();
    loop {
        let action_idx = match regime {
            EvalRegime::Clean => net.forward(&obs)?.0.argmax(),
            EvalRegime::Attacked => {
                let adv = pgd_attack(net, &obs, attack, &mut attack_rng)?;
                net.forward(&adv.observation)?.0.argmax()
            }
            EvalRegime::AttackedRecovery => {
                let adv = pgd_attack(net, &obs, attack, &mut attack_rng)?;
                let record = recovery_effect(net, &obs, &adv.observation, recovery)?;
                let action = record.a_r;
                records.push(record);
                action
            }
        };
        let action = Action::from_index(action_idx).ok_or_else(|| TensorError::InvalidArgument {
            context: "evaluate",
            message: format!("policy chose action {action_idx}, env has {}", Action::COUNT),
        })?;
        let (next, r, done) = env.step(action)?;
        reward += r as f64;
        obs = next;
        if done {
            break;
        }
    }
    Ok(EpisodeOutcome { reward, records })
}

/// Reward of the paddle-chasing oracle; every episode scores the analytic
/// ceiling, which anchors reward scales in tests.
pub fn evaluate_scripted(env_cfg: &EnvConfig, seeds: &[u64]) -> TensorResult<RewardStats> {
    if seeds.is_empty() {
        return Err(TensorError::InvalidArgument {
            context: "evaluate",
            message: "need at least one episode seed".to_string(),
        });
    }
    let mut rewards = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut env = CatchEnv::new(env_cfg.clone(), seed)?;
        let mut total = 0.0f64;
        loop {
            let action = greedy_action(env.raw());
            let (_, r, done) = env.step(action)?;
            total += r as f64;
            if done {
                break;
            }
        }
        rewards.push(total);
    }
    Ok(reward_stats(&rewards))
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeRewards {
    pub clean: RewardStats,
    pub attacked: RewardStats,
    pub attacked_recovery: RewardStats,
}

/// One evaluation row: defense metrics and per-regime rewards at one ε.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub epsilon: f64,
    pub environment: String,
    pub episodes: usize,
    pub defense: DefenseMetrics,
    pub rewards: RegimeRewards,
}

/// CSV with one row per ε × regime; defense metric columns are filled on
/// the recovery row, where they are defined.
pub fn reports_to_csv(reports: &[MetricsReport]) -> String {
    let mut out = String::from(
        "epsilon,regime,reward_mean,reward_std,steps,successful_attacks_pct,\
         reversed_top1_pct,reversed_top2_pct,reversed_any_pct\n",
    );
    for report in reports {
        let rows: [(&str, &RewardStats); 3] = [
            ("clean", &report.rewards.clean),
            ("attacked", &report.rewards.attacked),
            ("attacked_recovery", &report.rewards.attacked_recovery),
        ];
        for (regime, stats) in rows {
            let defense = if regime == "attacked_recovery" {
                let d = &report.defense;
                format!(
                    "{},{},{},{},{}",
                    d.steps,
                    d.successful_attacks_pct,
                    d.reversed_top1_pct,
                    d.reversed_top2_pct,
                    d.reversed_any_pct
                )
            } else {
                ",,,,".to_string()
            };
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                report.epsilon, regime, stats.mean, stats.std, defense
            ));
        }
    }
    out
}

/// Schema-versioned JSON document holding the full reports.
pub fn reports_to_json(reports: &[MetricsReport]) -> serde_json::Value {
    serde_json::json!({
        "schema_version": REPORT_SCHEMA_VERSION,
        "reports": reports,
    })
}
