//! Subcommand implementations.

use std::fs;
use std::path::Path;

use bamrl_core::attack::{pgd_attack, AttackConfig};
use bamrl_core::checkpoint;
use bamrl_core::env::{Action, CatchEnv};
use bamrl_core::metrics::{
    compute_metrics, evaluate_reward, reports_to_csv, reports_to_json, EvalOutcome, EvalRegime,
    MetricsReport, RegimeRewards, RewardStats, ATTACK_SEED_SALT, REPORT_SCHEMA_VERSION,
};
use bamrl_core::policy::{ArchitectureConfig, PolicyNetwork};
use bamrl_core::ppo::{history_to_csv, TrainOutcome, Trainer};
use bamrl_core::recovery::recover_policy;
use bamrl_core::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::args::{CountParamsArgs, DumpMapsArgs, EvalArgs, TrainArgs};
use crate::config::RunConfig;
use crate::pgm;
use crate::Failure;

fn ensure_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::runtime(format!("create {}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::runtime(format!("write {}: {e}", path.display())))
}

fn env_name(cfg: &RunConfig) -> String {
    format!(
        "pixelcatch-{}x{}",
        cfg.environment.height, cfg.environment.width
    )
}

/// Loads a checkpoint and checks it drives this config's environment.
fn load_checkpoint(path: &Path, cfg: &RunConfig) -> Result<PolicyNetwork<f32>, Failure> {
    let net: PolicyNetwork<f32> =
        checkpoint::load(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    let [frames, h, w] = cfg.environment.observation_shape();
    let a = net.config();
    if (a.input_frames, a.input_height, a.input_width) != (frames, h, w) {
        return Err(Failure::usage(format!(
            "checkpoint expects {}x{}x{} input but the environment emits {frames}x{h}x{w}",
            a.input_frames, a.input_height, a.input_width
        )));
    }
    if a.actions != Action::COUNT {
        return Err(Failure::usage(format!(
            "checkpoint has {} actions, the environment has {}",
            a.actions,
            Action::COUNT
        )));
    }
    Ok(net)
}

pub fn cmd_train(args: &TrainArgs) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    if let Some(preset) = args.arch {
        cfg.architecture = preset.config();
    }
    if let Some(steps) = args.steps {
        cfg.training.total_steps = steps;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(lr) = args.lr {
        cfg.training.learning_rate = lr;
    }
    if let Some(target) = args.early_stop {
        cfg.training.early_stop_reward = Some(target);
    }
    if args.adv || args.adv_every_k.is_some() || args.adv_eps.is_some() {
        let mut adv = cfg.training.adv_training.take().unwrap_or_default();
        if let Some(k) = args.adv_every_k {
            adv.every_k = k;
        }
        if let Some(eps) = args.adv_eps {
            adv.attack.epsilon = eps;
        }
        cfg.training.adv_training = Some(adv);
    }
    cfg.resolve()?;

    ensure_dir(&args.out)?;
    cfg.write(&args.out.join("config.json"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let net =
        PolicyNetwork::init(cfg.architecture.clone(), &mut rng).map_err(Failure::usage)?;
    let mut trainer =
        Trainer::new(net, &cfg.environment, cfg.training.clone()).map_err(Failure::usage)?;
    let outcome = trainer.run().map_err(Failure::runtime)?;

    let ckpt_path = args.out.join("checkpoint.bin");
    checkpoint::save(trainer.net(), &ckpt_path)
        .map_err(|e| Failure::runtime(format!("{}: {e}", ckpt_path.display())))?;
    write_text(
        &args.out.join("training_log.csv"),
        &history_to_csv(trainer.history()),
    )?;

    match outcome {
        TrainOutcome::Completed => {
            println!(
                "completed {} env steps; checkpoint at {}",
                trainer.env_steps(),
                ckpt_path.display()
            );
            Ok(())
        }
        TrainOutcome::EarlyStopped { env_steps } => {
            println!(
                "reward target reached after {env_steps} env steps; checkpoint at {}",
                ckpt_path.display()
            );
            Ok(())
        }
        TrainOutcome::Diverged { env_steps } => Err(Failure::runtime(format!(
            "training diverged at {env_steps} env steps; last good checkpoint kept at {}",
            ckpt_path.display()
        ))),
    }
}

/// Rewards for the regimes a report row covers; recovery entries are
/// present only when the checkpoint has an attention layer.
struct SweepRow {
    epsilon: f64,
    attacked: EvalOutcome,
    recovery: Option<EvalOutcome>,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    if let Some(episodes) = args.episodes {
        cfg.evaluation.episodes = episodes;
    }
    if let Some(grid) = &args.eps_grid {
        cfg.evaluation.epsilon_grid = grid.clone();
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(workers) = args.workers {
        cfg.evaluation.workers = workers;
    }
    if let Some(reentry) = args.reentry {
        cfg.recovery.reentry = reentry.into();
    }
    cfg.resolve()?;
    if cfg.evaluation.epsilon_grid.is_empty() {
        return Err(Failure::usage(
            "empty attack sweep: pass --eps-grid or set evaluation.epsilon_grid",
        ));
    }

    let net = load_checkpoint(&args.checkpoint, &cfg)?;
    let with_recovery = net.bam_layer_index().is_some();

    ensure_dir(&args.out)?;
    cfg.write(&args.out.join("config.json"))?;

    let seeds: Vec<u64> = (0..cfg.evaluation.episodes)
        .map(|i| cfg.seed.wrapping_add(i as u64))
        .collect();
    let workers = cfg.evaluation.workers;

    let clean = evaluate_reward(
        &net,
        &cfg.environment,
        EvalRegime::Clean,
        &cfg.attack,
        &cfg.recovery,
        &seeds,
        workers,
    )
    .map_err(Failure::runtime)?;

    let mut rows = Vec::new();
    for &epsilon in &cfg.evaluation.epsilon_grid {
        let attack = AttackConfig {
            epsilon,
            ..cfg.attack.clone()
        };
        let attacked = evaluate_reward(
            &net,
            &cfg.environment,
            EvalRegime::Attacked,
            &attack,
            &cfg.recovery,
            &seeds,
            workers,
        )
        .map_err(Failure::runtime)?;
        let recovery = if with_recovery {
            Some(
                evaluate_reward(
                    &net,
                    &cfg.environment,
                    EvalRegime::AttackedRecovery,
                    &attack,
                    &cfg.recovery,
                    &seeds,
                    workers,
                )
                .map_err(Failure::runtime)?,
            )
        } else {
            None
        };
        rows.push(SweepRow {
            epsilon,
            attacked,
            recovery,
        });
    }

    let (csv, json) = if with_recovery {
        let mut reports = Vec::new();
        for row in rows {
            let recovery = row.recovery.expect("recovery regime evaluated");
            let defense = compute_metrics(&recovery.records).map_err(Failure::runtime)?;
            reports.push(MetricsReport {
                epsilon: row.epsilon,
                environment: env_name(&cfg),
                episodes: cfg.evaluation.episodes,
                defense,
                rewards: RegimeRewards {
                    clean: clean.rewards.clone(),
                    attacked: row.attacked.rewards,
                    attacked_recovery: recovery.rewards,
                },
            });
        }
        let json = serde_json::to_string_pretty(&reports_to_json(&reports))
            .expect("reports serialize");
        (reports_to_csv(&reports), json)
    } else {
        partial_outputs(&cfg, &clean.rewards, &rows)
    };

    write_text(&args.out.join("metrics.csv"), &csv)?;
    write_text(&args.out.join("metrics.json"), &(json + "\n"))?;
    print!("{csv}");
    Ok(())
}

/// Clean/attacked rows for a checkpoint without an attention layer: same
/// CSV columns with the defense fields empty, and a rewards-only JSON
/// document under the same schema version.
fn partial_outputs(
    cfg: &RunConfig,
    clean: &RewardStats,
    rows: &[SweepRow],
) -> (String, String) {
    let mut csv = String::from(
        "epsilon,regime,reward_mean,reward_std,steps,successful_attacks_pct,\
         reversed_top1_pct,reversed_top2_pct,reversed_any_pct\n",
    );
    let mut reports = Vec::new();
    for row in rows {
        csv.push_str(&format!(
            "{},clean,{},{},,,,,\n",
            row.epsilon, clean.mean, clean.std
        ));
        csv.push_str(&format!(
            "{},attacked,{},{},,,,,\n",
            row.epsilon, row.attacked.rewards.mean, row.attacked.rewards.std
        ));
        reports.push(serde_json::json!({
            "epsilon": row.epsilon,
            "environment": env_name(cfg),
            "episodes": cfg.evaluation.episodes,
            "rewards": {
                "clean": clean,
                "attacked": row.attacked.rewards,
            },
        }));
    }
    let json = serde_json::to_string_pretty(&serde_json::json!({
        "schema_version": REPORT_SCHEMA_VERSION,
        "reports": reports,
    }))
    .expect("reports serialize");
    (csv, json)
}

pub fn cmd_dump_maps(args: &DumpMapsArgs) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    if let Some(epsilon) = args.epsilon {
        cfg.attack.epsilon = epsilon;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.resolve()?;
    if args.states == 0 {
        return Err(Failure::usage("--states must be positive"));
    }

    let net = load_checkpoint(&args.checkpoint, &cfg)?;
    if net.bam_layer_index().is_none() {
        return Err(Failure::usage(
            "checkpoint has no attention layer; attention maps cannot be dumped",
        ));
    }

    // One greedy episode on clean observations supplies the states.
    let observations = greedy_episode(&net, &cfg).map_err(Failure::runtime)?;
    if observations.len() < args.states {
        return Err(Failure::usage(format!(
            "episode produced {} observations, cannot sample {}",
            observations.len(),
            args.states
        )));
    }

    ensure_dir(&args.out)?;
    cfg.write(&args.out.join("config.json"))?;

    let layer = net.bam_layer_index().expect("attention layer present");
    let last_channel = cfg.environment.stack - 1;
    let mut attack_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ ATTACK_SEED_SALT);
    let denom = (args.states - 1).max(1);
    for i in 0..args.states {
        let idx = i * (observations.len() - 1) / denom;
        let s = &observations[idx];
        let s_a = pgd_attack(&net, s, &cfg.attack, &mut attack_rng)
            .map_err(Failure::runtime)?
            .observation;
        let f_pre_clean = net
            .forward_prefix(s, 1, layer - 1)
            .map_err(Failure::runtime)?;
        let (_, tap) = recover_policy(&net, &s_a, &cfg.recovery).map_err(Failure::runtime)?;

        let panels: [(&str, pgm::GrayImage); 5] = [
            (
                "obs",
                pgm::channel_plane(s, last_channel).map_err(Failure::runtime)?,
            ),
            (
                "clean",
                pgm::channel_mean(&f_pre_clean).map_err(Failure::runtime)?,
            ),
            (
                "attacked",
                pgm::channel_mean(&tap.f_pre).map_err(Failure::runtime)?,
            ),
            (
                "attention",
                pgm::channel_mean(&tap.f_bam).map_err(Failure::runtime)?,
            ),
            (
                "cleaned",
                pgm::channel_mean(&tap.f_rec).map_err(Failure::runtime)?,
            ),
        ];
        for (kind, image) in panels {
            let path = args.out.join(format!("state{i}_{kind}.pgm"));
            image
                .write_pgm(&path)
                .map_err(|e| Failure::runtime(format!("write {}: {e}", path.display())))?;
        }
    }
    println!(
        "wrote {} images to {}",
        args.states * 5,
        args.out.display()
    );
    Ok(())
}

fn greedy_episode(
    net: &PolicyNetwork<f32>,
    cfg: &RunConfig,
) -> Result<Vec<Tensor<f32>>, bamrl_core::tensor::TensorError> {
    let mut env = CatchEnv::new(cfg.environment.clone(), cfg.seed)?;
    let mut observations = vec![env.observation().clone()];
    while !env.is_done() {
        let (dist, _) = net.forward(env.observation())?;
        let action = Action::from_index(dist.argmax()).expect("argmax in range");
        env.step(action)?;
        if !env.is_done() {
            observations.push(env.observation().clone());
        }
    }
    Ok(observations)
}

pub fn cmd_count_params(args: &CountParamsArgs) -> Result<(), Failure> {
    let arch = match (&args.config, args.arch) {
        (Some(path), None) => read_architecture(path)?,
        (None, Some(preset)) => preset.config(),
        _ => {
            return Err(Failure::usage(
                "pass exactly one of --config or --arch",
            ))
        }
    };
    let n = arch.count_parameters().map_err(Failure::usage)?;
    println!("{n}");
    Ok(())
}

/// Accepts either a bare architecture object or a full run config.
fn read_architecture(path: &Path) -> Result<ArchitectureConfig, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::usage(format!("config {}: {e}", path.display())))?;
    match serde_json::from_str::<ArchitectureConfig>(&text) {
        Ok(arch) => Ok(arch),
        Err(arch_err) => match serde_json::from_str::<RunConfig>(&text) {
            Ok(run) => Ok(run.architecture),
            Err(_) => Err(Failure::usage(format!(
                "config {}: {arch_err}",
                path.display()
            ))),
        },
    }
}
