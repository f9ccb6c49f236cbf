//! Deterministic pixel environment plus observation preprocessing.
//!
//! PixelCatch: a single bright ball falls one row per step down a
//! grayscale grid; a 3-wide paddle on the bottom row moves one column per
//! step. Catching the ball scores +1; an episode is a fixed number of
//! drops, so the analytic reward ceiling equals `drops_per_episode` and a
//! greedy chaser provably reaches it (the paddle can cross the whole grid
//! in the time one drop takes).
//!
//! The preprocessing pipeline mirrors the usual vision-RL stack:
//! grayscale by channel mean, area resize, frame-skip with max
//! accumulation, and stacking of the last k kept frames (newest at the
//! highest channel index, zero-padded at episode start).

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Tensor, TensorError, TensorResult};

pub const BALL_INTENSITY: f32 = 1.0;
pub const PADDLE_INTENSITY: f32 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Left,
    Stay,
    Right,
}

impl Action {
    pub const COUNT: usize = 3;

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(Self::Left),
            1 => Some(Self::Stay),
            2 => Some(Self::Right),
            _ => None,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub height: usize,
    pub width: usize,
    pub drops_per_episode: usize,
    /// Raw frames advanced per agent action; kept frames are the
    /// elementwise max over each window.
    pub frame_skip: usize,
    /// Stacked kept frames per observation.
    pub stack: usize,
    pub obs_height: usize,
    pub obs_width: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            drops_per_episode: 8,
            frame_skip: 1,
            stack: 4,
            obs_height: 32,
            obs_width: 32,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> TensorResult<()> {
        if self.height < 2 || self.width < 3 {
            return Err(TensorError::InvalidArgument {
                context: "env config",
                message: format!("grid {}x{} too small for a ball and paddle", self.height, self.width),
            });
        }
        if self.drops_per_episode == 0 || self.frame_skip == 0 || self.stack == 0 {
            return Err(TensorError::InvalidArgument {
                context: "env config",
                message: "drops, frame_skip, and stack must be positive".to_string(),
            });
        }
        if self.obs_height == 0 || self.obs_width == 0 {
            return Err(TensorError::InvalidArgument {
                context: "env config",
                message: "observation size must be positive".to_string(),
            });
        }
        Ok(())
    }

    /// Raw frames in one episode: each drop falls height-1 rows.
    pub fn episode_raw_steps(&self) -> usize {
        self.drops_per_episode * (self.height - 1)
    }

    pub fn observation_shape(&self) -> [usize; 3] {
        [self.stack, self.obs_height, self.obs_width]
    }
}

/// Raw single-frame environment; drives the ball/paddle dynamics.
#[derive(Debug, Clone)]
pub struct PixelCatchEnv {
    config: EnvConfig,
    rng: ChaCha8Rng,
    ball_col: usize,
    ball_row: usize,
    paddle_center: usize,
    drops_done: usize,
    done: bool,
}

impl PixelCatchEnv {
    pub fn new(config: EnvConfig, seed: u64) -> TensorResult<Self> {
        config.validate()?;
        let mut env = Self {
            config,
            rng: ChaCha8Rng::seed_from_u64(seed),
            ball_col: 0,
            ball_row: 0,
            paddle_center: 0,
            drops_done: 0,
            done: false,
        };
        env.reset(seed);
        Ok(env)
    }

    pub fn reset(&mut self, seed: u64) -> Tensor<f32> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.ball_col = self.rng.gen_range(0..self.config.width);
        self.ball_row = 0;
        self.paddle_center = self.config.width / 2;
        self.drops_done = 0;
        self.done = false;
        self.render()
    }

    pub fn step(&mut self, action: Action) -> TensorResult<(Tensor<f32>, f32, bool)> {
        if self.done {
            return Err(TensorError::InvalidArgument {
                context: "env step",
                message: "episode is done; reset before stepping".to_string(),
            });
        }
        let max_center = self.config.width - 2;
        self.paddle_center = match action {
            Action::Left => self.paddle_center.saturating_sub(1).max(1),
            Action::Stay => self.paddle_center,
            Action::Right => (self.paddle_center + 1).min(max_center),
        };
        self.ball_row += 1;

        let mut reward = 0.0;
        if self.ball_row == self.config.height - 1 {
            let caught = self.ball_col.abs_diff(self.paddle_center) <= 1;
            if caught {
                reward = 1.0;
            }
            self.drops_done += 1;
            if self.drops_done >= self.config.drops_per_episode {
                self.done = true;
            } else {
                self.ball_row = 0;
                self.ball_col = self.rng.gen_range(0..self.config.width);
            }
        }
        Ok((self.render(), reward, self.done))
    }

    /// Current `[H,W]` frame: paddle block then the ball drawn on top.
    pub fn render(&self) -> Tensor<f32> {
        let (h, w) = (self.config.height, self.config.width);
        let mut data = vec![0.0f32; h * w];
        for dc in -1i64..=1 {
            let col = (self.paddle_center as i64 + dc) as usize;
            data[(h - 1) * w + col] = PADDLE_INTENSITY;
        }
        data[self.ball_row * w + self.ball_col] = BALL_INTENSITY;
        Tensor::from_vec(&[h, w], data).expect("frame shape")
    }

    pub fn ball(&self) -> (usize, usize) {
        (self.ball_row, self.ball_col)
    }

    pub fn paddle_center(&self) -> usize {
        self.paddle_center
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }
}

/// The action a paddle-chasing oracle takes; it provably catches every
/// drop, which pins the reward ceiling used in tests.
pub fn greedy_action(env: &PixelCatchEnv) -> Action {
    let (_, ball_col) = env.ball();
    match ball_col.cmp(&env.paddle_center()) {
        std::cmp::Ordering::Less => Action::Left,
        std::cmp::Ordering::Equal => Action::Stay,
        std::cmp::Ordering::Greater => Action::Right,
    }
}

/// Channel-mean grayscale; single-channel frames pass through.
pub fn grayscale(frame: &Tensor<f32>) -> TensorResult<Tensor<f32>> {
    match frame.rank() {
        2 => Ok(frame.clone()),
        3 => {
            let (c, h, w) = (frame.shape()[0], frame.shape()[1], frame.shape()[2]);
            let plane = h * w;
            let inv = 1.0 / c as f32;
            let data = (0..plane)
                .map(|i| (0..c).map(|ch| frame.data()[ch * plane + i]).sum::<f32>() * inv)
                .collect();
            Tensor::from_vec(&[h, w], data)
        }
        _ => Err(TensorError::InvalidArgument {
            context: "grayscale",
            message: format!("expected [H,W] or [C,H,W], got {:?}", frame.shape()),
        }),
    }
}

/// Exact area-average resample of an `[H,W]` frame.
pub fn resize_area(frame: &Tensor<f32>, out_h: usize, out_w: usize) -> TensorResult<Tensor<f32>> {
    if frame.rank() != 2 {
        return Err(TensorError::InvalidArgument {
            context: "resize",
            message: format!("expected [H,W], got {:?}", frame.shape()),
        });
    }
    let (h, w) = (frame.shape()[0], frame.shape()[1]);
    if out_h == 0 || out_w == 0 {
        return Err(TensorError::InvalidArgument {
            context: "resize",
            message: "target size must be positive".to_string(),
        });
    }
    if out_h == h && out_w == w {
        return Ok(frame.clone());
    }
    // overlap weight of source cell [c, c+1) with target cell
    // [t*scale, (t+1)*scale)
    let overlaps = |src: usize, out: usize| -> Vec<Vec<(usize, f64)>> {
        let scale = src as f64 / out as f64;
        (0..out)
            .map(|t| {
                let lo = t as f64 * scale;
                let hi = (t + 1) as f64 * scale;
                let mut spans = Vec::new();
                let mut c = lo.floor() as usize;
                while (c as f64) < hi && c < src {
                    let cover = hi.min((c + 1) as f64) - lo.max(c as f64);
                    if cover > 0.0 {
                        spans.push((c, cover));
                    }
                    c += 1;
                }
                spans
            })
            .collect()
    };
    let rows = overlaps(h, out_h);
    let cols = overlaps(w, out_w);
    let cell_area = (h as f64 / out_h as f64) * (w as f64 / out_w as f64);
    let mut data = vec![0.0f32; out_h * out_w];
    for (ty, row_spans) in rows.iter().enumerate() {
        for (tx, col_spans) in cols.iter().enumerate() {
            let mut acc = 0.0f64;
            for &(sy, wy) in row_spans {
                for &(sx, wx) in col_spans {
                    acc += frame.data()[sy * w + sx] as f64 * wy * wx;
                }
            }
            data[ty * out_w + tx] = (acc / cell_area) as f32;
        }
    }
    Tensor::from_vec(&[out_h, out_w], data)
}

/// Grayscale, resize, frame-skip with max accumulation, and stacking.
#[derive(Debug, Clone)]
pub struct FramePipeline {
    skip: usize,
    stack: usize,
    out_h: usize,
    out_w: usize,
    accum: Option<Tensor<f32>>,
    in_window: usize,
    kept: VecDeque<Tensor<f32>>,
}

impl FramePipeline {
    pub fn new(skip: usize, stack: usize, out_h: usize, out_w: usize) -> Self {
        Self {
            skip,
            stack,
            out_h,
            out_w,
            accum: None,
            in_window: 0,
            kept: VecDeque::new(),
        }
    }

    pub fn reset(&mut self) {
        self.accum = None;
        self.in_window = 0;
        self.kept.clear();
    }

    /// Feed one raw frame. Returns the stacked observation whenever a
    /// skip window completes (every `skip`-th raw frame).
    pub fn push_raw(&mut self, frame: &Tensor<f32>) -> TensorResult<Option<Tensor<f32>>> {
        let gray = grayscale(frame)?;
        self.accum = Some(match self.accum.take() {
            None => gray,
            Some(prev) => prev.broadcast_with(&gray, "frame max", f32::max)?,
        });
        self.in_window += 1;
        if self.in_window < self.skip {
            return Ok(None);
        }
        let window = self.accum.take().expect("accumulated frame");
        self.in_window = 0;
        let small = resize_area(&window, self.out_h, self.out_w)?;
        self.kept.push_back(small);
        while self.kept.len() > self.stack {
            self.kept.pop_front();
        }
        Ok(Some(self.stacked()))
    }

    /// Flush a partial skip window (episode end), if any.
    pub fn flush(&mut self) -> TensorResult<Option<Tensor<f32>>> {
        if self.in_window == 0 {
            return Ok(None);
        }
        let window = self.accum.take().expect("accumulated frame");
        self.in_window = 0;
        let small = resize_area(&window, self.out_h, self.out_w)?;
        self.kept.push_back(small);
        while self.kept.len() > self.stack {
            self.kept.pop_front();
        }
        Ok(Some(self.stacked()))
    }

    /// `[stack, H, W]` with the newest frame at the highest index and
    /// zero padding before enough frames exist.
    pub fn stacked(&self) -> Tensor<f32> {
        let plane = self.out_h * self.out_w;
        let mut data = vec![0.0f32; self.stack * plane];
        let pad = self.stack - self.kept.len();
        for (i, frame) in self.kept.iter().enumerate() {
            data[(pad + i) * plane..(pad + i + 1) * plane].copy_from_slice(frame.data());
        }
        Tensor::from_vec(&[self.stack, self.out_h, self.out_w], data).expect("stack shape")
    }
}

/// PixelCatch behind the preprocessing pipeline: the policy-facing
/// environment. One `step` advances `frame_skip` raw frames.
#[derive(Debug, Clone)]
pub struct CatchEnv {
    raw: PixelCatchEnv,
    pipeline: FramePipeline,
    obs: Tensor<f32>,
}

impl CatchEnv {
    pub fn new(config: EnvConfig, seed: u64) -> TensorResult<Self> {
        config.validate()?;
        let raw = PixelCatchEnv::new(config.clone(), seed)?;
        let pipeline = FramePipeline::new(
            config.frame_skip,
            config.stack,
            config.obs_height,
            config.obs_width,
        );
        let mut env = Self {
            raw,
            pipeline,
            obs: Tensor::zeros(&[config.stack, config.obs_height, config.obs_width]),
        };
        env.reset(seed)?;
        Ok(env)
    }

    pub fn reset(&mut self, seed: u64) -> TensorResult<Tensor<f32>> {
        let first = self.raw.reset(seed);
        self.pipeline.reset();
        let gray = grayscale(&first)?;
        let small = resize_area(&gray, self.pipeline.out_h, self.pipeline.out_w)?;
        self.pipeline.kept.push_back(small);
        self.obs = self.pipeline.stacked();
        Ok(self.obs.clone())
    }

    /// Advance `frame_skip` raw frames under `action`; rewards over the
    /// window are summed and the kept frame is their elementwise max.
    pub fn step(&mut self, action: Action) -> TensorResult<(Tensor<f32>, f32, bool)> {
        let mut reward = 0.0;
        let mut done = false;
        for _ in 0..self.raw.config.frame_skip {
            let (frame, r, d) = self.raw.step(action)?;
            reward += r;
            done = d;
            if let Some(obs) = self.pipeline.push_raw(&frame)? {
                self.obs = obs;
            }
            if done {
                if let Some(obs) = self.pipeline.flush()? {
                    self.obs = obs;
                }
                break;
            }
        }
        Ok((self.obs.clone(), reward, done))
    }

    pub fn observation(&self) -> &Tensor<f32> {
        &self.obs
    }

    pub fn raw(&self) -> &PixelCatchEnv {
        &self.raw
    }

    pub fn config(&self) -> &EnvConfig {
        self.raw.config()
    }

    pub fn is_done(&self) -> bool {
        self.raw.is_done()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let config = EnvConfig::default();
        let mut a = CatchEnv::new(config.clone(), 5).unwrap();
        let mut b = CatchEnv::new(config, 5).unwrap();
        let actions = [Action::Left, Action::Stay, Action::Right];
        for i in 0..100 {
            let act = actions[i % 3];
            let (oa, ra, da) = a.step(act).unwrap();
            let (ob, rb, db) = b.step(act).unwrap();
            assert_eq!(oa, ob);
            assert_eq!(ra, rb);
            assert_eq!(da, db);
        }
    }

    #[test]
    fn greedy_chaser_hits_the_ceiling() {
        for seed in 0..20 {
            let config = EnvConfig::default();
            let mut env = PixelCatchEnv::new(config.clone(), seed).unwrap();
            let mut total = 0.0;
            loop {
                let action = greedy_action(&env);
                let (_, r, done) = env.step(action).unwrap();
                total += r;
                if done {
                    break;
                }
            }
            assert_eq!(total, config.drops_per_episode as f32, "seed {seed}");
        }
    }

    #[test]
    fn camper_in_the_corner_misses_far_balls() {
        // seed 0 spawns at least one ball beyond the far-left paddle's reach
        let mut env = PixelCatchEnv::new(EnvConfig::default(), 0).unwrap();
        let mut total = 0.0;
        loop {
            let (_, r, done) = env.step(Action::Left).unwrap();
            total += r;
            if done {
                break;
            }
        }
        assert!(total < 8.0, "total {total}");
    }

    #[test]
    fn ball_descends_one_row_per_step() {
        let mut env = PixelCatchEnv::new(EnvConfig::default(), 3).unwrap();
        for expected_row in 1..31 {
            env.step(Action::Stay).unwrap();
            assert_eq!(env.ball().0, expected_row);
        }
    }

    #[test]
    fn reward_only_on_bottom_row() {
        let config = EnvConfig::default();
        let mut env = PixelCatchEnv::new(config.clone(), 7).unwrap();
        let fall = config.height - 1;
        for t in 1..=config.episode_raw_steps() {
            let (_, r, done) = env.step(greedy_action(&env)).unwrap();
            if t % fall != 0 {
                assert_eq!(r, 0.0, "step {t}");
            }
            assert_eq!(done, t == config.episode_raw_steps());
        }
    }

    #[test]
    fn step_after_done_is_an_error() {
        let mut env = PixelCatchEnv::new(EnvConfig::default(), 1).unwrap();
        for _ in 0..EnvConfig::default().episode_raw_steps() {
            env.step(Action::Stay).unwrap();
        }
        assert!(env.is_done());
        assert!(env.step(Action::Stay).is_err());
    }

    #[test]
    fn frame_has_one_ball_and_one_paddle() {
        let env = PixelCatchEnv::new(EnvConfig::default(), 11).unwrap();
        let frame = env.render();
        let balls = frame.data().iter().filter(|&&v| v == BALL_INTENSITY).count();
        let paddle = frame
            .data()
            .iter()
            .filter(|&&v| v == PADDLE_INTENSITY)
            .count();
        assert_eq!(balls, 1);
        assert_eq!(paddle, 3);
    }

    #[test]
    fn observations_stay_in_unit_range() {
        let mut env = CatchEnv::new(EnvConfig::default(), 2).unwrap();
        let mut obs = env.observation().clone();
        for i in 0..60 {
            assert!(obs.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            let (o, _, done) = env
                .step(Action::from_index(i % 3).unwrap())
                .unwrap();
            obs = o;
            if done {
                break;
            }
        }
    }

    #[test]
    fn stack_zero_pads_then_shifts() {
        let config = EnvConfig::default();
        let plane = config.obs_height * config.obs_width;
        let mut env = CatchEnv::new(config.clone(), 9).unwrap();
        let obs0 = env.observation().clone();
        // channels 0..2 are zero padding, channel 3 is the reset frame
        for ch in 0..3 {
            assert!(obs0.data()[ch * plane..(ch + 1) * plane].iter().all(|&v| v == 0.0));
        }
        assert!(obs0.data()[3 * plane..].iter().any(|&v| v != 0.0));

        let (obs1, _, _) = env.step(Action::Stay).unwrap();
        // the previous newest frame shifted down one channel
        assert_eq!(
            &obs1.data()[2 * plane..3 * plane],
            &obs0.data()[3 * plane..]
        );
    }

    #[test]
    fn resize_averages_areas() {
        let f = Tensor::from_vec(&[2, 2], vec![0.0, 1.0, 1.0, 1.0]).unwrap();
        let r = resize_area(&f, 1, 1).unwrap();
        assert_eq!(r.data(), &[0.75]);

        let identity = resize_area(&f, 2, 2).unwrap();
        assert_eq!(identity, f);

        // 3 -> 2 along one axis splits the middle cell evenly
        let g = Tensor::from_vec(&[1, 3], vec![0.0, 1.0, 0.0]).unwrap();
        let rg = resize_area(&g, 1, 2).unwrap();
        assert!((rg.data()[0] - 1.0 / 3.0).abs() < 1e-6);
        assert!((rg.data()[1] - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn grayscale_averages_channels() {
        let f = Tensor::from_vec(&[2, 1, 1], vec![0.0, 1.0]).unwrap();
        assert_eq!(grayscale(&f).unwrap().data(), &[0.5]);
        let flat = Tensor::from_vec(&[1, 2], vec![0.25, 0.75]).unwrap();
        assert_eq!(grayscale(&flat).unwrap(), flat);
    }

    #[test]
    fn identity_pipeline_passes_frames_through() {
        let mut p = FramePipeline::new(1, 1, 32, 32);
        let frame = Tensor::from_fn(&[32, 32], |i| (i % 5) as f32 / 5.0);
        let obs = p.push_raw(&frame).unwrap().unwrap();
        assert_eq!(obs.reshape(&[32, 32]).unwrap(), frame);
    }

    #[test]
    fn frame_skip_keeps_the_window_max() {
        let mut p = FramePipeline::new(2, 1, 2, 2);
        let a = Tensor::from_vec(&[2, 2], vec![0.1, 0.9, 0.0, 0.0]).unwrap();
        let b = Tensor::from_vec(&[2, 2], vec![0.5, 0.2, 0.0, 1.0]).unwrap();
        assert!(p.push_raw(&a).unwrap().is_none());
        let obs = p.push_raw(&b).unwrap().unwrap();
        assert_eq!(obs.data(), &[0.5, 0.9, 0.0, 1.0]);
    }

    #[test]
    fn skipping_halves_agent_steps() {
        let config = EnvConfig {
            frame_skip: 2,
            ..EnvConfig::default()
        };
        let mut env = CatchEnv::new(config.clone(), 4).unwrap();
        let mut steps = 0;
        loop {
            let (_, _, done) = env.step(Action::Stay).unwrap();
            steps += 1;
            if done {
                break;
            }
        }
        assert_eq!(steps, config.episode_raw_steps() / 2);
    }
}
