//! Flexibility-conditioned insertion policies and their baselines.
//!
//! Every insertion episode is a single decision, so the learning problem is
//! a contextual bandit: observe, emit one primitive, receive one reward. SAC
//! therefore regresses its critics straight onto rewards.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

use ndarray::{concatenate, s, Array1, Array2, Axis};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::env::{
    self, execute_episode, ActionBounds, EnvConfig, EpisodeOutcome, EpisodeRecord, Observation, PrimitiveAction,
    Scene, ScenePin, ACTION_DIM,
};
use crate::error::{invalid, Error, Result};
use crate::estimator::FlexEstimator;
use crate::flexibility::EstimationRig;
use crate::neural::{Activation, Adam, AdamConfig, Checkpoint, DenseNet, Gradients};
use crate::seed::{self, Rng};
use crate::sim::{RopeParams, Vec3, MAX_RING_ANGLE};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
const POSITION_SCALE: f64 = 0.5;
const RADIUS_SCALE: f64 = 0.025;
const F_SCALE: f64 = 5.0;

fn signed_log(f: f64) -> f64 {
    f.signum() * f.abs().ln_1p()
}

/// Observation vector: ring-local rope coordinates `(axial, lateral,
/// normal)` per particle, then ring radius and angle, then the flexibility
/// when present. Every entry is scaled to order one.
pub fn featurize(obs: &Observation) -> Vec<f64> {
    let ring = obs.ring();
    let mut out = Vec::with_capacity(3 * obs.rope_positions.len() + 3);
    for p in &obs.rope_positions {
        let local = ring.to_local(p);
        out.extend(local.iter().map(|c| c / POSITION_SCALE));
    }
    out.push(obs.ring_radius / RADIUS_SCALE);
    out.push(obs.ring_angle / MAX_RING_ANGLE);
    if let Some(f) = obs.f {
        out.push(signed_log(f) / F_SCALE);
    }
    out
}

pub fn feature_dim(n: usize, provide_f: bool) -> usize {
    3 * n + 2 + usize::from(provide_f)
}

/// Result of one bandit round.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Feedback {
    pub reward: f64,
    pub success: bool,
}

/// Single-decision environment over normalized actions in `[-1, 1]^d`.
pub trait Bandit {
    type Scene;

    fn feature_dim(&self) -> usize;

    fn action_dim(&self) -> usize {
        ACTION_DIM
    }

    /// Draws the context for round `index` of the stream `label`.
    fn reset(&self, label: &str, index: u64) -> Result<(Vec<f64>, Self::Scene)>;

    fn play(&self, scene: &Self::Scene, action: &[f64]) -> Result<Feedback>;
}

/// Reward `−‖a − c‖²` for a hidden optimum `c`, with irrelevant random
/// context features. Used to check the learners against a known optimum.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticBandit {
    pub target: Vec<f64>,
    pub context_dim: usize,
    pub seed: u64,
}

impl Bandit for QuadraticBandit {
    type Scene = ();

    fn feature_dim(&self) -> usize {
        self.context_dim
    }

    fn action_dim(&self) -> usize {
        self.target.len()
    }

    fn reset(&self, label: &str, index: u64) -> Result<(Vec<f64>, ())> {
        let mut rng = seed::stream(self.seed, label, index);
        Ok(((0..self.context_dim).map(|_| rng.random_range(-1.0..1.0)).collect(), ()))
    }

    fn play(&self, _: &(), action: &[f64]) -> Result<Feedback> {
        let d2: f64 = action.iter().zip(&self.target).map(|(a, c)| (a - c).powi(2)).sum();
        Ok(Feedback { reward: -d2, success: d2 < 0.05 * 0.05 })
    }
}

/// Source of the flexibility value shown to the policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FMode {
    Truth,
    Estimated,
    Random,
}

/// Range of label flexibilities over the environment's sweep range.
pub fn label_range(config: &EnvConfig) -> Result<(f64, f64)> {
    let (a, _) = config.rig.label_for_sweep(config.sweep_min)?;
    let (b, _) = config.rig.label_for_sweep(config.sweep_max)?;
    Ok((a.min(b), a.max(b)))
}

/// The insertion task as a bandit, with the flexibility shown to the policy
/// chosen by `f_mode`.
#[derive(Clone, Debug)]
pub struct InsertionBandit {
    pub config: EnvConfig,
    pub f_mode: FMode,
    pub estimator: Option<FlexEstimator>,
    f_range: (f64, f64),
}

/// A reset scene together with what the policy observes.
#[derive(Clone, Debug)]
pub struct InsertionRound {
    pub obs: Observation,
    pub scene: Scene,
}

impl InsertionBandit {
    pub fn new(config: EnvConfig, f_mode: FMode, estimator: Option<FlexEstimator>) -> Result<Self> {
        config.validate(false)?;
        if f_mode == FMode::Estimated && estimator.is_none() {
            return Err(invalid("estimated flexibility mode needs a trained estimator"));
        }
        let f_range = label_range(&config)?;
        Ok(Self { config, f_mode, estimator, f_range })
    }

    pub fn f_range(&self) -> (f64, f64) {
        self.f_range
    }

    pub fn round(&self, label: &str, index: u64) -> Result<InsertionRound> {
        let episode_seed = seed::derive(self.config.seed, label, index);
        let (mut obs, scene) = env::reset(&self.config, episode_seed)?;
        if self.config.provide_f {
            obs.f = Some(self.shown_f(&scene, episode_seed)?);
        }
        Ok(InsertionRound { obs, scene })
    }

    fn shown_f(&self, scene: &Scene, episode_seed: u64) -> Result<f64> {
        match self.f_mode {
            FMode::Truth => Ok(scene.f_true),
            FMode::Estimated => {
                let est = self.estimator.as_ref().ok_or_else(|| invalid("no estimator"))?;
                estimate_scene_f(&self.config.rig, est, &scene.params)
            }
            FMode::Random => {
                let mut rng = seed::stream(episode_seed, "random-f", 0);
                Ok(rng.random_range(self.f_range.0..=self.f_range.1))
            }
        }
    }
}

/// Runs the estimation rig on the episode's rope and returns the estimator's
/// flexibility for the observed window.
pub fn estimate_scene_f(rig: &EstimationRig, est: &FlexEstimator, params: &RopeParams) -> Result<f64> {
    let (curve, _) = rig.input_curve(params)?;
    est.estimate(&curve)
}

impl Bandit for InsertionBandit {
    type Scene = Scene;

    fn feature_dim(&self) -> usize {
        feature_dim(self.config.rope_n, self.config.provide_f)
    }

    fn reset(&self, label: &str, index: u64) -> Result<(Vec<f64>, Scene)> {
        let r = self.round(label, index)?;
        Ok((featurize(&r.obs), r.scene))
    }

    fn play(&self, scene: &Scene, action: &[f64]) -> Result<Feedback> {
        let a = PrimitiveAction::from_normalized(action, &self.config.bounds());
        let out = execute_episode(scene, &a);
        Ok(Feedback { reward: out.reward, success: out.success })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SacConfig {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub batch: usize,
    pub replay_capacity: usize,
    /// Target-network smoothing. Kept for completeness; one-step episodes
    /// never bootstrap, so no target networks are used.
    pub tau: f64,
    pub gamma: f64,
    pub warmup: usize,
    pub episodes: usize,
    pub updates_per_episode: usize,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub init_log_alpha: f64,
    pub seed: u64,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            lr: 3e-4,
            batch: 256,
            replay_capacity: 1_000_000,
            tau: 0.005,
            gamma: 0.99,
            warmup: 1000,
            episodes: 8000,
            updates_per_episode: 1,
            eval_every: 1000,
            eval_episodes: 20,
            init_log_alpha: 0.0,
            seed: 0,
        }
    }
}

impl SacConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(invalid("gamma must lie in [0, 1]"));
        }
        if self.batch == 0 || self.episodes < self.batch {
            return Err(invalid("episode budget must be at least the batch size"));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) || self.lr < 0.0 || self.replay_capacity < self.batch {
            return Err(invalid("invalid network width, learning rate or replay capacity"));
        }
        if self.eval_every == 0 {
            return Err(invalid("eval_every must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
}

/// Fixed-capacity ring buffer of transitions.
#[derive(Clone, Debug, Default)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, items: Vec::new(), next: 0 }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity.max(1);
    }

    pub fn items(&self) -> &[Transition] {
        &self.items
    }

    /// Uniform sample with replacement, as `(obs, action, reward)` matrices.
    pub fn sample(&self, batch: usize, rng: &mut Rng) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
        let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..self.items.len())).collect();
        self.gather(&idx)
    }

    pub fn gather(&self, idx: &[usize]) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
        let od = self.items[0].obs.len();
        let ad = self.items[0].action.len();
        let obs = Array2::from_shape_fn((idx.len(), od), |(i, j)| self.items[idx[i]].obs[j]);
        let act = Array2::from_shape_fn((idx.len(), ad), |(i, j)| self.items[idx[i]].action[j]);
        let rew = Array1::from_iter(idx.iter().map(|&i| self.items[i].reward));
        (obs, act, rew)
    }
}

/// Tanh-squashed diagonal Gaussian policy over normalized actions.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPolicy {
    pub trunk: DenseNet,
    pub action_dim: usize,
}

/// Reparameterized batch sample with everything the actor gradient needs.
struct PolicySample {
    cache: crate::neural::DenseCache,
    raw_log_std: Array2<f64>,
    std: Array2<f64>,
    eps: Array2<f64>,
    action: Array2<f64>,
    log_prob: Array1<f64>,
}

const SQUASH_EPS: f64 = 1e-6;

impl GaussianPolicy {
    pub fn new(obs_dim: usize, hidden: &[usize], action_dim: usize, rng: &mut Rng) -> Result<Self> {
        let mut widths = vec![obs_dim];
        widths.extend_from_slice(hidden);
        widths.push(2 * action_dim);
        Ok(Self { trunk: DenseNet::mlp(&widths, Activation::Relu, rng)?, action_dim })
    }

    pub fn obs_dim(&self) -> usize {
        self.trunk.input_dim()
    }

    /// Deterministic action `tanh(μ)`.
    pub fn mean_action(&self, obs: &[f64]) -> Result<Vec<f64>> {
        let x = Array2::from_shape_vec((1, obs.len()), obs.to_vec()).map_err(|e| invalid(e.to_string()))?;
        let out = self.trunk.predict(x.view())?;
        Ok(out.slice(s![0, ..self.action_dim]).iter().map(|m| m.tanh()).collect())
    }

    pub fn sample_action(&self, obs: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
        let x = Array2::from_shape_vec((1, obs.len()), obs.to_vec()).map_err(|e| invalid(e.to_string()))?;
        Ok(self.sample_batch(x, rng)?.action.row(0).to_vec())
    }

    fn sample_batch(&self, x: Array2<f64>, rng: &mut Rng) -> Result<PolicySample> {
        let (out, cache) = self.trunk.forward(x.view())?;
        let d = self.action_dim;
        let mean = out.slice(s![.., ..d]).to_owned();
        let raw_log_std = out.slice(s![.., d..]).to_owned();
        let log_std = raw_log_std.mapv(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX));
        let std = log_std.mapv(f64::exp);
        let eps: Array2<f64> = Array2::from_shape_fn(mean.raw_dim(), |_| StandardNormal.sample(rng));
        let action = (&mean + &(&std * &eps)).mapv(f64::tanh);
        let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        let mut log_prob = Array1::zeros(mean.nrows());
        for i in 0..mean.nrows() {
            log_prob[i] = (0..d)
                .map(|k| {
                    let a = action[[i, k]];
                    -0.5 * eps[[i, k]].powi(2) - log_std[[i, k]] - half_log_2pi - (1.0 - a * a + SQUASH_EPS).ln()
                })
                .sum();
        }
        Ok(PolicySample { cache, raw_log_std, std, eps, action, log_prob })
    }
}

/// Learner state: actor, twin critics and entropy temperature.
#[derive(Clone, Debug)]
pub struct Sac {
    pub config: SacConfig,
    pub actor: GaussianPolicy,
    pub q1: DenseNet,
    pub q2: DenseNet,
    pub log_alpha: f64,
    pub target_entropy: f64,
    pub episodes_done: usize,
    actor_opt: Adam,
    q1_opt: Adam,
    q2_opt: Adam,
    alpha_m: f64,
    alpha_v: f64,
    alpha_t: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub alpha: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub episodes: usize,
    pub success_rate: f64,
    pub mean_reward: f64,
    pub alpha: f64,
}

impl Sac {
    pub fn new(obs_dim: usize, action_dim: usize, config: SacConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::stream(config.seed, "sac-init", 0);
        let actor = GaussianPolicy::new(obs_dim, &config.hidden, action_dim, &mut rng)?;
        let mut widths = vec![obs_dim + action_dim];
        widths.extend_from_slice(&config.hidden);
        widths.push(1);
        let q1 = DenseNet::mlp(&widths, Activation::Relu, &mut rng)?;
        let q2 = DenseNet::mlp(&widths, Activation::Relu, &mut rng)?;
        let adam = AdamConfig::with_lr(config.lr);
        Ok(Self {
            actor_opt: Adam::new(adam, &actor.trunk),
            q1_opt: Adam::new(adam, &q1),
            q2_opt: Adam::new(adam, &q2),
            actor,
            q1,
            q2,
            log_alpha: config.init_log_alpha,
            target_entropy: -(action_dim as f64),
            episodes_done: 0,
            alpha_m: 0.0,
            alpha_v: 0.0,
            alpha_t: 0,
            config,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    fn critic_inputs(obs: &Array2<f64>, act: &Array2<f64>) -> Array2<f64> {
        concatenate![Axis(1), *obs, *act]
    }

    /// Mean squared error of both critics against the stored rewards.
    pub fn critic_mse(&self, buffer: &ReplayBuffer) -> Result<f64> {
        let idx: Vec<usize> = (0..buffer.len()).collect();
        let (o, a, r) = buffer.gather(&idx);
        let x = Self::critic_inputs(&o, &a);
        let mut total = 0.0;
        for q in [&self.q1, &self.q2] {
            let pred = q.predict(x.view())?;
            total += (&pred.column(0) - &r).mapv(|e| e * e).mean().unwrap_or(0.0);
        }
        Ok(total / 2.0)
    }

    /// Critic regression toward the observed reward.
    pub fn update_critics(&mut self, obs: &Array2<f64>, act: &Array2<f64>, rew: &Array1<f64>) -> Result<f64> {
        let x = Self::critic_inputs(obs, act);
        let n = rew.len() as f64;
        let mut loss = 0.0;
        for (q, opt) in [(&mut self.q1, &mut self.q1_opt), (&mut self.q2, &mut self.q2_opt)] {
            let (pred, cache) = q.forward(x.view())?;
            let err = &pred.column(0) - rew;
            loss += err.mapv(|e| e * e).sum() / n;
            let g = (err * (2.0 / n)).insert_axis(Axis(1));
            let (grads, _) = q.backward(&cache, g.view())?;
            opt.step(q, &grads)?;
        }
        Ok(loss)
    }

    /// Reparameterized actor step and temperature step on a batch of
    /// observations.
    pub fn update_actor(&mut self, obs: &Array2<f64>, rng: &mut Rng) -> Result<f64> {
        let (loss, grads, mean_log_prob) = self.actor_gradients(obs, rng)?;
        self.actor_opt.step(&mut self.actor.trunk, &grads)?;
        self.alpha_step(-(mean_log_prob + self.target_entropy));
        Ok(loss)
    }

    /// Actor loss `mean(α·log π(a|s) − min(Q1, Q2)(s, a))` for one noise
    /// draw, its gradient and the mean log-probability.
    pub fn actor_gradients(&self, obs: &Array2<f64>, rng: &mut Rng) -> Result<(f64, Gradients, f64)> {
        let b = obs.nrows() as f64;
        let d = self.actor.action_dim;
        let alpha = self.alpha();
        let ps = self.actor.sample_batch(obs.clone(), rng)?;
        let x = Self::critic_inputs(obs, &ps.action);
        let (q1v, c1) = self.q1.forward(x.view())?;
        let (q2v, c2) = self.q2.forward(x.view())?;
        let pick1 = Array1::from_iter(q1v.column(0).iter().zip(q2v.column(0)).map(|(a, b)| f64::from(u8::from(a <= b))));
        let qmin = Array1::from_iter(q1v.column(0).iter().zip(q2v.column(0)).map(|(a, b)| a.min(*b)));
        let loss = (alpha * &ps.log_prob - &qmin).sum() / b;

        let g1 = (&pick1 * (-1.0 / b)).insert_axis(Axis(1));
        let g2 = (&pick1.mapv(|p| 1.0 - p) * (-1.0 / b)).insert_axis(Axis(1));
        let (_, dx1) = self.q1.backward(&c1, g1.view())?;
        let (_, dx2) = self.q2.backward(&c2, g2.view())?;
        let obs_dim = obs.ncols();
        let dl_da = dx1.slice(s![.., obs_dim..]).to_owned() + dx2.slice(s![.., obs_dim..]);

        let mut grad_out = Array2::zeros((obs.nrows(), 2 * d));
        for i in 0..obs.nrows() {
            for k in 0..d {
                let a = ps.action[[i, k]];
                let one_m = 1.0 - a * a;
                let g_squash = 2.0 * a * one_m / (one_m + SQUASH_EPS);
                let se = ps.std[[i, k]] * ps.eps[[i, k]];
                grad_out[[i, k]] = alpha / b * g_squash + dl_da[[i, k]] * one_m;
                let raw = ps.raw_log_std[[i, k]];
                if (LOG_STD_MIN..=LOG_STD_MAX).contains(&raw) {
                    grad_out[[i, d + k]] = alpha / b * (-1.0 + g_squash * se) + dl_da[[i, k]] * one_m * se;
                }
            }
        }
        let (grads, _) = self.actor.trunk.backward(&ps.cache, grad_out.view())?;
        Ok((loss, grads, ps.log_prob.mean().unwrap_or(0.0)))
    }

    fn alpha_step(&mut self, g: f64) {
        let AdamConfig { beta1, beta2, eps, .. } = AdamConfig::default();
        self.alpha_t += 1;
        self.alpha_m = beta1 * self.alpha_m + (1.0 - beta1) * g;
        self.alpha_v = beta2 * self.alpha_v + (1.0 - beta2) * g * g;
        let mh = self.alpha_m / (1.0 - beta1.powi(self.alpha_t as i32));
        let vh = self.alpha_v / (1.0 - beta2.powi(self.alpha_t as i32));
        self.log_alpha -= self.config.lr * mh / (vh.sqrt() + eps);
    }

    pub fn update(&mut self, buffer: &ReplayBuffer, rng: &mut Rng) -> Result<UpdateStats> {
        let (o, a, r) = buffer.sample(self.config.batch, rng);
        let critic_loss = self.update_critics(&o, &a, &r)?;
        let actor_loss = self.update_actor(&o, rng)?;
        Ok(UpdateStats { critic_loss, actor_loss, alpha: self.alpha() })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors = Vec::new();
        for (prefix, net) in [("actor", &self.actor.trunk), ("q1", &self.q1), ("q2", &self.q2)] {
            for mut t in net.to_checkpoint().tensors {
                t.name = format!("{prefix}.{}", t.name);
                tensors.push(t);
            }
        }
        Checkpoint {
            kind: "sac".into(),
            config: serde_json::json!({
                "sac": self.config,
                "obs_dim": self.actor.obs_dim(),
                "action_dim": self.actor.action_dim,
                "log_alpha": self.log_alpha,
                "episodes_done": self.episodes_done,
            }),
            tensors,
        }
    }

    /// Restores networks, temperature and the episode counter. Optimizer
    /// moments and the replay buffer start afresh.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind("sac")?;
        let config: SacConfig = ckpt.config_field("sac")?;
        let obs_dim: usize = ckpt.config_field("obs_dim")?;
        let action_dim: usize = ckpt.config_field("action_dim")?;
        let mut sac = Self::new(obs_dim, action_dim, config)?;
        sac.log_alpha = ckpt.config_field("log_alpha")?;
        sac.episodes_done = ckpt.config_field("episodes_done")?;
        for (prefix, net) in [("actor", &mut sac.actor.trunk), ("q1", &mut sac.q1), ("q2", &mut sac.q2)] {
            let part: Vec<_> = ckpt
                .tensors
                .iter()
                .filter_map(|t| {
                    t.name.strip_prefix(&format!("{prefix}.")).map(|n| crate::neural::NamedTensor { name: n.to_string(), ..t.clone() })
                })
                .collect();
            Checkpoint { kind: "dense".into(), config: serde_json::Value::Null, tensors: part }.load_into(net)?;
        }
        Ok(sac)
    }
}

/// Average reward and success of the deterministic policy on held-out
/// rounds.
pub fn evaluate_bandit<B: Bandit>(bandit: &B, policy: &GaussianPolicy, label: &str, episodes: usize) -> Result<(f64, f64)> {
    let mut reward = 0.0;
    let mut wins = 0;
    for k in 0..episodes {
        let (x, scene) = bandit.reset(label, k as u64)?;
        let fb = bandit.play(&scene, &policy.mean_action(&x)?)?;
        reward += fb.reward;
        wins += usize::from(fb.success);
    }
    let n = episodes.max(1) as f64;
    Ok((wins as f64 / n, reward / n))
}

/// Trains (or continues training) a SAC learner for `cfg.episodes` more
/// episodes with a fresh replay buffer.
pub fn sac_train<B: Bandit>(bandit: &B, sac: &mut Sac) -> Result<Vec<CurvePoint>> {
    let mut buffer = ReplayBuffer::new(sac.config.replay_capacity);
    let episodes = sac.config.episodes;
    sac_train_with(bandit, sac, &mut buffer, episodes)
}

/// Runs `episodes` more episodes against `buffer`. Warmup episodes draw
/// uniform actions; afterwards each episode is followed by
/// `updates_per_episode` gradient steps.
pub fn sac_train_with<B: Bandit>(
    bandit: &B,
    sac: &mut Sac,
    buffer: &mut ReplayBuffer,
    episodes: usize,
) -> Result<Vec<CurvePoint>> {
    let cfg = sac.config.clone();
    let mut curve = Vec::new();
    let end = sac.episodes_done + episodes;
    while sac.episodes_done < end {
        let ep = sac.episodes_done;
        let mut rng = seed::stream(cfg.seed, "sac-episode", ep as u64);
        let (x, scene) = bandit.reset("train", ep as u64)?;
        let action: Vec<f64> = if ep < cfg.warmup {
            (0..bandit.action_dim()).map(|_| rng.random_range(-1.0..=1.0)).collect()
        } else {
            sac.actor.sample_action(&x, &mut rng)?
        };
        let fb = bandit.play(&scene, &action)?;
        buffer.push(Transition { obs: x, action, reward: fb.reward });
        if ep + 1 >= cfg.warmup && buffer.len() >= cfg.batch {
            for _ in 0..cfg.updates_per_episode {
                let stats = sac.update(buffer, &mut rng)?;
                if !(stats.critic_loss.is_finite() && stats.actor_loss.is_finite() && stats.alpha.is_finite()) {
                    return Err(Error::TrainingDiverged { stage: "episode", index: ep });
                }
            }
        }
        sac.episodes_done += 1;
        if sac.episodes_done.is_multiple_of(cfg.eval_every) {
            let (success_rate, mean_reward) = evaluate_bandit(bandit, &sac.actor, "eval", cfg.eval_episodes)?;
            log::info!("episode {}: success {success_rate:.2} reward {mean_reward:.3} alpha {:.4}", sac.episodes_done, sac.alpha());
            curve.push(CurvePoint { episodes: sac.episodes_done, success_rate, mean_reward, alpha: sac.alpha() });
        }
    }
    Ok(curve)
}

pub fn write_curve_csv<W: std::io::Write>(curve: &[CurvePoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in curve {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CemConfig {
    pub population: usize,
    pub elites: usize,
    pub iterations: usize,
    pub init_std: f64,
    pub min_std: f64,
    pub seed: u64,
}

impl Default for CemConfig {
    fn default() -> Self {
        Self { population: 64, elites: 8, iterations: 20, init_std: 0.5, min_std: 1e-3, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CemResult {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub best_reward: Vec<f64>,
}

/// Cross-entropy method over `[-1, 1]^dim`: sample the diagonal Gaussian,
/// keep the `elites` best candidates, refit mean and standard deviation.
pub fn cem_optimize(dim: usize, cfg: &CemConfig, mut objective: impl FnMut(usize, &[f64]) -> Result<f64>) -> Result<CemResult> {
    if cfg.elites == 0 || cfg.population < cfg.elites {
        return Err(invalid("cem needs population ≥ elites ≥ 1"));
    }
    let mut mean = vec![0.0; dim];
    let mut std = vec![cfg.init_std; dim];
    let mut best_reward = Vec::with_capacity(cfg.iterations);
    let mut rng = seed::stream(cfg.seed, "cem", 0);
    for it in 0..cfg.iterations {
        let mut scored: Vec<(f64, Vec<f64>)> = Vec::with_capacity(cfg.population);
        for k in 0..cfg.population {
            let cand: Vec<f64> = (0..dim)
                .map(|j| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (mean[j] + std[j] * z).clamp(-1.0, 1.0)
                })
                .collect();
            let r = objective(it * cfg.population + k, &cand)?;
            scored.push((r, cand));
        }
        scored.sort_by(|a, b| b.0.total_cmp(&a.0));
        let elite = &scored[..cfg.elites];
        best_reward.push(elite[0].0);
        let n = cfg.elites as f64;
        for j in 0..dim {
            let m = elite.iter().map(|(_, c)| c[j]).sum::<f64>() / n;
            let v = elite.iter().map(|(_, c)| (c[j] - m).powi(2)).sum::<f64>() / n;
            mean[j] = m;
            std[j] = v.sqrt().max(cfg.min_std);
        }
    }
    Ok(CemResult { mean, std, best_reward })
}

/// Context bucket for CEM on the insertion task.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextBucket {
    pub sweep_param: f64,
    pub angle: f64,
    pub radius: f64,
}

/// CEM over one context bucket: each candidate is scored on a fresh scene
/// whose flexibility, angle and radius are pinned to the bucket.
pub fn cem_train(config: &EnvConfig, bucket: ContextBucket, cfg: &CemConfig) -> Result<CemResult> {
    let pin = ScenePin { sweep_param: Some(bucket.sweep_param), angle: Some(bucket.angle), radius: Some(bucket.radius) };
    let bounds = config.bounds();
    cem_optimize(ACTION_DIM, cfg, |k, a| {
        let (_, scene) = env::reset_pinned(config, seed::derive(cfg.seed, "cem-scene", k as u64), pin)?;
        Ok(execute_episode(&scene, &PrimitiveAction::from_normalized(a, &bounds)).reward)
    })
}

/// Anything that maps an observation to a primitive. The hidden scene is
/// passed for baselines that physically probe the rope.
pub trait Agent {
    fn name(&self) -> String;
    fn uses_f(&self) -> bool;
    fn act(&self, obs: &Observation, scene: &Scene, rng: &mut Rng) -> Result<PrimitiveAction>;
}

/// Deterministic SAC actor.
#[derive(Clone, Debug)]
pub struct SacAgent {
    pub label: String,
    pub policy: GaussianPolicy,
    pub provide_f: bool,
}

impl Agent for SacAgent {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn uses_f(&self) -> bool {
        self.provide_f
    }

    fn act(&self, obs: &Observation, _: &Scene, _: &mut Rng) -> Result<PrimitiveAction> {
        let mut o = obs.clone();
        if !self.provide_f {
            o.f = None;
        } else if o.f.is_none() {
            return Err(invalid("policy was trained with flexibility but none was observed"));
        }
        let a = self.policy.mean_action(&featurize(&o))?;
        Ok(PrimitiveAction::from_normalized(&a, &env::ActionBounds::for_depth(obs.ring_depth)))
    }
}

/// Uniform random primitive.
#[derive(Clone, Copy, Debug, Default)]
pub struct RandomAgent;

impl Agent for RandomAgent {
    fn name(&self) -> String {
        "Random".into()
    }

    fn uses_f(&self) -> bool {
        false
    }

    fn act(&self, obs: &Observation, _: &Scene, rng: &mut Rng) -> Result<PrimitiveAction> {
        let u: Vec<f64> = (0..ACTION_DIM).map(|_| rng.random_range(-1.0..=1.0)).collect();
        Ok(PrimitiveAction::from_normalized(&u, &ActionBounds::for_depth(obs.ring_depth)))
    }
}

/// Grasp index used by the visual baseline without flexibility.
pub const VB_FIXED_GRASP: usize = 5;
/// Calibrated square-root grasp rule `i_p = α·√f + β` (see
/// [`calibrate_visual_baseline`]).
pub const VB_ALPHA: f64 = 0.0;
pub const VB_BETA: f64 = 38.0;

/// Hand-designed baseline: grasp, hold the rope horizontally, look at where
/// the tip hangs, rotate so the grasp-to-tip direction points along the
/// insertion direction with the tip just above the entry face, then push
/// along the ring axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisualBaseline {
    pub use_f: bool,
    pub alpha: f64,
    pub beta: f64,
    pub rig: EstimationRig,
}

impl VisualBaseline {
    pub fn new(use_f: bool) -> Self {
        Self { use_f, alpha: VB_ALPHA, beta: VB_BETA, rig: EstimationRig::default() }
    }

    pub fn grasp_index(&self, f: Option<f64>, n: usize) -> Result<usize> {
        if !self.use_f {
            return Ok(VB_FIXED_GRASP.min(n - 1));
        }
        let f = f.ok_or_else(|| invalid("visual baseline with flexibility needs f in the observation"))?;
        let raw = self.alpha * f.max(0.0).sqrt() + self.beta;
        Ok((raw.round().max(1.0) as usize).clamp(1, n - 2))
    }

    /// Tip position relative to the gripper while the rope is held
    /// horizontally at `grasp` (jaw along the in-plane horizontal).
    pub fn hanging_tip(&self, params: &RopeParams, grasp: usize) -> Result<Vec3> {
        let rig = EstimationRig { plane_normal: self.rig.plane_normal, ..self.rig.clone() };
        let shape = rig.hold(params, grasp)?;
        let grip = shape.state.grasp_target().expect("rig grasps");
        Ok(shape.state.positions[params.n - 1] - grip)
    }

    /// Primitive for a given grasp index and hanging-tip offset.
    pub fn plan(&self, obs: &Observation, grasp: usize, tip: Vec3) -> PrimitiveAction {
        let ring = obs.ring();
        let bounds = ActionBounds::for_depth(obs.ring_depth);
        let n = obs.rope_positions.len();
        let h = ring.horizontal();
        let droop = tip.z.atan2(tip.dot(&h));
        let reach = tip.norm();
        let start_axial = obs.ring_depth / 2.0 + 0.01 + reach;
        let end_axial = 0.5 * (bounds.end_axial.0 + bounds.end_axial.1);
        PrimitiveAction::new(
            grasp as f64 / (n - 1) as f64,
            [start_axial, 0.0],
            [end_axial, 0.0],
            droop,
            droop,
            &bounds,
        )
    }
}

impl Agent for VisualBaseline {
    fn name(&self) -> String {
        if self.use_f { "VB w/ f".into() } else { "VB w/o f".into() }
    }

    fn uses_f(&self) -> bool {
        self.use_f
    }

    fn act(&self, obs: &Observation, scene: &Scene, _: &mut Rng) -> Result<PrimitiveAction> {
        let n = obs.rope_positions.len();
        let grasp = self.grasp_index(obs.f, n)?;
        let tip = self.hanging_tip(&scene.params, grasp)?;
        Ok(self.plan(obs, grasp, tip))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AngleBand {
    Low,
    Mid,
    High,
}

impl AngleBand {
    pub const ALL: [AngleBand; 3] = [AngleBand::Low, AngleBand::Mid, AngleBand::High];

    pub fn of(theta: f64) -> Self {
        if theta <= FRAC_PI_4 {
            AngleBand::Low
        } else if theta <= FRAC_PI_2 {
            AngleBand::Mid
        } else {
            AngleBand::High
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandMetrics {
    pub band: AngleBand,
    pub episodes: usize,
    pub success_pct: f64,
    pub avg_dist_cm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub episodes: usize,
    pub success_pct: f64,
    pub avg_dist_cm: f64,
    pub bands: Vec<BandMetrics>,
}

fn rate_and_distance(records: &[&EpisodeRecord]) -> (f64, f64) {
    if records.is_empty() {
        return (0.0, 0.0);
    }
    let n = records.len() as f64;
    let wins = records.iter().filter(|r| r.success).count() as f64;
    let dist = records.iter().map(|r| r.signed_endpoint_distance).sum::<f64>() / n;
    (100.0 * wins / n, 100.0 * dist)
}

pub fn aggregate(records: &[EpisodeRecord]) -> Metrics {
    let all: Vec<&EpisodeRecord> = records.iter().collect();
    let (success_pct, avg_dist_cm) = rate_and_distance(&all);
    let bands = AngleBand::ALL
        .iter()
        .map(|&band| {
            let sel: Vec<&EpisodeRecord> = records.iter().filter(|r| AngleBand::of(r.theta) == band).collect();
            let (success_pct, avg_dist_cm) = rate_and_distance(&sel);
            BandMetrics { band, episodes: sel.len(), success_pct, avg_dist_cm }
        })
        .collect();
    Metrics { episodes: records.len(), success_pct, avg_dist_cm, bands }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSpec {
    pub episodes: usize,
    pub seed: u64,
    pub f_mode: FMode,
    /// Overrides the sampled ring radius.
    pub radius: Option<f64>,
}

/// Runs `spec.episodes` seeded episodes. Episode `k` uses the same scene for
/// every agent, so methods are compared on identical rounds.
pub fn evaluate(
    agent: &dyn Agent,
    config: &EnvConfig,
    spec: &EvalSpec,
    estimator: Option<&FlexEstimator>,
) -> Result<(Metrics, Vec<EpisodeRecord>)> {
    if spec.episodes == 0 {
        return Err(invalid("evaluation needs at least one episode"));
    }
    let cfg = EnvConfig { provide_f: true, ..config.clone() };
    let bandit = InsertionBandit::new(cfg, spec.f_mode, estimator.cloned())?;
    let pin = ScenePin { radius: spec.radius, ..ScenePin::default() };
    let mut records = Vec::with_capacity(spec.episodes);
    for k in 0..spec.episodes {
        let episode_seed = seed::derive(spec.seed, "eval", k as u64);
        let (mut obs, scene) = env::reset_pinned(&bandit.config, episode_seed, pin)?;
        obs.f = if agent.uses_f() { Some(bandit.shown_f(&scene, episode_seed)?) } else { None };
        let mut rng = seed::stream(episode_seed, "agent", 0);
        let action = agent.act(&obs, &scene, &mut rng)?;
        let outcome: EpisodeOutcome = execute_episode(&scene, &action);
        records.push(EpisodeRecord::new(&scene, &action, &outcome));
    }
    Ok((aggregate(&records), records))
}

pub fn write_records_jsonl<W: std::io::Write>(records: &[EpisodeRecord], mut out: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_records_jsonl<R: std::io::BufRead>(input: R) -> Result<Vec<EpisodeRecord>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// One row of the method comparison table, aggregated over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub method: String,
    pub regime: String,
    pub success_pct: f64,
    pub avg_dist_cm: f64,
    pub seed_count: usize,
    pub success_std: f64,
    pub avg_dist_std_cm: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len().max(1) as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

pub fn table_row(method: &str, regime: &str, per_seed: &[Metrics]) -> TableRow {
    let (s, s_std) = mean_std(&per_seed.iter().map(|m| m.success_pct).collect::<Vec<_>>());
    let (d, d_std) = mean_std(&per_seed.iter().map(|m| m.avg_dist_cm).collect::<Vec<_>>());
    TableRow {
        method: method.into(),
        regime: regime.into(),
        success_pct: s,
        avg_dist_cm: d,
        seed_count: per_seed.len(),
        success_std: s_std,
        avg_dist_std_cm: d_std,
    }
}

pub fn write_table_csv<W: std::io::Write>(rows: &[TableRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandRow {
    pub method: String,
    pub band: AngleBand,
    pub episodes: usize,
    pub success_pct: f64,
    pub avg_dist_cm: f64,
}

pub fn band_rows(method: &str, metrics: &Metrics) -> Vec<BandRow> {
    metrics
        .bands
        .iter()
        .map(|b| BandRow {
            method: method.into(),
            band: b.band,
            episodes: b.episodes,
            success_pct: b.success_pct,
            avg_dist_cm: b.avg_dist_cm,
        })
        .collect()
}

pub fn write_band_csv<W: std::io::Write>(rows: &[BandRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPoint {
    pub alpha: f64,
    pub beta: f64,
    pub success_pct: f64,
}

/// Grid search for the square-root grasp rule: every `(α, β)` pair is scored
/// by the visual baseline's success over `episodes` scenes at each sweep
/// value. Returns the best pair (first on ties) and the full grid.
pub fn calibrate_visual_baseline(
    config: &EnvConfig,
    alphas: &[f64],
    betas: &[f64],
    sweep: &[f64],
    episodes: usize,
    seed: u64,
) -> Result<(CalibrationPoint, Vec<CalibrationPoint>)> {
    let cfg = EnvConfig { provide_f: true, ..config.clone() };
    let mut scenes = Vec::new();
    for (i, &s) in sweep.iter().enumerate() {
        for k in 0..episodes {
            let pin = ScenePin { sweep_param: Some(s), ..ScenePin::default() };
            let (obs, scene) = env::reset_pinned(&cfg, seed::derive(seed, "vb-calibration", (i * episodes + k) as u64), pin)?;
            scenes.push((obs, scene));
        }
    }
    let mut grid = Vec::new();
    for &alpha in alphas {
        for &beta in betas {
            let vb = VisualBaseline { alpha, beta, ..VisualBaseline::new(true) };
            let mut wins = 0;
            for (obs, scene) in &scenes {
                let a = vb.act(obs, scene, &mut seed::stream(seed, "unused", 0))?;
                wins += usize::from(execute_episode(scene, &a).success);
            }
            grid.push(CalibrationPoint { alpha, beta, success_pct: 100.0 * wins as f64 / scenes.len().max(1) as f64 });
        }
    }
    let best = grid
        .iter()
        .fold(None::<&CalibrationPoint>, |best, p| match best {
            Some(b) if b.success_pct >= p.success_pct => Some(b),
            _ => Some(p),
        })
        .cloned()
        .ok_or_else(|| invalid("calibration grid is empty"))?;
    Ok((best, grid))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::gradient_check;

    fn quad() -> QuadraticBandit {
        QuadraticBandit { target: vec![0.3, -0.2, 0.5, -0.6, 0.1, 0.0, 0.4], context_dim: 3, seed: 5 }
    }

    fn obs_with(f: Option<f64>) -> Observation {
        Observation {
            rope_positions: (0..5).map(|i| Vec3::new(0.1 + 0.012 * i as f64, 0.0, 0.0)).collect(),
            ring_center: Vec3::new(0.0, 0.0, 0.2),
            ring_angle: 0.4,
            ring_radius: 0.02,
            ring_depth: 0.04,
            ring_outer_radius: 0.04,
            plane_normal: Vec3::new(0.0, 1.0, 0.0),
            f,
        }
    }

    #[test]
    fn featurize_length_tracks_f() {
        let a = featurize(&obs_with(None));
        let b = featurize(&obs_with(Some(12.0)));
        assert_eq!(a.len() + 1, b.len());
        assert_eq!(a.len(), feature_dim(5, false));
        assert_eq!(featurize(&obs_with(Some(12.0))), b);
    }

    #[test]
    fn featurize_is_translation_invariant() {
        let o = obs_with(Some(3.0));
        let shift = Vec3::new(0.07, 0.0, -0.03);
        let moved = Observation {
            rope_positions: o.rope_positions.iter().map(|p| p + shift).collect(),
            ring_center: o.ring_center + shift,
            ..o.clone()
        };
        for (x, y) in featurize(&o).iter().zip(featurize(&moved)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn replay_buffer_wraps() {
        let mut b = ReplayBuffer::new(3);
        for k in 0..5 {
            b.push(Transition { obs: vec![k as f64], action: vec![0.0], reward: k as f64 });
        }
        assert_eq!(b.len(), 3);
        let mut rewards: Vec<f64> = b.items().iter().map(|t| t.reward).collect();
        rewards.sort_by(f64::total_cmp);
        assert_eq!(rewards, vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn policy_actions_stay_in_bounds() {
        let mut rng = seed::stream(1, "t", 0);
        let pol = GaussianPolicy::new(4, &[8], 7, &mut rng).unwrap();
        for k in 0..50 {
            let x: Vec<f64> = (0..4).map(|j| 10.0 * ((k * 4 + j) as f64).sin()).collect();
            for a in pol.sample_action(&x, &mut rng).unwrap().into_iter().chain(pol.mean_action(&x).unwrap()) {
                assert!((-1.0..=1.0).contains(&a));
            }
        }
    }

    #[test]
    fn log_prob_matches_density_of_squashed_gaussian() {
        let mut rng = seed::stream(2, "t", 0);
        let pol = GaussianPolicy::new(2, &[4], 1, &mut rng).unwrap();
        let x = Array2::from_shape_vec((1, 2), vec![0.3, -0.4]).unwrap();
        let ps = pol.sample_batch(x.clone(), &mut rng).unwrap();
        let out = pol.trunk.predict(x.view()).unwrap();
        let (mu, ls) = (out[[0, 0]], out[[0, 1]].clamp(LOG_STD_MIN, LOG_STD_MAX));
        let a = ps.action[[0, 0]];
        let u = a.atanh();
        let sigma = ls.exp();
        let density = (-0.5 * ((u - mu) / sigma).powi(2)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt()) / (1.0 - a * a);
        assert!((ps.log_prob[0] - density.ln()).abs() < 1e-4);
    }

    #[test]
    fn actor_gradient_matches_finite_differences() {
        let cfg = SacConfig { hidden: vec![5], batch: 4, episodes: 4, replay_capacity: 4, ..SacConfig::default() };
        let mut sac = Sac::new(3, 2, cfg).unwrap();
        sac.log_alpha = 0.3f64.ln();
        let obs = Array2::from_shape_fn((4, 3), |(i, j)| ((i * 3 + j) as f64 * 0.7).sin());
        let (_, grads, _) = sac.actor_gradients(&obs, &mut seed::stream(3, "fd", 0)).unwrap();
        let worst = gradient_check(&sac.actor.trunk, &grads, 1e-6, 1e-8, |trunk| {
            let probe = Sac { actor: GaussianPolicy { trunk: trunk.clone(), action_dim: 2 }, ..sac.clone() };
            probe.actor_gradients(&obs, &mut seed::stream(3, "fd", 0)).unwrap().0
        });
        assert!(worst < 1e-5, "relative error {worst}");
    }

    #[test]
    fn critic_mse_decreases_on_frozen_buffer() {
        let bandit = quad();
        let mut sac = Sac::new(3, 7, SacConfig { hidden: vec![32, 32], batch: 64, episodes: 64, replay_capacity: 512, lr: 1e-3, ..SacConfig::default() }).unwrap();
        let mut buf = ReplayBuffer::new(512);
        let mut rng = seed::stream(4, "t", 0);
        for k in 0..512 {
            let (x, _) = bandit.reset("train", k).unwrap();
            let a: Vec<f64> = (0..7).map(|_| rng.random_range(-1.0..=1.0)).collect();
            let r = bandit.play(&(), &a).unwrap().reward;
            buf.push(Transition { obs: x, action: a, reward: r });
        }
        let first = sac.critic_mse(&buf).unwrap();
        let mut prev = first;
        for round in 0..5 {
            for _ in 0..40 {
                let (o, a, r) = buf.sample(64, &mut rng);
                sac.update_critics(&o, &a, &r).unwrap();
            }
            let now = sac.critic_mse(&buf).unwrap();
            assert!(now < prev, "round {round}: {now} !< {prev}");
            prev = now;
        }
        assert!(prev < 0.2 * first);
    }

    #[test]
    fn warmup_actions_are_uniform() {
        struct Recorder(std::cell::RefCell<Vec<Vec<f64>>>);
        impl Bandit for Recorder {
            type Scene = ();
            fn feature_dim(&self) -> usize {
                1
            }
            fn action_dim(&self) -> usize {
                2
            }
            fn reset(&self, _: &str, _: u64) -> Result<(Vec<f64>, ())> {
                Ok((vec![0.0], ()))
            }
            fn play(&self, _: &(), a: &[f64]) -> Result<Feedback> {
                self.0.borrow_mut().push(a.to_vec());
                Ok(Feedback { reward: 0.0, success: false })
            }
        }
        let rec = Recorder(Default::default());
        let cfg = SacConfig { hidden: vec![4], batch: 8, warmup: 4000, episodes: 4000, eval_every: 10_000, ..SacConfig::default() };
        let mut sac = Sac::new(1, 2, cfg).unwrap();
        sac_train(&rec, &mut sac).unwrap();
        let acts = rec.0.into_inner();
        for j in 0..2 {
            let v: Vec<f64> = acts.iter().map(|a| a[j]).collect();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
            assert!(mean.abs() < 0.05, "mean {mean}");
            assert!((var - 1.0 / 3.0).abs() < 0.03, "var {var}");
            assert!(v.iter().all(|x| (-1.0..=1.0).contains(x)));
        }
    }

    #[test]
    fn sac_training_is_deterministic_and_resumable() {
        let bandit = quad();
        let cfg = SacConfig { hidden: vec![16], batch: 32, warmup: 50, episodes: 200, eval_every: 100, eval_episodes: 5, seed: 9, ..SacConfig::default() };
        let mut a = Sac::new(3, 7, cfg.clone()).unwrap();
        let mut b = Sac::new(3, 7, cfg).unwrap();
        let ca = sac_train(&bandit, &mut a).unwrap();
        let cb = sac_train(&bandit, &mut b).unwrap();
        assert_eq!(ca, cb);
        assert_eq!(ca.len(), 2);

        let ckpt = Checkpoint::from_json(&a.to_checkpoint().to_json().unwrap()).unwrap();
        let mut resumed = Sac::from_checkpoint(&ckpt).unwrap();
        assert_eq!(resumed.episodes_done, 200);
        assert_eq!(resumed.actor, a.actor);
        let more = sac_train(&bandit, &mut resumed).unwrap();
        assert_eq!(resumed.episodes_done, 400);
        assert_eq!(more[0].episodes, 300);
    }

    #[test]
    fn cem_degenerate_cases() {
        let q = quad();
        let cfg = CemConfig { iterations: 0, ..CemConfig::default() };
        let r = cem_optimize(7, &cfg, |_, a| Ok(q.play(&(), a)?.reward)).unwrap();
        assert_eq!(r.mean, vec![0.0; 7]);
        assert_eq!(r.std, vec![cfg.init_std; 7]);
        assert!(cem_optimize(7, &CemConfig { elites: 0, ..cfg.clone() }, |_, _| Ok(0.0)).is_err());

        // With every candidate kept, the new mean is the plain sample mean.
        let all = CemConfig { population: 10, elites: 10, iterations: 1, ..CemConfig::default() };
        let mut seen = Vec::new();
        let r = cem_optimize(2, &all, |_, a| {
            seen.push(a.to_vec());
            Ok(0.0)
        })
        .unwrap();
        for j in 0..2 {
            let m = seen.iter().map(|a| a[j]).sum::<f64>() / 10.0;
            assert!((r.mean[j] - m).abs() < 1e-12);
        }
    }

    #[test]
    fn cem_finds_quadratic_optimum() {
        let q = quad();
        let r = cem_optimize(7, &CemConfig::default(), |_, a| Ok(q.play(&(), a)?.reward)).unwrap();
        for (m, c) in r.mean.iter().zip(&q.target) {
            assert!((m - c).abs() < 0.05);
        }
    }

    #[test]
    fn vb_grasp_rules() {
        let vb = VisualBaseline::new(false);
        assert_eq!(vb.grasp_index(Some(100.0), 40).unwrap(), 5);
        assert_eq!(vb.grasp_index(None, 40).unwrap(), 5);
        let vbf = VisualBaseline { alpha: 2.0, beta: 12.0, ..VisualBaseline::new(true) };
        assert_eq!(vbf.grasp_index(Some(0.0), 40).unwrap(), 12);
        assert!(vbf.grasp_index(None, 40).is_err());
        let mut last = 0;
        for k in 0..200 {
            let i = vbf.grasp_index(Some(k as f64 * 1.5 - 20.0), 40).unwrap();
            assert!(i >= last && (1..=38).contains(&i));
            last = i;
        }
    }

    #[test]
    fn angle_bands() {
        assert_eq!(AngleBand::of(0.0), AngleBand::Low);
        assert_eq!(AngleBand::of(FRAC_PI_4), AngleBand::Low);
        assert_eq!(AngleBand::of(1.0), AngleBand::Mid);
        assert_eq!(AngleBand::of(FRAC_PI_2), AngleBand::Mid);
        assert_eq!(AngleBand::of(2.0), AngleBand::High);
    }

    fn record(theta: f64, success: bool, d: f64) -> EpisodeRecord {
        EpisodeRecord {
            seed: 0,
            sweep_param: 0.5,
            f: 10.0,
            theta,
            radius: 0.02,
            action: [0.0; 7],
            rope_in: success,
            rope_out: success,
            reward: 0.0,
            signed_endpoint_distance: if success { d } else { -d },
            success,
        }
    }

    #[test]
    fn zero_successes_give_mean_negative_distance() {
        let recs = vec![record(0.1, false, 0.02), record(1.0, false, 0.04)];
        let m = aggregate(&recs);
        assert_eq!(m.success_pct, 0.0);
        assert!((m.avg_dist_cm + 3.0).abs() < 1e-12);
        assert_eq!(m.bands[0].episodes, 1);
        assert_eq!(m.bands[2].episodes, 0);
    }

    #[test]
    fn table_row_averages_seeds() {
        let m1 = aggregate(&[record(0.1, true, 0.01)]);
        let m2 = aggregate(&[record(0.1, false, 0.01)]);
        let row = table_row("Ours w/ f", "rand θ", &[m1, m2]);
        assert_eq!(row.success_pct, 50.0);
        assert_eq!(row.success_std, 50.0);
        assert_eq!(row.seed_count, 2);
        let mut buf = Vec::new();
        write_table_csv(&[row], &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("method,regime,success_pct,avg_dist_cm,seed_count"));
    }
}
