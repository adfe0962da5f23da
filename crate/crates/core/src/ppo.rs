//! Clipped-surrogate PPO for token policies.
//!
//! An update runs, in order: score scaling of the raw rewards, a per-step KL
//! penalty against the policy's frozen reference, GAE over each trajectory
//! with discarded steps spliced out, then `ppo_epochs` passes of minibatched
//! gradient descent on the clipped surrogate, the clipped value loss and a
//! two-token entropy bonus.

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::observation::ObservationEncoding;
use crate::policy::{log_softmax_at, softmax, TokenPolicy};

const SCALE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KlConfig {
    /// Subtract the KL penalty from rewards at all.
    pub enabled: bool,
    pub initial_coef: f64,
    pub target: f64,
    pub horizon: usize,
    pub adaptive: bool,
}

impl Default for KlConfig {
    fn default() -> Self {
        Self { enabled: true, initial_coef: 0.2, target: 6.0, horizon: 10_000, adaptive: true }
    }
}

/// Linear decay of the entropy coefficient from `c_init` to `c_end` over
/// `decay_epochs` epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntropySchedule {
    pub c_init: f64,
    pub c_end: f64,
    pub decay_epochs: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    #[default]
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PpoConfig {
    pub learning_rate: f64,
    pub clip_range: f64,
    /// Half-width of the value clipping window; `inf` disables it.
    pub value_clip: f64,
    pub vf_coef: f64,
    pub gae_gamma: f64,
    pub gae_lambda: f64,
    pub kl: KlConfig,
    pub batch_size: usize,
    pub minibatch_size: usize,
    pub ppo_epochs: usize,
    pub score_scaling: bool,
    pub whiten_advantages: bool,
    pub entropy: Option<EntropySchedule>,
    pub optimizer: Optimizer,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1.41e-6,
            clip_range: 0.2,
            value_clip: 0.2,
            vf_coef: 0.2,
            gae_gamma: 1.0,
            gae_lambda: 0.95,
            kl: KlConfig::default(),
            batch_size: 100,
            minibatch_size: 10,
            ppo_epochs: 1,
            score_scaling: true,
            whiten_advantages: false,
            entropy: None,
            optimizer: Optimizer::Sgd,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(Error::config(msg.to_string())) };
        check(self.learning_rate >= 0.0 && self.learning_rate.is_finite(), "learning_rate must be finite and >= 0")?;
        check(self.clip_range > 0.0, "clip_range must be > 0")?;
        check(self.value_clip > 0.0, "value_clip must be > 0")?;
        check(self.vf_coef >= 0.0, "vf_coef must be >= 0")?;
        check((0.0..=1.0).contains(&self.gae_gamma), "gae_gamma must lie in [0, 1]")?;
        check(self.gae_lambda > 0.0 && self.gae_lambda <= 1.0, "gae_lambda must lie in (0, 1]")?;
        check(self.kl.initial_coef > 0.0, "kl.initial_coef must be > 0")?;
        check(self.kl.target > 0.0, "kl.target must be > 0")?;
        check(self.kl.horizon > 0, "kl.horizon must be > 0")?;
        check(self.batch_size > 0, "batch_size must be > 0")?;
        check(
            self.minibatch_size > 0 && self.minibatch_size <= self.batch_size,
            "minibatch_size must lie in 1..=batch_size",
        )?;
        check(self.ppo_epochs > 0, "ppo_epochs must be > 0")?;
        if let Some(e) = &self.entropy {
            check(e.c_init >= 0.0 && e.c_end >= 0.0, "entropy coefficients must be >= 0")?;
        }
        Ok(())
    }
}

pub fn entropy_coefficient(epoch: usize, schedule: Option<&EntropySchedule>) -> f64 {
    match schedule {
        None => 0.0,
        Some(s) if s.decay_epochs == 0 || epoch >= s.decay_epochs => s.c_end,
        Some(s) => s.c_init + (s.c_end - s.c_init) * epoch as f64 / s.decay_epochs as f64,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub encoding: ObservationEncoding,
    pub token: usize,
    /// `None` marks a discarded step (legal action against a null opponent).
    pub reward: Option<f64>,
    pub old_log_prob: f64,
    pub old_value: f64,
    pub terminal: bool,
}

impl Step {
    pub fn discarded(&self) -> bool {
        self.reward.is_none()
    }
}

pub type Trajectory = Vec<Step>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlController {
    pub coef: f64,
    pub target: f64,
    pub horizon: usize,
    pub adaptive: bool,
}

impl KlController {
    pub fn new(config: &KlConfig) -> Self {
        Self {
            coef: config.initial_coef,
            target: config.target,
            horizon: config.horizon,
            adaptive: config.adaptive,
        }
    }

    pub fn update(&mut self, observed_kl: f64, batch_steps: usize) {
        if !self.adaptive {
            return;
        }
        let error = (observed_kl / self.target - 1.0).clamp(-0.2, 0.2);
        self.coef *= 1.0 + error * batch_steps as f64 / self.horizon as f64;
    }
}

pub fn apply_kl_penalty(step_log_prob: f64, ref_log_prob: f64, reward: f64, coef: f64) -> f64 {
    reward - coef * (step_log_prob - ref_log_prob)
}

/// Running reward moments for score scaling.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningMoments {
    count: u64,
    mean: f64,
    m2: f64,
    first: Option<f64>,
    distinct: bool,
}

impl RunningMoments {
    pub fn push(&mut self, x: f64) {
        match self.first {
            None => self.first = Some(x),
            Some(f) if f != x => self.distinct = true,
            Some(_) => {}
        }
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    /// Population standard deviation, or 1.0 until two distinct samples.
    pub fn std(&self) -> f64 {
        if self.distinct {
            (self.m2 / self.count as f64).sqrt()
        } else {
            1.0
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }
}

/// Adds `rewards` to the running statistics, then divides each by the
/// updated standard deviation.
pub fn scale_scores(rewards: &[f64], state: &mut RunningMoments) -> Vec<f64> {
    for &r in rewards {
        state.push(r);
    }
    let denom = state.std() + SCALE_EPS;
    rewards.iter().map(|r| r / denom).collect()
}

/// Backward GAE over one spliced trajectory. Values after a terminal step
/// bootstrap to zero.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    terminals: &[bool],
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    assert!(values.len() == n && terminals.len() == n, "GAE inputs differ in length");
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let last = terminals[t] || t + 1 == n;
        let next_value = if last { 0.0 } else { values[t + 1] };
        if last {
            running = 0.0;
        }
        let delta = rewards[t] + gamma * next_value - values[t];
        running = delta + gamma * lambda * running;
        adv[t] = running;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Indices of the kept steps with their effective terminal flags: a
/// discarded step's terminal flag moves to the preceding kept step.
pub fn splice(trajectory: &[Step]) -> Vec<(usize, bool)> {
    let mut kept: Vec<(usize, bool)> = Vec::with_capacity(trajectory.len());
    for (i, step) in trajectory.iter().enumerate() {
        if step.discarded() {
            if step.terminal {
                if let Some(last) = kept.last_mut() {
                    last.1 = true;
                }
            }
        } else {
            kept.push((i, step.terminal));
        }
    }
    kept
}

/// GAE on a trajectory with raw rewards, aligned with the input steps
/// (`None` at discarded steps).
pub fn trajectory_gae(trajectory: &[Step], gamma: f64, lambda: f64) -> Vec<Option<(f64, f64)>> {
    let kept = splice(trajectory);
    let rewards: Vec<f64> = kept.iter().map(|&(i, _)| trajectory[i].reward.unwrap()).collect();
    let values: Vec<f64> = kept.iter().map(|&(i, _)| trajectory[i].old_value).collect();
    let terminals: Vec<bool> = kept.iter().map(|&(_, t)| t).collect();
    let (adv, ret) = compute_gae(&rewards, &values, &terminals, gamma, lambda);
    let mut out = vec![None; trajectory.len()];
    for (k, &(i, _)) in kept.iter().enumerate() {
        out[i] = Some((adv[k], ret[k]));
    }
    out
}

/// One training sample after advantage estimation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub encoding: ObservationEncoding,
    pub token: usize,
    pub old_log_prob: f64,
    pub old_value: f64,
    pub advantage: f64,
    pub ret: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    pub total: f64,
}

/// Entropy of the two legal tokens' renormalized distribution.
pub fn two_token_entropy(logits: &[f64], legal: [usize; 2]) -> f64 {
    let q = softmax(&[logits[legal[0]], logits[legal[1]]]);
    -q.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>()
}

#[derive(Debug, Clone, Copy)]
pub struct LossSettings {
    pub clip_range: f64,
    pub value_clip: f64,
    pub vf_coef: f64,
    pub entropy_coef: f64,
}

impl LossSettings {
    pub fn new(config: &PpoConfig, entropy_coef: f64) -> Self {
        Self {
            clip_range: config.clip_range,
            value_clip: config.value_clip,
            vf_coef: config.vf_coef,
            entropy_coef,
        }
    }
}

/// Minibatch loss at the policy's current parameters, with its gradient
/// accumulated into `grad` when given.
pub fn ppo_loss(
    policy: &TokenPolicy,
    samples: &[Sample],
    settings: &LossSettings,
    mut grad: Option<&mut [f64]>,
) -> Result<LossParts> {
    if samples.is_empty() {
        return Ok(LossParts::default());
    }
    let n = samples.len() as f64;
    let legal = policy.legal_indices();
    let eps = settings.clip_range;
    let mut parts = LossParts::default();
    for s in samples {
        let out = policy.distribution(&s.encoding)?;
        let probs = softmax(&out.logits);
        let logp = log_softmax_at(&out.logits, s.token);
        let ratio = (logp - s.old_log_prob).exp();
        let unclipped = ratio * s.advantage;
        let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * s.advantage;
        let surrogate = unclipped.min(clipped);
        parts.policy -= surrogate / n;

        let v = out.value;
        let v_clipped = s.old_value + (v - s.old_value).clamp(-settings.value_clip, settings.value_clip);
        let l1 = (v - s.ret).powi(2);
        let l2 = (v_clipped - s.ret).powi(2);
        parts.value += l1.max(l2) / n;

        let h = two_token_entropy(&out.logits, legal);
        parts.entropy += h / n;

        if let Some(g) = grad.as_deref_mut() {
            let mut d_logits = vec![0.0; probs.len()];
            // d(-surrogate/n)/dlogp; zero when the clipped branch is binding.
            let d_logp = if unclipped <= clipped { -unclipped / n } else { 0.0 };
            if d_logp != 0.0 {
                for (j, (d, p)) in d_logits.iter_mut().zip(&probs).enumerate() {
                    *d += d_logp * (if j == s.token { 1.0 } else { 0.0 } - p);
                }
            }
            if settings.entropy_coef != 0.0 {
                let q = softmax(&[out.logits[legal[0]], out.logits[legal[1]]]);
                for (k, &j) in legal.iter().enumerate() {
                    let dh = if q[k] > 0.0 { -q[k] * (q[k].ln() + h) } else { 0.0 };
                    d_logits[j] -= settings.entropy_coef * dh / n;
                }
            }
            let d_value = settings.vf_coef / n
                * if l1 >= l2 {
                    2.0 * (v - s.ret)
                } else if (v - s.old_value).abs() < settings.value_clip {
                    2.0 * (v_clipped - s.ret)
                } else {
                    0.0
                };
            policy.accumulate_gradients(&s.encoding, &d_logits, d_value, g)?;
        }
    }
    parts.total = parts.policy + settings.vf_coef * parts.value - settings.entropy_coef * parts.entropy;
    Ok(parts)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct UpdateDiagnostics {
    pub n_steps: usize,
    pub n_discarded: usize,
    pub n_minibatches: usize,
    /// Mean raw reward over kept steps.
    pub mean_reward: f64,
    /// Mean KL(π ‖ π_ref) over kept observations, before the update.
    pub mean_kl: f64,
    /// KL coefficient after the controller update.
    pub beta: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub entropy_coef: f64,
    pub grad_norm: f64,
    /// True when the batch had no kept steps and nothing was done.
    pub skipped: bool,
}

/// Per-agent optimizer state that persists across updates.
#[derive(Debug, Clone)]
pub struct PpoLearner {
    config: PpoConfig,
    kl: KlController,
    scores: RunningMoments,
    adam: AdamState,
}

impl PpoLearner {
    pub fn new(config: PpoConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { kl: KlController::new(&config.kl), config, scores: RunningMoments::default(), adam: AdamState::default() })
    }

    pub fn config(&self) -> &PpoConfig {
        &self.config
    }

    pub fn kl_controller(&self) -> &KlController {
        &self.kl
    }

    /// Turns trajectories into samples: scaling, KL penalty and GAE.
    pub fn prepare(&mut self, policy: &TokenPolicy, trajectories: &[Trajectory]) -> Result<(Vec<Sample>, f64, f64)> {
        let cfg = &self.config;
        let spliced: Vec<Vec<(usize, bool)>> = trajectories.iter().map(|t| splice(t)).collect();
        let raw: Vec<f64> = trajectories
            .iter()
            .zip(&spliced)
            .flat_map(|(t, kept)| kept.iter().map(move |&(i, _)| t[i].reward.unwrap()))
            .collect();
        if raw.is_empty() {
            return Ok((Vec::new(), 0.0, 0.0));
        }
        let mean_reward = raw.iter().sum::<f64>() / raw.len() as f64;
        let scaled = if cfg.score_scaling { scale_scores(&raw, &mut self.scores) } else { raw };

        let mut samples = Vec::with_capacity(scaled.len());
        let mut kl_sum = 0.0;
        let mut offset = 0;
        for (traj, kept) in trajectories.iter().zip(&spliced) {
            let mut rewards = Vec::with_capacity(kept.len());
            for (k, &(i, _)) in kept.iter().enumerate() {
                let step = &traj[i];
                kl_sum += policy.kl_to_reference(&step.encoding)?;
                let mut r = scaled[offset + k];
                if cfg.kl.enabled {
                    let ref_out = policy.reference_distribution(&step.encoding)?;
                    let ref_logp = log_softmax_at(&ref_out.logits, step.token);
                    r = apply_kl_penalty(step.old_log_prob, ref_logp, r, self.kl.coef);
                }
                rewards.push(r);
            }
            let values: Vec<f64> = kept.iter().map(|&(i, _)| traj[i].old_value).collect();
            let terminals: Vec<bool> = kept.iter().map(|&(_, t)| t).collect();
            let (adv, ret) = compute_gae(&rewards, &values, &terminals, cfg.gae_gamma, cfg.gae_lambda);
            for (k, &(i, _)) in kept.iter().enumerate() {
                let step = &traj[i];
                samples.push(Sample {
                    encoding: step.encoding,
                    token: step.token,
                    old_log_prob: step.old_log_prob,
                    old_value: step.old_value,
                    advantage: adv[k],
                    ret: ret[k],
                });
            }
            offset += kept.len();
        }
        if cfg.whiten_advantages && samples.len() > 1 {
            let n = samples.len() as f64;
            let mean = samples.iter().map(|s| s.advantage).sum::<f64>() / n;
            let var = samples.iter().map(|s| (s.advantage - mean).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt() + SCALE_EPS;
            for s in &mut samples {
                s.advantage = (s.advantage - mean) / sd;
            }
        }
        let mean_kl = kl_sum / samples.len() as f64;
        Ok((samples, mean_reward, mean_kl))
    }

    pub fn update(
        &mut self,
        policy: &mut TokenPolicy,
        trajectories: &[Trajectory],
        epoch: usize,
        rng: &mut impl Rng,
    ) -> Result<UpdateDiagnostics> {
        let total: usize = trajectories.iter().map(Vec::len).sum();
        let (mut samples, mean_reward, mean_kl) = self.prepare(policy, trajectories)?;
        let entropy_coef = entropy_coefficient(epoch, self.config.entropy.as_ref());
        let mut diag = UpdateDiagnostics {
            n_steps: samples.len(),
            n_discarded: total - samples.len(),
            mean_reward,
            mean_kl,
            entropy_coef,
            ..Default::default()
        };
        if samples.is_empty() {
            warn!("PPO update at epoch {epoch} skipped: every step was discarded");
            diag.skipped = true;
            diag.beta = self.kl.coef;
            return Ok(diag);
        }
        let settings = LossSettings::new(&self.config, entropy_coef);
        let lr = self.config.learning_rate;
        let mut grad = vec![0.0; policy.num_params()];
        for _ in 0..self.config.ppo_epochs {
            samples.shuffle(rng);
            for chunk in samples.chunks(self.config.minibatch_size) {
                grad.fill(0.0);
                let parts = ppo_loss(policy, chunk, &settings, Some(&mut grad))?;
                diag.policy_loss += parts.policy;
                diag.value_loss += parts.value;
                diag.entropy += parts.entropy;
                diag.grad_norm += grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                diag.n_minibatches += 1;
                if lr != 0.0 {
                    self.step(policy.params_mut(), &grad);
                }
            }
        }
        let m = diag.n_minibatches as f64;
        diag.policy_loss /= m;
        diag.value_loss /= m;
        diag.entropy /= m;
        diag.grad_norm /= m;
        self.kl.update(mean_kl, diag.n_steps);
        diag.beta = self.kl.coef;
        Ok(diag)
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        let lr = self.config.learning_rate;
        match self.config.optimizer {
            Optimizer::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            Optimizer::Adam => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                const EPS: f64 = 1e-8;
                let a = &mut self.adam;
                if a.m.len() != params.len() {
                    a.m = vec![0.0; params.len()];
                    a.v = vec![0.0; params.len()];
                    a.t = 0;
                }
                a.t += 1;
                let c1 = 1.0 - B1.powi(a.t as i32);
                let c2 = 1.0 - B2.powi(a.t as i32);
                for i in 0..params.len() {
                    a.m[i] = B1 * a.m[i] + (1.0 - B1) * grad[i];
                    a.v[i] = B2 * a.v[i] + (1.0 - B2) * grad[i] * grad[i];
                    params[i] -= lr * (a.m[i] / c1) / ((a.v[i] / c2).sqrt() + EPS);
                }
            }
        }
    }
}
