//! The trial / episode / round meta-game.
//!
//! A trial runs `n_games` environments in parallel for `E` episodes of `T`
//! rounds. Naive learners update after every episode on the pooled
//! experience of all environments; a shaper keeps its observation state for
//! the whole trial and updates once, after the last episode.
//!
//! All randomness comes from ChaCha streams keyed by (seed, epoch, slot,
//! purpose), with the per-agent purpose tied to the agent rather than its
//! seat, so neither worker scheduling nor seat order changes any outcome.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{ActionId, GameName, GameSpec, LegalJoint, PayoffView};
use crate::observation::{render_prompt, AgentRole, ObservationState, PromptVariant, TrialShape};
use crate::policy::TokenPolicy;
use crate::ppo::{PpoConfig, PpoLearner, Step, Trajectory, UpdateDiagnostics};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Two naive learners.
    Baseline,
    /// Two naive learners, the first with episode-scoped visitation counts.
    EnrichedBaseline,
    /// A shaper in seat 0 against a naive learner in seat 1.
    Shaper,
}

impl Mode {
    pub fn roles(self) -> [AgentRole; 2] {
        match self {
            Mode::Baseline => [AgentRole::Naive, AgentRole::Naive],
            Mode::EnrichedBaseline => [AgentRole::NaiveEnriched, AgentRole::Naive],
            Mode::Shaper => [AgentRole::Shaper, AgentRole::Naive],
        }
    }

    /// Names used in the `role` column of the emitted CSVs.
    pub fn seat_names(self) -> [&'static str; 2] {
        match self {
            Mode::Baseline => ["player1", "player2"],
            Mode::EnrichedBaseline => ["enriched", "player2"],
            Mode::Shaper => ["shaper", "naive"],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::EnrichedBaseline => "enriched-baseline",
            Mode::Shaper => "shaper",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "enriched-baseline" | "enriched" => Ok(Mode::EnrichedBaseline),
            "shaper" => Ok(Mode::Shaper),
            other => Err(Error::config(format!(
                "unknown mode `{other}` (expected baseline, enriched-baseline or shaper)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialConfig {
    pub n_games: usize,
    pub episodes: u32,
    pub rounds: u32,
    /// Restore naive learners to their initial parameters before each trial.
    pub reset_naive_each_trial: bool,
}

impl Default for TrialConfig {
    fn default() -> Self {
        Self { n_games: 5, episodes: 5, rounds: 20, reset_naive_each_trial: false }
    }
}

impl TrialConfig {
    pub fn shape(&self) -> TrialShape {
        TrialShape { episodes: self.episodes, rounds: self.rounds }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_games == 0 || self.episodes == 0 || self.rounds == 0 {
            return Err(Error::config("n_games, episodes and rounds must all be >= 1"));
        }
        Ok(())
    }

    /// Steps per update for an agent with the given role.
    pub fn batch_steps(&self, role: AgentRole) -> usize {
        let per_episode = self.n_games * self.rounds as usize;
        match role {
            AgentRole::Shaper => per_episode * self.episodes as usize,
            AgentRole::Naive | AgentRole::NaiveEnriched => per_episode,
        }
    }
}

/// Payoff views by seat: in C-IPD seat 0 is paid from the modified table.
pub fn seat_views(game: GameName) -> [PayoffView; 2] {
    match game {
        GameName::Cipd => [PayoffView::Primary, PayoffView::Standard],
        _ => [PayoffView::Primary, PayoffView::Primary],
    }
}

/// Stream purposes. Agent streams add the agent's stream id.
const PURPOSE_ROLLOUT: u64 = 0;
const PURPOSE_UPDATE: u64 = 64;
pub(crate) const PURPOSE_EVAL: u64 = 128;

pub(crate) fn stream_rng(seed: u64, epoch: u64, slot: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((epoch << 24) ^ (slot << 8) ^ purpose);
    rng
}

#[derive(Debug, Clone)]
pub struct Agent {
    pub role: AgentRole,
    pub policy: TokenPolicy,
    pub learner: PpoLearner,
    /// Distinguishes this agent's random streams from its opponent's.
    pub stream: u64,
    initial: (TokenPolicy, PpoLearner),
}

impl Agent {
    pub fn new(role: AgentRole, policy: TokenPolicy, ppo: PpoConfig, stream: u64) -> Result<Self> {
        let learner = PpoLearner::new(ppo)?;
        Ok(Self { role, initial: (policy.clone(), learner.clone()), policy, learner, stream })
    }

    fn reset(&mut self) {
        self.policy = self.initial.0.clone();
        self.learner = self.initial.1.clone();
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub env: usize,
    pub episode: u32,
    pub round: u32,
    pub tokens: [char; 2],
    pub actions: [ActionId; 2],
    pub rewards: [Option<f64>; 2],
    pub discard: [bool; 2],
}

impl RoundRecord {
    /// The round from seat 0's perspective, if both moves were legal.
    pub fn legal_joint(&self) -> Option<LegalJoint> {
        LegalJoint::new(self.actions[0], self.actions[1])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSnapshot {
    /// Trial round index τ after which the update happened.
    pub after_round: u32,
    pub seat: usize,
    pub params: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateRecord {
    pub epoch: usize,
    pub seat: usize,
    /// Episode whose end triggered the update.
    pub episode: u32,
    pub diagnostics: UpdateDiagnostics,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrialLog {
    pub epoch: usize,
    pub records: Vec<RoundRecord>,
    pub snapshots: Vec<ParamSnapshot>,
    pub updates: Vec<UpdateRecord>,
    pub prompts: Vec<String>,
}

/// Counts over `(A1,A1), (A1,A2), (A2,A1), (A2,A2), I` from one seat's
/// perspective; `I` holds every round with a null action.
pub fn visitation_counts<'a>(records: impl IntoIterator<Item = &'a RoundRecord>, seat: usize) -> [u64; 5] {
    let mut out = [0; 5];
    for r in records {
        match LegalJoint::new(r.actions[seat], r.actions[1 - seat]) {
            Some(j) => out[j.index()] += 1,
            None => out[4] += 1,
        }
    }
    out
}

impl TrialLog {
    /// Deterministic text serialization of the round records and snapshots.
    pub fn to_bytes(&self) -> Vec<u8> {
        use std::fmt::Write as _;
        let mut s = String::new();
        let opt = |r: Option<f64>| r.map_or("-".to_string(), |v| format!("{v:?}"));
        for r in &self.records {
            writeln!(
                s,
                "{} {} {} {}{} {:?} {:?} {} {} {} {}",
                r.env,
                r.episode,
                r.round,
                r.tokens[0],
                r.tokens[1],
                r.actions[0],
                r.actions[1],
                opt(r.rewards[0]),
                opt(r.rewards[1]),
                u8::from(r.discard[0]),
                u8::from(r.discard[1])
            )
            .unwrap();
        }
        for snap in &self.snapshots {
            let vals: Vec<String> = snap.params.iter().map(|v| format!("{v:?}")).collect();
            writeln!(s, "snapshot {} {} {}", snap.after_round, snap.seat, vals.join(" ")).unwrap();
        }
        s.into_bytes()
    }

    /// Mean reward of `seat` over rounds where both moves were legal.
    pub fn mean_reward(&self, seat: usize) -> f64 {
        let (sum, n) = self
            .records
            .iter()
            .filter(|r| r.legal_joint().is_some())
            .fold((0.0, 0usize), |(s, n), r| (s + r.rewards[seat].unwrap_or(0.0), n + 1));
        if n == 0 {
            f64::NAN
        } else {
            sum / n as f64
        }
    }
}

/// Per-epoch, per-seat training metrics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub role: String,
    pub mean_reward: f64,
    #[serde(rename = "p_CC")]
    pub p_cc: f64,
    #[serde(rename = "p_CD")]
    pub p_cd: f64,
    #[serde(rename = "p_DC")]
    pub p_dc: f64,
    #[serde(rename = "p_DD")]
    pub p_dd: f64,
    #[serde(rename = "p_I")]
    pub p_i: f64,
    pub kl: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub beta: f64,
}

struct EnvState {
    id: usize,
    obs: [ObservationState; 2],
    rngs: [ChaCha8Rng; 2],
    buffers: [Trajectory; 2],
}

struct EpisodeOutput {
    records: Vec<RoundRecord>,
    prompts: Vec<String>,
}

/// Read-only context shared by all environments during one episode.
struct EpisodeContext<'a> {
    spec: &'a GameSpec,
    views: [PayoffView; 2],
    policies: [&'a TokenPolicy; 2],
    roles: [AgentRole; 2],
    shape: TrialShape,
    episode: u32,
    prompt_variant: Option<PromptVariant>,
}

fn play_episode(ctx: &EpisodeContext<'_>, env: &mut EnvState) -> Result<EpisodeOutput> {
    let t_len = ctx.shape.rounds;
    let mut records = Vec::with_capacity(t_len as usize);
    let mut prompts = Vec::new();
    for obs in &mut env.obs {
        obs.begin_episode(ctx.episode);
    }
    for t in 1..=t_len {
        let tau = (ctx.episode - 1) * t_len + t;
        let mut tokens = [0usize; 2];
        let mut pending = [(0.0, 0.0, None); 2];
        let mut actions = [ActionId::Null; 2];
        for seat in 0..2 {
            let obs = env.obs[seat].observe(ctx.roles[seat]);
            if let Some(variant) = ctx.prompt_variant {
                prompts.push(format!(
                    "### env {} episode {} round {} seat {}\n{}",
                    env.id,
                    ctx.episode,
                    t,
                    seat,
                    render_prompt(ctx.spec, seat, ctx.views, &obs, variant)
                ));
            }
            let enc = obs.encode(ctx.shape);
            let policy = ctx.policies[seat];
            let (token, logp, value) = policy.act(&enc, &mut env.rngs[seat])?;
            tokens[seat] = token;
            actions[seat] = ctx.spec.map_token(seat, policy.vocabulary().token(token), policy.vocabulary())?;
            pending[seat] = (logp, value, Some(enc));
        }
        let outcome = ctx.spec.step(actions, ctx.views);
        for seat in 0..2 {
            let (old_log_prob, old_value, enc) = pending[seat];
            let terminal = match ctx.roles[seat] {
                AgentRole::Shaper => tau == ctx.shape.episodes * t_len,
                AgentRole::Naive | AgentRole::NaiveEnriched => t == t_len,
            };
            env.buffers[seat].push(Step {
                encoding: enc.expect("encoding recorded above"),
                token: tokens[seat],
                reward: outcome.rewards[seat],
                old_log_prob,
                old_value,
                terminal,
            });
            env.obs[seat].update_history(outcome.legal_joint_for(seat));
        }
        records.push(RoundRecord {
            env: env.id,
            episode: ctx.episode,
            round: t,
            tokens: [0, 1].map(|s| ctx.policies[s].vocabulary().token(tokens[s])),
            actions,
            rewards: outcome.rewards,
            discard: outcome.discard_flags,
        });
    }
    Ok(EpisodeOutput { records, prompts })
}

/// A training run for one seed: a pair of agents and their game.
#[derive(Debug, Clone)]
pub struct Session {
    pub spec: GameSpec,
    pub views: [PayoffView; 2],
    pub mode: Mode,
    pub trial: TrialConfig,
    pub agents: [Agent; 2],
    pub seed: u64,
    /// Render prompts for environment 0 during the first trial.
    pub prompt_variant: Option<PromptVariant>,
    epoch: usize,
}

impl Session {
    pub fn new(spec: GameSpec, mode: Mode, trial: TrialConfig, agents: [Agent; 2], seed: u64) -> Result<Self> {
        trial.validate()?;
        let roles = mode.roles();
        for (seat, agent) in agents.iter().enumerate() {
            if agent.role != roles[seat] {
                return Err(Error::config(format!(
                    "seat {seat} holds a {} agent but mode {} expects {}",
                    agent.role.as_str(),
                    mode.as_str(),
                    roles[seat].as_str()
                )));
            }
            if agent.policy.labels() != spec.labels[seat] {
                return Err(Error::config(format!("seat {seat} policy labels differ from the game's")));
            }
            let expected = trial.batch_steps(agent.role);
            let got = agent.learner.config().batch_size;
            if got != expected {
                return Err(Error::validation(format!(
                    "seat {seat} ({}) batch_size is {got} but a trial of {} games x {} episodes x {} rounds yields {expected} steps per update",
                    agent.role.as_str(),
                    trial.n_games,
                    trial.episodes,
                    trial.rounds
                )));
            }
        }
        if agents[0].stream == agents[1].stream {
            return Err(Error::config("agents must use distinct random streams"));
        }
        Ok(Self { views: seat_views(spec.name), spec, mode, trial, agents, seed, prompt_variant: None, epoch: 0 })
    }

    /// Number of completed trials.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn policies(&self) -> [&TokenPolicy; 2] {
        [&self.agents[0].policy, &self.agents[1].policy]
    }

    fn update_seat(&mut self, seat: usize, trajectories: &[Trajectory], episode: u32, log: &mut TrialLog) -> Result<()> {
        let epoch = self.epoch;
        let agent = &mut self.agents[seat];
        let mut rng = stream_rng(self.seed, epoch as u64, u64::from(episode), PURPOSE_UPDATE + agent.stream);
        let diagnostics = agent.learner.update(&mut agent.policy, trajectories, epoch, &mut rng)?;
        log.snapshots.push(ParamSnapshot {
            after_round: episode * self.trial.rounds,
            seat,
            params: agent.policy.params().to_vec(),
        });
        log.updates.push(UpdateRecord { epoch, seat, episode, diagnostics });
        Ok(())
    }

    /// Plays one trial and applies all of its updates.
    pub fn run_trial(&mut self) -> Result<TrialLog> {
        if self.trial.reset_naive_each_trial {
            for agent in &mut self.agents {
                if agent.role != AgentRole::Shaper {
                    agent.reset();
                }
            }
        }
        let roles = self.mode.roles();
        let shape = self.trial.shape();
        let epoch = self.epoch as u64;
        let mut envs: Vec<EnvState> = (0..self.trial.n_games)
            .map(|id| EnvState {
                id,
                obs: roles.map(|r| ObservationState::new(r.scope())),
                rngs: [0, 1].map(|s| stream_rng(self.seed, epoch, id as u64, PURPOSE_ROLLOUT + self.agents[s].stream)),
                buffers: [Vec::new(), Vec::new()],
            })
            .collect();
        let mut log = TrialLog { epoch: self.epoch, ..Default::default() };

        for episode in 1..=self.trial.episodes {
            let ctx = EpisodeContext {
                spec: &self.spec,
                views: self.views,
                policies: self.policies(),
                roles,
                shape,
                episode,
                prompt_variant: if self.epoch == 0 { self.prompt_variant } else { None },
            };
            let outputs: Vec<EpisodeOutput> = envs
                .par_iter_mut()
                .map(|env| {
                    let ctx = EpisodeContext {
                        prompt_variant: if env.id == 0 { ctx.prompt_variant } else { None },
                        ..ctx
                    };
                    play_episode(&ctx, env)
                })
                .collect::<Result<_>>()?;
            for out in outputs {
                log.records.extend(out.records);
                log.prompts.extend(out.prompts);
            }
            for seat in 0..2 {
                if roles[seat] != AgentRole::Shaper {
                    let trajectories: Vec<Trajectory> =
                        envs.iter_mut().map(|e| std::mem::take(&mut e.buffers[seat])).collect();
                    self.update_seat(seat, &trajectories, episode, &mut log)?;
                }
            }
        }
        for seat in 0..2 {
            if roles[seat] == AgentRole::Shaper {
                let trajectories: Vec<Trajectory> =
                    envs.iter_mut().map(|e| std::mem::take(&mut e.buffers[seat])).collect();
                self.update_seat(seat, &trajectories, self.trial.episodes, &mut log)?;
            }
        }
        log.records.sort_by_key(|r| (r.env, r.episode, r.round));
        self.epoch += 1;
        Ok(log)
    }

    /// Per-seat metrics summarizing one trial.
    pub fn epoch_metrics(&self, log: &TrialLog) -> [EpochMetrics; 2] {
        let names = self.mode.seat_names();
        [0, 1].map(|seat| {
            let counts = visitation_counts(&log.records, seat);
            let total = counts.iter().sum::<u64>().max(1) as f64;
            let updates: Vec<&UpdateDiagnostics> =
                log.updates.iter().filter(|u| u.seat == seat).map(|u| &u.diagnostics).collect();
            let mean = |f: fn(&UpdateDiagnostics) -> f64| {
                updates.iter().map(|d| f(d)).sum::<f64>() / updates.len().max(1) as f64
            };
            EpochMetrics {
                epoch: log.epoch,
                role: names[seat].to_string(),
                mean_reward: log.mean_reward(seat),
                p_cc: counts[0] as f64 / total,
                p_cd: counts[1] as f64 / total,
                p_dc: counts[2] as f64 / total,
                p_dd: counts[3] as f64 / total,
                p_i: counts[4] as f64 / total,
                kl: mean(|d| d.mean_kl),
                policy_loss: mean(|d| d.policy_loss),
                value_loss: mean(|d| d.value_loss),
                entropy: mean(|d| d.entropy),
                beta: updates.last().map_or(f64::NAN, |d| d.beta),
            }
        })
    }
}
