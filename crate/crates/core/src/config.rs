//! Run configuration: a TOML document with one section per role.
//!
//! [`RunConfig::paper`] reproduces the reference hyperparameter surface for
//! a game and mode. [`RunConfig::desk`] rescales it for the small
//! parametric policies used here: larger step sizes, whitened advantages
//! and no KL leash on the naive learner.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::EvalConfig;
use crate::game::{GameName, GameSpec};
use crate::observation::{AgentRole, PromptVariant};
use crate::orchestrator::{stream_rng, Agent, Mode, Session, TrialConfig};
use crate::policy::{Backend, InitTargets, TokenPolicy, Vocabulary, DEFAULT_HIDDEN, DEFAULT_ILLEGAL_MASS, DEFAULT_VOCAB_SIZE};
use crate::ppo::{EntropySchedule, PpoConfig};

const PURPOSE_INIT: u64 = 200;

/// Opponent initializations with approximate initial `p(A1)` of 0.75, 0.5
/// and 0.25, each defined by its action labels and per-key targets.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Opponent {
    #[default]
    Default,
    P75,
    P50,
    P25,
}

impl Opponent {
    pub fn as_str(self) -> &'static str {
        match self {
            Opponent::Default => "default",
            Opponent::P75 => "p75",
            Opponent::P50 => "p50",
            Opponent::P25 => "p25",
        }
    }
}

impl std::str::FromStr for Opponent {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "default" => Ok(Opponent::Default),
            "p75" => Ok(Opponent::P75),
            "p50" => Ok(Opponent::P50),
            "p25" => Ok(Opponent::P25),
            other => Err(Error::config(format!("unknown opponent `{other}` (expected default, p75, p50 or p25)"))),
        }
    }
}

/// Labels and initial `p(A1)` per naive key for an opponent initialization.
pub fn opponent_init(game: GameName, opponent: Opponent) -> ([char; 2], InitTargets) {
    use GameName::*;
    use Opponent::*;
    let base = GameSpec::builtin(game).labels[1];
    match (game, opponent) {
        (Ipd | Cipd | Ish, Default) => (base, [0.60, 0.89, 0.89, 0.70, 0.68]),
        (Imp, Default) => (base, [0.48, 0.32, 0.60, 0.56, 0.66]),
        (Icg, Default) => (base, [0.61, 0.90, 0.87, 0.82, 0.82]),
        (Ipd | Cipd | Ish, P75) => (['H', 'K'], [0.60, 0.89, 0.89, 0.70, 0.68]),
        (Ipd | Cipd | Ish, P50) => (['N', 'Y'], [0.68, 0.38, 0.87, 0.58, 0.77]),
        (Ipd | Cipd | Ish, P25) => (['I', 'X'], [0.12, 0.21, 0.75, 0.34, 0.24]),
        (Imp, P75) => (['S', 'Y'], [0.71, 0.78, 0.87, 0.57, 0.70]),
        (Imp, P50) => (['N', 'Y'], [0.48, 0.32, 0.60, 0.56, 0.66]),
        (Imp, P25) => (['N', 'M'], [0.30, 0.20, 0.36, 0.13, 0.18]),
        (Icg, P75) => (['T', 'K'], [0.61, 0.90, 0.87, 0.82, 0.82]),
        (Icg, P50) => (['N', 'M'], [0.41, 0.40, 0.71, 0.37, 0.61]),
        (Icg, P25) => (['T', 'F'], [0.24, 0.47, 0.47, 0.02, 0.11]),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoleConfig {
    pub backend: Backend,
    /// MLP hidden width; ignored by the tabular backend.
    pub hidden: usize,
    pub labels: [char; 2],
    /// Initial `p(A1)` per naive key; absent means zero logits.
    pub targets: Option<InitTargets>,
    pub illegal_mass: f64,
    pub ppo: PpoConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    pub n_games: usize,
    /// Episode lengths to evaluate at.
    pub t_eval: Vec<u32>,
    pub reset_shaper_each_episode: bool,
    /// Added to the run seed to derive the evaluation seed.
    pub seed_offset: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { n_games: 100, t_eval: vec![20], reset_shaper_each_episode: false, seed_offset: 1_000_000 }
    }
}

impl EvalSettings {
    pub fn config(&self, run_seed: u64, rounds: u32, episodes: u32) -> EvalConfig {
        EvalConfig {
            n_games: self.n_games,
            rounds,
            episodes_per_stream: episodes,
            reset_shaper_each_episode: self.reset_shaper_each_episode,
            seed: run_seed.wrapping_add(self.seed_offset),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSettings {
    pub dir: PathBuf,
    /// Write checkpoints every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
    /// Write the prompts of environment 0 during the first trial.
    pub emit_prompts: bool,
}

impl Default for OutputSettings {
    fn default() -> Self {
        Self { dir: PathBuf::from("runs"), checkpoint_every: 50, emit_prompts: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub game: GameName,
    pub mode: Mode,
    pub opponent: Opponent,
    pub epochs: usize,
    pub seeds: Vec<u64>,
    pub vocab_size: usize,
    pub prompt_variant: PromptVariant,
    pub trial: TrialConfig,
    /// Seat 0 in shaper mode.
    pub shaper: RoleConfig,
    /// Every naive seat unless overridden by `player1`.
    pub naive: RoleConfig,
    /// Seat 0 in the baseline modes; defaults to `naive` with the game's labels.
    pub player1: Option<RoleConfig>,
    pub eval: EvalSettings,
    pub output: OutputSettings,
}

fn naive_ppo(game: GameName, trial: &TrialConfig) -> PpoConfig {
    let mut ppo = PpoConfig { batch_size: trial.batch_steps(AgentRole::Naive), ..PpoConfig::default() };
    if game == GameName::Imp {
        ppo.learning_rate = 1.41e-7;
        ppo.vf_coef = 0.05;
    }
    ppo
}

fn shaper_ppo(game: GameName, opponent: Opponent, variant: PromptVariant, trial: &TrialConfig) -> PpoConfig {
    use GameName::*;
    use Opponent::*;
    let (lr, vf, clip) = match (game, opponent) {
        (Ipd, Default) => (1.41e-7, 1e-3, 1e-4),
        (Imp, Default) => (3.41e-7, 1e-3, 0.2),
        (Icg, Default) => (1.41e-7, 1e-3, 0.2),
        (Ipd, P75) => (1.41e-7, 1e-3, 0.2),
        (Ipd, P50) => (1.41e-7, 5e-4, 5e-3),
        (Ipd, P25) => (1.41e-7, 3e-3, 1e-4),
        (Imp, P75 | P50) => (4.41e-7, 1e-3, 0.2),
        (Imp, P25) => (6.41e-7, 1e-3, 0.2),
        (Icg, P75 | P50) => (1.41e-7, 1e-3, 0.2),
        (Icg, P25) => (6.41e-8, 1e-3, 0.2),
        (Cipd, _) => (8.41e-8, 5e-5, 0.2),
        (Ish, _) => (8.41e-8, 1e-3, 0.2),
    };
    let mut ppo = PpoConfig {
        learning_rate: lr,
        vf_coef: vf,
        clip_range: clip,
        batch_size: trial.batch_steps(AgentRole::Shaper),
        ..PpoConfig::default()
    };
    match (variant, game) {
        (PromptVariant::Table, Ipd) => ppo.clip_range = 1e-5,
        (PromptVariant::Table, Imp) => ppo.learning_rate = 2.41e-7,
        (PromptVariant::Switched, Ipd) => {
            ppo.learning_rate = 6.41e-7;
            ppo.clip_range = 0.2;
            ppo.entropy = Some(EntropySchedule { c_init: 0.1, c_end: 0.0, decay_epochs: 25 });
        }
        (PromptVariant::Switched, Imp) => ppo.learning_rate = 6.41e-6,
        (PromptVariant::Switched, Icg) => {
            ppo.learning_rate = 1.41e-7;
            ppo.entropy = Some(EntropySchedule { c_init: 0.7, c_end: 0.0, decay_epochs: 25 });
        }
        _ => {}
    }
    ppo
}

impl RunConfig {
    /// The reference configuration for `game` and `mode`.
    pub fn paper(game: GameName, mode: Mode) -> Self {
        Self::paper_with(game, mode, Opponent::Default, PromptVariant::Text)
    }

    pub fn paper_with(game: GameName, mode: Mode, opponent: Opponent, variant: PromptVariant) -> Self {
        let trial = TrialConfig::default();
        let (naive_labels, naive_targets) = opponent_init(game, opponent);
        let (_, shaper_targets) = opponent_init(game, Opponent::Default);
        let spec = GameSpec::builtin(game);
        Self {
            game,
            mode,
            opponent,
            epochs: 200,
            seeds: (0..5).collect(),
            vocab_size: DEFAULT_VOCAB_SIZE,
            prompt_variant: variant,
            shaper: RoleConfig {
                backend: Backend::Mlp,
                hidden: DEFAULT_HIDDEN,
                labels: spec.labels[0],
                targets: Some(shaper_targets),
                illegal_mass: DEFAULT_ILLEGAL_MASS,
                ppo: shaper_ppo(game, opponent, variant, &trial),
            },
            naive: RoleConfig {
                backend: Backend::Tabular,
                hidden: DEFAULT_HIDDEN,
                labels: naive_labels,
                targets: Some(naive_targets),
                illegal_mass: DEFAULT_ILLEGAL_MASS,
                ppo: naive_ppo(game, &trial),
            },
            player1: None,
            trial,
            eval: EvalSettings::default(),
            output: OutputSettings::default(),
        }
    }

    /// The reference configuration with step sizes rescaled for the small
    /// policies of this crate.
    pub fn desk(game: GameName, mode: Mode) -> Self {
        Self::desk_with(game, mode, Opponent::Default)
    }

    pub fn desk_with(game: GameName, mode: Mode, opponent: Opponent) -> Self {
        let mut cfg = Self::paper_with(game, mode, opponent, PromptVariant::Text);
        // Returns are summed over up to 100 rounds while the value head starts
        // at zero; without whitening every sampled token looks advantageous
        // and both learners lock into whatever they already play.
        cfg.naive.ppo.learning_rate = if game == GameName::Imp { 0.01 } else { 0.1 };
        cfg.naive.ppo.vf_coef = 0.2;
        cfg.naive.ppo.whiten_advantages = true;
        cfg.naive.ppo.kl.enabled = false;
        cfg.shaper.ppo.learning_rate = 0.01;
        cfg.shaper.ppo.vf_coef = 0.01;
        cfg.shaper.ppo.clip_range = 0.2;
        cfg.shaper.ppo.whiten_advantages = true;
        // Defection strictly dominates in these games, so a naive learner that
        // persists across trials ends at mutual defection against any shaper.
        // Shaping is trained against a fresh opponent every trial instead.
        cfg.trial.reset_naive_each_trial = mode == Mode::Shaper && matches!(game, GameName::Ipd | GameName::Cipd);
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.trial.validate()?;
        if self.epochs == 0 {
            return Err(Error::config("epochs must be >= 1"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("at least one seed is required"));
        }
        if self.vocab_size < 3 {
            return Err(Error::config("vocab_size must be >= 3"));
        }
        if self.eval.t_eval.is_empty() || self.eval.t_eval.contains(&0) || self.eval.n_games == 0 {
            return Err(Error::config("eval needs n_games >= 1 and a non-empty list of positive t_eval"));
        }
        let roles = self.mode.roles();
        for (seat, role) in self.seat_roles().iter().enumerate() {
            role.ppo.validate().map_err(|e| Error::config(format!("seat {seat}: {e}")))?;
            let expected = self.trial.batch_steps(roles[seat]);
            if role.ppo.batch_size != expected {
                return Err(Error::validation(format!(
                    "seat {seat} ({}) ppo.batch_size is {} but the trial shape yields {expected} steps per update",
                    roles[seat].as_str(),
                    role.ppo.batch_size
                )));
            }
            if role.backend == Backend::Mlp && role.hidden == 0 {
                return Err(Error::config(format!("seat {seat}: hidden must be >= 1")));
            }
        }
        self.game_spec()?;
        Ok(())
    }

    /// Role configuration of each seat.
    pub fn seat_roles(&self) -> [RoleConfig; 2] {
        match self.mode {
            Mode::Shaper => [self.shaper.clone(), self.naive.clone()],
            Mode::Baseline | Mode::EnrichedBaseline => {
                let p1 = self.player1.clone().unwrap_or_else(|| RoleConfig {
                    labels: GameSpec::builtin(self.game).labels[0],
                    ..self.naive.clone()
                });
                [p1, self.naive.clone()]
            }
        }
    }

    pub fn game_spec(&self) -> Result<GameSpec> {
        let roles = self.seat_roles();
        GameSpec::builtin(self.game).with_labels(0, roles[0].labels)?.with_labels(1, roles[1].labels)
    }

    /// Initial policies of both seats for one seed.
    pub fn initial_policies(&self, seed: u64) -> Result<[TokenPolicy; 2]> {
        let roles = self.seat_roles();
        let build = |seat: usize| -> Result<TokenPolicy> {
            let role = &roles[seat];
            let vocab = Vocabulary::for_labels(role.labels, self.vocab_size)?;
            let mut policy = match role.backend {
                Backend::Tabular => TokenPolicy::tabular(vocab, role.labels)?,
                Backend::Mlp => {
                    let mut rng = stream_rng(seed, 0, seat as u64, PURPOSE_INIT);
                    TokenPolicy::mlp(vocab, role.labels, role.hidden, &mut rng)?
                }
            };
            if let Some(t) = &role.targets {
                policy.init_to_targets(t, role.illegal_mass)?;
            }
            Ok(policy)
        };
        Ok([build(0)?, build(1)?])
    }

    pub fn session(&self, seed: u64) -> Result<Session> {
        self.validate()?;
        let roles = self.mode.roles();
        let seats = self.seat_roles();
        let [p0, p1] = self.initial_policies(seed)?;
        let agents = [
            Agent::new(roles[0], p0, seats[0].ppo.clone(), 1)?,
            Agent::new(roles[1], p1, seats[1].ppo.clone(), 2)?,
        ];
        let mut session = Session::new(self.game_spec()?, self.mode, self.trial, agents, seed)?;
        if self.output.emit_prompts {
            session.prompt_variant = Some(self.prompt_variant);
        }
        Ok(session)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configs always serialize")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    /// Applies a `dotted.key=value` override. The value is read as a TOML
    /// literal, falling back to a bare string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override `{assignment}` is not of the form key=value")))?;
        let key = key.trim();
        let raw = raw.trim();
        let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
            Ok(mut t) => t.remove("v").expect("parsed key"),
            Err(_) => toml::Value::String(raw.to_string()),
        };
        let mut doc = toml::Value::try_from(&*self).map_err(|e| Error::config(e.to_string()))?;
        let parts: Vec<&str> = key.split('.').collect();
        let mut node = &mut doc;
        for (i, part) in parts.iter().enumerate() {
            let table = node
                .as_table_mut()
                .ok_or_else(|| Error::config(format!("`{}` is not a section", parts[..i].join("."))))?;
            if i + 1 == parts.len() {
                table.insert(part.to_string(), value.clone());
                break;
            }
            node = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        }
        *self = doc.try_into().map_err(|e: toml::de::Error| Error::config(format!("override `{key}`: {}", e.message())))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_defaults() {
        let c = RunConfig::paper(GameName::Ipd, Mode::Shaper);
        assert_eq!(c.naive.ppo.learning_rate, 1.41e-6);
        assert_eq!(c.naive.ppo.batch_size, 100);
        assert_eq!((c.shaper.ppo.learning_rate, c.shaper.ppo.vf_coef, c.shaper.ppo.clip_range), (1.41e-7, 1e-3, 1e-4));
        assert_eq!(c.shaper.ppo.batch_size, 500);
        let imp = RunConfig::paper(GameName::Imp, Mode::Baseline);
        assert_eq!((imp.naive.ppo.learning_rate, imp.naive.ppo.vf_coef), (1.41e-7, 0.05));
        let icg = RunConfig::paper_with(GameName::Icg, Mode::Shaper, Opponent::Default, PromptVariant::Switched);
        assert_eq!(icg.shaper.ppo.entropy, Some(EntropySchedule { c_init: 0.7, c_end: 0.0, decay_epochs: 25 }));
        let r = RunConfig::paper_with(GameName::Ipd, Mode::Shaper, Opponent::P50, PromptVariant::Text);
        assert_eq!(r.naive.labels, ['N', 'Y']);
        assert_eq!((r.shaper.ppo.vf_coef, r.shaper.ppo.clip_range), (5e-4, 5e-3));
        for g in GameName::ALL {
            for m in [Mode::Baseline, Mode::EnrichedBaseline, Mode::Shaper] {
                RunConfig::paper(g, m).validate().unwrap();
                RunConfig::desk(g, m).validate().unwrap();
            }
        }
    }

    #[test]
    fn toml_roundtrip() {
        let c = RunConfig::paper_with(GameName::Icg, Mode::Shaper, Opponent::P25, PromptVariant::Switched);
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let c = RunConfig::paper(GameName::Ipd, Mode::Shaper);
        let text = c.to_toml().replace("epochs = 200", "epochs = 200\nepoch_count = 3");
        let err = RunConfig::from_toml(&text).unwrap_err().to_string();
        assert!(err.contains("epoch_count"), "{err}");
        let mut c = c;
        assert!(c.apply_override("shaper.ppo.learnin_rate=0.1").is_err());
        assert!(c.apply_override("no_equals_sign").is_err());
    }

    #[test]
    fn overrides() {
        let mut c = RunConfig::paper(GameName::Imp, Mode::Shaper);
        c.apply_override("naive.ppo.learning_rate=1.41e-7").unwrap();
        c.apply_override("trial.reset_naive_each_trial = true").unwrap();
        c.apply_override("output.dir=out/imp").unwrap();
        c.apply_override("shaper.ppo.entropy={ c_init = 0.7, c_end = 0.0, decay_epochs = 25 }").unwrap();
        assert_eq!(c.naive.ppo.learning_rate, 1.41e-7);
        assert!(c.trial.reset_naive_each_trial);
        assert_eq!(c.output.dir, PathBuf::from("out/imp"));
        assert_eq!(c.shaper.ppo.entropy.unwrap().c_init, 0.7);
        assert!(c.apply_override("epochs=\"many\"").is_err());
    }

    #[test]
    fn sessions_build_for_every_mode() {
        for m in [Mode::Baseline, Mode::EnrichedBaseline, Mode::Shaper] {
            let c = RunConfig::desk_with(GameName::Icg, m, Opponent::P50);
            let s = c.session(3).unwrap();
            assert_eq!(s.spec.labels[1], ['N', 'M']);
            assert_eq!(s.spec.labels[0], ['S', 'G']);
        }
    }
}
