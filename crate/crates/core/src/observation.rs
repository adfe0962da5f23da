//! Agent observations: the most recent legal joint action (history), the
//! cumulative visitation counts (context), their numeric encoding for the
//! toy policies, and the prompt text a language-model agent would receive.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::game::{ActionId, GameSpec, LegalJoint, PayoffView};

/// Width of [`ObservationEncoding::features`].
pub const FEATURE_DIM: usize = 11;

/// Number of distinct tabular keys: no-history, plus four joints for each of
/// the state-only and state-occurrence kinds.
pub const NUM_KEYS: usize = 9;

/// Keys a naive learner encounters: the stateless prompt plus one per joint.
pub const NAIVE_KEYS: [usize; 5] = [0, 1, 2, 3, 4];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VisitationCounts {
    /// Indexed by [`LegalJoint::index`], own action first.
    pub counts: [u32; 4],
}

impl VisitationCounts {
    pub fn from_history(history: &[LegalJoint]) -> Self {
        let mut counts = Self::default();
        for joint in history {
            counts.counts[joint.index()] += 1;
        }
        counts
    }

    pub fn get(&self, joint: LegalJoint) -> u32 {
        self.counts[joint.index()]
    }

    pub fn total(&self) -> u32 {
        self.counts.iter().sum()
    }
}

/// How long the history persists: within one episode (naive learners) or
/// across all episodes of a trial (shaper).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CountScope {
    Episode,
    Trial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AgentRole {
    Naive,
    NaiveEnriched,
    Shaper,
}

impl AgentRole {
    pub fn scope(self) -> CountScope {
        match self {
            AgentRole::Naive | AgentRole::NaiveEnriched => CountScope::Episode,
            AgentRole::Shaper => CountScope::Trial,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AgentRole::Naive => "naive",
            AgentRole::NaiveEnriched => "naive-enriched",
            AgentRole::Shaper => "shaper",
        }
    }
}

/// One player's running view of the game.
///
/// The counts cover every history-visible round of the scope window except
/// the most recent one, which is carried separately in `last_joint`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObservationState {
    pub scope: CountScope,
    pub last_joint: Option<LegalJoint>,
    pub counts: VisitationCounts,
    /// τ of the next round, 1-based within the trial.
    pub round_index: u32,
    /// e of the current episode, 1-based within the trial.
    pub episode_index: u32,
}

impl ObservationState {
    pub fn new(scope: CountScope) -> Self {
        Self {
            scope,
            last_joint: None,
            counts: VisitationCounts::default(),
            round_index: 1,
            episode_index: 1,
        }
    }

    /// Number of history-visible rounds in the current scope window.
    pub fn visible_rounds(&self) -> u32 {
        self.counts.total() + u32::from(self.last_joint.is_some())
    }

    /// Marks the start of episode `episode` (1-based). Episode-scoped state
    /// forgets its history here.
    pub fn begin_episode(&mut self, episode: u32) {
        self.episode_index = episode;
        if self.scope == CountScope::Episode {
            self.last_joint = None;
            self.counts = VisitationCounts::default();
        }
    }

    /// Folds in one round, given as the joint action from this player's
    /// perspective (`None` when the round was not history-visible).
    pub fn update_history(&mut self, joint: Option<LegalJoint>) {
        self.round_index += 1;
        if let Some(joint) = joint {
            if let Some(prev) = self.last_joint {
                self.counts.counts[prev.index()] += 1;
            }
            self.last_joint = Some(joint);
        }
    }

    pub fn observe(&self, role: AgentRole) -> Observation {
        let kind = match (role, self.last_joint) {
            (_, None) => ObservationKind::Base,
            (AgentRole::Naive, Some(_)) => ObservationKind::StateOnly,
            (AgentRole::NaiveEnriched, Some(_)) => ObservationKind::StateOccurrence,
            (AgentRole::Shaper, Some(_)) if self.counts.total() == 0 => ObservationKind::StateOnly,
            (AgentRole::Shaper, Some(_)) => ObservationKind::StateOccurrence,
        };
        Observation {
            kind,
            last_joint: if kind == ObservationKind::Base { None } else { self.last_joint },
            counts: if kind == ObservationKind::StateOccurrence { Some(self.counts) } else { None },
            round_index: self.round_index,
            episode_index: self.episode_index,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ObservationKind {
    Base,
    StateOnly,
    StateOccurrence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Observation {
    pub kind: ObservationKind,
    pub last_joint: Option<LegalJoint>,
    pub counts: Option<VisitationCounts>,
    pub round_index: u32,
    pub episode_index: u32,
}

impl Observation {
    pub fn base() -> Self {
        Self {
            kind: ObservationKind::Base,
            last_joint: None,
            counts: None,
            round_index: 1,
            episode_index: 1,
        }
    }

    pub fn state_only(last: LegalJoint) -> Self {
        Self { kind: ObservationKind::StateOnly, last_joint: Some(last), ..Self::base() }
    }

    pub fn state_occurrence(last: LegalJoint, counts: VisitationCounts) -> Self {
        Self {
            kind: ObservationKind::StateOccurrence,
            last_joint: Some(last),
            counts: Some(counts),
            ..Self::base()
        }
    }

    /// Tabular lookup key: `(kind, last_joint)`, counts ignored.
    pub fn key(&self) -> usize {
        match (self.kind, self.last_joint) {
            (ObservationKind::Base, _) | (_, None) => 0,
            (ObservationKind::StateOnly, Some(j)) => 1 + j.index(),
            (ObservationKind::StateOccurrence, Some(j)) => 5 + j.index(),
        }
    }

    pub fn encode(&self, shape: TrialShape) -> ObservationEncoding {
        let mut features = [0.0; FEATURE_DIM];
        match self.last_joint {
            Some(j) if self.kind != ObservationKind::Base => features[1 + j.index()] = 1.0,
            _ => features[0] = 1.0,
        }
        let total = f64::from(shape.episodes * shape.rounds);
        if let Some(c) = self.counts {
            for (slot, &n) in features[5..9].iter_mut().zip(c.counts.iter()) {
                *slot = f64::from(n) / total;
            }
        }
        features[9] = f64::from(self.round_index) / total;
        features[10] = f64::from(self.episode_index) / f64::from(shape.episodes);
        ObservationEncoding { features, key: self.key() }
    }
}

/// `(E, T)`: episodes per trial and rounds per episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TrialShape {
    pub episodes: u32,
    pub rounds: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObservationEncoding {
    /// one-hot(no-history, 4 joints) ⊕ counts/(E·T) ⊕ τ/(E·T) ⊕ e/E.
    pub features: [f64; FEATURE_DIM],
    pub key: usize,
}

impl ObservationEncoding {
    /// Encoding of the stateless observation at the start of a trial.
    pub fn for_key(key: usize, shape: TrialShape) -> Self {
        let obs = match key {
            0 => Observation::base(),
            1..=4 => Observation::state_only(LegalJoint::from_index(key - 1)),
            5..=8 => Observation::state_occurrence(
                LegalJoint::from_index(key - 5),
                VisitationCounts::default(),
            ),
            _ => panic!("observation key out of range: {key}"),
        };
        obs.encode(shape)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptVariant {
    #[default]
    Text,
    Table,
    Switched,
}

const TEXT_TEMPLATE: &str = include_str!("../templates/text.tmpl");
const TABLE_TEMPLATE: &str = include_str!("../templates/table.tmpl");
const OCCURRENCE_TEMPLATE: &str = include_str!("../templates/occurrence.tmpl");
const STATE_TEMPLATE: &str = include_str!("../templates/state.tmpl");

fn fill(template: &str, slots: &[(&str, &str)]) -> String {
    let mut out = template.to_owned();
    for (name, value) in slots {
        out = out.replace(&format!("{{{name}}}"), value);
    }
    out
}

fn points(x: f64) -> String {
    if x.fract() == 0.0 && x.abs() < 1e15 {
        format!("{}", x as i64)
    } else {
        format!("{x}")
    }
}

/// The prompt `player` would receive for `obs`, from that player's own
/// perspective (own label and reward first). Each player is shown the whole
/// table of its own payoff view.
pub fn render_prompt(
    spec: &GameSpec,
    player: usize,
    views: [PayoffView; 2],
    obs: &Observation,
    variant: PromptVariant,
) -> String {
    let own = spec.labels[player];
    let opp = spec.labels[1 - player];
    let label = |l: [char; 2], a: ActionId| l[a.legal_index().unwrap_or(0)];
    let cell = |j: LegalJoint| {
        (
            spec.own_reward(player, j, views[player]),
            spec.own_reward(1 - player, j.swapped(), views[player]),
        )
    };

    let mut context = String::new();
    if let (Some(counts), Some(_)) = (obs.counts, obs.last_joint) {
        let list = LegalJoint::all()
            .iter()
            .map(|&j| format!("{}{}:{}", label(own, j.own), label(opp, j.opponent), counts.get(j)))
            .collect::<Vec<_>>()
            .join(", ");
        context.push_str(&fill(OCCURRENCE_TEMPLATE, &[("counts", &list)]));
        context.push('\n');
    }
    if let Some(last) = obs.last_joint {
        let own_l = label(own, last.own).to_string();
        let opp_l = label(opp, last.opponent).to_string();
        context.push_str(&fill(STATE_TEMPLATE, &[("own", &own_l), ("opponent", &opp_l)]));
        context.push('\n');
    }

    let a1 = own[0].to_string();
    let a2 = own[1].to_string();
    match variant {
        PromptVariant::Text | PromptVariant::Switched => {
            let mut order = LegalJoint::all().to_vec();
            let mut actions = [own[0], own[1]];
            if variant == PromptVariant::Switched {
                order.reverse();
                actions.reverse();
            }
            let mut payoffs = String::new();
            for (i, &j) in order.iter().enumerate() {
                let sep = match i {
                    0 => "",
                    1 => ",  ",
                    _ => ", ",
                };
                let (r_own, r_opp) = cell(j);
                let _ = write!(
                    payoffs,
                    "{sep}{}/{}: {}/{}",
                    label(own, j.own),
                    label(opp, j.opponent),
                    points(r_own),
                    points(r_opp)
                );
            }
            let action_list = format!("{}, {}", actions[0], actions[1]);
            fill(
                TEXT_TEMPLATE,
                &[
                    ("action_list", &action_list),
                    ("payoffs", &payoffs),
                    ("context", &context),
                    ("a1", &a1),
                    ("a2", &a2),
                ],
            )
        }
        PromptVariant::Table => {
            let mut table = format!("|       |  **{}**  |  **{}**  |\n", opp[0], opp[1]);
            table.push_str("|-------|---------|---------|");
            for row in [ActionId::A1, ActionId::A2] {
                let _ = write!(table, "\n| **{}** |", label(own, row));
                for col in [ActionId::A1, ActionId::A2] {
                    let (r_own, r_opp) = cell(LegalJoint { own: row, opponent: col });
                    let tuple = format!("({}, {})", points(r_own), points(r_opp));
                    let _ = write!(table, "{tuple:>8} |");
                }
            }
            let action_list = format!("{}, {}", own[0], own[1]);
            fill(
                TABLE_TEMPLATE,
                &[
                    ("action_list", &action_list),
                    ("table", &table),
                    ("context", &context),
                    ("a1", &a1),
                    ("a2", &a2),
                ],
            )
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::GameName;
    use ActionId::*;

    const STD: [PayoffView; 2] = [PayoffView::Standard, PayoffView::Standard];

    fn j(own: ActionId, opp: ActionId) -> LegalJoint {
        LegalJoint::new(own, opp).unwrap()
    }

    #[test]
    fn footnote_counts() {
        let history = [j(A1, A1), j(A1, A2), j(A2, A1), j(A2, A1), j(A2, A2), j(A2, A2), j(A2, A2)];
        let c = VisitationCounts::from_history(&history);
        assert_eq!(c.counts, [1, 1, 2, 3]);

        // Fed round by round, the most recent joint stays out of the counts.
        let mut state = ObservationState::new(CountScope::Trial);
        for &h in &history {
            state.update_history(Some(h));
        }
        state.update_history(Some(j(A1, A1)));
        assert_eq!(state.counts.counts, [1, 1, 2, 3]);
        assert_eq!(state.last_joint, Some(j(A1, A1)));
        assert_eq!(state.visible_rounds(), 8);
    }

    #[test]
    fn illegal_round_changes_nothing_but_tau() {
        let mut s = ObservationState::new(CountScope::Trial);
        s.update_history(Some(j(A1, A2)));
        let before = s.clone();
        s.update_history(None);
        assert_eq!(s.last_joint, before.last_joint);
        assert_eq!(s.counts, before.counts);
        assert_eq!(s.round_index, before.round_index + 1);
    }

    #[test]
    fn episode_scope_resets() {
        let mut s = ObservationState::new(CountScope::Episode);
        s.update_history(Some(j(A1, A1)));
        s.update_history(Some(j(A2, A2)));
        assert_eq!(s.observe(AgentRole::NaiveEnriched).kind, ObservationKind::StateOccurrence);
        s.begin_episode(2);
        assert_eq!(s.counts.total(), 0);
        assert_eq!(s.observe(AgentRole::NaiveEnriched).kind, ObservationKind::Base);

        let mut t = ObservationState::new(CountScope::Trial);
        t.update_history(Some(j(A1, A1)));
        t.update_history(Some(j(A2, A2)));
        t.begin_episode(2);
        assert_eq!(t.visible_rounds(), 2);
    }

    #[test]
    fn shaper_prompt_progression() {
        let mut s = ObservationState::new(CountScope::Trial);
        assert_eq!(s.observe(AgentRole::Shaper).kind, ObservationKind::Base);
        s.update_history(Some(j(A1, A1)));
        let o = s.observe(AgentRole::Shaper);
        assert_eq!(o.kind, ObservationKind::StateOnly);
        assert_eq!(o.last_joint, Some(j(A1, A1)));
        s.update_history(Some(j(A1, A2)));
        assert_eq!(s.observe(AgentRole::Shaper).kind, ObservationKind::StateOccurrence);
    }

    #[test]
    fn naive_never_sees_counts() {
        let mut s = ObservationState::new(CountScope::Episode);
        for _ in 0..4 {
            s.update_history(Some(j(A2, A1)));
        }
        let o = s.observe(AgentRole::Naive);
        assert_eq!(o.round_index, 5);
        assert_eq!(o.kind, ObservationKind::StateOnly);
        assert!(o.counts.is_none());
    }

    #[test]
    fn encoding_examples() {
        let shape = TrialShape { episodes: 5, rounds: 20 };
        let e = Observation::base().encode(shape);
        assert_eq!(&e.features[..5], &[1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(&e.features[5..9], &[0.0; 4]);
        assert_eq!(e.features[9], 1.0 / 100.0);

        let c = VisitationCounts { counts: [1, 1, 2, 3] };
        let e = Observation::state_occurrence(j(A2, A2), c).encode(shape);
        let expect = [0.01, 0.01, 0.02, 0.03];
        for (got, want) in e.features[5..9].iter().zip(expect) {
            assert!((got - want).abs() < 1e-15);
        }

        let keys: std::collections::HashSet<_> =
            LegalJoint::all().iter().map(|&x| Observation::state_only(x).key()).collect();
        assert_eq!(keys.len(), 4);
    }

    #[test]
    fn rendering_fragments() {
        let ipd = GameSpec::builtin(GameName::Ipd);
        let base = render_prompt(&ipd, 0, STD, &Observation::base(), PromptVariant::Text);
        assert!(base.starts_with("<bos><start_of_turn>user"));
        assert!(base.contains("C/C: 3/3,  C/D: 0/4, D/C: 4/0, D/D: 1/1"));

        let occ = Observation::state_occurrence(j(A1, A1), VisitationCounts { counts: [0, 0, 0, 5] });
        let text = render_prompt(&ipd, 0, STD, &occ, PromptVariant::Text);
        assert!(text.contains(
            "<ADDITIONAL INFORMATION>The occurrence of each state in the current game has been CC:0, CD:0, DC:0, DD:5."
        ));
        assert!(text.contains("<STATE>In the previous round, you played C and your opponent played C."));

        let sw = render_prompt(&ipd, 0, STD, &Observation::base(), PromptVariant::Switched);
        assert!(sw.contains("D/D: 1/1,  D/C: 4/0, C/D: 0/4, C/C: 3/3"));
        assert!(sw.contains("Reply only with C or D."));
    }

    #[test]
    fn column_player_sees_own_perspective() {
        let imp = GameSpec::builtin(GameName::Imp);
        let p = render_prompt(&imp, 1, STD, &Observation::base(), PromptVariant::Text);
        assert!(p.contains("H/H: -1/1,  H/T: 1/-1, T/H: 1/-1, T/T: -1/1"), "{p}");

        let cipd = GameSpec::builtin(GameName::Cipd);
        let views = [PayoffView::Primary, PayoffView::Standard];
        let shaper = render_prompt(&cipd, 0, views, &Observation::base(), PromptVariant::Text);
        assert!(shaper.contains("C/C: 6/3,  C/D: 0/4"));
        let naive = render_prompt(&cipd, 1, views, &Observation::base(), PromptVariant::Text);
        assert!(naive.contains("C/C: 3/3,  C/D: 0/4"), "{naive}");
    }

    #[test]
    fn asymmetric_labels_render() {
        let icg = GameSpec::builtin(GameName::Icg).with_labels(1, ['N', 'M']).unwrap();
        let occ = Observation::state_occurrence(j(A2, A1), VisitationCounts { counts: [1, 0, 0, 0] });
        let p = render_prompt(&icg, 1, STD, &occ, PromptVariant::Text);
        assert!(p.contains("actions:  N, M."));
        assert!(p.contains("NS:1, NG:0, MS:0, MG:0."));
        assert!(p.contains("you played M and your opponent played S."));
        assert!(p.contains("Reply only with N or M."));
    }
}
