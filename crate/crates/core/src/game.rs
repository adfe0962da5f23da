//! The five 2×2 matrix games, the null-augmented action space and the
//! per-round payoff / discard semantics.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::Vocabulary;

/// A move in the augmented action space: either of the two legal actions or
/// the null action produced by any token outside the player's labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ActionId {
    A1,
    A2,
    Null,
}

impl ActionId {
    pub const ALL: [ActionId; 3] = [ActionId::A1, ActionId::A2, ActionId::Null];

    pub fn is_legal(self) -> bool {
        self != ActionId::Null
    }

    /// Row/column index into a 2×2 payoff table. `None` for the null action.
    pub fn legal_index(self) -> Option<usize> {
        match self {
            ActionId::A1 => Some(0),
            ActionId::A2 => Some(1),
            ActionId::Null => None,
        }
    }

    pub fn from_legal_index(index: usize) -> ActionId {
        match index {
            0 => ActionId::A1,
            1 => ActionId::A2,
            _ => panic!("legal action index out of range: {index}"),
        }
    }
}

/// A legal joint action seen from one player's perspective: `(own, opponent)`.
///
/// Indexed 0..4 as `(A1,A1), (A1,A2), (A2,A1), (A2,A2)`, which is the order the
/// count line of the prompts uses (`CC, CD, DC, DD` in the IPD).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LegalJoint {
    pub own: ActionId,
    pub opponent: ActionId,
}

impl LegalJoint {
    pub fn new(own: ActionId, opponent: ActionId) -> Option<Self> {
        if own.is_legal() && opponent.is_legal() {
            Some(Self { own, opponent })
        } else {
            None
        }
    }

    pub fn index(self) -> usize {
        // Both legal by construction.
        self.own.legal_index().unwrap_or(0) * 2 + self.opponent.legal_index().unwrap_or(0)
    }

    pub fn from_index(index: usize) -> Self {
        assert!(index < 4, "joint index out of range: {index}");
        Self {
            own: ActionId::from_legal_index(index / 2),
            opponent: ActionId::from_legal_index(index % 2),
        }
    }

    pub fn all() -> [LegalJoint; 4] {
        [0, 1, 2, 3].map(LegalJoint::from_index)
    }

    pub fn swapped(self) -> Self {
        Self { own: self.opponent, opponent: self.own }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GameName {
    Ipd,
    Imp,
    Icg,
    Ish,
    Cipd,
}

impl GameName {
    pub const ALL: [GameName; 5] =
        [GameName::Ipd, GameName::Imp, GameName::Icg, GameName::Ish, GameName::Cipd];

    pub fn as_str(self) -> &'static str {
        match self {
            GameName::Ipd => "ipd",
            GameName::Imp => "imp",
            GameName::Icg => "icg",
            GameName::Ish => "ish",
            GameName::Cipd => "cipd",
        }
    }
}

impl fmt::Display for GameName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GameName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "").as_str() {
            "ipd" => Ok(GameName::Ipd),
            "imp" => Ok(GameName::Imp),
            "icg" => Ok(GameName::Icg),
            "ish" => Ok(GameName::Ish),
            "cipd" => Ok(GameName::Cipd),
            other => Err(Error::config(format!("unknown game `{other}`"))),
        }
    }
}

/// Selects which reward table a seat is paid from.
///
/// Only the cooperative IPD distinguishes the two: the primary seat (the
/// shaper) is paid from the modified table while the other seat keeps the
/// standard IPD rewards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PayoffView {
    Primary,
    Standard,
}

/// Per-cell reward pairs, `table[row][col] = (row reward, column reward)`.
pub type PayoffTable = [[[f64; 2]; 2]; 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameSpec {
    pub name: GameName,
    /// `labels[player] = [w_a1, w_a2]`.
    pub labels: [[char; 2]; 2],
    /// Table used for the primary view.
    pub payoff: PayoffTable,
    /// Table used for the standard view; equals `payoff` except in C-IPD.
    pub standard_payoff: PayoffTable,
    pub r_null: f64,
}

const IPD: PayoffTable = [[[3.0, 3.0], [0.0, 4.0]], [[4.0, 0.0], [1.0, 1.0]]];
const IMP: PayoffTable = [[[1.0, -1.0], [-1.0, 1.0]], [[-1.0, 1.0], [1.0, -1.0]]];
const ICG: PayoffTable = [[[2.0, 2.0], [1.0, 3.0]], [[3.0, 1.0], [-5.0, -5.0]]];
const ISH: PayoffTable = [[[4.0, 4.0], [0.0, 3.0]], [[3.0, 0.0], [1.0, 1.0]]];
const CIPD: PayoffTable = [[[6.0, 3.0], [0.0, 4.0]], [[4.0, 0.0], [1.0, 1.0]]];

/// One unit below the lowest entry of the tables.
fn null_penalty(tables: &[&PayoffTable]) -> f64 {
    tables
        .iter()
        .flat_map(|t| t.iter().flatten().flatten())
        .copied()
        .fold(f64::INFINITY, f64::min)
        - 1.0
}

impl GameSpec {
    /// The canonical definition of a game.
    pub fn builtin(name: GameName) -> Self {
        let (payoff, standard, labels) = match name {
            GameName::Ipd => (IPD, IPD, ['C', 'D']),
            GameName::Imp => (IMP, IMP, ['H', 'T']),
            GameName::Icg => (ICG, ICG, ['S', 'G']),
            GameName::Ish => (ISH, ISH, ['S', 'H']),
            GameName::Cipd => (CIPD, IPD, ['C', 'D']),
        };
        Self {
            name,
            labels: [labels, labels],
            payoff,
            standard_payoff: standard,
            r_null: null_penalty(&[&payoff, &standard]),
        }
    }

    /// Replaces one player's action labels.
    pub fn with_labels(mut self, player: usize, labels: [char; 2]) -> Result<Self> {
        if player > 1 {
            return Err(Error::config(format!("player index {player} out of range")));
        }
        if labels[0] == labels[1] {
            return Err(Error::config(format!(
                "action labels must be distinct, got `{}` twice",
                labels[0]
            )));
        }
        self.labels[player] = labels;
        Ok(self)
    }

    pub fn with_r_null(mut self, r_null: f64) -> Result<Self> {
        if !r_null.is_finite() {
            return Err(Error::config("r_null must be finite"));
        }
        self.r_null = r_null;
        Ok(self)
    }

    fn table(&self, view: PayoffView) -> &PayoffTable {
        match view {
            PayoffView::Primary => &self.payoff,
            PayoffView::Standard => &self.standard_payoff,
        }
    }

    /// Rewards for a joint action `(player 0, player 1)`, where `views[i]`
    /// selects the table player `i` is paid from.
    ///
    /// `None` marks the undefined reward of a legal player facing a null
    /// opponent; that transition is discarded, never scored.
    pub fn payoff(&self, joint: [ActionId; 2], views: [PayoffView; 2]) -> [Option<f64>; 2] {
        let mut out = [None, None];
        for player in 0..2 {
            let own = joint[player];
            let other = joint[1 - player];
            out[player] = match (own.legal_index(), other.legal_index()) {
                (None, _) => Some(self.r_null),
                (Some(_), None) => None,
                (Some(_), Some(_)) => {
                    let row = joint[0].legal_index().unwrap_or(0);
                    let col = joint[1].legal_index().unwrap_or(0);
                    Some(self.table(views[player])[row][col][player])
                }
            };
        }
        out
    }

    pub fn step(&self, joint: [ActionId; 2], views: [PayoffView; 2]) -> RoundOutcome {
        let rewards = self.payoff(joint, views);
        RoundOutcome {
            joint_action: joint,
            rewards,
            discard_flags: [rewards[0].is_none(), rewards[1].is_none()],
            history_visible: joint[0].is_legal() && joint[1].is_legal(),
        }
    }

    /// φ_i: the first label maps to `A1`, the second to `A2`, any other
    /// vocabulary token to `Null`.
    pub fn map_token(&self, player: usize, token: char, vocab: &Vocabulary) -> Result<ActionId> {
        if !vocab.contains(token) {
            return Err(Error::config(format!("token `{token}` is not in the vocabulary")));
        }
        Ok(self.map_label(player, token))
    }

    pub(crate) fn map_label(&self, player: usize, token: char) -> ActionId {
        let [a1, a2] = self.labels[player];
        if token == a1 {
            ActionId::A1
        } else if token == a2 {
            ActionId::A2
        } else {
            ActionId::Null
        }
    }

    /// Reward of `player` for a legal joint given from that player's own
    /// perspective.
    pub fn own_reward(&self, player: usize, joint: LegalJoint, view: PayoffView) -> f64 {
        let (row, col) = if player == 0 {
            (joint.own, joint.opponent)
        } else {
            (joint.opponent, joint.own)
        };
        let r = self.table(view)[row.legal_index().unwrap_or(0)][col.legal_index().unwrap_or(0)];
        r[player]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundOutcome {
    pub joint_action: [ActionId; 2],
    pub rewards: [Option<f64>; 2],
    /// `true` when that player's transition is excluded from its trajectory.
    pub discard_flags: [bool; 2],
    /// `true` when the round enters both players' game histories.
    pub history_visible: bool,
}

impl RoundOutcome {
    /// The joint action from `player`'s perspective, if both moves were legal.
    pub fn legal_joint_for(&self, player: usize) -> Option<LegalJoint> {
        LegalJoint::new(self.joint_action[player], self.joint_action[1 - player])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ActionId::*;

    const STD: [PayoffView; 2] = [PayoffView::Standard, PayoffView::Standard];
    const PRI: [PayoffView; 2] = [PayoffView::Primary, PayoffView::Standard];

    #[test]
    fn payoff_examples() {
        let ipd = GameSpec::builtin(GameName::Ipd);
        assert_eq!(ipd.payoff([A1, A1], STD), [Some(3.0), Some(3.0)]);
        assert_eq!(ipd.payoff([Null, Null], STD), [Some(-1.0), Some(-1.0)]);
        let icg = GameSpec::builtin(GameName::Icg);
        assert_eq!(icg.payoff([A2, A2], STD), [Some(-5.0), Some(-5.0)]);
        let imp = GameSpec::builtin(GameName::Imp);
        assert_eq!(imp.payoff([A1, Null], STD), [None, Some(-2.0)]);
    }

    #[test]
    fn step_examples() {
        let ipd = GameSpec::builtin(GameName::Ipd);
        let o = ipd.step([A1, A2], STD);
        assert_eq!(o.rewards, [Some(0.0), Some(4.0)]);
        assert_eq!(o.discard_flags, [false, false]);
        assert!(o.history_visible);

        let o = ipd.step([A1, Null], STD);
        assert_eq!(o.discard_flags, [true, false]);
        assert_eq!(o.rewards[1], Some(-1.0));
        assert!(!o.history_visible);

        let ish = GameSpec::builtin(GameName::Ish);
        let o = ish.step([A2, A1], STD);
        assert_eq!(o.rewards, [Some(3.0), Some(0.0)]);
        assert!(o.history_visible);
    }

    #[test]
    fn null_penalties() {
        let expect = [
            (GameName::Ipd, -1.0),
            (GameName::Cipd, -1.0),
            (GameName::Imp, -2.0),
            (GameName::Icg, -6.0),
            (GameName::Ish, -1.0),
        ];
        for (name, r) in expect {
            assert_eq!(GameSpec::builtin(name).r_null, r, "{name}");
        }
    }

    #[test]
    fn cipd_views() {
        let g = GameSpec::builtin(GameName::Cipd);
        assert_eq!(g.payoff([A1, A1], PRI), [Some(6.0), Some(3.0)]);
        assert_eq!(g.payoff([A1, A1], STD), [Some(3.0), Some(3.0)]);
        assert_eq!(g.payoff([A2, A1], PRI), [Some(4.0), Some(0.0)]);
    }

    #[test]
    fn token_mapping() {
        let ipd = GameSpec::builtin(GameName::Ipd);
        let vocab = Vocabulary::for_labels(['C', 'D'], 8).unwrap();
        assert_eq!(ipd.map_token(0, 'C', &vocab).unwrap(), A1);
        let x_vocab = Vocabulary::new(vec!['C', 'D', 'X']).unwrap();
        assert_eq!(ipd.map_token(0, 'X', &x_vocab).unwrap(), Null);
        assert!(ipd.map_token(0, '!', &vocab).is_err());

        let imp = GameSpec::builtin(GameName::Imp).with_labels(1, ['N', 'M']).unwrap();
        let nm = Vocabulary::for_labels(['N', 'M'], 8).unwrap();
        assert_eq!(imp.map_token(1, 'M', &nm).unwrap(), A2);
        // Player 0 keeps H/T.
        assert_eq!(imp.map_label(0, 'M'), Null);
    }

    #[test]
    fn rejects_duplicate_labels() {
        assert!(GameSpec::builtin(GameName::Ipd).with_labels(0, ['C', 'C']).is_err());
    }

    #[test]
    fn joint_index_roundtrip() {
        for j in LegalJoint::all() {
            assert_eq!(LegalJoint::from_index(j.index()), j);
        }
        assert_eq!(LegalJoint::new(A1, A2).unwrap().index(), 1);
        assert_eq!(LegalJoint::new(A2, A1).unwrap().index(), 2);
        assert!(LegalJoint::new(A1, Null).is_none());
    }

    #[test]
    fn own_reward_perspective() {
        let imp = GameSpec::builtin(GameName::Imp);
        let j = LegalJoint::new(A1, A1).unwrap();
        assert_eq!(imp.own_reward(0, j, PayoffView::Standard), 1.0);
        assert_eq!(imp.own_reward(1, j, PayoffView::Standard), -1.0);
        let icg = GameSpec::builtin(GameName::Icg);
        // Player 1 went straight (own A2) against a swerving player 0.
        let j = LegalJoint::new(A2, A1).unwrap();
        assert_eq!(icg.own_reward(1, j, PayoffView::Standard), 3.0);
    }
}
