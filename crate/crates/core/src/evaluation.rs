//! Frozen-policy evaluation and cross-seed aggregation.
//!
//! Evaluation plays `n_games` episodes of `rounds` rounds, grouped into
//! streams of `episodes_per_stream` consecutive episodes. A shaper keeps its
//! trial-scoped visitation counts across the episodes of one stream, as in
//! training. Rounds in which either player chose the null action are left
//! out of the reward means and reported in the `I` bucket.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{ActionId, GameSpec, LegalJoint, PayoffView};
use crate::observation::{AgentRole, CountScope, ObservationState, TrialShape};
use crate::orchestrator::{stream_rng, PURPOSE_EVAL};
use crate::policy::TokenPolicy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub n_games: usize,
    pub rounds: u32,
    pub episodes_per_stream: u32,
    /// Give the shaper episode-scoped counts instead of stream-scoped ones.
    pub reset_shaper_each_episode: bool,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { n_games: 100, rounds: 20, episodes_per_stream: 5, reset_shaper_each_episode: false, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalReport {
    pub rounds: usize,
    /// Rounds with two legal moves.
    pub included: usize,
    pub mean_reward: [f64; 2],
    /// `(A1,A1), (A1,A2), (A2,A1), (A2,A2), I` fractions from seat 0's view.
    pub visitation: [f64; 5],
    /// Fraction of each seat's moves that were null.
    pub illegal_fraction: [f64; 2],
}

impl EvalReport {
    /// Metrics of a list of joint actions, each player paid from its view.
    pub fn from_rounds(spec: &GameSpec, views: [PayoffView; 2], rounds: &[[ActionId; 2]]) -> Self {
        let mut sums = [0.0; 2];
        let mut counts = [0usize; 5];
        let mut illegal = [0usize; 2];
        for joint in rounds {
            for seat in 0..2 {
                illegal[seat] += usize::from(!joint[seat].is_legal());
            }
            match LegalJoint::new(joint[0], joint[1]) {
                Some(j) => {
                    counts[j.index()] += 1;
                    let r = spec.payoff(*joint, views);
                    sums[0] += r[0].expect("legal round has rewards");
                    sums[1] += r[1].expect("legal round has rewards");
                }
                None => counts[4] += 1,
            }
        }
        let included = rounds.len() - counts[4];
        let n = rounds.len().max(1) as f64;
        let mean = |s: f64| if included == 0 { f64::NAN } else { s / included as f64 };
        Self {
            rounds: rounds.len(),
            included,
            mean_reward: [mean(sums[0]), mean(sums[1])],
            visitation: counts.map(|c| c as f64 / n),
            illegal_fraction: illegal.map(|c| c as f64 / n),
        }
    }
}

/// Plays the evaluation games with frozen policies and reports the metrics.
pub fn evaluate(
    spec: &GameSpec,
    views: [PayoffView; 2],
    policies: [&TokenPolicy; 2],
    roles: [AgentRole; 2],
    config: &EvalConfig,
) -> Result<EvalReport> {
    Ok(EvalReport::from_rounds(spec, views, &play(spec, policies, roles, config)?))
}

/// The joint actions of every evaluation round in stream order.
pub fn play(
    spec: &GameSpec,
    policies: [&TokenPolicy; 2],
    roles: [AgentRole; 2],
    config: &EvalConfig,
) -> Result<Vec<[ActionId; 2]>> {
    if config.n_games == 0 || config.rounds == 0 || config.episodes_per_stream == 0 {
        return Err(Error::config("evaluation needs n_games, rounds and episodes_per_stream >= 1"));
    }
    let per_stream = config.episodes_per_stream as usize;
    let n_streams = config.n_games.div_ceil(per_stream);
    let shape = TrialShape { episodes: config.episodes_per_stream, rounds: config.rounds };
    let streams: Vec<Vec<[ActionId; 2]>> = (0..n_streams)
        .into_par_iter()
        .map(|stream| -> Result<Vec<[ActionId; 2]>> {
            let episodes = per_stream.min(config.n_games - stream * per_stream);
            let mut rngs = [0u64, 1].map(|s| stream_rng(config.seed, 0, stream as u64, PURPOSE_EVAL + s));
            let mut obs = roles.map(|r| {
                let scope = match r {
                    AgentRole::Shaper if config.reset_shaper_each_episode => CountScope::Episode,
                    other => other.scope(),
                };
                ObservationState::new(scope)
            });
            let mut out = Vec::with_capacity(episodes * config.rounds as usize);
            for e in 1..=episodes as u32 {
                for o in &mut obs {
                    o.begin_episode(e);
                }
                for _ in 0..config.rounds {
                    let mut joint = [ActionId::Null; 2];
                    for seat in 0..2 {
                        let enc = obs[seat].observe(roles[seat]).encode(shape);
                        let p = policies[seat];
                        let (token, _) = p.sample(&enc, &mut rngs[seat])?;
                        joint[seat] = spec.map_token(seat, p.vocabulary().token(token), p.vocabulary())?;
                    }
                    for (seat, o) in obs.iter_mut().enumerate() {
                        o.update_history(LegalJoint::new(joint[seat], joint[1 - seat]));
                    }
                    out.push(joint);
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(streams.into_iter().flatten().collect())
}

/// Mean and normal-approximation 95% half-width of per-seed values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Cell {
    pub mean: f64,
    /// `None` with fewer than two seeds.
    pub ci: Option<f64>,
}

impl Cell {
    pub fn from_values(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let ci = (n >= 2).then(|| {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            1.96 * var.sqrt() / (n as f64).sqrt()
        });
        Self { mean, ci }
    }

    pub fn display(&self) -> String {
        match self.ci {
            Some(ci) => format!("{:.2} ± {:.2}", self.mean, ci),
            None => format!("{:.2} ± n/a", self.mean),
        }
    }
}

pub const METRIC_NAMES: [&str; 9] = [
    "reward_1", "reward_2", "p_CC", "p_CD", "p_DC", "p_DD", "p_I", "illegal_1", "illegal_2",
];

fn metric_values(r: &EvalReport) -> [f64; 9] {
    [
        r.mean_reward[0],
        r.mean_reward[1],
        r.visitation[0],
        r.visitation[1],
        r.visitation[2],
        r.visitation[3],
        r.visitation[4],
        r.illegal_fraction[0],
        r.illegal_fraction[1],
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub n_seeds: usize,
    /// One cell per entry of [`METRIC_NAMES`].
    pub cells: Vec<Cell>,
}

impl Summary {
    pub fn cell(&self, metric: &str) -> Option<Cell> {
        METRIC_NAMES.iter().position(|&m| m == metric).map(|i| self.cells[i])
    }
}

pub fn aggregate(reports: &[EvalReport]) -> Result<Summary> {
    if reports.is_empty() {
        return Err(Error::validation("nothing to aggregate"));
    }
    let rows: Vec<[f64; 9]> = reports.iter().map(metric_values).collect();
    let cells = (0..METRIC_NAMES.len())
        .map(|i| Cell::from_values(&rows.iter().map(|r| r[i]).collect::<Vec<_>>()))
        .collect();
    Ok(Summary { n_seeds: reports.len(), cells })
}

/// Plain-text table of a summary, one metric per line.
pub fn format_summary(summary: &Summary, title: &str, seat_names: [&str; 2]) -> String {
    let mut s = String::new();
    writeln!(s, "{title} ({} seeds)", summary.n_seeds).unwrap();
    for (name, cell) in METRIC_NAMES.iter().zip(&summary.cells) {
        let label = name.replace("_1", &format!(" ({})", seat_names[0])).replace("_2", &format!(" ({})", seat_names[1]));
        writeln!(s, "  {label:<22} {}", cell.display()).unwrap();
    }
    s
}

/// `eval.csv`: one row per (seed, T).
pub fn write_eval_csv(path: &Path, rows: &[(u64, u32, EvalReport)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["seed".to_string(), "T".to_string(), "rounds".to_string(), "included".to_string()];
    header.extend(METRIC_NAMES.iter().map(|m| m.to_string()));
    w.write_record(&header)?;
    for (seed, t, r) in rows {
        let mut rec = vec![seed.to_string(), t.to_string(), r.rounds.to_string(), r.included.to_string()];
        rec.extend(metric_values(r).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `summary.csv`: one row per (T, metric) with mean and CI half-width.
pub fn write_summary_csv(path: &Path, summaries: &[(u32, Summary)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["T", "metric", "mean", "ci95", "n_seeds"])?;
    for (t, s) in summaries {
        for (name, cell) in METRIC_NAMES.iter().zip(&s.cells) {
            let ci = cell.ci.map_or("n/a".to_string(), |c| c.to_string());
            w.write_record([t.to_string(), name.to_string(), cell.mean.to_string(), ci, s.n_seeds.to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
