//! Training and evaluation runs and their on-disk artifacts.
//!
//! A run directory holds:
//!
//! * `config.toml`: the configuration, narrowed to this run's seed.
//! * `metrics.csv`: one row per epoch and seat (columns of [`EpochMetrics`]).
//! * `updates.csv`: one row per PPO update with its diagnostics.
//! * `visitation.csv`: joint-action counts per epoch, environment and episode,
//!   from seat 0's perspective.
//! * `checkpoints/`: `epoch_NNNN_<role>.ckpt` every `checkpoint_every`
//!   epochs and `final_<role>.ckpt` at the end.
//! * `prompts.log`: rendered prompts of the first trial, when enabled.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use serde::Serialize;

use crate::checkpoint::{self, CheckpointMeta};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalReport};
use crate::orchestrator::{visitation_counts, EpochMetrics, Session, TrialLog};

#[derive(Debug, Serialize)]
struct UpdateRow<'a> {
    epoch: usize,
    role: &'a str,
    episode: u32,
    n_steps: usize,
    n_discarded: usize,
    n_minibatches: usize,
    mean_reward: f64,
    kl: f64,
    beta: f64,
    policy_loss: f64,
    value_loss: f64,
    entropy: f64,
    entropy_coef: f64,
    grad_norm: f64,
}

#[derive(Debug, Serialize)]
struct VisitationRow {
    epoch: usize,
    env: usize,
    episode: u32,
    #[serde(rename = "CC")]
    cc: u64,
    #[serde(rename = "CD")]
    cd: u64,
    #[serde(rename = "DC")]
    dc: u64,
    #[serde(rename = "DD")]
    dd: u64,
    #[serde(rename = "I")]
    i: u64,
}

pub struct RunWriter {
    dir: PathBuf,
    metrics: csv::Writer<File>,
    updates: csv::Writer<File>,
    visitation: csv::Writer<File>,
    prompts: Option<BufWriter<File>>,
}

impl RunWriter {
    pub fn create(dir: &Path, config: &RunConfig) -> Result<Self> {
        fs::create_dir_all(dir.join("checkpoints")).map_err(|e| Error::io(dir, e))?;
        let snapshot = dir.join("config.toml");
        fs::write(&snapshot, config.to_toml()).map_err(|e| Error::io(&snapshot, e))?;
        let open = |name: &str| csv::Writer::from_path(dir.join(name));
        let prompts = if config.output.emit_prompts {
            let path = dir.join("prompts.log");
            Some(BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?))
        } else {
            None
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            metrics: open("metrics.csv")?,
            updates: open("updates.csv")?,
            visitation: open("visitation.csv")?,
            prompts,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn record(&mut self, session: &Session, log: &TrialLog, metrics: &[EpochMetrics; 2]) -> Result<()> {
        for m in metrics {
            self.metrics.serialize(m)?;
        }
        let names = session.mode.seat_names();
        for u in &log.updates {
            let d = &u.diagnostics;
            self.updates.serialize(UpdateRow {
                epoch: u.epoch,
                role: names[u.seat],
                episode: u.episode,
                n_steps: d.n_steps,
                n_discarded: d.n_discarded,
                n_minibatches: d.n_minibatches,
                mean_reward: d.mean_reward,
                kl: d.mean_kl,
                beta: d.beta,
                policy_loss: d.policy_loss,
                value_loss: d.value_loss,
                entropy: d.entropy,
                entropy_coef: d.entropy_coef,
                grad_norm: d.grad_norm,
            })?;
        }
        for env in 0..session.trial.n_games {
            for episode in 1..=session.trial.episodes {
                let c = visitation_counts(log.records.iter().filter(|r| r.env == env && r.episode == episode), 0);
                self.visitation.serialize(VisitationRow {
                    epoch: log.epoch,
                    env,
                    episode,
                    cc: c[0],
                    cd: c[1],
                    dc: c[2],
                    dd: c[3],
                    i: c[4],
                })?;
            }
        }
        if let Some(p) = &mut self.prompts {
            let path = self.dir.join("prompts.log");
            for prompt in &log.prompts {
                p.write_all(prompt.as_bytes()).map_err(|e| Error::io(&path, e))?;
                p.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
            }
        }
        Ok(())
    }

    fn checkpoint(&self, session: &Session, stem: &str) -> Result<()> {
        let names = session.mode.seat_names();
        for (seat, agent) in session.agents.iter().enumerate() {
            let meta = CheckpointMeta {
                game: session.spec.name.as_str().to_string(),
                role: names[seat].to_string(),
                epoch: session.epoch(),
            };
            let path = self.dir.join("checkpoints").join(format!("{stem}_{}.ckpt", names[seat]));
            checkpoint::save(&path, &agent.policy, &meta)?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        let dir = self.dir.clone();
        for w in [&mut self.metrics, &mut self.updates, &mut self.visitation] {
            w.flush().map_err(|e| Error::io(&dir, e))?;
        }
        if let Some(p) = &mut self.prompts {
            p.flush().map_err(|e| Error::io(&dir, e))?;
        }
        Ok(())
    }
}

/// Trains one seed; with a writer, artifacts are emitted as training runs.
pub fn train_seed(config: &RunConfig, seed: u64, mut writer: Option<&mut RunWriter>) -> Result<(Session, Vec<[EpochMetrics; 2]>)> {
    let mut session = config.session(seed)?;
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let log = session.run_trial()?;
        let metrics = session.epoch_metrics(&log);
        if let Some(w) = writer.as_deref_mut() {
            w.record(&session, &log, &metrics)?;
            let every = config.output.checkpoint_every;
            if every > 0 && (epoch + 1) % every == 0 {
                w.flush()?;
                w.checkpoint(&session, &format!("epoch_{:04}", epoch + 1))?;
            }
        }
        if (epoch + 1) % 25 == 0 {
            info!(
                "seed {seed} epoch {}: rewards {:.3} / {:.3}",
                epoch + 1,
                metrics[0].mean_reward,
                metrics[1].mean_reward
            );
        }
        history.push(metrics);
    }
    if let Some(w) = writer {
        w.flush()?;
        w.checkpoint(&session, "final")?;
    }
    Ok((session, history))
}

/// Directory of one seed's run under the configured output directory.
pub fn seed_dir(config: &RunConfig, seed: u64) -> PathBuf {
    config.output.dir.join(format!("seed_{seed}"))
}

/// Trains one seed into its run directory and returns the session.
pub fn train_to_disk(config: &RunConfig, seed: u64) -> Result<Session> {
    let dir = seed_dir(config, seed);
    let mut narrowed = config.clone();
    narrowed.seeds = vec![seed];
    narrowed.output.dir = dir.clone();
    let mut writer = RunWriter::create(&dir, &narrowed)?;
    let (session, _) = train_seed(config, seed, Some(&mut writer))?;
    Ok(session)
}

/// Evaluates a trained session at every configured episode length.
pub fn evaluate_session(config: &RunConfig, session: &Session) -> Result<Vec<(u32, EvalReport)>> {
    config
        .eval
        .t_eval
        .iter()
        .map(|&t| {
            let cfg = config.eval.config(session.seed, t, config.trial.episodes);
            let report = evaluate(&session.spec, session.views, session.policies(), session.mode.roles(), &cfg)?;
            Ok((t, report))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::GameName;
    use crate::orchestrator::Mode;

    #[test]
    fn run_directory_layout() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::desk(GameName::Ipd, Mode::Shaper);
        cfg.epochs = 4;
        cfg.output.dir = dir.path().to_path_buf();
        cfg.output.checkpoint_every = 2;
        cfg.output.emit_prompts = true;
        train_to_disk(&cfg, 7).unwrap();
        let run = dir.path().join("seed_7");
        let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
        let mut lines = metrics.lines();
        assert_eq!(
            lines.next().unwrap(),
            "epoch,role,mean_reward,p_CC,p_CD,p_DC,p_DD,p_I,kl,policy_loss,value_loss,entropy,beta"
        );
        assert_eq!(lines.count(), 8);
        let updates = fs::read_to_string(run.join("updates.csv")).unwrap();
        assert_eq!(updates.lines().count(), 1 + 4 * 6);
        let visitation = fs::read_to_string(run.join("visitation.csv")).unwrap();
        assert_eq!(visitation.lines().count(), 1 + 4 * 25);
        for name in ["epoch_0002", "epoch_0004", "final"] {
            for role in ["shaper", "naive"] {
                assert!(run.join("checkpoints").join(format!("{name}_{role}.ckpt")).exists());
            }
        }
        let prompts = fs::read_to_string(run.join("prompts.log")).unwrap();
        assert_eq!(prompts.matches("### env 0").count(), 2 * 100);
        assert!(prompts.contains("<start_of_turn>model"));

        // The snapshot reproduces the run.
        let snap = RunConfig::from_toml(&fs::read_to_string(run.join("config.toml")).unwrap()).unwrap();
        assert_eq!(snap.seeds, vec![7]);
        let again = tempfile::tempdir().unwrap();
        let mut snap = snap;
        snap.output.dir = again.path().to_path_buf();
        train_to_disk(&snap, 7).unwrap();
        let metrics2 = fs::read_to_string(again.path().join("seed_7/metrics.csv")).unwrap();
        assert_eq!(metrics, metrics2);
    }
}
