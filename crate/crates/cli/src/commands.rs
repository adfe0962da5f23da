use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use shaping_core::checkpoint;
use shaping_core::config::{Opponent, RunConfig};
use shaping_core::evaluation::{aggregate, evaluate, format_summary, write_eval_csv, write_summary_csv, write_text, EvalReport};
use shaping_core::game::GameName;
use shaping_core::orchestrator::{seat_views, Mode};
use shaping_core::policy::TokenPolicy;
use shaping_core::run::{evaluate_session, train_to_disk};
use shaping_core::Error;

use crate::{Cli, Command, ConfigArgs, DefaultsArgs, EvalArgs, Preset, SweepArgs, TrainArgs};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Validation(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

pub fn dispatch(cli: Cli) -> CliResult<()> {
    let workers = cli.workers;
    if workers == Some(0) {
        return Err(CliError::Usage("--workers must be >= 1".into()));
    }
    // Without --workers, training uses one thread per parallel environment.
    let run = move |default: usize, f: &(dyn Fn() -> CliResult<()> + Sync)| -> CliResult<()> {
        let threads = workers.unwrap_or(default);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| CliError::Runtime(format!("cannot start worker pool: {e}")))?;
        pool.install(f)
    };
    match cli.command {
        Command::PrintDefaults(args) => print_defaults(&args),
        Command::Train(args) => {
            let cfg = resolve_config(&args.config, &args.t_eval)?;
            run(cfg.trial.n_games, &|| train(&cfg, &args))
        }
        Command::Eval(args) => run(0, &|| eval(&args)),
        Command::Sweep(args) => {
            let cfg = resolve_config(&args.config, &[])?;
            run(cfg.trial.n_games, &|| sweep(&cfg, &args))
        }
    }
}

fn preset_config(preset: Preset, game: GameName, mode: Mode, opponent: Opponent) -> RunConfig {
    match preset {
        Preset::Paper => RunConfig::paper_with(game, mode, opponent, Default::default()),
        Preset::Desk => RunConfig::desk_with(game, mode, opponent),
    }
}

fn print_defaults(args: &DefaultsArgs) -> CliResult<()> {
    let cfg = preset_config(args.preset, args.game.parse()?, args.mode.parse()?, args.opponent.parse()?);
    print!("{}", cfg.to_toml());
    Ok(())
}

/// Builds the run configuration from a file or preset plus command-line overrides.
fn resolve_config(args: &ConfigArgs, t_eval: &[u32]) -> CliResult<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            if args.preset.is_some() || args.game.is_some() || args.mode.is_some() || args.opponent.is_some() {
                return Err(CliError::Usage(
                    "--config cannot be combined with --preset, --game, --mode or --opponent; use --set".into(),
                ));
            }
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
            RunConfig::from_toml(&text)?
        }
        None => {
            let game = args.game.as_deref().unwrap_or("ipd").parse()?;
            let mode = args.mode.as_deref().unwrap_or("shaper").parse()?;
            let opponent = args.opponent.as_deref().unwrap_or("default").parse()?;
            preset_config(args.preset.unwrap_or(Preset::Paper), game, mode, opponent)
        }
    };
    if let Some(n) = args.seeds {
        cfg.seeds = (0..n).collect();
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    let ppo_overrides = [
        (args.lr_naive, "naive.ppo.learning_rate"),
        (args.vf_naive, "naive.ppo.vf_coef"),
        (args.lr_shaper, "shaper.ppo.learning_rate"),
        (args.vf_shaper, "shaper.ppo.vf_coef"),
        (args.clip_shaper, "shaper.ppo.clip_range"),
    ];
    for (value, key) in ppo_overrides {
        if let Some(v) = value {
            cfg.apply_override(&format!("{key}={v:?}"))?;
        }
    }
    if let Some(out) = &args.out {
        cfg.output.dir = out.clone();
    }
    if args.emit_prompts {
        cfg.output.emit_prompts = true;
    }
    if !t_eval.is_empty() {
        cfg.eval.t_eval = t_eval.to_vec();
    }
    for assignment in &args.set {
        cfg.apply_override(assignment)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Trains every seed of `cfg` in parallel; returns per-seed evaluations when requested.
fn train_all(cfg: &RunConfig, with_eval: bool) -> CliResult<Vec<(u64, Vec<(u32, EvalReport)>)>> {
    fs::create_dir_all(&cfg.output.dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", cfg.output.dir.display())))?;
    let results: Vec<Result<(u64, Vec<(u32, EvalReport)>), Error>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let session = train_to_disk(cfg, seed)?;
            info!("seed {seed} trained");
            let reports = if with_eval { evaluate_session(cfg, &session)? } else { Vec::new() };
            Ok((seed, reports))
        })
        .collect();
    results.into_iter().map(|r| r.map_err(runtime)).collect()
}

// Failures after configuration validation are runtime failures.
fn runtime(e: Error) -> CliError {
    CliError::Runtime(e.to_string())
}

fn train(cfg: &RunConfig, args: &TrainArgs) -> CliResult<()> {
    let evals = train_all(cfg, !args.no_eval)?;
    println!("trained {} seed(s) into {}", cfg.seeds.len(), cfg.output.dir.display());
    if !args.no_eval {
        report(&cfg.output.dir, &cfg.eval.t_eval, cfg.mode.seat_names(), cfg.game, &evals)?;
    }
    Ok(())
}

/// Writes `eval.csv`, `summary.csv` and `summary.txt` and prints the summary.
fn report(
    out: &Path,
    t_eval: &[u32],
    seat_names: [&str; 2],
    game: GameName,
    evals: &[(u64, Vec<(u32, EvalReport)>)],
) -> CliResult<()> {
    let rows: Vec<(u64, u32, EvalReport)> =
        evals.iter().flat_map(|(seed, rs)| rs.iter().map(move |(t, r)| (*seed, *t, r.clone()))).collect();
    write_eval_csv(&out.join("eval.csv"), &rows).map_err(runtime)?;
    let mut summaries = Vec::new();
    let mut text = String::new();
    for &t in t_eval {
        let reports: Vec<EvalReport> = rows.iter().filter(|r| r.1 == t).map(|r| r.2.clone()).collect();
        let summary = aggregate(&reports).map_err(runtime)?;
        text.push_str(&format_summary(&summary, &format!("{game} T={t}"), seat_names));
        summaries.push((t, summary));
    }
    write_summary_csv(&out.join("summary.csv"), &summaries).map_err(runtime)?;
    write_text(&out.join("summary.txt"), &text).map_err(runtime)?;
    print!("{text}");
    Ok(())
}

struct LoadedRun {
    dir: PathBuf,
    config: RunConfig,
    policies: [TokenPolicy; 2],
}

fn load_run(dir: &Path, stem: &str) -> CliResult<LoadedRun> {
    let path = dir.join("config.toml");
    let text = fs::read_to_string(&path).map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", path.display())))?;
    let config = RunConfig::from_toml(&text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    let names = config.mode.seat_names();
    let load = |seat: usize| -> CliResult<TokenPolicy> {
        let path = dir.join("checkpoints").join(format!("{stem}_{}.ckpt", names[seat]));
        let (policy, meta) = checkpoint::load(&path).map_err(runtime)?;
        if meta.game != config.game.as_str() {
            return Err(CliError::Runtime(format!(
                "{} was trained on {} but the run is configured for {}",
                path.display(),
                meta.game,
                config.game
            )));
        }
        if meta.role != names[seat] {
            return Err(CliError::Runtime(format!("{} holds role {} instead of {}", path.display(), meta.role, names[seat])));
        }
        Ok(policy)
    };
    let policies = [load(0)?, load(1)?];
    Ok(LoadedRun { dir: dir.to_path_buf(), config, policies })
}

fn eval(args: &EvalArgs) -> CliResult<()> {
    let runs = args.runs.iter().map(|d| load_run(d, &args.stem)).collect::<CliResult<Vec<_>>>()?;
    let first = &runs[0].config;
    for run in &runs[1..] {
        if run.config.game != first.game || run.config.mode != first.mode {
            return Err(CliError::Runtime(format!(
                "{} is a {} {} run but {} is {} {}",
                run.dir.display(),
                run.config.game,
                run.config.mode.as_str(),
                runs[0].dir.display(),
                first.game,
                first.mode.as_str()
            )));
        }
    }
    let t_eval = if args.t_eval.is_empty() { first.eval.t_eval.clone() } else { args.t_eval.clone() };
    if t_eval.contains(&0) {
        return Err(CliError::Usage("--T values must be positive".into()));
    }
    let evals = runs
        .par_iter()
        .map(|run| -> CliResult<(u64, Vec<(u32, EvalReport)>)> {
            let cfg = &run.config;
            let seed = cfg.seeds[0];
            let spec = cfg.game_spec().map_err(runtime)?;
            let views = seat_views(cfg.game);
            let mut settings = cfg.eval.clone();
            if let Some(n) = args.n_games {
                settings.n_games = n;
            }
            let reports = t_eval
                .iter()
                .map(|&t| {
                    let ec = settings.config(seed, t, cfg.trial.episodes);
                    let r = evaluate(&spec, views, [&run.policies[0], &run.policies[1]], cfg.mode.roles(), &ec);
                    r.map(|r| (t, r)).map_err(CliError::from)
                })
                .collect::<CliResult<Vec<_>>>()?;
            Ok((seed, reports))
        })
        .collect::<CliResult<Vec<_>>>()?;
    fs::create_dir_all(&args.out).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", args.out.display())))?;
    report(&args.out, &t_eval, first.mode.seat_names(), first.game, &evals)
}

fn parse_grid(grid: &[String]) -> CliResult<Vec<(String, Vec<String>)>> {
    if grid.is_empty() {
        return Err(CliError::Usage("sweep needs at least one --grid KEY=V1,V2".into()));
    }
    grid.iter()
        .map(|axis| {
            let (key, values) = axis
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("grid axis `{axis}` is not of the form KEY=V1,V2")))?;
            let values: Vec<String> = values.split(',').map(str::trim).filter(|v| !v.is_empty()).map(String::from).collect();
            if values.is_empty() {
                return Err(CliError::Usage(format!("grid axis `{key}` has no values")));
            }
            Ok((key.trim().to_string(), values))
        })
        .collect()
}

/// Every combination of grid values, first axis slowest.
fn combinations(axes: &[(String, Vec<String>)]) -> Vec<Vec<String>> {
    axes.iter().fold(vec![Vec::new()], |acc, (_, values)| {
        acc.iter()
            .flat_map(|prefix| {
                values.iter().map(move |v| {
                    let mut p = prefix.clone();
                    p.push(v.clone());
                    p
                })
            })
            .collect()
    })
}

fn sweep(base: &RunConfig, args: &SweepArgs) -> CliResult<()> {
    let axes = parse_grid(&args.grid)?;
    let points = combinations(&axes);
    // Resolve every point before training so that a bad value fails fast.
    let configs = points
        .iter()
        .enumerate()
        .map(|(i, values)| -> CliResult<RunConfig> {
            let mut cfg = base.clone();
            for ((key, _), v) in axes.iter().zip(values) {
                cfg.apply_override(&format!("{key}={v}"))?;
            }
            cfg.output.dir = base.output.dir.join(format!("point_{i:03}"));
            cfg.validate()?;
            Ok(cfg)
        })
        .collect::<CliResult<Vec<_>>>()?;

    fs::create_dir_all(&base.output.dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", base.output.dir.display())))?;
    let manifest_path = base.output.dir.join("manifest.csv");
    let mut manifest = csv::Writer::from_path(&manifest_path).map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut header = vec!["point".to_string()];
    header.extend(axes.iter().map(|(k, _)| k.clone()));
    header.extend(["seed", "dir", "T", "reward_1", "reward_2"].map(String::from));
    manifest.write_record(&header).map_err(|e| CliError::Runtime(e.to_string()))?;

    for (i, (cfg, values)) in configs.iter().zip(&points).enumerate() {
        info!("sweep point {i}: {}", values.join(", "));
        let evals = train_all(cfg, !args.no_eval)?;
        for (seed, reports) in &evals {
            let dir = shaping_core::run::seed_dir(cfg, *seed);
            let first = reports.first();
            let mut rec = vec![i.to_string()];
            rec.extend(values.iter().cloned());
            rec.push(seed.to_string());
            rec.push(dir.display().to_string());
            rec.push(first.map_or(String::new(), |(t, _)| t.to_string()));
            for s in 0..2 {
                rec.push(first.map_or(String::new(), |(_, r)| r.mean_reward[s].to_string()));
            }
            manifest.write_record(&rec).map_err(|e| CliError::Runtime(e.to_string()))?;
        }
        if !args.no_eval {
            report(&cfg.output.dir, &cfg.eval.t_eval, cfg.mode.seat_names(), cfg.game, &evals)?;
        }
    }
    manifest.flush().map_err(|e| CliError::Runtime(format!("{}: {e}", manifest_path.display())))?;
    println!("swept {} point(s) x {} seed(s) into {}", points.len(), base.seeds.len(), base.output.dir.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_combinations_are_exhaustive() {
        let axes = parse_grid(&["a=1,2,3".into(), "b=x,y".into()]).unwrap();
        let c = combinations(&axes);
        assert_eq!(c.len(), 6);
        assert_eq!(c[0], vec!["1", "x"]);
        assert_eq!(c[5], vec!["3", "y"]);
    }

    #[test]
    fn empty_grids_are_usage_errors() {
        assert_eq!(parse_grid(&[]).unwrap_err().code(), 2);
        assert_eq!(parse_grid(&["a=".into()]).unwrap_err().code(), 2);
        assert_eq!(parse_grid(&["a".into()]).unwrap_err().code(), 2);
    }
}
