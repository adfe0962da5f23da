//! Plain-text policy checkpoints.
//!
//! The format is line oriented: a header line, `key value` metadata lines,
//! then one `block <name> <dims...>` line per parameter block followed by a
//! line of whitespace-separated values. Values are written with Rust's
//! shortest round-trip float formatting, so a save/load cycle is bit-exact.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::policy::{Backend, TokenPolicy, Vocabulary};

const HEADER: &str = "shaping-checkpoint 1";

/// Free-form metadata stored alongside the parameters.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub game: String,
    pub role: String,
    pub epoch: usize,
}

pub fn to_string(policy: &TokenPolicy, meta: &CheckpointMeta) -> String {
    let mut out = String::new();
    let labels = policy.labels();
    let vocab: String = policy.vocabulary().tokens().iter().collect();
    writeln!(out, "{HEADER}").unwrap();
    writeln!(out, "backend {}", policy.backend().as_str()).unwrap();
    writeln!(out, "hidden {}", policy.hidden()).unwrap();
    writeln!(out, "labels {}{}", labels[0], labels[1]).unwrap();
    writeln!(out, "vocabulary {vocab}").unwrap();
    writeln!(out, "game {}", meta.game).unwrap();
    writeln!(out, "role {}", meta.role).unwrap();
    writeln!(out, "epoch {}", meta.epoch).unwrap();
    for (prefix, values) in [("", policy.params()), ("ref.", policy.reference())] {
        for (name, shape, offset) in policy.blocks() {
            let len: usize = shape.iter().product();
            let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
            writeln!(out, "block {prefix}{name} {}", dims.join(" ")).unwrap();
            let vals: Vec<String> = values[offset..offset + len].iter().map(|v| format!("{v:?}")).collect();
            writeln!(out, "{}", vals.join(" ")).unwrap();
        }
    }
    out
}

pub fn from_str(text: &str) -> std::result::Result<(TokenPolicy, CheckpointMeta), String> {
    let mut lines = text.lines();
    if lines.next() != Some(HEADER) {
        return Err("missing or unsupported header".into());
    }
    let mut field = |key: &str| -> std::result::Result<String, String> {
        let line = lines.next().ok_or_else(|| format!("missing `{key}` line"))?;
        let (k, v) = line.split_once(' ').unwrap_or((line, ""));
        if k != key {
            return Err(format!("expected `{key}`, found `{k}`"));
        }
        Ok(v.to_string())
    };
    let backend = match field("backend")?.as_str() {
        "tabular" => Backend::Tabular,
        "mlp" => Backend::Mlp,
        other => return Err(format!("unknown backend `{other}`")),
    };
    let hidden: usize = field("hidden")?.parse().map_err(|e| format!("hidden: {e}"))?;
    let labels: Vec<char> = field("labels")?.chars().collect();
    let labels: [char; 2] = labels.try_into().map_err(|_| "labels must be two characters".to_string())?;
    let vocab = Vocabulary::new(field("vocabulary")?.chars().collect()).map_err(|e| e.to_string())?;
    let meta = CheckpointMeta {
        game: field("game")?,
        role: field("role")?,
        epoch: field("epoch")?.parse().map_err(|e| format!("epoch: {e}"))?,
    };

    // A zero policy supplies the block layout.
    let zero = match backend {
        Backend::Tabular => TokenPolicy::tabular(vocab.clone(), labels),
        Backend::Mlp => TokenPolicy::mlp_zeros(vocab.clone(), labels, hidden),
    }
    .map_err(|e| e.to_string())?;

    let n = zero.num_params();
    let mut params = vec![f64::NAN; n];
    let mut reference = vec![f64::NAN; n];
    let mut seen = 0;
    while let Some(line) = lines.next() {
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        if parts.next() != Some("block") {
            return Err(format!("expected a block line, found `{line}`"));
        }
        let full = parts.next().ok_or("block without a name")?;
        let dims: Vec<usize> = parts
            .map(|d| d.parse().map_err(|e| format!("block `{full}` shape: {e}")))
            .collect::<std::result::Result<_, _>>()?;
        let (target, name) = match full.strip_prefix("ref.") {
            Some(n) => (&mut reference, n),
            None => (&mut params, full),
        };
        let (_, shape, offset) = zero
            .blocks()
            .into_iter()
            .find(|(b, _, _)| *b == name)
            .ok_or_else(|| format!("unknown block `{full}`"))?;
        if shape != dims {
            return Err(format!("block `{full}` has shape {dims:?}, expected {shape:?}"));
        }
        let values: Vec<f64> = lines
            .next()
            .ok_or_else(|| format!("block `{full}` has no values"))?
            .split_whitespace()
            .map(|v| v.parse().map_err(|e| format!("block `{full}` value `{v}`: {e}")))
            .collect::<std::result::Result<_, _>>()?;
        let len: usize = shape.iter().product();
        if values.len() != len {
            return Err(format!("block `{full}` has {} values, expected {len}", values.len()));
        }
        target[offset..offset + len].copy_from_slice(&values);
        seen += 1;
    }
    if seen != 2 * zero.blocks().len() || params.iter().chain(&reference).any(|v| v.is_nan()) {
        return Err("checkpoint is missing parameter blocks".into());
    }
    let policy = TokenPolicy::from_parts(backend, vocab, labels, hidden, params, reference)
        .map_err(|e| e.to_string())?;
    Ok((policy, meta))
}

/// Writes atomically: the file is written beside `path` and renamed over it.
pub fn save(path: &Path, policy: &TokenPolicy, meta: &CheckpointMeta) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, to_string(policy, meta)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(TokenPolicy, CheckpointMeta)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_str(&text).map_err(|message| Error::Checkpoint { path: path.to_path_buf(), message })
}
