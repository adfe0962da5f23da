//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::path::PathBuf;

use rand::Rng;
use shaping_core::game::{ActionId, GameName, GameSpec, LegalJoint};
use shaping_core::observation::{
    render_prompt, Observation, ObservationEncoding, PromptVariant, VisitationCounts, FEATURE_DIM, NUM_KEYS,
};
use shaping_core::orchestrator::seat_views;
use shaping_core::policy::{Backend, TokenPolicy, Vocabulary};
use shaping_core::ppo::{ppo_loss, LossSettings, Sample};

pub fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

/// Every rendered prompt that has a golden file, keyed by file stem.
pub fn prompt_cases() -> Vec<(String, String)> {
    let cc = LegalJoint { own: ActionId::A1, opponent: ActionId::A1 };
    let dd = LegalJoint { own: ActionId::A2, opponent: ActionId::A2 };
    let history = [dd; 5];
    let mut cases = Vec::new();
    for game in [GameName::Ipd, GameName::Imp, GameName::Icg, GameName::Ish] {
        let spec = GameSpec::builtin(game);
        let views = seat_views(game);
        let kinds = [
            ("base", Observation::base()),
            ("state", Observation::state_only(cc)),
            ("occurrence", Observation::state_occurrence(cc, VisitationCounts::from_history(&history))),
        ];
        for (kind, obs) in kinds {
            let name = format!("{}_{kind}_text", game.as_str());
            cases.push((name, render_prompt(&spec, 0, views, &obs, PromptVariant::Text)));
        }
    }
    let ipd = GameSpec::builtin(GameName::Ipd);
    let views = seat_views(GameName::Ipd);
    for (variant, name) in [(PromptVariant::Table, "ipd_base_table"), (PromptVariant::Switched, "ipd_base_switched")] {
        cases.push((name.to_string(), render_prompt(&ipd, 0, views, &Observation::base(), variant)));
    }
    cases
}

/// Golden-file mismatches as `(case, detail)`.
pub fn prompt_mismatches() -> Vec<(String, String)> {
    let mut bad = Vec::new();
    for (name, rendered) in prompt_cases() {
        let path = golden_dir().join("prompts").join(format!("{name}.txt"));
        match std::fs::read_to_string(&path) {
            Ok(expected) if expected == rendered => {}
            Ok(expected) => {
                let at = expected.bytes().zip(rendered.bytes()).position(|(a, b)| a != b);
                bad.push((name, format!("first difference at byte {at:?}")));
            }
            Err(e) => bad.push((name, format!("{}: {e}", path.display()))),
        }
    }
    bad
}

/// GAE by the direct double sum: each advantage is the discounted sum of
/// all later TD errors within its segment.
pub fn naive_gae(rewards: &[f64], values: &[f64], terminals: &[bool], gamma: f64, lambda: f64) -> Vec<f64> {
    let n = rewards.len();
    let segment_end = |t: usize| (t..n).find(|&k| terminals[k]).unwrap_or(n - 1);
    let delta = |k: usize| {
        let next = if k == segment_end(k) { 0.0 } else { values[k + 1] };
        rewards[k] + gamma * next - values[k]
    };
    (0..n)
        .map(|t| {
            let end = segment_end(t);
            (t..=end).map(|k| (gamma * lambda).powi((k - t) as i32) * delta(k)).sum()
        })
        .collect()
}

pub struct GaeCase {
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub terminals: Vec<bool>,
    pub gamma: f64,
    pub lambda: f64,
}

pub fn random_gae_case(rng: &mut impl Rng) -> GaeCase {
    let n = rng.random_range(1..=80);
    GaeCase {
        rewards: (0..n).map(|_| rng.random_range(-6.0..6.0)).collect(),
        values: (0..n).map(|_| rng.random_range(-20.0..20.0)).collect(),
        terminals: (0..n).map(|_| rng.random_bool(0.1)).collect(),
        gamma: rng.random_range(0.5..=1.0),
        lambda: rng.random_range(0.05..=1.0),
    }
}

pub fn random_policy(backend: Backend, rng: &mut impl Rng) -> TokenPolicy {
    let vocab = Vocabulary::for_labels(['C', 'D'], 6).unwrap();
    let mut policy = match backend {
        Backend::Tabular => TokenPolicy::tabular(vocab, ['C', 'D']).unwrap(),
        Backend::Mlp => TokenPolicy::mlp(vocab, ['C', 'D'], 8, rng).unwrap(),
    };
    for p in policy.params_mut() {
        *p = rng.random_range(-1.5..1.5);
    }
    policy
}

pub fn random_encoding(rng: &mut impl Rng) -> ObservationEncoding {
    let mut features = [0.0; FEATURE_DIM];
    for f in &mut features {
        *f = rng.random_range(0.0..1.0);
    }
    ObservationEncoding { features, key: rng.random_range(0..NUM_KEYS) }
}

/// Random minibatch whose old log-probabilities sit near the current ones,
/// so both clipping branches occur.
pub fn random_samples(policy: &TokenPolicy, n: usize, rng: &mut impl Rng) -> Vec<Sample> {
    (0..n)
        .map(|_| {
            let encoding = random_encoding(rng);
            let out = policy.distribution(&encoding).unwrap();
            let token = rng.random_range(0..policy.vocabulary().len());
            let logp = shaping_core::policy::log_softmax_at(&out.logits, token);
            Sample {
                encoding,
                token,
                old_log_prob: logp + rng.random_range(-0.4..0.4),
                old_value: out.value + rng.random_range(-0.5..0.5),
                advantage: rng.random_range(-2.0..2.0),
                ret: rng.random_range(-3.0..3.0),
            }
        })
        .collect()
}

pub fn random_settings(rng: &mut impl Rng) -> LossSettings {
    LossSettings {
        clip_range: rng.random_range(0.05..0.4),
        value_clip: rng.random_range(0.1..1.0),
        vf_coef: rng.random_range(0.0..1.0),
        entropy_coef: if rng.random_bool(0.5) { rng.random_range(0.0..0.8) } else { 0.0 },
    }
}

/// Loss gradient by central differences over every parameter.
pub fn finite_difference(policy: &TokenPolicy, samples: &[Sample], settings: &LossSettings, h: f64) -> Vec<f64> {
    let mut probe = policy.clone();
    (0..policy.num_params())
        .map(|i| {
            let x = policy.params()[i];
            probe.params_mut()[i] = x + h;
            let up = ppo_loss(&probe, samples, settings, None).unwrap().total;
            probe.params_mut()[i] = x - h;
            let down = ppo_loss(&probe, samples, settings, None).unwrap().total;
            probe.params_mut()[i] = x;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Worst relative error between the analytic and numeric loss gradient over
/// `cases` random cases.
pub fn worst_gradient_error(backend: Backend, cases: usize, rng: &mut impl Rng) -> f64 {
    (0..cases)
        .map(|_| {
            let policy = random_policy(backend, rng);
            let samples = random_samples(&policy, 4, rng);
            let settings = random_settings(rng);
            let mut analytic = vec![0.0; policy.num_params()];
            ppo_loss(&policy, &samples, &settings, Some(&mut analytic)).unwrap();
            let numeric = finite_difference(&policy, &samples, &settings, 1e-6);
            relative_error(&analytic, &numeric)
        })
        .fold(0.0, f64::max)
}
