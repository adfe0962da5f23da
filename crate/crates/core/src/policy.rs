//! Token-vocabulary policies with a scalar value head.
//!
//! A policy maps an [`ObservationEncoding`] to logits over a small
//! vocabulary of single-character tokens, two of which are the owning agent's
//! action labels. Everything else in the vocabulary maps to the null action,
//! so the policy can (and at initialization does) emit illegal tokens.
//!
//! Two backends share one flat parameter vector layout:
//!
//! * `Tabular`: one logit row and one value per observation key.
//! * `Mlp`: a single tanh hidden layer feeding a logit head and a value head.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::observation::{ObservationEncoding, TrialShape, FEATURE_DIM, NAIVE_KEYS, NUM_KEYS};

pub const DEFAULT_VOCAB_SIZE: usize = 8;
pub const DEFAULT_HIDDEN: usize = 32;
pub const DEFAULT_ILLEGAL_MASS: f64 = 0.02;
const MLP_INIT_STD: f64 = 0.1;
/// Smallest probability turned into a logit; keeps logits finite when a
/// target assigns zero mass.
const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<char>,
}

impl Vocabulary {
    pub fn new(tokens: Vec<char>) -> Result<Self> {
        if tokens.len() < 3 {
            return Err(Error::config(format!(
                "vocabulary needs at least 3 tokens, got {}",
                tokens.len()
            )));
        }
        for (i, t) in tokens.iter().enumerate() {
            if tokens[..i].contains(t) {
                return Err(Error::config(format!("duplicate vocabulary token `{t}`")));
            }
            if t.is_whitespace() {
                return Err(Error::config("vocabulary tokens must not be whitespace"));
            }
        }
        Ok(Self { tokens })
    }

    /// `size` tokens: the two labels followed by filler capitals (then
    /// digits) that are not labels.
    pub fn for_labels(labels: [char; 2], size: usize) -> Result<Self> {
        if labels[0] == labels[1] {
            return Err(Error::config("action labels must be distinct"));
        }
        let mut tokens = labels.to_vec();
        tokens.extend(
            ('A'..='Z')
                .chain('0'..='9')
                .filter(|c| !labels.contains(c))
                .take(size.saturating_sub(2)),
        );
        if tokens.len() != size {
            return Err(Error::config(format!("cannot build a vocabulary of size {size}")));
        }
        Self::new(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[char] {
        &self.tokens
    }

    pub fn token(&self, index: usize) -> char {
        self.tokens[index]
    }

    pub fn contains(&self, token: char) -> bool {
        self.tokens.contains(&token)
    }

    pub fn index_of(&self, token: char) -> Option<usize> {
        self.tokens.iter().position(|&t| t == token)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    Tabular,
    Mlp,
}

impl Backend {
    pub fn as_str(self) -> &'static str {
        match self {
            Backend::Tabular => "tabular",
            Backend::Mlp => "mlp",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    pub logits: Vec<f64>,
    pub value: f64,
}

impl PolicyOutput {
    pub fn probabilities(&self) -> Vec<f64> {
        softmax(&self.logits)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_softmax_at(logits: &[f64], index: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits[index] - lse
}

/// Initial `p(A1)` per naive observation key: the stateless prompt followed
/// by the four previous joints `(A1,A1), (A1,A2), (A2,A1), (A2,A2)`.
pub type InitTargets = [f64; 5];

/// A distribution collapsed onto `{A1, A2, other}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThreeWay {
    pub a1: f64,
    pub a2: f64,
    pub other: f64,
}

impl ThreeWay {
    pub fn new(a1: f64, a2: f64, other: f64) -> Self {
        let s = a1 + a2 + other;
        Self { a1: a1 / s, a2: a2 / s, other: other / s }
    }

    pub fn from_target(target: f64, illegal_mass: f64) -> Self {
        let rest = 1.0 - target;
        Self { a1: target, a2: rest * (1.0 - illegal_mass), other: rest * illegal_mass }
    }

    fn as_array(&self) -> [f64; 3] {
        [self.a1, self.a2, self.other]
    }

    /// KL(self ‖ other); terms with zero mass in `self` contribute nothing.
    pub fn kl(&self, other: &ThreeWay) -> f64 {
        self.as_array()
            .iter()
            .zip(other.as_array())
            .filter(|(p, _)| **p > 0.0)
            .map(|(p, q)| if q > 0.0 { p * (p / q).ln() } else { f64::INFINITY })
            .sum()
    }
}

/// A policy's (or a target's) distribution on the five naive keys.
pub type KeyedDistribution = [ThreeWay; 5];

/// Index of the candidate with the lowest mean (over keys) KL divergence
/// from `targets`.
pub fn select_initialization(
    candidates: &[KeyedDistribution],
    targets: &KeyedDistribution,
) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::validation("no initialization candidates"));
    }
    let score = |c: &KeyedDistribution| {
        targets.iter().zip(c).map(|(t, q)| t.kl(q)).sum::<f64>() / targets.len() as f64
    };
    let mut best = (0, f64::INFINITY);
    for (i, c) in candidates.iter().enumerate() {
        let s = score(c);
        if s < best.1 {
            best = (i, s);
        }
    }
    Ok(best.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct MlpLayout {
    hidden: usize,
    vocab: usize,
}

impl MlpLayout {
    fn w1(&self) -> usize {
        0
    }
    fn b1(&self) -> usize {
        self.hidden * FEATURE_DIM
    }
    fn wl(&self) -> usize {
        self.b1() + self.hidden
    }
    fn bl(&self) -> usize {
        self.wl() + self.vocab * self.hidden
    }
    fn wv(&self) -> usize {
        self.bl() + self.vocab
    }
    fn bv(&self) -> usize {
        self.wv() + self.hidden
    }
    fn len(&self) -> usize {
        self.bv() + 1
    }
}

/// Named parameter blocks `(name, shape, offset)` used by checkpoints.
pub type BlockLayout = Vec<(&'static str, Vec<usize>, usize)>;

#[derive(Debug, Clone, PartialEq)]
pub struct TokenPolicy {
    backend: Backend,
    vocab: Vocabulary,
    labels: [char; 2],
    legal: [usize; 2],
    hidden: usize,
    params: Vec<f64>,
    reference: Vec<f64>,
}

impl TokenPolicy {
    /// All-zero tabular policy: uniform over the vocabulary, zero value.
    pub fn tabular(vocab: Vocabulary, labels: [char; 2]) -> Result<Self> {
        let legal = Self::label_indices(&vocab, labels)?;
        let k = vocab.len();
        let params = vec![0.0; NUM_KEYS * (k + 1)];
        Ok(Self {
            backend: Backend::Tabular,
            vocab,
            labels,
            legal,
            hidden: 0,
            reference: params.clone(),
            params,
        })
    }

    /// Gaussian-initialized MLP (std 0.1 weights, zero biases).
    pub fn mlp(vocab: Vocabulary, labels: [char; 2], hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut policy = Self::mlp_zeros(vocab, labels, hidden)?;
        let layout = policy.mlp_layout();
        let normal = Normal::new(0.0, MLP_INIT_STD).expect("valid std");
        let weight_ranges = [
            layout.w1()..layout.b1(),
            layout.wl()..layout.bl(),
            layout.wv()..layout.bv(),
        ];
        for range in weight_ranges {
            for p in &mut policy.params[range] {
                *p = normal.sample(rng);
            }
        }
        policy.reference.clone_from(&policy.params);
        Ok(policy)
    }

    pub fn mlp_zeros(vocab: Vocabulary, labels: [char; 2], hidden: usize) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::config("MLP hidden width must be positive"));
        }
        let legal = Self::label_indices(&vocab, labels)?;
        let layout = MlpLayout { hidden, vocab: vocab.len() };
        let params = vec![0.0; layout.len()];
        Ok(Self {
            backend: Backend::Mlp,
            vocab,
            labels,
            legal,
            hidden,
            reference: params.clone(),
            params,
        })
    }

    /// Rebuilds a policy from stored parameters (used by checkpoints).
    pub fn from_parts(
        backend: Backend,
        vocab: Vocabulary,
        labels: [char; 2],
        hidden: usize,
        params: Vec<f64>,
        reference: Vec<f64>,
    ) -> Result<Self> {
        let mut policy = match backend {
            Backend::Tabular => Self::tabular(vocab, labels)?,
            Backend::Mlp => Self::mlp_zeros(vocab, labels, hidden)?,
        };
        if params.len() != policy.params.len() || reference.len() != policy.params.len() {
            return Err(Error::config(format!(
                "expected {} parameters, got {} (reference {})",
                policy.params.len(),
                params.len(),
                reference.len()
            )));
        }
        policy.params = params;
        policy.reference = reference;
        Ok(policy)
    }

    fn label_indices(vocab: &Vocabulary, labels: [char; 2]) -> Result<[usize; 2]> {
        let find = |l: char| {
            vocab
                .index_of(l)
                .ok_or_else(|| Error::config(format!("label `{l}` missing from vocabulary")))
        };
        if labels[0] == labels[1] {
            return Err(Error::config("action labels must be distinct"));
        }
        Ok([find(labels[0])?, find(labels[1])?])
    }

    fn mlp_layout(&self) -> MlpLayout {
        MlpLayout { hidden: self.hidden, vocab: self.vocab.len() }
    }

    pub fn backend(&self) -> Backend {
        self.backend
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn labels(&self) -> [char; 2] {
        self.labels
    }

    /// Vocabulary indices of the two action labels.
    pub fn legal_indices(&self) -> [usize; 2] {
        self.legal
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// The frozen copy of the parameters taken at creation.
    pub fn reference(&self) -> &[f64] {
        &self.reference
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Re-freezes the reference at the current parameters.
    pub fn reset_reference(&mut self) {
        self.reference.clone_from(&self.params);
    }

    pub fn blocks(&self) -> BlockLayout {
        let k = self.vocab.len();
        match self.backend {
            Backend::Tabular => vec![
                ("table", vec![NUM_KEYS, k + 1], 0),
            ],
            Backend::Mlp => {
                let l = self.mlp_layout();
                vec![
                    ("w1", vec![l.hidden, FEATURE_DIM], l.w1()),
                    ("b1", vec![l.hidden], l.b1()),
                    ("w_logits", vec![k, l.hidden], l.wl()),
                    ("b_logits", vec![k], l.bl()),
                    ("w_value", vec![l.hidden], l.wv()),
                    ("b_value", vec![1], l.bv()),
                ]
            }
        }
    }

    fn check(&self, enc: &ObservationEncoding) -> Result<()> {
        if self.backend == Backend::Tabular && enc.key >= NUM_KEYS {
            return Err(Error::config(format!("observation key {} out of range", enc.key)));
        }
        Ok(())
    }

    fn forward_with(&self, params: &[f64], enc: &ObservationEncoding) -> (PolicyOutput, Vec<f64>) {
        let k = self.vocab.len();
        match self.backend {
            Backend::Tabular => {
                let row = &params[enc.key * (k + 1)..(enc.key + 1) * (k + 1)];
                (PolicyOutput { logits: row[..k].to_vec(), value: row[k] }, Vec::new())
            }
            Backend::Mlp => {
                let l = self.mlp_layout();
                let w1 = &params[l.w1()..l.b1()];
                let b1 = &params[l.b1()..l.wl()];
                let hidden: Vec<f64> = (0..l.hidden)
                    .map(|j| {
                        let row = &w1[j * FEATURE_DIM..(j + 1) * FEATURE_DIM];
                        let a: f64 = row.iter().zip(&enc.features).map(|(w, x)| w * x).sum();
                        (a + b1[j]).tanh()
                    })
                    .collect();
                let wl = &params[l.wl()..l.bl()];
                let bl = &params[l.bl()..l.wv()];
                let logits = (0..k)
                    .map(|i| {
                        let row = &wl[i * l.hidden..(i + 1) * l.hidden];
                        bl[i] + row.iter().zip(&hidden).map(|(w, h)| w * h).sum::<f64>()
                    })
                    .collect();
                let wv = &params[l.wv()..l.bv()];
                let value = params[l.bv()] + wv.iter().zip(&hidden).map(|(w, h)| w * h).sum::<f64>();
                (PolicyOutput { logits, value }, hidden)
            }
        }
    }

    pub fn distribution(&self, enc: &ObservationEncoding) -> Result<PolicyOutput> {
        self.check(enc)?;
        Ok(self.forward_with(&self.params, enc).0)
    }

    /// Output of the frozen reference parameters.
    pub fn reference_distribution(&self, enc: &ObservationEncoding) -> Result<PolicyOutput> {
        self.check(enc)?;
        Ok(self.forward_with(&self.reference, enc).0)
    }

    /// Output for an arbitrary parameter vector of this policy's shape.
    pub fn distribution_with(&self, params: &[f64], enc: &ObservationEncoding) -> Result<PolicyOutput> {
        self.check(enc)?;
        if params.len() != self.params.len() {
            return Err(Error::config("parameter vector has the wrong length"));
        }
        Ok(self.forward_with(params, enc).0)
    }

    /// Draws a token index and returns it with its log-probability.
    pub fn sample(&self, enc: &ObservationEncoding, rng: &mut impl Rng) -> Result<(usize, f64)> {
        let (token, logp, _) = self.act(enc, rng)?;
        Ok((token, logp))
    }

    /// Like [`sample`](Self::sample), also returning the value estimate.
    pub fn act(&self, enc: &ObservationEncoding, rng: &mut impl Rng) -> Result<(usize, f64, f64)> {
        let out = self.distribution(enc)?;
        let probs = out.probabilities();
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = probs.len() - 1;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                chosen = i;
                break;
            }
        }
        // Never land on a zero-probability token through rounding.
        while probs[chosen] == 0.0 && chosen > 0 {
            chosen -= 1;
        }
        Ok((chosen, log_softmax_at(&out.logits, chosen), out.value))
    }

    /// Sets the policy so each naive key reproduces its target `p(A1)`, with
    /// `p(A2) = (1 - t)(1 - m)` and `(1 - t) m` spread over the non-label
    /// tokens. State-occurrence keys copy the matching state-only row.
    ///
    /// The MLP backend only honours the stateless target: its logit-head
    /// weights are zeroed and the logit bias carries that distribution, so
    /// every observation starts from the same distribution.
    pub fn init_to_targets(&mut self, targets: &InitTargets, illegal_mass: f64) -> Result<()> {
        for &t in targets {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::validation(format!("target probability {t} outside (0, 1)")));
            }
        }
        if !(0.0..1.0).contains(&illegal_mass) {
            return Err(Error::validation(format!("illegal mass {illegal_mass} outside [0, 1)")));
        }
        let k = self.vocab.len();
        match self.backend {
            Backend::Tabular => {
                for key in 0..NUM_KEYS {
                    let target = targets[if key < 5 { key } else { key - 4 }];
                    let logits = self.target_logits(target, illegal_mass);
                    let row = &mut self.params[key * (k + 1)..key * (k + 1) + k];
                    row.copy_from_slice(&logits);
                }
            }
            Backend::Mlp => {
                let l = self.mlp_layout();
                let logits = self.target_logits(targets[0], illegal_mass);
                self.params[l.wl()..l.bl()].fill(0.0);
                self.params[l.bl()..l.wv()].copy_from_slice(&logits);
            }
        }
        self.reset_reference();
        Ok(())
    }

    pub fn with_targets(mut self, targets: &InitTargets, illegal_mass: f64) -> Result<Self> {
        self.init_to_targets(targets, illegal_mass)?;
        Ok(self)
    }

    fn target_logits(&self, target: f64, illegal_mass: f64) -> Vec<f64> {
        let k = self.vocab.len();
        let filler = (1.0 - target) * illegal_mass / (k - 2) as f64;
        (0..k)
            .map(|i| {
                let p = if i == self.legal[0] {
                    target
                } else if i == self.legal[1] {
                    (1.0 - target) * (1.0 - illegal_mass)
                } else {
                    filler
                };
                p.max(PROB_FLOOR).ln()
            })
            .collect()
    }

    /// `{A1, A2, other}` probabilities for one observation.
    pub fn three_way(&self, enc: &ObservationEncoding) -> Result<ThreeWay> {
        let p = self.distribution(enc)?.probabilities();
        let a1 = p[self.legal[0]];
        let a2 = p[self.legal[1]];
        Ok(ThreeWay { a1, a2, other: (1.0 - a1 - a2).max(0.0) })
    }

    /// Distribution on the five naive keys, evaluated at the start of a trial.
    pub fn keyed_distribution(&self, shape: TrialShape) -> Result<KeyedDistribution> {
        let mut out = [ThreeWay { a1: 0.0, a2: 0.0, other: 0.0 }; 5];
        for (slot, key) in out.iter_mut().zip(NAIVE_KEYS) {
            *slot = self.three_way(&ObservationEncoding::for_key(key, shape))?;
        }
        Ok(out)
    }

    /// KL(π_θ ‖ π_ref) over the full vocabulary at one observation.
    pub fn kl_to_reference(&self, enc: &ObservationEncoding) -> Result<f64> {
        let p = self.distribution(enc)?.probabilities();
        let q = self.reference_distribution(enc)?.probabilities();
        Ok(p.iter()
            .zip(&q)
            .filter(|(pi, _)| **pi > 0.0)
            .map(|(pi, qi)| pi * (pi / qi).ln())
            .sum())
    }

    /// Gradient of `<cotangent, (logits, value)>` with respect to the parameters.
    pub fn gradients(&self, enc: &ObservationEncoding, d_logits: &[f64], d_value: f64) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; self.params.len()];
        self.accumulate_gradients(enc, d_logits, d_value, &mut grad)?;
        Ok(grad)
    }

    /// Adds the gradient of `<cotangent, (logits, value)>` into `grad`.
    pub fn accumulate_gradients(
        &self,
        enc: &ObservationEncoding,
        d_logits: &[f64],
        d_value: f64,
        grad: &mut [f64],
    ) -> Result<()> {
        self.check(enc)?;
        let k = self.vocab.len();
        if d_logits.len() != k || grad.len() != self.params.len() {
            return Err(Error::config("cotangent or gradient buffer has the wrong length"));
        }
        match self.backend {
            Backend::Tabular => {
                let base = enc.key * (k + 1);
                for (g, d) in grad[base..base + k].iter_mut().zip(d_logits) {
                    *g += d;
                }
                grad[base + k] += d_value;
            }
            Backend::Mlp => {
                let l = self.mlp_layout();
                let (_, hidden) = self.forward_with(&self.params, enc);
                let wl = &self.params[l.wl()..l.bl()];
                let wv = &self.params[l.wv()..l.bv()];
                let mut d_hidden = vec![0.0; l.hidden];
                for (i, &dz) in d_logits.iter().enumerate() {
                    if dz == 0.0 {
                        continue;
                    }
                    let row = i * l.hidden;
                    for j in 0..l.hidden {
                        grad[l.wl() + row + j] += dz * hidden[j];
                        d_hidden[j] += dz * wl[row + j];
                    }
                    grad[l.bl() + i] += dz;
                }
                for j in 0..l.hidden {
                    grad[l.wv() + j] += d_value * hidden[j];
                    d_hidden[j] += d_value * wv[j];
                }
                grad[l.bv()] += d_value;
                for j in 0..l.hidden {
                    let da = d_hidden[j] * (1.0 - hidden[j] * hidden[j]);
                    if da == 0.0 {
                        continue;
                    }
                    let row = j * FEATURE_DIM;
                    for (i, x) in enc.features.iter().enumerate() {
                        grad[l.w1() + row + i] += da * x;
                    }
                    grad[l.b1() + j] += da;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::{ActionId, LegalJoint};
    use crate::observation::{Observation, VisitationCounts};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const SHAPE: TrialShape = TrialShape { episodes: 5, rounds: 20 };

    fn vocab() -> Vocabulary {
        Vocabulary::for_labels(['C', 'D'], 8).unwrap()
    }

    fn random_obs(rng: &mut impl Rng) -> ObservationEncoding {
        let joint = LegalJoint::from_index(rng.random_range(0..4));
        let counts = VisitationCounts { counts: [0; 4].map(|_| rng.random_range(0..30)) };
        let mut obs = match rng.random_range(0..3) {
            0 => Observation::base(),
            1 => Observation::state_only(joint),
            _ => Observation::state_occurrence(joint, counts),
        };
        obs.round_index = rng.random_range(1..=100);
        obs.episode_index = rng.random_range(1..=5);
        obs.encode(SHAPE)
    }

    #[test]
    fn vocabulary_rules() {
        let v = vocab();
        assert_eq!(v.len(), 8);
        assert_eq!(&v.tokens()[..2], &['C', 'D']);
        assert!(Vocabulary::new(vec!['A', 'B']).is_err());
        assert!(Vocabulary::new(vec!['A', 'B', 'A']).is_err());
        assert!(TokenPolicy::tabular(Vocabulary::new(vec!['A', 'B', 'E']).unwrap(), ['C', 'D']).is_err());
    }

    #[test]
    fn zero_policies_are_uniform() {
        let t = TokenPolicy::tabular(vocab(), ['C', 'D']).unwrap();
        let p = t.distribution(&Observation::base().encode(SHAPE)).unwrap().probabilities();
        assert!(p.iter().all(|&x| (x - 0.125).abs() < 1e-15));

        let m = TokenPolicy::mlp_zeros(vocab(), ['C', 'D'], 32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = m.distribution(&random_obs(&mut rng)).unwrap();
        assert_eq!(out.value, 0.0);
        assert!(out.probabilities().iter().all(|&x| (x - 0.125).abs() < 1e-15));
    }

    #[test]
    fn peaked_row_probability() {
        let mut t = TokenPolicy::tabular(vocab(), ['C', 'D']).unwrap();
        t.params_mut()[0] = 10.0;
        let p = t.distribution(&Observation::base().encode(SHAPE)).unwrap().probabilities();
        // e^10 / (e^10 + 7), evaluated with mpmath at 30 digits.
        assert!((p[0] - 0.999_682_301_456_103_7).abs() < 1e-15, "{}", p[0]);
    }

    #[test]
    fn normalization_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = TokenPolicy::mlp(vocab(), ['C', 'D'], 32, &mut rng).unwrap();
        for _ in 0..200 {
            let s: f64 = m.distribution(&random_obs(&mut rng)).unwrap().probabilities().iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn deterministic_sampling() {
        let mut t = TokenPolicy::tabular(vocab(), ['C', 'D']).unwrap();
        t.params_mut()[1] = 800.0;
        let enc = Observation::base().encode(SHAPE);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let (tok, lp) = t.sample(&enc, &mut rng).unwrap();
            assert_eq!(tok, 1);
            assert_eq!(lp, 0.0);
        }
    }

    #[test]
    fn uniform_sampling_frequencies() {
        let t = TokenPolicy::tabular(vocab(), ['C', 'D']).unwrap();
        let enc = Observation::base().encode(SHAPE);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 10_000;
        let mut counts = [0usize; 8];
        for _ in 0..n {
            counts[t.sample(&enc, &mut rng).unwrap().0] += 1;
        }
        // Binomial(n, 1/8): 3σ = 3·sqrt(n·p·(1-p)) ≈ 99.2.
        let sigma3 = 3.0 * (n as f64 * 0.125 * 0.875).sqrt();
        for c in counts {
            assert!((c as f64 - 1250.0).abs() < sigma3, "{counts:?}");
        }
    }

    #[test]
    fn seeded_sampling_repeats() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = TokenPolicy::mlp(vocab(), ['C', 'D'], 32, &mut rng).unwrap();
        let enc = random_obs(&mut rng);
        let draw = |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            (0..50).map(|_| m.sample(&enc, &mut r).unwrap().0).collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
    }

    #[test]
    fn targets_reproduced() {
        let targets = [0.60, 0.89, 0.89, 0.70, 0.68];
        let t = TokenPolicy::tabular(vocab(), ['C', 'D']).unwrap().with_targets(&targets, 0.02).unwrap();
        let keyed = t.keyed_distribution(SHAPE).unwrap();
        for (got, want) in keyed.iter().zip(targets) {
            assert!((got.a1 - want).abs() < 1e-6);
        }
        // State-occurrence rows mirror the state-only ones.
        let occ = Observation::state_occurrence(
            LegalJoint::new(ActionId::A2, ActionId::A1).unwrap(),
            VisitationCounts::default(),
        );
        assert!((t.three_way(&occ.encode(SHAPE)).unwrap().a1 - 0.70).abs() < 1e-6);
        // KL to the reference is zero at creation.
        assert_eq!(t.kl_to_reference(&occ.encode(SHAPE)).unwrap(), 0.0);
    }

    #[test]
    fn target_mass_split() {
        let enc = Observation::base().encode(SHAPE);
        let t = TokenPolicy::tabular(vocab(), ['C', 'D'])
            .unwrap()
            .with_targets(&[0.5; 5], 0.0)
            .unwrap();
        let p = t.distribution(&enc).unwrap().probabilities();
        assert!((p[0] - 0.5).abs() < 1e-9 && (p[1] - 0.5).abs() < 1e-9);

        let t = TokenPolicy::tabular(vocab(), ['C', 'D'])
            .unwrap()
            .with_targets(&[0.3; 5], 0.02)
            .unwrap();
        let p = t.distribution(&enc).unwrap().probabilities();
        assert!((p[1] - 0.7 * 0.98).abs() < 1e-12);
        for &f in &p[2..] {
            assert!((f - 0.7 * 0.02 / 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn target_validation() {
        let mut t = TokenPolicy::tabular(vocab(), ['C', 'D']).unwrap();
        assert!(t.init_to_targets(&[0.5, 0.5, 1.0, 0.5, 0.5], 0.02).is_err());
        assert!(t.init_to_targets(&[0.0, 0.5, 0.5, 0.5, 0.5], 0.02).is_err());
    }

    #[test]
    fn mlp_targets_use_stateless_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = TokenPolicy::mlp(vocab(), ['C', 'D'], 32, &mut rng)
            .unwrap()
            .with_targets(&[0.99; 5], 0.02)
            .unwrap();
        for _ in 0..20 {
            assert!((m.three_way(&random_obs(&mut rng)).unwrap().a1 - 0.99).abs() < 1e-9);
        }
    }

    #[test]
    fn selection_by_kl() {
        let targets: KeyedDistribution =
            [0.6, 0.89, 0.89, 0.7, 0.68].map(|t| ThreeWay::from_target(t, 0.02));
        let uniform = [ThreeWay::new(1.0, 1.0, 6.0); 5];
        assert_eq!(select_initialization(&[uniform, targets], &targets).unwrap(), 1);
        assert_eq!(select_initialization(&[uniform], &targets).unwrap(), 0);
        assert!(select_initialization(&[], &targets).is_err());
    }

    #[test]
    fn selection_hand_computed() {
        // Target (0.5, 0.5, 0) on every key. Candidate A = (0.8, 0.2, 0):
        // KL = 0.5 ln(0.5/0.8) + 0.5 ln(0.5/0.2) = 0.2231. Candidate B =
        // (0.9, 0.1, 0): KL = 0.5 ln(0.5/0.9) + 0.5 ln(0.5/0.1) = 0.5108.
        let t = [ThreeWay::new(0.5, 0.5, 0.0); 5];
        let a = [ThreeWay::new(0.8, 0.2, 0.0); 5];
        let b = [ThreeWay::new(0.9, 0.1, 0.0); 5];
        assert!((t[0].kl(&a[0]) - 0.223_143_551).abs() < 1e-8);
        assert!((t[0].kl(&b[0]) - 0.510_825_624).abs() < 1e-8);
        assert_eq!(select_initialization(&[b, a], &t).unwrap(), 1);
        assert_eq!(select_initialization(&[a, b], &t).unwrap(), 0);
    }

    fn finite_difference_check(policy: &TokenPolicy, rng: &mut impl Rng) {
        let enc = random_obs(rng);
        let k = policy.vocabulary().len();
        let d_logits: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let d_value = rng.random_range(-1.0..1.0);
        let analytic = policy.gradients(&enc, &d_logits, d_value).unwrap();
        let objective = |params: &[f64]| {
            let out = policy.distribution_with(params, &enc).unwrap();
            out.logits.iter().zip(&d_logits).map(|(z, d)| z * d).sum::<f64>() + out.value * d_value
        };
        let h = 1e-5;
        let mut params = policy.params().to_vec();
        for i in 0..params.len() {
            let orig = params[i];
            params[i] = orig + h;
            let up = objective(&params);
            params[i] = orig - h;
            let down = objective(&params);
            params[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let scale = analytic[i].abs().max(fd.abs()).max(1e-6);
            assert!((analytic[i] - fd).abs() / scale < 1e-4, "param {i}: {} vs {fd}", analytic[i]);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..10 {
            let mut t = TokenPolicy::tabular(vocab(), ['C', 'D']).unwrap();
            for p in t.params_mut() {
                *p = rng.random_range(-2.0..2.0);
            }
            finite_difference_check(&t, &mut rng);
            let m = TokenPolicy::mlp(vocab(), ['C', 'D'], 8, &mut rng).unwrap();
            finite_difference_check(&m, &mut rng);
        }
    }

    #[test]
    fn zero_cotangent_and_tabular_locality() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = TokenPolicy::mlp(vocab(), ['C', 'D'], 16, &mut rng).unwrap();
        let enc = random_obs(&mut rng);
        assert!(m.gradients(&enc, &[0.0; 8], 0.0).unwrap().iter().all(|&g| g == 0.0));

        let t = TokenPolicy::tabular(vocab(), ['C', 'D']).unwrap();
        let enc = Observation::state_only(LegalJoint::from_index(2)).encode(SHAPE);
        let g = t.gradients(&enc, &[1.0; 8], 1.0).unwrap();
        for (i, &gi) in g.iter().enumerate() {
            let row = i / 9;
            assert_eq!(gi != 0.0, row == enc.key, "index {i}");
        }
    }
}
