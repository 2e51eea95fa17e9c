//! Exact tabular autoregressive softmax policies.
//!
//! A [`TabularPolicy`] stores one logit vector per context. The context of the
//! token at step `t` is the state `s_t = [x, y^{<t}]`, optionally truncated to
//! its last `k` tokens. Contexts without stored logits use all-zero logits,
//! i.e. the uniform distribution, so every probability is strictly positive.

use std::collections::BTreeMap;
use std::fmt;

use serde_json::{json, Map, Value};

use crate::data::{TokenId, TokenSeq, Vocab};
use crate::error::{invalid, LabError, Result};

/// How much of the state a policy conditions on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ContextOrder {
    Full,
    /// Only the last `k` tokens (k ≥ 1).
    Last(usize),
}

impl ContextOrder {
    pub fn last(k: usize) -> Result<Self> {
        if k == 0 {
            return invalid("context order must be positive");
        }
        Ok(Self::Last(k))
    }

    pub fn parse(s: &str) -> Result<Self> {
        if s == "full" {
            return Ok(Self::Full);
        }
        match s.parse::<usize>() {
            Ok(k) => Self::last(k),
            Err(_) => invalid(format!("context order must be \"full\" or a positive integer, got {s:?}")),
        }
    }
}

impl fmt::Display for ContextOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Full => f.write_str("full"),
            Self::Last(k) => write!(f, "{k}"),
        }
    }
}

/// The (possibly truncated) token content of a state.
#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ContextKey(pub Vec<TokenId>);

impl ContextKey {
    pub fn from_state(state: &[TokenId], order: ContextOrder) -> Self {
        match order {
            ContextOrder::Full => Self(state.to_vec()),
            ContextOrder::Last(k) => Self(state[state.len().saturating_sub(k)..].to_vec()),
        }
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.0
    }
}

/// Numerically stable `log softmax`.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|&l| l - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// Anything that assigns action distributions to states.
pub trait StochasticPolicy {
    fn num_actions(&self) -> usize;
    /// Log-probabilities of every action at `state`; may contain `-inf`.
    fn log_probs(&self, state: &[TokenId]) -> Vec<f64>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct TabularPolicy {
    vocab: Vocab,
    order: ContextOrder,
    logits: BTreeMap<ContextKey, Vec<f64>>,
    frozen: bool,
}

impl TabularPolicy {
    /// The uniform policy (no stored contexts).
    pub fn uniform(vocab: Vocab, order: ContextOrder) -> Self {
        Self { vocab, order, logits: BTreeMap::new(), frozen: false }
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn context_order(&self) -> ContextOrder {
        self.order
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self
    }

    /// An unfrozen copy.
    pub fn thawed(&self) -> Self {
        let mut p = self.clone();
        p.frozen = false;
        p
    }

    pub fn key(&self, state: &[TokenId]) -> ContextKey {
        ContextKey::from_state(state, self.order)
    }

    pub fn stored(&self) -> impl Iterator<Item = (&ContextKey, &[f64])> {
        self.logits.iter().map(|(k, v)| (k, v.as_slice()))
    }

    pub fn num_stored(&self) -> usize {
        self.logits.len()
    }

    /// Logits at a context key; zeros when unseen.
    pub fn logits_at(&self, key: &ContextKey) -> Vec<f64> {
        self.logits.get(key).cloned().unwrap_or_else(|| vec![0.0; self.vocab.size()])
    }

    pub fn logits(&self, state: &[TokenId]) -> Vec<f64> {
        self.logits_at(&self.key(state))
    }

    pub fn probs(&self, state: &[TokenId]) -> Vec<f64> {
        softmax(&self.logits(state))
    }

    /// Overwrite the logits of the context `state` maps to.
    pub fn set_logits(&mut self, state: &[TokenId], logits: Vec<f64>) -> Result<()> {
        let key = self.key(state);
        self.set_logits_at(key, logits)
    }

    pub fn set_logits_at(&mut self, key: ContextKey, logits: Vec<f64>) -> Result<()> {
        self.ensure_mutable("set_logits")?;
        if logits.len() != self.vocab.size() {
            return invalid(format!("expected {} logits, got {}", self.vocab.size(), logits.len()));
        }
        if logits.iter().any(|l| l.is_nan() || *l == f64::INFINITY) || logits.iter().all(|l| *l == f64::NEG_INFINITY) {
            return invalid("logits must be finite or -inf, with at least one finite entry");
        }
        self.logits.insert(key, logits);
        Ok(())
    }

    /// Set a context's distribution directly (`logit = ln p`).
    pub fn set_probs(&mut self, state: &[TokenId], probs: &[f64]) -> Result<()> {
        if probs.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return invalid("probabilities must lie in [0, 1]");
        }
        self.set_logits(state, probs.iter().map(|p| p.ln()).collect())
    }

    /// `logits[key] += scale * grad[key]` for every context in `grad`.
    pub fn apply(&mut self, grad: &LogitGrad, scale: f64) -> Result<()> {
        self.ensure_mutable("apply")?;
        let v = self.vocab.size();
        for (k, g) in grad.iter() {
            let row = self.logits.entry(k.clone()).or_insert_with(|| vec![0.0; v]);
            for (l, d) in row.iter_mut().zip(g) {
                *l += scale * d;
            }
        }
        Ok(())
    }

    /// Mutable logit row, created at zero if absent.
    pub fn row_mut(&mut self, key: &ContextKey) -> Result<&mut Vec<f64>> {
        self.ensure_mutable("row_mut")?;
        let v = self.vocab.size();
        Ok(self.logits.entry(key.clone()).or_insert_with(|| vec![0.0; v]))
    }

    fn ensure_mutable(&self, what: &str) -> Result<()> {
        if self.frozen {
            Err(LabError::Frozen(format!("{what} requires an unfrozen policy")))
        } else {
            Ok(())
        }
    }

    /// `log π(action | state)` in nats.
    pub fn token_log_prob(&self, state: &[TokenId], action: TokenId) -> Result<f64> {
        self.vocab.check(action)?;
        let logits = self.logits(state);
        Ok(logits[action.index()] - log_sum_exp(&logits))
    }

    /// `Σ_t log π(y^t | [x, y^{<t}])`, summed left to right; 0 for an empty response.
    pub fn sequence_log_prob(&self, prompt: &TokenSeq, response: &TokenSeq) -> Result<f64> {
        let mut state = prompt.tokens().to_vec();
        let mut total = 0.0;
        for a in response.iter() {
            total += self.token_log_prob(&state, a)?;
            state.push(a);
        }
        Ok(total)
    }

    /// Per-token log-probabilities of a response, in order.
    pub fn token_log_probs(&self, prompt: &TokenSeq, response: &TokenSeq) -> Result<Vec<f64>> {
        let mut state = prompt.tokens().to_vec();
        let mut out = Vec::with_capacity(response.len());
        for a in response.iter() {
            out.push(self.token_log_prob(&state, a)?);
            state.push(a);
        }
        Ok(out)
    }

    /// `∂ log π(action|state) / ∂ logits(state) = onehot(action) − softmax`.
    pub fn grad_token_log_prob(&self, state: &[TokenId], action: TokenId) -> Result<(ContextKey, Vec<f64>)> {
        self.ensure_mutable("grad_token_log_prob")?;
        self.vocab.check(action)?;
        let key = self.key(state);
        let mut g: Vec<f64> = softmax(&self.logits_at(&key)).into_iter().map(|p| -p).collect();
        g[action.index()] += 1.0;
        Ok((key, g))
    }

    /// Mean per-token negative log-likelihood of a corpus.
    pub fn nll(&self, corpus: &[(TokenSeq, TokenSeq)]) -> Result<f64> {
        let mut total = 0.0;
        let mut n = 0usize;
        for (x, y) in corpus {
            total -= self.sequence_log_prob(x, y)?;
            n += y.len();
        }
        if n == 0 {
            return invalid("corpus has no response tokens");
        }
        Ok(total / n as f64)
    }

    /// Full-batch gradient descent on the mean per-token NLL.
    pub fn mle_fit(&self, corpus: &[(TokenSeq, TokenSeq)], steps: usize, lr: f64) -> Result<MleFit> {
        if corpus.is_empty() {
            return invalid("mle_fit needs a non-empty corpus");
        }
        if !lr.is_finite() || lr <= 0.0 {
            return invalid(format!("learning rate must be positive, got {lr}"));
        }
        let mut policy = self.thawed();
        let n_tokens: usize = corpus.iter().map(|(_, y)| y.len()).sum();
        if n_tokens == 0 {
            return invalid("corpus has no response tokens");
        }
        let mut history = Vec::with_capacity(steps + 1);
        for _ in 0..steps {
            history.push(policy.nll(corpus)?);
            let mut grad = LogitGrad::default();
            for (x, y) in corpus {
                grad.add_sequence(&policy, x, y, 1.0 / n_tokens as f64)?;
            }
            policy.apply(&grad, lr)?;
        }
        history.push(policy.nll(corpus)?);
        Ok(MleFit { policy, nll_history: history })
    }

    pub fn to_checkpoint(&self) -> Value {
        let mut logits = Map::new();
        for (k, v) in &self.logits {
            logits.insert(self.vocab.render(k.tokens()), json!(v));
        }
        let order = match self.order {
            ContextOrder::Full => json!("full"),
            ContextOrder::Last(k) => json!(k),
        };
        json!({
            "vocab": self.vocab.symbols(),
            "context_order": order,
            "logits": Value::Object(logits),
        })
    }

    pub fn to_checkpoint_string(&self) -> String {
        serde_json::to_string(&self.to_checkpoint()).expect("checkpoint serializes")
    }

    /// Parse a checkpoint. The result is unfrozen.
    pub fn from_checkpoint(v: &Value) -> Result<Self> {
        let bad = |m: &str| LabError::Validation(format!("bad checkpoint: {m}"));
        let symbols: Vec<String> =
            serde_json::from_value(v.get("vocab").cloned().ok_or_else(|| bad("missing vocab"))?)?;
        let vocab = Vocab::new(&symbols)?;
        let order = match v.get("context_order").ok_or_else(|| bad("missing context_order"))? {
            Value::String(s) if s == "full" => ContextOrder::Full,
            Value::Number(n) => ContextOrder::last(n.as_u64().ok_or_else(|| bad("context_order"))? as usize)?,
            _ => return Err(bad("context_order must be \"full\" or an integer")),
        };
        let mut policy = Self::uniform(vocab, order);
        let logits = v.get("logits").and_then(Value::as_object).ok_or_else(|| bad("missing logits"))?;
        for (ctx, row) in logits {
            let tokens = policy.vocab.parse_rendered(ctx)?;
            let row: Vec<f64> = serde_json::from_value(row.clone())?;
            policy.set_logits_at(ContextKey(tokens), row)?;
        }
        Ok(policy)
    }

    pub fn from_checkpoint_str(s: &str) -> Result<Self> {
        Self::from_checkpoint(&serde_json::from_str(s)?)
    }

    pub fn same_vocab(&self, other: &TabularPolicy) -> Result<()> {
        if self.vocab != other.vocab {
            return invalid("policies do not share a vocabulary");
        }
        Ok(())
    }
}

impl StochasticPolicy for TabularPolicy {
    fn num_actions(&self) -> usize {
        self.vocab.size()
    }

    fn log_probs(&self, state: &[TokenId]) -> Vec<f64> {
        log_softmax(&self.logits(state))
    }
}

/// Result of [`TabularPolicy::mle_fit`].
#[derive(Clone, Debug)]
pub struct MleFit {
    pub policy: TabularPolicy,
    /// Mean NLL before each step, then after the last one (`steps + 1` entries).
    pub nll_history: Vec<f64>,
}

/// `log π(a|s) − log π_ref(a|s)`.
pub fn token_log_ratio(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    state: &[TokenId],
    action: TokenId,
) -> Result<f64> {
    policy.same_vocab(reference)?;
    Ok(policy.token_log_prob(state, action)? - reference.token_log_prob(state, action)?)
}

/// Per-token log-ratios along a response, in order.
pub fn token_log_ratios(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    prompt: &TokenSeq,
    response: &TokenSeq,
) -> Result<Vec<f64>> {
    policy.same_vocab(reference)?;
    let mut state = prompt.tokens().to_vec();
    let mut out = Vec::with_capacity(response.len());
    for a in response.iter() {
        out.push(policy.token_log_prob(&state, a)? - reference.token_log_prob(&state, a)?);
        state.push(a);
    }
    Ok(out)
}

/// Sparse gradient with respect to policy logits, keyed by context.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LogitGrad(BTreeMap<ContextKey, Vec<f64>>);

impl LogitGrad {
    pub fn iter(&self) -> impl Iterator<Item = (&ContextKey, &Vec<f64>)> {
        self.0.iter()
    }

    pub fn get(&self, key: &ContextKey) -> Option<&Vec<f64>> {
        self.0.get(key)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `self[key] += scale * g`
    pub fn add_row(&mut self, key: ContextKey, g: &[f64], scale: f64) {
        let row = self.0.entry(key).or_insert_with(|| vec![0.0; g.len()]);
        for (r, x) in row.iter_mut().zip(g) {
            *r += scale * x;
        }
    }

    /// Accumulate `scale * ∇ log π(action|state)` without the frozen check;
    /// gradients of frozen policies are still meaningful as quantities.
    pub fn add_token(&mut self, policy: &TabularPolicy, state: &[TokenId], action: TokenId, scale: f64) {
        let key = policy.key(state);
        let probs = softmax(&policy.logits_at(&key));
        let row = self.0.entry(key).or_insert_with(|| vec![0.0; probs.len()]);
        for (r, p) in row.iter_mut().zip(&probs) {
            *r -= scale * p;
        }
        row[action.index()] += scale;
    }

    /// Accumulate `scale * ∇ log π(response | prompt)`.
    pub fn add_sequence(
        &mut self,
        policy: &TabularPolicy,
        prompt: &TokenSeq,
        response: &TokenSeq,
        scale: f64,
    ) -> Result<()> {
        let mut state = prompt.tokens().to_vec();
        for a in response.iter() {
            policy.vocab.check(a)?;
            self.add_token(policy, &state, a, scale);
            state.push(a);
        }
        Ok(())
    }

    /// `self += scale * other`
    pub fn axpy(&mut self, other: &LogitGrad, scale: f64) {
        for (k, g) in other.iter() {
            self.add_row(k.clone(), g, scale);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for row in self.0.values_mut() {
            for x in row.iter_mut() {
                *x *= s;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.0.values().flat_map(|r| r.iter()).map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Entry lookup with zero default.
    pub fn at(&self, key: &ContextKey, action: usize) -> f64 {
        self.0.get(key).map_or(0.0, |r| r[action])
    }
}
