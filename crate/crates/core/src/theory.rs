//! Exact checks of the token-level results on small, fully enumerable MDPs.
//!
//! A [`ToyMDP`] has a handful of prompts, a tiny action set and a short
//! horizon, so expectations are computed by enumerating every trajectory and
//! optima by exhaustive grid search over the probability simplex.

use std::collections::BTreeMap;

use rand::Rng;
use serde::Serialize;

use crate::data::{PreferencePair, TokenId, TokenSeq, Vocab};
use crate::error::{invalid, LabError, Result};
use crate::losses::sigmoid;
use crate::policy::{log_sum_exp, token_log_ratio, ContextKey, ContextOrder, StochasticPolicy, TabularPolicy};
use crate::rewards::{Side, TokenRewardTrace, TokenWeightSpec};
use crate::rng::{substream, LabRng};

/// Most trajectories a [`ToyMDP`] may have.
pub const MAX_TRAJECTORIES: u128 = 1_000_000;
/// Most objective evaluations a single grid search may perform.
pub const MAX_GRID_EVALUATIONS: u128 = 10_000_000;
/// Largest `|r / (β f)|` accepted when forming the optimal policy.
pub const EXPONENT_LIMIT: f64 = 500.0;

const DECOMPOSITION_TOL: f64 = 1e-12;
const COORDINATE_TOL: f64 = 2e-3;
const DOMINANCE_TOL: f64 = 1e-12;
const RECONSTRUCTION_TOL: f64 = 1e-10;
const UPPER_BOUND_TOL: f64 = 1e-9;
const BT_TOL: f64 = 1e-10;
const KEPT_WITNESSES: usize = 32;

/// A token-level MDP small enough to enumerate.
#[derive(Clone, Debug)]
pub struct ToyMDP {
    vocab: Vocab,
    horizon: usize,
    prompts: Vec<(TokenSeq, f64)>,
    raw_reward: BTreeMap<ContextKey, Vec<f64>>,
    reference: TabularPolicy,
    beta: f64,
}

/// Knobs for [`ToyMDP::random`].
#[derive(Clone, Copy, Debug)]
pub struct RandomMdpConfig {
    pub vocab_size: usize,
    pub horizon: usize,
    pub n_prompts: usize,
    pub beta: f64,
    /// Keep `π_ref` uniform instead of drawing random logits.
    pub uniform_ref: bool,
}

impl ToyMDP {
    /// `prompts` carry sampling weights (normalized here) and must share one
    /// length; `raw_reward` rows are indexed by full state and missing rows
    /// mean zero reward.
    pub fn new(
        vocab: Vocab,
        horizon: usize,
        prompts: Vec<(TokenSeq, f64)>,
        raw_reward: BTreeMap<ContextKey, Vec<f64>>,
        reference: TabularPolicy,
        beta: f64,
    ) -> Result<Self> {
        if horizon == 0 {
            return invalid("horizon must be positive");
        }
        if !(beta > 0.0 && beta.is_finite()) {
            return invalid(format!("beta must be positive, got {beta}"));
        }
        if prompts.is_empty() {
            return invalid("at least one prompt is required");
        }
        let plen = prompts[0].0.len();
        let mut total = 0.0;
        for (x, w) in &prompts {
            if x.len() != plen {
                return invalid("all prompts must have the same length");
            }
            for t in x.iter() {
                vocab.check(t)?;
            }
            if !(*w > 0.0 && w.is_finite()) {
                return invalid(format!("prompt weights must be positive, got {w}"));
            }
            total += w;
        }
        for (k, row) in &raw_reward {
            if row.len() != vocab.size() || row.iter().any(|r| !r.is_finite()) {
                return invalid(format!("reward row at {:?} must hold {} finite values", k.tokens(), vocab.size()));
            }
        }
        if reference.vocab() != &vocab {
            return invalid("reference policy uses a different vocabulary");
        }
        let n = (prompts.len() as u128).saturating_mul((vocab.size() as u128).saturating_pow(horizon as u32));
        if n > MAX_TRAJECTORIES {
            return Err(LabError::Capacity {
                what: "trajectory enumeration".into(),
                required: n,
                budget: MAX_TRAJECTORIES,
            });
        }
        let prompts = prompts.into_iter().map(|(x, w)| (x, w / total)).collect();
        Ok(Self { vocab, horizon, prompts, raw_reward, reference: reference.freeze(), beta })
    }

    /// Single-token prompts, rewards i.i.d. uniform on [−1, 1] at every
    /// reachable state, reference logits uniform on [−1, 1] unless `uniform_ref`.
    pub fn random(cfg: RandomMdpConfig, rng: &mut LabRng) -> Result<Self> {
        let vocab = Vocab::digits(cfg.vocab_size)?;
        let v = cfg.vocab_size;
        if cfg.n_prompts == 0 {
            return invalid("n_prompts must be positive");
        }
        let prompts: Vec<(TokenSeq, f64)> = (0..cfg.n_prompts)
            .map(|i| {
                let tok = if cfg.n_prompts <= v { i as u32 } else { rng.random_range(0..v as u32) };
                (TokenSeq::from_ids(&[tok]), 1.0)
            })
            .collect();
        let states = reachable(&prompts, v, cfg.horizon);
        let mut reference = TabularPolicy::uniform(vocab.clone(), ContextOrder::Full);
        let mut raw_reward = BTreeMap::new();
        for s in &states {
            if !cfg.uniform_ref {
                let row = (0..v).map(|_| rng.random_range(-1.0..=1.0)).collect();
                reference.set_logits(s, row)?;
            }
            let row = (0..v).map(|_| rng.random_range(-1.0..=1.0)).collect();
            raw_reward.insert(ContextKey(s.clone()), row);
        }
        Self::new(vocab, cfg.horizon, prompts, raw_reward, reference, cfg.beta)
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn prompts(&self) -> &[(TokenSeq, f64)] {
        &self.prompts
    }

    pub fn reference(&self) -> &TabularPolicy {
        &self.reference
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn prompt_len(&self) -> usize {
        self.prompts[0].0.len()
    }

    /// `r_φ(s, a)`; zero for states without a stored row.
    pub fn reward(&self, state: &[TokenId], action: TokenId) -> f64 {
        self.raw_reward.get(&ContextKey(state.to_vec())).map_or(0.0, |r| r[action.index()])
    }

    /// `Σ_t r_φ([x, y^{<t}], y^t)`
    pub fn sequence_reward(&self, prompt: &TokenSeq, response: &TokenSeq) -> f64 {
        let mut state = prompt.tokens().to_vec();
        let mut total = 0.0;
        for a in response.iter() {
            total += self.reward(&state, a);
            state.push(a);
        }
        total
    }

    /// Every state `[x, y^{<t}]` with `t < horizon`, prompts in order, then
    /// shorter prefixes first.
    pub fn states(&self) -> Vec<Vec<TokenId>> {
        reachable(&self.prompts, self.vocab.size(), self.horizon)
    }

    /// Every full-length response, in lexicographic order.
    pub fn responses(&self) -> Vec<TokenSeq> {
        sequences(self.vocab.size(), self.horizon).into_iter().map(TokenSeq::new).collect()
    }

    /// Position of `state` in its response, or an error if it is not a
    /// decision state of this MDP.
    fn step_of(&self, state: &[TokenId]) -> Result<usize> {
        let plen = self.prompt_len();
        if state.len() < plen || state.len() - plen >= self.horizon {
            return invalid(format!("state of length {} is outside the horizon", state.len()));
        }
        Ok(state.len() - plen)
    }

    fn check_policy<P: StochasticPolicy + ?Sized>(&self, policy: &P) -> Result<()> {
        if policy.num_actions() != self.vocab.size() {
            return invalid(format!("policy has {} actions, MDP has {}", policy.num_actions(), self.vocab.size()));
        }
        Ok(())
    }
}

/// All sequences of length `n` over `v` symbols, lexicographic.
fn sequences(v: usize, n: usize) -> Vec<Vec<TokenId>> {
    let mut out = vec![Vec::new()];
    for _ in 0..n {
        out = out
            .into_iter()
            .flat_map(|s| {
                (0..v as u32).map(move |a| {
                    let mut s = s.clone();
                    s.push(TokenId(a));
                    s
                })
            })
            .collect();
    }
    out
}

fn reachable(prompts: &[(TokenSeq, f64)], v: usize, horizon: usize) -> Vec<Vec<TokenId>> {
    let mut out = Vec::new();
    for (x, _) in prompts {
        for d in 0..horizon {
            for y in sequences(v, d) {
                out.push(x.concat(&y));
            }
        }
    }
    out
}

/// Expected `Σ_t r − β log(π(y|x)/π_ref(y|x))` by full enumeration.
pub fn sequence_objective<P: StochasticPolicy + ?Sized>(mdp: &ToyMDP, policy: &P) -> Result<f64> {
    mdp.check_policy(policy)?;
    let mut total = 0.0;
    for (x, w) in &mdp.prompts {
        let mut acc = 0.0;
        walk(mdp, policy, x.tokens().to_vec(), 0.0, 0.0, 0.0, &mut acc);
        total += w * acc;
    }
    Ok(total)
}

fn walk<P: StochasticPolicy + ?Sized>(
    mdp: &ToyMDP,
    policy: &P,
    state: Vec<TokenId>,
    logp: f64,
    logref: f64,
    reward: f64,
    acc: &mut f64,
) {
    if state.len() - mdp.prompt_len() == mdp.horizon {
        *acc += logp.exp() * (reward - mdp.beta * (logp - logref));
        return;
    }
    let lp = policy.log_probs(&state);
    let lr = mdp.reference.log_probs(&state);
    for a in 0..lp.len() {
        if lp[a] == f64::NEG_INFINITY {
            continue;
        }
        let tok = TokenId(a as u32);
        let r = mdp.reward(&state, tok);
        let mut next = state.clone();
        next.push(tok);
        walk(mdp, policy, next, logp + lp[a], logref + lr[a], reward + r, acc);
    }
}

/// `E_{s_t ∼ D_t(π), a ∼ π}[r − β log(π/π_ref)]`, the state distribution
/// induced by the same policy.
pub fn per_step_objective<P: StochasticPolicy + ?Sized>(mdp: &ToyMDP, policy: &P, t: usize) -> Result<f64> {
    mdp.check_policy(policy)?;
    if t >= mdp.horizon {
        return invalid(format!("step {t} is outside the horizon {}", mdp.horizon));
    }
    let mut total = 0.0;
    for (x, w) in &mdp.prompts {
        for y in sequences(mdp.vocab.size(), t) {
            let mut state = x.tokens().to_vec();
            let mut logp = 0.0;
            for &a in &y {
                logp += policy.log_probs(&state)[a.index()];
                state.push(a);
            }
            if logp == f64::NEG_INFINITY {
                continue;
            }
            let lp = policy.log_probs(&state);
            let lr = mdp.reference.log_probs(&state);
            let mut inner = 0.0;
            for a in 0..lp.len() {
                if lp[a] == f64::NEG_INFINITY {
                    continue;
                }
                let r = mdp.reward(&state, TokenId(a as u32));
                inner += lp[a].exp() * (r - mdp.beta * (lp[a] - lr[a]));
            }
            total += w * logp.exp() * inner;
        }
    }
    Ok(total)
}

/// Where the guidance rewards `r̂(s, a)` come from.
#[derive(Clone, Debug)]
pub enum RewardSource {
    Zero,
    /// `reward_beta · log(π_θ̂ / π_ref)` for a frozen `θ̂`.
    Policy {
        theta_hat: TabularPolicy,
        reward_beta: f64,
    },
    /// Explicit rows per state; missing rows are zero.
    Table(BTreeMap<ContextKey, Vec<f64>>),
}

/// A weight spec together with the `r̂` it reads.
#[derive(Clone, Debug)]
pub struct WeightFn {
    pub spec: TokenWeightSpec,
    pub source: RewardSource,
}

impl WeightFn {
    /// `f ≡ 1`
    pub fn unit(side: Side) -> Self {
        Self { spec: TokenWeightSpec::unit(side), source: RewardSource::Zero }
    }

    pub fn new(spec: TokenWeightSpec, source: RewardSource) -> Result<Self> {
        if let RewardSource::Policy { theta_hat, reward_beta } = &source {
            if !theta_hat.is_frozen() {
                return Err(LabError::Frozen("guidance rewards must come from a frozen θ̂".into()));
            }
            if reward_beta.is_nan() || *reward_beta <= 0.0 {
                return invalid(format!("reward_beta must be positive, got {reward_beta}"));
            }
        }
        Ok(Self { spec, source })
    }

    pub fn r_hat(&self, mdp: &ToyMDP, state: &[TokenId], action: TokenId) -> Result<f64> {
        match &self.source {
            RewardSource::Zero => Ok(0.0),
            RewardSource::Policy { theta_hat, reward_beta } => {
                Ok(reward_beta * token_log_ratio(theta_hat, &mdp.reference, state, action)?)
            }
            RewardSource::Table(t) => Ok(t.get(&ContextKey(state.to_vec())).map_or(0.0, |r| r[action.index()])),
        }
    }

    /// `f(r̂(s, a))` with `t` measured from the end of the prompt and `T` the horizon.
    pub fn weight(&self, mdp: &ToyMDP, state: &[TokenId], action: TokenId) -> Result<f64> {
        let t = mdp.step_of(state)?;
        Ok(self.spec.weight(self.r_hat(mdp, state, action)?, t, mdp.horizon))
    }

    /// The `r̂` values along a response.
    pub fn trace(&self, mdp: &ToyMDP, prompt: &TokenSeq, response: &TokenSeq) -> Result<TokenRewardTrace> {
        let mut state = prompt.tokens().to_vec();
        let mut values = Vec::with_capacity(response.len());
        for a in response.iter() {
            values.push(self.r_hat(mdp, &state, a)?);
            state.push(a);
        }
        let source_beta = match &self.source {
            RewardSource::Policy { reward_beta, .. } => *reward_beta,
            _ => 0.0,
        };
        Ok(TokenRewardTrace { values, source_beta })
    }
}

/// Closed-form optimal action distribution at one state.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimalTokenPolicy {
    pub probs: Vec<f64>,
    pub log_probs: Vec<f64>,
    /// `ln Z(s)`
    pub log_z: f64,
}

impl OptimalTokenPolicy {
    pub fn z(&self) -> f64 {
        self.log_z.exp()
    }
}

/// Deliberate corruptions used as negative controls for the checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Perturb one token log-ratio in the decomposition check.
    CorruptTokenRatio,
    /// Mix the closed-form optimal policy with the uniform distribution.
    CorruptOptimalPolicy,
}

/// `π*(a|s) ∝ π_ref(a|s) exp(r(s,a) / (β f(r̂(s,a))))`, normalized in log space.
pub fn optimal_token_policy(mdp: &ToyMDP, wf: &WeightFn, state: &[TokenId]) -> Result<OptimalTokenPolicy> {
    optimal_inner(mdp, wf, state, None)
}

fn exponents(mdp: &ToyMDP, wf: &WeightFn, state: &[TokenId]) -> Result<Vec<f64>> {
    (0..mdp.vocab.size())
        .map(|a| {
            let tok = TokenId(a as u32);
            let e = mdp.reward(state, tok) / (mdp.beta * wf.weight(mdp, state, tok)?);
            if e.is_finite() && e.abs() <= EXPONENT_LIMIT {
                Ok(e)
            } else {
                Err(LabError::NumericalRange {
                    state: state.iter().map(|t| t.0).collect(),
                    action: a as u32,
                    exponent: e,
                })
            }
        })
        .collect()
}

fn optimal_inner(mdp: &ToyMDP, wf: &WeightFn, state: &[TokenId], fault: Option<Fault>) -> Result<OptimalTokenPolicy> {
    let e = exponents(mdp, wf, state)?;
    let lr = mdp.reference.log_probs(state);
    let terms: Vec<f64> = lr.iter().zip(&e).map(|(l, e)| l + e).collect();
    let log_z = log_sum_exp(&terms);
    let mut log_probs: Vec<f64> = terms.iter().map(|t| t - log_z).collect();
    if fault == Some(Fault::CorruptOptimalPolicy) {
        let u = 1.0 / log_probs.len() as f64;
        log_probs = log_probs.iter().map(|l| (0.99 * l.exp() + 0.01 * u).ln()).collect();
    }
    let probs = log_probs.iter().map(|l| l.exp()).collect();
    Ok(OptimalTokenPolicy { probs, log_probs, log_z })
}

/// `β f (log(π*/π_ref) + log Z)`, which should give back `r_φ(s, a)`.
pub fn reconstruct_reward(mdp: &ToyMDP, wf: &WeightFn, state: &[TokenId], action: TokenId) -> Result<f64> {
    reconstruct_inner(mdp, wf, state, action, None)
}

fn reconstruct_inner(
    mdp: &ToyMDP,
    wf: &WeightFn,
    state: &[TokenId],
    action: TokenId,
    fault: Option<Fault>,
) -> Result<f64> {
    mdp.vocab.check(action)?;
    let opt = optimal_inner(mdp, wf, state, fault)?;
    let bf = mdp.beta * wf.weight(mdp, state, action)?;
    let lr = mdp.reference.log_probs(state)[action.index()];
    Ok(bf * (opt.log_probs[action.index()] - lr) + bf * opt.log_z)
}

/// `δ = Σ_w β f_w log Z_w(s_t) − Σ_l β f_l log Z_l(s_t)`.
pub fn compute_delta_term(mdp: &ToyMDP, wf_w: &WeightFn, wf_l: &WeightFn, pair: &PreferencePair) -> Result<f64> {
    delta_inner(mdp, wf_w, wf_l, pair, None)
}

fn side_log_z_sum(mdp: &ToyMDP, wf: &WeightFn, prompt: &TokenSeq, y: &TokenSeq, fault: Option<Fault>) -> Result<f64> {
    let mut state = prompt.tokens().to_vec();
    let mut total = 0.0;
    for a in y.iter() {
        let bf = mdp.beta * wf.weight(mdp, &state, a)?;
        total += bf * optimal_inner(mdp, wf, &state, fault)?.log_z;
        state.push(a);
    }
    Ok(total)
}

fn delta_inner(
    mdp: &ToyMDP,
    wf_w: &WeightFn,
    wf_l: &WeightFn,
    pair: &PreferencePair,
    fault: Option<Fault>,
) -> Result<f64> {
    Ok(side_log_z_sum(mdp, wf_w, &pair.prompt, &pair.chosen, fault)?
        - side_log_z_sum(mdp, wf_l, &pair.prompt, &pair.rejected, fault)?)
}

/// `Σ_t β f log(π*/π_ref)` along one response, `π*` built from the same `f`.
fn side_phi(mdp: &ToyMDP, wf: &WeightFn, prompt: &TokenSeq, y: &TokenSeq, fault: Option<Fault>) -> Result<f64> {
    let mut state = prompt.tokens().to_vec();
    let mut total = 0.0;
    for a in y.iter() {
        let bf = mdp.beta * wf.weight(mdp, &state, a)?;
        let opt = optimal_inner(mdp, wf, &state, fault)?;
        total += bf * (opt.log_probs[a.index()] - mdp.reference.log_probs(&state)[a.index()]);
        state.push(a);
    }
    Ok(total)
}

/// `φ*` for a pair: the framework logit evaluated at the side-specific
/// closed-form optimal policies.
pub fn optimal_phi(mdp: &ToyMDP, wf_w: &WeightFn, wf_l: &WeightFn, pair: &PreferencePair) -> Result<f64> {
    Ok(side_phi(mdp, wf_w, &pair.prompt, &pair.chosen, None)?
        - side_phi(mdp, wf_l, &pair.prompt, &pair.rejected, None)?)
}

/// The closed-form optimal policy on every state of `mdp`, as a table.
pub fn optimal_policy_table(mdp: &ToyMDP, wf: &WeightFn) -> Result<TabularPolicy> {
    let mut p = TabularPolicy::uniform(mdp.vocab.clone(), ContextOrder::Full);
    for s in mdp.states() {
        p.set_logits(&s, optimal_token_policy(mdp, wf, &s)?.log_probs)?;
    }
    Ok(p)
}

/// One piece of evidence for or against a claim.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Witness {
    pub desc: String,
    pub lhs: f64,
    pub rhs: f64,
    pub gap: f64,
    /// Overrides the report tolerance for this witness.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
}

/// Outcome of one check: all failing witnesses plus the tightest passing ones.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TheoremReport {
    pub theorem: String,
    pub passed: bool,
    pub tolerance: f64,
    /// Number of witnesses evaluated.
    pub checked: usize,
    pub witnesses: Vec<Witness>,
}

impl TheoremReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Merge reports of the same check on different instances.
    pub fn combine(theorem: &str, tolerance: f64, reports: Vec<TheoremReport>) -> TheoremReport {
        let mut b = ReportBuilder::new(theorem, tolerance);
        for r in reports {
            b.checked += r.checked;
            b.checked -= r.witnesses.len();
            b.forced_fail |= !r.passed;
            for w in r.witnesses {
                b.push(w);
            }
        }
        b.finish()
    }

    /// A failed report standing in for a check that could not run.
    pub fn errored(theorem: &str, tolerance: f64, err: &LabError) -> TheoremReport {
        TheoremReport {
            theorem: theorem.into(),
            passed: false,
            tolerance,
            checked: 0,
            witnesses: vec![Witness {
                desc: err.to_string(),
                lhs: f64::NAN,
                rhs: f64::NAN,
                gap: f64::INFINITY,
                tol: None,
            }],
        }
    }
}

struct ReportBuilder {
    theorem: String,
    tolerance: f64,
    checked: usize,
    forced_fail: bool,
    failures: Vec<Witness>,
    kept: Vec<Witness>,
}

impl ReportBuilder {
    fn new(theorem: &str, tolerance: f64) -> Self {
        Self {
            theorem: theorem.into(),
            tolerance,
            checked: 0,
            forced_fail: false,
            failures: Vec::new(),
            kept: Vec::new(),
        }
    }

    fn push(&mut self, w: Witness) {
        self.checked += 1;
        // NaN gaps fail.
        if w.gap <= w.tol.unwrap_or(self.tolerance) {
            self.kept.push(w);
            if self.kept.len() >= 4 * KEPT_WITNESSES {
                self.trim();
            }
        } else {
            self.failures.push(w);
        }
    }

    fn witness(&mut self, desc: impl Into<String>, lhs: f64, rhs: f64, gap: f64) {
        self.push(Witness { desc: desc.into(), lhs, rhs, gap, tol: None });
    }

    fn trim(&mut self) {
        self.kept.sort_by(|a, b| b.gap.total_cmp(&a.gap));
        self.kept.truncate(KEPT_WITNESSES);
    }

    fn finish(mut self) -> TheoremReport {
        self.trim();
        let passed = self.failures.is_empty() && !self.forced_fail;
        let mut witnesses = self.failures;
        witnesses.extend(self.kept);
        TheoremReport { theorem: self.theorem, passed, tolerance: self.tolerance, checked: self.checked, witnesses }
    }
}

fn render(mdp: &ToyMDP, state: &[TokenId]) -> String {
    mdp.vocab.decode(&TokenSeq::new(state.to_vec())).concat()
}

/// Pathwise check that the sequence-level penalized return equals the sum of
/// token-level terms on every trajectory.
pub fn check_decomposition(mdp: &ToyMDP, policy: &TabularPolicy) -> Result<TheoremReport> {
    check_decomposition_inner(mdp, policy, None)
}

fn check_decomposition_inner(mdp: &ToyMDP, policy: &TabularPolicy, fault: Option<Fault>) -> Result<TheoremReport> {
    mdp.check_policy(policy)?;
    let mut b = ReportBuilder::new("decomposition", DECOMPOSITION_TOL);
    for (x, _) in &mdp.prompts {
        for y in mdp.responses() {
            // Sequence side: ratio of products of probabilities.
            let mut state = x.tokens().to_vec();
            let (mut p, mut q, mut reward) = (1.0f64, 1.0f64, 0.0);
            let mut rhs = 0.0;
            for (t, a) in y.iter().enumerate() {
                let lp = policy.log_probs(&state)[a.index()];
                let lr = mdp.reference.log_probs(&state)[a.index()];
                let r = mdp.reward(&state, a);
                p *= lp.exp();
                q *= lr.exp();
                reward += r;
                let mut ratio = lp - lr;
                if fault == Some(Fault::CorruptTokenRatio) && t == 0 {
                    ratio += 1e-6;
                }
                rhs += r - mdp.beta * ratio;
                state.push(a);
            }
            if p == 0.0 {
                continue;
            }
            let lhs = reward - mdp.beta * (p / q).ln();
            b.witness(format!("trajectory {}", render(mdp, &state)), lhs, rhs, (lhs - rhs).abs());
        }
    }
    Ok(b.finish())
}

/// All points of the simplex in `k` coordinates with step `1/resolution`.
pub fn simplex_grid(k: usize, resolution: usize) -> Vec<Vec<f64>> {
    fn rec(k: usize, left: usize, res: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<f64>>) {
        if k == 1 {
            cur.push(left);
            out.push(cur.iter().map(|&c| c as f64 / res as f64).collect());
            cur.pop();
            return;
        }
        for c in 0..=left {
            cur.push(c);
            rec(k - 1, left - c, res, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if k > 0 && resolution > 0 {
        rec(k, resolution, resolution, &mut Vec::new(), &mut out);
    }
    out
}

fn simplex_size(k: usize, resolution: usize) -> u128 {
    // C(resolution + k − 1, k − 1)
    let mut c: u128 = 1;
    for i in 0..(k.saturating_sub(1) as u128) {
        c = c * (resolution as u128 + 1 + i) / (i + 1);
    }
    c
}

fn capacity(what: &str, required: u128) -> Result<()> {
    if required > MAX_GRID_EVALUATIONS {
        Err(LabError::Capacity { what: what.into(), required, budget: MAX_GRID_EVALUATIONS })
    } else {
        Ok(())
    }
}

/// A policy that picks one simplex grid point per state.
struct GridPolicy<'a> {
    index: &'a BTreeMap<Vec<TokenId>, usize>,
    points: &'a [Vec<f64>],
    choice: Vec<usize>,
    actions: usize,
}

impl StochasticPolicy for GridPolicy<'_> {
    fn num_actions(&self) -> usize {
        self.actions
    }

    fn log_probs(&self, state: &[TokenId]) -> Vec<f64> {
        let ctx = self.index[state];
        self.points[self.choice[ctx]].clone()
    }
}

/// Brute-force check that the best sequence-level objective is bounded by
/// the sum of the best per-step objectives, over all grid policies.
pub fn check_upper_bound(mdp: &ToyMDP, resolution: usize) -> Result<TheoremReport> {
    if resolution == 0 {
        return invalid("grid resolution must be positive");
    }
    let v = mdp.vocab.size();
    let states = mdp.states();
    let per_policy = (mdp.prompts.len() * v.pow(mdp.horizon as u32)) as u128;
    let n_policies = simplex_size(v, resolution).checked_pow(states.len() as u32).unwrap_or(u128::MAX);
    capacity("upper-bound grid", n_policies.saturating_mul(per_policy))?;

    let points: Vec<Vec<f64>> =
        simplex_grid(v, resolution).into_iter().map(|p| p.into_iter().map(f64::ln).collect()).collect();
    let index: BTreeMap<Vec<TokenId>, usize> = states.iter().cloned().enumerate().map(|(i, s)| (s, i)).collect();
    let mut gp = GridPolicy { index: &index, points: &points, choice: vec![0; states.len()], actions: v };

    let mut lhs = f64::NEG_INFINITY;
    let mut step_max = vec![f64::NEG_INFINITY; mdp.horizon];
    loop {
        lhs = lhs.max(sequence_objective(mdp, &gp)?);
        for (t, m) in step_max.iter_mut().enumerate() {
            *m = m.max(per_step_objective(mdp, &gp, t)?);
        }
        // Odometer over grid choices.
        let mut i = 0;
        while i < gp.choice.len() {
            gp.choice[i] += 1;
            if gp.choice[i] < points.len() {
                break;
            }
            gp.choice[i] = 0;
            i += 1;
        }
        if i == gp.choice.len() {
            break;
        }
    }
    let rhs: f64 = step_max.iter().sum();
    let mut b = ReportBuilder::new("upper_bound", UPPER_BOUND_TOL);
    b.witness(
        format!("max sequence objective vs sum of per-step maxima (grid step 1/{resolution})"),
        lhs,
        rhs,
        lhs - rhs,
    );
    Ok(b.finish())
}

/// `E_p[r/(βf) − log(p/π_ref)]` at one state.
fn guided_state_objective(p: &[f64], exps: &[f64], lr: &[f64]) -> f64 {
    let mut j = 0.0;
    for a in 0..p.len() {
        if p[a] > 0.0 {
            j += p[a] * (exps[a] - (p[a].ln() - lr[a]));
        }
    }
    j
}

/// Grid search of the guided per-state objective against the closed form.
/// `resolution` is the number of grid steps per unit; at most `max_states`
/// states are examined.
pub fn check_optimal_policy(
    mdp: &ToyMDP,
    wf: &WeightFn,
    resolution: usize,
    max_states: usize,
) -> Result<TheoremReport> {
    check_optimal_inner(mdp, wf, resolution, max_states, None)
}

fn check_optimal_inner(
    mdp: &ToyMDP,
    wf: &WeightFn,
    resolution: usize,
    max_states: usize,
    fault: Option<Fault>,
) -> Result<TheoremReport> {
    if resolution == 0 {
        return invalid("grid resolution must be positive");
    }
    let v = mdp.vocab.size();
    let states: Vec<Vec<TokenId>> = mdp.states().into_iter().take(max_states).collect();
    capacity("optimal-policy grid", simplex_size(v, resolution).saturating_mul(states.len() as u128))?;
    let grid = simplex_grid(v, resolution);
    let mut b = ReportBuilder::new("optimal_policy", COORDINATE_TOL);
    for s in &states {
        let opt = optimal_inner(mdp, wf, s, fault)?;
        let exps = exponents(mdp, wf, s)?;
        let lr = mdp.reference.log_probs(s);
        let (mut best, mut best_j) = (&grid[0], f64::NEG_INFINITY);
        for p in &grid {
            let j = guided_state_objective(p, &exps, &lr);
            if j > best_j {
                best = p;
                best_j = j;
            }
        }
        let coord = best.iter().zip(&opt.probs).map(|(g, o)| (g - o).abs()).fold(0.0, f64::max);
        let name = render(mdp, s);
        b.witness(format!("state {name}: max coordinate gap to grid argmax"), coord, 0.0, coord);
        let j_opt = guided_state_objective(&opt.probs, &exps, &lr);
        b.push(Witness {
            desc: format!("state {name}: grid maximum vs closed-form objective"),
            lhs: best_j,
            rhs: j_opt,
            gap: best_j - j_opt,
            tol: Some(DOMINANCE_TOL),
        });
    }
    Ok(b.finish())
}

/// Reconstruct `r_φ(s, a)` at every state-action pair of `mdp`.
pub fn check_reward_reconstruction(mdp: &ToyMDP, wf: &WeightFn) -> Result<TheoremReport> {
    reconstruction_inner(mdp, wf, None)
}

fn reconstruction_inner(mdp: &ToyMDP, wf: &WeightFn, fault: Option<Fault>) -> Result<TheoremReport> {
    let mut b = ReportBuilder::new("reward_reconstruction", RECONSTRUCTION_TOL);
    for s in mdp.states() {
        for a in 0..mdp.vocab.size() {
            let tok = TokenId(a as u32);
            let rec = reconstruct_inner(mdp, wf, &s, tok, fault)?;
            let r = mdp.reward(&s, tok);
            b.witness(format!("state {}, action {}", render(mdp, &s), render(mdp, &[tok])), rec, r, (rec - r).abs());
        }
    }
    Ok(b.finish())
}

/// `σ(φ* + δ)` against the Bradley-Terry probability from raw rewards, on
/// `n_pairs` random pairs of full-length responses.
pub fn check_bt_identity(
    mdp: &ToyMDP,
    wf_w: &WeightFn,
    wf_l: &WeightFn,
    n_pairs: usize,
    seed: u64,
) -> Result<TheoremReport> {
    bt_inner(mdp, wf_w, wf_l, n_pairs, seed, None)
}

fn bt_inner(
    mdp: &ToyMDP,
    wf_w: &WeightFn,
    wf_l: &WeightFn,
    n_pairs: usize,
    seed: u64,
    fault: Option<Fault>,
) -> Result<TheoremReport> {
    let mut rng = substream(seed, "verify");
    let v = mdp.vocab.size() as u32;
    let mut b = ReportBuilder::new("bt_identity", BT_TOL);
    for _ in 0..n_pairs {
        let (x, _) = &mdp.prompts[rng.random_range(0..mdp.prompts.len())];
        let mut draw = || TokenSeq::new((0..mdp.horizon).map(|_| TokenId(rng.random_range(0..v))).collect());
        let pair = PreferencePair::new(x.clone(), draw(), draw())?;
        let phi = side_phi(mdp, wf_w, x, &pair.chosen, fault)? - side_phi(mdp, wf_l, x, &pair.rejected, fault)?;
        let delta = delta_inner(mdp, wf_w, wf_l, &pair, fault)?;
        let lhs = sigmoid(phi + delta);
        let rhs = sigmoid(mdp.sequence_reward(x, &pair.chosen) - mdp.sequence_reward(x, &pair.rejected));
        let desc = format!(
            "x={} y_w={} y_l={}",
            render(mdp, x.tokens()),
            render(mdp, pair.chosen.tokens()),
            render(mdp, pair.rejected.tokens())
        );
        b.witness(desc, lhs, rhs, (lhs - rhs).abs());
    }
    Ok(b.finish())
}

/// `σ(a) − σ(b)` evaluated on the side of zero where σ keeps full relative
/// precision.
pub fn sigmoid_diff(a: f64, b: f64) -> f64 {
    if a >= 0.0 && b >= 0.0 {
        sigmoid(-b) - sigmoid(-a)
    } else {
        sigmoid(a) - sigmoid(b)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Adding a θ-constant `δ` inside σ keeps the ordering of values and the sign
/// of every directional derivative. Runs `n_trials` ordering trials and
/// `max(1, n_trials / 10)` directional-derivative trials.
pub fn check_order_preservation(n_trials: usize, seed: u64) -> Result<TheoremReport> {
    if n_trials == 0 {
        return invalid("n_trials must be at least 1");
    }
    let mut rng = substream(seed, "verify");
    let mut b = ReportBuilder::new("order_preservation", 0.0);
    for i in 0..n_trials {
        let (p1, p2, d) =
            (rng.random_range(-10.0..=10.0), rng.random_range(-10.0..=10.0), rng.random_range(-10.0..=10.0));
        let shifted = sign(sigmoid_diff(p1 + d, p2 + d));
        let plain = sign(sigmoid_diff(p1, p2));
        b.witness(format!("order trial {i}: φ1={p1:.6} φ2={p2:.6} δ={d:.6}"), shifted, plain, (shifted - plain).abs());
    }
    for i in 0..(n_trials / 10).max(1) {
        let (shifted, plain) = directional_trial(&mut rng);
        b.witness(format!("direction trial {i}"), shifted, plain, (sign(shifted) - sign(plain)).abs());
    }
    Ok(b.finish())
}

/// One random directional-derivative comparison on a single-context,
/// three-action policy: returns `(∂_v σ(φ+δ), ∂_v σ(φ))`.
fn directional_trial(rng: &mut LabRng) -> (f64, f64) {
    let theta: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
    let lref: Vec<f64> = crate::policy::log_softmax(&(0..3).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<_>>());
    let beta = rng.random_range(0.05..2.0);
    let (fw, fl) = (rng.random_range(0.1..3.0), rng.random_range(0.1..3.0));
    let (aw, al) = (rng.random_range(0..3usize), rng.random_range(0..3usize));
    let delta = rng.random_range(-10.0..=10.0);
    let dir: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();

    let (phi, grad) = toy_phi(&theta, &lref, beta, fw, fl, aw, al);
    let dphi: f64 = grad.iter().zip(&dir).map(|(g, v)| g * v).sum();
    let slope = |z: f64| sigmoid(z) * sigmoid(-z);
    (slope(phi + delta) * dphi, slope(phi) * dphi)
}

/// `φ(θ) = β f_w log(π_θ(a_w)/π_ref(a_w)) − β f_l log(π_θ(a_l)/π_ref(a_l))` and its gradient.
fn toy_phi(theta: &[f64], lref: &[f64], beta: f64, fw: f64, fl: f64, aw: usize, al: usize) -> (f64, Vec<f64>) {
    let lp = crate::policy::log_softmax(theta);
    let phi = beta * fw * (lp[aw] - lref[aw]) - beta * fl * (lp[al] - lref[al]);
    let p: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
    let mut g: Vec<f64> = p.iter().map(|pi| -beta * fw * pi + beta * fl * pi).collect();
    g[aw] += beta * fw;
    g[al] -= beta * fl;
    (phi, g)
}

/// Settings for [`run_suite`].
#[derive(Clone, Copy, Debug)]
pub struct SuiteConfig {
    pub seed: u64,
    /// Random MDPs for the decomposition and upper-bound checks.
    pub instances: usize,
    /// Ordering trials for the order-preservation check.
    pub trials: usize,
    pub fault: Option<Fault>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self { seed: 0, instances: 20, trials: 10_000, fault: None }
    }
}

/// Names of the checks, in the order [`run_suite`] returns them.
pub const SUITE_CHECKS: [&str; 6] =
    ["decomposition", "optimal_policy", "reward_reconstruction", "upper_bound", "order_preservation", "bt_identity"];

/// A random policy over every state of `mdp` (logits uniform on [−2, 2]).
pub fn random_policy(mdp: &ToyMDP, rng: &mut LabRng) -> Result<TabularPolicy> {
    let mut p = TabularPolicy::uniform(mdp.vocab.clone(), ContextOrder::Full);
    for s in mdp.states() {
        let row = (0..mdp.vocab.size()).map(|_| rng.random_range(-2.0..=2.0)).collect();
        p.set_logits(&s, row)?;
    }
    Ok(p)
}

/// A varied guidance for suite instance `i`: unit weights, affine weights
/// from a perturbed θ̂, affine weights from a random table, temporal decay,
/// or length normalization.
pub fn suite_guidance(mdp: &ToyMDP, i: usize, side: Side, rng: &mut LabRng) -> Result<WeightFn> {
    match i % 5 {
        0 => Ok(WeightFn::unit(side)),
        1 => {
            let mut theta = mdp.reference.thawed();
            for s in mdp.states() {
                let row: Vec<f64> = theta.logits(&s).iter().map(|l| l + rng.random_range(-1.0..=1.0)).collect();
                theta.set_logits(&s, row)?;
            }
            WeightFn::new(
                TokenWeightSpec::tgdpo(0.5, 1e-3, side)?,
                RewardSource::Policy { theta_hat: theta.freeze(), reward_beta: 0.1 },
            )
        }
        2 => {
            let table = mdp
                .states()
                .into_iter()
                .map(|s| (ContextKey(s), (0..mdp.vocab.size()).map(|_| rng.random_range(-0.9..=0.9)).collect()))
                .collect();
            WeightFn::new(TokenWeightSpec::tgdpo(1.0, 1e-3, side)?, RewardSource::Table(table))
        }
        3 => WeightFn::new(TokenWeightSpec::temporal_decay(0.8, side)?, RewardSource::Zero),
        _ => WeightFn::new(TokenWeightSpec::length_normalized(side), RewardSource::Zero),
    }
}

fn guarded(name: &str, tol: f64, r: Result<TheoremReport>) -> TheoremReport {
    r.unwrap_or_else(|e| TheoremReport::errored(name, tol, &e))
}

/// Run every check once and return one report per entry of [`SUITE_CHECKS`].
pub fn run_suite(cfg: &SuiteConfig) -> Vec<TheoremReport> {
    let fault = cfg.fault;
    let mut rng = substream(cfg.seed, "verify");
    let mdp = |rng: &mut LabRng, v, h, n, beta, uniform_ref| {
        ToyMDP::random(RandomMdpConfig { vocab_size: v, horizon: h, n_prompts: n, beta, uniform_ref }, rng)
    };

    let decomposition = (|| {
        let mut reports = Vec::new();
        for i in 0..cfg.instances {
            let m = mdp(&mut rng, 2 + i % 3, 1 + i % 4, 1 + i % 2, 0.5, false)?;
            for _ in 0..5 {
                let p = random_policy(&m, &mut rng)?;
                reports.push(check_decomposition_inner(&m, &p, fault)?);
            }
        }
        Ok(TheoremReport::combine("decomposition", DECOMPOSITION_TOL, reports))
    })();

    let optimal = (|| {
        let mut reports = Vec::new();
        for i in 0..5 {
            let m = mdp(&mut rng, 2, 4, 1, 0.5, false)?;
            let wf = suite_guidance(&m, i, if i % 2 == 0 { Side::Win } else { Side::Lose }, &mut rng)?;
            reports.push(check_optimal_inner(&m, &wf, 1000, usize::MAX, fault)?);
        }
        Ok(TheoremReport::combine("optimal_policy", COORDINATE_TOL, reports))
    })();

    let reconstruction = (|| {
        let mut reports = Vec::new();
        for i in 0..5 {
            let m = mdp(&mut rng, 3, 3, 2, 0.5, false)?;
            let wf = suite_guidance(&m, i, Side::Win, &mut rng)?;
            reports.push(reconstruction_inner(&m, &wf, fault)?);
        }
        Ok(TheoremReport::combine("reward_reconstruction", RECONSTRUCTION_TOL, reports))
    })();

    let upper = (|| {
        let mut reports = Vec::new();
        for _ in 0..cfg.instances.max(1) {
            let m = mdp(&mut rng, 2, 2, 1, 0.5, true)?;
            reports.push(check_upper_bound(&m, 10)?);
        }
        Ok(TheoremReport::combine("upper_bound", UPPER_BOUND_TOL, reports))
    })();

    let order = check_order_preservation(cfg.trials, crate::rng::derive_seed(cfg.seed, "order"));

    let bt = (|| {
        let mut reports = Vec::new();
        for i in 0..5 {
            let m = mdp(&mut rng, 3, 3, 2, 0.5, false)?;
            let wf_w = suite_guidance(&m, i, Side::Win, &mut rng)?;
            let wf_l = suite_guidance(&m, i, Side::Lose, &mut rng)?;
            let seed = rng.random();
            reports.push(bt_inner(&m, &wf_w, &wf_l, 20, seed, fault)?);
        }
        Ok(TheoremReport::combine("bt_identity", BT_TOL, reports))
    })();

    vec![
        guarded("decomposition", DECOMPOSITION_TOL, decomposition),
        guarded("optimal_policy", COORDINATE_TOL, optimal),
        guarded("reward_reconstruction", RECONSTRUCTION_TOL, reconstruction),
        guarded("upper_bound", UPPER_BOUND_TOL, upper),
        guarded("order_preservation", 0.0, order),
        guarded("bt_identity", BT_TOL, bt),
    ]
}
