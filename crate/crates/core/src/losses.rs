//! The token-weighted preference logit and the pairwise losses built on it.
//!
//! Every loss is `−ln σ(z)` for some logit `z`; gradients are returned with
//! respect to the policy's logits, keyed by context.

use serde::Serialize;

use crate::data::{PreferencePair, TokenSeq};
use crate::error::{invalid, Result};
use crate::policy::{log_softmax, softmax, token_log_ratios, LogitGrad, TabularPolicy};
use crate::rewards::{PairTraces, Side, TokenRewardTrace, TokenWeightSpec};

/// Numerically stable logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `−ln σ(z)`
pub fn neg_log_sigmoid(z: f64) -> f64 {
    softplus(-z)
}

/// `β Σ_w f·ratio − β Σ_l f·ratio`, accumulated left to right.
pub fn phi_from_terms(beta: f64, win_terms: &[(f64, f64)], lose_terms: &[(f64, f64)]) -> f64 {
    let mut win = 0.0;
    for &(w, r) in win_terms {
        win += beta * w * r;
    }
    let mut lose = 0.0;
    for &(w, r) in lose_terms {
        lose += beta * w * r;
    }
    win - lose
}

/// The framework logit `φ` for one pair, with its per-token ingredients.
#[derive(Clone, Debug, PartialEq)]
pub struct PerInstanceLogit {
    pub beta: f64,
    pub phi: f64,
    /// θ-independent additive term.
    pub offset: f64,
    /// `(weight, log_ratio)` per chosen token.
    pub win_terms: Vec<(f64, f64)>,
    pub lose_terms: Vec<(f64, f64)>,
}

impl PerInstanceLogit {
    pub fn logit(&self) -> f64 {
        self.phi + self.offset
    }

    pub fn recompute_phi(&self) -> f64 {
        phi_from_terms(self.beta, &self.win_terms, &self.lose_terms)
    }

    /// `∂φ / ∂ log π_θ(y_w^t)` for each chosen token: `β f_w,t`.
    pub fn win_sensitivities(&self) -> Vec<f64> {
        self.win_terms.iter().map(|&(w, _)| self.beta * w).collect()
    }

    /// `∂φ / ∂ log π_θ(y_l^t)` for each rejected token: `−β f_l,t`.
    pub fn lose_sensitivities(&self) -> Vec<f64> {
        self.lose_terms.iter().map(|&(w, _)| -self.beta * w).collect()
    }
}

/// A loss value with its logit and gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub loss: f64,
    pub logit: f64,
    pub grad: LogitGrad,
}

impl LossValue {
    /// Turn `z` and `∂z/∂θ` into `−ln σ(z)` and its gradient.
    fn from_logit(z: f64, mut dz: LogitGrad) -> Self {
        dz.scale(-sigmoid(-z));
        Self { loss: neg_log_sigmoid(z), logit: z, grad: dz }
    }
}

/// One line of a loss log.
#[derive(Clone, Debug, Serialize)]
pub struct LossReport {
    pub step: usize,
    pub method: String,
    pub loss: f64,
    pub grad_norm: f64,
}

fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta.is_finite() {
        Ok(())
    } else {
        invalid(format!("beta must be positive, got {beta}"))
    }
}

fn side_terms(spec: &TokenWeightSpec, trace: Option<&TokenRewardTrace>, ratios: Vec<f64>) -> Result<Vec<(f64, f64)>> {
    let len = ratios.len();
    if let Some(tr) = trace {
        if tr.len() != len {
            return invalid(format!("reward trace has {} entries for a {len}-token response", tr.len()));
        }
    }
    Ok(ratios
        .into_iter()
        .enumerate()
        .map(|(t, r)| {
            let r_hat = trace.map_or(0.0, |tr| tr.values[t]);
            (spec.weight(r_hat, t, len), r)
        })
        .collect())
}

/// Build `φ` for a pair under the given weight specs.
#[allow(clippy::too_many_arguments)]
pub fn preference_logit(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    spec_w: &TokenWeightSpec,
    spec_l: &TokenWeightSpec,
    beta: f64,
    pair: &PreferencePair,
    traces: Option<&PairTraces>,
    offset: f64,
) -> Result<PerInstanceLogit> {
    check_beta(beta)?;
    if spec_w.side() != Side::Win || spec_l.side() != Side::Lose {
        return invalid("spec_w must be a win-side spec and spec_l a lose-side spec");
    }
    let needs = spec_w.requires_rewards() || spec_l.requires_rewards();
    match (needs, traces.is_some()) {
        (true, false) => return invalid("reward-guided weights need token reward traces"),
        (false, true) => return invalid("reward traces given but no weight spec uses them"),
        _ => {}
    }
    if !offset.is_finite() {
        return invalid(format!("offset must be finite, got {offset}"));
    }
    let win_ratios = token_log_ratios(policy, reference, &pair.prompt, &pair.chosen)?;
    let lose_ratios = token_log_ratios(policy, reference, &pair.prompt, &pair.rejected)?;
    let win_terms = side_terms(spec_w, traces.map(|t| &t.chosen), win_ratios)?;
    let lose_terms = side_terms(spec_l, traces.map(|t| &t.rejected), lose_ratios)?;
    let phi = phi_from_terms(beta, &win_terms, &lose_terms);
    Ok(PerInstanceLogit { beta, phi, offset, win_terms, lose_terms })
}

fn add_weighted(grad: &mut LogitGrad, policy: &TabularPolicy, prompt: &TokenSeq, response: &TokenSeq, scales: &[f64]) {
    let mut state = prompt.tokens().to_vec();
    for (a, &s) in response.iter().zip(scales) {
        grad.add_token(policy, &state, a, s);
        state.push(a);
    }
}

/// `−ln σ(φ + offset)` and its gradient.
#[allow(clippy::too_many_arguments)]
pub fn tgdpo_loss(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    spec_w: &TokenWeightSpec,
    spec_l: &TokenWeightSpec,
    beta: f64,
    pair: &PreferencePair,
    traces: Option<&PairTraces>,
    offset: f64,
) -> Result<LossValue> {
    let pl = preference_logit(policy, reference, spec_w, spec_l, beta, pair, traces, offset)?;
    let mut dz = LogitGrad::default();
    add_weighted(&mut dz, policy, &pair.prompt, &pair.chosen, &pl.win_sensitivities());
    add_weighted(&mut dz, policy, &pair.prompt, &pair.rejected, &pl.lose_sensitivities());
    Ok(LossValue::from_logit(pl.logit(), dz))
}

fn sequence_ratio(policy: &TabularPolicy, reference: &TabularPolicy, prompt: &TokenSeq, y: &TokenSeq) -> Result<f64> {
    Ok(policy.sequence_log_prob(prompt, y)? - reference.sequence_log_prob(prompt, y)?)
}

/// DPO logit and its θ-gradient.
fn dpo_logit(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    beta: f64,
    pair: &PreferencePair,
) -> Result<(f64, LogitGrad)> {
    check_beta(beta)?;
    policy.same_vocab(reference)?;
    let u = beta * sequence_ratio(policy, reference, &pair.prompt, &pair.chosen)?
        - beta * sequence_ratio(policy, reference, &pair.prompt, &pair.rejected)?;
    let mut dz = LogitGrad::default();
    dz.add_sequence(policy, &pair.prompt, &pair.chosen, beta)?;
    dz.add_sequence(policy, &pair.prompt, &pair.rejected, -beta)?;
    Ok((u, dz))
}

pub fn dpo_loss(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    beta: f64,
    pair: &PreferencePair,
) -> Result<LossValue> {
    let (u, dz) = dpo_logit(policy, reference, beta, pair)?;
    Ok(LossValue::from_logit(u, dz))
}

/// Reference-free, length-normalized loss with a target margin.
pub fn simpo_loss(policy: &TabularPolicy, beta: f64, gamma_margin: f64, pair: &PreferencePair) -> Result<LossValue> {
    check_beta(beta)?;
    let (nw, nl) = (pair.chosen.len() as f64, pair.rejected.len() as f64);
    let z = beta / nw * policy.sequence_log_prob(&pair.prompt, &pair.chosen)?
        - beta / nl * policy.sequence_log_prob(&pair.prompt, &pair.rejected)?
        - gamma_margin;
    let mut dz = LogitGrad::default();
    dz.add_sequence(policy, &pair.prompt, &pair.chosen, beta / nw)?;
    dz.add_sequence(policy, &pair.prompt, &pair.rejected, -beta / nl)?;
    Ok(LossValue::from_logit(z, dz))
}

/// DPO with a length-difference offset.
pub fn rdpo_loss(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    beta: f64,
    alpha_len: f64,
    pair: &PreferencePair,
) -> Result<LossValue> {
    let (u, dz) = dpo_logit(policy, reference, beta, pair)?;
    let offset = alpha_len * (pair.chosen.len() as f64 - pair.rejected.len() as f64);
    Ok(LossValue::from_logit(u + offset, dz))
}

/// DPO with per-token weights `γ^t`.
pub fn d2po_loss(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    beta: f64,
    gamma_decay: f64,
    pair: &PreferencePair,
) -> Result<LossValue> {
    check_beta(beta)?;
    if !(gamma_decay > 0.0 && gamma_decay <= 1.0) {
        return invalid(format!("decay gamma must lie in (0, 1], got {gamma_decay}"));
    }
    let win = token_log_ratios(policy, reference, &pair.prompt, &pair.chosen)?;
    let lose = token_log_ratios(policy, reference, &pair.prompt, &pair.rejected)?;
    let decay = |n: usize| (0..n).map(|t| gamma_decay.powi(t as i32)).collect::<Vec<_>>();
    let (dw, dl) = (decay(win.len()), decay(lose.len()));
    let mut zw = 0.0;
    for (g, r) in dw.iter().zip(&win) {
        zw += beta * g * r;
    }
    let mut zl = 0.0;
    for (g, r) in dl.iter().zip(&lose) {
        zl += beta * g * r;
    }
    let mut dz = LogitGrad::default();
    let sw: Vec<f64> = dw.iter().map(|g| beta * g).collect();
    let sl: Vec<f64> = dl.iter().map(|g| -beta * g).collect();
    add_weighted(&mut dz, policy, &pair.prompt, &pair.chosen, &sw);
    add_weighted(&mut dz, policy, &pair.prompt, &pair.rejected, &sl);
    Ok(LossValue::from_logit(zw - zl, dz))
}

/// `Σ_t KL(π_ref(·|s_t) ‖ π_θ(·|s_t))` along a response.
pub fn seq_kl(
    reference: &TabularPolicy,
    policy: &TabularPolicy,
    prompt: &TokenSeq,
    response: &TokenSeq,
) -> Result<f64> {
    policy.same_vocab(reference)?;
    let mut state = prompt.tokens().to_vec();
    let mut total = 0.0;
    for a in response.iter() {
        policy.vocab().check(a)?;
        let lr = log_softmax(&reference.logits(&state));
        let lp = log_softmax(&policy.logits(&state));
        for (r, p) in lr.iter().zip(&lp) {
            if *r > f64::NEG_INFINITY {
                total += r.exp() * (r - p);
            }
        }
        state.push(a);
    }
    Ok(total)
}

/// `scale · ∂ SeqKL / ∂θ`; at each position the gradient is `π_θ − π_ref`.
fn add_seq_kl_grad(
    grad: &mut LogitGrad,
    reference: &TabularPolicy,
    policy: &TabularPolicy,
    prompt: &TokenSeq,
    response: &TokenSeq,
    scale: f64,
) {
    let mut state = prompt.tokens().to_vec();
    for a in response.iter() {
        let key = policy.key(&state);
        let p = softmax(&policy.logits_at(&key));
        let r = reference.probs(&state);
        let g: Vec<f64> = p.iter().zip(&r).map(|(p, r)| p - r).collect();
        grad.add_row(key, &g, scale);
        state.push(a);
    }
}

/// DPO logit corrected by the difference of sequential KL terms.
pub fn tdpo_loss(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    beta: f64,
    kl_scale: f64,
    pair: &PreferencePair,
) -> Result<LossValue> {
    if !(kl_scale >= 0.0 && kl_scale.is_finite()) {
        return invalid(format!("kl_scale must be non-negative, got {kl_scale}"));
    }
    let (u, mut dz) = dpo_logit(policy, reference, beta, pair)?;
    let kl_w = seq_kl(reference, policy, &pair.prompt, &pair.chosen)?;
    let kl_l = seq_kl(reference, policy, &pair.prompt, &pair.rejected)?;
    let c = kl_scale * beta;
    add_seq_kl_grad(&mut dz, reference, policy, &pair.prompt, &pair.rejected, -c);
    add_seq_kl_grad(&mut dz, reference, policy, &pair.prompt, &pair.chosen, c);
    Ok(LossValue::from_logit(u - c * (kl_l - kl_w), dz))
}

/// A baseline expressed as weight specs plus a θ-constant offset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameworkForm {
    pub spec_w: TokenWeightSpec,
    pub spec_l: TokenWeightSpec,
    pub offset: f64,
}

impl FrameworkForm {
    pub fn loss(
        &self,
        policy: &TabularPolicy,
        reference: &TabularPolicy,
        beta: f64,
        pair: &PreferencePair,
        traces: Option<&PairTraces>,
    ) -> Result<LossValue> {
        tgdpo_loss(policy, reference, &self.spec_w, &self.spec_l, beta, pair, traces, self.offset)
    }
}

pub fn dpo_form() -> FrameworkForm {
    FrameworkForm { spec_w: TokenWeightSpec::unit(Side::Win), spec_l: TokenWeightSpec::unit(Side::Lose), offset: 0.0 }
}

/// SimPO's reference-free logit rewritten against `reference`.
pub fn simpo_form(
    reference: &TabularPolicy,
    beta: f64,
    gamma_margin: f64,
    pair: &PreferencePair,
) -> Result<FrameworkForm> {
    let (nw, nl) = (pair.chosen.len() as f64, pair.rejected.len() as f64);
    let offset = -gamma_margin + beta / nw * reference.sequence_log_prob(&pair.prompt, &pair.chosen)?
        - beta / nl * reference.sequence_log_prob(&pair.prompt, &pair.rejected)?;
    Ok(FrameworkForm {
        spec_w: TokenWeightSpec::length_normalized(Side::Win),
        spec_l: TokenWeightSpec::length_normalized(Side::Lose),
        offset,
    })
}

pub fn rdpo_form(alpha_len: f64, pair: &PreferencePair) -> FrameworkForm {
    FrameworkForm { offset: alpha_len * (pair.chosen.len() as f64 - pair.rejected.len() as f64), ..dpo_form() }
}

pub fn d2po_form(gamma_decay: f64) -> Result<FrameworkForm> {
    Ok(FrameworkForm {
        spec_w: TokenWeightSpec::temporal_decay(gamma_decay, Side::Win)?,
        spec_l: TokenWeightSpec::temporal_decay(gamma_decay, Side::Lose)?,
        offset: 0.0,
    })
}

/// Training objective selector.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Method {
    Dpo,
    Tgdpo { alpha: f64, clamp_floor: f64 },
    Simpo { gamma_margin: f64 },
    Rdpo { alpha_len: f64 },
    D2po { gamma_decay: f64 },
    Tdpo { kl_scale: f64 },
}

impl Method {
    pub const NAMES: [&'static str; 6] = ["dpo", "tgdpo", "simpo", "rdpo", "d2po", "tdpo"];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Dpo => "dpo",
            Method::Tgdpo { .. } => "tgdpo",
            Method::Simpo { .. } => "simpo",
            Method::Rdpo { .. } => "rdpo",
            Method::D2po { .. } => "d2po",
            Method::Tdpo { .. } => "tdpo",
        }
    }

    pub fn needs_traces(&self) -> bool {
        matches!(self, Method::Tgdpo { .. })
    }

    /// Per-instance loss and gradient.
    pub fn loss(
        &self,
        policy: &TabularPolicy,
        reference: &TabularPolicy,
        beta: f64,
        pair: &PreferencePair,
        traces: Option<&PairTraces>,
    ) -> Result<LossValue> {
        match *self {
            Method::Dpo => dpo_loss(policy, reference, beta, pair),
            Method::Tgdpo { alpha, clamp_floor } => {
                let w = TokenWeightSpec::tgdpo(alpha, clamp_floor, Side::Win)?;
                let l = TokenWeightSpec::tgdpo(alpha, clamp_floor, Side::Lose)?;
                tgdpo_loss(policy, reference, &w, &l, beta, pair, traces, 0.0)
            }
            Method::Simpo { gamma_margin } => simpo_loss(policy, beta, gamma_margin, pair),
            Method::Rdpo { alpha_len } => rdpo_loss(policy, reference, beta, alpha_len, pair),
            Method::D2po { gamma_decay } => d2po_loss(policy, reference, beta, gamma_decay, pair),
            Method::Tdpo { kl_scale } => tdpo_loss(policy, reference, beta, kl_scale, pair),
        }
    }

    /// Mean loss and gradient over a batch, reduced in batch order.
    pub fn batch_loss(
        &self,
        policy: &TabularPolicy,
        reference: &TabularPolicy,
        beta: f64,
        batch: &[(&PreferencePair, Option<&PairTraces>)],
    ) -> Result<LossValue> {
        if batch.is_empty() {
            return invalid("empty batch");
        }
        let mut loss = 0.0;
        let mut logit = 0.0;
        let mut grad = LogitGrad::default();
        for (pair, traces) in batch {
            let lv = self.loss(policy, reference, beta, pair, *traces)?;
            loss += lv.loss;
            logit += lv.logit;
            grad.axpy(&lv.grad, 1.0);
        }
        let n = batch.len() as f64;
        grad.scale(1.0 / n);
        Ok(LossValue { loss: loss / n, logit: logit / n, grad })
    }
}
