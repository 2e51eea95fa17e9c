//! Token-level rewards from a frozen DPO policy and the per-token weight
//! functions that shape the preference logit.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::data::{PreferencePair, TokenSeq};
use crate::error::{invalid, LabError, Result};
use crate::policy::{token_log_ratios, TabularPolicy};

/// Default lower bound applied to the affine weights.
pub const DEFAULT_CLAMP_FLOOR: f64 = 1e-3;

/// `r̂(s_t, a_t)` for every token of one response.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenRewardTrace {
    pub values: Vec<f64>,
    /// The β used to induce the rewards.
    pub source_beta: f64,
}

impl TokenRewardTrace {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// All-zero trace, e.g. for a θ̂ equal to the reference.
    pub fn zeros(len: usize, source_beta: f64) -> Self {
        Self { values: vec![0.0; len], source_beta }
    }
}

/// Reward traces for both responses of a pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairTraces {
    pub chosen: TokenRewardTrace,
    pub rejected: TokenRewardTrace,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    #[serde(rename = "w")]
    Win,
    #[serde(rename = "l")]
    Lose,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum WeightKind {
    Constant(f64),
    /// `1 ± α r̂`, clamped below at `clamp_floor`; `+` on the win side.
    TgdpoAffine {
        alpha: f64,
        clamp_floor: f64,
    },
    /// `1 / T`
    LengthNormalized,
    /// `γ^t`
    TemporalDecay {
        gamma: f64,
    },
}

/// Which weight function to apply to the tokens of one side of a pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TokenWeightSpec {
    kind: WeightKind,
    side: Side,
}

impl TokenWeightSpec {
    pub fn constant(c: f64, side: Side) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) {
            return invalid(format!("constant weight must be positive, got {c}"));
        }
        Ok(Self { kind: WeightKind::Constant(c), side })
    }

    /// `f ≡ 1`, which reduces the framework to DPO.
    pub fn unit(side: Side) -> Self {
        Self { kind: WeightKind::Constant(1.0), side }
    }

    /// The affine guidance weights. `alpha = 0` degenerates to `f ≡ 1`.
    pub fn tgdpo(alpha: f64, clamp_floor: f64, side: Side) -> Result<Self> {
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return invalid(format!("alpha must be finite and non-negative, got {alpha}"));
        }
        if !(clamp_floor > 0.0 && clamp_floor.is_finite()) {
            return invalid(format!("clamp floor must be positive, got {clamp_floor}"));
        }
        Ok(Self { kind: WeightKind::TgdpoAffine { alpha, clamp_floor }, side })
    }

    pub fn length_normalized(side: Side) -> Self {
        Self { kind: WeightKind::LengthNormalized, side }
    }

    pub fn temporal_decay(gamma: f64, side: Side) -> Result<Self> {
        if !(gamma > 0.0 && gamma <= 1.0) {
            return invalid(format!("decay gamma must lie in (0, 1], got {gamma}"));
        }
        Ok(Self { kind: WeightKind::TemporalDecay { gamma }, side })
    }

    pub fn kind(&self) -> WeightKind {
        self.kind
    }

    pub fn side(&self) -> Side {
        self.side
    }

    /// Whether the weight depends on `r̂`.
    pub fn requires_rewards(&self) -> bool {
        matches!(self.kind, WeightKind::TgdpoAffine { .. })
    }

    /// The weight before clamping.
    pub fn raw_weight(&self, r_hat: f64, t: usize, len: usize) -> f64 {
        debug_assert!(len >= 1 && t < len, "t = {t}, len = {len}");
        match self.kind {
            WeightKind::Constant(c) => c,
            WeightKind::TgdpoAffine { alpha, .. } => match self.side {
                Side::Win => 1.0 + alpha * r_hat,
                Side::Lose => 1.0 - alpha * r_hat,
            },
            WeightKind::LengthNormalized => 1.0 / len as f64,
            WeightKind::TemporalDecay { gamma } => gamma.powi(t as i32),
        }
    }

    /// The (strictly positive) weight of token `t` of a length-`len` response.
    pub fn weight(&self, r_hat: f64, t: usize, len: usize) -> f64 {
        let raw = self.raw_weight(r_hat, t, len);
        match self.kind {
            WeightKind::TgdpoAffine { clamp_floor, .. } => raw.max(clamp_floor),
            _ => raw,
        }
    }

    /// Every weight is at least this value.
    pub fn floor(&self, len: usize) -> f64 {
        match self.kind {
            WeightKind::Constant(c) => c,
            WeightKind::TgdpoAffine { clamp_floor, .. } => clamp_floor,
            WeightKind::LengthNormalized => 1.0 / len as f64,
            WeightKind::TemporalDecay { gamma } => gamma.powi(len.saturating_sub(1) as i32),
        }
    }
}

/// β, α and the reward-source β.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GuidanceConfig {
    pub beta: f64,
    pub alpha: f64,
    pub reward_beta: f64,
    pub clamp_floor: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self { beta: 0.1, alpha: 0.5, reward_beta: 0.1, clamp_floor: DEFAULT_CLAMP_FLOOR }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("beta", self.beta), ("reward_beta", self.reward_beta), ("clamp_floor", self.clamp_floor)] {
            if !(v > 0.0 && v.is_finite()) {
                return invalid(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return invalid(format!("alpha must be non-negative, got {}", self.alpha));
        }
        Ok(())
    }

    pub fn win_spec(&self) -> Result<TokenWeightSpec> {
        TokenWeightSpec::tgdpo(self.alpha, self.clamp_floor, Side::Win)
    }

    pub fn lose_spec(&self) -> Result<TokenWeightSpec> {
        TokenWeightSpec::tgdpo(self.alpha, self.clamp_floor, Side::Lose)
    }
}

/// `r̂_t = reward_beta · log(π_θ̂ / π_ref)` at each token of `response`.
pub fn dpo_token_rewards(
    theta_hat: &TabularPolicy,
    reference: &TabularPolicy,
    reward_beta: f64,
    prompt: &TokenSeq,
    response: &TokenSeq,
) -> Result<TokenRewardTrace> {
    if !theta_hat.is_frozen() {
        return Err(LabError::Frozen("token rewards must come from a frozen θ̂ (call .freeze())".into()));
    }
    if !(reward_beta > 0.0 && reward_beta.is_finite()) {
        return invalid(format!("reward_beta must be positive, got {reward_beta}"));
    }
    let ratios = token_log_ratios(theta_hat, reference, prompt, response)?;
    Ok(TokenRewardTrace { values: ratios.into_iter().map(|r| reward_beta * r).collect(), source_beta: reward_beta })
}

pub fn pair_traces(
    theta_hat: &TabularPolicy,
    reference: &TabularPolicy,
    reward_beta: f64,
    pair: &PreferencePair,
) -> Result<PairTraces> {
    Ok(PairTraces {
        chosen: dpo_token_rewards(theta_hat, reference, reward_beta, &pair.prompt, &pair.chosen)?,
        rejected: dpo_token_rewards(theta_hat, reference, reward_beta, &pair.prompt, &pair.rejected)?,
    })
}

/// Outcome of [`validate_positivity`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PositivityReport {
    /// Tokens whose unclamped weight fell below the clamp floor.
    pub n_clamped: usize,
    /// Tokens whose unclamped weight was ≤ 0.
    pub n_nonpositive: usize,
    /// Smallest unclamped weight seen; `None` for empty input.
    pub min_raw: Option<f64>,
}

/// Count how often clamping was needed to keep weights positive.
pub fn validate_positivity(spec: &TokenWeightSpec, traces: &[TokenRewardTrace]) -> PositivityReport {
    let mut report = PositivityReport { n_clamped: 0, n_nonpositive: 0, min_raw: None };
    for trace in traces {
        let len = trace.len();
        for (t, &r) in trace.values.iter().enumerate() {
            let raw = spec.raw_weight(r, t, len);
            if raw < spec.weight(r, t, len) {
                report.n_clamped += 1;
            }
            if raw <= 0.0 {
                report.n_nonpositive += 1;
            }
            report.min_raw = Some(report.min_raw.map_or(raw, |m: f64| m.min(raw)));
        }
    }
    report
}

#[derive(Serialize, Deserialize)]
struct TraceRecord {
    pair_index: usize,
    side: Side,
    rewards: Vec<f64>,
}

/// JSON Lines: `{"pair_index": i, "side": "w"|"l", "rewards": [...]}`.
pub fn write_traces_jsonl<W: Write>(traces: &[PairTraces], mut w: W) -> Result<()> {
    for (i, pt) in traces.iter().enumerate() {
        for (side, tr) in [(Side::Win, &pt.chosen), (Side::Lose, &pt.rejected)] {
            serde_json::to_writer(&mut w, &TraceRecord { pair_index: i, side, rewards: tr.values.clone() })?;
            w.write_all(b"\n")?;
        }
    }
    Ok(())
}

pub fn read_traces_jsonl<R: BufRead>(r: R, source_beta: f64) -> Result<Vec<PairTraces>> {
    let mut chosen: Vec<Option<TokenRewardTrace>> = Vec::new();
    let mut rejected: Vec<Option<TokenRewardTrace>> = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TraceRecord = serde_json::from_str(&line)?;
        let slot = match rec.side {
            Side::Win => &mut chosen,
            Side::Lose => &mut rejected,
        };
        if slot.len() <= rec.pair_index {
            slot.resize(rec.pair_index + 1, None);
        }
        slot[rec.pair_index] = Some(TokenRewardTrace { values: rec.rewards, source_beta });
    }
    if chosen.len() != rejected.len() {
        return invalid("trace file has unmatched sides");
    }
    chosen
        .into_iter()
        .zip(rejected)
        .enumerate()
        .map(|(i, (c, r))| match (c, r) {
            (Some(chosen), Some(rejected)) => Ok(PairTraces { chosen, rejected }),
            _ => invalid(format!("pair {i} is missing a side")),
        })
        .collect()
}
