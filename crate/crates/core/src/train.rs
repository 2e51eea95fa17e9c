//! Deterministic gradient training of tabular policies on preference pairs,
//! the two-stage DPO → TGDPO pipeline, and run metrics.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{PreferenceDataset, PreferencePair, TokenSeq};
use crate::error::{invalid, LabError, Result};
use crate::losses::Method;
use crate::policy::{ContextKey, ContextOrder, LogitGrad, TabularPolicy};
use crate::rewards::{pair_traces, GuidanceConfig, PairTraces};
use crate::rng::substream;

/// Window of the moving average used by [`steps_to_converge`].
pub const CONVERGENCE_WINDOW: usize = 5;
/// Loss level that counts as converged.
pub const CONVERGENCE_LOSS: f64 = 0.3;

/// Which objective to train, with any method-specific parameter. TGDPO takes
/// `α` and the clamp floor from [`GuidanceConfig`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MethodConfig {
    Dpo,
    Tgdpo,
    Simpo { gamma_margin: f64 },
    Rdpo { alpha_len: f64 },
    D2po { gamma_decay: f64 },
    Tdpo { kl_scale: f64 },
}

impl MethodConfig {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Dpo => "dpo",
            Self::Tgdpo => "tgdpo",
            Self::Simpo { .. } => "simpo",
            Self::Rdpo { .. } => "rdpo",
            Self::D2po { .. } => "d2po",
            Self::Tdpo { .. } => "tdpo",
        }
    }

    /// Parse a method name, filling in default parameters.
    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "dpo" => Self::Dpo,
            "tgdpo" => Self::Tgdpo,
            "simpo" => Self::Simpo { gamma_margin: 0.5 },
            "rdpo" => Self::Rdpo { alpha_len: 0.1 },
            "d2po" => Self::D2po { gamma_decay: 0.98 },
            "tdpo" => Self::Tdpo { kl_scale: 0.01 },
            other => return invalid(format!("unknown method {other:?}; valid methods: {}", Method::NAMES.join(", "))),
        })
    }
}

impl fmt::Display for MethodConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Optimizer {
    Sgd,
    Adam { b1: f64, b2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Self::Adam { b1: 0.9, b2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub method: MethodConfig,
    pub guidance: GuidanceConfig,
    pub lr: f64,
    pub steps: usize,
    /// `None` trains on the full batch.
    pub batch_size: Option<usize>,
    pub seed: u64,
    pub eval_every: usize,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: MethodConfig::Dpo,
            guidance: GuidanceConfig::default(),
            lr: 0.05,
            steps: 300,
            batch_size: None,
            seed: 0,
            eval_every: 10,
            optimizer: Optimizer::adam(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.guidance.validate().map_err(|e| LabError::Config(e.to_string()))?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(LabError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.eval_every == 0 {
            return Err(LabError::Config("eval_every must be positive".into()));
        }
        if self.batch_size == Some(0) {
            return Err(LabError::Config("batch_size must be positive".into()));
        }
        if let Optimizer::Adam { b1, b2, eps } = self.optimizer {
            if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2) && eps > 0.0) {
                return Err(LabError::Config(format!("invalid Adam parameters b1={b1} b2={b2} eps={eps}")));
            }
        }
        match self.method {
            MethodConfig::D2po { gamma_decay } if !(gamma_decay > 0.0 && gamma_decay <= 1.0) => {
                Err(LabError::Config(format!("d2po gamma must lie in (0, 1], got {gamma_decay}")))
            }
            MethodConfig::Tdpo { kl_scale } if !(kl_scale >= 0.0 && kl_scale.is_finite()) => {
                Err(LabError::Config(format!("tdpo kl_scale must be non-negative, got {kl_scale}")))
            }
            _ => Ok(()),
        }
    }

    /// The per-instance loss this config trains.
    pub fn loss(&self) -> Method {
        match self.method {
            MethodConfig::Dpo => Method::Dpo,
            MethodConfig::Tgdpo => Method::Tgdpo { alpha: self.guidance.alpha, clamp_floor: self.guidance.clamp_floor },
            MethodConfig::Simpo { gamma_margin } => Method::Simpo { gamma_margin },
            MethodConfig::Rdpo { alpha_len } => Method::Rdpo { alpha_len },
            MethodConfig::D2po { gamma_decay } => Method::D2po { gamma_decay },
            MethodConfig::Tdpo { kl_scale } => Method::Tdpo { kl_scale },
        }
    }
}

/// Metrics at one recorded step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub train_loss: f64,
    pub eval_loss: f64,
    pub implicit_reward_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    /// Recorded at step 0, every `eval_every` steps, and after the last step.
    pub steps: Vec<StepRecord>,
    /// Batch loss at every optimizer step, before the update.
    pub loss_history: Vec<f64>,
    pub final_policy: TabularPolicy,
    pub config: TrainConfig,
}

impl RunRecord {
    pub fn final_accuracy(&self) -> f64 {
        self.steps.last().map_or(f64::NAN, |r| r.implicit_reward_accuracy)
    }

    pub fn steps_to_converge(&self) -> Option<usize> {
        steps_to_converge(&self.loss_history)
    }

    pub fn summary(&self) -> RunSummary {
        RunSummary {
            method: self.config.method.name().to_string(),
            seed: self.config.seed,
            final_accuracy: self.final_accuracy(),
            steps_to_converge: self.steps_to_converge(),
        }
    }
}

/// One run, as written to `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: String,
    pub seed: u64,
    pub final_accuracy: f64,
    pub steps_to_converge: Option<usize>,
}

/// First step at which the trailing `CONVERGENCE_WINDOW`-step mean of the
/// loss drops below `CONVERGENCE_LOSS`.
pub fn steps_to_converge(loss_history: &[f64]) -> Option<usize> {
    loss_history
        .windows(CONVERGENCE_WINDOW)
        .position(|w| w.iter().sum::<f64>() / (CONVERGENCE_WINDOW as f64) < CONVERGENCE_LOSS)
        .map(|i| i + CONVERGENCE_WINDOW - 1)
}

/// Fraction of pairs whose implicit reward ranks the chosen response first;
/// ties count one half.
pub fn implicit_reward_accuracy(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    beta: f64,
    pairs: &[PreferencePair],
) -> Result<f64> {
    if pairs.is_empty() {
        return invalid("implicit reward accuracy needs at least one pair");
    }
    let ratio = |x: &TokenSeq, y: &TokenSeq| -> Result<f64> {
        Ok(policy.sequence_log_prob(x, y)? - reference.sequence_log_prob(x, y)?)
    };
    let mut score = 0.0;
    for p in pairs {
        let rw = beta * ratio(&p.prompt, &p.chosen)?;
        let rl = beta * ratio(&p.prompt, &p.rejected)?;
        score += if rw > rl {
            1.0
        } else if rw == rl {
            0.5
        } else {
            0.0
        };
    }
    Ok(score / pairs.len() as f64)
}

/// A frozen reference fitted by maximum likelihood on both responses of
/// every pair.
pub fn fit_reference(
    ds: &PreferenceDataset,
    vocab: &crate::data::Vocab,
    order: ContextOrder,
    steps: usize,
    lr: f64,
) -> Result<TabularPolicy> {
    let corpus: Vec<(TokenSeq, TokenSeq)> = ds
        .pairs
        .iter()
        .flat_map(|p| [(p.prompt.clone(), p.chosen.clone()), (p.prompt.clone(), p.rejected.clone())])
        .collect();
    let fit = TabularPolicy::uniform(vocab.clone(), order).mle_fit(&corpus, steps, lr)?;
    Ok(fit.policy.freeze())
}

struct AdamState {
    m: BTreeMap<ContextKey, Vec<f64>>,
    v: BTreeMap<ContextKey, Vec<f64>>,
    t: i32,
}

fn adam_step(
    policy: &mut TabularPolicy,
    state: &mut AdamState,
    grad: &LogitGrad,
    lr: f64,
    (b1, b2, eps): (f64, f64, f64),
) -> Result<()> {
    state.t += 1;
    let n = policy.vocab().size();
    for (k, _) in grad.iter() {
        state.m.entry(k.clone()).or_insert_with(|| vec![0.0; n]);
        state.v.entry(k.clone()).or_insert_with(|| vec![0.0; n]);
    }
    let c1 = 1.0 - b1.powi(state.t);
    let c2 = 1.0 - b2.powi(state.t);
    for (k, m) in state.m.iter_mut() {
        let v = state.v.get_mut(k).expect("moments share keys");
        let g = grad.get(k);
        let row = policy.row_mut(k)?;
        for i in 0..n {
            let gi = g.map_or(0.0, |g| g[i]);
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            row[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
        }
    }
    Ok(())
}

fn traces_for(
    theta_hat: &TabularPolicy,
    reference: &TabularPolicy,
    reward_beta: f64,
    ds: &PreferenceDataset,
) -> Result<Vec<PairTraces>> {
    ds.pairs.iter().map(|p| pair_traces(theta_hat, reference, reward_beta, p)).collect()
}

fn mean_loss(
    method: &Method,
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    beta: f64,
    ds: &PreferenceDataset,
    traces: Option<&[PairTraces]>,
) -> Result<f64> {
    let batch: Vec<_> = ds.pairs.iter().enumerate().map(|(i, p)| (p, traces.map(|t| &t[i]))).collect();
    Ok(method.batch_loss(policy, reference, beta, &batch)?.loss)
}

/// Train from a copy of `reference`. `theta_hat` supplies the token rewards
/// and is required exactly when the method is TGDPO.
pub fn train(
    config: &TrainConfig,
    train_set: &PreferenceDataset,
    eval_set: &PreferenceDataset,
    reference: &TabularPolicy,
    theta_hat: Option<&TabularPolicy>,
) -> Result<RunRecord> {
    config.validate()?;
    if train_set.is_empty() || eval_set.is_empty() {
        return invalid("training and evaluation sets must be non-empty");
    }
    for p in train_set.pairs.iter().chain(&eval_set.pairs) {
        p.check_vocab(reference.vocab())?;
    }
    let method = config.loss();
    let beta = config.guidance.beta;
    let (train_traces, eval_traces) = match (method.needs_traces(), theta_hat) {
        (true, Some(th)) => {
            let rb = config.guidance.reward_beta;
            (Some(traces_for(th, reference, rb, train_set)?), Some(traces_for(th, reference, rb, eval_set)?))
        }
        (true, None) => return Err(LabError::Config("tgdpo needs a frozen θ̂ for token rewards".into())),
        (false, Some(_)) => {
            return Err(LabError::Config(format!("{} does not use θ̂; pass it only for tgdpo", config.method)))
        }
        (false, None) => (None, None),
    };

    let mut policy = reference.thawed();
    let n = train_set.len();
    let batch_size = config.batch_size.unwrap_or(n).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffle = substream(config.seed, "shuffle");
    let mut cursor = n;
    let mut adam = AdamState { m: BTreeMap::new(), v: BTreeMap::new(), t: 0 };

    let record = |policy: &TabularPolicy, step: usize| -> Result<StepRecord> {
        Ok(StepRecord {
            step,
            train_loss: mean_loss(&method, policy, reference, beta, train_set, train_traces.as_deref())?,
            eval_loss: mean_loss(&method, policy, reference, beta, eval_set, eval_traces.as_deref())?,
            implicit_reward_accuracy: implicit_reward_accuracy(policy, reference, beta, &eval_set.pairs)?,
        })
    };
    let mut steps = vec![record(&policy, 0)?];
    let mut loss_history = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        let idx: Vec<usize> = if batch_size == n {
            order.clone()
        } else {
            if cursor + batch_size > n {
                order.shuffle(&mut shuffle);
                cursor = 0;
            }
            cursor += batch_size;
            order[cursor - batch_size..cursor].to_vec()
        };
        let batch: Vec<_> = idx.iter().map(|&i| (&train_set.pairs[i], train_traces.as_ref().map(|t| &t[i]))).collect();
        let lv = method.batch_loss(&policy, reference, beta, &batch)?;
        if !lv.loss.is_finite() {
            return Err(LabError::Diverged { step, loss: lv.loss });
        }
        loss_history.push(lv.loss);
        match config.optimizer {
            Optimizer::Sgd => policy.apply(&lv.grad, -config.lr)?,
            Optimizer::Adam { b1, b2, eps } => adam_step(&mut policy, &mut adam, &lv.grad, config.lr, (b1, b2, eps))?,
        }
        let done = step + 1;
        if done % config.eval_every == 0 || done == config.steps {
            let r = record(&policy, done)?;
            if !(r.train_loss.is_finite() && r.eval_loss.is_finite()) {
                return Err(LabError::Diverged { step: done, loss: r.train_loss });
            }
            steps.push(r);
        }
    }
    Ok(RunRecord { steps, loss_history, final_policy: policy, config: config.clone() })
}

/// Stage 1 trains DPO with `β = reward_beta` and freezes the result as θ̂;
/// stage 2 trains TGDPO with rewards from θ̂.
pub fn run_two_stage_pipeline(
    config: &TrainConfig,
    train_set: &PreferenceDataset,
    eval_set: &PreferenceDataset,
    reference: &TabularPolicy,
) -> Result<(RunRecord, RunRecord)> {
    if config.method != MethodConfig::Tgdpo {
        return Err(LabError::Config("the two-stage pipeline trains tgdpo in stage 2".into()));
    }
    let stage1_cfg = TrainConfig {
        method: MethodConfig::Dpo,
        guidance: GuidanceConfig { beta: config.guidance.reward_beta, ..config.guidance },
        ..config.clone()
    };
    let stage1 = train(&stage1_cfg, train_set, eval_set, reference, None)?;
    let theta_hat = stage1.final_policy.clone().freeze();
    let stage2 = train(config, train_set, eval_set, reference, Some(&theta_hat))?;
    Ok((stage1, stage2))
}

pub const CURVES_HEADER: &str = "step,train_loss,eval_loss,implicit_reward_accuracy";

pub fn write_curves<W: Write>(record: &RunRecord, mut w: W) -> Result<()> {
    if record.steps.is_empty() {
        return invalid("run record has no steps");
    }
    writeln!(w, "{CURVES_HEADER}")?;
    for r in &record.steps {
        writeln!(w, "{},{},{},{}", r.step, r.train_loss, r.eval_loss, r.implicit_reward_accuracy)?;
    }
    Ok(())
}

/// Write the recorded metrics as CSV.
pub fn export_curves(record: &RunRecord, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_curves(record, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_curves<R: BufRead>(r: R) -> Result<Vec<StepRecord>> {
    let mut lines = r.lines();
    if lines.next().transpose()?.as_deref() != Some(CURVES_HEADER) {
        return invalid("curves file is missing its header");
    }
    let mut out = Vec::new();
    for line in lines {
        let line = line?;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return invalid(format!("malformed curves row {line:?}"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| LabError::Validation(format!("{s:?}: {e}")));
        out.push(StepRecord {
            step: f[0].parse().map_err(|e| LabError::Validation(format!("{:?}: {e}", f[0])))?,
            train_loss: num(f[1])?,
            eval_loss: num(f[2])?,
            implicit_reward_accuracy: num(f[3])?,
        });
    }
    Ok(out)
}
