//! Token alphabet, sequences, preference pairs and the synthetic corpora.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, LabError, Result};
use crate::rng::{substream, LabRng};

/// Separator used when a context is rendered as a single string (U+241F).
pub const CONTEXT_SEPARATOR: char = '\u{241F}';

/// Index of a symbol in a [`Vocab`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Ordered set of single-character token symbols.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    symbols: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    /// Build a vocabulary; ids follow input order.
    pub fn new<S: AsRef<str>>(symbols: &[S]) -> Result<Self> {
        if symbols.is_empty() {
            return invalid("vocabulary must contain at least one symbol");
        }
        let mut index = HashMap::with_capacity(symbols.len());
        let mut owned = Vec::with_capacity(symbols.len());
        for (i, s) in symbols.iter().enumerate() {
            let s = s.as_ref();
            let mut chars = s.chars();
            let (Some(c), None) = (chars.next(), chars.next()) else {
                return invalid(format!("symbol {s:?} must be exactly one character"));
            };
            if c.is_control() || c.is_whitespace() || c == CONTEXT_SEPARATOR {
                return invalid(format!("symbol {s:?} is not a printable token"));
            }
            if index.insert(s.to_string(), TokenId(i as u32)).is_some() {
                return invalid(format!("duplicate symbol {s}"));
            }
            owned.push(s.to_string());
        }
        Ok(Self { symbols: owned, index })
    }

    /// One symbol per character of `chars`, e.g. `"01234567"`.
    pub fn from_chars(chars: &str) -> Result<Self> {
        let symbols: Vec<String> = chars.chars().map(String::from).collect();
        Self::new(&symbols)
    }

    /// `"0"`, `"1"`, ... up to `n - 1` (n ≤ 10).
    pub fn digits(n: usize) -> Result<Self> {
        if n == 0 || n > 10 {
            return invalid(format!("digit vocabulary size must be in 1..=10, got {n}"));
        }
        Self::from_chars(&"0123456789"[..n])
    }

    pub fn size(&self) -> usize {
        self.symbols.len()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn id(&self, symbol: &str) -> Option<TokenId> {
        self.index.get(symbol).copied()
    }

    pub fn symbol(&self, id: TokenId) -> Option<&str> {
        self.symbols.get(id.index()).map(String::as_str)
    }

    pub fn contains(&self, id: TokenId) -> bool {
        id.index() < self.symbols.len()
    }

    pub fn check(&self, id: TokenId) -> Result<()> {
        if self.contains(id) {
            Ok(())
        } else {
            invalid(format!("token id {id} out of range for vocabulary of size {}", self.size()))
        }
    }

    pub fn encode(&self, symbols: &[String]) -> Result<TokenSeq> {
        symbols
            .iter()
            .map(|s| self.id(s).ok_or_else(|| LabError::Validation(format!("unknown symbol {s:?}"))))
            .collect::<Result<Vec<_>>>()
            .map(TokenSeq::new)
    }

    pub fn decode(&self, seq: &TokenSeq) -> Vec<String> {
        seq.iter().map(|t| self.symbols[t.index()].clone()).collect()
    }

    /// Join symbols with [`CONTEXT_SEPARATOR`].
    pub fn render(&self, tokens: &[TokenId]) -> String {
        let mut out = String::new();
        for (i, t) in tokens.iter().enumerate() {
            if i > 0 {
                out.push(CONTEXT_SEPARATOR);
            }
            out.push_str(&self.symbols[t.index()]);
        }
        out
    }

    /// Inverse of [`Vocab::render`].
    pub fn parse_rendered(&self, s: &str) -> Result<Vec<TokenId>> {
        if s.is_empty() {
            return Ok(Vec::new());
        }
        s.split(CONTEXT_SEPARATOR)
            .map(|sym| {
                self.id(sym).ok_or_else(|| LabError::Validation(format!("unknown symbol {sym:?} in context {s:?}")))
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.symbols).expect("string list serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let symbols: Vec<String> = serde_json::from_str(s)?;
        Self::new(&symbols)
    }
}

/// Build a vocabulary with stable index assignment in input order.
pub fn build_vocab<S: AsRef<str>>(symbols: &[S]) -> Result<Vocab> {
    Vocab::new(symbols)
}

/// A (possibly empty) sequence of tokens.
#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq(Vec<TokenId>);

impl TokenSeq {
    pub fn new(tokens: Vec<TokenId>) -> Self {
        Self(tokens)
    }

    pub fn from_ids(ids: &[u32]) -> Self {
        Self(ids.iter().map(|&i| TokenId(i)).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.0
    }

    pub fn iter(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.0.iter().copied()
    }

    pub fn push(&mut self, t: TokenId) {
        self.0.push(t);
    }

    /// `[self, other]`
    pub fn concat(&self, other: &[TokenId]) -> Vec<TokenId> {
        let mut v = Vec::with_capacity(self.0.len() + other.len());
        v.extend_from_slice(&self.0);
        v.extend_from_slice(other);
        v
    }
}

impl From<Vec<TokenId>> for TokenSeq {
    fn from(v: Vec<TokenId>) -> Self {
        Self(v)
    }
}

/// `(x, y_w, y_l)`: prompt, preferred response, dispreferred response.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt: TokenSeq,
    pub chosen: TokenSeq,
    pub rejected: TokenSeq,
}

impl PreferencePair {
    pub fn new(prompt: TokenSeq, chosen: TokenSeq, rejected: TokenSeq) -> Result<Self> {
        if chosen.is_empty() || rejected.is_empty() {
            return invalid("chosen and rejected responses must be non-empty");
        }
        Ok(Self { prompt, chosen, rejected })
    }

    pub fn check_vocab(&self, vocab: &Vocab) -> Result<()> {
        for t in self.prompt.iter().chain(self.chosen.iter()).chain(self.rejected.iter()) {
            vocab.check(t)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreferenceDataset {
    pub pairs: Vec<PreferencePair>,
    pub seed: u64,
    pub task_name: String,
}

impl PreferenceDataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// JSON Lines, one `{"prompt": [...], "chosen": [...], "rejected": [...]}` per pair.
    pub fn write_jsonl<W: Write>(&self, vocab: &Vocab, mut w: W) -> Result<()> {
        for p in &self.pairs {
            let line = PairRecord {
                prompt: vocab.decode(&p.prompt),
                chosen: vocab.decode(&p.chosen),
                rejected: vocab.decode(&p.rejected),
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self, vocab: &Vocab) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(vocab, &mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("json is utf-8")
    }

    pub fn read_jsonl<R: BufRead>(vocab: &Vocab, r: R, task_name: &str, seed: u64) -> Result<Self> {
        let mut pairs = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: PairRecord =
                serde_json::from_str(&line).map_err(|e| LabError::Validation(format!("line {}: {e}", lineno + 1)))?;
            pairs.push(PreferencePair::new(
                vocab.encode(&rec.prompt)?,
                vocab.encode(&rec.chosen)?,
                vocab.encode(&rec.rejected)?,
            )?);
        }
        Ok(Self { pairs, seed, task_name: task_name.to_string() })
    }

    /// Read `pairs.jsonl` and `vocab.json` from a directory.
    pub fn load_dir(dir: &Path) -> Result<(Vocab, Self)> {
        let vocab = Vocab::from_json(&std::fs::read_to_string(dir.join("vocab.json"))?)?;
        let f = std::fs::File::open(dir.join("pairs.jsonl"))?;
        let ds = Self::read_jsonl(&vocab, std::io::BufReader::new(f), "loaded", 0)?;
        Ok((vocab, ds))
    }
}

#[derive(Serialize, Deserialize)]
struct PairRecord {
    prompt: Vec<String>,
    chosen: Vec<String>,
    rejected: Vec<String>,
}

pub const TASK_NAMES: [&str; 3] = ["sorted", "contains-target", "majority-token"];

/// The synthetic preference tasks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SyntheticTask {
    /// Chosen responses are nondecreasing in token id.
    Sorted,
    /// Chosen responses contain `target`, rejected ones do not.
    ContainsTarget { target: String },
    /// More than half of a chosen response is `target`.
    MajorityToken { target: String },
}

impl SyntheticTask {
    /// Parse a task name. `target` defaults to the first vocabulary symbol.
    pub fn parse(name: &str, target: Option<&str>, vocab: &Vocab) -> Result<Self> {
        let target = target.unwrap_or(&vocab.symbols()[0]).to_string();
        match name {
            "sorted" => Ok(Self::Sorted),
            "contains-target" => Ok(Self::ContainsTarget { target }),
            "majority-token" => Ok(Self::MajorityToken { target }),
            other => invalid(format!("unknown task {other:?}; valid tasks: {}", TASK_NAMES.join(", "))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Sorted => "sorted",
            Self::ContainsTarget { .. } => "contains-target",
            Self::MajorityToken { .. } => "majority-token",
        }
    }

    fn target_id(&self, vocab: &Vocab) -> Result<Option<TokenId>> {
        match self {
            Self::Sorted => Ok(None),
            Self::ContainsTarget { target } | Self::MajorityToken { target } => vocab
                .id(target)
                .map(Some)
                .ok_or_else(|| LabError::Validation(format!("target token {target:?} is not in the vocabulary"))),
        }
    }

    /// Whether `response` satisfies the task predicate.
    pub fn satisfies(&self, vocab: &Vocab, response: &[TokenId]) -> Result<bool> {
        let target = self.target_id(vocab)?;
        Ok(predicate(self, target, response))
    }
}

fn predicate(task: &SyntheticTask, target: Option<TokenId>, r: &[TokenId]) -> bool {
    match task {
        SyntheticTask::Sorted => r.windows(2).all(|w| w[0] <= w[1]),
        SyntheticTask::ContainsTarget { .. } => r.contains(&target.expect("target resolved")),
        SyntheticTask::MajorityToken { .. } => {
            let t = target.expect("target resolved");
            2 * r.iter().filter(|&&x| x == t).count() > r.len()
        }
    }
}

/// Knobs of the synthetic generator.
#[derive(Clone, Debug)]
pub struct GeneratorConfig {
    pub task: SyntheticTask,
    pub n_pairs: usize,
    pub max_len: usize,
    pub prompt_len: usize,
}

/// Generate a dataset for a named task with the default target and a
/// one-token prompt.
pub fn generate_synthetic_dataset(
    task: &str,
    vocab: &Vocab,
    n_pairs: usize,
    max_len: usize,
    seed: u64,
) -> Result<PreferenceDataset> {
    let cfg = GeneratorConfig { task: SyntheticTask::parse(task, None, vocab)?, n_pairs, max_len, prompt_len: 1 };
    generate(&cfg, vocab, seed)
}

/// Generate a dataset; a pure function of `(cfg, vocab, seed)`.
pub fn generate(cfg: &GeneratorConfig, vocab: &Vocab, seed: u64) -> Result<PreferenceDataset> {
    if cfg.n_pairs == 0 {
        return invalid("n_pairs must be positive");
    }
    if cfg.max_len == 0 {
        return invalid("max_len must be positive");
    }
    if vocab.size() < 2 {
        return invalid("synthetic tasks need at least two symbols");
    }
    if cfg.task == SyntheticTask::Sorted && cfg.max_len < 2 {
        return invalid("the sorted task needs max_len >= 2 so a rejected response can be out of order");
    }
    let target = cfg.task.target_id(vocab)?;
    let mut rng = substream(seed, "data");
    let v = vocab.size() as u32;
    let mut pairs = Vec::with_capacity(cfg.n_pairs);
    for _ in 0..cfg.n_pairs {
        let prompt: Vec<TokenId> = (0..cfg.prompt_len).map(|_| TokenId(rng.random_range(0..v))).collect();
        let len = rng.random_range(1..=cfg.max_len);
        let (chosen, rejected) = match &cfg.task {
            SyntheticTask::Sorted => sorted_pair(&mut rng, v, len, cfg.max_len),
            SyntheticTask::ContainsTarget { .. } => contains_pair(&mut rng, v, len, target.unwrap()),
            SyntheticTask::MajorityToken { .. } => majority_pair(&mut rng, v, len, target.unwrap()),
        };
        debug_assert!(predicate(&cfg.task, target, &chosen));
        debug_assert!(!predicate(&cfg.task, target, &rejected));
        pairs.push(PreferencePair::new(prompt.into(), chosen.into(), rejected.into())?);
    }
    Ok(PreferenceDataset { pairs, seed, task_name: cfg.task.name().to_string() })
}

fn other_token(rng: &mut LabRng, v: u32, not: TokenId) -> TokenId {
    let mut t = rng.random_range(0..v - 1);
    if t >= not.0 {
        t += 1;
    }
    TokenId(t)
}

fn sorted_pair(rng: &mut LabRng, v: u32, len: usize, max_len: usize) -> (Vec<TokenId>, Vec<TokenId>) {
    let mut chosen: Vec<TokenId> = (0..len).map(|_| TokenId(rng.random_range(0..v))).collect();
    chosen.sort();
    let mut rejected = chosen.clone();
    let is_sorted = |r: &[TokenId]| r.windows(2).all(|w| w[0] <= w[1]);
    let mut attempts = 0;
    while is_sorted(&rejected) {
        attempts += 1;
        if attempts > 10_000 {
            rejected = vec![TokenId(v - 1), TokenId(0)];
            break;
        }
        let n = rejected.len();
        match rng.random_range(0..4u8) {
            0 if n >= 2 => {
                let i = rng.random_range(0..n);
                let j = rng.random_range(0..n);
                rejected.swap(i, j);
            }
            1 => {
                let i = rng.random_range(0..n);
                rejected[i] = TokenId(rng.random_range(0..v));
            }
            2 if n < max_len => {
                let i = rng.random_range(0..=n);
                rejected.insert(i, TokenId(rng.random_range(0..v)));
            }
            3 if n > 2 => {
                let i = rng.random_range(0..n);
                rejected.remove(i);
            }
            _ if n < 2 => {
                rejected.push(TokenId(rng.random_range(0..v)));
            }
            _ => {}
        }
    }
    (chosen, rejected)
}

fn contains_pair(rng: &mut LabRng, v: u32, len: usize, target: TokenId) -> (Vec<TokenId>, Vec<TokenId>) {
    let mut chosen: Vec<TokenId> = (0..len).map(|_| TokenId(rng.random_range(0..v))).collect();
    let pos = rng.random_range(0..len);
    chosen[pos] = target;
    let rejected = chosen.iter().map(|&t| if t == target { other_token(rng, v, target) } else { t }).collect();
    (chosen, rejected)
}

fn majority_pair(rng: &mut LabRng, v: u32, len: usize, target: TokenId) -> (Vec<TokenId>, Vec<TokenId>) {
    let k = rng.random_range(len / 2 + 1..=len);
    let mut positions: Vec<usize> = (0..len).collect();
    positions.shuffle(rng);
    let mut chosen = vec![target; len];
    for &p in &positions[k..] {
        chosen[p] = other_token(rng, v, target);
    }
    let mut rejected = chosen.clone();
    let mut targets: Vec<usize> = positions[..k].to_vec();
    targets.shuffle(rng);
    let keep = len / 2;
    for &p in &targets[keep.min(k)..] {
        rejected[p] = other_token(rng, v, target);
    }
    (chosen, rejected)
}

/// Split into `(train, eval)`; train gets `max(1, floor(train_frac * n))`
/// pairs. Both parts keep the original relative order.
pub fn split_dataset(
    ds: &PreferenceDataset,
    train_frac: f64,
    seed: u64,
) -> Result<(PreferenceDataset, PreferenceDataset)> {
    if ds.is_empty() {
        return invalid("cannot split an empty dataset");
    }
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return invalid(format!("train_frac must lie in (0, 1), got {train_frac}"));
    }
    let n = ds.len();
    let n_train = ((train_frac * n as f64).floor() as usize).max(1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut substream(seed, "split"));
    let mut train_idx = idx[..n_train].to_vec();
    let mut eval_idx = idx[n_train..].to_vec();
    train_idx.sort_unstable();
    eval_idx.sort_unstable();
    let pick = |ids: &[usize]| PreferenceDataset {
        pairs: ids.iter().map(|&i| ds.pairs[i].clone()).collect(),
        seed: ds.seed,
        task_name: ds.task_name.clone(),
    };
    Ok((pick(&train_idx), pick(&eval_idx)))
}
