//! Character vocabulary, synthetic preference tasks and the pair dataset.
//!
//! Token ids are dense: alphabet characters take `0..A` in alphabet order,
//! followed by the separator and end-of-sequence specials. A full training
//! sequence is laid out as `[prompt][SEP][response][EOS]`.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, Stream};

pub type TokenId = u32;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid vocabulary: {0}")]
    BadVocab(String),
    #[error("invalid task: {0}")]
    BadTask(String),
    #[error("character {ch:?} is not in the vocabulary")]
    OutOfVocab { ch: char },
    #[error("token id {0} cannot be rendered as text")]
    NotText(TokenId),
    #[error("response has {len} tokens, more than the maximum of {max}")]
    Length { len: usize, max: usize },
    #[error("empty response")]
    EmptyResponse,
    #[error("line {line}: parse error: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: character {ch:?} is not in the vocabulary")]
    LineVocab { line: usize, ch: char },
    #[error("line {line}: {msg}")]
    Invariant { line: usize, msg: String },
    #[error("could not draw a tie-free pair after {0} attempts")]
    TieExhausted(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    symbols: Vec<char>,
}

impl Vocab {
    pub fn new(alphabet: &str) -> Result<Self> {
        let symbols: Vec<char> = alphabet.chars().collect();
        if symbols.is_empty() {
            return Err(CorpusError::BadVocab("alphabet is empty".into()));
        }
        let mut seen = HashSet::new();
        for &c in &symbols {
            if !seen.insert(c) {
                return Err(CorpusError::BadVocab(format!("duplicate symbol {c:?}")));
            }
        }
        Ok(Self { symbols })
    }

    /// Alphabet characters in id order.
    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn alphabet(&self) -> String {
        self.symbols.iter().collect()
    }

    pub fn num_symbols(&self) -> usize {
        self.symbols.len()
    }

    pub fn len(&self) -> usize {
        self.symbols.len() + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn sep_id(&self) -> TokenId {
        self.symbols.len() as TokenId
    }

    pub fn eos_id(&self) -> TokenId {
        self.symbols.len() as TokenId + 1
    }

    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        text.chars()
            .map(|ch| {
                self.symbols
                    .iter()
                    .position(|&s| s == ch)
                    .map(|i| i as TokenId)
                    .ok_or(CorpusError::OutOfVocab { ch })
            })
            .collect()
    }

    /// Renders alphabet tokens; specials have no text form.
    pub fn decode(&self, tokens: &[TokenId]) -> Result<String> {
        tokens
            .iter()
            .map(|&t| self.symbols.get(t as usize).copied().ok_or(CorpusError::NotText(t)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// Several fixed target strings, all valid for every prompt.
    Modes,
    /// One target per prompt: the prompt's distinct characters in order.
    UniqueAnswer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoreParams {
    pub length_penalty: f64,
}

impl Default for ScoreParams {
    fn default() -> Self {
        Self { length_penalty: 0.1 }
    }
}

fn default_max_response_len() -> usize {
    12
}

/// Task file contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub alphabet: String,
    #[serde(default)]
    pub modes: Vec<String>,
    pub prompt_len: usize,
    #[serde(default = "default_max_response_len")]
    pub max_response_len: usize,
    #[serde(default)]
    pub score_params: ScoreParams,
    #[serde(default)]
    pub seed: u64,
}

/// A validated [`TaskSpec`] with its vocabulary and encoded modes.
#[derive(Debug, Clone)]
pub struct Task {
    spec: TaskSpec,
    vocab: Vocab,
    modes: Vec<Vec<TokenId>>,
}

impl Task {
    pub fn new(spec: TaskSpec) -> Result<Self> {
        let vocab = Vocab::new(&spec.alphabet)?;
        let bad = |msg: String| Err(CorpusError::BadTask(msg));
        if spec.max_response_len == 0 {
            return bad("max_response_len must be at least 1".into());
        }
        if spec.prompt_len == 0 {
            return bad("prompt_len must be at least 1".into());
        }
        if !(spec.score_params.length_penalty >= 0.0) {
            return bad("length_penalty must be nonnegative".into());
        }
        let mut modes = Vec::with_capacity(spec.modes.len());
        if spec.kind == TaskKind::Modes {
            if spec.modes.len() < 4 {
                return bad(format!("need at least 4 modes, got {}", spec.modes.len()));
            }
            let mut seen = HashSet::new();
            for m in &spec.modes {
                if m.is_empty() {
                    return bad("modes must be nonempty".into());
                }
                if !seen.insert(m.as_str()) {
                    return bad(format!("duplicate mode {m:?}"));
                }
                let toks = vocab.encode(m)?;
                if toks.len() > spec.max_response_len {
                    return bad(format!("mode {m:?} is longer than max_response_len"));
                }
                modes.push(toks);
            }
        }
        Ok(Self { spec, vocab, modes })
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn kind(&self) -> TaskKind {
        self.spec.kind
    }

    pub fn max_response_len(&self) -> usize {
        self.spec.max_response_len
    }

    pub fn modes(&self) -> &[Vec<TokenId>] {
        &self.modes
    }

    /// Prompt characters deduplicated in first-occurrence order, truncated.
    pub fn unique_target(&self, prompt: &[TokenId]) -> Vec<TokenId> {
        let mut seen = HashSet::new();
        prompt
            .iter()
            .copied()
            .filter(|t| seen.insert(*t))
            .take(self.spec.max_response_len)
            .collect()
    }

    /// Similarity of a response to one mode string.
    pub fn mode_similarity(&self, response: &[TokenId], mode: &[TokenId]) -> f64 {
        let lcp = response.iter().zip(mode).take_while(|(a, b)| a == b).count();
        lcp as f64 - self.length_mismatch(response.len(), mode.len())
    }

    fn length_mismatch(&self, a: usize, b: usize) -> f64 {
        self.spec.score_params.length_penalty * a.abs_diff(b) as f64
    }

    /// Ground-truth score standing in for a human judgement.
    pub fn true_score(&self, prompt: &[TokenId], response: &[TokenId]) -> Result<f64> {
        if response.is_empty() {
            return Err(CorpusError::EmptyResponse);
        }
        if response.len() > self.spec.max_response_len {
            return Err(CorpusError::Length {
                len: response.len(),
                max: self.spec.max_response_len,
            });
        }
        Ok(match self.spec.kind {
            TaskKind::Modes => self
                .modes
                .iter()
                .map(|m| self.mode_similarity(response, m))
                .fold(f64::NEG_INFINITY, f64::max),
            TaskKind::UniqueAnswer => {
                let target = self.unique_target(prompt);
                let hits = response.iter().zip(&target).filter(|(a, b)| a == b).count();
                hits as f64 - self.length_mismatch(response.len(), target.len())
            }
        })
    }

    fn random_prompt(&self, rng: &mut Stream) -> Vec<TokenId> {
        let a = self.vocab.num_symbols() as TokenId;
        (0..self.spec.prompt_len).map(|_| rng.random_range(0..a)).collect()
    }

    /// Noisy proposal: half the time a target string with up to two edits,
    /// otherwise a uniform random string.
    fn propose(&self, prompt: &[TokenId], rng: &mut Stream) -> Vec<TokenId> {
        let a = self.vocab.num_symbols() as TokenId;
        let max_len = self.spec.max_response_len;
        if rng::uniform01(rng) < 0.5 {
            let mut s = match self.spec.kind {
                TaskKind::Modes => self.modes[rng.random_range(0..self.modes.len())].clone(),
                TaskKind::UniqueAnswer => self.unique_target(prompt),
            };
            let edits = rng.random_range(0..=2usize);
            for _ in 0..edits {
                let mut op = rng.random_range(0..3u32);
                if (op == 1 && s.len() >= max_len) || (op == 2 && s.len() <= 1) {
                    op = 0;
                }
                match op {
                    0 => {
                        let i = rng.random_range(0..s.len());
                        s[i] = rng.random_range(0..a);
                    }
                    1 => {
                        let i = rng.random_range(0..=s.len());
                        s.insert(i, rng.random_range(0..a));
                    }
                    _ => {
                        let i = rng.random_range(0..s.len());
                        s.remove(i);
                    }
                }
            }
            s
        } else {
            let len = rng.random_range(1..=max_len);
            (0..len).map(|_| rng.random_range(0..a)).collect()
        }
    }
}

/// One `<prompt, chosen, rejected>` record, without specials.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreferencePair {
    pub prompt: Vec<TokenId>,
    pub chosen: Vec<TokenId>,
    pub rejected: Vec<TokenId>,
}

const MAX_TIE_ATTEMPTS: usize = 10_000;

/// Draws `n_pairs` labeled pairs. Pair `i` uses its own derived stream, so
/// the output depends only on `(task, n_pairs, seed)`.
pub fn gen_pairs(task: &Task, n_pairs: usize, seed: u64) -> Result<Vec<PreferencePair>> {
    if n_pairs == 0 {
        return Err(CorpusError::BadTask("n_pairs must be at least 1".into()));
    }
    (0..n_pairs as u64)
        .map(|i| {
            let mut rng = rng::stream(seed, "gen-pairs", i);
            let prompt = task.random_prompt(&mut rng);
            for _ in 0..MAX_TIE_ATTEMPTS {
                let a = task.propose(&prompt, &mut rng);
                let b = task.propose(&prompt, &mut rng);
                let (sa, sb) = (task.true_score(&prompt, &a)?, task.true_score(&prompt, &b)?);
                if sa == sb {
                    continue;
                }
                let (chosen, rejected) = if sa > sb { (a, b) } else { (b, a) };
                return Ok(PreferencePair {
                    prompt,
                    chosen,
                    rejected,
                });
            }
            Err(CorpusError::TieExhausted(MAX_TIE_ATTEMPTS))
        })
        .collect()
}

/// Evaluation prompts drawn from the task's prompt distribution.
pub fn gen_prompts(task: &Task, n: usize, seed: u64) -> Vec<Vec<TokenId>> {
    (0..n as u64)
        .map(|i| task.random_prompt(&mut rng::stream(seed, "gen-prompts", i)))
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PairRecord {
    prompt: String,
    chosen: String,
    rejected: String,
}

pub fn write_pairs<W: Write>(mut out: W, vocab: &Vocab, pairs: &[PreferencePair]) -> Result<()> {
    for p in pairs {
        let rec = PairRecord {
            prompt: vocab.decode(&p.prompt)?,
            chosen: vocab.decode(&p.chosen)?,
            rejected: vocab.decode(&p.rejected)?,
        };
        let line = serde_json::to_string(&rec).expect("string record serializes");
        out.write_all(line.as_bytes())?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads line-delimited records and checks them against the vocabulary and
/// the pair invariants. Line numbers in errors are 1-based.
pub fn read_pairs<R: BufRead>(input: R, vocab: &Vocab, max_len: usize) -> Result<Vec<PreferencePair>> {
    let mut pairs = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let rec: PairRecord = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        let encode = |s: &str| {
            vocab.encode(s).map_err(|e| match e {
                CorpusError::OutOfVocab { ch } => CorpusError::LineVocab { line: line_no, ch },
                other => other,
            })
        };
        let pair = PreferencePair {
            prompt: encode(&rec.prompt)?,
            chosen: encode(&rec.chosen)?,
            rejected: encode(&rec.rejected)?,
        };
        let invariant = |msg: &str| CorpusError::Invariant {
            line: line_no,
            msg: msg.to_string(),
        };
        if pair.chosen.is_empty() || pair.rejected.is_empty() {
            return Err(invariant("responses must be nonempty"));
        }
        if pair.chosen.len() > max_len || pair.rejected.len() > max_len {
            return Err(invariant("response longer than max_response_len"));
        }
        if pair.chosen == pair.rejected {
            return Err(invariant("chosen and rejected are identical"));
        }
        pairs.push(pair);
    }
    Ok(pairs)
}

pub fn save_pairs(path: impl AsRef<Path>, vocab: &Vocab, pairs: &[PreferencePair]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_pairs(&mut out, vocab, pairs)?;
    out.flush()?;
    Ok(())
}

pub fn load_pairs(path: impl AsRef<Path>, vocab: &Vocab, max_len: usize) -> Result<Vec<PreferencePair>> {
    read_pairs(BufReader::new(File::open(path)?), vocab, max_len)
}
