//! Sample-based evaluation: pairwise diversity, a win-rate proxy against
//! reference samples, mode coverage and response length.
//!
//! Diversity uses a hashed character-trigram embedding: `^^text$$` is cut
//! into overlapping trigrams, each trigram is hashed with FNV-1a 64 into one
//! of [`EMBED_DIM`] buckets (`(h >> 1) % EMBED_DIM`, sign `-1` when `h` is
//! odd) and the count vector is L2-normalized.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusError, Task, TaskKind};
use crate::rng::fnv1a64;

pub const EMBED_DIM: usize = 4096;
pub const COVERAGE_TOLERANCE: f64 = 0.5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot embed an empty response")]
    EmptyResponse,
    #[error("prompt {prompt:?} has {n} samples, need at least 2")]
    TooFewSamples { prompt: String, n: usize },
    #[error("sample sets do not line up: {0}")]
    Mismatch(String),
    #[error("mode coverage needs a modes task")]
    WrongTask,
    #[error("no samples")]
    Empty,
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Sparse unit vector over the hashed trigram space, sorted by bucket.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<(usize, f64)>);

impl Embedding {
    pub fn entries(&self) -> &[(usize, f64)] {
        &self.0
    }

    pub fn dense(&self) -> Vec<f64> {
        let mut v = vec![0.0; EMBED_DIM];
        for &(i, x) in &self.0 {
            v[i] = x;
        }
        v
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        let (mut i, mut j, mut acc) = (0, 0, 0.0);
        while i < self.0.len() && j < other.0.len() {
            match self.0[i].0.cmp(&other.0[j].0) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    acc += self.0[i].1 * other.0[j].1;
                    i += 1;
                    j += 1;
                }
            }
        }
        acc
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|(_, x)| x * x).sum::<f64>().sqrt()
    }
}

pub fn trigrams(response: &str) -> Vec<String> {
    let padded: Vec<char> = "^^".chars().chain(response.chars()).chain("$$".chars()).collect();
    padded.windows(3).map(|w| w.iter().collect()).collect()
}

pub fn trigram_bucket(trigram: &str) -> (usize, f64) {
    let h = fnv1a64(trigram.as_bytes());
    let sign = if h & 1 == 1 { -1.0 } else { 1.0 };
    (((h >> 1) % EMBED_DIM as u64) as usize, sign)
}

pub fn embed_response(response: &str) -> Result<Embedding> {
    if response.is_empty() {
        return Err(EvalError::EmptyResponse);
    }
    let mut counts = std::collections::BTreeMap::new();
    for t in trigrams(response) {
        let (b, s) = trigram_bucket(&t);
        *counts.entry(b).or_insert(0.0) += s;
    }
    let norm = counts.values().map(|x: &f64| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        // Every trigram cancelled against a colliding one of opposite sign.
        let (b, _) = trigram_bucket(&trigrams(response)[0]);
        return Ok(Embedding(vec![(b, 1.0)]));
    }
    Ok(Embedding(
        counts
            .into_iter()
            .filter(|(_, x)| *x != 0.0)
            .map(|(b, x)| (b, x / norm))
            .collect(),
    ))
}

pub fn cosine_distance(a: &str, b: &str) -> Result<f64> {
    Ok(1.0 - embed_response(a)?.dot(&embed_response(b)?))
}

/// Samples per prompt, in file order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    pub entries: Vec<PromptSamples>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSamples {
    pub prompt: String,
    pub samples: Vec<String>,
}

impl SampleSet {
    pub fn new(entries: Vec<PromptSamples>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn all_samples(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().flat_map(|e| e.samples.iter().map(String::as_str))
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for e in &self.entries {
            let line = serde_json::to_string(e).expect("sample rows serialize");
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e: PromptSamples = serde_json::from_str(&line).map_err(|e| EvalError::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
            entries.push(e);
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_jsonl(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_jsonl(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Mean pairwise cosine distance per prompt, averaged over prompts, times 100.
pub fn diversity_score(samples: &SampleSet) -> Result<f64> {
    if samples.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut total = 0.0;
    for e in &samples.entries {
        let n = e.samples.len();
        if n < 2 {
            return Err(EvalError::TooFewSamples {
                prompt: e.prompt.clone(),
                n,
            });
        }
        let embs = e
            .samples
            .iter()
            .map(|s| embed_response(s))
            .collect::<Result<Vec<_>>>()?;
        let mut sum = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                sum += 1.0 - embs[i].dot(&embs[j]);
            }
        }
        total += sum / (n * (n - 1) / 2) as f64;
    }
    Ok(100.0 * total / samples.len() as f64)
}

/// Mean and standard error of the mean, with the `n - 1` sample deviation.
pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
}

impl MeanSe {
    pub fn of(xs: &[f64]) -> Self {
        let (mean, se) = mean_and_se(xs);
        Self { mean, se }
    }
}

fn win_outcomes(samples: &SampleSet, reference: &SampleSet, task: &Task) -> Result<Vec<f64>> {
    if samples.len() != reference.len() {
        return Err(EvalError::Mismatch(format!(
            "{} prompts vs {} reference prompts",
            samples.len(),
            reference.len()
        )));
    }
    let vocab = task.vocab();
    let mut out = Vec::new();
    for (a, b) in samples.entries.iter().zip(&reference.entries) {
        if a.prompt != b.prompt {
            return Err(EvalError::Mismatch(format!("prompt {:?} vs {:?}", a.prompt, b.prompt)));
        }
        if a.samples.len() != b.samples.len() {
            return Err(EvalError::Mismatch(format!(
                "prompt {:?}: {} samples vs {}",
                a.prompt,
                a.samples.len(),
                b.samples.len()
            )));
        }
        let prompt = vocab.encode(&a.prompt)?;
        for (x, y) in a.samples.iter().zip(&b.samples) {
            let sx = task.true_score(&prompt, &vocab.encode(x)?)?;
            let sy = task.true_score(&prompt, &vocab.encode(y)?)?;
            out.push(if sx > sy {
                1.0
            } else if sx == sy {
                0.5
            } else {
                0.0
            });
        }
    }
    if out.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(out)
}

/// Percentage of matched comparisons won against `reference`, ties half.
pub fn win_rate_proxy(samples: &SampleSet, reference: &SampleSet, task: &Task) -> Result<MeanSe> {
    let outcomes: Vec<f64> = win_outcomes(samples, reference, task)?
        .into_iter()
        .map(|w| 100.0 * w)
        .collect();
    Ok(MeanSe::of(&outcomes))
}

/// Fraction of modes that some sample reproduces within [`COVERAGE_TOLERANCE`].
pub fn mode_coverage(samples: &SampleSet, task: &Task) -> Result<f64> {
    if task.kind() != TaskKind::Modes {
        return Err(EvalError::WrongTask);
    }
    let vocab = task.vocab();
    let encoded = samples
        .all_samples()
        .map(|s| vocab.encode(s))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let modes = task.modes();
    let covered = modes
        .iter()
        .filter(|m| {
            let best = task.mode_similarity(m, m);
            encoded
                .iter()
                .any(|s| task.mode_similarity(s, m) >= best - COVERAGE_TOLERANCE)
        })
        .count();
    Ok(covered as f64 / modes.len() as f64)
}

/// Response lengths in tokens, EOS excluded.
pub fn token_lengths(samples: &SampleSet) -> Vec<f64> {
    samples.all_samples().map(|s| s.chars().count() as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub diversity: f64,
    pub win_rate: MeanSe,
    pub mode_coverage: Option<f64>,
    pub mean_tokens: MeanSe,
}

pub fn evaluate(samples: &SampleSet, reference: &SampleSet, task: &Task) -> Result<EvalReport> {
    Ok(EvalReport {
        diversity: diversity_score(samples)?,
        win_rate: win_rate_proxy(samples, reference, task)?,
        mode_coverage: match task.kind() {
            TaskKind::Modes => Some(mode_coverage(samples, task)?),
            TaskKind::UniqueAnswer => None,
        },
        mean_tokens: MeanSe::of(&token_lengths(samples)),
    })
}
