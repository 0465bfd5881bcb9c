//! Autoregressive next-token policies.
//!
//! A policy maps a context (prompt plus the response generated so far) to
//! raw logits over the vocabulary. The free functions in this module apply
//! the response-depth action mask, normalize, and chain steps into sequence
//! log-probabilities and samples, so both implementations ([`TabularPolicy`]
//! and [`NeuralPolicy`]) share one definition of `pi(token | context)`.
//!
//! Masking rules, by response depth `d` (tokens already emitted):
//! * the separator is never emitted,
//! * EOS is disallowed at `d = 0`,
//! * only EOS is allowed once `d >= max_response_len`.
//!
//! Masked entries of [`next_logprobs`] hold exactly [`Scalar::masked`].

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{TokenId, Vocab};
use crate::rng::{self, Stream};
use crate::scalar::{lit, log_sum_exp, Scalar};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("token id {token} out of range for vocabulary of size {vocab_size}")]
    InvalidToken { token: TokenId, vocab_size: usize },
    #[error("context has no table entry (prompt {prompt:?}, response {response:?})")]
    UnknownContext {
        prompt: Vec<TokenId>,
        response: Vec<TokenId>,
    },
    #[error("malformed response: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, PolicyError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyShape {
    pub vocab_size: usize,
    pub eos_id: TokenId,
    pub sep_id: Option<TokenId>,
    pub max_response_len: usize,
}

impl PolicyShape {
    pub fn for_vocab(vocab: &Vocab, max_response_len: usize) -> Self {
        Self {
            vocab_size: vocab.len(),
            eos_id: vocab.eos_id(),
            sep_id: Some(vocab.sep_id()),
            max_response_len,
        }
    }

    /// Shape without a separator: symbols `0..num_symbols`, EOS last.
    pub fn bare(num_symbols: usize, max_response_len: usize) -> Self {
        Self {
            vocab_size: num_symbols + 1,
            eos_id: num_symbols as TokenId,
            sep_id: None,
            max_response_len,
        }
    }

    /// Whether `token` may be emitted after `depth` response tokens.
    pub fn allowed(&self, token: TokenId, depth: usize) -> bool {
        if Some(token) == self.sep_id {
            return false;
        }
        if depth >= self.max_response_len {
            return token == self.eos_id;
        }
        depth > 0 || token != self.eos_id
    }

    /// Tokens that can appear inside a response (neither EOS nor SEP).
    pub fn content_tokens(&self) -> impl Iterator<Item = TokenId> + '_ {
        (0..self.vocab_size as TokenId).filter(move |&t| t != self.eos_id && Some(t) != self.sep_id)
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        match tokens.iter().find(|&&t| t as usize >= self.vocab_size) {
            Some(&token) => Err(PolicyError::InvalidToken {
                token,
                vocab_size: self.vocab_size,
            }),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Context<'a> {
    pub prompt: &'a [TokenId],
    pub response: &'a [TokenId],
}

impl<'a> Context<'a> {
    pub fn new(prompt: &'a [TokenId], response: &'a [TokenId]) -> Self {
        Self { prompt, response }
    }

    pub fn depth(&self) -> usize {
        self.response.len()
    }
}

/// An autoregressive policy with a flat parameter vector.
pub trait Policy<S: Scalar> {
    fn shape(&self) -> PolicyShape;

    /// Unmasked logits for the next token.
    fn raw_logits(&self, ctx: Context<'_>) -> Result<Vec<S>>;

    fn params(&self) -> &[S];

    fn params_mut(&mut self) -> &mut [S];

    /// Adds `d loss / d params` to `grad`, given `d loss / d raw_logits`.
    fn accumulate_grad(&self, ctx: Context<'_>, dlogits: &[S], grad: &mut [S]) -> Result<()>;
}

/// Masked log-softmax of the policy's logits.
pub fn next_logprobs<S: Scalar, P: Policy<S> + ?Sized>(policy: &P, ctx: Context<'_>) -> Result<Vec<S>> {
    let shape = policy.shape();
    shape.check_tokens(ctx.prompt)?;
    shape.check_tokens(ctx.response)?;
    let raw = policy.raw_logits(ctx)?;
    Ok(masked_log_softmax(&shape, ctx.depth(), &raw))
}

pub(crate) fn masked_log_softmax<S: Scalar>(shape: &PolicyShape, depth: usize, raw: &[S]) -> Vec<S> {
    let allowed: Vec<S> = raw
        .iter()
        .enumerate()
        .filter(|&(t, _)| shape.allowed(t as TokenId, depth))
        .map(|(_, &z)| z)
        .collect();
    let lse = log_sum_exp(&allowed);
    raw.iter()
        .enumerate()
        .map(|(t, &z)| {
            if shape.allowed(t as TokenId, depth) {
                z - lse
            } else {
                S::masked()
            }
        })
        .collect()
}

/// Log-probability rows for response depths `0..count`, where row `d` is
/// evaluated at the context holding `response[..d]`.
pub fn step_rows<S: Scalar, P: Policy<S> + ?Sized>(
    policy: &P,
    prompt: &[TokenId],
    response: &[TokenId],
    count: usize,
) -> Result<Vec<Vec<S>>> {
    debug_assert!(count <= response.len() + 1);
    (0..count)
        .map(|d| next_logprobs(policy, Context::new(prompt, &response[..d])))
        .collect()
}

/// Backpropagates gradients taken with respect to the rows returned by
/// [`step_rows`] into the policy parameters.
pub fn backprop_rows<S: Scalar, P: Policy<S> + ?Sized>(
    policy: &P,
    prompt: &[TokenId],
    response: &[TokenId],
    rows: &[Vec<S>],
    row_grads: &[Vec<S>],
    grad: &mut [S],
) -> Result<()> {
    let shape = policy.shape();
    for (d, (row, g)) in rows.iter().zip(row_grads).enumerate() {
        if g.iter().all(|x| x.is_zero()) {
            continue;
        }
        let dlogits = log_softmax_backward(&shape, d, row, g);
        policy.accumulate_grad(Context::new(prompt, &response[..d]), &dlogits, grad)?;
    }
    Ok(())
}

/// Maps `d loss / d logprobs` of one masked row to `d loss / d raw_logits`.
pub fn log_softmax_backward<S: Scalar>(shape: &PolicyShape, depth: usize, row: &[S], g: &[S]) -> Vec<S> {
    let total: S = (0..row.len())
        .filter(|&t| shape.allowed(t as TokenId, depth))
        .map(|t| g[t])
        .sum();
    (0..row.len())
        .map(|t| {
            if shape.allowed(t as TokenId, depth) {
                g[t] - row[t].exp() * total
            } else {
                S::zero()
            }
        })
        .collect()
}

/// Checks that `response` is `content... EOS` with nonempty content that
/// fits the policy's length bound.
pub fn check_response(shape: &PolicyShape, response: &[TokenId]) -> Result<()> {
    shape.check_tokens(response)?;
    let Some((&last, body)) = response.split_last() else {
        return Err(PolicyError::Shape("empty response".into()));
    };
    if last != shape.eos_id {
        return Err(PolicyError::Shape("response does not end with EOS".into()));
    }
    if body.is_empty() {
        return Err(PolicyError::Shape("response has no tokens before EOS".into()));
    }
    if body.contains(&shape.eos_id) {
        return Err(PolicyError::Shape("EOS appears before the final position".into()));
    }
    if body.len() > shape.max_response_len {
        return Err(PolicyError::Shape(format!(
            "response has {} tokens, limit is {}",
            body.len(),
            shape.max_response_len
        )));
    }
    if let Some(sep) = shape.sep_id {
        if body.contains(&sep) {
            return Err(PolicyError::Shape("separator inside response".into()));
        }
    }
    Ok(())
}

/// `log pi(response | prompt)` including the EOS emission.
pub fn seq_logprob<S: Scalar, P: Policy<S> + ?Sized>(
    policy: &P,
    prompt: &[TokenId],
    response: &[TokenId],
) -> Result<S> {
    check_response(&policy.shape(), response)?;
    let rows = step_rows(policy, prompt, response, response.len())?;
    Ok(rows.iter().zip(response).map(|(row, &t)| row[t as usize]).sum())
}

/// Appends EOS to a content sequence.
pub fn with_eos(content: &[TokenId], eos: TokenId) -> Vec<TokenId> {
    let mut v = Vec::with_capacity(content.len() + 1);
    v.extend_from_slice(content);
    v.push(eos);
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub max_len: usize,
    pub seed: u64,
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(PolicyError::Config("temperature must be positive".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(PolicyError::Config("top_p must lie in (0, 1]".into()));
        }
        if self.max_len == 0 {
            return Err(PolicyError::Config("max_len must be at least 1".into()));
        }
        Ok(())
    }
}

/// Tempered probabilities from a masked log-probability row. Masked
/// entries get probability exactly zero.
pub fn tempered_probs<S: Scalar>(logprobs: &[S], temperature: S) -> Vec<S> {
    let scaled: Vec<S> = logprobs
        .iter()
        .map(|&lp| {
            if lp == S::masked() {
                S::neg_infinity()
            } else {
                lp / temperature
            }
        })
        .collect();
    let lse = log_sum_exp(&scaled);
    scaled.iter().map(|&x| (x - lse).exp()).collect()
}

/// Smallest set of tokens, taken by descending probability (ties by
/// ascending id), whose cumulative probability reaches `top_p`. Returned in
/// ascending id order. Zero-probability tokens are never included.
pub fn nucleus<S: Scalar>(probs: &[S], top_p: S) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).filter(|&t| probs[t] > S::zero()).collect();
    order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
    let mut cum = S::zero();
    let mut keep = order.len();
    for (i, &t) in order.iter().enumerate() {
        cum = cum + probs[t];
        if cum >= top_p {
            keep = i + 1;
            break;
        }
    }
    order.truncate(keep);
    order.sort_unstable();
    order
}

/// Distribution actually sampled from at one step: tempered, truncated to
/// the nucleus, renormalized.
pub fn step_distribution<S: Scalar>(logprobs: &[S], temperature: S, top_p: S) -> Vec<S> {
    let probs = tempered_probs(logprobs, temperature);
    let kept = nucleus(&probs, top_p);
    let mass: S = kept.iter().map(|&t| probs[t]).sum();
    let mut out = vec![S::zero(); probs.len()];
    for &t in &kept {
        out[t] = probs[t] / mass;
    }
    out
}

/// Inverse-CDF draw over token ids in ascending order.
pub fn draw_token<S: Scalar>(dist: &[S], u: f64) -> TokenId {
    let u: S = lit(u);
    let mut cum = S::zero();
    let mut last = 0;
    for (t, &p) in dist.iter().enumerate() {
        if p <= S::zero() {
            continue;
        }
        cum = cum + p;
        last = t;
        if u < cum {
            return t as TokenId;
        }
    }
    last as TokenId
}

/// Samples one response (ending in EOS) using draws from `rng`.
pub fn sample_with<S: Scalar, P: Policy<S> + ?Sized>(
    policy: &P,
    prompt: &[TokenId],
    cfg: &SamplingConfig,
    rng: &mut Stream,
) -> Result<Vec<TokenId>> {
    cfg.validate()?;
    let shape = policy.shape();
    let cap = cfg.max_len.min(shape.max_response_len);
    let (temperature, top_p) = (lit::<S>(cfg.temperature), lit::<S>(cfg.top_p));
    let mut response = Vec::new();
    loop {
        if response.len() >= cap {
            response.push(shape.eos_id);
            return Ok(response);
        }
        let row = next_logprobs(policy, Context::new(prompt, &response))?;
        let dist = step_distribution(&row, temperature, top_p);
        let token = draw_token(&dist, rng::uniform01(rng));
        response.push(token);
        if token == shape.eos_id {
            return Ok(response);
        }
    }
}

/// Samples one response with a stream seeded from `cfg.seed`.
pub fn sample_response<S: Scalar, P: Policy<S> + ?Sized>(
    policy: &P,
    prompt: &[TokenId],
    cfg: &SamplingConfig,
) -> Result<Vec<TokenId>> {
    let mut rng = rng::stream(cfg.seed, "sample-response", 0);
    sample_with(policy, prompt, cfg, &mut rng)
}

/// Explicit logits for every reachable context of a set of prompts.
///
/// Covers response prefixes of depth `0..=max_response_len` and, for each
/// nonempty prefix, the context that follows its EOS.
#[derive(Debug, Clone)]
pub struct TabularPolicy<S> {
    shape: PolicyShape,
    index: HashMap<(Vec<TokenId>, Vec<TokenId>), usize>,
    contexts: Vec<(Vec<TokenId>, Vec<TokenId>)>,
    params: Vec<S>,
}

impl<S: Scalar> TabularPolicy<S> {
    pub fn from_fn<F>(shape: PolicyShape, prompts: &[Vec<TokenId>], mut logits: F) -> Result<Self>
    where
        F: FnMut(Context<'_>) -> Result<Vec<S>>,
    {
        let mut contexts = Vec::new();
        for prompt in prompts {
            shape.check_tokens(prompt)?;
            let mut frontier = vec![Vec::new()];
            for depth in 0..=shape.max_response_len {
                let mut next = Vec::new();
                for prefix in frontier {
                    if depth < shape.max_response_len {
                        for t in shape.content_tokens() {
                            next.push(with_eos(&prefix, t));
                        }
                    }
                    if depth > 0 {
                        contexts.push((prompt.clone(), with_eos(&prefix, shape.eos_id)));
                    }
                    contexts.push((prompt.clone(), prefix));
                }
                frontier = next;
            }
        }
        let mut index = HashMap::with_capacity(contexts.len());
        let mut params = Vec::with_capacity(contexts.len() * shape.vocab_size);
        for (i, (p, r)) in contexts.iter().enumerate() {
            let row = logits(Context::new(p, r))?;
            if row.len() != shape.vocab_size {
                return Err(PolicyError::Config("logit row has wrong width".into()));
            }
            params.extend(row);
            if index.insert((p.clone(), r.clone()), i).is_some() {
                return Err(PolicyError::Config("duplicate context".into()));
            }
        }
        Ok(Self {
            shape,
            index,
            contexts,
            params,
        })
    }

    pub fn zeros(shape: PolicyShape, prompts: &[Vec<TokenId>]) -> Self {
        Self::from_fn(shape, prompts, |_| Ok(vec![S::zero(); shape.vocab_size])).expect("zero table is well formed")
    }

    /// Copies another policy's raw logits at every covered context.
    pub fn distill<P: Policy<S> + ?Sized>(source: &P, prompts: &[Vec<TokenId>]) -> Result<Self> {
        Self::from_fn(source.shape(), prompts, |ctx| source.raw_logits(ctx))
    }

    pub fn contexts(&self) -> impl Iterator<Item = Context<'_>> {
        self.contexts.iter().map(|(p, r)| Context::new(p, r))
    }

    pub fn num_contexts(&self) -> usize {
        self.contexts.len()
    }

    /// Offset of a context's logit row within the parameter vector.
    pub fn row_offset(&self, ctx: Context<'_>) -> Result<usize> {
        self.index
            .get(&(ctx.prompt.to_vec(), ctx.response.to_vec()))
            .map(|&i| i * self.shape.vocab_size)
            .ok_or_else(|| PolicyError::UnknownContext {
                prompt: ctx.prompt.to_vec(),
                response: ctx.response.to_vec(),
            })
    }

    pub fn row_mut(&mut self, ctx: Context<'_>) -> Result<&mut [S]> {
        let off = self.row_offset(ctx)?;
        let v = self.shape.vocab_size;
        Ok(&mut self.params[off..off + v])
    }
}

impl<S: Scalar> Policy<S> for TabularPolicy<S> {
    fn shape(&self) -> PolicyShape {
        self.shape
    }

    fn raw_logits(&self, ctx: Context<'_>) -> Result<Vec<S>> {
        let off = self.row_offset(ctx)?;
        Ok(self.params[off..off + self.shape.vocab_size].to_vec())
    }

    fn params(&self) -> &[S] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [S] {
        &mut self.params
    }

    fn accumulate_grad(&self, ctx: Context<'_>, dlogits: &[S], grad: &mut [S]) -> Result<()> {
        let off = self.row_offset(ctx)?;
        for (g, &d) in grad[off..off + self.shape.vocab_size].iter_mut().zip(dlogits) {
            *g = *g + d;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NeuralDims {
    pub embed_dim: usize,
    pub window: usize,
    pub hidden: usize,
}

impl Default for NeuralDims {
    fn default() -> Self {
        Self {
            embed_dim: 16,
            window: 8,
            hidden: 64,
        }
    }
}

/// Offsets of each parameter block in the flat vector.
#[derive(Debug, Clone, Copy)]
struct Layout {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    total: usize,
}

impl Layout {
    fn new(vocab: usize, dims: &NeuralDims) -> Self {
        let input = dims.window * dims.embed_dim;
        let w1 = vocab * dims.embed_dim;
        let b1 = w1 + dims.hidden * input;
        let w2 = b1 + dims.hidden;
        let b2 = w2 + vocab * dims.hidden;
        Self {
            w1,
            b1,
            w2,
            b2,
            total: b2 + vocab,
        }
    }
}

/// Fixed-window MLP language model.
///
/// The last `window` tokens of `[prompt][SEP][response]` are embedded
/// (missing positions contribute zeros), concatenated, passed through one
/// tanh layer, and projected to vocabulary logits.
#[derive(Debug, Clone)]
pub struct NeuralPolicy<S> {
    shape: PolicyShape,
    dims: NeuralDims,
    layout: Layout,
    params: Vec<S>,
}

impl<S: Scalar> NeuralPolicy<S> {
    pub fn new(shape: PolicyShape, dims: NeuralDims, seed: u64) -> Self {
        let layout = Layout::new(shape.vocab_size, &dims);
        let mut rng = rng::stream(seed, "neural-init", 0);
        let mut uniform = |scale: f64| lit::<S>((2.0 * rng::uniform01(&mut rng) - 1.0) * scale);
        let input = (dims.window * dims.embed_dim) as f64;
        let mut params = Vec::with_capacity(layout.total);
        params.extend((0..layout.w1).map(|_| uniform(1.0)));
        params.extend((layout.w1..layout.b1).map(|_| uniform(1.0 / input.sqrt())));
        params.extend((layout.b1..layout.w2).map(|_| S::zero()));
        params.extend((layout.w2..layout.b2).map(|_| uniform(0.5 / (dims.hidden as f64).sqrt())));
        params.extend((layout.b2..layout.total).map(|_| S::zero()));
        Self {
            shape,
            dims,
            layout,
            params,
        }
    }

    /// All parameters zero, so every context gets uniform logits.
    pub fn zeroed(shape: PolicyShape, dims: NeuralDims) -> Self {
        let layout = Layout::new(shape.vocab_size, &dims);
        Self {
            shape,
            dims,
            layout,
            params: vec![S::zero(); layout.total],
        }
    }

    pub fn dims(&self) -> NeuralDims {
        self.dims
    }

    pub fn num_params(&self) -> usize {
        self.layout.total
    }

    fn window(&self, ctx: Context<'_>) -> Vec<Option<TokenId>> {
        let k = self.dims.window;
        let seq = ctx
            .prompt
            .iter()
            .copied()
            .chain(self.shape.sep_id)
            .chain(ctx.response.iter().copied());
        let seq: Vec<TokenId> = seq.collect();
        let start = seq.len().saturating_sub(k);
        let mut w = vec![None; k - (seq.len() - start)];
        w.extend(seq[start..].iter().map(|&t| Some(t)));
        w
    }

    fn input(&self, window: &[Option<TokenId>]) -> Vec<S> {
        let d = self.dims.embed_dim;
        let mut x = vec![S::zero(); window.len() * d];
        for (slot, tok) in window.iter().enumerate() {
            if let Some(t) = tok {
                let e = &self.params[*t as usize * d..(*t as usize + 1) * d];
                x[slot * d..(slot + 1) * d].copy_from_slice(e);
            }
        }
        x
    }

    fn hidden(&self, x: &[S]) -> Vec<S> {
        let n_in = x.len();
        let w1 = &self.params[self.layout.w1..self.layout.b1];
        let b1 = &self.params[self.layout.b1..self.layout.w2];
        (0..self.dims.hidden)
            .map(|j| {
                let row = &w1[j * n_in..(j + 1) * n_in];
                let a = row.iter().zip(x).fold(b1[j], |acc, (&w, &xi)| acc + w * xi);
                a.tanh()
            })
            .collect()
    }

    pub fn to_doc(&self, symbols: Option<String>) -> PolicyDoc {
        PolicyDoc {
            arch: "neural-mlp".into(),
            shape: self.shape,
            dims: self.dims,
            symbols,
            params: self.params.iter().map(|p| p.to_hex()).collect(),
        }
    }

    pub fn from_doc(doc: &PolicyDoc) -> Result<Self> {
        if doc.arch != "neural-mlp" {
            return Err(PolicyError::Checkpoint(format!("unknown architecture {:?}", doc.arch)));
        }
        let mut p = Self::zeroed(doc.shape, doc.dims);
        if doc.params.len() != p.params.len() {
            return Err(PolicyError::Checkpoint(format!(
                "expected {} parameters, found {}",
                p.params.len(),
                doc.params.len()
            )));
        }
        for (dst, s) in p.params.iter_mut().zip(&doc.params) {
            *dst = S::from_hex(s).map_err(|e| PolicyError::Checkpoint(e.to_string()))?;
        }
        Ok(p)
    }
}

impl<S: Scalar> Policy<S> for NeuralPolicy<S> {
    fn shape(&self) -> PolicyShape {
        self.shape
    }

    fn raw_logits(&self, ctx: Context<'_>) -> Result<Vec<S>> {
        let x = self.input(&self.window(ctx));
        let h = self.hidden(&x);
        let hd = self.dims.hidden;
        let w2 = &self.params[self.layout.w2..self.layout.b2];
        let b2 = &self.params[self.layout.b2..self.layout.total];
        Ok((0..self.shape.vocab_size)
            .map(|v| {
                let row = &w2[v * hd..(v + 1) * hd];
                row.iter().zip(&h).fold(b2[v], |acc, (&w, &hj)| acc + w * hj)
            })
            .collect())
    }

    fn params(&self) -> &[S] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [S] {
        &mut self.params
    }

    fn accumulate_grad(&self, ctx: Context<'_>, dlogits: &[S], grad: &mut [S]) -> Result<()> {
        let window = self.window(ctx);
        let x = self.input(&window);
        let h = self.hidden(&x);
        let (hd, d, n_in) = (self.dims.hidden, self.dims.embed_dim, x.len());
        let l = self.layout;

        let mut dh = vec![S::zero(); hd];
        for (v, &dz) in dlogits.iter().enumerate() {
            if dz.is_zero() {
                continue;
            }
            grad[l.b2 + v] = grad[l.b2 + v] + dz;
            let w_row = l.w2 + v * hd;
            for j in 0..hd {
                grad[w_row + j] = grad[w_row + j] + dz * h[j];
                dh[j] = dh[j] + dz * self.params[w_row + j];
            }
        }
        let mut dx = vec![S::zero(); n_in];
        for j in 0..hd {
            let da = dh[j] * (S::one() - h[j] * h[j]);
            if da.is_zero() {
                continue;
            }
            grad[l.b1 + j] = grad[l.b1 + j] + da;
            let w_row = l.w1 + j * n_in;
            for i in 0..n_in {
                grad[w_row + i] = grad[w_row + i] + da * x[i];
                dx[i] = dx[i] + da * self.params[w_row + i];
            }
        }
        for (slot, tok) in window.iter().enumerate() {
            if let Some(t) = tok {
                let e = *t as usize * d;
                for c in 0..d {
                    grad[e + c] = grad[e + c] + dx[slot * d + c];
                }
            }
        }
        Ok(())
    }
}

/// Serialized neural policy; parameters are hex-float strings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyDoc {
    pub arch: String,
    pub shape: PolicyShape,
    pub dims: NeuralDims,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub symbols: Option<String>,
    pub params: Vec<String>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_shape() -> PolicyShape {
        // symbols 0,1,2 ; sep 3 ; eos 4
        PolicyShape {
            vocab_size: 5,
            eos_id: 4,
            sep_id: Some(3),
            max_response_len: 4,
        }
    }

    fn small_dims() -> NeuralDims {
        NeuralDims {
            embed_dim: 3,
            window: 4,
            hidden: 5,
        }
    }

    #[test]
    fn uniform_row_without_mask() {
        let shape = PolicyShape::bare(3, 3);
        let p = TabularPolicy::<f64>::zeros(shape, &[vec![]]);
        let row = next_logprobs(&p, Context::new(&[], &[0])).unwrap();
        for lp in row {
            assert!((lp - (-(4f64).ln())).abs() < 1e-15);
            assert!((lp + 1.386294).abs() < 1e-6);
        }
    }

    #[test]
    fn depth_masks() {
        let shape = PolicyShape::bare(3, 2);
        let p = TabularPolicy::<f64>::zeros(shape, &[vec![]]);
        let first = next_logprobs(&p, Context::new(&[], &[])).unwrap();
        assert_eq!(first[3], f64::masked());
        assert!((first[0] + 3f64.ln()).abs() < 1e-15);
        let last = next_logprobs(&p, Context::new(&[], &[1, 2])).unwrap();
        assert_eq!(last[3], 0.0);
        assert!(last[..3].iter().all(|&x| x == f64::masked()));
    }

    #[test]
    fn separator_is_never_emitted() {
        let p = NeuralPolicy::<f64>::zeroed(small_shape(), small_dims());
        let row = next_logprobs(&p, Context::new(&[0, 1], &[2])).unwrap();
        assert_eq!(row[3], f64::masked());
        assert!((row[0] + 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn invalid_token_rejected() {
        let p = NeuralPolicy::<f64>::zeroed(small_shape(), small_dims());
        assert!(matches!(
            next_logprobs(&p, Context::new(&[9], &[])),
            Err(PolicyError::InvalidToken { token: 9, .. })
        ));
    }

    #[test]
    fn normalization_over_random_contexts() {
        let p = NeuralPolicy::<f64>::new(small_shape(), small_dims(), 3);
        let mut rng = rng::stream(4, "ctx", 0);
        for _ in 0..1000 {
            let plen = (rng::uniform01(&mut rng) * 4.0) as usize;
            let rlen = (rng::uniform01(&mut rng) * 6.0) as usize;
            let prompt: Vec<u32> = (0..plen).map(|_| (rng::uniform01(&mut rng) * 3.0) as u32).collect();
            let resp: Vec<u32> = (0..rlen).map(|_| (rng::uniform01(&mut rng) * 3.0) as u32).collect();
            let row = next_logprobs(&p, Context::new(&prompt, &resp)).unwrap();
            assert!(log_sum_exp(&row).abs() < 1e-12);
        }
    }

    #[test]
    fn seq_logprob_shapes() {
        let p = NeuralPolicy::<f64>::zeroed(small_shape(), small_dims());
        assert!(matches!(seq_logprob(&p, &[0], &[4]), Err(PolicyError::Shape(_))));
        assert!(matches!(seq_logprob(&p, &[0], &[]), Err(PolicyError::Shape(_))));
        assert!(matches!(seq_logprob(&p, &[0], &[0, 1]), Err(PolicyError::Shape(_))));
        assert!(matches!(
            seq_logprob(&p, &[0], &[0, 4, 1, 4]),
            Err(PolicyError::Shape(_))
        ));
        assert!(matches!(
            seq_logprob(&p, &[0], &[0, 0, 0, 0, 0, 4]),
            Err(PolicyError::Shape(_))
        ));
        assert!(matches!(seq_logprob(&p, &[0], &[0, 3, 4]), Err(PolicyError::Shape(_))));
    }

    #[test]
    fn uniform_two_token_response() {
        // bare shape: 3 symbols + EOS, so no token is masked at depths 1 and 2
        // and only EOS is masked at depth 0; use zeros for a hand sum.
        let shape = PolicyShape::bare(3, 4);
        let p = TabularPolicy::<f64>::zeros(shape, &[vec![]]);
        let lp = seq_logprob(&p, &[], &[0, 1, 3]).unwrap();
        let expected = -(3f64).ln() - 2.0 * (4f64).ln();
        assert!((lp - expected).abs() < 1e-12);
        // with the depth-0 mask ignored every step is uniform over 4 tokens
        let unmasked: f64 = (0..3)
            .map(|d| {
                let raw = p.raw_logits(Context::new(&[], &[0, 1][..d.min(2)])).unwrap();
                raw[0] - log_sum_exp(&raw)
            })
            .sum();
        assert!((unmasked - 3.0 * -(4f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn seq_logprob_is_sum_of_steps() {
        let p = NeuralPolicy::<f64>::new(small_shape(), small_dims(), 8);
        let mut rng = rng::stream(2, "seq", 0);
        for _ in 0..200 {
            let n = 1 + (rng::uniform01(&mut rng) * 4.0) as usize;
            let mut resp: Vec<u32> = (0..n).map(|_| (rng::uniform01(&mut rng) * 3.0) as u32).collect();
            resp.push(4);
            let prompt = [1, 2];
            let mut manual = 0.0;
            for d in 0..resp.len() {
                manual += next_logprobs(&p, Context::new(&prompt, &resp[..d])).unwrap()[resp[d] as usize];
            }
            let lp = seq_logprob(&p, &prompt, &resp).unwrap();
            assert!((lp - manual).abs() < 1e-12);
        }
    }

    #[test]
    fn nucleus_cumulative_rule() {
        let probs = [0.5f64, 0.3, 0.2];
        assert_eq!(nucleus(&probs, 0.7), vec![0, 1]);
        let lp: Vec<f64> = probs.iter().map(|p| p.ln()).collect();
        let dist = step_distribution(&lp, 1.0, 0.7);
        assert!((dist[0] - 0.625).abs() < 1e-12);
        assert!((dist[1] - 0.375).abs() < 1e-12);
        assert_eq!(dist[2], 0.0);
        let full = step_distribution(&lp, 1.0, 1.0);
        for (a, b) in full.iter().zip(&probs) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn nucleus_ties_prefer_lower_ids() {
        let probs = [0.25f64, 0.25, 0.25, 0.25];
        assert_eq!(nucleus(&probs, 0.5), vec![0, 1]);
        let probs = [0.2f64, 0.4, 0.4];
        assert_eq!(nucleus(&probs, 0.4), vec![1]);
    }

    #[test]
    fn draw_uses_vocab_order() {
        let dist = [0.0f64, 0.625, 0.375];
        assert_eq!(draw_token(&dist, 0.0), 1);
        assert_eq!(draw_token(&dist, 0.624), 1);
        assert_eq!(draw_token(&dist, 0.626), 2);
        assert_eq!(draw_token(&dist, 0.999_999_999), 2);
    }

    #[test]
    fn sampling_config_validation() {
        let ok = SamplingConfig {
            temperature: 1.0,
            top_p: 0.95,
            max_len: 4,
            seed: 0,
        };
        assert!(ok.validate().is_ok());
        assert!(SamplingConfig { temperature: 0.0, ..ok }.validate().is_err());
        assert!(SamplingConfig { top_p: 0.0, ..ok }.validate().is_err());
        assert!(SamplingConfig { top_p: 1.2, ..ok }.validate().is_err());
        assert!(SamplingConfig { max_len: 0, ..ok }.validate().is_err());
    }

    #[test]
    fn sampled_tokens_stay_in_nucleus() {
        let p = NeuralPolicy::<f64>::new(small_shape(), small_dims(), 21);
        let cfg = SamplingConfig {
            temperature: 0.8,
            top_p: 0.6,
            max_len: 4,
            seed: 0,
        };
        let mut rng = rng::stream(99, "nucleus", 0);
        for _ in 0..300 {
            let resp = sample_with(&p, &[0, 2], &cfg, &mut rng).unwrap();
            assert_eq!(*resp.last().unwrap(), 4);
            check_response(&p.shape(), &resp).unwrap();
            for d in 0..resp.len() {
                let row = next_logprobs(&p, Context::new(&[0, 2], &resp[..d])).unwrap();
                if d >= 4 {
                    continue;
                }
                let probs = tempered_probs(&row, 0.8);
                assert!(nucleus(&probs, 0.6).contains(&(resp[d] as usize)));
            }
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let p = NeuralPolicy::<f64>::new(small_shape(), small_dims(), 5);
        let cfg = SamplingConfig {
            temperature: 1.0,
            top_p: 0.95,
            max_len: 4,
            seed: 17,
        };
        let a = sample_response(&p, &[1], &cfg).unwrap();
        assert_eq!(a, sample_response(&p, &[1], &cfg).unwrap());
    }

    #[test]
    fn sampling_respects_max_len_cap() {
        let p = NeuralPolicy::<f64>::new(small_shape(), small_dims(), 5);
        let cfg = SamplingConfig {
            temperature: 1.0,
            top_p: 1.0,
            max_len: 1,
            seed: 3,
        };
        for seed in 0..20 {
            let r = sample_response(&p, &[1], &SamplingConfig { seed, ..cfg }).unwrap();
            assert_eq!(r.len(), 2);
        }
    }

    #[test]
    fn distilled_table_matches_network() {
        let shape = PolicyShape {
            vocab_size: 5,
            eos_id: 4,
            sep_id: Some(3),
            max_response_len: 3,
        };
        let net = NeuralPolicy::<f64>::new(shape, small_dims(), 12);
        let prompts = vec![vec![0, 1], vec![2]];
        let table = TabularPolicy::distill(&net, &prompts).unwrap();
        for ctx in table.contexts() {
            let a = next_logprobs(&net, ctx).unwrap();
            let b = next_logprobs(&table, ctx).unwrap();
            assert_eq!(a, b);
        }
        for prompt in &prompts {
            for resp in [vec![0, 4], vec![2, 1, 4], vec![1, 1, 1, 4]] {
                let a = seq_logprob(&net, prompt, &resp).unwrap();
                let b = seq_logprob(&table, prompt, &resp).unwrap();
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert!(table.raw_logits(Context::new(&[1], &[])).is_err());
    }

    #[test]
    fn table_includes_post_eos_contexts() {
        let shape = PolicyShape::bare(2, 2);
        let t = TabularPolicy::<f64>::zeros(shape, &[vec![]]);
        // prefixes: 1 + 2 + 4 = 7, post-EOS for the 6 nonempty ones
        assert_eq!(t.num_contexts(), 13);
        assert!(t.row_offset(Context::new(&[], &[1, 0, 2])).is_ok());
        assert!(t.row_offset(Context::new(&[], &[2])).is_err());
    }

    #[test]
    fn checkpoint_doc_round_trip() {
        let net = NeuralPolicy::<f64>::new(small_shape(), small_dims(), 1);
        let doc = net.to_doc(Some("abc".into()));
        let json = serde_json::to_string(&doc).unwrap();
        let back: PolicyDoc = serde_json::from_str(&json).unwrap();
        let net2 = NeuralPolicy::<f64>::from_doc(&back).unwrap();
        let bits = |p: &NeuralPolicy<f64>| p.params().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&net), bits(&net2));
        let mut bad = back.clone();
        bad.params.pop();
        assert!(NeuralPolicy::<f64>::from_doc(&bad).is_err());
    }

    #[test]
    fn f32_policy_normalizes() {
        let p = NeuralPolicy::<f32>::new(small_shape(), small_dims(), 3);
        let row = next_logprobs(&p, Context::new(&[0], &[1, 2])).unwrap();
        assert!(log_sum_exp(&row).abs() < 1e-5);
    }

    proptest! {
        #[test]
        fn temperature_keeps_argmax(logits in prop::collection::vec(-5.0f64..5.0, 2..8), t in 0.05f64..5.0) {
            let lse = log_sum_exp(&logits);
            let lp: Vec<f64> = logits.iter().map(|z| z - lse).collect();
            let argmax = |v: &[f64]| {
                let mut best = 0;
                for i in 1..v.len() {
                    if v[i] > v[best] { best = i; }
                }
                best
            };
            let probs = tempered_probs(&lp, t);
            prop_assert_eq!(argmax(&probs), argmax(&lp));
        }
    }
}
