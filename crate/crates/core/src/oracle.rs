//! Exact ground truth on small enumerable token MDPs.
//!
//! States are response prefixes over `A` symbols, at most `L` long; every
//! nonempty prefix may terminate with EOS and the empty prefix may not.
//! Because each state has a single parent, state flows follow from one
//! bottom-up pass:
//!
//! ```text
//! F(s) = R(s) [|s| >= 1] + sum_a F(s a)        Z = F(root)
//! pi*(a | s) = F(s a) / F(s)                   pi*(EOS | s) = R(s) / F(s)
//! ```
//!
//! [`train_db_exact`] fits a tabular policy with the detailed-balance
//! residuals `log F(s) + log pi(a | s) - log F(s a)` over every edge, where
//! `log F(s) = log R(s) - log pi(EOS | s)` and the root flow is a free
//! parameter `log Z`.

use std::collections::{BTreeMap, HashMap};

use num_traits::Num;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::TokenId;
use crate::numerics::{adam_step, AdamConfig, OptimState};
use crate::policy::{
    log_softmax_backward, masked_log_softmax, next_logprobs, with_eos, Context, Policy, PolicyError, PolicyShape,
    TabularPolicy,
};
use crate::rng;
use crate::scalar::{lit, Scalar};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("invalid MDP: {0}")]
    Invalid(String),
    #[error("reward for {0:?} is not positive")]
    NonPositiveReward(String),
    #[error("state {0:?} reached from more than one parent")]
    NotATree(Vec<TokenId>),
    #[error("distributions have different supports")]
    SupportMismatch,
    #[error("did not converge: residual {residual:e} after {steps} steps")]
    NotConverged { residual: f64, steps: usize },
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

pub type Result<T> = std::result::Result<T, OracleError>;

pub const MAX_VOCAB: usize = 6;
pub const MAX_LEN: usize = 5;

/// Terminal rewards for every response of length `1..=max_len`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnumMdp<T> {
    num_symbols: usize,
    max_len: usize,
    rewards: BTreeMap<Vec<TokenId>, T>,
}

fn all_prefixes(num_symbols: usize, max_len: usize) -> Vec<Vec<TokenId>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for p in &frontier {
            for a in 0..num_symbols as TokenId {
                next.push(with_eos(p, a));
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

impl<T: Num + Clone + PartialOrd> EnumMdp<T> {
    pub fn new(num_symbols: usize, max_len: usize, rewards: BTreeMap<Vec<TokenId>, T>) -> Result<Self> {
        if num_symbols == 0 || num_symbols + 1 > MAX_VOCAB {
            return Err(OracleError::Invalid(format!(
                "vocabulary of {} tokens including EOS is outside 2..={MAX_VOCAB}",
                num_symbols + 1
            )));
        }
        if max_len == 0 || max_len > MAX_LEN {
            return Err(OracleError::Invalid(format!("max_len {max_len} outside 1..={MAX_LEN}")));
        }
        let expected = all_prefixes(num_symbols, max_len).len() - 1;
        for (y, r) in &rewards {
            if y.is_empty() || y.len() > max_len || y.iter().any(|&t| t as usize >= num_symbols) {
                return Err(OracleError::Invalid(format!("{y:?} is not a terminal of this MDP")));
            }
            if !(*r > T::zero()) {
                return Err(OracleError::NonPositiveReward(format!("{y:?}")));
            }
        }
        if rewards.len() != expected {
            return Err(OracleError::Invalid(format!(
                "expected rewards for {expected} terminals, got {}",
                rewards.len()
            )));
        }
        Ok(Self {
            num_symbols,
            max_len,
            rewards,
        })
    }

    pub fn from_fn<F: FnMut(&[TokenId]) -> T>(num_symbols: usize, max_len: usize, mut reward: F) -> Result<Self> {
        let rewards = all_prefixes(num_symbols, max_len.min(MAX_LEN))
            .into_iter()
            .filter(|p| !p.is_empty())
            .map(|p| {
                let r = reward(&p);
                (p, r)
            })
            .collect();
        Self::new(num_symbols, max_len, rewards)
    }

    pub fn num_symbols(&self) -> usize {
        self.num_symbols
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn shape(&self) -> PolicyShape {
        PolicyShape::bare(self.num_symbols, self.max_len)
    }

    pub fn eos(&self) -> TokenId {
        self.num_symbols as TokenId
    }

    pub fn reward(&self, y: &[TokenId]) -> Option<&T> {
        self.rewards.get(y)
    }

    pub fn rewards(&self) -> &BTreeMap<Vec<TokenId>, T> {
        &self.rewards
    }

    /// Every state, parents before children, with the tree property checked.
    pub fn states(&self) -> Result<Vec<Vec<TokenId>>> {
        let states = all_prefixes(self.num_symbols, self.max_len);
        let mut parent: HashMap<&[TokenId], &[TokenId]> = HashMap::with_capacity(states.len());
        for s in states.iter().skip(1) {
            let p = &s[..s.len() - 1];
            if parent.insert(s.as_slice(), p).is_some() {
                return Err(OracleError::NotATree(s.clone()));
            }
        }
        Ok(states)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowTable<T> {
    pub flows: BTreeMap<Vec<TokenId>, T>,
    pub z: T,
    pub target: BTreeMap<Vec<TokenId>, T>,
}

impl<T: Num + Clone + PartialOrd> FlowTable<T> {
    /// `[pi*(0 | s), .., pi*(A-1 | s), pi*(EOS | s)]`; children beyond the
    /// length bound and EOS at the root get zero.
    pub fn optimal_step(&self, mdp: &EnumMdp<T>, state: &[TokenId]) -> Option<Vec<T>> {
        let f = self.flows.get(state)?;
        let mut out = Vec::with_capacity(mdp.num_symbols + 1);
        for a in 0..mdp.num_symbols as TokenId {
            let child = self.flows.get(&with_eos(state, a)).cloned().unwrap_or_else(T::zero);
            out.push(child / f.clone());
        }
        let r = mdp.reward(state).cloned().unwrap_or_else(T::zero);
        out.push(r / f.clone());
        Some(out)
    }
}

/// Exact state flows, partition function and reward-proportional target.
pub fn exact_flows<T: Num + Clone + PartialOrd>(mdp: &EnumMdp<T>) -> Result<FlowTable<T>> {
    let states = mdp.states()?;
    let mut flows: BTreeMap<Vec<TokenId>, T> = BTreeMap::new();
    for s in states.iter().rev() {
        let mut f = mdp.reward(s).cloned().unwrap_or_else(T::zero);
        if s.len() < mdp.max_len {
            for a in 0..mdp.num_symbols as TokenId {
                f = f + flows[&with_eos(s, a)].clone();
            }
        }
        flows.insert(s.clone(), f);
    }
    let z = flows[&Vec::new()].clone();
    let target = mdp
        .rewards
        .iter()
        .map(|(y, r)| (y.clone(), r.clone() / z.clone()))
        .collect();
    Ok(FlowTable { flows, z, target })
}

/// Tabular policy whose logits are the log-flows, so it samples `R / Z`.
pub fn optimal_policy<S: Scalar>(mdp: &EnumMdp<S>, flows: &FlowTable<S>) -> Result<TabularPolicy<S>> {
    let eos = mdp.eos() as usize;
    Ok(TabularPolicy::from_fn(mdp.shape(), &[vec![]], |ctx| {
        let mut row = vec![S::zero(); mdp.num_symbols + 1];
        if ctx.response.last() == Some(&mdp.eos()) {
            return Ok(row);
        }
        for (a, slot) in row.iter_mut().enumerate().take(eos) {
            if let Some(f) = flows.flows.get(&with_eos(ctx.response, a as TokenId)) {
                *slot = f.ln();
            }
        }
        if let Some(r) = mdp.reward(ctx.response) {
            row[eos] = r.ln();
        }
        Ok(row)
    })?)
}

/// Probability of every terminal under `policy`, including the EOS step.
pub fn policy_terminal_dist<S: Scalar, P: Policy<S> + ?Sized>(
    policy: &P,
    mdp: &EnumMdp<S>,
) -> Result<BTreeMap<Vec<TokenId>, S>> {
    let shape = policy.shape();
    if shape != mdp.shape() {
        return Err(OracleError::Invalid("policy shape does not match the MDP".into()));
    }
    let eos = mdp.eos() as usize;
    let mut out = BTreeMap::new();
    let mut stack = vec![(Vec::new(), S::zero())];
    while let Some((state, logp)) = stack.pop() {
        let row = next_logprobs(policy, Context::new(&[], &state))?;
        if !state.is_empty() {
            out.insert(state.clone(), (logp + row[eos]).exp());
        }
        if state.len() < mdp.max_len {
            for a in 0..mdp.num_symbols {
                stack.push((with_eos(&state, a as TokenId), logp + row[a]));
            }
        }
    }
    Ok(out)
}

/// Total variation distance `1/2 sum |p - q|` over a shared support.
pub fn tv_distance<K: Ord, S: Scalar>(p: &BTreeMap<K, S>, q: &BTreeMap<K, S>) -> Result<S> {
    if p.len() != q.len() || p.keys().zip(q.keys()).any(|(a, b)| a != b) {
        return Err(OracleError::SupportMismatch);
    }
    let sum: S = p.values().zip(q.values()).map(|(&a, &b)| (a - b).abs()).sum();
    Ok(sum * lit(0.5))
}

/// Value and gradient of the all-edge detailed-balance objective.
///
/// `grad` receives `d/d log_z` at index 0 followed by the table's logit
/// gradients.
pub fn db_objective<S: Scalar>(
    mdp: &EnumMdp<S>,
    policy: &TabularPolicy<S>,
    log_z: S,
    mut grad: Option<&mut [S]>,
) -> Result<S> {
    let shape = mdp.shape();
    let eos = mdp.eos() as usize;
    let states = mdp.states()?;
    let mut rows: HashMap<&[TokenId], Vec<S>> = HashMap::with_capacity(states.len());
    for s in &states {
        let raw = policy.raw_logits(Context::new(&[], s))?;
        rows.insert(s.as_slice(), masked_log_softmax(&shape, s.len(), &raw));
    }
    let log_flow = |s: &[TokenId]| -> S {
        if s.is_empty() {
            log_z
        } else {
            mdp.reward(s).expect("terminal reward").ln() - rows[s][eos]
        }
    };
    let mut row_grads: HashMap<Vec<TokenId>, Vec<S>> = HashMap::new();
    let mut bump = |s: &[TokenId], idx: usize, g: S| {
        let e = row_grads.entry(s.to_vec()).or_insert_with(|| vec![S::zero(); eos + 1]);
        e[idx] = e[idx] + g;
    };
    let mut d_log_z = S::zero();
    let mut loss = S::zero();
    let two: S = lit(2.0);
    let want_grad = grad.is_some();
    for s in states.iter().filter(|s| s.len() < mdp.max_len) {
        let parent_flow = log_flow(s);
        for a in 0..mdp.num_symbols {
            let child = with_eos(s, a as TokenId);
            let r = parent_flow + rows[s.as_slice()][a] - log_flow(&child);
            loss = loss + r * r;
            if !want_grad {
                continue;
            }
            let g = two * r;
            bump(s, a, g);
            if s.is_empty() {
                d_log_z = d_log_z + g;
            } else {
                bump(s, eos, -g);
            }
            bump(&child, eos, g);
        }
    }
    if let Some(grad) = grad.as_deref_mut() {
        grad[0] = grad[0] + d_log_z;
        let table = &mut grad[1..];
        for (s, g) in &row_grads {
            let ctx = Context::new(&[], s);
            let dlogits = log_softmax_backward(&shape, s.len(), &rows[s.as_slice()], g);
            policy.accumulate_grad(ctx, &dlogits, table)?;
        }
    }
    Ok(loss)
}

/// Outcome of [`train_db_exact`].
#[derive(Debug, Clone)]
pub struct DbFit<S> {
    pub policy: TabularPolicy<S>,
    pub log_z: S,
    pub residual: S,
    pub steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DbTrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub tol: f64,
}

impl Default for DbTrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            lr: 0.05,
            tol: 1e-10,
        }
    }
}

/// Fits from the given starting point until the total squared residual is
/// below `cfg.tol`.
pub fn train_db_from<S: Scalar>(
    mdp: &EnumMdp<S>,
    mut policy: TabularPolicy<S>,
    mut log_z: S,
    cfg: &DbTrainConfig,
) -> Result<DbFit<S>> {
    let tol: S = lit(cfg.tol);
    let n = policy.params().len() + 1;
    let mut state = OptimState::new(n);
    let adam = AdamConfig::default();
    let mut flat = vec![S::zero(); n];
    let mut grad = vec![S::zero(); n];
    let mut lr = cfg.lr;
    let mut best = S::infinity();
    let mut since_best = 0usize;
    for step in 0..=cfg.steps {
        grad.iter_mut().for_each(|g| *g = S::zero());
        let loss = db_objective(mdp, &policy, log_z, Some(&mut grad))?;
        if loss < tol {
            return Ok(DbFit {
                policy,
                log_z,
                residual: loss,
                steps: step,
            });
        }
        if step == cfg.steps || !loss.is_finite() {
            return Err(OracleError::NotConverged {
                residual: loss.to_f64().unwrap_or(f64::NAN),
                steps: step,
            });
        }
        // Adam stalls at a noise floor set by lr; shrink it when progress stops.
        if loss < best {
            best = loss;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > 50 {
                lr *= 0.5;
                since_best = 0;
            }
        }
        flat[0] = log_z;
        flat[1..].copy_from_slice(policy.params());
        adam_step(&mut flat, &grad, &mut state, lr, &adam).map_err(|e| OracleError::Invalid(e.to_string()))?;
        log_z = flat[0];
        policy.params_mut().copy_from_slice(&flat[1..]);
    }
    unreachable!()
}

/// Trains from a seeded random table.
pub fn train_db_exact<S: Scalar>(mdp: &EnumMdp<S>, seed: u64, cfg: &DbTrainConfig) -> Result<DbFit<S>> {
    let mut rng = rng::stream(seed, "db-exact-init", 0);
    let policy = TabularPolicy::from_fn(mdp.shape(), &[vec![]], |_| {
        Ok((0..=mdp.num_symbols)
            .map(|_| lit::<S>(rng::uniform01(&mut rng) - 0.5))
            .collect())
    })?;
    train_db_from(mdp, policy, S::zero(), cfg)
}

/// Oracle check input file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdpSpec {
    /// One character per symbol; EOS is implicit.
    pub vocab: String,
    pub max_len: usize,
    pub rewards: BTreeMap<String, f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub steps: Option<usize>,
}

impl MdpSpec {
    pub fn to_mdp(&self) -> Result<EnumMdp<f64>> {
        let symbols: Vec<char> = self.vocab.chars().collect();
        let mut rewards = BTreeMap::new();
        for (text, &r) in &self.rewards {
            let toks = text
                .chars()
                .map(|c| {
                    symbols
                        .iter()
                        .position(|&s| s == c)
                        .map(|i| i as TokenId)
                        .ok_or_else(|| OracleError::Invalid(format!("{c:?} is not in the vocabulary")))
                })
                .collect::<Result<Vec<_>>>()?;
            if !(r > 0.0) {
                return Err(OracleError::NonPositiveReward(text.clone()));
            }
            rewards.insert(toks, r);
        }
        EnumMdp::new(symbols.len(), self.max_len, rewards)
    }

    pub fn render(&self, y: &[TokenId]) -> String {
        let symbols: Vec<char> = self.vocab.chars().collect();
        y.iter().map(|&t| symbols[t as usize]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerminalRow {
    pub response: String,
    pub reward: f64,
    pub target: f64,
    pub actual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub z: f64,
    pub learned_z: f64,
    pub residual: f64,
    pub tv: f64,
    pub steps: usize,
    pub terminals: Vec<TerminalRow>,
}

/// Exact flows, a detailed-balance fit and their comparison.
pub fn oracle_report(spec: &MdpSpec) -> Result<OracleReport> {
    let mdp = spec.to_mdp()?;
    let flows = exact_flows(&mdp)?;
    let cfg = DbTrainConfig {
        steps: spec.steps.unwrap_or(DbTrainConfig::default().steps),
        ..Default::default()
    };
    let fit = train_db_exact(&mdp, spec.seed, &cfg)?;
    let actual = policy_terminal_dist(&fit.policy, &mdp)?;
    let tv = tv_distance(&flows.target, &actual)?;
    let terminals = mdp
        .rewards()
        .iter()
        .map(|(y, &r)| TerminalRow {
            response: spec.render(y),
            reward: r,
            target: flows.target[y],
            actual: actual[y],
        })
        .collect();
    Ok(OracleReport {
        z: flows.z,
        learned_z: fit.log_z.exp(),
        residual: fit.residual,
        tv,
        steps: fit.steps,
        terminals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_rational::Ratio;

    fn toy_rewards() -> Vec<(Vec<TokenId>, i64)> {
        vec![
            (vec![0], 1),
            (vec![1], 3),
            (vec![0, 0], 2),
            (vec![0, 1], 2),
            (vec![1, 0], 4),
            (vec![1, 1], 2),
        ]
    }

    fn toy_f64() -> EnumMdp<f64> {
        EnumMdp::new(2, 2, toy_rewards().into_iter().map(|(k, v)| (k, v as f64)).collect()).unwrap()
    }

    #[test]
    fn toy_flows_exact_rational() {
        let mdp = EnumMdp::new(
            2,
            2,
            toy_rewards()
                .into_iter()
                .map(|(k, v)| (k, Ratio::from_integer(v)))
                .collect(),
        )
        .unwrap();
        let ft = exact_flows(&mdp).unwrap();
        assert_eq!(ft.z, Ratio::from_integer(14));
        assert_eq!(ft.target[&vec![1]], Ratio::new(3, 14));
        assert_eq!(ft.target[&vec![1, 0]], Ratio::new(4, 14));
        assert_eq!(ft.flows[&vec![0]], Ratio::from_integer(5));
        assert_eq!(ft.flows[&vec![1]], Ratio::from_integer(9));
        let total: Ratio<i64> = ft.target.values().cloned().sum();
        assert_eq!(total, Ratio::from_integer(1));
        for s in mdp.states().unwrap() {
            let step = ft.optimal_step(&mdp, &s).unwrap();
            let sum: Ratio<i64> = step.into_iter().sum();
            assert_eq!(sum, Ratio::from_integer(1), "state {s:?}");
        }
    }

    #[test]
    fn toy_flows_f64_and_f32() {
        let ft = exact_flows(&toy_f64()).unwrap();
        assert!((ft.z - 14.0).abs() < 1e-12);
        let mdp32 = EnumMdp::new(2, 2, toy_rewards().into_iter().map(|(k, v)| (k, v as f32)).collect()).unwrap();
        assert_eq!(exact_flows(&mdp32).unwrap().z, 14.0f32);
    }

    #[test]
    fn constant_reward_gives_uniform_target() {
        let mdp = EnumMdp::from_fn(2, 2, |_| 2.5f64).unwrap();
        let ft = exact_flows(&mdp).unwrap();
        assert_eq!(ft.target.len(), 6);
        for p in ft.target.values() {
            assert!((p - 1.0 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn flow_conservation_random() {
        let mut rng = rng::stream(5, "mdp", 0);
        let mdp = EnumMdp::from_fn(3, 4, |_| 0.5 + 4.5 * rng::uniform01(&mut rng)).unwrap();
        let ft = exact_flows(&mdp).unwrap();
        for s in mdp.states().unwrap() {
            let mut rhs = mdp.reward(&s).copied().unwrap_or(0.0);
            if s.len() < 4 {
                for a in 0..3 {
                    rhs += ft.flows[&with_eos(&s, a)];
                }
            }
            assert!((ft.flows[&s] - rhs).abs() <= 1e-12 * rhs);
        }
        let sum: f64 = ft.target.values().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_mdps() {
        assert!(matches!(
            EnumMdp::from_fn(2, 2, |y: &[TokenId]| if y == [1, 0] { 0.0 } else { 1.0 }),
            Err(OracleError::NonPositiveReward(_))
        ));
        assert!(EnumMdp::from_fn(6, 2, |_| 1.0).is_err());
        assert!(EnumMdp::from_fn(2, 6, |_| 1.0).is_err());
        let mut partial: BTreeMap<Vec<TokenId>, f64> = toy_f64().rewards().clone();
        partial.remove(&vec![1, 1]);
        assert!(EnumMdp::new(2, 2, partial).is_err());
    }

    #[test]
    fn tree_has_unique_parents() {
        let mdp = EnumMdp::from_fn(3, 3, |_| 1.0).unwrap();
        let states = mdp.states().unwrap();
        assert_eq!(states.len(), 1 + 3 + 9 + 27);
    }

    #[test]
    fn uniform_policy_terminal_probability() {
        let mdp = EnumMdp::from_fn(2, 2, |_| 1.0f64).unwrap();
        let p = TabularPolicy::<f64>::zeros(mdp.shape(), &[vec![]]);
        let dist = policy_terminal_dist(&p, &mdp).unwrap();
        assert!((dist[&vec![0]] - 1.0 / 6.0).abs() < 1e-15);
        assert!((dist[&vec![0, 1]] - 1.0 / 6.0).abs() < 1e-15);
        let total: f64 = dist.values().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn random_policy_dist_sums_to_one() {
        let mut rng = rng::stream(1, "pol", 0);
        let mdp = EnumMdp::from_fn(3, 4, |_| 1.0f64).unwrap();
        let p = TabularPolicy::<f64>::from_fn(mdp.shape(), &[vec![]], |_| {
            Ok((0..4).map(|_| 3.0 * rng::uniform01(&mut rng)).collect())
        })
        .unwrap();
        let total: f64 = policy_terminal_dist(&p, &mdp).unwrap().values().sum();
        assert!((total - 1.0).abs() < 1e-10);
    }

    #[test]
    fn optimal_policy_matches_target() {
        let mdp = toy_f64();
        let ft = exact_flows(&mdp).unwrap();
        let pi = optimal_policy(&mdp, &ft).unwrap();
        let dist = policy_terminal_dist(&pi, &mdp).unwrap();
        assert!(tv_distance(&dist, &ft.target).unwrap() < 1e-12);
        let loss = db_objective(&mdp, &pi, ft.z.ln(), None).unwrap();
        assert!(loss < 1e-12, "{loss}");
        let fit = train_db_from(&mdp, pi, ft.z.ln(), &DbTrainConfig::default()).unwrap();
        assert_eq!(fit.steps, 0);
    }

    #[test]
    fn tv_examples() {
        let m = |v: &[f64]| v.iter().copied().enumerate().collect::<BTreeMap<_, _>>();
        assert_eq!(tv_distance(&m(&[0.2, 0.8]), &m(&[0.2, 0.8])).unwrap(), 0.0);
        assert_eq!(tv_distance(&m(&[1.0, 0.0]), &m(&[0.0, 1.0])).unwrap(), 1.0);
        assert_eq!(tv_distance(&m(&[0.5, 0.5]), &m(&[0.75, 0.25])).unwrap(), 0.25);
        assert!(matches!(
            tv_distance(&m(&[1.0]), &m(&[0.5, 0.5])),
            Err(OracleError::SupportMismatch)
        ));
    }

    #[test]
    fn db_gradient_matches_finite_differences() {
        let mdp = toy_f64();
        let mut rng = rng::stream(3, "fd", 0);
        let pi = TabularPolicy::<f64>::from_fn(mdp.shape(), &[vec![]], |_| {
            Ok((0..3).map(|_| rng::uniform01(&mut rng) - 0.5).collect())
        })
        .unwrap();
        let log_z = 0.3;
        let mut grad = vec![0.0; pi.params().len() + 1];
        db_objective(&mdp, &pi, log_z, Some(&mut grad)).unwrap();
        let h = 1e-6;
        let f = |lz: f64, p: &TabularPolicy<f64>| db_objective(&mdp, p, lz, None).unwrap();
        let num = (f(log_z + h, &pi) - f(log_z - h, &pi)) / (2.0 * h);
        assert!((num - grad[0]).abs() < 1e-6 * num.abs().max(1.0));
        for i in 0..pi.params().len() {
            let mut up = pi.clone();
            up.params_mut()[i] += h;
            let mut dn = pi.clone();
            dn.params_mut()[i] -= h;
            let num = (f(log_z, &up) - f(log_z, &dn)) / (2.0 * h);
            assert!(
                (num - grad[i + 1]).abs() < 1e-6 * num.abs().max(1.0),
                "param {i}: {num} vs {}",
                grad[i + 1]
            );
        }
    }

    #[test]
    fn trained_policy_samples_proportionally() {
        let mdp = toy_f64();
        let ft = exact_flows(&mdp).unwrap();
        let fit = train_db_exact(&mdp, 1, &DbTrainConfig::default()).unwrap();
        assert!(fit.residual < 1e-10);
        let dist = policy_terminal_dist(&fit.policy, &mdp).unwrap();
        assert!(tv_distance(&dist, &ft.target).unwrap() < 1e-4);
        assert!((fit.log_z.exp() - 14.0).abs() < 1e-3);

        let fit2 = train_db_exact(&mdp, 2, &DbTrainConfig::default()).unwrap();
        let dist2 = policy_terminal_dist(&fit2.policy, &mdp).unwrap();
        assert!(tv_distance(&dist, &dist2).unwrap() < 1e-4);
    }

    #[test]
    fn spec_file_parsing() {
        let spec = MdpSpec {
            vocab: "ab".into(),
            max_len: 2,
            rewards: [
                ("a", 1.0),
                ("b", 3.0),
                ("aa", 2.0),
                ("ab", 2.0),
                ("ba", 4.0),
                ("bb", 2.0),
            ]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
            seed: 0,
            steps: None,
        };
        let report = oracle_report(&spec).unwrap();
        assert!((report.z - 14.0).abs() < 1e-12);
        assert!(report.tv < 1e-4);
        assert_eq!(report.terminals.len(), 6);
        let mut bad = spec.clone();
        bad.rewards.insert("bb".into(), 0.0);
        assert!(matches!(bad.to_mdp(), Err(OracleError::NonPositiveReward(_))));
    }
}
