//! Token-level log-rewards for the detailed-balance objective.
//!
//! For a response `y = y_1 .. y_n` with `y_n = EOS`, position `k` carries
//!
//! ```text
//! log r_ref(k) = log pi_ref(y_k | x, y_<k) + exp(log pi_ref(EOS | x, y_<=k) / gamma)
//! log r(k)     = log r_ref(k) + [k = n] * log(p_pref) / alpha
//! ```
//!
//! where `p_pref` is 1 for the preferred response and `eps_pref` for the
//! rejected one. The preference term only exists at the EOS position; at
//! `k = n` the EOS probability is queried at the context that already ends
//! in EOS.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{PreferencePair, TokenId};
use crate::policy::{check_response, step_rows, with_eos, Policy, PolicyError};
use crate::scalar::{lit, Scalar};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RewardError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("non-finite reference log-probability at position {position}")]
    NonFinite { position: usize },
    #[error("position {k} outside 1..={n}")]
    Position { k: usize, n: usize },
    #[error("invalid reward config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, RewardError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub eps_pref: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            alpha: 5.0,
            gamma: 0.5,
            eps_pref: (-10f64).exp(),
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(RewardError::Config("alpha must be positive".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(RewardError::Config("gamma must lie in (0, 1]".into()));
        }
        if !(self.eps_pref > 0.0 && self.eps_pref < 1.0) {
            return Err(RewardError::Config("eps_pref must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Per-position arrays consumed by the detailed-balance loss. Index `i`
/// holds position `k = i + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenRewardTrack<S> {
    /// `log pi(y_k | x, y_<k)`
    pub logp: Vec<S>,
    /// `log pi(EOS | x, y_<=k)`
    pub eos_logp: Vec<S>,
    pub log_reward: Vec<S>,
    pub mask: Vec<bool>,
}

impl<S: Scalar> TokenRewardTrack<S> {
    pub fn len(&self) -> usize {
        self.logp.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logp.is_empty()
    }

    /// Extends every array to `len` with masked-out zeros.
    pub fn pad_to(&mut self, len: usize) {
        if len <= self.len() {
            return;
        }
        self.logp.resize(len, S::zero());
        self.eos_logp.resize(len, S::zero());
        self.log_reward.resize(len, S::zero());
        self.mask.resize(len, false);
    }
}

/// `exp(log p / gamma)`, the tempered EOS bonus.
pub fn eos_bonus<S: Scalar>(eos_logp: S, gamma: f64) -> S {
    (eos_logp / lit(gamma)).exp()
}

/// Reference log-reward of position `k` (1-based) of an EOS-terminated
/// response.
pub fn ref_token_log_reward<S: Scalar, P: Policy<S> + ?Sized>(
    pi_ref: &P,
    prompt: &[TokenId],
    response: &[TokenId],
    k: usize,
    gamma: f64,
) -> Result<S> {
    let n = response.len();
    if k == 0 || k > n {
        return Err(RewardError::Position { k, n });
    }
    let all = ref_log_rewards(pi_ref, prompt, response, gamma)?;
    Ok(all[k - 1])
}

/// Reference log-rewards for every position of an EOS-terminated response.
pub fn ref_log_rewards<S: Scalar, P: Policy<S> + ?Sized>(
    pi_ref: &P,
    prompt: &[TokenId],
    response: &[TokenId],
    gamma: f64,
) -> Result<Vec<S>> {
    let shape = pi_ref.shape();
    check_response(&shape, response)?;
    let rows = step_rows(pi_ref, prompt, response, response.len() + 1)?;
    let eos = shape.eos_id as usize;
    (0..response.len())
        .map(|i| {
            let lp = rows[i][response[i] as usize];
            let eos_lp = rows[i + 1][eos];
            if !lp.is_finite() || !eos_lp.is_finite() {
                return Err(RewardError::NonFinite { position: i + 1 });
            }
            Ok(lp + eos_bonus(eos_lp, gamma))
        })
        .collect()
}

/// Adds the preference term; it is nonzero only at the EOS position.
pub fn total_token_log_reward<S: Scalar>(
    ref_value: S,
    is_eos_position: bool,
    is_preferred: bool,
    cfg: &RewardConfig,
) -> S {
    if !is_eos_position || is_preferred {
        return ref_value;
    }
    ref_value + lit::<S>(cfg.eps_pref.ln() / cfg.alpha)
}

/// Full log-reward vector for one response of a pair.
pub fn response_log_rewards<S: Scalar, P: Policy<S> + ?Sized>(
    pi_ref: &P,
    prompt: &[TokenId],
    response: &[TokenId],
    is_preferred: bool,
    cfg: &RewardConfig,
) -> Result<Vec<S>> {
    let refs = ref_log_rewards(pi_ref, prompt, response, cfg.gamma)?;
    let n = refs.len();
    Ok(refs
        .into_iter()
        .enumerate()
        .map(|(i, r)| total_token_log_reward(r, i + 1 == n, is_preferred, cfg))
        .collect())
}

/// Assembles a track from the policy's log-prob rows (depths `0..=n`) and
/// precomputed log-rewards.
pub(crate) fn track_from_rows<S: Scalar>(
    rows: &[Vec<S>],
    response: &[TokenId],
    eos: TokenId,
    log_reward: Vec<S>,
) -> TokenRewardTrack<S> {
    let n = response.len();
    TokenRewardTrack {
        logp: (0..n).map(|i| rows[i][response[i] as usize]).collect(),
        eos_logp: (1..=n).map(|d| rows[d][eos as usize]).collect(),
        log_reward,
        mask: vec![true; n],
    }
}

/// Tracks for the chosen and rejected responses of a pair.
pub fn build_tracks<S: Scalar, P: Policy<S> + ?Sized, R: Policy<S> + ?Sized>(
    pi_hat: &P,
    pi_ref: &R,
    pair: &PreferencePair,
    cfg: &RewardConfig,
) -> Result<(TokenRewardTrack<S>, TokenRewardTrack<S>)> {
    cfg.validate()?;
    let eos = pi_hat.shape().eos_id;
    let build = |content: &[TokenId], preferred: bool| -> Result<TokenRewardTrack<S>> {
        let response = with_eos(content, eos);
        let rewards = response_log_rewards(pi_ref, &pair.prompt, &response, preferred, cfg)?;
        let rows = step_rows(pi_hat, &pair.prompt, &response, response.len() + 1)?;
        Ok(track_from_rows(&rows, &response, eos, rewards))
    };
    Ok((build(&pair.chosen, true)?, build(&pair.rejected, false)?))
}
