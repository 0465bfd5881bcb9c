//! Training objectives: the detailed-balance loss and the offline baselines.
//!
//! Sequence-level baselines use, per pair,
//!
//! ```text
//! L+ = log pi(y+ EOS | x)     R+ = log pi_ref(y+ EOS | x)     (likewise -)
//! h  = (L+ - R+) - (L- - R-)  m  = L+ - L-                    |y| = tokens incl. EOS
//!
//! dpo   softplus(-beta h)
//! ipo   (h - 1/(2 beta))^2
//! cpo   softplus(-beta m) - lambda_cpo L+/|y+|
//! slic  max(0, delta - beta m) - lambda_cpo L+/|y+|
//! orpo  -L+/|y+| + lambda_orpo softplus(-log OR)
//! ```
//!
//! ORPO's odds use the length-normalized log-probability clamped to at most
//! `-1e-6`. Every batch loss is the mean over pairs.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{PreferencePair, TokenId};
use crate::numerics::{Differentiable, NumericError};
use crate::policy::{backprop_rows, check_response, seq_logprob, step_rows, with_eos, Policy, PolicyError};
use crate::rewards::{response_log_rewards, track_from_rows, RewardConfig, RewardError, TokenRewardTrack};
use crate::scalar::{lit, sigmoid, softplus, Scalar};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error("non-finite {what} at position {position}")]
    NonFinite { what: &'static str, position: usize },
    #[error("invalid loss config: {0}")]
    Config(String),
    #[error("method {0} needs reference log-probabilities")]
    MissingReference(Method),
}

pub type Result<T> = std::result::Result<T, ObjectiveError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Sft,
    Dpo,
    Ipo,
    Cpo,
    Slic,
    Orpo,
    Gdpo,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Sft,
        Method::Dpo,
        Method::Ipo,
        Method::Cpo,
        Method::Slic,
        Method::Orpo,
        Method::Gdpo,
    ];

    pub const ALIGNMENT: [Method; 6] = [
        Method::Dpo,
        Method::Ipo,
        Method::Cpo,
        Method::Slic,
        Method::Orpo,
        Method::Gdpo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Sft => "sft",
            Method::Dpo => "dpo",
            Method::Ipo => "ipo",
            Method::Cpo => "cpo",
            Method::Slic => "slic",
            Method::Orpo => "orpo",
            Method::Gdpo => "gdpo",
        }
    }

    /// Whether the loss reads reference-policy quantities.
    pub fn needs_reference(self) -> bool {
        matches!(self, Method::Dpo | Method::Ipo | Method::Gdpo)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = ObjectiveError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| ObjectiveError::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub method: Method,
    pub beta: f64,
    pub lambda_cpo: f64,
    pub delta_slic: f64,
    pub lambda_orpo: f64,
    pub reward: RewardConfig,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            method: Method::Gdpo,
            beta: 0.1,
            lambda_cpo: 1.0,
            delta_slic: 1.0,
            lambda_orpo: 0.05,
            reward: RewardConfig::default(),
        }
    }
}

impl LossConfig {
    pub fn with_method(method: Method) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(ObjectiveError::Config("beta must be positive".into()));
        }
        for (name, v) in [
            ("lambda_cpo", self.lambda_cpo),
            ("delta_slic", self.delta_slic),
            ("lambda_orpo", self.lambda_orpo),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(ObjectiveError::Config(format!("{name} must be nonnegative")));
            }
        }
        self.reward.validate()?;
        Ok(())
    }
}

/// Detailed-balance residuals of one track: `log_f = log_reward - eos_logp`,
/// `res[k] = log_f[k] - log_f[k+1] + logp[k+1]`, live where both positions
/// are masked in.
pub fn db_residuals<S: Scalar>(track: &TokenRewardTrack<S>) -> Result<Vec<Option<S>>> {
    let n = track.len();
    if track.eos_logp.len() != n || track.log_reward.len() != n || track.mask.len() != n {
        return Err(ObjectiveError::Config("track arrays differ in length".into()));
    }
    for i in (0..n).filter(|&i| track.mask[i]) {
        let finite = [
            ("logp", track.logp[i]),
            ("eos_logp", track.eos_logp[i]),
            ("log_reward", track.log_reward[i]),
        ];
        if let Some((what, _)) = finite.iter().find(|(_, v)| !v.is_finite()) {
            return Err(ObjectiveError::NonFinite { what, position: i + 1 });
        }
    }
    let log_f = |i: usize| track.log_reward[i] - track.eos_logp[i];
    Ok((0..n.saturating_sub(1))
        .map(|i| (track.mask[i] && track.mask[i + 1]).then(|| log_f(i) - log_f(i + 1) + track.logp[i + 1]))
        .collect())
}

/// Sum of squared detailed-balance residuals for one response.
pub fn gdpo_db_loss<S: Scalar>(track: &TokenRewardTrack<S>) -> Result<S> {
    Ok(db_residuals(track)?.into_iter().flatten().map(|r| r * r).sum())
}

/// Loss plus gradients with respect to `logp` and `eos_logp`.
pub fn gdpo_db_loss_grad<S: Scalar>(track: &TokenRewardTrack<S>) -> Result<(S, Vec<S>, Vec<S>)> {
    let res = db_residuals(track)?;
    let n = track.len();
    let mut d_logp = vec![S::zero(); n];
    let mut d_eos = vec![S::zero(); n];
    let mut loss = S::zero();
    let two = lit::<S>(2.0);
    for (i, r) in res.iter().enumerate() {
        if let Some(r) = *r {
            loss = loss + r * r;
            let g = two * r;
            d_logp[i + 1] = d_logp[i + 1] + g;
            // log_f[i] enters with +1 and log_f[i+1] with -1; eos_logp enters log_f with -1
            d_eos[i] = d_eos[i] - g;
            d_eos[i + 1] = d_eos[i + 1] + g;
        }
    }
    Ok((loss, d_logp, d_eos))
}

/// Reference-side quantities for one pair, computed once and frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTerms<S> {
    pub chosen_logprob: S,
    pub rejected_logprob: S,
    pub chosen_log_rewards: Vec<S>,
    pub rejected_log_rewards: Vec<S>,
}

/// A pair with EOS-terminated responses and (optionally) its reference terms.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedPair<S> {
    pub prompt: Vec<TokenId>,
    pub chosen: Vec<TokenId>,
    pub rejected: Vec<TokenId>,
    pub reference: Option<ReferenceTerms<S>>,
}

pub fn prepare_pair<S: Scalar, R: Policy<S> + ?Sized>(
    pair: &PreferencePair,
    eos: TokenId,
    pi_ref: Option<&R>,
    reward: &RewardConfig,
) -> Result<PreparedPair<S>> {
    let chosen = with_eos(&pair.chosen, eos);
    let rejected = with_eos(&pair.rejected, eos);
    let reference = match pi_ref {
        None => None,
        Some(r) => Some(ReferenceTerms {
            chosen_logprob: seq_logprob(r, &pair.prompt, &chosen)?,
            rejected_logprob: seq_logprob(r, &pair.prompt, &rejected)?,
            chosen_log_rewards: response_log_rewards(r, &pair.prompt, &chosen, true, reward)?,
            rejected_log_rewards: response_log_rewards(r, &pair.prompt, &rejected, false, reward)?,
        }),
    };
    Ok(PreparedPair {
        prompt: pair.prompt.clone(),
        chosen,
        rejected,
        reference,
    })
}

pub fn prepare_pairs<S: Scalar, R: Policy<S> + ?Sized>(
    pairs: &[PreferencePair],
    eos: TokenId,
    pi_ref: Option<&R>,
    reward: &RewardConfig,
) -> Result<Vec<PreparedPair<S>>> {
    pairs.iter().map(|p| prepare_pair(p, eos, pi_ref, reward)).collect()
}

/// Batch means reported alongside a loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchStats<S> {
    pub loss: S,
    /// Mean of `L+ - L-` under the trained policy.
    pub margin: S,
}

/// Gradients of a per-pair loss with respect to `L+` and `L-`.
struct SeqGrad<S> {
    loss: S,
    d_chosen: S,
    d_rejected: S,
}

fn sequence_loss<S: Scalar>(
    cfg: &LossConfig,
    lp_c: S,
    lp_r: S,
    len_c: usize,
    len_r: usize,
    reference: Option<&ReferenceTerms<S>>,
) -> Result<SeqGrad<S>> {
    let beta: S = lit(cfg.beta);
    let n_c: S = lit(len_c as f64);
    let n_r: S = lit(len_r as f64);
    let margin = lp_c - lp_r;
    let log_ratio_gap = || -> Result<S> {
        let r = reference.ok_or(ObjectiveError::MissingReference(cfg.method))?;
        Ok((lp_c - r.chosen_logprob) - (lp_r - r.rejected_logprob))
    };
    Ok(match cfg.method {
        Method::Sft => SeqGrad {
            loss: -lp_c,
            d_chosen: -S::one(),
            d_rejected: S::zero(),
        },
        Method::Dpo => {
            let h = log_ratio_gap()?;
            let dh = -beta * sigmoid(-beta * h);
            SeqGrad {
                loss: softplus(-beta * h),
                d_chosen: dh,
                d_rejected: -dh,
            }
        }
        Method::Ipo => {
            let h = log_ratio_gap()?;
            let centered = h - S::one() / (lit::<S>(2.0) * beta);
            let dh = lit::<S>(2.0) * centered;
            SeqGrad {
                loss: centered * centered,
                d_chosen: dh,
                d_rejected: -dh,
            }
        }
        Method::Cpo => {
            let lambda: S = lit(cfg.lambda_cpo);
            let dm = -beta * sigmoid(-beta * margin);
            SeqGrad {
                loss: softplus(-beta * margin) - lambda * lp_c / n_c,
                d_chosen: dm - lambda / n_c,
                d_rejected: -dm,
            }
        }
        Method::Slic => {
            let lambda: S = lit(cfg.lambda_cpo);
            let hinge = lit::<S>(cfg.delta_slic) - beta * margin;
            let dm = if hinge > S::zero() { -beta } else { S::zero() };
            SeqGrad {
                loss: hinge.max(S::zero()) - lambda * lp_c / n_c,
                d_chosen: dm - lambda / n_c,
                d_rejected: -dm,
            }
        }
        Method::Orpo => {
            let lambda: S = lit(cfg.lambda_orpo);
            let cap: S = lit(-1e-6);
            // log odds of a length-normalized log-prob and its derivative
            let log_odds = |l: S| -> (S, S) {
                if l > cap {
                    (cap - (-cap.exp_m1()).ln(), S::zero())
                } else {
                    (l - (-l.exp_m1()).ln(), -S::one() / l.exp_m1())
                }
            };
            let (lo_c, dlo_c) = log_odds(lp_c / n_c);
            let (lo_r, dlo_r) = log_odds(lp_r / n_r);
            let log_or = lo_c - lo_r;
            let d_or = -lambda * sigmoid(-log_or);
            SeqGrad {
                loss: -lp_c / n_c + lambda * softplus(-log_or),
                d_chosen: -S::one() / n_c + d_or * dlo_c / n_c,
                d_rejected: -d_or * dlo_r / n_r,
            }
        }
        Method::Gdpo => unreachable!("gdpo is not a sequence-level loss"),
    })
}

/// Mean loss over `batch`; when `grad` is given, adds the gradient of the
/// mean with respect to the policy parameters.
pub fn batch_loss<S: Scalar, P: Policy<S> + ?Sized>(
    policy: &P,
    batch: &[PreparedPair<S>],
    cfg: &LossConfig,
    mut grad: Option<&mut [S]>,
) -> Result<BatchStats<S>> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(ObjectiveError::Config("empty batch".into()));
    }
    let shape = policy.shape();
    let eos = shape.eos_id;
    let scale = S::one() / lit::<S>(batch.len() as f64);
    let mut total = S::zero();
    let mut margin_total = S::zero();
    for pair in batch {
        check_response(&shape, &pair.chosen)?;
        check_response(&shape, &pair.rejected)?;
        let extra = usize::from(cfg.method == Method::Gdpo);
        let rows_c = step_rows(policy, &pair.prompt, &pair.chosen, pair.chosen.len() + extra)?;
        let rows_r = step_rows(policy, &pair.prompt, &pair.rejected, pair.rejected.len() + extra)?;
        let seq = |rows: &[Vec<S>], resp: &[TokenId]| -> S {
            resp.iter().enumerate().map(|(d, &t)| rows[d][t as usize]).sum()
        };
        let (lp_c, lp_r) = (seq(&rows_c, &pair.chosen), seq(&rows_r, &pair.rejected));
        margin_total = margin_total + (lp_c - lp_r);

        let zero_grads = |rows: &[Vec<S>]| -> Vec<Vec<S>> { rows.iter().map(|r| vec![S::zero(); r.len()]).collect() };
        let mut g_c = zero_grads(&rows_c);
        let mut g_r = zero_grads(&rows_r);

        if cfg.method == Method::Gdpo {
            let reference = pair
                .reference
                .as_ref()
                .ok_or(ObjectiveError::MissingReference(cfg.method))?;
            for (rows, resp, rewards, g) in [
                (&rows_c, &pair.chosen, &reference.chosen_log_rewards, &mut g_c),
                (&rows_r, &pair.rejected, &reference.rejected_log_rewards, &mut g_r),
            ] {
                let track = track_from_rows(rows, resp, eos, rewards.clone());
                let (loss, d_logp, d_eos) = gdpo_db_loss_grad(&track)?;
                total = total + loss;
                for (i, &t) in resp.iter().enumerate() {
                    g[i][t as usize] = g[i][t as usize] + d_logp[i] * scale;
                    g[i + 1][eos as usize] = g[i + 1][eos as usize] + d_eos[i] * scale;
                }
            }
        } else {
            let sg = sequence_loss(
                cfg,
                lp_c,
                lp_r,
                pair.chosen.len(),
                pair.rejected.len(),
                pair.reference.as_ref(),
            )?;
            if !sg.loss.is_finite() {
                return Err(ObjectiveError::NonFinite {
                    what: "loss",
                    position: 0,
                });
            }
            total = total + sg.loss;
            for (d, &t) in pair.chosen.iter().enumerate() {
                g_c[d][t as usize] = sg.d_chosen * scale;
            }
            for (d, &t) in pair.rejected.iter().enumerate() {
                g_r[d][t as usize] = sg.d_rejected * scale;
            }
        }

        if let Some(grad) = grad.as_deref_mut() {
            backprop_rows(policy, &pair.prompt, &pair.chosen, &rows_c, &g_c, grad)?;
            backprop_rows(policy, &pair.prompt, &pair.rejected, &rows_r, &g_r, grad)?;
        }
    }
    Ok(BatchStats {
        loss: total * scale,
        margin: margin_total * scale,
    })
}

/// Supervised negative log-likelihood of the chosen response.
pub fn sft_loss<S: Scalar, P: Policy<S> + ?Sized>(pi_hat: &P, pair: &PreferencePair) -> Result<S> {
    let prepared = prepare_pair::<S, P>(pair, pi_hat.shape().eos_id, None, &RewardConfig::default())?;
    Ok(batch_loss(pi_hat, &[prepared], &LossConfig::with_method(Method::Sft), None)?.loss)
}

/// Per-pair loss of one of the pairwise baselines.
pub fn pairwise_baseline_loss<S: Scalar, P: Policy<S> + ?Sized, R: Policy<S> + ?Sized>(
    pi_hat: &P,
    pi_ref: &R,
    pair: &PreferencePair,
    cfg: &LossConfig,
) -> Result<S> {
    if matches!(cfg.method, Method::Sft | Method::Gdpo) {
        return Err(ObjectiveError::Config(format!(
            "{} is not a pairwise baseline",
            cfg.method
        )));
    }
    let prepared = prepare_pair(pair, pi_hat.shape().eos_id, Some(pi_ref), &cfg.reward)?;
    Ok(batch_loss(pi_hat, &[prepared], cfg, None)?.loss)
}

/// A policy, a prepared batch and a loss config, seen as a function of the
/// policy parameters.
pub struct PolicyObjective<'a, S, P> {
    pub policy: &'a P,
    pub batch: &'a [PreparedPair<S>],
    pub cfg: &'a LossConfig,
}

impl<S: Scalar, P: Policy<S> + Clone> PolicyObjective<'_, S, P> {
    fn with_params(&self, params: &[S]) -> P {
        let mut p = self.policy.clone();
        p.params_mut().copy_from_slice(params);
        p
    }
}

fn upstream(e: ObjectiveError) -> NumericError {
    match e {
        ObjectiveError::NonFinite { what, position } => {
            NumericError::NonFinite(format!("{what} at position {position}"))
        }
        other => NumericError::Upstream(other.to_string()),
    }
}

impl<S: Scalar, P: Policy<S> + Clone> Differentiable<S> for PolicyObjective<'_, S, P> {
    fn value(&self, params: &[S]) -> std::result::Result<S, NumericError> {
        let p = self.with_params(params);
        Ok(batch_loss(&p, self.batch, self.cfg, None).map_err(upstream)?.loss)
    }

    fn value_and_grad(&self, params: &[S]) -> std::result::Result<(S, Vec<S>), NumericError> {
        let p = self.with_params(params);
        let mut grad = vec![S::zero(); params.len()];
        let stats = batch_loss(&p, self.batch, self.cfg, Some(&mut grad)).map_err(upstream)?;
        Ok((stats.loss, grad))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::fd_check;
    use crate::policy::{NeuralDims, NeuralPolicy, PolicyShape};
    use crate::rewards::build_tracks;

    fn shape() -> PolicyShape {
        PolicyShape {
            vocab_size: 5,
            eos_id: 4,
            sep_id: Some(3),
            max_response_len: 5,
        }
    }

    fn dims() -> NeuralDims {
        NeuralDims {
            embed_dim: 4,
            window: 4,
            hidden: 6,
        }
    }

    fn pair() -> PreferencePair {
        PreferencePair {
            prompt: vec![0, 2],
            chosen: vec![1, 0],
            rejected: vec![2, 2, 1],
        }
    }

    #[test]
    fn db_single_transition() {
        let track = TokenRewardTrack {
            logp: vec![-0.3, -0.5],
            eos_logp: vec![0.0, 0.0],
            log_reward: vec![2.0, 1.5],
            mask: vec![true, true],
        };
        assert!(gdpo_db_loss::<f64>(&track).unwrap().abs() < 1e-15);
        let track = TokenRewardTrack {
            log_reward: vec![2.0, 1.0],
            ..track
        };
        assert!((gdpo_db_loss::<f64>(&track).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn db_masking() {
        let mut track = TokenRewardTrack {
            logp: vec![-0.3, -0.5, -1.0],
            eos_logp: vec![-2.0, -1.0, -0.1],
            log_reward: vec![0.4, 1.5, -0.7],
            mask: vec![true, true, true],
        };
        let full = gdpo_db_loss(&track).unwrap();
        track.pad_to(6);
        assert_eq!(gdpo_db_loss(&track).unwrap(), full);
        track.logp[4] = 123.0;
        track.eos_logp[5] = f64::NAN;
        assert_eq!(gdpo_db_loss(&track).unwrap(), full);
        track.logp[1] = f64::INFINITY;
        assert!(matches!(
            gdpo_db_loss(&track),
            Err(ObjectiveError::NonFinite {
                what: "logp",
                position: 2
            })
        ));
    }

    #[test]
    fn db_loss_is_nonnegative() {
        let track = TokenRewardTrack {
            logp: vec![-0.3, -0.5, -1.0, -2.0],
            eos_logp: vec![-2.0, -1.0, -0.1, -3.0],
            log_reward: vec![0.4, 1.5, -0.7, 0.0],
            mask: vec![true; 4],
        };
        assert!(gdpo_db_loss(&track).unwrap() > 0.0);
    }

    #[test]
    fn dpo_and_ipo_at_reference() {
        let p = NeuralPolicy::<f64>::new(shape(), dims(), 4);
        let dpo = pairwise_baseline_loss(&p, &p, &pair(), &LossConfig::with_method(Method::Dpo)).unwrap();
        assert!((dpo - 2f64.ln()).abs() < 1e-12);
        let ipo = pairwise_baseline_loss(&p, &p, &pair(), &LossConfig::with_method(Method::Ipo)).unwrap();
        assert!((ipo - 25.0).abs() < 1e-9);
    }

    #[test]
    fn sft_values() {
        let uniform = NeuralPolicy::<f64>::zeroed(shape(), dims());
        // three content symbols; depth 0 has 3 choices, depths 1..2 have 4
        let l = sft_loss(&uniform, &pair()).unwrap();
        let expected = 3f64.ln() + 2.0 * 4f64.ln();
        assert!((l - expected).abs() < 1e-12);
        let mut other = pair();
        other.rejected = vec![0];
        assert_eq!(sft_loss(&uniform, &other).unwrap(), l);
    }

    #[test]
    fn slic_hinge_satisfied() {
        let p = NeuralPolicy::<f64>::new(shape(), dims(), 4);
        let pr = pair();
        let eos = 4;
        let lp_c = seq_logprob(&p, &pr.prompt, &with_eos(&pr.chosen, eos)).unwrap();
        let lp_r = seq_logprob(&p, &pr.prompt, &with_eos(&pr.rejected, eos)).unwrap();
        let margin: f64 = lp_c - lp_r;
        let cfg = LossConfig {
            method: Method::Slic,
            lambda_cpo: 0.0,
            beta: 1.0,
            delta_slic: margin - 0.5,
            ..Default::default()
        };
        if cfg.delta_slic >= 0.0 {
            assert_eq!(pairwise_baseline_loss(&p, &p, &pr, &cfg).unwrap(), 0.0);
        }
        let cfg = LossConfig {
            delta_slic: 0.0,
            beta: 1.0,
            ..cfg
        };
        // swapped labels make the margin positive for one ordering
        let swapped = PreferencePair {
            chosen: pr.rejected.clone(),
            rejected: pr.chosen.clone(),
            prompt: pr.prompt.clone(),
        };
        let (a, b) = (
            pairwise_baseline_loss(&p, &p, &pr, &cfg).unwrap(),
            pairwise_baseline_loss(&p, &p, &swapped, &cfg).unwrap(),
        );
        assert!(a == 0.0 || b == 0.0);
    }

    #[test]
    fn unknown_method() {
        assert!("ppo".parse::<Method>().is_err());
        assert_eq!("orpo".parse::<Method>().unwrap(), Method::Orpo);
        let p = NeuralPolicy::<f64>::new(shape(), dims(), 4);
        assert!(pairwise_baseline_loss(&p, &p, &pair(), &LossConfig::with_method(Method::Gdpo)).is_err());
    }

    #[test]
    fn reference_required() {
        let p = NeuralPolicy::<f64>::new(shape(), dims(), 4);
        let prepared = prepare_pair::<f64, NeuralPolicy<f64>>(&pair(), 4, None, &RewardConfig::default()).unwrap();
        for m in [Method::Dpo, Method::Ipo, Method::Gdpo] {
            assert!(matches!(
                batch_loss(&p, std::slice::from_ref(&prepared), &LossConfig::with_method(m), None),
                Err(ObjectiveError::MissingReference(_))
            ));
        }
        for m in [Method::Sft, Method::Cpo, Method::Slic, Method::Orpo] {
            assert!(batch_loss(&p, std::slice::from_ref(&prepared), &LossConfig::with_method(m), None).is_ok());
        }
    }

    #[test]
    fn batch_gdpo_matches_tracks() {
        let pi = NeuralPolicy::<f64>::new(shape(), dims(), 4);
        let reference = NeuralPolicy::<f64>::new(shape(), dims(), 5);
        let cfg = LossConfig::default();
        let pr = pair();
        let (plus, minus) = build_tracks(&pi, &reference, &pr, &cfg.reward).unwrap();
        let expected = gdpo_db_loss(&plus).unwrap() + gdpo_db_loss(&minus).unwrap();
        let prepared = prepare_pair(&pr, 4, Some(&reference), &cfg.reward).unwrap();
        let got = batch_loss(&pi, &[prepared], &cfg, None).unwrap().loss;
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn all_objectives_pass_fd_check() {
        let pi = NeuralPolicy::<f64>::new(shape(), dims(), 7);
        let reference = NeuralPolicy::<f64>::new(shape(), dims(), 8);
        let pairs = vec![
            pair(),
            PreferencePair {
                prompt: vec![1],
                chosen: vec![0, 0, 0, 1, 2],
                rejected: vec![1],
            },
        ];
        for method in Method::ALL {
            let cfg = LossConfig {
                method,
                beta: 0.5,
                ..Default::default()
            };
            let batch = prepare_pairs(&pairs, 4, Some(&reference), &cfg.reward).unwrap();
            let obj = PolicyObjective {
                policy: &pi,
                batch: &batch,
                cfg: &cfg,
            };
            let r = fd_check(&obj, pi.params(), 1e-5, 3).unwrap();
            assert!(r.max_rel_error < 1e-4, "{method}: {r:?}");
        }
    }
}
