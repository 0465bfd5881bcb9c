//! Offline preference alignment of autoregressive token policies with a
//! GFlowNet detailed-balance loss, the usual pairwise baselines, exact flow
//! oracles on enumerable token trees, and sample-based evaluation.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix it to `f64`.

pub mod corpus;
pub mod evalmetrics;
pub mod hexfloat;
pub mod numerics;
pub mod objectives;
pub mod oracle;
pub mod policy;
pub mod rewards;
pub mod rng;
pub mod scalar;

pub use corpus::{PreferencePair, Task, TaskKind, TaskSpec, TokenId, Vocab};
pub use objectives::{LossConfig, Method};
pub use policy::{Context, Policy, PolicyShape, SamplingConfig};
pub use rewards::RewardConfig;
pub use scalar::Scalar;

pub type Real = f64;
pub type NeuralPolicy = policy::NeuralPolicy<Real>;
pub type TabularPolicy = policy::TabularPolicy<Real>;
pub type TokenRewardTrack = rewards::TokenRewardTrack<Real>;
pub type PreparedPair = objectives::PreparedPair<Real>;
pub type OptimState = numerics::OptimState<Real>;
pub type EnumMdp = oracle::EnumMdp<Real>;
pub type FlowTable = oracle::FlowTable<Real>;
