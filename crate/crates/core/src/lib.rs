//! Search-reason-answer rollouts with in-loop evidence condensation.
//!
//! The crate covers the agent loop ([`rollout`]) and its tag grammar
//! ([`protocol`]), lexical retrieval ([`retrieval`]), condensation
//! ([`condenser`]), the relevance objective used to pretrain a condenser
//! ([`relevance`]), token-masked PPO on a toy environment ([`rl`]), QA
//! evaluation and efficiency accounting ([`evalkit`]), and distillation data
//! construction ([`distill`]).

pub mod backend;
pub mod condenser;
pub mod distill;
pub mod evalkit;
pub mod io;
pub mod protocol;
pub mod relevance;
pub mod retrieval;
pub mod rl;
pub mod rollout;
pub mod tokenize;

pub use backend::{GenerationBackend, GenerationRequest, GenerationResponse, Sampling};
pub use condenser::{AspectId, Condenser, Summary};
pub use protocol::{Action, StopReason};
pub use retrieval::{CorpusIndex, Document, Retriever};
pub use rollout::{RolloutConfig, RolloutEngine, Segment, SegmentKind, Trajectory, TrajectoryRecord};
