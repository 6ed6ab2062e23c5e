//! Subequivariant graph-network policies for multi-joint control.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`tensor`]), the
//! gravity-aware message-passing network ([`net`]), PPO ([`ppo`]), two
//! deterministic environments ([`envs`]) and the training/verification
//! harness ([`harness`]).

pub mod envs;
pub mod harness;
pub mod morphology;
pub mod net;
pub mod ppo;
pub mod rng;
pub mod tensor;
