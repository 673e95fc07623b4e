//! Core algorithms for robust decentralized grid path finding.
//!
//! This crate bundles everything needed to train and stress-test a
//! shared-policy navigation agent on a partially observed grid:
//!
//! * [`env`] — deterministic multi-agent grid simulator with local
//!   egocentric observations and team success metrics.
//! * [`net`] — the fixed actor-critic CNN backbone with hand-written
//!   reverse-mode gradients for both parameters and inputs, plus a
//!   binary checkpoint codec.
//! * [`attacks`] — gradient-based (FGSM/PGD) and stochastic observation
//!   perturbations under an asymmetric clipped l-infinity ball.
//! * [`ppo`] — rollouts, generalized advantage estimation, the clipped
//!   PPO surrogate, and Adam.
//! * [`robust`] — the adversarial training loop (training-time attacks,
//!   state-adversarial KL, local smoothness term, scheduled weights,
//!   robust checkpoint selection) and the certified-radius hinge
//!   fine-tune.
//! * [`cert`] — randomized-smoothing certification of action stability
//!   (normal quantile, Clopper-Pearson bound, Cohen procedure).
//! * [`eval`] — the deterministic attacked-evaluation grid, multi-restart
//!   PGD checks, paired bootstrap, and storyboard capture.
//!
//! The crate is `no_std` (with `alloc`) so the numerical kernels stay
//! free of platform dependencies; file IO, CLI wiring, and parallel
//! execution live in the companion `rmapf` crate. Parallelism is
//! injected through [`pool::JobPool`]; every public entry point produces
//! bit-identical results regardless of the pool used.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod attacks;
pub mod cert;
pub mod env;
pub mod eval;
pub mod math;
pub mod net;
pub mod pool;
pub mod ppo;
pub mod rng;
pub mod robust;
