//! Chaotic dynamical systems as fixed deep-network backbones.
//!
//! This crate implements a family of classifiers in which a *fixed* chaotic
//! (or otherwise autonomous) dynamical system sits between two trainable
//! linear layers: the read-in maps the input to the system's initial state,
//! the system evolves for a finite horizon `T`, and the read-out maps the
//! final state to logits. Three backbones are provided — a discrete
//! echo-state map, the Lorenz-96 flow, and coupled spin-torque oscillators
//! governed by the Landau-Lifshitz-Gilbert equation — together with the
//! analysis machinery needed to study them: finite-time maximum Lyapunov
//! exponents (FTMLE), Benettin estimation of the asymptotic exponent,
//! tangent-linear propagation, reverse-mode gradients through the frozen
//! backbone (both backprop-through-steps and the adjoint method), and an
//! SGD-with-momentum training loop.
//!
//! The crate is `no_std` (with `alloc`); all transcendental functions go
//! through [`libm`] so results are bit-identical across platforms. Anything
//! that touches files, threads, or the network lives in the companion CLI
//! crate.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod data;
pub mod dynamics;
pub mod error;
pub mod fmath;
pub mod linalg;
pub mod lyapunov;
pub mod matrix;
pub mod models;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use rng::RngStream;
