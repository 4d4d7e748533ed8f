//! Implicit graph neural networks.
//!
//! Node representations are computed as the fixed point of an equilibrium
//! equation `X = phi(W X A + b(U))` instead of a fixed number of
//! message-passing rounds, so information can travel arbitrarily far along
//! the graph. The crate provides:
//!
//! - fixed-point forward solvers for single- and multi-relation graphs
//!   ([`equilibrium`]),
//! - exact parameter gradients via an adjoint fixed-point solve
//!   ([`implicit_grad`]),
//! - Perron-Frobenius well-posedness checks, the norm constraints that keep
//!   training well-posed, and row-wise L1-ball projection ([`wellposed`]),
//! - graph/file ingestion and a synthetic chains benchmark generator
//!   ([`graph`]),
//! - the model layer: stacked equilibrium layers, heads, losses, metrics,
//!   and checkpointing ([`model`]),
//! - a projected-gradient training loop and the `ignn` command-line tool
//!   ([`train`], [`cli`]).
//!
//! See the `examples/` directory for one runnable program per capability.

pub mod cli;
pub mod equilibrium;
pub mod graph;
pub mod implicit_grad;
pub mod linalg;
pub mod model;
pub mod train;
pub mod wellposed;

pub use equilibrium::{Activation, BlockActivation, EquilibriumSolution};
pub use implicit_grad::{BForm, GradientBundle, InputMap};
pub use linalg::{DenseMatrix, SparseAdjacency};
