//! Structural causal decision models: typed causal graphs with decisions and
//! utilities, composition and decomposition, static solvers, and dynamic
//! programming for recurring models.

pub mod bench;
pub mod cli;
pub mod composition;
pub mod dsl;
pub mod eval;
pub mod expr;
pub mod graph;
pub mod grid;
pub mod model;
pub mod quadrature;
pub mod scdp;
pub mod solver;

pub use graph::{CausalGraph, GraphBuilder, GraphError, VariableKind};
pub use model::{Constraint, Diagnostic, Distribution, Domain, ModelParts, Scdm};
