//! Equivalence proofs for arithmetic expressions by rewrite search.
//!
//! Expressions over `+`, `*` and three variables carry a focus marker that
//! selects where a rewrite fires. A proof is a sequence of rewrites taking one
//! expression to another, found by breadth-first search or by best-first
//! search guided by a Tree-LSTM distance model.

pub mod expr;
pub mod model;
pub mod numerics;
pub mod oracle;
pub mod rewrite;
pub mod search;
pub mod trainer;

pub use expr::{parse, Expr, ExprError, PostOrderSeq, Symbol, Var};
pub use rewrite::{apply, apply_path, check_certificate, neighbors, RewritePath, Transformation, Verdict};
