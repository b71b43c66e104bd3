#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod instances;
pub mod linalg;
pub mod measure;
pub mod narrowness;
pub mod operators;
pub mod rounding;
pub mod spaces;
pub mod theorems;

pub use error::{Error, Result};
pub use measure::{AtomSet, Dyadic, MeasureSpace, Refinement, SignVector};
pub use operators::DiscreteOperator;
pub use spaces::TargetNorm;
