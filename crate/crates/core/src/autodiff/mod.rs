//! Reverse-mode automatic differentiation.

pub mod gradcheck;
pub mod kernels;
pub mod ledger;
pub mod tape;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use ledger::{ActivationLedger, LedgerRecord};
pub use tape::{Gradients, Tape, TapeMark, Var};
