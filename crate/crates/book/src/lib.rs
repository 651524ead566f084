//! The guide under `book/`, compiled so that its snippets run as doctests.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/perturbations.md")]
pub mod perturbations {}
#[doc = include_str!("../../../book/src/advantages.md")]
pub mod advantages {}
#[doc = include_str!("../../../book/src/shaping.md")]
pub mod shaping {}
#[doc = include_str!("../../../book/src/toy-policy.md")]
pub mod toy_policy {}
#[doc = include_str!("../../../book/src/simulator.md")]
pub mod simulator {}
