// SPDX-License-Identifier: Apache-2.0

//! Attack catalog, invariant oracle, seeded fuzzer and exhaustive
//! state-machine exploration.

pub mod explore;
pub mod fuzz;
pub mod invariants;
pub mod scenarios;

pub use explore::{explore, ExploreReport};
pub use fuzz::{fuzz, CallKind, FuzzConfig, FuzzReport, Fuzzer};
pub use invariants::{InvariantId, Oracle, Violation};
pub use scenarios::{catalog, run_all, run_scenario, AttackScenario, Outcome, Verdict};
