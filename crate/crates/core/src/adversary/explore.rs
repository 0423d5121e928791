// SPDX-License-Identifier: Apache-2.0

//! Exhaustive enumeration of protection-change call sequences against the
//! root firmware on a small machine.
//!
//! The alphabet is every SMC kind on every granule, each issued either with
//! the matching hypervisor request logged first or with nothing logged.
//! Each call runs in its own RMI window, so the firmware state after a call
//! is fully described by the two tables. Sequences that land in a state
//! already expanded at the same or a smaller depth are merged; their
//! continuations are identical.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use super::invariants::DYNAMIC_PAIRS;
use crate::memory::{CoreId, GranuleId, Machine, PasValue, World};
use crate::root::{boot_create_gpts, MachineLayout, RootMonitor, SmcCall};

type Pair = (PasValue, PasValue);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Symbol {
    pub call: SmcCall,
    pub authorized: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExploreReport {
    pub granules: u64,
    pub depth: usize,
    pub alphabet: usize,
    /// Distinct table states reached.
    pub states: usize,
    /// Calls executed while expanding states.
    pub transitions: u64,
    /// Number of call sequences of length <= depth, all of which were covered.
    pub sequences: u128,
    pub reached: BTreeSet<Pair>,
    /// Departures from the allowed pairs or stale views after a call.
    pub problems: Vec<String>,
    /// Shortest witness sequence for each reached pair.
    pub witnesses: BTreeMap<String, Vec<String>>,
}

const REALM: u32 = 1;

pub fn alphabet(granules: u64) -> Vec<Symbol> {
    let mut out = vec![];
    for g in (0..granules).map(GranuleId) {
        let calls = [
            SmcCall::Delegate(g),
            SmcCall::Undelegate(g),
            SmcCall::Share {
                granule: g,
                realm: REALM,
            },
            SmcCall::Unshare {
                granule: g,
                realm: REALM,
            },
            SmcCall::ExAccess {
                granule: g,
                enable: true,
            },
            SmcCall::ExAccess {
                granule: g,
                enable: false,
            },
        ];
        for call in calls {
            out.push(Symbol { call, authorized: true });
            if call.authorizing_rmi().is_some() {
                out.push(Symbol {
                    call,
                    authorized: false,
                });
            }
        }
    }
    out
}

fn describe(s: &Symbol) -> String {
    let base = match s.call {
        SmcCall::ExAccess { enable, .. } => format!("{}({})", s.call.name(), if enable { "on" } else { "off" }),
        c => c.name().to_string(),
    };
    let auth = if s.authorized || s.call.authorizing_rmi().is_none() {
        ""
    } else {
        " unlogged"
    };
    format!("{base} g{}{auth}", s.call.granule().0)
}

/// Applies one symbol from realm-world core 0 inside a fresh RMI window.
fn apply(m: &mut Machine, tf: &mut RootMonitor, s: &Symbol) {
    let core = CoreId(0);
    if s.authorized {
        if let Some(rmi) = s.call.authorizing_rmi() {
            let realm = matches!(s.call, SmcCall::Share { .. } | SmcCall::Unshare { .. }).then_some(REALM);
            m.ensure_world(CoreId(1), World::Normal);
            tf.log_rmi(m, CoreId(1), rmi.name(), Some(s.call.granule()), realm);
        }
    }
    m.ensure_world(core, World::Realm);
    let _ = tf.smc(m, core, s.call);
    tf.expire_log();
}

fn key(m: &Machine) -> Vec<Pair> {
    (0..m.num_granules())
        .map(|g| m.gpt_pair(GranuleId(g)).expect("in range"))
        .collect()
}

/// Breadth-first enumeration to `depth` calls on an all-normal machine.
pub fn explore(granules: u64, depth: usize) -> ExploreReport {
    let (n, rs) = boot_create_gpts(&MachineLayout::all_normal(granules)).expect("valid layout");
    let mut m0 = Machine::new(n, rs, 2);
    m0.trace_mut().take_events();
    let tf0 = RootMonitor::new();
    let syms = alphabet(granules);
    let a = syms.len() as u128;

    let mut report = ExploreReport {
        granules,
        depth,
        alphabet: syms.len(),
        sequences: (0..=depth as u32).map(|d| a.pow(d)).sum(),
        ..ExploreReport::default()
    };
    let mut seen: BTreeMap<Vec<Pair>, usize> = BTreeMap::new();
    let mut queue = VecDeque::new();
    seen.insert(key(&m0), 0);
    queue.push_back((m0, tf0, 0usize, Vec::<String>::new()));

    while let Some((m, tf, d, path)) = queue.pop_front() {
        for (g, pair) in key(&m).into_iter().enumerate() {
            if !DYNAMIC_PAIRS.contains(&pair) {
                report.problems.push(format!("granule {g} in {pair:?} after {path:?}"));
            }
            if report.reached.insert(pair) {
                report.witnesses.insert(format!("{} {}", pair.0, pair.1), path.clone());
            }
        }
        for core in m.cores() {
            let Some(gpt) = core.sec_state().gpt() else { continue };
            for (&g, &pas) in core.tlb() {
                if m.gpt(gpt).get(GranuleId(g)) != Some(pas) {
                    report
                        .problems
                        .push(format!("core {} stale on granule {g} after {path:?}", core.id().0));
                }
            }
        }
        if d == depth {
            continue;
        }
        for s in &syms {
            let (mut m2, mut tf2) = (m.clone(), tf.clone());
            apply(&mut m2, &mut tf2, s);
            m2.trace_mut().take_events();
            report.transitions += 1;
            let k = key(&m2);
            if seen.get(&k).is_some_and(|&sd| sd <= d + 1) {
                continue;
            }
            seen.insert(k, d + 1);
            let mut p = path.clone();
            p.push(describe(s));
            queue.push_back((m2, tf2, d + 1, p));
        }
    }
    report.states = seen.len();
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_granule_depth_two() {
        let r = explore(1, 2);
        assert!(r.problems.is_empty(), "{:?}", r.problems);
        // Delegate then share reaches the shared state in two calls;
        // exclusive access needs a third.
        assert_eq!(r.reached.len(), 3);
        assert_eq!(r.states, 3);
    }

    #[test]
    fn unlogged_calls_never_move_a_granule() {
        let (n, rs) = boot_create_gpts(&MachineLayout::all_normal(1)).unwrap();
        let mut m = Machine::new(n, rs, 2);
        let mut tf = RootMonitor::new();
        let before = key(&m);
        for s in alphabet(1).iter().filter(|s| !s.authorized) {
            apply(&mut m, &mut tf, s);
        }
        assert_eq!(key(&m), before);
    }
}
