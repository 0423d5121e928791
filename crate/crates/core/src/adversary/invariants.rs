// SPDX-License-Identifier: Apache-2.0

//! Invariant oracle. Re-derives what must hold from first principles: its
//! own access table, its own hash fold, and shadow state rebuilt from the
//! trace, rather than trusting the bookkeeping of the components it checks.
//!
//! Checks run at step boundaries. A correct firmware has flushed every TLB
//! before any SMC returns, so step boundaries are flush barriers and stale
//! translations seen there are violations.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use crate::memory::{GranuleId, PasValue, World};
use crate::realm::{RealmState, SharedRegion, PAGE_SIZE};
use crate::system::System;
use crate::trace::{Event, EventKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum InvariantId {
    /// Every granule's (GPT_n, GPT_rs) pair is one the design allows.
    Closure,
    /// Sandboxing: one owner per granule, stage-2 agrees with ownership.
    S1,
    /// Mutual isolation matrix at flush barriers.
    S2,
    /// Shared-region NX, contiguity, post-activation seal, MMIO gating.
    S3,
    /// Measurements recompute from their logs.
    S4,
    /// Every successful protection change was requested by the hypervisor.
    Auth,
    /// The trace alone reproduces the final tables, stage-2 maps and counters.
    Replay,
}

impl InvariantId {
    pub fn name(self) -> &'static str {
        match self {
            InvariantId::Closure => "closure",
            InvariantId::S1 => "S1",
            InvariantId::S2 => "S2",
            InvariantId::S3 => "S3",
            InvariantId::S4 => "S4",
            InvariantId::Auth => "auth",
            InvariantId::Replay => "replay",
        }
    }
}

impl fmt::Display for InvariantId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub step: u64,
    pub call: String,
    pub invariant: InvariantId,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{}\t{}", self.step, self.call, self.invariant, self.detail)
    }
}

use PasValue::{AllAccessible, NotAccessible};

/// Access table written out case by case.
fn world_may_access(world: World, pas: PasValue) -> bool {
    match (world, pas) {
        (World::Root, _) => true,
        (_, AllAccessible) => true,
        (World::Normal, PasValue::Normal) => true,
        (World::Realm, PasValue::Realm) => true,
        (World::Secure, PasValue::Secure) => true,
        _ => false,
    }
}

/// Worlds that must be locked out of a granule in the given state.
fn denied_worlds(pair: (PasValue, PasValue)) -> &'static [World] {
    use PasValue::*;
    match pair {
        (Realm, Realm) | (NotAccessible, Realm) => &[World::Normal, World::Secure],
        (Normal, Realm) => &[World::Secure],
        (Normal, NotAccessible) => &[World::Realm, World::Secure],
        (Root, Root) => &[World::Normal, World::Realm, World::Secure],
        (Secure, Secure) => &[World::Normal, World::Realm],
        _ => &[],
    }
}

pub const DYNAMIC_PAIRS: [(PasValue, PasValue); 4] = [
    (PasValue::Normal, NotAccessible),
    (PasValue::Realm, PasValue::Realm),
    (PasValue::Normal, PasValue::Realm),
    (NotAccessible, PasValue::Realm),
];

/// Hypervisor RMI that must precede a successful SMC of this name.
fn required_rmi(smc: &str) -> Option<(&'static str, bool)> {
    match smc {
        "smc_delegate" => Some(("rmi_granule_delegate", false)),
        "smc_undelegate" => Some(("rmi_granule_undelegate", false)),
        "smc_2gpt_ns_share" => Some(("rmi_rtt_map_unprotected", true)),
        "smc_2gpt_ns_unshare" => Some(("rmi_rtt_unmap_unprotected", true)),
        _ => None,
    }
}

/// `v' = SHA-256(v || tag || ipa_le || digest)` from zero, independent of
/// the measurement code.
pub fn fold_measurement(log: &[crate::realm::attest::MeasureEntry]) -> [u8; 32] {
    let mut v = [0u8; 32];
    for e in log {
        let tag: u8 = match e.kind {
            crate::realm::attest::MeasureKind::RealmCreate => 1,
            crate::realm::attest::MeasureKind::DataCreate => 2,
            crate::realm::attest::MeasureKind::SharedMap => 3,
        };
        let mut h = Sha256::new();
        h.update(v);
        h.update([tag]);
        h.update(e.ipa.to_le_bytes());
        h.update(e.digest);
        v = h.finalize().into();
    }
    v
}

#[derive(Clone, Debug, Default)]
pub struct Oracle {
    /// Boot-time pair of every granule outside the dynamic pool.
    static_pairs: BTreeMap<u64, (PasValue, PasValue)>,
    pending_auth: Vec<(String, u64, Option<u32>)>,
    mmio_marks: BTreeSet<(u32, u64)>,
    sealed: BTreeMap<u32, Option<SharedRegion>>,
    pub reached_pairs: BTreeSet<(PasValue, PasValue)>,
}

impl Oracle {
    /// Snapshot of a freshly booted system.
    pub fn new(sys: &System) -> Oracle {
        let m = sys.machine();
        let static_pairs = (0..m.num_granules())
            .filter_map(|g| {
                let p = m.gpt_pair(GranuleId(g))?;
                (p != (PasValue::Normal, NotAccessible)).then_some((g, p))
            })
            .collect();
        Oracle {
            static_pairs,
            ..Oracle::default()
        }
    }

    /// Feeds trace events in emission order; returns violations visible in
    /// the events themselves.
    pub fn observe(&mut self, events: &[Event]) -> Vec<(InvariantId, String)> {
        let mut out = vec![];
        for e in events {
            match &e.kind {
                EventKind::Op(op) if op == "log_rmi" => {
                    if let Some(g) = e.granule {
                        self.pending_auth.push((e.args.clone(), g, e.realm));
                    }
                }
                EventKind::Rmi(_) => self.pending_auth.clear(),
                EventKind::Smc(name) if e.outcome == "ok" => {
                    let Some((rmi, with_realm)) = required_rmi(name) else {
                        continue;
                    };
                    let g = e.granule.unwrap_or(u64::MAX);
                    let realm = if with_realm { e.realm } else { None };
                    let pos = self
                        .pending_auth
                        .iter()
                        .position(|(r, pg, pr)| r == rmi && *pg == g && *pr == realm);
                    match pos {
                        Some(i) => {
                            self.pending_auth.remove(i);
                        }
                        None => out.push((
                            InvariantId::Auth,
                            format!("{name} on granule {g} succeeded without a pending {rmi}"),
                        )),
                    }
                }
                EventKind::Op(op) if op == "mmio_mark" => {
                    if let (Some(r), Some(a)) = (e.realm, e.addr) {
                        self.mmio_marks.insert((r, a & !(PAGE_SIZE - 1)));
                    }
                }
                EventKind::Op(op) if op == "mmio_emulate" => {
                    if let (Some(r), Some(a)) = (e.realm, e.addr) {
                        if !self.mmio_marks.contains(&(r, a & !(PAGE_SIZE - 1))) {
                            out.push((InvariantId::S3, format!("realm {r}: emulated MMIO at unmarked {a:#x}")));
                        }
                    }
                }
                _ => {}
            }
        }
        out
    }

    /// State checks over the whole system.
    pub fn check_state(&mut self, sys: &System) -> Vec<(InvariantId, String)> {
        let mut out = vec![];
        self.closure(sys, &mut out);
        self.sandboxing(sys, &mut out);
        self.isolation(sys, &mut out);
        self.shared_region(sys, &mut out);
        self.measurements(sys, &mut out);
        out
    }

    /// Runs both checks and stamps the results.
    pub fn check(&mut self, sys: &System, events: &[Event], step: u64, call: &str) -> Vec<Violation> {
        let mut v = self.observe(events);
        v.extend(self.check_state(sys));
        v.into_iter()
            .map(|(invariant, detail)| Violation {
                step,
                call: call.to_string(),
                invariant,
                detail,
            })
            .collect()
    }

    fn closure(&mut self, sys: &System, out: &mut Vec<(InvariantId, String)>) {
        let m = sys.machine();
        for g in 0..m.num_granules() {
            let pair = m.gpt_pair(GranuleId(g)).expect("in range");
            match self.static_pairs.get(&g) {
                Some(boot) if *boot != pair => out.push((
                    InvariantId::Closure,
                    format!("static granule {g} moved from {boot:?} to {pair:?}"),
                )),
                Some(_) => {}
                None => {
                    if DYNAMIC_PAIRS.contains(&pair) {
                        self.reached_pairs.insert(pair);
                    } else {
                        out.push((InvariantId::Closure, format!("granule {g} in illegal state {pair:?}")));
                    }
                }
            }
        }
    }

    fn sandboxing(&self, sys: &System, out: &mut Vec<(InvariantId, String)>) {
        let m = sys.machine();
        let index = sys.rmm.index();
        let mut mappers: BTreeMap<GranuleId, BTreeSet<u32>> = BTreeMap::new();
        for r in sys.rmm.realms() {
            if r.state == RealmState::Destroyed && !r.s2.is_empty() {
                out.push((InvariantId::S1, format!("destroyed realm {} keeps mappings", r.id)));
            }
            for (ipa, e) in &r.s2 {
                mappers.entry(e.granule).or_default().insert(r.id.0);
                if index.owner.get(&e.granule) != Some(&r.id) {
                    out.push((
                        InvariantId::S1,
                        format!(
                            "realm {} maps {ipa:#x} to granule {} owned by {:?}",
                            r.id,
                            e.granule.0,
                            index.owner.get(&e.granule).map(|o| o.0)
                        ),
                    ));
                }
                let pair = m.gpt_pair(e.granule);
                let ok = match (e.unprotected, pair) {
                    (false, Some(p)) => p == (PasValue::Realm, PasValue::Realm),
                    (true, Some(p)) => {
                        p == (PasValue::Normal, PasValue::Realm) || p == (NotAccessible, PasValue::Realm)
                    }
                    (_, None) => false,
                };
                if !ok {
                    out.push((
                        InvariantId::S1,
                        format!(
                            "realm {} {} IPA {ipa:#x} maps granule {} in state {pair:?}",
                            r.id,
                            if e.unprotected { "unprotected" } else { "protected" },
                            e.granule.0
                        ),
                    ));
                }
            }
        }
        for (g, realms) in mappers {
            if realms.len() > 1 {
                out.push((InvariantId::S1, format!("granule {} mapped by realms {realms:?}", g.0)));
            }
        }
    }

    fn isolation(&self, sys: &System, out: &mut Vec<(InvariantId, String)>) {
        let m = sys.machine();
        for core in m.cores() {
            let w = core.sec_state();
            let Some(gpt) = w.gpt() else { continue };
            for (&g, &cached) in core.tlb() {
                let now = m.gpt(gpt).get(GranuleId(g));
                if now != Some(cached) {
                    out.push((
                        InvariantId::S2,
                        format!(
                            "core {} ({w}) caches granule {g} as {cached} but the table says {now:?}",
                            core.id().0
                        ),
                    ));
                }
            }
            for g in 0..m.num_granules() {
                let gid = GranuleId(g);
                let pair = m.gpt_pair(gid).expect("in range");
                if !denied_worlds(pair).contains(&w) {
                    continue;
                }
                let eff = m.effective_pas(core.id(), gid).expect("bound core");
                if world_may_access(w, eff) {
                    out.push((
                        InvariantId::S2,
                        format!("core {} in {w} may access granule {g} in state {pair:?}", core.id().0),
                    ));
                }
            }
        }
    }

    fn shared_region(&mut self, sys: &System, out: &mut Vec<(InvariantId, String)>) {
        for r in sys.rmm.realms() {
            let unprotected: Vec<u64> = r.s2.iter().filter(|(_, e)| e.unprotected).map(|(i, _)| *i).collect();
            for (ipa, e) in &r.s2 {
                let in_region = r.shared_region.is_some_and(|s| s.contains(*ipa));
                if (e.unprotected || in_region) && e.perms.exec {
                    out.push((
                        InvariantId::S3,
                        format!("realm {} shared page {ipa:#x} is executable", r.id),
                    ));
                }
            }
            let expected: Vec<u64> = r.shared_region.map(|s| s.page_ipas().collect()).unwrap_or_default();
            if unprotected != expected {
                out.push((
                    InvariantId::S3,
                    format!("realm {} shared pages are not one contiguous region", r.id),
                ));
            }
            if r.state == RealmState::Active {
                match self.sealed.get(&r.id.0) {
                    None => {
                        self.sealed.insert(r.id.0, r.shared_region);
                    }
                    Some(s) if *s != r.shared_region => out.push((
                        InvariantId::S3,
                        format!("realm {} shared region changed after activation", r.id),
                    )),
                    Some(_) => {}
                }
            }
            for page in &r.mmio_regions {
                if !self.mmio_marks.contains(&(r.id.0, *page)) {
                    out.push((
                        InvariantId::S3,
                        format!("realm {} MMIO page {page:#x} never marked by the guest", r.id),
                    ));
                }
            }
        }
    }

    fn measurements(&self, sys: &System, out: &mut Vec<(InvariantId, String)>) {
        for r in sys.rmm.realms() {
            let folded = fold_measurement(r.measurement.log());
            if folded != r.measurement.value() {
                out.push((
                    InvariantId::S4,
                    format!("realm {} measurement does not recompute", r.id),
                ));
            }
            if r.state == RealmState::Active {
                match sys.rmm.get_attestation_report(r.id) {
                    Ok(rep) if rep.realm_measurement == folded => {}
                    _ => out.push((InvariantId::S4, format!("realm {} report disagrees with its log", r.id))),
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::gpc_permits;

    #[test]
    fn access_table_agrees_with_hardware_model() {
        for w in World::ALL {
            for p in PasValue::ALL {
                assert_eq!(world_may_access(w, p), gpc_permits(w, p), "{w} {p}");
            }
        }
    }

    #[test]
    fn denials_hold_in_every_legal_state() {
        use PasValue::*;
        let legal = [
            (Normal, NotAccessible),
            (Realm, Realm),
            (Normal, Realm),
            (NotAccessible, Realm),
            (Root, Root),
            (Secure, Secure),
        ];
        for pair in legal {
            for w in denied_worlds(pair) {
                let pas = match w.gpt() {
                    Some(crate::memory::GptId::Normal) => pair.0,
                    _ => pair.1,
                };
                assert!(!world_may_access(*w, pas), "{pair:?} {w}");
            }
        }
    }
}
