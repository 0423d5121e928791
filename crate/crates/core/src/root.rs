// SPDX-License-Identifier: Apache-2.0

//! Root-world firmware model. Owns both granule protection tables, checks
//! that every realm-monitor request to change a granule's world was first
//! requested by the hypervisor, and serializes updates behind a lock with a
//! TLB flush before release.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memory::{CoreId, Gpt, GptId, GranuleId, Machine, PasValue, World};
use crate::trace::{Event, EventKind};

/// Half-open granule range `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span(pub u64, pub u64);

impl Span {
    pub fn len(&self) -> u64 {
        self.1.saturating_sub(self.0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, g: u64) -> bool {
        self.0 <= g && g < self.1
    }
}

/// Static partition of the machine into world regions, as programmed by the
/// firmware at boot.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MachineLayout {
    pub granules: u64,
    #[serde(default)]
    pub root: Vec<Span>,
    #[serde(default)]
    pub realm: Vec<Span>,
    #[serde(default)]
    pub normal: Vec<Span>,
    #[serde(default)]
    pub secure: Vec<Span>,
}

impl Default for MachineLayout {
    fn default() -> Self {
        MachineLayout {
            granules: crate::memory::DEFAULT_GRANULES,
            root: vec![Span(0, 16)],
            realm: vec![Span(16, 64)],
            normal: vec![Span(64, 1008)],
            secure: vec![Span(1008, 1024)],
        }
    }
}

impl MachineLayout {
    /// A machine where every granule is normal memory.
    pub fn all_normal(granules: u64) -> MachineLayout {
        MachineLayout {
            granules,
            root: vec![],
            realm: vec![],
            normal: vec![Span(0, granules)],
            secure: vec![],
        }
    }

    /// Small machine used by the fuzzer: few enough granules that random
    /// calls keep colliding on the same ones.
    pub fn fuzz_default() -> MachineLayout {
        MachineLayout {
            granules: 32,
            root: vec![Span(0, 2)],
            realm: vec![Span(2, 4)],
            normal: vec![Span(4, 28)],
            secure: vec![Span(28, 32)],
        }
    }

    pub fn from_toml(text: &str) -> Result<MachineLayout, RootError> {
        toml::from_str(text).map_err(|e| RootError::LayoutInvalid(e.to_string()))
    }

    fn regions(&self) -> [(PasValue, &[Span]); 4] {
        [
            (PasValue::Root, &self.root),
            (PasValue::Realm, &self.realm),
            (PasValue::Normal, &self.normal),
            (PasValue::Secure, &self.secure),
        ]
    }

    /// Per-granule world tags; fails on gaps, overlaps, or spans past the end.
    pub fn tags(&self) -> Result<Vec<PasValue>, RootError> {
        if self.granules == 0 {
            return Err(RootError::LayoutInvalid("machine has no granules".into()));
        }
        let mut tags: Vec<Option<PasValue>> = vec![None; self.granules as usize];
        for (pas, spans) in self.regions() {
            for s in spans {
                if s.0 >= s.1 || s.1 > self.granules {
                    return Err(RootError::LayoutInvalid(format!(
                        "{pas} span [{}, {}) is empty or exceeds {} granules",
                        s.0, s.1, self.granules
                    )));
                }
                for g in s.0..s.1 {
                    if let Some(prev) = tags[g as usize] {
                        return Err(RootError::LayoutInvalid(format!(
                            "granule {g} tagged both {prev} and {pas}"
                        )));
                    }
                    tags[g as usize] = Some(pas);
                }
            }
        }
        tags.into_iter()
            .enumerate()
            .map(|(g, t)| t.ok_or_else(|| RootError::LayoutInvalid(format!("granule {g} not covered"))))
            .collect()
    }

    /// Single-line form used in the boot trace event, e.g.
    /// `n=32 root=0-2 realm=2-4 normal=4-28 secure=28-32`.
    pub fn to_compact(&self) -> String {
        let mut s = format!("n={}", self.granules);
        for (pas, spans) in self.regions() {
            if spans.is_empty() {
                continue;
            }
            let list: Vec<String> = spans.iter().map(|sp| format!("{}-{}", sp.0, sp.1)).collect();
            s.push_str(&format!(" {}={}", pas.name().to_lowercase(), list.join(",")));
        }
        s
    }

    pub fn parse_compact(s: &str) -> Result<MachineLayout, RootError> {
        let bad = || RootError::LayoutInvalid(format!("bad compact layout {s:?}"));
        let mut layout = MachineLayout {
            granules: 0,
            root: vec![],
            realm: vec![],
            normal: vec![],
            secure: vec![],
        };
        for tok in s.split_whitespace() {
            let (k, v) = tok.split_once('=').ok_or_else(bad)?;
            if k == "n" {
                layout.granules = v.parse().map_err(|_| bad())?;
                continue;
            }
            let spans = v
                .split(',')
                .map(|r| {
                    let (a, b) = r.split_once('-').ok_or_else(bad)?;
                    Ok(Span(a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?))
                })
                .collect::<Result<Vec<_>, RootError>>()?;
            match k {
                "root" => layout.root = spans,
                "realm" => layout.realm = spans,
                "normal" => layout.normal = spans,
                "secure" => layout.secure = spans,
                _ => return Err(bad()),
            }
        }
        Ok(layout)
    }
}

/// Builds GPT_n from the layout and derives GPT_rs by hiding all normal
/// memory from realm and secure cores.
pub fn boot_create_gpts(layout: &MachineLayout) -> Result<(Gpt, Gpt), RootError> {
    let tags = layout.tags()?;
    let hidden = tags
        .iter()
        .map(|&p| {
            if p == PasValue::Normal {
                PasValue::NotAccessible
            } else {
                p
            }
        })
        .collect();
    Ok((
        Gpt::from_entries(GptId::Normal, tags),
        Gpt::from_entries(GptId::RealmSecure, hidden),
    ))
}

/// RMIs that carry a granule whose world view the firmware must later
/// change on the realm monitor's behalf.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MemoryRmi {
    GranuleDelegate,
    GranuleUndelegate,
    RttMapUnprotected,
    RttUnmapUnprotected,
}

impl MemoryRmi {
    pub const ALL: [MemoryRmi; 4] = [
        MemoryRmi::GranuleDelegate,
        MemoryRmi::GranuleUndelegate,
        MemoryRmi::RttMapUnprotected,
        MemoryRmi::RttUnmapUnprotected,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MemoryRmi::GranuleDelegate => "rmi_granule_delegate",
            MemoryRmi::GranuleUndelegate => "rmi_granule_undelegate",
            MemoryRmi::RttMapUnprotected => "rmi_rtt_map_unprotected",
            MemoryRmi::RttUnmapUnprotected => "rmi_rtt_unmap_unprotected",
        }
    }

    pub fn from_name(name: &str) -> Option<MemoryRmi> {
        MemoryRmi::ALL.into_iter().find(|r| r.name() == name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoggedRmi {
    pub rmi: MemoryRmi,
    pub granule: GranuleId,
    pub realm: Option<u32>,
}

/// Multiset of hypervisor RMI parameters awaiting a matching realm-monitor
/// SMC. Duplicates are kept; matches are consumed oldest first.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestLog {
    pending: VecDeque<LoggedRmi>,
}

impl RequestLog {
    pub fn pending(&self) -> impl Iterator<Item = &LoggedRmi> {
        self.pending.iter()
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn count(&self, entry: &LoggedRmi) -> usize {
        self.pending.iter().filter(|e| *e == entry).count()
    }

    fn position(&self, entry: &LoggedRmi) -> Option<usize> {
        self.pending.iter().position(|e| e == entry)
    }

    fn consume(&mut self, entry: &LoggedRmi) -> bool {
        match self.position(entry) {
            Some(i) => {
                self.pending.remove(i);
                true
            }
            None => false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GptLock {
    held_by: Option<CoreId>,
    spins: u64,
}

impl GptLock {
    pub fn held_by(&self) -> Option<CoreId> {
        self.held_by
    }

    /// Number of failed acquisition attempts observed so far.
    pub fn spins(&self) -> u64 {
        self.spins
    }

    fn try_acquire(&mut self, core: CoreId) -> Result<(), RootError> {
        match self.held_by {
            Some(holder) if holder != core => {
                self.spins += 1;
                Err(RootError::Busy { holder: holder.0 })
            }
            _ => {
                self.held_by = Some(core);
                Ok(())
            }
        }
    }

    fn release(&mut self, core: CoreId) {
        debug_assert_eq!(self.held_by, Some(core));
        self.held_by = None;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SmcCall {
    Delegate(GranuleId),
    Undelegate(GranuleId),
    Share { granule: GranuleId, realm: u32 },
    Unshare { granule: GranuleId, realm: u32 },
    ExAccess { granule: GranuleId, enable: bool },
}

impl SmcCall {
    pub fn name(&self) -> &'static str {
        match self {
            SmcCall::Delegate(_) => "smc_delegate",
            SmcCall::Undelegate(_) => "smc_undelegate",
            SmcCall::Share { .. } => "smc_2gpt_ns_share",
            SmcCall::Unshare { .. } => "smc_2gpt_ns_unshare",
            SmcCall::ExAccess { .. } => "smc_2gpt_ex_access",
        }
    }

    pub fn granule(&self) -> GranuleId {
        match *self {
            SmcCall::Delegate(g) | SmcCall::Undelegate(g) => g,
            SmcCall::Share { granule, .. } | SmcCall::Unshare { granule, .. } | SmcCall::ExAccess { granule, .. } => {
                granule
            }
        }
    }

    fn realm(&self) -> Option<u32> {
        match *self {
            SmcCall::Share { realm, .. } | SmcCall::Unshare { realm, .. } => Some(realm),
            _ => None,
        }
    }

    /// The hypervisor RMI that must have been logged for this call, if any.
    pub fn authorizing_rmi(&self) -> Option<MemoryRmi> {
        match self {
            SmcCall::Delegate(_) => Some(MemoryRmi::GranuleDelegate),
            SmcCall::Undelegate(_) => Some(MemoryRmi::GranuleUndelegate),
            SmcCall::Share { .. } => Some(MemoryRmi::RttMapUnprotected),
            SmcCall::Unshare { .. } => Some(MemoryRmi::RttUnmapUnprotected),
            SmcCall::ExAccess { .. } => None,
        }
    }

    /// Legal (GPT_n, GPT_rs) precondition and the resulting pair.
    pub fn transition(&self) -> ((PasValue, PasValue), (PasValue, PasValue)) {
        use PasValue::*;
        match self {
            SmcCall::Delegate(_) => ((Normal, NotAccessible), (Realm, Realm)),
            SmcCall::Undelegate(_) => ((Realm, Realm), (Normal, NotAccessible)),
            SmcCall::Share { .. } => ((Realm, Realm), (Normal, Realm)),
            SmcCall::Unshare { .. } => ((Normal, Realm), (Realm, Realm)),
            SmcCall::ExAccess { enable: true, .. } => ((Normal, Realm), (NotAccessible, Realm)),
            SmcCall::ExAccess { enable: false, .. } => ((NotAccessible, Realm), (Normal, Realm)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DenyReason {
    /// No matching hypervisor request was logged.
    Unauthorized,
    /// The granule is not in the state the call transitions from.
    WrongState(PasValue, PasValue),
    OutOfRange,
}

impl fmt::Display for DenyReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DenyReason::Unauthorized => f.write_str("unauthorized"),
            DenyReason::WrongState(n, rs) => write!(f, "state({n},{rs})"),
            DenyReason::OutOfRange => f.write_str("out_of_range"),
        }
    }
}

#[derive(Clone, Debug, Error, PartialEq, Eq, Serialize, Deserialize)]
pub enum RootError {
    #[error("denied: {0}")]
    Denied(DenyReason),
    #[error("granule {0} undelegated with nonzero content")]
    ScrubViolation(GranuleId),
    #[error("invalid machine layout: {0}")]
    LayoutInvalid(String),
    #[error("GPT lock held by core {holder}")]
    Busy { holder: usize },
}

impl RootError {
    pub fn tag(&self) -> String {
        match self {
            RootError::Denied(r) => format!("denied:{r}"),
            RootError::ScrubViolation(_) => "scrub_violation".into(),
            RootError::LayoutInvalid(_) => "layout_invalid".into(),
            RootError::Busy { .. } => "busy".into(),
        }
    }
}

/// Firmware bugs that tests switch on to check the invariant oracle notices.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RootBugs {
    pub skip_log_check: bool,
    pub skip_flush: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RootMonitor {
    log: RequestLog,
    lock: GptLock,
    pub(crate) bugs: RootBugs,
}

impl RootMonitor {
    pub fn new() -> RootMonitor {
        RootMonitor::default()
    }

    pub fn request_log(&self) -> &RequestLog {
        &self.log
    }

    pub fn lock(&self) -> &GptLock {
        &self.lock
    }

    /// Records the parameters of a hypervisor RMI on its way to the realm
    /// monitor. RMIs without a granule, or that never change a granule's
    /// world, leave no entry.
    pub fn log_rmi(
        &mut self,
        m: &mut Machine,
        core: CoreId,
        rmi_name: &str,
        granule: Option<GranuleId>,
        realm: Option<u32>,
    ) {
        let (Some(rmi), Some(granule)) = (MemoryRmi::from_name(rmi_name), granule) else {
            return;
        };
        self.log.pending.push_back(LoggedRmi { rmi, granule, realm });
        let mut ev = Event::new(EventKind::Op("log_rmi".into()))
            .core(core)
            .granule(granule)
            .args(rmi_name)
            .outcome("logged");
        if let Some(r) = realm {
            ev = ev.realm(r);
        }
        m.trace.emit(ev);
    }

    /// Drops log entries no SMC consumed. Called when an RMI returns to the
    /// hypervisor, so a request authorizes only effects within its own call.
    pub(crate) fn expire_log(&mut self) {
        self.log.pending.clear();
    }

    /// Executes an SMC from the realm monitor on `core`. The core enters the
    /// root world for the duration of the call and returns to its prior world.
    pub fn smc(&mut self, m: &mut Machine, core: CoreId, call: SmcCall) -> Result<(), RootError> {
        let caller = m.core(core).sec_state();
        m.ensure_world(core, World::Root);
        let res = self.lock.try_acquire(core).and_then(|()| {
            let r = self.apply(m, core, call);
            self.lock.release(core);
            r
        });
        self.emit_smc(m, core, call, &res);
        m.ensure_world(core, caller);
        res
    }

    pub fn smc_delegate(&mut self, m: &mut Machine, core: CoreId, g: GranuleId) -> Result<(), RootError> {
        self.smc(m, core, SmcCall::Delegate(g))
    }

    pub fn smc_undelegate(&mut self, m: &mut Machine, core: CoreId, g: GranuleId) -> Result<(), RootError> {
        self.smc(m, core, SmcCall::Undelegate(g))
    }

    pub fn smc_2gpt_ns_share(
        &mut self,
        m: &mut Machine,
        core: CoreId,
        g: GranuleId,
        realm: u32,
    ) -> Result<(), RootError> {
        self.smc(m, core, SmcCall::Share { granule: g, realm })
    }

    pub fn smc_2gpt_ex_access(
        &mut self,
        m: &mut Machine,
        core: CoreId,
        g: GranuleId,
        enable: bool,
    ) -> Result<(), RootError> {
        self.smc(m, core, SmcCall::ExAccess { granule: g, enable })
    }

    /// Runs SMCs that several cores issue at the same instant. Every core
    /// other than the current holder spins on the lock; each winner mutates,
    /// flushes, and releases before the next core gets in. Results are in
    /// request order.
    pub fn contend(&mut self, m: &mut Machine, requests: &[(CoreId, SmcCall)]) -> Vec<Result<(), RootError>> {
        let callers: Vec<World> = requests.iter().map(|(c, _)| m.core(*c).sec_state()).collect();
        for (c, _) in requests {
            m.ensure_world(*c, World::Root);
        }
        let mut results = Vec::with_capacity(requests.len());
        for (i, &(core, call)) in requests.iter().enumerate() {
            self.lock.try_acquire(core).expect("lock free between holders");
            for &(waiter, _) in &requests[i + 1..] {
                if let Err(e) = self.lock.try_acquire(waiter) {
                    m.trace.emit(
                        Event::new(EventKind::Op("gpt_lock_spin".into()))
                            .core(waiter)
                            .outcome(e.tag()),
                    );
                }
            }
            let r = self.apply(m, core, call);
            self.lock.release(core);
            self.emit_smc(m, core, call, &r);
            results.push(r);
        }
        for ((c, _), w) in requests.iter().zip(callers) {
            m.ensure_world(*c, w);
        }
        results
    }

    fn apply(&mut self, m: &mut Machine, core: CoreId, call: SmcCall) -> Result<(), RootError> {
        let g = call.granule();
        let pair = m.gpt_pair(g).ok_or(RootError::Denied(DenyReason::OutOfRange))?;
        let (from, to) = call.transition();
        if pair != from {
            return Err(RootError::Denied(DenyReason::WrongState(pair.0, pair.1)));
        }
        let auth = call.authorizing_rmi().map(|rmi| LoggedRmi {
            rmi,
            granule: g,
            realm: call.realm(),
        });
        if let Some(entry) = &auth {
            if self.log.position(entry).is_none() && !self.bugs.skip_log_check {
                return Err(RootError::Denied(DenyReason::Unauthorized));
            }
        }
        if matches!(call, SmcCall::Undelegate(_)) && !m.granule(g).expect("in range").is_zero() {
            return Err(RootError::ScrubViolation(g));
        }
        if let Some(entry) = &auth {
            self.log.consume(entry);
        }
        m.gpt_mut(GptId::Normal).set(g, to.0);
        m.gpt_mut(GptId::RealmSecure).set(g, to.1);
        if !self.bugs.skip_flush {
            m.flush_all_gpc_tlbs(Some(core));
        }
        Ok(())
    }

    fn emit_smc(&self, m: &mut Machine, core: CoreId, call: SmcCall, res: &Result<(), RootError>) {
        let g = call.granule();
        let mut args = match call {
            SmcCall::ExAccess { enable, .. } => format!("enable={enable}"),
            _ => String::new(),
        };
        if let (Ok(()), Some((n, rs))) = (res, m.gpt_pair(g)) {
            if !args.is_empty() {
                args.push(' ');
            }
            args.push_str(&format!("gptn={n} gptrs={rs}"));
        }
        let mut ev = Event::new(EventKind::Smc(call.name().into()))
            .core(core)
            .granule(g)
            .args(args)
            .outcome(match res {
                Ok(()) => "ok".to_string(),
                Err(e) => e.tag(),
            });
        if let Some(r) = call.realm() {
            ev = ev.realm(r);
        }
        m.trace.emit(ev);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::{Access, GRANULE_SIZE};
    use PasValue::*;

    fn example_layout() -> MachineLayout {
        MachineLayout {
            granules: 20,
            root: vec![Span(0, 4)],
            realm: vec![Span(4, 8)],
            normal: vec![Span(8, 16)],
            secure: vec![Span(16, 20)],
        }
    }

    fn booted() -> (Machine, RootMonitor) {
        let (n, rs) = boot_create_gpts(&example_layout()).unwrap();
        (Machine::new(n, rs, 2), RootMonitor::new())
    }

    fn rmm_core(m: &mut Machine) -> CoreId {
        m.context_switch(CoreId(0), World::Realm);
        CoreId(0)
    }

    const G: GranuleId = GranuleId(9);

    #[test]
    fn boot_hides_normal_memory_in_rs() {
        let (n, rs) = boot_create_gpts(&example_layout()).unwrap();
        for g in 0..20 {
            let gi = GranuleId(g);
            if (8..16).contains(&g) {
                assert_eq!(n.get(gi), Some(Normal));
                assert_eq!(rs.get(gi), Some(NotAccessible));
            } else {
                assert_eq!(n.get(gi), rs.get(gi));
            }
        }
        assert_eq!(n.get(GranuleId(0)), Some(Root));
        assert_eq!(rs.get(GranuleId(3)), Some(Root));
    }

    #[test]
    fn boot_without_normal_memory_gives_identical_gpts() {
        let layout = MachineLayout {
            granules: 8,
            root: vec![Span(0, 4)],
            realm: vec![Span(4, 8)],
            normal: vec![],
            secure: vec![],
        };
        let (n, rs) = boot_create_gpts(&layout).unwrap();
        assert_eq!(n.entries(), rs.entries());
    }

    #[test]
    fn overlapping_layout_rejected() {
        let mut l = example_layout();
        l.normal = vec![Span(4, 16)];
        assert!(matches!(boot_create_gpts(&l), Err(RootError::LayoutInvalid(_))));
        let mut gap = example_layout();
        gap.secure = vec![Span(17, 20)];
        assert!(matches!(boot_create_gpts(&gap), Err(RootError::LayoutInvalid(_))));
    }

    #[test]
    fn compact_layout_round_trip() {
        let l = MachineLayout::default();
        assert_eq!(MachineLayout::parse_compact(&l.to_compact()).unwrap(), l);
        let l = MachineLayout::all_normal(4);
        assert_eq!(MachineLayout::parse_compact(&l.to_compact()).unwrap(), l);
    }

    #[test]
    fn log_rmi_records_only_memory_rmis() {
        let (mut m, mut tf) = booted();
        tf.log_rmi(&mut m, CoreId(0), "rmi_granule_delegate", Some(G), None);
        tf.log_rmi(&mut m, CoreId(0), "rmi_rec_enter", None, Some(1));
        tf.log_rmi(&mut m, CoreId(0), "rmi_realm_activate", Some(G), Some(1));
        assert_eq!(tf.request_log().len(), 1);
        tf.log_rmi(&mut m, CoreId(0), "rmi_granule_delegate", Some(G), None);
        let e = LoggedRmi {
            rmi: MemoryRmi::GranuleDelegate,
            granule: G,
            realm: None,
        };
        assert_eq!(tf.request_log().count(&e), 2);
    }

    #[test]
    fn delegate_with_authorization() {
        let (mut m, mut tf) = booted();
        tf.log_rmi(&mut m, CoreId(1), "rmi_granule_delegate", Some(G), None);
        let c = rmm_core(&mut m);
        tf.smc_delegate(&mut m, c, G).unwrap();
        assert_eq!(m.gpt_pair(G), Some((Realm, Realm)));
        assert!(tf.request_log().is_empty());
        assert_eq!(m.core(c).sec_state(), World::Realm);
    }

    #[test]
    fn delegate_without_authorization_denied() {
        let (mut m, mut tf) = booted();
        let c = rmm_core(&mut m);
        let g = GranuleId(10);
        assert_eq!(
            tf.smc_delegate(&mut m, c, g),
            Err(RootError::Denied(DenyReason::Unauthorized))
        );
        assert_eq!(m.gpt_pair(g), Some((Normal, NotAccessible)));
    }

    #[test]
    fn authorization_is_per_granule_and_kind() {
        let (mut m, mut tf) = booted();
        tf.log_rmi(&mut m, CoreId(1), "rmi_granule_delegate", Some(GranuleId(10)), None);
        tf.log_rmi(&mut m, CoreId(1), "rmi_granule_undelegate", Some(G), None);
        let c = rmm_core(&mut m);
        assert!(tf.smc_delegate(&mut m, c, G).is_err());
        assert_eq!(tf.request_log().len(), 2);
    }

    #[test]
    fn duplicate_log_survives_failed_first_attempt() {
        // The first delegate fails before reaching the firmware, the second
        // still finds an authorization and one stale copy remains.
        let (mut m, mut tf) = booted();
        tf.log_rmi(&mut m, CoreId(1), "rmi_granule_delegate", Some(G), None);
        tf.log_rmi(&mut m, CoreId(1), "rmi_granule_delegate", Some(G), None);
        let c = rmm_core(&mut m);
        tf.smc_delegate(&mut m, c, G).unwrap();
        assert_eq!(tf.request_log().len(), 1);
        // the stale copy cannot authorize a delegate of an already-realm granule
        assert!(matches!(
            tf.smc_delegate(&mut m, c, G),
            Err(RootError::Denied(DenyReason::WrongState(Realm, Realm)))
        ));
    }

    #[test]
    fn delegate_precondition_table() {
        // Independent enumeration of all 36 pairs: only (Normal, NotAccessible)
        // admits a delegate.
        for n in PasValue::ALL {
            for rs in PasValue::ALL {
                let (mut m, mut tf) = booted();
                m.gpt_mut(GptId::Normal).set(G, n);
                m.gpt_mut(GptId::RealmSecure).set(G, rs);
                tf.log_rmi(&mut m, CoreId(1), "rmi_granule_delegate", Some(G), None);
                let c = rmm_core(&mut m);
                let ok = tf.smc_delegate(&mut m, c, G).is_ok();
                assert_eq!(ok, (n, rs) == (Normal, NotAccessible), "({n},{rs})");
            }
        }
    }

    fn delegated() -> (Machine, RootMonitor, CoreId) {
        let (mut m, mut tf) = booted();
        tf.log_rmi(&mut m, CoreId(1), "rmi_granule_delegate", Some(G), None);
        let c = rmm_core(&mut m);
        tf.smc_delegate(&mut m, c, G).unwrap();
        (m, tf, c)
    }

    #[test]
    fn undelegate_requires_scrubbed_content() {
        let (mut m, mut tf, c) = delegated();
        m.write(c, G.pa() + 7, &[0xaa]).unwrap();
        tf.log_rmi(&mut m, CoreId(1), "rmi_granule_undelegate", Some(G), None);
        assert_eq!(tf.smc_undelegate(&mut m, c, G), Err(RootError::ScrubViolation(G)));
        assert_eq!(tf.request_log().len(), 1);
        m.scrub(c, G).unwrap();
        tf.smc_undelegate(&mut m, c, G).unwrap();
        assert_eq!(m.gpt_pair(G), Some((Normal, NotAccessible)));
    }

    #[test]
    fn undelegate_of_normal_granule_denied() {
        let (mut m, mut tf) = booted();
        tf.log_rmi(&mut m, CoreId(1), "rmi_granule_undelegate", Some(G), None);
        let c = rmm_core(&mut m);
        assert!(matches!(tf.smc_undelegate(&mut m, c, G), Err(RootError::Denied(_))));
    }

    #[test]
    fn share_and_exclusive_access() {
        let (mut m, mut tf, c) = delegated();
        assert_eq!(
            tf.smc_2gpt_ns_share(&mut m, c, G, 1),
            Err(RootError::Denied(DenyReason::Unauthorized))
        );
        tf.log_rmi(&mut m, CoreId(1), "rmi_rtt_map_unprotected", Some(G), Some(1));
        tf.smc_2gpt_ns_share(&mut m, c, G, 1).unwrap();
        assert_eq!(m.gpt_pair(G), Some((Normal, Realm)));
        tf.smc_2gpt_ex_access(&mut m, c, G, true).unwrap();
        assert_eq!(m.gpt_pair(G), Some((NotAccessible, Realm)));
        tf.smc_2gpt_ex_access(&mut m, c, G, false).unwrap();
        assert_eq!(m.gpt_pair(G), Some((Normal, Realm)));
    }

    #[test]
    fn share_of_undelegated_memory_denied() {
        let (mut m, mut tf) = booted();
        tf.log_rmi(&mut m, CoreId(1), "rmi_rtt_map_unprotected", Some(G), Some(1));
        let c = rmm_core(&mut m);
        assert!(matches!(
            tf.smc_2gpt_ns_share(&mut m, c, G, 1),
            Err(RootError::Denied(DenyReason::WrongState(Normal, NotAccessible)))
        ));
    }

    #[test]
    fn exclusive_access_on_private_granule_denied() {
        let (mut m, mut tf, c) = delegated();
        assert!(tf.smc_2gpt_ex_access(&mut m, c, G, true).is_err());
        assert_eq!(m.gpt_pair(G), Some((Realm, Realm)));
    }

    #[test]
    fn delegate_flushes_stale_normal_view() {
        let (mut m, mut tf) = booted();
        m.gpc_check(CoreId(1), G, Access::Read).unwrap();
        tf.log_rmi(&mut m, CoreId(0), "rmi_granule_delegate", Some(G), None);
        let c = rmm_core(&mut m);
        tf.smc_delegate(&mut m, c, G).unwrap();
        assert!(m.gpc_check(CoreId(1), G, Access::Read).is_err());
    }

    #[test]
    fn skip_flush_leaves_stale_view() {
        let (mut m, mut tf) = booted();
        tf.bugs.skip_flush = true;
        m.gpc_check(CoreId(1), G, Access::Read).unwrap();
        tf.log_rmi(&mut m, CoreId(0), "rmi_granule_delegate", Some(G), None);
        let c = rmm_core(&mut m);
        tf.smc_delegate(&mut m, c, G).unwrap();
        assert!(m.gpc_check(CoreId(1), G, Access::Read).is_ok());
    }

    #[test]
    fn contending_cores_are_serialized() {
        let (mut m, mut tf) = booted();
        tf.log_rmi(&mut m, CoreId(0), "rmi_granule_delegate", Some(G), None);
        tf.log_rmi(&mut m, CoreId(1), "rmi_rtt_map_unprotected", Some(G), Some(1));
        let res = tf.contend(
            &mut m,
            &[
                (CoreId(0), SmcCall::Delegate(G)),
                (CoreId(1), SmcCall::Share { granule: G, realm: 1 }),
            ],
        );
        assert!(res.iter().all(|r| r.is_ok()));
        assert_eq!(m.gpt_pair(G), Some((Normal, Realm)));
        assert_eq!(tf.lock().spins(), 1);
        assert_eq!(tf.lock().held_by(), None);
    }

    #[test]
    fn scrub_check_covers_whole_granule() {
        let (mut m, mut tf, c) = delegated();
        m.write(c, G.pa() + GRANULE_SIZE as u64 - 1, &[1]).unwrap();
        tf.log_rmi(&mut m, CoreId(1), "rmi_granule_undelegate", Some(G), None);
        assert!(tf.smc_undelegate(&mut m, c, G).is_err());
    }
}
