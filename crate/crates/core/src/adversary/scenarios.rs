// SPDX-License-Identifier: Apache-2.0

//! Attack catalog. Each scenario runs on a fresh machine, must end in its
//! expected outcome, and must leave the invariant oracle silent.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::invariants::{InvariantId, Oracle, Violation};
use crate::manifest::{DeviceKind, Manifest};
use crate::memory::{AccessError, CoreId, GranuleId, PasValue, World};
use crate::normal::channel::Delivery;
use crate::normal::rpc::RpcFrame;
use crate::normal::script::GuestAction;
use crate::normal::virtq::{Ring, VqError, DESC_SIZE};
use crate::realm::guest::{ExitReason, RSI_ERROR};
use crate::realm::{IrqOutcome, IrqSource, Perms, RealmId, RmmError, S2Entry, PAGE_SIZE};
use crate::replay::{compare, replay};
use crate::root::{MemoryRmi, RootError, SmcCall};
use crate::system::{BugInjection, RmiCall, System, SystemConfig};
use crate::trace::{Event, EventKind};
use crate::HypError;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Blocked(String),
    Detected(String),
    /// The attack went through; carries what happened.
    Allowed(String),
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Outcome::Blocked(k) => write!(f, "blocked({k})"),
            Outcome::Detected(k) => write!(f, "detected({k})"),
            Outcome::Allowed(k) => write!(f, "allowed({k})"),
        }
    }
}

fn blocked(k: &str) -> Outcome {
    Outcome::Blocked(k.into())
}

fn detected(k: &str) -> Outcome {
    Outcome::Detected(k.into())
}

type Run = fn(&mut System) -> Result<Outcome, String>;

#[derive(Clone)]
pub struct AttackScenario {
    pub name: &'static str,
    pub summary: &'static str,
    pub expected: Outcome,
    pub cores: usize,
    run: Run,
    /// Violations the scenario causes on purpose.
    waive: Option<fn(&Violation) -> bool>,
}

impl fmt::Debug for AttackScenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AttackScenario")
            .field("name", &self.name)
            .field("expected", &self.expected)
            .finish()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub name: String,
    pub expected: Outcome,
    pub observed: Outcome,
    pub violations: Vec<Violation>,
    pub pass: bool,
    #[serde(skip)]
    pub events: Vec<Event>,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\texpected={}\tobserved={}\tviolations={}",
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.expected,
            self.observed,
            self.violations.len()
        )
    }
}

const C0: CoreId = CoreId(0);
const C1: CoreId = CoreId(1);

fn err<E: fmt::Display>(e: E) -> String {
    e.to_string()
}

/// Creates and boots a sandbox the platform owner approved.
fn launch(sys: &mut System, m: &Manifest) -> Result<RealmId, String> {
    sys.allow_manifest(m);
    let realm = sys.hyp_create_sbs(C0, m).map_err(err)?;
    match sys.hyp_launch(C0, realm).map_err(err)? {
        ExitReason::BootRejected(r) => Err(format!("unexpected boot rejection {r}")),
        _ => Ok(realm),
    }
}

fn free_granule(sys: &System) -> Result<GranuleId, String> {
    sys.alloc_granule(&BTreeSet::new())
        .ok_or_else(|| "no free granule".into())
}

fn access_outcome<T>(r: Result<T, AccessError>) -> Outcome {
    match r {
        Err(AccessError::GranuleProtectionFault { .. }) => blocked("gpf"),
        Err(e) => Outcome::Allowed(format!("other error {e}")),
        Ok(_) => Outcome::Allowed("access succeeded".into()),
    }
}

const BOOMERANG_IPA: u64 = 0x10_0000;

fn boomerang(sys: &mut System) -> Result<Outcome, String> {
    let realm = launch(sys, &Manifest::new(2, 1, "idle"))?;
    let g = free_granule(sys)?;
    sys.host_write(C0, g.pa(), b"host secret").map_err(err)?;
    sys.rmm
        .plant_s2(
            realm,
            BOOMERANG_IPA,
            S2Entry {
                granule: g,
                perms: Perms::RW,
                unprotected: false,
            },
        )
        .map_err(err)?;
    sys.emit(
        Event::new(EventKind::Op("plant_s2".into()))
            .realm(realm.0)
            .granule(g)
            .addr(BOOMERANG_IPA)
            .outcome("ok"),
    );
    let rec = sys.record(realm).map_err(err)?.rec;
    sys.queue_guest(
        rec,
        [GuestAction::ReadMem {
            ipa: BOOMERANG_IPA,
            len: 11,
        }],
    )
    .map_err(err)?;
    Ok(match sys.rec_enter(C0, rec, None).map_err(err)? {
        ExitReason::Fault { kind, .. } => Outcome::Blocked(kind),
        other => Outcome::Allowed(format!("guest read completed: {other}")),
    })
}

fn waive_boomerang(v: &Violation) -> bool {
    v.invariant == InvariantId::S1 && v.detail.contains(&format!("{BOOMERANG_IPA:#x}"))
}

fn secure_reads_normal(sys: &mut System) -> Result<Outcome, String> {
    let g = free_granule(sys)?;
    sys.host_write(C0, g.pa(), b"app data").map_err(err)?;
    Ok(access_outcome(sys.secure_read(C1, g.pa(), 8)))
}

fn secure_reads_shared(sys: &mut System) -> Result<Outcome, String> {
    let realm = launch(sys, &Manifest::new(2, 1, "idle"))?;
    sys.host_shared_write(C0, realm, 0, b"shared").map_err(err)?;
    let pa = sys.record(realm).map_err(err)?.shared_pa(0).ok_or("no shared page")?;
    Ok(access_outcome(sys.secure_read(C1, pa, 6)))
}

fn host_reads_private(sys: &mut System) -> Result<Outcome, String> {
    let realm = launch(sys, &Manifest::new(2, 1, "idle"))?;
    let g = sys.record(realm).map_err(err)?.private[0].1;
    Ok(access_outcome(sys.host_read(C1, g.pa(), 16)))
}

/// Two cores issue a delegate and a share of the same granule at once while
/// a third core holds the granule in its TLB. Runs once in each arrival order.
fn split_view(sys: &mut System) -> Result<Outcome, String> {
    let bystander = CoreId(2);
    let mut taken = BTreeSet::new();
    for share_first in [false, true] {
        let g = sys.alloc_granule(&taken).ok_or("no free granule")?;
        taken.insert(g);
        for c in [C0, C1, bystander] {
            sys.host_read(c, g.pa(), 8).map_err(err)?;
        }
        if let Some(o) = race_round(sys, g, share_first)? {
            return Ok(o);
        }
    }
    if sys.pf.root.lock().spins() < 2 {
        return Ok(Outcome::Allowed("updates were not serialized".into()));
    }
    Ok(blocked("serialized"))
}

fn race_round(sys: &mut System, g: GranuleId, share_first: bool) -> Result<Option<Outcome>, String> {
    let realm = 7;
    let mut reqs = vec![
        (C0, SmcCall::Delegate(g), MemoryRmi::GranuleDelegate, None),
        (
            C1,
            SmcCall::Share { granule: g, realm },
            MemoryRmi::RttMapUnprotected,
            Some(realm),
        ),
    ];
    if share_first {
        reqs.reverse();
    }
    let pf = &mut sys.pf;
    for &(c, _, rmi, r) in &reqs {
        pf.machine.context_switch(c, World::Root);
        pf.root.log_rmi(&mut pf.machine, c, rmi.name(), Some(g), r);
        pf.machine.context_switch(c, World::Realm);
    }
    let calls: Vec<(CoreId, SmcCall)> = reqs.iter().map(|(c, s, _, _)| (*c, *s)).collect();
    let results = pf.root.contend(&mut pf.machine, &calls);
    for &(c, _, _, _) in &reqs {
        pf.machine.context_switch(c, World::Root);
    }
    pf.root.expire_log();
    for ((c, _, rmi, _), r) in reqs.iter().zip(&results) {
        pf.machine.context_switch(*c, World::Normal);
        pf.machine.trace.emit(
            Event::new(EventKind::Op("race_request".into()))
                .core(*c)
                .granule(g)
                .args(rmi.name())
                .outcome(r.as_ref().map_or_else(|e| e.tag(), |_| "ok".into())),
        );
    }
    let m = sys.machine();
    let pair = m.gpt_pair(g).ok_or("granule vanished")?;
    let legal = [
        (PasValue::Normal, PasValue::NotAccessible),
        (PasValue::Realm, PasValue::Realm),
        (PasValue::Normal, PasValue::Realm),
        (PasValue::NotAccessible, PasValue::Realm),
    ];
    if !legal.contains(&pair) {
        return Ok(Some(Outcome::Allowed(format!("illegal state {pair:?}"))));
    }
    for core in m.cores() {
        let gpt = core.sec_state().gpt().ok_or("core left in root world")?;
        let seen = m.effective_pas(core.id(), g);
        if seen != m.gpt(gpt).get(g) {
            return Ok(Some(Outcome::Allowed(format!(
                "core {} sees {seen:?}, table says {:?}",
                core.id().0,
                m.gpt(gpt).get(g)
            ))));
        }
    }
    Ok(None)
}

/// Host rewrites the RPC length between the guest's check and its use.
fn toctou(sys: &mut System) -> Result<Outcome, String> {
    let realm = launch(sys, &Manifest::new(2, 1, "add"))?;
    let len_pa = sys.record(realm).map_err(err)?.shared_pa(8).ok_or("no shared page")?;
    let mut host = None;
    let reply = sys
        .app_rpc_with(C0, realm, &RpcFrame::add(1, 2, 3).encode(), &mut |ctx| {
            host = Some(ctx.interleave_host(C1, |pf, c| pf.machine.write(c, len_pa, &0xffff_fff0u32.to_le_bytes())));
        })
        .map_err(err)?;
    let sum_ok = reply.payload == 5u64.to_le_bytes();
    Ok(match host {
        Some(r) if sum_ok => access_outcome(r),
        Some(_) => Outcome::Allowed(format!("reply corrupted: {reply:?}")),
        None => Outcome::Allowed("guest never reached the use".into()),
    })
}

fn code_injection(sys: &mut System) -> Result<Outcome, String> {
    let realm = launch(sys, &Manifest::new(2, 1, "idle"))?;
    // AArch64 `brk #0`.
    sys.host_shared_write(C0, realm, 0, &[0x00, 0x00, 0x20, 0xd4])
        .map_err(err)?;
    let rec = sys.record(realm).map_err(err)?;
    let (rec, base) = (rec.rec, rec.shared_region().ok_or("no shared region")?.base);
    sys.queue_guest(rec, [GuestAction::Exec { ipa: base }]).map_err(err)?;
    Ok(match sys.rec_enter(C0, rec, None).map_err(err)? {
        ExitReason::Fault { kind, .. } => Outcome::Blocked(kind),
        other => Outcome::Allowed(format!("shellcode ran: {other}")),
    })
}

/// The host writes a descriptor naming private guest memory straight into
/// the ring, skipping its own transport checks.
fn vq_pointer_escape(sys: &mut System) -> Result<Outcome, String> {
    let mut m = Manifest::new(2, 2, "idle");
    m.devices = vec![DeviceKind::VirtioBlock];
    m.virtqueue_page = Some(1);
    let realm = launch(sys, &m)?;
    let ring = PAGE_SIZE + PAGE_SIZE / 2;
    let mut desc = 0u64.to_le_bytes().to_vec();
    desc.extend_from_slice(&(PAGE_SIZE as u32).to_le_bytes());
    desc.extend_from_slice(&0u32.to_le_bytes());
    assert_eq!(desc.len() as u64, DESC_SIZE);
    sys.host_shared_write(C0, realm, ring + 8, &desc).map_err(err)?;
    sys.host_shared_write(C0, realm, ring + 4, &1u32.to_le_bytes())
        .map_err(err)?;
    Ok(match sys.vq_guest(C0, realm, |vq, mem| vq.pop(mem, Ring::Rx)) {
        Err(VqError::PointerEscape { .. }) => blocked("pointer_escape"),
        Err(e) => Outcome::Allowed(format!("other error {e}")),
        Ok(d) => Outcome::Allowed(format!("guest accepted {d:?}")),
    })
}

/// The guest touches an address it never declared as MMIO; the host then
/// re-enters with a forged device value.
fn forged_mmio(sys: &mut System) -> Result<Outcome, String> {
    let realm = launch(sys, &Manifest::new(2, 1, "idle"))?;
    let rec = sys.record(realm).map_err(err)?.rec;
    sys.queue_guest(
        rec,
        [GuestAction::MmioRead {
            ipa: 0x4000_0000,
            reg: 1,
        }],
    )
    .map_err(err)?;
    let exit = sys.rec_enter(C0, rec, None).map_err(err)?;
    sys.rec_enter(C0, rec, Some(0xdead_beef)).map_err(err)?;
    let reg = sys.rmm.rec(rec).ok_or("rec vanished")?.regs[1];
    Ok(match exit {
        ExitReason::Mmio(_) => Outcome::Allowed(format!("emulated; guest register now {reg:#x}")),
        _ if reg == RSI_ERROR => blocked("refuse"),
        other => Outcome::Allowed(format!("{other}, register {reg:#x}")),
    })
}

fn boot_outcome(sys: &mut System, m: &Manifest) -> Result<Outcome, String> {
    let realm = sys.hyp_create_sbs(C0, m).map_err(err)?;
    Ok(match sys.hyp_launch(C0, realm).map_err(err)? {
        ExitReason::BootRejected(_) => detected("validate_boot"),
        other => Outcome::Allowed(format!("booted: {other}")),
    })
}

fn disallowed_device(sys: &mut System) -> Result<Outcome, String> {
    let mut m = Manifest::new(2, 1, "idle");
    m.devices = vec![DeviceKind::VirtioBlock, DeviceKind::VirtioGpu];
    sys.allow_manifest(&m);
    boot_outcome(sys, &m)
}

fn wrong_digest(sys: &mut System) -> Result<Outcome, String> {
    let mut m = Manifest::new(2, 1, "idle");
    m.payload_digest = Some("00".repeat(32));
    sys.allow_manifest(&m);
    boot_outcome(sys, &m)
}

fn device_manifest() -> Manifest {
    let mut m = Manifest::new(2, 2, "idle");
    m.devices = vec![DeviceKind::VirtioBlock];
    m.virtqueue_page = Some(0);
    m
}

fn delivery_outcome(d: Delivery) -> Outcome {
    match d {
        Delivery::TamperDetected => detected("integrity_check"),
        Delivery::Delivered(p) => Outcome::Allowed(format!("delivered {} bytes", p.len())),
    }
}

fn device_tamper(sys: &mut System) -> Result<Outcome, String> {
    let realm = launch(sys, &device_manifest())?;
    let d = sys
        .channel_send(C0, realm, DeviceKind::VirtioBlock, b"block 7 contents", &mut |ct| {
            ct[0] ^= 1
        })
        .map_err(err)?;
    Ok(delivery_outcome(d))
}

fn spurious_device_irq(sys: &mut System) -> Result<Outcome, String> {
    let realm = launch(sys, &device_manifest())?;
    let d = sys
        .channel_receive(C0, realm, DeviceKind::VirtioBlock, None, &mut |_| {})
        .map_err(err)?;
    Ok(delivery_outcome(d))
}

fn rogue_delegate(sys: &mut System) -> Result<Outcome, String> {
    let g = free_granule(sys)?;
    Ok(match sys.rogue_smc(C0, SmcCall::Delegate(g)) {
        Err(e @ RootError::Denied(_)) => Outcome::Blocked(e.tag()),
        Err(e) => Outcome::Allowed(format!("other error {e}")),
        Ok(()) => Outcome::Allowed(format!("granule {g} delegated without a request")),
    })
}

fn overlapping_sandbox(sys: &mut System) -> Result<Outcome, String> {
    let a = launch(sys, &Manifest::new(2, 0, "idle"))?;
    let victim: Vec<u64> = sys.record(a).map_err(err)?.private.iter().map(|(_, g)| g.0).collect();
    let mut m = Manifest::new(2, 0, "idle");
    m.granules = Some(victim);
    sys.allow_manifest(&m);
    Ok(match sys.hyp_create_sbs(C0, &m) {
        Err(HypError::Rmm(e @ RmmError::OverlapViolation { .. })) => Outcome::Blocked(e.tag()),
        Err(e) => Outcome::Allowed(format!("other error {e}")),
        Ok(b) => Outcome::Allowed(format!("realm {b} shares memory with realm {a}")),
    })
}

fn late_share(sys: &mut System) -> Result<Outcome, String> {
    let realm = launch(sys, &Manifest::new(2, 1, "idle"))?;
    let end = sys
        .record(realm)
        .map_err(err)?
        .shared_region()
        .ok_or("no region")?
        .end();
    let g = free_granule(sys)?;
    sys.hyp_delegate(C0, g).map_err(err)?;
    let r = sys.rmi(
        C0,
        RmiCall::RttMapUnprotected {
            realm,
            granule: g,
            ipa: end,
        },
    );
    sys.hyp_undelegate(C0, g).map_err(err)?;
    Ok(match r {
        Err(e @ RmmError::SharingSealed) => Outcome::Blocked(e.tag()),
        Err(e) => Outcome::Allowed(format!("other error {e}")),
        Ok(_) => Outcome::Allowed("shared region grew after activation".into()),
    })
}

fn irq_injection(sys: &mut System) -> Result<Outcome, String> {
    let realm = launch(sys, &Manifest::new(2, 1, "idle"))?;
    Ok(match sys.inject_irq(C0, realm, IrqSource::HypervisorArbitrary(3)) {
        IrqOutcome::Filtered => blocked("filtered"),
        IrqOutcome::Delivered => Outcome::Allowed("arbitrary vector delivered".into()),
    })
}

pub fn catalog() -> Vec<AttackScenario> {
    let s = |name, summary, expected, run: Run| AttackScenario {
        name,
        summary,
        expected,
        cores: 2,
        run,
        waive: None,
    };
    vec![
        AttackScenario {
            waive: Some(waive_boomerang),
            ..s(
                "boomerang",
                "guest dereferences an IPA planted over normal-world memory",
                blocked("gpf"),
                boomerang,
            )
        },
        s(
            "secure_reads_normal",
            "secure world reads app memory",
            blocked("gpf"),
            secure_reads_normal,
        ),
        s(
            "secure_reads_shared",
            "secure world reads an app/sandbox shared page",
            blocked("gpf"),
            secure_reads_shared,
        ),
        s(
            "host_reads_private",
            "hypervisor reads sandbox private memory",
            blocked("gpf"),
            host_reads_private,
        ),
        AttackScenario {
            cores: 3,
            ..s(
                "split_view",
                "two cores race delegate and share on one granule",
                blocked("serialized"),
                split_view,
            )
        },
        s(
            "toctou",
            "host rewrites an RPC length between check and use",
            blocked("gpf"),
            toctou,
        ),
        s(
            "code_injection",
            "guest jumps to host-written bytes in the shared region",
            blocked("execute_fault"),
            code_injection,
        ),
        s(
            "vq_pointer_escape",
            "host queues a descriptor naming private memory",
            blocked("pointer_escape"),
            vq_pointer_escape,
        ),
        s(
            "forged_mmio",
            "host emulates MMIO the guest never declared",
            blocked("refuse"),
            forged_mmio,
        ),
        s(
            "disallowed_device",
            "launch with a device outside the allowed set",
            detected("validate_boot"),
            disallowed_device,
        ),
        s(
            "wrong_digest",
            "launch with a payload whose measurement is not allowed",
            detected("validate_boot"),
            wrong_digest,
        ),
        s(
            "device_tamper",
            "hypervisor flips a ciphertext bit in transit",
            detected("integrity_check"),
            device_tamper,
        ),
        s(
            "spurious_device_irq",
            "device interrupt with no data behind it",
            detected("integrity_check"),
            spurious_device_irq,
        ),
        s(
            "rogue_delegate",
            "realm monitor delegates a granule nobody asked for",
            blocked("denied:unauthorized"),
            rogue_delegate,
        ),
        s(
            "overlapping_sandbox",
            "second sandbox built over the first one's memory",
            blocked("overlap_violation"),
            overlapping_sandbox,
        ),
        s(
            "late_share",
            "hypervisor grows the shared region after activation",
            blocked("sharing_sealed"),
            late_share,
        ),
        s(
            "irq_injection",
            "hypervisor injects an arbitrary interrupt vector",
            blocked("filtered"),
            irq_injection,
        ),
    ]
}

pub fn find(name: &str) -> Option<AttackScenario> {
    catalog().into_iter().find(|s| s.name == name)
}

pub fn run_scenario(s: &AttackScenario, bugs: BugInjection) -> Verdict {
    let mut sys = System::boot(&SystemConfig {
        cores: s.cores,
        bugs,
        ..SystemConfig::default()
    })
    .expect("default layout boots");
    let mut oracle = Oracle::new(&sys);
    let observed = (s.run)(&mut sys).unwrap_or_else(|e| Outcome::Allowed(format!("setup failed: {e}")));
    let ok = observed == s.expected;
    sys.emit(
        Event::new(if ok {
            EventKind::AttackBlocked(s.name.into())
        } else {
            EventKind::Op("attack_succeeded".into())
        })
        .args(s.name)
        .outcome(observed.to_string()),
    );
    let events = sys.pf.machine.trace.take_events();
    let mut violations = oracle.check(&sys, &events, events.last().map_or(0, |e| e.step), s.name);
    if let Some(w) = s.waive {
        violations.retain(|v| !w(v));
    }
    let diffs = match replay(&events) {
        Ok(rep) => compare(&rep, &sys),
        Err(e) => vec![e],
    };
    violations.extend(diffs.into_iter().map(|detail| Violation {
        step: events.last().map_or(0, |e| e.step),
        call: s.name.into(),
        invariant: InvariantId::Replay,
        detail,
    }));
    Verdict {
        name: s.name.into(),
        pass: ok && violations.is_empty(),
        expected: s.expected.clone(),
        observed,
        violations,
        events,
    }
}

pub fn run_all(bugs: BugInjection) -> Vec<Verdict> {
    catalog().iter().map(|s| run_scenario(s, bugs)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let names: BTreeSet<&str> = catalog().iter().map(|s| s.name).collect();
        assert_eq!(names.len(), catalog().len());
    }

    #[test]
    fn find_by_name() {
        assert!(find("toctou").is_some());
        assert!(find("nope").is_none());
    }
}
