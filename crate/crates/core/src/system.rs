// SPDX-License-Identifier: Apache-2.0

//! The assembled machine: hardware plus root firmware, the realm monitor and
//! the untrusted hypervisor, with the world switches each call implies.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::memory::{Access, AccessError, CoreId, GranuleId, Machine, World};
use crate::normal::Hypervisor;
use crate::realm::attest::{AllowList, PlatformImages};
use crate::realm::guest::{ExitReason, GuestCtx};
use crate::realm::{
    IrqOutcome, IrqSource, PendingExit, RealmId, RealmMonitor, RealmParams, RealmState, RecId, Ripas, RmmBugs, RmmError,
};
use crate::root::{boot_create_gpts, MachineLayout, MemoryRmi, RootBugs, RootError, RootMonitor, SmcCall};
use crate::trace::{Event, EventKind};

/// Hardware plus root-world firmware.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Platform {
    pub machine: Machine,
    pub root: RootMonitor,
}

/// Deliberate defects used to check that the invariant oracle notices them.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BugInjection {
    pub skip_log_check: bool,
    pub skip_flush: bool,
    pub skip_nx: bool,
    pub skip_overlap_check: bool,
    pub skip_mmio_gate: bool,
}

impl BugInjection {
    pub const NAMES: [&'static str; 5] = [
        "skip_log_check",
        "skip_flush",
        "skip_nx",
        "skip_overlap_check",
        "skip_mmio_gate",
    ];

    pub fn single(name: &str) -> Option<BugInjection> {
        let mut b = BugInjection::default();
        match name {
            "skip_log_check" => b.skip_log_check = true,
            "skip_flush" => b.skip_flush = true,
            "skip_nx" => b.skip_nx = true,
            "skip_overlap_check" => b.skip_overlap_check = true,
            "skip_mmio_gate" => b.skip_mmio_gate = true,
            _ => return None,
        }
        Some(b)
    }

    pub fn any(&self) -> bool {
        *self != BugInjection::default()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SystemConfig {
    pub layout: MachineLayout,
    pub cores: usize,
    pub images: PlatformImages,
    pub allow_list: AllowList,
    pub bugs: BugInjection,
}

impl Default for SystemConfig {
    fn default() -> Self {
        SystemConfig {
            layout: MachineLayout::default(),
            cores: 2,
            images: PlatformImages::default(),
            allow_list: AllowList::default(),
            bugs: BugInjection::default(),
        }
    }
}

/// Hypervisor-issued realm management calls.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RmiCall {
    GranuleDelegate(GranuleId),
    GranuleUndelegate(GranuleId),
    RealmCreate(RealmParams),
    RecCreate(RealmId),
    RealmActivate(RealmId),
    RecEnter {
        rec: RecId,
        mmio_value: Option<u64>,
    },
    DataCreate {
        realm: RealmId,
        granule: GranuleId,
        ipa: u64,
        content: Vec<u8>,
    },
    RttCreate {
        realm: RealmId,
        base: u64,
        len: u64,
    },
    RttSetRipas {
        realm: RealmId,
        base: u64,
        len: u64,
        state: Ripas,
    },
    RttMapUnprotected {
        realm: RealmId,
        granule: GranuleId,
        ipa: u64,
    },
    /// Destroy a realm and hand back the listed granules. `shared` names
    /// the granules the hypervisor mapped unprotected.
    RealmDestroy {
        realm: RealmId,
        private: Vec<GranuleId>,
        shared: Vec<GranuleId>,
    },
}

impl RmiCall {
    pub fn name(&self) -> &'static str {
        match self {
            RmiCall::GranuleDelegate(_) => "rmi_granule_delegate",
            RmiCall::GranuleUndelegate(_) => "rmi_granule_undelegate",
            RmiCall::RealmCreate(_) => "rmi_realm_create",
            RmiCall::RecCreate(_) => "rmi_rec_create",
            RmiCall::RealmActivate(_) => "rmi_realm_activate",
            RmiCall::RecEnter { .. } => "rmi_rec_enter",
            RmiCall::DataCreate { .. } => "rmi_data_create",
            RmiCall::RttCreate { .. } => "rmi_rtt_create",
            RmiCall::RttSetRipas { .. } => "rmi_rtt_set_ripas",
            RmiCall::RttMapUnprotected { .. } => "rmi_rtt_map_unprotected",
            RmiCall::RealmDestroy { .. } => "rmi_realm_destroy",
        }
    }

    fn realm(&self) -> Option<RealmId> {
        match self {
            RmiCall::RecCreate(r) | RmiCall::RealmActivate(r) => Some(*r),
            RmiCall::DataCreate { realm, .. }
            | RmiCall::RttCreate { realm, .. }
            | RmiCall::RttSetRipas { realm, .. }
            | RmiCall::RttMapUnprotected { realm, .. }
            | RmiCall::RealmDestroy { realm, .. } => Some(*realm),
            _ => None,
        }
    }

    fn granule(&self) -> Option<GranuleId> {
        match self {
            RmiCall::GranuleDelegate(g) | RmiCall::GranuleUndelegate(g) => Some(*g),
            RmiCall::DataCreate { granule, .. } | RmiCall::RttMapUnprotected { granule, .. } => Some(*granule),
            _ => None,
        }
    }

    fn args(&self) -> String {
        match self {
            RmiCall::RealmCreate(p) => {
                let devs: Vec<&str> = p.device_tree.iter().map(|d| d.name()).collect();
                format!("devices={}", devs.join(","))
            }
            RmiCall::RecEnter { rec, mmio_value } => match mmio_value {
                Some(v) => format!("rec={rec} mmio={v:#x}"),
                None => format!("rec={rec}"),
            },
            RmiCall::DataCreate { ipa, .. } | RmiCall::RttMapUnprotected { ipa, .. } => {
                format!("ipa={ipa:#x}")
            }
            RmiCall::RttCreate { base, len, .. } => format!("base={base:#x} len={len:#x}"),
            RmiCall::RttSetRipas { base, len, state, .. } => format!("base={base:#x} len={len:#x} state={state:?}"),
            RmiCall::RealmDestroy { private, shared, .. } => {
                let l = |v: &[GranuleId]| v.iter().map(|g| g.0.to_string()).collect::<Vec<_>>().join(",");
                format!("private={} shared={}", l(private), l(shared))
            }
            _ => String::new(),
        }
    }

    /// Parameters the root firmware records as it forwards the call.
    fn logged(&self) -> Vec<(MemoryRmi, GranuleId, Option<u32>)> {
        match self {
            RmiCall::GranuleDelegate(g) => vec![(MemoryRmi::GranuleDelegate, *g, None)],
            RmiCall::GranuleUndelegate(g) => vec![(MemoryRmi::GranuleUndelegate, *g, None)],
            RmiCall::RttMapUnprotected { realm, granule, .. } => {
                vec![(MemoryRmi::RttMapUnprotected, *granule, Some(realm.0))]
            }
            RmiCall::RealmDestroy { realm, private, shared } => {
                let mut v: Vec<_> = shared
                    .iter()
                    .map(|g| (MemoryRmi::RttUnmapUnprotected, *g, Some(realm.0)))
                    .collect();
                v.extend(
                    private
                        .iter()
                        .chain(shared)
                        .map(|g| (MemoryRmi::GranuleUndelegate, *g, None)),
                );
                v
            }
            _ => vec![],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RmiReturn {
    Done,
    Realm(RealmId),
    Rec(RecId),
    Exit(ExitReason),
    Reclaimed(Vec<GranuleId>),
}

impl fmt::Display for RmiReturn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RmiReturn::Done => f.write_str("ok"),
            RmiReturn::Realm(r) => write!(f, "realm={r}"),
            RmiReturn::Rec(r) => write!(f, "rec={r}"),
            RmiReturn::Exit(e) => write!(f, "exit={}", e.name()),
            RmiReturn::Reclaimed(v) => write!(f, "reclaimed={}", v.len()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct System {
    pub pf: Platform,
    pub rmm: RealmMonitor,
    pub hyp: Hypervisor,
    pub bugs: BugInjection,
}

impl System {
    pub fn boot(cfg: &SystemConfig) -> Result<System, RootError> {
        let (gpt_n, gpt_rs) = boot_create_gpts(&cfg.layout)?;
        let mut machine = Machine::new(gpt_n, gpt_rs, cfg.cores);
        machine.trace.emit(
            Event::new(EventKind::Op("boot".into()))
                .args(format!("{} cores={}", cfg.layout.to_compact(), cfg.cores.max(1)))
                .outcome("ok"),
        );
        let mut root = RootMonitor::new();
        root.bugs = RootBugs {
            skip_log_check: cfg.bugs.skip_log_check,
            skip_flush: cfg.bugs.skip_flush,
        };
        let mut rmm = RealmMonitor::new(cfg.images.clone(), cfg.allow_list.clone());
        rmm.bugs = RmmBugs {
            skip_nx: cfg.bugs.skip_nx,
            skip_overlap_check: cfg.bugs.skip_overlap_check,
            skip_mmio_gate: cfg.bugs.skip_mmio_gate,
        };
        Ok(System {
            pf: Platform { machine, root },
            rmm,
            hyp: Hypervisor::default(),
            bugs: cfg.bugs,
        })
    }

    pub fn machine(&self) -> &Machine {
        &self.pf.machine
    }

    pub fn num_cores(&self) -> usize {
        self.pf.machine.cores().len()
    }

    pub(crate) fn emit(&mut self, ev: Event) -> u64 {
        self.pf.machine.trace.emit(ev)
    }

    /// Issues an RMI from the hypervisor on `core`: normal world to root
    /// (where the call is logged) to realm, and back the same way.
    pub fn rmi(&mut self, core: CoreId, call: RmiCall) -> Result<RmiReturn, RmmError> {
        let name = call.name();
        let (realm, granule, args) = (call.realm(), call.granule(), call.args());
        let logged = call.logged();
        let res = self.dispatch(core, &logged, |sys, core| sys.handle(core, call));
        let mut ev = Event::new(EventKind::Rmi(name.into()))
            .core(core)
            .args(args)
            .outcome(match &res {
                Ok(r) => r.to_string(),
                Err(e) => e.tag(),
            });
        if let Some(r) = realm {
            ev = ev.realm(r.0);
        }
        if let Some(g) = granule {
            ev = ev.granule(g);
        }
        self.emit(ev);
        res
    }

    fn dispatch<T>(
        &mut self,
        core: CoreId,
        logged: &[(MemoryRmi, GranuleId, Option<u32>)],
        f: impl FnOnce(&mut System, CoreId) -> T,
    ) -> T {
        let m = &mut self.pf.machine;
        m.ensure_world(core, World::Normal);
        m.context_switch(core, World::Root);
        for (rmi, g, realm) in logged {
            self.pf
                .root
                .log_rmi(&mut self.pf.machine, core, rmi.name(), Some(*g), *realm);
        }
        self.pf.machine.context_switch(core, World::Realm);
        let out = f(self, core);
        self.pf.machine.context_switch(core, World::Root);
        self.pf.root.expire_log();
        self.pf.machine.context_switch(core, World::Normal);
        out
    }

    fn handle(&mut self, core: CoreId, call: RmiCall) -> Result<RmiReturn, RmmError> {
        let (pf, rmm) = (&mut self.pf, &mut self.rmm);
        match call {
            RmiCall::GranuleDelegate(g) => rmm.rmi_granule_delegate(pf, core, g).map(|_| RmiReturn::Done),
            RmiCall::GranuleUndelegate(g) => rmm.rmi_granule_undelegate(pf, core, g).map(|_| RmiReturn::Done),
            RmiCall::RealmCreate(p) => Ok(RmiReturn::Realm(rmm.rmi_realm_create(p))),
            RmiCall::RecCreate(r) => rmm.rmi_rec_create(r).map(RmiReturn::Rec),
            RmiCall::RealmActivate(r) => rmm.rmi_realm_activate(r).map(|_| RmiReturn::Done),
            RmiCall::RecEnter { rec, mmio_value } => {
                let exit = self.enter(core, rec, mmio_value, |ctx| ((), ctx.run_script()))?;
                Ok(RmiReturn::Exit(exit.1))
            }
            RmiCall::DataCreate {
                realm,
                granule,
                ipa,
                content,
            } => rmm
                .rmi_data_create(pf, core, realm, granule, ipa, &content)
                .map(|_| RmiReturn::Done),
            RmiCall::RttCreate { realm, base, len } => rmm.rmi_rtt_create(realm, base, len).map(|_| RmiReturn::Done),
            RmiCall::RttSetRipas {
                realm,
                base,
                len,
                state,
            } => rmm.rmi_rtt_set_ripas(realm, base, len, state).map(|_| RmiReturn::Done),
            RmiCall::RttMapUnprotected { realm, granule, ipa } => rmm
                .rmi_rtt_map_unprotected(pf, core, realm, granule, ipa)
                .map(|_| RmiReturn::Done),
            RmiCall::RealmDestroy { realm, private, shared } => {
                let all: Vec<GranuleId> = private.iter().chain(&shared).copied().collect();
                rmm.rmi_destroy_realm(pf, core, realm, &all).map(RmiReturn::Reclaimed)
            }
        }
    }

    /// Body of a REC entry, already running in the realm world. Validates
    /// boot on first entry, then runs `body` as the guest.
    fn enter<R>(
        &mut self,
        core: CoreId,
        rec: RecId,
        mmio_value: Option<u64>,
        body: impl FnOnce(&mut GuestCtx) -> (R, ExitReason),
    ) -> Result<(Option<R>, ExitReason), RmmError> {
        let realm = self.rmm.rec(rec).ok_or(RmmError::NoSuchRec(rec))?.realm;
        let desc = self.rmm.realm(realm).ok_or(RmmError::NoSuchRealm(realm))?;
        if desc.state != RealmState::Active {
            return Err(RmmError::WrongState(format!("realm {realm} is {:?}", desc.state)));
        }
        let (booted, device_tree) = (desc.booted, desc.params.device_tree.clone());
        let r = self.rmm.rec_mut(rec)?;
        match (r.pending.take(), mmio_value) {
            (Some(PendingExit::MmioRead { reg }), v) => r.regs[reg] = v.unwrap_or(0),
            (_, Some(v)) => {
                self.pf.machine.trace.emit(
                    Event::new(EventKind::Op("mmio_value_ignored".into()))
                        .core(core)
                        .realm(realm.0)
                        .args(format!("value={v:#x}"))
                        .outcome("no_pending_read"),
                );
            }
            _ => {}
        }
        if !booted {
            if let crate::realm::attest::BootVerdict::Reject(why) =
                self.rmm.validate_boot(&mut self.pf, core, realm, &device_tree)?
            {
                let exit = ExitReason::BootRejected(why);
                self.emit_exit(core, realm, &exit);
                return Ok((None, exit));
            }
        }
        self.rmm.take_pending_irqs(realm);
        let mut ctx = GuestCtx::new(&mut self.pf, &mut self.rmm, core, realm, rec);
        let (out, exit) = body(&mut ctx);
        self.emit_exit(core, realm, &exit);
        Ok((Some(out), exit))
    }

    fn emit_exit(&mut self, core: CoreId, realm: RealmId, exit: &ExitReason) {
        self.emit(
            Event::new(EventKind::Exit(exit.name().into()))
                .core(core)
                .realm(realm.0)
                .outcome(exit.to_string()),
        );
    }

    /// Enters a REC and runs a built-in guest service instead of its script.
    /// Returns `None` for the service result if boot validation rejected the
    /// realm.
    pub fn rec_enter_service<R>(
        &mut self,
        core: CoreId,
        rec: RecId,
        body: impl FnOnce(&mut GuestCtx) -> R,
    ) -> Result<(Option<R>, ExitReason), RmmError> {
        let realm = self.rmm.rec(rec).map(|r| r.realm);
        let res = self.dispatch(core, &[], |sys, core| {
            sys.enter(core, rec, None, |ctx| (body(ctx), ExitReason::ServiceDone))
        });
        let mut ev = Event::new(EventKind::Rmi("rmi_rec_enter".into()))
            .core(core)
            .args(format!("rec={rec} service"))
            .outcome(match &res {
                Ok((_, exit)) => format!("exit={}", exit.name()),
                Err(e) => e.tag(),
            });
        if let Some(r) = realm {
            ev = ev.realm(r.0);
        }
        self.emit(ev);
        res
    }

    pub fn rec_enter(&mut self, core: CoreId, rec: RecId, mmio_value: Option<u64>) -> Result<ExitReason, RmmError> {
        match self.rmi(core, RmiCall::RecEnter { rec, mmio_value })? {
            RmiReturn::Exit(e) => Ok(e),
            other => unreachable!("rec_enter returned {other:?}"),
        }
    }

    /// Queues guest actions on a REC for its next entry.
    pub fn queue_guest(
        &mut self,
        rec: RecId,
        actions: impl IntoIterator<Item = crate::normal::script::GuestAction>,
    ) -> Result<(), RmmError> {
        self.rmm.rec_mut(rec)?.script.extend(actions);
        Ok(())
    }

    /// Hypervisor interrupt injection, filtered by the realm monitor.
    pub fn inject_irq(&mut self, core: CoreId, realm: RealmId, source: IrqSource) -> IrqOutcome {
        self.dispatch(core, &[], |sys, core| {
            sys.rmm.inject_interrupt(&mut sys.pf, core, realm, source)
        })
    }

    /// Several cores issue granule delegation or undelegation RMIs at the
    /// same instant. Each request is logged as its RMI enters the root world
    /// and checked by the realm monitor; the surviving SMCs then contend for
    /// the table lock.
    pub fn race(&mut self, requests: &[(CoreId, SmcCall)]) -> Vec<Result<(), RmmError>> {
        let mut results: Vec<Result<(), RmmError>> = Vec::with_capacity(requests.len());
        let mut issued = vec![];
        for &(core, call) in requests {
            let m = &mut self.pf.machine;
            m.ensure_world(core, World::Normal);
            m.context_switch(core, World::Root);
            let rmi = match call {
                SmcCall::Delegate(_) => MemoryRmi::GranuleDelegate,
                SmcCall::Undelegate(_) => MemoryRmi::GranuleUndelegate,
                _ => {
                    results.push(Err(RmmError::WrongState(format!("{} cannot race", call.name()))));
                    self.pf.machine.context_switch(core, World::Realm);
                    continue;
                }
            };
            let g = call.granule();
            self.pf
                .root
                .log_rmi(&mut self.pf.machine, core, rmi.name(), Some(g), None);
            self.pf.machine.context_switch(core, World::Realm);
            let pre = match call {
                SmcCall::Undelegate(_) => self.rmm.undelegate_precheck(&mut self.pf, core, g),
                _ => Ok(()),
            };
            if pre.is_ok() {
                issued.push((core, call));
            }
            results.push(pre);
        }
        let mut outcomes = self.pf.root.contend(&mut self.pf.machine, &issued).into_iter();
        for (&(_, call), r) in requests.iter().zip(results.iter_mut()) {
            if r.is_err() {
                continue;
            }
            *r = outcomes
                .next()
                .expect("one outcome per issued SMC")
                .map_err(RmmError::from);
            if r.is_ok() {
                let index = self.rmm.index_mut();
                match call {
                    SmcCall::Delegate(g) => {
                        index.delegated.insert(g);
                    }
                    SmcCall::Undelegate(g) => {
                        index.delegated.remove(&g);
                        index.released.remove(&g);
                    }
                    _ => {}
                }
            }
        }
        for &(core, _) in requests {
            self.pf.machine.context_switch(core, World::Root);
        }
        self.pf.root.expire_log();
        for (&(core, call), r) in requests.iter().zip(&results) {
            self.pf.machine.context_switch(core, World::Normal);
            let rmi = match call {
                SmcCall::Undelegate(_) => "rmi_granule_undelegate",
                _ => "rmi_granule_delegate",
            };
            self.emit(
                Event::new(EventKind::Rmi(rmi.into()))
                    .core(core)
                    .granule(call.granule())
                    .args("race")
                    .outcome(match r {
                        Ok(()) => "ok".to_string(),
                        Err(e) => e.tag(),
                    }),
            );
        }
        results
    }

    /// A realm-monitor SMC that no hypervisor RMI asked for, as a
    /// compromised monitor would issue.
    pub fn rogue_smc(&mut self, core: CoreId, call: SmcCall) -> Result<(), RootError> {
        self.pf.machine.ensure_world(core, World::Realm);
        let r = self.pf.root.smc(&mut self.pf.machine, core, call);
        self.emit(
            Event::new(EventKind::Op("rogue_smc".into()))
                .core(core)
                .granule(call.granule())
                .args(call.name())
                .outcome(match &r {
                    Ok(()) => "ok".to_string(),
                    Err(e) => e.tag(),
                }),
        );
        self.pf.machine.ensure_world(core, World::Normal);
        r
    }

    fn world_access(
        &mut self,
        core: CoreId,
        world: World,
        pa: u64,
        access: Access,
        data: Option<&[u8]>,
        len: usize,
    ) -> Result<Vec<u8>, AccessError> {
        self.pf.machine.ensure_world(core, world);
        let res = match (access, data) {
            (Access::Write, Some(d)) => self.pf.machine.write(core, pa, d).map(|_| vec![]),
            (Access::Execute, _) => self.pf.machine.fetch(core, pa).map(|_| vec![]),
            _ => self.pf.machine.read(core, pa, len),
        };
        let name = format!("{}_{}", world.name().to_lowercase(), access.name());
        self.emit(
            Event::new(EventKind::Op(name))
                .core(core)
                .granule(GranuleId::from_pa(pa))
                .addr(pa)
                .args(format!("len={}", data.map_or(len, |d| d.len())))
                .outcome(match &res {
                    Ok(_) => "ok",
                    Err(AccessError::GranuleProtectionFault { .. }) => "gpf",
                    Err(AccessError::OutOfRange(_)) => "out_of_range",
                }),
        );
        res
    }

    pub fn host_read(&mut self, core: CoreId, pa: u64, len: usize) -> Result<Vec<u8>, AccessError> {
        self.world_access(core, World::Normal, pa, Access::Read, None, len)
    }

    pub fn host_write(&mut self, core: CoreId, pa: u64, data: &[u8]) -> Result<(), AccessError> {
        self.world_access(core, World::Normal, pa, Access::Write, Some(data), 0)
            .map(|_| ())
    }

    pub fn host_exec(&mut self, core: CoreId, pa: u64) -> Result<(), AccessError> {
        self.world_access(core, World::Normal, pa, Access::Execute, None, 0)
            .map(|_| ())
    }

    pub fn secure_read(&mut self, core: CoreId, pa: u64, len: usize) -> Result<Vec<u8>, AccessError> {
        self.world_access(core, World::Secure, pa, Access::Read, None, len)
    }

    pub fn secure_write(&mut self, core: CoreId, pa: u64, data: &[u8]) -> Result<(), AccessError> {
        self.world_access(core, World::Secure, pa, Access::Write, Some(data), 0)
            .map(|_| ())
    }
}
