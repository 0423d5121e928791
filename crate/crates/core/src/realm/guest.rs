// SPDX-License-Identifier: Apache-2.0

//! Execution of a realm vCPU between entry and exit.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::attest::{RejectReason, Report};
use super::{
    page_of, MmioDecision, MmioRequest, PendingExit, RealmId, RealmMonitor, RecId, Ripas, RmmError, PAGE_SIZE, REC_REGS,
};
use crate::memory::{Access, CoreId, World};
use crate::normal::script::{GuestAction, RsiCall};
use crate::system::Platform;
use crate::trace::{Event, EventKind};

/// Register value reporting a failed RSI or a refused device access.
pub const RSI_ERROR: u64 = u64::MAX;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExitReason {
    /// The script ran dry.
    Idle,
    Halt,
    Mmio(MmioRequest),
    RipasChange {
        base: u64,
        len: u64,
        state: Ripas,
    },
    Fault {
        ipa: u64,
        kind: String,
    },
    BootRejected(RejectReason),
    /// A built-in service handler returned.
    ServiceDone,
}

impl ExitReason {
    pub fn name(&self) -> &'static str {
        match self {
            ExitReason::Idle => "idle",
            ExitReason::Halt => "halt",
            ExitReason::Mmio(_) => "mmio",
            ExitReason::RipasChange { .. } => "ripas",
            ExitReason::Fault { .. } => "fault",
            ExitReason::BootRejected(_) => "boot_rejected",
            ExitReason::ServiceDone => "service",
        }
    }
}

impl fmt::Display for ExitReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExitReason::Mmio(r) => match r.write {
                Some(v) => write!(f, "mmio write {:#x}={v:#x}", r.ipa),
                None => write!(f, "mmio read {:#x}", r.ipa),
            },
            ExitReason::RipasChange { base, len, state } => {
                write!(f, "ripas [{base:#x}, +{len:#x}) {state:?}")
            }
            ExitReason::Fault { ipa, kind } => write!(f, "fault {kind} at {ipa:#x}"),
            ExitReason::BootRejected(r) => write!(f, "boot rejected: {r}"),
            other => f.write_str(other.name()),
        }
    }
}

/// What a guest can do while it runs: IPA-addressed memory access and RSI
/// calls, all bound to its own stage-2 table and to the core it runs on.
pub struct GuestCtx<'a> {
    pub(crate) pf: &'a mut Platform,
    pub(crate) rmm: &'a mut RealmMonitor,
    core: CoreId,
    realm: RealmId,
    rec: RecId,
}

impl<'a> GuestCtx<'a> {
    pub(crate) fn new(
        pf: &'a mut Platform,
        rmm: &'a mut RealmMonitor,
        core: CoreId,
        realm: RealmId,
        rec: RecId,
    ) -> GuestCtx<'a> {
        GuestCtx {
            pf,
            rmm,
            core,
            realm,
            rec,
        }
    }

    pub fn realm(&self) -> RealmId {
        self.realm
    }

    pub fn rec(&self) -> RecId {
        self.rec
    }

    pub fn core(&self) -> CoreId {
        self.core
    }

    pub fn shared_region(&self) -> Option<super::SharedRegion> {
        self.rmm.realm(self.realm).and_then(|r| r.shared_region)
    }

    /// Highest protected page the realm has mapped.
    pub fn last_private_page(&self) -> Option<u64> {
        self.rmm
            .realm(self.realm)?
            .s2
            .iter()
            .filter(|(_, e)| !e.unprotected)
            .map(|(ipa, _)| *ipa)
            .next_back()
    }

    pub fn platform(&mut self) -> &mut Platform {
        self.pf
    }

    fn access(&mut self, ipa: u64, len: usize, access: Access) -> Result<Vec<(u64, usize)>, super::GuestFault> {
        let mut spans = vec![];
        let mut addr = ipa;
        let end = ipa
            .checked_add(len as u64)
            .ok_or(super::GuestFault::Translation { ipa })?;
        while addr < end {
            let e = self.rmm.translate(self.realm, addr, access)?;
            let off = addr - page_of(addr);
            let n = (PAGE_SIZE - off).min(end - addr);
            spans.push((e.granule.pa() + off, n as usize));
            addr += n;
        }
        Ok(spans)
    }

    pub fn read(&mut self, ipa: u64, len: usize) -> Result<Vec<u8>, super::GuestFault> {
        let spans = self.access(ipa, len, Access::Read)?;
        let mut out = Vec::with_capacity(len);
        for (pa, n) in spans {
            out.extend(self.pf.machine.read(self.core, pa, n)?);
        }
        Ok(out)
    }

    pub fn write(&mut self, ipa: u64, data: &[u8]) -> Result<(), super::GuestFault> {
        let spans = self.access(ipa, data.len(), Access::Write)?;
        for (pa, _) in &spans {
            self.pf
                .machine
                .gpc_check(self.core, crate::memory::GranuleId::from_pa(*pa), Access::Write)?;
        }
        let mut done = 0;
        for (pa, n) in spans {
            self.pf.machine.write(self.core, pa, &data[done..done + n])?;
            done += n;
        }
        Ok(())
    }

    pub fn exec(&mut self, ipa: u64) -> Result<(), super::GuestFault> {
        let e = self.rmm.translate(self.realm, ipa, Access::Execute)?;
        self.pf.machine.fetch(self.core, e.granule.pa())?;
        Ok(())
    }

    pub fn read_u32(&mut self, ipa: u64) -> Result<u32, super::GuestFault> {
        let b = self.read(ipa, 4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub fn read_u64(&mut self, ipa: u64) -> Result<u64, super::GuestFault> {
        let b = self.read(ipa, 8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub fn rsi_ex_access(&mut self, pages: &[u64], enable: bool) -> Result<(), RmmError> {
        self.rmm.rsi_ex_access(self.pf, self.core, self.realm, pages, enable)
    }

    pub fn rsi_mmio(&mut self, pages: &[u64]) -> Result<(), RmmError> {
        self.rmm.rsi_mmio(self.pf, self.core, self.realm, pages)
    }

    pub fn attestation_report(&mut self) -> Result<Report, RmmError> {
        let res = self.rmm.get_attestation_report(self.realm);
        let ev = Event::new(EventKind::Rsi("rsi_attestation_token".into()))
            .core(self.core)
            .realm(self.realm.0)
            .outcome(match &res {
                Ok(_) => "ok".to_string(),
                Err(e) => e.tag(),
            });
        self.pf.machine.trace.emit(ev);
        res
    }

    /// Runs a normal-world actor on another core while the guest is paused
    /// mid-operation. The closure sees the machine as that core would.
    pub fn interleave_host<R>(&mut self, host: CoreId, f: impl FnOnce(&mut Platform, CoreId) -> R) -> R {
        assert_ne!(host, self.core, "host must run on a different core");
        self.pf.machine.ensure_world(host, World::Normal);
        f(self.pf, host)
    }

    fn set_reg(&mut self, reg: usize, v: u64) {
        if let Ok(rec) = self.rmm.rec_mut(self.rec) {
            rec.regs[reg % REC_REGS] = v;
        }
    }

    fn op(&mut self, name: &str, ipa: u64, outcome: &str) {
        self.pf.machine.trace.emit(
            Event::new(EventKind::Op(name.into()))
                .core(self.core)
                .realm(self.realm.0)
                .addr(ipa)
                .outcome(outcome),
        );
    }

    fn fault(&mut self, name: &str, ipa: u64, f: super::GuestFault) -> ExitReason {
        self.op(name, ipa, f.tag());
        ExitReason::Fault {
            ipa,
            kind: f.tag().to_string(),
        }
    }

    fn device_access(&mut self, ipa: u64, reg: usize, write: Option<u64>) -> Option<ExitReason> {
        let access = if write.is_some() { Access::Write } else { Access::Read };
        if self.rmm.translate(self.realm, ipa, access).is_ok() {
            // Mapped page: ordinary memory semantics, no trap.
            match write {
                Some(v) => {
                    if let Err(f) = self.write(ipa, &v.to_le_bytes()) {
                        return Some(self.fault("guest_write", ipa, f));
                    }
                }
                None => match self.read_u64(ipa) {
                    Ok(v) => self.set_reg(reg, v),
                    Err(f) => return Some(self.fault("guest_read", ipa, f)),
                },
            }
            return None;
        }
        match self.rmm.handle_mmio_exit(self.pf, self.core, self.realm, ipa, write) {
            MmioDecision::Emulate(req) => {
                if write.is_none() {
                    if let Ok(rec) = self.rmm.rec_mut(self.rec) {
                        rec.pending = Some(PendingExit::MmioRead { reg });
                    }
                }
                Some(ExitReason::Mmio(req))
            }
            MmioDecision::Refuse => {
                self.set_reg(reg, RSI_ERROR);
                None
            }
        }
    }

    fn next_action(&mut self) -> Option<GuestAction> {
        self.rmm.rec_mut(self.rec).ok()?.script.pop_front()
    }

    /// Runs queued guest actions until one of them traps to the hypervisor.
    pub fn run_script(&mut self) -> ExitReason {
        while let Some(action) = self.next_action() {
            match action {
                GuestAction::WriteMem { ipa, data } => match self.write(ipa, &data) {
                    Ok(()) => self.op("guest_write", ipa, "ok"),
                    Err(f) => return self.fault("guest_write", ipa, f),
                },
                GuestAction::ReadMem { ipa, len } => match self.read(ipa, len as usize) {
                    Ok(bytes) => {
                        self.op("guest_read", ipa, "ok");
                        if let Ok(rec) = self.rmm.rec_mut(self.rec) {
                            rec.last_read = bytes;
                        }
                    }
                    Err(f) => return self.fault("guest_read", ipa, f),
                },
                GuestAction::Exec { ipa } => match self.exec(ipa) {
                    Ok(()) => self.op("guest_exec", ipa, "ok"),
                    Err(f) => return self.fault("guest_exec", ipa, f),
                },
                GuestAction::Rsi(RsiCall::ExAccess { pages, enable }) => {
                    let r = self.rsi_ex_access(&pages, enable);
                    self.set_reg(0, if r.is_ok() { 0 } else { RSI_ERROR });
                }
                GuestAction::Rsi(RsiCall::Mmio { pages }) => {
                    let r = self.rsi_mmio(&pages);
                    self.set_reg(0, if r.is_ok() { 0 } else { RSI_ERROR });
                }
                GuestAction::Rsi(RsiCall::SetRipas { base, len, state }) => {
                    let ev = Event::new(EventKind::Rsi("rsi_ipa_state_set".into()))
                        .core(self.core)
                        .realm(self.realm.0)
                        .addr(base)
                        .args(format!("len={len:#x} state={state:?}"))
                        .outcome("exit");
                    self.pf.machine.trace.emit(ev);
                    if let Ok(rec) = self.rmm.rec_mut(self.rec) {
                        rec.pending = Some(PendingExit::Ripas { base, len, state });
                    }
                    return ExitReason::RipasChange { base, len, state };
                }
                GuestAction::Rsi(RsiCall::AttestationReport) => match self.attestation_report() {
                    Ok(rep) => {
                        let v = u64::from_le_bytes(rep.realm_measurement[..8].try_into().expect("8"));
                        self.set_reg(0, 0);
                        self.set_reg(1, v);
                    }
                    Err(_) => self.set_reg(0, RSI_ERROR),
                },
                GuestAction::MmioRead { ipa, reg } => {
                    if let Some(exit) = self.device_access(ipa, reg, None) {
                        return exit;
                    }
                }
                GuestAction::MmioWrite { ipa, value } => {
                    if let Some(exit) = self.device_access(ipa, 0, Some(value)) {
                        return exit;
                    }
                }
                GuestAction::Halt => return ExitReason::Halt,
            }
        }
        ExitReason::Idle
    }
}
