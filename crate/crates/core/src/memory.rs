// SPDX-License-Identifier: Apache-2.0

//! Physical machine model: granules, worlds, per-core security state, the two
//! granule protection tables and the granule protection check (GPC) that
//! filters every memory access.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::{Event, EventKind, Trace};

pub const GRANULE_SIZE: usize = 4096;
pub const GRANULE_SHIFT: u32 = 12;
pub const DEFAULT_GRANULES: u64 = 1024;

static ZERO_GRANULE: [u8; GRANULE_SIZE] = [0; GRANULE_SIZE];

/// Tag a GPT assigns to a granule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PasValue {
    Root,
    Realm,
    Normal,
    Secure,
    NotAccessible,
    AllAccessible,
}

impl PasValue {
    pub const ALL: [PasValue; 6] = [
        PasValue::Root,
        PasValue::Realm,
        PasValue::Normal,
        PasValue::Secure,
        PasValue::NotAccessible,
        PasValue::AllAccessible,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PasValue::Root => "Root",
            PasValue::Realm => "Realm",
            PasValue::Normal => "Normal",
            PasValue::Secure => "Secure",
            PasValue::NotAccessible => "NotAccessible",
            PasValue::AllAccessible => "AllAccessible",
        }
    }

    pub fn from_name(s: &str) -> Option<PasValue> {
        PasValue::ALL.into_iter().find(|p| p.name() == s)
    }
}

impl fmt::Display for PasValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Value of a core's security-state register.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum World {
    Root,
    Realm,
    Normal,
    Secure,
}

impl World {
    pub const ALL: [World; 4] = [World::Root, World::Realm, World::Normal, World::Secure];

    /// The GPT a core in this world is bound to. Root bypasses the GPC.
    pub fn gpt(self) -> Option<GptId> {
        match self {
            World::Root => None,
            World::Normal => Some(GptId::Normal),
            World::Realm | World::Secure => Some(GptId::RealmSecure),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            World::Root => "Root",
            World::Realm => "Realm",
            World::Normal => "Normal",
            World::Secure => "Secure",
        }
    }
}

impl fmt::Display for World {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Access {
    Read,
    Write,
    Execute,
}

impl Access {
    pub const ALL: [Access; 3] = [Access::Read, Access::Write, Access::Execute];

    pub fn name(self) -> &'static str {
        match self {
            Access::Read => "read",
            Access::Write => "write",
            Access::Execute => "exec",
        }
    }
}

/// `Normal` is GPT_n, used by normal-world cores; `RealmSecure` is GPT_rs,
/// used by realm and secure-world cores.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum GptId {
    Normal,
    RealmSecure,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GranuleId(pub u64);

impl GranuleId {
    pub fn from_pa(pa: u64) -> GranuleId {
        GranuleId(pa >> GRANULE_SHIFT)
    }

    pub fn pa(self) -> u64 {
        self.0 << GRANULE_SHIFT
    }
}

impl fmt::Display for GranuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.pa())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CoreId(pub usize);

/// The world-vs-PAS access matrix applied by the GPC.
pub fn gpc_permits(world: World, pas: PasValue) -> bool {
    match world {
        World::Root => true,
        World::Realm => matches!(pas, PasValue::Realm | PasValue::AllAccessible),
        World::Normal => matches!(pas, PasValue::Normal | PasValue::AllAccessible),
        World::Secure => matches!(pas, PasValue::Secure | PasValue::AllAccessible),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Gpt {
    id: GptId,
    entries: Vec<PasValue>,
}

impl Gpt {
    pub(crate) fn from_entries(id: GptId, entries: Vec<PasValue>) -> Gpt {
        Gpt { id, entries }
    }

    pub fn id(&self) -> GptId {
        self.id
    }

    pub fn len(&self) -> u64 {
        self.entries.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, granule: GranuleId) -> Option<PasValue> {
        self.entries.get(granule.0 as usize).copied()
    }

    pub fn entries(&self) -> &[PasValue] {
        &self.entries
    }

    // Only the root monitor mutates GPT entries.
    pub(crate) fn set(&mut self, granule: GranuleId, pas: PasValue) {
        self.entries[granule.0 as usize] = pas;
    }
}

/// One granule of physical memory. Content is allocated lazily; an
/// unallocated granule reads as zeros.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Granule {
    index: GranuleId,
    content: Option<Vec<u8>>,
}

impl Granule {
    fn new(index: GranuleId) -> Granule {
        Granule { index, content: None }
    }

    pub fn index(&self) -> GranuleId {
        self.index
    }

    pub fn bytes(&self) -> &[u8] {
        match &self.content {
            Some(c) => c,
            None => &ZERO_GRANULE,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.bytes().iter().all(|&b| b == 0)
    }

    fn bytes_mut(&mut self) -> &mut [u8] {
        self.content.get_or_insert_with(|| vec![0; GRANULE_SIZE])
    }

    fn scrub(&mut self) {
        self.content = None;
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Core {
    id: CoreId,
    sec_state: World,
    active_gpt: Option<GptId>,
    tlb: BTreeMap<u64, PasValue>,
}

impl Core {
    fn new(id: CoreId) -> Core {
        Core {
            id,
            sec_state: World::Normal,
            active_gpt: World::Normal.gpt(),
            tlb: BTreeMap::new(),
        }
    }

    pub fn id(&self) -> CoreId {
        self.id
    }

    pub fn sec_state(&self) -> World {
        self.sec_state
    }

    pub fn active_gpt(&self) -> Option<GptId> {
        self.active_gpt
    }

    pub fn tlb(&self) -> &BTreeMap<u64, PasValue> {
        &self.tlb
    }
}

#[derive(Clone, Debug, Error, PartialEq, Eq, Serialize, Deserialize)]
pub enum AccessError {
    #[error("granule protection fault: {world} core {core} -> {pas} granule {granule} ({access:?})")]
    GranuleProtectionFault {
        core: usize,
        world: World,
        granule: GranuleId,
        pas: PasValue,
        access: Access,
    },
    #[error("physical address {0:#x} outside the machine")]
    OutOfRange(u64),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Machine {
    granules: Vec<Granule>,
    gpt_n: Gpt,
    gpt_rs: Gpt,
    cores: Vec<Core>,
    pub(crate) trace: Trace,
}

impl Machine {
    pub(crate) fn new(gpt_n: Gpt, gpt_rs: Gpt, num_cores: usize) -> Machine {
        debug_assert_eq!(gpt_n.len(), gpt_rs.len());
        let granules = (0..gpt_n.len()).map(|i| Granule::new(GranuleId(i))).collect();
        Machine {
            granules,
            gpt_n,
            gpt_rs,
            cores: (0..num_cores.max(1)).map(|i| Core::new(CoreId(i))).collect(),
            trace: Trace::default(),
        }
    }

    pub fn num_granules(&self) -> u64 {
        self.granules.len() as u64
    }

    pub fn contains(&self, granule: GranuleId) -> bool {
        granule.0 < self.num_granules()
    }

    pub fn cores(&self) -> &[Core] {
        &self.cores
    }

    pub fn core(&self, id: CoreId) -> &Core {
        &self.cores[id.0]
    }

    pub fn gpt(&self, id: GptId) -> &Gpt {
        match id {
            GptId::Normal => &self.gpt_n,
            GptId::RealmSecure => &self.gpt_rs,
        }
    }

    pub(crate) fn gpt_mut(&mut self, id: GptId) -> &mut Gpt {
        match id {
            GptId::Normal => &mut self.gpt_n,
            GptId::RealmSecure => &mut self.gpt_rs,
        }
    }

    /// (GPT_n, GPT_rs) entries for a granule.
    pub fn gpt_pair(&self, granule: GranuleId) -> Option<(PasValue, PasValue)> {
        Some((self.gpt_n.get(granule)?, self.gpt_rs.get(granule)?))
    }

    pub fn granule(&self, granule: GranuleId) -> Option<&Granule> {
        self.granules.get(granule.0 as usize)
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn trace_mut(&mut self) -> &mut Trace {
        &mut self.trace
    }

    /// PAS value a core would use for `granule` right now (TLB first, then the
    /// bound GPT), without filling the TLB. `None` for Root cores.
    pub fn effective_pas(&self, core: CoreId, granule: GranuleId) -> Option<PasValue> {
        let c = &self.cores[core.0];
        if let Some(p) = c.tlb.get(&granule.0) {
            return Some(*p);
        }
        self.gpt(c.active_gpt?).get(granule)
    }

    pub fn gpc_check(&mut self, core: CoreId, granule: GranuleId, access: Access) -> Result<(), AccessError> {
        if !self.contains(granule) {
            return Err(AccessError::OutOfRange(granule.pa()));
        }
        let world = self.cores[core.0].sec_state;
        let Some(gpt) = self.cores[core.0].active_gpt else {
            return Ok(());
        };
        let pas = match self.cores[core.0].tlb.get(&granule.0) {
            Some(p) => *p,
            None => {
                let p = self.gpt(gpt).get(granule).expect("range checked");
                self.cores[core.0].tlb.insert(granule.0, p);
                p
            }
        };
        if gpc_permits(world, pas) {
            return Ok(());
        }
        self.trace.emit(
            Event::new(EventKind::Gpf)
                .core(core)
                .granule(granule)
                .args(format!("world={world} pas={pas} access={}", access.name()))
                .outcome("fault"),
        );
        Err(AccessError::GranuleProtectionFault {
            core: core.0,
            world,
            granule,
            pas,
            access,
        })
    }

    pub fn flush_all_gpc_tlbs(&mut self, core: Option<CoreId>) {
        for c in &mut self.cores {
            c.tlb.clear();
        }
        let mut ev = Event::new(EventKind::TlbFlush).outcome("ok");
        if let Some(core) = core {
            ev = ev.core(core);
        }
        self.trace.emit(ev);
    }

    pub fn context_switch(&mut self, core: CoreId, to: World) {
        let c = &mut self.cores[core.0];
        let from = c.sec_state;
        c.sec_state = to;
        c.active_gpt = to.gpt();
        c.tlb.clear();
        self.trace.emit(
            Event::new(EventKind::ContextSwitch)
                .core(core)
                .args(format!("{from}->{to}"))
                .outcome("ok"),
        );
    }

    /// Switch only if the core is not already in `to`; used by dispatch paths
    /// that would otherwise count redundant switches.
    pub(crate) fn ensure_world(&mut self, core: CoreId, to: World) {
        if self.cores[core.0].sec_state != to {
            self.context_switch(core, to);
        }
    }

    fn check_span(&mut self, core: CoreId, pa: u64, len: usize, access: Access) -> Result<(), AccessError> {
        if len == 0 {
            return Ok(());
        }
        let end = pa.checked_add(len as u64 - 1).ok_or(AccessError::OutOfRange(pa))?;
        for g in (pa >> GRANULE_SHIFT)..=(end >> GRANULE_SHIFT) {
            self.gpc_check(core, GranuleId(g), access)?;
        }
        Ok(())
    }

    /// Reads `len` bytes at a physical address. Every granule touched is
    /// checked before any byte moves.
    pub fn read(&mut self, core: CoreId, pa: u64, len: usize) -> Result<Vec<u8>, AccessError> {
        self.check_span(core, pa, len, Access::Read)?;
        let mut out = Vec::with_capacity(len);
        let mut addr = pa;
        while out.len() < len {
            let g = &self.granules[(addr >> GRANULE_SHIFT) as usize];
            let off = (addr as usize) % GRANULE_SIZE;
            let n = (GRANULE_SIZE - off).min(len - out.len());
            out.extend_from_slice(&g.bytes()[off..off + n]);
            addr += n as u64;
        }
        Ok(out)
    }

    pub fn write(&mut self, core: CoreId, pa: u64, data: &[u8]) -> Result<(), AccessError> {
        self.check_span(core, pa, data.len(), Access::Write)?;
        let mut addr = pa;
        let mut done = 0;
        while done < data.len() {
            let g = &mut self.granules[(addr >> GRANULE_SHIFT) as usize];
            let off = (addr as usize) % GRANULE_SIZE;
            let n = (GRANULE_SIZE - off).min(data.len() - done);
            g.bytes_mut()[off..off + n].copy_from_slice(&data[done..done + n]);
            addr += n as u64;
            done += n;
        }
        Ok(())
    }

    /// Instruction fetch from a granule; only the GPC is consulted here,
    /// stage-2 execute permissions are the realm monitor's business.
    pub fn fetch(&mut self, core: CoreId, pa: u64) -> Result<(), AccessError> {
        self.gpc_check(core, GranuleId::from_pa(pa), Access::Execute)
    }

    /// Zero a whole granule from the given core (subject to the GPC).
    pub fn scrub(&mut self, core: CoreId, granule: GranuleId) -> Result<(), AccessError> {
        self.gpc_check(core, granule, Access::Write)?;
        self.granules[granule.0 as usize].scrub();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::root::{boot_create_gpts, MachineLayout, Span};

    fn machine() -> Machine {
        let layout = MachineLayout {
            granules: 20,
            root: vec![Span(0, 4)],
            realm: vec![Span(4, 8)],
            normal: vec![Span(8, 16)],
            secure: vec![Span(16, 20)],
        };
        let (n, rs) = boot_create_gpts(&layout).unwrap();
        Machine::new(n, rs, 2)
    }

    #[test]
    fn normal_core_faults_on_realm_granule() {
        let mut m = machine();
        let err = m.gpc_check(CoreId(0), GranuleId(5), Access::Read).unwrap_err();
        assert!(matches!(
            err,
            AccessError::GranuleProtectionFault {
                pas: PasValue::Realm,
                ..
            }
        ));
        assert_eq!(m.trace().counters().gpfs, 1);
    }

    #[test]
    fn same_world_access_allowed() {
        let mut m = machine();
        assert!(m.gpc_check(CoreId(0), GranuleId(9), Access::Write).is_ok());
    }

    #[test]
    fn realm_core_faults_on_hidden_normal_memory() {
        let mut m = machine();
        m.context_switch(CoreId(0), World::Realm);
        assert_eq!(m.core(CoreId(0)).active_gpt(), Some(GptId::RealmSecure));
        let err = m.gpc_check(CoreId(0), GranuleId(9), Access::Read).unwrap_err();
        assert!(matches!(
            err,
            AccessError::GranuleProtectionFault {
                pas: PasValue::NotAccessible,
                ..
            }
        ));
    }

    #[test]
    fn realm_and_secure_cannot_see_each_other() {
        let mut m = machine();
        m.context_switch(CoreId(0), World::Realm);
        assert!(m.gpc_check(CoreId(0), GranuleId(17), Access::Read).is_err());
        m.context_switch(CoreId(1), World::Secure);
        assert!(m.gpc_check(CoreId(1), GranuleId(5), Access::Read).is_err());
    }

    #[test]
    fn stale_tlb_until_flush() {
        let mut m = machine();
        assert!(m.gpc_check(CoreId(1), GranuleId(9), Access::Read).is_ok());
        m.gpt_mut(GptId::Normal).set(GranuleId(9), PasValue::Realm);
        m.gpt_mut(GptId::RealmSecure).set(GranuleId(9), PasValue::Realm);
        // stale entry still answers
        assert!(m.gpc_check(CoreId(1), GranuleId(9), Access::Read).is_ok());
        m.flush_all_gpc_tlbs(None);
        assert!(m.gpc_check(CoreId(1), GranuleId(9), Access::Read).is_err());
    }

    #[test]
    fn flush_on_empty_tlbs_only_traces() {
        let mut m = machine();
        let before = m.cores().to_vec();
        m.flush_all_gpc_tlbs(None);
        assert_eq!(m.cores(), &before[..]);
        assert_eq!(m.trace().events().len(), 1);
    }

    #[test]
    fn context_switch_rebinds_gpt() {
        let mut m = machine();
        m.context_switch(CoreId(0), World::Realm);
        assert_eq!(m.core(CoreId(0)).active_gpt(), Some(GptId::RealmSecure));
        m.context_switch(CoreId(0), World::Normal);
        assert_eq!(m.core(CoreId(0)).active_gpt(), Some(GptId::Normal));
        m.context_switch(CoreId(1), World::Secure);
        m.context_switch(CoreId(1), World::Secure);
        assert_eq!(m.core(CoreId(1)).active_gpt(), Some(GptId::RealmSecure));
        assert_eq!(m.trace().counters().context_switches, 4);
    }

    #[test]
    fn root_core_bypasses_gpt() {
        let mut m = machine();
        m.context_switch(CoreId(0), World::Root);
        for g in 0..20 {
            assert!(m.gpc_check(CoreId(0), GranuleId(g), Access::Write).is_ok());
        }
    }

    #[test]
    fn fault_has_no_side_effect_on_content() {
        let mut m = machine();
        let before = m.granule(GranuleId(5)).unwrap().clone();
        assert!(m.write(CoreId(0), GranuleId(5).pa(), &[1, 2, 3]).is_err());
        assert_eq!(m.granule(GranuleId(5)).unwrap(), &before);
    }

    #[test]
    fn spanning_write_is_all_or_nothing() {
        let mut m = machine();
        // last bytes of granule 15 (Normal) spill into 16 (Secure)
        let pa = GranuleId(16).pa() - 2;
        assert!(m.write(CoreId(0), pa, &[9; 4]).is_err());
        assert!(m.granule(GranuleId(15)).unwrap().is_zero());
        m.write(CoreId(0), pa - 2, &[9; 4]).unwrap();
        assert_eq!(m.read(CoreId(0), pa - 2, 4).unwrap(), vec![9; 4]);
    }

    #[test]
    fn out_of_range_access() {
        let mut m = machine();
        assert_eq!(
            m.gpc_check(CoreId(0), GranuleId(20), Access::Read),
            Err(AccessError::OutOfRange(GranuleId(20).pa()))
        );
    }
}
