// SPDX-License-Identifier: Apache-2.0

//! Realm monitor (RMM) model.
//!
//! Owns each sandbox's stage-2 table and lifecycle, keeps the global
//! granule ownership index that forbids overlapping realms, builds the single
//! contiguous non-executable shared region, mediates exclusive access and
//! MMIO emulation, filters interrupts, and maintains measurements.
//!
//! Every GPT effect goes through [`RootMonitor::smc`](crate::root::RootMonitor::smc);
//! every byte the monitor writes goes through the granule protection check on
//! the calling core, which is in the realm world while the monitor runs.

pub mod attest;
pub mod guest;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{sha256, Digest};
use crate::manifest::DeviceKind;
use crate::memory::{Access, AccessError, CoreId, GranuleId, GRANULE_SIZE};
use crate::normal::script::GuestAction;
use crate::root::{RootError, SmcCall};
use crate::system::Platform;
use crate::trace::{Event, EventKind};

use attest::{
    check_launch, AllowList, BootVerdict, MeasureEntry, MeasureKind, Measurement, PlatformImages, RejectReason, Report,
    ReportMetadata,
};

pub const PAGE_SIZE: u64 = GRANULE_SIZE as u64;
/// Start of the unprotected IPA alias window; shared pages live above it.
pub const UNPROTECTED_IPA_BASE: u64 = 0x8000_0000;
pub const IPA_LIMIT: u64 = 0x1_0000_0000;
pub const REC_REGS: usize = 8;
const RTT_BLOCK_SHIFT: u32 = 21;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RealmId(pub u32);

impl fmt::Display for RealmId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RecId(pub u32);

impl fmt::Display for RecId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RealmState {
    New,
    Active,
    Destroyed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ripas {
    Empty,
    Ram,
    Unprotected,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Perms {
    pub read: bool,
    pub write: bool,
    pub exec: bool,
}

impl Perms {
    pub const RW: Perms = Perms {
        read: true,
        write: true,
        exec: false,
    };
    pub const RWX: Perms = Perms {
        read: true,
        write: true,
        exec: true,
    };

    pub fn permits(self, access: Access) -> bool {
        match access {
            Access::Read => self.read,
            Access::Write => self.write,
            Access::Execute => self.exec,
        }
    }
}

impl fmt::Display for Perms {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = |b: bool, ch: char| if b { ch } else { '-' };
        write!(f, "{}{}{}", c(self.read, 'r'), c(self.write, 'w'), c(self.exec, 'x'))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct S2Entry {
    pub granule: GranuleId,
    pub perms: Perms,
    pub unprotected: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharedRegion {
    pub base: u64,
    pub pages: u64,
}

impl SharedRegion {
    pub fn end(&self) -> u64 {
        self.base + self.pages * PAGE_SIZE
    }

    pub fn len(&self) -> u64 {
        self.pages * PAGE_SIZE
    }

    pub fn is_empty(&self) -> bool {
        self.pages == 0
    }

    pub fn contains(&self, ipa: u64) -> bool {
        self.base <= ipa && ipa < self.end()
    }

    pub fn contains_range(&self, ipa: u64, len: u64) -> bool {
        len <= self.len() && self.contains(ipa) && ipa - self.base <= self.len() - len
    }

    pub fn page_ipas(&self) -> impl Iterator<Item = u64> + '_ {
        (0..self.pages).map(move |i| self.base + i * PAGE_SIZE)
    }
}

/// Host-supplied realm parameters. Everything here is measured.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RealmParams {
    /// Devices the hypervisor claims to attach, as seen by the bootloader.
    pub device_tree: Vec<DeviceKind>,
    /// Required base of the shared region, if fixed up front.
    pub shared_base_ipa: Option<u64>,
    pub personalization: u64,
}

impl RealmParams {
    fn digest(&self) -> Digest {
        sha256(&bincode::serialize(self).expect("params serialize"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum IrqSource {
    Timer,
    Device(DeviceKind),
    /// Attacker-chosen vector, e.g. one mimicking a synchronous exception.
    HypervisorArbitrary(u32),
}

impl fmt::Display for IrqSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IrqSource::Timer => f.write_str("timer"),
            IrqSource::Device(d) => write!(f, "device({d})"),
            IrqSource::HypervisorArbitrary(v) => write!(f, "arbitrary({v})"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum IrqOutcome {
    Delivered,
    Filtered,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MmioRequest {
    pub ipa: u64,
    pub write: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MmioDecision {
    Emulate(MmioRequest),
    Refuse,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RealmDescriptor {
    pub id: RealmId,
    pub state: RealmState,
    pub params: RealmParams,
    pub s2: BTreeMap<u64, S2Entry>,
    pub ripas: BTreeMap<u64, Ripas>,
    /// Indices of materialized last-level translation tables (2 MiB blocks).
    pub rtt: BTreeSet<u64>,
    pub shared_region: Option<SharedRegion>,
    pub mmio_regions: BTreeSet<u64>,
    pub measurement: Measurement,
    pub recs: Vec<RecId>,
    /// Devices accepted by the bootloader; empty until boot validation passes.
    pub devices: Vec<DeviceKind>,
    pub booted: bool,
    pub pending_irqs: VecDeque<IrqSource>,
}

impl RealmDescriptor {
    fn new(id: RealmId, params: RealmParams) -> RealmDescriptor {
        let mut measurement = Measurement::default();
        measurement.extend(MeasureEntry {
            kind: MeasureKind::RealmCreate,
            ipa: 0,
            digest: params.digest(),
        });
        RealmDescriptor {
            id,
            state: RealmState::New,
            params,
            s2: BTreeMap::new(),
            ripas: BTreeMap::new(),
            rtt: BTreeSet::new(),
            shared_region: None,
            mmio_regions: BTreeSet::new(),
            measurement,
            recs: vec![],
            devices: vec![],
            booted: false,
            pending_irqs: VecDeque::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PendingExit {
    MmioRead { reg: usize },
    Ripas { base: u64, len: u64, state: Ripas },
}

/// A realm vCPU: a small register file plus the queue of scripted guest
/// actions it will run on its next entry.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rec {
    pub id: RecId,
    pub realm: RealmId,
    pub regs: [u64; REC_REGS],
    pub pending: Option<PendingExit>,
    pub script: VecDeque<GuestAction>,
    pub last_read: Vec<u8>,
}

/// Ownership of delegated granules across all realms.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlobalRealmIndex {
    pub delegated: BTreeSet<GranuleId>,
    pub owner: BTreeMap<GranuleId, RealmId>,
    /// Delegated granules currently in the shared GPT state (including
    /// exclusive access).
    pub shared: BTreeSet<GranuleId>,
    pub exclusive: BTreeSet<GranuleId>,
    /// Scrubbed granules of torn-down realms that still await undelegation.
    pub released: BTreeMap<GranuleId, RealmId>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RmmBugs {
    pub skip_nx: bool,
    pub skip_overlap_check: bool,
    pub skip_mmio_gate: bool,
}

#[derive(Clone, Debug, Error, PartialEq, Eq, Serialize, Deserialize)]
pub enum RmmError {
    #[error("wrong state: {0}")]
    WrongState(String),
    #[error("no such realm {0}")]
    NoSuchRealm(RealmId),
    #[error("no such REC {0}")]
    NoSuchRec(RecId),
    #[error("granule {granule} already owned by realm {owner}")]
    OverlapViolation { granule: GranuleId, owner: RealmId },
    #[error("granule {0} is not delegated")]
    NotDelegated(GranuleId),
    #[error("IPA {ipa:#x} is not contiguous with the shared region")]
    NotContiguous { ipa: u64 },
    #[error("shared memory creation is disabled once the realm is active")]
    SharingSealed,
    #[error("IPA {ipa:#x} is not a shared page")]
    NotShared { ipa: u64 },
    #[error("invalid range: {0}")]
    RangeInvalid(String),
    #[error(transparent)]
    Root(#[from] RootError),
    #[error(transparent)]
    Access(#[from] AccessError),
}

impl RmmError {
    pub fn tag(&self) -> String {
        match self {
            RmmError::WrongState(_) => "wrong_state".into(),
            RmmError::NoSuchRealm(_) | RmmError::NoSuchRec(_) => "wrong_state".into(),
            RmmError::OverlapViolation { .. } => "overlap_violation".into(),
            RmmError::NotDelegated(_) => "not_delegated".into(),
            RmmError::NotContiguous { .. } => "not_contiguous".into(),
            RmmError::SharingSealed => "sharing_sealed".into(),
            RmmError::NotShared { .. } => "not_shared".into(),
            RmmError::RangeInvalid(_) => "range_invalid".into(),
            RmmError::Root(e) => e.tag(),
            RmmError::Access(AccessError::GranuleProtectionFault { .. }) => "gpf".into(),
            RmmError::Access(AccessError::OutOfRange(_)) => "out_of_range".into(),
        }
    }
}

#[derive(Clone, Debug, Error, PartialEq, Eq, Serialize, Deserialize)]
pub enum GuestFault {
    #[error("stage-2 translation fault at {ipa:#x}")]
    Translation { ipa: u64 },
    #[error("stage-2 permission fault at {ipa:#x} ({access:?})")]
    Permission { ipa: u64, access: Access },
    #[error(transparent)]
    Gpf(#[from] AccessError),
}

impl GuestFault {
    pub fn tag(&self) -> &'static str {
        match self {
            GuestFault::Translation { .. } => "translation_fault",
            GuestFault::Permission {
                access: Access::Execute,
                ..
            } => "execute_fault",
            GuestFault::Permission { .. } => "permission_fault",
            GuestFault::Gpf(AccessError::GranuleProtectionFault { .. }) => "gpf",
            GuestFault::Gpf(AccessError::OutOfRange(_)) => "out_of_range",
        }
    }
}

fn page_of(ipa: u64) -> u64 {
    ipa & !(PAGE_SIZE - 1)
}

fn check_protected_range(base: u64, len: u64) -> Result<(), RmmError> {
    if len == 0 || !base.is_multiple_of(PAGE_SIZE) || !len.is_multiple_of(PAGE_SIZE) {
        return Err(RmmError::RangeInvalid(format!(
            "[{base:#x}, +{len:#x}) must be non-empty and page aligned"
        )));
    }
    match base.checked_add(len) {
        Some(end) if end <= UNPROTECTED_IPA_BASE => Ok(()),
        _ => Err(RmmError::RangeInvalid(format!(
            "[{base:#x}, +{len:#x}) leaves the protected IPA range"
        ))),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RealmMonitor {
    realms: BTreeMap<RealmId, RealmDescriptor>,
    recs: BTreeMap<RecId, Rec>,
    next_realm: u32,
    next_rec: u32,
    index: GlobalRealmIndex,
    images: PlatformImages,
    allow_list: AllowList,
    pub(crate) bugs: RmmBugs,
}

impl RealmMonitor {
    pub fn new(images: PlatformImages, allow_list: AllowList) -> RealmMonitor {
        RealmMonitor {
            realms: BTreeMap::new(),
            recs: BTreeMap::new(),
            next_realm: 1,
            next_rec: 1,
            index: GlobalRealmIndex::default(),
            images,
            allow_list,
            bugs: RmmBugs::default(),
        }
    }

    pub fn realms(&self) -> impl Iterator<Item = &RealmDescriptor> {
        self.realms.values()
    }

    pub fn realm(&self, id: RealmId) -> Option<&RealmDescriptor> {
        self.realms.get(&id)
    }

    pub fn rec(&self, id: RecId) -> Option<&Rec> {
        self.recs.get(&id)
    }

    pub fn recs(&self) -> impl Iterator<Item = &Rec> {
        self.recs.values()
    }

    pub fn index(&self) -> &GlobalRealmIndex {
        &self.index
    }

    pub(crate) fn index_mut(&mut self) -> &mut GlobalRealmIndex {
        &mut self.index
    }

    pub fn images(&self) -> &PlatformImages {
        &self.images
    }

    pub fn allow_list(&self) -> &AllowList {
        &self.allow_list
    }

    pub fn allow_list_mut(&mut self) -> &mut AllowList {
        &mut self.allow_list
    }

    fn realm_mut(&mut self, id: RealmId) -> Result<&mut RealmDescriptor, RmmError> {
        self.realms.get_mut(&id).ok_or(RmmError::NoSuchRealm(id))
    }

    fn realm_in(&mut self, id: RealmId, state: RealmState) -> Result<&mut RealmDescriptor, RmmError> {
        let r = self.realm_mut(id)?;
        if r.state != state {
            return Err(RmmError::WrongState(format!(
                "realm {id} is {:?}, expected {state:?}",
                r.state
            )));
        }
        Ok(r)
    }

    /// Interrupts delivered since the last entry; the guest consumes them on
    /// entry.
    pub(crate) fn take_pending_irqs(&mut self, realm: RealmId) -> Vec<IrqSource> {
        self.realms
            .get_mut(&realm)
            .map(|r| r.pending_irqs.drain(..).collect())
            .unwrap_or_default()
    }

    pub(crate) fn rec_mut(&mut self, id: RecId) -> Result<&mut Rec, RmmError> {
        self.recs.get_mut(&id).ok_or(RmmError::NoSuchRec(id))
    }

    // ---- granule delegation -------------------------------------------------

    pub fn rmi_granule_delegate(&mut self, pf: &mut Platform, core: CoreId, g: GranuleId) -> Result<(), RmmError> {
        pf.root.smc(&mut pf.machine, core, SmcCall::Delegate(g))?;
        self.index.delegated.insert(g);
        Ok(())
    }

    /// Undelegates a delegated granule no realm owns. The granule is
    /// scrubbed from the realm world first.
    pub fn rmi_granule_undelegate(&mut self, pf: &mut Platform, core: CoreId, g: GranuleId) -> Result<(), RmmError> {
        self.undelegate_precheck(pf, core, g)?;
        pf.root.smc(&mut pf.machine, core, SmcCall::Undelegate(g))?;
        self.index.delegated.remove(&g);
        self.index.released.remove(&g);
        Ok(())
    }

    /// Checks that `g` may leave the realm world and scrubs it.
    pub(crate) fn undelegate_precheck(
        &mut self,
        pf: &mut Platform,
        core: CoreId,
        g: GranuleId,
    ) -> Result<(), RmmError> {
        if !self.index.delegated.contains(&g) {
            return Err(RmmError::NotDelegated(g));
        }
        if let Some(o) = self.index.owner.get(&g) {
            return Err(RmmError::WrongState(format!("granule {g} owned by realm {o}")));
        }
        if self.index.shared.contains(&g) {
            return Err(RmmError::WrongState(format!("granule {g} is still shared")));
        }
        pf.machine.scrub(core, g)?;
        Ok(())
    }

    /// Plants a stage-2 entry with no checks at all, as a hypervisor that
    /// had corrupted the realm's translation tables would. Attack scenarios
    /// use this to show the granule protection check still holds.
    pub fn plant_s2(&mut self, realm: RealmId, ipa: u64, entry: S2Entry) -> Result<(), RmmError> {
        self.realm_mut(realm)?.s2.insert(ipa, entry);
        Ok(())
    }

    // ---- realm lifecycle ----------------------------------------------------

    pub fn rmi_realm_create(&mut self, params: RealmParams) -> RealmId {
        let id = RealmId(self.next_realm);
        self.next_realm += 1;
        self.realms.insert(id, RealmDescriptor::new(id, params));
        id
    }

    pub fn rmi_rec_create(&mut self, realm: RealmId) -> Result<RecId, RmmError> {
        let id = RecId(self.next_rec);
        self.realm_in(realm, RealmState::New)?.recs.push(id);
        self.next_rec += 1;
        self.recs.insert(
            id,
            Rec {
                id,
                realm,
                regs: [0; REC_REGS],
                pending: None,
                script: VecDeque::new(),
                last_read: vec![],
            },
        );
        Ok(id)
    }

    /// Activates a realm. The shared region is frozen from here on.
    pub fn rmi_realm_activate(&mut self, realm: RealmId) -> Result<(), RmmError> {
        let r = self.realm_in(realm, RealmState::New)?;
        if r.recs.is_empty() {
            return Err(RmmError::WrongState(format!("realm {realm} has no REC")));
        }
        r.state = RealmState::Active;
        Ok(())
    }

    // ---- stage-2 construction -----------------------------------------------

    pub fn rmi_rtt_create(&mut self, realm: RealmId, base: u64, len: u64) -> Result<(), RmmError> {
        if len == 0 || !base.is_multiple_of(PAGE_SIZE) || !len.is_multiple_of(PAGE_SIZE) {
            return Err(RmmError::RangeInvalid(format!("[{base:#x}, +{len:#x})")));
        }
        let end = base
            .checked_add(len)
            .filter(|e| *e <= IPA_LIMIT)
            .ok_or_else(|| RmmError::RangeInvalid(format!("[{base:#x}, +{len:#x})")))?;
        let r = self.realm_mut(realm)?;
        if r.state == RealmState::Destroyed {
            return Err(RmmError::WrongState(format!("realm {realm} destroyed")));
        }
        for t in (base >> RTT_BLOCK_SHIFT)..=((end - 1) >> RTT_BLOCK_SHIFT) {
            r.rtt.insert(t);
        }
        Ok(())
    }

    pub fn rmi_data_create(
        &mut self,
        pf: &mut Platform,
        core: CoreId,
        realm: RealmId,
        g: GranuleId,
        ipa: u64,
        content: &[u8],
    ) -> Result<(), RmmError> {
        check_protected_range(ipa, PAGE_SIZE)?;
        if content.len() > GRANULE_SIZE {
            return Err(RmmError::RangeInvalid("content larger than a granule".into()));
        }
        let skip_overlap = self.bugs.skip_overlap_check;
        let owner = self.index.owner.get(&g).copied();
        let delegated = self.index.delegated.contains(&g);
        let shared = self.index.shared.contains(&g);
        let r = self.realm_in(realm, RealmState::New)?;
        if r.s2.contains_key(&ipa) {
            return Err(RmmError::RangeInvalid(format!("IPA {ipa:#x} already mapped")));
        }
        if !delegated {
            return Err(RmmError::NotDelegated(g));
        }
        if shared {
            return Err(RmmError::WrongState(format!("granule {g} is in the shared state")));
        }
        if let Some(owner) = owner {
            if !skip_overlap {
                return Err(RmmError::OverlapViolation { granule: g, owner });
            }
        }
        pf.machine.scrub(core, g)?;
        pf.machine.write(core, g.pa(), content)?;
        let mut page = content.to_vec();
        page.resize(GRANULE_SIZE, 0);
        r.s2.insert(
            ipa,
            S2Entry {
                granule: g,
                perms: Perms::RWX,
                unprotected: false,
            },
        );
        r.ripas.insert(ipa, Ripas::Ram);
        r.measurement.extend(MeasureEntry {
            kind: MeasureKind::DataCreate,
            ipa,
            digest: sha256(&page),
        });
        self.index.owner.insert(g, realm);
        self.index.released.remove(&g);
        Ok(())
    }

    /// Completes a guest-initiated RIPAS change. The hypervisor may only
    /// apply exactly what a REC of this realm asked for.
    pub fn rmi_rtt_set_ripas(&mut self, realm: RealmId, base: u64, len: u64, state: Ripas) -> Result<(), RmmError> {
        let r = self.realm_mut(realm)?;
        if r.state == RealmState::Destroyed {
            return Err(RmmError::WrongState(format!("realm {realm} destroyed")));
        }
        if state == Ripas::Unprotected {
            return Err(RmmError::RangeInvalid(
                "unprotected state is set only by shared mappings".into(),
            ));
        }
        check_protected_range(base, len)?;
        let recs = r.recs.clone();
        let want = PendingExit::Ripas { base, len, state };
        let rec = recs
            .into_iter()
            .find(|id| self.recs.get(id).and_then(|rec| rec.pending) == Some(want))
            .ok_or_else(|| RmmError::WrongState("no matching guest RIPAS request".into()))?;
        self.recs.get_mut(&rec).expect("rec exists").pending = None;
        let r = self.realm_mut(realm)?;
        let mut ipa = base;
        while ipa < base + len {
            r.ripas.insert(ipa, state);
            ipa += PAGE_SIZE;
        }
        Ok(())
    }

    pub fn rmi_rtt_map_unprotected(
        &mut self,
        pf: &mut Platform,
        core: CoreId,
        realm: RealmId,
        g: GranuleId,
        ipa: u64,
    ) -> Result<(), RmmError> {
        let owner = self.index.owner.get(&g).copied();
        let delegated = self.index.delegated.contains(&g);
        let shared = self.index.shared.contains(&g);
        let skip_nx = self.bugs.skip_nx;
        let r = self.realm_mut(realm)?;
        match r.state {
            RealmState::Active => return Err(RmmError::SharingSealed),
            RealmState::Destroyed => return Err(RmmError::WrongState(format!("realm {realm} destroyed"))),
            RealmState::New => {}
        }
        if !ipa.is_multiple_of(PAGE_SIZE) || !(UNPROTECTED_IPA_BASE..IPA_LIMIT).contains(&ipa) {
            return Err(RmmError::RangeInvalid(format!(
                "{ipa:#x} is not a page in the unprotected window"
            )));
        }
        if r.s2.contains_key(&ipa) {
            return Err(RmmError::RangeInvalid(format!("IPA {ipa:#x} already mapped")));
        }
        let contiguous = match (r.shared_region, r.params.shared_base_ipa) {
            (None, Some(base)) => ipa == base,
            (None, None) => true,
            (Some(region), _) => ipa == region.end() || ipa + PAGE_SIZE == region.base,
        };
        if !contiguous {
            return Err(RmmError::NotContiguous { ipa });
        }
        if !delegated {
            return Err(RmmError::NotDelegated(g));
        }
        if let Some(owner) = owner {
            return Err(RmmError::OverlapViolation { granule: g, owner });
        }
        if shared {
            return Err(RmmError::WrongState(format!("granule {g} is in the shared state")));
        }
        pf.root.smc(
            &mut pf.machine,
            core,
            SmcCall::Share {
                granule: g,
                realm: realm.0,
            },
        )?;
        let r = self.realm_mut(realm)?;
        r.s2.insert(
            ipa,
            S2Entry {
                granule: g,
                perms: if skip_nx { Perms::RWX } else { Perms::RW },
                unprotected: true,
            },
        );
        r.ripas.insert(ipa, Ripas::Unprotected);
        r.shared_region = Some(match r.shared_region {
            None => SharedRegion { base: ipa, pages: 1 },
            Some(s) if ipa < s.base => SharedRegion {
                base: ipa,
                pages: s.pages + 1,
            },
            Some(s) => SharedRegion {
                base: s.base,
                pages: s.pages + 1,
            },
        });
        r.measurement.extend(MeasureEntry {
            kind: MeasureKind::SharedMap,
            ipa,
            digest: sha256(&[]),
        });
        self.index.owner.insert(g, realm);
        self.index.shared.insert(g);
        self.index.released.remove(&g);
        Ok(())
    }

    // ---- destruction --------------------------------------------------------

    /// Stops the realm and scrubs and releases everything it owns. Granules
    /// stay delegated until the hypervisor asks for them back.
    fn teardown(&mut self, pf: &mut Platform, core: CoreId, realm: RealmId) -> Result<(), RmmError> {
        let r = self.realm_mut(realm)?;
        if r.state == RealmState::Destroyed {
            return Ok(());
        }
        r.state = RealmState::Destroyed;
        let mappings: Vec<S2Entry> = std::mem::take(&mut r.s2).into_values().collect();
        r.shared_region = None;
        r.mmio_regions.clear();
        r.pending_irqs.clear();
        r.ripas.clear();
        for id in r.recs.clone() {
            if let Some(rec) = self.recs.get_mut(&id) {
                rec.script.clear();
                rec.pending = None;
                rec.regs = [0; REC_REGS];
            }
        }
        for e in mappings {
            let g = e.granule;
            if self.index.exclusive.remove(&g) {
                pf.root.smc(
                    &mut pf.machine,
                    core,
                    SmcCall::ExAccess {
                        granule: g,
                        enable: false,
                    },
                )?;
            }
            pf.machine.scrub(core, g)?;
            if self.index.owner.get(&g) == Some(&realm) {
                self.index.owner.remove(&g);
                self.index.released.insert(g, realm);
            }
        }
        Ok(())
    }

    /// Destroys a realm and returns the listed granules it owned to the
    /// normal world: shared pages are unshared first, then every granule is
    /// undelegated. Returns the granules actually reclaimed; listed granules
    /// the firmware refuses stay delegated and scrubbed.
    pub fn rmi_destroy_realm(
        &mut self,
        pf: &mut Platform,
        core: CoreId,
        realm: RealmId,
        granules: &[GranuleId],
    ) -> Result<Vec<GranuleId>, RmmError> {
        self.teardown(pf, core, realm)?;
        let mut reclaimed = vec![];
        for &g in granules {
            if self.index.released.get(&g) != Some(&realm) {
                continue;
            }
            if self.index.shared.contains(&g) {
                let unshare = SmcCall::Unshare {
                    granule: g,
                    realm: realm.0,
                };
                if pf.root.smc(&mut pf.machine, core, unshare).is_err() {
                    continue;
                }
                self.index.shared.remove(&g);
            }
            if pf.root.smc(&mut pf.machine, core, SmcCall::Undelegate(g)).is_ok() {
                self.index.released.remove(&g);
                self.index.delegated.remove(&g);
                reclaimed.push(g);
            }
        }
        Ok(reclaimed)
    }

    // ---- realm services (RSI) -----------------------------------------------

    fn emit_rsi<T>(
        pf: &mut Platform,
        core: CoreId,
        realm: RealmId,
        name: &str,
        args: String,
        res: &Result<T, RmmError>,
    ) {
        pf.machine.trace.emit(
            Event::new(EventKind::Rsi(name.into()))
                .core(core)
                .realm(realm.0)
                .args(args)
                .outcome(match res {
                    Ok(_) => "ok".to_string(),
                    Err(e) => e.tag(),
                }),
        );
    }

    /// Toggles normal-world access to shared pages. All-or-nothing: a failure
    /// part-way rolls back the pages already toggled by this call.
    pub fn rsi_ex_access(
        &mut self,
        pf: &mut Platform,
        core: CoreId,
        realm: RealmId,
        pages: &[u64],
        enable: bool,
    ) -> Result<(), RmmError> {
        let res = self.ex_access_inner(pf, core, realm, pages, enable);
        let list: Vec<String> = pages.iter().map(|p| format!("{p:#x}")).collect();
        Self::emit_rsi(
            pf,
            core,
            realm,
            "rsi_ex_access",
            format!("enable={enable} pages={}", list.join(",")),
            &res,
        );
        res
    }

    fn ex_access_inner(
        &mut self,
        pf: &mut Platform,
        core: CoreId,
        realm: RealmId,
        pages: &[u64],
        enable: bool,
    ) -> Result<(), RmmError> {
        let r = self.realm_in(realm, RealmState::Active)?;
        let mut granules = Vec::with_capacity(pages.len());
        for &p in pages {
            let shared = r.shared_region.is_some_and(|s| s.contains(p)) && p % PAGE_SIZE == 0;
            match r.s2.get(&p) {
                Some(e) if shared && e.unprotected => granules.push(e.granule),
                _ => return Err(RmmError::NotShared { ipa: p }),
            }
        }
        let mut done = Vec::with_capacity(granules.len());
        for g in granules {
            let call = SmcCall::ExAccess { granule: g, enable };
            if let Err(e) = pf.root.smc(&mut pf.machine, core, call) {
                for &prev in done.iter().rev() {
                    let undo = SmcCall::ExAccess {
                        granule: prev,
                        enable: !enable,
                    };
                    pf.root
                        .smc(&mut pf.machine, core, undo)
                        .expect("rollback of a toggle that just succeeded");
                    self.set_exclusive(prev, !enable);
                }
                return Err(e.into());
            }
            self.set_exclusive(g, enable);
            done.push(g);
        }
        Ok(())
    }

    fn set_exclusive(&mut self, g: GranuleId, on: bool) {
        if on {
            self.index.exclusive.insert(g);
        } else {
            self.index.exclusive.remove(&g);
        }
    }

    /// Marks pages the guest will use for MMIO. Only faults on marked pages
    /// are ever forwarded to the hypervisor for emulation.
    pub fn rsi_mmio(&mut self, pf: &mut Platform, core: CoreId, realm: RealmId, pages: &[u64]) -> Result<(), RmmError> {
        let res = (|| {
            let r = self.realm_in(realm, RealmState::Active)?;
            if let Some(p) = pages.iter().find(|p| *p % PAGE_SIZE != 0 || **p >= IPA_LIMIT) {
                return Err(RmmError::RangeInvalid(format!("{p:#x}")));
            }
            r.mmio_regions.extend(pages.iter().copied());
            Ok(())
        })();
        let list: Vec<String> = pages.iter().map(|p| format!("{p:#x}")).collect();
        Self::emit_rsi(pf, core, realm, "rsi_mmio", format!("pages={}", list.join(",")), &res);
        if res.is_ok() {
            for &p in pages {
                pf.machine.trace.emit(
                    Event::new(EventKind::Op("mmio_mark".into()))
                        .core(core)
                        .realm(realm.0)
                        .addr(p)
                        .outcome("ok"),
                );
            }
        }
        res
    }

    /// Decides what to do with a data abort on an unmapped IPA.
    pub fn handle_mmio_exit(
        &mut self,
        pf: &mut Platform,
        core: CoreId,
        realm: RealmId,
        fault_ipa: u64,
        write: Option<u64>,
    ) -> MmioDecision {
        let marked = self
            .realms
            .get(&realm)
            .is_some_and(|r| r.state == RealmState::Active && r.mmio_regions.contains(&page_of(fault_ipa)));
        let decision = if marked || self.bugs.skip_mmio_gate {
            MmioDecision::Emulate(MmioRequest { ipa: fault_ipa, write })
        } else {
            MmioDecision::Refuse
        };
        let name = match decision {
            MmioDecision::Emulate(_) => "mmio_emulate",
            MmioDecision::Refuse => "mmio_refuse",
        };
        pf.machine.trace.emit(
            Event::new(EventKind::Op(name.into()))
                .core(core)
                .realm(realm.0)
                .addr(fault_ipa)
                .args(match write {
                    Some(v) => format!("write={v:#x}"),
                    None => "read".into(),
                })
                .outcome(if marked { "marked" } else { "unmarked" }),
        );
        decision
    }

    pub fn inject_interrupt(
        &mut self,
        pf: &mut Platform,
        core: CoreId,
        realm: RealmId,
        source: IrqSource,
    ) -> IrqOutcome {
        let outcome = match self.realms.get_mut(&realm) {
            Some(r) if r.state == RealmState::Active => {
                let deliver = match source {
                    IrqSource::Timer => true,
                    IrqSource::Device(d) => r.devices.contains(&d),
                    IrqSource::HypervisorArbitrary(_) => false,
                };
                if deliver {
                    r.pending_irqs.push_back(source);
                    IrqOutcome::Delivered
                } else {
                    IrqOutcome::Filtered
                }
            }
            _ => IrqOutcome::Filtered,
        };
        let ev = match outcome {
            IrqOutcome::Delivered => Event::new(EventKind::Op("irq_delivered".into())),
            IrqOutcome::Filtered => Event::new(EventKind::InterruptFiltered),
        };
        pf.machine.trace.emit(
            ev.core(core)
                .realm(realm.0)
                .args(source.to_string())
                .outcome(match outcome {
                    IrqOutcome::Delivered => "delivered",
                    IrqOutcome::Filtered => "filtered",
                }),
        );
        outcome
    }

    // ---- measurement and attestation ----------------------------------------

    pub fn extend_measurement(&mut self, realm: RealmId, entry: MeasureEntry) -> Result<Digest, RmmError> {
        Ok(self.realm_in(realm, RealmState::New)?.measurement.extend(entry))
    }

    pub fn get_attestation_report(&self, realm: RealmId) -> Result<Report, RmmError> {
        let r = self.realms.get(&realm).ok_or(RmmError::NoSuchRealm(realm))?;
        if r.state != RealmState::Active {
            return Err(RmmError::WrongState(format!("realm {realm} is {:?}", r.state)));
        }
        Ok(Report {
            platform_measurement: self.images.measurement(),
            realm_measurement: r.measurement.value(),
            metadata: ReportMetadata {
                realm_id: realm.0,
                shared_base_ipa: r.shared_region.map(|s| s.base),
                shared_pages: r.shared_region.map_or(0, |s| s.pages),
                devices: r.devices.clone(),
            },
        })
    }

    /// Trusted bootloader check run on the first entry of an active realm.
    /// A rejected realm is torn down on the spot.
    pub fn validate_boot(
        &mut self,
        pf: &mut Platform,
        core: CoreId,
        realm: RealmId,
        device_tree: &[DeviceKind],
    ) -> Result<BootVerdict, RmmError> {
        let r = self.realm_in(realm, RealmState::Active)?;
        if r.booted {
            return Err(RmmError::WrongState(format!("realm {realm} already booted")));
        }
        let verdict = check_launch(&r.measurement.value(), &self.allow_list, device_tree);
        match verdict {
            BootVerdict::Pass => {
                let r = self.realm_mut(realm)?;
                r.booted = true;
                r.devices = device_tree.to_vec();
            }
            BootVerdict::Reject(_) => self.teardown(pf, core, realm)?,
        }
        pf.machine.trace.emit(
            Event::new(EventKind::Op("validate_boot".into()))
                .core(core)
                .realm(realm.0)
                .args(hex::encode(self.realms[&realm].measurement.value()))
                .outcome(match verdict {
                    BootVerdict::Pass => "pass".to_string(),
                    BootVerdict::Reject(r) => format!("reject:{r}"),
                }),
        );
        Ok(verdict)
    }

    /// Stage-2 walk for a guest access.
    pub fn translate(&self, realm: RealmId, ipa: u64, access: Access) -> Result<S2Entry, GuestFault> {
        let r = self.realms.get(&realm).ok_or(GuestFault::Translation { ipa })?;
        let e = r.s2.get(&page_of(ipa)).ok_or(GuestFault::Translation { ipa })?;
        if !e.perms.permits(access) {
            return Err(GuestFault::Permission { ipa, access });
        }
        Ok(*e)
    }
}

/// Rejection surfaced to callers of a realm entry.
pub fn reject_tag(r: RejectReason) -> String {
    format!("boot_rejected:{r}")
}
