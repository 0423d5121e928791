// SPDX-License-Identifier: Apache-2.0

//! Untrusted normal-world actors: the hypervisor that builds and tears down
//! sandboxes, the app talking to them, and the shared-memory transports.

pub mod channel;
pub mod rpc;
pub mod script;
pub mod virtq;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{sha256, Digest};
use crate::manifest::Manifest;
use crate::memory::{AccessError, CoreId, GranuleId, PasValue};
use crate::realm::attest::{MeasureEntry, MeasureKind, Measurement};
use crate::realm::guest::ExitReason;
use crate::realm::{RealmId, RealmParams, RecId, RmmError, SharedRegion, PAGE_SIZE};
use crate::system::{RmiCall, RmiReturn, System};
use crate::trace::{Event, EventKind};

/// What the hypervisor remembers about a sandbox it created.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SbsRecord {
    pub realm: RealmId,
    pub rec: RecId,
    pub manifest: Manifest,
    /// (IPA, granule) of each protected data page.
    pub private: Vec<(u64, GranuleId)>,
    /// (IPA, granule) of each shared page, in IPA order.
    pub shared: Vec<(u64, GranuleId)>,
    /// Message counter of the sandbox's encrypted device channel, known to
    /// both ends.
    #[serde(default)]
    pub channel_seq: u64,
}

impl SbsRecord {
    pub fn shared_region(&self) -> Option<SharedRegion> {
        let (base, _) = *self.shared.first()?;
        Some(SharedRegion {
            base,
            pages: self.shared.len() as u64,
        })
    }

    pub fn granules(&self) -> impl Iterator<Item = GranuleId> + '_ {
        self.private.iter().chain(&self.shared).map(|(_, g)| *g)
    }

    /// Host physical address of a byte offset into the shared region.
    pub fn shared_pa(&self, offset: u64) -> Option<u64> {
        let (_, g) = self.shared.get((offset / PAGE_SIZE) as usize)?;
        Some(g.pa() + offset % PAGE_SIZE)
    }

    /// Offset of the first shared page that is not the ring page; device
    /// buffers live there.
    pub fn buffer_offset(&self) -> Option<u64> {
        let ring = self.manifest.virtqueue_page;
        (0..self.shared.len() as u64)
            .find(|p| Some(*p) != ring)
            .map(|p| p * PAGE_SIZE)
    }

    /// Bytes of the shared region available to RPC frames.
    pub fn frame_area(&self) -> u64 {
        self.manifest.virtqueue_page.unwrap_or(self.shared.len() as u64) * PAGE_SIZE
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hypervisor {
    records: BTreeMap<RealmId, SbsRecord>,
    /// Granules this hypervisor believes it has delegated.
    delegated: BTreeSet<GranuleId>,
}

impl Hypervisor {
    pub fn record(&self, realm: RealmId) -> Option<&SbsRecord> {
        self.records.get(&realm)
    }

    pub fn records(&self) -> impl Iterator<Item = &SbsRecord> {
        self.records.values()
    }

    pub fn delegated(&self) -> &BTreeSet<GranuleId> {
        &self.delegated
    }
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum HypError {
    #[error(transparent)]
    Rmm(#[from] RmmError),
    #[error(transparent)]
    Access(#[from] AccessError),
    #[error("no free normal-world granule")]
    NoFreeGranule,
    #[error("no sandbox with realm id {0}")]
    UnknownRealm(RealmId),
    #[error("{0}")]
    Manifest(String),
}

impl HypError {
    pub fn tag(&self) -> String {
        match self {
            HypError::Rmm(e) => e.tag(),
            HypError::Access(AccessError::GranuleProtectionFault { .. }) => "gpf".into(),
            HypError::Access(AccessError::OutOfRange(_)) => "out_of_range".into(),
            HypError::NoFreeGranule => "no_free_granule".into(),
            HypError::UnknownRealm(_) => "unknown_realm".into(),
            HypError::Manifest(_) => "manifest_invalid".into(),
        }
    }
}

pub fn realm_params(manifest: &Manifest) -> RealmParams {
    RealmParams {
        device_tree: manifest.devices.clone(),
        shared_base_ipa: (manifest.shared_pages > 0).then_some(manifest.shared_base_ipa),
        personalization: 0,
    }
}

/// Measurement the realm monitor will report for a sandbox built from this
/// manifest. Physical placement does not enter the measurement.
pub fn expected_measurement(manifest: &Manifest) -> Digest {
    let params = realm_params(manifest);
    let mut m = Measurement::default();
    m.extend(MeasureEntry {
        kind: MeasureKind::RealmCreate,
        ipa: 0,
        digest: sha256(&bincode::serialize(&params).expect("params serialize")),
    });
    for (i, mut page) in manifest.payload_pages().into_iter().enumerate() {
        page.resize(PAGE_SIZE as usize, 0);
        m.extend(MeasureEntry {
            kind: MeasureKind::DataCreate,
            ipa: i as u64 * PAGE_SIZE,
            digest: sha256(&page),
        });
    }
    for j in 0..manifest.shared_pages {
        m.extend(MeasureEntry {
            kind: MeasureKind::SharedMap,
            ipa: manifest.shared_base_ipa + j * PAGE_SIZE,
            digest: sha256(&[]),
        });
    }
    m.value()
}

impl System {
    /// Registers the manifest's expected measurement with the trusted
    /// bootloader policy. Uses `payload_digest` when present.
    pub fn allow_manifest(&mut self, manifest: &Manifest) {
        let d = manifest
            .expected_digest()
            .unwrap_or_else(|| expected_measurement(manifest));
        self.rmm.allow_list_mut().insert(d);
    }

    /// Lowest granule the normal world owns outright and the hypervisor
    /// has not handed out.
    pub fn alloc_granule(&self, skip: &BTreeSet<GranuleId>) -> Option<GranuleId> {
        let m = self.machine();
        (0..m.num_granules()).map(GranuleId).find(|g| {
            m.gpt_pair(*g) == Some((PasValue::Normal, PasValue::NotAccessible))
                && !self.hyp.delegated.contains(g)
                && !skip.contains(g)
        })
    }

    pub fn hyp_delegate(&mut self, core: CoreId, g: GranuleId) -> Result<(), RmmError> {
        self.rmi(core, RmiCall::GranuleDelegate(g))?;
        self.hyp.delegated.insert(g);
        Ok(())
    }

    pub fn hyp_undelegate(&mut self, core: CoreId, g: GranuleId) -> Result<(), RmmError> {
        self.rmi(core, RmiCall::GranuleUndelegate(g))?;
        self.hyp.delegated.remove(&g);
        Ok(())
    }

    fn hyp_op(&mut self, core: CoreId, name: &str, realm: Option<RealmId>, outcome: String) {
        let mut ev = Event::new(EventKind::Op(name.into())).core(core).outcome(outcome);
        if let Some(r) = realm {
            ev = ev.realm(r.0);
        }
        self.emit(ev);
    }

    /// Builds and activates a sandbox: create the realm, materialize its
    /// tables, delegate and load every data page, map the shared pages, create
    /// a REC and activate. Partial state is torn down on failure.
    pub fn hyp_create_sbs(&mut self, core: CoreId, manifest: &Manifest) -> Result<RealmId, HypError> {
        manifest.validate().map_err(|e| HypError::Manifest(e.to_string()))?;
        let realm = match self.rmi(core, RmiCall::RealmCreate(realm_params(manifest)))? {
            RmiReturn::Realm(r) => r,
            other => unreachable!("realm_create returned {other:?}"),
        };
        let mut rec = SbsRecord {
            realm,
            rec: crate::realm::RecId(0),
            manifest: manifest.clone(),
            private: vec![],
            shared: vec![],
            channel_seq: 0,
        };
        let mut loose = vec![];
        let res = self.build_sbs(core, &mut rec, &mut loose);
        let outcome = match &res {
            Ok(()) => "ok".to_string(),
            Err(e) => e.tag(),
        };
        match res {
            Ok(()) => {
                self.hyp.records.insert(realm, rec);
                self.hyp_op(core, "hyp_create_sbs", Some(realm), outcome);
                Ok(realm)
            }
            Err(e) => {
                self.hyp_op(core, "hyp_create_sbs", Some(realm), outcome);
                self.hyp.records.insert(realm, rec);
                let _ = self.hyp_destroy(core, realm);
                for g in loose {
                    let _ = self.hyp_undelegate(core, g);
                }
                Err(e)
            }
        }
    }

    fn build_sbs(&mut self, core: CoreId, rec: &mut SbsRecord, loose: &mut Vec<GranuleId>) -> Result<(), HypError> {
        let realm = rec.realm;
        let m = rec.manifest.clone();
        let private_len = m.memory_pages * PAGE_SIZE;
        self.rmi(
            core,
            RmiCall::RttCreate {
                realm,
                base: 0,
                len: private_len,
            },
        )?;
        if m.shared_pages > 0 {
            self.rmi(
                core,
                RmiCall::RttCreate {
                    realm,
                    base: m.shared_base_ipa,
                    len: m.shared_pages * PAGE_SIZE,
                },
            )?;
        }
        let mut taken = BTreeSet::new();
        for (i, content) in m.payload_pages().into_iter().enumerate() {
            let g = match &m.granules {
                Some(list) => GranuleId(list[i]),
                None => self.alloc_granule(&taken).ok_or(HypError::NoFreeGranule)?,
            };
            taken.insert(g);
            if !self.hyp.delegated.contains(&g) {
                self.hyp_delegate(core, g)?;
                loose.push(g);
            }
            let ipa = i as u64 * PAGE_SIZE;
            self.rmi(
                core,
                RmiCall::DataCreate {
                    realm,
                    granule: g,
                    ipa,
                    content,
                },
            )?;
            loose.retain(|x| *x != g);
            rec.private.push((ipa, g));
        }
        for j in 0..m.shared_pages {
            let g = self.alloc_granule(&taken).ok_or(HypError::NoFreeGranule)?;
            taken.insert(g);
            self.hyp_delegate(core, g)?;
            loose.push(g);
            let ipa = m.shared_base_ipa + j * PAGE_SIZE;
            self.rmi(core, RmiCall::RttMapUnprotected { realm, granule: g, ipa })?;
            loose.retain(|x| *x != g);
            rec.shared.push((ipa, g));
        }
        rec.rec = match self.rmi(core, RmiCall::RecCreate(realm))? {
            RmiReturn::Rec(r) => r,
            other => unreachable!("rec_create returned {other:?}"),
        };
        self.rmi(core, RmiCall::RealmActivate(realm))?;
        Ok(())
    }

    /// First entry: the trusted bootloader validates the sandbox and, on
    /// success, the guest runs its queued actions.
    pub fn hyp_launch(&mut self, core: CoreId, realm: RealmId) -> Result<ExitReason, HypError> {
        let rec = self.record(realm)?.rec;
        Ok(self.rec_enter(core, rec, None)?)
    }

    /// Destroys a sandbox and takes back every granule the realm monitor
    /// returns.
    pub fn hyp_destroy(&mut self, core: CoreId, realm: RealmId) -> Result<Vec<GranuleId>, HypError> {
        let rec = self.record(realm)?.clone();
        let call = RmiCall::RealmDestroy {
            realm,
            private: rec.private.iter().map(|(_, g)| *g).collect(),
            shared: rec.shared.iter().map(|(_, g)| *g).collect(),
        };
        let reclaimed = match self.rmi(core, call)? {
            RmiReturn::Reclaimed(v) => v,
            other => unreachable!("destroy returned {other:?}"),
        };
        for g in &reclaimed {
            self.hyp.delegated.remove(g);
        }
        self.hyp.records.remove(&realm);
        Ok(reclaimed)
    }

    pub(crate) fn hyp_record_mut(&mut self, realm: RealmId) -> Option<&mut SbsRecord> {
        self.hyp.records.get_mut(&realm)
    }

    pub fn record(&self, realm: RealmId) -> Result<&SbsRecord, HypError> {
        self.hyp.records.get(&realm).ok_or(HypError::UnknownRealm(realm))
    }

    /// Host write into a sandbox's shared region at a byte offset, page by
    /// page through the granule protection check.
    pub fn host_shared_write(
        &mut self,
        core: CoreId,
        realm: RealmId,
        offset: u64,
        data: &[u8],
    ) -> Result<(), HypError> {
        let rec = self.record(realm)?.clone();
        for (pa, range) in shared_spans(&rec, offset, data.len())? {
            self.host_write(core, pa, &data[range])?;
        }
        Ok(())
    }

    pub fn host_shared_read(
        &mut self,
        core: CoreId,
        realm: RealmId,
        offset: u64,
        len: usize,
    ) -> Result<Vec<u8>, HypError> {
        let rec = self.record(realm)?.clone();
        let mut out = Vec::with_capacity(len);
        for (pa, range) in shared_spans(&rec, offset, len)? {
            out.extend(self.host_read(core, pa, range.len())?);
        }
        Ok(out)
    }
}

fn shared_spans(rec: &SbsRecord, offset: u64, len: usize) -> Result<Vec<(u64, std::ops::Range<usize>)>, HypError> {
    let total = rec.shared.len() as u64 * PAGE_SIZE;
    if offset.checked_add(len as u64).is_none_or(|e| e > total) {
        return Err(HypError::Rmm(RmmError::NotShared { ipa: offset }));
    }
    let mut spans = vec![];
    let mut done = 0usize;
    while done < len {
        let off = offset + done as u64;
        let n = ((PAGE_SIZE - off % PAGE_SIZE) as usize).min(len - done);
        spans.push((rec.shared_pa(off).expect("bounds checked"), done..done + n));
        done += n;
    }
    Ok(spans)
}
