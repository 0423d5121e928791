// SPDX-License-Identifier: Apache-2.0

//! Split virtqueue rings living in one page of the shared region.
//!
//! Ring page layout: the guest-to-host ring at offset 0, the host-to-guest
//! ring at offset 2048. Each ring is `head: u32, tail: u32` followed by
//! `RING_SLOTS` descriptors of 16 bytes (`addr: u64, len: u32, flags: u32`),
//! all little-endian. Descriptor addresses are guest IPAs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{HypError, SbsRecord};
use crate::memory::CoreId;
use crate::realm::guest::GuestCtx;
use crate::realm::{RealmId, SharedRegion, PAGE_SIZE};
use crate::system::System;
use crate::trace::{Event, EventKind};

pub const RING_SLOTS: u32 = 64;
pub const DESC_SIZE: u64 = 16;
const RING_HEADER: u64 = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ring {
    /// Guest to host.
    Tx,
    /// Host to guest.
    Rx,
}

impl Ring {
    fn offset(self) -> u64 {
        match self {
            Ring::Tx => 0,
            Ring::Rx => PAGE_SIZE / 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Host,
    Guest,
}

impl Side {
    fn name(self) -> &'static str {
        match self {
            Side::Host => "host",
            Side::Guest => "guest",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Desc {
    pub addr: u64,
    pub len: u32,
    pub flags: u32,
}

impl Desc {
    fn encode(&self) -> [u8; DESC_SIZE as usize] {
        let mut b = [0u8; DESC_SIZE as usize];
        b[..8].copy_from_slice(&self.addr.to_le_bytes());
        b[8..12].copy_from_slice(&self.len.to_le_bytes());
        b[12..].copy_from_slice(&self.flags.to_le_bytes());
        b
    }

    fn decode(b: &[u8]) -> Desc {
        Desc {
            addr: u64::from_le_bytes(b[..8].try_into().expect("8")),
            len: u32::from_le_bytes(b[8..12].try_into().expect("4")),
            flags: u32::from_le_bytes(b[12..16].try_into().expect("4")),
        }
    }
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum VqError {
    #[error("descriptor [{addr:#x}, +{len:#x}) escapes the shared region")]
    PointerEscape { addr: u64, len: u32 },
    #[error("ring full")]
    Full,
    #[error("ring indices corrupt")]
    Corrupt,
    #[error("sandbox has no virtqueue")]
    NoQueue,
    #[error("ring access faulted: {0}")]
    Fault(String),
}

impl VqError {
    pub fn tag(&self) -> String {
        match self {
            VqError::PointerEscape { .. } => "pointer_escape".into(),
            VqError::Full => "full".into(),
            VqError::Corrupt => "corrupt".into(),
            VqError::NoQueue => "no_queue".into(),
            VqError::Fault(t) => t.clone(),
        }
    }
}

/// One side's view of the ring page. Offsets are relative to the page.
pub trait RingMem {
    fn side(&self) -> Side;
    fn read(&mut self, off: u64, len: usize) -> Result<Vec<u8>, VqError>;
    fn write(&mut self, off: u64, data: &[u8]) -> Result<(), VqError>;
    fn note(&mut self, name: &str, args: String, outcome: String);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Virtqueue {
    pub ring_ipa: u64,
    pub region: SharedRegion,
}

impl Virtqueue {
    pub fn for_record(rec: &SbsRecord) -> Option<Virtqueue> {
        let page = rec.manifest.virtqueue_page?;
        let region = rec.shared_region()?;
        Some(Virtqueue {
            ring_ipa: region.base + page * PAGE_SIZE,
            region,
        })
    }

    /// A descriptor must name bytes of the shared region other than the
    /// ring page itself.
    pub fn check(&self, d: &Desc) -> Result<(), VqError> {
        let inside = self.region.contains_range(d.addr, d.len as u64);
        let ring_end = self.ring_ipa + PAGE_SIZE;
        let hits_ring = d.addr < ring_end && d.addr + d.len as u64 > self.ring_ipa;
        if !inside || hits_ring {
            return Err(VqError::PointerEscape {
                addr: d.addr,
                len: d.len,
            });
        }
        Ok(())
    }

    fn indices(mem: &mut dyn RingMem, ring: Ring) -> Result<(u32, u32), VqError> {
        let b = mem.read(ring.offset(), RING_HEADER as usize)?;
        let head = u32::from_le_bytes(b[..4].try_into().expect("4"));
        let tail = u32::from_le_bytes(b[4..].try_into().expect("4"));
        if tail.wrapping_sub(head) > RING_SLOTS {
            return Err(VqError::Corrupt);
        }
        Ok((head, tail))
    }

    fn slot(ring: Ring, idx: u32) -> u64 {
        ring.offset() + RING_HEADER + (idx % RING_SLOTS) as u64 * DESC_SIZE
    }

    pub fn push(&self, mem: &mut dyn RingMem, ring: Ring, d: Desc) -> Result<(), VqError> {
        let res = (|| -> Result<(), VqError> {
            self.check(&d)?;
            let (head, tail) = Self::indices(mem, ring)?;
            if tail.wrapping_sub(head) == RING_SLOTS {
                return Err(VqError::Full);
            }
            mem.write(Self::slot(ring, tail), &d.encode())?;
            mem.write(ring.offset() + 4, &tail.wrapping_add(1).to_le_bytes())
        })();
        let side = mem.side().name();
        mem.note(
            "vq_push",
            format!("side={side} ring={ring:?} addr={:#x} len={}", d.addr, d.len),
            res.as_ref().map_or_else(|e| e.tag(), |_| "ok".into()),
        );
        res
    }

    /// Takes the oldest descriptor, `None` if the ring is empty. A popped
    /// descriptor that escapes the region is consumed and reported.
    pub fn pop(&self, mem: &mut dyn RingMem, ring: Ring) -> Result<Option<Desc>, VqError> {
        let res = (|| -> Result<Option<Desc>, VqError> {
            let (head, tail) = Self::indices(mem, ring)?;
            if head == tail {
                return Ok(None);
            }
            let d = Desc::decode(&mem.read(Self::slot(ring, head), DESC_SIZE as usize)?);
            mem.write(ring.offset(), &head.wrapping_add(1).to_le_bytes())?;
            self.check(&d)?;
            Ok(Some(d))
        })();
        let side = mem.side().name();
        mem.note(
            "vq_pop",
            format!("side={side} ring={ring:?}"),
            match &res {
                Ok(Some(d)) => format!("addr={:#x} len={}", d.addr, d.len),
                Ok(None) => "empty".into(),
                Err(e) => e.tag(),
            },
        );
        res
    }
}

/// Host view: physical accesses from a normal-world core.
pub struct HostRing<'a> {
    pub sys: &'a mut System,
    pub core: CoreId,
    pub realm: RealmId,
    /// Byte offset of the ring page inside the shared region.
    pub page_offset: u64,
}

impl<'a> HostRing<'a> {
    pub fn new(sys: &'a mut System, core: CoreId, realm: RealmId) -> Result<(HostRing<'a>, Virtqueue), VqError> {
        let rec = sys.record(realm).map_err(|_| VqError::NoQueue)?;
        let vq = Virtqueue::for_record(rec).ok_or(VqError::NoQueue)?;
        let page_offset = vq.ring_ipa - vq.region.base;
        Ok((
            HostRing {
                sys,
                core,
                realm,
                page_offset,
            },
            vq,
        ))
    }
}

fn host_fault(e: HypError) -> VqError {
    VqError::Fault(e.tag())
}

impl RingMem for HostRing<'_> {
    fn side(&self) -> Side {
        Side::Host
    }

    fn read(&mut self, off: u64, len: usize) -> Result<Vec<u8>, VqError> {
        self.sys
            .host_shared_read(self.core, self.realm, self.page_offset + off, len)
            .map_err(host_fault)
    }

    fn write(&mut self, off: u64, data: &[u8]) -> Result<(), VqError> {
        self.sys
            .host_shared_write(self.core, self.realm, self.page_offset + off, data)
            .map_err(host_fault)
    }

    fn note(&mut self, name: &str, args: String, outcome: String) {
        self.sys.emit(
            Event::new(EventKind::Op(name.into()))
                .core(self.core)
                .realm(self.realm.0)
                .args(args)
                .outcome(outcome),
        );
    }
}

/// Guest view: IPA accesses through the realm's stage-2 table.
pub struct GuestRing<'a, 'b> {
    pub ctx: &'a mut GuestCtx<'b>,
    pub ring_ipa: u64,
}

impl RingMem for GuestRing<'_, '_> {
    fn side(&self) -> Side {
        Side::Guest
    }

    fn read(&mut self, off: u64, len: usize) -> Result<Vec<u8>, VqError> {
        self.ctx
            .read(self.ring_ipa + off, len)
            .map_err(|f| VqError::Fault(f.tag().into()))
    }

    fn write(&mut self, off: u64, data: &[u8]) -> Result<(), VqError> {
        self.ctx
            .write(self.ring_ipa + off, data)
            .map_err(|f| VqError::Fault(f.tag().into()))
    }

    fn note(&mut self, name: &str, args: String, outcome: String) {
        let (core, realm) = (self.ctx.core(), self.ctx.realm());
        self.ctx.platform().machine.trace.emit(
            Event::new(EventKind::Op(name.into()))
                .core(core)
                .realm(realm.0)
                .args(args)
                .outcome(outcome),
        );
    }
}

impl System {
    /// Host pushes a descriptor onto one of a sandbox's rings.
    pub fn vq_host_push(&mut self, core: CoreId, realm: RealmId, ring: Ring, d: Desc) -> Result<(), VqError> {
        let (mut mem, vq) = HostRing::new(self, core, realm)?;
        vq.push(&mut mem, ring, d)
    }

    pub fn vq_host_pop(&mut self, core: CoreId, realm: RealmId, ring: Ring) -> Result<Option<Desc>, VqError> {
        let (mut mem, vq) = HostRing::new(self, core, realm)?;
        vq.pop(&mut mem, ring)
    }

    /// Runs `f` inside the sandbox with its ring view.
    pub fn vq_guest<R>(
        &mut self,
        core: CoreId,
        realm: RealmId,
        f: impl FnOnce(&Virtqueue, &mut GuestRing) -> Result<R, VqError>,
    ) -> Result<R, VqError> {
        let rec = self.record(realm).map_err(|_| VqError::NoQueue)?.clone();
        let vq = Virtqueue::for_record(&rec).ok_or(VqError::NoQueue)?;
        let (out, _) = self
            .rec_enter_service(core, rec.rec, |ctx| {
                let mut mem = GuestRing {
                    ctx,
                    ring_ipa: vq.ring_ipa,
                };
                f(&vq, &mut mem)
            })
            .map_err(|e| VqError::Fault(e.tag()))?;
        out.ok_or_else(|| VqError::Fault("not_booted".into()))?
    }
}
