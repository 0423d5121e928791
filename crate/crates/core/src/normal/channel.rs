// SPDX-License-Identifier: Apache-2.0

//! Encrypted device channels. The sandbox and its remote endpoint share a
//! key bound to the sandbox measurement; the hypervisor only relays
//! ciphertext through the virtqueue and the shared region.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::virtq::{Desc, GuestRing, Ring, VqError};
use crate::crypto::{ChannelKey, Digest};
use crate::manifest::DeviceKind;
use crate::memory::CoreId;
use crate::realm::{GuestFault, IrqOutcome, IrqSource, RealmId, RmmError};
use crate::system::System;
use crate::trace::{Event, EventKind};

pub fn channel_key(measurement: &Digest, dev: DeviceKind) -> ChannelKey {
    ChannelKey::derive(&[measurement.as_slice(), dev.name().as_bytes()].concat())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Delivery {
    Delivered(Vec<u8>),
    /// Authenticated decryption failed at the receiver.
    TamperDetected,
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum ChannelError {
    #[error("device {0} is not attached")]
    DeviceNotAttached(DeviceKind),
    #[error("device interrupt filtered")]
    Filtered,
    #[error("no descriptor to deliver")]
    Empty,
    #[error(transparent)]
    Vq(#[from] VqError),
    #[error(transparent)]
    Rmm(#[from] RmmError),
    #[error(transparent)]
    Guest(#[from] GuestFault),
    #[error("sandbox unknown or not booted")]
    NoSandbox,
}

impl System {
    fn channel_setup(&self, realm: RealmId, dev: DeviceKind) -> Result<(ChannelKey, u64, u64, u64), ChannelError> {
        let rec = self.record(realm).map_err(|_| ChannelError::NoSandbox)?;
        let report = self.rmm.get_attestation_report(realm)?;
        if !report.metadata.devices.contains(&dev) {
            return Err(ChannelError::DeviceNotAttached(dev));
        }
        let base = rec.shared_region().ok_or(VqError::NoQueue)?.base;
        let buf = rec.buffer_offset().ok_or(VqError::NoQueue)?;
        Ok((channel_key(&report.realm_measurement, dev), rec.channel_seq, base, buf))
    }

    fn bump_seq(&mut self, realm: RealmId) {
        if let Some(r) = self.hyp_record_mut(realm) {
            r.channel_seq += 1;
        }
    }

    fn note_delivery(&mut self, core: CoreId, realm: RealmId, dev: DeviceKind, dir: &str, d: &Delivery) {
        let ev = match d {
            Delivery::Delivered(_) => Event::new(EventKind::Op("channel_delivered".into())).outcome("ok"),
            Delivery::TamperDetected => {
                Event::new(EventKind::AttackBlocked("device_tamper".into())).outcome("integrity_check_failed")
            }
        };
        self.emit(ev.core(core).realm(realm.0).args(format!("dev={dev} dir={dir}")));
    }

    /// Sandbox sends `payload` to its remote endpoint. `tamper` sees the
    /// ciphertext while the hypervisor relays it.
    pub fn channel_send(
        &mut self,
        core: CoreId,
        realm: RealmId,
        dev: DeviceKind,
        payload: &[u8],
        tamper: &mut dyn FnMut(&mut Vec<u8>),
    ) -> Result<Delivery, ChannelError> {
        let (key, seq, base, buf) = self.channel_setup(realm, dev)?;
        let ct = key.seal(seq, dev.name().as_bytes(), payload);
        let desc = Desc {
            addr: base + buf,
            len: ct.len() as u32,
            flags: 0,
        };
        self.vq_guest(core, realm, |vq, mem: &mut GuestRing| {
            mem.ctx
                .write(desc.addr, &ct)
                .map_err(|f| VqError::Fault(f.tag().into()))?;
            vq.push(mem, Ring::Tx, desc)
        })?;
        self.bump_seq(realm);
        let d = self.vq_host_pop(core, realm, Ring::Tx)?.ok_or(ChannelError::Empty)?;
        let mut relayed = self
            .host_shared_read(core, realm, d.addr - base, d.len as usize)
            .map_err(|e| VqError::Fault(e.tag()))?;
        tamper(&mut relayed);
        let out = match key.open(seq, dev.name().as_bytes(), &relayed) {
            Ok(pt) => Delivery::Delivered(pt),
            Err(_) => Delivery::TamperDetected,
        };
        self.note_delivery(core, realm, dev, "out", &out);
        Ok(out)
    }

    /// Remote endpoint sends `payload` to the sandbox: the hypervisor places
    /// the ciphertext, queues a descriptor and raises the device interrupt.
    /// With `payload = None` the hypervisor raises the interrupt without
    /// queueing anything.
    pub fn channel_receive(
        &mut self,
        core: CoreId,
        realm: RealmId,
        dev: DeviceKind,
        payload: Option<&[u8]>,
        tamper: &mut dyn FnMut(&mut Vec<u8>),
    ) -> Result<Delivery, ChannelError> {
        let (key, seq, base, buf) = self.channel_setup(realm, dev)?;
        if let Some(p) = payload {
            let mut ct = key.seal(seq, dev.name().as_bytes(), p);
            tamper(&mut ct);
            self.host_shared_write(core, realm, buf, &ct)
                .map_err(|e| VqError::Fault(e.tag()))?;
            let desc = Desc {
                addr: base + buf,
                len: ct.len() as u32,
                flags: 0,
            };
            self.vq_host_push(core, realm, Ring::Rx, desc)?;
        }
        if self.inject_irq(core, realm, IrqSource::Device(dev)) == IrqOutcome::Filtered {
            return Err(ChannelError::Filtered);
        }
        let aad = dev.name().as_bytes().to_vec();
        let got = self.vq_guest(core, realm, |vq, mem: &mut GuestRing| {
            let Some(d) = vq.pop(mem, Ring::Rx)? else {
                return Ok(None);
            };
            let ct = mem
                .ctx
                .read(d.addr, d.len as usize)
                .map_err(|f| VqError::Fault(f.tag().into()))?;
            Ok(Some(ct))
        })?;
        self.bump_seq(realm);
        // An interrupt with nothing behind it ends in the same failed
        // integrity check as a corrupted buffer.
        let out = match got.map(|ct| key.open(seq, &aad, &ct)) {
            Some(Ok(pt)) => Delivery::Delivered(pt),
            _ => Delivery::TamperDetected,
        };
        self.note_delivery(core, realm, dev, "in", &out);
        Ok(out)
    }
}
