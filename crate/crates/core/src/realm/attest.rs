// SPDX-License-Identifier: Apache-2.0

//! Realm measurement chain, attestation reports and the trusted
//! bootloader's launch policy.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::crypto::{sha256, sha256_parts, Digest};
use crate::manifest::DeviceKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MeasureKind {
    RealmCreate,
    DataCreate,
    SharedMap,
}

impl MeasureKind {
    pub fn tag(self) -> u8 {
        match self {
            MeasureKind::RealmCreate => 1,
            MeasureKind::DataCreate => 2,
            MeasureKind::SharedMap => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeasureEntry {
    pub kind: MeasureKind,
    pub ipa: u64,
    pub digest: Digest,
}

impl MeasureEntry {
    /// `tag || ipa (LE) || digest`, the bytes folded into the chain.
    pub fn encode(&self) -> [u8; 41] {
        let mut out = [0u8; 41];
        out[0] = self.kind.tag();
        out[1..9].copy_from_slice(&self.ipa.to_le_bytes());
        out[9..].copy_from_slice(&self.digest);
        out
    }
}

/// Hash chain over a realm's initial contents: `value' = H(value || entry)`
/// starting from all zeros.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Measurement {
    value: Digest,
    log: Vec<MeasureEntry>,
}

impl Measurement {
    pub fn value(&self) -> Digest {
        self.value
    }

    pub fn log(&self) -> &[MeasureEntry] {
        &self.log
    }

    pub(crate) fn extend(&mut self, entry: MeasureEntry) -> Digest {
        self.value = sha256_parts(&[&self.value, &entry.encode()]);
        self.log.push(entry);
        self.value
    }
}

/// Digests of the root firmware, realm monitor and trusted bootloader images.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlatformImages {
    pub firmware: Vec<u8>,
    pub monitor: Vec<u8>,
    pub bootloader: Vec<u8>,
}

impl Default for PlatformImages {
    fn default() -> Self {
        PlatformImages {
            firmware: b"sbsim root firmware v1".to_vec(),
            monitor: b"sbsim realm monitor v1".to_vec(),
            bootloader: b"sbsim trusted bootloader v1".to_vec(),
        }
    }
}

impl PlatformImages {
    pub fn measurement(&self) -> Digest {
        sha256_parts(&[
            &sha256(&self.firmware),
            &sha256(&self.monitor),
            &sha256(&self.bootloader),
        ])
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub realm_id: u32,
    pub shared_base_ipa: Option<u64>,
    pub shared_pages: u64,
    pub devices: Vec<DeviceKind>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Report {
    pub platform_measurement: Digest,
    pub realm_measurement: Digest,
    pub metadata: ReportMetadata,
}

/// Accepted realm measurements, stored as one hex digest per line.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllowList {
    digests: BTreeSet<Digest>,
}

impl AllowList {
    pub fn parse(text: &str) -> Result<AllowList, String> {
        let mut digests = BTreeSet::new();
        for (i, line) in text.lines().enumerate() {
            let l = line.trim();
            if l.is_empty() || l.starts_with('#') {
                continue;
            }
            digests.insert(parse_digest(l).map_err(|e| format!("line {}: {e}", i + 1))?);
        }
        Ok(AllowList { digests })
    }

    pub fn insert(&mut self, d: Digest) {
        self.digests.insert(d);
    }

    pub fn contains(&self, d: &Digest) -> bool {
        self.digests.contains(d)
    }

    pub fn len(&self) -> usize {
        self.digests.len()
    }

    pub fn is_empty(&self) -> bool {
        self.digests.is_empty()
    }
}

impl fmt::Display for AllowList {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for d in &self.digests {
            writeln!(f, "{}", hex::encode(d))?;
        }
        Ok(())
    }
}

pub fn parse_digest(s: &str) -> Result<Digest, String> {
    let bytes = hex::decode(s.trim()).map_err(|e| format!("bad hex digest: {e}"))?;
    bytes.try_into().map_err(|_| "digest must be 32 bytes".to_string())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RejectReason {
    BadMeasurement,
    DisallowedDevice(DeviceKind),
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RejectReason::BadMeasurement => f.write_str("bad_measurement"),
            RejectReason::DisallowedDevice(d) => write!(f, "disallowed_device({d})"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BootVerdict {
    Pass,
    Reject(RejectReason),
}

/// Only block and network virtio devices may be attached to a sandbox.
pub fn device_allowed(d: DeviceKind) -> bool {
    matches!(d, DeviceKind::VirtioBlock | DeviceKind::VirtioNet)
}

/// Launch policy applied by the trusted bootloader before the payload runs.
pub fn check_launch(measurement: &Digest, allow: &AllowList, device_tree: &[DeviceKind]) -> BootVerdict {
    if !allow.contains(measurement) {
        return BootVerdict::Reject(RejectReason::BadMeasurement);
    }
    match device_tree.iter().find(|d| !device_allowed(**d)) {
        Some(d) => BootVerdict::Reject(RejectReason::DisallowedDevice(*d)),
        None => BootVerdict::Pass,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(kind: MeasureKind, ipa: u64, fill: u8) -> MeasureEntry {
        MeasureEntry {
            kind,
            ipa,
            digest: [fill; 32],
        }
    }

    // Independent fold using raw SHA-256 over the documented byte layout.
    fn fold(log: &[MeasureEntry]) -> Digest {
        let mut v = [0u8; 32];
        for e in log {
            let mut buf = v.to_vec();
            buf.push(e.kind.tag());
            buf.extend_from_slice(&e.ipa.to_le_bytes());
            buf.extend_from_slice(&e.digest);
            v = sha256(&buf);
        }
        v
    }

    #[test]
    fn chain_matches_independent_fold() {
        let mut m = Measurement::default();
        m.extend(entry(MeasureKind::RealmCreate, 0, 1));
        m.extend(entry(MeasureKind::DataCreate, 0x1000, 2));
        m.extend(entry(MeasureKind::DataCreate, 0x2000, 3));
        assert_eq!(m.value(), fold(m.log()));
    }

    #[test]
    fn order_matters() {
        let a = entry(MeasureKind::DataCreate, 0x1000, 2);
        let b = entry(MeasureKind::DataCreate, 0x2000, 3);
        let mut m1 = Measurement::default();
        m1.extend(a);
        m1.extend(b);
        let mut m2 = Measurement::default();
        m2.extend(b);
        m2.extend(a);
        assert_ne!(m1.value(), m2.value());
        assert_eq!(m2.value(), fold(&[b, a]));
    }

    #[test]
    fn allow_list_parse() {
        let d = [0xab; 32];
        let text = format!("# policy\n{}\n\n", hex::encode(d));
        let a = AllowList::parse(&text).unwrap();
        assert!(a.contains(&d));
        assert_eq!(AllowList::parse(&a.to_string()).unwrap(), a);
        assert!(AllowList::parse("zz").is_err());
        assert!(AllowList::parse("abcd").is_err());
    }

    #[test]
    fn launch_policy() {
        let d = [7; 32];
        let mut allow = AllowList::default();
        allow.insert(d);
        assert_eq!(
            check_launch(&d, &allow, &[DeviceKind::VirtioBlock, DeviceKind::VirtioNet]),
            BootVerdict::Pass
        );
        assert_eq!(check_launch(&d, &allow, &[]), BootVerdict::Pass);
        assert_eq!(
            check_launch(&d, &allow, &[DeviceKind::VirtioConsole]),
            BootVerdict::Reject(RejectReason::DisallowedDevice(DeviceKind::VirtioConsole))
        );
        assert_eq!(
            check_launch(&[8; 32], &allow, &[]),
            BootVerdict::Reject(RejectReason::BadMeasurement)
        );
    }

    #[test]
    fn platform_measurement_tracks_bootloader() {
        let a = PlatformImages::default();
        let mut b = a.clone();
        b.bootloader.push(0);
        assert_ne!(a.measurement(), b.measurement());
    }
}
