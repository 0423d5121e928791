// SPDX-License-Identifier: Apache-2.0

//! Sandbox manifest: memory size, shared-region placement, attached devices,
//! expected measurement and the payload's entry service. Manifests are TOML:
//!
//! ```toml
//! memory_pages = 4
//! shared_base_ipa = 0x80000000
//! shared_pages = 2
//! devices = ["virtio-block"]
//! entry_script = "otp"
//! virtqueue_page = 1                   # optional
//! payload_digest = "<64 hex chars>"   # optional
//! ```

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{sha256_parts, Digest};
use crate::memory::GRANULE_SIZE;
use crate::realm::attest::parse_digest;
use crate::realm::{PAGE_SIZE, UNPROTECTED_IPA_BASE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeviceKind {
    VirtioBlock,
    VirtioNet,
    VirtioConsole,
    VirtioGpu,
    VirtioInput,
}

impl DeviceKind {
    pub const ALL: [DeviceKind; 5] = [
        DeviceKind::VirtioBlock,
        DeviceKind::VirtioNet,
        DeviceKind::VirtioConsole,
        DeviceKind::VirtioGpu,
        DeviceKind::VirtioInput,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DeviceKind::VirtioBlock => "virtio-block",
            DeviceKind::VirtioNet => "virtio-net",
            DeviceKind::VirtioConsole => "virtio-console",
            DeviceKind::VirtioGpu => "virtio-gpu",
            DeviceKind::VirtioInput => "virtio-input",
        }
    }
}

impl fmt::Display for DeviceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DeviceKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let s = s.strip_prefix("virtio-").unwrap_or(s);
        DeviceKind::ALL
            .into_iter()
            .find(|d| d.name().trim_start_matches("virtio-") == s)
            .or(match s {
                "blk" => Some(DeviceKind::VirtioBlock),
                _ => None,
            })
            .ok_or_else(|| format!("unknown device {s:?}"))
    }
}

/// Built-in guest payloads selectable through `entry_script`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Service {
    /// Adds two 64-bit integers.
    Add,
    /// HOTP generator keyed by a registration secret.
    Otp,
    Echo,
    /// Runs only scripted guest actions.
    Idle,
}

impl FromStr for Service {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "add" => Ok(Service::Add),
            "otp" => Ok(Service::Otp),
            "echo" => Ok(Service::Echo),
            "idle" | "" => Ok(Service::Idle),
            other => Err(format!("unknown entry script {other:?}")),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ManifestError {
    #[error("manifest parse error: {0}")]
    Parse(String),
    #[error("invalid manifest: {0}")]
    Invalid(String),
}

fn default_shared_base() -> u64 {
    UNPROTECTED_IPA_BASE
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub memory_pages: u64,
    #[serde(default = "default_shared_base")]
    pub shared_base_ipa: u64,
    #[serde(default)]
    pub shared_pages: u64,
    #[serde(default)]
    pub devices: Vec<DeviceKind>,
    #[serde(default)]
    pub payload_digest: Option<String>,
    #[serde(default)]
    pub entry_script: String,
    /// Varies the filler content of payload pages beyond the first.
    #[serde(default)]
    pub payload_seed: u64,
    /// Explicit physical placement of data pages, chosen by the hypervisor.
    #[serde(default)]
    pub granules: Option<Vec<u64>>,
    /// Index within the shared region of the page holding the virtqueue
    /// rings, if the sandbox uses devices.
    #[serde(default)]
    pub virtqueue_page: Option<u64>,
}

impl Manifest {
    pub fn new(memory_pages: u64, shared_pages: u64, entry_script: &str) -> Manifest {
        Manifest {
            memory_pages,
            shared_base_ipa: UNPROTECTED_IPA_BASE,
            shared_pages,
            devices: vec![],
            payload_digest: None,
            entry_script: entry_script.to_string(),
            payload_seed: 0,
            granules: None,
            virtqueue_page: None,
        }
    }

    pub fn parse(text: &str) -> Result<Manifest, ManifestError> {
        let m: Manifest = toml::from_str(text).map_err(|e| ManifestError::Parse(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn validate(&self) -> Result<(), ManifestError> {
        let invalid = |s: String| Err(ManifestError::Invalid(s));
        if self.memory_pages == 0 {
            return invalid("memory_pages must be at least 1".into());
        }
        if self.memory_pages * PAGE_SIZE > UNPROTECTED_IPA_BASE {
            return invalid("memory does not fit the protected IPA range".into());
        }
        if self.shared_pages > 0 {
            if self.shared_base_ipa < UNPROTECTED_IPA_BASE || !self.shared_base_ipa.is_multiple_of(PAGE_SIZE) {
                return invalid(format!(
                    "shared_base_ipa {:#x} must be page aligned and >= {UNPROTECTED_IPA_BASE:#x}",
                    self.shared_base_ipa
                ));
            }
            let end = self.shared_base_ipa as u128 + (self.shared_pages * PAGE_SIZE) as u128;
            if end > crate::realm::IPA_LIMIT as u128 {
                return invalid("shared region exceeds the IPA space".into());
            }
        }
        if let Some(g) = &self.granules {
            if g.len() as u64 != self.memory_pages {
                return invalid("granules list must have memory_pages entries".into());
            }
        }
        if let Some(p) = self.virtqueue_page {
            if p >= self.shared_pages {
                return invalid(format!("virtqueue_page {p} outside the shared region"));
            }
        }
        if let Some(d) = &self.payload_digest {
            parse_digest(d).map_err(ManifestError::Invalid)?;
        }
        self.service().map_err(ManifestError::Invalid)?;
        Ok(())
    }

    pub fn service(&self) -> Result<Service, String> {
        self.entry_script.parse()
    }

    pub fn expected_digest(&self) -> Option<Digest> {
        self.payload_digest.as_deref().and_then(|d| parse_digest(d).ok())
    }

    /// Initial contents of each protected page. Page 0 holds the entry
    /// script; the rest carry deterministic filler.
    pub fn payload_pages(&self) -> Vec<Vec<u8>> {
        (0..self.memory_pages)
            .map(|i| {
                if i == 0 {
                    let mut p = b"sbsim-payload\0".to_vec();
                    p.extend_from_slice(self.entry_script.as_bytes());
                    p.truncate(GRANULE_SIZE);
                    return p;
                }
                let mut page = Vec::with_capacity(GRANULE_SIZE);
                let mut block = 0u64;
                while page.len() < GRANULE_SIZE {
                    page.extend_from_slice(&sha256_parts(&[
                        self.entry_script.as_bytes(),
                        &self.payload_seed.to_le_bytes(),
                        &i.to_le_bytes(),
                        &block.to_le_bytes(),
                    ]));
                    block += 1;
                }
                page
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_full_manifest() {
        let m = Manifest::parse(
            r#"
memory_pages = 4
shared_base_ipa = 0x80000000
shared_pages = 2
devices = ["virtio-block", "virtio-net"]
entry_script = "otp"
"#,
        )
        .unwrap();
        assert_eq!(m.shared_pages, 2);
        assert_eq!(m.devices, vec![DeviceKind::VirtioBlock, DeviceKind::VirtioNet]);
        assert_eq!(m.service(), Ok(Service::Otp));
        assert_eq!(Manifest::parse(&m.to_toml()).unwrap(), m);
    }

    #[test]
    fn rejects_bad_manifests() {
        assert!(Manifest::parse("memory_pages = 0").is_err());
        assert!(Manifest::parse("memory_pages = 1\nshared_pages = 1\nshared_base_ipa = 0x1000").is_err());
        assert!(Manifest::parse("memory_pages = 1\nentry_script = \"mine\"").is_err());
        assert!(Manifest::parse("memory_pages = 1\npayload_digest = \"12\"").is_err());
        assert!(Manifest::parse("memory_pages = 2\ngranules = [5]").is_err());
    }

    #[test]
    fn payload_is_deterministic_and_seeded() {
        let a = Manifest::new(3, 0, "add");
        assert_eq!(a.payload_pages(), a.payload_pages());
        assert!(a.payload_pages().iter().skip(1).all(|p| p.len() == GRANULE_SIZE));
        let mut b = a.clone();
        b.payload_seed = 1;
        assert_ne!(a.payload_pages()[1], b.payload_pages()[1]);
        assert_eq!(a.payload_pages()[0], b.payload_pages()[0]);
    }

    #[test]
    fn device_names() {
        for d in DeviceKind::ALL {
            assert_eq!(d.name().parse::<DeviceKind>(), Ok(d));
        }
        assert_eq!("net".parse::<DeviceKind>(), Ok(DeviceKind::VirtioNet));
    }
}
