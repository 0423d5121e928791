// SPDX-License-Identifier: Apache-2.0

//! Machine snapshot file.
//!
//! Layout, all integers little endian:
//!
//! | offset | size | field                              |
//! |--------|------|------------------------------------|
//! | 0      | 8    | magic `SBSIMST\0`                  |
//! | 8      | 4    | format version (currently 1)       |
//! | 12     | 8    | payload length in bytes            |
//! | 20     | len  | bincode 1.x encoding of `System`   |
//!
//! The event list is not stored; step numbering and counters are. Equal
//! machine states always encode to equal bytes.

use thiserror::Error;

use crate::system::System;

pub const MAGIC: &[u8; 8] = b"SBSIMST\0";
pub const VERSION: u32 = 1;
const HEADER: usize = 20;

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("not a snapshot file")]
    BadMagic,
    #[error("unsupported snapshot version {0}")]
    Version(u32),
    #[error("snapshot truncated: header says {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("corrupt snapshot: {0}")]
    Decode(#[from] bincode::Error),
}

pub fn encode(sys: &System) -> Vec<u8> {
    let body = bincode::serialize(sys).expect("system state serializes");
    let mut out = Vec::with_capacity(HEADER + body.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(body.len() as u64).to_le_bytes());
    out.extend_from_slice(&body);
    out
}

pub fn decode(bytes: &[u8]) -> Result<System, SnapshotError> {
    if bytes.len() < HEADER || &bytes[..8] != MAGIC {
        return Err(SnapshotError::BadMagic);
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(SnapshotError::Version(version));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let body = &bytes[HEADER..];
    if body.len() as u64 != len {
        return Err(SnapshotError::Truncated {
            expected: len,
            found: body.len() as u64,
        });
    }
    Ok(bincode::deserialize(body)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::Manifest;
    use crate::memory::CoreId;
    use crate::system::SystemConfig;

    fn launched() -> System {
        let mut sys = System::boot(&SystemConfig::default()).unwrap();
        let m = Manifest::new(2, 1, "add");
        sys.allow_manifest(&m);
        let r = sys.hyp_create_sbs(CoreId(0), &m).unwrap();
        sys.hyp_launch(CoreId(0), r).unwrap();
        sys
    }

    #[test]
    fn round_trip_keeps_state_and_steps() {
        let sys = launched();
        let bytes = encode(&sys);
        assert_eq!(&bytes[..8], MAGIC);
        let back = decode(&bytes).unwrap();
        assert_eq!(encode(&back), bytes);
        assert_eq!(back.machine().trace().next_step(), sys.machine().trace().next_step());
        assert!(back.machine().trace().events().is_empty());
    }

    #[test]
    fn restored_machine_keeps_working() {
        let mut sys = decode(&encode(&launched())).unwrap();
        let realm = sys.hyp.records().next().unwrap().realm;
        assert_eq!(sys.app_add(CoreId(0), realm, 40, 2).unwrap(), 42);
    }

    #[test]
    fn rejects_damage() {
        let bytes = encode(&launched());
        assert!(matches!(decode(b"nope"), Err(SnapshotError::BadMagic)));
        let mut v = bytes.clone();
        v[8] = 9;
        assert!(matches!(decode(&v), Err(SnapshotError::Version(9))));
        assert!(matches!(
            decode(&bytes[..bytes.len() - 1]),
            Err(SnapshotError::Truncated { .. })
        ));
        let mut v = bytes.clone();
        v.truncate(HEADER + 4);
        v[12..20].copy_from_slice(&4u64.to_le_bytes());
        assert!(matches!(decode(&v), Err(SnapshotError::Decode(_))));
    }
}
