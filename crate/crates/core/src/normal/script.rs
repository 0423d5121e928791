// SPDX-License-Identifier: Apache-2.0

//! Guest scripts: the actions a realm vCPU performs when entered. Actions
//! name IPAs only, never physical granules.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::realm::Ripas;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RsiCall {
    ExAccess { pages: Vec<u64>, enable: bool },
    Mmio { pages: Vec<u64> },
    SetRipas { base: u64, len: u64, state: Ripas },
    AttestationReport,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GuestAction {
    WriteMem {
        ipa: u64,
        data: Vec<u8>,
    },
    ReadMem {
        ipa: u64,
        len: u64,
    },
    Exec {
        ipa: u64,
    },
    Rsi(RsiCall),
    /// Load from a device address into register `reg`.
    MmioRead {
        ipa: u64,
        reg: usize,
    },
    MmioWrite {
        ipa: u64,
        value: u64,
    },
    Halt,
}

pub type GuestScript = Vec<GuestAction>;

pub(crate) fn parse_u64(s: &str) -> Result<u64, String> {
    let s = s.trim().replace('_', "");
    let r = match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(h) => u64::from_str_radix(h, 16),
        None => s.parse(),
    };
    r.map_err(|_| format!("bad number {s:?}"))
}

pub(crate) fn parse_list(s: &str) -> Result<Vec<u64>, String> {
    s.split(',').filter(|p| !p.trim().is_empty()).map(parse_u64).collect()
}

fn parse_bool(s: &str) -> Result<bool, String> {
    match s {
        "on" | "true" | "1" | "enable" => Ok(true),
        "off" | "false" | "0" | "disable" => Ok(false),
        _ => Err(format!("expected on/off, got {s:?}")),
    }
}

fn list(pages: &[u64]) -> String {
    pages.iter().map(|p| format!("{p:#x}")).collect::<Vec<_>>().join(",")
}

/// Text form: `write <ipa> <hex>`, `read <ipa> <len>`, `exec <ipa>`,
/// `ex_access on|off <ipa,..>`, `mmio <ipa,..>`, `ripas <base> <len> ram|empty`,
/// `report`, `mmio_read <ipa> <reg>`, `mmio_write <ipa> <value>`, `halt`.
impl FromStr for GuestAction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let w: Vec<&str> = s.split_whitespace().collect();
        let arg = |i: usize| w.get(i).copied().ok_or_else(|| format!("missing argument in {s:?}"));
        let action = match *w.first().ok_or("empty guest action")? {
            "write" => GuestAction::WriteMem {
                ipa: parse_u64(arg(1)?)?,
                data: hex::decode(arg(2)?).map_err(|e| format!("bad hex: {e}"))?,
            },
            "read" => GuestAction::ReadMem {
                ipa: parse_u64(arg(1)?)?,
                len: parse_u64(arg(2)?)?,
            },
            "exec" => GuestAction::Exec {
                ipa: parse_u64(arg(1)?)?,
            },
            "ex_access" => GuestAction::Rsi(RsiCall::ExAccess {
                enable: parse_bool(arg(1)?)?,
                pages: parse_list(arg(2)?)?,
            }),
            "mmio" => GuestAction::Rsi(RsiCall::Mmio {
                pages: parse_list(arg(1)?)?,
            }),
            "ripas" => GuestAction::Rsi(RsiCall::SetRipas {
                base: parse_u64(arg(1)?)?,
                len: parse_u64(arg(2)?)?,
                state: match arg(3)? {
                    "ram" => Ripas::Ram,
                    "empty" => Ripas::Empty,
                    o => return Err(format!("bad ripas state {o:?}")),
                },
            }),
            "report" => GuestAction::Rsi(RsiCall::AttestationReport),
            "mmio_read" => GuestAction::MmioRead {
                ipa: parse_u64(arg(1)?)?,
                reg: parse_u64(arg(2)?)? as usize,
            },
            "mmio_write" => GuestAction::MmioWrite {
                ipa: parse_u64(arg(1)?)?,
                value: parse_u64(arg(2)?)?,
            },
            "halt" => GuestAction::Halt,
            other => return Err(format!("unknown guest action {other:?}")),
        };
        Ok(action)
    }
}

impl fmt::Display for GuestAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GuestAction::WriteMem { ipa, data } => write!(f, "write {ipa:#x} {}", hex::encode(data)),
            GuestAction::ReadMem { ipa, len } => write!(f, "read {ipa:#x} {len}"),
            GuestAction::Exec { ipa } => write!(f, "exec {ipa:#x}"),
            GuestAction::Rsi(RsiCall::ExAccess { pages, enable }) => {
                write!(f, "ex_access {} {}", if *enable { "on" } else { "off" }, list(pages))
            }
            GuestAction::Rsi(RsiCall::Mmio { pages }) => write!(f, "mmio {}", list(pages)),
            GuestAction::Rsi(RsiCall::SetRipas { base, len, state }) => {
                let st = match state {
                    Ripas::Empty => "empty",
                    _ => "ram",
                };
                write!(f, "ripas {base:#x} {len:#x} {st}")
            }
            GuestAction::Rsi(RsiCall::AttestationReport) => f.write_str("report"),
            GuestAction::MmioRead { ipa, reg } => write!(f, "mmio_read {ipa:#x} {reg}"),
            GuestAction::MmioWrite { ipa, value } => write!(f, "mmio_write {ipa:#x} {value:#x}"),
            GuestAction::Halt => f.write_str("halt"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let actions = [
            "write 0x1000 deadbeef",
            "read 0x80000000 16",
            "exec 0x80000000",
            "ex_access on 0x80000000,0x80001000",
            "mmio 0xa000000",
            "ripas 0x0 0x40000 ram",
            "report",
            "mmio_read 0xa000000 3",
            "mmio_write 0xa000000 0x2a",
            "halt",
        ];
        for a in actions {
            let parsed: GuestAction = a.parse().unwrap();
            assert_eq!(parsed.to_string().parse::<GuestAction>().unwrap(), parsed, "{a}");
        }
        assert!("jump 0x0".parse::<GuestAction>().is_err());
        assert!("write 0x0".parse::<GuestAction>().is_err());
    }

    #[test]
    fn numbers() {
        assert_eq!(parse_u64("0x8000_0000"), Ok(0x8000_0000));
        assert_eq!(parse_u64("42"), Ok(42));
        assert!(parse_u64("x").is_err());
    }
}
