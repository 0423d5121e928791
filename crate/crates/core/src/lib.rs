// SPDX-License-Identifier: Apache-2.0

//! Executable model of sandboxed services on a confidential-compute
//! platform: granule protection tables with split normal/realm views, a
//! root monitor that authorizes every protection change against the
//! hypervisor's own requests, a realm monitor that isolates sandboxes, the
//! untrusted normal world, and an adversary harness.

pub mod adversary;
pub mod crypto;
pub mod manifest;
pub mod memory;
pub mod normal;
pub mod realm;
pub mod replay;
pub mod root;
pub mod scenario;
pub mod snapshot;
pub mod system;
pub mod trace;

pub use adversary::{FuzzConfig, FuzzReport, Outcome, Verdict};
pub use manifest::{DeviceKind, Manifest, Service};
pub use memory::{Access, AccessError, CoreId, GranuleId, Machine, PasValue, World, GRANULE_SIZE};
pub use normal::script::{GuestAction, RsiCall};
pub use normal::{HypError, SbsRecord};
pub use realm::guest::ExitReason;
pub use realm::{IrqOutcome, IrqSource, RealmId, RecId, RmmError};
pub use root::{MachineLayout, RootError, SmcCall, Span};
pub use scenario::{parse_script, run_script, ScriptLine};
pub use system::{BugInjection, Platform, RmiCall, RmiReturn, System, SystemConfig};
pub use trace::{CounterReport, Event, EventKind};
