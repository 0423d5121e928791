// SPDX-License-Identifier: Apache-2.0

//! Fixtures shared by the benchmarks in `benches/`.

use sbsim_core::{CoreId, Manifest, RealmId, System, SystemConfig};

/// A booted machine with one running `add` sandbox.
pub fn add_sandbox() -> (System, RealmId) {
    let mut sys = System::boot(&SystemConfig::default()).expect("default layout boots");
    let m = Manifest::new(2, 1, "add");
    sys.allow_manifest(&m);
    let r = sys.hyp_create_sbs(CoreId(0), &m).expect("create");
    sys.hyp_launch(CoreId(0), r).expect("launch");
    (sys, r)
}
