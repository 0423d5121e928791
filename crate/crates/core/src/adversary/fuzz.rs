// SPDX-License-Identifier: Apache-2.0

//! Seeded random driver over the whole interface surface. The fuzzer plays
//! a malicious hypervisor, guest and secure world at once, and checks the
//! oracle after every step.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use super::invariants::{InvariantId, Oracle, Violation};
use crate::manifest::{DeviceKind, Manifest};
use crate::memory::{CoreId, GranuleId, PasValue};
use crate::normal::script::{GuestAction, RsiCall};
use crate::normal::virtq::{Desc, Ring};
use crate::realm::{
    IrqSource, PendingExit, RealmId, RealmParams, RealmState, RecId, Ripas, PAGE_SIZE, UNPROTECTED_IPA_BASE,
};
use crate::replay::{compare, Replayer};
use crate::root::{MachineLayout, SmcCall};
use crate::system::{BugInjection, RmiCall, RmiReturn, System, SystemConfig};
use crate::trace::{CounterReport, Event};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CallKind {
    Delegate,
    Undelegate,
    RealmCreate,
    RttCreate,
    DataCreate,
    MapUnprotected,
    RecCreate,
    Activate,
    RecEnter,
    SetRipas,
    Destroy,
    HostAccess,
    SecureAccess,
    Irq,
    RogueSmc,
    Race,
    CreateSbs,
    AppRpc,
    VqPush,
}

impl CallKind {
    pub const ALL: [CallKind; 19] = [
        CallKind::Delegate,
        CallKind::Undelegate,
        CallKind::RealmCreate,
        CallKind::RttCreate,
        CallKind::DataCreate,
        CallKind::MapUnprotected,
        CallKind::RecCreate,
        CallKind::Activate,
        CallKind::RecEnter,
        CallKind::SetRipas,
        CallKind::Destroy,
        CallKind::HostAccess,
        CallKind::SecureAccess,
        CallKind::Irq,
        CallKind::RogueSmc,
        CallKind::Race,
        CallKind::CreateSbs,
        CallKind::AppRpc,
        CallKind::VqPush,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CallKind::Delegate => "delegate",
            CallKind::Undelegate => "undelegate",
            CallKind::RealmCreate => "realm_create",
            CallKind::RttCreate => "rtt_create",
            CallKind::DataCreate => "data_create",
            CallKind::MapUnprotected => "map_unprotected",
            CallKind::RecCreate => "rec_create",
            CallKind::Activate => "activate",
            CallKind::RecEnter => "rec_enter",
            CallKind::SetRipas => "set_ripas",
            CallKind::Destroy => "destroy",
            CallKind::HostAccess => "host_access",
            CallKind::SecureAccess => "secure_access",
            CallKind::Irq => "irq",
            CallKind::RogueSmc => "rogue_smc",
            CallKind::Race => "race",
            CallKind::CreateSbs => "create_sbs",
            CallKind::AppRpc => "app_rpc",
            CallKind::VqPush => "vq_push",
        }
    }

    /// Relative frequency.
    fn weight(self) -> u32 {
        match self {
            CallKind::Delegate | CallKind::DataCreate | CallKind::RecEnter => 8,
            CallKind::HostAccess | CallKind::MapUnprotected => 7,
            CallKind::Undelegate | CallKind::RttCreate | CallKind::SecureAccess => 5,
            CallKind::RealmCreate | CallKind::RecCreate | CallKind::Activate => 4,
            CallKind::Destroy | CallKind::Race | CallKind::RogueSmc | CallKind::Irq => 3,
            CallKind::SetRipas | CallKind::CreateSbs | CallKind::AppRpc | CallKind::VqPush => 2,
        }
    }
}

impl fmt::Display for CallKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FuzzConfig {
    pub seed: u64,
    pub steps: u64,
    pub cores: usize,
    pub layout: MachineLayout,
    pub calls: BTreeSet<CallKind>,
    pub bugs: BugInjection,
}

impl FuzzConfig {
    pub fn new(seed: u64, steps: u64) -> FuzzConfig {
        FuzzConfig {
            seed,
            steps,
            cores: 2,
            layout: MachineLayout::fuzz_default(),
            calls: CallKind::ALL.into_iter().collect(),
            bugs: BugInjection::default(),
        }
    }
}

pub const MAX_KEPT: usize = 1000;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FuzzReport {
    pub seed: u64,
    pub steps: u64,
    /// The first [`MAX_KEPT`] violations.
    pub violations: Vec<Violation>,
    pub violations_total: u64,
    /// Per call kind: (attempts, successes).
    pub coverage: BTreeMap<String, (u64, u64)>,
    pub reached_pairs: BTreeSet<(PasValue, PasValue)>,
    pub counters: CounterReport,
    pub trace_digest: String,
}

impl FuzzReport {
    /// One violation per line, then coverage and totals.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for v in &self.violations {
            s.push_str(&format!("violation\t{v}\n"));
        }
        for (k, (n, ok)) in &self.coverage {
            s.push_str(&format!("coverage\t{k}\t{n}\t{ok}\n"));
        }
        for (a, b) in &self.reached_pairs {
            s.push_str(&format!("pair\t{a}\t{b}\n"));
        }
        s.push_str(&format!(
            "summary\tseed={}\tsteps={}\tviolations={}\ttrace_sha256={}\n",
            self.seed, self.steps, self.violations_total, self.trace_digest
        ));
        s
    }
}

/// What the fuzzing hypervisor remembers about realms it started by hand.
#[derive(Clone, Debug, Default)]
struct Known {
    realms: Vec<RealmId>,
    recs: Vec<RecId>,
    private: BTreeMap<RealmId, Vec<GranuleId>>,
    shared: BTreeMap<RealmId, Vec<GranuleId>>,
    delegated: BTreeSet<GranuleId>,
}

pub struct Fuzzer {
    cfg: FuzzConfig,
    rng: ChaCha8Rng,
    sys: System,
    oracle: Oracle,
    known: Known,
    kinds: Vec<CallKind>,
    weights: Vec<u32>,
    hasher: Sha256,
    replayer: Option<Replayer>,
    report: FuzzReport,
}

/// IPAs a random guest or host is likely to name.
const MMIO_BASE: u64 = 0x4000_0000;

impl Fuzzer {
    pub fn new(cfg: FuzzConfig) -> Fuzzer {
        let sys = System::boot(&SystemConfig {
            layout: cfg.layout.clone(),
            cores: cfg.cores,
            bugs: cfg.bugs,
            ..SystemConfig::default()
        })
        .expect("fuzz layout boots");
        let oracle = Oracle::new(&sys);
        let kinds: Vec<CallKind> = cfg.calls.iter().copied().collect();
        let weights = kinds.iter().map(|k| k.weight()).collect();
        Fuzzer {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            report: FuzzReport {
                seed: cfg.seed,
                ..FuzzReport::default()
            },
            cfg,
            sys,
            oracle,
            known: Known::default(),
            kinds,
            weights,
            hasher: Sha256::new(),
            replayer: None,
        }
    }

    pub fn system(&self) -> &System {
        &self.sys
    }

    /// Runs the configured budget. `sink` sees every trace event in order.
    pub fn run(mut self, sink: &mut dyn FnMut(&Event)) -> FuzzReport {
        let boot = self.sys.pf.machine.trace.take_events();
        self.absorb(0, "boot", &boot, sink);
        for step in 1..=self.cfg.steps {
            let Some(kind) = self.pick() else { break };
            let ok = self.step(kind);
            let e = self.report.coverage.entry(kind.name().to_string()).or_default();
            e.0 += 1;
            e.1 += ok as u64;
            let events = self.sys.pf.machine.trace.take_events();
            self.absorb(step, kind.name(), &events, sink);
            self.report.steps = step;
        }
        self.report.reached_pairs = self.oracle.reached_pairs.clone();
        self.report.counters = self.sys.machine().trace().counters();
        self.report.trace_digest = hex::encode(std::mem::take(&mut self.hasher).finalize());
        if let Some(r) = self.replayer.take() {
            let step = self.report.steps;
            let v = compare(&r.finish(), &self.sys).into_iter().map(|detail| Violation {
                step,
                call: "end".into(),
                invariant: InvariantId::Replay,
                detail,
            });
            self.keep(v.collect());
        }
        self.report
    }

    fn absorb(&mut self, step: u64, call: &str, events: &[Event], sink: &mut dyn FnMut(&Event)) {
        for e in events {
            match &mut self.replayer {
                Some(r) => r.feed(e),
                None => {
                    self.replayer = Replayer::new(e).ok().map(|mut r| {
                        r.feed(e);
                        r
                    })
                }
            }
            self.hasher.update(e.to_line().as_bytes());
            self.hasher.update(b"\n");
            sink(e);
        }
        let v = self.oracle.check(&self.sys, events, step, call);
        self.keep(v);
    }

    fn keep(&mut self, v: Vec<Violation>) {
        self.report.violations_total += v.len() as u64;
        let room = MAX_KEPT.saturating_sub(self.report.violations.len());
        self.report.violations.extend(v.into_iter().take(room));
    }

    fn pick(&mut self) -> Option<CallKind> {
        let total: u32 = self.weights.iter().sum();
        if total == 0 {
            return None;
        }
        let mut x = self.rng.gen_range(0..total);
        for (k, w) in self.kinds.iter().zip(&self.weights) {
            if x < *w {
                return Some(*k);
            }
            x -= w;
        }
        unreachable!()
    }

    fn core(&mut self) -> CoreId {
        CoreId(self.rng.gen_range(0..self.sys.num_cores()))
    }

    /// Granule index up to eight past the end of the machine.
    fn any_granule(&mut self) -> GranuleId {
        GranuleId(self.rng.gen_range(0..self.sys.machine().num_granules() + 8))
    }

    fn delegated_granule(&mut self) -> GranuleId {
        let d: Vec<GranuleId> = self.sys.rmm.index().delegated.iter().copied().collect();
        match d.choose(&mut self.rng) {
            Some(g) if self.rng.gen_bool(0.8) => *g,
            _ => self.any_granule(),
        }
    }

    /// Mostly granules the normal world holds outright.
    fn normal_granule(&mut self) -> GranuleId {
        let m = self.sys.machine();
        let normal: Vec<GranuleId> = (0..m.num_granules())
            .map(GranuleId)
            .filter(|g| m.gpt_pair(*g) == Some((PasValue::Normal, PasValue::NotAccessible)))
            .collect();
        match normal.choose(&mut self.rng) {
            Some(g) if self.rng.gen_bool(0.7) => *g,
            _ => self.any_granule(),
        }
    }

    /// Any granule some realm uses or the normal world holds.
    fn touched_granule(&mut self) -> GranuleId {
        let idx = self.sys.rmm.index();
        let hot: Vec<GranuleId> = idx.delegated.iter().copied().collect();
        match hot.choose(&mut self.rng) {
            Some(g) if self.rng.gen_bool(0.5) => *g,
            _ => self.normal_granule(),
        }
    }

    /// A delegated granule nobody owns, if there is one.
    fn free_granule(&mut self) -> GranuleId {
        let idx = self.sys.rmm.index();
        let free: Vec<GranuleId> = idx
            .delegated
            .iter()
            .filter(|g| !idx.owner.contains_key(g) && !idx.shared.contains(g))
            .copied()
            .collect();
        match free.choose(&mut self.rng) {
            Some(g) => *g,
            None => self.any_granule(),
        }
    }

    /// Biased toward granules some realm already owns.
    fn victim_granule(&mut self) -> GranuleId {
        let owned: Vec<GranuleId> = self.sys.rmm.index().owner.keys().copied().collect();
        match owned.choose(&mut self.rng) {
            Some(g) if self.rng.gen_bool(0.4) => *g,
            _ => self.delegated_granule(),
        }
    }

    fn realm(&mut self) -> RealmId {
        let live: Vec<RealmId> = self.sys.rmm.realms().map(|r| r.id).collect();
        match live.choose(&mut self.rng) {
            Some(r) if self.rng.gen_bool(0.95) => *r,
            _ => RealmId(self.rng.gen_range(0..64)),
        }
    }

    fn rec(&mut self) -> RecId {
        let recs: Vec<RecId> = self.sys.rmm.recs().map(|r| r.id).collect();
        match recs.choose(&mut self.rng) {
            Some(r) if self.rng.gen_bool(0.95) => *r,
            _ => RecId(self.rng.gen_range(0..64)),
        }
    }

    fn shared_ipa(&mut self, realm: RealmId) -> u64 {
        let base = self
            .sys
            .rmm
            .realm(realm)
            .and_then(|r| r.params.shared_base_ipa)
            .unwrap_or(UNPROTECTED_IPA_BASE);
        base + self.rng.gen_range(0..4u64) * PAGE_SIZE
    }

    fn any_ipa(&mut self, realm: RealmId) -> u64 {
        match self.rng.gen_range(0..5) {
            0 | 1 => self.rng.gen_range(0..6u64) * PAGE_SIZE + self.rng.gen_range(0..64u64) * 8,
            2 | 3 => self.shared_ipa(realm) + self.rng.gen_range(0..64u64) * 8,
            _ => MMIO_BASE + self.rng.gen_range(0..3u64) * PAGE_SIZE,
        }
    }

    fn pages(&mut self, realm: RealmId) -> Vec<u64> {
        let n = self.rng.gen_range(0..3);
        (0..n)
            .map(|_| {
                if self.rng.gen_bool(0.7) {
                    self.shared_ipa(realm)
                } else {
                    self.any_ipa(realm) & !(PAGE_SIZE - 1)
                }
            })
            .collect()
    }

    fn guest_script(&mut self, realm: RealmId) -> Vec<GuestAction> {
        let n = self.rng.gen_range(1..5);
        (0..n)
            .map(|_| match self.rng.gen_range(0..9) {
                0 | 1 => GuestAction::WriteMem {
                    ipa: self.any_ipa(realm),
                    data: vec![0xcc; self.rng.gen_range(1..16)],
                },
                2 => GuestAction::ReadMem {
                    ipa: self.any_ipa(realm),
                    len: self.rng.gen_range(1..16),
                },
                3 => GuestAction::Exec {
                    ipa: self.any_ipa(realm),
                },
                4 => GuestAction::Rsi(RsiCall::ExAccess {
                    pages: self.pages(realm),
                    enable: self.rng.gen(),
                }),
                5 => {
                    let mut pages = self.pages(realm);
                    pages.push(MMIO_BASE + self.rng.gen_range(0..3u64) * PAGE_SIZE);
                    GuestAction::Rsi(RsiCall::Mmio { pages })
                }
                6 => GuestAction::MmioRead {
                    ipa: self.any_ipa(realm),
                    reg: self.rng.gen_range(0..8),
                },
                7 => GuestAction::MmioWrite {
                    ipa: self.any_ipa(realm),
                    value: self.rng.gen(),
                },
                _ => GuestAction::Rsi(RsiCall::SetRipas {
                    base: self.rng.gen_range(0..4u64) * PAGE_SIZE,
                    len: self.rng.gen_range(1..3u64) * PAGE_SIZE,
                    state: if self.rng.gen() { Ripas::Ram } else { Ripas::Empty },
                }),
            })
            .collect()
    }

    fn devices(&mut self) -> Vec<DeviceKind> {
        DeviceKind::ALL
            .into_iter()
            .filter(|_| self.rng.gen_bool(0.25))
            .collect()
    }

    fn rmi(&mut self, core: CoreId, call: RmiCall) -> Option<RmiReturn> {
        self.sys.rmi(core, call).ok()
    }

    /// Executes one call; true on success.
    fn step(&mut self, kind: CallKind) -> bool {
        let core = self.core();
        match kind {
            CallKind::Delegate => {
                let g = self.normal_granule();
                let ok = self.rmi(core, RmiCall::GranuleDelegate(g)).is_some();
                if ok {
                    self.known.delegated.insert(g);
                }
                ok
            }
            CallKind::Undelegate => {
                let g = self.delegated_granule();
                let ok = self.rmi(core, RmiCall::GranuleUndelegate(g)).is_some();
                if ok {
                    self.known.delegated.remove(&g);
                }
                ok
            }
            CallKind::RealmCreate => {
                let params = RealmParams {
                    device_tree: self.devices(),
                    shared_base_ipa: match self.rng.gen_range(0..4) {
                        0 => None,
                        1 => Some(self.rng.gen_range(0..0x1_0000u64) * PAGE_SIZE),
                        _ => Some(UNPROTECTED_IPA_BASE + self.rng.gen_range(0..4u64) * PAGE_SIZE),
                    },
                    personalization: self.rng.gen_range(0..4),
                };
                match self.rmi(core, RmiCall::RealmCreate(params)) {
                    Some(RmiReturn::Realm(r)) => {
                        self.known.realms.push(r);
                        true
                    }
                    _ => false,
                }
            }
            CallKind::RttCreate => {
                let realm = self.realm();
                let (base, len) = match self.rng.gen_range(0..4) {
                    0 | 1 => (0, self.rng.gen_range(1..8u64) * PAGE_SIZE),
                    2 => (self.shared_ipa(realm), self.rng.gen_range(1..4u64) * PAGE_SIZE),
                    _ => (
                        self.rng.gen::<u64>() & !(PAGE_SIZE - 1),
                        self.rng.gen_range(0..1u64 << 34),
                    ),
                };
                self.rmi(core, RmiCall::RttCreate { realm, base, len }).is_some()
            }
            CallKind::DataCreate => {
                let realm = self.realm();
                let granule = self.victim_granule();
                let ipa = match self.rng.gen_range(0..8) {
                    0 => self.shared_ipa(realm),
                    1 => self.rng.gen::<u64>() & !(PAGE_SIZE - 1),
                    _ => self.rng.gen_range(0..6u64) * PAGE_SIZE,
                };
                let content = vec![self.rng.gen::<u8>(); self.rng.gen_range(0..64)];
                let ok = self
                    .rmi(
                        core,
                        RmiCall::DataCreate {
                            realm,
                            granule,
                            ipa,
                            content,
                        },
                    )
                    .is_some();
                if ok {
                    self.known.private.entry(realm).or_default().push(granule);
                }
                ok
            }
            CallKind::MapUnprotected => {
                let realm = self.realm();
                let granule = if self.rng.gen_bool(0.8) {
                    self.free_granule()
                } else {
                    self.victim_granule()
                };
                let ipa = if self.rng.gen_bool(0.85) {
                    self.shared_ipa(realm)
                } else {
                    self.any_ipa(realm) & !(PAGE_SIZE - 1)
                };
                let ok = self
                    .rmi(core, RmiCall::RttMapUnprotected { realm, granule, ipa })
                    .is_some();
                if ok {
                    self.known.shared.entry(realm).or_default().push(granule);
                }
                ok
            }
            CallKind::RecCreate => {
                let realm = self.realm();
                match self.rmi(core, RmiCall::RecCreate(realm)) {
                    Some(RmiReturn::Rec(r)) => {
                        self.known.recs.push(r);
                        true
                    }
                    _ => false,
                }
            }
            CallKind::Activate => {
                let realm = self.realm();
                let ok = self.rmi(core, RmiCall::RealmActivate(realm)).is_some();
                // The platform owner approves most sandboxes it sees.
                if ok && self.rng.gen_bool(0.7) {
                    if let Some(r) = self.sys.rmm.realm(realm) {
                        let m = r.measurement.value();
                        self.sys.rmm.allow_list_mut().insert(m);
                    }
                }
                ok
            }
            CallKind::RecEnter => {
                let rec = self.rec();
                let realm = self.sys.rmm.rec(rec).map_or(RealmId(0), |r| r.realm);
                let script = self.guest_script(realm);
                if self.sys.queue_guest(rec, script).is_err() {
                    return false;
                }
                let mmio_value = self.rng.gen_bool(0.3).then(|| self.rng.gen());
                self.rmi(core, RmiCall::RecEnter { rec, mmio_value }).is_some()
            }
            CallKind::SetRipas => {
                let asked: Vec<(RealmId, u64, u64, Ripas)> = self
                    .sys
                    .rmm
                    .recs()
                    .filter_map(|r| match r.pending {
                        Some(PendingExit::Ripas { base, len, state }) => Some((r.realm, base, len, state)),
                        _ => None,
                    })
                    .collect();
                let (realm, base, len, state) = match asked.choose(&mut self.rng) {
                    Some(a) if self.rng.gen_bool(0.8) => *a,
                    _ => (
                        self.realm(),
                        self.rng.gen_range(0..4u64) * PAGE_SIZE,
                        self.rng.gen_range(1..3u64) * PAGE_SIZE,
                        if self.rng.gen() { Ripas::Ram } else { Ripas::Empty },
                    ),
                };
                self.rmi(
                    core,
                    RmiCall::RttSetRipas {
                        realm,
                        base,
                        len,
                        state,
                    },
                )
                .is_some()
            }
            CallKind::Destroy => {
                let realm = self.realm();
                if let Ok(rec) = self.sys.record(realm) {
                    let _ = rec;
                    return self.sys.hyp_destroy(core, realm).is_ok();
                }
                let mut private = self.known.private.get(&realm).cloned().unwrap_or_default();
                let shared = self.known.shared.get(&realm).cloned().unwrap_or_default();
                if self.rng.gen_bool(0.2) {
                    private.push(self.any_granule());
                }
                match self.rmi(core, RmiCall::RealmDestroy { realm, private, shared }) {
                    Some(RmiReturn::Reclaimed(v)) => {
                        for g in v {
                            self.known.delegated.remove(&g);
                        }
                        self.known.private.remove(&realm);
                        self.known.shared.remove(&realm);
                        true
                    }
                    _ => false,
                }
            }
            CallKind::HostAccess => {
                let pa = self.touched_granule().pa() + self.rng.gen_range(0..512u64) * 8;
                match self.rng.gen_range(0..4) {
                    0 | 1 => self.sys.host_read(core, pa, 8).is_ok(),
                    2 => self.sys.host_write(core, pa, &[0x41; 8]).is_ok(),
                    _ => self.sys.host_exec(core, pa).is_ok(),
                }
            }
            CallKind::SecureAccess => {
                let pa = self.touched_granule().pa();
                if self.rng.gen() {
                    self.sys.secure_read(core, pa, 8).is_ok()
                } else {
                    self.sys.secure_write(core, pa, &[0x5e; 8]).is_ok()
                }
            }
            CallKind::Irq => {
                let realm = self.realm();
                let src = match self.rng.gen_range(0..3) {
                    0 => IrqSource::Timer,
                    1 => IrqSource::Device(*DeviceKind::ALL.choose(&mut self.rng).expect("nonempty")),
                    _ => IrqSource::HypervisorArbitrary(self.rng.gen_range(0..64)),
                };
                self.sys.inject_irq(core, realm, src) == crate::realm::IrqOutcome::Delivered
            }
            CallKind::RogueSmc => {
                let granule = self.any_granule();
                let realm = self.realm().0;
                let call = match self.rng.gen_range(0..5) {
                    0 => SmcCall::Delegate(granule),
                    1 => SmcCall::Undelegate(granule),
                    2 => SmcCall::Share { granule, realm },
                    3 => SmcCall::Unshare { granule, realm },
                    _ => SmcCall::ExAccess {
                        granule,
                        enable: self.rng.gen(),
                    },
                };
                self.sys.rogue_smc(core, call).is_ok()
            }
            CallKind::Race => {
                if self.sys.num_cores() < 2 {
                    return false;
                }
                let g = self.normal_granule();
                let h = if self.rng.gen() { g } else { self.touched_granule() };
                let second = if self.rng.gen() {
                    SmcCall::Delegate(h)
                } else {
                    SmcCall::Undelegate(h)
                };
                let r = self.sys.race(&[(CoreId(0), SmcCall::Delegate(g)), (CoreId(1), second)]);
                r.iter().any(|x| x.is_ok())
            }
            CallKind::CreateSbs => {
                let mut m = Manifest::new(self.rng.gen_range(1..4), self.rng.gen_range(0..3), "add");
                m.payload_seed = self.rng.gen_range(0..8);
                if m.shared_pages > 0 && self.rng.gen() {
                    m.virtqueue_page = Some(0);
                }
                if self.rng.gen_bool(0.3) {
                    let owned: Vec<u64> = (0..m.memory_pages).map(|_| self.victim_granule().0).collect();
                    m.granules = Some(owned);
                }
                self.sys.allow_manifest(&m);
                match self.sys.hyp_create_sbs(core, &m) {
                    Ok(realm) => self.sys.hyp_launch(core, realm).is_ok(),
                    Err(_) => false,
                }
            }
            CallKind::AppRpc => {
                let realms: Vec<RealmId> = self.sys.hyp.records().map(|r| r.realm).collect();
                let Some(&realm) = realms.choose(&mut self.rng) else {
                    return false;
                };
                let (a, b) = (self.rng.gen::<u32>() as u64, self.rng.gen::<u32>() as u64);
                matches!(self.sys.app_add(core, realm, a, b), Ok(s) if s == a + b)
            }
            CallKind::VqPush => {
                let realms: Vec<RealmId> = self.sys.hyp.records().map(|r| r.realm).collect();
                let Some(&realm) = realms.choose(&mut self.rng) else {
                    return false;
                };
                let addr = self.any_ipa(realm);
                let d = Desc {
                    addr,
                    len: self.rng.gen_range(0..8192),
                    flags: 0,
                };
                self.sys.vq_host_push(core, realm, Ring::Rx, d).is_ok()
            }
        }
    }
}

pub fn fuzz(cfg: FuzzConfig) -> FuzzReport {
    Fuzzer::new(cfg).run(&mut |_| {})
}

/// Active realms the fuzzer has driven to completion, for diagnostics.
pub fn active_realms(sys: &System) -> usize {
    sys.rmm.realms().filter(|r| r.state == RealmState::Active).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_steps_is_empty() {
        let r = fuzz(FuzzConfig::new(1, 0));
        assert!(r.violations.is_empty());
        assert_eq!(r.steps, 0);
        assert!(r.coverage.is_empty());
    }

    #[test]
    fn short_run_is_clean_and_repeatable() {
        let a = fuzz(FuzzConfig::new(7, 500));
        let b = fuzz(FuzzConfig::new(7, 500));
        assert!(a.violations.is_empty(), "{}", a.to_text());
        assert_eq!(a, b);
        let c = fuzz(FuzzConfig::new(8, 500));
        assert_ne!(a.trace_digest, c.trace_digest);
    }
}
