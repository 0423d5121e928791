// SPDX-License-Identifier: Apache-2.0

//! Trace verifier. Rebuilds the final protection tables and stage-2 maps
//! from a recorded trace alone and compares them against a live machine.

use std::collections::BTreeMap;

use crate::memory::{GptId, GranuleId, PasValue};
use crate::root::{boot_create_gpts, MachineLayout};
use crate::system::System;
use crate::trace::{CounterReport, Event, EventKind};

type Pair = (PasValue, PasValue);

/// Per realm: IPA to (granule index, unprotected).
pub type S2Map = BTreeMap<u32, BTreeMap<u64, (u64, bool)>>;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Replayed {
    pub gpt: Vec<Pair>,
    pub s2: S2Map,
    pub counters: CounterReport,
    pub problems: Vec<String>,
}

fn transition(name: &str, args: &str) -> Option<(Pair, Pair)> {
    use PasValue::*;
    Some(match name {
        "smc_delegate" => ((Normal, NotAccessible), (Realm, Realm)),
        "smc_undelegate" => ((Realm, Realm), (Normal, NotAccessible)),
        "smc_2gpt_ns_share" => ((Realm, Realm), (Normal, Realm)),
        "smc_2gpt_ns_unshare" => ((Normal, Realm), (Realm, Realm)),
        "smc_2gpt_ex_access" if args.contains("enable=true") => ((Normal, Realm), (NotAccessible, Realm)),
        "smc_2gpt_ex_access" => ((NotAccessible, Realm), (Normal, Realm)),
        _ => return None,
    })
}

fn arg<'a>(args: &'a str, key: &str) -> Option<&'a str> {
    args.split_whitespace()
        .find_map(|kv| kv.strip_prefix(key)?.strip_prefix('='))
}

fn hex(s: &str) -> Option<u64> {
    u64::from_str_radix(s.strip_prefix("0x")?, 16).ok()
}

/// Streaming form of [`replay`].
#[derive(Clone, Debug)]
pub struct Replayer {
    state: Replayed,
    last_step: Option<u64>,
}

impl Replayer {
    /// Starts from the boot event, which carries the machine layout.
    pub fn new(boot: &Event) -> Result<Replayer, String> {
        if boot.kind != EventKind::Op("boot".into()) {
            return Err(format!("trace does not start at boot: {}", boot.to_line()));
        }
        let compact: Vec<&str> = boot
            .args
            .split_whitespace()
            .filter(|t| !t.starts_with("cores="))
            .collect();
        let layout = MachineLayout::parse_compact(&compact.join(" ")).map_err(|e| e.to_string())?;
        let (n, rs) = boot_create_gpts(&layout).map_err(|e| e.to_string())?;
        let state = Replayed {
            gpt: (0..layout.granules)
                .map(|g| {
                    let g = GranuleId(g);
                    (n.get(g).expect("in range"), rs.get(g).expect("in range"))
                })
                .collect(),
            ..Replayed::default()
        };
        Ok(Replayer { state, last_step: None })
    }

    pub fn feed(&mut self, e: &Event) {
        let out = &mut self.state;
        out.counters.tally(e);
        if self.last_step.is_some_and(|s| e.step <= s) {
            out.problems.push(format!("step {} does not increase", e.step));
        }
        self.last_step = Some(e.step);
        match &e.kind {
            EventKind::Smc(name) if e.outcome == "ok" => {
                let Some(((from, to), g)) = transition(name, &e.args).zip(e.granule) else {
                    out.problems.push(format!("step {}: unknown smc {name}", e.step));
                    return;
                };
                let Some(slot) = out.gpt.get_mut(g as usize) else {
                    out.problems.push(format!("step {}: granule {g} out of range", e.step));
                    return;
                };
                if *slot != from {
                    out.problems
                        .push(format!("step {}: {name} on granule {g} in {slot:?}", e.step));
                }
                *slot = to;
                let recorded = (arg(&e.args, "gptn"), arg(&e.args, "gptrs"));
                if recorded != (Some(to.0.name()), Some(to.1.name())) {
                    out.problems
                        .push(format!("step {}: recorded {recorded:?}, expected {to:?}", e.step));
                }
            }
            EventKind::Rmi(name) if e.outcome == "ok" => {
                let unprotected = match name.as_str() {
                    "rmi_data_create" => false,
                    "rmi_rtt_map_unprotected" => true,
                    _ => return,
                };
                let (Some(r), Some(g), Some(ipa)) = (e.realm, e.granule, arg(&e.args, "ipa").and_then(hex)) else {
                    out.problems.push(format!("step {}: incomplete {name}", e.step));
                    return;
                };
                out.s2.entry(r).or_default().insert(ipa, (g, unprotected));
            }
            EventKind::Rmi(name) if name == "rmi_realm_destroy" => {
                if let Some(r) = e.realm {
                    out.s2.remove(&r);
                }
            }
            EventKind::Op(op) if op == "validate_boot" && e.outcome.starts_with("reject") => {
                if let Some(r) = e.realm {
                    out.s2.remove(&r);
                }
            }
            EventKind::Op(op) if op == "plant_s2" => {
                if let (Some(r), Some(g), Some(ipa)) = (e.realm, e.granule, e.addr) {
                    out.s2.entry(r).or_default().insert(ipa, (g, false));
                }
            }
            _ => {}
        }
    }

    pub fn finish(mut self) -> Replayed {
        self.state.s2.retain(|_, m| !m.is_empty());
        self.state
    }
}

/// Replays `events`, which must start with the boot event.
pub fn replay(events: &[Event]) -> Result<Replayed, String> {
    let mut r = Replayer::new(events.first().ok_or("empty trace")?)?;
    for e in events {
        r.feed(e);
    }
    Ok(r.finish())
}

fn live_s2(sys: &System) -> S2Map {
    let mut s2 = S2Map::new();
    for r in sys.rmm.realms() {
        let m: BTreeMap<u64, (u64, bool)> =
            r.s2.iter()
                .map(|(&ipa, e)| (ipa, (e.granule.0, e.unprotected)))
                .collect();
        if !m.is_empty() {
            s2.insert(r.id.0, m);
        }
    }
    s2
}

/// Lists every difference between the replayed and the live state.
pub fn compare(rep: &Replayed, sys: &System) -> Vec<String> {
    let m = sys.machine();
    let mut diffs = rep.problems.clone();
    if rep.gpt.len() as u64 != m.num_granules() {
        diffs.push(format!(
            "trace has {} granules, machine {}",
            rep.gpt.len(),
            m.num_granules()
        ));
        return diffs;
    }
    for (i, &pair) in rep.gpt.iter().enumerate() {
        let g = GranuleId(i as u64);
        let live = (m.gpt(GptId::Normal).get(g), m.gpt(GptId::RealmSecure).get(g));
        if live != (Some(pair.0), Some(pair.1)) {
            diffs.push(format!("granule {i}: replayed {pair:?}, live {live:?}"));
        }
    }
    let live = live_s2(sys);
    if live != rep.s2 {
        diffs.push(format!("stage-2 maps differ: replayed {:?}, live {live:?}", rep.s2));
    }
    if rep.counters != m.trace().counters() {
        diffs.push(format!(
            "counters differ: trace {:?}, online {:?}",
            rep.counters,
            m.trace().counters()
        ));
    }
    diffs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::Manifest;
    use crate::memory::CoreId;
    use crate::system::SystemConfig;

    #[test]
    fn replay_matches_a_lifecycle() {
        let mut sys = System::boot(&SystemConfig::default()).unwrap();
        let m = Manifest::new(3, 2, "add");
        sys.allow_manifest(&m);
        let a = sys.hyp_create_sbs(CoreId(0), &m).unwrap();
        sys.hyp_launch(CoreId(0), a).unwrap();
        assert_eq!(sys.app_add(CoreId(1), a, 4, 5).unwrap(), 9);
        let b = sys.hyp_create_sbs(CoreId(0), &m).unwrap();
        sys.hyp_destroy(CoreId(0), a).unwrap();
        let rep = replay(sys.machine().trace().events()).unwrap();
        assert_eq!(compare(&rep, &sys), Vec::<String>::new());
        assert_eq!(rep.s2.keys().copied().collect::<Vec<_>>(), vec![b.0]);
    }

    #[test]
    fn tampered_trace_is_caught() {
        let mut sys = System::boot(&SystemConfig::default()).unwrap();
        let m = Manifest::new(2, 1, "idle");
        sys.allow_manifest(&m);
        sys.hyp_create_sbs(CoreId(0), &m).unwrap();
        let mut events = sys.machine().trace().events().to_vec();
        let i = events
            .iter()
            .position(|e| matches!(&e.kind, EventKind::Smc(n) if n == "smc_2gpt_ns_share"))
            .unwrap();
        events.remove(i);
        let rep = replay(&events).unwrap();
        assert!(!compare(&rep, &sys).is_empty());
    }

    #[test]
    fn needs_boot_event() {
        assert!(replay(&[]).is_err());
        assert!(replay(&[Event::new(EventKind::Gpf)]).is_err());
    }
}
