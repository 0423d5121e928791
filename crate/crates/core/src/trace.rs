// SPDX-License-Identifier: Apache-2.0

//! Ordered event record and per-run counters.
//!
//! Trace files hold one event per line, tab separated, in the fixed field
//! order `step core kind realm granule addr args outcome`. Absent optional
//! fields are written as `-`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memory::{CoreId, GranuleId};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    Smc(String),
    Rmi(String),
    Rsi(String),
    ContextSwitch,
    Gpf,
    TlbFlush,
    InterruptFiltered,
    AttackBlocked(String),
    /// A REC exit handed back to the hypervisor.
    Exit(String),
    /// Any other modeled operation (boot, transport, host/guest memory I/O).
    Op(String),
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EventKind::Smc(n) => write!(f, "smc:{n}"),
            EventKind::Rmi(n) => write!(f, "rmi:{n}"),
            EventKind::Rsi(n) => write!(f, "rsi:{n}"),
            EventKind::ContextSwitch => f.write_str("cs"),
            EventKind::Gpf => f.write_str("gpf"),
            EventKind::TlbFlush => f.write_str("flush"),
            EventKind::InterruptFiltered => f.write_str("irq_filtered"),
            EventKind::AttackBlocked(n) => write!(f, "blocked:{n}"),
            EventKind::Exit(n) => write!(f, "exit:{n}"),
            EventKind::Op(n) => write!(f, "op:{n}"),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("malformed trace line {line}: {reason}")]
pub struct TraceParseError {
    pub line: usize,
    pub reason: String,
}

impl FromStr for EventKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (tag, name) = match s.split_once(':') {
            Some((t, n)) => (t, Some(n.to_string())),
            None => (s, None),
        };
        Ok(match (tag, name) {
            ("smc", Some(n)) => EventKind::Smc(n),
            ("rmi", Some(n)) => EventKind::Rmi(n),
            ("rsi", Some(n)) => EventKind::Rsi(n),
            ("cs", None) => EventKind::ContextSwitch,
            ("gpf", None) => EventKind::Gpf,
            ("flush", None) => EventKind::TlbFlush,
            ("irq_filtered", None) => EventKind::InterruptFiltered,
            ("blocked", Some(n)) => EventKind::AttackBlocked(n),
            ("exit", Some(n)) => EventKind::Exit(n),
            ("op", Some(n)) => EventKind::Op(n),
            _ => return Err(format!("unknown event kind {s:?}")),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub step: u64,
    pub core: Option<usize>,
    pub kind: EventKind,
    pub realm: Option<u32>,
    pub granule: Option<u64>,
    pub addr: Option<u64>,
    pub args: String,
    pub outcome: String,
}

impl Event {
    pub fn new(kind: EventKind) -> Event {
        Event {
            step: 0,
            core: None,
            kind,
            realm: None,
            granule: None,
            addr: None,
            args: String::new(),
            outcome: String::new(),
        }
    }

    pub fn core(mut self, core: CoreId) -> Event {
        self.core = Some(core.0);
        self
    }

    pub fn realm(mut self, realm: u32) -> Event {
        self.realm = Some(realm);
        self
    }

    pub fn granule(mut self, granule: GranuleId) -> Event {
        self.granule = Some(granule.0);
        self
    }

    pub fn addr(mut self, addr: u64) -> Event {
        self.addr = Some(addr);
        self
    }

    pub fn args(mut self, args: impl Into<String>) -> Event {
        self.args = args.into();
        self
    }

    pub fn outcome(mut self, outcome: impl Into<String>) -> Event {
        self.outcome = outcome.into();
        self
    }

    pub fn to_line(&self) -> String {
        fn opt<T: fmt::Display>(v: Option<T>) -> String {
            v.map_or_else(|| "-".to_string(), |v| v.to_string())
        }
        fn text(s: &str) -> String {
            if s.is_empty() {
                "-".to_string()
            } else {
                s.replace(['\t', '\n', '\r'], " ")
            }
        }
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.step,
            opt(self.core),
            self.kind,
            opt(self.realm),
            opt(self.granule),
            self.addr.map_or_else(|| "-".to_string(), |a| format!("{a:#x}")),
            text(&self.args),
            text(&self.outcome),
        )
    }

    pub fn parse_line(line: &str, lineno: usize) -> Result<Event, TraceParseError> {
        let err = |reason: String| TraceParseError { line: lineno, reason };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 8 {
            return Err(err(format!("expected 8 fields, got {}", f.len())));
        }
        fn opt<T: FromStr>(s: &str) -> Result<Option<T>, String> {
            if s == "-" {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| format!("bad field {s:?}"))
            }
        }
        let addr = if f[5] == "-" {
            None
        } else {
            let h = f[5].trim_start_matches("0x");
            Some(u64::from_str_radix(h, 16).map_err(|_| err(format!("bad addr {:?}", f[5])))?)
        };
        let text = |s: &str| if s == "-" { String::new() } else { s.to_string() };
        Ok(Event {
            step: f[0].parse().map_err(|_| err("bad step".into()))?,
            core: opt(f[1]).map_err(err)?,
            kind: f[2].parse().map_err(err)?,
            realm: opt(f[3]).map_err(err)?,
            granule: opt(f[4]).map_err(err)?,
            addr,
            args: text(f[6]),
            outcome: text(f[7]),
        })
    }
}

/// Per-kind totals in the shape of the evaluation table: context switches,
/// hypervisor/VM transitions, SMCs, RMIs, RSIs and granule protection faults.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterReport {
    pub context_switches: u64,
    pub hyp_vm_calls: u64,
    pub smcs: u64,
    pub rmis: u64,
    pub rsis: u64,
    pub gpfs: u64,
}

impl CounterReport {
    pub fn tally(&mut self, ev: &Event) {
        match ev.kind {
            EventKind::ContextSwitch => self.context_switches += 1,
            EventKind::Exit(_) => self.hyp_vm_calls += 1,
            EventKind::Smc(_) => self.smcs += 1,
            EventKind::Rmi(_) => self.rmis += 1,
            EventKind::Rsi(_) => self.rsis += 1,
            EventKind::Gpf => self.gpfs += 1,
            _ => {}
        }
    }

    pub fn from_events<'a>(events: impl IntoIterator<Item = &'a Event>) -> CounterReport {
        let mut c = CounterReport::default();
        for e in events {
            c.tally(e);
        }
        c
    }

    pub fn add(&mut self, other: &CounterReport) {
        self.context_switches += other.context_switches;
        self.hyp_vm_calls += other.hyp_vm_calls;
        self.smcs += other.smcs;
        self.rmis += other.rmis;
        self.rsis += other.rsis;
        self.gpfs += other.gpfs;
    }

    pub fn is_empty(&self) -> bool {
        *self == CounterReport::default()
    }

    fn fields(&self) -> [(&'static str, u64); 6] {
        [
            ("context_switches", self.context_switches),
            ("hyp_vm_calls", self.hyp_vm_calls),
            ("smcs", self.smcs),
            ("rmis", self.rmis),
            ("rsis", self.rsis),
            ("gpfs", self.gpfs),
        ]
    }

    /// Parses the `name<TAB>value` summary format written by `Display`.
    pub fn parse(text: &str) -> Result<CounterReport, String> {
        let mut c = CounterReport::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('\t')
                .ok_or_else(|| format!("bad counter line {line:?}"))?;
            let v: u64 = v.trim().parse().map_err(|_| format!("bad value in {line:?}"))?;
            match k {
                "context_switches" => c.context_switches = v,
                "hyp_vm_calls" => c.hyp_vm_calls = v,
                "smcs" => c.smcs = v,
                "rmis" => c.rmis = v,
                "rsis" => c.rsis = v,
                "gpfs" => c.gpfs = v,
                _ => return Err(format!("unknown counter {k:?}")),
            }
        }
        Ok(c)
    }
}

impl fmt::Display for CounterReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.fields() {
            writeln!(f, "{k}\t{v}")?;
        }
        Ok(())
    }
}

/// Append-only event log. Steps are assigned on emission and strictly
/// increase across the lifetime of a machine, including across snapshot
/// restores (the event list itself is not persisted in snapshots).
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trace {
    next_step: u64,
    #[serde(skip)]
    events: Vec<Event>,
    counters: CounterReport,
}

impl Trace {
    pub fn emit(&mut self, mut ev: Event) -> u64 {
        ev.step = self.next_step;
        self.next_step += 1;
        self.counters.tally(&ev);
        let step = ev.step;
        self.events.push(ev);
        step
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn events_since(&self, step: u64) -> &[Event] {
        let first = self.events.partition_point(|e| e.step < step);
        &self.events[first..]
    }

    pub fn next_step(&self) -> u64 {
        self.next_step
    }

    /// Counters accumulated since the machine booted.
    pub fn counters(&self) -> CounterReport {
        self.counters
    }

    pub fn take_events(&mut self) -> Vec<Event> {
        std::mem::take(&mut self.events)
    }

    pub fn to_text(&self) -> String {
        lines(&self.events)
    }
}

pub fn lines(events: &[Event]) -> String {
    let mut s = String::new();
    for e in events {
        s.push_str(&e.to_line());
        s.push('\n');
    }
    s
}

pub fn parse_trace(text: &str) -> Result<Vec<Event>, TraceParseError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| Event::parse_line(l, i + 1))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn kind_strategy() -> impl Strategy<Value = EventKind> {
        let name = "[a-z_0-9]{1,12}";
        prop_oneof![
            name.prop_map(EventKind::Smc),
            name.prop_map(EventKind::Rmi),
            name.prop_map(EventKind::Rsi),
            Just(EventKind::ContextSwitch),
            Just(EventKind::Gpf),
            Just(EventKind::TlbFlush),
            Just(EventKind::InterruptFiltered),
            name.prop_map(EventKind::AttackBlocked),
            name.prop_map(EventKind::Exit),
            name.prop_map(EventKind::Op),
        ]
    }

    proptest! {
        #[test]
        fn line_round_trip(
            step in any::<u64>(),
            core in proptest::option::of(0usize..8),
            kind in kind_strategy(),
            realm in proptest::option::of(any::<u32>()),
            granule in proptest::option::of(any::<u64>()),
            addr in proptest::option::of(any::<u64>()),
            args in "[a-z0-9=, ]{1,20}",
            outcome in "[a-z_]{1,10}",
        ) {
            let ev = Event { step, core, kind, realm, granule, addr, args, outcome };
            let back = Event::parse_line(&ev.to_line(), 1).unwrap();
            prop_assert_eq!(back, ev);
        }
    }

    #[test]
    fn steps_strictly_increase_and_counters_match() {
        let mut t = Trace::default();
        t.emit(Event::new(EventKind::ContextSwitch));
        t.emit(Event::new(EventKind::Rmi("rmi_realm_create".into())));
        t.emit(Event::new(EventKind::Smc("smc_delegate".into())));
        t.emit(Event::new(EventKind::Exit("halt".into())));
        let steps: Vec<u64> = t.events().iter().map(|e| e.step).collect();
        assert_eq!(steps, vec![0, 1, 2, 3]);
        assert_eq!(t.counters(), CounterReport::from_events(t.events()));
        let parsed = parse_trace(&t.to_text()).unwrap();
        assert_eq!(CounterReport::from_events(&parsed), t.counters());
    }

    #[test]
    fn counter_summary_round_trip() {
        let c = CounterReport {
            context_switches: 4,
            hyp_vm_calls: 1,
            smcs: 2,
            rmis: 3,
            rsis: 2,
            gpfs: 0,
        };
        assert_eq!(CounterReport::parse(&c.to_string()).unwrap(), c);
    }

    #[test]
    fn tabs_in_args_are_flattened() {
        let ev = Event::new(EventKind::Op("x".into())).args("a\tb");
        assert_eq!(ev.to_line().split('\t').count(), 8);
    }
}
