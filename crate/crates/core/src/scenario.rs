// SPDX-License-Identifier: Apache-2.0

//! Scenario files: one `actor call(args)` per line.
//!
//! ```text
//! # comment
//! owner allow(add.manifest)
//! hyp create(add.manifest)
//! hyp launch(last)
//! app@1 add(last, 2, 3)        => sum=5
//! hyp read(0x48000, 16)        => gpf
//! guest queue(last, exec 0x8000000000)
//! hyp enter(last)              => fault
//! ```
//!
//! `@N` picks the core (default 0). `last` names the most recently created
//! sandbox. A trailing `=> text` requires the outcome to start with `text`.
//! Numbers are decimal or `0x` hex; byte strings are hex.

use std::fmt;

use thiserror::Error;

use crate::manifest::Manifest;
use crate::memory::{AccessError, CoreId, GranuleId};
use crate::normal::rpc::RpcFrame;
use crate::normal::script::{parse_u64, GuestAction};
use crate::realm::{IrqOutcome, IrqSource, RealmId};
use crate::root::SmcCall;
use crate::system::System;
use crate::trace::{Event, EventKind};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScriptLine {
    pub lineno: usize,
    pub actor: String,
    pub core: usize,
    pub call: String,
    pub args: Vec<String>,
    pub expect: Option<String>,
}

impl fmt::Display for ScriptLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}@{} {}({})",
            self.actor,
            self.core,
            self.call,
            self.args.join(", ")
        )
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ScriptError {
    #[error("line {0}: {1}")]
    Syntax(usize, String),
    #[error("line {0}: {1}")]
    Setup(usize, String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepOutcome {
    pub line: ScriptLine,
    pub outcome: String,
    /// `Some(false)` when an expectation was given and not met.
    pub matched: Option<bool>,
}

pub fn parse_script(text: &str) -> Result<Vec<ScriptLine>, ScriptError> {
    let mut out = vec![];
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |m: &str| ScriptError::Syntax(lineno, format!("{m}: {raw:?}"));
        let (body, expect) = match line.split_once("=>") {
            Some((b, e)) => (b.trim(), Some(e.trim().to_string())),
            None => (line, None),
        };
        let (head, rest) = body
            .split_once(char::is_whitespace)
            .ok_or_else(|| bad("expected `actor call(args)`"))?;
        let (actor, core) = match head.split_once('@') {
            Some((a, c)) => (a, c.parse().map_err(|_| bad("bad core"))?),
            None => (head, 0),
        };
        let rest = rest.trim();
        let open = rest.find('(').ok_or_else(|| bad("missing `(`"))?;
        let inner = rest[open + 1..].strip_suffix(')').ok_or_else(|| bad("missing `)`"))?;
        let call = rest[..open].trim();
        if call.is_empty() {
            return Err(bad("missing call name"));
        }
        // guest actions carry their own spaces and commas
        let args: Vec<String> = if actor == "guest" {
            match inner.split_once(',') {
                Some((r, a)) => vec![r.trim().into(), a.trim().into()],
                None => vec![inner.trim().into()],
            }
        } else {
            inner
                .split(',')
                .map(|a| a.trim().to_string())
                .filter(|a| !a.is_empty())
                .collect()
        };
        out.push(ScriptLine {
            lineno,
            actor: actor.into(),
            core,
            call: call.into(),
            args,
            expect,
        });
    }
    Ok(out)
}

fn access_tag(e: &AccessError) -> String {
    match e {
        AccessError::GranuleProtectionFault { .. } => "gpf".into(),
        AccessError::OutOfRange(_) => "out_of_range".into(),
    }
}

fn io<T>(r: Result<T, AccessError>, show: impl FnOnce(T) -> String) -> String {
    match r {
        Ok(v) => show(v),
        Err(e) => access_tag(&e),
    }
}

/// Runs `lines` against `sys`. `load` resolves a manifest argument.
pub fn run_script(
    sys: &mut System,
    lines: &[ScriptLine],
    load: &dyn Fn(&str) -> Result<Manifest, String>,
) -> Result<Vec<StepOutcome>, ScriptError> {
    let mut out = vec![];
    for l in lines {
        let outcome = step(sys, l, load).map_err(|m| ScriptError::Setup(l.lineno, m))?;
        let matched = l.expect.as_ref().map(|e| outcome.starts_with(e.as_str()));
        sys.emit(
            Event::new(EventKind::Op("script".into()))
                .core(CoreId(l.core))
                .args(format!("line={} {}", l.lineno, l))
                .outcome(&outcome),
        );
        out.push(StepOutcome {
            line: l.clone(),
            outcome,
            matched,
        });
    }
    Ok(out)
}

fn step(sys: &mut System, l: &ScriptLine, load: &dyn Fn(&str) -> Result<Manifest, String>) -> Result<String, String> {
    if l.core >= sys.num_cores() {
        return Err(format!("no core {}", l.core));
    }
    let core = CoreId(l.core);
    let arg = |i: usize| {
        l.args
            .get(i)
            .map(String::as_str)
            .ok_or_else(|| format!("{} needs argument {}", l.call, i + 1))
    };
    let num = |i: usize| arg(i).and_then(parse_u64);
    let bytes = |i: usize| arg(i).and_then(|s| hex::decode(s).map_err(|e| format!("bad hex {s:?}: {e}")));
    let realm = |sys: &System, i: usize| -> Result<RealmId, String> {
        match arg(i)? {
            "last" => sys
                .hyp
                .records()
                .map(|r| r.realm)
                .max()
                .ok_or_else(|| "no sandbox created yet".into()),
            s => Ok(RealmId(parse_u64(s)? as u32)),
        }
    };
    Ok(match (l.actor.as_str(), l.call.as_str()) {
        ("owner", "allow") => {
            let m = load(arg(0)?)?;
            sys.allow_manifest(&m);
            "ok".into()
        }
        ("hyp", "create") => {
            let m = load(arg(0)?)?;
            match sys.hyp_create_sbs(core, &m) {
                Ok(r) => format!("realm={r}"),
                Err(e) => e.tag(),
            }
        }
        ("hyp", "launch") => match sys.hyp_launch(core, realm(sys, 0)?) {
            Ok(x) => x.name().to_string(),
            Err(e) => e.tag(),
        },
        ("hyp", "destroy") => match sys.hyp_destroy(core, realm(sys, 0)?) {
            Ok(v) => format!("reclaimed={}", v.len()),
            Err(e) => e.tag(),
        },
        ("hyp", "enter") => {
            let r = realm(sys, 0)?;
            let rec = sys.record(r).map_err(|e| e.to_string())?.rec;
            let mmio = if l.args.len() > 1 { Some(num(1)?) } else { None };
            match sys.rec_enter(core, rec, mmio) {
                Ok(x) => x.name().to_string(),
                Err(e) => e.tag(),
            }
        }
        ("hyp", "delegate") => match sys.hyp_delegate(core, GranuleId(num(0)?)) {
            Ok(()) => "ok".into(),
            Err(e) => e.tag(),
        },
        ("hyp", "undelegate") => match sys.hyp_undelegate(core, GranuleId(num(0)?)) {
            Ok(()) => "ok".into(),
            Err(e) => e.tag(),
        },
        ("hyp", "irq") => match sys.inject_irq(core, realm(sys, 0)?, IrqSource::HypervisorArbitrary(num(1)? as u32)) {
            IrqOutcome::Delivered => "delivered".into(),
            IrqOutcome::Filtered => "filtered".into(),
        },
        ("hyp", "read") => io(sys.host_read(core, num(0)?, num(1)? as usize), |v| {
            format!("ok {}", hex::encode(v))
        }),
        ("hyp", "write") => io(sys.host_write(core, num(0)?, &bytes(1)?), |_| "ok".into()),
        ("hyp", "exec") => io(sys.host_exec(core, num(0)?), |_| "ok".into()),
        ("hyp", "shared_read") => {
            let r = realm(sys, 0)?;
            match sys.host_shared_read(core, r, num(1)?, num(2)? as usize) {
                Ok(v) => format!("ok {}", hex::encode(v)),
                Err(e) => e.tag(),
            }
        }
        ("hyp", "shared_write") => {
            let r = realm(sys, 0)?;
            match sys.host_shared_write(core, r, num(1)?, &bytes(2)?) {
                Ok(()) => "ok".into(),
                Err(e) => e.tag(),
            }
        }
        ("secure", "read") => io(sys.secure_read(core, num(0)?, num(1)? as usize), |v| {
            format!("ok {}", hex::encode(v))
        }),
        ("secure", "write") => io(sys.secure_write(core, num(0)?, &bytes(1)?), |_| "ok".into()),
        ("rmm", call) if call.starts_with("rogue_") => {
            let g = GranuleId(num(0)?);
            let smc = match &call["rogue_".len()..] {
                "delegate" => SmcCall::Delegate(g),
                "undelegate" => SmcCall::Undelegate(g),
                "share" => SmcCall::Share {
                    granule: g,
                    realm: num(1)? as u32,
                },
                "unshare" => SmcCall::Unshare {
                    granule: g,
                    realm: num(1)? as u32,
                },
                other => return Err(format!("unknown smc {other:?}")),
            };
            match sys.rogue_smc(core, smc) {
                Ok(()) => "ok".into(),
                Err(e) => e.tag(),
            }
        }
        ("guest", "queue") => {
            let r = realm(sys, 0)?;
            let action: GuestAction = arg(1)?.parse()?;
            let rec = sys.record(r).map_err(|e| e.to_string())?.rec;
            match sys.queue_guest(rec, [action]) {
                Ok(()) => "queued".into(),
                Err(e) => e.tag(),
            }
        }
        ("app", "add") => match sys.app_add(core, realm(sys, 0)?, num(1)?, num(2)?) {
            Ok(s) => format!("sum={s}"),
            Err(e) => e.tag(),
        },
        ("app", "otp_register") => match sys.app_otp_register(core, realm(sys, 0)?, &bytes(1)?) {
            Ok(()) => "ok".into(),
            Err(e) => e.tag(),
        },
        ("app", "otp_request") => match sys.app_otp_request(core, realm(sys, 0)?) {
            Ok((code, counter)) => format!("otp={code:06} counter={counter}"),
            Err(e) => e.tag(),
        },
        ("app", "rpc") => {
            let r = realm(sys, 0)?;
            let raw = bytes(1)?;
            match sys.app_rpc_with(core, r, &raw, &mut |_| {}) {
                Ok(f) => format!(
                    "reply command={:#x} id={} payload={}",
                    f.command,
                    f.request_id,
                    hex::encode(&f.payload)
                ),
                Err(e) => e.tag(),
            }
        }
        ("app", "echo") => {
            let r = realm(sys, 0)?;
            let f = RpcFrame::new(crate::normal::rpc::CMD_ECHO, 1, bytes(1)?);
            match sys.app_rpc(core, r, &f) {
                Ok(f) => format!("reply payload={}", hex::encode(&f.payload)),
                Err(e) => e.tag(),
            }
        }
        (a, c) => return Err(format!("unknown call {a} {c}")),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::SystemConfig;

    fn loader(name: &str) -> Result<Manifest, String> {
        match name {
            "add" => Ok(Manifest::new(2, 1, "add")),
            _ => Err(format!("no manifest {name}")),
        }
    }

    #[test]
    fn parses_lines() {
        let s = parse_script("# c\n\nhyp@1 read(0x10, 4) => gpf\nguest queue(last, ex_access on 0x1,0x2)\n").unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].core, 1);
        assert_eq!(s[0].args, vec!["0x10", "4"]);
        assert_eq!(s[0].expect.as_deref(), Some("gpf"));
        assert_eq!(s[1].args, vec!["last", "ex_access on 0x1,0x2"]);
        assert_eq!(s[1].lineno, 4);
    }

    #[test]
    fn syntax_errors_name_the_line() {
        assert!(matches!(parse_script("hyp read 1"), Err(ScriptError::Syntax(1, _))));
        assert!(matches!(parse_script("\nhyp read(1"), Err(ScriptError::Syntax(2, _))));
        assert!(matches!(parse_script("hyp@x read(1)"), Err(ScriptError::Syntax(1, _))));
    }

    #[test]
    fn runs_an_add_session() {
        let mut sys = System::boot(&SystemConfig::default()).unwrap();
        let lines = parse_script(
            "owner allow(add)\nhyp create(add)\nhyp launch(last) => idle\napp@1 add(last, 2, 3) => sum=5\nhyp read(0x10000, 4) => gpf\n",
        )
        .unwrap();
        let out = run_script(&mut sys, &lines, &loader).unwrap();
        assert!(out.iter().all(|o| o.matched != Some(false)), "{out:?}");
        let logged = sys
            .machine()
            .trace()
            .events()
            .iter()
            .filter(|e| e.kind == EventKind::Op("script".into()))
            .count();
        assert_eq!(logged, 5);
    }

    #[test]
    fn unknown_calls_and_realms_are_setup_errors() {
        let mut sys = System::boot(&SystemConfig::default()).unwrap();
        let l = parse_script("hyp launch(last)").unwrap();
        assert!(matches!(
            run_script(&mut sys, &l, &loader),
            Err(ScriptError::Setup(1, _))
        ));
        let l = parse_script("hyp fly(1)").unwrap();
        assert!(run_script(&mut sys, &l, &loader).is_err());
    }
}
