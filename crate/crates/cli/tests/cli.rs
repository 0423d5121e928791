// SPDX-License-Identifier: Apache-2.0

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sbsim_core::trace::parse_trace;
use sbsim_core::CounterReport;

fn scenarios() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

struct Dir(PathBuf);

impl Dir {
    fn new(tag: &str) -> Dir {
        let p = std::env::temp_dir().join(format!("sbsim-cli-{tag}-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&p);
        std::fs::create_dir_all(&p).unwrap();
        Dir(p)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_sbsim"))
            .current_dir(&self.0)
            .env_remove("SBSIM_LAYOUT")
            .args(args)
            .output()
            .unwrap()
    }

    fn summary(&self) -> CounterReport {
        CounterReport::parse(&std::fs::read_to_string(self.0.join("sbsim.summary")).unwrap()).unwrap()
    }
}

impl Drop for Dir {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.0);
    }
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn attack_all_exits_zero() {
    let d = Dir::new("attack");
    let o = d.run(&["attack", "all"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(!stdout(&o).contains("FAIL"));
    let trace = std::fs::read_to_string(d.0.join("sbsim.trace")).unwrap();
    let events = parse_trace(&trace).unwrap();
    assert_eq!(d.summary(), CounterReport::from_events(&events));
}

#[test]
fn injected_bug_makes_attack_fail() {
    let d = Dir::new("bug");
    let o = d.run(&["attack", "rogue_delegate", "--bug", "skip_log_check"]);
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).contains("FAIL\trogue_delegate"));
}

#[test]
fn zero_step_fuzz_has_empty_counters() {
    let d = Dir::new("fuzz0");
    let o = d.run(&["fuzz", "--seed", "1", "--steps", "0"]);
    assert_eq!(code(&o), 0);
    assert_eq!(d.summary(), CounterReport::default());
}

#[test]
fn fuzz_writes_report_and_trace() {
    let d = Dir::new("fuzz");
    let o = d.run(&["fuzz", "--seed", "3", "--steps", "300", "--report", "r.txt"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let trace = std::fs::read_to_string(d.0.join("sbsim.trace")).unwrap();
    let events = parse_trace(&trace).unwrap();
    assert_eq!(d.summary(), CounterReport::from_events(&events));
    assert!(std::fs::read_to_string(d.0.join("r.txt")).unwrap().contains("seed"));
}

#[test]
fn launch_then_scenario_then_report() {
    let d = Dir::new("otp");
    let s = scenarios();
    assert_eq!(code(&d.run(&["boot"])), 0);
    let o = d.run(&["launch", s.join("otp.manifest").to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let o = d.run(&["scenario", s.join("otp_request.scenario").to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).contains("otp=755224 counter=0"));
    assert!(d.summary().rsis >= 2);
    let o = d.run(&["report"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).contains("replay\tok"));
    let o = d.run(&["dump-state"]);
    assert!(stdout(&o).contains("realm\t1\tActive"));
}

#[test]
fn report_catches_a_doctored_trace() {
    let d = Dir::new("doctor");
    assert_eq!(code(&d.run(&["boot"])), 0);
    let o = d.run(&["launch", scenarios().join("add.manifest").to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let path = d.0.join("sbsim.trace");
    let trace = std::fs::read_to_string(&path).unwrap();
    let kept: Vec<&str> = trace.lines().filter(|l| !l.contains("smc_2gpt_ns_share")).collect();
    std::fs::write(&path, kept.join("\n") + "\n").unwrap();
    assert_eq!(code(&d.run(&["report"])), 1);
}

#[test]
fn unapproved_manifest_is_rejected() {
    let d = Dir::new("noapprove");
    d.run(&["boot"]);
    let o = d.run(&[
        "launch",
        "--no-approve",
        scenarios().join("add.manifest").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 1);
}

#[test]
fn usage_errors_exit_two() {
    let d = Dir::new("usage");
    assert_eq!(code(&d.run(&[])), 2);
    assert_eq!(code(&d.run(&["attack", "nope"])), 2);
    assert_eq!(
        code(&d.run(&["fuzz", "--seed", "1", "--steps", "1", "--bug", "nope"])),
        2
    );
    assert_eq!(code(&d.run(&["dump-state"])), 2);
    assert_eq!(code(&d.run(&["--layout", "missing.toml", "boot"])), 2);
}
