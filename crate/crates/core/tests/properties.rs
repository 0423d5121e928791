// SPDX-License-Identifier: Apache-2.0

use proptest::prelude::*;
use sbsim_core::adversary::Oracle;
use sbsim_core::replay::{compare, replay};
use sbsim_core::{parse_script, run_script, snapshot, BugInjection, Manifest, System, SystemConfig, GRANULE_SIZE};

fn load(name: &str) -> Result<Manifest, String> {
    let (p, s) = name.split_once('_').ok_or("bad name")?;
    let p: u64 = p.trim_start_matches('m').parse().map_err(|_| "bad pages")?;
    Ok(Manifest::new(p, s.parse().map_err(|_| "bad shared")?, "add"))
}

fn line() -> impl Strategy<Value = String> {
    let g = 0u64..160;
    let core = 0usize..2;
    prop_oneof![
        (1u64..4, 1u64..3).prop_map(|(p, s)| format!("owner allow(m{}_{s})", p + s)),
        (core.clone(), 1u64..4, 1u64..3).prop_map(|(c, p, s)| format!("hyp@{c} create(m{}_{s})", p + s)),
        core.clone().prop_map(|c| format!("hyp@{c} launch(1)")),
        core.clone().prop_map(|c| format!("hyp@{c} destroy(1)")),
        (core.clone(), g.clone()).prop_map(|(c, g)| format!("hyp@{c} delegate({g})")),
        (core.clone(), g.clone()).prop_map(|(c, g)| format!("hyp@{c} undelegate({g})")),
        (core.clone(), g.clone()).prop_map(|(c, g)| format!("hyp@{c} read({:#x}, 8)", g * GRANULE_SIZE as u64)),
        (core.clone(), g.clone()).prop_map(|(c, g)| format!("hyp@{c} write({:#x}, 41414141)", g * GRANULE_SIZE as u64)),
        (core.clone(), g.clone()).prop_map(|(c, g)| format!("secure@{c} read({:#x}, 8)", g * GRANULE_SIZE as u64)),
        (core.clone(), g.clone()).prop_map(|(c, g)| format!("rmm@{c} rogue_delegate({g})")),
        (core.clone(), g.clone(), 1u32..4).prop_map(|(c, g, r)| format!("rmm@{c} rogue_share({g}, {r})")),
        (core.clone(), 0u64..100, 0u64..100).prop_map(|(c, a, b)| format!("app@{c} add(1, {a}, {b})")),
        (core, 1u32..300).prop_map(|(c, v)| format!("hyp@{c} irq(1, {v})")),
    ]
}

fn script() -> impl Strategy<Value = String> {
    prop::collection::vec(line(), 1..40).prop_map(|v| {
        format!(
            "owner allow(m3_1)\nhyp create(m3_1)\nhyp launch(last)\n{}",
            v.join("\n")
        )
    })
}

#[test]
fn script_harness_sees_an_injected_bug() {
    let cfg = SystemConfig {
        bugs: BugInjection::single("skip_log_check").unwrap(),
        ..SystemConfig::default()
    };
    let mut sys = System::boot(&cfg).unwrap();
    let mut oracle = Oracle::new(&sys);
    let lines = parse_script("rmm rogue_delegate(100)").unwrap();
    run_script(&mut sys, &lines, &load).unwrap();
    let events = sys.machine().trace().events().to_vec();
    assert!(!oracle.check(&sys, &events, 0, "script").is_empty());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_scripts_keep_invariants_and_replay(text in script()) {
        let lines = parse_script(&text).unwrap();
        let mut sys = System::boot(&SystemConfig::default()).unwrap();
        let mut oracle = Oracle::new(&sys);
        let out = run_script(&mut sys, &lines, &load).unwrap();
        prop_assert_eq!(out.len(), lines.len());
        let events = sys.machine().trace().events().to_vec();
        let step = events.last().map_or(0, |e| e.step);
        let v = oracle.check(&sys, &events, step, "script");
        prop_assert!(v.is_empty(), "{v:?}");
        let rep = replay(&events).unwrap();
        prop_assert_eq!(compare(&rep, &sys), Vec::<String>::new());
    }

    #[test]
    fn snapshot_round_trip_is_exact(text in script(), more in script()) {
        let lines = parse_script(&text).unwrap();
        let mut sys = System::boot(&SystemConfig::default()).unwrap();
        run_script(&mut sys, &lines, &load).unwrap();
        sys.pf.machine.trace_mut().take_events();
        let bytes = snapshot::encode(&sys);
        let mut back = snapshot::decode(&bytes).unwrap();
        prop_assert_eq!(snapshot::encode(&back), bytes);

        let more = parse_script(&more).unwrap();
        let a = run_script(&mut sys, &more, &load).map(|o| o.into_iter().map(|s| s.outcome).collect::<Vec<_>>());
        let b = run_script(&mut back, &more, &load).map(|o| o.into_iter().map(|s| s.outcome).collect::<Vec<_>>());
        prop_assert_eq!(a, b);
        prop_assert_eq!(sys.pf.machine.trace_mut().take_events(), back.pf.machine.trace_mut().take_events());
    }

    #[test]
    fn script_lines_print_back_to_themselves(text in script()) {
        let lines = parse_script(&text).unwrap();
        let printed: Vec<String> = lines.iter().map(|l| l.to_string()).collect();
        let again = parse_script(&printed.join("\n")).unwrap();
        prop_assert_eq!(lines.len(), again.len());
        for (a, b) in lines.iter().zip(&again) {
            prop_assert_eq!((&a.actor, a.core, &a.call, &a.args), (&b.actor, b.core, &b.call, &b.args));
        }
    }

    #[test]
    fn damaged_snapshots_never_panic(flip in 0usize..4096, byte in any::<u8>(), cut in 0usize..4096) {
        let sys = System::boot(&SystemConfig::default()).unwrap();
        let mut bytes = snapshot::encode(&sys);
        let i = flip % bytes.len();
        bytes[i] ^= byte | 1;
        let _ = snapshot::decode(&bytes);
        bytes.truncate(cut % bytes.len());
        prop_assert!(snapshot::decode(&bytes).is_err());
    }
}
