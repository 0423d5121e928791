// SPDX-License-Identifier: Apache-2.0

//! Acceptance checks, one PASS/FAIL line each. Runs without the libtest
//! harness so the criteria execute one after another and their timings are
//! not inflated by unrelated tests.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use hmac::{Hmac, Mac};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sbsim_core::adversary::{explore, fuzz, run_all, FuzzConfig};
use sbsim_core::normal::script::GuestAction;
use sbsim_core::*;

type Check = fn() -> (bool, String);

fn scenarios_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn load(name: &str) -> Result<Manifest, String> {
    let text = std::fs::read_to_string(scenarios_dir().join(name)).map_err(|e| e.to_string())?;
    Manifest::parse(&text).map_err(|e| e.to_string())
}

fn secs(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}

fn attack_suite() -> (bool, String) {
    const REQUIRED: [&str; 10] = [
        "boomerang",
        "secure_reads_normal",
        "secure_reads_shared",
        "split_view",
        "toctou",
        "code_injection",
        "vq_pointer_escape",
        "forged_mmio",
        "disallowed_device",
        "device_tamper",
    ];
    let t = Instant::now();
    let verdicts = run_all(BugInjection::default());
    let took = t.elapsed();
    let names: BTreeSet<&str> = verdicts.iter().map(|v| v.name.as_str()).collect();
    let missing: Vec<&str> = REQUIRED.iter().copied().filter(|n| !names.contains(n)).collect();
    let failed: Vec<String> = verdicts.iter().filter(|v| !v.pass).map(|v| v.to_string()).collect();
    let pass = missing.is_empty() && failed.is_empty() && verdicts.len() >= 8 && took < Duration::from_secs(10);
    (
        pass,
        format!(
            "{}/{} scenarios matched, missing {missing:?}, failures {failed:?}, {} (limit 10s)",
            verdicts.len() - failed.len(),
            verdicts.len(),
            secs(took)
        ),
    )
}

fn state_machine() -> (bool, String) {
    use PasValue::*;
    let legal: BTreeSet<(PasValue, PasValue)> = [
        (Normal, NotAccessible),
        (Realm, Realm),
        (Normal, Realm),
        (NotAccessible, Realm),
    ]
    .into();
    let r = explore(4, 6);
    let a = r.alphabet as u128;
    let expected_sequences: u128 = (0..=6).map(|d| a.pow(d)).sum();
    let pass = r.reached == legal && r.problems.is_empty() && r.sequences == expected_sequences;
    (
        pass,
        format!(
            "4 granules, depth 6, {} symbols, {} sequences via {} states: reached {:?}, {} problems",
            r.alphabet,
            r.sequences,
            r.states,
            r.reached,
            r.problems.len()
        ),
    )
}

fn fuzz_invariants() -> (bool, String) {
    let mut pass = true;
    let mut parts = vec![];
    for seed in [1, 2, 3] {
        let t = Instant::now();
        let r = fuzz(FuzzConfig::new(seed, 10_000));
        let took = t.elapsed();
        let ok = r.violations_total == 0 && r.steps == 10_000 && took < Duration::from_secs(60);
        pass &= ok;
        parts.push(format!(
            "seed {seed}: {} violations in {} steps, {}",
            r.violations_total,
            r.steps,
            secs(took)
        ));
        for v in r.violations.iter().take(3) {
            parts.push(format!("  {v}"));
        }
    }
    (pass, parts.join("; ") + " (limit 60s each)")
}

fn mutation_sensitivity() -> (bool, String) {
    let mut pass = true;
    let mut parts = vec![];
    for name in BugInjection::NAMES {
        let bugs = BugInjection::single(name).expect("known mutation");
        let failed: Vec<String> = run_all(bugs).into_iter().filter(|v| !v.pass).map(|v| v.name).collect();
        let mut cfg = FuzzConfig::new(1, 10_000);
        cfg.bugs = bugs;
        let r = fuzz(cfg);
        let caught = !failed.is_empty() || r.violations_total > 0;
        pass &= caught;
        parts.push(format!(
            "{name}: attacks failed {failed:?}, fuzz violations {}",
            r.violations_total
        ));
    }
    (pass, parts.join("; "))
}

fn lifecycle() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(0x11fe);
    let mut sys = System::boot(&SystemConfig::default()).expect("boots");
    let scripts = ["idle", "add", "otp", "echo"];
    let (mut granules, mut dirty, mut rejected) = (0usize, 0usize, 0usize);
    let mut problems = vec![];
    for i in 0..100 {
        let shared = rng.gen_range(0..=3);
        let mut m = Manifest::new(rng.gen_range(1..=6), shared, scripts[rng.gen_range(0..scripts.len())]);
        m.payload_seed = rng.gen();
        if shared > 0 && rng.gen_bool(0.3) {
            m.devices = vec![DeviceKind::VirtioBlock];
            m.virtqueue_page = Some(0);
        }
        if rng.gen_bool(0.9) {
            sys.allow_manifest(&m);
        }
        let core = CoreId(rng.gen_range(0..2));
        let realm = match sys.hyp_create_sbs(core, &m) {
            Ok(r) => r,
            Err(e) => {
                problems.push(format!("manifest {i}: create failed: {e}"));
                continue;
            }
        };
        match sys.hyp_launch(core, realm) {
            Ok(ExitReason::BootRejected(_)) => rejected += 1,
            Ok(_) => {
                let rec = sys.record(realm).expect("record").rec;
                let secret: Vec<u8> = (0..32).map(|_| rng.gen_range(1..=255)).collect();
                let ipa = (m.memory_pages - 1) * 4096;
                sys.queue_guest(rec, [GuestAction::WriteMem { ipa, data: secret }])
                    .expect("queue");
                sys.rec_enter(core, rec, None).expect("enter");
                if m.entry_script == "add" && sys.record(realm).expect("record").frame_area() > 0 {
                    sys.app_add(core, realm, 1, 2).expect("add");
                }
            }
            Err(e) => problems.push(format!("manifest {i}: launch failed: {e}")),
        }
        let owned: Vec<GranuleId> = sys.record(realm).expect("record").granules().collect();
        dirty += owned
            .iter()
            .filter(|g| {
                sys.machine()
                    .granule(**g)
                    .expect("in range")
                    .bytes()
                    .iter()
                    .any(|b| *b != 0)
            })
            .count();
        if let Err(e) = sys.hyp_destroy(core, realm) {
            problems.push(format!("manifest {i}: destroy failed: {e}"));
            continue;
        }
        for g in owned {
            granules += 1;
            let pair = sys.machine().gpt_pair(g);
            if pair != Some((PasValue::Normal, PasValue::NotAccessible)) {
                problems.push(format!("manifest {i}: granule {g} left in {pair:?}"));
            }
            if sys
                .machine()
                .granule(g)
                .expect("in range")
                .bytes()
                .iter()
                .any(|b| *b != 0)
            {
                problems.push(format!("manifest {i}: granule {g} not zeroed"));
            }
            match sys.host_read(CoreId(1), g.pa(), GRANULE_SIZE) {
                Ok(v) if v.iter().all(|b| *b == 0) => {}
                other => problems.push(format!(
                    "manifest {i}: host read of {g} gave {:?}",
                    other.map(|v| v.len())
                )),
            }
        }
    }
    let pass = problems.is_empty() && dirty > 0;
    (
        pass,
        format!(
            "100 manifests ({rejected} rejected at boot), {granules} granules reclaimed, {dirty} held data before destroy, problems {:?}",
            &problems[..problems.len().min(3)]
        ),
    )
}

/// Counter-based one-time password with dynamic truncation, written from
/// the published algorithm.
fn hotp_oracle(secret: &[u8], counter: u64) -> u32 {
    let mut mac = Hmac::<sha1::Sha1>::new_from_slice(secret).expect("any key length");
    mac.update(&counter.to_be_bytes());
    let h = mac.finalize().into_bytes();
    let off = (h[19] & 0x0f) as usize;
    let bin =
        ((h[off] as u32 & 0x7f) << 24) | ((h[off + 1] as u32) << 16) | ((h[off + 2] as u32) << 8) | h[off + 3] as u32;
    bin % 1_000_000
}

/// Every app RPC must be preceded, since the previous one, by an
/// `rsi_ex_access` enable and then a disable.
fn bracketed_rpcs(events: &[Event]) -> (usize, usize) {
    let (mut rpcs, mut bracketed) = (0, 0);
    let (mut on, mut off) = (false, false);
    for e in events {
        match &e.kind {
            EventKind::Rsi(n) if n == "rsi_ex_access" && e.outcome == "ok" => {
                if e.args.starts_with("enable=true") {
                    on = true;
                    off = false;
                } else if on {
                    off = true;
                }
            }
            EventKind::Op(n) if n == "app_rpc" => {
                rpcs += 1;
                bracketed += (on && off) as usize;
                on = false;
                off = false;
            }
            _ => {}
        }
    }
    (rpcs, bracketed)
}

fn case_studies() -> (bool, String) {
    const RFC4226: [u32; 10] = [
        755224, 287082, 359152, 969429, 338314, 254676, 287922, 162583, 399871, 520489,
    ];
    let oracle_ok = (0..10).all(|c| hotp_oracle(b"12345678901234567890", c) == RFC4226[c as usize]);

    let mut sys = System::boot(&SystemConfig::default()).expect("boots");
    let mut rng = ChaCha8Rng::seed_from_u64(0xadd);
    let adder = load("add.manifest").expect("add manifest");
    sys.allow_manifest(&adder);
    let a = sys.hyp_create_sbs(CoreId(0), &adder).expect("create");
    sys.hyp_launch(CoreId(0), a).expect("launch");
    let mut sums_ok = 0;
    for _ in 0..100 {
        let (x, y) = (rng.gen_range(0..1u64 << 62), rng.gen_range(0..1u64 << 62));
        if sys.app_add(CoreId(rng.gen_range(0..2)), a, x, y).map(|s| s as u128) == Ok(x as u128 + y as u128) {
            sums_ok += 1;
        }
    }

    let otp = load("otp.manifest").expect("otp manifest");
    sys.allow_manifest(&otp);
    let o = sys.hyp_create_sbs(CoreId(0), &otp).expect("create");
    sys.hyp_launch(CoreId(0), o).expect("launch");
    let secret: Vec<u8> = (0..20).map(|_| rng.gen()).collect();
    let registered = sys.app_otp_register(CoreId(1), o, &secret).is_ok();
    let mut codes_ok = 0;
    for c in 0..20u64 {
        if sys.app_otp_request(CoreId(1), o) == Ok((hotp_oracle(&secret, c), c)) {
            codes_ok += 1;
        }
    }
    let (rpcs, bracketed) = bracketed_rpcs(sys.machine().trace().events());
    let pass = oracle_ok && sums_ok == 100 && registered && codes_ok == 20 && rpcs == 121 && bracketed == rpcs;
    (
        pass,
        format!(
            "oracle matches RFC 4226 vectors: {oracle_ok}; add {sums_ok}/100; otp registered {registered}, {codes_ok}/20 codes; {bracketed}/{rpcs} RPCs inside an ex_access on/off bracket"
        ),
    )
}

fn fuzz_trace(seed: u64) -> String {
    let mut s = String::new();
    let mut cfg = FuzzConfig::new(seed, 2_000);
    cfg.cores = 2;
    sbsim_core::adversary::Fuzzer::new(cfg).run(&mut |e| {
        s.push_str(&e.to_line());
        s.push('\n');
    });
    s
}

fn script_trace() -> Result<String, String> {
    let mut sys = System::boot(&SystemConfig::default()).map_err(|e| e.to_string())?;
    let text = std::fs::read_to_string(scenarios_dir().join("add_session.scenario")).map_err(|e| e.to_string())?;
    run_script(&mut sys, &parse_script(&text).map_err(|e| e.to_string())?, &load).map_err(|e| e.to_string())?;
    let m = load("otp.manifest")?;
    sys.allow_manifest(&m);
    let r = sys.hyp_create_sbs(CoreId(0), &m).map_err(|e| e.to_string())?;
    sys.hyp_launch(CoreId(0), r).map_err(|e| e.to_string())?;
    let text = std::fs::read_to_string(scenarios_dir().join("otp_request.scenario")).map_err(|e| e.to_string())?;
    run_script(&mut sys, &parse_script(&text).map_err(|e| e.to_string())?, &load).map_err(|e| e.to_string())?;
    Ok(sys.machine().trace().to_text())
}

fn write_twice(tag: &str, make: impl Fn() -> String) -> std::io::Result<(Vec<u8>, Vec<u8>)> {
    let dir = std::env::temp_dir();
    let mut out = vec![];
    for run in 0..2 {
        let p = dir.join(format!("sbsim-acceptance-{}-{tag}-{run}.trace", std::process::id()));
        std::fs::write(&p, make())?;
        out.push(std::fs::read(&p)?);
        std::fs::remove_file(&p)?;
    }
    let b = out.pop().expect("two runs");
    Ok((out.pop().expect("two runs"), b))
}

fn determinism() -> (bool, String) {
    let fz = write_twice("fuzz", || fuzz_trace(7));
    let sc = write_twice("script", || script_trace().unwrap_or_else(|e| format!("error {e}")));
    let (Ok((f1, f2)), Ok((s1, s2))) = (fz, sc) else {
        return (false, "could not write trace files".into());
    };
    let other_seed_differs = fuzz_trace(8).into_bytes() != f1;
    let script_ok = !s1.starts_with(b"error");
    let pass = f1 == f2 && s1 == s2 && other_seed_differs && script_ok && !f1.is_empty();
    (
        pass,
        format!(
            "fuzz seed 7: {} bytes, identical {}; scenario files: {} bytes, identical {}; seed 8 differs {other_seed_differs}",
            f1.len(),
            f1 == f2,
            s1.len(),
            s1 == s2
        ),
    )
}

fn main() -> ExitCode {
    let checks: [(&str, Check); 7] = [
        ("attack suite", attack_suite),
        ("granule state machine", state_machine),
        ("fuzz invariants", fuzz_invariants),
        ("mutation sensitivity", mutation_sensitivity),
        ("lifecycle fidelity", lifecycle),
        ("case-study scenarios", case_studies),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let t = Instant::now();
        let (pass, detail) = check();
        failed += !pass as usize;
        println!(
            "{} criterion {}: {name}: {detail} [{}]",
            if pass { "PASS" } else { "FAIL" },
            i + 1,
            secs(t.elapsed())
        );
    }
    println!(
        "acceptance: {} of {} criteria passed",
        checks.len() - failed,
        checks.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
