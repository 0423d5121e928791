// SPDX-License-Identifier: Apache-2.0

//! `sbsim`: drive the model from the shell.

use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sbsim_core::adversary::{self, FuzzConfig, Fuzzer, Oracle};
use sbsim_core::replay::{compare, replay};
use sbsim_core::trace::{lines, parse_trace};
use sbsim_core::*;

const LAYOUT_ENV: &str = "SBSIM_LAYOUT";

#[derive(Parser, Debug)]
#[command(name = "sbsim", version, about = "Sandboxed-service isolation model driver")]
struct Cli {
    /// Machine snapshot carried between commands.
    #[arg(long, global = true, default_value = "sbsim.state")]
    state: PathBuf,
    /// Event trace, one tab-separated event per line.
    #[arg(long, global = true, default_value = "sbsim.trace")]
    trace: PathBuf,
    /// Counter totals for the run.
    #[arg(long, global = true, default_value = "sbsim.summary")]
    summary: PathBuf,
    /// Machine layout (TOML). Falls back to $SBSIM_LAYOUT, then the built-in layout.
    #[arg(long, global = true)]
    layout: Option<PathBuf>,
    /// Cores on a freshly booted machine.
    #[arg(long, global = true, default_value_t = 2)]
    cores: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Boot a fresh machine and start a new trace.
    Boot,
    /// Approve, create and boot a sandbox from a manifest.
    Launch {
        manifest: PathBuf,
        /// Do not add the manifest's measurement to the allow list.
        #[arg(long)]
        no_approve: bool,
        #[arg(long, default_value_t = 0)]
        core: usize,
    },
    /// Run an `actor call(args)` scenario file against the saved machine.
    Scenario { file: PathBuf },
    /// Run attack scenarios, each on a fresh machine.
    Attack {
        /// Scenario name or `all`.
        name: String,
        /// Seeded bug to inject.
        #[arg(long)]
        bug: Option<String>,
    },
    /// Randomized interface fuzzing with invariant checks after every step.
    Fuzz {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        steps: u64,
        #[arg(long)]
        bug: Option<String>,
        /// Where to write the full report.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Print the saved machine state.
    DumpState,
    /// Recount the trace, replay it, and compare against the saved state.
    Report,
}

enum Failure {
    Usage(String),
    Violation(String),
}

type Res = Result<(), Failure>;

fn usage<E: std::fmt::Display>(ctx: impl std::fmt::Display) -> impl FnOnce(E) -> Failure {
    move |e| Failure::Usage(format!("{ctx}: {e}"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Violation(m)) => {
            eprintln!("sbsim: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(m)) => {
            eprintln!("sbsim: {m}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: &Cli) -> Res {
    match &cli.cmd {
        Cmd::Boot => boot(cli),
        Cmd::Launch {
            manifest,
            no_approve,
            core,
        } => launch(cli, manifest, *no_approve, *core),
        Cmd::Scenario { file } => scenario(cli, file),
        Cmd::Attack { name, bug } => attack(cli, name, bug.as_deref()),
        Cmd::Fuzz {
            seed,
            steps,
            bug,
            report,
        } => fuzz(cli, *seed, *steps, bug.as_deref(), report.as_deref()),
        Cmd::DumpState => dump_state(cli),
        Cmd::Report => report(cli),
    }
}

fn layout(cli: &Cli) -> Result<MachineLayout, Failure> {
    let path = cli
        .layout
        .clone()
        .or_else(|| std::env::var_os(LAYOUT_ENV).map(PathBuf::from));
    let Some(path) = path else {
        return Ok(MachineLayout::default());
    };
    let text = fs::read_to_string(&path).map_err(usage(path.display()))?;
    MachineLayout::from_toml(&text).map_err(usage(path.display()))
}

fn bugs(name: Option<&str>) -> Result<BugInjection, Failure> {
    match name {
        None => Ok(BugInjection::default()),
        Some(n) => BugInjection::single(n)
            .ok_or_else(|| Failure::Usage(format!("unknown bug {n:?}; known: {}", BugInjection::NAMES.join(", ")))),
    }
}

fn fresh(cli: &Cli) -> Result<System, Failure> {
    if cli.cores == 0 {
        return Err(Failure::Usage("--cores must be at least 1".into()));
    }
    System::boot(&SystemConfig {
        layout: layout(cli)?,
        cores: cli.cores,
        ..SystemConfig::default()
    })
    .map_err(usage("boot"))
}

fn load_state(cli: &Cli) -> Result<System, Failure> {
    let bytes = fs::read(&cli.state).map_err(usage(format!("{} (run `sbsim boot` first)", cli.state.display())))?;
    snapshot::decode(&bytes).map_err(usage(cli.state.display()))
}

fn save_state(cli: &Cli, sys: &System) -> Res {
    fs::write(&cli.state, snapshot::encode(sys)).map_err(usage(cli.state.display()))
}

fn write_trace(path: &Path, events: &[Event], append: bool) -> Res {
    let f = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(usage(path.display()))?;
    let mut w = BufWriter::new(f);
    w.write_all(lines(events).as_bytes())
        .and_then(|_| w.flush())
        .map_err(usage(path.display()))
}

fn write_summary(cli: &Cli, c: &CounterReport) -> Res {
    fs::write(&cli.summary, c.to_string()).map_err(usage(cli.summary.display()))
}

/// Runs `f` on the saved machine, checks the invariants over the events it
/// produced, appends them to the trace and saves the machine.
fn stateful(cli: &Cli, f: impl FnOnce(&mut System) -> Res) -> Res {
    let mut sys = load_state(cli)?;
    let mut oracle = Oracle::new(&sys);
    let result = f(&mut sys);
    let events = sys.pf.machine.trace_mut().take_events();
    let step = events.last().map_or(0, |e| e.step);
    let violations = oracle.check(&sys, &events, step, "cli");
    write_trace(&cli.trace, &events, true)?;
    write_summary(cli, &sys.machine().trace().counters())?;
    save_state(cli, &sys)?;
    for v in &violations {
        println!("violation\t{v}");
    }
    if !violations.is_empty() {
        return Err(Failure::Violation(format!("{} invariant violations", violations.len())));
    }
    result
}

fn boot(cli: &Cli) -> Res {
    let mut sys = fresh(cli)?;
    let events = sys.pf.machine.trace_mut().take_events();
    write_trace(&cli.trace, &events, false)?;
    write_summary(cli, &sys.machine().trace().counters())?;
    save_state(cli, &sys)?;
    println!(
        "booted {} granules on {} cores",
        sys.machine().num_granules(),
        sys.num_cores()
    );
    Ok(())
}

fn read_manifest(path: &Path) -> Result<Manifest, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Manifest::parse(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn launch(cli: &Cli, path: &Path, no_approve: bool, core: usize) -> Res {
    let manifest = read_manifest(path).map_err(Failure::Usage)?;
    stateful(cli, |sys| {
        if core >= sys.num_cores() {
            return Err(Failure::Usage(format!("no core {core}")));
        }
        if !no_approve {
            sys.allow_manifest(&manifest);
        }
        let realm = sys
            .hyp_create_sbs(CoreId(core), &manifest)
            .map_err(|e| Failure::Violation(format!("create failed: {}", e.tag())))?;
        let exit = sys
            .hyp_launch(CoreId(core), realm)
            .map_err(|e| Failure::Violation(format!("launch failed: {}", e.tag())))?;
        println!("realm={realm}\texit={exit}");
        match exit {
            ExitReason::BootRejected(why) => Err(Failure::Violation(format!("boot rejected: {why}"))),
            _ => Ok(()),
        }
    })
}

fn scenario(cli: &Cli, file: &Path) -> Res {
    let text = fs::read_to_string(file).map_err(usage(file.display()))?;
    let lines = parse_script(&text).map_err(usage(file.display()))?;
    let dir = file.parent().unwrap_or(Path::new(".")).to_path_buf();
    let load = move |name: &str| read_manifest(&dir.join(name));
    stateful(cli, |sys| {
        let out = run_script(sys, &lines, &load).map_err(usage(file.display()))?;
        let mut mismatches = 0;
        for o in &out {
            let mark = match o.matched {
                Some(true) => "ok",
                Some(false) => {
                    mismatches += 1;
                    "MISMATCH"
                }
                None => "-",
            };
            println!("{}\t{}\t{}\t{mark}", o.line.lineno, o.line, o.outcome);
        }
        if mismatches > 0 {
            return Err(Failure::Violation(format!("{mismatches} expectations not met")));
        }
        Ok(())
    })
}

fn attack(cli: &Cli, name: &str, bug: Option<&str>) -> Res {
    let bugs = bugs(bug)?;
    let catalog = adversary::catalog();
    let chosen: Vec<_> = if name == "all" {
        catalog
    } else {
        let s = adversary::scenarios::find(name).ok_or_else(|| {
            let names: Vec<&str> = catalog.iter().map(|s| s.name).collect();
            Failure::Usage(format!("unknown attack {name:?}; known: all, {}", names.join(", ")))
        })?;
        vec![s]
    };
    let mut events = vec![];
    let mut total = CounterReport::default();
    let mut failed = 0;
    let mut table = String::from("scenario\tcontext_switches\thyp_vm_calls\tsmcs\trmis\trsis\tgpfs\n");
    for s in &chosen {
        let v = adversary::run_scenario(s, bugs);
        let c = CounterReport::from_events(&v.events);
        total.add(&c);
        let _ = writeln!(
            table,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            v.name, c.context_switches, c.hyp_vm_calls, c.smcs, c.rmis, c.rsis, c.gpfs
        );
        println!("{v}");
        for x in &v.violations {
            println!("  violation\t{x}");
        }
        failed += !v.pass as usize;
        events.extend(v.events);
    }
    print!("{table}");
    write_trace(&cli.trace, &events, false)?;
    write_summary(cli, &total)?;
    if failed > 0 {
        return Err(Failure::Violation(format!(
            "{failed} of {} attacks not stopped as expected",
            chosen.len()
        )));
    }
    Ok(())
}

fn fuzz(cli: &Cli, seed: u64, steps: u64, bug: Option<&str>, report: Option<&Path>) -> Res {
    let mut cfg = FuzzConfig::new(seed, steps);
    cfg.bugs = bugs(bug)?;
    if cli.cores == 0 {
        return Err(Failure::Usage("--cores must be at least 1".into()));
    }
    cfg.cores = cli.cores;
    if cli.layout.is_some() || std::env::var_os(LAYOUT_ENV).is_some() {
        cfg.layout = layout(cli)?;
    }
    let f = File::create(&cli.trace).map_err(usage(cli.trace.display()))?;
    let mut w = BufWriter::new(f);
    let mut io_err = None;
    let r = Fuzzer::new(cfg).run(&mut |e| {
        if io_err.is_none() {
            if let Err(err) = writeln!(w, "{}", e.to_line()) {
                io_err = Some(err);
            }
        }
    });
    if let Some(e) = io_err {
        return Err(Failure::Usage(format!("{}: {e}", cli.trace.display())));
    }
    w.flush().map_err(usage(cli.trace.display()))?;
    write_summary(cli, &r.counters)?;
    if let Some(p) = report {
        fs::write(p, r.to_text()).map_err(usage(p.display()))?;
    }
    for v in r.violations.iter().take(20) {
        println!("violation\t{v}");
    }
    println!(
        "seed={} steps={} violations={} pairs={} trace_sha256={}",
        r.seed,
        r.steps,
        r.violations_total,
        r.reached_pairs.len(),
        r.trace_digest
    );
    if r.violations_total > 0 {
        return Err(Failure::Violation(format!(
            "{} invariant violations",
            r.violations_total
        )));
    }
    Ok(())
}

fn dump_state(cli: &Cli) -> Res {
    let sys = load_state(cli)?;
    let m = sys.machine();
    println!("granules\t{}", m.num_granules());
    println!("cores\t{}", sys.num_cores());
    for c in m.cores() {
        println!("core\t{}\t{}\ttlb={}", c.id().0, c.sec_state(), c.tlb().len());
    }
    let mut start = 0;
    let n = m.num_granules();
    for g in 1..=n {
        let pair = |i: u64| m.gpt_pair(GranuleId(i));
        if g == n || pair(g) != pair(start) {
            let (a, b) = pair(start).expect("in range");
            println!("gpt\t{start}-{}\t{a}\t{b}", g - 1);
            start = g;
        }
    }
    for r in sys.rmm.realms() {
        let region = r
            .shared_region
            .map_or("-".to_string(), |s| format!("{:#x}+{}", s.base, s.pages));
        println!(
            "realm\t{}\t{:?}\tbooted={}\tshared={region}\tmeasurement={}",
            r.id,
            r.state,
            r.booted,
            hex::encode(r.measurement.value())
        );
        for (ipa, e) in &r.s2 {
            println!(
                "s2\t{}\t{ipa:#x}\t{}\t{}\t{}",
                r.id,
                e.granule.0,
                e.perms,
                if e.unprotected { "unprotected" } else { "protected" }
            );
        }
    }
    let idx = sys.rmm.index();
    println!(
        "index\tdelegated={}\towned={}\tshared={}\texclusive={}\treleased={}",
        idx.delegated.len(),
        idx.owner.len(),
        idx.shared.len(),
        idx.exclusive.len(),
        idx.released.len()
    );
    print!("{}", m.trace().counters());
    println!("next_step\t{}", m.trace().next_step());
    Ok(())
}

fn report(cli: &Cli) -> Res {
    let sys = load_state(cli)?;
    let text = fs::read_to_string(&cli.trace).map_err(usage(cli.trace.display()))?;
    let events = parse_trace(&text).map_err(usage(cli.trace.display()))?;
    let rep = replay(&events).map_err(usage(cli.trace.display()))?;
    print!("{}", rep.counters);
    let diffs = compare(&rep, &sys);
    for d in &diffs {
        println!("mismatch\t{d}");
    }
    if !diffs.is_empty() {
        return Err(Failure::Violation(format!(
            "{} differences between trace and state",
            diffs.len()
        )));
    }
    println!("replay\tok\t{} events", events.len());
    Ok(())
}
