use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use edgeplane::agent::AgentEvent;
use edgeplane::experiments::{self, nibgen, ExperimentKind, ExperimentSpec};
use edgeplane::intent::{parse_policy, render};
use edgeplane::model::NodeRegistration;
use edgeplane::simnet::scenario::Scenario;
use edgeplane::world::Node;

#[derive(Parser)]
#[command(name = "edgeplane", version, about = "Intent-driven pull-based control plane for end-nodes")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Parse and validate a policy file.
    Check { policy: PathBuf },
    /// Render mapping records for registrations (JSON array or JSON lines).
    Render { policy: PathBuf, registrations: PathBuf },
    /// Run a scenario and print its metrics.
    Sim { scenario: PathBuf },
    /// Run one of the measurement experiments and write its CDF.
    Exp(ExpArgs),
    /// Print a synthetic NIB as JSON lines of registrations.
    GenNib {
        #[arg(long, default_value_t = 400_000)]
        size: usize,
        #[arg(long, default_value_t = 400)]
        groups: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Also write the matching policy here.
        #[arg(long)]
        policy_out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Retrieval,
    Update,
    Bootstrap,
}

#[derive(clap::Args)]
struct ExpArgs {
    #[arg(value_enum)]
    kind: Kind,
    #[arg(long)]
    nib_size: Option<usize>,
    #[arg(long)]
    groups: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// CDF output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the scenario jitter (ms).
    #[arg(long)]
    jitter: Option<f64>,
    /// Scenario file; the bundled AWS deployment when absent.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Run 100K, 200K and 400K NIBs side by side; `--out` becomes a prefix.
    #[arg(long)]
    parallel: bool,
}

/// Input the user can fix; reported with exit code 2.
#[derive(Debug)]
struct Invalid(String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn invalid(e: impl std::fmt::Display) -> anyhow::Error {
    Invalid(e.to_string()).into()
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Invalid>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_scenario(path: Option<&Path>) -> Result<Scenario> {
    let sc = match path {
        Some(p) => Scenario::from_json(&read(p)?).map_err(invalid)?,
        None => Scenario::poc_aws(),
    };
    sc.validate().map_err(invalid)?;
    Ok(sc)
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Check { policy } => {
            let p = parse_policy(&read(&policy)?).map_err(invalid)?;
            println!("ok: {} groups", p.groups().len());
        }
        Cmd::Render { policy, registrations } => {
            let p = parse_policy(&read(&policy)?).map_err(invalid)?;
            let regs = parse_regs(&read(&registrations)?)?;
            let out = render(&p, &regs);
            let mut stdout = std::io::stdout().lock();
            for r in out.records.values() {
                writeln!(stdout, "{}", serde_json::to_string(r)?)?;
            }
            for e in &out.errors {
                eprintln!("warning: {e}");
            }
        }
        Cmd::Sim { scenario } => {
            let sc = load_scenario(Some(&scenario))?;
            let policy = match &sc.policy_file {
                Some(f) => read(&scenario.parent().unwrap_or(Path::new(".")).join(f))?,
                None => String::new(),
            };
            let w = experiments::run_scenario(&sc, &policy).map_err(invalid)?;
            print!("{}", w.metrics.to_text());
            for n in &w.nodes {
                if let Node::Agent(a) = n {
                    let delivered = a.log().iter().filter(|e| matches!(e, AgentEvent::Delivered { .. })).count();
                    let eid = a.eid().map(|e| e.to_string()).unwrap_or_else(|| "-".into());
                    let st = a.stats;
                    println!(
                        "# agent {} eid {eid} requests {} replies {} delivered {delivered} dropped {} unresolved {}",
                        a.cfg.name,
                        st.requests,
                        st.replies,
                        st.dropped,
                        st.unresolved
                    );
                }
            }
        }
        Cmd::Exp(args) => exp(args)?,
        Cmd::GenNib {
            size,
            groups,
            seed,
            policy_out,
        } => {
            if groups == 0 || size < groups || size.div_ceil(groups) > 1022 {
                return Err(invalid("need 1..=1022 members per group"));
            }
            let g = nibgen::generate_nib(size, groups, seed, 6);
            if let Some(p) = policy_out {
                std::fs::write(&p, &g.policy_text)?;
            }
            let mut stdout = std::io::BufWriter::new(std::io::stdout().lock());
            for r in &g.regs {
                writeln!(stdout, "{}", serde_json::to_string(r)?)?;
            }
        }
    }
    Ok(())
}

fn parse_regs(text: &str) -> Result<Vec<NodeRegistration>> {
    if text.trim_start().starts_with('[') {
        return serde_json::from_str(text).map_err(invalid);
    }
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| invalid(format!("line {}: {e}", i + 1))))
        .collect()
}

fn exp(args: ExpArgs) -> Result<()> {
    let sc = load_scenario(args.scenario.as_deref())?;
    let kind = match args.kind {
        Kind::Retrieval => ExperimentKind::Retrieval,
        Kind::Update => ExperimentKind::Update,
        Kind::Bootstrap => ExperimentKind::Bootstrap,
    };
    let mut spec = ExperimentSpec::from_scenario(kind, &sc);
    spec.nib_size = args.nib_size.unwrap_or(spec.nib_size);
    spec.groups = args.groups.unwrap_or(spec.groups);
    spec.iterations = args.iters.unwrap_or(spec.iterations);
    spec.seed = args.seed.unwrap_or(spec.seed);
    spec.jitter_ms = args.jitter;
    if !args.parallel {
        let r = experiments::run(&sc, &spec).map_err(invalid)?;
        eprintln!("{} samples, median {:.3} ms", r.series.len(), r.series.median());
        return emit(&r.series, args.out.as_deref());
    }
    let sizes = [100_000, 200_000, 400_000];
    let results: Vec<_> = std::thread::scope(|s| {
        let handles: Vec<_> = sizes
            .iter()
            .map(|&n| {
                let spec = ExperimentSpec {
                    nib_size: n,
                    groups: n / 1_000,
                    ..spec.clone()
                };
                let sc = &sc;
                s.spawn(move || experiments::run(sc, &spec).map(|r| r.series))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("experiment thread")).collect()
    });
    for (n, r) in sizes.iter().zip(results) {
        let series = r.map_err(invalid)?;
        eprintln!("nib {n}: {} samples, median {:.3} ms", series.len(), series.median());
        let out = args.out.as_ref().map(|p| PathBuf::from(format!("{}.{n}", p.display())));
        emit(&series, out.as_deref())?;
    }
    Ok(())
}

fn emit(series: &experiments::CdfSeries, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => experiments::emit_cdf(series, p).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{}", series.to_text());
            Ok(())
        }
    }
}
