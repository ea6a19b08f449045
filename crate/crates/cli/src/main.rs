use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use mgstab::ddesim::{self, Disturbance, LatencyModel, Ordering, SimConfig};
use mgstab::explorer;
use mgstab::model::{validate, warnings, Assembly, MicrogridScenario};
use mgstab::nyquist::{self, latency_threshold_with};
use mgstab::report::RunManifest;
use mgstab::scenario::{apply_overrides, parse_scenario};
use mgstab::smallsignal::compare_assemblies;
use mgstab::{solve_equilibrium, Error};

#[derive(Parser)]
#[command(name = "mgstab", version, about = "Latency stability analysis for consensus-controlled microgrids")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Nyquist analysis: margins, verdict and characteristic loci.
    Analyze(Common),
    /// Nonlinear time-domain simulation from a perturbed equilibrium.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sim: SimArgs,
    },
    /// Uniform latency at which the verdict flips from stable.
    Threshold {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0.05)]
        lo: f64,
        #[arg(long, default_value_t = 3.0)]
        hi: f64,
        #[arg(long, default_value_t = 0.01)]
        tol: f64,
    },
    /// Margins over a range of one parameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Parameter path, e.g. load.1.q or dg.*.inertia.
        #[arg(long)]
        param: String,
        /// Explicit comma-separated values (SI units).
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, conflicts_with_all = ["from", "to"])]
        values: Vec<f64>,
        #[arg(long, allow_hyphen_values = true, requires = "to")]
        from: Option<f64>,
        #[arg(long, allow_hyphen_values = true, requires = "from")]
        to: Option<f64>,
        #[arg(long, default_value_t = 10)]
        points: usize,
    },
    /// Verdict grid over inertia and damping.
    Surface {
        #[command(flatten)]
        common: Common,
        /// Inertia values, kg·m².
        #[arg(long, value_delimiter = ',', required = true)]
        inertia: Vec<f64>,
        /// Damping D_p values, N·m.
        #[arg(long, value_delimiter = ',', required = true)]
        d_p: Vec<f64>,
    },
    /// Communication topology maximizing the gain margin.
    TopoOpt {
        #[command(flatten)]
        common: Common,
        /// Greedy edge removal instead of exhaustive search.
        #[arg(long)]
        greedy: bool,
    },
    /// Check a scenario and list violations.
    Validate {
        scenario: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    scenario: PathBuf,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Uniform latency on every edge, s.
    #[arg(long)]
    latency: Option<f64>,
    /// Let --latency replace per-edge latencies given in the scenario.
    #[arg(long)]
    r#override: bool,
    /// Parameter assignment `path=value` (SI units); repeatable.
    #[arg(long = "set", value_parser = parse_assignment)]
    set: Vec<(String, f64)>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long)]
    jobs: Option<usize>,
    /// Omit timestamps so reruns are byte-identical.
    #[arg(long)]
    deterministic: bool,
    /// Enable the communication stabilizer.
    #[arg(long)]
    stabilizer: bool,
    /// Stabilizer numerator [s², s, 1].
    #[arg(long, value_delimiter = ',')]
    stab_num: Option<Vec<f64>>,
    /// Stabilizer denominator [s², s, 1].
    #[arg(long, value_delimiter = ',')]
    stab_den: Option<Vec<f64>>,
    #[arg(long, value_enum)]
    assembly: Option<AssemblyArg>,
    /// Upper sweep frequency, rad/s.
    #[arg(long)]
    fmax: Option<f64>,
    /// Sweep points per decade.
    #[arg(long)]
    ppd: Option<usize>,
}

#[derive(Args)]
struct SimArgs {
    /// Duration, s (default from the scenario).
    #[arg(long)]
    duration: Option<f64>,
    /// Uniform random latency bounds `min,max`, s.
    #[arg(long, value_delimiter = ',')]
    random_latency: Option<Vec<f64>>,
    /// Resample interval of the random latency, s.
    #[arg(long, default_value_t = 0.01)]
    resample: f64,
    #[arg(long, value_enum, default_value_t = OrderingArg::Unordered)]
    ordering: OrderingArg,
    /// Initial offset relative to equilibrium ω and V.
    #[arg(long, default_value_t = 1e-3)]
    perturb: f64,
    /// Keep every k-th step in the trace.
    #[arg(long, default_value_t = 1)]
    stride: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum AssemblyArg {
    Direct,
    Literal,
}

#[derive(Clone, Copy, ValueEnum)]
enum OrderingArg {
    Unordered,
    Fifo,
}

fn parse_assignment(s: &str) -> Result<(String, f64), String> {
    let (k, v) = s.split_once('=').ok_or("expected path=value")?;
    let v: f64 = v.trim().parse().map_err(|_| format!("`{v}` is not a number"))?;
    Ok((k.trim().to_string(), v))
}

enum Failure {
    Usage(String),
    Domain(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Domain(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Domain(e.into())
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Domain(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn load(path: &Path) -> Result<MicrogridScenario, Failure> {
    let text = fs::read_to_string(path)?;
    Ok(parse_scenario(&text)?)
}

/// Loads, applies flags, validates and prepares the output directory.
fn prepare(c: &Common) -> Result<MicrogridScenario, Failure> {
    if let Some(j) = c.jobs {
        if j == 0 {
            return Err(Failure::Usage("--jobs must be at least 1".into()));
        }
        // Fails only if a pool already exists, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(j).build_global();
    }
    let mut s = load(&c.scenario)?;
    if let Some(tau) = c.latency {
        if s.graph.has_latency() && !c.r#override {
            return Err(Failure::Usage(
                "scenario already sets per-edge latencies; pass --override to replace them with --latency".into(),
            ));
        }
        s.graph.set_uniform_latency(tau);
    }
    let overrides: BTreeMap<String, f64> = c.set.iter().cloned().collect();
    s = apply_overrides(&s, &overrides)?;
    if let Some(seed) = c.seed {
        s.options.rng_seed = seed;
    }
    if c.stabilizer {
        s.stabilizer_enabled = true;
    }
    for (flag, v) in [("--stab-num", &c.stab_num), ("--stab-den", &c.stab_den)] {
        if v.as_ref().is_some_and(|v| v.len() != 3) {
            return Err(Failure::Usage(format!("{flag} takes three comma-separated coefficients")));
        }
    }
    if let Some(n) = &c.stab_num {
        s.stabilizer.numerator = [n[0], n[1], n[2]];
    }
    if let Some(d) = &c.stab_den {
        s.stabilizer.denominator = [d[0], d[1], d[2]];
    }
    if let Some(a) = c.assembly {
        s.options.assembly = match a {
            AssemblyArg::Direct => Assembly::Direct,
            AssemblyArg::Literal => Assembly::Literal,
        };
    }
    if let Some(f) = c.fmax {
        s.options.freq_max = f;
    }
    if let Some(p) = c.ppd {
        s.options.points_per_decade = p;
    }
    let v = validate(&s);
    if !v.is_empty() {
        return Err(Error::Invalid(v).into());
    }
    for w in warnings(&s) {
        eprintln!("warning: {w}");
    }
    fs::create_dir_all(&c.out)?;
    Ok(s)
}

fn write_json(dir: &Path, name: &str, v: &impl serde::Serialize) -> Outcome {
    let mut text = serde_json::to_string_pretty(v).map_err(Error::from)?;
    text.push('\n');
    fs::write(dir.join(name), text)?;
    Ok(())
}

fn finish(c: &Common, command: &str, s: &MicrogridScenario, mut report: Value) -> Outcome {
    let manifest = RunManifest::new(command, s, c.deterministic);
    report["scenario_hash"] = json!(manifest.scenario_hash);
    write_json(&c.out, "report.json", &report)?;
    write_json(&c.out, "manifest.json", &manifest)?;
    let text = serde_json::to_string_pretty(&report).map_err(Error::from)?;
    // A closed pipe on stdout is not an error for the run itself.
    let _ = writeln!(std::io::stdout(), "{text}");
    Ok(())
}

/// JSON number, or "inf"/"nan" for non-finite values.
fn num(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else if x.is_nan() {
        json!("nan")
    } else {
        json!("inf")
    }
}

/// Entries of L(jω) where the direct and literal assemblies differ, at a few
/// probe frequencies.
fn assembly_check(s: &MicrogridScenario, eq: &mgstab::Equilibrium) -> Result<Value, Failure> {
    const PROBES: [f64; 3] = [0.1, 1.0, 10.0];
    const SHOWN: usize = 10;
    let diffs = compare_assemblies(s, eq, &PROBES, 1e-6)?;
    let shown: Vec<Value> = diffs
        .iter()
        .take(SHOWN)
        .map(|d| {
            json!({
                "omega_rad_s": d.omega,
                "row": d.row + 1,
                "col": d.col + 1,
                "direct": [d.direct.re, d.direct.im],
                "literal": [d.literal.re, d.literal.im],
            })
        })
        .collect();
    Ok(json!({ "probe_omegas_rad_s": PROBES, "differing_entries": diffs.len(), "first": shown }))
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Validate { scenario } => {
            let s = load(&scenario)?;
            let v = validate(&s);
            for w in warnings(&s) {
                eprintln!("warning: {w}");
            }
            if v.is_empty() {
                println!("{}: valid ({} DGs, {} edges)", s.name, s.n(), s.graph.edge_count());
                Ok(())
            } else {
                Err(Error::Invalid(v).into())
            }
        }
        Command::Analyze(c) => {
            let s = prepare(&c)?;
            let eq = solve_equilibrium(&s)?;
            let a = nyquist::analyze(&s, &eq)?;
            fs::write(c.out.join("loci.csv"), nyquist::loci_csv(&a))?;
            let mut r = nyquist::report_json(&a);
            r["latency_max_s"] = json!(s.graph.max_latency());
            r["stabilizer"] = json!(s.stabilizer_enabled);
            r["equilibrium"] = json!(eq);
            r["assembly_check"] = assembly_check(&s, &eq)?;
            finish(&c, "analyze", &s, r)
        }
        Command::Simulate { common: c, sim } => {
            if sim.random_latency.as_ref().is_some_and(|b| b.len() != 2) {
                return Err(Failure::Usage("--random-latency takes `min,max`".into()));
            }
            let s = prepare(&c)?;
            let eq = solve_equilibrium(&s)?;
            let mut lm = match &sim.random_latency {
                Some(b) => LatencyModel::uniform(b[0], b[1], s.options.rng_seed),
                None => LatencyModel::constant(),
            };
            lm.resample_interval = sim.resample;
            lm.ordering = match sim.ordering {
                OrderingArg::Unordered => Ordering::Unordered,
                OrderingArg::Fifo => Ordering::Fifo,
            };
            let mut cfg = SimConfig::from_scenario(&s);
            if sim.stride == 0 {
                return Err(Failure::Usage("--stride must be at least 1".into()));
            }
            cfg.record_stride = sim.stride;
            let duration = sim.duration.unwrap_or(s.options.sim_duration);
            let tr = ddesim::simulate_from(&s, &eq, &lm, &Disturbance::relative(&eq, sim.perturb), duration, &cfg)?;
            fs::write(c.out.join("trace.csv"), ddesim::trace_csv(&tr))?;
            if sim.random_latency.is_some() {
                fs::write(c.out.join("latency.csv"), ddesim::latency_csv(&tr))?;
            }
            let r = json!({
                "converged": tr.converged,
                "settling_time_s": tr.settling_time,
                "divergence_time_s": tr.divergence_time,
                "duration_s": duration,
                "latency": lm,
                "perturbation": sim.perturb,
            });
            finish(&c, "simulate", &s, r)
        }
        Command::Threshold { common: c, lo, hi, tol } => {
            let s = prepare(&c)?;
            let eq = solve_equilibrium(&s)?;
            let t = latency_threshold_with(&s, &eq, lo, hi, tol)?;
            let r = json!({
                "threshold_s": t.tau,
                "bracket_s": [t.lo, t.hi],
                "tol_s": t.tol,
                "stabilizer": s.stabilizer_enabled,
                "probes": t.probes,
                "checks": t.checks,
            });
            finish(&c, "threshold", &s, r)
        }
        Command::Sweep { common: c, param, values, from, to, points } => {
            let s = prepare(&c)?;
            let values = match (from, to) {
                (Some(a), Some(b)) => {
                    if points < 2 {
                        return Err(Failure::Usage("--points must be at least 2".into()));
                    }
                    (0..points).map(|k| a + (b - a) * k as f64 / (points - 1) as f64).collect()
                }
                _ if !values.is_empty() => values,
                _ => return Err(Failure::Usage("give --values or --from/--to".into())),
            };
            let pts = explorer::sweep_parameter(&s, &param, &values)?;
            fs::write(c.out.join("sweep.csv"), explorer::sweep_csv(&pts))?;
            let rows: Vec<Value> = pts
                .iter()
                .map(|p| json!({"value": p.value, "gm": num(p.gm), "pm_deg": num(p.pm), "stable": p.stable, "error": p.error}))
                .collect();
            finish(&c, "sweep", &s, json!({ "parameter": param, "points": rows }))
        }
        Command::Surface { common: c, inertia, d_p } => {
            let s = prepare(&c)?;
            let tau = s.graph.max_latency();
            let surf = explorer::stability_surface(&s, &inertia, &d_p, tau)?;
            write_json(&c.out, "surface.json", &surf)?;
            let r = json!({
                "latency_s": tau,
                "boundary_d_p": surf.boundary,
                "boundary_monotone": surf.boundary_is_monotone(),
            });
            finish(&c, "surface", &s, r)
        }
        Command::TopoOpt { common: c, greedy } => {
            let s = prepare(&c)?;
            let tau = s.graph.max_latency();
            let base = s.with_uniform_latency(0.0);
            let t = if greedy {
                explorer::optimize_topology_greedy(&base, tau)?
            } else {
                explorer::optimize_topology(&base, tau)?
            };
            write_json(&c.out, "topo.json", &explorer::topology_json(&t))?;
            let r = json!({
                "latency_s": tau,
                "method": if greedy { "greedy" } else { "exhaustive" },
                "best_mask": t.best.mask,
                "best_gm": t.best.gm,
                "best_edges": t.best.edges,
                "adjacency": t.adjacency,
                "candidates": t.ranked.len(),
            });
            finish(&c, "topo-opt", &s, r)
        }
    }
}
