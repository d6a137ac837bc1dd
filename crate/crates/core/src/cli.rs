//! Command-line front end. `run` parses arguments, dispatches, and maps
//! outcomes to exit codes: 0 success, 1 negative analysis result, 2 usage
//! or input error, 3 no convergence.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::io::Write;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::bench::{bench_one, bench_table};
use crate::composition::check_bridge;
use crate::dsl::{load_file, Diag, LowerOptions, Lowered};
use crate::scdp::{
    simulate_paths, trajectory_table, value_iteration, value_iteration_decomposed, Controller,
    DpConfig, Scdp,
};
use crate::solver::{root_actions, solve_auto, value_table, SolveError, SolverConfig};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "SCDM_OUT_DIR";

pub const EXIT_OK: i32 = 0;
pub const EXIT_NEGATIVE: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NO_CONVERGENCE: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "scdm",
    version,
    about = "Structural causal decision models: checking, solving and simulating"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Write results as files into this directory instead of standard output.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Run on one thread.
    #[arg(long, global = true)]
    pub serial: bool,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Model file.
    pub model: PathBuf,
    /// Grid points for an interval-domain variable.
    #[arg(long = "grid", value_name = "NAME=N")]
    pub grids: Vec<String>,
    /// Parameter override.
    #[arg(long = "param", value_name = "NAME=VALUE")]
    pub params: Vec<String>,
    /// Variant block to switch on.
    #[arg(long = "variant", value_name = "NAME")]
    pub variants: Vec<String>,
}

#[derive(Debug, Args)]
pub struct DpArgs {
    /// Quadrature nodes per shock.
    #[arg(long, default_value_t = 11)]
    pub nodes: usize,
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
    #[arg(long = "max-iter", default_value_t = 10_000)]
    pub max_iter: usize,
    /// Value for a state root that the end-state mapping leaves open.
    #[arg(long = "fix", value_name = "NAME=VALUE")]
    pub fixes: Vec<String>,
    /// Update through the declared bridge.
    #[arg(long)]
    pub decomposed: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Lower model files and report diagnostics.
    Validate {
        #[arg(required = true)]
        models: Vec<PathBuf>,
        #[arg(long = "variant", value_name = "NAME")]
        variants: Vec<String>,
    },
    /// Causal graph in DOT.
    Graph {
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Decide whether cutting at a bridge gives an orthomodular decomposition.
    CheckOrtho {
        #[command(flatten)]
        model: ModelArgs,
        /// Bridge variables; defaults to the declared bridge.
        #[arg(long, value_delimiter = ',')]
        bridge: Vec<String>,
    },
    /// Solve a static model over its root grid.
    Solve {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_delimiter = ',')]
        bridge: Vec<String>,
        /// Enumerate even when an orthomodular bridge is declared.
        #[arg(long = "force-enumerate")]
        force_enumerate: bool,
        #[arg(long, default_value_t = 11)]
        nodes: usize,
        /// Refuse searches needing more policy evaluations.
        #[arg(long = "max-evals", default_value_t = 200_000_000)]
        max_evals: u64,
    },
    /// Value iteration on a recurring model.
    Iterate {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        dp: DpArgs,
    },
    /// Simulate trajectories under the greedy policy of the iterated value.
    Simulate {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        dp: DpArgs,
        #[arg(long, default_value_t = 20)]
        periods: usize,
        #[arg(long, default_value_t = 1)]
        paths: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Initial state value; unset states start at their middle grid point.
        #[arg(long = "start", value_name = "NAME=VALUE")]
        start: Vec<String>,
    },
    /// Enumeration against decomposed solving on the parametric family.
    Bench {
        /// Action counts, as `K` or `LO..HI`.
        #[arg(long, default_value = "2..5", value_parser = parse_range)]
        k: RangeInclusive<usize>,
        /// Add wall-time columns (not reproducible).
        #[arg(long)]
        timing: bool,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
}

fn parse_range(s: &str) -> Result<RangeInclusive<usize>, String> {
    let bad = || format!("expected K or LO..HI, got `{s}`");
    match s.split_once("..") {
        Some((a, b)) => {
            let lo = a.trim().parse().map_err(|_| bad())?;
            let hi = b
                .trim()
                .trim_start_matches('=')
                .parse()
                .map_err(|_| bad())?;
            if lo == 0 || lo > hi {
                return Err(bad());
            }
            Ok(lo..=hi)
        }
        None => {
            let k: usize = s.trim().parse().map_err(|_| bad())?;
            if k == 0 {
                return Err(bad());
            }
            Ok(k..=k)
        }
    }
}

/// A failure carrying its exit code and the stderr lines to print.
struct Failure {
    code: i32,
    lines: Vec<String>,
}

impl Failure {
    fn input(msg: impl Into<String>) -> Failure {
        Failure {
            code: EXIT_INPUT,
            lines: vec![format!("scdm: error: {}", msg.into())],
        }
    }

    fn negative(msg: impl Into<String>) -> Failure {
        Failure {
            code: EXIT_NEGATIVE,
            lines: vec![format!("scdm: error: {}", msg.into())],
        }
    }

    fn diags(path: &Path, diags: &[Diag], code: i32) -> Failure {
        Failure {
            code,
            lines: diags.iter().map(|d| diag_line(path, d)).collect(),
        }
    }
}

fn diag_line(path: &Path, d: &Diag) -> String {
    format!(
        "{}:{}:{}: error: {}",
        path.display(),
        d.span.line,
        d.span.col,
        d.message
    )
}

/// Result files of one command, written to a directory or concatenated on
/// standard output.
struct Outputs {
    files: Vec<(String, String)>,
    notes: Vec<String>,
    code: i32,
}

impl Outputs {
    fn new() -> Outputs {
        Outputs {
            files: Vec::new(),
            notes: Vec::new(),
            code: EXIT_OK,
        }
    }

    fn file(&mut self, name: impl Into<String>, body: String) {
        self.files.push((name.into(), body));
    }
}

fn pairs<T: std::str::FromStr>(
    items: &[String],
    what: &str,
) -> Result<BTreeMap<String, T>, Failure> {
    let mut out = BTreeMap::new();
    for it in items {
        let (k, v) = it
            .split_once('=')
            .ok_or_else(|| Failure::input(format!("{what} `{it}` is not NAME=VALUE")))?;
        let v = v
            .trim()
            .parse()
            .map_err(|_| Failure::input(format!("{what} `{it}` has an unreadable value")))?;
        out.insert(k.trim().to_string(), v);
    }
    Ok(out)
}

fn load(args: &ModelArgs) -> Result<Lowered, Failure> {
    let opts = LowerOptions {
        variants: args.variants.iter().cloned().collect(),
        params: pairs(&args.params, "--param")?,
        grids: pairs(&args.grids, "--grid")?,
    };
    if !args.model.exists() {
        return Err(Failure::input(format!(
            "{}: no such file",
            args.model.display()
        )));
    }
    load_file(&args.model, &opts).map_err(|d| Failure::diags(&args.model, &d, EXIT_INPUT))
}

fn bridge_of(l: &Lowered, given: &[String]) -> Option<BTreeSet<String>> {
    if given.is_empty() {
        l.bridge.clone()
    } else {
        Some(given.iter().cloned().collect())
    }
}

fn process(l: &Lowered, dp: &DpArgs) -> Result<Scdp, Failure> {
    let mut p = l.process.clone().ok_or_else(|| {
        Failure::input(format!(
            "model `{}` declares no discount and end state",
            l.name
        ))
    })?;
    for (k, v) in pairs::<f64>(&dp.fixes, "--fix")? {
        p = p.fix(&k, v).map_err(|e| Failure::input(e.to_string()))?;
    }
    Ok(p)
}

fn dp_config(dp: &DpArgs, parallel: bool) -> DpConfig {
    DpConfig {
        quadrature_nodes: dp.nodes,
        tol: dp.tol,
        max_iter: dp.max_iter,
        keep_snapshots: false,
        parallel,
    }
}

fn iterate(
    l: &Lowered,
    dp: &DpArgs,
    parallel: bool,
) -> Result<(Scdp, crate::scdp::IterationReport), Failure> {
    let p = process(l, dp)?;
    let cfg = dp_config(dp, parallel);
    let report = if dp.decomposed {
        let bridge = l
            .bridge
            .clone()
            .ok_or_else(|| Failure::input(format!("model `{}` declares no bridge", l.name)))?;
        let verdict = check_bridge(&p.model, &bridge).map_err(|e| Failure::input(e.to_string()))?;
        let d = verdict
            .decomposition
            .ok_or_else(|| Failure::negative(verdict.reason.clone()))?;
        value_iteration_decomposed(&p, &d, &cfg)
    } else {
        value_iteration(&p, &cfg)
    }
    .map_err(|e| Failure::negative(e.to_string()))?;
    Ok((p, report))
}

fn solve_failure(e: SolveError) -> Failure {
    Failure::negative(e.to_string())
}

fn execute(cli: &Cli) -> Result<Outputs, Failure> {
    let parallel = !cli.serial;
    let mut out = Outputs::new();
    match &cli.command {
        Command::Validate { models, variants } => {
            let opts = LowerOptions {
                variants: variants.iter().cloned().collect(),
                ..Default::default()
            };
            let mut lines = Vec::new();
            for path in models {
                if !path.exists() {
                    return Err(Failure::input(format!("{}: no such file", path.display())));
                }
                match load_file(path, &opts) {
                    Ok(l) => out
                        .notes
                        .push(format!("{}: ok ({})", path.display(), l.name)),
                    Err(d) => lines.extend(d.iter().map(|d| diag_line(path, d))),
                }
            }
            if !lines.is_empty() {
                return Err(Failure {
                    code: EXIT_NEGATIVE,
                    lines,
                });
            }
        }
        Command::Graph { model } => {
            let l = load(model)?;
            out.file(format!("{}.dot", l.name), l.model.graph.to_dot(&l.name));
        }
        Command::CheckOrtho { model, bridge } => {
            let l = load(model)?;
            let b = bridge_of(&l, bridge)
                .ok_or_else(|| Failure::input("no bridge given or declared"))?;
            let v = check_bridge(&l.model, &b).map_err(|e| Failure::input(e.to_string()))?;
            let names = b.iter().cloned().collect::<Vec<_>>().join(",");
            out.file(
                format!("{}.ortho.txt", l.name),
                format!(
                    "bridge={{{names}}} orthomodular={} reason={}\n",
                    v.orthomodular, v.reason
                ),
            );
            if !v.orthomodular {
                out.code = EXIT_NEGATIVE;
            }
        }
        Command::Solve {
            model,
            bridge,
            force_enumerate,
            nodes,
            max_evals,
        } => {
            let l = load(model)?;
            let cfg = SolverConfig {
                quadrature_nodes: *nodes,
                max_evaluations: *max_evals,
                parallel,
            };
            let b = bridge_of(&l, bridge);
            let (report, decomposed) =
                solve_auto(&l.model, b.as_ref(), *force_enumerate, &cfg).map_err(solve_failure)?;
            let actions = root_actions(&l.model, &report.profile, &report.value.grid);
            out.file(
                format!("{}.solution.csv", l.name),
                value_table(&report.value, &actions),
            );
            out.notes.push(format!(
                "{}: {} with {} policy evaluations",
                l.name,
                if decomposed {
                    "decomposed"
                } else {
                    "enumerated"
                },
                report.policy_evaluations
            ));
        }
        Command::Iterate { model, dp } => {
            let l = load(model)?;
            let (_, r) = iterate(&l, dp, parallel)?;
            out.file(format!("{}.value.csv", l.name), value_table(&r.value, &[]));
            out.file(format!("{}.policy.csv", l.name), r.policy.to_table());
            out.file(format!("{}.trace.csv", l.name), r.trace.to_table());
            out.notes.push(format!(
                "{}: {} after {} iterations",
                l.name,
                if r.converged {
                    "converged"
                } else {
                    "not converged"
                },
                r.trace.iterations
            ));
            if !r.converged {
                out.code = EXIT_NO_CONVERGENCE;
            }
        }
        Command::Simulate {
            model,
            dp,
            periods,
            paths,
            seed,
            start,
        } => {
            let l = load(model)?;
            let (p, r) = iterate(&l, dp, parallel)?;
            if !r.converged {
                out.code = EXIT_NO_CONVERGENCE;
            }
            let given: BTreeMap<String, f64> = pairs(start, "--start")?;
            let mut x0 = BTreeMap::new();
            let states = &r.value.grid;
            for (name, axis) in states.names().iter().zip(states.axes()) {
                let v = given
                    .get(name)
                    .copied()
                    .unwrap_or(axis.values()[axis.len() / 2]);
                x0.insert(name.clone(), v);
            }
            if let Some(k) = given.keys().find(|k| !x0.contains_key(*k)) {
                return Err(Failure::input(format!(
                    "--start `{k}` is not a state of `{}`",
                    l.name
                )));
            }
            let controller = Controller::Lookahead(r.value);
            let runs = simulate_paths(&p, &controller, &x0, *periods, *paths, *seed, parallel)
                .map_err(|e| Failure::negative(e.to_string()))?;
            let mut table = String::new();
            for (i, path) in runs.iter().enumerate() {
                for (j, line) in trajectory_table(path).lines().enumerate() {
                    if j == 0 {
                        if i == 0 {
                            table.push_str(&format!("path,{line}\n"));
                        }
                    } else {
                        table.push_str(&format!("{i},{line}\n"));
                    }
                }
            }
            out.file(format!("{}.paths.csv", l.name), table);
        }
        Command::Bench { k, timing, repeats } => {
            let cfg = SolverConfig {
                parallel,
                ..Default::default()
            };
            let rows = k
                .clone()
                .map(|k| bench_one(k, *repeats, &cfg))
                .collect::<Result<Vec<_>, _>>()
                .map_err(solve_failure)?;
            out.file("bench.csv", bench_table(&rows, *timing));
        }
    }
    Ok(out)
}

/// Runs the command line `args` (program name first), writing results and
/// diagnostics to the given streams. Returns the exit code.
pub fn run_with<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let text = e.render().to_string();
            if code == EXIT_OK {
                let _ = write!(stdout, "{text}");
            } else {
                let _ = write!(stderr, "{text}");
            }
            return code;
        }
    };
    let out_dir = cli.out.clone().or_else(|| {
        std::env::var_os(OUT_DIR_ENV)
            .filter(|v| !v.is_empty())
            .map(PathBuf::from)
    });
    match execute(&cli) {
        Ok(outputs) => {
            for n in &outputs.notes {
                let _ = writeln!(stderr, "{n}");
            }
            if let Err(code) = write_outputs(&outputs.files, out_dir.as_deref(), stdout, stderr) {
                return code;
            }
            outputs.code
        }
        Err(f) => {
            for l in &f.lines {
                let _ = writeln!(stderr, "{l}");
            }
            f.code
        }
    }
}

fn write_outputs(
    files: &[(String, String)],
    dir: Option<&Path>,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> Result<(), i32> {
    match dir {
        Some(dir) => {
            let fail = |e: std::io::Error, stderr: &mut dyn Write| {
                let _ = writeln!(stderr, "scdm: error: {}: {e}", dir.display());
                EXIT_INPUT
            };
            std::fs::create_dir_all(dir).map_err(|e| fail(e, stderr))?;
            for (name, body) in files {
                std::fs::write(dir.join(name), body).map_err(|e| fail(e, stderr))?;
            }
        }
        None => {
            let many = files.len() > 1;
            for (name, body) in files {
                if many {
                    let _ = writeln!(stdout, "# {name}");
                }
                let _ = write!(stdout, "{body}");
            }
        }
    }
    Ok(())
}

/// Entry point for the binary.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with(
        args,
        &mut std::io::stdout().lock(),
        &mut std::io::stderr().lock(),
    )
}
