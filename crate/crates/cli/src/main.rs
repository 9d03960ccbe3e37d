//! `cloudq` command-line front end.
//!
//! Exit status: 0 on success, 1 on usage or input errors, 2 on numerical
//! failures (non-convergence, root bracketing, oversize state spaces, ...).

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cloudq::bench::{self, BenchOptions, BenchPolicy, Scale, SweepParam, SweepTarget, TestBedSpec};
use cloudq::index::{IndexFamily, PiMethod};
use cloudq::mdp::{self, Boundary, ChainOptions, EvalOptions, SolveMethod, SolveOptions, Sweep};
use cloudq::policy::{index_tables, Policy};
use cloudq::queueing::{loss_rate, loss_rate_deriv, steady_state_oracle};
use cloudq::report::{self, Cell, Format, Table};
use cloudq::sim::{simulate, SimConfig};
use cloudq::split::{alpha_floor, optimal_bs};
use cloudq::{DeadlineRegime, Error, ExecMode, Instance, Result};

#[derive(Parser, Debug)]
#[command(name = "cloudq", version, about = "Routing and resource allocation for parallel queues with abandonment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Output {
    /// Write to this file instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Output format: csv or jsonl.
    #[arg(long, global = true, default_value = "csv")]
    format: Format,
    /// Run everything on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
}

#[derive(Args, Debug, Clone)]
struct InstanceArgs {
    /// Instance file.
    #[arg(long, short)]
    instance: PathBuf,
    /// Override the deadline regime in the file (dbs or des).
    #[arg(long)]
    regime: Option<DeadlineRegime>,
    /// Override the per-node truncation level.
    #[arg(long)]
    truncation: Option<usize>,
}

impl InstanceArgs {
    fn load(&self) -> Result<Instance> {
        let mut inst = Instance::from_path(&self.instance)?;
        if let Some(r) = self.regime {
            inst = inst.with_regime(r);
        }
        if let Some(n) = self.truncation {
            inst.truncation = n;
        }
        inst.validate()?;
        Ok(inst)
    }
}

#[derive(Args, Debug, Clone)]
struct ChainArgs {
    /// What an arrival routed to a full node does: external or self-loop.
    #[arg(long, default_value = "external")]
    boundary: Boundary,
    /// Largest product state space accepted.
    #[arg(long, default_value_t = mdp::DEFAULT_STATE_CAP)]
    state_cap: usize,
}

impl ChainArgs {
    fn options(&self) -> ChainOptions {
        ChainOptions { state_cap: self.state_cap, boundary: self.boundary }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MethodArg {
    Auto,
    Vi,
    Pi,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SweepArg {
    Jacobi,
    GaussSeidel,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PiMethodArg {
    Stabilized,
    Forward,
}

impl From<PiMethodArg> for PiMethod {
    fn from(m: PiMethodArg) -> Self {
        match m {
            PiMethodArg::Stabilized => PiMethod::Stabilized,
            PiMethodArg::Forward => PiMethod::Forward,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TargetArg {
    Split,
    Indices,
    Gaps,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum RegimeSet {
    Dbs,
    Des,
    Both,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Per-node queueing metrics at the optimal Bernoulli split.
    Analyze {
        #[command(flatten)]
        inst: InstanceArgs,
        #[command(flatten)]
        output: Output,
    },
    /// Optimal Bernoulli split with its multiplier and KKT residual.
    Split {
        #[command(flatten)]
        inst: InstanceArgs,
        #[command(flatten)]
        output: Output,
    },
    /// Routing index tables per node.
    Indices {
        #[command(flatten)]
        inst: InstanceArgs,
        /// Comma-separated families.
        #[arg(long, value_delimiter = ',', default_values_t = [IndexFamily::IO, IndexFamily::PI, IndexFamily::RB])]
        families: Vec<IndexFamily>,
        #[arg(long, value_enum, default_value = "stabilized")]
        pi_method: PiMethodArg,
        #[command(flatten)]
        output: Output,
    },
    /// Optimal policy of the truncated model.
    Solve {
        #[command(flatten)]
        inst: InstanceArgs,
        #[command(flatten)]
        chain: ChainArgs,
        #[arg(long, value_enum, default_value = "auto")]
        method: MethodArg,
        #[arg(long, value_enum, default_value = "jacobi")]
        sweep: SweepArg,
        #[arg(long, default_value_t = mdp::DEFAULT_TOL)]
        tol: f64,
        #[arg(long, default_value_t = mdp::DEFAULT_MAX_ITER)]
        max_iter: usize,
        #[command(flatten)]
        output: Output,
    },
    /// Exact average cost of one or more policies on the truncated model.
    Evaluate {
        #[command(flatten)]
        inst: InstanceArgs,
        #[command(flatten)]
        chain: ChainArgs,
        /// Comma-separated policies: bs, io, pi, rb, external.
        #[arg(long, value_delimiter = ',', default_value = "bs,io,pi,rb")]
        policy: Vec<String>,
        /// Also solve for the optimum and report gaps.
        #[arg(long)]
        gap: bool,
        #[arg(long, default_value_t = mdp::DEFAULT_TOL)]
        tol: f64,
        #[command(flatten)]
        output: Output,
    },
    /// Discrete-event simulation of one policy with unbounded queues.
    Simulate {
        #[command(flatten)]
        inst: InstanceArgs,
        #[arg(long, default_value = "pi")]
        policy: String,
        /// Jobs per replication (sets the horizon to jobs / lambda).
        #[arg(long, default_value_t = 100_000)]
        jobs: u64,
        /// Explicit horizon; overrides --jobs.
        #[arg(long)]
        horizon: Option<f64>,
        #[arg(long, default_value_t = 0.2)]
        warmup: f64,
        #[arg(long, default_value_t = 20)]
        replications: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[command(flatten)]
        output: Output,
    },
    /// Optimality-gap study over a grid of generated instances.
    Bench {
        #[arg(long, default_value = "small")]
        scale: Scale,
        #[arg(long, value_enum, default_value = "both")]
        regime: RegimeSet,
        #[arg(long)]
        truncation: Option<usize>,
        /// Emit per-instance records instead of the summary.
        #[arg(long)]
        records: bool,
        #[arg(long, value_enum, default_value = "stabilized")]
        pi_method: PiMethodArg,
        #[command(flatten)]
        output: Output,
    },
    /// One-parameter sweep of the split, the indices or the gaps.
    Sweep {
        #[command(flatten)]
        inst: InstanceArgs,
        /// lambda, theta, C, mu_k, m_k or state.
        #[arg(long)]
        param: SweepParam,
        #[arg(long, value_enum, default_value = "split")]
        target: TargetArg,
        /// Explicit comma-separated grid.
        #[arg(long, value_delimiter = ',', conflicts_with_all = ["from", "to", "step"])]
        values: Vec<f64>,
        #[arg(long, requires_all = ["to", "step"])]
        from: Option<f64>,
        #[arg(long)]
        to: Option<f64>,
        #[arg(long)]
        step: Option<f64>,
        /// Occupancy at which indices are reported.
        #[arg(long, default_value_t = 0)]
        state: usize,
        #[command(flatten)]
        output: Output,
    },
}

fn exec_mode(output: &Output) -> ExecMode {
    if output.sequential {
        ExecMode::Sequential
    } else {
        ExecMode::Parallel
    }
}

fn emit(table: &Table, output: &Output) -> Result<()> {
    match &output.out {
        Some(path) => {
            let file = File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
            let mut w = BufWriter::new(file);
            table.write(&mut w, output.format)?;
            w.flush()?;
        }
        None => {
            let stdout = io::stdout();
            let mut w = stdout.lock();
            table.write(&mut w, output.format)?;
            w.flush()?;
        }
    }
    Ok(())
}

fn emit_all(tables: &[Table], output: &Output) -> Result<()> {
    let mut text = String::new();
    for t in tables {
        text.push_str(&t.to_string(output.format));
    }
    match &output.out {
        Some(path) => std::fs::write(path, text).map_err(|e| Error::Io(format!("{}: {e}", path.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn analyze(inst: &Instance) -> Result<Table> {
    let env = inst.env();
    let bs = optimal_bs(inst)?;
    let columns = [
        "node",
        "m",
        "mu",
        "lambda_k",
        "utilization",
        "loss_rate",
        "loss_rate_deriv",
        "abandon_prob",
        "alpha_floor",
        "mean_busy",
    ];
    let mut t = Table::new("analysis", columns.iter().map(|s| s.to_string()).collect());
    for (k, (&node, &rate)) in inst.nodes.iter().zip(bs.split.basic()).enumerate() {
        let loss = loss_rate(rate, node, env);
        let busy = if rate > 0.0 {
            let n = cloudq::queueing::default_oracle_truncation(rate, node, inst.theta);
            steady_state_oracle(rate, node, env, n).mean_busy_servers(node.m)
        } else {
            0.0
        };
        t.push(vec![
            (k + 1).into(),
            (node.m as usize).into(),
            node.mu.into(),
            rate.into(),
            (rate / node.capacity()).into(),
            loss.into(),
            loss_rate_deriv(rate, node, env).into(),
            (if rate > 0.0 { loss / rate } else { 0.0 }).into(),
            alpha_floor(node, env).into(),
            busy.into(),
        ]);
    }
    Ok(t)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Analyze { inst, output } => emit(&analyze(&inst.load()?)?, &output),
        Command::Split { inst, output } => {
            let inst = inst.load()?;
            emit(&report::split_table(&inst, &optimal_bs(&inst)?), &output)
        }
        Command::Indices { inst, families, pi_method, output } => {
            let inst = inst.load()?;
            let tables =
                families.iter().map(|&f| index_tables(&inst, f, pi_method.into())).collect::<Result<Vec<_>>>()?;
            for t in tables.iter().flatten() {
                if let Some(i) = t.unstable_from {
                    eprintln!("warning: {} index of node {} flagged unstable from state {i}", t.family, t.node_id);
                }
            }
            emit(&report::index_table(&tables), &output)
        }
        Command::Solve { inst, chain, method, sweep, tol, max_iter, output } => {
            let inst = inst.load()?;
            let chain = mdp::build_chain_with(&inst, &chain.options())?;
            let opts = SolveOptions {
                tol,
                max_iter,
                method: match method {
                    MethodArg::Auto => SolveMethod::Auto,
                    MethodArg::Vi => SolveMethod::ValueIteration,
                    MethodArg::Pi => SolveMethod::PolicyIteration,
                },
                sweep: match sweep {
                    SweepArg::Jacobi => Sweep::Jacobi,
                    SweepArg::GaussSeidel => Sweep::GaussSeidel,
                },
                exec: exec_mode(&output),
                ..Default::default()
            };
            let res = mdp::solve_optimal(&chain, &opts)?;
            eprintln!(
                "solved with {:?} in {} iterations, span {:.3e}, gain in [{}, {}]",
                res.method, res.iterations, res.span, res.gain_bounds.0, res.gain_bounds.1
            );
            let mut rep = mdp::evaluate_policy_with(&chain, &res.policy(&chain), &eval_options(tol, &output))?;
            rep.iterations = res.iterations;
            emit(&report::eval_table(&[(inst.name.clone(), rep, Some(0.0))]), &output)
        }
        Command::Evaluate { inst, chain, policy, gap, tol, output } => {
            let inst = inst.load()?;
            let chain = mdp::build_chain_with(&inst, &chain.options())?;
            let eval = eval_options(tol, &output);
            let z_star = if gap {
                let opts = SolveOptions { tol, exec: exec_mode(&output), ..Default::default() };
                Some(mdp::profit_per_job(mdp::solve_optimal(&chain, &opts)?.gain, inst.lambda))
            } else {
                None
            };
            let mut rows = Vec::new();
            for name in &policy {
                let p = Policy::by_name(&inst, name)?;
                let rep = mdp::evaluate_policy_with(&chain, &p, &eval)?;
                let g = z_star.map(|z| mdp::optimality_gap(z, rep.profit_per_job)).transpose()?;
                rows.push((inst.name.clone(), rep, g));
            }
            emit(&report::eval_table(&rows), &output)
        }
        Command::Simulate { inst, policy, jobs, horizon, warmup, replications, seed, output } => {
            let inst = inst.load()?;
            let p = Policy::by_name(&inst, &policy)?;
            let cfg = SimConfig { horizon, jobs, warmup, replications, seed, exec: exec_mode(&output) };
            emit(&report::sim_table(&inst, &simulate(&inst, &p, &cfg)?), &output)
        }
        Command::Bench { scale, regime, truncation, records, pi_method, output } => {
            let regimes = match regime {
                RegimeSet::Dbs => vec![DeadlineRegime::Dbs],
                RegimeSet::Des => vec![DeadlineRegime::Des],
                RegimeSet::Both => vec![DeadlineRegime::Dbs, DeadlineRegime::Des],
            };
            let mut spec = TestBedSpec::new(scale, regimes.clone());
            if let Some(n) = truncation {
                spec.truncation = n;
            }
            let opts = BenchOptions { pi_method: pi_method.into(), exec: exec_mode(&output), ..Default::default() };
            let mut tables = Vec::new();
            for r in regimes {
                let bed: Vec<Instance> =
                    bench::generate_testbed(&spec)?.into_iter().filter(|i| i.regime == r).collect();
                let gaps = bench::run_benchmark(&bed, &BenchPolicy::ALL, &opts);
                if gaps.failures() > 0 {
                    eprintln!("warning: {} of {} {} instances failed", gaps.failures(), bed.len(), r);
                }
                let mut t = if records { report::gap_records_table(&gaps) } else { report::gap_summary_table(&gaps) };
                if !records {
                    t.columns.insert(0, "regime".into());
                    for row in &mut t.rows {
                        row.insert(0, Cell::from(r.as_str()));
                    }
                }
                tables.push(t);
            }
            emit_all(&tables, &output)
        }
        Command::Sweep { inst, param, target, values, from, to, step, state, output } => {
            let inst = inst.load()?;
            let grid = match (from, to, step) {
                (Some(a), Some(b), Some(h)) => bench::linspace_step(a, b, h)?,
                _ if !values.is_empty() => values,
                _ => return Err(Error::InvalidParameter("sweep needs --values or --from/--to/--step".into())),
            };
            let target = match target {
                TargetArg::Split => SweepTarget::Split,
                TargetArg::Indices => SweepTarget::Indices { state },
                TargetArg::Gaps => SweepTarget::Gaps,
            };
            let opts = BenchOptions { exec: exec_mode(&output), ..Default::default() };
            let rows = bench::sweep(&inst, param, &grid, target, &opts)?;
            if target == SweepTarget::Split {
                for v in bench::split_sweep_violations(param, &rows, 1e-9) {
                    eprintln!("warning: {v}");
                }
            }
            emit(&report::sweep_table(param, &rows), &output)
        }
    }
}

fn eval_options(tol: f64, output: &Output) -> EvalOptions {
    EvalOptions { tol, exec: exec_mode(output), ..Default::default() }
}

fn configure_threads() -> std::result::Result<(), String> {
    let Ok(v) = std::env::var("CLOUDQ_THREADS") else {
        return Ok(());
    };
    let n: usize = v.parse().map_err(|_| format!("CLOUDQ_THREADS must be a positive integer, got `{v}`"))?;
    if n == 0 {
        return Err("CLOUDQ_THREADS must be at least 1".into());
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(1);
    }
    match run(cli) {
        Ok(()) | Err(Error::BrokenPipe) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}
