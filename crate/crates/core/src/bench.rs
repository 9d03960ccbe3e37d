//! Two-node test bed, optimality-gap study and parameter sweeps.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::index::{IndexFamily, PiMethod};
use crate::instance::{Instance, DEFAULT_TRUNCATION};
use crate::mdp::{build_chain, evaluate_policy_with, optimality_gap, solve_optimal_from, EvalOptions, SolveOptions};
use crate::policy::{index_tables, Policy};
use crate::queueing::{DeadlineRegime, NodeParams};
use crate::split::optimal_bs;

/// Grid of the two-node test bed with `m = (10, 40)` and `mu_2 = 1`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestBedSpec {
    pub mu1: Vec<f64>,
    pub rho: Vec<f64>,
    pub theta: Vec<f64>,
    pub c: Vec<f64>,
    pub m: (u32, u32),
    pub mu2: f64,
    pub regimes: Vec<DeadlineRegime>,
    pub truncation: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    Small,
    Full,
}

impl std::str::FromStr for Scale {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "small" => Ok(Scale::Small),
            "full" => Ok(Scale::Full),
            _ => Err(Error::InvalidParameter(format!("unknown scale `{s}` (expected small or full)"))),
        }
    }
}

fn steps(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step).round() as usize;
    (0..=n).map(|i| ((lo + i as f64 * step) * 1e9).round() / 1e9).collect()
}

impl TestBedSpec {
    pub fn new(scale: Scale, regimes: Vec<DeadlineRegime>) -> Self {
        let (mu1, rho, theta, c) = match scale {
            Scale::Small => (vec![1.0, 3.0, 5.0], vec![0.9, 1.2, 1.5], vec![0.2, 0.6, 1.1], vec![0.2, 0.5, 0.8]),
            Scale::Full => (steps(1.0, 5.0, 0.5), steps(0.9, 1.5, 0.1), steps(0.2, 1.1, 0.1), steps(0.1, 0.8, 0.1)),
        };
        TestBedSpec { mu1, rho, theta, c, m: (10, 40), mu2: 1.0, regimes, truncation: DEFAULT_TRUNCATION }
    }

    pub fn validate(&self) -> Result<()> {
        let grids = [("mu1", &self.mu1), ("rho", &self.rho), ("theta", &self.theta), ("C", &self.c)];
        for (name, g) in grids {
            if g.is_empty() {
                return Err(Error::InvalidParameter(format!("grid `{name}` is empty")));
            }
            if g.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::InvalidParameter(format!("grid `{name}` needs positive entries")));
            }
        }
        if self.regimes.is_empty() {
            return Err(Error::InvalidParameter("no regimes selected".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.regimes.len() * self.mu1.len() * self.rho.len() * self.theta.len() * self.c.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Cartesian product in the order regime, `mu1`, `rho`, `theta`, `C`.
pub fn generate_testbed(spec: &TestBedSpec) -> Result<Vec<Instance>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.len());
    for &regime in &spec.regimes {
        for &mu1 in &spec.mu1 {
            let nodes = vec![NodeParams::new(spec.m.0, mu1)?, NodeParams::new(spec.m.1, spec.mu2)?];
            let capacity: f64 = nodes.iter().map(|n| n.capacity()).sum();
            for &rho in &spec.rho {
                for &theta in &spec.theta {
                    for &c in &spec.c {
                        let mut inst = Instance::new(regime, capacity * rho, theta, c, nodes.clone())?;
                        inst.truncation = spec.truncation;
                        inst.validate()?;
                        inst.name = format!("{regime}-mu{mu1}-rho{rho}-th{theta}-C{c}");
                        out.push(inst);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Policies compared in the gap study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum BenchPolicy {
    BS,
    IO,
    PI,
    RB,
}

impl BenchPolicy {
    pub const ALL: [BenchPolicy; 4] = [BenchPolicy::BS, BenchPolicy::IO, BenchPolicy::PI, BenchPolicy::RB];

    pub fn label(self) -> &'static str {
        match self {
            BenchPolicy::BS => "BS",
            BenchPolicy::IO => "IO",
            BenchPolicy::PI => "PI",
            BenchPolicy::RB => "RB",
        }
    }

    fn build(self, inst: &Instance, pi_method: PiMethod) -> Result<Policy> {
        let family = match self {
            BenchPolicy::BS => return Policy::bernoulli(inst),
            BenchPolicy::IO => IndexFamily::IO,
            BenchPolicy::PI => IndexFamily::PI,
            BenchPolicy::RB => IndexFamily::RB,
        };
        Ok(Policy::Index { family, tables: index_tables(inst, family, pi_method)?, c: inst.c })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchOptions {
    pub solve: SolveOptions,
    pub eval: EvalOptions,
    pub pi_method: PiMethod,
    /// Instance-level fan-out; per-instance solves run sequentially.
    pub exec: ExecMode,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            solve: SolveOptions { exec: ExecMode::Sequential, ..Default::default() },
            eval: EvalOptions { exec: ExecMode::Sequential, ..Default::default() },
            pi_method: PiMethod::default(),
            exec: ExecMode::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicyResult {
    pub policy: BenchPolicy,
    pub gain: f64,
    pub profit: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InstanceRecord {
    pub index: usize,
    pub instance: Instance,
    pub gain_star: f64,
    pub z_star: f64,
    pub results: Vec<PolicyResult>,
    pub error: Option<String>,
}

impl InstanceRecord {
    pub fn result(&self, p: BenchPolicy) -> Option<&PolicyResult> {
        self.results.iter().find(|r| r.policy == p)
    }

    /// `100 (z_PI - z_p) / z_p`, when both were evaluated.
    pub fn pi_improvement(&self, p: BenchPolicy) -> Option<f64> {
        let pi = self.result(BenchPolicy::PI)?.profit;
        let other = self.result(p)?.profit;
        Some(100.0 * (pi - other) / other)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GapSummary {
    pub policy: BenchPolicy,
    pub min: f64,
    pub avg: f64,
    pub max: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapTable {
    pub policies: Vec<BenchPolicy>,
    pub summaries: Vec<GapSummary>,
    pub records: Vec<InstanceRecord>,
}

impl GapTable {
    pub fn summary(&self, p: BenchPolicy) -> Option<&GapSummary> {
        self.summaries.iter().find(|s| s.policy == p)
    }

    pub fn failures(&self) -> usize {
        self.records.iter().filter(|r| r.error.is_some()).count()
    }
}

fn run_instance(index: usize, inst: &Instance, policies: &[BenchPolicy], opts: &BenchOptions) -> InstanceRecord {
    let mut rec = InstanceRecord {
        index,
        instance: inst.clone(),
        gain_star: f64::NAN,
        z_star: f64::NAN,
        results: Vec::new(),
        error: None,
    };
    let run = |rec: &mut InstanceRecord| -> Result<()> {
        let chain = build_chain(inst)?;
        let built = policies.iter().map(|&p| Ok((p, p.build(inst, opts.pi_method)?))).collect::<Result<Vec<_>>>()?;
        // the PI policy is one improvement step from BS and a close starting point
        let warm = built.iter().find(|(p, _)| *p == BenchPolicy::PI).map(|(_, pol)| pol);
        let opt = solve_optimal_from(&chain, &opts.solve, warm)?;
        rec.gain_star = opt.gain;
        rec.z_star = crate::mdp::profit_per_job(opt.gain, inst.lambda);
        for (p, policy) in &built {
            let p = *p;
            let ev = evaluate_policy_with(&chain, policy, &opts.eval)?;
            let gap = optimality_gap(rec.z_star, ev.profit_per_job)?;
            rec.results.push(PolicyResult { policy: p, gain: ev.gain, profit: ev.profit_per_job, gap });
        }
        Ok(())
    };
    if let Err(e) = run(&mut rec) {
        rec.error = Some(e.to_string());
    }
    rec
}

/// Solves every instance, evaluates each policy and aggregates the gaps.
/// Per-instance failures are recorded and do not stop the run.
pub fn run_benchmark(instances: &[Instance], policies: &[BenchPolicy], opts: &BenchOptions) -> GapTable {
    let indexed: Vec<(usize, &Instance)> = instances.iter().enumerate().collect();
    let records = opts.exec.map(&indexed, |&(i, inst)| run_instance(i, inst, policies, opts));
    let summaries = summarize(&records, policies);
    GapTable { policies: policies.to_vec(), summaries, records }
}

/// Min/avg/max gap per policy over the successful records.
pub fn summarize(records: &[InstanceRecord], policies: &[BenchPolicy]) -> Vec<GapSummary> {
    policies
        .iter()
        .filter_map(|&p| {
            let gaps: Vec<f64> = records.iter().filter_map(|r| r.result(p)).map(|r| r.gap).collect();
            if gaps.is_empty() {
                return None;
            }
            let min = gaps.iter().copied().fold(f64::INFINITY, f64::min);
            let max = gaps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let avg = gaps.iter().sum::<f64>() / gaps.len() as f64;
            Some(GapSummary { policy: p, min, avg, max, count: gaps.len() })
        })
        .collect()
}

/// Parameter varied in a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SweepParam {
    Lambda,
    Theta,
    C,
    /// `mu_k` of basic node `k` (1-based).
    Mu(usize),
    /// `m_k` of basic node `k` (1-based).
    M(usize),
    /// Node occupancy; only meaningful for index outputs.
    State,
}

impl SweepParam {
    pub fn name(self) -> String {
        match self {
            SweepParam::Lambda => "lambda".into(),
            SweepParam::Theta => "theta".into(),
            SweepParam::C => "C".into(),
            SweepParam::Mu(k) => format!("mu{k}"),
            SweepParam::M(k) => format!("m{k}"),
            SweepParam::State => "state".into(),
        }
    }
}

impl std::str::FromStr for SweepParam {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let node = |rest: &str| -> Result<usize> {
            rest.trim_start_matches('_')
                .parse::<usize>()
                .ok()
                .filter(|&k| k >= 1)
                .ok_or_else(|| Error::InvalidParameter(format!("bad node number in sweep parameter `{s}`")))
        };
        match s {
            "lambda" => Ok(SweepParam::Lambda),
            "theta" => Ok(SweepParam::Theta),
            "C" | "c" => Ok(SweepParam::C),
            "state" => Ok(SweepParam::State),
            _ if s.starts_with("mu") => Ok(SweepParam::Mu(node(&s[2..])?)),
            _ if s.starts_with('m') => Ok(SweepParam::M(node(&s[1..])?)),
            _ => Err(Error::InvalidParameter(format!("unknown sweep parameter `{s}`"))),
        }
    }
}

/// What each sweep row reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SweepTarget {
    /// `lambda_0..lambda_n`, `alpha*` and `C*`.
    Split,
    /// IO, PI and RB index of every node at a fixed occupancy.
    Indices { state: usize },
    /// Optimal profit and the gap of each policy.
    Gaps,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub fields: Vec<(String, f64)>,
}

impl SweepRow {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.fields.iter().find(|(k, _)| k == name).map(|(_, v)| *v)
    }
}

fn apply(inst: &Instance, param: SweepParam, value: f64) -> Result<Instance> {
    let mut out = inst.clone();
    let node = |k: usize| {
        if k == 0 || k > inst.n() {
            Err(Error::InvalidParameter(format!("instance has no node {k}")))
        } else {
            Ok(k - 1)
        }
    };
    match param {
        SweepParam::Lambda => out.lambda = value,
        SweepParam::Theta => out.theta = value,
        SweepParam::C => out.c = value,
        SweepParam::Mu(k) => out.nodes[node(k)?].mu = value,
        SweepParam::M(k) => {
            if value < 1.0 || value.fract() != 0.0 {
                return Err(Error::InvalidParameter(format!("m must be a positive integer, got {value}")));
            }
            out.nodes[node(k)?].m = value as u32;
            out.truncation = out.truncation.max(value as usize);
        }
        SweepParam::State => {}
    }
    out.validate()?;
    Ok(out)
}

fn index_fields(inst: &Instance, state: usize, pi_method: PiMethod) -> Result<Vec<(String, f64)>> {
    let mut probe = inst.clone();
    probe.truncation = probe.truncation.max(state);
    let mut fields = Vec::new();
    for family in IndexFamily::ALL {
        for t in index_tables(&probe, family, pi_method)? {
            fields.push((format!("{family}_{}", t.node_id), t.value(state)));
        }
    }
    Ok(fields)
}

/// One row per grid value; the instance is otherwise left unchanged.
pub fn sweep(
    inst: &Instance,
    param: SweepParam,
    grid: &[f64],
    target: SweepTarget,
    opts: &BenchOptions,
) -> Result<Vec<SweepRow>> {
    if param == SweepParam::State && !matches!(target, SweepTarget::Indices { .. }) {
        return Err(Error::InvalidParameter("the state parameter only applies to index sweeps".into()));
    }
    let row = |&value: &f64| -> Result<SweepRow> {
        let fields = match (target, param) {
            (SweepTarget::Indices { .. }, SweepParam::State) => {
                if value < 0.0 || value.fract() != 0.0 {
                    return Err(Error::InvalidParameter(format!("state must be a nonnegative integer, got {value}")));
                }
                index_fields(inst, value as usize, opts.pi_method)?
            }
            (SweepTarget::Indices { state }, _) => index_fields(&apply(inst, param, value)?, state, opts.pi_method)?,
            (SweepTarget::Split, _) => {
                let s = optimal_bs(&apply(inst, param, value)?)?;
                let mut f: Vec<(String, f64)> =
                    s.split.rates.iter().enumerate().map(|(k, r)| (format!("lambda_{k}"), *r)).collect();
                f.push(("alpha_star".into(), s.alpha_star));
                f.push(("C_star".into(), s.c_star));
                f.push(("objective".into(), s.objective));
                f
            }
            (SweepTarget::Gaps, _) => {
                let r = run_instance(0, &apply(inst, param, value)?, &BenchPolicy::ALL, opts);
                if let Some(e) = r.error {
                    return Err(Error::InvalidParameter(format!("{} = {value}: {e}", param.name())));
                }
                let mut f = vec![("z_star".to_string(), r.z_star)];
                for p in &r.results {
                    f.push((format!("gap_{}", p.policy.label()), p.gap));
                }
                f
            }
        };
        Ok(SweepRow { value, fields })
    };
    opts.exec.map(grid, row).into_iter().collect()
}

/// Monotonicity expected of split sweeps; returns one message per violation.
pub fn split_sweep_violations(param: SweepParam, rows: &[SweepRow], tol: f64) -> Vec<String> {
    let dir = match param {
        SweepParam::Lambda | SweepParam::Theta => 1.0,
        SweepParam::C => -1.0,
        _ => return Vec::new(),
    };
    rows.windows(2)
        .filter_map(|w| {
            let (a, b) = (w[0].get("lambda_0")?, w[1].get("lambda_0")?);
            (dir * (b - a) < -tol).then(|| {
                format!("lambda_0 moves against {} between {} and {}: {a} -> {b}", param.name(), w[0].value, w[1].value)
            })
        })
        .collect()
}

/// Evenly spaced grid `lo, lo + step, ..., hi`.
pub fn linspace_step(lo: f64, hi: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && hi >= lo) {
        return Err(Error::InvalidParameter(format!("bad grid {lo}:{hi}:{step}")));
    }
    Ok(steps(lo, hi, step))
}
