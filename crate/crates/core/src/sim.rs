//! Event-driven simulation of the routed system.
//!
//! Each job draws its deadline at arrival. Under DBS the deadline is
//! disarmed when service starts; under DES it stays armed until the job
//! completes, so a job can leave mid-service and free its server.
//! Deadline and service events are cancelled lazily: a stale event finds
//! its job in a different phase and is dropped.
//!
//! Every replication owns independent ChaCha streams keyed by
//! `(seed, replication, role)`, so results do not depend on scheduling.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::instance::Instance;
use crate::mdp::{build_chain, evaluate_policy};
use crate::policy::Policy;
use crate::queueing::DeadlineRegime;

pub const DEFAULT_WARMUP: f64 = 0.2;
pub const CI_LEVEL: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimConfig {
    /// Simulated time per replication; defaults to `jobs / lambda`.
    pub horizon: Option<f64>,
    /// Expected arrivals per replication, used when `horizon` is unset.
    pub jobs: u64,
    /// Leading fraction of the horizon discarded from the estimates.
    pub warmup: f64,
    pub replications: usize,
    pub seed: u64,
    #[serde(skip)]
    pub exec: ExecMode,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            horizon: None,
            jobs: 100_000,
            warmup: DEFAULT_WARMUP,
            replications: 20,
            seed: 1,
            exec: ExecMode::default(),
        }
    }
}

impl SimConfig {
    pub fn horizon_for(&self, lambda: f64) -> f64 {
        self.horizon.unwrap_or(self.jobs as f64 / lambda)
    }

    pub fn validate(&self, lambda: f64) -> Result<()> {
        let h = self.horizon_for(lambda);
        if !(h.is_finite() && h > 0.0) {
            return Err(Error::InvalidParameter(format!("horizon must be finite and > 0, got {h}")));
        }
        if self.replications == 0 {
            return Err(Error::InvalidParameter("at least one replication is required".into()));
        }
        if !(0.0..=0.5).contains(&self.warmup) {
            return Err(Error::InvalidParameter(format!("warmup must lie in [0, 0.5], got {}", self.warmup)));
        }
        Ok(())
    }
}

/// Counts of one replication. Window fields cover the post-warmup period;
/// `total_*` fields cover the whole run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicationStats {
    pub window: f64,
    pub arrivals: u64,
    pub external: u64,
    pub completions: Vec<u64>,
    pub abandonments: Vec<u64>,
    /// Time integral of node occupancy over the window.
    pub occupancy_area: Vec<f64>,
    /// Time integral of jobs beyond the servers over the window.
    pub excess_area: Vec<f64>,
    pub total_arrivals: u64,
    pub total_external: u64,
    pub total_completions: u64,
    pub total_abandonments: u64,
    pub in_system_end: u64,
}

impl ReplicationStats {
    pub fn cost_rate(&self, c: f64) -> f64 {
        if self.window == 0.0 {
            return 0.0;
        }
        (self.abandonments.iter().sum::<u64>() as f64 + c * self.external as f64) / self.window
    }

    pub fn flow_balanced(&self) -> bool {
        self.total_arrivals
            == self.total_completions + self.total_abandonments + self.total_external + self.in_system_end
    }
}

/// Mean over replications with a Student-t half-width (`NaN` for one replication).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub half_width: f64,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Estimate {
        let n = xs.len();
        let mean = xs.iter().sum::<f64>() / n as f64;
        if n < 2 {
            return Estimate { mean, half_width: f64::NAN };
        }
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
            .expect("degrees of freedom are positive")
            .inverse_cdf(0.5 + CI_LEVEL / 2.0);
        Estimate { mean, half_width: t * (var / n as f64).sqrt() }
    }

    pub fn contains(&self, x: f64, multiple: f64) -> bool {
        (x - self.mean).abs() <= multiple * self.half_width
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimReport {
    pub policy: String,
    pub regime: DeadlineRegime,
    pub replications: usize,
    pub horizon: f64,
    pub warmup: f64,
    pub seed: u64,
    pub cost_rate: Estimate,
    pub profit_per_job: Estimate,
    pub external_fraction: Estimate,
    pub abandonment_rate: Vec<Estimate>,
    pub mean_occupancy: Vec<Estimate>,
    pub mean_excess: Vec<Estimate>,
    /// Post-warmup abandonments per node, summed over replications.
    pub abandonment_counts: Vec<u64>,
    pub ci_method: &'static str,
    #[serde(skip)]
    pub runs: Vec<ReplicationStats>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Arrival,
    ServiceEnd { job: usize },
    Deadline { job: usize },
}

#[derive(Debug, Clone, Copy)]
struct Event {
    time: f64,
    seq: u64,
    kind: Kind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    // min-heap on (time, seq)
    fn cmp(&self, other: &Self) -> Ordering {
        other.time.total_cmp(&self.time).then_with(|| other.seq.cmp(&self.seq))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Waiting,
    Serving,
    Gone,
}

#[derive(Debug, Clone, Copy)]
struct Job {
    node: usize,
    phase: Phase,
}

struct Node {
    m: usize,
    service: Exp<f64>,
    busy: usize,
    waiting: usize,
    queue: VecDeque<usize>,
}

impl Node {
    fn occupancy(&self) -> usize {
        self.busy + self.waiting
    }
}

#[derive(Clone, Copy)]
#[repr(u64)]
enum Stream {
    Arrivals = 0,
    Routing = 1,
    Service = 2,
    Patience = 3,
}

fn stream(seed: u64, rep: usize, role: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((rep as u64) << 2) | role as u64);
    rng
}

/// Routing at arrival, shared with the exact evaluator through [`Policy`].
fn choose(policy: &Policy, cumulative: &[f64], state: &[usize], rng: &mut ChaCha8Rng) -> usize {
    if let Some(a) = policy.action(state) {
        return a;
    }
    let u: f64 = rng.random();
    cumulative.iter().position(|&c| u < c).unwrap_or(cumulative.len() - 1)
}

fn replicate(inst: &Instance, policy: &Policy, cfg: &SimConfig, rep: usize) -> Result<ReplicationStats> {
    let n = inst.n();
    let horizon = cfg.horizon_for(inst.lambda);
    let t_warm = cfg.warmup * horizon;
    let bad = |what: &str| Error::InvalidParameter(format!("invalid {what} rate"));
    let inter = Exp::new(inst.lambda).map_err(|_| bad("arrival"))?;
    let patience = Exp::new(inst.theta).map_err(|_| bad("abandonment"))?;
    let mut nodes: Vec<Node> = inst
        .nodes
        .iter()
        .map(|p| {
            Ok(Node {
                m: p.m as usize,
                service: Exp::new(p.mu).map_err(|_| bad("service"))?,
                busy: 0,
                waiting: 0,
                queue: VecDeque::new(),
            })
        })
        .collect::<Result<_>>()?;
    let cumulative: Vec<f64> = policy
        .static_probs()
        .map(|p| {
            p.iter()
                .scan(0.0, |acc, q| {
                    *acc += q;
                    Some(*acc)
                })
                .collect()
        })
        .unwrap_or_default();

    let mut r_arr = stream(cfg.seed, rep, Stream::Arrivals);
    let mut r_route = stream(cfg.seed, rep, Stream::Routing);
    let mut r_serv = stream(cfg.seed, rep, Stream::Service);
    let mut r_pat = stream(cfg.seed, rep, Stream::Patience);

    let mut st = ReplicationStats {
        window: horizon - t_warm,
        arrivals: 0,
        external: 0,
        completions: vec![0; n],
        abandonments: vec![0; n],
        occupancy_area: vec![0.0; n],
        excess_area: vec![0.0; n],
        total_arrivals: 0,
        total_external: 0,
        total_completions: 0,
        total_abandonments: 0,
        in_system_end: 0,
    };
    let mut jobs: Vec<Job> = Vec::new();
    let mut heap = BinaryHeap::new();
    let mut seq = 0u64;
    let mut push = |heap: &mut BinaryHeap<Event>, time: f64, kind: Kind| {
        seq += 1;
        heap.push(Event { time, seq, kind });
    };
    push(&mut heap, inter.sample(&mut r_arr), Kind::Arrival);
    let mut state = vec![0usize; n];
    let mut now = 0.0;
    let des = inst.regime == DeadlineRegime::Des;

    let advance = |st: &mut ReplicationStats, nodes: &[Node], from: f64, to: f64| {
        let lo = from.max(t_warm);
        if to > lo {
            let dt = to - lo;
            for (k, nd) in nodes.iter().enumerate() {
                let occ = nd.occupancy();
                st.occupancy_area[k] += dt * occ as f64;
                st.excess_area[k] += dt * occ.saturating_sub(nd.m) as f64;
            }
        }
    };

    while let Some(ev) = heap.pop() {
        if ev.time > horizon {
            break;
        }
        advance(&mut st, &nodes, now, ev.time);
        now = ev.time;
        let measured = now >= t_warm;
        match ev.kind {
            Kind::Arrival => {
                st.total_arrivals += 1;
                st.arrivals += measured as u64;
                for (s, nd) in state.iter_mut().zip(&nodes) {
                    *s = nd.occupancy();
                }
                let action = choose(policy, &cumulative, &state, &mut r_route);
                if action == 0 {
                    st.total_external += 1;
                    st.external += measured as u64;
                } else {
                    let k = action - 1;
                    let id = jobs.len();
                    let nd = &mut nodes[k];
                    push(&mut heap, now + patience.sample(&mut r_pat), Kind::Deadline { job: id });
                    if nd.busy < nd.m {
                        nd.busy += 1;
                        jobs.push(Job { node: k, phase: Phase::Serving });
                        push(&mut heap, now + nd.service.sample(&mut r_serv), Kind::ServiceEnd { job: id });
                    } else {
                        nd.waiting += 1;
                        nd.queue.push_back(id);
                        jobs.push(Job { node: k, phase: Phase::Waiting });
                    }
                }
                push(&mut heap, now + inter.sample(&mut r_arr), Kind::Arrival);
            }
            Kind::ServiceEnd { job } => {
                if jobs[job].phase != Phase::Serving {
                    continue;
                }
                let k = jobs[job].node;
                jobs[job].phase = Phase::Gone;
                st.total_completions += 1;
                st.completions[k] += measured as u64;
                nodes[k].busy -= 1;
                if let Some((id, t)) = start_next(&mut nodes[k], &mut jobs, &mut r_serv) {
                    push(&mut heap, now + t, Kind::ServiceEnd { job: id });
                }
            }
            Kind::Deadline { job } => {
                let k = jobs[job].node;
                let leaves = match jobs[job].phase {
                    Phase::Waiting => {
                        nodes[k].waiting -= 1;
                        true
                    }
                    Phase::Serving if des => {
                        nodes[k].busy -= 1;
                        true
                    }
                    _ => false,
                };
                if !leaves {
                    continue;
                }
                let was_serving = jobs[job].phase == Phase::Serving;
                jobs[job].phase = Phase::Gone;
                st.total_abandonments += 1;
                st.abandonments[k] += measured as u64;
                if was_serving {
                    if let Some((id, t)) = start_next(&mut nodes[k], &mut jobs, &mut r_serv) {
                        push(&mut heap, now + t, Kind::ServiceEnd { job: id });
                    }
                }
            }
        }
    }
    advance(&mut st, &nodes, now, horizon);
    st.in_system_end = nodes.iter().map(|nd| nd.occupancy() as u64).sum();
    Ok(st)
}

/// Moves the next live waiting job into service; returns it with its service time.
fn start_next(nd: &mut Node, jobs: &mut [Job], rng: &mut ChaCha8Rng) -> Option<(usize, f64)> {
    while let Some(id) = nd.queue.pop_front() {
        if jobs[id].phase == Phase::Waiting {
            jobs[id].phase = Phase::Serving;
            nd.waiting -= 1;
            nd.busy += 1;
            return Some((id, nd.service.sample(rng)));
        }
    }
    None
}

/// Runs all replications and aggregates them.
pub fn simulate(inst: &Instance, policy: &Policy, cfg: &SimConfig) -> Result<SimReport> {
    inst.validate()?;
    cfg.validate(inst.lambda)?;
    policy.validate(inst.n())?;
    let reps: Vec<usize> = (0..cfg.replications).collect();
    let runs = cfg.exec.map(&reps, |&r| replicate(inst, policy, cfg, r)).into_iter().collect::<Result<Vec<_>>>()?;
    Ok(aggregate(inst, policy, cfg, runs))
}

fn aggregate(inst: &Instance, policy: &Policy, cfg: &SimConfig, runs: Vec<ReplicationStats>) -> SimReport {
    let n = inst.n();
    let per = |f: &dyn Fn(&ReplicationStats) -> f64| Estimate::from_samples(&runs.iter().map(f).collect::<Vec<_>>());
    let cost_rate = per(&|r| r.cost_rate(inst.c));
    let profit_per_job = per(&|r| 1.0 - r.cost_rate(inst.c) / inst.lambda);
    let external_fraction = per(&|r| if r.arrivals == 0 { 0.0 } else { r.external as f64 / r.arrivals as f64 });
    let node_est = |f: &dyn Fn(&ReplicationStats, usize) -> f64| -> Vec<Estimate> {
        (0..n).map(|k| per(&|r| if r.window > 0.0 { f(r, k) / r.window } else { 0.0 })).collect()
    };
    SimReport {
        policy: policy.label(),
        regime: inst.regime,
        replications: cfg.replications,
        horizon: cfg.horizon_for(inst.lambda),
        warmup: cfg.warmup,
        seed: cfg.seed,
        cost_rate,
        profit_per_job,
        external_fraction,
        abandonment_rate: node_est(&|r, k| r.abandonments[k] as f64),
        mean_occupancy: node_est(&|r, k| r.occupancy_area[k]),
        mean_excess: node_est(&|r, k| r.excess_area[k]),
        abandonment_counts: (0..n).map(|k| runs.iter().map(|r| r.abandonments[k]).sum()).collect(),
        ci_method: "student-t 95% over replication means",
        runs,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Validation {
    pub simulated: f64,
    pub exact: f64,
    pub half_width: f64,
}

/// Simulates `policy` and compares its cost rate with the exact evaluation
/// on the truncated chain; fails outside three half-widths.
pub fn validate_against_exact(inst: &Instance, policy: &Policy, cfg: &SimConfig) -> Result<Validation> {
    let chain = build_chain(inst)?;
    let exact = evaluate_policy(&chain, policy)?.gain;
    let rep = simulate(inst, policy, cfg)?;
    let v = Validation { simulated: rep.cost_rate.mean, exact, half_width: rep.cost_rate.half_width };
    if !rep.cost_rate.contains(exact, 3.0) {
        return Err(Error::ValidationFailure { simulated: v.simulated, exact: v.exact, half_width: v.half_width });
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::queueing::{loss_rate, NodeParams};
    use crate::split::SplitVector;

    fn single(regime: DeadlineRegime) -> Instance {
        Instance::new(regime, 3.0, 0.7, 0.5, vec![NodeParams::new(2, 1.2).unwrap()]).unwrap()
    }

    fn cfg(jobs: u64, reps: usize) -> SimConfig {
        SimConfig { jobs, replications: reps, seed: 7, ..Default::default() }
    }

    #[test]
    fn same_seed_same_report() {
        let inst = Instance::base(2, DeadlineRegime::Des).unwrap();
        let p = Policy::by_name(&inst, "rb").unwrap();
        let a = simulate(&inst, &p, &cfg(5_000, 4)).unwrap();
        let b = simulate(&inst, &p, &SimConfig { exec: ExecMode::Sequential, ..cfg(5_000, 4) }).unwrap();
        assert_eq!(a, b);
        let c = simulate(&inst, &p, &SimConfig { seed: 8, ..cfg(5_000, 4) }).unwrap();
        assert_ne!(a.cost_rate.mean, c.cost_rate.mean);
    }

    #[test]
    fn flow_is_conserved() {
        for regime in [DeadlineRegime::Dbs, DeadlineRegime::Des] {
            let inst = Instance::base(1, regime).unwrap();
            let p = Policy::bernoulli(&inst).unwrap();
            let rep = simulate(&inst, &p, &cfg(20_000, 3)).unwrap();
            assert!(rep.runs.iter().all(|r| r.flow_balanced()));
            assert!(rep.cost_rate.half_width > 0.0);
        }
    }

    #[test]
    fn no_arrivals_no_cost() {
        let inst = Instance::new(DeadlineRegime::Dbs, 1e-12, 1.0, 0.5, vec![NodeParams::new(1, 1.0).unwrap()]).unwrap();
        let rep =
            simulate(&inst, &Policy::all_external(&inst), &SimConfig { horizon: Some(100.0), ..cfg(0, 2) }).unwrap();
        assert_eq!(rep.cost_rate.mean, 0.0);
        assert!(rep.runs.iter().all(|r| r.total_arrivals == 0));
    }

    #[test]
    fn single_node_matches_analytic_loss() {
        for regime in [DeadlineRegime::Dbs, DeadlineRegime::Des] {
            let inst = single(regime);
            let p = Policy::Bernoulli { split: SplitVector { rates: vec![0.0, inst.lambda] } };
            let rep = simulate(&inst, &p, &cfg(40_000, 10)).unwrap();
            let exact = loss_rate(inst.lambda, inst.nodes[0], inst.env());
            assert!(rep.abandonment_rate[0].contains(exact, 3.0), "{regime}: {:?} vs {exact}", rep.abandonment_rate[0]);
            // abandonment rate tracks theta times the exposed jobs
            let exposed = match regime {
                DeadlineRegime::Dbs => rep.mean_excess[0].mean,
                DeadlineRegime::Des => rep.mean_occupancy[0].mean,
            };
            assert!(
                (rep.abandonment_rate[0].mean - inst.theta * exposed).abs()
                    < 0.02 * exact + 3.0 * rep.abandonment_rate[0].half_width
            );
        }
    }

    #[test]
    fn all_external_costs_lambda_c() {
        let inst = Instance::base(3, DeadlineRegime::Dbs).unwrap();
        let v = validate_against_exact(&inst, &Policy::all_external(&inst), &cfg(20_000, 5)).unwrap();
        assert!((v.exact - inst.lambda * inst.c).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let inst = single(DeadlineRegime::Dbs);
        let p = Policy::all_external(&inst);
        assert!(simulate(&inst, &p, &SimConfig { replications: 0, ..cfg(10, 1) }).is_err());
        assert!(simulate(&inst, &p, &SimConfig { warmup: 0.7, ..cfg(10, 1) }).is_err());
        assert!(simulate(&inst, &p, &SimConfig { horizon: Some(-1.0), ..cfg(10, 1) }).is_err());
    }

    #[test]
    fn one_replication_has_no_interval() {
        assert!(Estimate::from_samples(&[1.0]).half_width.is_nan());
        let e = Estimate::from_samples(&[1.0, 2.0, 3.0]);
        assert_eq!(e.mean, 2.0);
        // t_{0.975, 2} = 4.302653
        assert!((e.half_width - 4.302653 / 3f64.sqrt()).abs() < 1e-5);
    }
}
