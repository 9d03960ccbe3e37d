//! Routing index tables and the index routing rule.
//!
//! Three families are provided:
//!
//! * **IO**: probability that a job joining a node with `i` jobs abandons,
//!   `L(i+1)/D(i+1)`.
//! * **PI**: bias differences of the node's Poisson equation at the rate the
//!   optimal Bernoulli split assigns it.
//! * **RB**: marginal productivity index of the node's admission-control
//!   relaxation fed with the full arrival rate.
//!
//! An arriving job goes to the node with the smallest current index, ties
//! to the lowest node id, unless that index exceeds the external cost `C`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::queueing::{loss_rate_fn, AbandonmentEnv, DeadlineRegime, NodeParams, NodeStateRates};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum IndexFamily {
    IO,
    PI,
    RB,
}

impl IndexFamily {
    pub const ALL: [IndexFamily; 3] = [IndexFamily::IO, IndexFamily::PI, IndexFamily::RB];

    pub fn as_str(self) -> &'static str {
        match self {
            IndexFamily::IO => "IO",
            IndexFamily::PI => "PI",
            IndexFamily::RB => "RB",
        }
    }
}

impl std::fmt::Display for IndexFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for IndexFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "IO" => Ok(IndexFamily::IO),
            "PI" => Ok(IndexFamily::PI),
            "RB" => Ok(IndexFamily::RB),
            _ => Err(Error::InvalidParameter(format!("unknown index family `{s}` (expected io, pi or rb)"))),
        }
    }
}

/// How the PI table is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PiMethod {
    /// Plain forward recursion from state 0 with an instability monitor.
    Forward,
    /// Forward recursion below the stationary mode, backward tail sums from
    /// the mode up. Each direction only ever damps rounding error.
    #[default]
    Stabilized,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IndexProvenance {
    /// Arrival rate the table was built for (`lambda_k*` for PI, `lambda` for RB).
    pub lambda: Option<f64>,
    /// `l_k(lambda_k*)` for PI.
    pub ell: Option<f64>,
    pub pi_method: Option<PiMethod>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IndexTable {
    pub family: IndexFamily,
    pub node_id: usize,
    /// `phi(0..=N)`.
    pub values: Vec<f64>,
    pub provenance: IndexProvenance,
    /// First state at which the PI monitor tripped; values from there on are
    /// the last accepted value.
    pub unstable_from: Option<usize>,
}

impl IndexTable {
    pub fn truncation(&self) -> usize {
        self.values.len() - 1
    }

    /// `phi(i)`, with states beyond the table using `phi(N)`.
    #[inline]
    pub fn value(&self, i: usize) -> f64 {
        self.values[i.min(self.values.len() - 1)]
    }

    pub fn is_nondecreasing(&self, tol: f64) -> bool {
        self.values.windows(2).all(|w| w[1] >= w[0] - tol)
    }
}

/// `phi^IO(i) = L(i+1)/D(i+1)` for `i = 0..=n`.
pub fn io_index(node: NodeParams, env: AbandonmentEnv, n: usize) -> IndexTable {
    io_table(0, node, env, n)
}

fn io_table(node_id: usize, node: NodeParams, env: AbandonmentEnv, n: usize) -> IndexTable {
    let r = loss_rate_fn(node, env);
    let m = node.m as usize;
    let value = |i: usize| match env.regime {
        DeadlineRegime::Dbs if i < m => 0.0,
        DeadlineRegime::Dbs if i == m => env.theta / (env.theta + m as f64 * node.mu),
        DeadlineRegime::Des if i < m => env.theta / (node.mu + env.theta),
        _ => r.loss(i + 1) / r.death(i + 1),
    };
    IndexTable {
        family: IndexFamily::IO,
        node_id,
        values: (0..=n).map(value).collect(),
        provenance: IndexProvenance { lambda: None, ell: None, pi_method: None },
        unstable_from: None,
    }
}

/// PI index at node rate `lambda_node` with loss rate `ell = l(lambda_node)`.
pub fn pi_index(
    node: NodeParams,
    env: AbandonmentEnv,
    lambda_node: f64,
    ell: f64,
    n: usize,
    method: PiMethod,
) -> Result<IndexTable> {
    if !(lambda_node.is_finite() && lambda_node >= 0.0) {
        return Err(Error::InvalidParameter(format!("PI rate must be finite and >= 0, got {lambda_node}")));
    }
    if !(ell.is_finite() && ell >= 0.0) {
        return Err(Error::InvalidParameter(format!("PI loss rate must be finite and >= 0, got {ell}")));
    }
    if lambda_node == 0.0 {
        let mut t = io_table(0, node, env, n);
        t.family = IndexFamily::PI;
        t.provenance = IndexProvenance { lambda: Some(0.0), ell: Some(ell), pi_method: Some(method) };
        return Ok(t);
    }
    let r = loss_rate_fn(node, env);
    let (values, unstable_from) = match method {
        PiMethod::Forward => pi_forward(&r, lambda_node, ell, n),
        PiMethod::Stabilized => (pi_stabilized(&r, lambda_node, ell, n), None),
    };
    Ok(IndexTable {
        family: IndexFamily::PI,
        node_id: 0,
        values,
        provenance: IndexProvenance { lambda: Some(lambda_node), ell: Some(ell), pi_method: Some(method) },
        unstable_from,
    })
}

/// Bounds of the PI forward-recursion monitor.
pub const PI_MONITOR_RANGE: (f64, f64) = (-0.1, 2.0);
pub const PI_MONITOR_DROP: f64 = 1e-6;

fn pi_forward(r: &NodeStateRates, lambda: f64, ell: f64, n: usize) -> (Vec<f64>, Option<usize>) {
    let two_m = 2 * r.node().m as usize;
    let mut values = Vec::with_capacity(n + 1);
    values.push(ell / lambda);
    let mut tripped = None;
    for i in 1..=n {
        let prev = values[i - 1];
        let next = (ell - r.loss(i) + r.death(i) * prev) / lambda;
        let out_of_range = !(PI_MONITOR_RANGE.0..=PI_MONITOR_RANGE.1).contains(&next);
        let dropped = i > two_m && next < prev - PI_MONITOR_DROP;
        if out_of_range || dropped || !next.is_finite() {
            tripped = Some(i);
            values.resize(n + 1, prev);
            break;
        }
        values.push(next);
    }
    (values, tripped)
}

/// First state `i` with `D(i+1) > lambda`: the stationary distribution
/// increases up to it and decreases after.
fn stationary_mode(r: &NodeStateRates, lambda: f64) -> usize {
    let mut i = 0;
    while r.death(i + 1) <= lambda {
        i += 1;
    }
    i
}

fn pi_stabilized(r: &NodeStateRates, lambda: f64, ell: f64, n: usize) -> Vec<f64> {
    let mode = stationary_mode(r, lambda);
    let mut values = vec![0.0; n + 1];

    // below the mode: forward, each step scales the error by D(i)/lambda <= 1
    let split = mode.min(n + 1);
    let mut prev = ell / lambda;
    for (i, v) in values.iter_mut().enumerate().take(split) {
        if i > 0 {
            prev = (ell - r.loss(i) + r.death(i) * prev) / lambda;
        }
        *v = prev;
    }
    if split > n {
        return values;
    }

    // from the mode up: T(i) = (lambda/D(i+1)) (L(i+1) - ell + T(i+1)), T(top) = 0,
    // with phi(i) = T(i)/lambda and `top` far enough that p_top/p_N is negligible
    let mut top = n;
    let mut ratio = 1.0;
    while ratio > 1e-20 || (r.loss(top + 1) - ell) * ratio > 1e-20 {
        top += 1;
        ratio *= lambda / r.death(top);
        if top > n + 10_000_000 {
            break;
        }
    }
    let mut t = 0.0;
    for i in (split..top).rev() {
        t = lambda / r.death(i + 1) * (r.loss(i + 1) - ell + t);
        if i <= n {
            values[i] = t / lambda;
        }
    }
    values
}

/// Tolerance for the RB monotonicity check.
pub const RB_MONOTONE_TOL: f64 = 1e-12;

/// RB index of a node fed with the full arrival rate `lambda_total`.
pub fn rb_index(node: NodeParams, env: AbandonmentEnv, lambda_total: f64, n: usize) -> Result<IndexTable> {
    if !(lambda_total.is_finite() && lambda_total > 0.0) {
        return Err(Error::InvalidParameter(format!("RB rate must be finite and > 0, got {lambda_total}")));
    }
    let r = loss_rate_fn(node, env);
    let lam = lambda_total;
    let m = node.m as usize;
    // closed form below m; the recursion reproduces it up to rounding
    let prefix = match env.regime {
        DeadlineRegime::Dbs => 0.0,
        DeadlineRegime::Des => env.theta / (node.mu + env.theta),
    };
    let mut values = Vec::with_capacity(n + 1);
    values.push(prefix);
    let mut z = 1.0; // z(i)
    let mut g = lam * r.death(1) / (lam + r.death(1)); // g(i-1)
                                                       // From m on, the loss and death increments are both theta, and the step
                                                       // is multiplicative in psi = 1 - phi. Carrying psi keeps full relative
                                                       // accuracy as phi approaches 1.
    let mut psi = 1.0 - prefix;
    for i in 1..=n {
        let d_i = r.death(i);
        let d_next = r.death(i + 1);
        let dd = d_next - d_i;
        let carried = g * d_i / lam;
        let den = dd + carried;
        let prev = values[i - 1];
        let phi = if i < m {
            prefix
        } else {
            psi *= carried / den;
            1.0 - psi
        };
        if phi.is_nan() || phi < prev - RB_MONOTONE_TOL {
            return Err(Error::IndexabilityViolation { state: i, value: phi, previous: prev });
        }
        values.push(phi.clamp(0.0, 1.0));
        let z_next = 1.0 - lam * d_i / ((lam + d_i) * (lam + d_next) * z);
        g = lam * den / (z_next * (lam + d_next));
        z = z_next;
    }
    Ok(IndexTable {
        family: IndexFamily::RB,
        node_id: 0,
        values,
        provenance: IndexProvenance { lambda: Some(lambda_total), ell: None, pi_method: None },
        unstable_from: None,
    })
}

impl IndexTable {
    pub fn with_node_id(mut self, node_id: usize) -> Self {
        self.node_id = node_id;
        self
    }
}

/// Action `0` sends the job to the external node, `k >= 1` to basic node `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct RoutingDecision {
    pub action: usize,
}

impl RoutingDecision {
    pub const EXTERNAL: RoutingDecision = RoutingDecision { action: 0 };

    pub fn is_external(self) -> bool {
        self.action == 0
    }

    /// Zero-based basic node index, if any.
    pub fn node(self) -> Option<usize> {
        self.action.checked_sub(1)
    }
}

/// Lowest current index, ties to the lowest node id; external if it exceeds `c`.
#[inline]
pub fn route(state: &[usize], tables: &[IndexTable], c: f64) -> RoutingDecision {
    debug_assert_eq!(state.len(), tables.len());
    let mut best = f64::INFINITY;
    let mut best_k = 0;
    for (k, (t, &i)) in tables.iter().zip(state).enumerate() {
        let v = t.value(i);
        if v < best {
            best = v;
            best_k = k + 1;
        }
    }
    if best <= c {
        RoutingDecision { action: best_k }
    } else {
        RoutingDecision::EXTERNAL
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::queueing::{loss_rate, steady_state_oracle, DeadlineRegime};

    fn env(theta: f64, regime: DeadlineRegime) -> AbandonmentEnv {
        AbandonmentEnv::new(theta, regime).unwrap()
    }

    fn node(m: u32, mu: f64) -> NodeParams {
        NodeParams::new(m, mu).unwrap()
    }

    #[test]
    fn io_closed_form_prefix() {
        let nd = node(3, 2.0);
        let dbs = io_index(nd, env(0.5, DeadlineRegime::Dbs), 20);
        assert_eq!(dbs.values.len(), 21);
        assert!(dbs.values[..3].iter().all(|&v| v == 0.0));
        assert_eq!(dbs.values[3], 0.5 / (0.5 + 6.0));
        let des = io_index(nd, env(0.5, DeadlineRegime::Des), 20);
        assert!(des.values[..3].iter().all(|&v| v == 0.5 / 2.5));
        assert!(dbs.is_nondecreasing(0.0) && des.is_nondecreasing(0.0));
    }

    #[test]
    fn io_tends_to_one() {
        let nd = node(2, 1.0);
        let theta = 0.5;
        let n = 2 + (100.0 * 2.0 / theta) as usize;
        let t = io_index(nd, env(theta, DeadlineRegime::Dbs), n);
        assert!(t.values[n] >= 0.99);
    }

    #[test]
    fn pi_at_zero_rate_is_io() {
        let nd = node(4, 1.5);
        for regime in [DeadlineRegime::Dbs, DeadlineRegime::Des] {
            let e = env(0.4, regime);
            let pi = pi_index(nd, e, 0.0, 0.0, 30, PiMethod::Forward).unwrap();
            assert_eq!(pi.values, io_index(nd, e, 30).values);
        }
    }

    #[test]
    fn pi_first_value_and_methods_agree_below_mode() {
        let nd = node(3, 2.0);
        let e = env(0.5, DeadlineRegime::Dbs);
        let lam = 4.0;
        let ell = loss_rate(lam, nd, e);
        let f = pi_index(nd, e, lam, ell, 30, PiMethod::Forward).unwrap();
        let s = pi_index(nd, e, lam, ell, 30, PiMethod::Stabilized).unwrap();
        assert_eq!(f.values[0], ell / lam);
        assert_eq!(s.values[0], ell / lam);
        for i in 0..=6 {
            assert!((f.values[i] - s.values[i]).abs() < 1e-9, "{i}");
        }
    }

    #[test]
    fn pi_forward_monitor_trips_on_unstable_case() {
        let nd = node(10, 5.0);
        let e = env(0.2, DeadlineRegime::Dbs);
        let lam = 5.0;
        let ell = loss_rate(lam, nd, e);
        let f = pi_index(nd, e, lam, ell, 80, PiMethod::Forward).unwrap();
        let at = f.unstable_from.expect("monitor should trip");
        assert!(f.values[at..].iter().all(|&v| v == f.values[at - 1]));
        let s = pi_index(nd, e, lam, ell, 80, PiMethod::Stabilized).unwrap();
        assert!(s.values.iter().all(|v| (-1e-12..=1.0).contains(v)));
        assert!(s.is_nondecreasing(1e-12));
    }

    #[test]
    fn rb_closed_form_prefix() {
        let nd = node(4, 2.0);
        let dbs = rb_index(nd, env(0.3, DeadlineRegime::Dbs), 10.0, 40).unwrap();
        assert_eq!(dbs.values[0], 0.0);
        assert!(dbs.values[..4].iter().all(|&v| v == 0.0));
        assert!(dbs.values[4] > 0.0);
        let des = rb_index(nd, env(0.3, DeadlineRegime::Des), 10.0, 40).unwrap();
        let a = 0.3 / 2.3;
        assert_eq!(des.values[0], a);
        assert!(des.values[..4].iter().all(|&v| (v - a).abs() < 1e-15));
        assert!(des.values[4] > a);
    }

    /// Marginal productivity of raising the admission threshold from `j` to `j+1`.
    /// Also returns the denominator, which sets the oracle's own cancellation error.
    fn rb_oracle(nd: NodeParams, e: AbandonmentEnv, lam: f64, j: usize) -> (f64, f64) {
        let r = loss_rate_fn(nd, e);
        let at = |t: usize| {
            let d = steady_state_oracle(lam, nd, e, t);
            (d.loss_rate(&r), lam * d.probs[t])
        };
        let (l0, rej0) = at(j);
        let (l1, rej1) = at(j + 1);
        ((l1 - l0) / (rej0 - rej1), rej0 - rej1)
    }

    #[test]
    fn rb_matches_threshold_oracle() {
        for regime in [DeadlineRegime::Dbs, DeadlineRegime::Des] {
            for &(m, mu, theta, lam) in &[(2u32, 1.0, 0.5, 3.0), (5, 2.0, 1.2, 8.0), (1, 0.7, 0.3, 0.9)] {
                let nd = node(m, mu);
                let e = env(theta, regime);
                let t = rb_index(nd, e, lam, 40).unwrap();
                for j in 0..=40 {
                    let (o, den) = rb_oracle(nd, e, lam, j);
                    let tol = 1e-10 + 1e-14 * lam / den;
                    assert!((t.values[j] - o).abs() < tol, "{regime} m={m} j={j}: {} vs {o}", t.values[j]);
                }
            }
        }
    }

    #[test]
    fn rb_rejects_zero_rate() {
        assert!(rb_index(node(1, 1.0), env(1.0, DeadlineRegime::Dbs), 0.0, 5).is_err());
    }

    fn flat(family: IndexFamily, v: f64) -> IndexTable {
        IndexTable {
            family,
            node_id: 0,
            values: vec![v; 3],
            provenance: IndexProvenance { lambda: None, ell: None, pi_method: None },
            unstable_from: None,
        }
    }

    #[test]
    fn routing_rule() {
        let a = flat(IndexFamily::IO, 0.3);
        let b = flat(IndexFamily::IO, 0.3);
        assert_eq!(route(&[0, 0], &[a.clone(), b.clone()], 0.2), RoutingDecision::EXTERNAL);
        assert_eq!(route(&[0], std::slice::from_ref(&a), 0.3).action, 1);
        let c = flat(IndexFamily::IO, 0.1);
        assert_eq!(route(&[0, 0], &[c.clone(), c.clone()], 0.5).action, 1);
        let mut d = flat(IndexFamily::IO, 0.0);
        d.values = vec![0.0, 0.05, 0.6];
        assert_eq!(route(&[50, 0], &[d, c], 0.5).action, 2);
    }

    #[test]
    fn family_parsing() {
        assert_eq!("pi".parse::<IndexFamily>().unwrap(), IndexFamily::PI);
        assert!("xx".parse::<IndexFamily>().is_err());
    }
}
