//! Closed-form performance of a single M/M/m+M node.
//!
//! Deadlines to the beginning of service (DBS) are handled with Palm's formula
//! for the abandonment probability. Deadlines to the end of service (DES) are
//! reduced to DBS at server rate `mu + theta`: both regimes share the same
//! birth-death chain once the service rate is shifted.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Server pool of one basic node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeParams {
    pub m: u32,
    pub mu: f64,
}

impl NodeParams {
    pub fn new(m: u32, mu: f64) -> Result<Self> {
        let node = NodeParams { m, mu };
        node.validate()?;
        Ok(node)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::InvalidParameter("server count m must be >= 1".into()));
        }
        if !(self.mu.is_finite() && self.mu > 0.0) {
            return Err(Error::InvalidParameter(format!("service rate mu must be > 0, got {}", self.mu)));
        }
        Ok(())
    }

    /// Total service capacity `m * mu`.
    pub fn capacity(&self) -> f64 {
        self.m as f64 * self.mu
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeadlineRegime {
    /// Deadline to the beginning of service.
    Dbs,
    /// Deadline to the end of service.
    Des,
}

impl DeadlineRegime {
    pub fn as_str(self) -> &'static str {
        match self {
            DeadlineRegime::Dbs => "dbs",
            DeadlineRegime::Des => "des",
        }
    }
}

impl std::str::FromStr for DeadlineRegime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "dbs" => Ok(DeadlineRegime::Dbs),
            "des" => Ok(DeadlineRegime::Des),
            other => Err(Error::InvalidParameter(format!("unknown deadline regime `{other}` (expected dbs or des)"))),
        }
    }
}

impl std::fmt::Display for DeadlineRegime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Abandonment rate together with the deadline regime.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AbandonmentEnv {
    pub theta: f64,
    pub regime: DeadlineRegime,
}

impl AbandonmentEnv {
    pub fn new(theta: f64, regime: DeadlineRegime) -> Result<Self> {
        if !(theta.is_finite() && theta > 0.0) {
            return Err(Error::InvalidParameter(format!("abandonment rate theta must be > 0, got {theta}")));
        }
        Ok(AbandonmentEnv { theta, regime })
    }
}

/// State-indexed loss rate `L(i)` and total death rate `D(i)` of a node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeStateRates {
    node: NodeParams,
    env: AbandonmentEnv,
}

impl NodeStateRates {
    /// Total abandonment rate with `i` jobs present.
    pub fn loss(&self, i: usize) -> f64 {
        let theta = self.env.theta;
        match self.env.regime {
            DeadlineRegime::Dbs => i.saturating_sub(self.node.m as usize) as f64 * theta,
            DeadlineRegime::Des => i as f64 * theta,
        }
    }

    /// Total death rate (service completions plus abandonments) with `i` jobs present.
    pub fn death(&self, i: usize) -> f64 {
        i.min(self.node.m as usize) as f64 * self.node.mu + self.loss(i)
    }

    pub fn node(&self) -> NodeParams {
        self.node
    }

    pub fn env(&self) -> AbandonmentEnv {
        self.env
    }
}

pub fn loss_rate_fn(node: NodeParams, env: AbandonmentEnv) -> NodeStateRates {
    NodeStateRates { node, env }
}

/// Erlang-B blocking probability via the inverse recursion
/// `1/B_m = 1 + (m/r) / B_{m-1}`, which never divides by a small number.
pub fn erlang_b(m: u32, r: f64) -> f64 {
    if m == 0 {
        return 1.0;
    }
    if r <= 0.0 {
        return 0.0;
    }
    let mut inv = 1.0_f64;
    for j in 1..=m {
        inv = 1.0 + (j as f64 / r) * inv;
        if inv.is_infinite() {
            return 0.0;
        }
    }
    1.0 / inv
}

/// `C_m(r) / B_m(r) = 1 / (1 - (r/m)(1 - B_m(r)))`, finite even when `B_m` underflows.
fn erlang_c_over_b(m: u32, r: f64, b: f64) -> f64 {
    1.0 / (1.0 - (r / m as f64) * (1.0 - b))
}

/// Erlang-C formula extended to `r >= m`. For `r < m` it is the wait
/// probability of an M/M/m queue; beyond that it exceeds one and diverges.
pub fn erlang_c_ext(m: u32, r: f64) -> f64 {
    if r <= 0.0 {
        return 0.0;
    }
    let b = erlang_b(m, r);
    b * erlang_c_over_b(m, r, b)
}

/// Palm's series `W = 1 + sum_i (x^i / prod_{j<=i} (beta + j))` with
/// `x = lambda/theta`, `beta = m mu / theta`.
///
/// Summed until a term falls below `1e-15` of the partial sum (at most 10^6
/// terms). Returns `+inf` when the sum overflows, which only happens in
/// overload where `1/W` is negligible anyway.
pub fn palm_w(lambda: f64, node: NodeParams, theta: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    let x = lambda / theta;
    let beta = node.capacity() / theta;
    let mut sum = 1.0_f64;
    let mut term = 1.0_f64;
    for i in 1..=1_000_000u32 {
        term *= x / (beta + i as f64);
        sum += term;
        if !sum.is_finite() {
            return f64::INFINITY;
        }
        if term < 1e-15 * sum && (i as f64) > x - beta {
            break;
        }
    }
    sum
}

/// Intermediate quantities shared by the DBS loss rate and its derivative.
struct DbsTerms {
    b: f64,
    ratio_cb: f64,
    rho: f64,
    loss: f64,
}

fn dbs_terms(lambda: f64, node: NodeParams, theta: f64) -> DbsTerms {
    let r = lambda / node.mu;
    let rho = lambda / node.capacity();
    let b = erlang_b(node.m, r);
    let inv_w = 1.0 / palm_w(lambda, node, theta);
    // P_wait = W B / (1 + (W-1) B), rewritten in terms of 1/W.
    let p_wait = if b == 0.0 { 0.0 } else { b / (inv_w + (1.0 - inv_w) * b) };
    let p_ab = ((inv_w + rho - 1.0) * p_wait / rho).clamp(0.0, 1.0);
    DbsTerms { b, ratio_cb: erlang_c_over_b(node.m, r, b), rho, loss: lambda * p_ab }
}

/// Abandonment probability under DBS (Palm's formula). Zero at `lambda = 0`.
pub fn p_abandon_dbs(lambda: f64, node: NodeParams, theta: f64) -> f64 {
    if lambda <= 0.0 {
        return 0.0;
    }
    dbs_terms(lambda, node, theta).loss / lambda
}

fn loss_rate_dbs(lambda: f64, node: NodeParams, theta: f64) -> f64 {
    if lambda <= 0.0 {
        return 0.0;
    }
    dbs_terms(lambda, node, theta).loss
}

fn loss_rate_deriv_dbs(lambda: f64, node: NodeParams, theta: f64) -> f64 {
    if lambda <= 0.0 {
        return 0.0;
    }
    let t = dbs_terms(lambda, node, theta);
    let m = node.m as f64;
    let mu = node.mu;
    let beta = node.capacity() / theta;
    let c = t.b * t.ratio_cb;
    let per_job = t.loss / lambda;
    let d =
        c - (t.ratio_cb - 1.0 + (beta - m) * (1.0 - t.rho)) * per_job - (mu - theta) / (mu * theta) * t.loss * per_job;
    d.clamp(0.0, 1.0)
}

/// DES parameters viewed as a DBS node with server rate `mu + theta`.
fn shifted(node: NodeParams, theta: f64) -> NodeParams {
    NodeParams { m: node.m, mu: node.mu + theta }
}

/// Mean abandonment rate `l(lambda) = lambda * P_ab(lambda)`.
pub fn loss_rate(lambda: f64, node: NodeParams, env: AbandonmentEnv) -> f64 {
    if lambda <= 0.0 {
        return 0.0;
    }
    let theta = env.theta;
    let l = match env.regime {
        DeadlineRegime::Dbs => loss_rate_dbs(lambda, node, theta),
        DeadlineRegime::Des => {
            let dbs = loss_rate_dbs(lambda, shifted(node, theta), theta);
            (lambda * theta + node.mu * dbs) / (node.mu + theta)
        }
    };
    l.clamp(0.0, lambda)
}

/// Derivative `l'(lambda)`. At `lambda = 0` returns the right limit
/// (`0` under DBS, `theta/(theta+mu)` under DES).
pub fn loss_rate_deriv(lambda: f64, node: NodeParams, env: AbandonmentEnv) -> f64 {
    let theta = env.theta;
    match env.regime {
        DeadlineRegime::Dbs => loss_rate_deriv_dbs(lambda, node, theta),
        DeadlineRegime::Des => {
            let dbs = loss_rate_deriv_dbs(lambda, shifted(node, theta), theta);
            ((theta + node.mu * dbs) / (node.mu + theta)).clamp(0.0, 1.0)
        }
    }
}

/// Stationary distribution of the node's birth-death chain on `{0..N}`.
#[derive(Debug, Clone, PartialEq)]
pub struct BirthDeathDistribution {
    pub probs: Vec<f64>,
    /// Probability of the top state `N`.
    pub tail_mass: f64,
    /// Set when `tail_mass > 1e-12`: the truncation may bias the moments.
    pub truncation_warning: bool,
}

impl BirthDeathDistribution {
    pub fn expect<F: Fn(usize) -> f64>(&self, f: F) -> f64 {
        self.probs.iter().enumerate().map(|(i, p)| p * f(i)).sum()
    }

    pub fn loss_rate(&self, rates: &NodeStateRates) -> f64 {
        self.expect(|i| rates.loss(i))
    }

    pub fn mean_busy_servers(&self, m: u32) -> f64 {
        self.expect(|i| i.min(m as usize) as f64)
    }
}

/// Default truncation for the oracle: `max(400, m + ceil(20 lambda / theta))`.
pub fn default_oracle_truncation(lambda: f64, node: NodeParams, theta: f64) -> usize {
    let spread = (20.0 * lambda / theta).ceil() as usize;
    400.max(node.m as usize + spread)
}

/// Birth-death stationary distribution with birth rate `lambda` and death
/// rate `D(i)`, truncated at `n`. Independent of the closed forms above.
pub fn steady_state_oracle(lambda: f64, node: NodeParams, env: AbandonmentEnv, n: usize) -> BirthDeathDistribution {
    let rates = loss_rate_fn(node, env);
    let mut w = Vec::with_capacity(n + 1);
    w.push(1.0_f64);
    for i in 1..=n {
        let next = w[i - 1] * lambda / rates.death(i);
        w.push(next);
        if next > 1e250 {
            for v in w.iter_mut() {
                *v *= 1e-250;
            }
        }
    }
    let total: f64 = w.iter().sum();
    let probs: Vec<f64> = w.iter().map(|v| v / total).collect();
    let tail_mass = probs[n];
    BirthDeathDistribution { probs, tail_mass, truncation_warning: tail_mass > 1e-12 }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(theta: f64, regime: DeadlineRegime) -> AbandonmentEnv {
        AbandonmentEnv::new(theta, regime).unwrap()
    }

    #[test]
    fn state_rates_examples() {
        let node = NodeParams::new(2, 10.0).unwrap();
        let dbs = loss_rate_fn(node, env(0.3, DeadlineRegime::Dbs));
        assert_eq!(dbs.loss(1), 0.0);
        assert_eq!(dbs.death(1), 10.0);
        assert!((dbs.loss(5) - 0.9).abs() < 1e-15);
        assert!((dbs.death(5) - 20.9).abs() < 1e-12);
        let des = loss_rate_fn(node, env(0.3, DeadlineRegime::Des));
        assert!((des.loss(5) - 1.5).abs() < 1e-15);
        assert!((des.death(5) - 21.5).abs() < 1e-12);
        assert_eq!(dbs.loss(0), 0.0);
        assert_eq!(des.death(0), 0.0);
    }

    #[test]
    fn erlang_b_examples() {
        assert_eq!(erlang_b(0, 2.5), 1.0);
        assert!((erlang_b(1, 1.0) - 0.5).abs() < 1e-15);
        assert!((erlang_b(2, 1.0) - 0.2).abs() < 1e-15);
        assert_eq!(erlang_b(3, 0.0), 0.0);
        // forward recursion B_m = r B_{m-1} / (m + r B_{m-1}) as an independent route
        for &r in &[0.3, 4.0, 55.0] {
            let mut b = 1.0;
            for m in 1..=60u32 {
                b = r * b / (m as f64 + r * b);
                assert!((erlang_b(m, r) - b).abs() < 1e-13 * b.max(1e-300));
            }
        }
    }

    #[test]
    fn erlang_b_monotone() {
        for m in 1..30u32 {
            for k in 1..40 {
                let r = 0.25 * k as f64;
                assert!(erlang_b(m + 1, r) < erlang_b(m, r));
                assert!(erlang_b(m, r + 0.25) > erlang_b(m, r));
            }
        }
    }

    #[test]
    fn erlang_c_examples() {
        assert!(erlang_c_ext(1, 1e-12) < 1e-11);
        assert!((erlang_c_ext(2, 1.0) - 1.0 / 3.0).abs() < 1e-15);
        assert!((erlang_c_ext(4, 4.0) - 1.0).abs() < 1e-12);
        assert!(erlang_c_ext(4, 8.0) > 1.0);
    }

    #[test]
    fn erlang_c_matches_mmm_wait_probability() {
        // M/M/m wait probability from the birth-death chain (theta -> 0 is not
        // admissible, so build the chain directly)
        let m = 5u32;
        let r = 4.5;
        let mut w = vec![1.0_f64];
        for i in 1..4000usize {
            let d = i.min(m as usize) as f64;
            w.push(w[i - 1] * r / d);
        }
        let total: f64 = w.iter().sum();
        let wait: f64 = w[m as usize..].iter().sum::<f64>() / total;
        assert!((erlang_c_ext(m, r) - wait).abs() < 1e-12);
    }

    #[test]
    fn palm_w_limits() {
        let node = NodeParams::new(3, 2.0).unwrap();
        assert_eq!(palm_w(0.0, node, 0.5), 1.0);
        let lambda = 1e-4;
        let first = 1.0 + (lambda / 0.5) / (node.capacity() / 0.5 + 1.0);
        assert!((palm_w(lambda, node, 0.5) - first).abs() < 1e-9);
        assert!(palm_w(1e5, node, 0.01).is_infinite());
    }

    #[test]
    fn p_abandon_limits() {
        let node = NodeParams::new(1, 1.0).unwrap();
        assert_eq!(p_abandon_dbs(0.0, node, 1.0), 0.0);
        assert!(p_abandon_dbs(1e-9, node, 1.0) < 1e-8);
        let v = p_abandon_dbs(1.0, node, 1.0);
        assert!(v > 0.0 && v < 1.0);
        let big = NodeParams::new(3, 2.0).unwrap();
        assert!((p_abandon_dbs(100.0 * big.capacity(), big, 0.5) - 1.0).abs() < 0.05);
    }

    #[test]
    fn loss_rate_zero_limits() {
        let node = NodeParams::new(2, 10.0).unwrap();
        for regime in [DeadlineRegime::Dbs, DeadlineRegime::Des] {
            assert_eq!(loss_rate(0.0, node, env(0.3, regime)), 0.0);
        }
        assert_eq!(loss_rate_deriv(0.0, node, env(0.3, DeadlineRegime::Dbs)), 0.0);
        let alpha = loss_rate_deriv(0.0, node, env(0.3, DeadlineRegime::Des));
        assert!((alpha - 0.3 / 10.3).abs() < 1e-15);
    }

    #[test]
    fn oracle_normalized_and_point_mass() {
        let node = NodeParams::new(3, 1.5).unwrap();
        let d = steady_state_oracle(0.0, node, env(0.5, DeadlineRegime::Dbs), 50);
        assert_eq!(d.probs[0], 1.0);
        let d = steady_state_oracle(7.0, node, env(0.5, DeadlineRegime::Des), 400);
        let s: f64 = d.probs.iter().sum();
        assert!((s - 1.0).abs() < 1e-14);
        assert!(!d.truncation_warning);
        let d = steady_state_oracle(70.0, node, env(0.05, DeadlineRegime::Dbs), 400);
        assert!(d.truncation_warning);
    }

    #[test]
    fn oracle_matches_loss_rate_unit_instance() {
        let node = NodeParams::new(1, 1.0).unwrap();
        let e = env(1.0, DeadlineRegime::Dbs);
        let d = steady_state_oracle(1.0, node, e, 400);
        let oracle = d.loss_rate(&loss_rate_fn(node, e));
        let l = loss_rate(1.0, node, e);
        assert!(((l - oracle) / oracle).abs() < 1e-8);
        // l = 1/e for the M/M/1+M queue with unit rates
        assert!((l - (-1.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn parse_regime() {
        assert_eq!("DBS".parse::<DeadlineRegime>().unwrap(), DeadlineRegime::Dbs);
        assert_eq!(" des ".parse::<DeadlineRegime>().unwrap(), DeadlineRegime::Des);
        assert!("dvs".parse::<DeadlineRegime>().is_err());
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(NodeParams::new(0, 1.0).is_err());
        assert!(NodeParams::new(1, 0.0).is_err());
        assert!(AbandonmentEnv::new(-1.0, DeadlineRegime::Dbs).is_err());
    }
}
