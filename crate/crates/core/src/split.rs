//! Optimal Bernoulli splitting of the arrival stream.
//!
//! Each basic node `k` gets the rate `lambda_k*(alpha)` solving
//! `l_k'(lambda_k) = alpha`, and the common multiplier is
//! `alpha* = min(C, C*(lambda))` where `C*(lambda)` solves
//! `sum_k lambda_k*(alpha) = lambda`. This relies on each `l_k` being
//! increasing and strictly convex; when a root cannot be bracketed the
//! solver falls back to projected gradient descent and says so in the
//! provenance.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::instance::Instance;
use crate::queueing::{loss_rate, loss_rate_deriv, AbandonmentEnv, NodeParams};
use crate::roots::brent;

/// Tolerance on `|l'(lambda) - alpha|` for the per-node inversion.
pub const DERIV_TOL: f64 = 1e-10;
/// Distance kept from the ends of `(alpha_1, 1)` when bisecting for `C*`.
pub const C_STAR_EPS: f64 = 1e-12;
pub const C_STAR_MAX_ITER: usize = 200;

/// Rates `(lambda_0, lambda_1, ..., lambda_n)`; index 0 is the external node.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitVector {
    pub rates: Vec<f64>,
}

impl SplitVector {
    pub fn external(&self) -> f64 {
        self.rates[0]
    }

    pub fn basic(&self) -> &[f64] {
        &self.rates[1..]
    }

    pub fn total(&self) -> f64 {
        self.rates.iter().sum()
    }

    /// Everything to the external node.
    pub fn all_external(lambda: f64, n: usize) -> Self {
        let mut rates = vec![0.0; n + 1];
        rates[0] = lambda;
        SplitVector { rates }
    }

    pub fn check_feasible(&self, lambda: f64, n: usize) -> Result<()> {
        if self.rates.len() != n + 1 {
            return Err(Error::InfeasibleSplit(format!("expected {} components, got {}", n + 1, self.rates.len())));
        }
        if let Some(r) = self.rates.iter().find(|r| !(r.is_finite() && **r >= 0.0)) {
            return Err(Error::InfeasibleSplit(format!("negative or non-finite component {r}")));
        }
        let total = self.total();
        if (total - lambda).abs() > 1e-9 * lambda.max(1.0) {
            return Err(Error::InfeasibleSplit(format!("components sum to {total}, expected {lambda}")));
        }
        Ok(())
    }
}

/// Solution of the inversion `l'(lambda) = alpha`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaStar {
    Finite(f64),
    Unbounded,
}

impl LambdaStar {
    pub fn value(self) -> f64 {
        match self {
            LambdaStar::Finite(x) => x,
            LambdaStar::Unbounded => f64::INFINITY,
        }
    }
}

/// `alpha_k = l_k'(0+)`.
pub fn alpha_floor(node: NodeParams, env: AbandonmentEnv) -> f64 {
    loss_rate_deriv(0.0, node, env)
}

fn bracket_failure(node_id: usize, alpha: f64, detail: impl Into<String>) -> Error {
    Error::RootBracketFailure { node: node_id, alpha, detail: detail.into() }
}

/// Root of `l'(x) = alpha` on `(0, cap]`; returns `cap` when `l'(cap) <= alpha`,
/// meaning the root lies at or beyond `cap`.
fn invert_derivative(node_id: usize, node: NodeParams, env: AbandonmentEnv, alpha: f64, cap: f64) -> Result<f64> {
    let g = |x: f64| loss_rate_deriv(x, node, env) - alpha;
    if g(cap) <= 0.0 {
        return Ok(cap);
    }
    // geometric bracket expansion from [eps, m mu]
    let mut lo = 0.0;
    let mut hi = node.capacity().min(cap);
    while g(hi) < 0.0 {
        lo = hi;
        hi = (2.0 * hi).min(cap);
        if !hi.is_finite() || hi > 1e15 * node.capacity() {
            return Err(bracket_failure(node_id, alpha, "derivative never reaches alpha"));
        }
    }
    let root = brent(g, lo, hi, 1e-14, 1e-15, 400)
        .ok_or_else(|| bracket_failure(node_id, alpha, format!("no sign change on [{lo}, {hi}]")))?;
    let resid = g(root).abs();
    if resid > DERIV_TOL {
        return Err(bracket_failure(node_id, alpha, format!("residual {resid:e} at lambda = {root}")));
    }
    Ok(root)
}

fn lambda_star_indexed(node_id: usize, node: NodeParams, env: AbandonmentEnv, alpha: f64) -> Result<LambdaStar> {
    if alpha <= alpha_floor(node, env) {
        return Ok(LambdaStar::Finite(0.0));
    }
    if alpha >= 1.0 {
        return Ok(LambdaStar::Unbounded);
    }
    invert_derivative(node_id, node, env, alpha, f64::INFINITY).map(LambdaStar::Finite)
}

/// Inverse marginal loss rate, extended by 0 below `alpha_k` and by
/// `Unbounded` at `alpha >= 1`.
pub fn lambda_star(node: NodeParams, env: AbandonmentEnv, alpha: f64) -> Result<LambdaStar> {
    lambda_star_indexed(0, node, env, alpha)
}

/// `Lambda*(alpha) = sum_k lambda_k*(alpha)`; `+inf` for `alpha >= 1`.
pub fn big_lambda_star(inst: &Instance, alpha: f64) -> Result<f64> {
    let env = inst.env();
    let mut total = 0.0;
    for (k, &node) in inst.nodes.iter().enumerate() {
        total += lambda_star_indexed(k + 1, node, env, alpha)?.value();
    }
    Ok(total)
}

/// Per-node `min(lambda_k*(alpha), cap)`.
fn capped_rates(inst: &Instance, alpha: f64, cap: f64) -> Result<Vec<f64>> {
    let env = inst.env();
    inst.nodes
        .iter()
        .enumerate()
        .map(|(k, &node)| {
            if alpha <= alpha_floor(node, env) {
                Ok(0.0)
            } else if alpha >= 1.0 {
                Ok(cap)
            } else {
                invert_derivative(k + 1, node, env, alpha, cap)
            }
        })
        .collect()
}

/// Threshold cost `C*(lambda)`: the root of `Lambda*(alpha) = lambda` in `(alpha_1, 1)`.
pub fn c_star(inst: &Instance) -> Result<f64> {
    c_star_for(inst, inst.lambda)
}

fn c_star_for(inst: &Instance, lambda: f64) -> Result<f64> {
    let alpha_1 = inst.alphas().into_iter().fold(f64::INFINITY, f64::min);
    if lambda <= 0.0 {
        return Ok(alpha_1);
    }
    let mut lo = alpha_1 + C_STAR_EPS;
    let mut hi = 1.0 - C_STAR_EPS;
    for _ in 0..C_STAR_MAX_ITER {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let total: f64 = capped_rates(inst, mid, lambda)?.iter().sum();
        if total < lambda {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// First-order optimality residuals of a split for multiplier `alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KktResiduals {
    /// `max |l_k'(lambda_k) - alpha|` over used nodes.
    pub stationarity: f64,
    /// `max (alpha - alpha_k)^+` over unused nodes.
    pub unused_floor: f64,
    /// `(alpha - C)^+`, or `|C - alpha|` when the external node is used.
    pub external: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.unused_floor).max(self.external)
    }
}

/// Threshold below which a split component counts as unused.
fn used(rate: f64, lambda: f64) -> bool {
    rate > 1e-12 * lambda.max(1.0)
}

pub fn kkt_residuals(inst: &Instance, split: &SplitVector, alpha: f64) -> KktResiduals {
    let env = inst.env();
    let mut stationarity: f64 = 0.0;
    let mut unused_floor: f64 = 0.0;
    for (&node, &rate) in inst.nodes.iter().zip(split.basic()) {
        if used(rate, inst.lambda) {
            stationarity = stationarity.max((loss_rate_deriv(rate, node, env) - alpha).abs());
        } else {
            unused_floor = unused_floor.max(alpha - alpha_floor(node, env));
        }
    }
    let external = if used(split.external(), inst.lambda) { (inst.c - alpha).abs() } else { (alpha - inst.c).max(0.0) };
    KktResiduals { stationarity, unused_floor, external }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum SplitProvenance {
    /// Closed-form characterization through `alpha* = min(C, C*(lambda))`.
    Multiplier,
    /// Root bracketing failed; projected gradient descent on the objective.
    ProjectedGradient { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimalSplit {
    pub split: SplitVector,
    pub alpha_star: f64,
    pub c_star: f64,
    /// Loss rate `l_k(lambda_k*)` of each basic node at its optimal rate.
    pub node_loss: Vec<f64>,
    pub objective: f64,
    pub kkt: KktResiduals,
    pub provenance: SplitProvenance,
}

/// The optimal Bernoulli split.
pub fn optimal_bs(inst: &Instance) -> Result<OptimalSplit> {
    inst.validate()?;
    match optimal_bs_multiplier(inst) {
        Ok(s) => Ok(s),
        Err(Error::RootBracketFailure { node, alpha, detail }) => {
            let reason = format!("node {node} at alpha {alpha}: {detail}");
            Ok(projected_gradient_bs(inst, reason))
        }
        Err(e) => Err(e),
    }
}

fn finish(inst: &Instance, rates: Vec<f64>, alpha_star: f64, c_star: f64, provenance: SplitProvenance) -> OptimalSplit {
    let env = inst.env();
    let split = SplitVector { rates };
    let node_loss: Vec<f64> = inst.nodes.iter().zip(split.basic()).map(|(&n, &r)| loss_rate(r, n, env)).collect();
    let objective = node_loss.iter().sum::<f64>() + inst.c * split.external();
    let kkt = kkt_residuals(inst, &split, alpha_star);
    OptimalSplit { split, alpha_star, c_star, node_loss, objective, kkt, provenance }
}

fn optimal_bs_multiplier(inst: &Instance) -> Result<OptimalSplit> {
    let lambda = inst.lambda;
    let n = inst.n();
    let c_star = c_star(inst)?;
    let alpha_1 = inst.alphas().into_iter().fold(f64::INFINITY, f64::min);

    if inst.c <= alpha_1 {
        // no basic node beats the external cost even when empty
        let rates = SplitVector::all_external(lambda, n).rates;
        return Ok(finish(inst, rates, inst.c, c_star, SplitProvenance::Multiplier));
    }

    let mut rates = vec![0.0; n + 1];
    if inst.c < c_star {
        let basic = capped_rates(inst, inst.c, f64::INFINITY)?;
        let used: f64 = basic.iter().sum();
        if used < lambda {
            rates[1..].copy_from_slice(&basic);
            rates[0] = lambda - used;
            return Ok(finish(inst, rates, inst.c, c_star, SplitProvenance::Multiplier));
        }
        // C is within bisection resolution of C*: fall through to the saturated branch
    }
    let basic = capped_rates(inst, c_star, f64::INFINITY)?;
    let used: f64 = basic.iter().sum();
    if !(used > 0.0 && used.is_finite()) {
        return Err(bracket_failure(0, c_star, "saturated split has no finite basic rates"));
    }
    let scale = lambda / used;
    for (dst, r) in rates[1..].iter_mut().zip(&basic) {
        *dst = r * scale;
    }
    Ok(finish(inst, rates, c_star, c_star, SplitProvenance::Multiplier))
}

/// Euclidean projection onto `{x >= 0, sum x = total}`.
fn project_simplex(v: &[f64], total: f64) -> Vec<f64> {
    let mut u: Vec<f64> = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut shift = 0.0;
    for (j, &x) in u.iter().enumerate() {
        cum += x;
        let t = (cum - total) / (j as f64 + 1.0);
        if x - t > 0.0 {
            shift = t;
        }
    }
    v.iter().map(|x| (x - shift).max(0.0)).collect()
}

fn bs_value(inst: &Instance, x: &[f64]) -> f64 {
    let env = inst.env();
    inst.c * x[0] + inst.nodes.iter().zip(&x[1..]).map(|(&n, &r)| loss_rate(r, n, env)).sum::<f64>()
}

/// Projected gradient descent on the split objective from the uniform split.
pub fn projected_gradient_bs(inst: &Instance, reason: String) -> OptimalSplit {
    let env = inst.env();
    let n = inst.n();
    let lambda = inst.lambda;
    let mut x = vec![lambda / (n as f64 + 1.0); n + 1];
    let mut fx = bs_value(inst, &x);
    let mut step = lambda;
    for _ in 0..20_000 {
        let mut grad = vec![inst.c; n + 1];
        for (k, &node) in inst.nodes.iter().enumerate() {
            grad[k + 1] = loss_rate_deriv(x[k + 1], node, env);
        }
        let mut improved = false;
        while step > 1e-14 * lambda {
            let trial: Vec<f64> = x.iter().zip(&grad).map(|(a, g)| a - step * g).collect();
            let y = project_simplex(&trial, lambda);
            let fy = bs_value(inst, &y);
            let moved: f64 = y.iter().zip(&x).map(|(a, b)| (a - b).abs()).sum();
            if fy < fx - 1e-4 * moved * moved / step.max(f64::MIN_POSITIVE) || (fy <= fx && moved > 0.0) {
                let done = moved <= 1e-13 * lambda;
                x = y;
                fx = fy;
                improved = true;
                step *= 2.0;
                if done {
                    improved = false;
                }
                break;
            }
            step *= 0.5;
        }
        if !improved {
            break;
        }
    }
    // multiplier estimate: mean marginal cost over used components
    let mut marg = Vec::new();
    if used(x[0], lambda) {
        marg.push(inst.c);
    }
    for (k, &node) in inst.nodes.iter().enumerate() {
        if used(x[k + 1], lambda) {
            marg.push(loss_rate_deriv(x[k + 1], node, env));
        }
    }
    let alpha = if marg.is_empty() { inst.c } else { marg.iter().sum::<f64>() / marg.len() as f64 };
    finish(inst, x, alpha, f64::NAN, SplitProvenance::ProjectedGradient { reason })
}

/// `sum_k l_k(lambda_k) + C lambda_0` for a feasible split.
pub fn bs_objective(inst: &Instance, split: &SplitVector) -> Result<f64> {
    split.check_feasible(inst.lambda, inst.n())?;
    Ok(bs_value(inst, &split.rates))
}

/// Split for an arrival rate other than the instance's own (sweeps).
pub fn optimal_bs_at(inst: &Instance, lambda: f64) -> Result<OptimalSplit> {
    let mut scaled = inst.clone();
    scaled.lambda = lambda;
    optimal_bs(&scaled)
}
