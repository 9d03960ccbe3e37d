//! Exact average-cost computations on the truncated product chain.
//!
//! The chain is uniformized at `lambda_u = lambda + sum_k D_k(N_k)`. States
//! are mixed-radix indices with the last node varying fastest, so every
//! transition moves the index by at most the first node's stride. The
//! direct solvers exploit that band.
//!
//! An arrival sent to a node already holding `N_k` jobs is passed to the
//! external node by default, so the truncation never offers free rejections.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::instance::Instance;
use crate::policy::Policy;
use crate::queueing::loss_rate_fn;

pub const DEFAULT_STATE_CAP: usize = 5_000_000;
pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 1_000_000;
/// Direct (banded) solves are used up to this many states...
pub const DIRECT_STATE_LIMIT: usize = 100_000;
/// ...and this many `states * band^2` flops.
pub const DIRECT_WORK_LIMIT: f64 = 2e9;

const CHUNK: usize = 2048;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateSpace {
    dims: Vec<usize>,
    strides: Vec<usize>,
    len: usize,
}

impl StateSpace {
    pub fn new(dims: Vec<usize>) -> Self {
        let mut strides = vec![1; dims.len()];
        for k in (0..dims.len().saturating_sub(1)).rev() {
            strides[k] = strides[k + 1] * dims[k + 1];
        }
        let len = dims.iter().product();
        StateSpace { dims, strides, len }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    /// Largest index jump of a single transition.
    pub fn band(&self) -> usize {
        self.strides.first().copied().unwrap_or(1)
    }

    pub fn encode(&self, state: &[usize]) -> usize {
        state.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }

    pub fn decode(&self, mut idx: usize, out: &mut [usize]) {
        for (o, s) in out.iter_mut().zip(&self.strides) {
            *o = idx / s;
            idx %= s;
        }
    }

    /// Calls `f(index, state)` for `start..end` in index order.
    pub fn walk(&self, start: usize, end: usize, mut f: impl FnMut(usize, &[usize])) {
        let n = self.dims.len();
        let mut x = vec![0; n];
        self.decode(start, &mut x);
        for s in start..end {
            f(s, &x);
            let mut k = n;
            while k > 0 {
                k -= 1;
                x[k] += 1;
                if x[k] < self.dims[k] {
                    break;
                }
                x[k] = 0;
            }
        }
    }
}

/// What an arrival routed to a full node does.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    /// The arrival goes to the external node and costs `C`.
    #[default]
    External,
    /// The arrival is dropped at no cost.
    SelfLoop,
}

impl std::str::FromStr for Boundary {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "external" => Ok(Boundary::External),
            "self-loop" | "selfloop" | "self_loop" => Ok(Boundary::SelfLoop),
            _ => Err(Error::InvalidParameter(format!("unknown boundary `{s}` (expected external or self-loop)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainOptions {
    pub state_cap: usize,
    pub boundary: Boundary,
}

impl Default for ChainOptions {
    fn default() -> Self {
        ChainOptions { state_cap: DEFAULT_STATE_CAP, boundary: Boundary::default() }
    }
}

#[derive(Debug, Clone)]
pub struct UniformizedChain {
    pub lambda: f64,
    pub c: f64,
    pub lambda_u: f64,
    pub boundary: Boundary,
    pub space: StateSpace,
    loss: Vec<Vec<f64>>,
    death: Vec<Vec<f64>>,
}

pub fn build_chain(inst: &Instance) -> Result<UniformizedChain> {
    build_chain_with(inst, &ChainOptions::default())
}

pub fn build_chain_with(inst: &Instance, opts: &ChainOptions) -> Result<UniformizedChain> {
    inst.validate()?;
    let dim = inst.truncation + 1;
    let states = (0..inst.n()).try_fold(1usize, |acc, _| acc.checked_mul(dim));
    match states {
        Some(s) if s <= opts.state_cap => {}
        other => return Err(Error::StateSpaceTooLarge { states: other.unwrap_or(usize::MAX), cap: opts.state_cap }),
    }
    let env = inst.env();
    let mut loss = Vec::with_capacity(inst.n());
    let mut death = Vec::with_capacity(inst.n());
    for &node in &inst.nodes {
        let r = loss_rate_fn(node, env);
        loss.push((0..dim).map(|i| r.loss(i)).collect::<Vec<_>>());
        death.push((0..dim).map(|i| r.death(i)).collect::<Vec<_>>());
    }
    let lambda_u = inst.lambda + death.iter().map(|d| d[dim - 1]).sum::<f64>();
    Ok(UniformizedChain {
        lambda: inst.lambda,
        c: inst.c,
        lambda_u,
        boundary: opts.boundary,
        space: StateSpace::new(vec![dim; inst.n()]),
        loss,
        death,
    })
}

impl UniformizedChain {
    pub fn n(&self) -> usize {
        self.space.dims.len()
    }

    pub fn len(&self) -> usize {
        self.space.len
    }

    pub fn is_empty(&self) -> bool {
        self.space.len == 0
    }

    pub fn loss_rate(&self, k: usize, i: usize) -> f64 {
        self.loss[k][i]
    }

    pub fn death_rate(&self, k: usize, i: usize) -> f64 {
        self.death[k][i]
    }

    /// `sum_k L_k(i_k)`.
    #[inline]
    pub fn holding_cost(&self, x: &[usize]) -> f64 {
        x.iter().enumerate().map(|(k, &i)| self.loss[k][i]).sum()
    }

    /// Stage cost rate and off-diagonal rates out of state `s` under `action`.
    pub fn transitions(&self, s: usize, action: usize) -> (f64, Vec<(usize, f64)>) {
        let mut x = vec![0; self.n()];
        self.space.decode(s, &mut x);
        let mut out = Vec::new();
        for (k, &i) in x.iter().enumerate() {
            if i > 0 {
                out.push((s - self.space.strides[k], self.death[k][i]));
            }
        }
        let mut cost = self.holding_cost(&x);
        if action != 0 && x[action - 1] + 1 < self.space.dims[action - 1] {
            out.push((s + self.space.strides[action - 1], self.lambda));
        } else {
            cost += self.blocked_cost(action);
        }
        (cost, out)
    }

    /// Arrival cost rate of `action` when it cannot enter a basic node.
    #[inline]
    fn blocked_cost(&self, action: usize) -> f64 {
        if action == 0 || self.boundary == Boundary::External {
            self.lambda * self.c
        } else {
            0.0
        }
    }

    /// Holding cost plus the departure part of the Bellman operator.
    #[inline]
    fn fixed_part(&self, s: usize, x: &[usize], h: &[f64]) -> f64 {
        let hs = h[s];
        let mut u = 0.0;
        for (k, &i) in x.iter().enumerate() {
            u += self.loss[k][i];
            if i > 0 {
                u += self.death[k][i] * (h[s - self.space.strides[k]] - hs);
            }
        }
        u
    }

    /// Arrival part of the Bellman operator for `action`.
    #[inline]
    fn arrival_part(&self, s: usize, x: &[usize], h: &[f64], action: usize) -> f64 {
        if action != 0 && x[action - 1] + 1 < self.space.dims[action - 1] {
            self.lambda * (h[s + self.space.strides[action - 1]] - h[s])
        } else {
            self.blocked_cost(action)
        }
    }

    /// Minimizing action (ties to the lowest action) and its arrival part.
    #[inline]
    fn best_arrival(&self, s: usize, x: &[usize], h: &[f64]) -> (usize, f64) {
        let mut best = (0, self.lambda * self.c);
        for a in 1..=self.n() {
            let v = self.arrival_part(s, x, h, a);
            if v < best.1 {
                best = (a, v);
            }
        }
        best
    }
}

/// A policy lowered onto the chain's states.
enum Rule {
    Static(Vec<f64>),
    Table(Vec<u16>),
}

impl Rule {
    fn from_policy(chain: &UniformizedChain, policy: &Policy, exec: ExecMode) -> Result<Rule> {
        policy.validate(chain.n())?;
        if let Some(p) = policy.static_probs() {
            return Ok(Rule::Static(p));
        }
        if let Policy::Lookup { dims, actions } = policy {
            if dims == chain.space.dims() {
                return Ok(Rule::Table(actions.clone()));
            }
        }
        let mut table = vec![0u16; chain.len()];
        exec.fill_chunks(&mut table, CHUNK, |off, out| {
            chain.space.walk(off, off + out.len(), |s, x| {
                out[s - off] = policy.action(x).unwrap_or(0) as u16;
            });
        });
        Ok(Rule::Table(table))
    }

    /// `(action, probability)` pairs with positive probability at state `s`.
    #[inline]
    fn for_each(&self, s: usize, mut f: impl FnMut(usize, f64)) {
        match self {
            Rule::Static(p) => {
                for (a, &q) in p.iter().enumerate() {
                    if q > 0.0 {
                        f(a, q);
                    }
                }
            }
            Rule::Table(t) => f(t[s] as usize, 1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveMethod {
    /// Policy iteration when a direct banded solve is affordable, value iteration otherwise.
    #[default]
    Auto,
    ValueIteration,
    PolicyIteration,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Sweep {
    /// Synchronous updates; parallel across state blocks.
    #[default]
    Jacobi,
    /// In-place updates in index order; single-threaded.
    GaussSeidel,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    /// Stop once `span(U) <= tol * lambda_u`.
    pub tol: f64,
    pub max_iter: usize,
    pub method: SolveMethod,
    pub sweep: Sweep,
    pub exec: ExecMode,
    /// Reference state for relative value iteration.
    pub reference: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            method: SolveMethod::Auto,
            sweep: Sweep::Jacobi,
            exec: ExecMode::default(),
            reference: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveResult {
    /// Minimal average cost rate.
    pub gain: f64,
    /// `[min U, max U]` from the last Bellman step; contains the gain.
    pub gain_bounds: (f64, f64),
    #[serde(skip)]
    pub bias: Vec<f64>,
    #[serde(skip)]
    pub actions: Vec<u16>,
    pub iterations: usize,
    /// `span(U) / lambda_u` at exit.
    pub span: f64,
    pub method: SolveMethod,
}

impl SolveResult {
    pub fn policy(&self, chain: &UniformizedChain) -> Policy {
        Policy::Lookup { dims: chain.space.dims().to_vec(), actions: self.actions.clone() }
    }
}

fn direct_affordable(space: &StateSpace) -> bool {
    let b = space.band() as f64;
    space.len() <= DIRECT_STATE_LIMIT && space.len() as f64 * b * b <= DIRECT_WORK_LIMIT
}

/// Optimal gain and policy of the truncated chain.
pub fn solve_optimal(chain: &UniformizedChain, opts: &SolveOptions) -> Result<SolveResult> {
    solve_optimal_from(chain, opts, None)
}

/// As [`solve_optimal`]; policy iteration starts from `initial` when given.
pub fn solve_optimal_from(
    chain: &UniformizedChain,
    opts: &SolveOptions,
    initial: Option<&Policy>,
) -> Result<SolveResult> {
    if opts.reference >= chain.len() {
        return Err(Error::InvalidParameter(format!("reference state {} out of range", opts.reference)));
    }
    let method = match opts.method {
        SolveMethod::Auto if direct_affordable(&chain.space) => SolveMethod::PolicyIteration,
        SolveMethod::Auto => SolveMethod::ValueIteration,
        m => m,
    };
    match method {
        SolveMethod::PolicyIteration => {
            let start = match initial {
                Some(p) if p.static_probs().is_none() => match Rule::from_policy(chain, p, opts.exec)? {
                    Rule::Table(t) => t,
                    Rule::Static(_) => unreachable!(),
                },
                _ => vec![0u16; chain.len()],
            };
            policy_iteration(chain, opts, start)
        }
        _ => value_iteration(chain, opts),
    }
}

/// One synchronous Bellman step: writes `U` and returns `(min, max)`.
fn bellman(chain: &UniformizedChain, h: &[f64], u: &mut [f64], exec: ExecMode) -> (f64, f64) {
    exec.fill_chunks(u, CHUNK, |off, out| {
        chain.space.walk(off, off + out.len(), |s, x| {
            out[s - off] = chain.fixed_part(s, x, h) + chain.best_arrival(s, x, h).1;
        });
    });
    min_max(u)
}

fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

fn greedy_actions(chain: &UniformizedChain, h: &[f64], exec: ExecMode) -> Vec<u16> {
    let mut a = vec![0u16; chain.len()];
    exec.fill_chunks(&mut a, CHUNK, |off, out| {
        chain.space.walk(off, off + out.len(), |s, x| out[s - off] = chain.best_arrival(s, x, h).0 as u16);
    });
    a
}

fn value_iteration(chain: &UniformizedChain, opts: &SolveOptions) -> Result<SolveResult> {
    let len = chain.len();
    let lu = chain.lambda_u;
    let mut h = vec![0.0; len];
    let mut u = vec![0.0; len];
    let mut span = f64::INFINITY;
    for it in 1..=opts.max_iter {
        match opts.sweep {
            Sweep::Jacobi => {
                let (lo, hi) = bellman(chain, &h, &mut u, opts.exec);
                span = (hi - lo) / lu;
                if span <= opts.tol {
                    return Ok(finish_vi(chain, h, (lo, hi), it, span, opts.exec));
                }
                let uref = u[opts.reference];
                for (hv, uv) in h.iter_mut().zip(&u) {
                    *hv += (uv - uref) / lu;
                }
            }
            Sweep::GaussSeidel => {
                let space = &chain.space;
                let mut x = vec![0; chain.n()];
                space.decode(opts.reference, &mut x);
                let r = opts.reference;
                let g_est = chain.fixed_part(r, &x, &h) + chain.best_arrival(r, &x, &h).1;
                let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                space.walk(0, len, |s, x| {
                    let v = chain.fixed_part(s, x, &h) + chain.best_arrival(s, x, &h).1;
                    lo = lo.min(v);
                    hi = hi.max(v);
                    h[s] += (v - g_est) / lu;
                });
                if (hi - lo) / lu <= opts.tol {
                    // certify with a synchronous step
                    let (lo, hi) = bellman(chain, &h, &mut u, opts.exec);
                    span = (hi - lo) / lu;
                    if span <= opts.tol {
                        return Ok(finish_vi(chain, h, (lo, hi), it, span, opts.exec));
                    }
                }
            }
        }
    }
    Err(Error::NoConvergence { iterations: opts.max_iter, span })
}

fn finish_vi(
    chain: &UniformizedChain,
    h: Vec<f64>,
    bounds: (f64, f64),
    it: usize,
    span: f64,
    exec: ExecMode,
) -> SolveResult {
    let actions = greedy_actions(chain, &h, exec);
    SolveResult {
        gain: 0.5 * (bounds.0 + bounds.1),
        gain_bounds: bounds,
        bias: h,
        actions,
        iterations: it,
        span,
        method: SolveMethod::ValueIteration,
    }
}

fn policy_iteration(chain: &UniformizedChain, opts: &SolveOptions, mut actions: Vec<u16>) -> Result<SolveResult> {
    let len = chain.len();
    let max_iter = opts.max_iter.min(10_000);
    for it in 1..=max_iter {
        let rule = Rule::Table(actions);
        let (g, h) = poisson_direct(chain, &rule, &chain.space)?;
        let Rule::Table(current) = rule else { unreachable!() };
        // improve, keeping the incumbent action unless strictly beaten
        let scale = 1e-12 * (g.abs() + chain.lambda);
        let mut next = vec![0u16; len];
        let mut changed = false;
        chain.space.walk(0, len, |s, x| {
            let cur = current[s] as usize;
            let cur_v = chain.arrival_part(s, x, &h, cur);
            let (best, best_v) = chain.best_arrival(s, x, &h);
            if best_v < cur_v - scale {
                next[s] = best as u16;
                changed = true;
            } else {
                next[s] = cur as u16;
            }
        });
        actions = next;
        if !changed {
            let mut u = vec![0.0; len];
            let (lo, hi) = bellman(chain, &h, &mut u, opts.exec);
            let span = (hi - lo) / chain.lambda_u;
            if span > opts.tol {
                return Err(Error::NoConvergence { iterations: it, span });
            }
            return Ok(SolveResult {
                gain: g,
                gain_bounds: (lo, hi),
                bias: h,
                actions,
                iterations: it,
                span,
                method: SolveMethod::PolicyIteration,
            });
        }
    }
    Err(Error::NoConvergence { iterations: max_iter, span: f64::NAN })
}

/// Square matrix stored by diagonals `-b..=b`.
struct Band {
    n: usize,
    b: usize,
    w: usize,
    a: Vec<f64>,
}

impl Band {
    fn new(n: usize, b: usize) -> Self {
        let w = 2 * b + 1;
        Band { n, b, w, a: vec![0.0; n * w] }
    }

    #[inline]
    fn at(&self, i: usize, j: usize) -> usize {
        i * self.w + j + self.b - i
    }

    #[inline]
    fn get(&self, i: usize, j: usize) -> f64 {
        self.a[self.at(i, j)]
    }

    #[inline]
    fn add(&mut self, i: usize, j: usize, v: f64) {
        let k = self.at(i, j);
        self.a[k] += v;
    }

    /// In-place LU without pivoting; valid for (negated) nonsingular M-matrices.
    fn lu(&mut self) {
        let (n, b) = (self.n, self.b);
        for k in 0..n {
            let piv = self.get(k, k);
            let end = (k + b + 1).min(n);
            for i in k + 1..end {
                let l = self.get(i, k) / piv;
                if l == 0.0 {
                    continue;
                }
                let (ik, kk) = (self.at(i, k), self.at(k, k));
                self.a[ik] = l;
                for d in 1..end - k {
                    let v = self.a[kk + d];
                    if v != 0.0 {
                        self.a[ik + d] -= l * v;
                    }
                }
            }
        }
    }

    fn solve(&self, rhs: &mut [f64]) {
        let (n, b) = (self.n, self.b);
        for i in 0..n {
            let lo = i.saturating_sub(b);
            let mut v = rhs[i];
            for (j, &r) in rhs.iter().enumerate().take(i).skip(lo) {
                v -= self.get(i, j) * r;
            }
            rhs[i] = v;
        }
        for i in (0..n).rev() {
            let hi = (i + b + 1).min(n);
            let mut v = rhs[i];
            for (j, &r) in rhs.iter().enumerate().take(hi).skip(i + 1) {
                v -= self.get(i, j) * r;
            }
            rhs[i] = v / self.get(i, i);
        }
    }
}

/// Visits the off-diagonal rates and the cost rate of `s` under `rule`.
/// `space` is either the chain's own or a reachable box inside it.
#[inline]
fn visit_rates(
    chain: &UniformizedChain,
    rule: &Rule,
    space: &StateSpace,
    full_index: usize,
    s: usize,
    x: &[usize],
    mut f: impl FnMut(usize, f64),
) -> f64 {
    for (k, &i) in x.iter().enumerate() {
        if i > 0 {
            f(s - space.strides[k], chain.death[k][i]);
        }
    }
    let mut cost = chain.holding_cost(x);
    rule.for_each(full_index, |a, p| {
        if a != 0 && x[a - 1] + 1 < space.dims[a - 1] {
            f(s + space.strides[a - 1], p * chain.lambda);
        } else if a == 0 || x[a - 1] + 1 == chain.space.dims[a - 1] {
            cost += p * chain.blocked_cost(a);
        }
        // otherwise the move leaves a reachable box from an unreachable state
    });
    cost
}

/// Gain and bias of a policy by banded direct solves on `chain.space`.
///
/// The gain comes from the stationary distribution; the bias is pinned to
/// zero at the stationary mode, which keeps the reduced system well
/// conditioned even when the empty state is rarely visited.
fn poisson_direct(chain: &UniformizedChain, rule: &Rule, space: &StateSpace) -> Result<(f64, Vec<f64>)> {
    let len = space.len();
    let pi = stationary_gth(chain, rule, space, space);
    let mut cost = vec![0.0; len];
    space.walk(0, len, |s, x| cost[s] = visit_rates(chain, rule, space, s, s, x, |_, _| {}));
    let g: f64 = pi.iter().zip(&cost).map(|(p, c)| p * c).sum();
    if len == 1 {
        return Ok((g, vec![0.0]));
    }
    let r = pi.iter().enumerate().fold(0, |best, (s, &p)| if p > pi[best] { s } else { best });
    let row = |s: usize| if s < r { s } else { s - 1 };
    let mut band = Band::new(len - 1, space.band());
    space.walk(0, len, |s, x| {
        if s == r {
            return;
        }
        let mut out = 0.0;
        visit_rates(chain, rule, space, s, s, x, |t, q| {
            out += q;
            if t != r {
                band.add(row(s), row(t), q);
            }
        });
        band.add(row(s), row(s), -out);
    });
    band.lu();
    let mut rhs: Vec<f64> = (0..len).filter(|&s| s != r).map(|s| g - cost[s]).collect();
    band.solve(&mut rhs);
    if !(g.is_finite() && rhs.iter().all(|v| v.is_finite())) {
        return Err(Error::NoConvergence { iterations: 0, span: f64::NAN });
    }
    let mut h = vec![0.0; len];
    for s in (0..len).filter(|&s| s != r) {
        h[s] = rhs[row(s)];
    }
    Ok((g, h))
}

/// Stationary distribution on `space` by banded state reduction (GTH).
fn stationary_gth(chain: &UniformizedChain, rule: &Rule, space: &StateSpace, full: &StateSpace) -> Vec<f64> {
    let len = space.len();
    let b = space.band();
    let mut band = Band::new(len, b);
    space.walk(0, len, |s, x| {
        let fi = full.encode(x);
        visit_rates(chain, rule, space, fi, s, x, |t, q| band.add(s, t, q));
    });
    let mut out_low = vec![0.0; len];
    for s in (1..len).rev() {
        let lo = s.saturating_sub(b);
        let total: f64 = (lo..s).map(|j| band.get(s, j)).sum();
        out_low[s] = total;
        for i in lo..s {
            let a_is = band.get(i, s);
            if a_is == 0.0 {
                continue;
            }
            let f = a_is / total;
            for j in lo..s {
                if j != i {
                    let v = band.get(s, j);
                    if v != 0.0 {
                        band.add(i, j, f * v);
                    }
                }
            }
        }
    }
    let mut pi = vec![0.0; len];
    pi[0] = 1.0;
    for s in 1..len {
        let lo = s.saturating_sub(b);
        let inflow: f64 = (lo..s).map(|i| pi[i] * band.get(i, s)).sum();
        pi[s] = inflow / out_low[s];
        if pi[s] > 1e250 {
            pi[..=s].iter_mut().for_each(|p| *p *= 1e-250);
        }
    }
    let z: f64 = pi.iter().sum();
    pi.iter_mut().for_each(|p| *p /= z);
    pi
}

/// Smallest box `{0..=M_k}` containing every state reachable from empty.
fn reachable_box(chain: &UniformizedChain, rule: &Rule) -> Vec<usize> {
    let space = &chain.space;
    let n = chain.n();
    let mut seen = vec![false; space.len()];
    let mut stack = vec![0usize];
    seen[0] = true;
    let mut maxima = vec![0usize; n];
    let mut x = vec![0; n];
    while let Some(s) = stack.pop() {
        space.decode(s, &mut x);
        for k in 0..n {
            maxima[k] = maxima[k].max(x[k]);
        }
        let mut push = |t: usize| {
            if !seen[t] {
                seen[t] = true;
                stack.push(t);
            }
        };
        for (k, &i) in x.iter().enumerate() {
            if i > 0 {
                push(s - space.strides[k]);
            }
        }
        rule.for_each(s, |a, _| {
            if a > 0 && x[a - 1] + 1 < space.dims[a - 1] {
                push(s + space.strides[a - 1]);
            }
        });
    }
    maxima.iter().map(|m| m + 1).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMethod {
    /// Independent birth-death chains (state-independent routing).
    ProductForm,
    /// Banded state reduction on the reachable box.
    Direct,
    /// Policy-restricted relative value iteration.
    Iterative,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub policy: String,
    /// Average cost rate.
    pub gain: f64,
    pub profit_per_job: f64,
    pub method: EvalMethod,
    /// States in the solved system.
    pub states: usize,
    pub iterations: usize,
    /// Flow-balance residual for direct solves, `span(U)/lambda_u` otherwise.
    pub residual: f64,
    /// Long-run fraction of arrivals sent to the external node, when known.
    pub external_fraction: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub exec: ExecMode,
    /// Skip the direct methods.
    pub force_iterative: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { tol: DEFAULT_TOL, max_iter: DEFAULT_MAX_ITER, exec: ExecMode::default(), force_iterative: false }
    }
}

pub fn evaluate_policy(chain: &UniformizedChain, policy: &Policy) -> Result<EvalReport> {
    evaluate_policy_with(chain, policy, &EvalOptions::default())
}

pub fn evaluate_policy_with(chain: &UniformizedChain, policy: &Policy, opts: &EvalOptions) -> Result<EvalReport> {
    let rule = Rule::from_policy(chain, policy, opts.exec)?;
    let report = |gain: f64, method, states, iterations, residual, external_fraction| EvalReport {
        policy: policy.label(),
        gain,
        profit_per_job: profit_per_job(gain, chain.lambda),
        method,
        states,
        iterations,
        residual,
        external_fraction,
    };
    if !opts.force_iterative {
        if let Rule::Static(p) = &rule {
            let gain = product_form_gain(chain, p);
            return Ok(report(gain, EvalMethod::ProductForm, chain.len(), 0, 0.0, Some(p[0])));
        }
        let dims = reachable_box(chain, &rule);
        let sub = StateSpace::new(dims);
        if direct_affordable(&sub) {
            let pi = stationary_gth(chain, &rule, &sub, &chain.space);
            let (gain, ext, resid) = stationary_summary(chain, &rule, &sub, &pi);
            return Ok(report(gain, EvalMethod::Direct, sub.len(), 0, resid, Some(ext)));
        }
    }
    let (gain, it, span) = evaluate_iterative(chain, &rule, opts)?;
    Ok(report(gain, EvalMethod::Iterative, chain.len(), it, span, None))
}

fn product_form_gain(chain: &UniformizedChain, probs: &[f64]) -> f64 {
    let mut gain = chain.lambda * chain.c * probs[0];
    for k in 0..chain.n() {
        let rate = chain.lambda * probs[k + 1];
        let n = chain.space.dims[k] - 1;
        let mut w = 1.0;
        let (mut z, mut l) = (1.0, chain.loss[k][0]);
        for i in 1..=n {
            w *= rate / chain.death[k][i];
            z += w;
            l += w * chain.loss[k][i];
        }
        gain += l / z + rate * (w / z) * chain.blocked_cost(k + 1) / chain.lambda;
    }
    gain
}

/// Gain, external fraction and max flow-balance residual of `pi` on `space`.
fn stationary_summary(chain: &UniformizedChain, rule: &Rule, space: &StateSpace, pi: &[f64]) -> (f64, f64, f64) {
    let mut gain = 0.0;
    let mut ext = 0.0;
    let mut balance = vec![0.0; space.len()];
    space.walk(0, space.len(), |s, x| {
        let fi = chain.space.encode(x);
        let c = visit_rates(chain, rule, space, fi, s, x, |t, q| {
            balance[t] += pi[s] * q;
            balance[s] -= pi[s] * q;
        });
        gain += pi[s] * c;
        rule.for_each(fi, |a, p| {
            if a == 0 {
                ext += pi[s] * p;
            }
        });
    });
    let resid = balance.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    (gain, ext, resid)
}

fn evaluate_iterative(chain: &UniformizedChain, rule: &Rule, opts: &EvalOptions) -> Result<(f64, usize, f64)> {
    let len = chain.len();
    let lu = chain.lambda_u;
    let mut h = vec![0.0; len];
    let mut u = vec![0.0; len];
    let mut span = f64::INFINITY;
    for it in 1..=opts.max_iter {
        opts.exec.fill_chunks(&mut u, CHUNK, |off, out| {
            chain.space.walk(off, off + out.len(), |s, x| {
                let mut v = chain.fixed_part(s, x, &h);
                rule.for_each(s, |a, p| v += p * chain.arrival_part(s, x, &h, a));
                out[s - off] = v;
            });
        });
        let (lo, hi) = min_max(&u);
        span = (hi - lo) / lu;
        if span <= opts.tol {
            return Ok((0.5 * (lo + hi), it, span));
        }
        let u0 = u[0];
        for (hv, uv) in h.iter_mut().zip(&u) {
            *hv += (uv - u0) / lu;
        }
    }
    Err(Error::NoConvergence { iterations: opts.max_iter, span })
}

/// Stationary distribution of a policy over the chain's full state space.
pub fn stationary_distribution(chain: &UniformizedChain, policy: &Policy) -> Result<Vec<f64>> {
    let rule = Rule::from_policy(chain, policy, ExecMode::Sequential)?;
    let dims = reachable_box(chain, &rule);
    let sub = StateSpace::new(dims);
    if !direct_affordable(&sub) {
        return Err(Error::StateSpaceTooLarge { states: sub.len(), cap: DIRECT_STATE_LIMIT });
    }
    let pi_box = stationary_gth(chain, &rule, &sub, &chain.space);
    let mut pi = vec![0.0; chain.len()];
    sub.walk(0, sub.len(), |s, x| pi[chain.space.encode(x)] = pi_box[s]);
    Ok(pi)
}

/// Gain and bias of a deterministic or randomized policy by a direct solve.
pub fn poisson_solution(chain: &UniformizedChain, policy: &Policy) -> Result<(f64, Vec<f64>)> {
    if !direct_affordable(&chain.space) {
        return Err(Error::StateSpaceTooLarge { states: chain.len(), cap: DIRECT_STATE_LIMIT });
    }
    let rule = Rule::from_policy(chain, policy, ExecMode::Sequential)?;
    poisson_direct(chain, &rule, &chain.space)
}

/// Profit per job `z = (lambda - g) / lambda`.
pub fn profit_per_job(gain: f64, lambda: f64) -> f64 {
    (lambda - gain) / lambda
}

/// Percent deviation `100 (z* - z) / z*`.
pub fn optimality_gap(z_star: f64, z_pi: f64) -> Result<f64> {
    if z_star.is_nan() || z_star <= 0.0 {
        return Err(Error::DegenerateBaseline(z_star));
    }
    Ok(100.0 * (z_star - z_pi) / z_star)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::queueing::{DeadlineRegime, NodeParams};

    fn toy(n_trunc: usize, regime: DeadlineRegime) -> Instance {
        let mut inst = Instance::new(regime, 1.5, 0.8, 0.6, vec![NodeParams::new(1, 1.0).unwrap()]).unwrap();
        inst.truncation = n_trunc;
        inst
    }

    #[test]
    fn state_space_round_trip() {
        let sp = StateSpace::new(vec![3, 4, 2]);
        assert_eq!(sp.len(), 24);
        assert_eq!(sp.strides(), &[8, 2, 1]);
        let mut x = vec![0; 3];
        let mut seen = 0;
        sp.walk(0, 24, |s, y| {
            sp.decode(s, &mut x);
            assert_eq!(x, y);
            assert_eq!(sp.encode(y), s);
            seen += 1;
        });
        assert_eq!(seen, 24);
    }

    #[test]
    fn tiny_generator_by_hand() {
        let chain = build_chain(&toy(2, DeadlineRegime::Dbs)).unwrap();
        assert_eq!(chain.len(), 3);
        // empty state: only the arrival
        assert_eq!(chain.transitions(0, 1), (0.0, vec![(1, 1.5)]));
        assert_eq!(chain.transitions(0, 0), (1.5 * 0.6, vec![]));
        // one job in service
        assert_eq!(chain.transitions(1, 1), (0.0, vec![(0, 1.0), (2, 1.5)]));
        // full: death = mu + theta, arrival passed on at cost C
        let (c, out) = chain.transitions(2, 1);
        assert!((c - (0.8 + 1.5 * 0.6)).abs() < 1e-15);
        assert_eq!(out.len(), 1);
        assert!((out[0].1 - 1.8).abs() < 1e-15);
        assert!((chain.lambda_u - (1.5 + 1.8)).abs() < 1e-15);
    }

    #[test]
    fn state_cap_enforced() {
        let mut inst = Instance::base(1, DeadlineRegime::Dbs).unwrap();
        inst.truncation = 200;
        let err = build_chain(&inst).unwrap_err();
        assert!(matches!(err, Error::StateSpaceTooLarge { .. }));
    }

    #[test]
    fn band_lu_matches_dense() {
        // tridiagonal M-matrix
        let n = 6;
        let mut b = Band::new(n, 1);
        for i in 0..n {
            b.add(i, i, 3.0 + i as f64);
            if i > 0 {
                b.add(i, i - 1, -1.0);
            }
            if i + 1 < n {
                b.add(i, i + 1, -1.5);
            }
        }
        let dense = |x: &[f64]| -> Vec<f64> {
            (0..n)
                .map(|i| {
                    let mut v = (3.0 + i as f64) * x[i];
                    if i > 0 {
                        v -= x[i - 1];
                    }
                    if i + 1 < n {
                        v -= 1.5 * x[i + 1];
                    }
                    v
                })
                .collect()
        };
        let want = vec![1.0, -2.0, 0.5, 3.0, 0.0, 1.0];
        let mut rhs = dense(&want);
        b.lu();
        b.solve(&mut rhs);
        for (a, w) in rhs.iter().zip(&want) {
            assert!((a - w).abs() < 1e-13);
        }
    }

    #[test]
    fn methods_agree_on_small_instance() {
        let mut inst = Instance::new(
            DeadlineRegime::Dbs,
            6.0,
            0.5,
            0.4,
            vec![NodeParams::new(2, 2.0).unwrap(), NodeParams::new(1, 1.5).unwrap()],
        )
        .unwrap();
        inst.truncation = 12;
        let chain = build_chain(&inst).unwrap();
        let base = SolveOptions { tol: 1e-12, ..Default::default() };
        let pi = solve_optimal(&chain, &SolveOptions { method: SolveMethod::PolicyIteration, ..base }).unwrap();
        let vi = solve_optimal(&chain, &SolveOptions { method: SolveMethod::ValueIteration, ..base }).unwrap();
        let gs = solve_optimal(
            &chain,
            &SolveOptions { method: SolveMethod::ValueIteration, sweep: Sweep::GaussSeidel, ..base },
        )
        .unwrap();
        assert!((pi.gain - vi.gain).abs() < 1e-9, "{} vs {}", pi.gain, vi.gain);
        assert!((gs.gain - vi.gain).abs() < 1e-9);
        let ev = evaluate_policy(&chain, &pi.policy(&chain)).unwrap();
        assert_eq!(ev.method, EvalMethod::Direct);
        assert!((ev.gain - pi.gain).abs() < 1e-9);
        let it = evaluate_policy_with(
            &chain,
            &pi.policy(&chain),
            &EvalOptions { tol: 1e-12, force_iterative: true, ..Default::default() },
        )
        .unwrap();
        assert!((it.gain - pi.gain).abs() < 1e-9);
    }

    #[test]
    fn all_external_costs_lambda_c() {
        let mut inst = Instance::base(2, DeadlineRegime::Des).unwrap();
        inst.truncation = 10;
        let chain = build_chain(&inst).unwrap();
        let ev = evaluate_policy(&chain, &Policy::all_external(&inst)).unwrap();
        assert_eq!(ev.gain, inst.lambda * inst.c);
        assert_eq!(ev.external_fraction, Some(1.0));
    }

    #[test]
    fn gap_arithmetic() {
        assert_eq!(optimality_gap(0.8, 0.8).unwrap(), 0.0);
        assert!((optimality_gap(0.8, 0.76).unwrap() - 5.0).abs() < 1e-12);
        assert!(matches!(optimality_gap(0.0, 0.1), Err(Error::DegenerateBaseline(_))));
    }

    #[test]
    fn full_node_boundary_conventions() {
        let mut inst = toy(3, DeadlineRegime::Dbs);
        inst.c = 5.0;
        let ext = build_chain(&inst).unwrap();
        assert_eq!(ext.boundary, Boundary::External);
        let (cost, out) = ext.transitions(3, 1);
        assert!((cost - (0.8 * 2.0 + 1.5 * 5.0)).abs() < 1e-12);
        assert_eq!(out.len(), 1);
        let free =
            build_chain_with(&inst, &ChainOptions { boundary: Boundary::SelfLoop, ..Default::default() }).unwrap();
        let res = solve_optimal(&free, &SolveOptions::default()).unwrap();
        assert_eq!(res.actions[3], 1);
        let res = solve_optimal(&ext, &SolveOptions::default()).unwrap();
        assert_eq!(res.actions[3], 0);
    }

    #[test]
    fn product_form_matches_direct_solve() {
        for boundary in [Boundary::External, Boundary::SelfLoop] {
            let mut inst = Instance::new(
                DeadlineRegime::Des,
                7.0,
                0.4,
                0.5,
                vec![NodeParams::new(2, 1.0).unwrap(), NodeParams::new(1, 2.0).unwrap()],
            )
            .unwrap();
            inst.truncation = 6;
            let chain = build_chain_with(&inst, &ChainOptions { boundary, ..Default::default() }).unwrap();
            let bs = Policy::bernoulli(&inst).unwrap();
            let pf = evaluate_policy(&chain, &bs).unwrap();
            assert_eq!(pf.method, EvalMethod::ProductForm);
            let (g, _) = poisson_solution(&chain, &bs).unwrap();
            assert!((pf.gain - g).abs() < 1e-10, "{boundary:?}: {} vs {g}", pf.gain);
        }
    }
}
