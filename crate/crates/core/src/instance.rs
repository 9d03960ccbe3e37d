//! Problem instances and their flat key-value file format.
//!
//! ```text
//! # base instance 1
//! regime = dbs
//! lambda = 60
//! theta = 0.3
//! C = 0.2
//! truncation = 80
//! node.m = 2
//! node.mu = 10
//! node.m = 5
//! node.mu = 4
//! ```
//!
//! `node.m` / `node.mu` pairs are repeated once per basic node, in order.
//! Everything after `#` on a line is ignored. An optional `name` key labels
//! the instance in reports.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::queueing::{loss_rate_deriv, AbandonmentEnv, DeadlineRegime, NodeParams};

pub const DEFAULT_TRUNCATION: usize = 80;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    #[serde(default)]
    pub name: String,
    pub regime: DeadlineRegime,
    pub lambda: f64,
    pub theta: f64,
    /// Expected cost of sending one job to the external node.
    pub c: f64,
    pub nodes: Vec<NodeParams>,
    /// Buffer bound per basic node for the exact product-chain computations.
    pub truncation: usize,
}

impl Instance {
    pub fn new(regime: DeadlineRegime, lambda: f64, theta: f64, c: f64, nodes: Vec<NodeParams>) -> Result<Self> {
        let inst = Instance { name: String::new(), regime, lambda, theta, c, nodes, truncation: DEFAULT_TRUNCATION };
        inst.validate()?;
        Ok(inst)
    }

    /// One of the three three-node base instances (`index` in 1..=3).
    pub fn base(index: usize, regime: DeadlineRegime) -> Result<Self> {
        let (lambda, mus) = match index {
            1 => (60.0, [10.0, 4.0, 2.0]),
            2 => (53.5, [8.0, 3.5, 2.0]),
            3 => (62.5, [10.0, 3.5, 2.5]),
            _ => return Err(Error::InvalidParameter(format!("no base instance {index}"))),
        };
        let nodes = [2u32, 5, 10].iter().zip(mus).map(|(&m, mu)| NodeParams { m, mu }).collect();
        let mut inst = Instance::new(regime, lambda, 0.3, 0.2, nodes)?;
        inst.name = format!("base{index}-{regime}");
        Ok(inst)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(Error::InvalidParameter(format!("lambda must be > 0, got {}", self.lambda)));
        }
        AbandonmentEnv::new(self.theta, self.regime)?;
        if !(self.c.is_finite() && self.c > 0.0) {
            return Err(Error::InvalidParameter(format!("C must be > 0, got {}", self.c)));
        }
        if self.nodes.is_empty() {
            return Err(Error::InvalidParameter("at least one basic node is required".into()));
        }
        for node in &self.nodes {
            node.validate()?;
        }
        if let Some(node) = self.nodes.iter().find(|n| (n.m as usize) > self.truncation) {
            return Err(Error::InvalidParameter(format!(
                "truncation {} is below server count {}",
                self.truncation, node.m
            )));
        }
        Ok(())
    }

    pub fn env(&self) -> AbandonmentEnv {
        AbandonmentEnv { theta: self.theta, regime: self.regime }
    }

    pub fn n(&self) -> usize {
        self.nodes.len()
    }

    /// `alpha_k = l_k'(0+)`: zero under DBS, `theta/(theta+mu_k)` under DES.
    pub fn alphas(&self) -> Vec<f64> {
        self.nodes.iter().map(|&n| loss_rate_deriv(0.0, n, self.env())).collect()
    }

    /// Node indices sorted by nondecreasing `alpha_k` (stable). Under DES
    /// this is fastest servers first; under DBS it is the identity.
    pub fn speed_order(&self) -> Vec<usize> {
        let alphas = self.alphas();
        let mut order: Vec<usize> = (0..self.n()).collect();
        order.sort_by(|&a, &b| alphas[a].total_cmp(&alphas[b]));
        order
    }

    /// Nominal load `lambda / sum_k m_k mu_k`.
    pub fn nominal_load(&self) -> f64 {
        self.lambda / self.nodes.iter().map(|n| n.capacity()).sum::<f64>()
    }

    pub fn with_regime(&self, regime: DeadlineRegime) -> Self {
        let mut inst = self.clone();
        inst.regime = regime;
        inst
    }

    /// Serialize in the instance file format.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        if !self.name.is_empty() {
            out.push_str(&format!("name = {}\n", self.name));
        }
        out.push_str(&format!("regime = {}\n", self.regime));
        out.push_str(&format!("lambda = {}\n", self.lambda));
        out.push_str(&format!("theta = {}\n", self.theta));
        out.push_str(&format!("C = {}\n", self.c));
        out.push_str(&format!("truncation = {}\n", self.truncation));
        for node in &self.nodes {
            out.push_str(&format!("node.m = {}\nnode.mu = {}\n", node.m, node.mu));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        parse_instance(text)
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        parse_instance(&text)
    }
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse { line, message: message.into() }
}

fn number<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<T> {
    value.parse::<T>().map_err(|_| parse_err(line, format!("`{key}` expects a number, got `{value}`")))
}

/// Parse the instance file format; errors carry 1-based line numbers.
pub fn parse_instance(text: &str) -> Result<Instance> {
    let mut name = String::new();
    let mut regime = None;
    let mut lambda = None;
    let mut theta = None;
    let mut c = None;
    let mut truncation = DEFAULT_TRUNCATION;
    let mut nodes: Vec<NodeParams> = Vec::new();
    let mut pending_m: Option<(usize, u32)> = None;

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| parse_err(line, format!("expected `key = value`, got `{content}`")))?;
        let (key, value) = (key.trim(), value.trim());
        if value.is_empty() {
            return Err(parse_err(line, format!("missing value for `{key}`")));
        }
        match key {
            "name" => name = value.to_string(),
            "regime" => regime = Some(value.parse::<DeadlineRegime>().map_err(|e| parse_err(line, e.to_string()))?),
            "lambda" => lambda = Some(number::<f64>(line, key, value)?),
            "theta" => theta = Some(number::<f64>(line, key, value)?),
            "C" | "c" => c = Some(number::<f64>(line, key, value)?),
            "truncation" => truncation = number::<usize>(line, key, value)?,
            "node.m" => {
                if let Some((prev, _)) = pending_m {
                    return Err(parse_err(line, format!("`node.m` on line {prev} has no matching `node.mu`")));
                }
                pending_m = Some((line, number::<u32>(line, key, value)?));
            }
            "node.mu" => {
                let (_, m) =
                    pending_m.take().ok_or_else(|| parse_err(line, "`node.mu` must follow a `node.m` line"))?;
                let mu = number::<f64>(line, key, value)?;
                let node = NodeParams::new(m, mu).map_err(|e| parse_err(line, e.to_string()))?;
                nodes.push(node);
            }
            other => return Err(parse_err(line, format!("unknown key `{other}`"))),
        }
    }
    let last = text.lines().count().max(1);
    if let Some((line, _)) = pending_m {
        return Err(parse_err(line, "`node.m` has no matching `node.mu`"));
    }
    let missing = |k: &str| parse_err(last, format!("missing required key `{k}`"));
    let inst = Instance {
        name,
        regime: regime.ok_or_else(|| missing("regime"))?,
        lambda: lambda.ok_or_else(|| missing("lambda"))?,
        theta: theta.ok_or_else(|| missing("theta"))?,
        c: c.ok_or_else(|| missing("C"))?,
        nodes,
        truncation,
    };
    inst.validate().map_err(|e| match e {
        Error::InvalidParameter(msg) => parse_err(last, msg),
        other => other,
    })?;
    Ok(inst)
}
