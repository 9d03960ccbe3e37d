//! Stationary routing policies shared by the exact evaluator and the simulator.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::index::{io_index, pi_index, rb_index, route, IndexFamily, IndexTable, PiMethod};
use crate::instance::Instance;
use crate::split::{optimal_bs, SplitVector};

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Policy {
    /// State-independent random routing with probabilities `lambda_k / lambda`.
    Bernoulli { split: SplitVector },
    /// Index routing against the external cost `c`.
    Index { family: IndexFamily, tables: Vec<IndexTable>, c: f64 },
    /// Explicit action per truncated state, mixed-radix ordered over `dims`.
    Lookup { dims: Vec<usize>, actions: Vec<u16> },
}

impl Policy {
    /// Short label used in reports: `BS`, `IO`, `PI`, `RB` or `OPT`.
    pub fn label(&self) -> String {
        match self {
            Policy::Bernoulli { .. } => "BS".into(),
            Policy::Index { family, .. } => family.to_string(),
            Policy::Lookup { .. } => "OPT".into(),
        }
    }

    pub fn all_external(inst: &Instance) -> Policy {
        Policy::Bernoulli { split: SplitVector::all_external(inst.lambda, inst.n()) }
    }

    /// The optimal Bernoulli split.
    pub fn bernoulli(inst: &Instance) -> Result<Policy> {
        Ok(Policy::Bernoulli { split: optimal_bs(inst)?.split })
    }

    pub fn index(inst: &Instance, family: IndexFamily) -> Result<Policy> {
        Self::index_with(inst, family, PiMethod::default())
    }

    pub fn index_with(inst: &Instance, family: IndexFamily, pi_method: PiMethod) -> Result<Policy> {
        Ok(Policy::Index { family, tables: index_tables(inst, family, pi_method)?, c: inst.c })
    }

    /// Parse a policy name (`bs`, `io`, `pi`, `rb`, `external`).
    pub fn by_name(inst: &Instance, name: &str) -> Result<Policy> {
        match name.to_ascii_lowercase().as_str() {
            "bs" => Policy::bernoulli(inst),
            "external" => Ok(Policy::all_external(inst)),
            other => Policy::index(inst, other.parse()?),
        }
    }

    /// Routing probabilities per action `0..=n` for a deterministic rule, or
    /// `None` when the action depends on the state.
    pub fn static_probs(&self) -> Option<Vec<f64>> {
        match self {
            Policy::Bernoulli { split } => {
                let total = split.total();
                Some(split.rates.iter().map(|r| r / total).collect())
            }
            _ => None,
        }
    }

    /// Deterministic action at `state`; `None` for randomized policies.
    /// States beyond a lookup table's bounds are clamped onto it.
    pub fn action(&self, state: &[usize]) -> Option<usize> {
        match self {
            Policy::Bernoulli { .. } => None,
            Policy::Index { tables, c, .. } => Some(route(state, tables, *c).action),
            Policy::Lookup { dims, actions } => {
                let mut idx = 0;
                for (&i, &d) in state.iter().zip(dims) {
                    idx = idx * d + i.min(d - 1);
                }
                Some(actions[idx] as usize)
            }
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let ok = match self {
            Policy::Bernoulli { split } => split.rates.len() == n + 1,
            Policy::Index { tables, .. } => tables.len() == n,
            Policy::Lookup { dims, actions } => {
                dims.len() == n
                    && actions.len() == dims.iter().product::<usize>()
                    && actions.iter().all(|&a| (a as usize) <= n)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("policy {} does not fit {n} basic nodes", self.label())))
        }
    }
}

/// Per-node index tables of one family at the instance truncation.
pub fn index_tables(inst: &Instance, family: IndexFamily, pi_method: PiMethod) -> Result<Vec<IndexTable>> {
    let env = inst.env();
    let n = inst.truncation;
    let tables = match family {
        IndexFamily::IO => inst.nodes.iter().map(|&node| io_index(node, env, n)).collect(),
        IndexFamily::RB => {
            inst.nodes.iter().map(|&node| rb_index(node, env, inst.lambda, n)).collect::<Result<Vec<_>>>()?
        }
        IndexFamily::PI => {
            let bs = optimal_bs(inst)?;
            inst.nodes
                .iter()
                .zip(bs.split.basic().iter().zip(&bs.node_loss))
                .map(|(&node, (&rate, &ell))| pi_index(node, env, rate, ell, n, pi_method))
                .collect::<Result<Vec<_>>>()?
        }
    };
    Ok(tables.into_iter().enumerate().map(|(k, t)| t.with_node_id(k + 1)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::queueing::DeadlineRegime;

    #[test]
    fn labels_and_names() {
        let inst = Instance::base(2, DeadlineRegime::Dbs).unwrap();
        for (name, label) in [("bs", "BS"), ("io", "IO"), ("PI", "PI"), ("rb", "RB"), ("external", "BS")] {
            let p = Policy::by_name(&inst, name).unwrap();
            assert_eq!(p.label(), label);
            p.validate(3).unwrap();
        }
        assert!(Policy::by_name(&inst, "nope").is_err());
    }

    #[test]
    fn external_probs() {
        let inst = Instance::base(1, DeadlineRegime::Des).unwrap();
        assert_eq!(Policy::all_external(&inst).static_probs().unwrap(), vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn index_tables_are_numbered_from_one() {
        let inst = Instance::base(3, DeadlineRegime::Des).unwrap();
        let t = index_tables(&inst, IndexFamily::RB, PiMethod::default()).unwrap();
        assert_eq!(t.iter().map(|t| t.node_id).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert!(t.iter().all(|t| t.values.len() == inst.truncation + 1));
    }

    #[test]
    fn lookup_clamps_states() {
        let p = Policy::Lookup { dims: vec![2, 2], actions: vec![1, 2, 0, 1] };
        assert_eq!(p.action(&[0, 1]), Some(2));
        assert_eq!(p.action(&[7, 9]), Some(1));
    }
}
