//! A complete control problem: market, time grid, initial state, constraints,
//! dynamics and objective.

use serde::{Deserialize, Serialize};

use crate::objectives::{Objective, ObjectiveSpec, XiDomain};
use crate::recursion::{ConstraintSpec, DynamicsSpec};
use crate::scenario::{params_fingerprint, KouParams, TimeGrid};
use crate::util::hash64;
use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlProblem<T> {
    pub market: KouParams,
    pub grid: TimeGrid,
    pub w0: T,
    pub constraints: ConstraintSpec<T>,
    #[serde(default)]
    pub dynamics: DynamicsSpec,
    pub objective: ObjectiveSpec<T>,
}

impl<T: Scalar> ControlProblem<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.w0.is_finite()) {
            return Err(Error::invalid("w0", "must be finite"));
        }
        ConstraintSpec::new(
            self.constraints.q_min,
            self.constraints.q_max,
            self.constraints.assets,
        )?;
        if self.constraints.assets != 2 {
            return Err(Error::invalid(
                "assets",
                "the Kou market provides exactly one risky and one risk-free asset",
            ));
        }
        self.build_objective().map(|_| ())
    }

    pub fn build_objective(&self) -> Result<Objective<T>> {
        self.objective
            .build(self.grid.periods(), self.constraints.assets)
    }

    pub fn periods(&self) -> usize {
        self.grid.periods()
    }

    /// Fingerprint of the market and grid, as stored in dataset headers.
    pub fn market_fingerprint(&self) -> u64 {
        params_fingerprint(&self.market, &self.grid)
    }
}

impl ControlProblem<f64> {
    /// Retirement decumulation: 30 annual withdrawals in `[35, 60]` from
    /// initial wealth 1000, mean-CVaR at the 5% level with unit weight.
    pub fn decumulation() -> Self {
        Self {
            market: KouParams::calibrated(),
            grid: TimeGrid::new(30.0, 30).expect("valid grid"),
            w0: 1000.0,
            constraints: ConstraintSpec::new(35.0, 60.0, 2).expect("valid constraints"),
            dynamics: DynamicsSpec::Decumulation,
            objective: ObjectiveSpec::mean_cvar(
                0.05,
                1.0,
                XiDomain {
                    lo: -5e5,
                    hi: 5e5,
                },
            ),
        }
    }

    /// Content hash of the serialized problem.
    pub fn content_hash(&self) -> u64 {
        hash64(&serde_json::to_vec(self).expect("serializable"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decumulation_preset_is_valid() {
        let p = ControlProblem::decumulation();
        p.validate().unwrap();
        assert_eq!(p.build_objective().unwrap().dim(), 32);
    }

    #[test]
    fn json_roundtrip_and_unknown_keys() {
        let p = ControlProblem::decumulation();
        let s = serde_json::to_string(&p).unwrap();
        let back: ControlProblem<f64> = serde_json::from_str(&s).unwrap();
        assert_eq!(back, p);
        let mut v: serde_json::Value = serde_json::from_str(&s).unwrap();
        v["bogus"] = serde_json::json!(1);
        assert!(serde_json::from_value::<ControlProblem<f64>>(v).is_err());
    }
}
