//! The full parameter bundle and its free-coordinate layout.
//!
//! Free coordinates are ordered
//! `(theta_2..theta_R, a_2..a_L, b_2..b_J, u_2..u_{L-1}, delta0, delta1)`.
//! With a single group `delta0` multiplies `theta_1 = 0` and is dropped from the layout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ordinal::{self, OrdinalParams};
use crate::survival::SurvivalParams;

/// Group effects `theta` (with `theta[0] = 0`), ordinal and survival parameters, and
/// mixture weights `pi`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub theta: Vec<f64>,
    pub ordinal: OrdinalParams,
    pub survival: SurvivalParams,
    pub pi: Vec<f64>,
}

impl ModelParams {
    pub fn new(theta: Vec<f64>, ordinal: OrdinalParams, survival: SurvivalParams, pi: Vec<f64>) -> Result<Self> {
        let params = Self { theta, ordinal, survival, pi };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        self.ordinal.validate()?;
        if self.theta.is_empty() {
            return Err(Error::InvalidParams("need at least one group".into()));
        }
        if self.theta[0] != 0.0 {
            return Err(Error::InvalidParams("theta of the first group must be 0".into()));
        }
        if self.theta.iter().any(|t| !t.is_finite())
            || !self.survival.delta0.is_finite()
            || !self.survival.delta1.is_finite()
        {
            return Err(Error::NonFinite("group effects or survival coefficients".into()));
        }
        if self.pi.len() != self.theta.len() {
            return Err(Error::InvalidParams(format!(
                "{} mixture weights for {} groups",
                self.pi.len(),
                self.theta.len()
            )));
        }
        if self.pi.iter().any(|p| !(p.is_finite() && *p > 0.0)) || (self.pi.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParams("mixture weights must be positive and sum to 1".into()));
        }
        Ok(())
    }

    pub fn n_groups(&self) -> usize {
        self.theta.len()
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(self.n_groups(), self.ordinal.n_levels(), self.ordinal.n_items())
    }
}

/// Dimensions of the model and the position of each free coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub groups: usize,
    pub levels: usize,
    pub items: usize,
}

impl ParamLayout {
    pub fn new(groups: usize, levels: usize, items: usize) -> Self {
        assert!(groups >= 1 && levels >= 2 && items >= 1, "invalid model dimensions");
        Self { groups, levels, items }
    }

    pub fn len(&self) -> usize {
        self.ordinal_offset() + ordinal::n_free(self.levels, self.items) + self.survival_len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn survival_len(&self) -> usize {
        if self.groups > 1 {
            2
        } else {
            1
        }
    }

    pub fn ordinal_offset(&self) -> usize {
        self.groups - 1
    }

    pub fn delta0_index(&self) -> Option<usize> {
        (self.groups > 1).then(|| self.len() - 2)
    }

    pub fn delta1_index(&self) -> usize {
        self.len() - 1
    }

    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.len());
        names.extend((2..=self.groups).map(|r| format!("theta[{r}]")));
        names.extend((2..=self.levels).map(|l| format!("a[{l}]")));
        names.extend((2..=self.items).map(|j| format!("b[{j}]")));
        names.extend((2..self.levels).map(|l| format!("phi_u[{l}]")));
        if self.groups > 1 {
            names.push("delta0".into());
        }
        names.push("delta1".into());
        names
    }

    pub fn check(&self, params: &ModelParams) -> Result<()> {
        if params.n_groups() != self.groups
            || params.ordinal.n_levels() != self.levels
            || params.ordinal.n_items() != self.items
        {
            return Err(Error::InvalidParams(format!(
                "parameters have R={}, L={}, J={}; expected R={}, L={}, J={}",
                params.n_groups(),
                params.ordinal.n_levels(),
                params.ordinal.n_items(),
                self.groups,
                self.levels,
                self.items
            )));
        }
        Ok(())
    }

    pub fn pack(&self, params: &ModelParams) -> Result<Vec<f64>> {
        self.check(params)?;
        let mut x = Vec::with_capacity(self.len());
        x.extend_from_slice(&params.theta[1..]);
        x.extend_from_slice(&params.ordinal.a()[1..]);
        x.extend_from_slice(&params.ordinal.b()[1..]);
        x.extend(params.ordinal.phi_free());
        if self.groups > 1 {
            x.push(params.survival.delta0);
        }
        x.push(params.survival.delta1);
        Ok(x)
    }

    /// Rebuilds parameters from free coordinates; `pi` (and `delta0` for one group)
    /// come from `template`.
    pub fn unpack(&self, x: &[f64], template: &ModelParams) -> ModelParams {
        assert_eq!(x.len(), self.len(), "free vector has the wrong length");
        let mut theta = Vec::with_capacity(self.groups);
        theta.push(0.0);
        theta.extend_from_slice(&x[..self.groups - 1]);
        let off_a = self.ordinal_offset();
        let off_b = off_a + self.levels - 1;
        let off_u = off_b + self.items - 1;
        let off_s = off_u + self.levels - 2;
        let ordinal = OrdinalParams::from_free(&x[off_a..off_b], &x[off_b..off_u], &x[off_u..off_s]);
        let survival = match self.delta0_index() {
            Some(k) => SurvivalParams::new(x[k], x[k + 1]),
            None => SurvivalParams::new(template.survival.delta0, x[off_s]),
        };
        ModelParams { theta, ordinal, survival, pi: template.pi.clone() }
    }

    /// Adds `weight *` an ordinal gradient over `(a, b, u, theta_r)` for group `group`.
    pub(crate) fn add_ordinal(&self, out: &mut [f64], group: usize, grad: &[f64], weight: f64) {
        let n = grad.len() - 1;
        let off = self.ordinal_offset();
        for (o, g) in out[off..off + n].iter_mut().zip(grad) {
            *o += weight * g;
        }
        if group > 0 {
            out[group - 1] += weight * grad[n];
        }
    }

    /// Adds a survival gradient over `(theta_2..theta_R, delta0, delta1)`.
    pub(crate) fn add_survival(&self, out: &mut [f64], grad: &[f64]) {
        for (o, g) in out[..self.groups - 1].iter_mut().zip(grad) {
            *o += g;
        }
        if let Some(k) = self.delta0_index() {
            out[k] += grad[self.groups - 1];
        }
        out[self.delta1_index()] += grad[self.groups];
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ModelParams {
        ModelParams::new(
            vec![0.0, 1.0, 1.5],
            OrdinalParams::from_free(&[0.2, -0.1], &[0.4], &[0.3]),
            SurvivalParams::new(0.5, -0.5),
            vec![0.2, 0.3, 0.5],
        )
        .unwrap()
    }

    #[test]
    fn pack_unpack_round_trip() {
        let p = sample();
        let layout = p.layout();
        assert_eq!(layout.len(), 2 + 2 + 1 + 1 + 2);
        let x = layout.pack(&p).unwrap();
        let back = layout.unpack(&x, &p);
        assert_eq!(back.theta, p.theta);
        assert_eq!(back.survival, p.survival);
        for (a, b) in back.ordinal.phi().iter().zip(p.ordinal.phi()) {
            assert!((a - b).abs() < 1e-14);
        }
        assert_eq!(layout.names().len(), layout.len());
        assert_eq!(layout.names()[0], "theta[2]");
    }

    #[test]
    fn single_group_drops_delta0() {
        let layout = ParamLayout::new(1, 3, 2);
        assert_eq!(layout.delta0_index(), None);
        assert_eq!(layout.names().last().unwrap(), "delta1");
        assert_eq!(layout.len(), 2 + 1 + 1 + 1);
    }

    #[test]
    fn validation() {
        let mut p = sample();
        p.pi = vec![0.5, 0.5, 0.0];
        assert!(p.validate().is_err());
        let mut p = sample();
        p.theta[0] = 0.1;
        assert!(p.validate().is_err());
    }
}
