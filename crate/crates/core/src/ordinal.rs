//! Ordered stereotype model for the longitudinal ordinal responses.
//!
//! Given latent group effect `theta`, the response to item `j` falls in level `l`
//! with probability proportional to `exp(a[l] + phi[l] * (b[j] + theta))`, with
//! `a[0] = b[0] = phi[0] = 0` and `phi[L-1] = 1`. Indices are zero-based in code.
//!
//! The monotone scores are carried on a free scale `u` (length `L - 2`):
//! `phi[l] = sum_{k=1..=l} e^{u_k} / sum_{k=1..L-1} e^{u_k}` with the last `u`
//! pinned to zero, so any real `u` yields `0 = phi[0] < phi[1] < ... < phi[L-1] = 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::logsumexp;

/// Intercepts `a`, category scores `phi` and item effects `b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrdinalParams {
    a: Vec<f64>,
    phi: Vec<f64>,
    b: Vec<f64>,
}

impl OrdinalParams {
    pub fn new(a: Vec<f64>, phi: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        let params = Self { a, phi, b };
        params.validate()?;
        Ok(params)
    }

    /// Builds parameters from the free coordinates `a[1..]`, `b[1..]` and `u`.
    pub fn from_free(a_free: &[f64], b_free: &[f64], u: &[f64]) -> Self {
        let mut a = Vec::with_capacity(a_free.len() + 1);
        a.push(0.0);
        a.extend_from_slice(a_free);
        let mut b = Vec::with_capacity(b_free.len() + 1);
        b.push(0.0);
        b.extend_from_slice(b_free);
        let phi = phi_from_free(u);
        debug_assert_eq!(phi.len(), a.len());
        Self { a, phi, b }
    }

    /// Equally spaced scores, zero intercepts and item effects.
    pub fn neutral(n_levels: usize, n_items: usize) -> Self {
        let u = vec![0.0; n_levels.saturating_sub(2)];
        Self::from_free(&vec![0.0; n_levels - 1], &vec![0.0; n_items - 1], &u)
    }

    pub fn validate(&self) -> Result<()> {
        let levels = self.a.len();
        if levels < 2 {
            return Err(Error::InvalidParams("need at least two response levels".into()));
        }
        if self.phi.len() != levels {
            return Err(Error::InvalidParams(format!("phi has {} entries but a has {levels}", self.phi.len())));
        }
        if self.b.is_empty() {
            return Err(Error::InvalidParams("need at least one item".into()));
        }
        if self.a.iter().chain(&self.phi).chain(&self.b).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("ordinal parameters".into()));
        }
        if self.a[0] != 0.0 || self.b[0] != 0.0 || self.phi[0] != 0.0 || self.phi[levels - 1] != 1.0 {
            return Err(Error::InvalidParams(
                "identifiability constraints a[1] = b[1] = phi[1] = 0, phi[L] = 1 violated".into(),
            ));
        }
        if self.phi.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::InvalidParams("phi must be nondecreasing".into()));
        }
        Ok(())
    }

    pub fn n_levels(&self) -> usize {
        self.a.len()
    }

    pub fn n_items(&self) -> usize {
        self.b.len()
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }

    pub fn phi(&self) -> &[f64] {
        &self.phi
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    /// Free score coordinates `u`. Ties in `phi` (the boundary of the constraint set)
    /// are mapped to gaps of `MIN_PHI_GAP`.
    pub fn phi_free(&self) -> Vec<f64> {
        let levels = self.n_levels();
        let gap = |l: usize| (self.phi[l] - self.phi[l - 1]).max(MIN_PHI_GAP).ln();
        let last = gap(levels - 1);
        (1..levels - 1).map(|l| gap(l) - last).collect()
    }

    /// Shifts every intercept by `phi[l] * shift`; paired with `theta -= shift` this
    /// leaves all category probabilities unchanged.
    pub(crate) fn absorb_group_shift(&mut self, shift: f64) {
        for (a, phi) in self.a.iter_mut().zip(&self.phi) {
            *a += phi * shift;
        }
    }
}

/// Smallest gap between consecutive scores used when mapping `phi` to free coordinates.
pub const MIN_PHI_GAP: f64 = 1e-12;

/// Maps free coordinates `u` (length `L - 2`) to the monotone scores `phi` (length `L`).
pub fn phi_from_free(u: &[f64]) -> Vec<f64> {
    let levels = u.len() + 2;
    let max = u.iter().copied().fold(0.0, f64::max);
    let weights: Vec<f64> = u.iter().map(|v| (v - max).exp()).chain([(-max).exp()]).collect();
    let total: f64 = weights.iter().sum();
    let mut phi = Vec::with_capacity(levels);
    phi.push(0.0);
    let mut running = 0.0;
    for w in &weights[..weights.len() - 1] {
        running += w;
        phi.push(running / total);
    }
    phi.push(1.0);
    phi
}

/// `d phi[l] / d u[m]` as an `L x (L-2)` row-major table.
pub(crate) fn phi_jacobian(u: &[f64]) -> Vec<f64> {
    let levels = u.len() + 2;
    let free = u.len();
    let phi = phi_from_free(u);
    let max = u.iter().copied().fold(0.0, f64::max);
    let weights: Vec<f64> = u.iter().map(|v| (v - max).exp()).chain([(-max).exp()]).collect();
    let total: f64 = weights.iter().sum();
    let mut jac = vec![0.0; levels * free];
    // phi[l] = C_l / W with C_l summing weights 1..=l; dphi[l]/du_m = w_m/W (1{m<=l} - phi[l])
    for l in 1..levels - 1 {
        for m in 0..free {
            let level_of_m = m + 1;
            let indicator = if level_of_m <= l { 1.0 } else { 0.0 };
            jac[l * free + m] = weights[m] / total * (indicator - phi[l]);
        }
    }
    jac
}

/// One observed response: item `j` at time index `m` fell in level `l` (all zero-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ResponseCell {
    pub time_index: usize,
    pub item: usize,
    pub level: usize,
}

/// The observed ordinal responses of one subject. Missing `(item, time)` cells are
/// simply absent.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResponseSet {
    cells: Vec<ResponseCell>,
}

impl ResponseSet {
    /// Rejects duplicate `(item, time_index)` cells: each observed cell records exactly one level.
    pub fn new(cells: Vec<ResponseCell>) -> Result<Self> {
        let mut keys: Vec<(usize, usize)> = cells.iter().map(|c| (c.item, c.time_index)).collect();
        keys.sort_unstable();
        if let Some(w) = keys.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::InvalidData(format!(
                "item {} at time index {} recorded more than once",
                w[0].0 + 1,
                w[0].1 + 1
            )));
        }
        Ok(Self { cells })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn cells(&self) -> &[ResponseCell] {
        &self.cells
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Number of distinct time points with at least one observed item (`M_i`).
    pub fn n_time_points(&self) -> usize {
        let mut times: Vec<usize> = self.cells.iter().map(|c| c.time_index).collect();
        times.sort_unstable();
        times.dedup();
        times.len()
    }

    pub fn check_dims(&self, n_items: usize, n_levels: usize) -> Result<()> {
        for c in &self.cells {
            if c.item >= n_items {
                return Err(Error::IndexOutOfRange { what: "item", index: c.item + 1, limit: n_items });
            }
            if c.level >= n_levels {
                return Err(Error::IndexOutOfRange { what: "level", index: c.level + 1, limit: n_levels });
            }
        }
        Ok(())
    }

    /// Item-by-level response counts; the likelihood depends on the responses only through these.
    pub fn counts(&self, n_items: usize, n_levels: usize) -> ItemLevelCounts {
        let mut counts = vec![0.0; n_items * n_levels];
        for c in &self.cells {
            counts[c.item * n_levels + c.level] += 1.0;
        }
        ItemLevelCounts { n_items, n_levels, counts }
    }
}

/// `J x L` table of response counts for one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemLevelCounts {
    n_items: usize,
    n_levels: usize,
    counts: Vec<f64>,
}

impl ItemLevelCounts {
    pub(crate) fn zeros(n_items: usize, n_levels: usize) -> Self {
        Self { n_items, n_levels, counts: vec![0.0; n_items * n_levels] }
    }

    /// Adds `weight * other`.
    pub(crate) fn add_scaled(&mut self, other: &ItemLevelCounts, weight: f64) {
        debug_assert_eq!((self.n_items, self.n_levels), (other.n_items, other.n_levels));
        for (c, o) in self.counts.iter_mut().zip(&other.counts) {
            *c += weight * o;
        }
    }

    fn row(&self, item: usize) -> &[f64] {
        &self.counts[item * self.n_levels..(item + 1) * self.n_levels]
    }
}

/// Number of free ordinal coordinates: `(L-1) + (J-1) + (L-2)`.
pub fn n_free(n_levels: usize, n_items: usize) -> usize {
    (n_levels - 1) + (n_items - 1) + (n_levels - 2)
}

fn check_point(item: usize, group_effect: f64, params: &OrdinalParams) -> Result<()> {
    if item >= params.n_items() {
        return Err(Error::IndexOutOfRange { what: "item", index: item + 1, limit: params.n_items() });
    }
    if !group_effect.is_finite() {
        return Err(Error::NonFinite("group effect".into()));
    }
    Ok(())
}

fn linear_predictors(item: usize, group_effect: f64, params: &OrdinalParams, out: &mut [f64]) {
    let shift = params.b[item] + group_effect;
    for ((s, a), phi) in out.iter_mut().zip(&params.a).zip(&params.phi) {
        *s = a + phi * shift;
    }
}

/// Log category probabilities for one item given the group effect.
pub fn log_category_probs(item: usize, group_effect: f64, params: &OrdinalParams) -> Result<Vec<f64>> {
    check_point(item, group_effect, params)?;
    let mut s = vec![0.0; params.n_levels()];
    linear_predictors(item, group_effect, params, &mut s);
    let lse = logsumexp(&s);
    Ok(s.into_iter().map(|v| v - lse).collect())
}

/// Category probabilities for one item given the group effect.
pub fn category_probs(item: usize, group_effect: f64, params: &OrdinalParams) -> Result<Vec<f64>> {
    Ok(log_category_probs(item, group_effect, params)?.into_iter().map(f64::exp).collect())
}

/// Log-likelihood of a subject's responses given its group effect.
pub fn ordinal_loglik(responses: &ResponseSet, group_effect: f64, params: &OrdinalParams) -> Result<f64> {
    responses.check_dims(params.n_items(), params.n_levels())?;
    check_point(0, group_effect, params)?;
    let counts = responses.counts(params.n_items(), params.n_levels());
    Ok(loglik_counts(&counts, group_effect, params, None))
}

/// Gradient of [`ordinal_loglik`] over `(a[1..], b[1..], u, theta)`.
pub fn ordinal_score(responses: &ResponseSet, group_effect: f64, params: &OrdinalParams) -> Result<Vec<f64>> {
    responses.check_dims(params.n_items(), params.n_levels())?;
    check_point(0, group_effect, params)?;
    let counts = responses.counts(params.n_items(), params.n_levels());
    let mut grad = vec![0.0; n_free(params.n_levels(), params.n_items()) + 1];
    let u = params.phi_free();
    let jac = phi_jacobian(&u);
    loglik_counts(&counts, group_effect, params, Some((&mut grad, &jac)));
    Ok(grad)
}

/// Log-likelihood from counts; when `grad` is given, adds the gradient over
/// `(a[1..], b[1..], u, theta)` into it.
pub(crate) fn loglik_counts(
    counts: &ItemLevelCounts,
    group_effect: f64,
    params: &OrdinalParams,
    mut grad: Option<(&mut [f64], &[f64])>,
) -> f64 {
    let levels = params.n_levels();
    let items = params.n_items();
    let n_u = levels - 2;
    let off_b = levels - 1;
    let off_u = off_b + items - 1;
    let off_theta = off_u + n_u;
    let mut s = vec![0.0; levels];
    let mut total = 0.0;
    for item in 0..items {
        let row = counts.row(item);
        let n_item: f64 = row.iter().sum();
        if n_item == 0.0 {
            continue;
        }
        linear_predictors(item, group_effect, params, &mut s);
        let lse = logsumexp(&s);
        total += row.iter().zip(&s).map(|(n, v)| n * v).sum::<f64>() - n_item * lse;
        if let Some((g, jac)) = grad.as_mut() {
            let shift = params.b[item] + group_effect;
            let mut d_shift = 0.0;
            for l in 0..levels {
                let resid = row[l] - n_item * (s[l] - lse).exp();
                if l > 0 {
                    g[l - 1] += resid;
                }
                d_shift += resid * params.phi[l];
                let d_phi = resid * shift;
                for m in 0..n_u {
                    g[off_u + m] += d_phi * jac[l * n_u + m];
                }
            }
            if item > 0 {
                g[off_b + item - 1] += d_shift;
            }
            g[off_theta] += d_shift;
        }
    }
    total
}
