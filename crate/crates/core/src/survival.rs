//! Cox proportional-hazards component with a discrete nonparametric baseline.
//!
//! Subject `i` in latent group `r` has hazard `lambda0(t) * exp(theta_r * delta0 + x_i * delta1)`.
//! The baseline is profiled out: with responsibilities `gamma` held fixed it is the
//! Breslow-type step function with a jump `D_k / S0_k` at each distinct observed time,
//! where `D_k` counts events at the time and `S0_k` is the responsibility-weighted risk set.
//!
//! Survival gradients use the fixed layout `(theta_2..theta_R, delta0, delta1)`, so
//! their length is `R + 1`. For group `r` the direction vector `v_r` holds `delta0`
//! in the slot of `theta_r` (when `r > 1`), `theta_r` in the `delta0` slot and the
//! covariate in the `delta1` slot.

use serde::{Deserialize, Serialize};

use crate::em::Posterior;
use crate::error::{Error, Result};

/// Observed time, event flag (true = failure observed) and covariate of one subject.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurvivalRecord {
    pub time: f64,
    pub event: bool,
    pub covariate: f64,
}

impl SurvivalRecord {
    pub fn new(time: f64, event: bool, covariate: f64) -> Result<Self> {
        if !(time.is_finite() && time > 0.0) {
            return Err(Error::InvalidData(format!("survival time must be positive, got {time}")));
        }
        if !covariate.is_finite() {
            return Err(Error::NonFinite("covariate".into()));
        }
        Ok(Self { time, event, covariate })
    }
}

/// Coefficients on the latent group effect (`delta0`) and on the covariate (`delta1`).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SurvivalParams {
    pub delta0: f64,
    pub delta1: f64,
}

impl SurvivalParams {
    pub fn new(delta0: f64, delta1: f64) -> Self {
        Self { delta0, delta1 }
    }

    #[inline]
    pub fn linear_predictor(&self, group_effect: f64, covariate: f64) -> f64 {
        group_effect * self.delta0 + covariate * self.delta1
    }
}

/// Length of survival gradients for `groups` latent groups.
pub fn gradient_len(groups: usize) -> usize {
    groups + 1
}

/// Direction vector `v_r` (derivative of the linear predictor over the survival layout).
pub fn direction(group: usize, theta: &[f64], covariate: f64, delta: &SurvivalParams) -> Vec<f64> {
    let groups = theta.len();
    let mut v = vec![0.0; gradient_len(groups)];
    if group > 0 {
        v[group - 1] = delta.delta0;
    }
    v[groups - 1] = theta[group];
    v[groups] = covariate;
    v
}

/// Distinct observed times in ascending order, each subject's slot on that grid and
/// the number of events per slot.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    times: Vec<f64>,
    slot: Vec<usize>,
    events: Vec<f64>,
}

impl TimeGrid {
    pub fn new(records: &[SurvivalRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::InvalidData("no subjects".into()));
        }
        let mut times: Vec<f64> = records.iter().map(|r| r.time).collect();
        times.sort_by(f64::total_cmp);
        times.dedup();
        let slot: Vec<usize> = records.iter().map(|r| times.partition_point(|&t| t < r.time)).collect();
        let mut events = vec![0.0; times.len()];
        for (rec, &k) in records.iter().zip(&slot) {
            if rec.event {
                events[k] += 1.0;
            }
        }
        Ok(Self { times, slot, events })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn slot(&self, subject: usize) -> usize {
        self.slot[subject]
    }

    pub fn events(&self) -> &[f64] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// A cumulative baseline hazard `Lambda(t)` with `Lambda(0) = 0`.
pub trait CumulativeHazard {
    fn cumulative(&self, t: f64) -> f64;

    /// Log of the hazard intensity at `t` (density part of an observed failure),
    /// or `None` when the hazard puts no mass there.
    fn log_intensity(&self, t: f64) -> Option<f64>;
}

/// Baseline hazard as jumps at ordered time points. Censored-only times carry zero jumps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "HazardStepsRepr", into = "HazardStepsRepr")]
pub struct HazardSteps {
    event_times: Vec<f64>,
    jumps: Vec<f64>,
    cumulative: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct HazardStepsRepr {
    event_times: Vec<f64>,
    jumps: Vec<f64>,
}

impl TryFrom<HazardStepsRepr> for HazardSteps {
    type Error = Error;

    fn try_from(repr: HazardStepsRepr) -> Result<Self> {
        HazardSteps::new(repr.event_times, repr.jumps)
    }
}

impl From<HazardSteps> for HazardStepsRepr {
    fn from(h: HazardSteps) -> Self {
        Self { event_times: h.event_times, jumps: h.jumps }
    }
}

impl HazardSteps {
    pub fn new(event_times: Vec<f64>, jumps: Vec<f64>) -> Result<Self> {
        if event_times.len() != jumps.len() {
            return Err(Error::InvalidParams("hazard times and jumps differ in length".into()));
        }
        if event_times.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(Error::InvalidParams("hazard times must be positive".into()));
        }
        if event_times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidParams("hazard times must be strictly increasing".into()));
        }
        if jumps.iter().any(|j| !(j.is_finite() && *j >= 0.0)) {
            return Err(Error::InvalidParams("hazard jumps must be finite and nonnegative".into()));
        }
        let cumulative = jumps
            .iter()
            .scan(0.0, |acc, j| {
                *acc += j;
                Some(*acc)
            })
            .collect();
        Ok(Self { event_times, jumps, cumulative })
    }

    pub fn event_times(&self) -> &[f64] {
        &self.event_times
    }

    pub fn jumps(&self) -> &[f64] {
        &self.jumps
    }

    /// `Lambda` at each time point.
    pub fn cumulative_values(&self) -> &[f64] {
        &self.cumulative
    }

    pub fn total_mass(&self) -> f64 {
        self.cumulative.last().copied().unwrap_or(0.0)
    }

    /// Jump at exactly `t`, if `t` is one of the time points.
    pub fn jump_at(&self, t: f64) -> Option<f64> {
        let k = self.event_times.partition_point(|&s| s < t);
        (k < self.event_times.len() && self.event_times[k] == t).then(|| self.jumps[k])
    }

    /// Every jump multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.event_times.clone(), self.jumps.iter().map(|j| j * factor).collect())
    }
}

impl CumulativeHazard for HazardSteps {
    fn cumulative(&self, t: f64) -> f64 {
        cum_hazard(self, t)
    }

    fn log_intensity(&self, t: f64) -> Option<f64> {
        self.jump_at(t).filter(|&j| j > 0.0).map(f64::ln)
    }
}

/// Right-continuous cumulative hazard `Lambda(t) = sum of jumps at times <= t`.
pub fn cum_hazard(haz: &HazardSteps, t: f64) -> f64 {
    let k = haz.event_times.partition_point(|&s| s <= t);
    if k == 0 {
        0.0
    } else {
        haz.cumulative[k - 1]
    }
}

/// Parametric baseline hazards used for simulation and as known truth in diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Baseline {
    Constant {
        rate: f64,
    },
    /// Rate `rates[k]` on `(breaks[k-1], breaks[k]]`, with `breaks[-1] = 0` and the
    /// last rate extending to infinity; `rates.len() == breaks.len() + 1`.
    PiecewiseConstant {
        breaks: Vec<f64>,
        rates: Vec<f64>,
    },
}

impl Baseline {
    pub fn validate(&self) -> Result<()> {
        match self {
            Baseline::Constant { rate } => {
                if !(rate.is_finite() && *rate > 0.0) {
                    return Err(Error::InvalidDesign(format!("baseline rate must be positive, got {rate}")));
                }
            }
            Baseline::PiecewiseConstant { breaks, rates } => {
                if rates.len() != breaks.len() + 1 {
                    return Err(Error::InvalidDesign("piecewise baseline needs one more rate than breaks".into()));
                }
                if rates.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
                    return Err(Error::InvalidDesign("baseline rates must be positive".into()));
                }
                if breaks.iter().any(|b| !(b.is_finite() && *b > 0.0)) || breaks.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::InvalidDesign("baseline breaks must be positive and increasing".into()));
                }
            }
        }
        Ok(())
    }

    fn rate_at(&self, t: f64) -> f64 {
        match self {
            Baseline::Constant { rate } => *rate,
            Baseline::PiecewiseConstant { breaks, rates } => rates[breaks.partition_point(|&b| b < t)],
        }
    }

    /// Solves `Lambda(t) = target` for `t`.
    pub fn inverse_cumulative(&self, target: f64) -> f64 {
        match self {
            Baseline::Constant { rate } => target / rate,
            Baseline::PiecewiseConstant { breaks, rates } => {
                let mut start = 0.0;
                let mut acc = 0.0;
                for (b, r) in breaks.iter().zip(rates) {
                    let mass = r * (b - start);
                    if acc + mass >= target {
                        return start + (target - acc) / r;
                    }
                    acc += mass;
                    start = *b;
                }
                start + (target - acc) / rates[rates.len() - 1]
            }
        }
    }
}

impl CumulativeHazard for Baseline {
    fn cumulative(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        match self {
            Baseline::Constant { rate } => rate * t,
            Baseline::PiecewiseConstant { breaks, rates } => {
                let mut start = 0.0;
                let mut acc = 0.0;
                for (b, r) in breaks.iter().zip(rates) {
                    if t <= *b {
                        return acc + r * (t - start);
                    }
                    acc += r * (b - start);
                    start = *b;
                }
                acc + rates[rates.len() - 1] * (t - start)
            }
        }
    }

    fn log_intensity(&self, t: f64) -> Option<f64> {
        Some(self.rate_at(t).ln())
    }
}

/// Responsibility-weighted risk-set aggregates at one time, normalized by `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskAggregates {
    pub m0: f64,
    pub m1: Vec<f64>,
}

fn check_shapes(records: &[SurvivalRecord], gamma: &Posterior, theta: &[f64]) -> Result<()> {
    if gamma.n_subjects() != records.len() || gamma.n_groups() != theta.len() {
        return Err(Error::InvalidData(format!(
            "posterior is {}x{}, expected {}x{}",
            gamma.n_subjects(),
            gamma.n_groups(),
            records.len(),
            theta.len()
        )));
    }
    Ok(())
}

/// `M0(t) = n^-1 sum_i 1{T_i >= t} sum_r gamma_ir exp(eta_ir)` and the matching
/// first-moment vector `M1(t)` over the survival gradient layout, by direct summation.
pub fn risk_aggregates(
    t: f64,
    records: &[SurvivalRecord],
    gamma: &Posterior,
    theta: &[f64],
    delta: &SurvivalParams,
) -> Result<RiskAggregates> {
    check_shapes(records, gamma, theta)?;
    let n = records.len() as f64;
    let mut m0 = 0.0;
    let mut m1 = vec![0.0; gradient_len(theta.len())];
    let mut at_risk = false;
    for (i, rec) in records.iter().enumerate() {
        if rec.time < t {
            continue;
        }
        at_risk = true;
        for (r, &g) in gamma.row(i).iter().enumerate() {
            let w = g * delta.linear_predictor(theta[r], rec.covariate).exp();
            m0 += w;
            for (acc, v) in m1.iter_mut().zip(direction(r, theta, rec.covariate, delta)) {
                *acc += w * v;
            }
        }
    }
    if !at_risk {
        return Err(Error::EmptyRiskSet { time: t });
    }
    Ok(RiskAggregates { m0: m0 / n, m1: m1.into_iter().map(|v| v / n).collect() })
}

/// Risk-set sums `S0_k`, `S1_k` (unnormalized) at every grid time.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateTable {
    n: usize,
    dim: usize,
    s0: Vec<f64>,
    s1: Vec<f64>,
}

impl AggregateTable {
    /// Builds all grid sums in one pass with reverse cumulative sums.
    pub fn build(
        grid: &TimeGrid,
        records: &[SurvivalRecord],
        gamma: &Posterior,
        theta: &[f64],
        delta: &SurvivalParams,
    ) -> Result<Self> {
        check_shapes(records, gamma, theta)?;
        let groups = theta.len();
        let dim = gradient_len(groups);
        let k = grid.len();
        let mut s0 = vec![0.0; k];
        let mut s1 = vec![0.0; k * dim];
        for (i, rec) in records.iter().enumerate() {
            let slot = grid.slot(i);
            let row = gamma.row(i);
            let out = &mut s1[slot * dim..(slot + 1) * dim];
            let mut total = 0.0;
            for r in 0..groups {
                let w = row[r] * delta.linear_predictor(theta[r], rec.covariate).exp();
                total += w;
                if r > 0 {
                    out[r - 1] += delta.delta0 * w;
                }
                out[groups - 1] += theta[r] * w;
            }
            out[groups] += rec.covariate * total;
            s0[slot] += total;
        }
        for slot in (0..k.saturating_sub(1)).rev() {
            s0[slot] += s0[slot + 1];
            for d in 0..dim {
                s1[slot * dim + d] += s1[(slot + 1) * dim + d];
            }
        }
        Ok(Self { n: records.len(), dim, s0, s1 })
    }

    /// Same table from [`risk_aggregates`] evaluated at each grid time.
    pub fn brute_force(
        grid: &TimeGrid,
        records: &[SurvivalRecord],
        gamma: &Posterior,
        theta: &[f64],
        delta: &SurvivalParams,
    ) -> Result<Self> {
        let n = records.len();
        let dim = gradient_len(theta.len());
        let mut s0 = Vec::with_capacity(grid.len());
        let mut s1 = Vec::with_capacity(grid.len() * dim);
        for &t in grid.times() {
            let agg = risk_aggregates(t, records, gamma, theta, delta)?;
            s0.push(agg.m0 * n as f64);
            s1.extend(agg.m1.iter().map(|v| v * n as f64));
        }
        Ok(Self { n, dim, s0, s1 })
    }

    pub fn len(&self) -> usize {
        self.s0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s0.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn s0(&self, slot: usize) -> f64 {
        self.s0[slot]
    }

    pub fn s1(&self, slot: usize) -> &[f64] {
        &self.s1[slot * self.dim..(slot + 1) * self.dim]
    }

    pub fn m0(&self, slot: usize) -> f64 {
        self.s0[slot] / self.n as f64
    }

    pub fn m1(&self, slot: usize) -> Vec<f64> {
        self.s1(slot).iter().map(|v| v / self.n as f64).collect()
    }

    /// `M1 / M0` at a grid slot.
    pub fn ratio(&self, slot: usize) -> Vec<f64> {
        let s0 = self.s0[slot];
        self.s1(slot).iter().map(|v| v / s0).collect()
    }
}

fn hazard_from_table(grid: &TimeGrid, table: &AggregateTable) -> Result<HazardSteps> {
    let mut jumps = Vec::with_capacity(grid.len());
    for (k, &d) in grid.events().iter().enumerate() {
        if d == 0.0 {
            jumps.push(0.0);
            continue;
        }
        let s0 = table.s0(k);
        if !(s0 > 0.0) {
            return Err(Error::EmptyRiskSet { time: grid.times()[k] });
        }
        jumps.push(d / s0);
    }
    HazardSteps::new(grid.times().to_vec(), jumps)
}

/// Profiled baseline: jump `D_k / S0_k` at each distinct event time (Breslow ties),
/// zero at censored-only times.
pub fn profile_hazard(
    grid: &TimeGrid,
    records: &[SurvivalRecord],
    gamma: &Posterior,
    theta: &[f64],
    delta: &SurvivalParams,
) -> Result<HazardSteps> {
    let table = AggregateTable::build(grid, records, gamma, theta, delta)?;
    hazard_from_table(grid, &table)
}

/// Survival log-likelihood of one subject in group `group` under hazard `haz`:
/// `d (log lambda(T) + eta) - Lambda(T) exp(eta)`.
pub fn survival_loglik<H: CumulativeHazard + ?Sized>(
    rec: &SurvivalRecord,
    group: usize,
    haz: &H,
    theta: &[f64],
    delta: &SurvivalParams,
) -> Result<f64> {
    let eta = delta.linear_predictor(theta[group], rec.covariate);
    let mut ll = -haz.cumulative(rec.time) * eta.exp();
    if rec.event {
        let log_jump = haz.log_intensity(rec.time).ok_or(Error::InvalidHazard { time: rec.time })?;
        ll += log_jump + eta;
    }
    Ok(ll)
}

/// Everything the profile score needs at one `(gamma, theta, delta)` point: the
/// aggregate table, the profiled hazard and the running integral of `lambda_k S1_k / S0_k`.
#[derive(Debug, Clone)]
pub struct ProfileAggregates {
    table: AggregateTable,
    hazard: HazardSteps,
    drift: Vec<f64>,
}

impl ProfileAggregates {
    pub fn new(
        grid: &TimeGrid,
        records: &[SurvivalRecord],
        gamma: &Posterior,
        theta: &[f64],
        delta: &SurvivalParams,
    ) -> Result<Self> {
        let table = AggregateTable::build(grid, records, gamma, theta, delta)?;
        let hazard = hazard_from_table(grid, &table)?;
        let dim = table.dim();
        let mut drift = vec![0.0; grid.len() * dim];
        let mut running = vec![0.0; dim];
        for k in 0..grid.len() {
            let jump = hazard.jumps()[k];
            if jump > 0.0 {
                let s0 = table.s0(k);
                for (acc, s1) in running.iter_mut().zip(table.s1(k)) {
                    *acc += jump * s1 / s0;
                }
            }
            drift[k * dim..(k + 1) * dim].copy_from_slice(&running);
        }
        Ok(Self { table, hazard, drift })
    }

    pub fn table(&self) -> &AggregateTable {
        &self.table
    }

    pub fn hazard(&self) -> &HazardSteps {
        &self.hazard
    }

    pub fn into_hazard(self) -> HazardSteps {
        self.hazard
    }

    fn drift(&self, slot: usize) -> &[f64] {
        let dim = self.table.dim();
        &self.drift[slot * dim..(slot + 1) * dim]
    }
}

/// Profile log-likelihood contribution of one subject with the profiled hazard
/// (`gamma`-weighted over groups).
pub(crate) fn profile_loglik_obs(
    rec: &SurvivalRecord,
    slot: usize,
    gamma_row: &[f64],
    agg: &ProfileAggregates,
    theta: &[f64],
    delta: &SurvivalParams,
) -> f64 {
    let cum = agg.hazard.cumulative[slot];
    let log_jump = if rec.event { agg.hazard.jumps[slot].ln() } else { 0.0 };
    gamma_row
        .iter()
        .enumerate()
        .map(|(r, &g)| {
            let eta = delta.linear_predictor(theta[r], rec.covariate);
            let d = if rec.event { log_jump + eta } else { 0.0 };
            g * (d - cum * eta.exp())
        })
        .sum()
}

/// Derivative of one subject's profile log-likelihood over `(theta_2..theta_R, delta0, delta1)`
/// with `gamma` held fixed and the baseline re-profiled:
/// `sum_r gamma_r { d [v_r - S1/S0 (T)] - exp(eta_r) [Lambda(T) v_r - sum_{t_k <= T} lambda_k S1_k/S0_k] }`.
pub fn survival_profile_score(
    rec: &SurvivalRecord,
    slot: usize,
    gamma_row: &[f64],
    agg: &ProfileAggregates,
    theta: &[f64],
    delta: &SurvivalParams,
) -> Vec<f64> {
    let dim = agg.table.dim();
    let mut score = vec![0.0; dim];
    let cum = agg.hazard.cumulative[slot];
    let drift = agg.drift(slot);
    let s0 = agg.table.s0(slot);
    let s1 = agg.table.s1(slot);
    for (r, &g) in gamma_row.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let v = direction(r, theta, rec.covariate, delta);
        let e = delta.linear_predictor(theta[r], rec.covariate).exp();
        for k in 0..dim {
            let mut term = -e * (cum * v[k] - drift[k]);
            if rec.event {
                // d/dbeta log lambda(T) = -S1/S0
                term += v[k] - s1[k] / s0;
            }
            score[k] += g * term;
        }
    }
    score
}

/// Sum over subjects of [`profile_loglik_obs`]; when `grad` is given, adds the sum of
/// [`survival_profile_score`] into it.
pub(crate) fn profile_loglik_total(
    records: &[SurvivalRecord],
    grid: &TimeGrid,
    gamma: &Posterior,
    agg: &ProfileAggregates,
    theta: &[f64],
    delta: &SurvivalParams,
    mut grad: Option<&mut [f64]>,
) -> f64 {
    let groups = theta.len();
    let dim = agg.table.dim();
    let mut value = 0.0;
    for (i, rec) in records.iter().enumerate() {
        let slot = grid.slot(i);
        let cum = agg.hazard.cumulative[slot];
        let d = if rec.event { 1.0 } else { 0.0 };
        let log_jump = if rec.event { agg.hazard.jumps[slot].ln() } else { 0.0 };
        let mut weighted_exp = 0.0;
        for (r, &g) in gamma.row(i).iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let eta = delta.linear_predictor(theta[r], rec.covariate);
            let e = eta.exp();
            value += g * (d * (log_jump + eta) - cum * e);
            if let Some(out) = grad.as_deref_mut() {
                // v_r enters as v_r (d - e Lambda(T))
                let c = g * (d - e * cum);
                if r > 0 {
                    out[r - 1] += c * delta.delta0;
                }
                out[groups - 1] += c * theta[r];
                out[groups] += c * rec.covariate;
                weighted_exp += g * e;
            }
        }
        if let Some(out) = grad.as_deref_mut() {
            let drift = agg.drift(slot);
            let s0 = agg.table.s0(slot);
            let s1 = agg.table.s1(slot);
            for k in 0..dim {
                out[k] += weighted_exp * drift[k] - d * s1[k] / s0;
            }
        }
    }
    value
}

/// Efficient score of the survival part for a given cumulative hazard and aggregates:
/// `sum_r gamma_r d [v_r - M1/M0 (T)] - sum_r gamma_r exp(eta_r) int_0^T [v_r - M1/M0] dLambda`.
/// `M1/M0` is piecewise constant between grid times, so the integral is an exact sum
/// of hazard increments over `(t_{k-1}, t_k]`.
#[allow(clippy::too_many_arguments)]
pub fn efficient_score_survival<H: CumulativeHazard + ?Sized>(
    rec: &SurvivalRecord,
    slot: usize,
    gamma_row: &[f64],
    hazard: &H,
    grid: &TimeGrid,
    table: &AggregateTable,
    theta: &[f64],
    delta: &SurvivalParams,
) -> Vec<f64> {
    let dim = table.dim();
    // integral of M1/M0 and of 1 over (0, T]
    let mut centered = vec![0.0; dim];
    let mut mass = 0.0;
    let mut previous = 0.0;
    for k in 0..=slot {
        let current = hazard.cumulative(grid.times()[k]);
        let increment = current - previous;
        previous = current;
        if increment == 0.0 {
            continue;
        }
        mass += increment;
        for (acc, ratio) in centered.iter_mut().zip(table.ratio(k)) {
            *acc += ratio * increment;
        }
    }
    let ratio_at_t = table.ratio(slot);
    let mut score = vec![0.0; dim];
    for (r, &g) in gamma_row.iter().enumerate() {
        let v = direction(r, theta, rec.covariate, delta);
        let e = delta.linear_predictor(theta[r], rec.covariate).exp();
        for k in 0..dim {
            let event_part = if rec.event { v[k] - ratio_at_t[k] } else { 0.0 };
            score[k] += g * (event_part - e * (v[k] * mass - centered[k]));
        }
    }
    score
}

#[cfg(test)]
mod tests {
    use super::*;

    fn records(times: &[f64], events: &[bool], covs: &[f64]) -> Vec<SurvivalRecord> {
        times.iter().zip(events).zip(covs).map(|((&t, &e), &x)| SurvivalRecord::new(t, e, x).unwrap()).collect()
    }

    fn one_group(n: usize) -> Posterior {
        Posterior::new(vec![1.0; n], 1).unwrap()
    }

    #[test]
    fn nelson_aalen_example() {
        let recs = records(&[1.0, 2.0, 3.0], &[true, true, false], &[0.0; 3]);
        let grid = TimeGrid::new(&recs).unwrap();
        let haz = profile_hazard(&grid, &recs, &one_group(3), &[0.0], &SurvivalParams::default()).unwrap();
        assert_eq!(haz.jumps(), &[1.0 / 3.0, 0.5, 0.0]);
        assert!((cum_hazard(&haz, 3.0) - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(cum_hazard(&haz, 0.5), 0.0);
        assert!((cum_hazard(&haz, 2.0) - 5.0 / 6.0).abs() < 1e-15);
        assert!((cum_hazard(&haz, 1.5) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(cum_hazard(&haz, 10.0), haz.total_mass());

        let ll = survival_loglik(&recs[1], 0, &haz, &[0.0], &SurvivalParams::default()).unwrap();
        assert!((ll - (-1.526_480_513_893_278_7)).abs() < 1e-12);
        let censored = survival_loglik(&recs[2], 0, &haz, &[0.0], &SurvivalParams::default()).unwrap();
        assert!((censored + 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn no_events_means_zero_hazard() {
        let recs = records(&[1.0, 2.0], &[false, false], &[0.3, -0.2]);
        let grid = TimeGrid::new(&recs).unwrap();
        let haz = profile_hazard(&grid, &recs, &one_group(2), &[0.0], &SurvivalParams::new(0.0, 1.0)).unwrap();
        assert!(haz.jumps().iter().all(|&j| j == 0.0));
        assert_eq!(cum_hazard(&haz, 5.0), 0.0);
    }

    #[test]
    fn ties_share_one_jump() {
        let recs = records(&[1.0, 1.0, 2.0, 2.0], &[true, true, false, true], &[0.0; 4]);
        let grid = TimeGrid::new(&recs).unwrap();
        let haz = profile_hazard(&grid, &recs, &one_group(4), &[0.0], &SurvivalParams::default()).unwrap();
        assert_eq!(haz.event_times(), &[1.0, 2.0]);
        assert_eq!(haz.jumps(), &[0.5, 0.5]);
    }

    #[test]
    fn doubling_the_risk_weights_halves_jumps() {
        let recs = records(&[0.5, 1.2, 2.0, 2.5], &[true, false, true, true], &[0.2, -1.0, 0.4, 0.0]);
        let grid = TimeGrid::new(&recs).unwrap();
        let gamma = Posterior::new(vec![0.3, 0.7, 0.5, 0.5, 0.9, 0.1, 0.2, 0.8], 2).unwrap();
        let delta = SurvivalParams::new(0.4, -0.3);
        let base = profile_hazard(&grid, &recs, &gamma, &[0.0, 1.0], &delta).unwrap();
        // exp(eta + ln 2) doubles every weighted exponential
        let shifted = SurvivalParams::new(0.4, -0.3);
        let recs2: Vec<_> = recs.iter().map(|r| SurvivalRecord { covariate: r.covariate, ..*r }).collect();
        let theta2 = [2f64.ln() / 0.4, 1.0 + 2f64.ln() / 0.4];
        let doubled = profile_hazard(&grid, &recs2, &gamma, &theta2, &shifted).unwrap();
        for (a, b) in base.jumps().iter().zip(doubled.jumps()) {
            assert!((a / 2.0 - b).abs() < 1e-14);
        }
    }

    #[test]
    fn risk_aggregates_by_hand() {
        let recs = records(&[1.0, 2.0, 3.0], &[true, true, false], &[0.0; 3]);
        let agg = risk_aggregates(2.0, &recs, &one_group(3), &[0.0], &SurvivalParams::default()).unwrap();
        assert!((agg.m0 - 2.0 / 3.0).abs() < 1e-15);
        assert!(matches!(
            risk_aggregates(3.5, &recs, &one_group(3), &[0.0], &SurvivalParams::default()),
            Err(Error::EmptyRiskSet { .. })
        ));

        // two groups, gamma = ((0.3, 0.7), (0.6, 0.4)), theta = (0, 1), delta = (1, 0)
        let recs = records(&[1.0, 2.0], &[true, false], &[0.5, -0.5]);
        let gamma = Posterior::new(vec![0.3, 0.7, 0.6, 0.4], 2).unwrap();
        let delta = SurvivalParams::new(1.0, 0.0);
        let e = std::f64::consts::E;
        let agg = risk_aggregates(0.5, &recs, &gamma, &[0.0, 1.0], &delta).unwrap();
        let m0 = (0.3 + 0.7 * e + 0.6 + 0.4 * e) / 2.0;
        assert!((agg.m0 - m0).abs() < 1e-15);
        // layout (theta_2, delta0, delta1): theta_2 slot gets delta0 * gamma_i2 e
        let m1 = [
            (0.7 * e + 0.4 * e) / 2.0,
            (0.7 * e + 0.4 * e) / 2.0,
            (0.5 * (0.3 + 0.7 * e) - 0.5 * (0.6 + 0.4 * e)) / 2.0,
        ];
        for (a, b) in agg.m1.iter().zip(m1) {
            assert!((a - b).abs() < 1e-15);
        }
        let late = risk_aggregates(1.5, &recs, &gamma, &[0.0, 1.0], &delta).unwrap();
        assert!((late.m0 - (0.6 + 0.4 * e) / 2.0).abs() < 1e-15);

        let grid = TimeGrid::new(&recs).unwrap();
        let fast = AggregateTable::build(&grid, &recs, &gamma, &[0.0, 1.0], &delta).unwrap();
        let slow = AggregateTable::brute_force(&grid, &recs, &gamma, &[0.0, 1.0], &delta).unwrap();
        for k in 0..grid.len() {
            assert!((fast.m0(k) - slow.m0(k)).abs() < 1e-14);
            for (a, b) in fast.m1(k).iter().zip(slow.m1(k)) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn event_without_jump_is_rejected() {
        let haz = HazardSteps::new(vec![1.0, 2.0], vec![0.0, 0.5]).unwrap();
        let rec = SurvivalRecord::new(1.0, true, 0.0).unwrap();
        assert!(matches!(
            survival_loglik(&rec, 0, &haz, &[0.0], &SurvivalParams::default()),
            Err(Error::InvalidHazard { .. })
        ));
    }

    #[test]
    fn shifting_the_linear_predictor() {
        // log-likelihood with exp term scaled by e^c equals d c + original structure
        let haz = HazardSteps::new(vec![1.0, 2.0], vec![0.2, 0.4]).unwrap();
        let rec = SurvivalRecord::new(2.0, true, 1.0).unwrap();
        let base = survival_loglik(&rec, 0, &haz, &[0.0], &SurvivalParams::new(0.0, 0.0)).unwrap();
        let shifted = survival_loglik(&rec, 0, &haz, &[0.0], &SurvivalParams::new(0.0, 0.1)).unwrap();
        let lambda = 0.6f64;
        assert!((shifted - base - (0.1 - lambda * (0.1f64.exp() - 1.0))).abs() < 1e-14);
    }

    #[test]
    fn piecewise_baseline_inverts() {
        let b = Baseline::PiecewiseConstant { breaks: vec![1.0, 3.0], rates: vec![0.5, 2.0, 0.1] };
        b.validate().unwrap();
        for t in [0.2, 1.0, 2.5, 3.0, 7.0] {
            let y = b.cumulative(t);
            assert!((b.inverse_cumulative(y) - t).abs() < 1e-12);
        }
        assert!((b.cumulative(2.0) - (0.5 + 2.0)).abs() < 1e-15);
        let c = Baseline::Constant { rate: 0.1 };
        assert!((c.inverse_cumulative(c.cumulative(4.0)) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn efficient_score_vanishes_before_first_event_without_event() {
        let recs = records(&[0.5, 1.0, 2.0], &[false, true, true], &[0.1, 0.2, 0.3]);
        let grid = TimeGrid::new(&recs).unwrap();
        let gamma = one_group(3);
        let delta = SurvivalParams::new(0.0, 0.7);
        let agg = ProfileAggregates::new(&grid, &recs, &gamma, &[0.0], &delta).unwrap();
        let score = efficient_score_survival(
            &recs[0],
            grid.slot(0),
            gamma.row(0),
            agg.hazard(),
            &grid,
            agg.table(),
            &[0.0],
            &delta,
        );
        assert!(score.iter().all(|&v| v == 0.0));
    }

    /// Sum of the subjects' profile log-likelihoods with the baseline re-profiled at `(theta, delta)`.
    fn profile_sum(recs: &[SurvivalRecord], gamma: &Posterior, theta: &[f64], delta: &SurvivalParams) -> f64 {
        let grid = TimeGrid::new(recs).unwrap();
        let agg = ProfileAggregates::new(&grid, recs, gamma, theta, delta).unwrap();
        (0..recs.len()).map(|i| profile_loglik_obs(&recs[i], grid.slot(i), gamma.row(i), &agg, theta, delta)).sum()
    }

    #[test]
    fn aggregated_total_matches_subject_sums() {
        let recs = records(
            &[0.5, 1.2, 2.0, 2.5, 2.5, 3.1],
            &[true, false, true, true, false, true],
            &[0.2, -1.0, 0.4, 0.0, 0.7, -0.3],
        );
        let grid = TimeGrid::new(&recs).unwrap();
        let gamma = Posterior::new(vec![0.3, 0.7, 0.5, 0.5, 0.9, 0.1, 0.2, 0.8, 0.6, 0.4, 0.1, 0.9], 2).unwrap();
        let (theta, delta) = ([0.0, 0.8], SurvivalParams::new(0.6, -0.4));
        let agg = ProfileAggregates::new(&grid, &recs, &gamma, &theta, &delta).unwrap();
        let mut grad = vec![0.0; 3];
        let total = profile_loglik_total(&recs, &grid, &gamma, &agg, &theta, &delta, Some(&mut grad));
        let mut expect = vec![0.0; 3];
        let mut value = 0.0;
        for i in 0..recs.len() {
            value += profile_loglik_obs(&recs[i], grid.slot(i), gamma.row(i), &agg, &theta, &delta);
            let s = survival_profile_score(&recs[i], grid.slot(i), gamma.row(i), &agg, &theta, &delta);
            expect.iter_mut().zip(&s).for_each(|(e, v)| *e += v);
        }
        assert!((total - value).abs() < 1e-12);
        for (a, b) in grad.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn profile_score_matches_finite_differences() {
        let recs = records(&[0.7, 1.9, 2.4], &[true, true, false], &[0.5, -0.8, 0.1]);
        let gamma = Posterior::new(vec![0.25, 0.75, 0.6, 0.4, 0.5, 0.5], 2).unwrap();
        let (theta, delta) = (vec![0.0, 0.9], SurvivalParams::new(0.4, -0.2));
        let grid = TimeGrid::new(&recs).unwrap();
        let agg = ProfileAggregates::new(&grid, &recs, &gamma, &theta, &delta).unwrap();
        let mut score = vec![0.0; 3];
        for i in 0..3 {
            let s = survival_profile_score(&recs[i], grid.slot(i), gamma.row(i), &agg, &theta, &delta);
            score.iter_mut().zip(&s).for_each(|(a, b)| *a += b);
        }
        let h = 1e-6;
        let at = |k: usize, e: f64| {
            let mut th = theta.clone();
            let mut d = delta;
            match k {
                0 => th[1] += e,
                1 => d.delta0 += e,
                _ => d.delta1 += e,
            }
            profile_sum(&recs, &gamma, &th, &d)
        };
        for (k, s) in score.iter().enumerate() {
            let fd = (at(k, h) - at(k, -h)) / (2.0 * h);
            assert!((fd - s).abs() < 1e-5 * fd.abs().max(1.0), "coordinate {k}: {fd} vs {s}");
        }
    }

    #[test]
    fn point_mass_posterior_gives_cox_partial_score() {
        let recs = records(&[0.5, 1.2, 2.0, 2.5, 3.0], &[true, false, true, true, true], &[0.2, -1.0, 0.4, 0.0, 0.9]);
        let gamma = Posterior::new(vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0], 2).unwrap();
        let (theta, delta) = ([0.0, 1.3], SurvivalParams::new(0.5, 0.35));
        let grid = TimeGrid::new(&recs).unwrap();
        let agg = ProfileAggregates::new(&grid, &recs, &gamma, &theta, &delta).unwrap();
        let total: f64 = (0..recs.len())
            .map(|i| survival_profile_score(&recs[i], grid.slot(i), gamma.row(i), &agg, &theta, &delta)[2])
            .sum();
        let cox: f64 = recs
            .iter()
            .filter(|r| r.event)
            .map(|r| {
                let risk: Vec<&SurvivalRecord> = recs.iter().filter(|q| q.time >= r.time).collect();
                let s0: f64 = risk.iter().map(|q| (0.35 * q.covariate).exp()).sum();
                let s1: f64 = risk.iter().map(|q| q.covariate * (0.35 * q.covariate).exp()).sum();
                r.covariate - s1 / s0
            })
            .sum();
        assert!((total - cox).abs() < 1e-12);
    }
}
