//! EM estimation of the joint mixture with the baseline hazard profiled out.
//!
//! One cycle, starting from `(pi_k, Theta_k)` and the hazard `lambda_k` profiled at the
//! previous responsibilities:
//!
//! 1. E-step: responsibilities `gamma_k` and the observed log-likelihood at `(pi_k, Theta_k, lambda_k)`.
//! 2. `pi_{k+1}` = column means of `gamma_k`.
//! 3. `Theta_{k+1}` maximizes the expected complete-data log-likelihood with `gamma_k` fixed
//!    and the Breslow baseline re-profiled at every evaluation.
//! 4. `lambda_{k+1}` = baseline profiled at `(gamma_k, Theta_{k+1})`.
//!
//! Each step weakly increases the observed log-likelihood. A fit reports the point
//! `(pi_k, Theta_k, lambda_k)` together with `gamma_{k-1}`, the responsibilities it was
//! optimized against, so the mean profile score vanishes there up to the inner tolerance.

use log::{debug, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::inference::{self, InfoMatrix};
use crate::math::{softmax_in_place, sup_distance, sup_norm};
use crate::optim::{self, BfgsOptions, BfgsStatus};
use crate::ordinal::{self, loglik_counts, ItemLevelCounts, OrdinalParams};
use crate::params::{ModelParams, ParamLayout};
use crate::survival::{
    self, profile_hazard, profile_loglik_obs, profile_loglik_total, survival_loglik, survival_profile_score,
    CumulativeHazard, HazardSteps, ProfileAggregates, SurvivalParams,
};

/// Responsibilities: an `n x R` row-major matrix whose rows lie on the simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Posterior {
    n: usize,
    groups: usize,
    gamma: Vec<f64>,
}

impl Posterior {
    pub fn new(gamma: Vec<f64>, groups: usize) -> Result<Self> {
        if groups == 0 || !gamma.len().is_multiple_of(groups) {
            return Err(Error::InvalidData(format!("{} responsibilities do not fill rows of {groups}", gamma.len())));
        }
        let n = gamma.len() / groups;
        for (i, row) in gamma.chunks(groups).enumerate() {
            if row.iter().any(|g| !(0.0..=1.0).contains(g)) {
                return Err(Error::InvalidData(format!("responsibility outside [0, 1] in row {i}")));
            }
            if (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidData(format!("responsibilities in row {i} do not sum to 1")));
            }
        }
        Ok(Self { n, groups, gamma })
    }

    /// Every row equal to `weights`.
    pub fn uniform_rows(n: usize, weights: &[f64]) -> Result<Self> {
        Self::new(weights.repeat(n), weights.len())
    }

    /// Point masses on the given zero-based labels.
    pub fn point_mass(labels: &[usize], groups: usize) -> Result<Self> {
        let mut gamma = vec![0.0; labels.len() * groups];
        for (i, &r) in labels.iter().enumerate() {
            if r >= groups {
                return Err(Error::IndexOutOfRange { what: "group", index: r + 1, limit: groups });
            }
            gamma[i * groups + r] = 1.0;
        }
        Self::new(gamma, groups)
    }

    pub fn row(&self, subject: usize) -> &[f64] {
        &self.gamma[subject * self.groups..(subject + 1) * self.groups]
    }

    pub fn n_subjects(&self) -> usize {
        self.n
    }

    pub fn n_groups(&self) -> usize {
        self.groups
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.gamma
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.groups];
        for row in self.gamma.chunks(self.groups) {
            for (s, g) in sums.iter_mut().zip(row) {
                *s += g;
            }
        }
        sums
    }

    /// Column `order[r]` becomes column `r`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let gamma = self.gamma.chunks(self.groups).flat_map(|row| order.iter().map(move |&r| row[r])).collect();
        Self { n: self.n, groups: self.groups, gamma }
    }
}

fn default_groups() -> usize {
    2
}
fn default_tol_loglik() -> f64 {
    1e-8
}
fn default_tol_param() -> f64 {
    1e-6
}
fn default_max_iter() -> usize {
    500
}
fn default_restarts() -> usize {
    5
}
fn default_inner_gtol() -> f64 {
    1e-8
}
fn default_inner_max_iter() -> usize {
    200
}

/// EM controls. Every field has a default so partial config documents deserialize.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EMConfig {
    #[serde(default = "default_groups")]
    pub groups: usize,
    /// Relative change of the observed log-likelihood.
    #[serde(default = "default_tol_loglik")]
    pub tol_loglik: f64,
    /// Sup-norm change of the free parameters and mixture weights.
    #[serde(default = "default_tol_param")]
    pub tol_param: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_restarts")]
    pub n_restarts: usize,
    #[serde(default)]
    pub seed: u64,
    /// Gradient sup-norm target of the inner optimizer (objective scaled by `1/n`).
    #[serde(default = "default_inner_gtol")]
    pub inner_gtol: f64,
    #[serde(default = "default_inner_max_iter")]
    pub inner_max_iter: usize,
    /// Compare analytic gradients with central differences at the start of each M-step
    /// and switch to differences when they disagree beyond `1e-4`.
    #[serde(default)]
    pub self_check: bool,
}

impl Default for EMConfig {
    fn default() -> Self {
        Self {
            groups: default_groups(),
            tol_loglik: default_tol_loglik(),
            tol_param: default_tol_param(),
            max_iter: default_max_iter(),
            n_restarts: default_restarts(),
            seed: 0,
            inner_gtol: default_inner_gtol(),
            inner_max_iter: default_inner_max_iter(),
            self_check: false,
        }
    }
}

impl EMConfig {
    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 {
            return Err(Error::InvalidParams("need at least one group".into()));
        }
        if !(self.tol_loglik > 0.0 && self.tol_param > 0.0 && self.inner_gtol > 0.0) {
            return Err(Error::InvalidParams("tolerances must be positive".into()));
        }
        if self.max_iter == 0 || self.inner_max_iter == 0 {
            return Err(Error::InvalidParams("iteration limits must be at least 1".into()));
        }
        if self.n_restarts == 0 {
            return Err(Error::InvalidParams("need at least one restart".into()));
        }
        Ok(())
    }
}

/// Per-subject, per-group log densities `log P(Y_i | theta_r) + log P(T_i, d_i | Lambda, theta_r)`,
/// row-major `n x R`.
pub fn component_log_densities<H: CumulativeHazard + ?Sized>(
    data: &Dataset,
    params: &ModelParams,
    hazard: &H,
) -> Result<Vec<f64>> {
    params.layout().check(params)?;
    check_dims(data, params)?;
    let groups = params.n_groups();
    let mut out = Vec::with_capacity(data.len() * groups);
    for (i, rec) in data.survival().iter().enumerate() {
        for r in 0..groups {
            let ord = loglik_counts(data.counts(i), params.theta[r], &params.ordinal, None);
            let surv = survival_loglik(rec, r, hazard, &params.theta, &params.survival)?;
            out.push(ord + surv);
        }
    }
    Ok(out)
}

fn check_dims(data: &Dataset, params: &ModelParams) -> Result<()> {
    if data.n_items() != params.ordinal.n_items() || data.n_levels() != params.ordinal.n_levels() {
        return Err(Error::InvalidParams(format!(
            "data have J={}, L={} but parameters have J={}, L={}",
            data.n_items(),
            data.n_levels(),
            params.ordinal.n_items(),
            params.ordinal.n_levels()
        )));
    }
    Ok(())
}

/// Responsibilities and the observed log-likelihood in one pass.
pub fn e_step_with_loglik<H: CumulativeHazard + ?Sized>(
    data: &Dataset,
    params: &ModelParams,
    hazard: &H,
) -> Result<(Posterior, f64)> {
    let groups = params.n_groups();
    let mut gamma = component_log_densities(data, params, hazard)?;
    let log_pi: Vec<f64> = params.pi.iter().map(|p| p.ln()).collect();
    let mut loglik = 0.0;
    for (i, row) in gamma.chunks_mut(groups).enumerate() {
        for (w, lp) in row.iter_mut().zip(&log_pi) {
            *w += lp;
        }
        let lse = softmax_in_place(row);
        if !lse.is_finite() {
            return Err(Error::DensityUnderflow { subject: i });
        }
        loglik += lse;
    }
    Ok((Posterior { n: data.len(), groups, gamma }, loglik))
}

/// Posterior group probabilities at the given parameters and hazard, computed in log space.
pub fn e_step<H: CumulativeHazard + ?Sized>(data: &Dataset, params: &ModelParams, hazard: &H) -> Result<Posterior> {
    Ok(e_step_with_loglik(data, params, hazard)?.0)
}

/// `sum_i log sum_r pi_r P(Y_i | theta_r) P(T_i, d_i | Lambda, theta_r)`.
pub fn observed_loglik<H: CumulativeHazard + ?Sized>(data: &Dataset, params: &ModelParams, hazard: &H) -> Result<f64> {
    let ll = e_step_with_loglik(data, params, hazard)?.1;
    if !ll.is_finite() {
        return Err(Error::NonFinite("observed log-likelihood".into()));
    }
    Ok(ll)
}

/// Column means of the responsibilities.
pub fn m_step_pi(posterior: &Posterior) -> Vec<f64> {
    let n = posterior.n_subjects() as f64;
    posterior.column_sums().into_iter().map(|s| s / n).collect()
}

/// One subject's expected complete-data log-likelihood (ordinal plus profiled survival)
/// with `gamma` fixed; when `grad` is given, adds its gradient over the free layout.
#[allow(clippy::too_many_arguments)]
pub(crate) fn subject_contribution(
    data: &Dataset,
    subject: usize,
    params: &ModelParams,
    layout: &ParamLayout,
    jac: &[f64],
    gamma_row: &[f64],
    agg: &ProfileAggregates,
    mut grad: Option<&mut [f64]>,
) -> f64 {
    let counts = data.counts(subject);
    let rec = &data.survival()[subject];
    let slot = data.grid().slot(subject);
    let mut value = 0.0;
    let mut scratch = vec![0.0; ordinal::n_free(layout.levels, layout.items) + 1];
    for (r, &g) in gamma_row.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        match grad.as_deref_mut() {
            Some(out) => {
                scratch.iter_mut().for_each(|v| *v = 0.0);
                value += g * loglik_counts(counts, params.theta[r], &params.ordinal, Some((&mut scratch, jac)));
                layout.add_ordinal(out, r, &scratch, g);
            }
            None => value += g * loglik_counts(counts, params.theta[r], &params.ordinal, None),
        }
    }
    value += profile_loglik_obs(rec, slot, gamma_row, agg, &params.theta, &params.survival);
    if let Some(out) = grad {
        let score = survival_profile_score(rec, slot, gamma_row, agg, &params.theta, &params.survival);
        layout.add_survival(out, &score);
    }
    value
}

/// The M-step objective on free coordinates, scaled by `1/n`. With `gamma` fixed the
/// ordinal part depends on the data only through responsibility-weighted counts.
struct Objective<'a> {
    data: &'a Dataset,
    posterior: &'a Posterior,
    template: &'a ModelParams,
    layout: ParamLayout,
    weighted: Vec<ItemLevelCounts>,
}

impl<'a> Objective<'a> {
    fn new(data: &'a Dataset, posterior: &'a Posterior, template: &'a ModelParams) -> Self {
        let layout = template.layout();
        let weighted = (0..layout.groups)
            .map(|r| {
                let mut w = ItemLevelCounts::zeros(layout.items, layout.levels);
                for i in 0..data.len() {
                    let g = posterior.row(i)[r];
                    if g > 0.0 {
                        w.add_scaled(data.counts(i), g);
                    }
                }
                w
            })
            .collect();
        Self { data, posterior, template, layout, weighted }
    }

    fn u_range(&self) -> std::ops::Range<usize> {
        let start = self.layout.ordinal_offset() + (self.layout.levels - 1) + (self.layout.items - 1);
        start..start + self.layout.levels - 2
    }

    /// Mean objective and its gradient; `None` where the profile cannot be formed.
    fn evaluate(&self, x: &[f64], with_grad: bool) -> Option<(f64, Vec<f64>)> {
        let params = self.layout.unpack(x, self.template);
        let (theta, delta) = (&params.theta, &params.survival);
        let agg = ProfileAggregates::new(self.data.grid(), self.data.survival(), self.posterior, theta, delta).ok()?;
        let jac = ordinal::phi_jacobian(&x[self.u_range()]);
        let mut grad = vec![0.0; if with_grad { self.layout.len() } else { 0 }];
        let mut scratch = vec![0.0; ordinal::n_free(self.layout.levels, self.layout.items) + 1];
        let mut value = 0.0;
        for (r, counts) in self.weighted.iter().enumerate() {
            if with_grad {
                scratch.iter_mut().for_each(|v| *v = 0.0);
                value += loglik_counts(counts, theta[r], &params.ordinal, Some((&mut scratch, &jac)));
                self.layout.add_ordinal(&mut grad, r, &scratch, 1.0);
            } else {
                value += loglik_counts(counts, theta[r], &params.ordinal, None);
            }
        }
        let mut surv_grad = vec![0.0; if with_grad { survival::gradient_len(self.layout.groups) } else { 0 }];
        value += profile_loglik_total(
            self.data.survival(),
            self.data.grid(),
            self.posterior,
            &agg,
            theta,
            delta,
            with_grad.then_some(surv_grad.as_mut_slice()),
        );
        if with_grad {
            self.layout.add_survival(&mut grad, &surv_grad);
        }
        let n = self.data.len() as f64;
        (value.is_finite() && grad.iter().all(|g| g.is_finite()))
            .then(|| (value / n, grad.into_iter().map(|g| g / n).collect()))
    }

    /// Negated mean objective for the minimizer.
    fn loss(&self, x: &[f64]) -> (f64, Vec<f64>) {
        match self.evaluate(x, true) {
            Some((v, g)) => (-v, g.into_iter().map(|g| -g).collect()),
            None => (f64::INFINITY, vec![0.0; x.len()]),
        }
    }

    fn fd_loss(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let value = |x: &[f64]| self.evaluate(x, false).map_or(f64::INFINITY, |(v, _)| -v);
        let f = value(x);
        let mut grad = vec![0.0; x.len()];
        let mut probe = x.to_vec();
        for k in 0..x.len() {
            let h = 1e-6 * x[k].abs().max(1.0);
            probe[k] = x[k] + h;
            let up = value(&probe);
            probe[k] = x[k] - h;
            let down = value(&probe);
            probe[k] = x[k];
            grad[k] = (up - down) / (2.0 * h);
        }
        (f, grad)
    }
}

/// Expected complete-data log-likelihood at `params` with `posterior` fixed and the
/// baseline profiled (the quantity the structural M-step maximizes), summed over subjects.
pub fn m_step_objective(data: &Dataset, posterior: &Posterior, params: &ModelParams) -> Result<f64> {
    check_dims(data, params)?;
    let x = params.layout().pack(params)?;
    ProfileAggregates::new(data.grid(), data.survival(), posterior, &params.theta, &params.survival)?;
    Objective::new(data, posterior, params)
        .evaluate(&x, false)
        .map(|(v, _)| v * data.len() as f64)
        .ok_or_else(|| Error::NonFinite("M-step objective".into()))
}

/// Gradient of [`m_step_objective`] over the free layout.
pub fn m_step_gradient(data: &Dataset, posterior: &Posterior, params: &ModelParams) -> Result<Vec<f64>> {
    check_dims(data, params)?;
    let x = params.layout().pack(params)?;
    ProfileAggregates::new(data.grid(), data.survival(), posterior, &params.theta, &params.survival)?;
    Objective::new(data, posterior, params)
        .evaluate(&x, true)
        .map(|(_, g)| g.into_iter().map(|g| g * data.len() as f64).collect())
        .ok_or_else(|| Error::NonFinite("M-step gradient".into()))
}

/// Outcome of the structural M-step.
#[derive(Debug, Clone)]
pub struct MStep {
    pub params: ModelParams,
    /// Mean objective at entry and at exit.
    pub objective_before: f64,
    pub objective_after: f64,
    /// Gradient sup-norm of the mean objective at exit.
    pub grad_sup: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Final inverse-Hessian approximation of the inner optimizer.
    pub inverse_hessian: Vec<f64>,
}

/// Gradient level accepted when the line search stalls on round-off.
const STALL_GTOL: f64 = 1e-7;
const INNER_RESTARTS: usize = 3;

/// Maximizes the expected complete-data log-likelihood over `(theta, ordinal, delta)` with
/// `posterior` held fixed and the baseline re-profiled at every evaluation. `pi` is untouched.
pub fn m_step_theta(data: &Dataset, posterior: &Posterior, params: &ModelParams, config: &EMConfig) -> Result<MStep> {
    m_step_theta_warm(data, posterior, params, config, None)
}

/// [`m_step_theta`] with the inner optimizer started from a previous inverse Hessian.
pub fn m_step_theta_warm(
    data: &Dataset,
    posterior: &Posterior,
    params: &ModelParams,
    config: &EMConfig,
    inverse_hessian: Option<Vec<f64>>,
) -> Result<MStep> {
    check_dims(data, params)?;
    let layout = params.layout();
    let x0 = layout.pack(params)?;
    let objective = Objective::new(data, posterior, params);
    let (f0, g0) = objective.loss(&x0);
    if !f0.is_finite() {
        return Err(Error::NonFinite("M-step objective at the starting point".into()));
    }
    let mut use_fd = false;
    if config.self_check {
        let (_, fd) = objective.fd_loss(&x0);
        let gap = g0.iter().zip(&fd).map(|(a, b)| (a - b).abs() / b.abs().max(1.0)).fold(0.0, f64::max);
        if gap > 1e-4 {
            warn!("analytic M-step gradient differs from central differences by {gap:.2e}; using differences");
            use_fd = true;
        }
    }
    let opts = BfgsOptions { gtol: config.inner_gtol, max_iter: config.inner_max_iter, ..BfgsOptions::default() };
    let mut x = x0;
    let mut hessian = inverse_hessian;
    let mut iterations = 0;
    let mut attempt = 0;
    let (f, grad_sup, converged, hessian) = loop {
        let res = if use_fd {
            optim::minimize_warm(|x| objective.fd_loss(x), &x, hessian.take(), opts)
        } else {
            optim::minimize_warm(|x| objective.loss(x), &x, hessian.take(), opts)
        };
        iterations += res.iterations;
        x = res.x;
        let grad_sup = sup_norm(&res.grad);
        match res.status {
            BfgsStatus::Converged => break (res.f, grad_sup, true, res.inverse_hessian),
            BfgsStatus::MaxIterations => break (res.f, grad_sup, false, res.inverse_hessian),
            BfgsStatus::LineSearchFailed if grad_sup <= STALL_GTOL => {
                break (res.f, grad_sup, true, res.inverse_hessian)
            }
            BfgsStatus::LineSearchFailed => {
                attempt += 1;
                if attempt >= INNER_RESTARTS {
                    return Err(Error::OptimizerFailure {
                        reason: format!("line search stalled with gradient sup-norm {grad_sup:.3e}"),
                        best: x,
                    });
                }
                debug!("restarting inner optimizer (gradient sup-norm {grad_sup:.3e})");
            }
        }
    };
    Ok(MStep {
        params: layout.unpack(&x, params),
        objective_before: -f0,
        objective_after: -f,
        grad_sup,
        converged,
        iterations,
        inverse_hessian: hessian,
    })
}

/// Sorts groups by ascending `theta` and shifts so that `theta[0] = 0`, absorbing the
/// shift into the intercepts and the baseline. Leaves every likelihood unchanged and is
/// idempotent.
pub fn relabel(
    params: &ModelParams,
    posterior: &Posterior,
    hazard: &HazardSteps,
) -> Result<(ModelParams, Posterior, HazardSteps)> {
    let mut order: Vec<usize> = (0..params.n_groups()).collect();
    order.sort_by(|&a, &b| params.theta[a].total_cmp(&params.theta[b]));
    let shift = params.theta[order[0]];
    let mut out = params.clone();
    out.theta = order.iter().map(|&r| params.theta[r] - shift).collect();
    out.theta[0] = 0.0;
    out.pi = order.iter().map(|&r| params.pi[r]).collect();
    out.ordinal.absorb_group_shift(shift);
    let hazard = if shift == 0.0 { hazard.clone() } else { hazard.scaled((shift * params.survival.delta0).exp())? };
    Ok((out, posterior.permuted(&order), hazard))
}

/// Random starting point: ordered `theta ~ N(0, 1)` shifted to `theta[0] = 0`,
/// `pi ~ Dirichlet(1)`, ordinal free coordinates and `delta` from `N(0, 0.25)`.
pub fn random_init<R: Rng + ?Sized>(layout: &ParamLayout, rng: &mut R) -> ModelParams {
    let std_normal = Normal::new(0.0, 1.0).expect("valid normal");
    let small = Normal::new(0.0, 0.5).expect("valid normal");
    let mut theta: Vec<f64> = (0..layout.groups).map(|_| std_normal.sample(rng)).collect();
    theta.sort_by(f64::total_cmp);
    let base = theta[0];
    theta.iter_mut().for_each(|t| *t -= base);
    theta[0] = 0.0;
    let unit_gamma = Gamma::new(1.0, 1.0).expect("valid gamma");
    let mut pi: Vec<f64> = (0..layout.groups).map(|_| f64::max(unit_gamma.sample(rng), 1e-3)).collect();
    let total: f64 = pi.iter().sum();
    pi.iter_mut().for_each(|p| *p /= total);
    let mut draw = |k: usize| -> Vec<f64> { (0..k).map(|_| small.sample(rng)).collect() };
    let a = draw(layout.levels - 1);
    let b = draw(layout.items - 1);
    let u = draw(layout.levels - 2);
    let delta = draw(2);
    ModelParams {
        theta,
        ordinal: OrdinalParams::from_free(&a, &b, &u),
        survival: SurvivalParams::new(delta[0], delta[1]),
        pi,
    }
}

/// How one restart ended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartSummary {
    pub index: usize,
    pub converged: bool,
    pub n_iter: usize,
    pub final_loglik: f64,
    /// Why the restart stopped early, if it did.
    pub aborted: Option<String>,
}

/// Inference diagnostics attached to a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub param_names: Vec<String>,
    pub restarts: Vec<RestartSummary>,
    /// Sup-norm of the dataset-mean profile score at the reported point.
    pub mean_score_sup: f64,
    pub condition_number: f64,
    /// Set when the information matrix is singular and pseudo-inverse SEs are reported.
    pub null_direction: Option<Vec<f64>>,
}

/// Estimates, standard errors (free-coordinate layout), information matrix, log-likelihood
/// trace and diagnostics of the selected restart.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub params: ModelParams,
    pub hazard: HazardSteps,
    pub posterior: Posterior,
    pub loglik_trace: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub info_matrix: InfoMatrix,
    pub converged: bool,
    pub n_iter: usize,
    pub diagnostics: FitDiagnostics,
}

impl FitResult {
    pub fn final_loglik(&self) -> f64 {
        self.loglik_trace.last().copied().unwrap_or(f64::NEG_INFINITY)
    }
}

struct RunState {
    params: ModelParams,
    posterior: Posterior,
    hazard: HazardSteps,
    trace: Vec<f64>,
    converged: bool,
    n_iter: usize,
    aborted: Option<String>,
}

fn free_with_pi(layout: &ParamLayout, params: &ModelParams) -> Result<Vec<f64>> {
    let mut x = layout.pack(params)?;
    x.extend_from_slice(&params.pi);
    Ok(x)
}

fn collapsed(posterior: &Posterior, pi: &[f64]) -> Option<String> {
    let sums = posterior.column_sums();
    if let Some(r) = sums.iter().position(|&s| s < 1.0) {
        return Some(format!("group {} holds {:.3} effective subjects", r + 1, sums[r]));
    }
    pi.iter().position(|&p| p < 1e-6).map(|r| format!("weight of group {} fell to {:.3e}", r + 1, pi[r]))
}

fn run_em(data: &Dataset, config: &EMConfig, init: ModelParams) -> Result<RunState> {
    let layout = init.layout();
    let mut params = init;
    let mut posterior = Posterior::uniform_rows(data.len(), &params.pi)?;
    let mut hazard = profile_hazard(data.grid(), data.survival(), &posterior, &params.theta, &params.survival)?;
    let mut trace = Vec::new();
    let mut previous = free_with_pi(&layout, &params)?;
    let mut inner_ok = false;
    let mut hessian: Option<Vec<f64>> = None;
    let stop = |params, posterior, hazard, trace, converged, n_iter, aborted| {
        Ok(RunState { params, posterior, hazard, trace, converged, n_iter, aborted })
    };
    for iter in 1..=config.max_iter {
        let (gamma, ll) = match e_step_with_loglik(data, &params, &hazard) {
            Ok(v) => v,
            Err(e) if !e.is_input_error() => {
                return stop(params, posterior, hazard, trace, false, iter - 1, Some(e.to_string()));
            }
            Err(e) => return Err(e),
        };
        trace.push(ll);
        let current = free_with_pi(&layout, &params)?;
        if iter > 1 {
            let last = trace[trace.len() - 2];
            let rel = (ll - last).abs() / last.abs().max(f64::MIN_POSITIVE);
            let step = sup_distance(&current, &previous);
            if rel < config.tol_loglik && step < config.tol_param && inner_ok {
                return stop(params, posterior, hazard, trace, true, iter, None);
            }
        }
        if layout.groups > 1 {
            if let Some(reason) = collapsed(&gamma, &m_step_pi(&gamma)) {
                return stop(params, posterior, hazard, trace, false, iter, Some(reason));
            }
        }
        let mut template = params.clone();
        template.pi = m_step_pi(&gamma);
        let next = match m_step_theta_warm(data, &gamma, &template, config, hessian.take()) {
            Ok(step) => {
                inner_ok = step.converged;
                hessian = Some(step.inverse_hessian);
                step.params
            }
            Err(Error::OptimizerFailure { reason, best }) => {
                debug!("M-step did not converge: {reason}");
                inner_ok = false;
                layout.unpack(&best, &template)
            }
            Err(e) if !e.is_input_error() => {
                return stop(params, posterior, hazard, trace, false, iter, Some(e.to_string()));
            }
            Err(e) => return Err(e),
        };
        let next_hazard = match profile_hazard(data.grid(), data.survival(), &gamma, &next.theta, &next.survival) {
            Ok(h) => h,
            Err(e) => return stop(params, posterior, hazard, trace, false, iter, Some(e.to_string())),
        };
        previous = current;
        params = next;
        posterior = gamma;
        hazard = next_hazard;
    }
    stop(params, posterior, hazard, trace, false, config.max_iter, None)
}

fn restart_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Fits the model from `config.n_restarts` starting points in parallel and keeps the
/// converged run with the highest final log-likelihood (or the best run when none
/// converged). `init`, when given, replaces the first random start.
pub fn em_fit(data: &Dataset, config: &EMConfig, init: Option<&ModelParams>) -> Result<FitResult> {
    config.validate()?;
    let layout = ParamLayout::new(config.groups, data.n_levels(), data.n_items());
    if let Some(p) = init {
        p.validate()?;
        layout.check(p)?;
    }
    let runs: Vec<Result<RunState>> = (0..config.n_restarts)
        .into_par_iter()
        .map(|index| {
            let start = match (index, init) {
                (0, Some(p)) => p.clone(),
                _ => random_init(&layout, &mut restart_rng(config.seed, index)),
            };
            run_em(data, config, start)
        })
        .collect();
    let mut states = Vec::with_capacity(runs.len());
    for run in runs {
        states.push(run?);
    }
    let restarts: Vec<RestartSummary> = states
        .iter()
        .enumerate()
        .map(|(index, s)| RestartSummary {
            index,
            converged: s.converged,
            n_iter: s.n_iter,
            final_loglik: s.trace.last().copied().unwrap_or(f64::NEG_INFINITY),
            aborted: s.aborted.clone(),
        })
        .collect();
    let score = |s: &RunState| (s.converged, s.trace.last().copied().unwrap_or(f64::NEG_INFINITY));
    let best = states
        .into_iter()
        .max_by(|a, b| {
            let (ca, la) = score(a);
            let (cb, lb) = score(b);
            ca.cmp(&cb).then(la.total_cmp(&lb))
        })
        .expect("at least one restart");
    if !best.converged {
        warn!("no restart converged; reporting the best of {} runs", restarts.len());
    }
    let (params, posterior, hazard) = relabel(&best.params, &best.posterior, &best.hazard)?;
    let summary = inference::summarize_fit(data, &params, &posterior)?;
    Ok(FitResult {
        params,
        hazard,
        posterior,
        loglik_trace: best.trace,
        std_errors: summary.std_errors,
        info_matrix: summary.info,
        converged: best.converged,
        n_iter: best.n_iter,
        diagnostics: FitDiagnostics {
            param_names: layout.names(),
            restarts,
            mean_score_sup: summary.mean_score_sup,
            condition_number: summary.condition_number,
            null_direction: summary.null_direction,
        },
    })
}
