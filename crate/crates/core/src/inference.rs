//! Profile scores, empirical efficient information, standard errors and numeric checks
//! of the efficiency theory: the information identity, orthogonality of the score to
//! baseline-hazard perturbations, equality of profile and efficient scores, and the
//! contraction condition behind differentiability of the profiled baseline.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::em::{e_step, subject_contribution, Posterior};
use crate::error::{Error, Result};
use crate::math::sup_norm;
use crate::ordinal::{self, loglik_counts};
use crate::params::ModelParams;
use crate::survival::{
    efficient_score_survival, profile_hazard, survival_profile_score, AggregateTable, CumulativeHazard, HazardSteps,
    ProfileAggregates,
};

/// Condition number above which the information is treated as singular.
pub const SINGULAR_CONDITION: f64 = 1e10;

fn check_posterior(data: &Dataset, params: &ModelParams, posterior: &Posterior) -> Result<()> {
    if posterior.n_subjects() != data.len() || posterior.n_groups() != params.n_groups() {
        return Err(Error::InvalidData(format!(
            "posterior is {}x{}, expected {}x{}",
            posterior.n_subjects(),
            posterior.n_groups(),
            data.len(),
            params.n_groups()
        )));
    }
    Ok(())
}

/// `d phi / d u` at the current scores.
fn phi_jacobian(params: &ModelParams) -> Result<Vec<f64>> {
    Ok(ordinal::phi_jacobian(&params.ordinal.phi_free()))
}

/// Profile score of one subject over the free layout: the responsibility-weighted
/// ordinal score plus the survival profile score, with `agg` built at the same
/// `(gamma, Theta)`.
pub fn profile_score_obs(
    data: &Dataset,
    subject: usize,
    params: &ModelParams,
    gamma_row: &[f64],
    agg: &ProfileAggregates,
) -> Result<Vec<f64>> {
    let layout = params.layout();
    let jac = phi_jacobian(params)?;
    let mut score = vec![0.0; layout.len()];
    subject_contribution(data, subject, params, &layout, &jac, gamma_row, agg, Some(&mut score));
    Ok(score)
}

/// Profile scores of every subject.
pub fn profile_scores(data: &Dataset, params: &ModelParams, posterior: &Posterior) -> Result<Vec<Vec<f64>>> {
    check_posterior(data, params, posterior)?;
    let layout = params.layout();
    let jac = phi_jacobian(params)?;
    let agg = ProfileAggregates::new(data.grid(), data.survival(), posterior, &params.theta, &params.survival)?;
    let scores: Vec<Vec<f64>> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let mut score = vec![0.0; layout.len()];
            subject_contribution(data, i, params, &layout, &jac, posterior.row(i), &agg, Some(&mut score));
            score
        })
        .collect();
    if scores.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("profile scores".into()));
    }
    Ok(scores)
}

fn mean_of(scores: &[Vec<f64>]) -> Vec<f64> {
    let dim = scores.first().map_or(0, Vec::len);
    let mut mean = vec![0.0; dim];
    for s in scores {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    let n = scores.len().max(1) as f64;
    mean.into_iter().map(|m| m / n).collect()
}

/// Dataset mean of the profile scores.
pub fn mean_profile_score(data: &Dataset, params: &ModelParams, posterior: &Posterior) -> Result<Vec<f64>> {
    Ok(mean_of(&profile_scores(data, params, posterior)?))
}

/// Scores with the survival part in efficient form under an arbitrary cumulative hazard;
/// risk-set aggregates are taken at `(posterior, params)`.
pub fn efficient_scores<H: CumulativeHazard + Sync + ?Sized>(
    data: &Dataset,
    params: &ModelParams,
    posterior: &Posterior,
    hazard: &H,
) -> Result<Vec<Vec<f64>>> {
    check_posterior(data, params, posterior)?;
    let layout = params.layout();
    let jac = phi_jacobian(params)?;
    let table = AggregateTable::build(data.grid(), data.survival(), posterior, &params.theta, &params.survival)?;
    let scores = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let mut score = vec![0.0; layout.len()];
            let mut scratch = vec![0.0; ordinal::n_free(layout.levels, layout.items) + 1];
            for (r, &g) in posterior.row(i).iter().enumerate() {
                scratch.iter_mut().for_each(|v| *v = 0.0);
                loglik_counts(data.counts(i), params.theta[r], &params.ordinal, Some((&mut scratch, &jac)));
                layout.add_ordinal(&mut score, r, &scratch, g);
            }
            let surv = efficient_score_survival(
                &data.survival()[i],
                data.grid().slot(i),
                posterior.row(i),
                hazard,
                data.grid(),
                &table,
                &params.theta,
                &params.survival,
            );
            layout.add_survival(&mut score, &surv);
            score
        })
        .collect();
    Ok(scores)
}

/// Symmetric `p x p` information matrix `n^-1 sum_i phi_i phi_i'` with its condition number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfoMatrix {
    dim: usize,
    values: Vec<f64>,
    condition_number: f64,
}

impl InfoMatrix {
    pub fn from_scores(scores: &[Vec<f64>]) -> Self {
        let dim = scores.first().map_or(0, Vec::len);
        let mut values = vec![0.0; dim * dim];
        for s in scores {
            for i in 0..dim {
                for j in i..dim {
                    values[i * dim + j] += s[i] * s[j];
                }
            }
        }
        let n = scores.len().max(1) as f64;
        for i in 0..dim {
            for j in i..dim {
                let v = values[i * dim + j] / n;
                values[i * dim + j] = v;
                values[j * dim + i] = v;
            }
        }
        Self::from_row_major(dim, values)
    }

    /// Wraps a symmetric matrix given in row-major order.
    pub fn from_row_major(dim: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), dim * dim, "matrix has the wrong size");
        let mut info = Self { dim, values, condition_number: f64::INFINITY };
        info.condition_number = info.compute_condition();
        info
    }

    fn compute_condition(&self) -> f64 {
        if self.dim == 0 {
            return 1.0;
        }
        let eig = self.eigenvalues();
        let max = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
        if min > 0.0 && max.is_finite() {
            max / min
        } else {
            f64::INFINITY
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.dim + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn condition_number(&self) -> f64 {
        self.condition_number
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim, self.dim, &self.values)
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut eig: Vec<f64> = SymmetricEigen::new(self.to_matrix()).eigenvalues.iter().copied().collect();
        eig.sort_by(f64::total_cmp);
        eig
    }

    pub fn rank(&self) -> usize {
        let eig = self.eigenvalues();
        let max = eig.last().copied().unwrap_or(0.0).max(0.0);
        eig.iter().filter(|&&e| e > max * 1e-12 && e > 0.0).count()
    }

    /// Unit eigenvector of the smallest eigenvalue.
    pub fn null_direction(&self) -> Vec<f64> {
        let eig = SymmetricEigen::new(self.to_matrix());
        let k = eig.eigenvalues.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).map_or(0, |(k, _)| k);
        eig.eigenvectors.column(k).iter().copied().collect()
    }
}

/// Per-subject scores of the free mixture weights `pi_2..pi_R` (with `pi_1 = 1 - sum`):
/// `gamma_r / pi_r - gamma_1 / pi_1`.
pub fn mixture_weight_scores(posterior: &Posterior, pi: &[f64]) -> Vec<Vec<f64>> {
    (0..posterior.n_subjects())
        .map(|i| {
            let row = posterior.row(i);
            (1..pi.len()).map(|r| row[r] / pi[r] - row[0] / pi[0]).collect()
        })
        .collect()
}

/// Residuals of `scores` after least-squares projection on `nuisance`, both taken
/// without centering: `phi_i - E[phi s'] E[s s']^+ s_i`.
pub fn project_out(scores: &[Vec<f64>], nuisance: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let q = nuisance.first().map_or(0, Vec::len);
    if q == 0 || scores.is_empty() {
        return scores.to_vec();
    }
    let p = scores[0].len();
    let n = scores.len() as f64;
    let mut cross = DMatrix::<f64>::zeros(p, q);
    let mut gram = DMatrix::<f64>::zeros(q, q);
    for (phi, s) in scores.iter().zip(nuisance) {
        for a in 0..q {
            for b in 0..q {
                gram[(a, b)] += s[a] * s[b] / n;
            }
            for k in 0..p {
                cross[(k, a)] += phi[k] * s[a] / n;
            }
        }
    }
    let Ok(gram_inv) = gram.pseudo_inverse(1e-12) else {
        return scores.to_vec();
    };
    let coef = cross * gram_inv;
    scores
        .iter()
        .zip(nuisance)
        .map(|(phi, s)| (0..p).map(|k| phi[k] - (0..q).map(|a| coef[(k, a)] * s[a]).sum::<f64>()).collect())
        .collect()
}

/// Empirical efficient information `n^-1 sum_i phi_i phi_i'` from the profile scores
/// after projecting out the mixture-weight scores (a no-op for one group).
pub fn information_matrix(data: &Dataset, params: &ModelParams, posterior: &Posterior) -> Result<InfoMatrix> {
    let scores = profile_scores(data, params, posterior)?;
    Ok(InfoMatrix::from_scores(&project_out(&scores, &mixture_weight_scores(posterior, &params.pi))))
}

/// `sqrt(diag(I^-1) / n)`; fails on a singular information with its null direction.
pub fn standard_errors(info: &InfoMatrix, n: usize) -> Result<Vec<f64>> {
    if !(info.condition_number() < SINGULAR_CONDITION) {
        return Err(Error::SingularInformation {
            condition: info.condition_number(),
            direction: info.null_direction(),
        });
    }
    let inv = info
        .to_matrix()
        .try_inverse()
        .ok_or_else(|| Error::SingularInformation { condition: f64::INFINITY, direction: info.null_direction() })?;
    Ok((0..info.dim()).map(|k| (inv[(k, k)] / n as f64).sqrt()).collect())
}

/// Standard errors from the Moore-Penrose pseudo-inverse (eigenvalues below
/// `max / SINGULAR_CONDITION` dropped).
pub fn pinv_standard_errors(info: &InfoMatrix, n: usize) -> Vec<f64> {
    let eig = SymmetricEigen::new(info.to_matrix());
    let max = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    let cutoff = max / SINGULAR_CONDITION;
    (0..info.dim())
        .map(|k| {
            let var: f64 = eig
                .eigenvalues
                .iter()
                .enumerate()
                .filter(|(_, &e)| e > cutoff)
                .map(|(c, &e)| eig.eigenvectors[(k, c)].powi(2) / e)
                .sum();
            (var / n as f64).sqrt()
        })
        .collect()
}

/// Information, standard errors and first-order diagnostics at a fitted point.
#[derive(Debug, Clone)]
pub struct FitSummary {
    pub info: InfoMatrix,
    pub std_errors: Vec<f64>,
    pub mean_score_sup: f64,
    pub condition_number: f64,
    pub null_direction: Option<Vec<f64>>,
}

/// Scores at `(params, posterior)`, the information and its standard errors. A singular
/// information yields pseudo-inverse SEs with the null direction recorded.
pub fn summarize_fit(data: &Dataset, params: &ModelParams, posterior: &Posterior) -> Result<FitSummary> {
    let scores = profile_scores(data, params, posterior)?;
    let info = InfoMatrix::from_scores(&project_out(&scores, &mixture_weight_scores(posterior, &params.pi)));
    let mean_score_sup = sup_norm(&mean_of(&scores));
    let (std_errors, null_direction) = match standard_errors(&info, data.len()) {
        Ok(se) => (se, None),
        Err(Error::SingularInformation { condition, direction }) => {
            log::warn!(
                "information matrix is singular (condition {condition:.3e}); reporting pseudo-inverse standard errors"
            );
            (pinv_standard_errors(&info, data.len()), Some(direction))
        }
        Err(e) => return Err(e),
    };
    Ok(FitSummary { condition_number: info.condition_number(), info, std_errors, mean_score_sup, null_direction })
}

/// Responsibilities and profiled baseline that reproduce each other at fixed parameters:
/// iterate `gamma <- E-step(params, lambda(gamma))`.
pub fn self_consistent_posterior(data: &Dataset, params: &ModelParams) -> Result<(Posterior, HazardSteps)> {
    let mut gamma = Posterior::uniform_rows(data.len(), &params.pi)?;
    let mut hazard = profile_hazard(data.grid(), data.survival(), &gamma, &params.theta, &params.survival)?;
    if params.n_groups() == 1 {
        return Ok((gamma, hazard));
    }
    for _ in 0..2000 {
        let next = e_step(data, params, &hazard)?;
        let change = crate::math::sup_distance(next.as_slice(), gamma.as_slice());
        gamma = next;
        hazard = profile_hazard(data.grid(), data.survival(), &gamma, &params.theta, &params.survival)?;
        if change < 1e-13 {
            break;
        }
    }
    Ok((gamma, hazard))
}

/// Finite-difference Jacobian of the mean score against the outer-product information.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IdentityReport {
    /// `-d(mean score)/d(theta')`, row-major `p x p`.
    pub fd_jacobian: Vec<f64>,
    pub outer_product: Vec<f64>,
    pub relative_frobenius_gap: f64,
}

/// Compares `J = -d/dtheta' (mean profile score)` by central differences (step
/// `h * max(1, |x_k|)`, responsibilities and baseline re-solved at every perturbed
/// point) with the outer-product information at `params`.
pub fn info_identity_check(data: &Dataset, params: &ModelParams, h: f64) -> Result<IdentityReport> {
    if !(1e-5..=1e-2).contains(&h) {
        return Err(Error::InvalidParams(format!("finite-difference step {h} outside [1e-5, 1e-2]")));
    }
    let layout = params.layout();
    let x0 = layout.pack(params)?;
    let p = layout.len();
    let mean_score_at = |x: &[f64]| -> Result<Vec<f64>> {
        let point = layout.unpack(x, params);
        let (gamma, _) = self_consistent_posterior(data, &point)?;
        mean_profile_score(data, &point, &gamma)
    };
    let (gamma0, _) = self_consistent_posterior(data, params)?;
    let info = InfoMatrix::from_scores(&profile_scores(data, params, &gamma0)?);
    let columns: Vec<Result<Vec<f64>>> = (0..p)
        .into_par_iter()
        .map(|k| {
            let step = h * x0[k].abs().max(1.0);
            let mut up = x0.clone();
            up[k] += step;
            let mut down = x0.clone();
            down[k] -= step;
            let (su, sd) = (mean_score_at(&up)?, mean_score_at(&down)?);
            let column: Vec<f64> = su.iter().zip(&sd).map(|(a, b)| -(a - b) / (2.0 * step)).collect();
            if column.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteDifference { coordinate: k });
            }
            Ok(column)
        })
        .collect();
    let mut fd = vec![0.0; p * p];
    for (k, column) in columns.into_iter().enumerate() {
        for (row, v) in column?.into_iter().enumerate() {
            fd[row * p + k] = v;
        }
    }
    Ok(IdentityReport {
        relative_frobenius_gap: relative_frobenius_gap(&fd, info.values()),
        fd_jacobian: fd,
        outer_product: info.values().to_vec(),
    })
}

/// `||a - b||_F / ||b||_F`.
pub fn relative_frobenius_gap(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

/// A bounded step function `h` on `[0, inf)`: `values[k]` on `(breaks[k-1], breaks[k]]`
/// with `breaks[-1] = 0`, and the last value beyond the last break.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDirection {
    pub label: String,
    pub breaks: Vec<f64>,
    pub values: Vec<f64>,
}

impl StepDirection {
    pub fn constant(value: f64) -> Self {
        Self { label: format!("constant {value}"), breaks: Vec::new(), values: vec![value] }
    }

    /// `1[0, q]`.
    pub fn indicator(q: f64) -> Self {
        Self { label: format!("indicator [0, {q}]"), breaks: vec![q], values: vec![1.0, 0.0] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.breaks.len() + 1
            || self.breaks.windows(2).any(|w| w[0] >= w[1])
            || self.breaks.iter().chain(&self.values).any(|v| !v.is_finite())
        {
            return Err(Error::InvalidParams(format!("malformed step direction `{}`", self.label)));
        }
        Ok(())
    }

    pub fn at(&self, t: f64) -> f64 {
        self.values[self.breaks.partition_point(|&b| b < t)]
    }

    /// `int_0^t h dLambda`.
    pub fn integrate<H: CumulativeHazard + ?Sized>(&self, hazard: &H, t: f64) -> f64 {
        let mut total = 0.0;
        let mut lower = 0.0;
        for (k, &value) in self.values.iter().enumerate() {
            let upper = self.breaks.get(k).copied().unwrap_or(f64::INFINITY).min(t);
            if upper > lower && value != 0.0 {
                total += value * (hazard.cumulative(upper) - hazard.cumulative(lower));
            }
            if upper >= t {
                break;
            }
            lower = upper;
        }
        total
    }
}

/// Constant direction plus indicators at the 10/30/50/70/90% quantiles of the event times.
pub fn default_directions(data: &Dataset) -> Vec<StepDirection> {
    let mut times: Vec<f64> = data.survival().iter().filter(|r| r.event).map(|r| r.time).collect();
    times.sort_by(f64::total_cmp);
    let mut dirs = vec![StepDirection::constant(1.0)];
    if times.is_empty() {
        return dirs;
    }
    for q in [0.1, 0.3, 0.5, 0.7, 0.9] {
        let k = ((q * times.len() as f64).ceil() as usize).clamp(1, times.len()) - 1;
        dirs.push(StepDirection::indicator(times[k]));
    }
    dirs
}

/// Baseline-hazard score `(B h)_i = sum_r gamma_ir (d_i h(T_i) - exp(eta_ir) int_0^T_i h dLambda)`.
pub fn nuisance_score<H: CumulativeHazard + ?Sized>(
    data: &Dataset,
    params: &ModelParams,
    posterior: &Posterior,
    hazard: &H,
    direction: &StepDirection,
) -> Vec<f64> {
    data.survival()
        .iter()
        .enumerate()
        .map(|(i, rec)| {
            let jump_part = if rec.event { direction.at(rec.time) } else { 0.0 };
            let integral = direction.integrate(hazard, rec.time);
            posterior
                .row(i)
                .iter()
                .enumerate()
                .map(|(r, &g)| {
                    let e = params.survival.linear_predictor(params.theta[r], rec.covariate).exp();
                    g * (jump_part - e * integral)
                })
                .sum()
        })
        .collect()
}

/// Mean and Monte Carlo standard error of `phi_i[k] (B h)_i` for each score coordinate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrthogonalityStat {
    pub label: String,
    pub mean: Vec<f64>,
    pub std_error: Vec<f64>,
    /// `|mean| / std_error`, zero when both vanish.
    pub z: Vec<f64>,
}

impl OrthogonalityStat {
    pub fn max_abs_z(&self) -> f64 {
        self.z.iter().fold(0.0, |m, z| m.max(z.abs()))
    }
}

/// Covariance of the efficient score (under `hazard`) with the baseline scores `B h`.
pub fn orthogonality_check<H: CumulativeHazard + Sync + ?Sized>(
    data: &Dataset,
    params: &ModelParams,
    posterior: &Posterior,
    hazard: &H,
    directions: &[StepDirection],
) -> Result<Vec<OrthogonalityStat>> {
    let scores = efficient_scores(data, params, posterior, hazard)?;
    let n = data.len() as f64;
    let dim = params.layout().len();
    directions
        .iter()
        .map(|dir| {
            dir.validate()?;
            let bh = nuisance_score(data, params, posterior, hazard, dir);
            let mut mean = vec![0.0; dim];
            let mut std_error = vec![0.0; dim];
            let mut z = vec![0.0; dim];
            for k in 0..dim {
                let prods: Vec<f64> = scores.iter().zip(&bh).map(|(s, b)| s[k] * b).collect();
                let m = prods.iter().sum::<f64>() / n;
                let var = prods.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
                let se = (var / n).sqrt();
                mean[k] = m;
                std_error[k] = se;
                z[k] = if se > 0.0 {
                    m.abs() / se
                } else if m == 0.0 {
                    0.0
                } else {
                    f64::INFINITY
                };
            }
            Ok(OrthogonalityStat { label: dir.label.clone(), mean, std_error, z })
        })
        .collect()
}

/// Largest per-subject gap between the survival profile score and the efficient score.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub max_abs_gap: f64,
    /// Gap divided by `max(1, |profile score|_inf)` of the same subject.
    pub max_rel_gap: f64,
}

/// Profile score against the efficient score evaluated with the profiled baseline at the
/// same `(gamma, Theta)`.
pub fn efficient_score_equivalence(
    data: &Dataset,
    params: &ModelParams,
    posterior: &Posterior,
) -> Result<EquivalenceReport> {
    let agg = ProfileAggregates::new(data.grid(), data.survival(), posterior, &params.theta, &params.survival)?;
    efficient_score_gap(data, params, posterior, &agg, agg.hazard())
}

/// As [`efficient_score_equivalence`] with the efficient score taken under `hazard`.
pub fn efficient_score_gap<H: CumulativeHazard + ?Sized>(
    data: &Dataset,
    params: &ModelParams,
    posterior: &Posterior,
    agg: &ProfileAggregates,
    hazard: &H,
) -> Result<EquivalenceReport> {
    check_posterior(data, params, posterior)?;
    let mut report = EquivalenceReport { max_abs_gap: 0.0, max_rel_gap: 0.0 };
    for (i, rec) in data.survival().iter().enumerate() {
        let slot = data.grid().slot(i);
        let row = posterior.row(i);
        let profile = survival_profile_score(rec, slot, row, agg, &params.theta, &params.survival);
        let efficient =
            efficient_score_survival(rec, slot, row, hazard, data.grid(), agg.table(), &params.theta, &params.survival);
        let gap = profile.iter().zip(&efficient).fold(0.0, |m, (a, b)| f64::max(m, (a - b).abs()));
        report.max_abs_gap = report.max_abs_gap.max(gap);
        report.max_rel_gap = report.max_rel_gap.max(gap / sup_norm(&profile).max(1.0));
    }
    Ok(report)
}

/// Left side of the contraction condition against its bound `1 / Lambda(t_max)`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ContractionReport {
    pub max_lhs: f64,
    pub bound: f64,
    pub satisfied: bool,
}

/// `max_{i,r} |-exp(eta_ir) + sum_g w_ig exp(eta_ig)|` with posterior weights `w` under
/// `(params, hazard)`, compared with `1 / Lambda(t_max)`.
pub fn contraction_check<H: CumulativeHazard + ?Sized>(
    data: &Dataset,
    params: &ModelParams,
    hazard: &H,
) -> Result<ContractionReport> {
    let t_max = data.survival().iter().map(|r| r.time).fold(0.0, f64::max);
    let mass = hazard.cumulative(t_max);
    if !(mass > 0.0) {
        return Err(Error::ZeroHazardMass);
    }
    let weights = e_step(data, params, hazard)?;
    let mut max_lhs: f64 = 0.0;
    for (i, rec) in data.survival().iter().enumerate() {
        let e: Vec<f64> =
            params.theta.iter().map(|&t| params.survival.linear_predictor(t, rec.covariate).exp()).collect();
        let avg: f64 = weights.row(i).iter().zip(&e).map(|(w, e)| w * e).sum();
        for &er in &e {
            max_lhs = max_lhs.max((avg - er).abs());
        }
    }
    let bound = 1.0 / mass;
    Ok(ContractionReport { max_lhs, bound, satisfied: max_lhs < bound })
}
