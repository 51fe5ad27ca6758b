//! Data generation from the joint model and the Monte Carlo harness for the normality
//! of the estimator.

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SubjectRecord};
use crate::em::{em_fit, EMConfig};
use crate::error::{Error, Result};
use crate::ordinal::{category_probs, OrdinalParams, ResponseCell, ResponseSet};
use crate::params::{ModelParams, ParamLayout};
use crate::survival::{Baseline, CumulativeHazard, SurvivalParams, SurvivalRecord};

/// Independent right censoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Censoring {
    None,
    Uniform { c_max: f64 },
    Exponential { rate: f64 },
}

/// Distribution of the survival covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovariateDist {
    StandardNormal,
    /// `high` with probability `p_high`, else `low`.
    TwoPoint {
        low: f64,
        high: f64,
        p_high: f64,
    },
}

impl CovariateDist {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            CovariateDist::StandardNormal => StandardNormal.sample(rng),
            CovariateDist::TwoPoint { low, high, p_high } => {
                if rng.random::<f64>() < *p_high {
                    *high
                } else {
                    *low
                }
            }
        }
    }

    /// Support points and weights for expectations over the covariate.
    fn quadrature(&self) -> Vec<(f64, f64)> {
        match self {
            CovariateDist::StandardNormal => {
                let k = 801;
                let step = 16.0 / (k - 1) as f64;
                let norm = (2.0 * std::f64::consts::PI).sqrt();
                (0..k)
                    .map(|i| {
                        let x = -8.0 + i as f64 * step;
                        let w = if i == 0 || i == k - 1 { 0.5 } else { 1.0 };
                        (x, w * step * (-0.5 * x * x).exp() / norm)
                    })
                    .collect()
            }
            CovariateDist::TwoPoint { low, high, p_high } => vec![(*low, 1.0 - p_high), (*high, *p_high)],
        }
    }
}

/// Everything needed to draw datasets from the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimDesign {
    pub n: usize,
    /// Number of repeated measurement occasions per subject.
    pub time_points: usize,
    pub true_params: ModelParams,
    pub baseline: Baseline,
    pub censoring: Censoring,
    pub covariate: CovariateDist,
    /// Probability that an `(item, time)` cell is missing completely at random.
    #[serde(default)]
    pub missing_prob: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SimDesign {
    pub fn groups(&self) -> usize {
        self.true_params.n_groups()
    }

    pub fn levels(&self) -> usize {
        self.true_params.ordinal.n_levels()
    }

    pub fn items(&self) -> usize {
        self.true_params.ordinal.n_items()
    }

    pub fn layout(&self) -> ParamLayout {
        self.true_params.layout()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidDesign(m));
        if self.n == 0 {
            return bad("need at least one subject".into());
        }
        let p = &self.true_params;
        p.ordinal.validate().map_err(|e| Error::InvalidDesign(e.to_string()))?;
        if p.theta.is_empty() || p.theta[0] != 0.0 || p.theta.iter().any(|t| !t.is_finite()) {
            return bad("theta must be finite with theta[1] = 0".into());
        }
        if p.pi.len() != p.theta.len()
            || p.pi.iter().any(|w| !(w.is_finite() && *w >= 0.0))
            || (p.pi.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return bad("mixture weights must be nonnegative, one per group, and sum to 1".into());
        }
        if !(p.survival.delta0.is_finite() && p.survival.delta1.is_finite()) {
            return bad("survival coefficients must be finite".into());
        }
        self.baseline.validate()?;
        match self.censoring {
            Censoring::Uniform { c_max } if !(c_max.is_finite() && c_max > 0.0) => {
                return bad(format!("uniform censoring bound must be positive, got {c_max}"));
            }
            Censoring::Exponential { rate } if !(rate.is_finite() && rate > 0.0) => {
                return bad(format!("censoring rate must be positive, got {rate}"));
            }
            _ => {}
        }
        if let CovariateDist::TwoPoint { low, high, p_high } = self.covariate {
            if !(low.is_finite() && high.is_finite() && (0.0..=1.0).contains(&p_high)) {
                return bad("two-point covariate needs finite points and a probability".into());
            }
        }
        if !(0.0..1.0).contains(&self.missing_prob) {
            return bad("missing probability must lie in [0, 1)".into());
        }
        if self.time_points == 0 && self.missing_prob > 0.0 {
            return bad("missingness needs at least one time point".into());
        }
        Ok(())
    }

    /// Expected fraction of censored subjects, by quadrature over the covariate and
    /// the time axis.
    pub fn expected_censoring(&self) -> f64 {
        let p = &self.true_params;
        let mut total = 0.0;
        for (x, wx) in self.covariate.quadrature() {
            for (r, &pi) in p.pi.iter().enumerate() {
                if pi == 0.0 {
                    continue;
                }
                let scale = p.survival.linear_predictor(p.theta[r], x).exp();
                let surv = |t: f64| (-self.baseline.cumulative(t) * scale).exp();
                let censored = match self.censoring {
                    Censoring::None => 0.0,
                    // P(C < T) = (1/c) int_0^c S(t) dt
                    Censoring::Uniform { c_max } => simpson(&surv, 0.0, c_max, 400) / c_max,
                    // P(C < T) = int_0^inf rate e^{-rate t} S(t) dt
                    Censoring::Exponential { rate } => {
                        let upper = 40.0 / rate;
                        simpson(&|t: f64| rate * (-rate * t).exp() * surv(t), 0.0, upper, 2000)
                    }
                };
                total += wx * pi * censored;
            }
        }
        total
    }

    /// Sets uniform censoring with the bound that gives the target expected fraction.
    pub fn tune_uniform_censoring(&mut self, target: f64) -> Result<()> {
        if !(target > 0.0 && target < 1.0) {
            return Err(Error::InvalidDesign(format!("censoring target {target} must lie in (0, 1)")));
        }
        let fraction = |design: &mut Self, c: f64| {
            design.censoring = Censoring::Uniform { c_max: c };
            design.expected_censoring()
        };
        // the censored fraction decreases in c_max
        let (mut lo, mut hi) = (1e-8, 1.0);
        while fraction(self, hi) > target {
            hi *= 2.0;
            if hi > 1e12 {
                return Err(Error::InvalidDesign("censoring target not reachable".into()));
            }
        }
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if fraction(self, mid) > target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        self.censoring = Censoring::Uniform { c_max: 0.5 * (lo + hi) };
        Ok(())
    }
}

fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, intervals: usize) -> f64 {
    let k = intervals + intervals % 2;
    let h = (b - a) / k as f64;
    let mut total = f(a) + f(b);
    for i in 1..k {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        total += w * f(a + i as f64 * h);
    }
    total * h / 3.0
}

/// The default desk-scale design: two groups, three levels, two items, three occasions,
/// 500 subjects, `pi = (0.4, 0.6)`, `theta = (0, 1)`, `delta = (0.5, -0.5)`, constant
/// baseline 0.1 and uniform censoring tuned to 25%.
pub fn default_design() -> SimDesign {
    let ordinal =
        OrdinalParams::new(vec![0.0, 0.2, -0.4], vec![0.0, 0.5, 1.0], vec![0.0, -0.5]).expect("valid ordinal truth");
    let true_params =
        ModelParams { theta: vec![0.0, 1.0], ordinal, survival: SurvivalParams::new(0.5, -0.5), pi: vec![0.4, 0.6] };
    let mut design = SimDesign {
        n: 500,
        time_points: 3,
        true_params,
        baseline: Baseline::Constant { rate: 0.1 },
        censoring: Censoring::None,
        covariate: CovariateDist::StandardNormal,
        missing_prob: 0.0,
        seed: 20_240_601,
    };
    design.tune_uniform_censoring(0.25).expect("default censoring target is reachable");
    design
}

/// A simulated dataset with the latent (zero-based) group labels.
#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub dataset: Dataset,
    pub labels: Vec<usize>,
}

fn replication_rng(seed: u64, replication: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replication);
    rng
}

fn draw_level<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (l, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return l;
        }
    }
    probs.len() - 1
}

/// Draws a dataset from `design` with the generator for `design.seed`.
pub fn generate_dataset(design: &SimDesign) -> Result<SimulatedData> {
    generate_replication(design, 0)
}

/// Draws the dataset of one Monte Carlo replication; replications use independent
/// streams of the design seed.
pub fn generate_replication(design: &SimDesign, replication: u64) -> Result<SimulatedData> {
    design.validate()?;
    let mut rng = replication_rng(design.seed, replication);
    let p = &design.true_params;
    let probs: Vec<Vec<Vec<f64>>> = p
        .theta
        .iter()
        .map(|&t| (0..design.items()).map(|j| category_probs(j, t, &p.ordinal)).collect::<Result<_>>())
        .collect::<Result<_>>()?;
    let mut subjects = Vec::with_capacity(design.n);
    let mut labels = Vec::with_capacity(design.n);
    let width = design.n.to_string().len();
    for i in 0..design.n {
        let group = draw_level(&p.pi, &mut rng);
        let x = design.covariate.sample(&mut rng);
        let mut cells = Vec::with_capacity(design.time_points * design.items());
        for m in 0..design.time_points {
            for (j, item_probs) in probs[group].iter().enumerate() {
                if design.missing_prob > 0.0 && rng.random::<f64>() < design.missing_prob {
                    continue;
                }
                cells.push(ResponseCell { time_index: m, item: j, level: draw_level(item_probs, &mut rng) });
            }
        }
        let e: f64 = Exp1.sample(&mut rng);
        let scale = p.survival.linear_predictor(p.theta[group], x).exp();
        let failure = design.baseline.inverse_cumulative(e / scale);
        let censor = match design.censoring {
            Censoring::None => f64::INFINITY,
            Censoring::Uniform { c_max } => c_max * (1.0 - rng.random::<f64>()),
            Censoring::Exponential { rate } => {
                let c: f64 = Exp1.sample(&mut rng);
                c / rate
            }
        };
        let (time, event) = if failure <= censor { (failure, true) } else { (censor, false) };
        subjects.push(SubjectRecord {
            id: format!("s{:0width$}", i + 1),
            responses: ResponseSet::new(cells)?,
            survival: SurvivalRecord::new(time, event, x)?,
        });
        labels.push(group);
    }
    let dataset = Dataset::new(subjects, design.items(), design.levels())?;
    if dataset.censoring_fraction() > 0.8 {
        warn!("realized censoring fraction {:.2} exceeds 0.8", dataset.censoring_fraction());
    }
    Ok(SimulatedData { dataset, labels })
}

/// Outcome of one Monte Carlo replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub replication: u64,
    pub fit_seed: u64,
    pub converged: bool,
    pub estimates: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub loglik: f64,
    pub n_iter: usize,
    /// Why the replication counts as a failure, if it does.
    pub failure: Option<String>,
}

impl ReplicationRecord {
    pub fn succeeded(&self) -> bool {
        self.failure.is_none()
    }
}

/// Monte Carlo summary of one free parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    pub truth: f64,
    pub mean_estimate: f64,
    pub empirical_sd: f64,
    pub mean_se: f64,
    pub sd_se_ratio: f64,
    /// Fraction of `estimate +/- 1.96 SE` intervals containing the truth.
    pub coverage: f64,
}

/// Summary over replications; `records` keeps the per-replication outcomes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MCReport {
    pub replications: usize,
    pub successes: usize,
    pub failures: usize,
    /// True when more than 10% of replications failed.
    pub failure_flag: bool,
    pub design_seed: u64,
    pub fit_seed: u64,
    pub parameters: Vec<ParamSummary>,
    #[serde(skip)]
    pub records: Vec<ReplicationRecord>,
}

fn fit_seed(base: u64, replication: u64) -> u64 {
    base ^ replication.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn run_replication(design: &SimDesign, replication: u64, config: &EMConfig) -> ReplicationRecord {
    let seed = fit_seed(config.seed, replication);
    let mut record = ReplicationRecord {
        replication,
        fit_seed: seed,
        converged: false,
        estimates: Vec::new(),
        std_errors: Vec::new(),
        loglik: f64::NAN,
        n_iter: 0,
        failure: None,
    };
    let outcome = generate_replication(design, replication).and_then(|sim| {
        let config = EMConfig { seed, groups: design.groups(), ..config.clone() };
        em_fit(&sim.dataset, &config, None)
    });
    match outcome {
        Ok(fit) => {
            record.converged = fit.converged;
            record.loglik = fit.final_loglik();
            record.n_iter = fit.n_iter;
            record.std_errors = fit.std_errors.clone();
            match fit.params.layout().pack(&fit.params) {
                Ok(x) => record.estimates = x,
                Err(e) => record.failure = Some(e.to_string()),
            }
            if record.failure.is_none() {
                if !fit.converged {
                    record.failure = Some("fit did not converge".into());
                } else if fit.diagnostics.null_direction.is_some() {
                    record.failure = Some("singular information".into());
                }
            }
        }
        Err(e) => record.failure = Some(e.to_string()),
    }
    record
}

/// Simulates `replications` datasets, fits each, and summarizes estimates against the truth.
/// Fits are already ordered by ascending `theta`, the same convention as the truth.
pub fn mc_normality(design: &SimDesign, replications: usize, config: &EMConfig) -> Result<MCReport> {
    design.validate()?;
    config.validate()?;
    let layout = design.layout();
    let truth = layout.pack(&design.true_params)?;
    let records: Vec<ReplicationRecord> =
        (0..replications as u64).into_par_iter().map(|rep| run_replication(design, rep, config)).collect();
    let ok: Vec<&ReplicationRecord> = records.iter().filter(|r| r.succeeded()).collect();
    let parameters = layout
        .names()
        .into_iter()
        .enumerate()
        .map(|(k, name)| summarize_parameter(name, truth[k], ok.iter().map(|r| (r.estimates[k], r.std_errors[k]))))
        .collect();
    let failures = records.len() - ok.len();
    Ok(MCReport {
        replications,
        successes: ok.len(),
        failures,
        failure_flag: replications > 0 && failures as f64 > 0.1 * replications as f64,
        design_seed: design.seed,
        fit_seed: config.seed,
        parameters,
        records,
    })
}

fn summarize_parameter(name: String, truth: f64, draws: impl Iterator<Item = (f64, f64)>) -> ParamSummary {
    let draws: Vec<(f64, f64)> = draws.collect();
    let n = draws.len() as f64;
    if draws.is_empty() {
        return ParamSummary {
            name,
            truth,
            mean_estimate: f64::NAN,
            empirical_sd: f64::NAN,
            mean_se: f64::NAN,
            sd_se_ratio: f64::NAN,
            coverage: f64::NAN,
        };
    }
    let mean = draws.iter().map(|d| d.0).sum::<f64>() / n;
    let var = draws.iter().map(|d| (d.0 - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    let mean_se = draws.iter().map(|d| d.1).sum::<f64>() / n;
    let covered = draws.iter().filter(|(est, se)| (est - truth).abs() <= 1.96 * se).count() as f64;
    ParamSummary {
        name,
        truth,
        mean_estimate: mean,
        empirical_sd: var.sqrt(),
        mean_se,
        sd_se_ratio: var.sqrt() / mean_se,
        coverage: covered / n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_design_hits_censoring_target() {
        let design = default_design();
        assert!((design.expected_censoring() - 0.25).abs() < 1e-9);
        let sim = generate_dataset(&design).unwrap();
        assert_eq!(sim.dataset.len(), 500);
        assert!((sim.dataset.censoring_fraction() - 0.25).abs() < 0.06);
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let mut design = default_design();
        design.n = 50;
        let a = generate_dataset(&design).unwrap();
        let b = generate_dataset(&design).unwrap();
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.dataset.subjects(), b.dataset.subjects());
        let c = generate_replication(&design, 1).unwrap();
        assert_ne!(a.dataset.subjects(), c.dataset.subjects());
    }

    #[test]
    fn degenerate_weights_put_everyone_in_group_one() {
        let mut design = default_design();
        design.n = 200;
        design.true_params.pi = vec![1.0, 0.0];
        let sim = generate_dataset(&design).unwrap();
        assert!(sim.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn missing_cells_are_dropped() {
        let mut design = default_design();
        design.n = 300;
        design.missing_prob = 0.3;
        let sim = generate_dataset(&design).unwrap();
        let cells: usize = sim.dataset.subjects().iter().map(|s| s.responses.len()).sum();
        let full = (300 * 3 * 2) as f64;
        assert!((cells as f64 / full - 0.7).abs() < 0.05);
    }

    #[test]
    fn exponential_censoring_fraction_matches_closed_form() {
        // no covariate effect, constant hazard rho: P(C < T) = c / (c + rho)
        let mut design = default_design();
        design.true_params.survival = SurvivalParams::new(0.0, 0.0);
        design.censoring = Censoring::Exponential { rate: 0.05 };
        assert!((design.expected_censoring() - 0.05 / 0.15).abs() < 1e-6);
    }

    #[test]
    fn invalid_designs_are_rejected() {
        let mut design = default_design();
        design.censoring = Censoring::Uniform { c_max: -1.0 };
        assert!(matches!(design.validate(), Err(Error::InvalidDesign(_))));
        let mut design = default_design();
        design.n = 0;
        assert!(design.validate().is_err());
    }

    #[test]
    fn zero_replications_give_empty_report() {
        let mut design = default_design();
        design.n = 20;
        let report = mc_normality(&design, 0, &EMConfig::default()).unwrap();
        assert_eq!(report.replications, 0);
        assert_eq!(report.failures, 0);
        assert!(!report.failure_flag);
    }
}
