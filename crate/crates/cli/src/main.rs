use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use jointmix::inference::{
    contraction_check, default_directions, efficient_score_equivalence, info_identity_check, orthogonality_check,
    self_consistent_posterior,
};
use jointmix::simulation::{default_design, generate_dataset, mc_normality, SimDesign};
use jointmix::{em_fit, io, Dataset, EMConfig, Error, ModelParams};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

/// Equivalence gaps above this fail the `check` record.
const EQUIVALENCE_TOL: f64 = 1e-8;
/// Relative Frobenius gap above this fails the information-identity record.
const IDENTITY_TOL: f64 = 0.05;
/// Orthogonality fails once any `|mean| / se` exceeds this.
const ORTHOGONALITY_Z: f64 = 3.0;

#[derive(Parser, Debug)]
#[command(name = "jointmix", version, about = "Joint mixture model of ordinal responses and survival times")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit the model to an ordinal and a survival CSV.
    Fit {
        #[arg(long)]
        ordinal: Option<PathBuf>,
        #[arg(long)]
        survival: Option<PathBuf>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Draw one dataset from a design (the built-in default when none is given).
    Simulate {
        #[arg(long)]
        design: Option<PathBuf>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Monte Carlo study of estimates and standard errors.
    Mc {
        #[arg(long)]
        design: Option<PathBuf>,
        #[arg(long)]
        replications: Option<usize>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Numeric checks of the efficiency theory at given parameters.
    Check {
        #[arg(long)]
        ordinal: Option<PathBuf>,
        #[arg(long)]
        survival: Option<PathBuf>,
        #[arg(long)]
        params: Option<PathBuf>,
        /// Relative finite-difference step for the information identity.
        #[arg(long)]
        fd_step: Option<f64>,
        #[command(flatten)]
        common: CommonArgs,
    },
}

#[derive(Args, Debug, Default)]
struct CommonArgs {
    #[arg(long)]
    groups: Option<usize>,
    /// Relative log-likelihood tolerance.
    #[arg(long)]
    tol: Option<f64>,
    /// Sup-norm parameter tolerance.
    #[arg(long)]
    tol_param: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of ordinal items; inferred from the data when absent.
    #[arg(long)]
    items: Option<usize>,
    /// Number of ordinal levels; inferred from the data when absent.
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(short, long, action = clap::ArgAction::Count)]
    verbose: u8,
}

/// Config-file mirror of every flag. Flags override the file.
#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    groups: Option<usize>,
    tol: Option<f64>,
    tol_param: Option<f64>,
    max_iter: Option<usize>,
    restarts: Option<usize>,
    seed: Option<u64>,
    items: Option<usize>,
    levels: Option<usize>,
    out: Option<PathBuf>,
    threads: Option<usize>,
    ordinal: Option<PathBuf>,
    survival: Option<PathBuf>,
    design: Option<PathBuf>,
    params: Option<PathBuf>,
    replications: Option<usize>,
    fd_step: Option<f64>,
}

impl RunConfig {
    fn load(common: &CommonArgs) -> Result<Self, Error> {
        let mut cfg: RunConfig = match &common.config {
            Some(path) => io::read_json(path)?,
            None => RunConfig::default(),
        };
        macro_rules! take {
            ($($field:ident),*) => { $( if common.$field.is_some() { cfg.$field = common.$field.clone(); } )* };
        }
        take!(groups, tol, tol_param, max_iter, restarts, seed, items, levels, out, threads);
        Ok(cfg)
    }

    fn set_path(slot: &mut Option<PathBuf>, flag: Option<PathBuf>) {
        if flag.is_some() {
            *slot = flag;
        }
    }

    fn em_config(&self) -> EMConfig {
        let mut em = EMConfig::default();
        if let Some(v) = self.groups {
            em.groups = v;
        }
        if let Some(v) = self.tol {
            em.tol_loglik = v;
        }
        if let Some(v) = self.tol_param {
            em.tol_param = v;
        }
        if let Some(v) = self.max_iter {
            em.max_iter = v;
        }
        if let Some(v) = self.restarts {
            em.n_restarts = v;
        }
        if let Some(v) = self.seed {
            em.seed = v;
        }
        em
    }

    fn out_dir(&self) -> Result<PathBuf, Error> {
        let dir = self.out.clone().unwrap_or_else(|| PathBuf::from("."));
        fs::create_dir_all(&dir)?;
        Ok(dir)
    }

    fn dims(&self) -> Result<Option<(usize, usize)>, Error> {
        match (self.items, self.levels) {
            (Some(j), Some(l)) => Ok(Some((j, l))),
            (None, None) => Ok(None),
            _ => Err(Error::InvalidData("--items and --levels must be given together".into())),
        }
    }

    fn dataset(&self) -> Result<Dataset, Error> {
        let ordinal = required(&self.ordinal, "ordinal")?;
        let survival = required(&self.survival, "survival")?;
        io::read_dataset(ordinal, survival, self.dims()?)
    }

    fn design(&self) -> Result<SimDesign, Error> {
        let mut design = match &self.design {
            Some(path) => io::read_json(path)?,
            None => default_design(),
        };
        if let Some(seed) = self.seed {
            design.seed = seed;
        }
        design.validate()?;
        Ok(design)
    }
}

fn required<'a>(slot: &'a Option<PathBuf>, name: &str) -> Result<&'a Path, Error> {
    slot.as_deref().ok_or_else(|| Error::InvalidData(format!("missing --{name} (or `{name}` in the config file)")))
}

/// Process outcome mapped onto the documented exit codes.
enum Outcome {
    Done,
    NotConverged,
}

fn exit_code(result: Result<Outcome, Error>) -> ExitCode {
    match result {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::NotConverged) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input_error() { 1 } else { 3 })
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
}

fn init_threads(threads: Option<usize>) -> Result<(), Error> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(Error::InvalidData("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidData(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let common = match &cli.command {
        Command::Fit { common, .. }
        | Command::Simulate { common, .. }
        | Command::Mc { common, .. }
        | Command::Check { common, .. } => common,
    };
    init_logging(common.verbose);
    exit_code(run(cli.command))
}

fn run(command: Command) -> Result<Outcome, Error> {
    match command {
        Command::Fit { ordinal, survival, common } => {
            let mut cfg = RunConfig::load(&common)?;
            RunConfig::set_path(&mut cfg.ordinal, ordinal);
            RunConfig::set_path(&mut cfg.survival, survival);
            init_threads(cfg.threads)?;
            cmd_fit(&cfg)
        }
        Command::Simulate { design, common } => {
            let mut cfg = RunConfig::load(&common)?;
            RunConfig::set_path(&mut cfg.design, design);
            init_threads(cfg.threads)?;
            cmd_simulate(&cfg)
        }
        Command::Mc { design, replications, common } => {
            let mut cfg = RunConfig::load(&common)?;
            RunConfig::set_path(&mut cfg.design, design);
            if replications.is_some() {
                cfg.replications = replications;
            }
            init_threads(cfg.threads)?;
            cmd_mc(&cfg)
        }
        Command::Check { ordinal, survival, params, fd_step, common } => {
            let mut cfg = RunConfig::load(&common)?;
            RunConfig::set_path(&mut cfg.ordinal, ordinal);
            RunConfig::set_path(&mut cfg.survival, survival);
            RunConfig::set_path(&mut cfg.params, params);
            if fd_step.is_some() {
                cfg.fd_step = fd_step;
            }
            init_threads(cfg.threads)?;
            cmd_check(&cfg)
        }
    }
}

fn cmd_fit(cfg: &RunConfig) -> Result<Outcome, Error> {
    let data = cfg.dataset()?;
    let em = cfg.em_config();
    let out = cfg.out_dir()?;
    log::info!("fitting {} subjects with {} groups", data.len(), em.groups);
    let fit = em_fit(&data, &em, None)?;
    io::write_estimates(&fit, &out.join("estimates.csv"))?;
    io::write_posterior(&data, &fit.posterior, &out.join("posterior.csv"))?;
    io::write_hazard(&fit.hazard, &out.join("hazard.csv"))?;
    io::write_information(&fit.info_matrix, &fit.diagnostics.param_names, &out.join("information.csv"))?;
    io::write_trace(&fit.loglik_trace, &out.join("loglik_trace.csv"))?;
    io::write_json(&fit.params, &out.join("params.json"))?;
    let summary = json!({
        "converged": fit.converged,
        "n_iter": fit.n_iter,
        "final_loglik": fit.final_loglik(),
        "n_subjects": data.len(),
        "config": em,
        "params": fit.params,
        "std_errors": fit.std_errors,
        "diagnostics": fit.diagnostics,
    });
    io::write_json(&summary, &out.join("fit.json"))?;
    if fit.converged {
        Ok(Outcome::Done)
    } else {
        eprintln!("warning: EM did not converge in {} iterations", fit.n_iter);
        Ok(Outcome::NotConverged)
    }
}

fn cmd_simulate(cfg: &RunConfig) -> Result<Outcome, Error> {
    let design = cfg.design()?;
    let out = cfg.out_dir()?;
    let sim = generate_dataset(&design)?;
    io::write_dataset(&sim.dataset, &out.join("ordinal.csv"), &out.join("survival.csv"))?;
    io::write_labels(&sim.dataset, &sim.labels, &out.join("latent.csv"))?;
    io::write_json(&design.true_params, &out.join("truth.json"))?;
    io::write_json(&design, &out.join("design.json"))?;
    Ok(Outcome::Done)
}

fn cmd_mc(cfg: &RunConfig) -> Result<Outcome, Error> {
    let design = cfg.design()?;
    let mut em = cfg.em_config();
    em.groups = design.groups();
    let replications = cfg.replications.unwrap_or(100);
    let out = cfg.out_dir()?;
    let report = mc_normality(&design, replications, &em)?;
    if report.failure_flag {
        log::warn!("{} of {} replications failed", report.failures, report.replications);
    }
    io::write_json(&report, &out.join("mc_report.json"))?;
    io::write_replications(&report.records, &design.layout().names(), &out.join("replications.csv"))?;
    Ok(Outcome::Done)
}

fn record(name: &str, passed: bool, values: Value) -> Value {
    json!({ "name": name, "passed": passed, "values": values })
}

fn cmd_check(cfg: &RunConfig) -> Result<Outcome, Error> {
    let params_path = required(&cfg.params, "params")?;
    if !params_path.exists() {
        return Err(Error::InvalidData(format!("params file {} does not exist", params_path.display())));
    }
    let params: ModelParams = io::read_json(params_path)?;
    params.validate()?;
    let data = cfg.dataset()?;
    params.layout().check(&params)?;
    if (data.n_items(), data.n_levels()) != (params.ordinal.n_items(), params.ordinal.n_levels()) {
        return Err(Error::InvalidData(format!(
            "data have J={}, L={}; parameters have J={}, L={}",
            data.n_items(),
            data.n_levels(),
            params.ordinal.n_items(),
            params.ordinal.n_levels()
        )));
    }
    let out = cfg.out_dir()?;
    let (posterior, hazard) = self_consistent_posterior(&data, &params)?;
    let mut records = Vec::new();

    let identity = info_identity_check(&data, &params, cfg.fd_step.unwrap_or(1e-3))?;
    records.push(record(
        "information_identity",
        identity.relative_frobenius_gap < IDENTITY_TOL,
        serde_json::to_value(&identity)?,
    ));

    let stats = orthogonality_check(&data, &params, &posterior, &hazard, &default_directions(&data))?;
    let max_z = stats.iter().map(|s| s.max_abs_z()).fold(0.0, f64::max);
    records.push(record("orthogonality", max_z <= ORTHOGONALITY_Z, json!({ "max_abs_z": max_z, "directions": stats })));

    let eq = efficient_score_equivalence(&data, &params, &posterior)?;
    records.push(record("efficient_score_equivalence", eq.max_rel_gap <= EQUIVALENCE_TOL, serde_json::to_value(eq)?));

    let contraction = contraction_check(&data, &params, &hazard)?;
    records.push(record("contraction", contraction.satisfied, serde_json::to_value(contraction)?));

    io::write_json(&json!({ "n_subjects": data.len(), "checks": records }), &out.join("diagnostics.json"))?;
    Ok(Outcome::Done)
}
