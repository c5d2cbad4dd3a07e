//! End-to-end experiment driver: task generation (prompts with noisy labels),
//! single verified episodes, Monte Carlo risk estimation, and parameter
//! sweeps with deterministic CSV emission.

use std::collections::HashSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array1;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{
    self, approximation_error, barron_parameter, design_matrix, oracle_l1_budget, ClassSpec,
    FeatureBank, FeatureError, FunctionInstance, OracleCoefficients,
};
use crate::lasso::{
    self, default_eta, default_lambda, lasso_objective, oracle_solve, LassoError, LassoProblem,
};
use crate::seeding::stream_rng;
use crate::transformer::{
    build_icl_transformer, emulation_gap, extract_state, forward, init_hidden, readout,
    HiddenState, TransformerError, TransformerWeights,
};
use crate::SCHEMA_VERSION;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Lasso(#[from] LassoError),
    #[error(transparent)]
    Transformer(#[from] TransformerError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

// RNG stream tags under a data seed.
const STREAM_PROMPT_X: u64 = 0x10;
const STREAM_NOISE: u64 = 0x11;
const STREAM_QUERY: u64 = 0x12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum XDistribution {
    #[default]
    Ball,
    Sphere,
    TruncatedGaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum NoiseModel {
    #[default]
    Gaussian,
    BoundedUniform,
}

fn default_schema() -> u32 {
    SCHEMA_VERSION
}
fn default_tau() -> f64 {
    1e6
}
fn default_tau_ff() -> f64 {
    100.0
}
fn default_c1() -> f64 {
    1.0
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_test_points() -> usize {
    256
}

/// Everything needed to reproduce an experiment. `eta`/`lambda` of `None`
/// mean "use the built-in rules" (η = 1/(2(n+1)); λ from the penalty rule
/// scaled by `c1`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    pub spec: ClassSpec,
    pub d: usize,
    pub n: usize,
    #[serde(rename = "N")]
    pub n_prompt: usize,
    #[serde(rename = "L")]
    pub depth: usize,
    pub sigma: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_tau_ff")]
    pub tau_ff: f64,
    #[serde(default)]
    pub eta: Option<f64>,
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default = "default_c1")]
    pub c1: f64,
    #[serde(default)]
    pub eps_dis: f64,
    #[serde(default)]
    pub log_cover: f64,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub bank_seed: u64,
    #[serde(default)]
    pub member_seed: u64,
    #[serde(default = "default_test_points")]
    pub test_points: usize,
    #[serde(default)]
    pub x_dist: XDistribution,
    #[serde(default)]
    pub noise: NoiseModel,
    #[serde(default)]
    pub workers: usize,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let err = |m: String| Err(HarnessError::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return err(format!("unsupported schema_version {}", self.schema_version));
        }
        self.spec.validate()?;
        if self.spec.dim() != 0 && self.spec.dim() != self.d {
            return err(format!(
                "spec dimension {} disagrees with d = {}",
                self.spec.dim(),
                self.d
            ));
        }
        if self.depth < 3 || self.depth % 2 == 0 {
            return err(format!("L must be odd and >= 3, got {}", self.depth));
        }
        if self.n_prompt < 1 || self.n < 1 || self.d < 1 {
            return err("N, n, d must all be >= 1".into());
        }
        if !(self.sigma >= 0.0) {
            return err(format!("sigma must be >= 0, got {}", self.sigma));
        }
        if !(self.tau > 0.0) || !(self.tau_ff > 4.0) {
            return err("need tau > 0 and tau_ff > 4".into());
        }
        if let Some(eta) = self.eta {
            if !(eta > 0.0) {
                return err(format!("eta must be > 0, got {eta}"));
            }
        }
        if let Some(lambda) = self.lambda {
            if !(lambda >= 0.0) {
                return err(format!("lambda must be >= 0, got {lambda}"));
            }
        }
        if self.test_points < 1 {
            return err("test_points must be >= 1".into());
        }
        if self.seeds.is_empty() {
            return err("seeds must be nonempty".into());
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self, HarnessError> {
        let cfg: ExperimentConfig =
            serde_json::from_str(s).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialize")
    }

    pub fn resolved_eta(&self) -> f64 {
        self.eta.unwrap_or_else(|| default_eta(self.n))
    }

    /// The feature-approximation scale fed to the penalty rule when λ is
    /// auto: ε̂ = C_F · (1/τ_ff + √(max(log_cover, ln n)/n)).
    pub fn eps_hat(&self) -> f64 {
        let c_f = barron_parameter(&self.spec);
        let log_term = self.log_cover.max((self.n.max(2) as f64).ln());
        c_f * (1.0 / self.tau_ff + (log_term / self.n as f64).sqrt())
    }

    pub fn resolved_lambda(&self) -> f64 {
        self.lambda.unwrap_or_else(|| {
            default_lambda(
                self.n_prompt.max(2),
                self.sigma,
                barron_parameter(&self.spec),
                self.eps_dis,
                self.eps_hat(),
                self.c1,
            )
        })
    }
}

fn sample_x(d: usize, dist: XDistribution, rng: &mut impl Rng) -> Vec<f64> {
    match dist {
        XDistribution::Ball => features::uniform_ball_point(d, 1.0, rng),
        XDistribution::Sphere => {
            let mut v = features::uniform_ball_point(d, 1.0, rng);
            let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.0 {
                for x in v.iter_mut() {
                    *x /= n;
                }
            }
            v
        }
        XDistribution::TruncatedGaussian => {
            // N(0, I/d) restricted to the unit ball by rejection.
            let scale = 1.0 / (d as f64).sqrt();
            loop {
                let v: Vec<f64> = (0..d)
                    .map(|_| scale * rng.sample::<f64, _>(rand_distr::StandardNormal))
                    .collect();
                if v.iter().map(|x| x * x).sum::<f64>() <= 1.0 {
                    return v;
                }
            }
        }
    }
}

fn sample_noise(sigma: f64, model: NoiseModel, rng: &mut impl Rng) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    match model {
        NoiseModel::Gaussian => sigma * rng.sample::<f64, _>(rand_distr::StandardNormal),
        // variance σ², support σ√3
        NoiseModel::BoundedUniform => {
            rng.random_range(-sigma * 3f64.sqrt()..sigma * 3f64.sqrt())
        }
    }
}

/// Draw a member, an N-point prompt with noisy labels, and a query point.
pub fn generate_task(
    spec: &ClassSpec,
    member_seed: u64,
    n_prompt: usize,
    d: usize,
    sigma: f64,
    data_seed: u64,
) -> Result<(FunctionInstance, Vec<Vec<f64>>, Vec<f64>, Vec<f64>), HarnessError> {
    generate_task_with(
        spec,
        member_seed,
        n_prompt,
        d,
        sigma,
        data_seed,
        XDistribution::Ball,
        NoiseModel::Gaussian,
    )
}

#[allow(clippy::too_many_arguments)]
pub fn generate_task_with(
    spec: &ClassSpec,
    member_seed: u64,
    n_prompt: usize,
    d: usize,
    sigma: f64,
    data_seed: u64,
    x_dist: XDistribution,
    noise: NoiseModel,
) -> Result<(FunctionInstance, Vec<Vec<f64>>, Vec<f64>, Vec<f64>), HarnessError> {
    if !(sigma >= 0.0) {
        return Err(HarnessError::Config(format!("sigma must be >= 0, got {sigma}")));
    }
    let f = features::sample_member_dim(spec, d, member_seed)?;
    let mut x_rng = stream_rng(data_seed, &[STREAM_PROMPT_X]);
    let mut z_rng = stream_rng(data_seed, &[STREAM_NOISE]);
    let xs: Vec<Vec<f64>> = (0..n_prompt).map(|_| sample_x(d, x_dist, &mut x_rng)).collect();
    let ys: Vec<f64> = xs
        .iter()
        .map(|x| f.eval(x) + sample_noise(sigma, noise, &mut z_rng))
        .collect();
    let x_query = query_batch(d, 1, data_seed, x_dist).pop().expect("one query");
    Ok((f, xs, ys, x_query))
}

/// The seeded query batch for a data seed (query randomness is a separate
/// stream from the prompt, so the two can be resized independently).
pub fn query_batch(d: usize, count: usize, data_seed: u64, x_dist: XDistribution) -> Vec<Vec<f64>> {
    let mut rng = stream_rng(data_seed, &[STREAM_QUERY]);
    (0..count).map(|_| sample_x(d, x_dist, &mut rng)).collect()
}

/// A fully materialized episode, before any forward pass.
pub struct PreparedEpisode {
    pub bank: FeatureBank,
    pub f: FunctionInstance,
    pub xs: Vec<Vec<f64>>,
    pub ys: Vec<f64>,
    pub x_query: Vec<f64>,
    pub problem: LassoProblem,
    pub weights: TransformerWeights,
    pub h0: HiddenState,
    pub eta: f64,
    pub lambda: f64,
}

pub fn prepare_episode(
    config: &ExperimentConfig,
    member_seed: u64,
    data_seed: u64,
) -> Result<PreparedEpisode, HarnessError> {
    config.validate()?;
    let bank = features::make_feature_bank(&config.spec, config.n, config.tau_ff, config.bank_seed)?;
    let (f, xs, ys, x_query) = generate_task_with(
        &config.spec,
        member_seed,
        config.n_prompt,
        config.d,
        config.sigma,
        data_seed,
        config.x_dist,
        config.noise,
    )?;
    let eta = config.resolved_eta();
    let lambda = config.resolved_lambda();
    let phi = design_matrix(&bank, &xs)?;
    let problem = LassoProblem {
        phi,
        y: Array1::from_vec(ys.clone()),
        lambda,
        eta,
    };
    problem.validate()?;
    let weights =
        build_icl_transformer(&bank, config.depth, lambda, config.tau, eta, config.n_prompt)?;
    let h0 = init_hidden(&xs, &ys, &x_query, config.n)?;
    Ok(PreparedEpisode {
        bank,
        f,
        xs,
        ys,
        x_query,
        problem,
        weights,
        h0,
        eta,
        lambda,
    })
}

/// Empirical stand-in for the spectral oracle: an ℓ1-penalized fit of f on a
/// seeded ball grid, with the penalty raised until the coefficients respect
/// the 4·C_F budget.
pub fn empirical_oracle(
    f: &FunctionInstance,
    bank: &FeatureBank,
) -> Result<OracleCoefficients, HarnessError> {
    let c_f = barron_parameter(&f.parent);
    let grid = features::unit_ball_grid(f.parent.dim().max(bank.dim()), 512, 0x0b);
    let phi = design_matrix(bank, &grid)?;
    let y = Array1::from_vec(grid.iter().map(|x| f.eval(x)).collect());
    let mut lambda = 1e-4 * c_f.max(1e-6);
    let mut rho = Array1::zeros(bank.n + 1);
    for _ in 0..48 {
        let problem = LassoProblem {
            phi: phi.clone(),
            y: y.clone(),
            lambda,
            eta: default_eta(bank.n),
        };
        rho = oracle_solve(&problem, 1e-8)?;
        if c_f == 0.0 || oracle_l1_budget(&rho) < 4.0 * c_f {
            break;
        }
        lambda *= 2.0;
    }
    let certified_error = approximation_error(f, bank, &rho, &grid)?;
    Ok(OracleCoefficients {
        rho_star: rho,
        certified_error,
        source: "empirical".into(),
    })
}

fn oracle_for(
    f: &FunctionInstance,
    bank: &FeatureBank,
) -> Result<OracleCoefficients, HarnessError> {
    match features::oracle_coefficients(f, bank) {
        Ok(o) => Ok(o),
        Err(FeatureError::UnsupportedClass(_)) => empirical_oracle(f, bank),
        Err(e) => Err(e.into()),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub y_hat: f64,
    pub truth: f64,
    pub squared_error: f64,
    /// ℓ(ρ^(L)) − ℓ(ρ*) against the construction/fallback oracle coefficients
    pub eps_opt_vs_rho_star: f64,
    /// ℓ(ρ^(L)) − ℓ(ρ̂) against the converged Lasso minimizer
    pub eps_opt_vs_minimizer: f64,
    pub l1_of_rho_l: f64,
    pub max_emulation_residual: f64,
    pub emulation_ok: bool,
    pub readout_consistency_gap: f64,
    pub oracle_source: String,
}

pub fn run_episode(
    config: &ExperimentConfig,
    member_seed: u64,
    data_seed: u64,
) -> Result<EpisodeReport, HarnessError> {
    let ep = prepare_episode(config, member_seed, data_seed)?;
    let (h_l, trace) = forward(&ep.weights, &ep.h0, true)?;
    let trace = trace.expect("traced forward");
    let report = emulation_gap(&trace, &ep.problem, ep.eta, ep.lambda, config.tau)?;

    let y_hat = readout(&h_l);
    let truth = ep.f.eval(&ep.x_query);
    let (rho_l, yhat_slab, _, phi_slab) = extract_state(&h_l)?;
    debug_assert_eq!(yhat_slab, y_hat);
    let query_fit = phi_slab.column(phi_slab.ncols() - 1).dot(&rho_l);

    let obj_l = lasso_objective(&ep.problem, &rho_l);
    let oracle = oracle_for(&ep.f, &ep.bank)?;
    let minimizer = oracle_solve(&ep.problem, 1e-8)?;
    Ok(EpisodeReport {
        y_hat,
        truth,
        squared_error: (y_hat - truth) * (y_hat - truth),
        eps_opt_vs_rho_star: obj_l - lasso_objective(&ep.problem, &oracle.rho_star),
        eps_opt_vs_minimizer: obj_l - lasso_objective(&ep.problem, &minimizer),
        l1_of_rho_l: rho_l.iter().map(|v| v.abs()).sum(),
        max_emulation_residual: report.max_e_inf,
        emulation_ok: report.all_ok,
        readout_consistency_gap: (y_hat - query_fit).abs(),
        oracle_source: oracle.source,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RiskEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub per_seed: Vec<f64>,
}

fn in_pool<T: Send>(workers: usize, job: impl FnOnce() -> T + Send) -> T {
    if workers == 0 {
        job()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .expect("thread pool")
            .install(job)
    }
}

/// Monte Carlo risk over fresh prompts (one per data seed) and a fresh query
/// batch per seed. Returns the mean MSE, its standard error over seeds, and
/// the per-seed MSEs.
pub fn risk_estimate(
    config: &ExperimentConfig,
    member_seed: u64,
    data_seeds: &[u64],
) -> Result<RiskEstimate, HarnessError> {
    config.validate()?;
    if data_seeds.len() < 2 {
        return Err(HarnessError::Config("risk_estimate needs >= 2 data seeds".into()));
    }
    let per_seed: Vec<f64> = in_pool(config.workers, || {
        data_seeds
            .par_iter()
            .map(|&seed| seed_mse(config, member_seed, seed))
            .collect::<Result<Vec<f64>, HarnessError>>()
    })?;
    let m = per_seed.len() as f64;
    let mean = per_seed.iter().sum::<f64>() / m;
    let var = per_seed.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1.0);
    Ok(RiskEstimate {
        mean,
        stderr: (var / m).sqrt(),
        per_seed,
    })
}

fn seed_mse(
    config: &ExperimentConfig,
    member_seed: u64,
    data_seed: u64,
) -> Result<f64, HarnessError> {
    let ep = prepare_episode(config, member_seed, data_seed)?;
    let queries = query_batch(config.d, config.test_points, data_seed, config.x_dist);
    let mut total = 0.0;
    for q in &queries {
        let h0 = init_hidden(&ep.xs, &ep.ys, q, config.n)?;
        let (h_l, _) = forward(&ep.weights, &h0, false)?;
        let err = readout(&h_l) - ep.f.eval(q);
        total += err * err;
    }
    Ok(total / queries.len() as f64)
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

/// Axes of the cartesian sweep. Empty axes fall back to the base config's
/// single value.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SweepGrid {
    #[serde(default, rename = "N")]
    pub n_prompt: Vec<usize>,
    #[serde(default, rename = "L")]
    pub depth: Vec<usize>,
    #[serde(default)]
    pub n: Vec<usize>,
    #[serde(default)]
    pub tau: Vec<f64>,
    #[serde(default)]
    pub lambda: Vec<f64>,
}

impl SweepGrid {
    /// Parse `"N=32,128,512;L=5,21;tau=1e5,1e6"`.
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let mut grid = SweepGrid::default();
        for part in text.split(';').filter(|p| !p.trim().is_empty()) {
            let (axis, values) = part
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("bad grid axis {part:?}")))?;
            let parse_usize = |s: &str| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|e| HarnessError::Config(format!("grid value {s:?}: {e}")))
            };
            let parse_f64 = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| HarnessError::Config(format!("grid value {s:?}: {e}")))
            };
            match axis.trim() {
                "N" => grid.n_prompt = values.split(',').map(parse_usize).collect::<Result<_, _>>()?,
                "L" => grid.depth = values.split(',').map(parse_usize).collect::<Result<_, _>>()?,
                "n" => grid.n = values.split(',').map(parse_usize).collect::<Result<_, _>>()?,
                "tau" => grid.tau = values.split(',').map(parse_f64).collect::<Result<_, _>>()?,
                "lambda" => grid.lambda = values.split(',').map(parse_f64).collect::<Result<_, _>>()?,
                other => {
                    return Err(HarnessError::Config(format!(
                        "unknown grid axis {other:?} (use N, L, n, tau, lambda)"
                    )))
                }
            }
        }
        Ok(grid)
    }

    fn cells(&self, base: &ExperimentConfig) -> Vec<ExperimentConfig> {
        let ns = or_base(&self.n_prompt, base.n_prompt);
        let ls = or_base(&self.depth, base.depth);
        let widths = or_base(&self.n, base.n);
        let taus = or_base(&self.tau, base.tau);
        let lambdas: Vec<Option<f64>> = if self.lambda.is_empty() {
            vec![base.lambda]
        } else {
            self.lambda.iter().copied().map(Some).collect()
        };
        let mut cells = Vec::new();
        for &n_prompt in &ns {
            for &depth in &ls {
                for &width in &widths {
                    for &tau in &taus {
                        for &lambda in &lambdas {
                            let mut c = base.clone();
                            c.n_prompt = n_prompt;
                            c.depth = depth;
                            c.n = width;
                            c.tau = tau;
                            c.lambda = lambda;
                            cells.push(c);
                        }
                    }
                }
            }
        }
        cells
    }
}

fn or_base<T: Copy>(axis: &[T], base: T) -> Vec<T> {
    if axis.is_empty() {
        vec![base]
    } else {
        axis.to_vec()
    }
}

fn cell_key(c: &ExperimentConfig) -> String {
    format!(
        "N={};L={};n={};tau={};lambda={}",
        c.n_prompt,
        c.depth,
        c.n,
        c.tau,
        c.lambda.map_or_else(|| "auto".into(), |l| format!("{l}"))
    )
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub cell_key: String,
    pub config: ExperimentConfig,
    pub result: Option<RiskEstimate>,
    pub error: Option<String>,
}

const SWEEP_HEADER: &[&str] = &[
    "cell_key", "N", "L", "n", "tau", "lambda", "lambda_resolved", "d", "sigma", "tau_ff", "eta",
    "c1", "eps_dis", "log_cover", "bank_seed", "member_seed", "test_points", "seeds", "mse_mean",
    "mse_stderr", "per_seed_mse", "error",
];

fn sweep_record(row: &SweepRow) -> Vec<String> {
    let c = &row.config;
    let join =
        |v: &[String]| -> String { v.join("|") };
    vec![
        row.cell_key.clone(),
        format!("{}", c.n_prompt),
        format!("{}", c.depth),
        format!("{}", c.n),
        format!("{}", c.tau),
        c.lambda.map_or_else(|| "auto".into(), |l| format!("{l}")),
        format!("{}", c.resolved_lambda()),
        format!("{}", c.d),
        format!("{}", c.sigma),
        format!("{}", c.tau_ff),
        format!("{}", c.resolved_eta()),
        format!("{}", c.c1),
        format!("{}", c.eps_dis),
        format!("{}", c.log_cover),
        format!("{}", c.bank_seed),
        format!("{}", c.member_seed),
        format!("{}", c.test_points),
        join(&c.seeds.iter().map(|s| format!("{s}")).collect::<Vec<_>>()),
        row.result.as_ref().map_or_else(String::new, |r| format!("{}", r.mean)),
        row.result.as_ref().map_or_else(String::new, |r| format!("{}", r.stderr)),
        row.result.as_ref().map_or_else(String::new, |r| {
            join(&r.per_seed.iter().map(|v| format!("{v}")).collect::<Vec<_>>())
        }),
        row.error.clone().unwrap_or_default(),
    ]
}

fn completed_keys(path: &Path) -> Result<HashSet<String>, HarnessError> {
    if !path.exists() {
        return Ok(HashSet::new());
    }
    let mut reader = csv::Reader::from_path(path)?;
    let mut keys = HashSet::new();
    for record in reader.records() {
        let record = record?;
        if let Some(k) = record.get(0) {
            keys.insert(k.to_string());
        }
    }
    Ok(keys)
}

/// Run one risk estimate per grid cell and append rows to `out` in grid
/// order. Already-present cell keys are skipped, so an interrupted sweep
/// resumes where it stopped. Cells that fail are recorded in the `error`
/// column; the sweep never aborts on a cell.
pub fn sweep(
    config: &ExperimentConfig,
    grid: &SweepGrid,
    out: &Path,
) -> Result<Vec<SweepRow>, HarnessError> {
    config.validate()?;
    let cells = grid.cells(config);
    if cells.is_empty() {
        return Err(HarnessError::Config("empty sweep grid".into()));
    }
    let done = completed_keys(out)?;
    let pending: Vec<(usize, ExperimentConfig)> = cells
        .into_iter()
        .enumerate()
        .filter(|(_, c)| !done.contains(&cell_key(c)))
        .collect();

    // Cells run concurrently; rows are written sequentially in grid order so
    // reruns of the same config are bit-identical.
    let mut rows: Vec<(usize, SweepRow)> = in_pool(config.workers, || {
        pending
            .par_iter()
            .map(|(idx, cell)| {
                let result = risk_estimate(cell, cell.member_seed, &cell.seeds);
                let row = match result {
                    Ok(r) => SweepRow {
                        cell_key: cell_key(cell),
                        config: cell.clone(),
                        result: Some(r),
                        error: None,
                    },
                    Err(e) => SweepRow {
                        cell_key: cell_key(cell),
                        config: cell.clone(),
                        result: None,
                        error: Some(e.to_string()),
                    },
                };
                (*idx, row)
            })
            .collect()
    });
    rows.sort_by_key(|(idx, _)| *idx);

    let write_header = !out.exists();
    let file = std::fs::OpenOptions::new().create(true).append(true).open(out)?;
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    if write_header {
        writer.write_record(SWEEP_HEADER)?;
    }
    for (_, row) in &rows {
        writer.write_record(sweep_record(row))?;
    }
    writer.flush()?;
    Ok(rows.into_iter().map(|(_, r)| r).collect())
}

/// The emulation-verification suite behind `verify`: one traced episode per
/// data seed, each certified block by block.
pub struct VerifyOutcome {
    pub data_seed: u64,
    pub max_residual: f64,
    /// largest per-block certificate: analytic bound plus f64 allowance
    pub max_bound: f64,
    pub readout_gap: f64,
    pub readout_bound: f64,
    pub ok: bool,
}

pub fn verify_config(config: &ExperimentConfig) -> Result<Vec<VerifyOutcome>, HarnessError> {
    config.validate()?;
    let mut outcomes = Vec::new();
    for &seed in &config.seeds {
        let ep = prepare_episode(config, config.member_seed, seed)?;
        let (h_l, trace) = forward(&ep.weights, &ep.h0, true)?;
        let trace = trace.expect("traced forward");
        let report = emulation_gap(&trace, &ep.problem, ep.eta, ep.lambda, config.tau)?;
        let (rho_l, _, _, phi_slab) = extract_state(&h_l)?;
        let query_fit = phi_slab.column(phi_slab.ncols() - 1).dot(&rho_l);
        let readout_gap = (readout(&h_l) - query_fit).abs();
        let l1: f64 = rho_l.iter().map(|v| v.abs()).sum();
        let readout_bound = 2.0 * l1 * l1 / config.tau;
        let max_bound = report
            .blocks
            .iter()
            .fold(0.0f64, |m, b| m.max(b.e_bound + b.e_fp));
        let ok = report.all_ok && readout_gap <= readout_bound;
        outcomes.push(VerifyOutcome {
            data_seed: seed,
            max_residual: report.max_e_inf,
            max_bound,
            readout_gap,
            readout_bound,
            ok,
        });
    }
    Ok(outcomes)
}

/// Write a solver trajectory for the episode's Lasso problem (used by the
/// `solve` subcommand).
pub fn solve_to_csv<W: Write>(
    config: &ExperimentConfig,
    member_seed: u64,
    data_seed: u64,
    steps: usize,
    out: W,
) -> Result<(), HarnessError> {
    let ep = prepare_episode(config, member_seed, data_seed)?;
    let traj = lasso::run_ista(&ep.problem, steps, None)?;
    let oracle_obj = lasso_objective(&ep.problem, &oracle_solve(&ep.problem, 1e-8)?);
    lasso::write_trajectory_csv(&traj, Some(oracle_obj), out)?;
    Ok(())
}
