//! The in-context Lasso objective over ramp features, proximal gradient
//! (ISTA) with optional injected per-step residuals, a high-accuracy oracle
//! solver, and KKT diagnostics.
//!
//! Objective: ℓ(ρ) = (1/N) Σ_i (y_i − φ_iᵀρ)² + λ‖ρ‖₁, minimized by
//! ρ_{t+1} = ST_{ηλ}(ρ_t + (2η/N) Σ_i (y_i − φ_iᵀρ_t) φ_i) + e_{t+1}.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LassoError {
    #[error("soft threshold needs kappa >= 0, got {0}")]
    NegativeThreshold(f64),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("oracle solver did not reach tol {tol} within {cap} steps (kkt residual {residual})")]
    NoConvergence { cap: usize, tol: f64, residual: f64 },
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
}

/// Design matrix (rows φ_iᵀ, entries in [0,1], last column ones), labels,
/// penalty λ and stepsize η.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LassoProblem {
    pub phi: Array2<f64>,
    pub y: Array1<f64>,
    pub lambda: f64,
    pub eta: f64,
}

/// Stepsize 1/(2(n+1)) that makes the per-step descent inequality provable
/// for [0,1]-valued features in R^{n+1}.
pub fn default_eta(n: usize) -> f64 {
    1.0 / (2.0 * (n + 1) as f64)
}

impl LassoProblem {
    pub fn n_prompt(&self) -> usize {
        self.phi.nrows()
    }

    /// Width n+1 of the coefficient vector (ramp features plus the constant).
    pub fn width(&self) -> usize {
        self.phi.ncols()
    }

    pub fn validate(&self) -> Result<(), LassoError> {
        let bad = |m: String| Err(LassoError::InvalidProblem(m));
        if self.phi.nrows() != self.y.len() {
            return bad(format!(
                "{} feature rows vs {} labels",
                self.phi.nrows(),
                self.y.len()
            ));
        }
        if self.phi.nrows() == 0 || self.phi.ncols() == 0 {
            return bad("empty design matrix".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda {}", self.lambda));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad(format!("eta {}", self.eta));
        }
        for v in self.phi.iter() {
            if !(0.0..=1.0).contains(v) {
                return bad(format!("feature entry {v} outside [0,1]"));
            }
        }
        if self.phi.column(self.phi.ncols() - 1).iter().any(|&v| v != 1.0) {
            return bad("last design column must be all ones".into());
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self, LassoError> {
        let p: LassoProblem =
            serde_json::from_str(s).map_err(|e| LassoError::InvalidProblem(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }
}

/// ST_κ(z) = sign(z)·max{|z| − κ, 0}; a tie |z| = κ returns exactly 0.
pub fn soft_threshold(z: f64, kappa: f64) -> f64 {
    assert!(kappa >= 0.0, "soft_threshold needs kappa >= 0, got {kappa}");
    z.signum() * (z.abs() - kappa).max(0.0)
}

fn soft_threshold_vec(z: &Array1<f64>, kappa: f64) -> Array1<f64> {
    z.mapv(|v| soft_threshold(v, kappa))
}

pub fn lasso_objective(problem: &LassoProblem, rho: &Array1<f64>) -> f64 {
    assert_eq!(rho.len(), problem.width(), "coefficient length mismatch");
    let resid = &problem.y - &problem.phi.dot(rho);
    resid.iter().map(|r| r * r).sum::<f64>() / problem.n_prompt() as f64
        + problem.lambda * rho.iter().map(|v| v.abs()).sum::<f64>()
}

/// Gradient of the smooth part: −(2/N) Φᵀ(y − Φρ).
pub fn smooth_gradient(problem: &LassoProblem, rho: &Array1<f64>) -> Array1<f64> {
    let resid = &problem.y - &problem.phi.dot(rho);
    problem.phi.t().dot(&resid) * (-2.0 / problem.n_prompt() as f64)
}

/// One (inexact) proximal gradient step; `e_next = 0` gives exact ISTA.
pub fn ista_step(
    problem: &LassoProblem,
    rho_t: &Array1<f64>,
    e_next: &Array1<f64>,
) -> Result<Array1<f64>, LassoError> {
    if rho_t.len() != problem.width() || e_next.len() != problem.width() {
        return Err(LassoError::DimensionMismatch(format!(
            "rho len {} / e len {} vs width {}",
            rho_t.len(),
            e_next.len(),
            problem.width()
        )));
    }
    let forward = rho_t - &(smooth_gradient(problem, rho_t) * problem.eta);
    Ok(soft_threshold_vec(&forward, problem.eta * problem.lambda) + e_next)
}

/// Iterate sequence ρ_0 = 0, ρ_{t+1} = ista_step(ρ_t, e_{t+1}), with the
/// injected residuals and per-step objectives recorded.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LassoTrajectory {
    pub iterates: Vec<Array1<f64>>,
    pub injected_residuals: Vec<Array1<f64>>,
    pub objectives: Vec<f64>,
}

pub fn run_ista(
    problem: &LassoProblem,
    t_steps: usize,
    mut residual_source: Option<&mut dyn FnMut(usize) -> Array1<f64>>,
) -> Result<LassoTrajectory, LassoError> {
    let width = problem.width();
    let mut iterates = vec![Array1::zeros(width)];
    let mut objectives = vec![lasso_objective(problem, &iterates[0])];
    let mut injected = Vec::with_capacity(t_steps);
    for t in 0..t_steps {
        let e = match residual_source.as_mut() {
            Some(src) => src(t + 1),
            None => Array1::zeros(width),
        };
        let next = ista_step(problem, &iterates[t], &e)?;
        objectives.push(lasso_objective(problem, &next));
        iterates.push(next);
        injected.push(e);
    }
    Ok(LassoTrajectory {
        iterates,
        injected_residuals: injected,
        objectives,
    })
}

/// KKT residual: max_j of |g_j + λ·sign(ρ_j)| on the support and
/// max{|g_j| − λ, 0} off it. Zero exactly at a minimizer.
pub fn kkt_residual(problem: &LassoProblem, rho: &Array1<f64>) -> f64 {
    let g = smooth_gradient(problem, rho);
    rho.iter()
        .zip(g.iter())
        .map(|(&r, &gj)| {
            if r != 0.0 {
                (gj + problem.lambda * r.signum()).abs()
            } else {
                (gj.abs() - problem.lambda).max(0.0)
            }
        })
        .fold(0.0, f64::max)
}

pub const ORACLE_STEP_CAP: usize = 1_000_000;

/// High-accuracy reference minimizer: FISTA with function-value restarts and
/// a power-iteration stepsize with a geometric safety margin, polished until
/// the KKT residual drops below `tol`.
pub fn oracle_solve(problem: &LassoProblem, tol: f64) -> Result<Array1<f64>, LassoError> {
    assert!(tol > 0.0, "oracle_solve needs tol > 0");
    problem.validate()?;
    let width = problem.width();
    let n_prompt = problem.n_prompt() as f64;

    // Largest curvature of the smooth part via power iteration on (2/N)ΦᵀΦ.
    let mut v = Array1::from_elem(width, (width as f64).sqrt().recip());
    let mut lip = 1.0;
    for _ in 0..100 {
        let w = problem.phi.t().dot(&problem.phi.dot(&v)) * (2.0 / n_prompt);
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            break;
        }
        lip = norm;
        v = w / norm;
    }
    let step = 0.9 / lip.max(1e-12);

    let mut x = Array1::zeros(width);
    let mut z = x.clone();
    let mut theta = 1.0f64;
    let mut best_obj = lasso_objective(problem, &x);
    for iter in 0..ORACLE_STEP_CAP {
        let forward = &z - &(smooth_gradient(problem, &z) * step);
        let x_next = soft_threshold_vec(&forward, step * problem.lambda);
        let theta_next = 0.5 * (1.0 + (1.0 + 4.0 * theta * theta).sqrt());
        let beta = (theta - 1.0) / theta_next;
        z = &x_next + &((&x_next - &x) * beta);
        x = x_next;
        theta = theta_next;
        let obj = lasso_objective(problem, &x);
        if obj > best_obj {
            // momentum overshoot: restart from the current point
            theta = 1.0;
            z = x.clone();
        }
        best_obj = best_obj.min(obj);
        if iter % 32 == 0 && kkt_residual(problem, &x) <= tol {
            return Ok(x);
        }
    }
    let residual = kkt_residual(problem, &x);
    if residual <= tol {
        return Ok(x);
    }
    Err(LassoError::NoConvergence {
        cap: ORACLE_STEP_CAP,
        tol,
        residual,
    })
}

/// Penalty rule λ = c1·[(log N/N)^{1/6} C^{−1/3} ε̂^{2/3} + √(log N/N)(C + σ)
/// + C^{−1} ε_dis²]; zero when the class is trivial (C = 0).
pub fn default_lambda(
    n_prompt: usize,
    sigma_hat: f64,
    c_f: f64,
    eps_dis: f64,
    eps_hat: f64,
    c1: f64,
) -> f64 {
    assert!(n_prompt >= 2, "default_lambda needs N >= 2");
    if c_f == 0.0 {
        return 0.0;
    }
    let ratio = (n_prompt as f64).ln() / n_prompt as f64;
    c1 * (ratio.powf(1.0 / 6.0) * c_f.powf(-1.0 / 3.0) * eps_hat.powf(2.0 / 3.0)
        + ratio.sqrt() * (c_f + sigma_hat)
        + eps_dis * eps_dis / c_f)
}

/// Trajectory CSV rows: (t, objective, gap_vs_oracle, l1_norm,
/// injected_residual_l1). The gap column is empty when no oracle value is
/// supplied.
pub fn write_trajectory_csv<W: std::io::Write>(
    traj: &LassoTrajectory,
    oracle_objective: Option<f64>,
    out: W,
) -> Result<(), std::io::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "t",
        "objective",
        "gap_vs_oracle",
        "l1_norm",
        "injected_residual_l1",
    ])?;
    for (t, rho) in traj.iterates.iter().enumerate() {
        let gap = oracle_objective
            .map(|o| format!("{}", traj.objectives[t] - o))
            .unwrap_or_default();
        let e_l1 = if t == 0 {
            0.0
        } else {
            traj.injected_residuals[t - 1]
                .iter()
                .map(|v| v.abs())
                .sum()
        };
        w.write_record([
            format!("{t}"),
            format!("{}", traj.objectives[t]),
            gap,
            format!("{}", rho.iter().map(|v| v.abs()).sum::<f64>()),
            format!("{e_l1}"),
        ])?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{self, Atom, ClassSpec};
    use crate::seeding::stream_rng;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::Rng;

    fn toy_problem() -> LassoProblem {
        LassoProblem {
            phi: array![[1.0, 1.0], [0.0, 1.0]],
            y: array![1.0, 0.0],
            lambda: 0.1,
            eta: default_eta(1),
        }
    }

    /// Seeded ramp-feature instance: bank + ball prompts + noisy labels.
    pub fn seeded_feature_problem(
        n: usize,
        n_prompt: usize,
        lambda: f64,
        seed: u64,
    ) -> LassoProblem {
        let spec = ClassSpec::FiniteSpectrum {
            atoms: vec![
                Atom {
                    omega: vec![2.0, -1.0, 0.8, 0.0],
                    s: 0.8,
                },
                Atom {
                    omega: vec![-0.3, 1.4, 0.0, 2.2],
                    s: 0.5,
                },
                Atom {
                    omega: vec![1.0, 1.0, 1.0, -1.0],
                    s: 0.4,
                },
            ],
            b_max: 0.3,
        };
        let bank = features::make_feature_bank(&spec, n, 100.0, seed).unwrap();
        let f = features::sample_member(&spec, seed ^ 0xabc).unwrap();
        let xs = features::unit_ball_grid(4, n_prompt, seed ^ 0xdef);
        let phi = features::design_matrix(&bank, &xs).unwrap();
        let mut rng = stream_rng(seed, &[0x77]);
        let y = Array1::from_iter(xs.iter().map(|x| {
            f.eval(x) + 0.05 * rng.sample::<f64, _>(rand_distr::StandardNormal)
        }));
        LassoProblem {
            phi,
            y,
            lambda,
            eta: default_eta(n),
        }
    }

    #[test]
    fn soft_threshold_anchor_values() {
        assert_eq!(soft_threshold(0.5, 1.0), 0.0);
        assert_eq!(soft_threshold(-1.0, 0.3), -0.7);
        for z in [-2.0, -0.1, 0.0, 0.3, 5.0] {
            assert_eq!(soft_threshold(z, 0.0), z);
        }
        // tie |z| = κ returns exactly 0
        assert_eq!(soft_threshold(0.4, 0.4), 0.0);
        assert_eq!(soft_threshold(-0.4, 0.4), 0.0);
    }

    #[test]
    fn soft_threshold_nonexpansive() {
        let mut rng = stream_rng(1, &[1]);
        for _ in 0..2000 {
            let u: f64 = rng.random_range(-5.0..5.0);
            let v: f64 = rng.random_range(-5.0..5.0);
            let k: f64 = rng.random_range(0.0..2.0);
            assert!(
                (soft_threshold(u, k) - soft_threshold(v, k)).abs() <= (u - v).abs() + 1e-15
            );
        }
    }

    #[test]
    fn objective_anchor_values() {
        let p = toy_problem();
        // ρ = 0 gives the label energy.
        assert_abs_diff_eq!(
            lasso_objective(&p, &Array1::zeros(2)),
            (1.0 + 0.0) / 2.0,
            epsilon = 1e-15
        );
        // Hand value: ρ = (1, 0) fits both rows up to y₂, residuals (0, 0).
        assert_abs_diff_eq!(lasso_objective(&p, &array![1.0, 0.0]), 0.1, epsilon = 1e-15);
        // λ = 0 at an exact interpolant of the square system is 0.
        let mut p0 = p.clone();
        p0.lambda = 0.0;
        assert_abs_diff_eq!(lasso_objective(&p0, &array![1.0, 0.0]), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn ista_step_fixed_point_and_scalar_case() {
        // λ = 0 and zero residual: the step is the identity.
        let mut p = toy_problem();
        p.lambda = 0.0;
        let rho = array![1.0, 0.0];
        let stepped = ista_step(&p, &rho, &Array1::zeros(2)).unwrap();
        assert_abs_diff_eq!(stepped[0], rho[0], epsilon = 1e-15);
        assert_abs_diff_eq!(stepped[1], rho[1], epsilon = 1e-15);

        // Single constant feature, η = 1/2: ρ₁ = 0 + 2·(1/2)·1·1 = 1.
        let p = LassoProblem {
            phi: array![[1.0]],
            y: array![1.0],
            lambda: 0.0,
            eta: 0.5,
        };
        let out = ista_step(&p, &Array1::zeros(1), &Array1::zeros(1)).unwrap();
        assert_abs_diff_eq!(out[0], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn ista_step_satisfies_prox_subgradient() {
        // The exact step minimizes ½‖x − forward‖² + ηλ‖x‖₁: check the
        // subgradient condition coordinatewise.
        let p = seeded_feature_problem(12, 20, 0.05, 3);
        let mut rng = stream_rng(4, &[2]);
        let rho = Array1::from_iter((0..p.width()).map(|_| rng.random_range(-1.0..1.0)));
        let forward = &rho - &(smooth_gradient(&p, &rho) * p.eta);
        let out = ista_step(&p, &rho, &Array1::zeros(p.width())).unwrap();
        let k = p.eta * p.lambda;
        for j in 0..p.width() {
            let grad_quad = out[j] - forward[j];
            if out[j] != 0.0 {
                assert_abs_diff_eq!(grad_quad + k * out[j].signum(), 0.0, epsilon = 1e-12);
            } else {
                assert!(grad_quad.abs() <= k + 1e-12);
            }
        }
    }

    #[test]
    fn run_ista_descent_and_t0() {
        let p = seeded_feature_problem(16, 32, 0.02, 5);
        let traj = run_ista(&p, 0, None).unwrap();
        assert_eq!(traj.iterates.len(), 1);
        assert!(traj.iterates[0].iter().all(|&v| v == 0.0));

        let traj = run_ista(&p, 200, None).unwrap();
        for w in traj.objectives.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "objective rose: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn per_step_gap_telescoping_bound() {
        // ℓ(ρ_{t+1}) − ℓ(ρ̂) ≤ (n+1)(‖ρ_t − ρ̂‖² − ‖ρ_{t+1} − ρ̂‖²) for the
        // exact iteration at η = 1/(2(n+1)).
        let p = seeded_feature_problem(10, 24, 0.05, 8);
        let n_plus_1 = p.width() as f64;
        let reference = oracle_solve(&p, 1e-10).unwrap();
        let obj_ref = lasso_objective(&p, &reference);
        let traj = run_ista(&p, 100, None).unwrap();
        for t in 0..100 {
            let d0 = (&traj.iterates[t] - &reference)
                .iter()
                .map(|v| v * v)
                .sum::<f64>();
            let d1 = (&traj.iterates[t + 1] - &reference)
                .iter()
                .map(|v| v * v)
                .sum::<f64>();
            let gap = traj.objectives[t + 1] - obj_ref;
            assert!(
                gap <= n_plus_1 * (d0 - d1) + 1e-10,
                "step {t}: gap {gap} vs telescoped {}",
                n_plus_1 * (d0 - d1)
            );
        }
    }

    #[test]
    fn kkt_residual_anchor_values() {
        // Huge λ: ρ = 0 is optimal and the residual vanishes.
        let mut p = toy_problem();
        p.lambda = 100.0;
        assert_eq!(kkt_residual(&p, &Array1::zeros(2)), 0.0);

        // λ = 0 reduces to the gradient ∞-norm.
        p.lambda = 0.0;
        let rho = array![0.3, -0.2];
        let g = smooth_gradient(&p, &rho);
        assert_abs_diff_eq!(
            kkt_residual(&p, &rho),
            g.iter().fold(0.0f64, |m, v| m.max(v.abs())),
            epsilon = 1e-15
        );
    }

    #[test]
    fn kkt_residual_matches_finite_difference_subgradient() {
        // Finite-difference oracle: the one-sided directional derivative of ℓ
        // along ±e_j equals g_j ± λ (or |g_j| − λ slack at zero); the KKT
        // residual is the worst coordinate violation.
        let p = seeded_feature_problem(8, 16, 0.07, 9);
        let mut rng = stream_rng(10, &[3]);
        let mut rho =
            Array1::from_iter((0..p.width()).map(|_| rng.random_range(-0.5..0.5)));
        rho[2] = 0.0; // exercise the off-support branch
        let h = 1e-7;
        let base = kkt_residual(&p, &rho);
        let mut worst = 0.0f64;
        for j in 0..p.width() {
            let dd = |dir: f64| {
                let mut r2 = rho.clone();
                r2[j] += dir * h;
                (lasso_objective(&p, &r2) - lasso_objective(&p, &rho)) / h
            };
            let (fwd, bwd) = (dd(1.0), dd(-1.0));
            if rho[j] != 0.0 {
                // smooth coordinate: the two one-sided slopes agree in size
                worst = worst.max(fwd.abs().min(bwd.abs()));
            } else {
                // descent possible only if some one-sided slope is negative
                worst = worst.max((-fwd).max(-bwd).max(0.0));
            }
        }
        assert!((base - worst).abs() <= 1e-5, "kkt {base} vs fd {worst}");
    }

    #[test]
    fn oracle_solve_contracts() {
        // Fully thresholded optimum at huge λ.
        let mut p = seeded_feature_problem(8, 16, 0.0, 12);
        let grad0 = smooth_gradient(&p, &Array1::zeros(p.width()));
        p.lambda = 2.0 * grad0.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let rho = oracle_solve(&p, 1e-10).unwrap();
        assert!(rho.iter().all(|&v| v == 0.0));

        // λ = 0 well-conditioned square system: matches the interpolant.
        let p = LassoProblem {
            phi: array![[1.0, 1.0], [0.0, 1.0]],
            y: array![1.0, 0.25],
            lambda: 0.0,
            eta: default_eta(1),
        };
        let rho = oracle_solve(&p, 1e-10).unwrap();
        assert_abs_diff_eq!(rho[0], 0.75, epsilon = 1e-6);
        assert_abs_diff_eq!(rho[1], 0.25, epsilon = 1e-6);

        // Postcondition on a generic instance.
        let p = seeded_feature_problem(24, 48, 0.03, 13);
        let rho = oracle_solve(&p, 1e-8).unwrap();
        assert!(kkt_residual(&p, &rho) <= 1e-8);
    }

    #[test]
    fn gap_decays_sublinearly() {
        let p = seeded_feature_problem(48, 32, 0.002, 42);
        let rho_hat = oracle_solve(&p, 1e-10).unwrap();
        let obj_star = lasso_objective(&p, &rho_hat);
        let traj = run_ista(&p, 512, None).unwrap();
        let mut pts = Vec::new();
        let mut t = 8;
        while t <= 512 {
            let gap = traj.objectives[t] - obj_star;
            assert!(gap > 0.0, "gap must stay positive at T = {t}");
            pts.push(((t as f64).ln(), gap.ln()));
            t *= 2;
        }
        let slope = fit_slope(&pts);
        assert!(
            (-1.3..=-0.7).contains(&slope),
            "log-log slope {slope} outside [-1.3, -0.7]"
        );
    }

    pub fn fit_slope(pts: &[(f64, f64)]) -> f64 {
        let n = pts.len() as f64;
        let sx: f64 = pts.iter().map(|p| p.0).sum();
        let sy: f64 = pts.iter().map(|p| p.1).sum();
        let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
        (n * sxy - sx * sy) / (n * sxx - sx * sx)
    }

    #[test]
    fn default_lambda_anchor_values() {
        // N = 3 ≈ e gives log N / N ≈ 1/e in the middle term.
        let v = default_lambda(3, 0.0, 1.0, 0.0, 0.0, 1.0);
        let ratio: f64 = 3f64.ln() / 3.0;
        assert_abs_diff_eq!(v, ratio.sqrt(), epsilon = 1e-12);
        // homogeneity in c1
        assert_abs_diff_eq!(
            default_lambda(64, 0.3, 2.0, 0.1, 0.2, 2.0),
            2.0 * default_lambda(64, 0.3, 2.0, 0.1, 0.2, 1.0),
            epsilon = 1e-12
        );
        // ε̂ = ε_dis = 0 keeps only the √(log N/N)(C+σ) term
        let ratio: f64 = 64f64.ln() / 64.0;
        assert_abs_diff_eq!(
            default_lambda(64, 0.5, 2.0, 0.0, 0.0, 1.0),
            ratio.sqrt() * 2.5,
            epsilon = 1e-12
        );
        assert_eq!(default_lambda(64, 0.5, 0.0, 0.1, 0.2, 1.0), 0.0);
    }

    #[test]
    fn l1_norm_stays_within_eps_opt_envelope() {
        // Monitored regression: solver outputs obey ‖ρ‖₁ ≤ c(C + ε_opt/λ)
        // with c = 10 frozen for this suite.
        let spec = ClassSpec::FiniteSpectrum {
            atoms: vec![
                Atom {
                    omega: vec![2.0, -1.0, 0.8, 0.0],
                    s: 0.8,
                },
                Atom {
                    omega: vec![-0.3, 1.4, 0.0, 2.2],
                    s: 0.5,
                },
                Atom {
                    omega: vec![1.0, 1.0, 1.0, -1.0],
                    s: 0.4,
                },
            ],
            b_max: 0.3,
        };
        let c_f = features::barron_parameter(&spec);
        for seed in 0..5u64 {
            let p = seeded_feature_problem(16, 48, 0.05, 100 + seed);
            let rho_hat = oracle_solve(&p, 1e-9).unwrap();
            let obj_star = lasso_objective(&p, &rho_hat);
            for t_steps in [5, 20, 100] {
                let traj = run_ista(&p, t_steps, None).unwrap();
                let rho = traj.iterates.last().unwrap();
                let eps_opt = lasso_objective(&p, rho) - obj_star;
                let l1: f64 = rho.iter().map(|v| v.abs()).sum();
                assert!(
                    l1 <= 10.0 * (c_f + eps_opt / p.lambda),
                    "seed {seed} T {t_steps}: l1 {l1} vs envelope {}",
                    10.0 * (c_f + eps_opt / p.lambda)
                );
            }
        }
    }

    #[test]
    fn trajectory_csv_has_expected_shape() {
        let p = seeded_feature_problem(6, 12, 0.05, 21);
        let traj = run_ista(&p, 4, None).unwrap();
        let mut buf = Vec::new();
        write_trajectory_csv(&traj, Some(0.0), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 6); // header + 5 iterates
        assert_eq!(
            lines[0],
            "t,objective,gap_vs_oracle,l1_norm,injected_residual_l1"
        );
    }
}
