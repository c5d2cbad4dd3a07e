//! Synthetic Barron-style function classes, the spectral sampling measure for
//! the universal ramp-feature bank, Barron parameters, and oracle linear
//! coefficients with a certified approximation error.
//!
//! A feature bank is n i.i.d. draws (t_i, ω_i) from the measure
//! Λ(dt, dω) = Γ⁻¹ · 1(−2 ≤ t ≤ 1) · ‖ω‖₂ F^sup(ω) dt dω,
//! where F^sup is the class's spectral envelope and Γ = 3∫‖ω‖₂ F^sup(ω)dω
//! normalizes Λ to a probability measure. Feature i evaluates
//! ramp(τ(ω_iᵀx/‖ω_i‖₂ − t_i)) ∈ [0, 1].

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::OnceLock;
use thiserror::Error;

use crate::seeding::stream_rng;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("spectral measure is degenerate (no mass off the origin): {0}")]
    DegenerateMeasure(String),
    #[error("class has no closed-form spectral data for oracle coefficients: {0}")]
    UnsupportedClass(String),
    #[error("approximation grid is empty")]
    EmptyGrid,
    #[error("input lies outside the unit ball: norm {0}")]
    InputOutsideBall(f64),
    #[error("invalid class spec: {0}")]
    InvalidSpec(String),
    #[error("invalid feature bank: {0}")]
    InvalidBank(String),
}

/// One spectral atom: a frequency vector and an amplitude bound.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Atom {
    pub omega: Vec<f64>,
    pub s: f64,
}

/// One direction cell of a discretized two-layer logistic class: direction,
/// envelope value, and quadrature cell weight.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LogisticCell {
    pub a: Vec<f64>,
    pub rho_max: f64,
    pub weight: f64,
}

/// A synthetic function class with known spectral envelope F^sup.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind")]
pub enum ClassSpec {
    /// Atomic spectrum: members are b + Σ_k α_k (cos(ω_kᵀx + θ_k) − cos θ_k)
    /// with |α_k| ≤ s_k and |b| ≤ b_max. The centered cosine keeps f(0) = b,
    /// so the class Barron parameter b_max + Σ‖ω_k‖s_k is an exact envelope.
    FiniteSpectrum { atoms: Vec<Atom>, b_max: f64 },
    /// Discretized two-layer network with logistic activation: members are
    /// Σ_j weight_j ρ_j σ(a_jᵀx) with |ρ_j| ≤ rho_max_j.
    TwoLayerLogistic { cells: Vec<LogisticCell> },
    /// aᵀx + b with ‖a‖₂ ≤ c_a, |b| ≤ c_b. Spectrally degenerate: its
    /// gradient spectrum is a point mass at ω = 0, so it cannot seed the bank.
    Linear { c_a: f64, c_b: f64 },
    /// Σ_i c_i f_i + b with Σ|c_i| ≤ c_a, |b| ≤ c_b, f_i from the children.
    LinearCombination {
        children: Vec<ClassSpec>,
        c_a: f64,
        c_b: f64,
    },
}

impl ClassSpec {
    /// Ambient input dimension d.
    pub fn dim(&self) -> usize {
        match self {
            ClassSpec::FiniteSpectrum { atoms, .. } => {
                atoms.first().map_or(0, |a| a.omega.len())
            }
            ClassSpec::TwoLayerLogistic { cells } => cells.first().map_or(0, |c| c.a.len()),
            ClassSpec::Linear { .. } => 0, // any dimension; fixed by the caller
            ClassSpec::LinearCombination { children, .. } => {
                children.iter().map(|c| c.dim()).max().unwrap_or(0)
            }
        }
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        let bad = |m: String| Err(FeatureError::InvalidSpec(m));
        match self {
            ClassSpec::FiniteSpectrum { atoms, b_max } => {
                if !b_max.is_finite() || *b_max < 0.0 {
                    return bad(format!("b_max must be finite and >= 0, got {b_max}"));
                }
                let d = self.dim();
                for (k, a) in atoms.iter().enumerate() {
                    if a.omega.len() != d {
                        return bad(format!("atom {k} dimension mismatch"));
                    }
                    if !a.s.is_finite() || a.s < 0.0 {
                        return bad(format!("atom {k} amplitude bound {}", a.s));
                    }
                    if norm2(&a.omega) == 0.0 {
                        return bad(format!("atom {k} has zero frequency"));
                    }
                }
                for i in 0..atoms.len() {
                    for j in (i + 1)..atoms.len() {
                        if atoms[i].omega == atoms[j].omega {
                            return bad(format!("atoms {i} and {j} coincide"));
                        }
                    }
                }
                Ok(())
            }
            ClassSpec::TwoLayerLogistic { cells } => {
                let d = self.dim();
                for (j, c) in cells.iter().enumerate() {
                    if c.a.len() != d {
                        return bad(format!("cell {j} dimension mismatch"));
                    }
                    if !(c.rho_max.is_finite() && c.rho_max >= 0.0) {
                        return bad(format!("cell {j} envelope {}", c.rho_max));
                    }
                    if !(c.weight.is_finite() && c.weight >= 0.0) {
                        return bad(format!("cell {j} weight {}", c.weight));
                    }
                }
                Ok(())
            }
            ClassSpec::Linear { c_a, c_b } => {
                if c_a.is_finite() && *c_a >= 0.0 && c_b.is_finite() && *c_b >= 0.0 {
                    Ok(())
                } else {
                    bad(format!("linear bounds ({c_a}, {c_b})"))
                }
            }
            ClassSpec::LinearCombination { children, c_a, c_b } => {
                if children.is_empty() {
                    return bad("combination needs at least one child".into());
                }
                if !(c_a.is_finite() && *c_a >= 0.0 && c_b.is_finite() && *c_b >= 0.0) {
                    return bad(format!("combination bounds ({c_a}, {c_b})"));
                }
                for c in children {
                    c.validate()?;
                }
                Ok(())
            }
        }
    }

    pub fn from_json(s: &str) -> Result<Self, FeatureError> {
        let spec: ClassSpec = serde_json::from_str(s)
            .map_err(|e| FeatureError::InvalidSpec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn logistic(x: f64) -> f64 {
    // e^x / (e^x + 1), computed stably on both tails.
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Barron parameter C_F of the class: sup |f(0)| plus the first spectral
/// moment ∫‖ω‖₂ F^sup(ω)dω (exact for Linear and FiniteSpectrum, an upper
/// bound for the others).
pub fn barron_parameter(spec: &ClassSpec) -> f64 {
    match spec {
        ClassSpec::Linear { c_a, c_b } => c_a + c_b,
        ClassSpec::FiniteSpectrum { atoms, b_max } => {
            b_max + atoms.iter().map(|a| norm2(&a.omega) * a.s).sum::<f64>()
        }
        ClassSpec::TwoLayerLogistic { cells } => {
            0.25 * cells
                .iter()
                .map(|c| c.rho_max * (norm2(&c.a) + 2.0) * c.weight)
                .sum::<f64>()
        }
        ClassSpec::LinearCombination { children, c_a, c_b } => {
            let max_child = children
                .iter()
                .map(|c| barron_parameter(c))
                .fold(0.0, f64::max);
            2.0 * c_a * max_child + c_b
        }
    }
}

/// First spectral moment ∫‖ω‖₂ F^sup(ω)dω of the class envelope (the
/// normalizer of Λ is three times this).
fn spectral_moment(spec: &ClassSpec) -> f64 {
    match spec {
        ClassSpec::Linear { .. } => 0.0,
        ClassSpec::FiniteSpectrum { atoms, .. } => {
            atoms.iter().map(|a| norm2(&a.omega) * a.s).sum()
        }
        ClassSpec::TwoLayerLogistic { cells } => {
            // Per-direction ray carries ρ_max ‖a‖ ∫₀^∞ u/sinh(πu) du = ρ_max ‖a‖ / 4.
            0.25 * cells
                .iter()
                .map(|c| c.rho_max * norm2(&c.a) * c.weight)
                .sum::<f64>()
        }
        ClassSpec::LinearCombination { children, c_a, .. } => {
            c_a * children
                .iter()
                .map(spectral_moment)
                .fold(0.0, f64::max)
        }
    }
}

/// Normalizer Γ of the sampling measure Λ (uniform t on [−2, 1] contributes
/// the factor 3).
pub fn gamma_normalizer(spec: &ClassSpec) -> f64 {
    3.0 * spectral_moment(spec)
}

// ---------------------------------------------------------------------------
// Sampling from Λ
// ---------------------------------------------------------------------------

/// Inverse-CDF table for the magnitude density ∝ u / sinh(πu) on (0, ∞),
/// built once by trapezoid quadrature on a fixed grid.
struct SinhTable {
    step: f64,
    cdf: Vec<f64>, // normalized, cdf[i] = P(U <= i * step)
}

fn sinh_density(u: f64) -> f64 {
    if u == 0.0 {
        1.0 / std::f64::consts::PI // limit of u / sinh(πu)
    } else {
        u / (std::f64::consts::PI * u).sinh()
    }
}

fn sinh_table() -> &'static SinhTable {
    static TABLE: OnceLock<SinhTable> = OnceLock::new();
    TABLE.get_or_init(|| {
        let step = 1e-3;
        let mut dens = vec![sinh_density(0.0)];
        let mut u = step;
        while sinh_density(u) >= 1e-12 {
            dens.push(sinh_density(u));
            u += step;
        }
        dens.push(sinh_density(u)); // one tail point below the cutoff
        let mut cdf = vec![0.0];
        for w in dens.windows(2) {
            cdf.push(cdf.last().unwrap() + 0.5 * (w[0] + w[1]) * step);
        }
        let total = *cdf.last().unwrap();
        for c in cdf.iter_mut() {
            *c /= total;
        }
        SinhTable { step, cdf }
    })
}

/// Draw from the density ∝ u / sinh(πu) by inverse-CDF with linear
/// interpolation between table knots.
pub fn sample_sinh_magnitude(rng: &mut impl Rng) -> f64 {
    let table = sinh_table();
    let p: f64 = rng.random();
    let idx = table.cdf.partition_point(|&c| c < p);
    if idx == 0 {
        return 0.0;
    }
    let (lo, hi) = (table.cdf[idx - 1], table.cdf[idx]);
    let frac = if hi > lo { (p - lo) / (hi - lo) } else { 0.0 };
    ((idx - 1) as f64 + frac) * table.step
}

fn categorical(weights: &[f64], rng: &mut impl Rng) -> Option<usize> {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return None;
    }
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        u -= w;
        if u <= 0.0 {
            return Some(i);
        }
    }
    Some(weights.len() - 1)
}

/// One draw (t, ω) from Λ: t uniform on [−2, 1], ω with density ∝ ‖ω‖₂ F^sup(ω).
pub fn sample_lambda_measure(
    spec: &ClassSpec,
    rng: &mut impl Rng,
) -> Result<(f64, Vec<f64>), FeatureError> {
    let t = rng.random_range(-2.0..1.0);
    let omega = sample_omega(spec, rng)?;
    Ok((t, omega))
}

fn sample_omega(spec: &ClassSpec, rng: &mut impl Rng) -> Result<Vec<f64>, FeatureError> {
    match spec {
        ClassSpec::Linear { .. } => Err(FeatureError::DegenerateMeasure(
            "linear class concentrates all spectral mass at ω = 0".into(),
        )),
        ClassSpec::FiniteSpectrum { atoms, .. } => {
            let weights: Vec<f64> = atoms.iter().map(|a| norm2(&a.omega) * a.s).collect();
            let k = categorical(&weights, rng).ok_or_else(|| {
                FeatureError::DegenerateMeasure("all atoms carry zero mass".into())
            })?;
            Ok(atoms[k].omega.clone())
        }
        ClassSpec::TwoLayerLogistic { cells } => {
            // Direction cell mass is its share of ∫‖ω‖F^sup along the ray.
            let weights: Vec<f64> = cells
                .iter()
                .map(|c| c.rho_max * norm2(&c.a) * c.weight)
                .collect();
            let j = categorical(&weights, rng).ok_or_else(|| {
                FeatureError::DegenerateMeasure("all direction cells carry zero mass".into())
            })?;
            let a = &cells[j].a;
            let na = norm2(a);
            let u = sample_sinh_magnitude(rng);
            Ok(a.iter().map(|ai| ai / na * na * u).collect())
        }
        ClassSpec::LinearCombination { children, .. } => {
            let weights: Vec<f64> = children.iter().map(spectral_moment).collect();
            let i = categorical(&weights, rng).ok_or_else(|| {
                FeatureError::DegenerateMeasure(
                    "no child of the combination carries spectral mass".into(),
                )
            })?;
            sample_omega(&children[i], rng)
        }
    }
}

// ---------------------------------------------------------------------------
// Feature bank and ramp features
// ---------------------------------------------------------------------------

/// The clipped-linear unit: 0 for z ≤ −1/2, z + 1/2 in between, 1 for z ≥ 1/2.
pub fn ramp(z: f64) -> f64 {
    if z <= -0.5 {
        0.0
    } else if z < 0.5 {
        z + 0.5
    } else {
        1.0
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BankPair {
    pub t: f64,
    pub omega: Vec<f64>,
}

/// n sampled (t_i, ω_i) pairs plus the feature sharpness τ.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FeatureBank {
    pub n: usize,
    pub tau: f64,
    pub pairs: Vec<BankPair>,
    pub seed: u64,
}

impl FeatureBank {
    pub fn dim(&self) -> usize {
        self.pairs.first().map_or(0, |p| p.omega.len())
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        if self.n == 0 || self.pairs.len() != self.n {
            return Err(FeatureError::InvalidBank(format!(
                "n = {} but {} pairs stored",
                self.n,
                self.pairs.len()
            )));
        }
        if !(self.tau > 4.0) {
            return Err(FeatureError::InvalidBank(format!(
                "sharpness tau must exceed 4, got {}",
                self.tau
            )));
        }
        let d = self.dim();
        for (i, p) in self.pairs.iter().enumerate() {
            if !(-2.0..=1.0).contains(&p.t) {
                return Err(FeatureError::InvalidBank(format!(
                    "t_{i} = {} outside [-2, 1]",
                    p.t
                )));
            }
            if p.omega.len() != d || norm2(&p.omega) == 0.0 {
                return Err(FeatureError::InvalidBank(format!("bad omega_{i}")));
            }
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self, FeatureError> {
        let bank: FeatureBank =
            serde_json::from_str(s).map_err(|e| FeatureError::InvalidBank(e.to_string()))?;
        bank.validate()?;
        Ok(bank)
    }
}

const STREAM_BANK: u64 = 0x01;

/// Sample a bank of n features from Λ, deterministically in the seed.
pub fn make_feature_bank(
    spec: &ClassSpec,
    n: usize,
    tau: f64,
    seed: u64,
) -> Result<FeatureBank, FeatureError> {
    if n == 0 {
        return Err(FeatureError::InvalidBank("bank size n must be >= 1".into()));
    }
    if !(tau > 4.0) {
        return Err(FeatureError::InvalidBank(format!(
            "sharpness tau must exceed 4, got {tau}"
        )));
    }
    spec.validate()?;
    let mut rng: ChaCha8Rng = stream_rng(seed, &[STREAM_BANK]);
    let mut pairs = Vec::with_capacity(n);
    for _ in 0..n {
        let (t, omega) = sample_lambda_measure(spec, &mut rng)?;
        pairs.push(BankPair { t, omega });
    }
    Ok(FeatureBank {
        n,
        tau,
        pairs,
        seed,
    })
}

/// Evaluate the (n+1)-vector [ramp(τ(ω_iᵀx/‖ω_i‖ − t_i)), …, 1] at x.
pub fn eval_features(bank: &FeatureBank, x: &[f64]) -> Result<Array1<f64>, FeatureError> {
    let nx = norm2(x);
    if nx > 1.0 + 1e-12 {
        return Err(FeatureError::InputOutsideBall(nx));
    }
    let mut out = Array1::zeros(bank.n + 1);
    for (i, p) in bank.pairs.iter().enumerate() {
        let z = bank.tau * (dot(&p.omega, x) / norm2(&p.omega) - p.t);
        out[i] = ramp(z);
    }
    out[bank.n] = 1.0;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Function instances
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum MemberParams {
    FiniteSpectrum {
        alpha: Vec<f64>,
        theta: Vec<f64>,
        b: f64,
    },
    TwoLayerLogistic {
        rho: Vec<f64>,
    },
    Linear {
        a: Vec<f64>,
        b: f64,
    },
    Combination {
        coeffs: Vec<f64>,
        b: f64,
        children: Vec<FunctionInstance>,
    },
}

/// A concrete member f of a [`ClassSpec`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FunctionInstance {
    pub parent: ClassSpec,
    pub params: MemberParams,
}

const STREAM_MEMBER: u64 = 0x02;

/// Draw a member uniformly within the parent's parameter bounds.
pub fn sample_member(spec: &ClassSpec, seed: u64) -> Result<FunctionInstance, FeatureError> {
    spec.validate()?;
    let mut rng = stream_rng(seed, &[STREAM_MEMBER]);
    Ok(FunctionInstance {
        parent: spec.clone(),
        params: sample_params(spec, spec.dim(), &mut rng),
    })
}

/// As [`sample_member`] but with the ambient dimension forced (needed for the
/// Linear class, whose spec does not pin d).
pub fn sample_member_dim(
    spec: &ClassSpec,
    d: usize,
    seed: u64,
) -> Result<FunctionInstance, FeatureError> {
    spec.validate()?;
    let mut rng = stream_rng(seed, &[STREAM_MEMBER]);
    Ok(FunctionInstance {
        parent: spec.clone(),
        params: sample_params(spec, d, &mut rng),
    })
}

fn sample_params(spec: &ClassSpec, d: usize, rng: &mut ChaCha8Rng) -> MemberParams {
    match spec {
        ClassSpec::FiniteSpectrum { atoms, b_max } => {
            let alpha = atoms
                .iter()
                .map(|a| {
                    if a.s > 0.0 {
                        rng.random_range(-a.s..a.s)
                    } else {
                        0.0
                    }
                })
                .collect();
            let theta = atoms
                .iter()
                .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
                .collect();
            let b = if *b_max > 0.0 {
                rng.random_range(-b_max..*b_max)
            } else {
                0.0
            };
            MemberParams::FiniteSpectrum { alpha, theta, b }
        }
        ClassSpec::TwoLayerLogistic { cells } => {
            let rho = cells
                .iter()
                .map(|c| {
                    if c.rho_max > 0.0 {
                        rng.random_range(-c.rho_max..c.rho_max)
                    } else {
                        0.0
                    }
                })
                .collect();
            MemberParams::TwoLayerLogistic { rho }
        }
        ClassSpec::Linear { c_a, c_b } => {
            let a = uniform_ball_point(d, *c_a, rng);
            let b = if *c_b > 0.0 {
                rng.random_range(-c_b..*c_b)
            } else {
                0.0
            };
            MemberParams::Linear { a, b }
        }
        ClassSpec::LinearCombination { children, c_a, c_b } => {
            // ℓ1-ball point for the coefficients: signed Dirichlet-like draw.
            let raw: Vec<f64> = children
                .iter()
                .map(|_| -(rng.random::<f64>()).ln())
                .collect();
            let total: f64 = raw.iter().sum();
            let scale = c_a * rng.random::<f64>();
            let coeffs = raw
                .iter()
                .map(|r| {
                    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    sign * scale * r / total
                })
                .collect();
            let b = if *c_b > 0.0 {
                rng.random_range(-c_b..*c_b)
            } else {
                0.0
            };
            let members = children
                .iter()
                .map(|c| FunctionInstance {
                    parent: c.clone(),
                    params: sample_params(c, d, rng),
                })
                .collect();
            MemberParams::Combination {
                coeffs,
                b,
                children: members,
            }
        }
    }
}

/// A uniform draw from the radius-`radius` Euclidean ball.
pub fn uniform_ball_point(d: usize, radius: f64, rng: &mut impl Rng) -> Vec<f64> {
    let normal = rand_distr::StandardNormal;
    let mut v: Vec<f64> = (0..d).map(|_| rng.sample(normal)).collect();
    let nv = norm2(&v);
    if nv == 0.0 {
        return v;
    }
    let r = radius * rng.random::<f64>().powf(1.0 / d as f64);
    for x in v.iter_mut() {
        *x *= r / nv;
    }
    v
}

/// Seeded quasi-uniform grid of points in the unit ball (the default test
/// grid for approximation errors).
pub fn unit_ball_grid(d: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = stream_rng(seed, &[0x67]);
    (0..count)
        .map(|_| uniform_ball_point(d, 1.0, &mut rng))
        .collect()
}

impl FunctionInstance {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match &self.params {
            MemberParams::FiniteSpectrum { alpha, theta, b } => {
                let ClassSpec::FiniteSpectrum { atoms, .. } = &self.parent else {
                    panic!("parent/params kind mismatch");
                };
                let mut v = *b;
                for ((a, th), atom) in alpha.iter().zip(theta).zip(atoms) {
                    v += a * ((dot(&atom.omega, x) + th).cos() - th.cos());
                }
                v
            }
            MemberParams::TwoLayerLogistic { rho } => {
                let ClassSpec::TwoLayerLogistic { cells } = &self.parent else {
                    panic!("parent/params kind mismatch");
                };
                rho.iter()
                    .zip(cells)
                    .map(|(r, c)| c.weight * r * logistic(dot(&c.a, x)))
                    .sum()
            }
            MemberParams::Linear { a, b } => dot(a, x) + b,
            MemberParams::Combination { coeffs, b, children } => {
                b + coeffs
                    .iter()
                    .zip(children)
                    .map(|(c, f)| c * f.eval(x))
                    .sum::<f64>()
            }
        }
    }

    pub fn eval_zero(&self) -> f64 {
        match &self.params {
            MemberParams::FiniteSpectrum { b, .. } => *b,
            _ => {
                let d = self.parent.dim().max(1);
                self.eval(&vec![0.0; d])
            }
        }
    }

    /// Monte-Carlo-free member estimate of |f(0)| + Σ‖ω‖|F_f| (the quantity
    /// the class Barron parameter must dominate). None when the member's
    /// spectral data has no closed form.
    pub fn barron_functional(&self) -> Option<f64> {
        match &self.params {
            MemberParams::FiniteSpectrum { alpha, b, .. } => {
                let ClassSpec::FiniteSpectrum { atoms, .. } = &self.parent else {
                    return None;
                };
                Some(
                    b.abs()
                        + alpha
                            .iter()
                            .zip(atoms)
                            .map(|(a, at)| a.abs() * norm2(&at.omega))
                            .sum::<f64>(),
                )
            }
            MemberParams::Linear { a, b } => Some(b.abs() + norm2(a)),
            MemberParams::TwoLayerLogistic { rho } => {
                let ClassSpec::TwoLayerLogistic { cells } = &self.parent else {
                    return None;
                };
                let f0: f64 = rho
                    .iter()
                    .zip(cells)
                    .map(|(r, c)| c.weight * r * 0.5)
                    .sum();
                let moment: f64 = rho
                    .iter()
                    .zip(cells)
                    .map(|(r, c)| c.weight * r.abs() * norm2(&c.a) * 0.25)
                    .sum();
                Some(f0.abs() + moment)
            }
            MemberParams::Combination { coeffs, b, children } => {
                let mut total = b.abs();
                for (c, f) in coeffs.iter().zip(children) {
                    total += c.abs() * f.barron_functional()?;
                }
                Some(total)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Oracle coefficients (Barron ramp representation)
// ---------------------------------------------------------------------------

/// The piecewise coefficient γ(t) whose average against shifted ramps
/// reconstructs g(z) = (cos(‖ω‖z + θ) − cos θ)/‖ω‖ on [−1, 1]:
/// g′(t) inside [−1, 1], the constant sign(g(−1)) on the run-in
/// [−1 − |g(−1)|, −1), and 0 elsewhere. Always |γ| ≤ 1.
pub fn gamma_coefficient(norm_omega: f64, theta: f64, t: f64) -> f64 {
    assert!(norm_omega > 0.0, "gamma_coefficient needs norm_omega > 0");
    if (-1.0..=1.0).contains(&t) {
        return -(norm_omega * t + theta).sin();
    }
    let g_m1 = ((-norm_omega + theta).cos() - theta.cos()) / norm_omega;
    if t < -1.0 && t >= -1.0 - g_m1.abs() {
        g_m1.signum()
    } else {
        0.0
    }
}

/// Oracle linear coefficients for f over a bank, with layout
/// [ρ*_1/n, …, ρ*_n/n, f(0)] and a certified sup-grid approximation error.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleCoefficients {
    pub rho_star: Array1<f64>,
    pub certified_error: f64,
    /// "closed_form" for the spectral evaluation, "empirical" for the
    /// least-squares fallback produced elsewhere.
    pub source: String,
}

/// Closed-form oracle coefficients ρ*_i = Γ · γ_{ω_i, θ_f(ω_i)}(t_i) ·
/// |F_f(ω_i)| / F^sup(ω_i), available for atomic spectra.
pub fn oracle_coefficients(
    f: &FunctionInstance,
    bank: &FeatureBank,
) -> Result<OracleCoefficients, FeatureError> {
    let (atoms, alpha, theta, b) = match (&f.parent, &f.params) {
        (
            ClassSpec::FiniteSpectrum { atoms, .. },
            MemberParams::FiniteSpectrum { alpha, theta, b },
        ) => (atoms, alpha, theta, *b),
        _ => {
            return Err(FeatureError::UnsupportedClass(
                "closed-form spectral data requires an atomic spectrum".into(),
            ))
        }
    };
    let gamma_norm = gamma_normalizer(&f.parent);
    let mut rho = Array1::zeros(bank.n + 1);
    for (i, p) in bank.pairs.iter().enumerate() {
        let k = nearest_atom(atoms, &p.omega).ok_or_else(|| {
            FeatureError::UnsupportedClass("bank frequency matches no spectral atom".into())
        })?;
        let at = &atoms[k];
        if at.s == 0.0 {
            continue;
        }
        // Fold a negative amplitude into the phase so |F_f| = |α| with phase θ or θ+π.
        let (amp, phase) = if alpha[k] >= 0.0 {
            (alpha[k], theta[k])
        } else {
            (-alpha[k], theta[k] + std::f64::consts::PI)
        };
        let gamma = gamma_coefficient(norm2(&at.omega), phase, p.t);
        rho[i] = gamma_norm * gamma * amp / at.s / bank.n as f64;
    }
    rho[bank.n] = b;
    let grid = unit_ball_grid(f.parent.dim(), 1000, 0);
    let certified_error = approximation_error(f, bank, &rho, &grid)?;
    Ok(OracleCoefficients {
        rho_star: rho,
        certified_error,
        source: "closed_form".into(),
    })
}

fn nearest_atom(atoms: &[Atom], omega: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (k, a) in atoms.iter().enumerate() {
        let d2: f64 = a
            .omega
            .iter()
            .zip(omega)
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        if best.is_none_or(|(_, bd)| d2 < bd) {
            best = Some((k, d2));
        }
    }
    let (k, d2) = best?;
    let scale = norm2(&atoms[k].omega).max(1.0);
    (d2.sqrt() <= 1e-8 * scale).then_some(k)
}

/// Max over the grid of |f(x) − f(0) − Σ_{i≤n} ρ_i φ_i(x)| with the stored
/// (already 1/n-scaled) coefficients.
pub fn approximation_error(
    f: &FunctionInstance,
    bank: &FeatureBank,
    rho_star: &Array1<f64>,
    grid: &[Vec<f64>],
) -> Result<f64, FeatureError> {
    if grid.is_empty() {
        return Err(FeatureError::EmptyGrid);
    }
    let f0 = f.eval_zero();
    let mut worst = 0.0f64;
    for x in grid {
        let phi = eval_features(bank, x)?;
        let approx: f64 = (0..bank.n).map(|i| rho_star[i] * phi[i]).sum();
        worst = worst.max((f.eval(x) - f0 - approx).abs());
    }
    Ok(worst)
}

/// ℓ1 budget |f(0)| + (1/n)Σ|ρ*_i| of a stored coefficient vector (must stay
/// below 4·C_F for closed-form oracles).
pub fn oracle_l1_budget(rho_star: &Array1<f64>) -> f64 {
    let n = rho_star.len() - 1;
    rho_star[n].abs() + rho_star.iter().take(n).map(|r| r.abs()).sum::<f64>()
}

/// Feature design matrix for a list of prompt points: row i is φ(x_i)ᵀ.
pub fn design_matrix(bank: &FeatureBank, xs: &[Vec<f64>]) -> Result<Array2<f64>, FeatureError> {
    let mut phi = Array2::zeros((xs.len(), bank.n + 1));
    for (i, x) in xs.iter().enumerate() {
        phi.row_mut(i).assign(&eval_features(bank, x)?);
    }
    Ok(phi)
}
