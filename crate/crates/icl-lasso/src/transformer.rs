//! Generic attention / feed-forward primitives with entrywise-logistic
//! attention scores, the explicit weight construction that makes the forward
//! pass emulate proximal gradient on the in-context Lasso, and the per-block
//! emulation-gap certification against the exact optimizer.
//!
//! Hidden state: D×(N+1) with D = d + 2n + 7 and fixed row slabs
//! (x | 1 | y | w | φ | ρ | λ | ŷ). Layer 1 fills the φ-slab and sets λ;
//! each subsequent pair of layers performs one gradient step + soft threshold
//! on the ρ-slab and refreshes the prediction row ŷ.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeatureBank;
use crate::lasso::{ista_step, LassoProblem};
use crate::SCHEMA_VERSION;

#[derive(Debug, Error)]
pub enum TransformerError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("depth must be odd and >= 3, got {0}")]
    InvalidDepth(usize),
    #[error("attention sharpness must be positive, got {0}")]
    NonPositiveTau(f64),
    #[error("forward trace missing or truncated")]
    TraceMissing,
    #[error("broadcast slab differs across columns: {0}")]
    ColumnInconsistency(String),
    #[error("prompt point outside the unit ball: norm {0}")]
    InputOutsideBall(f64),
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
}

/// The attention nonlinearity σ(x) = eˣ/(eˣ+1), applied entrywise to scores.
pub fn sigma_attn(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

use sigma_attn as logistic;

/// Row bookkeeping for the (x | 1 | y | w | φ | ρ | λ | ŷ) slab layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlabLayout {
    pub d: usize,
    pub n: usize,
}

impl SlabLayout {
    pub fn total_dim(&self) -> usize {
        self.d + 2 * self.n + 7
    }
    pub fn ones_row(&self) -> usize {
        self.d
    }
    pub fn y_row(&self) -> usize {
        self.d + 1
    }
    pub fn w_row(&self) -> usize {
        self.d + 2
    }
    pub fn phi_start(&self) -> usize {
        self.d + 3
    }
    pub fn rho_start(&self) -> usize {
        self.d + self.n + 4
    }
    pub fn lambda_row(&self) -> usize {
        self.d + 2 * self.n + 5
    }
    pub fn yhat_row(&self) -> usize {
        self.d + 2 * self.n + 6
    }
}

/// The D×(N+1) hidden state together with its slab layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HiddenState {
    pub layout: SlabLayout,
    pub matrix: Array2<f64>,
}

impl HiddenState {
    pub fn n_prompt(&self) -> usize {
        self.matrix.ncols() - 1
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionHead {
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockTag {
    Attn0FF0,
    Attn1FF1,
    Attn2FF2,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerWeights {
    pub heads: Vec<AttentionHead>,
    pub u: Array2<f64>,
    pub w: Array2<f64>,
    pub block_tag: BlockTag,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransformerMeta {
    pub bank: FeatureBank,
    pub tau: f64,
    pub eta: f64,
    pub lambda_bar: f64,
    pub d: usize,
    pub n: usize,
    pub n_prompt: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransformerWeights {
    pub layers: Vec<LayerWeights>,
    pub meta: TransformerMeta,
}

impl TransformerWeights {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }
    pub fn layout(&self) -> SlabLayout {
        SlabLayout {
            d: self.meta.d,
            n: self.meta.n,
        }
    }
}

// ---------------------------------------------------------------------------
// Generic layer primitives
// ---------------------------------------------------------------------------

fn nonzero_rows(m: &Array2<f64>) -> Vec<usize> {
    m.rows()
        .into_iter()
        .enumerate()
        .filter(|(_, r)| r.iter().any(|&v| v != 0.0))
        .map(|(i, _)| i)
        .collect()
}

fn check_square(name: &str, m: &Array2<f64>, dim: usize) -> Result<(), TransformerError> {
    if m.nrows() != dim || m.ncols() != dim {
        return Err(TransformerError::ShapeMismatch(format!(
            "{name} is {}x{}, expected {dim}x{dim}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

/// attn(H; Q, K, V) = (1/N) · V H σ((QH)ᵀKH) with entrywise logistic σ.
///
/// Exploits zero rows of Q/K/V (the constructed heads are slab-sparse): rows
/// where Q or K vanish contribute nothing to the score matrix, and only
/// nonzero rows of V produce output.
pub fn attention_op(
    h: &Array2<f64>,
    head: &AttentionHead,
) -> Result<Array2<f64>, TransformerError> {
    let dim = h.nrows();
    let cols = h.ncols();
    if cols < 2 {
        return Err(TransformerError::ShapeMismatch(
            "hidden state needs at least one prompt column".into(),
        ));
    }
    check_square("Q", &head.q, dim)?;
    check_square("K", &head.k, dim)?;
    check_square("V", &head.v, dim)?;
    let n_prompt = (cols - 1) as f64;

    let rv = nonzero_rows(&head.v);
    let mut out = Array2::zeros((dim, cols));
    if rv.is_empty() {
        return Ok(out);
    }
    let vh = head.v.select(Axis(0), &rv).dot(h);

    let rq = nonzero_rows(&head.q);
    let rk = nonzero_rows(&head.k);
    let rqk: Vec<usize> = rq.iter().copied().filter(|r| rk.contains(r)).collect();

    if rqk.is_empty() {
        // score matrix is identically zero: σ ≡ 1/2, so each output column is
        // the same half-sum of VH columns
        let half_sums = vh.sum_axis(Axis(1)) * (0.5 / n_prompt);
        for (slot, &r) in rv.iter().enumerate() {
            for c in 0..cols {
                out[(r, c)] = half_sums[slot];
            }
        }
        return Ok(out);
    }

    let qh = head.q.select(Axis(0), &rqk).dot(h);
    let kh = head.k.select(Axis(0), &rqk).dot(h);
    let scores = qh.t().dot(&kh).mapv(logistic);
    let mixed = vh.dot(&scores) * (1.0 / n_prompt);
    for (slot, &r) in rv.iter().enumerate() {
        out.row_mut(r).assign(&mixed.row(slot));
    }
    Ok(out)
}

/// Attn(H) = H + Σ_m attn(H; Q_m, K_m, V_m).
pub fn attention_layer(
    h: &Array2<f64>,
    heads: &[AttentionHead],
) -> Result<Array2<f64>, TransformerError> {
    let mut out = h.clone();
    for head in heads {
        out += &attention_op(h, head)?;
    }
    Ok(out)
}

/// FF(H) = H + U·relu(W H), restricted to the nonzero rows of W and U.
pub fn ff_layer(
    h: &Array2<f64>,
    u: &Array2<f64>,
    w: &Array2<f64>,
) -> Result<Array2<f64>, TransformerError> {
    let dim = h.nrows();
    check_square("U", u, dim)?;
    check_square("W", w, dim)?;
    let rw = nonzero_rows(w);
    let mut out = h.clone();
    if rw.is_empty() {
        return Ok(out);
    }
    let hidden = w.select(Axis(0), &rw).dot(h).mapv(|v| v.max(0.0));
    let u_sub = u.select(Axis(1), &rw);
    let ru = nonzero_rows(&u_sub);
    if ru.is_empty() {
        return Ok(out);
    }
    let update = u_sub.select(Axis(0), &ru).dot(&hidden);
    for (slot, &r) in ru.iter().enumerate() {
        let mut row = out.row_mut(r);
        row += &update.row(slot);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// State initialization, readout, extraction
// ---------------------------------------------------------------------------

/// H⁰: x columns (query last), ones-row, y-row with a zero query label,
/// w-row flagging prompt columns, everything else zero.
pub fn init_hidden(
    xs: &[Vec<f64>],
    ys: &[f64],
    x_query: &[f64],
    n: usize,
) -> Result<HiddenState, TransformerError> {
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(TransformerError::ShapeMismatch(format!(
            "{} prompt points vs {} labels",
            xs.len(),
            ys.len()
        )));
    }
    let d = x_query.len();
    let layout = SlabLayout { d, n };
    let cols = xs.len() + 1;
    let mut m = Array2::zeros((layout.total_dim(), cols));
    for (i, x) in xs.iter().chain(std::iter::once(&x_query.to_vec())).enumerate() {
        if x.len() != d {
            return Err(TransformerError::ShapeMismatch(format!(
                "point {i} has dimension {}, expected {d}",
                x.len()
            )));
        }
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1.0 + 1e-12 {
            return Err(TransformerError::InputOutsideBall(norm));
        }
        for (j, &v) in x.iter().enumerate() {
            m[(j, i)] = v;
        }
        m[(layout.ones_row(), i)] = 1.0;
    }
    for (i, &y) in ys.iter().enumerate() {
        m[(layout.y_row(), i)] = y;
        m[(layout.w_row(), i)] = 1.0;
    }
    // query column: y = 0, w = 0 (already zero)
    Ok(HiddenState { layout, matrix: m })
}

/// The model's prediction: entry (D, N+1) of the final state.
pub fn readout(h: &HiddenState) -> f64 {
    h.matrix[(h.layout.yhat_row(), h.matrix.ncols() - 1)]
}

/// Broadcast-slab contents: (ρ, ŷ, λ, φ-matrix). Errors if a slab that the
/// construction keeps constant across columns has drifted apart.
pub fn extract_state(
    h: &HiddenState,
) -> Result<(Array1<f64>, f64, f64, Array2<f64>), TransformerError> {
    let lay = h.layout;
    let cols = h.matrix.ncols();
    let check_broadcast = |row: usize, name: &str| -> Result<f64, TransformerError> {
        let first = h.matrix[(row, 0)];
        for c in 1..cols {
            if (h.matrix[(row, c)] - first).abs() > 1e-12 {
                return Err(TransformerError::ColumnInconsistency(format!(
                    "{name} row: column {c} is {} vs {}",
                    h.matrix[(row, c)],
                    first
                )));
            }
        }
        Ok(first)
    };
    let mut rho = Array1::zeros(lay.n + 1);
    for r in 0..=lay.n {
        rho[r] = check_broadcast(lay.rho_start() + r, "rho")?;
    }
    let y_hat = check_broadcast(lay.yhat_row(), "yhat")?;
    let lambda = check_broadcast(lay.lambda_row(), "lambda")?;
    let mut phi = Array2::zeros((lay.n + 1, cols));
    for r in 0..=lay.n {
        phi.row_mut(r).assign(&h.matrix.row(lay.phi_start() + r));
    }
    Ok((rho, y_hat, lambda, phi))
}

// ---------------------------------------------------------------------------
// Explicit construction
// ---------------------------------------------------------------------------

/// Build the L-layer transformer whose forward pass runs (L−1)/2 proximal
/// gradient steps on the in-context Lasso over the bank's features.
///
/// Layer 1 (Attn0/FF0) computes the φ-slab from the ramp features and writes
/// λ̄ into the λ-row. Each following Attn1/FF1 + Attn2/FF2 pair performs one
/// gradient step (logistic-linearized, sharpness τ), a soft threshold, and a
/// refresh of ŷ from the current ρ.
pub fn build_icl_transformer(
    bank: &FeatureBank,
    depth: usize,
    lambda_bar: f64,
    tau: f64,
    eta: f64,
    n_prompt: usize,
) -> Result<TransformerWeights, TransformerError> {
    if depth < 3 || depth % 2 == 0 {
        return Err(TransformerError::InvalidDepth(depth));
    }
    if !(tau > 0.0) {
        return Err(TransformerError::NonPositiveTau(tau));
    }
    if !(lambda_bar >= 0.0) {
        return Err(TransformerError::InvalidWeights(format!(
            "lambda_bar must be >= 0, got {lambda_bar}"
        )));
    }
    if n_prompt == 0 {
        return Err(TransformerError::ShapeMismatch(
            "need at least one prompt example".into(),
        ));
    }
    bank.validate()
        .map_err(|e| TransformerError::InvalidWeights(e.to_string()))?;
    let d = bank.dim();
    let n = bank.n;
    let lay = SlabLayout { d, n };
    let dim = lay.total_dim();
    let zero = || Array2::<f64>::zeros((dim, dim));

    // --- layer 1: Attn0 (all zero) + FF0 (features and λ̄) ---
    let mut w0 = zero();
    let tau_ff = bank.tau;
    for (i, p) in bank.pairs.iter().enumerate() {
        let norm = p.omega.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (j, &om) in p.omega.iter().enumerate() {
            let val = tau_ff * om / norm;
            w0[(i, j)] = val; // upper ramp arm
            w0[(n + 1 + i, j)] = val; // lower ramp arm
        }
        w0[(i, lay.ones_row())] = -p.t * tau_ff + 0.5;
        w0[(n + 1 + i, lay.ones_row())] = -p.t * tau_ff - 0.5;
    }
    w0[(n, lay.ones_row())] = 1.0; // constant feature, upper arm
    w0[(2 * n + 1, lay.ones_row())] = -1.0; // constant feature, lower arm (relu kills it)
    w0[(2 * n + 2, lay.ones_row())] = lambda_bar;
    let mut u0 = zero();
    for r in 0..=n {
        u0[(lay.phi_start() + r, r)] = 1.0;
        u0[(lay.phi_start() + r, n + 1 + r)] = -1.0;
    }
    u0[(lay.lambda_row(), 2 * n + 2)] = 1.0;
    let layer0 = LayerWeights {
        heads: vec![AttentionHead {
            q: zero(),
            k: zero(),
            v: zero(),
        }],
        u: u0,
        w: w0,
        block_tag: BlockTag::Attn0FF0,
    };

    // --- Attn1: linearized gradient step on ρ ---
    // Four heads: labels, current fit, query corrector, and the constant
    // −σ(0) head that cancels the shared logistic offset.
    let mut v_plus = zero();
    for r in 0..=n {
        v_plus[(lay.rho_start() + r, lay.phi_start() + r)] = 8.0 * tau;
    }
    let v_minus = v_plus.mapv(|v| -v);

    let mut q1 = zero();
    q1[(0, lay.y_row())] = eta / tau;
    let mut k1 = zero();
    k1[(0, lay.ones_row())] = 1.0;

    let mut q2 = zero();
    let mut k2 = zero();
    for r in 0..=n {
        q2[(r, lay.phi_start() + r)] = eta / tau;
        k2[(r, lay.rho_start() + r)] = 1.0;
    }

    let mut q3 = zero();
    q3[(0, lay.ones_row())] = eta / tau;
    q3[(0, lay.w_row())] = -eta / tau;
    let mut k3 = zero();
    k3[(0, lay.yhat_row())] = 1.0;

    let attn1_heads = vec![
        AttentionHead {
            q: q1,
            k: k1,
            v: v_plus.clone(),
        },
        AttentionHead {
            q: q2,
            k: k2,
            v: v_minus.clone(),
        },
        AttentionHead {
            q: q3,
            k: k3,
            v: v_plus.clone(),
        },
        AttentionHead {
            q: zero(),
            k: zero(),
            v: v_minus.clone(),
        },
    ];

    // --- FF1: soft threshold on ρ and zeroing of ŷ ---
    let mut w1 = zero();
    for r in 0..=n {
        w1[(r, lay.rho_start() + r)] = 1.0;
        w1[(r, lay.lambda_row())] = eta;
        w1[(n + 1 + r, lay.rho_start() + r)] = 1.0;
        w1[(n + 1 + r, lay.lambda_row())] = -eta;
    }
    w1[(2 * n + 2, lay.lambda_row())] = eta;
    w1[(2 * n + 3, lay.yhat_row())] = 1.0;
    w1[(2 * n + 4, lay.yhat_row())] = -1.0;
    let mut u1 = zero();
    for r in 0..=n {
        u1[(lay.rho_start() + r, r)] = -1.0;
        u1[(lay.rho_start() + r, n + 1 + r)] = 1.0;
        u1[(lay.rho_start() + r, 2 * n + 2)] = 1.0;
    }
    u1[(lay.yhat_row(), 2 * n + 3)] = -1.0;
    u1[(lay.yhat_row(), 2 * n + 4)] = 1.0;

    // --- Attn2: refresh ŷ from the current ρ ---
    // The attention operator carries a 1/N normalization while the ŷ update
    // targets the single query column, so V is scaled by N to compensate.
    let mut v_yhat = zero();
    v_yhat[(lay.yhat_row(), lay.ones_row())] = 4.0 * tau * n_prompt as f64;
    v_yhat[(lay.yhat_row(), lay.w_row())] = -4.0 * tau * n_prompt as f64;
    let mut q_yhat = zero();
    let mut k_yhat = zero();
    for r in 0..=n {
        q_yhat[(r, lay.phi_start() + r)] = 1.0 / tau;
        k_yhat[(r, lay.rho_start() + r)] = 1.0;
    }
    let attn2_heads = vec![
        AttentionHead {
            q: q_yhat,
            k: k_yhat,
            v: v_yhat.clone(),
        },
        AttentionHead {
            q: zero(),
            k: zero(),
            v: v_yhat.mapv(|v| -v),
        },
    ];

    let mut layers = vec![layer0];
    for _ in 0..(depth - 1) / 2 {
        layers.push(LayerWeights {
            heads: attn1_heads.clone(),
            u: u1.clone(),
            w: w1.clone(),
            block_tag: BlockTag::Attn1FF1,
        });
        layers.push(LayerWeights {
            heads: attn2_heads.clone(),
            u: zero(),
            w: zero(),
            block_tag: BlockTag::Attn2FF2,
        });
    }
    let weights = TransformerWeights {
        layers,
        meta: TransformerMeta {
            bank: bank.clone(),
            tau,
            eta,
            lambda_bar,
            d,
            n,
            n_prompt,
        },
    };
    slab_self_check(&weights)?;
    Ok(weights)
}

/// Verify that every nonzero weight entry addresses a row/column inside the
/// slab its block is documented to touch.
fn slab_self_check(weights: &TransformerWeights) -> Result<(), TransformerError> {
    let lay = weights.layout();
    let n = lay.n;
    let in_phi = |r: usize| (lay.phi_start()..=lay.phi_start() + n).contains(&r);
    let in_rho = |r: usize| (lay.rho_start()..=lay.rho_start() + n).contains(&r);
    let fail = |l: usize, what: &str, r: usize, c: usize| {
        Err(TransformerError::InvalidWeights(format!(
            "layer {l}: nonzero {what} entry at ({r}, {c}) escapes its slab"
        )))
    };
    for (l, layer) in weights.layers.iter().enumerate() {
        match layer.block_tag {
            BlockTag::Attn0FF0 => {
                for head in &layer.heads {
                    for m in [&head.q, &head.k, &head.v] {
                        if m.iter().any(|&v| v != 0.0) {
                            return fail(l, "attention", 0, 0);
                        }
                    }
                }
                for ((r, c), &v) in layer.w.indexed_iter() {
                    if v != 0.0 && !(r <= 2 * n + 2 && c <= lay.ones_row()) {
                        return fail(l, "W", r, c);
                    }
                }
                for ((r, c), &v) in layer.u.indexed_iter() {
                    if v != 0.0 && !((in_phi(r) || r == lay.lambda_row()) && c <= 2 * n + 2) {
                        return fail(l, "U", r, c);
                    }
                }
            }
            BlockTag::Attn1FF1 => {
                for head in &layer.heads {
                    for ((r, c), &v) in head.v.indexed_iter() {
                        if v != 0.0 && !(in_rho(r) && in_phi(c)) {
                            return fail(l, "V", r, c);
                        }
                    }
                    for ((r, c), &v) in head.q.indexed_iter() {
                        if v != 0.0
                            && !(r <= n
                                && (c == lay.y_row()
                                    || c == lay.ones_row()
                                    || c == lay.w_row()
                                    || in_phi(c)))
                        {
                            return fail(l, "Q", r, c);
                        }
                    }
                    for ((r, c), &v) in head.k.indexed_iter() {
                        if v != 0.0
                            && !(r <= n
                                && (c == lay.ones_row() || c == lay.yhat_row() || in_rho(c)))
                        {
                            return fail(l, "K", r, c);
                        }
                    }
                }
                for ((r, c), &v) in layer.w.indexed_iter() {
                    if v != 0.0
                        && !(r <= 2 * n + 4
                            && (in_rho(c) || c == lay.lambda_row() || c == lay.yhat_row()))
                    {
                        return fail(l, "W", r, c);
                    }
                }
                for ((r, c), &v) in layer.u.indexed_iter() {
                    if v != 0.0 && !((in_rho(r) || r == lay.yhat_row()) && c <= 2 * n + 4) {
                        return fail(l, "U", r, c);
                    }
                }
            }
            BlockTag::Attn2FF2 => {
                for head in &layer.heads {
                    for ((r, c), &v) in head.v.indexed_iter() {
                        if v != 0.0
                            && !(r == lay.yhat_row()
                                && (c == lay.ones_row() || c == lay.w_row()))
                        {
                            return fail(l, "V", r, c);
                        }
                    }
                    for ((r, c), &v) in head.q.indexed_iter() {
                        if v != 0.0 && !(r <= n && in_phi(c)) {
                            return fail(l, "Q", r, c);
                        }
                    }
                    for ((r, c), &v) in head.k.indexed_iter() {
                        if v != 0.0 && !(r <= n && in_rho(c)) {
                            return fail(l, "K", r, c);
                        }
                    }
                }
                if layer.w.iter().any(|&v| v != 0.0) || layer.u.iter().any(|&v| v != 0.0) {
                    return fail(l, "FF2", 0, 0);
                }
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

/// Run all layers. With `trace`, the returned list holds H⁰ and then the
/// post-attention and post-FF states of every layer in order, so entry 2l is
/// H^(l) and entry 2l−1 is H^(l−1/2).
pub fn forward(
    weights: &TransformerWeights,
    h0: &HiddenState,
    trace: bool,
) -> Result<(HiddenState, Option<Vec<HiddenState>>), TransformerError> {
    let dim = weights.layout().total_dim();
    if h0.matrix.nrows() != dim || h0.layout != weights.layout() {
        return Err(TransformerError::ShapeMismatch(format!(
            "state has {} rows, weights expect {dim}",
            h0.matrix.nrows()
        )));
    }
    let mut states = trace.then(|| vec![h0.clone()]);
    let mut h = h0.matrix.clone();
    for layer in &weights.layers {
        let half = attention_layer(&h, &layer.heads)?;
        if let Some(s) = states.as_mut() {
            s.push(HiddenState {
                layout: h0.layout,
                matrix: half.clone(),
            });
        }
        h = ff_layer(&half, &layer.u, &layer.w)?;
        if let Some(s) = states.as_mut() {
            s.push(HiddenState {
                layout: h0.layout,
                matrix: h.clone(),
            });
        }
    }
    Ok((
        HiddenState {
            layout: h0.layout,
            matrix: h,
        },
        states,
    ))
}

// ---------------------------------------------------------------------------
// Emulation-gap certification
// ---------------------------------------------------------------------------

/// f64 roundoff allowance for the ρ-update residual check. The value slab
/// carries entries of magnitude 8τ, so each logistic score's ~ε absolute
/// error lands on the update amplified by τ; the analytic residual bound
/// (which scales as 1/τ) is therefore checked up to this additive term.
pub fn fp_allowance_rho(n_prompt: usize, tau: f64) -> f64 {
    64.0 * f64::EPSILON * tau * ((n_prompt + 1) as f64).sqrt()
}

/// f64 roundoff allowance for the prediction-refresh residual check (the ŷ
/// head carries a 4τN value scale against the 1/N attention normalization).
pub fn fp_allowance_yhat(n_prompt: usize, tau: f64) -> f64 {
    16.0 * f64::EPSILON * tau * (n_prompt + 1) as f64
}

/// Per-block comparison against the exact proximal gradient step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockResidual {
    pub t: usize,
    /// measured e_t = ρ^(2t+1) − exact_step(ρ^(2t−1))
    pub e: Array1<f64>,
    pub e_inf: f64,
    /// explicit bound from the logistic linearization law
    pub e_bound: f64,
    /// additive machine-precision allowance applied to the check
    pub e_fp: f64,
    pub e_ok: bool,
    /// measured ẽ_t = ŷ^(2t+1) − φ_{N+1}ᵀρ^(2t+1)
    pub e_tilde: f64,
    pub e_tilde_bound: f64,
    pub e_tilde_fp: f64,
    pub e_tilde_ok: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmulationReport {
    pub blocks: Vec<BlockResidual>,
    pub max_e_inf: f64,
    pub all_ok: bool,
}

/// Certify a traced forward pass against exact ISTA on `problem`.
///
/// For block t (layers 2t, 2t+1): the measured residual e_t must obey
/// ‖e_t‖∞ ≤ (4η²/Nτ)[Σ y_i² + Σ_i (φ_iᵀρ)² + ŷ²] + (2η/N)|ŷ − φ_{N+1}ᵀρ|
/// evaluated at the entering state, and the prediction refresh must obey
/// |ẽ_t| ≤ 2(φ_{N+1}ᵀρ)²/τ.
pub fn emulation_gap(
    trace: &[HiddenState],
    problem: &LassoProblem,
    eta: f64,
    lambda_bar: f64,
    tau: f64,
) -> Result<EmulationReport, TransformerError> {
    if trace.len() < 7 || trace.len() % 4 != 3 {
        // 2L+1 states with odd L >= 3
        return Err(TransformerError::TraceMissing);
    }
    let depth = (trace.len() - 1) / 2;
    let t_blocks = (depth - 1) / 2;
    let mut problem = problem.clone();
    problem.eta = eta;
    problem.lambda = lambda_bar;
    let n_prompt = problem.n_prompt() as f64;

    let mut blocks = Vec::with_capacity(t_blocks);
    let mut max_e_inf = 0.0f64;
    let mut all_ok = true;
    for t in 1..=t_blocks {
        let prev = &trace[2 * (2 * t - 1)];
        let next = &trace[2 * (2 * t + 1)];
        let (rho_prev, yhat_prev, _, phi_prev) = extract_state(prev)?;
        let (rho_next, yhat_next, _, _) = extract_state(next)?;

        let exact = ista_step(&problem, &rho_prev, &Array1::zeros(rho_prev.len()))
            .map_err(|e| TransformerError::ShapeMismatch(e.to_string()))?;
        let e = &rho_next - &exact;
        let e_inf = e.iter().fold(0.0f64, |m, v| m.max(v.abs()));

        let y_sq: f64 = problem.y.iter().map(|v| v * v).sum();
        let fits = phi_prev.t().dot(&rho_prev); // φ_iᵀρ over all N+1 columns
        let fit_sq: f64 = fits.iter().map(|v| v * v).sum();
        let query_fit = fits[fits.len() - 1];
        let e_bound = 4.0 * eta * eta / (n_prompt * tau)
            * (y_sq + fit_sq + yhat_prev * yhat_prev)
            + 2.0 * eta / n_prompt * (yhat_prev - query_fit).abs();
        let e_fp = fp_allowance_rho(problem.n_prompt(), tau);
        let e_ok = e_inf <= e_bound + e_fp;

        let (_, _, _, phi_next) = extract_state(next)?;
        let query_fit_next = phi_next
            .column(phi_next.ncols() - 1)
            .dot(&rho_next);
        let e_tilde = yhat_next - query_fit_next;
        let e_tilde_bound = 2.0 * query_fit_next * query_fit_next / tau;
        let e_tilde_fp = fp_allowance_yhat(problem.n_prompt(), tau);
        let e_tilde_ok = e_tilde.abs() <= e_tilde_bound + e_tilde_fp;

        max_e_inf = max_e_inf.max(e_inf);
        all_ok &= e_ok && e_tilde_ok;
        blocks.push(BlockResidual {
            t,
            e,
            e_inf,
            e_bound,
            e_fp,
            e_ok,
            e_tilde,
            e_tilde_bound,
            e_tilde_fp,
            e_tilde_ok,
        });
    }
    Ok(EmulationReport {
        blocks,
        max_e_inf,
        all_ok,
    })
}

// ---------------------------------------------------------------------------
// Sparse-triplet JSON for weights
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SparseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl SparseMatrix {
    fn from_dense(m: &Array2<f64>) -> Self {
        SparseMatrix {
            rows: m.nrows(),
            cols: m.ncols(),
            entries: m
                .indexed_iter()
                .filter(|(_, &v)| v != 0.0)
                .map(|((r, c), &v)| (r, c, v))
                .collect(),
        }
    }

    fn to_dense(&self) -> Result<Array2<f64>, TransformerError> {
        let mut m = Array2::zeros((self.rows, self.cols));
        for &(r, c, v) in &self.entries {
            if r >= self.rows || c >= self.cols {
                return Err(TransformerError::InvalidWeights(format!(
                    "triplet ({r}, {c}) outside {}x{}",
                    self.rows, self.cols
                )));
            }
            m[(r, c)] = v;
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct HeadJson {
    q: SparseMatrix,
    k: SparseMatrix,
    v: SparseMatrix,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayerJson {
    block_tag: BlockTag,
    heads: Vec<HeadJson>,
    u: SparseMatrix,
    w: SparseMatrix,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct WeightsJson {
    schema_version: u32,
    meta: TransformerMeta,
    layers: Vec<LayerJson>,
}

impl TransformerWeights {
    pub fn to_json(&self) -> String {
        let doc = WeightsJson {
            schema_version: SCHEMA_VERSION,
            meta: self.meta.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerJson {
                    block_tag: l.block_tag,
                    heads: l
                        .heads
                        .iter()
                        .map(|h| HeadJson {
                            q: SparseMatrix::from_dense(&h.q),
                            k: SparseMatrix::from_dense(&h.k),
                            v: SparseMatrix::from_dense(&h.v),
                        })
                        .collect(),
                    u: SparseMatrix::from_dense(&l.u),
                    w: SparseMatrix::from_dense(&l.w),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("weights serialize")
    }

    pub fn from_json(s: &str) -> Result<Self, TransformerError> {
        let doc: WeightsJson =
            serde_json::from_str(s).map_err(|e| TransformerError::InvalidWeights(e.to_string()))?;
        if doc.schema_version != SCHEMA_VERSION {
            return Err(TransformerError::InvalidWeights(format!(
                "schema version {} unsupported",
                doc.schema_version
            )));
        }
        let depth = doc.layers.len();
        if depth < 3 || depth % 2 == 0 {
            return Err(TransformerError::InvalidDepth(depth));
        }
        let mut layers = Vec::with_capacity(depth);
        for (i, l) in doc.layers.iter().enumerate() {
            let expected = if i == 0 {
                BlockTag::Attn0FF0
            } else if i % 2 == 1 {
                BlockTag::Attn1FF1
            } else {
                BlockTag::Attn2FF2
            };
            if l.block_tag != expected {
                return Err(TransformerError::InvalidWeights(format!(
                    "layer {i} tagged {:?}, expected {expected:?}",
                    l.block_tag
                )));
            }
            if l.heads.len() > 4 {
                return Err(TransformerError::InvalidWeights(format!(
                    "layer {i} has {} heads, construction uses at most 4",
                    l.heads.len()
                )));
            }
            let heads = l
                .heads
                .iter()
                .map(|h| {
                    Ok(AttentionHead {
                        q: h.q.to_dense()?,
                        k: h.k.to_dense()?,
                        v: h.v.to_dense()?,
                    })
                })
                .collect::<Result<Vec<_>, TransformerError>>()?;
            layers.push(LayerWeights {
                heads,
                u: l.u.to_dense()?,
                w: l.w.to_dense()?,
                block_tag: l.block_tag,
            });
        }
        let weights = TransformerWeights {
            layers,
            meta: doc.meta,
        };
        slab_self_check(&weights)?;
        Ok(weights)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{self, Atom, ClassSpec};
    use crate::lasso::{self, default_eta};
    use crate::seeding::stream_rng;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    /// Naive direct evaluation of (1/N) V H σ((QH)ᵀKH).
    fn naive_attention(h: &Array2<f64>, head: &AttentionHead) -> Array2<f64> {
        let dim = h.nrows();
        let cols = h.ncols();
        let qh = head.q.dot(h);
        let kh = head.k.dot(h);
        let mut scores = Array2::zeros((cols, cols));
        for i in 0..cols {
            for j in 0..cols {
                let mut s = 0.0;
                for r in 0..dim {
                    s += qh[(r, i)] * kh[(r, j)];
                }
                scores[(i, j)] = logistic(s);
            }
        }
        let vh = head.v.dot(h);
        let mut out = Array2::zeros((dim, cols));
        for r in 0..dim {
            for j in 0..cols {
                let mut s = 0.0;
                for i in 0..cols {
                    s += vh[(r, i)] * scores[(i, j)];
                }
                out[(r, j)] = s / (cols - 1) as f64;
            }
        }
        out
    }

    #[test]
    fn attention_op_matches_naive_oracle() {
        let mut rng = stream_rng(31, &[0]);
        for trial in 0..20 {
            let h = random_matrix(3, 3, &mut rng);
            let mut head = AttentionHead {
                q: random_matrix(3, 3, &mut rng),
                k: random_matrix(3, 3, &mut rng),
                v: random_matrix(3, 3, &mut rng),
            };
            // exercise the sparse row paths too
            if trial % 3 == 0 {
                head.q.row_mut(1).fill(0.0);
                head.k.row_mut(2).fill(0.0);
                head.v.row_mut(0).fill(0.0);
            }
            let fast = attention_op(&h, &head).unwrap();
            let slow = naive_attention(&h, &head);
            for (a, b) in fast.iter().zip(slow.iter()) {
                assert!((a - b).abs() <= 1e-13, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn attention_op_degenerate_cases() {
        let mut rng = stream_rng(32, &[0]);
        let h = random_matrix(4, 3, &mut rng);
        let zero = Array2::zeros((4, 4));
        // V = 0 gives the zero matrix
        let head = AttentionHead {
            q: random_matrix(4, 4, &mut rng),
            k: random_matrix(4, 4, &mut rng),
            v: zero.clone(),
        };
        assert!(attention_op(&h, &head).unwrap().iter().all(|&v| v == 0.0));
        // Q = K = 0: σ ≡ 1/2, so the result is (1/2N)·V·H·J
        let v = random_matrix(4, 4, &mut rng);
        let head = AttentionHead {
            q: zero.clone(),
            k: zero,
            v: v.clone(),
        };
        let out = attention_op(&h, &head).unwrap();
        let vh = v.dot(&h);
        for r in 0..4 {
            let expected = vh.row(r).sum() / (2.0 * 2.0);
            for c in 0..3 {
                assert_abs_diff_eq!(out[(r, c)], expected, epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn attention_layer_residual_and_additivity() {
        let mut rng = stream_rng(33, &[0]);
        let h = random_matrix(5, 4, &mut rng);
        assert_eq!(attention_layer(&h, &[]).unwrap(), h);
        let zero_head = AttentionHead {
            q: random_matrix(5, 5, &mut rng),
            k: random_matrix(5, 5, &mut rng),
            v: Array2::zeros((5, 5)),
        };
        assert_eq!(attention_layer(&h, &[zero_head]).unwrap(), h);

        let h1 = AttentionHead {
            q: random_matrix(5, 5, &mut rng),
            k: random_matrix(5, 5, &mut rng),
            v: random_matrix(5, 5, &mut rng),
        };
        let h2 = AttentionHead {
            q: random_matrix(5, 5, &mut rng),
            k: random_matrix(5, 5, &mut rng),
            v: random_matrix(5, 5, &mut rng),
        };
        let both = attention_layer(&h, &[h1.clone(), h2.clone()]).unwrap();
        let sum = &(&attention_layer(&h, &[h1]).unwrap() + &attention_layer(&h, &[h2]).unwrap())
            - &h;
        for (a, b) in both.iter().zip(sum.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn ff_layer_matches_naive_oracle() {
        let mut rng = stream_rng(34, &[0]);
        let h = random_matrix(6, 4, &mut rng);
        assert_eq!(ff_layer(&h, &Array2::zeros((6, 6)), &random_matrix(6, 6, &mut rng)).unwrap(), h);
        assert_eq!(ff_layer(&h, &random_matrix(6, 6, &mut rng), &Array2::zeros((6, 6))).unwrap(), h);

        let u = random_matrix(6, 6, &mut rng);
        let w = random_matrix(6, 6, &mut rng);
        let fast = ff_layer(&h, &u, &w).unwrap();
        let slow = &h + &u.dot(&w.dot(&h).mapv(|v| v.max(0.0)));
        for (a, b) in fast.iter().zip(slow.iter()) {
            assert!((a - b).abs() <= 1e-13);
        }
    }

    #[test]
    fn init_hidden_layout() {
        // N = 1, d = 1, n = 1: a 10×2 matrix with the prescribed entries.
        let h = init_hidden(&[vec![0.5]], &[2.0], &[-0.25], 1).unwrap();
        assert_eq!(h.matrix.shape(), &[10, 2]);
        let lay = h.layout;
        assert_eq!(h.matrix[(0, 0)], 0.5);
        assert_eq!(h.matrix[(0, 1)], -0.25);
        assert_eq!(h.matrix[(lay.ones_row(), 0)], 1.0);
        assert_eq!(h.matrix[(lay.ones_row(), 1)], 1.0);
        assert_eq!(h.matrix[(lay.y_row(), 0)], 2.0);
        assert_eq!(h.matrix[(lay.y_row(), 1)], 0.0, "query label is blank");
        assert_eq!(h.matrix[(lay.w_row(), 0)], 1.0);
        assert_eq!(h.matrix[(lay.w_row(), 1)], 0.0, "query flag is 0");
        for r in lay.phi_start()..h.matrix.nrows() {
            assert!(h.matrix.row(r).iter().all(|&v| v == 0.0));
        }
        assert_eq!(readout(&h), 0.0);
        assert!(matches!(
            init_hidden(&[vec![2.0]], &[0.0], &[0.0], 1),
            Err(TransformerError::InputOutsideBall(_))
        ));
    }

    fn test_spec() -> ClassSpec {
        ClassSpec::FiniteSpectrum {
            atoms: vec![
                Atom {
                    omega: vec![1.5, -0.7],
                    s: 0.8,
                },
                Atom {
                    omega: vec![-0.4, 2.1],
                    s: 0.5,
                },
            ],
            b_max: 0.4,
        }
    }

    struct Episode {
        bank: FeatureBank,
        problem: LassoProblem,
        weights: TransformerWeights,
        h0: HiddenState,
    }

    fn build_episode(n: usize, n_prompt: usize, depth: usize, tau: f64, seed: u64) -> Episode {
        let spec = test_spec();
        let bank = features::make_feature_bank(&spec, n, 64.0, seed).unwrap();
        let f = features::sample_member(&spec, seed ^ 0x55).unwrap();
        let xs = features::unit_ball_grid(2, n_prompt, seed ^ 0x99);
        let mut rng = stream_rng(seed, &[0xe]);
        let ys: Vec<f64> = xs
            .iter()
            .map(|x| f.eval(x) + 0.05 * rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let xq = features::unit_ball_grid(2, 1, seed ^ 0x111).pop().unwrap();
        let eta = default_eta(n);
        let lambda_bar = 0.05;
        let phi = features::design_matrix(&bank, &xs).unwrap();
        let problem = LassoProblem {
            phi,
            y: Array1::from_vec(ys.clone()),
            lambda: lambda_bar,
            eta,
        };
        let weights =
            build_icl_transformer(&bank, depth, lambda_bar, tau, eta, n_prompt).unwrap();
        let h0 = init_hidden(&xs, &ys, &xq, n).unwrap();
        Episode {
            bank,
            problem,
            weights,
            h0,
        }
    }

    #[test]
    fn build_rejects_bad_arguments() {
        let spec = test_spec();
        let bank = features::make_feature_bank(&spec, 4, 64.0, 1).unwrap();
        assert!(matches!(
            build_icl_transformer(&bank, 4, 0.1, 1e6, 0.1, 8),
            Err(TransformerError::InvalidDepth(4))
        ));
        assert!(matches!(
            build_icl_transformer(&bank, 1, 0.1, 1e6, 0.1, 8),
            Err(TransformerError::InvalidDepth(1))
        ));
        assert!(matches!(
            build_icl_transformer(&bank, 5, 0.1, 0.0, 0.1, 8),
            Err(TransformerError::NonPositiveTau(_))
        ));
    }

    #[test]
    fn first_layer_attention_is_identity() {
        let ep = build_episode(6, 10, 5, 1e6, 3);
        let half = attention_layer(&ep.h0.matrix, &ep.weights.layers[0].heads).unwrap();
        assert_eq!(half, ep.h0.matrix, "Attn0 must leave H unchanged");
    }

    #[test]
    fn ff0_fills_features_and_lambda() {
        let ep = build_episode(6, 10, 5, 1e6, 4);
        let l0 = &ep.weights.layers[0];
        let h1 = ff_layer(&ep.h0.matrix, &l0.u, &l0.w).unwrap();
        let state = HiddenState {
            layout: ep.h0.layout,
            matrix: h1,
        };
        let (rho, yhat, lambda, phi) = extract_state(&state).unwrap();
        assert!(rho.iter().all(|&v| v == 0.0));
        assert_eq!(yhat, 0.0);
        assert_abs_diff_eq!(lambda, 0.05, epsilon = 1e-15);
        for c in 0..phi.ncols() {
            let x: Vec<f64> = (0..2).map(|r| state.matrix[(r, c)]).collect();
            let expected = features::eval_features(&ep.bank, &x).unwrap();
            for r in 0..phi.nrows() {
                assert!(
                    (phi[(r, c)] - expected[r]).abs() <= 1e-12,
                    "feature ({r}, {c})"
                );
            }
        }
    }

    #[test]
    fn ff1_soft_thresholds_rho_and_zeroes_yhat() {
        let ep = build_episode(4, 6, 5, 1e6, 5);
        let ff1 = &ep.weights.layers[1];
        let lay = ep.h0.layout;
        let mut m = ep.h0.matrix.clone();
        let lambda_bar = 0.05;
        let eta = ep.weights.meta.eta;
        let mut rng = stream_rng(6, &[1]);
        let rho_in: Vec<f64> = (0..=4).map(|_| rng.random_range(-0.02..0.02)).collect();
        for (r, &v) in rho_in.iter().enumerate() {
            m.row_mut(lay.rho_start() + r).fill(v);
        }
        m.row_mut(lay.lambda_row()).fill(lambda_bar);
        m.row_mut(lay.yhat_row()).fill(0.37);
        let out = ff_layer(&m, &ff1.u, &ff1.w).unwrap();
        for (r, &v) in rho_in.iter().enumerate() {
            let got = out[(lay.rho_start() + r, 0)];
            let want = lasso::soft_threshold(v, eta * lambda_bar);
            assert!((got - want).abs() <= 1e-14, "rho {r}: {got} vs {want}");
        }
        assert!(out.row(lay.yhat_row()).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_with_zero_block_is_identity() {
        // Single all-zero layer: H_L = H0.
        let ep = build_episode(3, 5, 5, 1e6, 7);
        let dim = ep.h0.layout.total_dim();
        let zero = Array2::zeros((dim, dim));
        let weights = TransformerWeights {
            layers: vec![LayerWeights {
                heads: vec![],
                u: zero.clone(),
                w: zero,
                block_tag: BlockTag::Attn0FF0,
            }],
            meta: ep.weights.meta.clone(),
        };
        let (h_l, _) = forward(&weights, &ep.h0, false).unwrap();
        assert_eq!(h_l.matrix, ep.h0.matrix);
    }

    #[test]
    fn forward_preserves_static_rows_and_broadcast() {
        let ep = build_episode(8, 12, 9, 1e6, 8);
        let (h_l, trace) = forward(&ep.weights, &ep.h0, true).unwrap();
        let trace = trace.unwrap();
        assert_eq!(trace.len(), 2 * ep.weights.depth() + 1);
        let lay = ep.h0.layout;
        let static_rows: Vec<usize> =
            (0..lay.ones_row()).chain([lay.ones_row(), lay.y_row(), lay.w_row()]).collect();
        for state in &trace {
            assert_eq!(state.matrix.shape(), ep.h0.matrix.shape());
            for &r in &static_rows {
                for c in 0..state.matrix.ncols() {
                    assert!(
                        (state.matrix[(r, c)] - ep.h0.matrix[(r, c)]).abs() <= 1e-15,
                        "static row {r} drifted"
                    );
                }
            }
            extract_state(state).expect("broadcast slabs stay constant across columns");
        }
        // readout equals the ŷ-row in every column
        let yhat = readout(&h_l);
        for c in 0..h_l.matrix.ncols() {
            assert_abs_diff_eq!(h_l.matrix[(lay.yhat_row(), c)], yhat, epsilon = 1e-12);
        }
    }

    #[test]
    fn extract_state_flags_column_drift() {
        let ep = build_episode(3, 5, 5, 1e6, 9);
        let mut h = ep.h0.clone();
        h.matrix[(h.layout.rho_start(), 1)] = 0.5;
        assert!(matches!(
            extract_state(&h),
            Err(TransformerError::ColumnInconsistency(_))
        ));
    }

    #[test]
    fn readout_reads_last_entry() {
        let ep = build_episode(3, 5, 5, 1e6, 10);
        let mut h = ep.h0.clone();
        let r = h.layout.yhat_row();
        let c = h.matrix.ncols() - 1;
        h.matrix[(r, c)] = 3.5;
        assert_eq!(readout(&h), 3.5);
    }

    #[test]
    fn traced_forward_emulates_ista() {
        let ep = build_episode(8, 16, 11, 1e6, 11);
        let (_, trace) = forward(&ep.weights, &ep.h0, true).unwrap();
        let trace = trace.unwrap();
        let report = emulation_gap(&trace, &ep.problem, ep.weights.meta.eta, 0.05, 1e6).unwrap();
        assert_eq!(report.blocks.len(), 5);
        assert!(report.all_ok, "residual bounds violated: {report:?}");
        assert!(report.max_e_inf <= 1e-3);

        // Feeding the measured residuals back into the inexact iteration
        // reproduces the traced ρ^(2t+1) exactly.
        let residuals: Vec<Array1<f64>> =
            report.blocks.iter().map(|b| b.e.clone()).collect();
        let mut src = |t: usize| residuals[t - 1].clone();
        let traj = lasso::run_ista(&ep.problem, 5, Some(&mut src)).unwrap();
        for t in 1..=5 {
            let (rho, _, _, _) = extract_state(&trace[2 * (2 * t + 1)]).unwrap();
            for (a, b) in rho.iter().zip(traj.iterates[t].iter()) {
                assert!((a - b).abs() <= 1e-12, "block {t}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn residual_certificates_scale_inversely_with_sharpness() {
        // The measured residual is cubic in 1/τ (the paired ±V heads cancel
        // the quadratic logistic term) and sits on the FP noise floor at
        // large τ, so the decade check targets the certified bound, which
        // scales as 1/τ.
        let mut bound_maxima = Vec::new();
        for tau in [1e5, 1e6] {
            let ep = build_episode(8, 16, 9, tau, 12);
            let (_, trace) = forward(&ep.weights, &ep.h0, true).unwrap();
            let report =
                emulation_gap(&trace.unwrap(), &ep.problem, ep.weights.meta.eta, 0.05, tau)
                    .unwrap();
            assert!(report.all_ok);
            assert!(report.max_e_inf <= 1e-6);
            let max_bound = report
                .blocks
                .iter()
                .fold(0.0f64, |m, b| m.max(b.e_bound));
            bound_maxima.push(max_bound);
        }
        let ratio = bound_maxima[0] / bound_maxima[1];
        assert!(
            (5.0..=20.0).contains(&ratio),
            "decade sharpness ratio {ratio} (bounds {bound_maxima:?})"
        );
    }

    #[test]
    fn logistic_linearization_law() {
        for tau in [1e4, 1e5, 1e6] {
            for i in 0..=4000 {
                let x = -1000.0 + 2000.0 * i as f64 / 4000.0;
                let err = (x - 4.0 * tau * (logistic(x / tau) - 0.5)).abs();
                assert!(err <= 2.0 * x * x / tau, "x {x}, tau {tau}: {err}");
            }
        }
    }

    #[test]
    fn weights_json_round_trip() {
        let ep = build_episode(4, 6, 5, 1e6, 13);
        let text = ep.weights.to_json();
        let back = TransformerWeights::from_json(&text).unwrap();
        assert_eq!(back.depth(), ep.weights.depth());
        for (a, b) in back.layers.iter().zip(&ep.weights.layers) {
            assert_eq!(a.block_tag, b.block_tag);
            assert_eq!(a.u, b.u);
            assert_eq!(a.w, b.w);
            assert_eq!(a.heads.len(), b.heads.len());
            for (ha, hb) in a.heads.iter().zip(&b.heads) {
                assert_eq!(ha.q, hb.q);
                assert_eq!(ha.k, hb.k);
                assert_eq!(ha.v, hb.v);
            }
        }
        // Tampered layer tags are rejected.
        let bad = text.replace("\"Attn2FF2\"", "\"Attn1FF1\"");
        assert!(TransformerWeights::from_json(&bad).is_err());
    }
}
