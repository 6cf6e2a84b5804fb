//! Trajectory diagnostics: scalarized value projections, vectorized Q/K
//! inner products, attention-margin and entropy probes, and regime labels.

use ndarray::Array1;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::data::{Dataset, SignalPair, SyntheticSample};
use crate::error::{Error, Result};
use crate::model::{self, ModelParams};
use crate::rng::Stream;
use rand::Rng;

/// Reference directions fixed at iteration 0: the clean signals, the
/// training set's noise tokens, and the initial value projections.
#[derive(Debug, Clone)]
pub struct ReferenceFrame {
    pub mu_plus: Array1<f64>,
    pub mu_minus: Array1<f64>,
    /// Noise tokens xi_{n,i} of the training set, row-major over (n, i>=1).
    pub noise_refs: Vec<Array1<f64>>,
    v0_plus: f64,
    v0_minus: f64,
    v0_noise: Vec<f64>,
    w_o_sq: f64,
}

impl ReferenceFrame {
    pub fn new(sig: &SignalPair, dataset: &Dataset, params0: &ModelParams) -> Result<Self> {
        let w_o_sq = params0.w_o.dot(&params0.w_o);
        if w_o_sq == 0.0 {
            return Err(Error::Config("w_O has zero norm".into()));
        }
        let mut noise_refs = Vec::new();
        for s in &dataset.samples {
            for i in 1..s.x.nrows() {
                noise_refs.push(s.x.row(i).to_owned());
            }
        }
        let v = params0.value_vector();
        let v0_noise = noise_refs.iter().map(|xi| xi.dot(&v)).collect();
        Ok(ReferenceFrame {
            mu_plus: sig.mu_plus.clone(),
            mu_minus: sig.mu_minus.clone(),
            noise_refs,
            v0_plus: sig.mu_plus.dot(&v),
            v0_minus: sig.mu_minus.dot(&v),
            v0_noise,
            w_o_sq,
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ScalarizedV {
    pub v_plus: f64,
    pub v_minus: f64,
    pub v_noise: Vec<f64>,
    pub gamma_v_plus: f64,
    pub gamma_v_minus: f64,
    pub rho_v: Vec<f64>,
}

/// Projections of the aggregate value direction W_V w_O (summed over heads)
/// onto the reference directions, plus the growth coefficients relative to
/// iteration 0.
pub fn scalarized_v(params: &ModelParams, frame: &ReferenceFrame) -> ScalarizedV {
    let v = params.value_vector();
    let v_plus = frame.mu_plus.dot(&v);
    let v_minus = frame.mu_minus.dot(&v);
    let v_noise: Vec<f64> = frame.noise_refs.iter().map(|xi| xi.dot(&v)).collect();
    let rho_v = v_noise
        .iter()
        .zip(&frame.v0_noise)
        .map(|(v, v0)| (v - v0) / frame.w_o_sq)
        .collect();
    ScalarizedV {
        v_plus,
        v_minus,
        v_noise,
        gamma_v_plus: (v_plus - frame.v0_plus) / frame.w_o_sq,
        gamma_v_minus: (v_minus - frame.v0_minus) / frame.w_o_sq,
        rho_v,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VectorizedQk {
    /// <q+, k+> averaged over heads.
    pub qk_plus: f64,
    /// <q-, k-> averaged over heads.
    pub qk_minus: f64,
    /// <q+, k-> averaged over heads.
    pub qk_cross: f64,
    pub qk_noise_mean_abs: f64,
    pub qk_noise_max_abs: f64,
}

/// Signal/noise directions pushed through W_Q and W_K; their inner products
/// are the attention logits between token types. Noise pairs are subsampled
/// (`n_pairs`, 0 = full enumeration).
pub fn vectorized_qk(
    params: &ModelParams,
    frame: &ReferenceFrame,
    n_pairs: usize,
    rng: &mut Stream,
) -> VectorizedQk {
    let nh = params.n_heads() as f64;
    let mut qk_plus = 0.0;
    let mut qk_minus = 0.0;
    let mut qk_cross = 0.0;
    // fixed noise pair subsample, shared across heads
    let total = frame.noise_refs.len();
    let pairs: Vec<(usize, usize)> = if total == 0 {
        Vec::new()
    } else if n_pairs == 0 || n_pairs >= total * total {
        (0..total)
            .flat_map(|i| (0..total).map(move |j| (i, j)))
            .collect()
    } else {
        (0..n_pairs)
            .map(|_| (rng.gen_range(0..total), rng.gen_range(0..total)))
            .collect()
    };
    let mut noise_abs = vec![0.0f64; pairs.len()];
    for h in &params.heads {
        let qp = frame.mu_plus.dot(&h.w_q);
        let qm = frame.mu_minus.dot(&h.w_q);
        let kp = frame.mu_plus.dot(&h.w_k);
        let km = frame.mu_minus.dot(&h.w_k);
        qk_plus += qp.dot(&kp);
        qk_minus += qm.dot(&km);
        qk_cross += qp.dot(&km);
        for (slot, &(i, j)) in noise_abs.iter_mut().zip(&pairs) {
            let qi = frame.noise_refs[i].dot(&h.w_q);
            let kj = frame.noise_refs[j].dot(&h.w_k);
            *slot += qi.dot(&kj) / nh;
        }
    }
    let (mean_abs, max_abs) = if noise_abs.is_empty() {
        (0.0, 0.0)
    } else {
        let mean = noise_abs.iter().map(|v| v.abs()).sum::<f64>() / noise_abs.len() as f64;
        let max = noise_abs.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        (mean, max)
    };
    VectorizedQk {
        qk_plus: qk_plus / nh,
        qk_minus: qk_minus / nh,
        qk_cross: qk_cross / nh,
        qk_noise_mean_abs: mean_abs,
        qk_noise_max_abs: max_abs,
    }
}

/// Attention logit margins for one training sample: for each query type,
/// the gap between the signal key and the worst noise key, minimized over
/// heads. Positive margins mean attention prefers the signal token.
pub fn lambda_margins(
    params: &ModelParams,
    frame: &ReferenceFrame,
    sample: &SyntheticSample,
) -> (f64, f64) {
    let signal = if sample.y > 0.0 { &frame.mu_plus } else { &frame.mu_minus };
    let m = sample.x.nrows();
    let mut sig_min = f64::INFINITY;
    let mut noise_min = f64::INFINITY;
    for h in &params.heads {
        let q_sig = signal.dot(&h.w_q);
        let k_sig = signal.dot(&h.w_k);
        let sig_sig = q_sig.dot(&k_sig);
        for j in 1..m {
            let kj = sample.x.row(j).dot(&h.w_k);
            sig_min = sig_min.min(sig_sig - q_sig.dot(&kj));
        }
        for i in 1..m {
            let qi = sample.x.row(i).dot(&h.w_q);
            let qi_sig = qi.dot(&k_sig);
            for j in 1..m {
                let kj = sample.x.row(j).dot(&h.w_k);
                noise_min = noise_min.min(qi_sig - qi.dot(&kj));
            }
        }
    }
    if m < 2 {
        (0.0, 0.0)
    } else {
        (sig_min, noise_min)
    }
}

/// Mean Shannon entropy (nats) of attention rows over samples, heads and
/// query rows. ln M means uniform attention; 0 means fully concentrated.
pub fn attention_entropy(params: &ModelParams, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Config("empty dataset".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for s in &dataset.samples {
        let (_, cache) = model::forward(params, &s.x)?;
        for hc in &cache.heads {
            for row in hc.attn.rows() {
                let h: f64 = row
                    .iter()
                    .map(|&a| if a > 0.0 { -a * a.ln() } else { 0.0 })
                    .sum();
                total += h;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Mean Shannon entropy (nats) of the *signal-query* attention row (row 0)
/// over samples and heads. This row concentrates much earlier than the
/// noise-query rows (whose logits grow slower by the token-norm ratio), so
/// it is the sensitive indicator of whether attention is learning.
pub fn signal_attention_entropy(params: &ModelParams, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Config("empty dataset".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for s in &dataset.samples {
        let (_, cache) = model::forward(params, &s.x)?;
        for hc in &cache.heads {
            let h: f64 = hc
                .attn
                .row(0)
                .iter()
                .map(|&a| if a > 0.0 { -a * a.ln() } else { 0.0 })
                .sum();
            total += h;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Entropy of one probability row, in nats.
pub fn row_entropy(row: &[f64]) -> f64 {
    row.iter().map(|&a| if a > 0.0 { -a * a.ln() } else { 0.0 }).sum()
}

/// Monte Carlo probe of attention stability under perturbation: perturb
/// every token uniformly on the l2 ball boundary of radius tau, recompute
/// the signal-query attention row, and return max/min of the signal-column
/// entry across probes. The theory predicts a ratio near e/2 for small tau.
pub fn softmax_ratio_probe(
    params: &ModelParams,
    sample: &SyntheticSample,
    tau: f64,
    n_probe: usize,
    rng: &mut Stream,
) -> Result<f64> {
    if n_probe == 0 {
        return Err(Error::Config("n_probe must be >= 1".into()));
    }
    if tau == 0.0 {
        return Ok(1.0);
    }
    let (m, d) = sample.x.dim();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for _ in 0..n_probe {
        let mut xt = sample.x.clone();
        for mut row in xt.rows_mut() {
            let mut dir: Array1<f64> = Array1::from_shape_fn(d, |_| rng.sample(StandardNormal));
            let n = dir.dot(&dir).sqrt();
            if n > 0.0 {
                dir.mapv_inplace(|v| v * tau / n);
            }
            row += &dir;
        }
        let (_, cache) = model::forward(params, &xt)?;
        // signal query row is row 0; signal column is column 0
        let mut entry = 0.0;
        for hc in &cache.heads {
            entry += hc.attn[[0, 0]];
        }
        entry /= params.n_heads() as f64;
        lo = lo.min(entry);
        hi = hi.max(entry);
        let _ = m;
    }
    if lo <= 0.0 {
        // The probed entry underflowed to exact zero: the softmax is
        // saturated against the signal column and the ratio is undefined.
        return Err(Error::Numerical(
            "softmax ratio probe: attention entry underflows to 0 at the probe point".into(),
        ));
    }
    Ok(hi / lo)
}

/// Reference constant from the attention-stability bound.
pub const SOFTMAX_RATIO_REFERENCE: f64 = std::f64::consts::E / 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Regime {
    /// Converged with concentrated attention.
    AttentionLearned,
    /// Converged with near-uniform attention (token-mean linear model).
    LinearCollapse,
    /// Converged but entropy between the thresholds.
    Indeterminate,
    /// Did not reach the target loss within budget.
    Failed,
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Regime::AttentionLearned => "attention_learned",
            Regime::LinearCollapse => "linear_collapse",
            Regime::Indeterminate => "indeterminate",
            Regime::Failed => "failed",
        };
        write!(f, "{s}")
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RegimeThresholds {
    /// Entropy <= theta_low * ln M classifies as attention-learned.
    pub theta_low: f64,
    /// Entropy >= theta_high * ln M classifies as linear collapse.
    pub theta_high: f64,
}

impl Default for RegimeThresholds {
    fn default() -> Self {
        RegimeThresholds { theta_low: 0.2, theta_high: 0.8 }
    }
}

/// Classify a finished run from its convergence flag and final entropy.
pub fn regime_classify(
    converged: bool,
    final_entropy: f64,
    m: usize,
    thresholds: RegimeThresholds,
) -> Regime {
    if !converged {
        return Regime::Failed;
    }
    let ln_m = (m as f64).ln();
    if final_entropy <= thresholds.theta_low * ln_m {
        Regime::AttentionLearned
    } else if final_entropy >= thresholds.theta_high * ln_m {
        Regime::LinearCollapse
    } else {
        Regime::Indeterminate
    }
}

/// Everything the `diag` subcommand reports for one checkpoint.
#[derive(Debug, Clone, Serialize)]
pub struct DiagRecord {
    pub v: ScalarizedV,
    pub qk: VectorizedQk,
    pub lambda_sig_min: f64,
    pub lambda_noise_min: f64,
    pub attn_entropy: f64,
    pub attn_entropy_signal: f64,
    pub wv_fro: f64,
    pub wvwo_l2: f64,
}

pub fn full_record(
    params: &ModelParams,
    frame: &ReferenceFrame,
    dataset: &Dataset,
    n_pairs: usize,
    rng: &mut Stream,
) -> Result<DiagRecord> {
    let v = scalarized_v(params, frame);
    let qk = vectorized_qk(params, frame, n_pairs, rng);
    let mut lam_sig = f64::INFINITY;
    let mut lam_noise = f64::INFINITY;
    for s in &dataset.samples {
        let (ls, ln_) = lambda_margins(params, frame, s);
        lam_sig = lam_sig.min(ls);
        lam_noise = lam_noise.min(ln_);
    }
    let wvwo = params.value_vector();
    Ok(DiagRecord {
        v,
        qk,
        lambda_sig_min: lam_sig,
        lambda_noise_min: lam_noise,
        attn_entropy: attention_entropy(params, dataset)?,
        attn_entropy_signal: signal_attention_entropy(params, dataset)?,
        wv_fro: params.wv_frobenius(),
        wvwo_l2: wvwo.dot(&wvwo).sqrt(),
    })
}
