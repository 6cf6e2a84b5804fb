//! Two-layer softmax-attention transformer: forward evaluation, logistic
//! loss, and exact analytic gradients for the attention projections, the
//! value matrix and the input tokens.
//!
//! The network is f(X) = sum over heads of
//! (1/M) sum_l softmax(x_l^T W_Q W_K^T X^T) X W_V w_O, with w_O fixed.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Stream;

#[derive(Debug, Clone)]
pub struct HeadParams {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub heads: Vec<HeadParams>,
    /// Fixed output vector; never updated by training.
    pub w_o: Array1<f64>,
    /// Bumped on every update; part of the forward-cache fingerprint.
    pub version: u64,
}

impl ModelParams {
    pub fn d(&self) -> usize {
        self.heads[0].w_q.nrows()
    }

    pub fn d_h(&self) -> usize {
        self.heads[0].w_q.ncols()
    }

    pub fn d_v(&self) -> usize {
        self.heads[0].w_v.ncols()
    }

    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }

    /// Sum over heads of W_V w_O: the value direction of the collapsed
    /// linear model.
    pub fn value_vector(&self) -> Array1<f64> {
        let mut v = Array1::zeros(self.d());
        for h in &self.heads {
            v += &h.w_v.dot(&self.w_o);
        }
        v
    }

    pub fn wv_frobenius(&self) -> f64 {
        self.heads
            .iter()
            .map(|h| h.w_v.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.heads.iter().all(|h| {
            h.w_q.iter().all(|x| x.is_finite())
                && h.w_k.iter().all(|x| x.is_finite())
                && h.w_v.iter().all(|x| x.is_finite())
        }) && self.w_o.iter().all(|x| x.is_finite())
    }

    /// True when W_Q W_K^T = 0 for every head (uniform attention).
    pub fn is_uniform_attention(&self, tol: f64) -> bool {
        self.heads.iter().all(|h| {
            let a = h.w_q.dot(&h.w_k.t());
            a.iter().all(|x| x.abs() <= tol)
        })
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub enum InitMode {
    /// W_Q, W_K entries ~ N(0, sigma_h^2); W_V entries ~ N(0, sigma_v^2).
    Gaussian { sigma_h: f64, sigma_v: f64 },
    /// Entries ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)) scaled by 1/16.
    ScaledUniform,
}

fn gaussian_matrix(rows: usize, cols: usize, sigma: f64, rng: &mut Stream) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| sigma * rng.sample::<f64, _>(StandardNormal))
}

fn scaled_uniform_matrix(rows: usize, cols: usize, fan_in: usize, rng: &mut Stream) -> Array2<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt() / 16.0;
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
}

/// Initialize per-head projections; w_O is the fixed unit vector
/// (1,...,1)/sqrt(d_v).
pub fn init_params(
    d: usize,
    d_h: usize,
    d_v: usize,
    n_heads: usize,
    mode: InitMode,
    rng: &mut Stream,
) -> Result<ModelParams> {
    if d == 0 || d_h == 0 || d_v == 0 || n_heads == 0 {
        return Err(Error::Config("model dimensions must be positive".into()));
    }
    let heads = (0..n_heads)
        .map(|_| match mode {
            InitMode::Gaussian { sigma_h, sigma_v } => HeadParams {
                w_q: gaussian_matrix(d, d_h, sigma_h, rng),
                w_k: gaussian_matrix(d, d_h, sigma_h, rng),
                w_v: gaussian_matrix(d, d_v, sigma_v, rng),
            },
            InitMode::ScaledUniform => HeadParams {
                w_q: scaled_uniform_matrix(d, d_h, d, rng),
                w_k: scaled_uniform_matrix(d, d_h, d, rng),
                w_v: scaled_uniform_matrix(d, d_v, d, rng),
            },
        })
        .collect();
    let w_o = Array1::from_elem(d_v, 1.0 / (d_v as f64).sqrt());
    Ok(ModelParams { heads, w_o, version: 0 })
}

/// Per-head intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub struct HeadCache {
    /// Raw attention scores, M x M (row = query).
    pub logits: Array2<f64>,
    /// Softmax rows, M x M.
    pub attn: Array2<f64>,
    /// X W_V w_O, length M.
    pub value_proj: Array1<f64>,
    /// X W_Q, M x d_h.
    pub q: Array2<f64>,
    /// X W_K, M x d_h.
    pub k: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub heads: Vec<HeadCache>,
    pub output: f64,
    fingerprint: u64,
}

fn fingerprint(params: &ModelParams, x: &Array2<f64>) -> u64 {
    // FNV-1a over the input bytes, mixed with the params version.
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ params.version.wrapping_mul(0x1000_0000_01b3);
    for v in x.iter() {
        h ^= v.to_bits();
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

/// Row-wise softmax with max subtraction.
fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Forward pass. Returns the scalar output and the cache consumed by
/// [`backward`] / [`input_grad`].
pub fn forward(params: &ModelParams, x: &Array2<f64>) -> Result<(f64, ForwardCache)> {
    let (m, d) = x.dim();
    if d != params.d() {
        return Err(Error::Shape(format!(
            "input has d={d}, model expects d={}",
            params.d()
        )));
    }
    if m == 0 {
        return Err(Error::Shape("input has no tokens".into()));
    }
    let mut output = 0.0;
    let mut heads = Vec::with_capacity(params.n_heads());
    for hp in &params.heads {
        let q = x.dot(&hp.w_q);
        let k = x.dot(&hp.w_k);
        let value_proj = x.dot(&hp.w_v.dot(&params.w_o));
        let logits = q.dot(&k.t());
        let attn = softmax_rows(&logits);
        // f_h = (1/M) sum_l <attn_l, v>
        let head_out: f64 = attn.dot(&value_proj).sum() / m as f64;
        output += head_out;
        heads.push(HeadCache { logits, attn, value_proj, q, k });
    }
    let fp = fingerprint(params, x);
    Ok((output, ForwardCache { heads, output, fingerprint: fp }))
}

/// Logistic loss l(z) = log(1 + exp(-z)), evaluated without overflow.
pub fn logistic_loss(z: f64) -> f64 {
    if z >= 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}

/// Loss of a network output against a +-1 label.
pub fn loss(f: f64, y: f64) -> f64 {
    logistic_loss(y * f)
}

/// d loss / d f = -y * sigmoid(-y f), stable at both tails.
pub fn loss_grad_output(f: f64, y: f64) -> f64 {
    let z = y * f;
    let s = if z >= 0.0 {
        let e = (-z).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + z.exp())
    };
    -y * s
}

#[derive(Debug, Clone)]
pub struct HeadGrads {
    pub g_wq: Array2<f64>,
    pub g_wk: Array2<f64>,
    pub g_wv: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct Grads {
    pub heads: Vec<HeadGrads>,
    /// Gradient with respect to the input tokens, summed over heads.
    pub g_x: Array2<f64>,
}

/// The softmax-Jacobian-weighted score gradient for one head:
/// G[l][k] = gf/M * attn[l][k] * (v[k] - <attn_l, v>).
fn score_grad(hc: &HeadCache, gf: f64, m: usize) -> Array2<f64> {
    let row_means = hc.attn.dot(&hc.value_proj); // <attn_l, v> per query row
    let scale = gf / m as f64;
    let mut g = hc.attn.clone();
    for (l, mut row) in g.rows_mut().into_iter().enumerate() {
        let rm = row_means[l];
        for (k, val) in row.iter_mut().enumerate() {
            *val *= scale * (hc.value_proj[k] - rm);
        }
    }
    g
}

fn check_cache(params: &ModelParams, x: &Array2<f64>, cache: &ForwardCache) -> Result<()> {
    if cache.fingerprint != fingerprint(params, x) {
        return Err(Error::Contract(
            "forward cache does not match (params, X); recompute forward".into(),
        ));
    }
    Ok(())
}

/// Exact gradients of l(y f(X)) with respect to every parameter block and
/// the input. The cache must come from `forward` on the same (params, X).
pub fn backward(
    params: &ModelParams,
    x: &Array2<f64>,
    y: f64,
    cache: &ForwardCache,
) -> Result<Grads> {
    check_cache(params, x, cache)?;
    let m = x.nrows();
    let gf = loss_grad_output(cache.output, y);
    let mut g_x = Array2::zeros(x.raw_dim());
    let mut heads = Vec::with_capacity(params.n_heads());
    for (hp, hc) in params.heads.iter().zip(&cache.heads) {
        let g = score_grad(hc, gf, m);
        // Value path: column attention mass c_k = sum_l attn[l][k].
        let col_mass = hc.attn.sum_axis(ndarray::Axis(0));
        let xc = x.t().dot(&col_mass); // d-vector
        let scale = gf / m as f64;
        let mut g_wv = Array2::zeros(hp.w_v.raw_dim());
        for (i, &xi) in xc.iter().enumerate() {
            let mut row = g_wv.row_mut(i);
            for (j, &wo) in params.w_o.iter().enumerate() {
                row[j] = scale * xi * wo;
            }
        }
        let gk = g.dot(&hc.k); // M x d_h
        let gtq = g.t().dot(&hc.q); // M x d_h
        let g_wq = x.t().dot(&gk);
        let g_wk = x.t().dot(&gtq);
        // Input gradient: value path + query path + key path.
        let v_dir = hp.w_v.dot(&params.w_o);
        for (l, mut row) in g_x.rows_mut().into_iter().enumerate() {
            let c = scale * col_mass[l];
            row.zip_mut_with(&v_dir, |r, &v| *r += c * v);
        }
        g_x += &gk.dot(&hp.w_q.t());
        g_x += &gtq.dot(&hp.w_k.t());
        heads.push(HeadGrads { g_wq, g_wk, g_wv });
    }
    Ok(Grads { heads, g_x })
}

/// Input-only gradient of l(y f(X)); the hot path inside PGD.
pub fn input_grad(
    params: &ModelParams,
    x: &Array2<f64>,
    y: f64,
    cache: &ForwardCache,
) -> Result<Array2<f64>> {
    check_cache(params, x, cache)?;
    let m = x.nrows();
    let gf = loss_grad_output(cache.output, y);
    let mut g_x = Array2::zeros(x.raw_dim());
    for (hp, hc) in params.heads.iter().zip(&cache.heads) {
        let g = score_grad(hc, gf, m);
        let col_mass = hc.attn.sum_axis(ndarray::Axis(0));
        let scale = gf / m as f64;
        let v_dir = hp.w_v.dot(&params.w_o);
        for (l, mut row) in g_x.rows_mut().into_iter().enumerate() {
            let c = scale * col_mass[l];
            row.zip_mut_with(&v_dir, |r, &v| *r += c * v);
        }
        g_x += &g.dot(&hc.k).dot(&hp.w_q.t());
        g_x += &g.t().dot(&hc.q).dot(&hp.w_k.t());
    }
    Ok(g_x)
}

// --- checkpoint io ---

const CHECKPOINT_MAGIC: &[u8; 8] = b"VITADVCK";
const CHECKPOINT_VERSION: u64 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub d: usize,
    pub d_h: usize,
    pub d_v: usize,
    pub n_heads: usize,
    pub seed: u64,
    #[serde(default)]
    pub config: serde_json::Value,
}

fn write_matrix<W: Write>(w: &mut W, m: &Array2<f64>) -> Result<()> {
    for v in m.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Flat binary checkpoint: magic, version, d, d_h, d_v, H, then row-major
/// W_Q, W_K, W_V per head, then w_O, all little-endian. A JSON sidecar
/// `<path>.json` carries the metadata.
pub fn save_checkpoint(params: &ModelParams, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(CHECKPOINT_MAGIC)?;
    for v in [
        CHECKPOINT_VERSION,
        params.d() as u64,
        params.d_h() as u64,
        params.d_v() as u64,
        params.n_heads() as u64,
    ] {
        f.write_all(&v.to_le_bytes())?;
    }
    for h in &params.heads {
        write_matrix(&mut f, &h.w_q)?;
        write_matrix(&mut f, &h.w_k)?;
        write_matrix(&mut f, &h.w_v)?;
    }
    for v in params.w_o.iter() {
        f.write_all(&v.to_le_bytes())?;
    }
    let sidecar = path.with_extension(match path.extension() {
        Some(e) => format!("{}.json", e.to_string_lossy()),
        None => "json".to_string(),
    });
    std::fs::write(&sidecar, serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, CheckpointMeta)> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Config(format!("{}: not a checkpoint file", path.display())));
    }
    let mut u64buf = [0u8; 8];
    let mut next_u64 = |f: &mut std::io::BufReader<std::fs::File>| -> Result<u64> {
        f.read_exact(&mut u64buf)?;
        Ok(u64::from_le_bytes(u64buf))
    };
    let version = next_u64(&mut f)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Config(format!("unsupported checkpoint version {version}")));
    }
    let d = next_u64(&mut f)? as usize;
    let d_h = next_u64(&mut f)? as usize;
    let d_v = next_u64(&mut f)? as usize;
    let n_heads = next_u64(&mut f)? as usize;
    let mut heads = Vec::with_capacity(n_heads);
    for _ in 0..n_heads {
        let w_q = Array2::from_shape_vec((d, d_h), read_f64s(&mut f, d * d_h)?).unwrap();
        let w_k = Array2::from_shape_vec((d, d_h), read_f64s(&mut f, d * d_h)?).unwrap();
        let w_v = Array2::from_shape_vec((d, d_v), read_f64s(&mut f, d * d_v)?).unwrap();
        heads.push(HeadParams { w_q, w_k, w_v });
    }
    let w_o = Array1::from(read_f64s(&mut f, d_v)?);
    let params = ModelParams { heads, w_o, version: 0 };
    let sidecar = path.with_extension(match path.extension() {
        Some(e) => format!("{}.json", e.to_string_lossy()),
        None => "json".to_string(),
    });
    let meta: CheckpointMeta = serde_json::from_str(&std::fs::read_to_string(&sidecar)?)?;
    Ok((params, meta))
}
