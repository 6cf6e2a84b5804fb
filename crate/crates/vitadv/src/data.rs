//! Synthetic signal-plus-noise data generation.
//!
//! Each sample is an M x d token matrix: the first token is one of two
//! orthogonal signal vectors (selected by the label), the remaining tokens
//! are Gaussian noise drawn orthogonal to both signals.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Stream;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DataConfig {
    /// Token dimension.
    pub d: usize,
    /// Tokens per sample (first token carries the signal).
    pub m: usize,
    /// Signal l2 norm.
    pub mu_norm: f64,
    /// Noise standard deviation per coordinate.
    pub sigma_p: f64,
}

impl DataConfig {
    pub fn new(d: usize, m: usize, mu_norm: f64, sigma_p: f64) -> Result<Self> {
        let cfg = DataConfig { d, m, mu_norm, sigma_p };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Config from a target SNR with sigma_p and d fixed: mu_norm = snr * sigma_p * sqrt(d).
    pub fn from_snr(d: usize, m: usize, snr: f64, sigma_p: f64) -> Result<Self> {
        if snr <= 0.0 {
            return Err(Error::Config(format!("snr must be positive, got {snr}")));
        }
        DataConfig::new(d, m, snr * sigma_p * (d as f64).sqrt(), sigma_p)
    }

    /// Signal-to-noise ratio mu_norm / (sigma_p * sqrt(d)).
    pub fn snr(&self) -> f64 {
        self.mu_norm / (self.sigma_p * (self.d as f64).sqrt())
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 2 {
            return Err(Error::Config(format!("d must be >= 2, got {}", self.d)));
        }
        if self.m < 2 {
            return Err(Error::Config(format!("M must be >= 2, got {}", self.m)));
        }
        if !(self.mu_norm > 0.0) {
            return Err(Error::Config(format!("mu_norm must be > 0, got {}", self.mu_norm)));
        }
        if !(self.sigma_p >= 0.0) {
            return Err(Error::Config(format!("sigma_p must be >= 0, got {}", self.sigma_p)));
        }
        Ok(())
    }
}

/// How the signal pair is constructed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SignalMode {
    /// mu+ = |mu| e1, mu- = |mu| e2.
    AxisAligned,
    /// Random orthonormal pair via Gram-Schmidt, scaled to |mu|.
    RandomOrthonormal,
}

#[derive(Debug, Clone)]
pub struct SignalPair {
    pub mu_plus: Array1<f64>,
    pub mu_minus: Array1<f64>,
}

impl SignalPair {
    pub fn mu_norm(&self) -> f64 {
        self.mu_plus.dot(&self.mu_plus).sqrt()
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticSample {
    /// M x d token matrix; row 0 is the signal token.
    pub x: Array2<f64>,
    /// Label in {-1, +1}.
    pub y: f64,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<SyntheticSample>,
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Canonical axis-aligned signal pair.
pub fn make_signals(cfg: &DataConfig) -> Result<SignalPair> {
    cfg.validate()?;
    let mut mu_plus = Array1::zeros(cfg.d);
    let mut mu_minus = Array1::zeros(cfg.d);
    mu_plus[0] = cfg.mu_norm;
    mu_minus[1] = cfg.mu_norm;
    Ok(SignalPair { mu_plus, mu_minus })
}

/// Signal pair in the requested mode. The random mode Gram-Schmidts two
/// Gaussian draws into an orthonormal pair.
pub fn make_signals_with(cfg: &DataConfig, mode: SignalMode, rng: &mut Stream) -> Result<SignalPair> {
    match mode {
        SignalMode::AxisAligned => make_signals(cfg),
        SignalMode::RandomOrthonormal => {
            cfg.validate()?;
            let mut a: Array1<f64> = Array1::from_iter((0..cfg.d).map(|_| rng.sample(StandardNormal)));
            let mut b: Array1<f64> = Array1::from_iter((0..cfg.d).map(|_| rng.sample(StandardNormal)));
            let na = a.dot(&a).sqrt();
            if na < 1e-12 {
                return Err(Error::Numerical("degenerate random signal draw".into()));
            }
            a.mapv_inplace(|v| v / na);
            let proj = b.dot(&a);
            b.zip_mut_with(&a, |bv, &av| *bv -= proj * av);
            let nb = b.dot(&b).sqrt();
            if nb < 1e-12 {
                return Err(Error::Numerical("degenerate random signal draw".into()));
            }
            b.mapv_inplace(|v| v / nb);
            Ok(SignalPair {
                mu_plus: a * cfg.mu_norm,
                mu_minus: b * cfg.mu_norm,
            })
        }
    }
}

/// Remove the components of `z` along both signal directions.
pub fn project_out_signals(z: &Array1<f64>, sig: &SignalPair) -> Result<Array1<f64>> {
    let norm_sq = sig.mu_plus.dot(&sig.mu_plus);
    if norm_sq <= 0.0 {
        return Err(Error::Config("zero-norm signal vectors".into()));
    }
    let cp = z.dot(&sig.mu_plus) / norm_sq;
    let cm = z.dot(&sig.mu_minus) / norm_sq;
    let mut out = z.clone();
    out.zip_mut_with(&sig.mu_plus, |o, &p| *o -= cp * p);
    out.zip_mut_with(&sig.mu_minus, |o, &m| *o -= cm * m);
    Ok(out)
}

/// Draw one sample: Rademacher label, matching signal token, projected
/// Gaussian noise tokens.
pub fn sample_point(cfg: &DataConfig, sig: &SignalPair, rng: &mut Stream) -> SyntheticSample {
    let y: f64 = if rng.gen::<bool>() { 1.0 } else { -1.0 };
    let mut x = Array2::zeros((cfg.m, cfg.d));
    let signal = if y > 0.0 { &sig.mu_plus } else { &sig.mu_minus };
    x.row_mut(0).assign(signal);
    for i in 1..cfg.m {
        let raw: Array1<f64> =
            Array1::from_iter((0..cfg.d).map(|_| cfg.sigma_p * rng.sample::<f64, _>(StandardNormal)));
        let noise = project_out_signals(&raw, sig).expect("signals validated by config");
        x.row_mut(i).assign(&noise);
    }
    SyntheticSample { x, y }
}

/// Draw n independent samples; sample i uses substream(i) of the seed, so
/// the dataset is identical regardless of generation order.
pub fn sample_dataset(cfg: &DataConfig, sig: &SignalPair, n: usize, seed: u64) -> Dataset {
    let root = Stream::new(seed);
    let samples = (0..n)
        .map(|i| {
            let mut s = root.substream(i as u64);
            sample_point(cfg, sig, &mut s)
        })
        .collect();
    Dataset { samples, seed }
}

/// Debug CSV dump: header `sample,row,y,v0,...,v{d-1}`, one line per token row.
pub fn write_dataset_csv<W: std::io::Write>(w: &mut W, ds: &Dataset) -> Result<()> {
    let d = ds.samples.first().map(|s| s.x.ncols()).unwrap_or(0);
    write!(w, "sample,row,y")?;
    for j in 0..d {
        write!(w, ",v{j}")?;
    }
    writeln!(w)?;
    for (n, s) in ds.samples.iter().enumerate() {
        for (i, row) in s.x.rows().into_iter().enumerate() {
            write!(w, "{n},{i},{}", s.y as i64)?;
            for v in row.iter() {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg4() -> DataConfig {
        DataConfig::new(4, 3, 5.0, 1.0).unwrap()
    }

    #[test]
    fn axis_signals_match_construction() {
        let sig = make_signals(&cfg4()).unwrap();
        assert_eq!(sig.mu_plus.as_slice().unwrap(), &[5.0, 0.0, 0.0, 0.0]);
        assert_eq!(sig.mu_minus.as_slice().unwrap(), &[0.0, 5.0, 0.0, 0.0]);
        assert_eq!(sig.mu_plus.dot(&sig.mu_minus), 0.0);
    }

    #[test]
    fn d2_identity_basis_pair() {
        let cfg = DataConfig::new(2, 2, 1.0, 0.5).unwrap();
        let sig = make_signals(&cfg).unwrap();
        assert_eq!(sig.mu_plus.as_slice().unwrap(), &[1.0, 0.0]);
        assert_eq!(sig.mu_minus.as_slice().unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn d_below_two_rejected() {
        assert!(DataConfig::new(1, 3, 1.0, 1.0).is_err());
    }

    #[test]
    fn random_pair_orthonormal() {
        let cfg = DataConfig::new(16, 2, 3.0, 1.0).unwrap();
        let mut rng = Stream::new(99);
        let sig = make_signals_with(&cfg, SignalMode::RandomOrthonormal, &mut rng).unwrap();
        let np = sig.mu_plus.dot(&sig.mu_plus).sqrt();
        let nm = sig.mu_minus.dot(&sig.mu_minus).sqrt();
        assert!((np - 3.0).abs() < 1e-10);
        assert!((nm - 3.0).abs() < 1e-10);
        assert!(sig.mu_plus.dot(&sig.mu_minus).abs() < 1e-10 * 9.0);
    }

    #[test]
    fn projection_annihilates_signal() {
        let sig = make_signals(&cfg4()).unwrap();
        let out = project_out_signals(&sig.mu_plus, &sig).unwrap();
        assert!(out.iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn projection_identity_on_complement() {
        let sig = make_signals(&cfg4()).unwrap();
        let z = Array1::from(vec![0.0, 0.0, 2.0, -3.0]);
        let out = project_out_signals(&z, &sig).unwrap();
        assert_eq!(out, z);
    }

    #[test]
    fn projected_covariance_vanishes_on_signal_span() {
        // Monte Carlo: empirical second moments of projected draws restricted
        // to span{mu+, mu-} should vanish like 1/sqrt(n).
        let cfg = DataConfig::new(8, 2, 2.0, 1.0).unwrap();
        let sig = make_signals(&cfg).unwrap();
        let n_draws = 100_000usize;
        let mut rng = Stream::new(5);
        let (mut spp, mut smm, mut spm) = (0.0, 0.0, 0.0);
        for _ in 0..n_draws {
            let raw: Array1<f64> =
                Array1::from_iter((0..cfg.d).map(|_| rng.sample::<f64, _>(StandardNormal)));
            let z = project_out_signals(&raw, &sig).unwrap();
            let a = z.dot(&sig.mu_plus) / cfg.mu_norm;
            let b = z.dot(&sig.mu_minus) / cfg.mu_norm;
            spp += a * a;
            smm += b * b;
            spm += a * b;
        }
        let bound = 3.0 / (n_draws as f64).sqrt();
        assert!(spp / n_draws as f64 <= bound);
        assert!(smm / n_draws as f64 <= bound);
        assert!((spm / n_draws as f64).abs() <= bound);
    }

    #[test]
    fn zero_noise_gives_zero_noise_rows() {
        let cfg = DataConfig::new(4, 3, 5.0, 0.0).unwrap();
        let sig = make_signals(&cfg).unwrap();
        let mut rng = Stream::new(0);
        let s = sample_point(&cfg, &sig, &mut rng);
        for i in 1..cfg.m {
            assert!(s.x.row(i).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn label_balance() {
        let cfg = cfg4();
        let sig = make_signals(&cfg).unwrap();
        let n = 10_000usize;
        let ds = sample_dataset(&cfg, &sig, n, 11);
        let pos = ds.samples.iter().filter(|s| s.y > 0.0).count() as f64;
        assert!((pos / n as f64 - 0.5).abs() <= 0.02);
    }

    #[test]
    fn noise_token_norm_concentrates() {
        // Each projected noise token has E|xi|^2 = sigma_p^2 (d - 2).
        let cfg = DataConfig::new(64, 2, 4.0, 0.7).unwrap();
        let sig = make_signals(&cfg).unwrap();
        let n = 1000usize;
        let ds = sample_dataset(&cfg, &sig, n, 3);
        let mean_sq: f64 = ds
            .samples
            .iter()
            .map(|s| s.x.row(1).dot(&s.x.row(1)))
            .sum::<f64>()
            / n as f64;
        let expected = cfg.sigma_p * cfg.sigma_p * (cfg.d as f64 - 2.0);
        assert!((mean_sq - expected).abs() / expected < 0.05);
    }

    #[test]
    fn noise_orthogonal_to_signals() {
        let cfg = DataConfig::new(32, 4, 3.0, 1.5).unwrap();
        let sig = make_signals(&cfg).unwrap();
        let ds = sample_dataset(&cfg, &sig, 20, 21);
        let tol = 1e-10 * cfg.sigma_p * cfg.mu_norm;
        for s in &ds.samples {
            for i in 1..cfg.m {
                assert!(s.x.row(i).dot(&sig.mu_plus).abs() <= tol);
                assert!(s.x.row(i).dot(&sig.mu_minus).abs() <= tol);
            }
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        let cfg = cfg4();
        let sig = make_signals(&cfg).unwrap();
        let a = sample_dataset(&cfg, &sig, 10, 77);
        let b = sample_dataset(&cfg, &sig, 10, 77);
        for (sa, sb) in a.samples.iter().zip(&b.samples) {
            assert_eq!(sa.y, sb.y);
            assert_eq!(sa.x, sb.x);
        }
    }

    #[test]
    fn signal_row_exact() {
        let cfg = cfg4();
        let sig = make_signals(&cfg).unwrap();
        let ds = sample_dataset(&cfg, &sig, 50, 13);
        for s in &ds.samples {
            let expect = if s.y > 0.0 { &sig.mu_plus } else { &sig.mu_minus };
            assert_eq!(&s.x.row(0).to_owned(), expect);
        }
    }
}
