//! Held-out evaluation: clean error and PGD-certified lower bounds on
//! robust error, plus the signal-knockout probe.

use rayon::prelude::*;
use serde::Serialize;

use crate::attack::{self, AttackSpec};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{self, ModelParams};
use crate::rng::Stream;

const EVAL_STREAM_TAG: u64 = 0x45_56_41_4c; // "EVAL"

/// Logistic loss at margin 0; any achieved loss at or above this certifies a
/// misclassification.
const LN_2: f64 = std::f64::consts::LN_2;

#[derive(Debug, Clone, Serialize)]
pub struct EvalResult {
    pub n_test: usize,
    pub clean_err: f64,
    pub robust_err_lb: f64,
    pub p: String,
    pub tau_rel: f64,
    pub steps: usize,
}

pub const EVAL_HEADER: &str = "n_test,clean_err,robust_err_lb,p,tau_rel,steps";

impl EvalResult {
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.n_test, self.clean_err, self.robust_err_lb, self.p, self.tau_rel, self.steps
        )
    }
}

/// Fraction of samples with non-positive margin y*f(x). Boundary points
/// count as errors.
pub fn clean_error(params: &ModelParams, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Config("empty dataset".into()));
    }
    let errs: Vec<bool> = dataset
        .samples
        .par_iter()
        .map(|s| -> Result<bool> {
            let (f, _) = model::forward(params, &s.x)?;
            Ok(s.y * f <= 0.0)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(count_rate(&errs))
}

/// Fraction of samples for which the attack finds a misclassifying point in
/// the ball. A lower bound on the true robust error: the attacker is a
/// first-order heuristic, not an oracle.
pub fn robust_error_lb(params: &ModelParams, dataset: &Dataset, spec: &AttackSpec) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Config("empty dataset".into()));
    }
    spec.validate()?;
    let root = Stream::new(crate::rng::derive(dataset.seed, EVAL_STREAM_TAG));
    let errs: Vec<bool> = dataset
        .samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| -> Result<bool> {
            let mut rng = root.substream(i as u64);
            let adv = attack::pgd_attack(params, &s.x, s.y, spec, &mut rng)?;
            // loss >= ln 2 iff margin <= 0
            Ok(adv.loss_achieved >= LN_2)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(count_rate(&errs))
}

/// Strongest of several attacks per sample (multi-norm evaluation).
pub fn multi_norm_error_lb(
    params: &ModelParams,
    dataset: &Dataset,
    specs: &[AttackSpec],
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Config("empty dataset".into()));
    }
    let root = Stream::new(crate::rng::derive(dataset.seed, EVAL_STREAM_TAG));
    let errs: Vec<bool> = dataset
        .samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| -> Result<bool> {
            let mut rng = root.substream(i as u64);
            let adv = attack::multi_norm_attack(params, &s.x, s.y, specs, &mut rng)?;
            Ok(adv.loss_achieved >= LN_2)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(count_rate(&errs))
}

/// Clean error and robust error lower bound under one attack, as a CSV row.
pub fn evaluate(
    params: &ModelParams,
    dataset: &Dataset,
    spec: &AttackSpec,
    tau_rel: f64,
) -> Result<EvalResult> {
    Ok(EvalResult {
        n_test: dataset.len(),
        clean_err: clean_error(params, dataset)?,
        robust_err_lb: robust_error_lb(params, dataset, spec)?,
        p: spec.p.to_string(),
        tau_rel,
        steps: spec.steps,
    })
}

/// Signal-knockout probe: overwrite the signal token (row 0) with zeros —
/// an l2 perturbation of exactly the signal norm — and measure the error
/// at the knocked-out inputs. With the signal gone the label is
/// statistically invisible, so any classifier errs on at least a quarter
/// of samples in expectation; a lower value flags an evaluation bug.
pub fn signal_knockout_error(params: &ModelParams, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Config("empty dataset".into()));
    }
    let errs: Vec<bool> = dataset
        .samples
        .par_iter()
        .map(|s| -> Result<bool> {
            let mut x = s.x.clone();
            x.row_mut(0).fill(0.0);
            let (f, _) = model::forward(params, &x)?;
            Ok(s.y * f <= 0.0)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(count_rate(&errs))
}

/// Exact robust error of a uniform-attention model under the l2 closed-form
/// worst case: error iff y*f(x) - tau*|v| <= 0.
pub fn linear_collapse_robust_error(
    params: &ModelParams,
    dataset: &Dataset,
    tau: f64,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Config("empty dataset".into()));
    }
    let errs: Vec<bool> = dataset
        .samples
        .iter()
        .map(|s| -> Result<bool> {
            let adv = attack::linear_worst_case(params, &s.x, s.y, tau)?;
            Ok(adv.loss_achieved >= LN_2)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(count_rate(&errs))
}

fn count_rate(errs: &[bool]) -> f64 {
    errs.iter().filter(|&&e| e).count() as f64 / errs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::{AttackInit, NormP};
    use crate::data::{make_signals, sample_dataset, DataConfig};
    use crate::model::{HeadParams, ModelParams};
    use ndarray::{Array1, Array2};

    /// Uniform-attention model whose value direction reads out e1 - e2, i.e.
    /// the Bayes-style linear classifier for axis-aligned signals.
    fn linear_readout(d: usize, d_h: usize, d_v: usize, scale: f64) -> ModelParams {
        let mut w_v = Array2::zeros((d, d_v));
        // v = W_V w_O with w_O = ones/sqrt(d_v): spread scale over columns
        for j in 0..d_v {
            w_v[[0, j]] = scale;
            w_v[[1, j]] = -scale;
        }
        let w_o = Array1::from_elem(d_v, 1.0 / (d_v as f64).sqrt());
        ModelParams {
            heads: vec![HeadParams {
                w_q: Array2::zeros((d, d_h)),
                w_k: Array2::zeros((d, d_h)),
                w_v,
            }],
            w_o,
            version: 0,
        }
    }

    fn setup(sigma_p: f64) -> (DataConfig, Dataset) {
        let cfg = DataConfig::new(8, 3, 2.0, sigma_p).unwrap();
        let sig = make_signals(&cfg).unwrap();
        let ds = sample_dataset(&cfg, &sig, 40, 77);
        (cfg, ds)
    }

    #[test]
    fn perfect_classifier_zero_clean_error() {
        // noiseless: f = y * |mu| * scale * sqrt(d_v) / M, always correct
        let (_, ds) = setup(0.0);
        let params = linear_readout(8, 4, 4, 1.0);
        assert_eq!(clean_error(&params, &ds).unwrap(), 0.0);
    }

    #[test]
    fn sign_flipped_classifier_full_error() {
        let (_, ds) = setup(0.0);
        let params = linear_readout(8, 4, 4, -1.0);
        assert_eq!(clean_error(&params, &ds).unwrap(), 1.0);
    }

    #[test]
    fn zero_model_errs_everywhere() {
        // f = 0 gives margin 0, which counts as error
        let (_, ds) = setup(0.3);
        let params = linear_readout(8, 4, 4, 0.0);
        assert_eq!(clean_error(&params, &ds).unwrap(), 1.0);
        assert_eq!(signal_knockout_error(&params, &ds).unwrap(), 1.0);
    }

    #[test]
    fn robust_error_bounded_by_clean() {
        let (_, ds) = setup(0.2);
        let params = linear_readout(8, 4, 4, 1.0);
        let spec = AttackSpec::pgd_l2(0.5).for_evaluation();
        let ce = clean_error(&params, &ds).unwrap();
        let re = robust_error_lb(&params, &ds, &spec).unwrap();
        assert!(re >= ce);
    }

    #[test]
    fn robust_error_monotone_in_tau() {
        let (_, ds) = setup(0.2);
        let params = linear_readout(8, 4, 4, 1.0);
        let small = AttackSpec::pgd_l2(0.1).for_evaluation();
        let large = AttackSpec::pgd_l2(2.5).for_evaluation();
        let re_s = robust_error_lb(&params, &ds, &small).unwrap();
        let re_l = robust_error_lb(&params, &ds, &large).unwrap();
        assert!(re_l >= re_s);
    }

    #[test]
    fn pgd_lb_matches_exact_linear_rate() {
        // On a uniform-attention model the closed form is the true optimum;
        // PGD must certify the same error set.
        let (_, ds) = setup(0.3);
        let params = linear_readout(8, 4, 4, 0.7);
        for &tau in &[0.2, 0.6, 1.2] {
            let exact = linear_collapse_robust_error(&params, &ds, tau).unwrap();
            let spec = AttackSpec {
                p: NormP::L2,
                tau,
                steps: 60,
                step_size: 0.2 * tau,
                init: AttackInit::Clean,
                track_best: true,
            };
            let lb = robust_error_lb(&params, &ds, &spec).unwrap();
            assert!(lb <= exact + 1e-12, "lb {lb} exact {exact} tau {tau}");
            assert!((lb - exact).abs() < 0.051, "lb {lb} exact {exact} tau {tau}");
        }
    }

    #[test]
    fn linear_rate_threshold_behaviour() {
        // noiseless margin is |mu|*scale*sqrt(d_v)/M = 2*1*2/3; error for all
        // samples once tau*|v| crosses it, none before.
        let (_, ds) = setup(0.0);
        let params = linear_readout(8, 4, 4, 1.0);
        let v_norm = params.value_vector().dot(&params.value_vector()).sqrt();
        let margin: f64 = 2.0 * 2.0 / 3.0;
        let below = linear_collapse_robust_error(&params, &ds, 0.9 * margin / v_norm).unwrap();
        let above = linear_collapse_robust_error(&params, &ds, 1.1 * margin / v_norm).unwrap();
        assert_eq!(below, 0.0);
        assert_eq!(above, 1.0);
    }

    #[test]
    fn knockout_error_half_for_linear_readout() {
        // with the signal zeroed, f depends only on noise orthogonal to the
        // signals, so sign(f) is independent of y: error ~ 1/2
        let cfg = DataConfig::new(16, 4, 2.0, 0.5).unwrap();
        let sig = make_signals(&cfg).unwrap();
        let ds = sample_dataset(&cfg, &sig, 400, 5);
        // readout along a noise-visible direction e3
        let mut w_v = Array2::zeros((16, 4));
        for j in 0..4 {
            w_v[[3, j]] = 1.0;
        }
        let w_o = Array1::from_elem(4, 0.5);
        let params = ModelParams {
            heads: vec![HeadParams {
                w_q: Array2::zeros((16, 8)),
                w_k: Array2::zeros((16, 8)),
                w_v,
            }],
            w_o,
            version: 0,
        };
        let err = signal_knockout_error(&params, &ds).unwrap();
        assert!((err - 0.5).abs() < 0.1, "err {err}");
        assert!(err >= 0.25);
    }

    #[test]
    fn multi_norm_at_least_single_norm() {
        let (cfg, ds) = setup(0.2);
        let params = linear_readout(8, 4, 4, 1.0);
        let specs = attack::multi_norm_specs(0.3, cfg.mu_norm, 20);
        let multi = multi_norm_error_lb(&params, &ds, &specs).unwrap();
        let single = robust_error_lb(&params, &ds, &specs[1]).unwrap();
        assert!(multi >= single);
    }

    #[test]
    fn eval_csv_shape() {
        let (_, ds) = setup(0.2);
        let params = linear_readout(8, 4, 4, 1.0);
        let spec = AttackSpec::pgd_l2(0.4).for_evaluation();
        let r = evaluate(&params, &ds, &spec, 0.2).unwrap();
        let row = r.to_csv_row();
        assert_eq!(row.split(',').count(), EVAL_HEADER.split(',').count());
        assert!(row.starts_with("40,"));
        assert!(row.ends_with(",40")); // 2x 20 steps
    }

    #[test]
    fn eval_deterministic() {
        let (_, ds) = setup(0.2);
        let params = linear_readout(8, 4, 4, 1.0);
        let spec = AttackSpec::pgd_l2(0.8).for_evaluation();
        let a = robust_error_lb(&params, &ds, &spec).unwrap();
        let b = robust_error_lb(&params, &ds, &spec).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
