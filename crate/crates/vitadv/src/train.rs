//! Full-batch gradient-descent adversarial training: attack every sample at
//! the current parameters, average the per-sample gradients at the attacked
//! inputs, and step W_Q, W_K, W_V (w_O stays fixed).

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{pgd_attack, AttackSpec};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{self, Grads, HeadGrads, HeadParams, ModelParams};
use crate::rng::Stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopLoss {
    Clean,
    Robust,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub eta: f64,
    pub max_iters: usize,
    /// Stop once the stopping-mode training loss drops to this value.
    pub target_loss: f64,
    pub loss_mode_for_stop: StopLoss,
    pub attack: AttackSpec,
    pub seed: u64,
    /// Hooks (and trajectory records) fire every this many iterations.
    pub hook_stride: usize,
    /// When false, training runs the full iteration budget and only records
    /// when the target was first reached (useful for dynamics trajectories).
    pub stop_at_target: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) {
            return Err(Error::Config(format!("eta must be > 0, got {}", self.eta)));
        }
        if !(self.target_loss > 0.0) {
            return Err(Error::Config(format!(
                "target_loss must be > 0, got {}",
                self.target_loss
            )));
        }
        self.attack.validate()
    }
}

/// One row of the trajectory CSV. The first three columns come from the
/// trainer; the rest are filled by a diagnostics hook when installed.
#[derive(Debug, Clone, Default)]
pub struct TrajectoryRecord {
    pub iter: usize,
    pub loss_clean: f64,
    pub loss_robust: f64,
    pub attn_entropy: Option<f64>,
    pub attn_entropy_signal: Option<f64>,
    pub wv_fro: Option<f64>,
    pub wvwo_l2: Option<f64>,
    pub v_plus: Option<f64>,
    pub v_minus: Option<f64>,
    pub v_noise_mean: Option<f64>,
    pub qk_sig_mean: Option<f64>,
    pub qk_noise_mean: Option<f64>,
    pub lambda_min: Option<f64>,
}

pub const TRAJECTORY_HEADER: &str =
    "iter,loss_clean,loss_robust,attn_entropy,attn_entropy_signal,wv_fro,wvwo_l2,V_plus,V_minus,V_noise_mean,qk_sig_mean,qk_noise_mean,lambda_min";

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

impl TrajectoryRecord {
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.iter,
            self.loss_clean,
            self.loss_robust,
            opt(self.attn_entropy),
            opt(self.attn_entropy_signal),
            opt(self.wv_fro),
            opt(self.wvwo_l2),
            opt(self.v_plus),
            opt(self.v_minus),
            opt(self.v_noise_mean),
            opt(self.qk_sig_mean),
            opt(self.qk_noise_mean),
            opt(self.lambda_min),
        )
    }
}

/// Per-iteration observer. Receives a read-only snapshot; fills the optional
/// diagnostics columns of the record.
pub trait TrainHook {
    fn on_record(&mut self, params: &ModelParams, record: &mut TrajectoryRecord);
}

/// Hook that records nothing beyond the trainer's own columns.
pub struct NoopHook;

impl TrainHook for NoopHook {
    fn on_record(&mut self, _params: &ModelParams, _record: &mut TrajectoryRecord) {}
}

#[derive(Debug)]
pub struct TrainReport {
    pub final_params: ModelParams,
    pub iters_used: usize,
    pub final_train_loss_robust: f64,
    pub final_train_loss_clean: f64,
    pub converged: bool,
    /// First iteration at which the stopping-mode loss reached the target,
    /// whether or not training stopped there.
    pub first_hit_iter: Option<usize>,
    pub trajectory: Vec<TrajectoryRecord>,
}

/// Mean loss over the dataset; with an attack each sample is attacked fresh
/// at the given parameters.
pub fn batch_loss(params: &ModelParams, dataset: &Dataset, attack: Option<&AttackSpec>) -> Result<f64> {
    let n = dataset.len();
    if n == 0 {
        return Err(Error::Config("empty dataset".into()));
    }
    // Attack streams live in a different substream family than the data
    // generation streams derived from the same seed.
    let root = Stream::new(crate::rng::derive(dataset.seed, ATTACK_STREAM_TAG));
    let losses: Vec<f64> = dataset
        .samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| -> Result<f64> {
            match attack {
                None => {
                    let (f, _) = model::forward(params, &s.x)?;
                    Ok(model::loss(f, s.y))
                }
                Some(spec) => {
                    let mut rng = root.substream(i as u64);
                    Ok(pgd_attack(params, &s.x, s.y, spec, &mut rng)?.loss_achieved)
                }
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / n as f64)
}

const ATTACK_STREAM_TAG: u64 = 0x41_54_54_41_43_4b; // "ATTACK"

fn zero_grads_like(params: &ModelParams, m: usize) -> Grads {
    Grads {
        heads: params
            .heads
            .iter()
            .map(|h| HeadGrads {
                g_wq: Array2::zeros(h.w_q.raw_dim()),
                g_wk: Array2::zeros(h.w_k.raw_dim()),
                g_wv: Array2::zeros(h.w_v.raw_dim()),
            })
            .collect(),
        g_x: Array2::zeros((m, params.d())),
    }
}

/// New parameter snapshot after one descent step. w_O is carried over
/// bit-identically; the version counter advances.
pub fn gd_step(params: &ModelParams, mean_grads: &Grads, eta: f64) -> ModelParams {
    let heads = params
        .heads
        .iter()
        .zip(&mean_grads.heads)
        .map(|(h, g)| HeadParams {
            w_q: &h.w_q - &(eta * &g.g_wq),
            w_k: &h.w_k - &(eta * &g.g_wk),
            w_v: &h.w_v - &(eta * &g.g_wv),
        })
        .collect();
    ModelParams {
        heads,
        w_o: params.w_o.clone(),
        version: params.version + 1,
    }
}

struct IterStats {
    clean_loss: f64,
    robust_loss: f64,
    grads: Grads,
}

/// Attack every sample, then compute the mean gradient at the attacked
/// inputs. Per-sample work is parallel; the reduction order is fixed by
/// sample index, so the result is independent of worker count.
fn attack_and_grad(params: &ModelParams, dataset: &Dataset, spec: &AttackSpec) -> Result<IterStats> {
    let n = dataset.len() as f64;
    let root = Stream::new(crate::rng::derive(dataset.seed, ATTACK_STREAM_TAG));
    let per_sample: Vec<(f64, f64, Grads)> = dataset
        .samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| -> Result<(f64, f64, Grads)> {
            let (f_clean, _) = model::forward(params, &s.x)?;
            let clean = model::loss(f_clean, s.y);
            let mut rng = root.substream(i as u64);
            let adv = pgd_attack(params, &s.x, s.y, spec, &mut rng)?;
            let (_, cache) = model::forward(params, &adv.x_tilde)?;
            let grads = model::backward(params, &adv.x_tilde, s.y, &cache)?;
            Ok((clean, adv.loss_achieved, grads))
        })
        .collect::<Result<Vec<_>>>()?;
    let m = dataset.samples[0].x.nrows();
    let mut acc = zero_grads_like(params, m);
    let mut clean_sum = 0.0;
    let mut robust_sum = 0.0;
    for (clean, robust, g) in per_sample {
        clean_sum += clean;
        robust_sum += robust;
        for (a, b) in acc.heads.iter_mut().zip(&g.heads) {
            a.g_wq += &b.g_wq;
            a.g_wk += &b.g_wk;
            a.g_wv += &b.g_wv;
        }
    }
    for h in &mut acc.heads {
        h.g_wq /= n;
        h.g_wk /= n;
        h.g_wv /= n;
    }
    Ok(IterStats {
        clean_loss: clean_sum / n,
        robust_loss: robust_sum / n,
        grads: acc,
    })
}

/// Gradient-descent adversarial training. Stops when the stopping-mode loss
/// reaches the target or the iteration budget runs out; exhausting the
/// budget reports converged = false rather than erroring.
pub fn adversarial_train(
    dataset: &Dataset,
    params0: ModelParams,
    cfg: &TrainConfig,
    hook: &mut dyn TrainHook,
) -> Result<TrainReport> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("empty dataset".into()));
    }
    let stride = cfg.hook_stride.max(1);
    let mut params = params0;
    let mut trajectory = Vec::new();
    let mut last = (f64::NAN, f64::NAN);
    let mut first_hit: Option<usize> = None;
    for iter in 0..=cfg.max_iters {
        let stats = attack_and_grad(&params, dataset, &cfg.attack)?;
        if !stats.robust_loss.is_finite() || !stats.clean_loss.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite training loss at iteration {iter}"
            )));
        }
        last = (stats.clean_loss, stats.robust_loss);
        let stop_loss = match cfg.loss_mode_for_stop {
            StopLoss::Clean => stats.clean_loss,
            StopLoss::Robust => stats.robust_loss,
        };
        if first_hit.is_none() && stop_loss <= cfg.target_loss {
            first_hit = Some(iter);
        }
        let stops_now = cfg.stop_at_target && stop_loss <= cfg.target_loss;
        let stopping = stops_now || iter == cfg.max_iters;
        // record on the stride and always at the final iteration
        if iter % stride == 0 || stopping {
            let mut rec = TrajectoryRecord {
                iter,
                loss_clean: stats.clean_loss,
                loss_robust: stats.robust_loss,
                ..Default::default()
            };
            hook.on_record(&params, &mut rec);
            trajectory.push(rec);
        }
        if stops_now {
            return Ok(TrainReport {
                final_params: params,
                iters_used: iter,
                final_train_loss_robust: stats.robust_loss,
                final_train_loss_clean: stats.clean_loss,
                converged: true,
                first_hit_iter: first_hit,
                trajectory,
            });
        }
        if iter == cfg.max_iters {
            break;
        }
        params = gd_step(&params, &stats.grads, cfg.eta);
        if !params.all_finite() {
            return Err(Error::Numerical(format!(
                "non-finite parameters after iteration {iter}"
            )));
        }
    }
    Ok(TrainReport {
        final_params: params,
        iters_used: cfg.max_iters,
        final_train_loss_robust: last.1,
        final_train_loss_clean: last.0,
        converged: first_hit.is_some(),
        first_hit_iter: first_hit,
        trajectory,
    })
}
