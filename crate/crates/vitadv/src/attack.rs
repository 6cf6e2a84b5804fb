//! Per-token lp projected-gradient attacks: the inner maximization of
//! adversarial training and the evaluation-time threat model.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, ModelParams};
use crate::rng::Stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormP {
    L1,
    L2,
    LInf,
}

impl NormP {
    pub fn parse(s: &str) -> Result<NormP> {
        match s {
            "1" => Ok(NormP::L1),
            "2" => Ok(NormP::L2),
            "inf" | "Inf" | "INF" => Ok(NormP::LInf),
            other => Err(Error::Config(format!("unknown norm '{other}' (expected 1, 2 or inf)"))),
        }
    }

    pub fn norm(&self, v: ArrayView1<f64>) -> f64 {
        match self {
            NormP::L1 => v.iter().map(|x| x.abs()).sum(),
            NormP::L2 => v.dot(&v).sqrt(),
            NormP::LInf => v.iter().fold(0.0, |a, &x| a.max(x.abs())),
        }
    }
}

impl std::fmt::Display for NormP {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NormP::L1 => write!(f, "1"),
            NormP::L2 => write!(f, "2"),
            NormP::LInf => write!(f, "inf"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttackInit {
    Clean,
    Random,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AttackSpec {
    pub p: NormP,
    /// Per-token budget.
    pub tau: f64,
    pub steps: usize,
    /// Absolute step size (typically 0.2 * tau).
    pub step_size: f64,
    pub init: AttackInit,
    /// Keep the highest-loss iterate instead of the final one.
    pub track_best: bool,
}

impl AttackSpec {
    /// The training-time attack of the synthetic experiments: 20 steps of
    /// step 0.2*tau, clean init, final iterate.
    pub fn pgd_l2(tau: f64) -> AttackSpec {
        AttackSpec {
            p: NormP::L2,
            tau,
            steps: 20,
            step_size: 0.2 * tau,
            init: AttackInit::Clean,
            track_best: false,
        }
    }

    /// Same attack strengthened for evaluation: best iterate, doubled steps.
    pub fn for_evaluation(&self) -> AttackSpec {
        AttackSpec {
            steps: self.steps * 2,
            track_best: true,
            ..*self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tau < 0.0 {
            return Err(Error::Config(format!("tau must be >= 0, got {}", self.tau)));
        }
        if self.tau > 0.0 && self.steps > 0 && !(self.step_size > 0.0) {
            return Err(Error::Config(format!(
                "step_size must be > 0, got {}",
                self.step_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AdvExample {
    pub x_tilde: Array2<f64>,
    pub loss_achieved: f64,
    pub iterations_run: usize,
}

/// Euclidean projection of one token perturbation onto the lp ball of
/// radius tau. l2 rescales radially, linf clamps, l1 uses the sorted
/// soft-threshold projection.
pub fn project_token(delta: &mut Array1<f64>, p: NormP, tau: f64) {
    match p {
        NormP::L2 => {
            let n = delta.dot(delta).sqrt();
            if n > tau {
                let s = tau / n;
                delta.mapv_inplace(|v| v * s);
            }
        }
        NormP::LInf => {
            delta.mapv_inplace(|v| v.clamp(-tau, tau));
        }
        NormP::L1 => {
            let l1: f64 = delta.iter().map(|v| v.abs()).sum();
            if l1 <= tau {
                return;
            }
            // Sorted-threshold projection onto the simplex of |delta|.
            let mut mags: Vec<f64> = delta.iter().map(|v| v.abs()).collect();
            mags.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let mut cum = 0.0;
            let mut theta = 0.0;
            for (j, &m) in mags.iter().enumerate() {
                cum += m;
                let t = (cum - tau) / (j as f64 + 1.0);
                if t >= m {
                    break;
                }
                theta = t;
            }
            delta.mapv_inplace(|v| v.signum() * (v.abs() - theta).max(0.0));
        }
    }
}

/// Steepest-ascent direction of unit lp-dual norm.
pub fn ascent_direction(grad: ArrayView1<f64>, p: NormP) -> Array1<f64> {
    match p {
        NormP::L2 => {
            let n = grad.dot(&grad).sqrt();
            if n < 1e-30 {
                Array1::zeros(grad.len())
            } else {
                grad.mapv(|g| g / n)
            }
        }
        NormP::LInf => grad.mapv(|g| {
            if g > 0.0 {
                1.0
            } else if g < 0.0 {
                -1.0
            } else {
                0.0
            }
        }),
        NormP::L1 => {
            // Unit mass on the largest-|g| coordinate, ties to lowest index.
            let mut best = 0usize;
            let mut best_mag = 0.0;
            for (i, &g) in grad.iter().enumerate() {
                if g.abs() > best_mag {
                    best_mag = g.abs();
                    best = i;
                }
            }
            let mut out = Array1::zeros(grad.len());
            if best_mag > 0.0 {
                out[best] = grad[best].signum();
            }
            out
        }
    }
}

fn random_init_delta(m: usize, d: usize, spec: &AttackSpec, rng: &mut Stream) -> Array2<f64> {
    let mut delta = Array2::zeros((m, d));
    for mut row in delta.rows_mut() {
        match spec.p {
            NormP::LInf => {
                for v in row.iter_mut() {
                    *v = rng.gen_range(-spec.tau..=spec.tau);
                }
            }
            _ => {
                // Gaussian direction, radius tau * u^(1/d) for l2;
                // projected afterwards for l1.
                let mut dir: Array1<f64> =
                    Array1::from_shape_fn(d, |_| rng.sample(StandardNormal));
                let n = dir.dot(&dir).sqrt();
                if n > 0.0 {
                    let r = spec.tau * rng.gen::<f64>().powf(1.0 / d as f64);
                    dir.mapv_inplace(|v| v * r / n);
                }
                let mut owned = dir;
                project_token(&mut owned, spec.p, spec.tau);
                row.assign(&owned);
            }
        }
    }
    delta
}

/// Projected gradient ascent on the loss, per token, inside the lp ball of
/// radius tau around each clean token.
pub fn pgd_attack(
    params: &ModelParams,
    x: &Array2<f64>,
    y: f64,
    spec: &AttackSpec,
    rng: &mut Stream,
) -> Result<AdvExample> {
    spec.validate()?;
    let (m, d) = x.dim();
    let (clean_f, _) = model::forward(params, x)?;
    let clean_loss = model::loss(clean_f, y);
    if spec.tau == 0.0 {
        return Ok(AdvExample {
            x_tilde: x.clone(),
            loss_achieved: clean_loss,
            iterations_run: 0,
        });
    }
    let mut delta = match spec.init {
        AttackInit::Clean => Array2::zeros((m, d)),
        AttackInit::Random => random_init_delta(m, d, spec, rng),
    };
    let mut x_tilde = x + &delta;
    let mut best_x = x.clone();
    let mut best_loss = clean_loss;
    let mut final_loss = clean_loss;
    for _ in 0..spec.steps {
        let (f, cache) = model::forward(params, &x_tilde)?;
        let loss = model::loss(f, y);
        if spec.track_best && loss > best_loss {
            best_loss = loss;
            best_x = x_tilde.clone();
        }
        let g = model::input_grad(params, &x_tilde, y, &cache)?;
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite attack gradient".into()));
        }
        for (mut drow, grow) in delta.rows_mut().into_iter().zip(g.rows()) {
            let dir = ascent_direction(grow, spec.p);
            drow.zip_mut_with(&dir, |dv, &s| *dv += spec.step_size * s);
            let mut owned = drow.to_owned();
            project_token(&mut owned, spec.p, spec.tau);
            drow.assign(&owned);
        }
        x_tilde = x + &delta;
        let (f_new, _) = model::forward(params, &x_tilde)?;
        final_loss = model::loss(f_new, y);
    }
    if spec.track_best && final_loss > best_loss {
        best_loss = final_loss;
        best_x = x_tilde.clone();
    }
    let (x_out, loss_out) = if spec.track_best {
        (best_x, best_loss)
    } else {
        (x_tilde, final_loss)
    };
    Ok(AdvExample {
        x_tilde: x_out,
        loss_achieved: loss_out,
        iterations_run: spec.steps,
    })
}

/// Exact worst case under l2 on a uniform-attention model. With
/// f = (1/M) sum_j x_j^T v and v = sum_h W_V w_O, the maximizer shifts every
/// token by -y * tau * v/|v|, dropping the margin by exactly tau*|v|.
pub fn linear_worst_case(
    params: &ModelParams,
    x: &Array2<f64>,
    y: f64,
    tau: f64,
) -> Result<AdvExample> {
    if !params.is_uniform_attention(1e-12) {
        return Err(Error::Contract(
            "linear_worst_case requires W_Q W_K^T = 0 on every head".into(),
        ));
    }
    let v = params.value_vector();
    let v_norm = v.dot(&v).sqrt();
    let m = x.nrows() as f64;
    let f_clean = x.dot(&v).sum() / m;
    if v_norm == 0.0 {
        return Ok(AdvExample {
            x_tilde: x.clone(),
            loss_achieved: model::loss(f_clean, y),
            iterations_run: 0,
        });
    }
    let shift = v.mapv(|vi| -y * tau * vi / v_norm);
    let mut x_tilde = x.clone();
    for mut row in x_tilde.rows_mut() {
        row += &shift;
    }
    let margin = y * f_clean - tau * v_norm;
    Ok(AdvExample {
        x_tilde,
        loss_achieved: model::logistic_loss(margin),
        iterations_run: 0,
    })
}

/// Run several attacks independently and keep the strongest.
pub fn multi_norm_attack(
    params: &ModelParams,
    x: &Array2<f64>,
    y: f64,
    specs: &[AttackSpec],
    rng: &mut Stream,
) -> Result<AdvExample> {
    if specs.is_empty() {
        return Err(Error::Config("multi_norm_attack needs at least one spec".into()));
    }
    let mut best: Option<AdvExample> = None;
    for (i, spec) in specs.iter().enumerate() {
        let mut sub = rng.substream(i as u64);
        let adv = pgd_attack(params, x, y, spec, &mut sub)?;
        match &best {
            Some(b) if b.loss_achieved >= adv.loss_achieved => {}
            _ => best = Some(adv),
        }
    }
    Ok(best.unwrap())
}

/// The multi-norm budget triple (tau1, tau2, tauinf) = (eps*20, eps, eps/30)
/// relative to the signal norm, as evaluation specs.
pub fn multi_norm_specs(eps_rel: f64, mu_norm: f64, steps: usize) -> Vec<AttackSpec> {
    let mk = |p, tau_rel: f64| {
        let tau = tau_rel * mu_norm;
        AttackSpec {
            p,
            tau,
            steps,
            step_size: 0.2 * tau,
            init: AttackInit::Clean,
            track_best: true,
        }
    };
    vec![
        mk(NormP::L1, eps_rel * 20.0),
        mk(NormP::L2, eps_rel),
        mk(NormP::LInf, eps_rel / 30.0),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;
    use crate::testutil::{random_params, random_tokens};

    #[test]
    fn interior_point_unchanged() {
        for p in [NormP::L1, NormP::L2, NormP::LInf] {
            let mut d = Array1::from(vec![0.1, -0.2, 0.05]);
            let before = d.clone();
            project_token(&mut d, p, 1.0);
            assert_eq!(d, before);
        }
    }

    #[test]
    fn l2_radial_rescale() {
        let mut d = Array1::from(vec![3.0, 4.0]);
        project_token(&mut d, NormP::L2, 1.0);
        assert!((d[0] - 0.6).abs() < 1e-15);
        assert!((d[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn l1_projection_matches_grid_search_2d() {
        // Exhaustive oracle: nearest point on a fine grid of the l1 ball.
        let tau = 1.0;
        let cases = [[2.0, 0.5], [-1.5, 1.5], [0.3, -3.0], [5.0, 0.0]];
        for case in cases {
            let mut d = Array1::from(case.to_vec());
            project_token(&mut d, NormP::L1, tau);
            let l1: f64 = d.iter().map(|v| v.abs()).sum();
            assert!((l1 - tau).abs() < 1e-9, "projection lands on the boundary");
            // grid search over the boundary of the l1 ball
            let mut best = f64::INFINITY;
            let steps = 400_000;
            for i in 0..=steps {
                let t = -tau + 2.0 * tau * i as f64 / steps as f64;
                for u in [tau - t.abs(), t.abs() - tau] {
                    let dist = (case[0] - t).powi(2) + (case[1] - u).powi(2);
                    best = best.min(dist);
                }
            }
            let ours = (case[0] - d[0]).powi(2) + (case[1] - d[1]).powi(2);
            assert!((ours - best).abs() < 1e-6, "case {case:?}: {ours} vs {best}");
        }
    }

    #[test]
    fn projection_idempotent() {
        let mut rng = Stream::new(1);
        for p in [NormP::L1, NormP::L2, NormP::LInf] {
            for _ in 0..50 {
                let mut d: Array1<f64> =
                    Array1::from_shape_fn(6, |_| rng.sample::<f64, _>(StandardNormal) * 3.0);
                project_token(&mut d, p, 0.7);
                let once = d.clone();
                project_token(&mut d, p, 0.7);
                // clamping is exactly idempotent; the rescaling norms can
                // re-trigger at the last-ulp level
                let tol = if p == NormP::LInf { 0.0 } else { 1e-12 };
                for (a, b) in once.iter().zip(d.iter()) {
                    assert!((a - b).abs() <= tol);
                }
            }
        }
    }

    #[test]
    fn ascent_directions() {
        let g = Array1::from(vec![3.0, 4.0]);
        let d2 = ascent_direction(g.view(), NormP::L2);
        assert!((d2[0] - 0.6).abs() < 1e-15 && (d2[1] - 0.8).abs() < 1e-15);
        let g = Array1::from(vec![-2.0, 0.5]);
        let dinf = ascent_direction(g.view(), NormP::LInf);
        assert_eq!(dinf.as_slice().unwrap(), &[-1.0, 1.0]);
        let zero = Array1::from(vec![0.0, 0.0]);
        for p in [NormP::L1, NormP::L2, NormP::LInf] {
            assert!(ascent_direction(zero.view(), p).iter().all(|&v| v == 0.0));
        }
        let g = Array1::from(vec![1.0, -5.0, 5.0]);
        let d1 = ascent_direction(g.view(), NormP::L1);
        assert_eq!(d1.as_slice().unwrap(), &[0.0, -1.0, 0.0]); // tie -> lowest index
    }

    #[test]
    fn tau_zero_is_identity() {
        let mut rng = Stream::new(2);
        let params = random_params(6, 3, 3, 1, &mut rng);
        let x = random_tokens(3, 6, &mut rng);
        let spec = AttackSpec::pgd_l2(0.0);
        let adv = pgd_attack(&params, &x, 1.0, &spec, &mut rng).unwrap();
        assert_eq!(adv.x_tilde, x);
        let (f, _) = model::forward(&params, &x).unwrap();
        assert_eq!(adv.loss_achieved, model::loss(f, 1.0));
    }

    #[test]
    fn zero_steps_clean_init_identity() {
        let mut rng = Stream::new(3);
        let params = random_params(6, 3, 3, 1, &mut rng);
        let x = random_tokens(3, 6, &mut rng);
        let spec = AttackSpec {
            steps: 0,
            ..AttackSpec::pgd_l2(0.5)
        };
        let adv = pgd_attack(&params, &x, 1.0, &spec, &mut rng).unwrap();
        assert_eq!(adv.x_tilde, x);
    }

    #[test]
    fn ball_feasibility() {
        let mut rng = Stream::new(4);
        let params = random_params(6, 3, 3, 2, &mut rng);
        let x = random_tokens(4, 6, &mut rng);
        for p in [NormP::L1, NormP::L2, NormP::LInf] {
            for init in [AttackInit::Clean, AttackInit::Random] {
                let tau = 0.4;
                let spec = AttackSpec {
                    p,
                    tau,
                    steps: 10,
                    step_size: 0.2 * tau,
                    init,
                    track_best: true,
                };
                let adv = pgd_attack(&params, &x, -1.0, &spec, &mut rng).unwrap();
                for (r0, r1) in x.rows().into_iter().zip(adv.x_tilde.rows()) {
                    let diff = &r1.to_owned() - &r0.to_owned();
                    assert!(p.norm(diff.view()) <= tau + 1e-9);
                }
            }
        }
    }

    #[test]
    fn track_best_never_below_clean() {
        let mut rng = Stream::new(5);
        let params = random_params(6, 3, 3, 1, &mut rng);
        let x = random_tokens(3, 6, &mut rng);
        let spec = AttackSpec {
            track_best: true,
            ..AttackSpec::pgd_l2(0.3)
        };
        let (f, _) = model::forward(&params, &x).unwrap();
        let clean = model::loss(f, 1.0);
        let adv = pgd_attack(&params, &x, 1.0, &spec, &mut rng).unwrap();
        assert!(adv.loss_achieved >= clean);
    }

    #[test]
    fn linear_worst_case_margin_shift() {
        let mut rng = Stream::new(6);
        let mut params = random_params(6, 3, 3, 1, &mut rng);
        params.heads[0].w_q.fill(0.0);
        params.heads[0].w_k.fill(0.0);
        let x = random_tokens(2, 6, &mut rng);
        let y = 1.0;
        let tau = 0.7;
        let adv = linear_worst_case(&params, &x, y, tau).unwrap();
        let v = params.value_vector();
        let v_norm = v.dot(&v).sqrt();
        let (f_clean, _) = model::forward(&params, &x).unwrap();
        let (f_adv, _) = model::forward(&params, &adv.x_tilde).unwrap();
        assert!((y * f_adv - (y * f_clean - tau * v_norm)).abs() < 1e-12);
        assert!((adv.loss_achieved - model::loss(f_adv, y)).abs() < 1e-12);
    }

    #[test]
    fn linear_worst_case_zero_value_vector() {
        let mut rng = Stream::new(7);
        let mut params = random_params(6, 3, 3, 1, &mut rng);
        params.heads[0].w_q.fill(0.0);
        params.heads[0].w_k.fill(0.0);
        params.heads[0].w_v.fill(0.0);
        let x = random_tokens(2, 6, &mut rng);
        let adv = linear_worst_case(&params, &x, 1.0, 0.5).unwrap();
        assert_eq!(adv.x_tilde, x);
    }

    #[test]
    fn linear_worst_case_dominates_random_ball_points() {
        let mut rng = Stream::new(8);
        let mut params = random_params(6, 3, 3, 1, &mut rng);
        params.heads[0].w_q.fill(0.0);
        params.heads[0].w_k.fill(0.0);
        let x = random_tokens(2, 6, &mut rng);
        let y = -1.0;
        let tau = 0.5;
        let wc = linear_worst_case(&params, &x, y, tau).unwrap();
        for _ in 0..10_000 {
            let mut xt = x.clone();
            for mut row in xt.rows_mut() {
                let mut dir: Array1<f64> =
                    Array1::from_shape_fn(6, |_| rng.sample(StandardNormal));
                let n = dir.dot(&dir).sqrt();
                let r = tau * rng.gen::<f64>().powf(1.0 / 6.0);
                dir.mapv_inplace(|v| v * r / n);
                row += &dir;
            }
            let (f, _) = model::forward(&params, &xt).unwrap();
            assert!(model::loss(f, y) <= wc.loss_achieved + 1e-12);
        }
    }

    #[test]
    fn pgd_reaches_linear_worst_case() {
        let mut rng = Stream::new(9);
        let mut params = random_params(6, 3, 3, 1, &mut rng);
        params.heads[0].w_q.fill(0.0);
        params.heads[0].w_k.fill(0.0);
        let x = random_tokens(2, 6, &mut rng);
        let y = 1.0;
        let tau = 0.5;
        let wc = linear_worst_case(&params, &x, y, tau).unwrap();
        let spec = AttackSpec {
            track_best: true,
            ..AttackSpec::pgd_l2(tau)
        };
        let adv = pgd_attack(&params, &x, y, &spec, &mut rng).unwrap();
        assert!((wc.loss_achieved - adv.loss_achieved).abs() < 1e-6);
        assert!(adv.loss_achieved <= wc.loss_achieved + 1e-12);
    }

    #[test]
    fn multi_norm_takes_max() {
        let mut rng = Stream::new(10);
        let params = random_params(6, 3, 3, 1, &mut rng);
        let x = random_tokens(3, 6, &mut rng);
        let specs = multi_norm_specs(0.05, 2.0, 10);
        let combined = multi_norm_attack(&params, &x, 1.0, &specs, &mut rng).unwrap();
        for (i, s) in specs.iter().enumerate() {
            let mut sub = rng.substream(i as u64);
            let single = pgd_attack(&params, &x, 1.0, s, &mut sub).unwrap();
            assert!(combined.loss_achieved >= single.loss_achieved - 1e-12);
        }
        assert!(multi_norm_attack(&params, &x, 1.0, &[], &mut rng).is_err());
    }
}
