//! Named experiment configurations, so each canonical experiment is a
//! single command.

use crate::error::{Error, Result};
use crate::sweep::{BaseSetup, SweepGrid};

/// A dynamics run variant: one trajectory per entry.
#[derive(Debug, Clone)]
pub struct DynVariant {
    pub label: String,
    pub tau_rel: f64,
    pub snr: f64,
    pub n: usize,
}

#[derive(Debug, Clone)]
pub struct DynamicsPlan {
    pub base: BaseSetup,
    pub variants: Vec<DynVariant>,
}

#[derive(Debug, Clone)]
pub enum Preset {
    Sweep(SweepGrid),
    Dynamics(DynamicsPlan),
}

/// Geometric grid from lo to hi inclusive.
fn geom(lo: f64, hi: f64, k: usize) -> Vec<f64> {
    let ratio = (hi / lo).powf(1.0 / (k - 1) as f64);
    (0..k)
        .map(|i| {
            let v = lo * ratio.powi(i as i32);
            // keep tick labels short
            (v * 100.0).round() / 100.0
        })
        .collect()
}

/// Full benchmark phase-diagram grid: N = 2..22 step 2, SNR log-spaced
/// over [0.16, 16], one seed per cell. `base_seed` comes from the CLI.
pub fn phase_grid(base_seed: u64) -> SweepGrid {
    SweepGrid {
        n_values: (1..=11).map(|i| 2 * i).collect(),
        snr_values: geom(0.16, 16.0, 10),
        base: BaseSetup::default(),
        seeds_per_cell: 1,
        base_seed,
    }
}

/// Scaled-down 4x4 phase-diagram grid used as the smoke test.
pub fn smoke_grid(base_seed: u64) -> SweepGrid {
    SweepGrid {
        n_values: vec![2, 8, 15, 22],
        snr_values: vec![0.16, 1.0, 4.0, 16.0],
        base: BaseSetup::default(),
        seeds_per_cell: 1,
        base_seed,
    }
}

/// Dynamics comparison across perturbation radii: N = 25, SNR = 16, M = 2,
/// d_h = d_v = 512, sigma_p = 0.05, tau/|mu| in {0.02, 0.1, 0.5}.
///
/// Runs a fixed 160-iteration horizon at eta = 0.01 without early stopping
/// so the three radii are compared at the same point of training; the report
/// still records when (if ever) each run first reached the target loss. The
/// smaller step size slows attention alignment enough that the radii
/// separate cleanly within the horizon.
pub fn regimes_plan() -> DynamicsPlan {
    let base = BaseSetup {
        m: 2,
        sigma_p: 0.05,
        d_h: 512,
        d_v: 512,
        eta: 0.01,
        max_iters: 160,
        hook_stride: 10,
        attack_steps: 10,
        stop_at_target: false,
        ..BaseSetup::default()
    };
    let variants = [0.02, 0.1, 0.5]
        .iter()
        .map(|&tau_rel| DynVariant {
            label: format!("tau{}", format!("{tau_rel}").replace('.', "p")),
            tau_rel,
            snr: 16.0,
            n: 25,
        })
        .collect();
    DynamicsPlan { base, variants }
}

/// Loss/accuracy-vs-iteration curves at fixed N = 22 across SNR values.
pub fn fixed_n_plan() -> DynamicsPlan {
    let base = BaseSetup { hook_stride: 10, max_iters: 300, ..BaseSetup::default() };
    let variants = [0.5, 1.0, 2.0, 4.0, 8.0, 16.0]
        .iter()
        .map(|&snr| DynVariant {
            label: format!("snr{}", format!("{snr}").replace('.', "p")),
            tau_rel: base.tau_rel,
            snr,
            n: 22,
        })
        .collect();
    DynamicsPlan { base, variants }
}

/// Loss/accuracy-vs-iteration curves at fixed SNR = 12 across sample counts.
pub fn fixed_snr_plan() -> DynamicsPlan {
    let base = BaseSetup { hook_stride: 10, max_iters: 300, ..BaseSetup::default() };
    let variants = [2usize, 6, 12, 22]
        .iter()
        .map(|&n| DynVariant {
            label: format!("n{n}"),
            tau_rel: base.tau_rel,
            snr: 12.0,
            n,
        })
        .collect();
    DynamicsPlan { base, variants }
}

/// Multi-norm evaluation base strength (tau1, tau2, tauinf) =
/// (eps*20, eps, eps/30) with eps = 0.05.
pub const MULTI_NORM_EPS_REL: f64 = 0.05;

pub fn lookup(name: &str, base_seed: u64) -> Result<Preset> {
    Ok(match name {
        "phase-grid" => Preset::Sweep(phase_grid(base_seed)),
        "smoke-grid" => Preset::Sweep(smoke_grid(base_seed)),
        "tau-regimes" => Preset::Dynamics(regimes_plan()),
        "dynamics-fix-n" => Preset::Dynamics(fixed_n_plan()),
        "dynamics-fix-snr" => Preset::Dynamics(fixed_snr_plan()),
        other => {
            return Err(Error::Config(format!(
                "unknown preset '{other}' (available: phase-grid, smoke-grid, tau-regimes, dynamics-fix-n, dynamics-fix-snr)"
            )))
        }
    })
}

/// One line per preset for --help output.
pub const PRESET_HELP: &str = "\
  phase-grid         11x10 (N, SNR) phase-diagram sweep: N = 2..22, SNR = 0.16..16,
                     d = 1024, M = 16, noise variance 0.4, l2 PGD tau = 0.05|mu|
  smoke-grid         4x4 subset of phase-grid (N in {2,8,15,22}, SNR in {0.16,1,4,16})
  tau-regimes        dynamics at N = 25, SNR = 16, M = 2, d_h = d_v = 512,
                     sigma_p = 0.05, tau/|mu| in {0.02, 0.1, 0.5}
  dynamics-fix-n    dynamics at fixed N = 22 across SNR values
  dynamics-fix-snr  dynamics at fixed SNR = 12 across N values";

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phase_grid_shape() {
        let g = phase_grid(1);
        assert_eq!(g.n_values, vec![2, 4, 6, 8, 10, 12, 14, 16, 18, 20, 22]);
        assert_eq!(g.snr_values.len(), 10);
        assert_eq!(g.snr_values[0], 0.16);
        assert_eq!(*g.snr_values.last().unwrap(), 16.0);
        for w in g.snr_values.windows(2) {
            assert!(w[1] > w[0]);
        }
        g.validate().unwrap();
    }

    #[test]
    fn smoke_grid_matches_reduced_plane() {
        let g = smoke_grid(2);
        assert_eq!(g.n_values, vec![2, 8, 15, 22]);
        assert_eq!(g.snr_values, vec![0.16, 1.0, 4.0, 16.0]);
        assert_eq!(g.base.d, 1024);
        assert_eq!(g.base.m, 16);
        assert!((g.base.sigma_p * g.base.sigma_p - 0.4).abs() < 1e-12);
        assert_eq!(g.base.tau_rel, 0.05);
        assert_eq!(g.base.max_iters, 5000);
        assert_eq!(g.base.target_loss, 0.01);
    }

    #[test]
    fn regimes_plan_settings() {
        let p = regimes_plan();
        assert_eq!(p.base.m, 2);
        assert_eq!(p.base.d_h, 512);
        assert_eq!(p.base.d_v, 512);
        assert_eq!(p.base.sigma_p, 0.05);
        assert_eq!(p.base.eta, 0.01);
        assert_eq!(p.base.max_iters, 160);
        assert!(!p.base.stop_at_target);
        assert_eq!(p.variants.len(), 3);
        assert_eq!(p.variants[0].tau_rel, 0.02);
        assert_eq!(p.variants[2].tau_rel, 0.5);
        assert!(p.variants.iter().all(|v| v.snr == 16.0 && v.n == 25));
    }

    #[test]
    fn fixed_axis_plans() {
        let fixn = fixed_n_plan();
        assert!(fixn.variants.iter().all(|v| v.n == 22));
        let fixsnr = fixed_snr_plan();
        assert!(fixsnr.variants.iter().all(|v| v.snr == 12.0));
    }

    #[test]
    fn lookup_rejects_unknown() {
        assert!(lookup("nope", 1).is_err());
        assert!(matches!(lookup("phase-grid", 1), Ok(Preset::Sweep(_))));
        assert!(matches!(lookup("tau-regimes", 1), Ok(Preset::Dynamics(_))));
    }

    #[test]
    fn variant_labels_unique() {
        for plan in [regimes_plan(), fixed_n_plan(), fixed_snr_plan()] {
            let mut labels: Vec<&str> = plan.variants.iter().map(|v| v.label.as_str()).collect();
            let before = labels.len();
            labels.sort_unstable();
            labels.dedup();
            assert_eq!(labels.len(), before);
        }
    }
}
