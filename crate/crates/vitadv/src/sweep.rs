//! Phase-diagram sweeps over the (N, SNR) plane: one adversarially trained
//! model per cell and seed, evaluated on a fresh test set.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{AttackInit, AttackSpec, NormP};
use crate::data::{make_signals, sample_dataset, DataConfig, Dataset};
use crate::diag::{self, RegimeThresholds};
use crate::error::{Error, Result};
use crate::eval;
use crate::model::{init_params, InitMode, ModelParams};
use crate::rng::{derive, derive_multi, Stream};
use crate::train::{adversarial_train, NoopHook, StopLoss, TrainConfig, TrainReport};

const INIT_STREAM_TAG: u64 = 0x49_4e_49_54; // "INIT"
const TEST_STREAM_TAG: u64 = 0x54_45_53_54; // "TEST"

/// Everything about one experiment except N, SNR, and the seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaseSetup {
    pub d: usize,
    pub m: usize,
    pub sigma_p: f64,
    pub d_h: usize,
    pub d_v: usize,
    pub n_heads: usize,
    pub eta: f64,
    pub target_loss: f64,
    pub max_iters: usize,
    pub hook_stride: usize,
    pub attack_p: NormP,
    pub tau_rel: f64,
    pub attack_steps: usize,
    /// Step size as a fraction of tau.
    pub attack_step_rel: f64,
    pub n_test: usize,
    pub init: InitMode,
    /// When false, training always runs the full `max_iters` budget and only
    /// reports when the target loss was first reached.
    pub stop_at_target: bool,
}

impl Default for BaseSetup {
    /// The synthetic-benchmark defaults: d = 1024, M = 16, noise variance
    /// 0.4, d_h = d_v = 128, lr 0.1, stop at robust loss 0.01 within 5000
    /// iterations, l2 attack at tau = 0.05|mu| with 20 steps of 0.2*tau.
    fn default() -> Self {
        BaseSetup {
            d: 1024,
            m: 16,
            sigma_p: 0.4f64.sqrt(),
            d_h: 128,
            d_v: 128,
            n_heads: 1,
            eta: 0.1,
            target_loss: 0.01,
            max_iters: 5000,
            hook_stride: 1,
            attack_p: NormP::L2,
            tau_rel: 0.05,
            attack_steps: 20,
            attack_step_rel: 0.2,
            n_test: 100,
            init: InitMode::ScaledUniform,
            stop_at_target: true,
        }
    }
}

impl BaseSetup {
    pub fn data_config(&self, snr: f64) -> Result<DataConfig> {
        DataConfig::from_snr(self.d, self.m, snr, self.sigma_p)
    }

    pub fn attack_spec(&self, mu_norm: f64) -> AttackSpec {
        let tau = self.tau_rel * mu_norm;
        AttackSpec {
            p: self.attack_p,
            tau,
            steps: self.attack_steps,
            step_size: self.attack_step_rel * tau,
            init: AttackInit::Clean,
            track_best: false,
        }
    }

    pub fn train_config(&self, mu_norm: f64, seed: u64) -> TrainConfig {
        TrainConfig {
            eta: self.eta,
            max_iters: self.max_iters,
            target_loss: self.target_loss,
            loss_mode_for_stop: StopLoss::Robust,
            attack: self.attack_spec(mu_norm),
            seed,
            hook_stride: self.hook_stride,
            stop_at_target: self.stop_at_target,
        }
    }

    pub fn init_model(&self, seed: u64) -> Result<ModelParams> {
        let mut rng = Stream::new(derive(seed, INIT_STREAM_TAG));
        init_params(self.d, self.d_h, self.d_v, self.n_heads, self.init, &mut rng)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_test == 0 {
            return Err(Error::Config("n_test must be >= 1".into()));
        }
        if !(self.tau_rel >= 0.0) {
            return Err(Error::Config("tau_rel must be >= 0".into()));
        }
        Ok(())
    }
}

/// One trained model: the report plus the data it was trained on.
pub struct TrainedCell {
    pub report: TrainReport,
    pub train_set: Dataset,
    pub mu_norm: f64,
}

/// Train one model for (n, snr) under the base setup, with all randomness
/// rooted at `seed`.
pub fn train_cell(base: &BaseSetup, n: usize, snr: f64, seed: u64) -> Result<TrainedCell> {
    base.validate()?;
    let cfg = base.data_config(snr)?;
    let sig = make_signals(&cfg)?;
    let train_set = sample_dataset(&cfg, &sig, n, seed);
    let params0 = base.init_model(seed)?;
    let tcfg = base.train_config(cfg.mu_norm, seed);
    let report = adversarial_train(&train_set, params0, &tcfg, &mut NoopHook)?;
    Ok(TrainedCell { report, train_set, mu_norm: cfg.mu_norm })
}

#[derive(Debug, Clone)]
pub struct SweepGrid {
    pub n_values: Vec<usize>,
    pub snr_values: Vec<f64>,
    pub base: BaseSetup,
    pub seeds_per_cell: usize,
    pub base_seed: u64,
}

impl SweepGrid {
    pub fn validate(&self) -> Result<()> {
        if self.n_values.is_empty() || self.snr_values.is_empty() {
            return Err(Error::Config("sweep axes must be nonempty".into()));
        }
        if self.n_values.iter().any(|&n| n == 0) {
            return Err(Error::Config("all N values must be >= 1".into()));
        }
        if self.snr_values.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("all SNR values must be > 0".into()));
        }
        if self.seeds_per_cell == 0 {
            return Err(Error::Config("seeds_per_cell must be >= 1".into()));
        }
        self.base.validate()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CellResult {
    pub n: usize,
    pub snr: f64,
    pub seed: u64,
    pub converged: bool,
    pub iters: usize,
    pub clean_acc: f64,
    pub robust_acc: f64,
    pub regime: String,
    pub wall_ms: u64,
    pub status: String,
}

pub const SWEEP_HEADER: &str =
    "n,snr,seed,converged,iters,clean_acc,robust_acc,regime,wall_ms,status";

impl CellResult {
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.n,
            self.snr,
            self.seed,
            self.converged,
            self.iters,
            self.clean_acc,
            self.robust_acc,
            self.regime,
            self.wall_ms,
            self.status
        )
    }
}

fn run_one_cell(grid: &SweepGrid, n: usize, snr: f64, seed: u64) -> Result<CellResult> {
    let started = Instant::now();
    let cell = train_cell(&grid.base, n, snr, seed)?;
    let params = &cell.report.final_params;

    let cfg = grid.base.data_config(snr)?;
    let sig = make_signals(&cfg)?;
    let test_set = sample_dataset(&cfg, &sig, grid.base.n_test, derive(seed, TEST_STREAM_TAG));
    let eval_spec = grid.base.attack_spec(cell.mu_norm).for_evaluation();
    let clean_err = eval::clean_error(params, &test_set)?;
    let robust_err = eval::robust_error_lb(params, &test_set, &eval_spec)?;

    // Classify on the signal-query row: noise-query rows concentrate far
    // more slowly (their logits scale with the token-norm ratio), which
    // would push every converged cell toward the uniform label.
    let entropy = diag::signal_attention_entropy(params, &cell.train_set)?;
    let regime = diag::regime_classify(
        cell.report.converged,
        entropy,
        grid.base.m,
        RegimeThresholds::default(),
    );
    Ok(CellResult {
        n,
        snr,
        seed,
        converged: cell.report.converged,
        iters: cell.report.iters_used,
        clean_acc: 1.0 - clean_err,
        robust_acc: 1.0 - robust_err,
        regime: regime.to_string(),
        wall_ms: started.elapsed().as_millis() as u64,
        status: "ok".into(),
    })
}

/// Run the full grid. Each (cell, rep) job derives its own seed from the
/// grid axes' indices, so results do not depend on execution order or pool
/// width. A failed cell becomes a row with its error in the status column.
pub fn run_sweep(grid: &SweepGrid) -> Result<Vec<CellResult>> {
    grid.validate()?;
    let mut jobs = Vec::new();
    for (ni, &n) in grid.n_values.iter().enumerate() {
        for (si, &snr) in grid.snr_values.iter().enumerate() {
            for rep in 0..grid.seeds_per_cell {
                let seed = derive_multi(grid.base_seed, &[ni as u64, si as u64, rep as u64]);
                jobs.push((n, snr, seed));
            }
        }
    }
    let mut cells: Vec<CellResult> = jobs
        .par_iter()
        .map(|&(n, snr, seed)| match run_one_cell(grid, n, snr, seed) {
            Ok(c) => c,
            Err(e) => CellResult {
                n,
                snr,
                seed,
                converged: false,
                iters: 0,
                clean_acc: 0.0,
                robust_acc: 0.0,
                regime: "failed".into(),
                wall_ms: 0,
                status: e.to_string().replace([',', '\n'], ";"),
            },
        })
        .collect();
    cells.sort_by(|a, b| {
        a.n.cmp(&b.n)
            .then(a.snr.total_cmp(&b.snr))
            .then(a.seed.cmp(&b.seed))
    });
    Ok(cells)
}

pub fn write_sweep_csv<W: std::io::Write>(w: &mut W, cells: &[CellResult]) -> Result<()> {
    writeln!(w, "{SWEEP_HEADER}")?;
    for c in cells {
        writeln!(w, "{}", c.to_csv_row())?;
    }
    Ok(())
}

/// Parse a sweep CSV back into rows (used by the heatmap command).
pub fn read_sweep_csv(text: &str) -> Result<Vec<CellResult>> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Config("empty sweep CSV".into()))?;
    if header.trim() != SWEEP_HEADER {
        return Err(Error::Config(format!("unexpected sweep CSV header: {header}")));
    }
    let mut out = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 10 {
            return Err(Error::Config(format!(
                "sweep CSV line {}: expected 10 fields, got {}",
                ln + 2,
                f.len()
            )));
        }
        let parse_err = |what: &str| Error::Config(format!("sweep CSV line {}: bad {what}", ln + 2));
        out.push(CellResult {
            n: f[0].parse().map_err(|_| parse_err("n"))?,
            snr: f[1].parse().map_err(|_| parse_err("snr"))?,
            seed: f[2].parse().map_err(|_| parse_err("seed"))?,
            converged: f[3].parse().map_err(|_| parse_err("converged"))?,
            iters: f[4].parse().map_err(|_| parse_err("iters"))?,
            clean_acc: f[5].parse().map_err(|_| parse_err("clean_acc"))?,
            robust_acc: f[6].parse().map_err(|_| parse_err("robust_acc"))?,
            regime: f[7].to_string(),
            wall_ms: f[8].parse().map_err(|_| parse_err("wall_ms"))?,
            status: f[9].to_string(),
        });
    }
    Ok(out)
}
