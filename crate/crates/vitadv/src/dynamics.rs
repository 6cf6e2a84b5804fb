//! Training-dynamics runs: one trajectory per perturbation radius with the
//! full diagnostics columns filled in.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::data::{make_signals, sample_dataset, Dataset, SignalPair};
use crate::diag::{self, ReferenceFrame};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::rng::{derive, Stream};
use crate::sweep::BaseSetup;
use crate::train::{adversarial_train, TrainHook, TrainReport, TrajectoryRecord, TRAJECTORY_HEADER};

const DIAG_STREAM_TAG: u64 = 0x44_49_41_47; // "DIAG"

/// Hook that fills the diagnostics columns of each trajectory record.
pub struct DiagHook {
    frame: ReferenceFrame,
    dataset: Dataset,
    /// Noise Q/K pairs sampled per record; 0 enumerates all pairs.
    pub n_pairs: usize,
    rng_root: Stream,
}

impl DiagHook {
    pub fn new(sig: &SignalPair, dataset: &Dataset, params0: &ModelParams) -> Result<Self> {
        Ok(DiagHook {
            frame: ReferenceFrame::new(sig, dataset, params0)?,
            dataset: dataset.clone(),
            n_pairs: 64,
            rng_root: Stream::new(derive(dataset.seed, DIAG_STREAM_TAG)),
        })
    }
}

impl TrainHook for DiagHook {
    fn on_record(&mut self, params: &ModelParams, record: &mut TrajectoryRecord) {
        let mut rng = self.rng_root.substream(record.iter as u64);
        let Ok(rec) = diag::full_record(params, &self.frame, &self.dataset, self.n_pairs, &mut rng)
        else {
            return; // leave the optional columns blank on failure
        };
        record.attn_entropy = Some(rec.attn_entropy);
        record.attn_entropy_signal = Some(rec.attn_entropy_signal);
        record.wv_fro = Some(rec.wv_fro);
        record.wvwo_l2 = Some(rec.wvwo_l2);
        record.v_plus = Some(rec.v.v_plus);
        record.v_minus = Some(rec.v.v_minus);
        let noise_mean = if rec.v.v_noise.is_empty() {
            0.0
        } else {
            rec.v.v_noise.iter().sum::<f64>() / rec.v.v_noise.len() as f64
        };
        record.v_noise_mean = Some(noise_mean);
        record.qk_sig_mean = Some(0.5 * (rec.qk.qk_plus + rec.qk.qk_minus));
        record.qk_noise_mean = Some(rec.qk.qk_noise_mean_abs);
        record.lambda_min = Some(rec.lambda_sig_min);
    }
}

/// One dynamics run at a fixed tau, with diagnostics.
pub struct DynamicsRun {
    pub tau_rel: f64,
    pub report: TrainReport,
}

/// Train once per tau_rel value under the same data and initialization; the
/// runs differ only in the attack radius.
pub fn run_dynamics(
    base: &BaseSetup,
    snr: f64,
    n: usize,
    seed: u64,
    tau_rels: &[f64],
) -> Result<Vec<DynamicsRun>> {
    if tau_rels.is_empty() {
        return Err(Error::Config("tau_rel list must be nonempty".into()));
    }
    base.validate()?;
    let cfg = base.data_config(snr)?;
    let sig = make_signals(&cfg)?;
    let dataset = sample_dataset(&cfg, &sig, n, seed);
    let params0 = base.init_model(seed)?;
    let mut runs = Vec::new();
    for &tau_rel in tau_rels {
        let run_base = BaseSetup { tau_rel, ..base.clone() };
        let tcfg = run_base.train_config(cfg.mu_norm, seed);
        let mut hook = DiagHook::new(&sig, &dataset, &params0)?;
        let report = adversarial_train(&dataset, params0.clone(), &tcfg, &mut hook)?;
        runs.push(DynamicsRun { tau_rel, report });
    }
    Ok(runs)
}

/// Run every variant of a dynamics plan; returns (label, report) pairs.
/// Variants sharing (n, snr) see identical data and initialization.
pub fn run_plan(
    plan: &crate::presets::DynamicsPlan,
    seed: u64,
) -> Result<Vec<(String, TrainReport)>> {
    if plan.variants.is_empty() {
        return Err(Error::Config("dynamics plan has no variants".into()));
    }
    plan.base.validate()?;
    let mut out = Vec::new();
    for v in &plan.variants {
        let base = BaseSetup { tau_rel: v.tau_rel, ..plan.base.clone() };
        let cfg = base.data_config(v.snr)?;
        let sig = make_signals(&cfg)?;
        let dataset = sample_dataset(&cfg, &sig, v.n, seed);
        let params0 = base.init_model(seed)?;
        let tcfg = base.train_config(cfg.mu_norm, seed);
        let mut hook = DiagHook::new(&sig, &dataset, &params0)?;
        let report = adversarial_train(&dataset, params0, &tcfg, &mut hook)?;
        out.push((v.label.clone(), report));
    }
    Ok(out)
}

/// Write one trajectory CSV per labelled report as `<prefix>_<label>.csv`.
pub fn write_labelled_csvs(
    prefix: &Path,
    runs: &[(String, TrainReport)],
) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for (label, report) in runs {
        let name = match prefix.file_name() {
            Some(stem) => format!("{}_{label}.csv", stem.to_string_lossy()),
            None => format!("{label}.csv"),
        };
        let path = prefix.with_file_name(name);
        let mut f = std::fs::File::create(&path)?;
        write_trajectory_csv(&mut f, &report.trajectory)?;
        paths.push(path);
    }
    Ok(paths)
}

pub fn write_trajectory_csv<W: Write>(w: &mut W, records: &[TrajectoryRecord]) -> Result<()> {
    writeln!(w, "{TRAJECTORY_HEADER}")?;
    for r in records {
        writeln!(w, "{}", r.to_csv_row())?;
    }
    Ok(())
}

/// Compact tau label for file names: 0.02 -> "0p02".
pub fn tau_label(tau_rel: f64) -> String {
    format!("{tau_rel}").replace('.', "p")
}

/// Write one trajectory CSV per run as `<prefix>_tau<label>.csv`; returns
/// the paths written.
pub fn write_dynamics_csvs(prefix: &Path, runs: &[DynamicsRun]) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for run in runs {
        let name = match prefix.file_name() {
            Some(stem) => format!("{}_tau{}.csv", stem.to_string_lossy(), tau_label(run.tau_rel)),
            None => format!("tau{}.csv", tau_label(run.tau_rel)),
        };
        let path = prefix.with_file_name(name);
        let mut f = std::fs::File::create(&path)?;
        write_trajectory_csv(&mut f, &run.report.trajectory)?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_base() -> BaseSetup {
        BaseSetup {
            d: 12,
            m: 3,
            sigma_p: 0.3,
            d_h: 4,
            d_v: 4,
            eta: 0.2,
            target_loss: 0.2,
            max_iters: 30,
            hook_stride: 5,
            n_test: 5,
            ..BaseSetup::default()
        }
    }

    #[test]
    fn single_tau_single_run() {
        let runs = run_dynamics(&tiny_base(), 3.0, 3, 5, &[0.05]).unwrap();
        assert_eq!(runs.len(), 1);
        assert!(!runs[0].report.trajectory.is_empty());
    }

    #[test]
    fn diagnostics_columns_filled() {
        let runs = run_dynamics(&tiny_base(), 3.0, 3, 5, &[0.05]).unwrap();
        for rec in &runs[0].report.trajectory {
            assert!(rec.attn_entropy.is_some());
            assert!(rec.wv_fro.is_some());
            assert!(rec.v_plus.is_some());
            assert!(rec.lambda_min.is_some());
            let row = rec.to_csv_row();
            assert_eq!(row.split(',').count(), TRAJECTORY_HEADER.split(',').count());
            assert!(!row.split(',').any(str::is_empty));
        }
    }

    #[test]
    fn runs_share_data_and_init() {
        // tau = 0 run and any other run start from the same loss
        let runs = run_dynamics(&tiny_base(), 3.0, 3, 5, &[0.0, 0.1]).unwrap();
        let a = &runs[0].report.trajectory[0];
        let b = &runs[1].report.trajectory[0];
        assert_eq!(a.loss_clean.to_bits(), b.loss_clean.to_bits());
        assert_eq!(
            a.wv_fro.unwrap().to_bits(),
            b.wv_fro.unwrap().to_bits()
        );
    }

    #[test]
    fn empty_tau_list_rejected() {
        assert!(run_dynamics(&tiny_base(), 3.0, 3, 5, &[]).is_err());
    }

    #[test]
    fn csv_files_written() {
        let dir = tempfile::tempdir().unwrap();
        let runs = run_dynamics(&tiny_base(), 3.0, 2, 5, &[0.02, 0.1]).unwrap();
        let prefix = dir.path().join("dyn");
        let paths = write_dynamics_csvs(&prefix, &runs).unwrap();
        assert_eq!(paths.len(), 2);
        assert!(paths[0].to_string_lossy().ends_with("dyn_tau0p02.csv"));
        let text = std::fs::read_to_string(&paths[0]).unwrap();
        assert!(text.starts_with(TRAJECTORY_HEADER));
        assert!(text.lines().count() >= 2);
    }

    #[test]
    fn plan_runs_all_variants() {
        use crate::presets::{DynVariant, DynamicsPlan};
        let plan = DynamicsPlan {
            base: tiny_base(),
            variants: vec![
                DynVariant { label: "a".into(), tau_rel: 0.0, snr: 3.0, n: 2 },
                DynVariant { label: "b".into(), tau_rel: 0.1, snr: 3.0, n: 2 },
            ],
        };
        let runs = run_plan(&plan, 7).unwrap();
        assert_eq!(runs.len(), 2);
        assert_eq!(runs[0].0, "a");
        let dir = tempfile::tempdir().unwrap();
        let paths = write_labelled_csvs(&dir.path().join("fig"), &runs).unwrap();
        assert!(paths[1].to_string_lossy().ends_with("fig_b.csv"));
    }

    #[test]
    fn trajectory_deterministic() {
        let base = tiny_base();
        let a = run_dynamics(&base, 3.0, 3, 5, &[0.1]).unwrap();
        let b = run_dynamics(&base, 3.0, 3, 5, &[0.1]).unwrap();
        let rows_a: Vec<String> =
            a[0].report.trajectory.iter().map(|r| r.to_csv_row()).collect();
        let rows_b: Vec<String> =
            b[0].report.trajectory.iter().map(|r| r.to_csv_row()).collect();
        assert_eq!(rows_a, rows_b);
    }
}
