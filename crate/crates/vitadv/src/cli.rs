//! Command-line entry point: `gen`, `train`, `sweep`, `dynamics`, `eval`,
//! `diag`, `heatmap`. Exit codes: 0 success, 2 config error, 3 numerical
//! abort.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::attack::{self, AttackSpec};
use crate::config::Options;
use crate::data::{make_signals, sample_dataset, write_dataset_csv, Dataset};
use crate::diag::{self, ReferenceFrame};
use crate::dynamics::{self, DiagHook};
use crate::error::{Error, Result};
use crate::eval::{self, EVAL_HEADER};
use crate::model::{load_checkpoint, save_checkpoint, CheckpointMeta, ModelParams};
use crate::presets::{self, Preset, PRESET_HELP};
use crate::rng::derive;
use crate::sweep::{run_sweep, write_sweep_csv, BaseSetup, SweepGrid};
use crate::train::adversarial_train;

const EVAL_TEST_STREAM_TAG: u64 = 0x54_45_53_54; // "TEST"

fn usage() -> String {
    format!(
        "\
vitadv — adversarial training laboratory for a two-layer attention model

USAGE: vitadv <command> [--flag value]...

COMMANDS
  gen       sample a synthetic dataset and dump it as CSV
            required: --seed, --out;  optional: --d --m --snr --sigma-p --n-train
  train     adversarially train one model; writes a trajectory CSV
            required: --seed;  optional: --out --checkpoint --snr --n-train
            plus data/model/attack/training flags
  sweep     train a model per (N, SNR) cell and tabulate accuracies
            required: --seed, --out;  optional: --preset --n-values --snr-values
            --seeds-per-cell --workers plus base flags
  dynamics  trajectory CSVs across perturbation radii (or a preset's variants)
            required: --seed, --out (prefix);  optional: --preset --tau-rels
            --snr --n-train plus base flags
  eval      clean error and PGD robust-error lower bound for a checkpoint
            required: --checkpoint, --seed;  optional: --out --n-test --tau-rel
            --attack-p (1|2|inf|multi) --attack-steps
  diag      dump a diagnostics record for a checkpoint as JSON
            required: --checkpoint, --seed;  optional: --out --snr --n-train
  heatmap   render a sweep CSV as an SVG grid
            required: --in, --metric, --out;  optional: --overlay-c

Any command accepts --config <file> with `key = value` lines (# comments);
flags override file values. Keys mirror flag names.

DEFAULTS (overridable): d=1024 m=16 sigma-p=sqrt(0.4) d-h=128 d-v=128 heads=1
  eta=0.1 target-loss=0.01 max-iters=5000 stop-at-target=true tau-rel=0.05
  attack-p=2 attack-steps=20 attack-step-rel=0.2 n-test=100 snr=16 n-train=22

PRESETS
{PRESET_HELP}
"
    )
}

/// Run with the given arguments (excluding the program name); returns the
/// process exit code.
pub fn cli_main(args: &[String]) -> i32 {
    if args.is_empty() || args.iter().any(|a| a == "--help" || a == "-h") {
        println!("{}", usage());
        return if args.is_empty() { 2 } else { 0 };
    }
    let command = args[0].as_str();
    let opts = match Options::from_flags(&args[1..]).and_then(|mut o| {
        o.apply_config_file()?;
        Ok(o)
    }) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}\n\n{}", usage());
            return 2;
        }
    };
    let result = match command {
        "gen" => cmd_gen(&opts),
        "train" => cmd_train(&opts),
        "sweep" => cmd_sweep(&opts),
        "dynamics" => cmd_dynamics(&opts),
        "eval" => cmd_eval(&opts),
        "diag" => cmd_diag(&opts),
        "heatmap" => cmd_heatmap(&opts),
        other => {
            eprintln!("error: unknown command '{other}'\n\n{}", usage());
            return 2;
        }
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn base_from(opts: &Options) -> Result<BaseSetup> {
    opts.base_setup(BaseSetup::default())
}

fn out_path(opts: &Options) -> Result<PathBuf> {
    Ok(PathBuf::from(opts.require("out")?))
}

fn write_or_stdout(opts: &Options, text: &str) -> Result<()> {
    match opts.get("out") {
        Some(path) => Ok(std::fs::write(path, text)?),
        None => {
            print!("{text}");
            std::io::stdout().flush()?;
            Ok(())
        }
    }
}

/// Training data for a single-model command.
fn load_train_setup(opts: &Options, base: &BaseSetup) -> Result<(Dataset, f64)> {
    let seed = opts.require_u64("seed")?;
    let snr = opts.get_f64("snr", 16.0)?;
    let n_train = opts.get_usize("n-train", 22)?;
    let cfg = base.data_config(snr)?;
    let sig = make_signals(&cfg)?;
    Ok((sample_dataset(&cfg, &sig, n_train, seed), cfg.mu_norm))
}

fn cmd_gen(opts: &Options) -> Result<()> {
    let base = base_from(opts)?;
    let (dataset, _) = load_train_setup(opts, &base)?;
    let path = out_path(opts)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(&path)?);
    write_dataset_csv(&mut f, &dataset)
}

fn cmd_train(opts: &Options) -> Result<()> {
    let base = base_from(opts)?;
    let seed = opts.require_u64("seed")?;
    let snr = opts.get_f64("snr", 16.0)?;
    let n_train = opts.get_usize("n-train", 22)?;
    let cfg = base.data_config(snr)?;
    let sig = make_signals(&cfg)?;
    let dataset = sample_dataset(&cfg, &sig, n_train, seed);
    let params0 = base.init_model(seed)?;
    let tcfg = base.train_config(cfg.mu_norm, seed);
    let mut hook = DiagHook::new(&sig, &dataset, &params0)?;
    let report = adversarial_train(&dataset, params0, &tcfg, &mut hook)?;
    if let Some(out) = opts.get("out") {
        let mut f = std::io::BufWriter::new(std::fs::File::create(out)?);
        dynamics::write_trajectory_csv(&mut f, &report.trajectory)?;
    }
    if let Some(ck) = opts.get("checkpoint") {
        let meta = CheckpointMeta {
            d: base.d,
            d_h: base.d_h,
            d_v: base.d_v,
            n_heads: base.n_heads,
            seed,
            config: serde_json::json!({
                "snr": snr, "n_train": n_train, "tau_rel": base.tau_rel,
                "sigma_p": base.sigma_p, "m": base.m,
            }),
        };
        save_checkpoint(&report.final_params, &meta, Path::new(ck))?;
    }
    eprintln!(
        "converged={} iters={} loss_robust={:.6} loss_clean={:.6}",
        report.converged,
        report.iters_used,
        report.final_train_loss_robust,
        report.final_train_loss_clean
    );
    Ok(())
}

fn with_pool<T: Send>(opts: &Options, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match opts.get("workers") {
        None => f(),
        Some(raw) => {
            let workers: usize = raw
                .parse()
                .map_err(|_| Error::Config(format!("bad value '{raw}' for '--workers'")))?;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?;
            pool.install(f)
        }
    }
}

fn cmd_sweep(opts: &Options) -> Result<()> {
    let seed = opts.require_u64("seed")?;
    let grid0 = match opts.get("preset") {
        None => SweepGrid {
            n_values: vec![2, 8, 15, 22],
            snr_values: vec![0.16, 1.0, 4.0, 16.0],
            base: BaseSetup::default(),
            seeds_per_cell: 1,
            base_seed: seed,
        },
        Some(name) => match presets::lookup(name, seed)? {
            Preset::Sweep(g) => g,
            Preset::Dynamics(_) => {
                return Err(Error::Config(format!(
                    "preset '{name}' is a dynamics preset; use the dynamics command"
                )))
            }
        },
    };
    let grid = opts.sweep_grid(grid0)?;
    let cells = with_pool(opts, || run_sweep(&grid))?;
    let path = out_path(opts)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(&path)?);
    write_sweep_csv(&mut f, &cells)
}

fn cmd_dynamics(opts: &Options) -> Result<()> {
    let seed = opts.require_u64("seed")?;
    let plan0 = match opts.get("preset") {
        Some(name) => match presets::lookup(name, seed)? {
            Preset::Dynamics(p) => p,
            Preset::Sweep(_) => {
                return Err(Error::Config(format!(
                    "preset '{name}' is a sweep preset; use the sweep command"
                )))
            }
        },
        None => {
            let tau_rels = opts
                .get_f64_list("tau-rels")?
                .ok_or_else(|| Error::Config("dynamics needs --preset or --tau-rels".into()))?;
            let snr = opts.get_f64("snr", 16.0)?;
            let n = opts.get_usize("n-train", 22)?;
            let base = BaseSetup { hook_stride: 10, ..BaseSetup::default() };
            presets::DynamicsPlan {
                base,
                variants: tau_rels
                    .iter()
                    .map(|&tau_rel| presets::DynVariant {
                        label: format!("tau{}", dynamics::tau_label(tau_rel)),
                        tau_rel,
                        snr,
                        n,
                    })
                    .collect(),
            }
        }
    };
    let plan = presets::DynamicsPlan {
        base: opts.base_setup(plan0.base)?,
        variants: plan0.variants,
    };
    let runs = with_pool(opts, || dynamics::run_plan(&plan, seed))?;
    let prefix = out_path(opts)?;
    let paths = dynamics::write_labelled_csvs(&prefix, &runs)?;
    for ((label, report), path) in runs.iter().zip(&paths) {
        eprintln!(
            "{label}: converged={} iters={} first_hit={} loss_robust={:.6} -> {}",
            report.converged,
            report.iters_used,
            report
                .first_hit_iter
                .map_or_else(|| "-".to_string(), |i| i.to_string()),
            report.final_train_loss_robust,
            path.display()
        );
    }
    Ok(())
}

/// Fresh test set for a checkpoint, matching its training data distribution
/// unless overridden by flags.
fn eval_setup(opts: &Options) -> Result<(ModelParams, Dataset, f64, BaseSetup)> {
    let ck_path = PathBuf::from(opts.require("checkpoint")?);
    let (params, meta) = load_checkpoint(&ck_path)?;
    let mut base = BaseSetup {
        d: meta.d,
        d_h: meta.d_h,
        d_v: meta.d_v,
        n_heads: meta.n_heads,
        ..BaseSetup::default()
    };
    if let Some(m) = meta.config.get("m").and_then(|v| v.as_u64()) {
        base.m = m as usize;
    }
    if let Some(s) = meta.config.get("sigma_p").and_then(|v| v.as_f64()) {
        base.sigma_p = s;
    }
    if let Some(t) = meta.config.get("tau_rel").and_then(|v| v.as_f64()) {
        base.tau_rel = t;
    }
    let snr_default = meta.config.get("snr").and_then(|v| v.as_f64()).unwrap_or(16.0);
    base = opts.base_setup(base)?;
    let seed = opts.require_u64("seed")?;
    let snr = opts.get_f64("snr", snr_default)?;
    let cfg = base.data_config(snr)?;
    let sig = make_signals(&cfg)?;
    let test = sample_dataset(&cfg, &sig, base.n_test, derive(seed, EVAL_TEST_STREAM_TAG));
    Ok((params, test, cfg.mu_norm, base))
}

fn cmd_eval(opts: &Options) -> Result<()> {
    let (params, test, mu_norm, base) = eval_setup(opts)?;
    let result = if opts.get("attack-p") == Some("multi") {
        let eps_rel = opts.get_f64("tau-rel", presets::MULTI_NORM_EPS_REL)?;
        let steps = opts.get_usize("attack-steps", 2 * base.attack_steps)?;
        let specs = attack::multi_norm_specs(eps_rel, mu_norm, steps);
        eval::EvalResult {
            n_test: test.len(),
            clean_err: eval::clean_error(&params, &test)?,
            robust_err_lb: eval::multi_norm_error_lb(&params, &test, &specs)?,
            p: "multi".into(),
            tau_rel: eps_rel,
            steps,
        }
    } else {
        let spec: AttackSpec = base.attack_spec(mu_norm).for_evaluation();
        eval::evaluate(&params, &test, &spec, base.tau_rel)?
    };
    write_or_stdout(opts, &format!("{EVAL_HEADER}\n{}\n", result.to_csv_row()))
}

fn cmd_diag(opts: &Options) -> Result<()> {
    let ck_path = PathBuf::from(opts.require("checkpoint")?);
    let (params, meta) = load_checkpoint(&ck_path)?;
    let mut base = BaseSetup {
        d: meta.d,
        d_h: meta.d_h,
        d_v: meta.d_v,
        n_heads: meta.n_heads,
        ..BaseSetup::default()
    };
    if let Some(m) = meta.config.get("m").and_then(|v| v.as_u64()) {
        base.m = m as usize;
    }
    if let Some(s) = meta.config.get("sigma_p").and_then(|v| v.as_f64()) {
        base.sigma_p = s;
    }
    let snr_default = meta.config.get("snr").and_then(|v| v.as_f64()).unwrap_or(16.0);
    let n_default = meta
        .config
        .get("n_train")
        .and_then(|v| v.as_u64())
        .unwrap_or(22) as usize;
    base = opts.base_setup(base)?;
    let seed = opts.require_u64("seed")?;
    let snr = opts.get_f64("snr", snr_default)?;
    let n_train = opts.get_usize("n-train", n_default)?;
    let cfg = base.data_config(snr)?;
    let sig = make_signals(&cfg)?;
    let dataset = sample_dataset(&cfg, &sig, n_train, seed);
    // growth baselines are relative to the checkpointed weights themselves
    let frame = ReferenceFrame::new(&sig, &dataset, &params)?;
    let mut rng = crate::rng::Stream::new(derive(seed, 0x44_49_41_47));
    let record = diag::full_record(&params, &frame, &dataset, 64, &mut rng)?;
    let json = serde_json::to_string_pretty(&record)?;
    write_or_stdout(opts, &format!("{json}\n"))
}

fn cmd_heatmap(opts: &Options) -> Result<()> {
    let in_path = PathBuf::from(opts.require("in")?);
    let metric = opts.require("metric")?;
    let out = out_path(opts)?;
    let overlay = match opts.get("overlay-c") {
        None => None,
        Some(raw) => Some(
            raw.parse::<f64>()
                .map_err(|_| Error::Config(format!("bad value '{raw}' for '--overlay-c'")))?,
        ),
    };
    let text = std::fs::read_to_string(&in_path)
        .map_err(|e| Error::Config(format!("cannot read '{}': {e}", in_path.display())))?;
    let cells = crate::sweep::read_sweep_csv(&text)?;
    crate::heatmap::emit_heatmap(&cells, metric, &out, overlay)
}
