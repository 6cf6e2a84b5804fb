//! Flag and config-file handling. All settings are `key value` pairs; a
//! config file supplies defaults and command-line flags override them.

use std::collections::BTreeMap;
use std::path::Path;

use crate::attack::NormP;
use crate::error::{Error, Result};
use crate::model::InitMode;
use crate::sweep::{BaseSetup, SweepGrid};

#[derive(Debug, Clone, Default)]
pub struct Options {
    map: BTreeMap<String, String>,
}

/// Every key any subcommand understands. Flag `--foo-bar` maps to key
/// `foo-bar`; config files use the same keys.
pub const KNOWN_KEYS: &[&str] = &[
    "config",
    "seed",
    "out",
    "in",
    "preset",
    "workers",
    // data
    "d",
    "m",
    "sigma-p",
    "snr",
    "n-train",
    "n-test",
    // model
    "d-h",
    "d-v",
    "heads",
    "init",
    "sigma-init",
    // training
    "eta",
    "target-loss",
    "max-iters",
    "hook-stride",
    "stop-at-target",
    // attack
    "attack-p",
    "tau-rel",
    "attack-steps",
    "attack-step-rel",
    "attack-init",
    // sweep grid
    "n-values",
    "snr-values",
    "seeds-per-cell",
    // dynamics
    "tau-rels",
    // eval / diag
    "checkpoint",
    // heatmap
    "metric",
    "overlay-c",
];

impl Options {
    /// Parse `--key value` pairs. Unknown keys and missing values are
    /// config errors.
    pub fn from_flags(args: &[String]) -> Result<Options> {
        let mut map = BTreeMap::new();
        let mut it = args.iter();
        while let Some(arg) = it.next() {
            let key = arg
                .strip_prefix("--")
                .ok_or_else(|| Error::Config(format!("expected a --flag, got '{arg}'")))?;
            if !KNOWN_KEYS.contains(&key) {
                return Err(Error::Config(format!("unknown flag '--{key}'")));
            }
            let value = it
                .next()
                .ok_or_else(|| Error::Config(format!("flag '--{key}' needs a value")))?;
            map.insert(key.to_string(), value.clone());
        }
        Ok(Options { map })
    }

    /// Parse a `key = value` config file; `#` starts a comment.
    pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("config line {}: expected key = value", i + 1)))?;
            let key = key.trim();
            if !KNOWN_KEYS.contains(&key) {
                return Err(Error::Config(format!("config line {}: unknown key '{key}'", i + 1)));
            }
            map.insert(key.to_string(), value.trim().to_string());
        }
        Ok(map)
    }

    /// Load the file named by the `config` key, if any, as defaults under
    /// the current flags.
    pub fn apply_config_file(&mut self) -> Result<()> {
        let Some(path) = self.map.get("config").cloned() else {
            return Ok(());
        };
        let text = std::fs::read_to_string(Path::new(&path))
            .map_err(|e| Error::Config(format!("cannot read config file '{path}': {e}")))?;
        let file_map = Self::parse_config_text(&text)?;
        for (k, v) in file_map {
            self.map.entry(k).or_insert(v);
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.map.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Config(format!("missing required flag '--{key}'")))
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str, raw: &str) -> Result<T> {
        raw.parse()
            .map_err(|_| Error::Config(format!("bad value '{raw}' for '--{key}'")))
    }

    pub fn get_f64(&self, key: &str, default: f64) -> Result<f64> {
        match self.get(key) {
            Some(raw) => self.parsed(key, raw),
            None => Ok(default),
        }
    }

    pub fn get_bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            Some(raw) => self.parsed(key, raw),
            None => Ok(default),
        }
    }

    pub fn get_usize(&self, key: &str, default: usize) -> Result<usize> {
        match self.get(key) {
            Some(raw) => self.parsed(key, raw),
            None => Ok(default),
        }
    }

    pub fn require_u64(&self, key: &str) -> Result<u64> {
        let raw = self.require(key)?;
        self.parsed(key, raw)
    }

    pub fn require_f64(&self, key: &str) -> Result<f64> {
        let raw = self.require(key)?;
        self.parsed(key, raw)
    }

    pub fn require_usize(&self, key: &str) -> Result<usize> {
        let raw = self.require(key)?;
        self.parsed(key, raw)
    }

    pub fn get_f64_list(&self, key: &str) -> Result<Option<Vec<f64>>> {
        match self.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .split(',')
                .map(|s| self.parsed(key, s.trim()))
                .collect::<Result<Vec<f64>>>()
                .map(Some),
        }
    }

    pub fn get_usize_list(&self, key: &str) -> Result<Option<Vec<usize>>> {
        match self.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .split(',')
                .map(|s| self.parsed(key, s.trim()))
                .collect::<Result<Vec<usize>>>()
                .map(Some),
        }
    }

    /// Experiment setup from the options, defaults from `base`.
    pub fn base_setup(&self, base: BaseSetup) -> Result<BaseSetup> {
        let init = match self.get("init") {
            None => base.init,
            Some("scaled-uniform") => InitMode::ScaledUniform,
            Some("gaussian") => {
                let sigma = self.get_f64("sigma-init", 0.1)?;
                InitMode::Gaussian { sigma_h: sigma, sigma_v: sigma }
            }
            Some(other) => {
                return Err(Error::Config(format!(
                    "bad value '{other}' for '--init' (expected scaled-uniform or gaussian)"
                )))
            }
        };
        let attack_p = match self.get("attack-p") {
            None => base.attack_p,
            Some(raw) => NormP::parse(raw)?,
        };
        Ok(BaseSetup {
            d: self.get_usize("d", base.d)?,
            m: self.get_usize("m", base.m)?,
            sigma_p: self.get_f64("sigma-p", base.sigma_p)?,
            d_h: self.get_usize("d-h", base.d_h)?,
            d_v: self.get_usize("d-v", base.d_v)?,
            n_heads: self.get_usize("heads", base.n_heads)?,
            eta: self.get_f64("eta", base.eta)?,
            target_loss: self.get_f64("target-loss", base.target_loss)?,
            max_iters: self.get_usize("max-iters", base.max_iters)?,
            hook_stride: self.get_usize("hook-stride", base.hook_stride)?,
            attack_p,
            tau_rel: self.get_f64("tau-rel", base.tau_rel)?,
            attack_steps: self.get_usize("attack-steps", base.attack_steps)?,
            attack_step_rel: self.get_f64("attack-step-rel", base.attack_step_rel)?,
            n_test: self.get_usize("n-test", base.n_test)?,
            init,
            stop_at_target: self.get_bool("stop-at-target", base.stop_at_target)?,
        })
    }

    /// Sweep grid from the options, starting from a preset grid or the
    /// built-in defaults.
    pub fn sweep_grid(&self, mut grid: SweepGrid) -> Result<SweepGrid> {
        grid.base = self.base_setup(grid.base)?;
        if let Some(ns) = self.get_usize_list("n-values")? {
            grid.n_values = ns;
        }
        if let Some(snrs) = self.get_f64_list("snr-values")? {
            grid.snr_values = snrs;
        }
        grid.seeds_per_cell = self.get_usize("seeds-per-cell", grid.seeds_per_cell)?;
        Ok(grid)
    }
}
