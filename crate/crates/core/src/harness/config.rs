//! Flat key=value run configuration covering the model and the
//! training protocol; unknown keys are rejected.

use crate::error::{Error, Result};
use crate::model::{apply_config_key, config_entries, ModelConfig};

/// Training protocol.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_low: f64,
    pub lr_peak: f64,
    pub lr_final: f64,
    /// Fraction of steps spent ramping up to the peak rate.
    pub warm_frac: f64,
    pub seed: u64,
    /// Training series are randomly cropped to this length each epoch.
    pub crop_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            lr_low: 2e-4,
            lr_peak: 5e-4,
            lr_final: 2e-5,
            warm_frac: 0.3,
            seed: 0,
            crop_len: 60,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.warm_frac > 0.0 && self.warm_frac < 1.0) {
            return Err(Error::Config(format!(
                "warm_frac {} not in (0,1)",
                self.warm_frac
            )));
        }
        for (name, v) in [
            ("lr_low", self.lr_low),
            ("lr_peak", self.lr_peak),
            ("lr_final", self.lr_final),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{} must be positive, got {}", name, v)));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.crop_len == 0 {
            return Err(Error::Config("crop_len must be >= 1".into()));
        }
        Ok(())
    }
}

fn apply_train_key(tc: &mut TrainConfig, key: &str, val: &str, line: usize) -> Result<bool> {
    let bad = |what: &str| Error::Parse {
        line,
        field: 2,
        msg: format!("invalid {} value '{}'", what, val),
    };
    match key {
        "epochs" => tc.epochs = val.parse().map_err(|_| bad(key))?,
        "batch_size" => tc.batch_size = val.parse().map_err(|_| bad(key))?,
        "lr_low" => tc.lr_low = val.parse().map_err(|_| bad(key))?,
        "lr_peak" => tc.lr_peak = val.parse().map_err(|_| bad(key))?,
        "lr_final" => tc.lr_final = val.parse().map_err(|_| bad(key))?,
        "warm_frac" => tc.warm_frac = val.parse().map_err(|_| bad(key))?,
        "seed" => tc.seed = val.parse().map_err(|_| bad(key))?,
        "crop_len" => tc.crop_len = val.parse().map_err(|_| bad(key))?,
        _ => return Ok(false),
    }
    Ok(true)
}

/// All key=value lines describing a run, model keys first.
pub fn run_config_entries(cfg: &ModelConfig, tc: &TrainConfig) -> Vec<(String, String)> {
    let mut entries = config_entries(cfg);
    entries.extend([
        ("epochs".to_string(), tc.epochs.to_string()),
        ("batch_size".to_string(), tc.batch_size.to_string()),
        ("lr_low".to_string(), tc.lr_low.to_string()),
        ("lr_peak".to_string(), tc.lr_peak.to_string()),
        ("lr_final".to_string(), tc.lr_final.to_string()),
        ("warm_frac".to_string(), tc.warm_frac.to_string()),
        ("seed".to_string(), tc.seed.to_string()),
        ("crop_len".to_string(), tc.crop_len.to_string()),
    ]);
    entries
}

/// Parse a flat config file over defaults. Lines are `key=value`; blank
/// lines and `#` comments are skipped; unknown keys are errors.
pub fn parse_run_config(text: &str) -> Result<(ModelConfig, TrainConfig)> {
    let mut cfg = ModelConfig::default();
    let mut tc = TrainConfig::default();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, val) = line.split_once('=').ok_or(Error::Parse {
            line: ln + 1,
            field: 1,
            msg: format!("expected key=value, got '{}'", line),
        })?;
        let (key, val) = (key.trim(), val.trim());
        if !apply_config_key(&mut cfg, key, val, ln + 1)?
            && !apply_train_key(&mut tc, key, val, ln + 1)?
        {
            return Err(Error::Parse {
                line: ln + 1,
                field: 1,
                msg: format!("unknown config key '{}'", key),
            });
        }
    }
    cfg.validate()?;
    tc.validate()?;
    Ok((cfg, tc))
}
