//! Flat `key = value` configuration files.
//!
//! Grammar: one `key = value` pair per line, UTF-8. `#` starts a comment that
//! runs to end of line. Blank lines are ignored. Keys are `[a-z0-9_]+`; values
//! are trimmed and taken verbatim. Duplicate and unknown keys are errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::debias::TrainingMode;
use crate::error::{Error, Result};
use crate::evidential::{EvidenceFunction, DEFAULT_EXP_CLAMP};
use crate::hsic::{Bandwidth, KernelParams};
use crate::losses::LossWeights;
use crate::model::{Architecture, OutputKind};
use crate::nn::{LrSchedule, Sgd};

/// Parsed key/value pairs, each remembering its source line.
#[derive(Debug, Clone, Default)]
pub struct KvFile {
    path: String,
    entries: BTreeMap<String, (usize, String)>,
}

impl KvFile {
    pub fn parse(text: &str, path: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: path.to_string(),
                line: line_no,
                message,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| parse_err(format!("expected `key = value`, got `{line}`")))?;
            let key = key.trim();
            if key.is_empty()
                || !key
                    .chars()
                    .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
            {
                return Err(parse_err(format!("invalid key `{key}`")));
            }
            if entries
                .insert(key.to_string(), (line_no, value.trim().to_string()))
                .is_some()
            {
                return Err(parse_err(format!("duplicate key `{key}`")));
            }
        }
        Ok(KvFile {
            path: path.to_string(),
            entries,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Removes and parses `key`, if present.
    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, raw)) => raw.parse().map(Some).map_err(|e: T::Err| Error::Parse {
                path: self.path.clone(),
                line,
                message: format!("bad value for `{key}`: {e}"),
            }),
        }
    }

    pub fn take_or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.take(key)?.unwrap_or(default))
    }

    fn take_raw(&mut self, key: &str) -> Option<(usize, String)> {
        self.entries.remove(key)
    }

    fn bad(&self, line: usize, message: String) -> Error {
        Error::Parse {
            path: self.path.clone(),
            line,
            message,
        }
    }

    /// Errors if any key was never consumed.
    pub fn finish(self) -> Result<()> {
        if let Some((key, (line, _))) = self.entries.into_iter().next() {
            return Err(Error::Parse {
                path: self.path,
                line,
                message: format!("unknown key `{key}`"),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Evidential,
    Softmax,
}

/// Everything a training + evaluation run needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Dataset manifest; relative paths resolve against the config file.
    pub data: PathBuf,
    pub arch: Architecture,
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: Sgd,
    pub lr_schedule: LrSchedule,
    pub head: HeadKind,
    pub evidence: EvidenceFunction,
    pub use_euc: bool,
    pub use_ced: bool,
    pub ced_mode: TrainingMode,
    pub weights: LossWeights,
    pub lambda0: f64,
    pub kernel: KernelParams,
    pub coverage: f64,
    pub ece_bins: usize,
    pub selections: usize,
    /// `None` uses the median uncertainty.
    pub avu_threshold: Option<f64>,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: PathBuf::from("data/manifest.json"),
            arch: Architecture::default(),
            epochs: 80,
            batch_size: 32,
            sgd: Sgd {
                lr: 0.0025,
                momentum: 0.9,
                weight_decay: 1e-4,
                nesterov: false,
            },
            lr_schedule: LrSchedule::Constant,
            head: HeadKind::Evidential,
            evidence: EvidenceFunction::default(),
            use_euc: true,
            use_ced: true,
            ced_mode: TrainingMode::Joint,
            weights: LossWeights::default(),
            lambda0: 0.01,
            kernel: KernelParams::default(),
            coverage: 0.95,
            ece_bins: 15,
            selections: 10,
            avu_threshold: None,
            seed: 0,
        }
    }
}

fn parse_bool(kv: &KvFile, line: usize, key: &str, raw: &str) -> Result<bool> {
    match raw {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(kv.bad(line, format!("bad value for `{key}`: expected true/false"))),
    }
}

impl RunConfig {
    pub fn from_kv(mut kv: KvFile, base_dir: &Path) -> Result<Self> {
        let d = RunConfig::default();
        let data: PathBuf = kv.take_or("data", d.data.clone())?;
        let data = if data.is_relative() {
            base_dir.join(data)
        } else {
            data
        };
        let arch = Architecture {
            hidden_channels: kv.take_or("hidden_channels", d.arch.hidden_channels)?,
            kernel_width: kv.take_or("kernel_width", d.arch.kernel_width)?,
            conv_layers: kv.take_or("conv_layers", d.arch.conv_layers)?,
        };
        let bools = |kv: &mut KvFile, key: &str, default: bool| -> Result<bool> {
            match kv.take_raw(key) {
                None => Ok(default),
                Some((line, raw)) => parse_bool(kv, line, key, &raw),
            }
        };
        let nesterov = bools(&mut kv, "nesterov", d.sgd.nesterov)?;
        let use_euc = bools(&mut kv, "use_euc", d.use_euc)?;
        let use_ced = bools(&mut kv, "use_ced", d.use_ced)?;
        let center = bools(&mut kv, "hsic_center", d.kernel.center_features)?;
        let sgd = Sgd {
            lr: kv.take_or("lr", d.sgd.lr)?,
            momentum: kv.take_or("momentum", d.sgd.momentum)?,
            weight_decay: kv.take_or("weight_decay", d.sgd.weight_decay)?,
            nesterov,
        };
        let lr_step_every: usize = kv.take_or("lr_step_every", 0)?;
        let lr_gamma: f64 = kv.take_or("lr_gamma", 0.1)?;
        let lr_schedule = if lr_step_every == 0 {
            LrSchedule::Constant
        } else {
            LrSchedule::Step {
                every: lr_step_every,
                gamma: lr_gamma,
            }
        };
        let head = match kv.take_raw("head") {
            None => d.head,
            Some((_, v)) if v == "evidential" => HeadKind::Evidential,
            Some((_, v)) if v == "softmax" => HeadKind::Softmax,
            Some((line, v)) => return Err(kv.bad(line, format!("unknown head `{v}`"))),
        };
        let exp_clamp: f64 = kv.take_or("exp_clamp", DEFAULT_EXP_CLAMP)?;
        let evidence = match kv.take_raw("evidence") {
            None => d.evidence,
            Some((line, v)) => EvidenceFunction::parse(&v)
                .ok_or_else(|| kv.bad(line, format!("unknown evidence function `{v}`")))?,
        };
        let evidence = match evidence {
            EvidenceFunction::Exponential { .. } => EvidenceFunction::Exponential { clamp: exp_clamp },
            other => other,
        };
        let ced_period: usize = kv.take_or("ced_period", 1)?;
        let ced_mode = match kv.take_raw("ced_mode") {
            None => d.ced_mode,
            Some((_, v)) if v == "joint" => TrainingMode::Joint,
            Some((_, v)) if v == "alternating" => TrainingMode::Alternating { period: ced_period },
            Some((line, v)) => return Err(kv.bad(line, format!("unknown ced_mode `{v}`"))),
        };
        let bandwidth = match kv.take_raw("hsic_bandwidth") {
            None => d.kernel.bandwidth,
            Some((_, v)) if v == "median" => Bandwidth::MedianHeuristic,
            Some((line, v)) => Bandwidth::Fixed(
                v.parse()
                    .map_err(|_| kv.bad(line, format!("bad hsic_bandwidth `{v}`")))?,
            ),
        };
        let avu_threshold = match kv.take_raw("avu_threshold") {
            None => None,
            Some((_, v)) if v == "median" => None,
            Some((line, v)) => Some(
                v.parse()
                    .map_err(|_| kv.bad(line, format!("bad avu_threshold `{v}`")))?,
            ),
        };
        let cfg = RunConfig {
            data,
            arch,
            epochs: kv.take_or("epochs", d.epochs)?,
            batch_size: kv.take_or("batch_size", d.batch_size)?,
            sgd,
            lr_schedule,
            head,
            evidence,
            use_euc,
            use_ced,
            ced_mode,
            weights: LossWeights {
                w_euc: kv.take_or("w_euc", d.weights.w_euc)?,
                w_ced: kv.take_or("w_ced", d.weights.w_ced)?,
                lambda_hsic: kv.take_or("lambda_hsic", d.weights.lambda_hsic)?,
            },
            lambda0: kv.take_or("lambda0", d.lambda0)?,
            kernel: KernelParams {
                bandwidth,
                center_features: center,
            },
            coverage: kv.take_or("coverage", d.coverage)?,
            ece_bins: kv.take_or("ece_bins", d.ece_bins)?,
            selections: kv.take_or("selections", d.selections)?,
            avu_threshold,
            seed: kv.take_or("seed", d.seed)?,
        };
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let kv = KvFile::read(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_kv(kv, base)
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        Self::from_kv(KvFile::parse(text, "<config>")?, base_dir)
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.weights.validate()?;
        if self.epochs < 2 {
            return Err(Error::invalid("epochs", "must be >= 2"));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("batch_size", "must be >= 2"));
        }
        if !(self.sgd.lr > 0.0) {
            return Err(Error::invalid("lr", "must be positive"));
        }
        if !(self.lambda0 > 0.0 && self.lambda0 < 1.0) {
            return Err(Error::invalid("lambda0", "must lie in (0, 1)"));
        }
        if !(self.coverage > 0.0 && self.coverage <= 1.0) {
            return Err(Error::invalid("coverage", "must lie in (0, 1]"));
        }
        if self.ece_bins == 0 || self.selections == 0 {
            return Err(Error::invalid("ece_bins/selections", "must be positive"));
        }
        if let TrainingMode::Alternating { period: 0 } = self.ced_mode {
            return Err(Error::invalid("ced_period", "must be >= 1"));
        }
        if self.head == HeadKind::Softmax && (self.use_euc || self.use_ced) {
            return Err(Error::invalid(
                "head",
                "softmax baseline cannot use the evidential losses (set use_euc = false, use_ced = false)",
            ));
        }
        Ok(())
    }

    pub fn output_kind(&self) -> OutputKind {
        match self.head {
            HeadKind::Evidential => OutputKind::Evidential {
                evidence: self.evidence,
            },
            HeadKind::Softmax => OutputKind::Softmax,
        }
    }

    /// Canonical `key = value` rendering; parsing it back yields `self`.
    pub fn to_kv_string(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("data", self.data.display().to_string());
        put("hidden_channels", self.arch.hidden_channels.to_string());
        put("kernel_width", self.arch.kernel_width.to_string());
        put("conv_layers", self.arch.conv_layers.to_string());
        put("epochs", self.epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        put("lr", self.sgd.lr.to_string());
        put("momentum", self.sgd.momentum.to_string());
        put("weight_decay", self.sgd.weight_decay.to_string());
        put("nesterov", self.sgd.nesterov.to_string());
        match self.lr_schedule {
            LrSchedule::Constant => put("lr_step_every", "0".into()),
            LrSchedule::Step { every, gamma } => {
                put("lr_step_every", every.to_string());
                put("lr_gamma", gamma.to_string());
            }
        }
        put(
            "head",
            match self.head {
                HeadKind::Evidential => "evidential",
                HeadKind::Softmax => "softmax",
            }
            .into(),
        );
        put("evidence", self.evidence.name().into());
        if let EvidenceFunction::Exponential { clamp } = self.evidence {
            put("exp_clamp", clamp.to_string());
        }
        put("use_euc", self.use_euc.to_string());
        put("use_ced", self.use_ced.to_string());
        match self.ced_mode {
            TrainingMode::Joint => put("ced_mode", "joint".into()),
            TrainingMode::Alternating { period } => {
                put("ced_mode", "alternating".into());
                put("ced_period", period.to_string());
            }
        }
        put("w_euc", self.weights.w_euc.to_string());
        put("w_ced", self.weights.w_ced.to_string());
        put("lambda_hsic", self.weights.lambda_hsic.to_string());
        put("lambda0", self.lambda0.to_string());
        put(
            "hsic_bandwidth",
            match self.kernel.bandwidth {
                Bandwidth::MedianHeuristic => "median".into(),
                Bandwidth::Fixed(s) => s.to_string(),
            },
        );
        put("hsic_center", self.kernel.center_features.to_string());
        put("coverage", self.coverage.to_string());
        put("ece_bins", self.ece_bins.to_string());
        put("selections", self.selections.to_string());
        put(
            "avu_threshold",
            self.avu_threshold
                .map_or_else(|| "median".to_string(), |t| t.to_string()),
        );
        put("seed", self.seed.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_defaults() {
        let text = "# header\nepochs = 12 # trailing\n\nuse_ced = false\nced_mode = alternating\nced_period = 3\n";
        let cfg = RunConfig::parse(text, Path::new("/tmp")).unwrap();
        assert_eq!(cfg.epochs, 12);
        assert!(!cfg.use_ced);
        assert_eq!(cfg.ced_mode, TrainingMode::Alternating { period: 3 });
        assert_eq!(cfg.weights, LossWeights::default());
        assert_eq!(cfg.lambda0, 0.01);
        assert_eq!(cfg.data, PathBuf::from("/tmp/data/manifest.json"));
    }

    #[test]
    fn defaults_match_reported_hyperparameters() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.weights.w_euc, 1.0);
        assert_eq!(cfg.weights.w_ced, 0.1);
        assert_eq!(cfg.weights.lambda_hsic, 1.0);
        assert_eq!(cfg.lambda0, 0.01);
        assert_eq!(cfg.sgd.momentum, 0.9);
        assert_eq!(cfg.sgd.weight_decay, 1e-4);
        assert_eq!(cfg.coverage, 0.95);
        assert_eq!(cfg.ece_bins, 15);
        assert_eq!(cfg.selections, 10);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = RunConfig::parse("epochs = 3\nbogus = 1\n", Path::new(".")).unwrap_err();
        assert!(err.to_string().contains(":2:"), "{err}");
        let err = RunConfig::parse("epochs = three\n", Path::new(".")).unwrap_err();
        assert!(err.to_string().contains(":1:"), "{err}");
        assert!(RunConfig::parse("epochs 3\n", Path::new(".")).is_err());
        assert!(RunConfig::parse("epochs = 3\nepochs = 4\n", Path::new(".")).is_err());
    }

    #[test]
    fn canonical_rendering_round_trips() {
        let mut cfg = RunConfig {
            data: PathBuf::from("/abs/manifest.json"),
            ced_mode: TrainingMode::Alternating { period: 2 },
            avu_threshold: Some(0.3),
            lr_schedule: LrSchedule::Step {
                every: 20,
                gamma: 0.5,
            },
            ..RunConfig::default()
        };
        cfg.kernel.bandwidth = Bandwidth::Fixed(0.75);
        let back = RunConfig::parse(&cfg.to_kv_string(), Path::new("/elsewhere")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn softmax_with_evidential_losses_rejected() {
        assert!(RunConfig::parse("head = softmax\n", Path::new(".")).is_err());
        let ok = RunConfig::parse("head = softmax\nuse_euc = false\nuse_ced = false\n", Path::new("."));
        assert!(ok.is_ok());
    }
}
