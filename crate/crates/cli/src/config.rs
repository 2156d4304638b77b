//! INI-style experiment configuration: `[section]` headers with `key = value`
//! lines, `#`/`;` comments, unknown keys rejected, `--set section.key=value`
//! overrides applied after the file parse.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use sprout_core::attack::{AttackLoss, AttackSpec};
use sprout_core::data::{load_cifar_bin, load_idx, synth_blobs, Dataset};
use sprout_core::model::Architecture;
use sprout_core::train::{Init, TrainConfig};
use sprout_core::vicinity::VicinityMode;

use crate::CliError;

const SECTIONS: &[(&str, &[&str])] = &[
    (
        "dataset",
        &[
            "kind", "images", "labels", "path", "max_n", "classes", "per_class", "dim",
            "separation", "sigma", "seed",
        ],
    ),
    ("model", &["arch", "width", "checkpoint", "checkpoints"]),
    (
        "train",
        &[
            "mode", "alpha", "a", "delta", "lr_theta", "lr_beta", "momentum", "epochs", "batch",
            "seed", "init", "beta_warmup", "ga", "mixup", "dirichlet",
        ],
    ),
    (
        "attack",
        &["epsilon", "steps", "restarts", "loss", "step_size", "include_zero_start", "seed"],
    ),
    (
        "eval",
        &["examples", "landscape_max_mag", "landscape_grid", "bench_modes", "bench_epochs"],
    ),
    ("output", &["dir"]),
];

#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = RawConfig::default();
        let mut current: Option<String> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim().to_lowercase();
                if !SECTIONS.iter().any(|(s, _)| *s == name) {
                    return Err(CliError::Config(format!(
                        "line {}: unknown section [{name}]",
                        lineno + 1
                    )));
                }
                current = Some(name.clone());
                cfg.sections.entry(name).or_default();
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::Config(format!(
                    "line {}: expected `key = value`, got `{line}`",
                    lineno + 1
                )));
            };
            let Some(section) = &current else {
                return Err(CliError::Config(format!(
                    "line {}: key before any [section]",
                    lineno + 1
                )));
            };
            cfg.set(section, key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    fn set(&mut self, section: &str, key: &str, value: &str) -> Result<(), CliError> {
        let allowed = SECTIONS
            .iter()
            .find(|(s, _)| *s == section)
            .map(|(_, keys)| *keys)
            .ok_or_else(|| CliError::Config(format!("unknown section [{section}]")))?;
        if !allowed.contains(&key) {
            return Err(CliError::Config(format!("unknown key {section}.{key}")));
        }
        self.sections
            .entry(section.to_string())
            .or_default()
            .insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Apply one `section.key=value` override.
    pub fn apply_set(&mut self, expr: &str) -> Result<(), CliError> {
        let (path, value) = expr
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--set needs section.key=value, got `{expr}`")))?;
        let (section, key) = path
            .split_once('.')
            .ok_or_else(|| CliError::Config(format!("--set needs section.key=value, got `{expr}`")))?;
        self.set(section.trim(), key.trim(), value.trim())
    }

    /// Deterministic round-trippable rendering of the resolved config.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (section, keys) in &self.sections {
            let _ = writeln!(out, "[{section}]");
            for (k, v) in keys {
                let _ = writeln!(out, "{k} = {v}");
            }
            out.push('\n');
        }
        out
    }

    fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section).and_then(|s| s.get(key)).map(|v| v.as_str())
    }

    fn parsed<T: std::str::FromStr>(&self, section: &str, key: &str, default: T) -> Result<T, CliError> {
        match self.get(section, key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| {
                CliError::Config(format!("{section}.{key}: cannot parse `{v}`"))
            }),
        }
    }

    fn required(&self, section: &str, key: &str) -> Result<&str, CliError> {
        self.get(section, key)
            .ok_or_else(|| CliError::Config(format!("missing required key {section}.{key}")))
    }

    fn boolean(&self, section: &str, key: &str, default: bool) -> Result<bool, CliError> {
        match self.get(section, key) {
            None => Ok(default),
            Some("true" | "1" | "yes" | "on") => Ok(true),
            Some("false" | "0" | "no" | "off") => Ok(false),
            Some(v) => Err(CliError::Config(format!("{section}.{key}: expected a bool, got `{v}`"))),
        }
    }

    // -- typed views -------------------------------------------------------

    pub fn load_dataset(&self) -> Result<Dataset, CliError> {
        match self.required("dataset", "kind")? {
            "idx" => {
                let images = PathBuf::from(self.required("dataset", "images")?);
                let labels = PathBuf::from(self.required("dataset", "labels")?);
                Ok(load_idx(&images, &labels)?)
            }
            "cifar" => {
                let path = PathBuf::from(self.required("dataset", "path")?);
                let max_n = self.parsed("dataset", "max_n", usize::MAX)?;
                Ok(load_cifar_bin(&path, max_n)?)
            }
            "blobs" => Ok(synth_blobs(
                self.parsed("dataset", "classes", 10)?,
                self.parsed("dataset", "per_class", 100)?,
                self.parsed("dataset", "dim", 64)?,
                self.parsed("dataset", "separation", 8.0)?,
                self.parsed("dataset", "sigma", 0.1)?,
                self.parsed("dataset", "seed", 1)?,
            )?),
            other => Err(CliError::Config(format!("dataset.kind `{other}` not one of idx|cifar|blobs"))),
        }
    }

    pub fn architecture(&self) -> Result<Architecture, CliError> {
        match self.get("model", "arch").unwrap_or("mlp") {
            "mlp" => Ok(Architecture::Mlp),
            "cnn" => Ok(Architecture::Cnn),
            other => Err(CliError::Config(format!("model.arch `{other}` not one of mlp|cnn"))),
        }
    }

    pub fn checkpoint_path(&self) -> Result<PathBuf, CliError> {
        Ok(PathBuf::from(self.required("model", "checkpoint")?))
    }

    pub fn checkpoint_paths(&self) -> Result<Vec<PathBuf>, CliError> {
        Ok(self
            .required("model", "checkpoints")?
            .split(',')
            .map(|p| PathBuf::from(p.trim()))
            .collect())
    }

    pub fn attack_spec(&self) -> Result<AttackSpec, CliError> {
        let epsilon: f64 = self.parsed("attack", "epsilon", 0.1)?;
        let spec = AttackSpec {
            epsilon,
            steps: self.parsed("attack", "steps", 20)?,
            step_size: match self.get("attack", "step_size") {
                None => None, // epsilon / 5
                Some(v) => Some(v.parse().map_err(|_| {
                    CliError::Config(format!("attack.step_size: cannot parse `{v}`"))
                })?),
            },
            restarts: self.parsed("attack", "restarts", 1)?,
            loss: match self.get("attack", "loss").unwrap_or("ce") {
                "ce" => AttackLoss::CrossEntropy,
                "cw" => AttackLoss::CwMargin,
                other => {
                    return Err(CliError::Config(format!("attack.loss `{other}` not one of ce|cw")))
                }
            },
            include_zero_start: self.boolean("attack", "include_zero_start", true)?,
            seed: self.parsed("attack", "seed", 0)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Hyperparameters shared by the smoothing/augmentation modes; defaults
    /// alpha = 0.01, a = 0.2, delta = 0.1.
    fn smoothing_params(&self) -> Result<(f64, f64, f64), CliError> {
        Ok((
            self.parsed("train", "alpha", 0.01)?,
            self.parsed("train", "a", 0.2)?,
            self.parsed("train", "delta", 0.1)?,
        ))
    }

    pub fn mode(&self) -> Result<VicinityMode, CliError> {
        let (alpha, a, delta) = self.smoothing_params()?;
        let mode = match self.get("train", "mode").unwrap_or("natural") {
            "natural" => VicinityMode::Natural,
            "ga" => VicinityMode::GaussianAugment { delta },
            "ls" => VicinityMode::LabelSmooth { alpha },
            "ls+ga" | "ls_ga" => VicinityMode::LabelSmoothGaussian { alpha, delta },
            "mixup" => VicinityMode::Mixup { a },
            "adv_train" => VicinityMode::AdvTrain { attack: self.attack_spec()? },
            "trades" => VicinityMode::Trades { alpha: 0.5, attack: self.attack_spec()? },
            "sprout" => VicinityMode::Sprout { alpha, a, delta },
            "combo" => VicinityMode::Combo {
                ga: self.boolean("train", "ga", false)?,
                mixup: self.boolean("train", "mixup", false)?,
                dirichlet: self.boolean("train", "dirichlet", false)?,
                alpha,
                a,
                delta,
            },
            other => {
                return Err(CliError::Config(format!("train.mode `{other}` unknown")));
            }
        };
        mode.validate()?;
        Ok(mode)
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let mut c = TrainConfig::new(
            self.mode()?,
            self.architecture()?,
            self.parsed("train", "epochs", 10)?,
            self.parsed("train", "seed", 0)?,
        );
        c.batch_size = self.parsed("train", "batch", 128)?;
        c.lr_theta = self.parsed("train", "lr_theta", 0.05)?;
        c.lr_beta = self.parsed("train", "lr_beta", 0.1)?;
        c.momentum = self.parsed("train", "momentum", 0.9)?;
        c.width_factor = self.parsed("model", "width", 1)?;
        c.beta_warmup_epochs = self.parsed("train", "beta_warmup", 10)?;
        c.init = match self.get("train", "init") {
            None | Some("random") => Init::Random,
            Some(path) => Init::Checkpoint { path: PathBuf::from(path) },
        };
        c.validate()?;
        Ok(c)
    }

    pub fn eval_examples(&self) -> Result<usize, CliError> {
        self.parsed("eval", "examples", usize::MAX)
    }

    pub fn landscape_params(&self) -> Result<(f64, usize), CliError> {
        Ok((
            self.parsed("eval", "landscape_max_mag", 0.1)?,
            self.parsed("eval", "landscape_grid", 20)?,
        ))
    }

    pub fn bench_modes(&self) -> Result<Vec<VicinityMode>, CliError> {
        let spec_list = self.get("eval", "bench_modes").unwrap_or("natural,sprout,adv_train");
        let (alpha, a, delta) = self.smoothing_params()?;
        spec_list
            .split(',')
            .map(|name| match name.trim() {
                "natural" => Ok(VicinityMode::Natural),
                "ga" => Ok(VicinityMode::GaussianAugment { delta }),
                "ls" => Ok(VicinityMode::LabelSmooth { alpha }),
                "mixup" => Ok(VicinityMode::Mixup { a }),
                "sprout" => Ok(VicinityMode::Sprout { alpha, a, delta }),
                "adv_train" => Ok(VicinityMode::AdvTrain { attack: self.attack_spec()? }),
                other => Err(CliError::Config(format!("eval.bench_modes entry `{other}` unknown"))),
            })
            .collect()
    }

    pub fn bench_epochs(&self) -> Result<usize, CliError> {
        self.parsed("eval", "bench_epochs", 10)
    }

    /// Output directory: `output.dir`, else `$SPROUT_OUT/<command>`.
    pub fn output_dir(&self, command: &str) -> Result<PathBuf, CliError> {
        if let Some(dir) = self.get("output", "dir") {
            return Ok(PathBuf::from(dir));
        }
        match std::env::var("SPROUT_OUT") {
            Ok(root) => Ok(PathBuf::from(root).join(command)),
            Err(_) => Err(CliError::Config(
                "no output.dir in config and SPROUT_OUT is unset".into(),
            )),
        }
    }
}
