use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::PipelineMode;
use crate::error::{Error, Result};
use crate::model::ViTConfig;
use crate::optim::{AdamWConfig, CosineSchedule};

/// Everything needed to run one training.
///
/// Stored as `key = value` lines, one per field (see [`TrainConfig::keys`]).
/// `#` starts a comment. Relative paths in a file resolve against the file's
/// directory. `num_classes = 0` means "take it from the training manifest".
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub vit: ViTConfig,
    pub eta_max: f64,
    pub eta_min: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub pipeline_mode: PipelineMode,
    pub train_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Write `checkpoint_epoch_{k}.ckpt` every this many epochs; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            vit: ViTConfig::tiny(0),
            eta_max: 1e-4,
            eta_min: 0.0,
            weight_decay: 0.01,
            batch_size: 32,
            epochs: 10,
            seed: 0,
            pipeline_mode: PipelineMode::Full,
            train_manifest: None,
            test_manifest: None,
            out_dir: PathBuf::from("out"),
            checkpoint_every: 0,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

impl TrainConfig {
    pub fn keys() -> &'static [&'static str] {
        &[
            "image_size",
            "patch_size",
            "in_channels",
            "hidden_size",
            "intermediate_size",
            "num_layers",
            "num_heads",
            "num_classes",
            "attn_dropout",
            "hidden_dropout",
            "ln_eps",
            "freeze_encoder",
            "eta_max",
            "eta_min",
            "weight_decay",
            "batch_size",
            "epochs",
            "seed",
            "pipeline_mode",
            "train_manifest",
            "test_manifest",
            "out_dir",
            "checkpoint_every",
        ]
    }

    /// Sets one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = &mut self.vit;
        match key {
            "image_size" => v.image_size = parse_value(key, value)?,
            "patch_size" => v.patch_size = parse_value(key, value)?,
            "in_channels" => v.in_channels = parse_value(key, value)?,
            "hidden_size" => v.hidden_size = parse_value(key, value)?,
            "intermediate_size" => v.intermediate_size = parse_value(key, value)?,
            "num_layers" => v.num_layers = parse_value(key, value)?,
            "num_heads" => v.num_heads = parse_value(key, value)?,
            "num_classes" => v.num_classes = parse_value(key, value)?,
            "attn_dropout" => v.attn_dropout = parse_value(key, value)?,
            "hidden_dropout" => v.hidden_dropout = parse_value(key, value)?,
            "ln_eps" => v.ln_eps = parse_value(key, value)?,
            "freeze_encoder" => v.freeze_encoder = parse_value(key, value)?,
            "eta_max" => self.eta_max = parse_value(key, value)?,
            "eta_min" => self.eta_min = parse_value(key, value)?,
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "pipeline_mode" => {
                self.pipeline_mode = value
                    .parse()
                    .map_err(|_| Error::Config(format!("pipeline_mode must be full or masked, got {value:?}")))?
            }
            "train_manifest" => self.train_manifest = Some(PathBuf::from(value)),
            "test_manifest" => self.test_manifest = Some(PathBuf::from(value)),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "checkpoint_every" => self.checkpoint_every = parse_value(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parses config text on top of the defaults. Relative paths are joined
    /// onto `base` when given.
    pub fn parse(text: &str, base: Option<&Path>) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen: Vec<String> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |m: String| Error::Config(format!("line {}: {m}", i + 1));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected key = value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.iter().any(|k| k == key) {
                return Err(at(format!("duplicate key {key:?}")));
            }
            cfg.set(key, value).map_err(|e| at(e.to_string()))?;
            seen.push(key.to_string());
        }
        if let Some(base) = base {
            for p in [&mut cfg.train_manifest, &mut cfg.test_manifest].into_iter().flatten() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
            if cfg.out_dir.is_relative() && seen.iter().any(|k| k == "out_dir") {
                cfg.out_dir = base.join(&cfg.out_dir);
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().filter(|p| !p.as_os_str().is_empty());
        Self::parse(&text, base).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Text form that [`TrainConfig::parse`] reads back to an equal value.
    pub fn to_text(&self) -> String {
        let v = &self.vit;
        let mut out = String::new();
        let mut kv = |k: &str, val: String| writeln!(out, "{k} = {val}").expect("writing to a String");
        kv("image_size", v.image_size.to_string());
        kv("patch_size", v.patch_size.to_string());
        kv("in_channels", v.in_channels.to_string());
        kv("hidden_size", v.hidden_size.to_string());
        kv("intermediate_size", v.intermediate_size.to_string());
        kv("num_layers", v.num_layers.to_string());
        kv("num_heads", v.num_heads.to_string());
        kv("num_classes", v.num_classes.to_string());
        kv("attn_dropout", format!("{:?}", v.attn_dropout));
        kv("hidden_dropout", format!("{:?}", v.hidden_dropout));
        kv("ln_eps", format!("{:?}", v.ln_eps));
        kv("freeze_encoder", v.freeze_encoder.to_string());
        kv("eta_max", format!("{:?}", self.eta_max));
        kv("eta_min", format!("{:?}", self.eta_min));
        kv("weight_decay", format!("{:?}", self.weight_decay));
        kv("batch_size", self.batch_size.to_string());
        kv("epochs", self.epochs.to_string());
        kv("seed", self.seed.to_string());
        kv("pipeline_mode", self.pipeline_mode.to_string());
        if let Some(p) = &self.train_manifest {
            kv("train_manifest", p.display().to_string());
        }
        if let Some(p) = &self.test_manifest {
            kv("test_manifest", p.display().to_string());
        }
        kv("out_dir", self.out_dir.display().to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        out
    }

    /// Checks everything that does not need the manifests.
    pub fn validate(&self) -> Result<()> {
        let mut vit = self.vit.clone();
        vit.num_classes = vit.num_classes.max(1);
        vit.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if !self.eta_max.is_finite() {
            return Err(Error::Config(format!("eta_max must be finite, got {}", self.eta_max)));
        }
        CosineSchedule {
            eta_min: self.eta_min,
            eta_max: self.eta_max,
            t_max: self.epochs.max(1),
        }
        .validate()?;
        if self.train_manifest.is_none() {
            return Err(Error::Config("train_manifest is not set".into()));
        }
        if self.test_manifest.is_none() {
            return Err(Error::Config("test_manifest is not set".into()));
        }
        Ok(())
    }

    /// Schedule with `T_max = epochs`; `None` for a zero-epoch run.
    pub fn schedule(&self) -> Result<Option<CosineSchedule>> {
        if self.epochs == 0 {
            return Ok(None);
        }
        CosineSchedule::new(self.eta_min, self.eta_max, self.epochs).map(Some)
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    /// Whether two configs describe the same training, ignoring where output
    /// goes and how often checkpoints are written.
    pub fn same_run(&self, other: &Self) -> bool {
        let strip = |c: &Self| Self {
            out_dir: PathBuf::new(),
            checkpoint_every: 0,
            ..c.clone()
        };
        strip(self) == strip(other)
    }
}
