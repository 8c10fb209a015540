//! Run configuration: an INI-style file with sections, every key optional,
//! defaults matching the reference training setup (d=128, batch 100, Adam at
//! 1e-3, sessions cut at 19).

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use sessrec_core::dataset::{SchemaConfig, SessionKeying};
use sessrec_core::model::{ModelConfig, VariantFlags};
use sessrec_core::synth::SyntheticConfig;
use sessrec_core::train::TrainConfig;

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub events: PathBuf,
    pub workdir: PathBuf,
    pub checkpoint: Option<PathBuf>,

    pub delimiter: char,
    pub keying: SessionKeying,
    pub rho: usize,
    pub min_count: usize,
    pub max_len: usize,
    pub split: (f64, f64, f64),

    pub d: usize,
    pub heads: usize,
    pub rounds: usize,
    pub neighbor_cap: usize,

    pub batch: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,

    pub ks: Vec<usize>,
    pub baselines: bool,
    pub sknn_neighbors: usize,
    pub workers: usize,

    pub synth: SyntheticConfig,
    pub variant_name: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            events: PathBuf::from("events.csv"),
            workdir: PathBuf::from("work"),
            checkpoint: None,
            delimiter: ',',
            keying: SessionKeying::RawSessionId,
            rho: 5,
            min_count: 10,
            max_len: 19,
            split: (0.7, 0.2, 0.1),
            d: 128,
            heads: 8,
            rounds: 3,
            neighbor_cap: 200,
            batch: 100,
            lr: 1e-3,
            epochs: 30,
            seed: 1,
            ks: vec![10, 20],
            baselines: true,
            sknn_neighbors: 500,
            workers: 1,
            synth: SyntheticConfig::default(),
            variant_name: "full".to_string(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .with_context(|| format!("line {}: malformed section", lineno + 1))?;
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .with_context(|| format!("line {}: expected key = value", lineno + 1))?;
            let key = format!("{section}.{}", key.trim());
            cfg.set(&key, value.trim())
                .with_context(|| format!("line {}: bad value for {key}", lineno + 1))?;
        }
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "paths.events" => self.events = PathBuf::from(value),
            "paths.workdir" => self.workdir = PathBuf::from(value),
            "paths.checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "data.delimiter" => {
                let mut chars = value.chars();
                self.delimiter = chars.next().context("empty delimiter")?;
                if chars.next().is_some() {
                    bail!("delimiter must be one character");
                }
            }
            "data.keying" => {
                self.keying = match value {
                    "session" => SessionKeying::RawSessionId,
                    "user-day" => SessionKeying::UserDay,
                    other => bail!("unknown keying '{other}' (session | user-day)"),
                }
            }
            "data.rho" => self.rho = value.parse()?,
            "data.min_count" => self.min_count = value.parse()?,
            "data.max_len" => self.max_len = value.parse()?,
            "data.split" => {
                let parts: Vec<f64> =
                    value.split(',').map(|p| p.trim().parse()).collect::<Result<_, _>>()?;
                if parts.len() != 3 {
                    bail!("split needs three ratios");
                }
                self.split = (parts[0], parts[1], parts[2]);
            }
            "model.d" => self.d = value.parse()?,
            "model.heads" => self.heads = value.parse()?,
            "model.rounds" => self.rounds = value.parse()?,
            "model.neighbor_cap" => self.neighbor_cap = value.parse()?,
            "train.batch" => self.batch = value.parse()?,
            "train.lr" => self.lr = value.parse()?,
            "train.epochs" => self.epochs = value.parse()?,
            "train.seed" => self.seed = value.parse()?,
            "eval.ks" => {
                self.ks =
                    value.split(',').map(|p| p.trim().parse()).collect::<Result<_, _>>()?;
                if self.ks.is_empty() {
                    bail!("ks must not be empty");
                }
            }
            "eval.baselines" => self.baselines = parse_bool(value)?,
            "eval.sknn_neighbors" => self.sknn_neighbors = value.parse()?,
            "eval.workers" => self.workers = value.parse()?,
            "synth.items" => self.synth.n_items = value.parse()?,
            "synth.categories" => self.synth.n_categories = value.parse()?,
            "synth.brands" => self.synth.n_brands = value.parse()?,
            "synth.sessions" => self.synth.n_sessions = value.parse()?,
            "synth.rho" => self.synth.rho = value.parse()?,
            "synth.seed" => self.synth.seed = value.parse()?,
            "synth.noise" => self.synth.noise = value.parse()?,
            "synth.band_purity" => self.synth.band_purity = value.parse()?,
            "train.variant" => self.variant_name = value.to_string(),
            other => bail!("unknown config key '{other}'"),
        }
        Ok(())
    }

    pub fn schema(&self) -> SchemaConfig {
        SchemaConfig { delimiter: self.delimiter, keying: self.keying }
    }

    pub fn variant(&self) -> Result<VariantFlags> {
        sessrec_core::train::variant_by_name(&self.variant_name)
            .with_context(|| format!("unknown variant '{}'", self.variant_name))
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            d: self.d,
            heads: self.heads,
            rounds: self.rounds,
            neighbor_cap: self.neighbor_cap,
            seed: self.seed,
            variant: self.variant()?,
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            model: self.model_config()?,
            batch_size: self.batch,
            lr: self.lr,
            epochs: self.epochs,
            eval_k: self.ks.iter().copied().max().unwrap_or(20),
        })
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.workdir.join("model.ckpt"))
    }

    pub fn sessions_path(&self) -> PathBuf {
        self.workdir.join("sessions.tsv")
    }
}

fn parse_bool(value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => bail!("expected a boolean, got '{other}'"),
    }
}
