//! Flat `key = value` experiment configuration with dotted keys.
//!
//! ```text
//! # comments start with '#'
//! task = intensity
//! modes = ncg, ofc_bs, ofc_csn:stage4
//! backbone.stages = 8x1, 16x1, 32x1, 64x1
//! optim.lr_last = 1e-4
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::backbone::{BackboneSpec, StageSpec, Task};
use crate::data::synth::SynthConfig;
use crate::error::{Error, Result};
use crate::optim::AdamConfig;
use crate::siamese::{FcMergeInput, MergePoint, PredictionMode};

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Manifest(PathBuf),
    Synthetic(SynthConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub data: DataSource,
    /// Seed of the synthetic generator; `None` follows `seed`.
    pub synth_seed: Option<u64>,
    pub task: Task,
    pub modes: Vec<PredictionMode>,
    pub stages: Vec<StageSpec>,
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optim: AdamConfig,
    pub folds: usize,
    pub threshold: f64,
    pub bs_delta: f64,
    pub clamp: bool,
    pub fc_input: FcMergeInput,
    pub ablate_merges: Vec<MergePoint>,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataSource::Synthetic(SynthConfig::default()),
            synth_seed: None,
            task: Task::Intensity,
            modes: vec![
                PredictionMode::Ncg,
                PredictionMode::OfcBs,
                PredictionMode::OfcCsn(MergePoint::Stage(4)),
            ],
            stages: BackboneSpec::desk(1, Task::Intensity).stages,
            hidden: 64,
            epochs: 3,
            batch_size: 64,
            seed: 42,
            optim: AdamConfig::default(),
            folds: 3,
            threshold: 0.5,
            bs_delta: 0.0,
            clamp: false,
            fc_input: FcMergeInput::Pooled,
            ablate_merges: MergePoint::all(4),
            out: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected a boolean, got `{value}`"))),
    }
}

fn list<T>(value: &str, f: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(f).collect()
}

fn fmt_list<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    fn synth_mut(&mut self, key: &str) -> Result<&mut SynthConfig> {
        if let DataSource::Manifest(_) = self.data {
            self.data = DataSource::Synthetic(SynthConfig::default());
        }
        match &mut self.data {
            DataSource::Synthetic(s) => Ok(s),
            DataSource::Manifest(_) => Err(Error::Config(format!("`{key}` needs a synthetic source"))),
        }
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "data.manifest" => self.data = DataSource::Manifest(PathBuf::from(v)),
            "data.synth.participants" => self.synth_mut(key)?.participants = parse(key, v)?,
            "data.synth.frames" => self.synth_mut(key)?.frames = parse(key, v)?,
            "data.synth.image_size" => self.synth_mut(key)?.image_size = parse(key, v)?,
            "data.synth.num_aus" => self.synth_mut(key)?.num_aus = parse(key, v)?,
            "data.synth.bias_blobs" => self.synth_mut(key)?.bias_blobs = parse(key, v)?,
            "data.synth.overlap" => self.synth_mut(key)?.overlap = parse(key, v)?,
            "data.synth.zero_inflation" => self.synth_mut(key)?.zero_inflation = parse(key, v)?,
            "data.synth.decay" => self.synth_mut(key)?.decay = parse(key, v)?,
            "data.synth.noise" => self.synth_mut(key)?.noise = parse(key, v)?,
            "data.synth.bias_strength" => self.synth_mut(key)?.bias_strength = parse(key, v)?,
            "data.synth.seed" => self.synth_seed = Some(parse(key, v)?),
            "task" => self.task = v.parse()?,
            "modes" => self.modes = list(v, str::parse)?,
            "backbone.stages" => {
                self.stages = list(v, |s| {
                    let (c, b) = s.split_once('x').unwrap_or((s, "1"));
                    Ok(StageSpec {
                        channels: parse(key, c)?,
                        blocks: parse(key, b)?,
                    })
                })?
            }
            "backbone.hidden" => self.hidden = parse(key, v)?,
            "train.epochs" => self.epochs = parse(key, v)?,
            "train.batch_size" => self.batch_size = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "optim.lr_last" => self.optim.lr_last = parse(key, v)?,
            "optim.lr_rest" => self.optim.lr_rest = parse(key, v)?,
            "optim.beta1" => self.optim.beta1 = parse(key, v)?,
            "optim.beta2" => self.optim.beta2 = parse(key, v)?,
            "optim.eps" => self.optim.eps = parse(key, v)?,
            "optim.weight_decay" => self.optim.weight_decay = parse(key, v)?,
            "optim.decoupled" => self.optim.decoupled = parse_bool(key, v)?,
            "xval.folds" => self.folds = parse(key, v)?,
            "eval.threshold" => self.threshold = parse(key, v)?,
            "eval.bs_delta" => self.bs_delta = parse(key, v)?,
            "eval.clamp" => self.clamp = parse_bool(key, v)?,
            "eval.fc_input" => self.fc_input = v.parse()?,
            "ablate.merges" => self.ablate_merges = list(v, str::parse)?,
            "out" => self.out = Some(PathBuf::from(v)),
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Applies every setting of a config file's text on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            self.set(k, v).map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = ExperimentConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Canonical `key = value` listing of every setting, sorted by key.
    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        match &self.data {
            DataSource::Manifest(p) => put("data.manifest", p.display().to_string()),
            DataSource::Synthetic(s) => {
                put("data.synth.participants", s.participants.to_string());
                put("data.synth.frames", s.frames.to_string());
                put("data.synth.image_size", s.image_size.to_string());
                put("data.synth.num_aus", s.num_aus.to_string());
                put("data.synth.bias_blobs", s.bias_blobs.to_string());
                put("data.synth.overlap", s.overlap.to_string());
                put("data.synth.zero_inflation", s.zero_inflation.to_string());
                put("data.synth.decay", s.decay.to_string());
                put("data.synth.noise", s.noise.to_string());
                put("data.synth.bias_strength", s.bias_strength.to_string());
                put("data.synth.seed", self.synth_seed.unwrap_or(self.seed).to_string());
            }
        }
        put("task", self.task.to_string());
        put("modes", fmt_list(&self.modes));
        let stages: Vec<String> = self.stages.iter().map(|s| format!("{}x{}", s.channels, s.blocks)).collect();
        put("backbone.stages", stages.join(","));
        put("backbone.hidden", self.hidden.to_string());
        put("train.epochs", self.epochs.to_string());
        put("train.batch_size", self.batch_size.to_string());
        put("seed", self.seed.to_string());
        put("optim.lr_last", self.optim.lr_last.to_string());
        put("optim.lr_rest", self.optim.lr_rest.to_string());
        put("optim.beta1", self.optim.beta1.to_string());
        put("optim.beta2", self.optim.beta2.to_string());
        put("optim.eps", self.optim.eps.to_string());
        put("optim.weight_decay", self.optim.weight_decay.to_string());
        put("optim.decoupled", self.optim.decoupled.to_string());
        put("xval.folds", self.folds.to_string());
        put("eval.threshold", self.threshold.to_string());
        put("eval.bs_delta", self.bs_delta.to_string());
        put("eval.clamp", self.clamp.to_string());
        put(
            "eval.fc_input",
            match self.fc_input {
                FcMergeInput::Pooled => "pooled",
                FcMergeInput::Hidden => "hidden",
            }
            .into(),
        );
        put("ablate.merges", fmt_list(&self.ablate_merges));
        m
    }

    pub fn to_text(&self) -> String {
        self.to_kv().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// SHA-256 of the canonical listing. The output directory is excluded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// The synthetic generator settings with the effective seed.
    pub fn synth_config(&self) -> Option<SynthConfig> {
        match &self.data {
            DataSource::Synthetic(s) => Some(SynthConfig {
                seed: self.synth_seed.unwrap_or(self.seed),
                ..s.clone()
            }),
            DataSource::Manifest(_) => None,
        }
    }

    pub fn backbone(&self, input: (usize, usize, usize), num_aus: usize) -> Result<BackboneSpec> {
        let spec = BackboneSpec {
            input,
            stages: self.stages.clone(),
            hidden: self.hidden,
            num_aus,
            task: self.task,
        };
        spec.validate()?;
        for m in self.modes.iter().filter_map(|m| m.merge()) {
            m.validate(&spec)?;
        }
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.modes.is_empty() {
            return Err(Error::Config("at least one mode is required".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("train.epochs and train.batch_size must be >= 1".into()));
        }
        if let Some(s) = self.synth_config() {
            s.validate()?;
        }
        self.optim.validate()
    }
}
