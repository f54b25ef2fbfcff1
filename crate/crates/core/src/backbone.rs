//! Staged convolutional backbone with a pooled two-layer head.
//!
//! Each stage opens with a stride-2 3×3 convolution (halving the spatial
//! extent and setting the channel count) followed by residual blocks
//! `relu(x + conv3x3(x))`. The head is global average pooling, a hidden
//! affine + relu, and a final affine map laid out per [`Task`]:
//!
//! * intensity: `n` regression values, then `5n` ordinal logits (AU-major,
//!   threshold `j = 1..5` for each AU);
//! * detection: `n` occurrence logits.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Number of ordinal thresholds per AU (`y >= 1` .. `y >= 5`).
pub const ORDINAL_LEVELS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Intensity,
    Detection,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Intensity => "intensity",
            Task::Detection => "detection",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "intensity" => Ok(Task::Intensity),
            "detection" => Ok(Task::Detection),
            other => Err(Error::Config(format!("unknown task `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub channels: usize,
    pub blocks: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    /// `(channels, height, width)` of one input image.
    pub input: (usize, usize, usize),
    pub stages: Vec<StageSpec>,
    pub hidden: usize,
    pub num_aus: usize,
    pub task: Task,
}

impl BackboneSpec {
    /// 1×32×32 input, stages of 8/16/32/64 channels with one block each,
    /// hidden width 64.
    pub fn desk(num_aus: usize, task: Task) -> Self {
        BackboneSpec {
            input: (1, 32, 32),
            stages: [8, 16, 32, 64]
                .into_iter()
                .map(|channels| StageSpec { channels, blocks: 1 })
                .collect(),
            hidden: 64,
            num_aus,
            task,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.input;
        if self.stages.len() < 2 {
            return Err(Error::InvalidSpec(format!(
                "need at least 2 stages, got {}",
                self.stages.len()
            )));
        }
        if let Some(s) = self.stages.iter().find(|s| s.channels == 0 || s.blocks == 0) {
            return Err(Error::InvalidSpec(format!("stage {s:?} has a zero field")));
        }
        let factor = 1usize << self.stages.len();
        if c == 0 || h % factor != 0 || w % factor != 0 || h == 0 || w == 0 {
            return Err(Error::InvalidSpec(format!(
                "input {c}x{h}x{w} must be divisible by 2^{} spatially",
                self.stages.len()
            )));
        }
        if self.num_aus == 0 || self.hidden == 0 {
            return Err(Error::InvalidSpec("num_aus and hidden must be >= 1".into()));
        }
        Ok(())
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// Width of the final affine output.
    pub fn output_width(&self) -> usize {
        match self.task {
            Task::Intensity => self.num_aus * (1 + ORDINAL_LEVELS),
            Task::Detection => self.num_aus,
        }
    }

    /// `(channels, height, width)` of the feature map entering stage
    /// `index` (0-based); `index == num_stages()` gives the final map.
    pub fn feature_shape(&self, index: usize) -> (usize, usize, usize) {
        let (c, h, w) = self.input;
        if index == 0 {
            return (c, h, w);
        }
        (self.stages[index - 1].channels, h >> index, w >> index)
    }

    pub fn last_channels(&self) -> usize {
        self.stages.last().map_or(0, |s| s.channels)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// The final affine map producing the head outputs.
    LastLayer,
    Rest,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    pub group: ParamGroup,
}

/// Named trainable tensors, in a fixed order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, group: ParamGroup) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidSpec(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, tensor, group });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.params[i].tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.index_of(name)?;
        Some(&mut self.params[i].tensor)
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn group_numel(&self, group: ParamGroup) -> usize {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// Named copies of every tensor, e.g. for checkpointing.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.params.iter().map(|p| (p.name.clone(), p.tensor.clone())).collect()
    }

    /// Replaces tensor values from `named`, which must contain every
    /// parameter with a matching shape.
    pub fn load_named(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        for p in &mut self.params {
            let (_, t) = named
                .iter()
                .find(|(n, _)| *n == p.name)
                .ok_or_else(|| Error::Data(format!("checkpoint lacks `{}`", p.name)))?;
            if t.shape() != p.tensor.shape() {
                return Err(Error::Data(format!(
                    "checkpoint `{}` has shape {:?}, expected {:?}",
                    p.name,
                    t.shape(),
                    p.tensor.shape()
                )));
            }
            p.tensor = t.clone();
        }
        Ok(())
    }
}

fn conv_names(stage: usize, block: Option<usize>) -> (String, String) {
    let prefix = match block {
        None => format!("stage{}.entry.conv", stage + 1),
        Some(b) => format!("stage{}.block{b}.conv", stage + 1),
    };
    (format!("{prefix}.w"), format!("{prefix}.b"))
}

pub fn init_backbone(spec: &BackboneSpec, seed: u64) -> Result<ParamStore> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mut normal = |shape: Vec<usize>, fan_in: usize, gain: f64| -> Tensor {
        let std = gain / (fan_in as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("positive std");
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| dist.sample(&mut rng)).collect()).expect("shape")
    };
    let gain = 2f64.sqrt();
    let mut in_c = spec.input.0;
    for (s, stage) in spec.stages.iter().enumerate() {
        let out_c = stage.channels;
        let (w, b) = conv_names(s, None);
        store.insert(w, normal(vec![out_c, in_c, 3, 3], in_c * 9, gain), ParamGroup::Rest)?;
        store.insert(b, Tensor::zeros(vec![out_c]), ParamGroup::Rest)?;
        for blk in 0..stage.blocks {
            let (w, b) = conv_names(s, Some(blk));
            store.insert(w, normal(vec![out_c, out_c, 3, 3], out_c * 9, gain), ParamGroup::Rest)?;
            store.insert(b, Tensor::zeros(vec![out_c]), ParamGroup::Rest)?;
        }
        in_c = out_c;
    }
    store.insert("head.fc1.w", normal(vec![in_c, spec.hidden], in_c, gain), ParamGroup::Rest)?;
    store.insert("head.fc1.b", Tensor::zeros(vec![spec.hidden]), ParamGroup::Rest)?;
    let out = spec.output_width();
    store.insert("head.fc2.w", normal(vec![spec.hidden, out], spec.hidden, 1.0), ParamGroup::LastLayer)?;
    store.insert("head.fc2.b", Tensor::zeros(vec![out]), ParamGroup::LastLayer)?;
    Ok(store)
}

/// Head outputs as tape variables (batched).
#[derive(Clone, Copy, Debug)]
pub enum HeadVars {
    /// `reg: [B, n]`, `ord: [B, n, 5]`.
    Intensity { reg: Var, ord: Var },
    /// `det: [B, n]`.
    Detection { det: Var },
}

/// Head outputs for one sample, detached from any tape.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum HeadOutputs {
    Intensity { reg: Vec<f64>, ord_logits: Vec<[f64; ORDINAL_LEVELS]> },
    Detection { det_logits: Vec<f64> },
}

impl HeadVars {
    /// Splits batched head values into per-sample outputs.
    pub fn to_outputs(&self, tape: &Tape) -> Vec<HeadOutputs> {
        match *self {
            HeadVars::Intensity { reg, ord } => {
                let n = tape.shape(reg)[1];
                let regs = tape.value(reg).data().chunks_exact(n);
                let ords = tape.value(ord).data().chunks_exact(n * ORDINAL_LEVELS);
                regs.zip(ords)
                    .map(|(r, o)| HeadOutputs::Intensity {
                        reg: r.to_vec(),
                        ord_logits: o
                            .chunks_exact(ORDINAL_LEVELS)
                            .map(|c| c.try_into().expect("five thresholds"))
                            .collect(),
                    })
                    .collect()
            }
            HeadVars::Detection { det } => {
                let n = tape.shape(det)[1];
                tape.value(det)
                    .data()
                    .chunks_exact(n)
                    .map(|d| HeadOutputs::Detection { det_logits: d.to_vec() })
                    .collect()
            }
        }
    }

    /// The primary numeric output: regression values or detection logits.
    pub fn primary(&self) -> Var {
        match *self {
            HeadVars::Intensity { reg, .. } => reg,
            HeadVars::Detection { det } => det,
        }
    }
}

/// A [`ParamStore`] bound to a tape as leaf variables.
pub struct Network<'a> {
    spec: &'a BackboneSpec,
    store: &'a ParamStore,
    vars: Vec<Var>,
}

impl<'a> Network<'a> {
    /// Binds every parameter as a leaf. With `trainable`, the leaves track
    /// gradients.
    pub fn bind(spec: &'a BackboneSpec, store: &'a ParamStore, tape: &mut Tape, trainable: bool) -> Result<Self> {
        spec.validate()?;
        let vars = store.iter().map(|p| tape.leaf(p.tensor.clone(), trainable)).collect();
        Ok(Network { spec, store, vars })
    }

    /// Uses existing leaves aligned with `store.iter()`; only the names of
    /// `store` are consulted.
    pub fn bind_vars(spec: &'a BackboneSpec, store: &'a ParamStore, vars: Vec<Var>) -> Result<Self> {
        spec.validate()?;
        if vars.len() != store.len() {
            return Err(Error::shape("bind_vars", format!("{} vars for {} parameters", vars.len(), store.len())));
        }
        Ok(Network { spec, store, vars })
    }

    pub fn spec(&self) -> &BackboneSpec {
        self.spec
    }

    /// Leaf variables aligned with [`ParamStore::iter`].
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn var(&self, name: &str) -> Result<Var> {
        self.store
            .index_of(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::InvalidSpec(format!("missing parameter `{name}`")))
    }

    /// Runs stages `from..to` (0-based, end exclusive) on `x`.
    pub fn stages(&self, tape: &mut Tape, x: Var, from: usize, to: usize) -> Result<Var> {
        let s = self.spec.num_stages();
        if from > to || to > s {
            return Err(Error::shape("forward_stages", format!("range {from}..{to} of {s} stages")));
        }
        let (c, h, w) = self.spec.feature_shape(from);
        let shape = tape.shape(x);
        if shape.len() != 4 || shape[1..] != [c, h, w] {
            return Err(Error::shape(
                "forward_stages",
                format!("stage {from} expects [B, {c}, {h}, {w}], got {shape:?}"),
            ));
        }
        let mut x = x;
        for stage in from..to {
            let (w, b) = conv_names(stage, None);
            let y = tape.conv2d(x, self.var(&w)?, Some(self.var(&b)?), 2, 1)?;
            x = tape.relu(y)?;
            for blk in 0..self.spec.stages[stage].blocks {
                let (w, b) = conv_names(stage, Some(blk));
                let y = tape.conv2d(x, self.var(&w)?, Some(self.var(&b)?), 1, 1)?;
                let y = tape.add(x, y)?;
                x = tape.relu(y)?;
            }
        }
        Ok(x)
    }

    /// Global average pool of final-stage features: `[B, C]`.
    pub fn pool(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        let (c, h, w) = self.spec.feature_shape(self.spec.num_stages());
        let shape = tape.shape(features);
        if shape.len() != 4 || shape[1..] != [c, h, w] {
            return Err(Error::shape("forward_head", format!("expected [B, {c}, {h}, {w}], got {shape:?}")));
        }
        tape.global_avg_pool(features)
    }

    /// Hidden affine + relu on pooled features.
    pub fn hidden(&self, tape: &mut Tape, pooled: Var) -> Result<Var> {
        let y = tape.matmul(pooled, self.var("head.fc1.w")?)?;
        let y = tape.add(y, self.var("head.fc1.b")?)?;
        tape.relu(y)
    }

    /// Final affine map into the task's output layout.
    pub fn output(&self, tape: &mut Tape, hidden: Var) -> Result<HeadVars> {
        let y = tape.matmul(hidden, self.var("head.fc2.w")?)?;
        let y = tape.add(y, self.var("head.fc2.b")?)?;
        let batch = tape.shape(y)[0];
        let n = self.spec.num_aus;
        Ok(match self.spec.task {
            Task::Intensity => {
                let reg = tape.slice(y, 1, 0, n)?;
                let ord = tape.slice(y, 1, n, n * ORDINAL_LEVELS)?;
                let ord = tape.reshape(ord, &[batch, n, ORDINAL_LEVELS])?;
                HeadVars::Intensity { reg, ord }
            }
            Task::Detection => HeadVars::Detection { det: y },
        })
    }

    /// Pool → hidden → output.
    pub fn head(&self, tape: &mut Tape, features: Var) -> Result<HeadVars> {
        let pooled = self.pool(tape, features)?;
        let hidden = self.hidden(tape, pooled)?;
        self.output(tape, hidden)
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<HeadVars> {
        let f = self.stages(tape, x, 0, self.spec.num_stages())?;
        self.head(tape, f)
    }
}

/// Runs stages `from..to` on a batch without recording gradients.
pub fn forward_stages(spec: &BackboneSpec, params: &ParamStore, x: &Tensor, from: usize, to: usize) -> Result<Tensor> {
    let mut tape = Tape::no_grad();
    let net = Network::bind(spec, params, &mut tape, false)?;
    let xv = tape.constant(x.clone());
    let y = net.stages(&mut tape, xv, from, to)?;
    Ok(tape.value(y).clone())
}

/// Applies the head to final-stage features without recording gradients.
pub fn forward_head(spec: &BackboneSpec, params: &ParamStore, features: &Tensor) -> Result<Vec<HeadOutputs>> {
    let mut tape = Tape::no_grad();
    let net = Network::bind(spec, params, &mut tape, false)?;
    let f = tape.constant(features.clone());
    let head = net.head(&mut tape, f)?;
    Ok(head.to_outputs(&tape))
}
