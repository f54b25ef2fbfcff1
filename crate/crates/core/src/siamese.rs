//! Calibrating Siamese forward pass and the three prediction modes.
//!
//! The target and the reference frame run through the same parameters up
//! to a [`MergePoint`]; the difference of the two branches then flows
//! through the rest of the network.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneSpec, HeadVars, Network, ParamStore, Task};
use crate::error::{Error, Result};
use crate::tape::{sigmoid, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MergePoint {
    /// Difference of the feature maps entering stage `k` (1-based).
    /// `Stage(1)` differences the raw images.
    Stage(usize),
    /// Difference of the pooled features entering the fully connected head.
    Fc,
    /// Difference of the head outputs (regression values and raw logits).
    Output,
}

impl MergePoint {
    /// Every merge point for a backbone with `stages` stages, earliest first.
    pub fn all(stages: usize) -> Vec<MergePoint> {
        (1..=stages)
            .map(MergePoint::Stage)
            .chain([MergePoint::Fc, MergePoint::Output])
            .collect()
    }

    pub fn validate(&self, spec: &BackboneSpec) -> Result<()> {
        match *self {
            MergePoint::Stage(k) if k == 0 || k > spec.num_stages() => Err(Error::InvalidSpec(format!(
                "merge stage {k} outside 1..={}",
                spec.num_stages()
            ))),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for MergePoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MergePoint::Stage(k) => write!(f, "stage{k}"),
            MergePoint::Fc => f.write_str("fc"),
            MergePoint::Output => f.write_str("output"),
        }
    }
}

impl FromStr for MergePoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        match lower.as_str() {
            "fc" => Ok(MergePoint::Fc),
            "output" => Ok(MergePoint::Output),
            _ => lower
                .strip_prefix("stage")
                .and_then(|k| k.parse().ok())
                .filter(|&k| k > 0)
                .map(MergePoint::Stage)
                .ok_or_else(|| Error::Config(format!("unknown merge point `{s}`"))),
        }
    }
}

/// Which features the `Fc` merge differences.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FcMergeInput {
    /// Pooled stage features, before the hidden affine.
    #[default]
    Pooled,
    /// Hidden activations, right before the final affine.
    Hidden,
}

impl FromStr for FcMergeInput {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pooled" => Ok(FcMergeInput::Pooled),
            "hidden" => Ok(FcMergeInput::Hidden),
            other => Err(Error::Config(format!("unknown fc merge input `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PredictionMode {
    /// Non-calibrated: the plain backbone on single frames.
    Ncg,
    /// Plain backbone, minus its output on the participant's reference.
    OfcBs,
    /// Siamese calibration network merged at the given point.
    OfcCsn(MergePoint),
}

impl PredictionMode {
    pub fn needs_reference(&self) -> bool {
        !matches!(self, PredictionMode::Ncg)
    }

    /// NCG and OFC_BS share the plain backbone; CSN variants train their own.
    pub fn merge(&self) -> Option<MergePoint> {
        match self {
            PredictionMode::OfcCsn(m) => Some(*m),
            _ => None,
        }
    }
}

impl fmt::Display for PredictionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PredictionMode::Ncg => f.write_str("ncg"),
            PredictionMode::OfcBs => f.write_str("ofc_bs"),
            PredictionMode::OfcCsn(m) => write!(f, "ofc_csn:{m}"),
        }
    }
}

impl FromStr for PredictionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "ncg" => Ok(PredictionMode::Ncg),
            "ofc_bs" | "bs" => Ok(PredictionMode::OfcBs),
            "ofc_csn" | "csn" => Ok(PredictionMode::OfcCsn(MergePoint::Stage(4))),
            _ => match s.split_once(':') {
                Some(("ofc_csn" | "csn", m)) => Ok(PredictionMode::OfcCsn(m.parse()?)),
                _ => Err(Error::Config(format!("unknown prediction mode `{s}`"))),
            },
        }
    }
}

fn head_diff(tape: &mut Tape, t: HeadVars, r: HeadVars) -> Result<HeadVars> {
    Ok(match (t, r) {
        (HeadVars::Intensity { reg: rt, ord: ot }, HeadVars::Intensity { reg: rr, ord: or }) => HeadVars::Intensity {
            reg: tape.sub(rt, rr)?,
            ord: tape.sub(ot, or)?,
        },
        (HeadVars::Detection { det: dt }, HeadVars::Detection { det: dr }) => HeadVars::Detection {
            det: tape.sub(dt, dr)?,
        },
        _ => unreachable!("both branches share one spec"),
    })
}

/// Siamese forward pass: both branches share `net`'s parameters and the
/// merged difference is fed through the remaining layers.
pub fn forward_csn(
    net: &Network<'_>,
    tape: &mut Tape,
    target: Var,
    reference: Var,
    merge: MergePoint,
    fc_input: FcMergeInput,
) -> Result<HeadVars> {
    if tape.shape(target) != tape.shape(reference) {
        return Err(Error::shape(
            "forward_csn",
            format!("target {:?} vs reference {:?}", tape.shape(target), tape.shape(reference)),
        ));
    }
    let spec = net.spec();
    merge.validate(spec)?;
    let s = spec.num_stages();
    match merge {
        MergePoint::Stage(k) => {
            let ft = net.stages(tape, target, 0, k - 1)?;
            let fr = net.stages(tape, reference, 0, k - 1)?;
            let d = tape.sub(ft, fr)?;
            let f = net.stages(tape, d, k - 1, s)?;
            net.head(tape, f)
        }
        MergePoint::Fc => {
            let branch = |tape: &mut Tape, x: Var| -> Result<Var> {
                let f = net.stages(tape, x, 0, s)?;
                let p = net.pool(tape, f)?;
                match fc_input {
                    FcMergeInput::Pooled => Ok(p),
                    FcMergeInput::Hidden => net.hidden(tape, p),
                }
            };
            let pt = branch(tape, target)?;
            let pr = branch(tape, reference)?;
            let d = tape.sub(pt, pr)?;
            let h = match fc_input {
                FcMergeInput::Pooled => net.hidden(tape, d)?,
                FcMergeInput::Hidden => d,
            };
            net.output(tape, h)
        }
        MergePoint::Output => {
            let ht = net.forward(tape, target)?;
            let hr = net.forward(tape, reference)?;
            head_diff(tape, ht, hr)
        }
    }
}

/// Inference-time options shared by every mode.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictOptions {
    /// Clamp intensity estimates to `[0, 5]`.
    pub clamp: bool,
    pub fc_input: FcMergeInput,
}

impl Default for PredictOptions {
    fn default() -> Self {
        PredictOptions {
            clamp: false,
            fc_input: FcMergeInput::Pooled,
        }
    }
}

/// Estimates for a batch of frames: `[B, n]`.
///
/// Intensity task: regression values (NCG: `reg(frame)`, OFC_BS:
/// `reg(frame) - reg(reference)`, OFC_CSN: merged regression head).
/// Detection task: scores (NCG and OFC_CSN: `σ(logit)`, OFC_BS:
/// `σ(logit(frame)) - σ(logit(reference))`); see [`DetectionRule`].
pub fn predict(
    spec: &BackboneSpec,
    params: &ParamStore,
    mode: PredictionMode,
    frames: &Tensor,
    references: Option<&Tensor>,
    opts: &PredictOptions,
) -> Result<Tensor> {
    let reference = match (mode.needs_reference(), references) {
        (true, None) => return Err(Error::Data(format!("mode {mode} needs a reference frame"))),
        (true, Some(r)) => Some(r),
        (false, _) => None,
    };
    let mut tape = Tape::no_grad();
    let net = Network::bind(spec, params, &mut tape, false)?;
    let x = tape.constant(frames.clone());
    let head = match mode {
        PredictionMode::Ncg => net.forward(&mut tape, x)?,
        PredictionMode::OfcBs => {
            let r = tape.constant(reference.expect("checked").clone());
            let ht = net.forward(&mut tape, x)?;
            let hr = net.forward(&mut tape, r)?;
            if spec.task == Task::Detection {
                let st = tape.sigmoid(ht.primary())?;
                let sr = tape.sigmoid(hr.primary())?;
                let d = tape.sub(st, sr)?;
                return Ok(tape.value(d).clone());
            }
            head_diff(&mut tape, ht, hr)?
        }
        PredictionMode::OfcCsn(merge) => {
            let r = tape.constant(reference.expect("checked").clone());
            forward_csn(&net, &mut tape, x, r, merge, opts.fc_input)?
        }
    };
    let out = tape.value(head.primary()).clone();
    Ok(match spec.task {
        Task::Intensity if opts.clamp => {
            let shape = out.shape().to_vec();
            Tensor::new(shape, out.into_data().into_iter().map(|v| v.clamp(0.0, 5.0)).collect())?
        }
        Task::Intensity => out,
        Task::Detection => {
            let shape = out.shape().to_vec();
            Tensor::new(shape, out.into_data().into_iter().map(sigmoid).collect())?
        }
    })
}

/// Binarizes detection scores.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum DetectionRule {
    /// Occurrence iff `score >= threshold`.
    AtLeast(f64),
    /// Occurrence iff `score > delta`.
    Above(f64),
}

impl DetectionRule {
    /// NCG and OFC_CSN threshold the probability; OFC_BS thresholds the
    /// probability difference at `bs_delta`.
    pub fn for_mode(mode: PredictionMode, threshold: f64, bs_delta: f64) -> Self {
        match mode {
            PredictionMode::OfcBs => DetectionRule::Above(bs_delta),
            _ => DetectionRule::AtLeast(threshold),
        }
    }

    pub fn occurs(&self, score: f64) -> bool {
        match *self {
            DetectionRule::AtLeast(t) => score >= t,
            DetectionRule::Above(d) => score > d,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{init_backbone, StageSpec};

    fn spec(task: Task) -> BackboneSpec {
        BackboneSpec {
            input: (1, 8, 8),
            stages: vec![
                StageSpec { channels: 3, blocks: 1 },
                StageSpec { channels: 4, blocks: 1 },
                StageSpec { channels: 5, blocks: 1 },
            ],
            hidden: 6,
            num_aus: 2,
            task,
        }
    }

    fn frames(seed: usize, b: usize) -> Tensor {
        Tensor::from_fn(vec![b, 1, 8, 8], |i| (((i + seed) * 2654435761usize) % 1000) as f64 / 1000.0)
    }

    #[test]
    fn parse_modes() {
        assert_eq!("ncg".parse::<PredictionMode>().unwrap(), PredictionMode::Ncg);
        assert_eq!(
            "ofc_csn:stage2".parse::<PredictionMode>().unwrap(),
            PredictionMode::OfcCsn(MergePoint::Stage(2))
        );
        assert_eq!(
            "ofc_csn:output".parse::<PredictionMode>().unwrap().to_string(),
            "ofc_csn:output"
        );
        assert!("ofc_csn:stage0".parse::<PredictionMode>().is_err());
        assert!("nope".parse::<PredictionMode>().is_err());
    }

    #[test]
    fn ofc_requires_reference() {
        let sp = spec(Task::Intensity);
        let p = init_backbone(&sp, 1).unwrap();
        let x = frames(0, 2);
        let err = predict(&sp, &p, PredictionMode::OfcBs, &x, None, &Default::default());
        assert!(err.is_err());
    }

    #[test]
    fn ncg_ignores_reference() {
        let sp = spec(Task::Intensity);
        let p = init_backbone(&sp, 1).unwrap();
        let (x, r) = (frames(0, 2), frames(9, 2));
        let a = predict(&sp, &p, PredictionMode::Ncg, &x, None, &Default::default()).unwrap();
        let b = predict(&sp, &p, PredictionMode::Ncg, &x, Some(&r), &Default::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn calibration_null_property() {
        for task in [Task::Intensity, Task::Detection] {
            let sp = spec(task);
            let p = init_backbone(&sp, 2).unwrap();
            for merge in MergePoint::all(3) {
                let mode = PredictionMode::OfcCsn(merge);
                let a = frames(1, 3);
                let b = frames(50, 3);
                let pa = predict(&sp, &p, mode, &a, Some(&a), &Default::default()).unwrap();
                let pb = predict(&sp, &p, mode, &b, Some(&b), &Default::default()).unwrap();
                assert_eq!(pa, pb, "{merge}");
                let row0 = pa.row(0).unwrap();
                assert_eq!(pa.row(2).unwrap(), row0);
            }
        }
    }

    #[test]
    fn output_merge_equals_baseline_subtraction() {
        let sp = spec(Task::Intensity);
        let p = init_backbone(&sp, 3).unwrap();
        let (x, r) = (frames(4, 4), frames(77, 4));
        let bs = predict(&sp, &p, PredictionMode::OfcBs, &x, Some(&r), &Default::default()).unwrap();
        let csn = predict(
            &sp,
            &p,
            PredictionMode::OfcCsn(MergePoint::Output),
            &x,
            Some(&r),
            &Default::default(),
        )
        .unwrap();
        assert!(bs.max_abs_diff(&csn) < 1e-12);
    }

    #[test]
    fn swapping_branches_negates_output_merge() {
        let sp = spec(Task::Intensity);
        let p = init_backbone(&sp, 4).unwrap();
        let (x, r) = (frames(4, 2), frames(33, 2));
        let mode = PredictionMode::OfcCsn(MergePoint::Output);
        let a = predict(&sp, &p, mode, &x, Some(&r), &Default::default()).unwrap();
        let b = predict(&sp, &p, mode, &r, Some(&x), &Default::default()).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert_eq!(*u, -*v);
        }
    }

    #[test]
    fn baseline_subtraction_arithmetic() {
        let sp = spec(Task::Intensity);
        let p = init_backbone(&sp, 5).unwrap();
        let (x, r) = (frames(4, 1), frames(8, 1));
        let ncg_x = predict(&sp, &p, PredictionMode::Ncg, &x, None, &Default::default()).unwrap();
        let ncg_r = predict(&sp, &p, PredictionMode::Ncg, &r, None, &Default::default()).unwrap();
        let bs = predict(&sp, &p, PredictionMode::OfcBs, &x, Some(&r), &Default::default()).unwrap();
        for i in 0..2 {
            assert_eq!(bs.data()[i], ncg_x.data()[i] - ncg_r.data()[i]);
        }
    }

    #[test]
    fn detection_rules() {
        let ncg = DetectionRule::for_mode(PredictionMode::Ncg, 0.5, 0.0);
        assert!(ncg.occurs(0.5));
        assert!(!ncg.occurs(0.49));
        let bs = DetectionRule::for_mode(PredictionMode::OfcBs, 0.5, 0.0);
        assert!(bs.occurs(1e-9));
        assert!(!bs.occurs(0.0));
    }

    #[test]
    fn clamp_flag_bounds_intensities() {
        let sp = spec(Task::Intensity);
        let mut p = init_backbone(&sp, 6).unwrap();
        *p.get_mut("head.fc2.b").unwrap() = Tensor::from_fn(vec![12], |i| if i == 0 { -3.0 } else { 9.0 });
        let x = frames(0, 1);
        let opts = PredictOptions {
            clamp: true,
            ..Default::default()
        };
        let out = predict(&sp, &p, PredictionMode::Ncg, &x, None, &opts).unwrap();
        assert!(out.data().iter().all(|v| (0.0..=5.0).contains(v)));
    }

    #[test]
    fn mismatched_branches_rejected() {
        let sp = spec(Task::Intensity);
        let p = init_backbone(&sp, 1).unwrap();
        let mut tape = Tape::new();
        let net = Network::bind(&sp, &p, &mut tape, true).unwrap();
        let a = tape.constant(frames(0, 2));
        let b = tape.constant(frames(0, 3));
        assert!(forward_csn(&net, &mut tape, a, b, MergePoint::Stage(2), FcMergeInput::Pooled).is_err());
    }
}
