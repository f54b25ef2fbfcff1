//! Minibatch training of the plain backbone and of Siamese variants.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backbone::{init_backbone, BackboneSpec, Network, ParamStore};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{batch_loss, LabelBatch, WeightTables};
use crate::optim::{AdamConfig, OptimState};
use crate::siamese::{forward_csn, FcMergeInput, MergePoint};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// One training item: a target record and, for Siamese models, the record
/// of its participant's reference frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Sample {
    pub target: usize,
    pub reference: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainLog {
    pub model: String,
    pub samples: usize,
    pub epochs: Vec<EpochLog>,
}

#[derive(Clone, Debug)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optim: AdamConfig,
    pub fc_input: FcMergeInput,
}

/// Visiting order of `n` samples in `epoch`, derived from `(seed, epoch)`
/// alone so that a resumed run replays the same batches.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn inputs(data: &Dataset, batch: &[Sample]) -> Result<(Tensor, Option<Tensor>, LabelBatch)> {
    let targets: Vec<usize> = batch.iter().map(|s| s.target).collect();
    let x = data.batch(&targets)?;
    let refs: Option<Vec<usize>> = batch.iter().map(|s| s.reference).collect();
    let r = match refs {
        Some(r) => Some(data.batch(&r)?),
        None => None,
    };
    let rows: Vec<&[u8]> = targets
        .iter()
        .map(|&i| data.manifest.records[i].intensities.as_slice())
        .collect();
    Ok((x, r, LabelBatch::from_rows(&rows)?))
}

/// Builds the batch loss on `tape` and returns it with the parameter leaves.
#[allow(clippy::too_many_arguments)]
fn batch_graph(
    tape: &mut Tape,
    spec: &BackboneSpec,
    params: &ParamStore,
    data: &Dataset,
    batch: &[Sample],
    merge: Option<MergePoint>,
    weights: &WeightTables,
    fc_input: FcMergeInput,
    trainable: bool,
) -> Result<(crate::tape::Var, Vec<crate::tape::Var>)> {
    let (x, r, labels) = inputs(data, batch)?;
    let net = Network::bind(spec, params, tape, trainable)?;
    let xv = tape.constant(x);
    let head = match (merge, r) {
        (Some(m), Some(r)) => {
            let rv = tape.constant(r);
            forward_csn(&net, tape, xv, rv, m, fc_input)?
        }
        (Some(_), None) => return Err(Error::Data("Siamese training sample without a reference".into())),
        (None, _) => net.forward(tape, xv)?,
    };
    let loss = batch_loss(tape, spec.task, &labels, head, weights)?;
    Ok((loss, net.vars().to_vec()))
}

/// Trains from a seeded initialization. `merge = None` trains the plain
/// backbone on single frames.
pub fn train(
    spec: &BackboneSpec,
    data: &Dataset,
    samples: &[Sample],
    merge: Option<MergePoint>,
    weights: &WeightTables,
    settings: &TrainSettings,
) -> Result<(ParamStore, TrainLog)> {
    if samples.is_empty() {
        return Err(Error::Data("empty training split".into()));
    }
    let mut params = init_backbone(spec, settings.seed)?;
    let mut opt = OptimState::new(settings.optim.clone(), &params)?;
    let mut log = TrainLog {
        model: merge.map_or("plain".to_string(), |m| format!("csn:{m}")),
        samples: samples.len(),
        epochs: Vec::with_capacity(settings.epochs),
    };
    for epoch in 0..settings.epochs {
        let order = epoch_order(settings.seed, epoch, samples.len());
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(settings.batch_size) {
            let batch: Vec<Sample> = chunk.iter().map(|&i| samples[i]).collect();
            let mut tape = Tape::new();
            let (loss, vars) = batch_graph(
                &mut tape,
                spec,
                &params,
                data,
                &batch,
                merge,
                weights,
                settings.fc_input,
                true,
            )?;
            total += tape.value(loss).item()? * batch.len() as f64;
            tape.backward(loss)?;
            let grads: Vec<Tensor> = vars
                .iter()
                .zip(params.iter())
                .map(|(&v, p)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(p.tensor.shape().to_vec())))
                .collect();
            drop(tape);
            opt.step(&mut params, &grads)?;
            steps += 1;
        }
        log.epochs.push(EpochLog {
            epoch,
            steps,
            mean_loss: total / samples.len() as f64,
        });
    }
    Ok((params, log))
}

/// Mean per-sample loss without recording gradients.
#[allow(clippy::too_many_arguments)]
pub fn mean_loss(
    spec: &BackboneSpec,
    params: &ParamStore,
    data: &Dataset,
    samples: &[Sample],
    merge: Option<MergePoint>,
    weights: &WeightTables,
    fc_input: FcMergeInput,
    batch_size: usize,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Data("mean loss of no samples".into()));
    }
    let mut total = 0.0;
    for chunk in samples.chunks(batch_size.max(1)) {
        let mut tape = Tape::no_grad();
        let (loss, _) = batch_graph(&mut tape, spec, params, data, chunk, merge, weights, fc_input, false)?;
        total += tape.value(loss).item()? * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}
