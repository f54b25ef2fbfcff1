//! Finite-difference check of a whole network's loss gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{init_backbone, BackboneSpec, Network};
use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use crate::losses::{batch_loss, compute_weights, IntensityCounts, LabelBatch, MAX_INTENSITY};
use crate::siamese::{forward_csn, FcMergeInput, MergePoint};
use crate::tensor::Tensor;

/// Checks d(loss)/d(params) for the plain backbone (`merge = None`) or a
/// Siamese graph on a small random batch with the task's training loss.
pub fn check_network(
    spec: &BackboneSpec,
    merge: Option<MergePoint>,
    batch: usize,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let params = init_backbone(spec, opts.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
    let (c, h, w) = spec.input;
    let mut image = || Tensor::from_fn(vec![batch, c, h, w], |_| rng.random_range(-1.0..1.0));
    let x = image();
    let r = image();
    let labels: Vec<Vec<u8>> = (0..batch)
        .map(|_| (0..spec.num_aus).map(|_| rng.random_range(0..=MAX_INTENSITY)).collect())
        .collect();
    let counts = IntensityCounts::from_labels(spec.num_aus, labels.iter().map(Vec::as_slice))?;
    let weights = compute_weights(&counts);
    let labels = LabelBatch::from_rows(&labels)?;
    let named = params.named_tensors();
    let mut report = grad_check(
        &named,
        |tape, vars| {
            let net = Network::bind_vars(spec, &params, vars.to_vec())?;
            let xv = tape.constant(x.clone());
            let head = match merge {
                Some(m) => {
                    let rv = tape.constant(r.clone());
                    forward_csn(&net, tape, xv, rv, m, FcMergeInput::Pooled)?
                }
                None => net.forward(tape, xv)?,
            };
            batch_loss(tape, spec.task, &labels, head, &weights)
        },
        opts,
    )?;
    let label = merge.map_or("plain".to_string(), |m| format!("csn:{m}"));
    for t in &mut report.tensors {
        t.name = format!("{label}/{}", t.name);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{StageSpec, Task};

    #[test]
    fn small_csn_gradients_match() {
        let spec = BackboneSpec {
            input: (1, 8, 8),
            stages: vec![StageSpec { channels: 2, blocks: 1 }, StageSpec { channels: 3, blocks: 1 }],
            hidden: 4,
            num_aus: 2,
            task: Task::Intensity,
        };
        let opts = GradCheckOptions {
            max_coords_per_tensor: Some(6),
            ..Default::default()
        };
        for merge in [None, Some(MergePoint::Stage(2)), Some(MergePoint::Output)] {
            let r = check_network(&spec, merge, 2, &opts).unwrap();
            assert!(r.passed(), "{r}");
        }
    }
}
