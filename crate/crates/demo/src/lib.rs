//! Browser demo: synthetic frame previews, weight tables and the
//! across/within ICC gap, compiled to WebAssembly.

use csn_core::data::synth::{generate, SynthConfig};
use csn_core::losses::{compute_weights, IntensityCounts};
use csn_core::metrics::{icc_across, icc_within, PredictionRow, PredictionSet};
use csn_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

/// Reference, target and difference images of one synthetic participant.
#[wasm_bindgen]
pub struct Preview {
    size: usize,
    reference: Vec<u8>,
    target: Vec<u8>,
    difference: Vec<u8>,
    labels: Vec<u8>,
    bias: Vec<f64>,
}

#[wasm_bindgen]
impl Preview {
    pub fn size(&self) -> usize {
        self.size
    }

    /// RGBA pixels, `size * size * 4` bytes.
    pub fn reference(&self) -> Vec<u8> {
        self.reference.clone()
    }

    pub fn target(&self) -> Vec<u8> {
        self.target.clone()
    }

    /// Target minus reference, mid-grey at zero.
    pub fn difference(&self) -> Vec<u8> {
        self.difference.clone()
    }

    /// Target intensities, one per AU.
    pub fn labels(&self) -> Vec<u8> {
        self.labels.clone()
    }

    /// Identity bias amplitude per AU for this participant.
    pub fn bias(&self) -> Vec<f64> {
        self.bias.clone()
    }
}

fn rgba(values: impl Iterator<Item = f64>) -> Vec<u8> {
    values
        .flat_map(|v| {
            let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            [g, g, g, 255]
        })
        .collect()
}

pub fn preview(seed: u64, overlap: f64, bias_strength: f64, participant: usize, frame: usize) -> Result<Preview, String> {
    let cfg = SynthConfig {
        participants: 4,
        frames: 24,
        overlap,
        bias_strength,
        seed,
        ..Default::default()
    };
    let data = generate(&cfg).map_err(|e| e.to_string())?;
    let p = participant % cfg.participants;
    let identity = &data.identities[p];
    let reference = data.dataset.reference_index(&identity.participant).map_err(|e| e.to_string())?;
    let frames = data.dataset.manifest.frames_of(&identity.participant);
    let target = frames[frame % frames.len()];
    let (r, t): (&Tensor, &Tensor) = (&data.dataset.images[reference], &data.dataset.images[target]);
    let mut bias = vec![0.0; cfg.num_aus];
    for b in &identity.blobs {
        bias[b.au] += b.amplitude;
    }
    Ok(Preview {
        size: cfg.image_size,
        reference: rgba(r.data().iter().copied()),
        target: rgba(t.data().iter().copied()),
        difference: rgba(t.data().iter().zip(r.data()).map(|(a, b)| 0.5 + (a - b))),
        labels: data.dataset.manifest.records[target].intensities.clone(),
        bias,
    })
}

#[wasm_bindgen]
pub fn synth_preview(seed: u64, overlap: f64, bias_strength: f64, participant: usize, frame: usize) -> Result<Preview, JsError> {
    preview(seed, overlap, bias_strength, participant, frame).map_err(|e| JsError::new(&e))
}

/// Parses six comma-separated counts (intensities 0..=5) and renders the
/// regression, ordinal and detection weights as a text table.
pub fn weight_table_text(counts: &str) -> Result<String, String> {
    let parsed: Vec<i64> = counts
        .split(',')
        .map(|c| c.trim().parse::<i64>().map_err(|_| format!("bad count `{}`", c.trim())))
        .collect::<Result<_, _>>()?;
    let row: [i64; 6] = parsed
        .try_into()
        .map_err(|v: Vec<i64>| format!("expected 6 counts, got {}", v.len()))?;
    let t = compute_weights(&IntensityCounts::new(vec![row]).map_err(|e| e.to_string())?);
    let mut out = String::from("intensity  count  regression\n");
    for (j, (n, w)) in row.iter().zip(&t.reg[0]).enumerate() {
        out.push_str(&format!("{j:>9}  {n:>5}  {w:>10.4}\n"));
    }
    out.push_str("\nthreshold  w(y<j)  w(y>=j)\n");
    for (j, w) in t.class[0].iter().enumerate() {
        out.push_str(&format!("{:>9}  {:>6.4}  {:>7.4}\n", j + 1, w[0], w[1]));
    }
    out.push_str(&format!("\ndetection  absent {:.4}  present {:.4}\n", t.det[0][0], t.det[0][1]));
    Ok(out)
}

#[wasm_bindgen]
pub fn weight_table(counts: &str) -> Result<String, JsError> {
    weight_table_text(counts).map_err(|e| JsError::new(&e))
}

/// Simulated predictions with a per-participant offset of spread `bias`.
/// Returns `[across, within]` ICC for the raw predictions followed by the
/// same pair after subtracting each participant's prediction on a neutral
/// frame.
pub fn icc_gap(bias: f64, noise: f64, seed: u64) -> Result<Vec<f64>, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names = vec!["1".to_string()];
    let (mut raw, mut calibrated) = (PredictionSet::new(names.clone()), PredictionSet::new(names));
    for p in 0..12 {
        let offset = rng.random_range(-bias..=bias);
        let neutral = offset + rng.random_range(-noise..=noise);
        for f in 0..40u32 {
            let label: u8 = if rng.random_bool(0.6) { 0 } else { rng.random_range(1..=5) };
            let prediction = label as f64 + offset + rng.random_range(-noise..=noise);
            let row = |prediction| PredictionRow {
                participant: format!("p{p:02}"),
                frame: f,
                au: 0,
                label,
                prediction,
            };
            raw.push(row(prediction)).map_err(|e| e.to_string())?;
            calibrated.push(row(prediction - neutral)).map_err(|e| e.to_string())?;
        }
    }
    let mut out = Vec::with_capacity(4);
    for set in [&raw, &calibrated] {
        out.push(icc_across(set, 0).map_err(|e| e.to_string())?);
        out.push(icc_within(set, 0).map_err(|e| e.to_string())?);
    }
    Ok(out)
}

#[wasm_bindgen]
pub fn icc_demo(bias: f64, noise: f64, seed: u64) -> Result<Vec<f64>, JsError> {
    icc_gap(bias, noise, seed).map_err(|e| JsError::new(&e))
}
