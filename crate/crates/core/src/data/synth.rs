//! Synthetic faces with identity attributes that mimic AU signatures.
//!
//! Each AU owns a fixed Gaussian bump. Each identity gets a smooth base
//! pattern plus a few static bias blobs; a blob is
//! `amplitude * (overlap * P_j + (1 - overlap) * Q_b)` where `P_j` is an AU
//! signature and `Q_b` is a random bump projected orthogonal to every
//! signature. A frame adds `sum_j (y_j / 5) * P_j` and Gaussian pixel noise.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{container, Dataset, DatasetManifest, FrameRecord};
use crate::error::{Error, Result};
use crate::losses::MAX_INTENSITY;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub participants: usize,
    pub frames: usize,
    pub image_size: usize,
    pub num_aus: usize,
    pub bias_blobs: usize,
    /// How much of each bias blob is an AU signature, in [0, 1].
    pub overlap: f64,
    /// Probability of intensity 0, in (0, 1).
    pub zero_inflation: f64,
    /// Geometric ratio of P(k+1) / P(k) for k in 1..5.
    pub decay: f64,
    pub noise: f64,
    /// Upper bound of the uniform bias blob amplitude.
    pub bias_strength: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            participants: 12,
            frames: 200,
            image_size: 32,
            num_aus: 6,
            bias_blobs: 3,
            overlap: 0.7,
            zero_inflation: 0.7,
            decay: 0.5,
            noise: 0.05,
            bias_strength: 0.6,
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synth: {m}")));
        if self.participants == 0 || self.frames == 0 || self.num_aus == 0 {
            return bad("participants, frames and num_aus must be positive");
        }
        if self.image_size < 8 {
            return bad("image_size must be at least 8");
        }
        if !(0.0..=1.0).contains(&self.overlap) {
            return bad("overlap must lie in [0, 1]");
        }
        if !(self.zero_inflation > 0.0 && self.zero_inflation < 1.0) {
            return bad("zero_inflation must lie in (0, 1)");
        }
        if !(self.decay > 0.0 && self.decay.is_finite()) {
            return bad("decay must be positive");
        }
        if !(self.noise >= 0.0 && self.bias_strength >= 0.0) {
            return bad("noise and bias_strength must be nonnegative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BiasBlob {
    pub au: usize,
    pub amplitude: f64,
}

#[derive(Clone, Debug)]
pub struct Identity {
    pub participant: String,
    pub base: Tensor,
    /// Sum of all bias blobs.
    pub bias: Tensor,
    pub blobs: Vec<BiasBlob>,
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub config: SynthConfig,
    pub dataset: Dataset,
    /// One `[1, H, W]` pattern per AU.
    pub signatures: Vec<Tensor>,
    pub identities: Vec<Identity>,
}

fn bump(size: usize, cy: f64, cx: f64, sigma: f64, amp: f64) -> Vec<f64> {
    (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f64, (i % size) as f64);
            amp * (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * sigma * sigma)).exp()
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// AU signature bumps evenly spaced on a ring around the image centre.
pub fn au_signatures(size: usize, num_aus: usize) -> Vec<Tensor> {
    let c = (size as f64 - 1.0) / 2.0;
    let radius = 0.28 * size as f64;
    let sigma = size as f64 / 10.0;
    (0..num_aus)
        .map(|j| {
            let a = std::f64::consts::TAU * j as f64 / num_aus as f64;
            let data = bump(size, c + radius * a.sin(), c + radius * a.cos(), sigma, 1.0);
            Tensor::new(vec![1, size, size], data).expect("valid shape")
        })
        .collect()
}

/// Orthonormal basis of the span of `patterns` (modified Gram-Schmidt).
fn orthonormal_basis(patterns: &[Tensor]) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for p in patterns {
        let mut v = p.data().to_vec();
        for b in &basis {
            let c = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
        }
        let n = dot(&v, &v).sqrt();
        if n > 1e-9 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

/// Fraction of the pattern's energy inside the span of the AU signatures.
pub fn signature_alignment(pattern: &Tensor, signatures: &[Tensor]) -> f64 {
    let total = dot(pattern.data(), pattern.data());
    if total == 0.0 {
        return 0.0;
    }
    let inside: f64 = orthonormal_basis(signatures)
        .iter()
        .map(|b| dot(pattern.data(), b).powi(2))
        .sum();
    inside / total
}

/// Draws one zero-inflated intensity.
pub fn sample_intensity<R: Rng + ?Sized>(rng: &mut R, zero_inflation: f64, decay: f64) -> u8 {
    if rng.random::<f64>() < zero_inflation {
        return 0;
    }
    let weights: Vec<f64> = (0..MAX_INTENSITY as i32).map(|k| decay.powi(k)).collect();
    let mut u = rng.random::<f64>() * weights.iter().sum::<f64>();
    for (k, w) in weights.iter().enumerate() {
        if u < *w {
            return k as u8 + 1;
        }
        u -= w;
    }
    MAX_INTENSITY
}

pub fn participant_id(i: usize, total: usize) -> String {
    let width = total.saturating_sub(1).to_string().len().max(2);
    format!("p{i:0width$}")
}

pub const CONTAINER_FILE: &str = "images.csnt";

pub fn generate(cfg: &SynthConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let size = cfg.image_size;
    let sf = size as f64;
    let signatures = au_signatures(size, cfg.num_aus);
    let basis = orthonormal_basis(&signatures);
    let sig_norm = dot(signatures[0].data(), signatures[0].data()).sqrt();
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::Config(format!("synth noise: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let au_names: Vec<String> = (1..=cfg.num_aus).map(|j| j.to_string()).collect();
    let mut records = Vec::with_capacity(cfg.participants * cfg.frames);
    let mut images = Vec::with_capacity(cfg.participants * cfg.frames);
    let mut identities = Vec::with_capacity(cfg.participants);
    for p in 0..cfg.participants {
        let participant = participant_id(p, cfg.participants);
        let mut base = vec![0.3; size * size];
        for _ in 0..3 {
            let b = bump(
                size,
                rng.random_range(0.0..sf),
                rng.random_range(0.0..sf),
                rng.random_range(sf / 8.0..sf / 4.0),
                rng.random_range(-0.3..0.3),
            );
            base.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
        }
        let mut bias = vec![0.0; size * size];
        let mut blobs = Vec::with_capacity(cfg.bias_blobs);
        for _ in 0..cfg.bias_blobs {
            let au = rng.random_range(0..cfg.num_aus);
            let amplitude = rng.random_range(0.0..=1.0) * cfg.bias_strength;
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let mut q = bump(
                size,
                rng.random_range(0.0..sf),
                rng.random_range(0.0..sf),
                sf / 10.0,
                sign,
            );
            for b in &basis {
                let c = dot(&q, b);
                q.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
            }
            let qn = dot(&q, &q).sqrt();
            let q_scale = if qn > 1e-12 { sig_norm / qn } else { 0.0 };
            let sig = signatures[au].data();
            for ((x, s), qv) in bias.iter_mut().zip(sig).zip(&q) {
                *x += amplitude * (cfg.overlap * s + (1.0 - cfg.overlap) * qv * q_scale);
            }
            blobs.push(BiasBlob { au, amplitude });
        }

        for f in 0..cfg.frames {
            let y: Vec<u8> = if f == 0 {
                vec![0; cfg.num_aus]
            } else {
                (0..cfg.num_aus)
                    .map(|_| sample_intensity(&mut rng, cfg.zero_inflation, cfg.decay))
                    .collect()
            };
            let mut img: Vec<f64> = base.iter().zip(&bias).map(|(a, b)| a + b).collect();
            for (j, &yj) in y.iter().enumerate() {
                if yj > 0 {
                    let w = yj as f64 / MAX_INTENSITY as f64;
                    img.iter_mut().zip(signatures[j].data()).for_each(|(x, s)| *x += w * s);
                }
            }
            if cfg.noise > 0.0 {
                img.iter_mut().for_each(|x| *x += noise.sample(&mut rng));
            }
            // Storage is f32; round here so in-memory and on-disk data agree.
            let img: Vec<f64> = img.into_iter().map(|v| v as f32 as f64).collect();
            records.push(FrameRecord {
                participant: participant.clone(),
                frame: f as u32,
                image: format!("{CONTAINER_FILE}#{participant}/f{f:04}"),
                is_reference: false,
                intensities: y,
            });
            images.push(Tensor::new(vec![1, size, size], img)?);
        }
        identities.push(Identity {
            participant,
            base: Tensor::new(vec![1, size, size], base)?,
            bias: Tensor::new(vec![1, size, size], bias)?,
            blobs,
        });
    }

    let provenance = format!("synthetic dataset; config {}", serde_json::to_string(cfg)?);
    let manifest = DatasetManifest {
        au_names,
        records,
        provenance,
    };
    Ok(SyntheticData {
        config: cfg.clone(),
        dataset: Dataset::new(manifest, images)?,
        signatures,
        identities,
    })
}

/// Writes `manifest.csv` and the image container into `dir`, returning the
/// manifest path.
pub fn write(data: &SyntheticData, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let entries: Vec<(String, Tensor)> = data
        .dataset
        .manifest
        .records
        .iter()
        .zip(&data.dataset.images)
        .map(|(r, img)| {
            let entry = r.image.split_once('#').expect("container reference").1;
            (entry.to_string(), img.clone())
        })
        .collect();
    container::save(&dir.join(CONTAINER_FILE), &entries)?;
    let path = dir.join("manifest.csv");
    std::fs::write(&path, data.dataset.manifest.to_csv()).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
