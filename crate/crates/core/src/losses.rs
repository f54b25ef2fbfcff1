//! Training objectives for AU intensity estimation and AU detection, and the
//! inverse-frequency weight tables they use.
//!
//! Intensity estimation sums three per-sample terms:
//!
//! * weighted squared error `Σ_i w[i][y_i] (y_i - reg_i)^2`, with the weights
//!   binned into intensities {0, 1} and {2..5};
//! * cosine loss `1 - <y, reg> / (|y| |reg| + 1e-8)` (0 when `y` is all
//!   zero);
//! * weighted binary cross-entropy over the five ordinal thresholds
//!   `y_i >= j`.
//!
//! Detection is a weighted binary cross-entropy on `y_i >= 2`. Batches
//! average the per-sample losses.

use serde::{Deserialize, Serialize};

use crate::backbone::{HeadOutputs, HeadVars, Task, ORDINAL_LEVELS};
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const MAX_INTENSITY: u8 = 5;
/// Intensities at or above this count as an occurrence.
pub const OCCURRENCE_THRESHOLD: u8 = 2;
pub const COS_EPS: f64 = 1e-8;
pub const PROB_EPS: f64 = 1e-12;

/// Per-AU occurrence counts of each intensity 0..=5.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntensityCounts {
    counts: Vec<[u64; 6]>,
}

impl IntensityCounts {
    pub fn new(counts: Vec<[i64; 6]>) -> Result<Self> {
        let counts = counts
            .into_iter()
            .map(|row| {
                let mut out = [0u64; 6];
                for (o, &c) in out.iter_mut().zip(&row) {
                    *o = u64::try_from(c).map_err(|_| Error::Data(format!("negative count in {row:?}")))?;
                }
                Ok(out)
            })
            .collect::<Result<_>>()?;
        Ok(IntensityCounts { counts })
    }

    /// Tallies label rows (one intensity per AU).
    pub fn from_labels<'a>(num_aus: usize, rows: impl IntoIterator<Item = &'a [u8]>) -> Result<Self> {
        let mut counts = vec![[0u64; 6]; num_aus];
        for row in rows {
            if row.len() != num_aus {
                return Err(Error::shape("intensity_counts", format!("{} labels for {num_aus} AUs", row.len())));
            }
            for (c, &y) in counts.iter_mut().zip(row) {
                if y > MAX_INTENSITY {
                    return Err(Error::Data(format!("intensity {y} out of range")));
                }
                c[y as usize] += 1;
            }
        }
        Ok(IntensityCounts { counts })
    }

    pub fn num_aus(&self) -> usize {
        self.counts.len()
    }

    pub fn rows(&self) -> &[[u64; 6]] {
        &self.counts
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightTables {
    /// `reg[i][j]`: squared-error weight of AU `i` at intensity `j`.
    pub reg: Vec<[f64; 6]>,
    /// `class[i][j - 1][c]`: cross-entropy weight of AU `i`, threshold `j`,
    /// class `c`.
    pub class: Vec<[[f64; 2]; ORDINAL_LEVELS]>,
    /// `det[i][c]`: detection cross-entropy weight of AU `i`, class `c`.
    pub det: Vec<[f64; 2]>,
}

impl WeightTables {
    pub fn num_aus(&self) -> usize {
        self.reg.len()
    }

    /// All-ones tables, useful for unweighted objectives.
    pub fn uniform(num_aus: usize) -> Self {
        WeightTables {
            reg: vec![[1.0; 6]; num_aus],
            class: vec![[[1.0; 2]; ORDINAL_LEVELS]; num_aus],
            det: vec![[1.0; 2]; num_aus],
        }
    }
}

fn clamped(sum: u64) -> f64 {
    sum.max(1) as f64
}

/// Inverse-frequency weights normalized within each AU. Every count sum used
/// as a denominator is clamped to at least 1.
pub fn compute_weights(counts: &IntensityCounts) -> WeightTables {
    let mut tables = WeightTables {
        reg: Vec::with_capacity(counts.num_aus()),
        class: Vec::with_capacity(counts.num_aus()),
        det: Vec::with_capacity(counts.num_aus()),
    };
    for n in counts.rows() {
        let low = clamped(n[0] + n[1]);
        let high = clamped(n[2..].iter().sum());
        let (a, b) = (2.0 / low, 4.0 / high);
        let (wa, wb) = (a / (a + b), b / (a + b));
        tables.reg.push([wa, wa, wb, wb, wb, wb]);

        let below = |j: usize| clamped(n[..j].iter().sum());
        let at_or_above = |j: usize| clamped(n[j..].iter().sum());
        let norm: f64 = (1..=ORDINAL_LEVELS).map(|j| 1.0 / below(j) + 1.0 / at_or_above(j)).sum();
        let mut class = [[0.0; 2]; ORDINAL_LEVELS];
        for (j, w) in (1..=ORDINAL_LEVELS).zip(class.iter_mut()) {
            *w = [(1.0 / below(j)) / norm, (1.0 / at_or_above(j)) / norm];
        }
        tables.class.push(class);

        let (pos, neg) = (1.0 / high, 1.0 / low);
        tables.det.push([neg / (pos + neg), pos / (pos + neg)]);
    }
    tables
}

/// Integer intensity labels for a batch, `[B, n]` row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelBatch {
    values: Vec<u8>,
    num_aus: usize,
}

impl LabelBatch {
    pub fn from_rows<R: AsRef<[u8]>>(rows: &[R]) -> Result<Self> {
        let num_aus = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        if rows.is_empty() || num_aus == 0 {
            return Err(Error::shape("labels", "empty batch"));
        }
        let mut values = Vec::with_capacity(rows.len() * num_aus);
        for r in rows {
            let r = r.as_ref();
            if r.len() != num_aus {
                return Err(Error::shape("labels", format!("rows of length {} and {num_aus}", r.len())));
            }
            if let Some(y) = r.iter().find(|&&y| y > MAX_INTENSITY) {
                return Err(Error::Data(format!("intensity {y} out of range")));
            }
            values.extend_from_slice(r);
        }
        Ok(LabelBatch { values, num_aus })
    }

    pub fn batch(&self) -> usize {
        self.values.len() / self.num_aus
    }

    pub fn num_aus(&self) -> usize {
        self.num_aus
    }

    pub fn row(&self, b: usize) -> &[u8] {
        &self.values[b * self.num_aus..(b + 1) * self.num_aus]
    }

    fn tensor(&self, f: impl Fn(usize, u8) -> f64) -> Tensor {
        let n = self.num_aus;
        let data = self.values.iter().enumerate().map(|(k, &y)| f(k % n, y)).collect();
        Tensor::new(vec![self.batch(), n], data).expect("label shape")
    }
}

fn check(tape: &Tape, op: &'static str, v: Var, labels: &LabelBatch, weights: &WeightTables, trailing: &[usize]) -> Result<()> {
    let mut want = vec![labels.batch(), labels.num_aus()];
    want.extend_from_slice(trailing);
    if tape.shape(v) != want.as_slice() {
        return Err(Error::shape(op, format!("predictions {:?}, labels imply {want:?}", tape.shape(v))));
    }
    if weights.num_aus() != labels.num_aus() {
        return Err(Error::shape(op, format!("{} weight rows for {} AUs", weights.num_aus(), labels.num_aus())));
    }
    Ok(())
}

/// Per-sample weighted squared error, `[B]`.
pub fn loss_reg_mse(tape: &mut Tape, labels: &LabelBatch, reg: Var, weights: &WeightTables) -> Result<Var> {
    check(tape, "loss_reg_mse", reg, labels, weights, &[])?;
    let y = tape.constant(labels.tensor(|_, y| y as f64));
    let w = tape.constant(labels.tensor(|i, y| weights.reg[i][y as usize]));
    let d = tape.sub(y, reg)?;
    let d2 = tape.square(d)?;
    let wd = tape.mul(d2, w)?;
    tape.sum(wd, &[1])
}

/// Per-sample cosine loss, `[B]`. Samples whose labels are all zero
/// contribute 0.
pub fn loss_reg_cos(tape: &mut Tape, labels: &LabelBatch, reg: Var) -> Result<Var> {
    let n = labels.num_aus();
    let shape = tape.shape(reg);
    if shape != [labels.batch(), n] {
        return Err(Error::shape("loss_reg_cos", format!("predictions {shape:?} for {} x {n} labels", labels.batch())));
    }
    let batch = labels.batch();
    let norms: Vec<f64> = (0..batch)
        .map(|b| labels.row(b).iter().map(|&y| (y as f64).powi(2)).sum::<f64>().sqrt())
        .collect();
    let mask = tape.constant(Tensor::new(vec![batch], norms.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect())?);
    let ynorm = tape.constant(Tensor::new(vec![batch], norms)?);
    let y = tape.constant(labels.tensor(|_, y| y as f64));

    let prod = tape.mul(reg, y)?;
    let dot = tape.sum(prod, &[1])?;
    let sq = tape.square(reg)?;
    let ss = tape.sum(sq, &[1])?;
    let rnorm = tape.sqrt(ss)?;
    let denom = tape.mul(rnorm, ynorm)?;
    let denom = tape.add_scalar(denom, COS_EPS)?;
    let ratio = tape.div(dot, denom)?;
    let neg = tape.neg(ratio)?;
    let term = tape.add_scalar(neg, 1.0)?;
    tape.mul(term, mask)
}

/// Weighted binary cross-entropy of `logits` against 0/1 `targets`, with
/// per-entry weights split by class. Returns the elementwise losses.
fn weighted_bce(tape: &mut Tape, logits: Var, targets: &Tensor, w_pos: &Tensor, w_neg: &Tensor) -> Result<Var> {
    let pos = Tensor::new(
        targets.shape().to_vec(),
        targets.data().iter().zip(w_pos.data()).map(|(&t, &w)| t * w).collect(),
    )?;
    let neg = Tensor::new(
        targets.shape().to_vec(),
        targets.data().iter().zip(w_neg.data()).map(|(&t, &w)| (1.0 - t) * w).collect(),
    )?;
    let pos = tape.constant(pos);
    let neg = tape.constant(neg);
    let p = tape.sigmoid(logits)?;
    let pc = tape.max_scalar(p, PROB_EPS)?;
    let lp = tape.log(pc)?;
    let np = tape.neg(p)?;
    let q = tape.add_scalar(np, 1.0)?;
    let qc = tape.max_scalar(q, PROB_EPS)?;
    let lq = tape.log(qc)?;
    let a = tape.mul(lp, pos)?;
    let b = tape.mul(lq, neg)?;
    let s = tape.add(a, b)?;
    tape.neg(s)
}

/// Per-sample ordinal cross-entropy over thresholds `y >= 1..5`, `[B]`.
/// `ord` has shape `[B, n, 5]`.
pub fn loss_class(tape: &mut Tape, labels: &LabelBatch, ord: Var, weights: &WeightTables) -> Result<Var> {
    check(tape, "loss_class", ord, labels, weights, &[ORDINAL_LEVELS])?;
    let (batch, n) = (labels.batch(), labels.num_aus());
    let shape = vec![batch, n, ORDINAL_LEVELS];
    let mut targets = Vec::with_capacity(batch * n * ORDINAL_LEVELS);
    let mut w_pos = Vec::with_capacity(targets.capacity());
    let mut w_neg = Vec::with_capacity(targets.capacity());
    for b in 0..batch {
        for (i, &y) in labels.row(b).iter().enumerate() {
            for j in 1..=ORDINAL_LEVELS {
                targets.push(if y as usize >= j { 1.0 } else { 0.0 });
                w_neg.push(weights.class[i][j - 1][0]);
                w_pos.push(weights.class[i][j - 1][1]);
            }
        }
    }
    let ce = weighted_bce(
        tape,
        ord,
        &Tensor::new(shape.clone(), targets)?,
        &Tensor::new(shape.clone(), w_pos)?,
        &Tensor::new(shape, w_neg)?,
    )?;
    tape.sum(ce, &[1, 2])
}

/// Per-sample intensity objective: squared error + cosine + ordinal CE.
pub fn loss_auie(tape: &mut Tape, labels: &LabelBatch, reg: Var, ord: Var, weights: &WeightTables) -> Result<Var> {
    let mse = loss_reg_mse(tape, labels, reg, weights)?;
    let cos = loss_reg_cos(tape, labels, reg)?;
    let class = loss_class(tape, labels, ord, weights)?;
    let s = tape.add(mse, cos)?;
    tape.add(s, class)
}

/// Per-sample detection cross-entropy on `y >= 2`, `[B]`.
pub fn loss_aud(tape: &mut Tape, labels: &LabelBatch, det: Var, weights: &WeightTables) -> Result<Var> {
    check(tape, "loss_aud", det, labels, weights, &[])?;
    let targets = labels.tensor(|_, y| if y >= OCCURRENCE_THRESHOLD { 1.0 } else { 0.0 });
    let w_pos = labels.tensor(|i, _| weights.det[i][1]);
    let w_neg = labels.tensor(|i, _| weights.det[i][0]);
    let ce = weighted_bce(tape, det, &targets, &w_pos, &w_neg)?;
    tape.sum(ce, &[1])
}

/// Mean of the per-sample task losses over a nonempty batch (scalar).
pub fn batch_loss(tape: &mut Tape, task: Task, labels: &LabelBatch, head: HeadVars, weights: &WeightTables) -> Result<Var> {
    let per_sample = match (task, head) {
        (Task::Intensity, HeadVars::Intensity { reg, ord }) => loss_auie(tape, labels, reg, ord, weights)?,
        (Task::Detection, HeadVars::Detection { det }) => loss_aud(tape, labels, det, weights)?,
        _ => return Err(Error::shape("batch_loss", format!("head outputs do not match task {task}"))),
    };
    tape.mean_all(per_sample)
}

/// Loss of one sample's detached head outputs.
pub fn sample_loss(labels: &[u8], head: &HeadOutputs, weights: &WeightTables) -> Result<f64> {
    let mut tape = Tape::no_grad();
    let lb = LabelBatch::from_rows(&[labels])?;
    let n = labels.len();
    let loss = match head {
        HeadOutputs::Intensity { reg, ord_logits } => {
            let r = tape.constant(Tensor::new(vec![1, n], reg.clone())?);
            let flat: Vec<f64> = ord_logits.iter().flatten().copied().collect();
            let o = tape.constant(Tensor::new(vec![1, ord_logits.len(), ORDINAL_LEVELS], flat)?);
            loss_auie(&mut tape, &lb, r, o, weights)?
        }
        HeadOutputs::Detection { det_logits } => {
            let d = tape.constant(Tensor::new(vec![1, n], det_logits.clone())?);
            loss_aud(&mut tape, &lb, d, weights)?
        }
    };
    tape.value(loss).item()
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;

    use super::*;

    fn counts(rows: Vec<[i64; 6]>) -> IntensityCounts {
        IntensityCounts::new(rows).unwrap()
    }

    #[test]
    fn binned_mse_weights_exact_fractions() {
        let w = compute_weights(&counts(vec![[60, 40, 4, 3, 2, 1]]));
        assert_relative_eq!(w.reg[0][0], 1.0 / 21.0, epsilon = 1e-15);
        assert_relative_eq!(w.reg[0][5], 20.0 / 21.0, epsilon = 1e-15);
        let w = compute_weights(&counts(vec![[5, 5, 3, 3, 2, 2]]));
        assert_relative_eq!(w.reg[0][1], 1.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(w.reg[0][2], 2.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn ordinal_weights_match_hand_value() {
        // n_{<1} = 4, n_{>=1} = 6; denominator = Σ_j (1/n_{<j} + 1/n_{>=j}).
        let w = compute_weights(&counts(vec![[4, 2, 1, 1, 1, 1]]));
        let d = 1.0 / 4.0 + 1.0 / 6.0 + 1.0 / 6.0 + 1.0 / 4.0 + 1.0 / 7.0 + 1.0 / 3.0 + 1.0 / 8.0 + 1.0 / 2.0 + 1.0 / 9.0 + 1.0;
        assert_relative_eq!(d, 3.045635, epsilon = 1e-6);
        assert_relative_eq!(w.class[0][0][1], (1.0 / 6.0) / d, epsilon = 1e-15);
        assert_relative_eq!(w.class[0][0][1], 0.054723, epsilon = 1e-6);
        let total: f64 = w.class[0].iter().flatten().sum();
        assert_relative_eq!(total, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn detection_weights_sum_to_one() {
        let w = compute_weights(&counts(vec![[70, 10, 10, 5, 3, 2]]));
        assert_relative_eq!(w.det[0][0] + w.det[0][1], 1.0, epsilon = 1e-15);
        assert!(w.det[0][1] > w.det[0][0]);
    }

    #[test]
    fn empty_counts_are_clamped() {
        let w = compute_weights(&counts(vec![[0; 6]]));
        assert!(w.reg[0].iter().chain(w.det[0].iter()).all(|v| v.is_finite()));
    }

    #[test]
    fn negative_counts_rejected() {
        assert!(IntensityCounts::new(vec![[1, 2, -1, 0, 0, 0]]).is_err());
    }

    fn run(f: impl FnOnce(&mut Tape) -> Result<Var>) -> f64 {
        let mut tape = Tape::new();
        let v = f(&mut tape).unwrap();
        let s = tape.sum_all(v).unwrap();
        tape.value(s).item().unwrap()
    }

    #[test]
    fn mse_single_au() {
        let mut w = WeightTables::uniform(1);
        w.reg[0][3] = 0.5;
        let lb = LabelBatch::from_rows(&[[3u8]]).unwrap();
        let v = run(|t| {
            let r = t.constant(Tensor::new(vec![1, 1], vec![1.0])?);
            loss_reg_mse(t, &lb, r, &w)
        });
        assert_eq!(v, 2.0);
    }

    #[test]
    fn cosine_cases() {
        let lb = LabelBatch::from_rows(&[[1u8, 0]]).unwrap();
        let cos = |pred: [f64; 2]| {
            run(|t| {
                let r = t.constant(Tensor::new(vec![1, 2], pred.to_vec())?);
                loss_reg_cos(t, &lb, r)
            })
        };
        assert_relative_eq!(cos([0.0, 1.0]), 1.0, epsilon = 1e-12);
        assert!(cos([1.0, 0.0]).abs() < 1e-7);
        assert!(cos([2.0, 0.0]).abs() < 1e-7);
        let zero = LabelBatch::from_rows(&[[0u8, 0]]).unwrap();
        let v = run(|t| {
            let r = t.constant(Tensor::new(vec![1, 2], vec![0.3, -2.0])?);
            loss_reg_cos(t, &zero, r)
        });
        assert_eq!(v, 0.0);
    }

    #[test]
    fn cosine_grad_finite_at_zero_prediction() {
        let lb = LabelBatch::from_rows(&[[0u8, 0], [2, 1]]).unwrap();
        let mut tape = Tape::new();
        let r = tape.leaf(Tensor::zeros(vec![2, 2]), true);
        let l = loss_reg_cos(&mut tape, &lb, r).unwrap();
        let s = tape.sum_all(l).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(r).unwrap().is_finite());
    }

    #[test]
    fn class_loss_at_zero_logit() {
        let mut w = WeightTables::uniform(1);
        for j in 0..5 {
            w.class[0][j] = [0.0, 0.0];
        }
        w.class[0][0][1] = 0.3;
        let lb = LabelBatch::from_rows(&[[1u8]]).unwrap();
        let v = run(|t| {
            let o = t.constant(Tensor::zeros(vec![1, 1, 5]));
            loss_class(t, &lb, o, &w)
        });
        assert_relative_eq!(v, 0.3 * std::f64::consts::LN_2, epsilon = 1e-15);
    }

    #[test]
    fn confident_correct_logits_near_zero() {
        let w = WeightTables::uniform(2);
        let lb = LabelBatch::from_rows(&[[2u8, 5]]).unwrap();
        let v = run(|t| {
            let logits: Vec<f64> = [2usize, 5]
                .iter()
                .flat_map(|&y| (1..=5).map(move |j| if y >= j { 30.0 } else { -30.0 }))
                .collect();
            let o = t.constant(Tensor::new(vec![1, 2, 5], logits)?);
            loss_class(t, &lb, o, &w)
        });
        assert!(v < 1e-10, "{v}");
    }

    #[test]
    fn detection_intensity_two_is_occurrence() {
        let w = WeightTables::uniform(1);
        let lb = LabelBatch::from_rows(&[[2u8]]).unwrap();
        let v = run(|t| {
            let d = t.constant(Tensor::new(vec![1, 1], vec![30.0])?);
            loss_aud(t, &lb, d, &w)
        });
        assert!(v < 1e-10);
        let v0 = run(|t| {
            let d = t.constant(Tensor::new(vec![1, 1], vec![0.0])?);
            loss_aud(t, &lb, d, &w)
        });
        assert_relative_eq!(v0, std::f64::consts::LN_2, epsilon = 1e-15);
    }

    #[test]
    fn perfect_intensity_prediction_is_zero() {
        let w = compute_weights(&counts(vec![[10, 3, 2, 1, 1, 1]; 3]));
        let y = [0u8, 3, 5];
        let head = HeadOutputs::Intensity {
            reg: y.iter().map(|&v| v as f64).collect(),
            ord_logits: y
                .iter()
                .map(|&v| {
                    let mut o = [0.0; 5];
                    for (j, x) in o.iter_mut().enumerate() {
                        *x = if v as usize > j { 40.0 } else { -40.0 };
                    }
                    o
                })
                .collect(),
        };
        assert!(sample_loss(&y, &head, &w).unwrap() < 1e-7);
    }

    #[test]
    fn batch_mean_of_identical_samples() {
        let w = WeightTables::uniform(2);
        let single = LabelBatch::from_rows(&[[1u8, 3]]).unwrap();
        let double = LabelBatch::from_rows(&[[1u8, 3], [1, 3]]).unwrap();
        let eval = |lb: &LabelBatch, b: usize| {
            let mut t = Tape::new();
            let d = t.constant(Tensor::from_fn(vec![b, 2], |i| [0.4, -1.2][i % 2]));
            let l = batch_loss(&mut t, Task::Detection, lb, HeadVars::Detection { det: d }, &w).unwrap();
            t.value(l).item().unwrap()
        };
        assert_relative_eq!(eval(&single, 1), eval(&double, 2), epsilon = 1e-15);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let w = WeightTables::uniform(2);
        let lb = LabelBatch::from_rows(&[[1u8, 3]]).unwrap();
        let mut t = Tape::new();
        let r = t.constant(Tensor::zeros(vec![1, 3]));
        assert!(loss_reg_mse(&mut t, &lb, r, &w).is_err());
        assert!(LabelBatch::from_rows::<[u8; 0]>(&[]).is_err());
        assert!(LabelBatch::from_rows(&[[6u8]]).is_err());
    }
}
