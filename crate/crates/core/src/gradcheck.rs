//! Central finite-difference validation of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many coordinates per tensor (sampled with `seed`).
    pub max_coords_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tolerance: 1e-4,
            max_coords_per_tensor: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub numel: usize,
    pub checked: usize,
    /// Coordinates whose ±step perturbation crossed a relu/max kink.
    pub skipped: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }

    pub fn skipped(&self) -> usize {
        self.tensors.iter().map(|t| t.skipped).sum()
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.tensors.extend(other.tensors);
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{:<40} {:>8} {:>8} {:>8} {:>12}", "tensor", "numel", "checked", "skipped", "max_rel_err")?;
        for t in &self.tensors {
            writeln!(
                f,
                "{:<40} {:>8} {:>8} {:>8} {:>12.3e}",
                t.name, t.numel, t.checked, t.skipped, t.max_rel_error
            )?;
        }
        write!(
            f,
            "max relative error {:.3e} (tolerance {:.0e}): {}",
            self.max_rel_error(),
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

/// Compares the tape gradient of `build` with respect to each named tensor
/// against central differences.
///
/// `build` receives a fresh tape and one leaf per entry of `params` (in
/// order) and must return a scalar loss. The error measure is
/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(params: &[(String, Tensor)], build: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let run = |values: &[Tensor], record: bool| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = if record { Tape::new() } else { Tape::no_grad() };
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let loss = build(&mut tape, &vars)?;
        let v = tape.value(loss).item()?;
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        Ok((tape, vars, loss))
    };

    let mut values: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let (mut tape, vars, loss) = run(&values, true)?;
    tape.backward(loss)?;
    let base_sig = tape.kink_signature();
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(&values)
        .map(|(&v, t)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut tensors = Vec::with_capacity(params.len());
    for (p, (name, tensor)) in params.iter().enumerate() {
        let numel = tensor.numel();
        let coords: Vec<usize> = match opts.max_coords_per_tensor {
            Some(m) if m < numel => {
                let mut c = sample(&mut rng, numel, m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..numel).collect(),
        };
        let mut check = TensorCheck {
            name: name.clone(),
            numel,
            checked: 0,
            skipped: 0,
            max_rel_error: 0.0,
        };
        for &i in &coords {
            let orig = values[p].data()[i];
            values[p].data_mut()[i] = orig + opts.step;
            let (tp, _, lp) = run(&values, false)?;
            let plus = tp.value(lp).item()?;
            let sig_plus = tp.kink_signature();
            values[p].data_mut()[i] = orig - opts.step;
            let (tm, _, lm) = run(&values, false)?;
            let minus = tm.value(lm).item()?;
            let sig_minus = tm.kink_signature();
            values[p].data_mut()[i] = orig;

            if sig_plus != base_sig || sig_minus != base_sig {
                check.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * opts.step);
            let err = (analytic[p].data()[i] - numeric).abs() / numeric.abs().max(1.0);
            check.max_rel_error = check.max_rel_error.max(err);
            check.checked += 1;
        }
        tensors.push(check);
    }
    Ok(GradCheckReport {
        tolerance: opts.tolerance,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_regression_is_exact_to_1e6() {
        let x = Tensor::from_fn(vec![5, 3], |i| (i as f64 * 0.37).sin());
        let y = Tensor::from_fn(vec![5, 1], |i| i as f64 * 0.2 - 0.3);
        let params = vec![
            ("w".to_string(), Tensor::from_fn(vec![3, 1], |i| 0.1 * i as f64 - 0.2)),
            ("b".to_string(), Tensor::scalar(0.05)),
        ];
        let report = grad_check(
            &params,
            |tape, v| {
                let xv = tape.constant(x.clone());
                let yv = tape.constant(y.clone());
                let pred = tape.matmul(xv, v[0])?;
                let pred = tape.add(pred, v[1])?;
                let r = tape.sub(pred, yv)?;
                let r = tape.square(r)?;
                tape.mean_all(r)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error() < 1e-6, "{report}");
        assert_eq!(report.skipped(), 0);
    }

    #[test]
    fn relu_at_exact_zero_is_skipped() {
        let params = vec![("x".to_string(), Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap())];
        let report = grad_check(
            &params,
            |tape, v| {
                let r = tape.relu(v[0])?;
                tape.sum_all(r)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(report.tensors[0].skipped, 1);
        assert_eq!(report.tensors[0].checked, 2);
        assert!(report.passed());
    }

    #[test]
    fn sampling_limits_checked_coordinates() {
        let params = vec![("x".to_string(), Tensor::from_fn(vec![100], |i| i as f64 * 0.01))];
        let opts = GradCheckOptions {
            max_coords_per_tensor: Some(7),
            ..Default::default()
        };
        let report = grad_check(
            &params,
            |tape, v| {
                let s = tape.square(v[0])?;
                tape.sum_all(s)
            },
            &opts,
        )
        .unwrap();
        assert_eq!(report.tensors[0].checked, 7);
    }
}
