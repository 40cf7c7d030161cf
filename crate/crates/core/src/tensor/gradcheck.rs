use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::CounterRng;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(1e-8, |analytic| + |numeric|)`.
    pub max_rel_error: f64,
    /// (input index, flat element index) of the worst coordinate.
    pub worst: (usize, usize),
    /// Analytic and numeric derivative at `worst`.
    pub worst_values: (f64, f64),
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares reverse-mode gradients of a scalar `f64` function with central
/// differences of step `step`. `f` must be deterministic.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, step: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    finite_diff_check_many(f, std::slice::from_ref(x), step, None, 0)
}

/// Multi-input form. With `max_coords = Some(m)`, each input is checked on at
/// most `m` coordinates drawn by `sample_seed`.
pub fn finite_diff_check_many<F>(
    mut f: F,
    inputs: &[Tensor<f64>],
    step: f64,
    max_coords: Option<usize>,
    sample_seed: u64,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let mut eval = |values: &[Tensor<f64>], want_grad: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone(), want_grad)).collect();
        let out = f(&mut tape, &vars)?;
        let value = tape.value(out).data()[0];
        if !want_grad {
            return Ok((value, Vec::new()));
        }
        let mut grads = tape.backward(out)?;
        let g = vars
            .iter()
            .zip(values)
            .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros_like(t)))
            .collect();
        Ok((value, g))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut work = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        worst_values: (0.0, 0.0),
        checked: 0,
    };
    for (which, input) in inputs.iter().enumerate() {
        let coords: Vec<usize> = match max_coords {
            Some(m) if m < input.len() => {
                let mut idx: Vec<usize> = (0..input.len()).collect();
                CounterRng::new(sample_seed, which as u64).shuffle(&mut idx);
                idx.truncate(m);
                idx.sort_unstable();
                idx
            }
            _ => (0..input.len()).collect(),
        };
        for i in coords {
            let orig = input.data()[i];
            work[which].data_mut()[i] = orig + step;
            let (plus, _) = eval(&work, false)?;
            work[which].data_mut()[i] = orig - step;
            let (minus, _) = eval(&work, false)?;
            work[which].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(analytic[which].data()[i], numeric);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (which, i);
                report.worst_values = (analytic[which].data()[i], numeric);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
