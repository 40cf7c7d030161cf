//! Masked focal loss, batch-level dice loss and their weighted sum.
//!
//! Both losses read class probabilities `[N, K, H, W]` and per-cell labels
//! `[N, H, W]`. A cell contributes only when its mask entry is `true` and its
//! label is not [`INVALID_LABEL`].

use crate::error::{Error, Result};
use crate::tensor::{GradFn, Scalar, Tape, Tensor, Var};

pub const INVALID_LABEL: u8 = 255;
const PROB_FLOOR: f64 = 1e-7;
/// Classes whose predicted mass stays below this, and which are absent from
/// the labels, are left out of the dice average.
const DICE_MASS_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub epsilon: f64,
    pub lambda_fl: f64,
    pub lambda_dice: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            gamma: 2.0,
            epsilon: 1.0,
            lambda_fl: 1.0,
            lambda_dice: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.gamma >= 0.0
            && self.epsilon > 0.0
            && self.alpha >= 0.0
            && self.lambda_fl >= 0.0
            && self.lambda_dice >= 0.0
            && (self.lambda_fl > 0.0 || self.lambda_dice > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid loss config {self:?}")))
        }
    }
}

/// Component values of the last combined loss, for logging.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossComponents {
    pub total: f64,
    pub focal: f64,
    pub dice: f64,
}

struct Layout {
    n: usize,
    k: usize,
    hw: usize,
    /// Per (n, cell): true class when the cell counts.
    target: Vec<Option<usize>>,
    valid: usize,
}

fn layout<T: Scalar>(probs: &Tensor<T>, labels: &[u8], mask: &[bool]) -> Result<Layout> {
    let [n, k, h, w] = probs.dims4()?;
    let hw = h * w;
    if labels.len() != n * hw || mask.len() != n * hw {
        return Err(Error::ShapeMismatch {
            op: "loss labels",
            left: vec![n, h, w],
            right: vec![labels.len(), mask.len()],
        });
    }
    let mut target = Vec::with_capacity(n * hw);
    let mut valid = 0;
    for (&l, &m) in labels.iter().zip(mask) {
        if m && l != INVALID_LABEL {
            if l as usize >= k {
                return Err(Error::invalid(format!("label {l} out of range for {k} classes")));
            }
            target.push(Some(l as usize));
            valid += 1;
        } else {
            target.push(None);
        }
    }
    if valid == 0 {
        return Err(Error::NoValidCells("every cell of the batch is masked".into()));
    }
    Ok(Layout {
        n,
        k,
        hw,
        target,
        valid,
    })
}

struct FocalGrad {
    layout: Layout,
    alpha: f64,
    gamma: f64,
}

impl<T: Scalar> GradFn<T> for FocalGrad {
    fn name(&self) -> &'static str {
        "focal_loss"
    }

    fn backward(
        &self,
        grad: &Tensor<T>,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        _wants: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let l = &self.layout;
        let probs = inputs[0].data();
        let scale = grad.data()[0].as_f64() * self.alpha / l.valid as f64;
        let mut d = vec![T::zero(); probs.len()];
        for b in 0..l.n {
            for p in 0..l.hw {
                let Some(c) = l.target[b * l.hw + p] else {
                    continue;
                };
                let i = (b * l.k + c) * l.hw + p;
                let raw = probs[i].as_f64();
                if !(PROB_FLOOR..=1.0 - PROB_FLOOR).contains(&raw) {
                    continue; // clamped: flat
                }
                let q = 1.0 - raw;
                // d/dp [ -(1-p)^γ ln p ] = γ(1-p)^(γ-1) ln p − (1-p)^γ / p
                let lead = if self.gamma == 0.0 {
                    0.0
                } else {
                    self.gamma * q.powf(self.gamma - 1.0) * raw.ln()
                };
                d[i] = T::lift(scale * (lead - q.powf(self.gamma) / raw));
            }
        }
        Ok(vec![Some(inputs[0].with_data(d))])
    }
}

/// Mean over counted cells of `α (1 − p)^γ (−ln p)`, with `p` the probability
/// of the true class clamped to `[1e-7, 1 − 1e-7]`.
pub fn focal_loss<T: Scalar>(
    tape: &mut Tape<T>,
    probs: Var,
    labels: &[u8],
    mask: &[bool],
    config: &LossConfig,
) -> Result<Var> {
    config.validate()?;
    let pv = tape.value(probs);
    let layout = layout(pv, labels, mask)?;
    let d = pv.data();
    let mut total = 0.0f64;
    for b in 0..layout.n {
        for p in 0..layout.hw {
            if let Some(c) = layout.target[b * layout.hw + p] {
                let prob = d[(b * layout.k + c) * layout.hw + p]
                    .as_f64()
                    .clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
                total += config.alpha * (1.0 - prob).powf(config.gamma) * -prob.ln();
            }
        }
    }
    let value = total / layout.valid as f64;
    tape.push(
        Tensor::from_vec(&[1], vec![T::lift(value)])?,
        &[probs],
        Box::new(FocalGrad {
            layout,
            alpha: config.alpha,
            gamma: config.gamma,
        }),
    )
}

struct DiceGrad {
    layout: Layout,
    /// Per class: `Some((intersection, denominator))` when the class is averaged.
    terms: Vec<Option<(f64, f64)>>,
    active: usize,
    epsilon: f64,
}

impl<T: Scalar> GradFn<T> for DiceGrad {
    fn name(&self) -> &'static str {
        "dice_loss"
    }

    fn backward(
        &self,
        grad: &Tensor<T>,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        _wants: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let l = &self.layout;
        let g = grad.data()[0].as_f64();
        let mut d = vec![T::zero(); inputs[0].len()];
        for b in 0..l.n {
            for p in 0..l.hw {
                let Some(truth) = l.target[b * l.hw + p] else {
                    continue;
                };
                for (c, term) in self.terms.iter().enumerate() {
                    let Some((inter, denom)) = *term else { continue };
                    let y = if c == truth { 1.0 } else { 0.0 };
                    // dDice/dp = 2y/D − (2I + ε)/D²
                    let dd = 2.0 * y / denom - (2.0 * inter + self.epsilon) / (denom * denom);
                    d[(b * l.k + c) * l.hw + p] = T::lift(-g * dd / self.active as f64);
                }
            }
        }
        Ok(vec![Some(inputs[0].with_data(d))])
    }
}

/// `1 − mean_k Dice_k`, each `Dice_k = (2Σ p·y + ε) / (Σ p + Σ y + ε)` summed
/// over all counted cells of the batch. Only classes present in the labels or
/// carrying predicted mass are averaged.
pub fn dice_loss<T: Scalar>(
    tape: &mut Tape<T>,
    probs: Var,
    labels: &[u8],
    mask: &[bool],
    config: &LossConfig,
) -> Result<Var> {
    config.validate()?;
    let pv = tape.value(probs);
    let layout = layout(pv, labels, mask)?;
    let d = pv.data();
    let (k, hw) = (layout.k, layout.hw);
    let mut inter = vec![0.0f64; k];
    let mut mass = vec![0.0f64; k];
    let mut support = vec![0.0f64; k];
    for b in 0..layout.n {
        for p in 0..hw {
            let Some(truth) = layout.target[b * hw + p] else {
                continue;
            };
            support[truth] += 1.0;
            for c in 0..k {
                let v = d[(b * k + c) * hw + p].as_f64();
                mass[c] += v;
                if c == truth {
                    inter[c] += v;
                }
            }
        }
    }
    let eps = config.epsilon;
    let terms: Vec<Option<(f64, f64)>> = (0..k)
        .map(|c| {
            (support[c] > 0.0 || mass[c] > DICE_MASS_FLOOR).then(|| (inter[c], mass[c] + support[c] + eps))
        })
        .collect();
    let active = terms.iter().flatten().count();
    let value = if active == 0 {
        0.0
    } else {
        let dice_sum: f64 = terms.iter().flatten().map(|(i, den)| (2.0 * i + eps) / den).sum();
        1.0 - dice_sum / active as f64
    };
    tape.push(
        Tensor::from_vec(&[1], vec![T::lift(value)])?,
        &[probs],
        Box::new(DiceGrad {
            layout,
            terms,
            active: active.max(1),
            epsilon: eps,
        }),
    )
}

/// `λ_FL · focal + λ_Dice · dice`, plus both component values.
pub fn combined_loss<T: Scalar>(
    tape: &mut Tape<T>,
    probs: Var,
    labels: &[u8],
    mask: &[bool],
    config: &LossConfig,
) -> Result<(Var, LossComponents)> {
    let focal = focal_loss(tape, probs, labels, mask, config)?;
    let dice = dice_loss(tape, probs, labels, mask, config)?;
    let wf = tape.mul_scalar(focal, T::lift(config.lambda_fl))?;
    let wd = tape.mul_scalar(dice, T::lift(config.lambda_dice))?;
    let total = tape.add(wf, wd)?;
    let components = LossComponents {
        total: tape.value(total).data()[0].as_f64(),
        focal: tape.value(focal).data()[0].as_f64(),
        dice: tape.value(dice).data()[0].as_f64(),
    };
    Ok((total, components))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs_var(tape: &mut Tape<f64>, shape: [usize; 4], data: Vec<f64>) -> Var {
        tape.leaf(Tensor::from_vec(&shape, data).unwrap(), true)
    }

    fn value(tape: &Tape<f64>, v: Var) -> f64 {
        tape.value(v).data()[0]
    }

    #[test]
    fn focal_single_cell_half() {
        let mut tape = Tape::<f64>::new();
        let p = probs_var(&mut tape, [1, 2, 1, 1], vec![0.5, 0.5]);
        let l = focal_loss(&mut tape, p, &[0], &[true], &LossConfig::default()).unwrap();
        let expect = 0.25 * std::f64::consts::LN_2;
        assert!((value(&tape, l) - expect).abs() < 1e-12);
        assert!((value(&tape, l) - 0.173287).abs() < 1e-6);
    }

    #[test]
    fn focal_confident_correct_is_tiny() {
        let mut tape = Tape::<f64>::new();
        let hi = 1.0 - 1e-7;
        let p = probs_var(&mut tape, [2, 2, 1, 2], vec![hi, 1e-7, 1e-7, hi, hi, hi, 1e-7, 1e-7]);
        let l = focal_loss(&mut tape, p, &[0, 1, 0, 0], &[true; 4], &LossConfig::default()).unwrap();
        assert!(value(&tape, l) < 1e-6);
    }

    #[test]
    fn focal_gamma_zero_is_cross_entropy() {
        let probs = Tensor::<f64>::rand_uniform(&[1, 3, 2, 2], 4, 0.05, 0.9).unwrap();
        let labels = [0u8, 2, 1, 1];
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(probs.clone(), true);
        let cfg = LossConfig {
            gamma: 0.0,
            ..LossConfig::default()
        };
        let l = focal_loss(&mut tape, p, &labels, &[true; 4], &cfg).unwrap();
        let ce: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &c)| -probs.data()[c as usize * 4 + i].ln())
            .sum::<f64>()
            / 4.0;
        assert!((value(&tape, l) - ce).abs() < 1e-12);
    }

    #[test]
    fn dice_worked_example() {
        let mut tape = Tape::<f64>::new();
        let p = probs_var(&mut tape, [1, 2, 2, 2], vec![0.5; 8]);
        let l = dice_loss(&mut tape, p, &[0; 4], &[true; 4], &LossConfig::default()).unwrap();
        let expect = 1.0 - (5.0 / 7.0 + 1.0 / 3.0) / 2.0;
        assert!((value(&tape, l) - expect).abs() < 1e-12);
        assert!((value(&tape, l) - 0.476190).abs() < 1e-6);
    }

    #[test]
    fn dice_perfect_overlap_is_zero() {
        let labels = [0u8, 2, 2, 1, 0, 0];
        let mut d = vec![0.0; 3 * 6];
        for (i, &c) in labels.iter().enumerate() {
            let (b, p) = (i / 3, i % 3);
            d[(b * 3 + c as usize) * 3 + p] = 1.0;
        }
        let mut tape = Tape::<f64>::new();
        let p = probs_var(&mut tape, [2, 3, 1, 3], d);
        let l = dice_loss(&mut tape, p, &labels, &[true; 6], &LossConfig::default()).unwrap();
        assert_eq!(value(&tape, l), 0.0);
    }

    #[test]
    fn absent_class_without_mass_is_not_penalized() {
        // class 2 never appears and gets (almost) no mass
        let mut tape = Tape::<f64>::new();
        let p = probs_var(&mut tape, [1, 3, 1, 2], vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let l = dice_loss(&mut tape, p, &[0, 1], &[true; 2], &LossConfig::default()).unwrap();
        assert_eq!(value(&tape, l), 0.0);
    }

    #[test]
    fn all_masked_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let p = probs_var(&mut tape, [1, 2, 1, 2], vec![0.5; 4]);
        let cfg = LossConfig::default();
        assert!(matches!(
            focal_loss(&mut tape, p, &[0, 1], &[false, false], &cfg),
            Err(Error::NoValidCells(_))
        ));
        assert!(dice_loss(&mut tape, p, &[255, 255], &[true, true], &cfg).is_err());
    }

    #[test]
    fn out_of_range_label_rejected() {
        let mut tape = Tape::<f64>::new();
        let p = probs_var(&mut tape, [1, 2, 1, 1], vec![0.5; 2]);
        assert!(focal_loss(&mut tape, p, &[2], &[true], &LossConfig::default()).is_err());
    }

    #[test]
    fn degenerate_weights_are_exact() {
        let probs = Tensor::<f64>::rand_uniform(&[2, 3, 2, 2], 1, 0.1, 0.8).unwrap();
        let labels = [0u8, 1, 2, 0, 1, 1, 2, 255];
        let mask = [true; 8];
        let run = |cfg: LossConfig| {
            let mut tape = Tape::<f64>::new();
            let p = tape.leaf(probs.clone(), true);
            let (total, c) = combined_loss(&mut tape, p, &labels, &mask, &cfg).unwrap();
            (value(&tape, total), c)
        };
        let (t, c) = run(LossConfig {
            lambda_dice: 0.0,
            ..LossConfig::default()
        });
        assert_eq!(t, c.focal);
        let (t, c) = run(LossConfig {
            lambda_fl: 0.0,
            ..LossConfig::default()
        });
        assert_eq!(t, c.dice);
        let cfg = LossConfig {
            lambda_fl: 0.7,
            lambda_dice: 1.3,
            ..LossConfig::default()
        };
        let (t, c) = run(cfg);
        assert!((t - (0.7 * c.focal + 1.3 * c.dice)).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let both_zero = LossConfig {
            lambda_fl: 0.0,
            lambda_dice: 0.0,
            ..LossConfig::default()
        };
        assert!(both_zero.validate().is_err());
        let bad_eps = LossConfig {
            epsilon: 0.0,
            ..LossConfig::default()
        };
        assert!(bad_eps.validate().is_err());
    }
}
