//! Confusion matrices, segmentation scores and class-map rendering.

use std::fmt::Write as _;

use crate::datagrid::{LabelGrid, CLASS_NAMES};
use crate::error::{Error, Result};
use crate::losses::INVALID_LABEL;

/// Rows are ground truth, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes).map(|k| self.get(k, k)).sum()
    }

    /// Adds cells where both labels are valid and, if given, the mask is set.
    pub fn accumulate(&mut self, pred: &[u8], truth: &[u8], mask: Option<&[bool]>) -> Result<()> {
        if pred.len() != truth.len() || mask.is_some_and(|m| m.len() != truth.len()) {
            return Err(Error::invalid(format!(
                "prediction has {} cells, truth {}",
                pred.len(),
                truth.len()
            )));
        }
        let k = self.num_classes;
        for (i, (&p, &t)) in pred.iter().zip(truth).enumerate() {
            if p == INVALID_LABEL || t == INVALID_LABEL || mask.is_some_and(|m| !m[i]) {
                continue;
            }
            if p as usize >= k || t as usize >= k {
                return Err(Error::invalid(format!("class id {} out of range for {k} classes", p.max(t))));
            }
            self.counts[t as usize * k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::invalid("cannot merge matrices of different class counts"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

pub fn confusion(pred: &LabelGrid, truth: &LabelGrid) -> Result<ConfusionMatrix> {
    if pred.height != truth.height || pred.width != truth.width {
        return Err(Error::invalid(format!(
            "prediction is {}x{}, truth is {}x{}",
            pred.height, pred.width, truth.height, truth.width
        )));
    }
    let k = truth.num_classes.max(pred.num_classes) as usize;
    let mut cm = ConfusionMatrix::new(k);
    cm.accumulate(&pred.labels, &truth.labels, None)?;
    if cm.total() == 0 {
        return Err(Error::NoValidCells("no cell is valid in both grids".into()));
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    pub predicted: u64,
}

impl ClassScore {
    /// Neither present in the truth nor predicted anywhere.
    pub fn is_absent(&self) -> bool {
        self.support == 0 && self.predicted == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scores {
    pub per_class: Vec<ClassScore>,
    pub accuracy: f64,
    /// Averages over classes that are not absent.
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// F1 weighted by ground-truth support.
    pub weighted_f1: f64,
    pub total: u64,
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn scores(cm: &ConfusionMatrix) -> Result<Scores> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::NoValidCells("empty confusion matrix".into()));
    }
    let k = cm.num_classes;
    let per_class: Vec<ClassScore> = (0..k)
        .map(|c| {
            let tp = cm.get(c, c);
            let support: u64 = (0..k).map(|p| cm.get(c, p)).sum();
            let predicted: u64 = (0..k).map(|t| cm.get(t, c)).sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassScore {
                precision,
                recall,
                f1,
                support,
                predicted,
            }
        })
        .collect();
    let present: Vec<&ClassScore> = per_class.iter().filter(|c| !c.is_absent()).collect();
    let n = present.len() as f64;
    let weighted_f1 = per_class.iter().map(|c| c.f1 * c.support as f64).sum::<f64>() / total as f64;
    Ok(Scores {
        accuracy: cm.trace() as f64 / total as f64,
        macro_precision: present.iter().map(|c| c.precision).sum::<f64>() / n,
        macro_recall: present.iter().map(|c| c.recall).sum::<f64>() / n,
        macro_f1: present.iter().map(|c| c.f1).sum::<f64>() / n,
        weighted_f1,
        per_class,
        total,
    })
}

fn class_name(c: usize) -> String {
    CLASS_NAMES
        .get(c)
        .map_or_else(|| format!("class{c}"), |s| s.to_string())
}

/// CSV with one row per class (`--` for absent classes) and summary rows.
pub fn report_csv(s: &Scores) -> String {
    let mut out = String::from("class,precision,recall,f1,support\n");
    for (c, cs) in s.per_class.iter().enumerate() {
        if cs.is_absent() {
            let _ = writeln!(out, "{},--,--,--,0", class_name(c));
        } else {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{}",
                class_name(c),
                cs.precision,
                cs.recall,
                cs.f1,
                cs.support
            );
        }
    }
    let _ = writeln!(
        out,
        "macro,{:.6},{:.6},{:.6},{}",
        s.macro_precision, s.macro_recall, s.macro_f1, s.total
    );
    let _ = writeln!(out, "weighted,,,{:.6},{}", s.weighted_f1, s.total);
    let _ = writeln!(out, "accuracy,,,{:.6},{}", s.accuracy, s.total);
    out
}

/// Fill colors for classes 0..=4.
pub const PALETTE: [[u8; 3]; 5] = [
    [0xD7, 0x30, 0x27],
    [0xFC, 0x8D, 0x59],
    [0xFE, 0xE0, 0x8B],
    [0x91, 0xBF, 0xDB],
    [0x45, 0x75, 0xB4],
];
pub const INVALID_COLOR: [u8; 3] = [0xFF, 0xFF, 0xFF];

/// Binary PPM (P6) of a class map.
pub fn render_classmap(labels: &LabelGrid) -> Result<Vec<u8>> {
    let k = (labels.num_classes as usize).min(PALETTE.len());
    let mut out = format!("P6\n{} {}\n255\n", labels.width, labels.height).into_bytes();
    out.reserve(labels.labels.len() * 3);
    for &l in &labels.labels {
        if l == INVALID_LABEL {
            out.extend_from_slice(&INVALID_COLOR);
        } else if (l as usize) < k {
            out.extend_from_slice(&PALETTE[l as usize]);
        } else {
            return Err(Error::invalid(format!("class id {l} has no color")));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(labels: Vec<u8>, k: u8) -> LabelGrid {
        LabelGrid::new(1, labels.len(), k, labels).unwrap()
    }

    #[test]
    fn four_cell_hand_case() {
        let cm = confusion(&grid(vec![0, 1, 1, 1], 2), &grid(vec![0, 0, 1, 1], 2)).unwrap();
        assert_eq!(cm.counts, vec![1, 1, 0, 2]);
        let s = scores(&cm).unwrap();
        assert_eq!(s.accuracy, 0.75);
        assert!((s.per_class[0].f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.per_class[1].f1 - 0.8).abs() < 1e-12);
        assert!((s.weighted_f1 - (0.5 * 2.0 / 3.0 + 0.5 * 0.8)).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction() {
        let t = grid(vec![0, 1, 2, 3, 4, 2, 255], 5);
        let cm = confusion(&t, &t).unwrap();
        for a in 0..5 {
            for b in 0..5 {
                if a != b {
                    assert_eq!(cm.get(a, b), 0);
                }
            }
        }
        let s = scores(&cm).unwrap();
        assert_eq!(s.accuracy, 1.0);
        assert_eq!(s.weighted_f1, 1.0);
        assert!(s.per_class.iter().all(|c| c.f1 == 1.0));
    }

    #[test]
    fn predicted_but_never_true() {
        let cm = confusion(&grid(vec![0, 2, 1], 3), &grid(vec![0, 1, 1], 3)).unwrap();
        let s = scores(&cm).unwrap();
        assert_eq!(s.per_class[2].f1, 0.0);
        assert_eq!(s.per_class[2].support, 0);
        assert!(!s.per_class[2].is_absent());
        // weighted over supported classes only: (1·1 + 2·(2/3)) / 3
        assert!((s.weighted_f1 - (1.0 + 2.0 * 2.0 / 3.0) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn all_invalid_is_an_error() {
        let t = grid(vec![255, 255], 5);
        assert!(matches!(confusion(&t, &t), Err(Error::NoValidCells(_))));
        let a = grid(vec![0, 255], 5);
        let b = grid(vec![255, 1], 5);
        assert!(confusion(&a, &b).is_err());
    }

    #[test]
    fn extent_mismatch() {
        assert!(confusion(&grid(vec![0, 1], 2), &grid(vec![0, 1, 1], 2)).is_err());
    }

    #[test]
    fn csv_marks_absent_classes() {
        let cm = confusion(&grid(vec![0, 1], 5), &grid(vec![0, 1], 5)).unwrap();
        let csv = report_csv(&scores(&cm).unwrap());
        assert!(csv.starts_with("class,precision,recall,f1,support\nScarcity,1.000000"));
        assert!(csv.contains("\nNormal,--,--,--,0\n"));
        assert!(csv.contains("\naccuracy,,,1.000000,2\n"));
        assert!(!csv.contains('\r'));
    }

    #[test]
    fn render_single_pixel_and_invalid() {
        let img = render_classmap(&grid(vec![0], 5)).unwrap();
        assert_eq!(img, b"P6\n1 1\n255\n\xD7\x30\x27");
        let img = render_classmap(&grid(vec![255, 255], 5)).unwrap();
        assert!(img.ends_with(&[0xFF; 6]));
        let mut bad = grid(vec![1], 5);
        bad.labels[0] = 6;
        assert!(render_classmap(&bad).is_err());
    }
}
