use std::fmt;

use super::PatchSet;
use crate::error::{Error, Result};
use crate::losses::INVALID_LABEL;
use crate::rng::{derive_seed, CounterRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown split {s:?}; use train, val or test")))
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitAssignment {
    /// `None` for patches without any labeled cell.
    pub assignment: Vec<Option<Split>>,
    /// Majority class of each assignable patch.
    pub majority: Vec<Option<u8>>,
    /// `[split][class]` cell counts.
    pub histograms: [Vec<u64>; 3],
}

impl SplitAssignment {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == Some(split))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for s in self.assignment.iter().flatten() {
            c[s.index()] += 1;
        }
        c
    }
}

fn majority_class(labels: &[u8], mask: &[bool], k: usize) -> Option<u8> {
    let mut h = vec![0usize; k];
    for (&l, &m) in labels.iter().zip(mask) {
        if m && l != INVALID_LABEL {
            h[l as usize] += 1;
        }
    }
    let best = *h.iter().max()?;
    if best == 0 {
        return None;
    }
    h.iter().position(|&c| c == best).map(|c| c as u8)
}

/// Assigns whole patches to train/val/test, stratified by each patch's
/// majority class.
///
/// Within a class bucket each split first receives `floor(n·f)` patches; each
/// leftover patch goes to a split with a fractional remainder that has not
/// yet received one, preferring the split whose running total over all
/// buckets lags its ideal the most, ties to the earlier split.
pub fn stratified_split(patches: &PatchSet, fractions: [f64; 3], seed: u64) -> Result<SplitAssignment> {
    if fractions.iter().any(|f| !f.is_finite() || *f < 0.0) {
        return Err(Error::invalid(format!("split fractions must be ≥ 0, got {fractions:?}")));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("split fractions sum to {total}, expected 1")));
    }
    let k = patches.num_classes as usize;
    if k == 0 {
        return Err(Error::invalid("patch set carries no labels"));
    }
    let majority: Vec<Option<u8>> = (0..patches.len())
        .map(|p| majority_class(patches.patch_labels(p), patches.patch_mask(p), k))
        .collect();
    let assignable = majority.iter().flatten().count();
    if assignable < 3 {
        return Err(Error::invalid(format!(
            "need at least 3 patches with labeled cells, found {assignable}"
        )));
    }

    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (p, m) in majority.iter().enumerate() {
        if let Some(c) = m {
            buckets[*c as usize].push(p);
        }
    }

    let mut assignment = vec![None; patches.len()];
    // running (assigned - ideal) per split
    let mut drift = [0.0f64; 3];
    for (class, bucket) in buckets.iter_mut().enumerate() {
        if bucket.is_empty() {
            continue;
        }
        CounterRng::new(derive_seed(seed, 0x5917), class as u64).shuffle(bucket);
        let n = bucket.len();
        let ideal: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
        let mut count: Vec<usize> = ideal.iter().map(|v| (v + 1e-9).floor() as usize).collect();
        let mut extra = n - count.iter().sum::<usize>();
        let mut after: Vec<f64> = (0..3).map(|s| drift[s] + count[s] as f64 - ideal[s]).collect();
        let mut topped = [false; 3];
        while extra > 0 {
            let s = (0..3)
                .filter(|&s| !topped[s] && ideal[s] - count[s] as f64 > 1e-9)
                .min_by(|&a, &b| after[a].total_cmp(&after[b]).then(a.cmp(&b)))
                .expect("remainders sum to the leftover count");
            topped[s] = true;
            count[s] += 1;
            after[s] += 1.0;
            extra -= 1;
        }
        drift.copy_from_slice(&after);
        let mut it = bucket.iter();
        for s in Split::ALL {
            for &p in it.by_ref().take(count[s.index()]) {
                assignment[p] = Some(s);
            }
        }
    }

    let mut histograms = [vec![0u64; k], vec![0u64; k], vec![0u64; k]];
    for (p, s) in assignment.iter().enumerate() {
        let Some(s) = s else { continue };
        for (&l, &m) in patches.patch_labels(p).iter().zip(patches.patch_mask(p)) {
            if m && l != INVALID_LABEL {
                histograms[s.index()][l as usize] += 1;
            }
        }
    }
    Ok(SplitAssignment {
        assignment,
        majority,
        histograms,
    })
}
