use serde::{Deserialize, Serialize};

use super::RasterGrid;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelInfo {
    pub modality: String,
    pub month: u32,
}

/// Channel-wise concatenation of monthly modality grids, `[C][H][W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridStack {
    pub height: usize,
    pub width: usize,
    pub channels: Vec<ChannelInfo>,
    pub values: Vec<f32>,
    pub mask: Vec<bool>,
}

impl GridStack {
    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.cells();
        &self.values[c * n..(c + 1) * n]
    }

    pub fn modalities(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for ch in &self.channels {
            if out.last() != Some(&ch.modality.as_str()) {
                out.push(&ch.modality);
            }
        }
        out
    }

    /// Position of `(modality, month)` in the channel axis.
    pub fn channel_index(&self, modality: &str, month: u32) -> Option<usize> {
        self.channels
            .iter()
            .position(|c| c.modality == modality && c.month == month)
    }
}

/// Stacks single-channel grids given modality-major, month-minor.
pub fn stack_modalities(grids: &[(String, u32, &RasterGrid)]) -> Result<GridStack> {
    let Some((first_name, _, first)) = grids.first() else {
        return Err(Error::invalid("no grids to stack"));
    };
    let (h, w) = (first.height, first.width);
    for (name, month, g) in grids {
        if g.height != h || g.width != w {
            return Err(Error::invalid(format!(
                "modality {name:?} month {month} is {}x{}, expected {h}x{w} as in {first_name:?}",
                g.height, g.width
            )));
        }
        if g.channels != 1 {
            return Err(Error::invalid(format!(
                "modality {name:?} month {month} has {} channels, expected 1",
                g.channels
            )));
        }
    }

    // group by modality and check the month-minor layout
    let mut groups: Vec<(&str, Vec<u32>)> = Vec::new();
    for (name, month, _) in grids {
        match groups.last_mut() {
            Some((n, months)) if n == name => {
                if *months.last().unwrap() >= *month {
                    return Err(Error::invalid(format!(
                        "modality {name:?}: months must be strictly increasing"
                    )));
                }
                months.push(*month);
            }
            _ => {
                if groups.iter().any(|(n, _)| n == name) {
                    return Err(Error::invalid(format!(
                        "modality {name:?} appears in two separate runs; order must be modality-major"
                    )));
                }
                groups.push((name, vec![*month]));
            }
        }
    }
    let months = &groups[0].1;
    if let Some((name, _)) = groups.iter().find(|(_, m)| m != months) {
        return Err(Error::invalid(format!(
            "modality {name:?} covers different months than {:?}",
            groups[0].0
        )));
    }

    let cells = h * w;
    let mut values = Vec::with_capacity(cells * grids.len());
    let mut mask = vec![true; cells];
    let mut channels = Vec::with_capacity(grids.len());
    for (name, month, g) in grids {
        values.extend(g.values.iter().zip(&g.mask).map(|(&v, &m)| if m { v } else { 0.0 }));
        for (acc, &m) in mask.iter_mut().zip(&g.mask) {
            *acc &= m;
        }
        channels.push(ChannelInfo {
            modality: name.clone(),
            month: *month,
        });
    }
    Ok(GridStack {
        height: h,
        width: w,
        channels,
        values,
        mask,
    })
}

/// Per-channel mean and standard deviation over valid cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn compute(stack: &GridStack) -> Result<Self> {
        let valid: Vec<usize> = (0..stack.cells()).filter(|&i| stack.mask[i]).collect();
        if valid.is_empty() {
            return Err(Error::NoValidCells("every channel is fully masked".into()));
        }
        let n = valid.len() as f64;
        let mut mean = Vec::with_capacity(stack.num_channels());
        let mut std = Vec::with_capacity(stack.num_channels());
        for c in 0..stack.num_channels() {
            let ch = stack.channel(c);
            let m = valid.iter().map(|&i| ch[i] as f64).sum::<f64>() / n;
            let var = valid.iter().map(|&i| (ch[i] as f64 - m).powi(2)).sum::<f64>() / n;
            let s = var.sqrt();
            mean.push(m);
            std.push(if s > 1e-12 * m.abs().max(1.0) { s } else { 1.0 });
        }
        Ok(Self { mean, std })
    }
}

/// Z-scores every channel. Masked cells are written as 0. Pass `stats` to
/// reuse training-split statistics.
pub fn normalize_channels(
    stack: &GridStack,
    stats: Option<&ChannelStats>,
) -> Result<(GridStack, ChannelStats)> {
    let stats = match stats {
        Some(s) => {
            if s.mean.len() != stack.num_channels() || s.std.len() != stack.num_channels() {
                return Err(Error::invalid(format!(
                    "stats cover {} channels, stack has {}",
                    s.mean.len(),
                    stack.num_channels()
                )));
            }
            if s.std.iter().any(|&v| !(v.is_finite() && v > 0.0)) || s.mean.iter().any(|m| !m.is_finite()) {
                return Err(Error::invalid("channel stats must be finite with positive std"));
            }
            s.clone()
        }
        None => ChannelStats::compute(stack)?,
    };
    let cells = stack.cells();
    let mut out = stack.clone();
    for (c, chunk) in out.values.chunks_mut(cells).enumerate() {
        let (m, s) = (stats.mean[c], stats.std[c]);
        for (v, &valid) in chunk.iter_mut().zip(&stack.mask) {
            *v = if valid { ((*v as f64 - m) / s) as f32 } else { 0.0 };
        }
    }
    Ok((out, stats))
}
