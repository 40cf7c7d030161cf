//! Gridded inputs and targets: rasters, label grids, channel stacks,
//! LPA quantization, patch tiling and dataset splitting.

mod io;
mod lpa;
mod manifest;
mod split;
mod stack;
pub mod synth;
mod tiling;

use crate::error::{Error, Result};
use crate::losses::INVALID_LABEL;

pub use io::{read_grid, read_labels, write_grid, write_labels};
pub use lpa::{quantize_precip, LpaClass, LpaScheme, CLASS_NAMES};
pub use manifest::{Dataset, Manifest, ModalityEntry};
pub use split::{stratified_split, Split, SplitAssignment};
pub use stack::{normalize_channels, stack_modalities, ChannelInfo, ChannelStats, GridStack};
pub use tiling::{tile_patches, PatchBatch, PatchSet};

/// Multi-channel raster, row-major `[channel][row][col]`, with one validity
/// flag per cell shared by all channels.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterGrid {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub values: Vec<f32>,
    /// `true` where the cell holds data.
    pub mask: Vec<bool>,
}

impl RasterGrid {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<f32>, mask: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidShape {
                shape: vec![channels, height, width],
                reason: "raster extents must be ≥ 1".into(),
            });
        }
        let cells = height * width;
        if values.len() != cells * channels || mask.len() != cells {
            return Err(Error::InvalidShape {
                shape: vec![channels, height, width],
                reason: format!("{} values / {} mask entries", values.len(), mask.len()),
            });
        }
        for (cell, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            if (0..channels).any(|c| !values[c * cells + cell].is_finite()) {
                return Err(Error::invalid(format!("non-finite value at valid cell {cell}")));
            }
        }
        Ok(Self {
            height,
            width,
            channels,
            values,
            mask,
        })
    }

    /// Builds the mask from the values: a cell is nodata when any channel is NaN.
    pub fn from_values(height: usize, width: usize, channels: usize, values: Vec<f32>) -> Result<Self> {
        let cells = height * width;
        if values.len() != cells * channels {
            return Err(Error::InvalidShape {
                shape: vec![channels, height, width],
                reason: format!("{} values", values.len()),
            });
        }
        let mask = (0..cells)
            .map(|cell| (0..channels).all(|c| !values[c * cells + cell].is_nan()))
            .collect();
        Self::new(height, width, channels, values, mask)
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.cells();
        &self.values[c * n..(c + 1) * n]
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Per-cell class ids; [`INVALID_LABEL`] marks nodata and padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelGrid {
    pub height: usize,
    pub width: usize,
    pub num_classes: u8,
    pub labels: Vec<u8>,
}

impl LabelGrid {
    pub fn new(height: usize, width: usize, num_classes: u8, labels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidShape {
                shape: vec![height, width],
                reason: "label extents must be ≥ 1".into(),
            });
        }
        if labels.len() != height * width {
            return Err(Error::InvalidShape {
                shape: vec![height, width],
                reason: format!("{} labels", labels.len()),
            });
        }
        if let Some(bad) = labels.iter().find(|&&l| l != INVALID_LABEL && l >= num_classes) {
            return Err(Error::invalid(format!("label {bad} ≥ class count {num_classes}")));
        }
        Ok(Self {
            height,
            width,
            num_classes,
            labels,
        })
    }

    pub fn is_valid(&self, cell: usize) -> bool {
        self.labels[cell] != INVALID_LABEL
    }

    /// Counts of each class over valid cells.
    pub fn histogram(&self) -> Vec<u64> {
        let mut h = vec![0u64; self.num_classes as usize];
        for &l in &self.labels {
            if l != INVALID_LABEL {
                h[l as usize] += 1;
            }
        }
        h
    }
}
