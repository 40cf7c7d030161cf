use super::{GridStack, LabelGrid};
use crate::error::{Error, Result};
use crate::losses::INVALID_LABEL;
use crate::tensor::Tensor;

/// Non-overlapping `z × z` tiles of a stack, padded bottom/right with
/// zero values, invalid mask and label 255.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub patch_size: usize,
    pub channels: usize,
    pub num_classes: u8,
    pub grid_height: usize,
    pub grid_width: usize,
    pub patch_rows: usize,
    pub patch_cols: usize,
    /// Top-left cell of each patch, row-major over the patch lattice.
    pub origins: Vec<(usize, usize)>,
    /// `[P][C][z][z]`
    pub inputs: Vec<f32>,
    /// `[P][z][z]`, 255 where the cell is nodata, unlabeled or padding.
    pub labels: Vec<u8>,
    /// `[P][z][z]`, input validity.
    pub mask: Vec<bool>,
}

/// Inputs and targets for a group of patches, ready for the network.
#[derive(Debug, Clone)]
pub struct PatchBatch {
    pub inputs: Tensor<f32>,
    pub labels: Vec<u8>,
    pub mask: Vec<bool>,
}

pub fn tile_patches(stack: &GridStack, labels: Option<&LabelGrid>, z: usize) -> Result<PatchSet> {
    if z == 0 || z % 8 != 0 {
        return Err(Error::invalid(format!("patch size {z} must be a positive multiple of 8")));
    }
    let (h, w) = (stack.height, stack.width);
    if z > h || z > w {
        return Err(Error::invalid(format!("patch size {z} exceeds the {h}x{w} grid")));
    }
    if let Some(l) = labels {
        if l.height != h || l.width != w {
            return Err(Error::invalid(format!(
                "labels are {}x{}, stack is {h}x{w}",
                l.height, l.width
            )));
        }
    }
    let c = stack.num_channels();
    let rows = h.div_ceil(z);
    let cols = w.div_ceil(z);
    let p = rows * cols;
    let zz = z * z;
    let cells = h * w;
    let mut inputs = vec![0.0f32; p * c * zz];
    let mut out_labels = vec![INVALID_LABEL; p * zz];
    let mut mask = vec![false; p * zz];
    let mut origins = Vec::with_capacity(p);
    for pr in 0..rows {
        for pc in 0..cols {
            let idx = origins.len();
            let (r0, c0) = (pr * z, pc * z);
            origins.push((r0, c0));
            for i in 0..z.min(h - r0) {
                for j in 0..z.min(w - c0) {
                    let cell = (r0 + i) * w + c0 + j;
                    let local = i * z + j;
                    if !stack.mask[cell] {
                        continue;
                    }
                    mask[idx * zz + local] = true;
                    if let Some(l) = labels {
                        out_labels[idx * zz + local] = l.labels[cell];
                    }
                    for ch in 0..c {
                        inputs[(idx * c + ch) * zz + local] = stack.values[ch * cells + cell];
                    }
                }
            }
        }
    }
    Ok(PatchSet {
        patch_size: z,
        channels: c,
        num_classes: labels.map_or(0, |l| l.num_classes),
        grid_height: h,
        grid_width: w,
        patch_rows: rows,
        patch_cols: cols,
        origins,
        inputs,
        labels: out_labels,
        mask,
    })
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    fn area(&self) -> usize {
        self.patch_size * self.patch_size
    }

    pub fn input(&self, p: usize) -> &[f32] {
        let n = self.channels * self.area();
        &self.inputs[p * n..(p + 1) * n]
    }

    pub fn patch_labels(&self, p: usize) -> &[u8] {
        &self.labels[p * self.area()..(p + 1) * self.area()]
    }

    pub fn patch_mask(&self, p: usize) -> &[bool] {
        &self.mask[p * self.area()..(p + 1) * self.area()]
    }

    /// Number of cells in patch `p` carrying a usable label.
    pub fn labeled_cells(&self, p: usize) -> usize {
        self.patch_labels(p)
            .iter()
            .zip(self.patch_mask(p))
            .filter(|(&l, &m)| m && l != INVALID_LABEL)
            .count()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<PatchBatch> {
        if indices.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::invalid(format!("patch {bad} out of range ({} patches)", self.len())));
        }
        let z = self.patch_size;
        let mut inputs = Vec::with_capacity(indices.len() * self.channels * self.area());
        let mut labels = Vec::with_capacity(indices.len() * self.area());
        let mut mask = Vec::with_capacity(indices.len() * self.area());
        for &i in indices {
            inputs.extend_from_slice(self.input(i));
            labels.extend_from_slice(self.patch_labels(i));
            mask.extend_from_slice(self.patch_mask(i));
        }
        Ok(PatchBatch {
            inputs: Tensor::from_vec(&[indices.len(), self.channels, z, z], inputs)?,
            labels,
            mask,
        })
    }

    /// Reassembles per-patch class maps (`[P][z][z]`, patch order) into a
    /// grid cropped to the original extent. Nodata cells become 255.
    pub fn untile(&self, predictions: &[u8], num_classes: u8) -> Result<LabelGrid> {
        let zz = self.area();
        if predictions.len() != self.len() * zz {
            return Err(Error::invalid(format!(
                "expected {} predicted cells, got {}",
                self.len() * zz,
                predictions.len()
            )));
        }
        let (h, w, z) = (self.grid_height, self.grid_width, self.patch_size);
        let mut out = vec![INVALID_LABEL; h * w];
        for (idx, &(r0, c0)) in self.origins.iter().enumerate() {
            for i in 0..z.min(h - r0) {
                for j in 0..z.min(w - c0) {
                    let local = idx * zz + i * z + j;
                    if self.mask[local] {
                        out[(r0 + i) * w + c0 + j] = predictions[local];
                    }
                }
            }
        }
        LabelGrid::new(h, w, num_classes, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagrid::{stack_modalities, RasterGrid};

    fn stack(h: usize, w: usize, c: usize) -> GridStack {
        let grids: Vec<RasterGrid> = (0..c)
            .map(|k| {
                let v = (0..h * w).map(|i| (i * 10 + k) as f32).collect();
                RasterGrid::new(h, w, 1, v, vec![true; h * w]).unwrap()
            })
            .collect();
        let list: Vec<_> = grids.iter().enumerate().map(|(k, g)| ("m".to_string(), k as u32, g)).collect();
        stack_modalities(&list).unwrap()
    }

    #[test]
    fn divisible_grid_gives_four_patches() {
        let ps = tile_patches(&stack(64, 64, 2), None, 32).unwrap();
        assert_eq!(ps.len(), 4);
        assert_eq!(ps.origins, vec![(0, 0), (0, 32), (32, 0), (32, 32)]);
        assert!(ps.mask.iter().all(|&m| m));
    }

    #[test]
    fn ragged_grid_is_padded() {
        let ps = tile_patches(&stack(65, 64, 1), None, 32).unwrap();
        assert_eq!(ps.len(), 6);
        let padded_rows = (0..ps.len())
            .map(|p| {
                let m = ps.patch_mask(p);
                (0..32).filter(|&r| m[r * 32..(r + 1) * 32].iter().all(|&v| !v)).count()
            })
            .sum::<usize>();
        // two bottom patches, 31 padded rows each
        assert_eq!(padded_rows, 62);
        let bottom = ps.input(4);
        assert!(bottom[32..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_layout_in_patch() {
        let ps = tile_patches(&stack(16, 16, 3), None, 8).unwrap();
        // patch 1 origin (0, 8); channel 2, local (1, 2) -> cell (1, 10)
        let v = ps.input(1)[2 * 64 + 8 + 2];
        assert_eq!(v, ((16 + 10) * 10 + 2) as f32);
    }

    #[test]
    fn untile_restores_labels() {
        let s = stack(40, 24, 1);
        let labels: Vec<u8> = (0..40 * 24).map(|i| (i % 5) as u8).collect();
        let lg = LabelGrid::new(40, 24, 5, labels).unwrap();
        let ps = tile_patches(&s, Some(&lg), 8).unwrap();
        assert_eq!(ps.untile(&ps.labels, 5).unwrap(), lg);
    }

    #[test]
    fn bad_patch_sizes() {
        let s = stack(16, 16, 1);
        assert!(tile_patches(&s, None, 12).is_err());
        assert!(tile_patches(&s, None, 0).is_err());
        assert!(tile_patches(&s, None, 24).is_err());
    }

    #[test]
    fn batch_shapes() {
        let ps = tile_patches(&stack(16, 16, 3), None, 8).unwrap();
        let b = ps.batch(&[3, 0]).unwrap();
        assert_eq!(b.inputs.shape(), &[2, 3, 8, 8]);
        assert_eq!(&b.inputs.data()[..3 * 64], ps.input(3));
        assert!(ps.batch(&[]).is_err());
        assert!(ps.batch(&[4]).is_err());
    }
}
