//! MGRID rasters and MLBL label grids.

use std::fs;
use std::path::Path;

use super::{LabelGrid, RasterGrid};
use crate::error::{Error, Result};

const GRID_MAGIC: &[u8; 4] = b"MGRD";
const LABEL_MAGIC: &[u8; 4] = b"MLBL";
const VERSION: u16 = 1;
const GRID_HEADER: usize = 19;
const LABEL_HEADER: usize = 15;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < self.pos + n {
            return Err(Error::Format {
                offset: self.pos as u64,
                reason: format!("header cut short, need {n} more bytes"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != want {
            return Err(Error::Format {
                offset: 0,
                reason: format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(want)
                ),
            });
        }
        Ok(())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn version(&mut self) -> Result<()> {
        let at = self.pos;
        let v = self.u16()?;
        if v != VERSION {
            return Err(Error::Format {
                offset: at as u64,
                reason: format!("unsupported version {v}"),
            });
        }
        Ok(())
    }

    fn extent(&mut self, what: &str) -> Result<usize> {
        let at = self.pos;
        let v = self.u32()?;
        if v == 0 {
            return Err(Error::Format {
                offset: at as u64,
                reason: format!("{what} is 0"),
            });
        }
        Ok(v as usize)
    }
}

fn payload_len(header: usize, dims: &[usize], elem: usize, actual: usize) -> Result<usize> {
    let expected = dims
        .iter()
        .try_fold(elem, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_add(header))
        .ok_or_else(|| Error::Format {
            offset: 6,
            reason: "declared extents overflow".into(),
        })?;
    if actual < expected {
        return Err(Error::Truncated {
            expected: expected as u64,
            actual: actual as u64,
        });
    }
    if actual > expected {
        return Err(Error::Format {
            offset: expected as u64,
            reason: format!("{} trailing bytes", actual - expected),
        });
    }
    Ok(expected)
}

pub fn grid_to_bytes(grid: &RasterGrid) -> Vec<u8> {
    let mut out = Vec::with_capacity(GRID_HEADER + grid.values.len() * 4);
    out.extend_from_slice(GRID_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(grid.height as u32).to_le_bytes());
    out.extend_from_slice(&(grid.width as u32).to_le_bytes());
    out.extend_from_slice(&(grid.channels as u32).to_le_bytes());
    out.push(0);
    let cells = grid.cells();
    for (i, v) in grid.values.iter().enumerate() {
        let v = if grid.mask[i % cells] { *v } else { f32::NAN };
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn grid_from_bytes(bytes: &[u8]) -> Result<RasterGrid> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(GRID_MAGIC)?;
    r.version()?;
    let h = r.extent("height")?;
    let w = r.extent("width")?;
    let c = r.extent("channels")?;
    let at = r.pos;
    let dtype = r.u8()?;
    if dtype != 0 {
        return Err(Error::Format {
            offset: at as u64,
            reason: format!("unsupported dtype {dtype}"),
        });
    }
    payload_len(GRID_HEADER, &[h, w, c], 4, bytes.len())?;
    let values: Vec<f32> = bytes[GRID_HEADER..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let cells = h * w;
    let mut mask = vec![true; cells];
    for (i, v) in values.iter().enumerate() {
        if v.is_nan() {
            mask[i % cells] = false;
        } else if !v.is_finite() {
            return Err(Error::Format {
                offset: (GRID_HEADER + 4 * i) as u64,
                reason: "infinite value".into(),
            });
        }
    }
    RasterGrid::new(h, w, c, values, mask)
}

pub fn labels_to_bytes(labels: &LabelGrid) -> Vec<u8> {
    let mut out = Vec::with_capacity(LABEL_HEADER + labels.labels.len());
    out.extend_from_slice(LABEL_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(labels.height as u32).to_le_bytes());
    out.extend_from_slice(&(labels.width as u32).to_le_bytes());
    out.push(labels.num_classes);
    out.extend_from_slice(&labels.labels);
    out
}

pub fn labels_from_bytes(bytes: &[u8]) -> Result<LabelGrid> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(LABEL_MAGIC)?;
    r.version()?;
    let h = r.extent("height")?;
    let w = r.extent("width")?;
    let at = r.pos;
    let k = r.u8()?;
    if k == 0 || k == u8::MAX {
        return Err(Error::Format {
            offset: at as u64,
            reason: format!("invalid class count {k}"),
        });
    }
    payload_len(LABEL_HEADER, &[h, w], 1, bytes.len())?;
    let labels = bytes[LABEL_HEADER..].to_vec();
    if let Some(i) = labels.iter().position(|&l| l != u8::MAX && l >= k) {
        return Err(Error::Format {
            offset: (LABEL_HEADER + i) as u64,
            reason: format!("label {} ≥ class count {k}", labels[i]),
        });
    }
    LabelGrid::new(h, w, k, labels)
}

pub fn read_grid(path: impl AsRef<Path>) -> Result<RasterGrid> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    grid_from_bytes(&bytes)
}

pub fn write_grid(grid: &RasterGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, grid_to_bytes(grid)).map_err(|e| Error::io(path, e))
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelGrid> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    labels_from_bytes(&bytes)
}

pub fn write_labels(labels: &LabelGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, labels_to_bytes(labels)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;

    fn random_grid(h: usize, w: usize, c: usize, seed: u64) -> RasterGrid {
        let mut rng = CounterRng::new(seed, 0);
        let mask: Vec<bool> = (0..h * w).map(|_| rng.next_f64() > 0.2).collect();
        let values = (0..h * w * c)
            .map(|i| {
                if mask[i % (h * w)] {
                    (rng.next_f64() * 200.0 - 100.0) as f32
                } else {
                    0.0
                }
            })
            .collect();
        RasterGrid::new(h, w, c, values, mask).unwrap()
    }

    #[test]
    fn grid_round_trip() {
        let g = random_grid(7, 5, 3, 11);
        let back = grid_from_bytes(&grid_to_bytes(&g)).unwrap();
        assert_eq!(back.mask, g.mask);
        let cells = g.cells();
        for (i, (a, b)) in g.values.iter().zip(&back.values).enumerate() {
            if g.mask[i % cells] {
                assert_eq!(a.to_bits(), b.to_bits());
            } else {
                assert!(b.is_nan());
            }
        }
    }

    #[test]
    fn truncated_grid_names_sizes() {
        let g = random_grid(4, 4, 2, 1);
        let bytes = grid_to_bytes(&g);
        let err = grid_from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        match err {
            Error::Truncated { expected, actual } => {
                assert_eq!(expected, 19 + 4 * 4 * 2 * 4u64);
                assert_eq!(actual, expected - 3);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn zero_extent_rejected() {
        let mut bytes = grid_to_bytes(&random_grid(2, 2, 1, 3));
        bytes[6..10].copy_from_slice(&0u32.to_le_bytes());
        let err = grid_from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 6, .. }), "{err}");
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = grid_to_bytes(&random_grid(2, 2, 1, 3));
        bytes[0] = b'X';
        assert!(matches!(grid_from_bytes(&bytes), Err(Error::Format { offset: 0, .. })));
        let mut bytes = grid_to_bytes(&random_grid(2, 2, 1, 3));
        bytes[4] = 9;
        assert!(matches!(grid_from_bytes(&bytes), Err(Error::Format { offset: 4, .. })));
    }

    #[test]
    fn labels_round_trip_and_range() {
        let l = LabelGrid::new(2, 3, 5, vec![0, 1, 255, 4, 2, 3]).unwrap();
        let bytes = labels_to_bytes(&l);
        assert_eq!(labels_from_bytes(&bytes).unwrap(), l);
        let mut bad = bytes.clone();
        bad[LABEL_HEADER + 1] = 7;
        assert!(matches!(
            labels_from_bytes(&bad),
            Err(Error::Format { offset, .. }) if offset == (LABEL_HEADER + 1) as u64
        ));
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = random_grid(3, 3, 1, 5);
        let p = dir.path().join("g.mgrid");
        write_grid(&g, &p).unwrap();
        assert_eq!(read_grid(&p).unwrap().mask, g.mask);
        assert!(matches!(read_grid(dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
