//! Serialized code grids and code datasets.
//!
//! A grid is `"VG" | u16 H | u16 W | u16 K` followed by `H·W` little-endian u16 codes.
//! A code dataset is `"VQ2D" | u32 version | u32 levels | u32 count`, then every grid of
//! every level (bottom first) and finally one u32 label per item.

use std::fs;
use std::path::Path;

use crate::error::{ensure, Error, Result};
use crate::pipeline::checkpoint::Reader;
use crate::vq::CodeGrid;

pub const GRID_MAGIC: &[u8; 2] = b"VG";
pub const DATASET_MAGIC: &[u8; 4] = b"VQ2D";
pub const DATASET_VERSION: u32 = 1;

fn u16_of(v: usize, what: &str) -> Result<u16> {
    u16::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit in 16 bits")))
}

pub fn encode_grid(g: &CodeGrid) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + 2 * g.len());
    out.extend_from_slice(GRID_MAGIC);
    for (v, what) in [(g.height, "height"), (g.width, "width"), (g.num_codes, "vocabulary")] {
        out.extend_from_slice(&u16_of(v, what)?.to_le_bytes());
    }
    for &i in &g.indices {
        out.extend_from_slice(&u16_of(i, "code")?.to_le_bytes());
    }
    Ok(out)
}

fn read_u16(r: &mut Reader<'_>) -> Result<usize> {
    Ok(u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize)
}

fn read_grid(r: &mut Reader<'_>) -> Result<CodeGrid> {
    ensure!(r.take(2)? == GRID_MAGIC, Format, "bad code grid magic");
    let (h, w, k) = (read_u16(r)?, read_u16(r)?, read_u16(r)?);
    let indices = (0..h * w).map(|_| read_u16(r)).collect::<Result<Vec<_>>>()?;
    CodeGrid::new(h, w, k, indices).map_err(|e| Error::Format(e.to_string()))
}

pub fn decode_grid(bytes: &[u8]) -> Result<CodeGrid> {
    let mut r = Reader::new(bytes);
    let g = read_grid(&mut r)?;
    r.finish()?;
    Ok(g)
}

/// Extracted codes for a set of images: `levels[l][i]` is item `i` at level `l` (bottom first).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodeDataset {
    pub levels: Vec<Vec<CodeGrid>>,
    pub labels: Vec<usize>,
}

impl CodeDataset {
    pub fn new(levels: Vec<Vec<CodeGrid>>, labels: Vec<usize>) -> Result<Self> {
        ensure!(!levels.is_empty(), Contract, "code dataset needs at least one level");
        for (l, grids) in levels.iter().enumerate() {
            ensure!(
                grids.len() == labels.len(),
                Dimension,
                "level {l} has {} grids for {} labels",
                grids.len(),
                labels.len()
            );
            if let Some(first) = grids.first() {
                ensure!(
                    grids.iter().all(|g| g.height == first.height && g.width == first.width && g.num_codes == first.num_codes),
                    Dimension,
                    "level {l} mixes grid shapes"
                );
            }
        }
        Ok(Self { levels, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(DATASET_MAGIC);
        for v in [DATASET_VERSION, self.levels.len() as u32, self.len() as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for grids in &self.levels {
            for g in grids {
                out.extend(encode_grid(g)?);
            }
        }
        for &l in &self.labels {
            out.extend_from_slice(&(l as u32).to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        ensure!(r.take(4)? == DATASET_MAGIC, Format, "not a code dataset (bad magic)");
        let version = r.u32()?;
        ensure!(version == DATASET_VERSION, Format, "unsupported code dataset version {version}");
        let levels = r.u32()? as usize;
        let n = r.u32()? as usize;
        let grids = (0..levels)
            .map(|_| (0..n).map(|_| read_grid(&mut r)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        let labels = (0..n).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        r.finish()?;
        Self::new(grids, labels).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
