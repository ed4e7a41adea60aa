use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A nonempty set of pixels: a grid rectangle, or explicit flat pixel
/// indices (`y * width + x`, ascending) for irregular regions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Region {
    Rect {
        y0: usize,
        x0: usize,
        h: usize,
        w: usize,
    },
    Pixels(Vec<u32>),
}

impl Region {
    pub fn len(&self) -> usize {
        match self {
            Region::Rect { h, w, .. } => h * w,
            Region::Pixels(p) => p.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat pixel indices for an image of the given width.
    pub fn pixel_indices(&self, width: usize) -> Vec<usize> {
        match self {
            Region::Rect { y0, x0, h, w } => (*y0..y0 + h)
                .flat_map(|y| (*x0..x0 + w).map(move |x| y * width + x))
                .collect(),
            Region::Pixels(p) => p.iter().map(|&i| i as usize).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum PartitionKind {
    GridPatches { cell_h: usize, cell_w: usize },
    Superpixels,
}

/// Disjoint regions covering the image plane, in a stable order: row-major
/// cells for grids, ascending label for superpixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionPartition {
    height: usize,
    width: usize,
    kind: PartitionKind,
    regions: Vec<Region>,
    owner: Vec<u32>,
}

impl RegionPartition {
    /// Grid of `cell_h × cell_w` patches; trailing cells are clipped when the
    /// image size is not a multiple of the cell size.
    pub fn grid(height: usize, width: usize, cell_h: usize, cell_w: usize) -> Result<Self> {
        if cell_h == 0 || cell_w == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidParam(format!(
                "grid {cell_h}x{cell_w} over {height}x{width} image"
            )));
        }
        let rows = height.div_ceil(cell_h);
        let cols = width.div_ceil(cell_w);
        let mut regions = Vec::with_capacity(rows * cols);
        let mut owner = vec![0u32; height * width];
        for r in 0..rows {
            for c in 0..cols {
                let (y0, x0) = (r * cell_h, c * cell_w);
                let region = Region::Rect {
                    y0,
                    x0,
                    h: cell_h.min(height - y0),
                    w: cell_w.min(width - x0),
                };
                for p in region.pixel_indices(width) {
                    owner[p] = regions.len() as u32;
                }
                regions.push(region);
            }
        }
        Ok(Self {
            height,
            width,
            kind: PartitionKind::GridPatches { cell_h, cell_w },
            regions,
            owner,
        })
    }

    /// One region per label; labels must be `0..L` with every label present.
    pub fn from_labels(height: usize, width: usize, labels: &[u32]) -> Result<Self> {
        if labels.len() != height * width || labels.is_empty() {
            return Err(Error::Dimension(format!(
                "{} labels for a {height}x{width} image",
                labels.len()
            )));
        }
        let count = *labels.iter().max().unwrap() as usize + 1;
        let mut pixels: Vec<Vec<u32>> = vec![Vec::new(); count];
        for (i, &l) in labels.iter().enumerate() {
            pixels[l as usize].push(i as u32);
        }
        if let Some(missing) = pixels.iter().position(Vec::is_empty) {
            return Err(Error::InvalidParam(format!(
                "label {missing} has no pixels"
            )));
        }
        Ok(Self {
            height,
            width,
            kind: PartitionKind::Superpixels,
            regions: pixels.into_iter().map(Region::Pixels).collect(),
            owner: labels.to_vec(),
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn kind(&self) -> &PartitionKind {
        &self.kind
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    /// Region index owning each pixel.
    pub fn owners(&self) -> &[u32] {
        &self.owner
    }

    /// Pixel mask (row-major) of the union of the given regions.
    pub fn mask(&self, removed: &[usize]) -> Result<Vec<bool>> {
        let mut mask = vec![false; self.height * self.width];
        for &r in removed {
            let region = self.regions.get(r).ok_or_else(|| {
                Error::InvalidParam(format!(
                    "region {r} outside partition of {}",
                    self.regions.len()
                ))
            })?;
            for p in region.pixel_indices(self.width) {
                mask[p] = true;
            }
        }
        Ok(mask)
    }

    /// Short identifier used to check that explanations refer to the same
    /// partition.
    pub fn descriptor(&self) -> String {
        match &self.kind {
            PartitionKind::GridPatches { cell_h, cell_w } => {
                format!("grid:{cell_h}x{cell_w}@{}x{}", self.height, self.width)
            }
            PartitionKind::Superpixels => {
                let mut h: u64 = 0xcbf2_9ce4_8422_2325;
                for &l in &self.owner {
                    h = (h ^ l as u64).wrapping_mul(0x0100_0000_01b3);
                }
                format!(
                    "superpixels:{}@{}x{}:{h:016x}",
                    self.regions.len(),
                    self.height,
                    self.width
                )
            }
        }
    }
}
