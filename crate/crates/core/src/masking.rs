//! Patchify images, draw deterministic random patch masks, and select the
//! visible patches.

use rand::seq::SliceRandom;

use crate::autograd::Mat;
use crate::error::{Error, Result};
use crate::raster::Image;
use crate::tensors_io::rng::{stream, Stream};

/// Image cut into `p × p` patches. Each row of `patches` is one cell in
/// row-major grid order, flattened as `(dy, dx, channel)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub grid_height: usize,
    pub grid_width: usize,
    pub patch_size: usize,
    pub patches: Mat,
}

impl PatchGrid {
    pub fn cells(&self) -> usize {
        self.grid_height * self.grid_width
    }

    pub fn patch_len(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn patch(&self, row: usize, col: usize) -> &[f64] {
        self.patches.row(row * self.grid_width + col)
    }
}

pub fn patchify(image: &Image, p: usize) -> Result<PatchGrid> {
    if p == 0 || image.height % p != 0 || image.width % p != 0 {
        return Err(Error::validation(format!(
            "image {}x{} is not divisible by patch size {p}",
            image.height, image.width
        )));
    }
    let (gh, gw) = (image.height / p, image.width / p);
    let len = 3 * p * p;
    let mut patches = Mat::zeros(gh * gw, len);
    for gy in 0..gh {
        for gx in 0..gw {
            let row = patches.row_mut(gy * gw + gx);
            for dy in 0..p {
                let src = ((gy * p + dy) * image.width + gx * p) * 3;
                row[dy * p * 3..(dy + 1) * p * 3].copy_from_slice(&image.data[src..src + p * 3]);
            }
        }
    }
    Ok(PatchGrid { grid_height: gh, grid_width: gw, patch_size: p, patches })
}

/// For every flat element of an `(H·W) × 3` image matrix, the flat index of
/// the same value inside a `cells × 3p²` patch matrix.
pub fn unpatchify_index(grid_height: usize, grid_width: usize, p: usize) -> Vec<usize> {
    let (h, w) = (grid_height * p, grid_width * p);
    let len = 3 * p * p;
    let mut index = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let cell = (y / p) * grid_width + x / p;
            let (dy, dx) = (y % p, x % p);
            for c in 0..3 {
                index.push(cell * len + (dy * p + dx) * 3 + c);
            }
        }
    }
    index
}

pub fn unpatchify(grid: &PatchGrid) -> Image {
    let index = unpatchify_index(grid.grid_height, grid.grid_width, grid.patch_size);
    let data = index.iter().map(|&i| grid.patches.data[i]).collect();
    Image {
        height: grid.grid_height * grid.patch_size,
        width: grid.grid_width * grid.patch_size,
        data,
    }
}

/// Cell mask; `true` means hidden from the encoder.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub grid_height: usize,
    pub grid_width: usize,
    pub cells: Vec<bool>,
}

impl BinaryMask {
    pub fn none(grid_height: usize, grid_width: usize) -> Self {
        Self { grid_height, grid_width, cells: vec![false; grid_height * grid_width] }
    }

    pub fn from_cells(grid_height: usize, grid_width: usize, cells: Vec<bool>) -> Result<Self> {
        if cells.len() != grid_height * grid_width {
            return Err(Error::validation("mask cell count does not match grid"));
        }
        Ok(Self { grid_height, grid_width, cells })
    }

    pub fn masked_count(&self) -> usize {
        self.cells.iter().filter(|&&m| m).count()
    }

    pub fn is_masked(&self, row: usize, col: usize) -> bool {
        self.cells[row * self.grid_width + col]
    }

    /// Flat indices of visible cells, row-major.
    pub fn visible_indices(&self) -> Vec<usize> {
        (0..self.cells.len()).filter(|&i| !self.cells[i]).collect()
    }

    /// `cells × 1` column: 1.0 where masked.
    pub fn as_column(&self) -> Mat {
        Mat::new(self.cells.len(), 1, self.cells.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect())
    }
}

/// `floor(r · n)`, tolerant of the last-ulp error of the float product.
pub fn masked_cell_count(ratio: f64, cells: usize) -> usize {
    ((ratio * cells as f64) + 1e-9).floor().min(cells as f64) as usize
}

pub fn generate_mask(
    grid_height: usize,
    grid_width: usize,
    ratio: f64,
    seed: u64,
    sample_index: u64,
) -> Result<BinaryMask> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::validation(format!("mask ratio {ratio} outside [0, 1]")));
    }
    let n = grid_height * grid_width;
    let count = masked_cell_count(ratio, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, Stream::Mask, sample_index));
    let mut cells = vec![false; n];
    for &i in &order[..count] {
        cells[i] = true;
    }
    Ok(BinaryMask { grid_height, grid_width, cells })
}

/// Visible patches in row-major grid order.
#[derive(Clone, Debug, PartialEq)]
pub struct VisiblePatches {
    /// `(row, col)` grid positions.
    pub positions: Vec<(usize, usize)>,
    /// One patch vector per position.
    pub patches: Mat,
}

impl VisiblePatches {
    pub fn flat_positions(&self, grid_width: usize) -> Vec<usize> {
        self.positions.iter().map(|&(r, c)| r * grid_width + c).collect()
    }
}

pub fn select_unmasked(grid: &PatchGrid, mask: &BinaryMask) -> Result<VisiblePatches> {
    if (grid.grid_height, grid.grid_width) != (mask.grid_height, mask.grid_width) {
        return Err(Error::validation(format!(
            "mask {}x{} does not match patch grid {}x{}",
            mask.grid_height, mask.grid_width, grid.grid_height, grid.grid_width
        )));
    }
    let visible = mask.visible_indices();
    let len = grid.patch_len();
    let mut data = Vec::with_capacity(visible.len() * len);
    for &i in &visible {
        data.extend_from_slice(grid.patches.row(i));
    }
    Ok(VisiblePatches {
        positions: visible.iter().map(|&i| (i / grid.grid_width, i % grid.grid_width)).collect(),
        patches: Mat::new(visible.len(), len, data),
    })
}
