//! Encoder over visible patches and decoder from the filled feature map
//! back to pixels.

use std::sync::Arc;

use crate::autograd::{Mat, Tape, UnOp, Var};
use crate::error::{Error, Result};
use crate::masking::unpatchify_index;
use crate::nn::{Bound, Init, LayerNorm, Linear, ParamStore, SelfBlock};

#[derive(Clone, Debug)]
pub struct Encoder {
    pub embed: Linear,
    pub blocks: Vec<SelfBlock>,
    pub norm_out: LayerNorm,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, init: &Init, patch_len: usize, dim: usize, layers: usize, hidden: usize) -> Self {
        Self {
            embed: Linear::new(store, init, "enc.embed", patch_len, dim),
            blocks: (0..layers).map(|i| SelfBlock::new(store, init, &format!("enc.block{i}"), dim, hidden)).collect(),
            norm_out: LayerNorm::new(store, "enc.norm_out", dim),
        }
    }

    /// `patches` (`n × 3p²`) with their grid position encodings (`n × C`)
    /// → `F^U` (`n × C`).
    pub fn forward(&self, tape: &Tape, p: &Bound, patches: Var, positions: Var) -> Result<Var> {
        if tape.shape(patches).0 == 0 {
            return Err(Error::validation(
                "no visible patches to encode; training requires mask_ratio < 1",
            ));
        }
        let x = self.embed.forward(tape, p, patches);
        let mut x = tape.add(x, positions);
        for block in &self.blocks {
            x = block.forward(tape, p, x);
        }
        Ok(self.norm_out.forward(tape, p, x))
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub blocks: Vec<SelfBlock>,
    pub norm_out: LayerNorm,
    pub head: Linear,
    grid_height: usize,
    grid_width: usize,
    patch_size: usize,
    dim: usize,
    pixel_index: Arc<Vec<usize>>,
}

impl Decoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        init: &Init,
        grid_height: usize,
        grid_width: usize,
        patch_size: usize,
        dim: usize,
        layers: usize,
        hidden: usize,
    ) -> Self {
        let patch_len = 3 * patch_size * patch_size;
        Self {
            blocks: (0..layers).map(|i| SelfBlock::new(store, init, &format!("dec.block{i}"), dim, hidden)).collect(),
            norm_out: LayerNorm::new(store, "dec.norm_out", dim),
            head: Linear::new(store, init, "dec.head", dim, patch_len),
            grid_height,
            grid_width,
            patch_size,
            dim,
            pixel_index: Arc::new(unpatchify_index(grid_height, grid_width, patch_size)),
        }
    }

    pub fn output_dims(&self) -> (usize, usize) {
        (self.grid_height * self.patch_size, self.grid_width * self.patch_size)
    }

    /// `R` (`cells × C`) → restored image as an `(H·W) × 3` matrix in `(0, 1)`.
    pub fn forward(&self, tape: &Tape, p: &Bound, filled: Var, positions: Option<Var>) -> Result<Var> {
        let cells = self.grid_height * self.grid_width;
        if tape.shape(filled) != (cells, self.dim) {
            return Err(Error::validation(format!(
                "decoder expects {cells}x{} filled map, got {:?}",
                self.dim,
                tape.shape(filled)
            )));
        }
        let mut x = match positions {
            Some(pos) => tape.add(filled, pos),
            None => filled,
        };
        for block in &self.blocks {
            x = block.forward(tape, p, x);
        }
        let x = self.norm_out.forward(tape, p, x);
        let patches = self.head.forward(tape, p, x);
        let patches = tape.unary(UnOp::Sigmoid, patches);
        let (h, w) = self.output_dims();
        Ok(tape.gather(patches, self.pixel_index.clone(), h * w, 3))
    }
}

/// Clamps a restored image matrix into `[0, 1]` (outside the tape).
pub fn clamp_unit(m: &Mat) -> Mat {
    Mat::new(m.rows, m.cols, m.data.iter().map(|v| v.clamp(0.0, 1.0)).collect())
}
