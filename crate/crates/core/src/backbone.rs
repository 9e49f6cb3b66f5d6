//! Dense features `F` (frozen filter bank + trainable 1×1 projection) and
//! part descriptors `D` (K+1 learnable queries cross-attending over image
//! tokens).

use std::sync::Arc;

use crate::autograd::{Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, CrossBlock, Init, LayerNorm, Linear, ParamId, ParamStore};
use crate::raster::Image;
use crate::spatial::{SparseKernel, SpatialMap};

/// Channels produced by the filter bank: RGB identity, horizontal gradient,
/// vertical gradient, and Gaussian blurs at two scales, each per colour.
pub const RAW_CHANNELS: usize = 15;

const GAUSS_SIGMAS: [f64; 2] = [1.0, 2.0];

/// Normalised 1-D Gaussian; the 2-D filter is its outer product.
fn gaussian_taps(sigma: f64) -> (usize, Vec<f64>) {
    let radius = (2.0 * sigma).ceil() as usize;
    let mut taps: Vec<f64> =
        (0..2 * radius + 1).map(|i| (-((i as f64 - radius as f64).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= total);
    (radius, taps)
}

/// Largest stencil radius in the bank; bounds the receptive field.
pub fn filter_radius() -> usize {
    GAUSS_SIGMAS.iter().map(|&s| gaussian_taps(s).0).max().unwrap_or(1).max(1)
}

/// Per-pixel filter bank on an `h × w` RGB grid: `(h·w) × 3 → (h·w) × 15`.
pub fn filter_bank_map(h: usize, w: usize) -> SpatialMap {
    let identity = SparseKernel::stencil(h, w, 0, &[1.0]);
    let grad_x = SparseKernel::stencil(h, w, 1, &[0.0, 0.0, 0.0, -0.5, 0.0, 0.5, 0.0, 0.0, 0.0]);
    let grad_y = SparseKernel::stencil(h, w, 1, &[0.0, -0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.5, 0.0]);
    let mut kernels = vec![vec![Arc::new(identity)], vec![Arc::new(grad_x)], vec![Arc::new(grad_y)]];
    for sigma in GAUSS_SIGMAS {
        let (r, taps) = gaussian_taps(sigma);
        kernels.push(vec![
            Arc::new(SparseKernel::line(h, w, r, &taps, false)),
            Arc::new(SparseKernel::line(h, w, r, &taps, true)),
        ]);
    }
    let routes = (0..kernels.len()).flat_map(|k| (0..3).map(move |c| (c, k))).collect();
    SpatialMap::chained(h * w, 3, kernels, routes)
}

/// Frozen stand-in for a pretrained patch backbone: the filter bank averaged
/// over each `p × p` cell. It has no parameters, so no gradient reaches it.
#[derive(Clone, Debug)]
pub struct FilterBankBackbone {
    pub height: usize,
    pub width: usize,
    pub patch_size: usize,
    bank: Arc<SpatialMap>,
    pool: Arc<SpatialMap>,
}

impl FilterBankBackbone {
    pub fn new(height: usize, width: usize, patch_size: usize) -> Result<Self> {
        if patch_size == 0 || height % patch_size != 0 || width % patch_size != 0 {
            return Err(Error::validation(format!(
                "backbone input {height}x{width} is not divisible by stride {patch_size}"
            )));
        }
        let pool = SpatialMap::per_channel(
            height * width,
            RAW_CHANNELS,
            SparseKernel::average_pool(height, width, patch_size),
        );
        Ok(Self {
            height,
            width,
            patch_size,
            bank: Arc::new(filter_bank_map(height, width)),
            pool: Arc::new(pool),
        })
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch_size, self.width / self.patch_size)
    }

    /// `(H_F·W_F) × 15` raw feature grid.
    pub fn extract_raw_features(&self, image: &Image) -> Result<Mat> {
        if (image.height, image.width) != (self.height, self.width) {
            return Err(Error::validation(format!(
                "image {}x{} does not match backbone input {}x{}",
                image.height, image.width, self.height, self.width
            )));
        }
        Ok(self.pool.apply(&self.bank.apply(&image.to_mat())))
    }
}

/// Trainable 1×1 projection `F = raw · W + b`.
#[derive(Clone, Debug)]
pub struct Projection {
    pub linear: Linear,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Projection {
    pub fn new(store: &mut ParamStore, init: &Init, raw_dim: usize, dim: usize) -> Self {
        Self { linear: Linear::new(store, init, "proj", raw_dim, dim), in_dim: raw_dim, out_dim: dim }
    }

    pub fn forward(&self, tape: &Tape, p: &Bound, raw: Var) -> Result<Var> {
        let (_, c) = tape.shape(raw);
        if c != self.in_dim {
            return Err(Error::validation(format!(
                "raw features have {c} channels, projection expects {}",
                self.in_dim
            )));
        }
        Ok(self.linear.forward(tape, p, raw))
    }
}

/// Projects raw features; free-function form of [`Projection::forward`].
pub fn project_features(tape: &Tape, p: &Bound, proj: &Projection, raw: Var) -> Result<Var> {
    proj.forward(tape, p, raw)
}

/// K+1 query embeddings refined by a cross-attention stack over the full
/// (unmasked) image tokens.
#[derive(Clone, Debug)]
pub struct DescriptorExtractor {
    pub token_embed: Linear,
    pub queries: ParamId,
    pub blocks: Vec<CrossBlock>,
    pub norm_out: LayerNorm,
    pub num_descriptors: usize,
    pub dim: usize,
}

/// Test hooks for the descriptor extractor.
#[derive(Clone, Copy, Debug, Default)]
pub struct DescriptorOptions {
    pub uniform_attention: bool,
}

impl DescriptorExtractor {
    pub fn new(
        store: &mut ParamStore,
        init: &Init,
        patch_len: usize,
        num_descriptors: usize,
        dim: usize,
        layers: usize,
        hidden: usize,
    ) -> Self {
        let token_embed = Linear::new(store, init, "desc.embed", patch_len, dim);
        let queries = store.add("desc.queries", init.uniform("desc.queries", num_descriptors, dim, 1.0));
        let blocks = (0..layers)
            .map(|i| CrossBlock::new(store, init, &format!("desc.block{i}"), dim, hidden))
            .collect();
        let norm_out = LayerNorm::new(store, "desc.norm_out", dim);
        Self { token_embed, queries, blocks, norm_out, num_descriptors, dim }
    }

    /// Embeds `patches` (`N × 3p²`), adds `positions` (`N × C`), and returns
    /// `(K+1) × C` descriptors.
    pub fn forward(
        &self,
        tape: &Tape,
        p: &Bound,
        patches: Var,
        positions: Var,
        opts: DescriptorOptions,
    ) -> Result<Var> {
        if tape.shape(patches).0 == 0 {
            return Err(Error::validation("descriptor extraction needs at least one token"));
        }
        let tokens = self.token_embed.forward(tape, p, patches);
        let tokens = tape.add(tokens, positions);
        let mut q = p.var(self.queries);
        for block in &self.blocks {
            q = block.forward(tape, p, q, tokens, opts.uniform_attention);
        }
        Ok(self.norm_out.forward(tape, p, q))
    }
}
