//! The assembled model: projection, descriptor extractor, encoder, decoder,
//! and the per-sample forward pass through masking, matching, fill and
//! restoration.

use crate::autograd::{Mat, Tape, Var};
use crate::backbone::{DescriptorExtractor, DescriptorOptions, FilterBankBackbone, Projection, RAW_CHANNELS};
use crate::error::{Error, Result};
use crate::masking::{select_unmasked, BinaryMask, PatchGrid};
use crate::matching::{fill_masked, similarity_map, FilledFeatureMap};
use crate::nn::{sincos_position_encoding, Bound, Init, ParamStore};
use crate::raster::Image;
use crate::restoration::{Decoder, Encoder};
use crate::tensors_io::RunConfig;

#[derive(Clone, Debug)]
pub struct Mpae {
    pub config: RunConfig,
    /// Channel count of the raw features fed to the projection.
    pub raw_dim: usize,
    pub backbone: FilterBankBackbone,
    pub store: ParamStore,
    pub projection: Projection,
    pub descriptors: DescriptorExtractor,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub positions: Mat,
}

/// Everything the losses need from one sample's forward pass.
#[derive(Clone, Debug)]
pub struct SampleForward {
    pub descriptors: Var,
    pub features: Var,
    pub similarity: Var,
    pub filled: FilledFeatureMap,
    pub restored: Var,
}

impl Mpae {
    /// Fresh parameters drawn from the config seed. `raw_dim` is
    /// [`RAW_CHANNELS`] for the built-in backbone.
    pub fn new(config: &RunConfig, raw_dim: usize) -> Result<Self> {
        config.validate()?;
        if raw_dim == 0 {
            return Err(Error::validation("raw feature dimension must be positive"));
        }
        let (gh, gw, p, c) = (config.grid_height(), config.grid_width(), config.patch_size, config.dim);
        let hidden = c * config.mlp_ratio;
        let patch_len = 3 * p * p;
        let init = Init::new(config.seed);
        let mut store = ParamStore::new();
        let projection = Projection::new(&mut store, &init, raw_dim, c);
        let descriptors = DescriptorExtractor::new(
            &mut store,
            &init,
            patch_len,
            config.num_parts + 1,
            c,
            config.descriptor_layers,
            hidden,
        );
        let encoder = Encoder::new(&mut store, &init, patch_len, c, config.encoder_layers, hidden);
        let decoder = Decoder::new(&mut store, &init, gh, gw, p, c, config.decoder_layers, hidden);
        Ok(Self {
            config: config.clone(),
            raw_dim,
            backbone: FilterBankBackbone::new(config.input_height, config.input_width, p)?,
            store,
            projection,
            descriptors,
            encoder,
            decoder,
            positions: sincos_position_encoding(gh, gw, c),
        })
    }

    pub fn with_builtin_backbone(config: &RunConfig) -> Result<Self> {
        Self::new(config, RAW_CHANNELS)
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.config.grid_height(), self.config.grid_width())
    }

    pub fn cells(&self) -> usize {
        self.config.grid_height() * self.config.grid_width()
    }

    /// Frozen backbone features of an image (`cells × RAW_CHANNELS`).
    pub fn raw_features(&self, image: &Image) -> Result<Mat> {
        self.backbone.extract_raw_features(image)
    }

    fn check_raw(&self, raw: &Mat) -> Result<()> {
        if raw.shape() != (self.cells(), self.raw_dim) {
            return Err(Error::validation(format!(
                "raw features are {:?}, model expects {}x{}",
                raw.shape(),
                self.cells(),
                self.raw_dim
            )));
        }
        Ok(())
    }

    /// `D` (`(K+1) × C`) and `F` (`cells × C`) from the full image.
    pub fn descriptors_and_features(&self, tape: &Tape, p: &Bound, grid: &PatchGrid, raw: &Mat) -> Result<(Var, Var)> {
        self.check_raw(raw)?;
        let pos = tape.constant(self.positions.clone());
        let patches = tape.constant(grid.patches.clone());
        let d = self.descriptors.forward(tape, p, patches, pos, DescriptorOptions::default())?;
        let f = self.projection.forward(tape, p, tape.constant(raw.clone()))?;
        Ok((d, f))
    }

    /// Full training-time forward pass for one masked sample.
    pub fn forward_sample(
        &self,
        tape: &Tape,
        p: &Bound,
        grid: &PatchGrid,
        raw: &Mat,
        mask: &BinaryMask,
    ) -> Result<SampleForward> {
        let (d, f) = self.descriptors_and_features(tape, p, grid, raw)?;
        let similarity = similarity_map(tape, d, f)?;
        let visible = select_unmasked(grid, mask)?;
        let flat = visible.flat_positions(grid.grid_width);
        let pos = tape.constant(self.positions.clone());
        let vis_pos = tape.select_rows(pos, &flat);
        let fu = self.encoder.forward(tape, p, tape.constant(visible.patches), vis_pos)?;
        let fill_p = if self.config.detach_p_in_fill { tape.detach(similarity) } else { similarity };
        let filled = fill_masked(tape, fu, &flat, d, fill_p, mask)?;
        let dec_pos = self.config.decoder_pos_enc.then_some(pos);
        let restored = self.decoder.forward(tape, p, filled.values, dec_pos)?;
        Ok(SampleForward { descriptors: d, features: f, similarity, filled, restored })
    }
}
