//! Mini-group batched training with Adam, per-step JSON-lines logging,
//! periodic checkpoints and resume.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Tape, Var};
use crate::datagen::LabeledScene;
use crate::error::{Error, Result};
use crate::harness::checkpoint::{load_checkpoint, save_checkpoint};
use crate::losses::{
    background_presence_loss, center_distance_weights, concentration_loss_baseline, entropy_loss,
    foreground_presence_loss, mean_part_features, part_presence, restoration_loss_to, semantic_loss, total_loss,
    tv_loss, DistanceWeights, LossBreakdown, LossTerms, LossWeights, PerceptualExtractor, RestorationTarget,
    RestorationWeights,
};
use crate::masking::{generate_mask, patchify, BinaryMask, PatchGrid};
use crate::model::Mpae;
use crate::raster::Image;
use crate::tensors_io::{load_array, stream, DistributionLoss, RunConfig, Stream};

/// One training image with everything that does not depend on parameters.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub name: String,
    pub grid: PatchGrid,
    pub raw: Mat,
    pub target: RestorationTarget,
}

/// Backbone-independent context shared by every step.
#[derive(Clone, Debug)]
pub struct LossContext {
    pub phi: PerceptualExtractor,
    pub distance: DistanceWeights,
    pub weights: LossWeights,
    pub restoration: RestorationWeights,
}

impl LossContext {
    pub fn new(config: &RunConfig) -> Result<Self> {
        Ok(Self {
            phi: PerceptualExtractor::new(config.input_height, config.input_width)?,
            distance: center_distance_weights(config.grid_height(), config.grid_width())?,
            weights: LossWeights { lambda_p: config.lambda_p, lambda_s: config.lambda_s, lambda_d: config.lambda_d },
            restoration: RestorationWeights::default(),
        })
    }
}

/// Reads `<dir>/<name>.dna` feature grids, shaped `[H_F, W_F, C]` or `[H_F·W_F, C]`.
pub fn load_external_features(dir: &Path, name: &str, cells: usize) -> Result<Mat> {
    let arr = load_array(dir.join(format!("{name}.dna")))?;
    let dims = arr.dims().to_vec();
    let (rows, cols) = match dims.as_slice() {
        [h, w, c] => (h * w, *c),
        [n, c] => (*n, *c),
        _ => return Err(Error::validation(format!("feature file for {name} has rank {}", dims.len()))),
    };
    if rows != cells {
        return Err(Error::validation(format!("feature file for {name} has {rows} cells, expected {cells}")));
    }
    Ok(Mat::new(rows, cols, arr.to_f64_vec()?))
}

/// Precomputes patches, raw features and restoration targets. With
/// `features_dir`, raw features come from files instead of the backbone.
pub fn prepare_samples(
    model: &Mpae,
    ctx: &LossContext,
    scenes: &[LabeledScene],
    features_dir: Option<&Path>,
) -> Result<Vec<TrainSample>> {
    use rayon::prelude::*;
    scenes
        .par_iter()
        .map(|s| {
            let image: &Image = &s.image;
            let raw = match features_dir {
                Some(dir) => load_external_features(dir, &s.name, model.cells())?,
                None => model.raw_features(image)?,
            };
            if raw.cols != model.raw_dim {
                return Err(Error::validation(format!(
                    "{} has {} feature channels, model expects {}",
                    s.name, raw.cols, model.raw_dim
                )));
            }
            Ok(TrainSample {
                name: s.name.clone(),
                grid: patchify(image, model.config.patch_size)?,
                raw,
                target: RestorationTarget::new(image.to_mat(), &ctx.phi),
            })
        })
        .collect()
}

/// `(H·W) × 1` column marking the pixels of masked cells.
pub fn pixel_mask(mask: &BinaryMask, patch_size: usize) -> Mat {
    let (h, w) = (mask.grid_height * patch_size, mask.grid_width * patch_size);
    let mut m = Mat::zeros(h * w, 1);
    for y in 0..h {
        for x in 0..w {
            if mask.is_masked(y / patch_size, x / patch_size) {
                m.data[y * w + x] = 1.0;
            }
        }
    }
    m
}

fn mean_of(tape: &Tape, terms: Vec<Var>) -> Option<Var> {
    let n = terms.len();
    let mut it = terms.into_iter();
    let first = it.next()?;
    let sum = it.fold(first, |acc, t| tape.add(acc, t));
    Some(tape.scale(sum, 1.0 / n as f64))
}

/// Forward pass and weighted loss for one batch; terms are reduced in sample order.
pub fn batch_loss(
    model: &Mpae,
    tape: &Tape,
    params: &crate::nn::Bound,
    samples: &[&TrainSample],
    masks: &[BinaryMask],
    ctx: &LossContext,
) -> Result<(Var, LossBreakdown)> {
    let cfg = &model.config;
    if samples.is_empty() || samples.len() != masks.len() {
        return Err(Error::validation("batch needs one mask per sample"));
    }
    let (gh, gw) = model.grid();
    let mut rest = Vec::new();
    let mut maps = Vec::new();
    let mut sem = Vec::new();
    let mut tv = Vec::new();
    let mut ent = Vec::new();
    let mut conc = Vec::new();
    for (s, mask) in samples.iter().zip(masks) {
        let out = model.forward_sample(tape, params, &s.grid, &s.raw, mask)?;
        if !cfg.without_r {
            let pix = cfg.loss_on_masked_only.then(|| pixel_mask(mask, cfg.patch_size));
            rest.push(restoration_loss_to(tape, &s.target, out.restored, &ctx.phi, ctx.restoration, pix.as_ref())?);
        }
        if !cfg.without_s {
            let fbar = mean_part_features(tape, out.similarity, out.features)?;
            let present = part_presence(&tape.value(out.similarity), cfg.presence_threshold);
            sem.push(semantic_loss(tape, out.descriptors, fbar, &present, cfg.semantic_scale, cfg.semantic_margin)?);
        }
        match cfg.distribution_loss {
            DistributionLoss::TvEntropy => {
                if !cfg.without_v {
                    tv.push(tv_loss(tape, out.similarity, gh, gw)?);
                }
                if !cfg.without_e {
                    ent.push(entropy_loss(tape, out.similarity, cfg.entropy_per_pixel));
                }
            }
            DistributionLoss::Concentration => conc.push(concentration_loss_baseline(tape, out.similarity, gh, gw)?),
        }
        maps.push(out.similarity);
    }
    let terms = LossTerms {
        restoration: mean_of(tape, rest),
        foreground: if cfg.without_f { None } else { Some(foreground_presence_loss(tape, &maps, cfg.group_size)?) },
        background: if cfg.without_b { None } else { Some(background_presence_loss(tape, &maps, &ctx.distance)?) },
        semantic: mean_of(tape, sem),
        tv: mean_of(tape, tv),
        entropy: mean_of(tape, ent),
        concentration: mean_of(tape, conc),
    };
    total_loss(tape, &terms, &ctx.weights)
}

/// Adam state: first/second moments per parameter and the update count.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
}

impl Adam {
    pub fn new(config: &RunConfig, params: &[Mat]) -> Self {
        Self {
            lr: config.learning_rate,
            beta1: config.adam_beta1,
            beta2: config.adam_beta2,
            eps: config.adam_eps,
            t: 0,
            m: params.iter().map(|p| Mat::zeros(p.rows, p.cols)).collect(),
            v: params.iter().map(|p| Mat::zeros(p.rows, p.cols)).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Mat], grads: &[Mat]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m.data[i] / bc1;
                let vh = v.data[i] / bc2;
                p.data[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// One JSON-lines record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    #[serde(flatten)]
    pub losses: LossBreakdown,
    pub batch: Vec<usize>,
}

/// Training state. The only RNG cursor is the step counter: batch order,
/// masks and shuffles are pure functions of `(seed, step)`.
pub struct Trainer {
    pub model: Mpae,
    pub adam: Adam,
    pub step: usize,
    pub ctx: LossContext,
    samples: Vec<TrainSample>,
}

impl Trainer {
    pub fn new(model: Mpae, samples: Vec<TrainSample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::validation("training needs a non-empty dataset"));
        }
        if model.config.mask_ratio >= 1.0 {
            return Err(Error::Config {
                keys: vec!["mask_ratio".into()],
                message: "mask_ratio 1 leaves no visible patches to encode".into(),
            });
        }
        let ctx = LossContext::new(&model.config)?;
        let adam = Adam::new(&model.config, model.store.values());
        Ok(Self { model, adam, step: 0, ctx, samples })
    }

    pub fn from_scenes(config: &RunConfig, scenes: &[LabeledScene], features_dir: Option<&Path>) -> Result<Self> {
        let raw_dim = match (features_dir, scenes.first()) {
            (Some(dir), Some(s)) => load_external_features(dir, &s.name, config.grid_height() * config.grid_width())?.cols,
            _ => crate::backbone::RAW_CHANNELS,
        };
        let model = Mpae::new(config, raw_dim)?;
        let ctx = LossContext::new(config)?;
        let samples = prepare_samples(&model, &ctx, scenes, features_dir)?;
        Self::new(model, samples)
    }

    /// Restores model, optimizer and step from a checkpoint directory.
    pub fn resume(ckpt: &Path, config: &RunConfig, scenes: &[LabeledScene], features_dir: Option<&Path>) -> Result<Self> {
        let (model, adam, step) = load_checkpoint(ckpt, Some(config))?;
        let ctx = LossContext::new(&model.config)?;
        let samples = prepare_samples(&model, &ctx, scenes, features_dir)?;
        let mut t = Self::new(model, samples)?;
        t.adam = adam;
        t.step = step;
        Ok(t)
    }

    pub fn samples(&self) -> &[TrainSample] {
        &self.samples
    }

    /// Dataset indices for a 1-based step: consecutive slices of per-epoch
    /// seeded permutations.
    pub fn batch_indices(&self, step: usize) -> Vec<usize> {
        let n = self.samples.len();
        let b = self.model.config.batch_size;
        let start = (step - 1) * b;
        let mut cached: Option<(usize, Vec<usize>)> = None;
        (start..start + b)
            .map(|pos| {
                let epoch = pos / n;
                if cached.as_ref().map(|c| c.0) != Some(epoch) {
                    let mut order: Vec<usize> = (0..n).collect();
                    order.shuffle(&mut stream(self.model.config.seed, Stream::Data, epoch as u64));
                    cached = Some((epoch, order));
                }
                cached.as_ref().expect("set above").1[pos % n]
            })
            .collect()
    }

    fn batch_masks(&self, step: usize, indices: &[usize]) -> Result<Vec<BinaryMask>> {
        let cfg = &self.model.config;
        let (gh, gw) = self.model.grid();
        indices
            .iter()
            .enumerate()
            .map(|(b, &i)| {
                let key = if cfg.fixed_masks { i as u64 } else { ((step - 1) * cfg.batch_size + b) as u64 };
                generate_mask(gh, gw, cfg.mask_ratio, cfg.seed, key)
            })
            .collect()
    }

    /// Runs one optimisation step and returns its log record.
    pub fn train_step(&mut self) -> Result<StepLog> {
        let step = self.step + 1;
        let indices = self.batch_indices(step);
        let masks = self.batch_masks(step, &indices)?;
        let tape = Tape::new();
        let params = self.model.store.bind(&tape);
        let batch: Vec<&TrainSample> = indices.iter().map(|&i| &self.samples[i]).collect();
        let (loss, breakdown) = match batch_loss(&self.model, &tape, &params, &batch, &masks, &self.ctx) {
            Err(Error::NonFinite { term }) => {
                log::error!("non-finite {term} at step {step}; batch indices {indices:?}");
                return Err(Error::NonFinite { term: format!("{term} at step {step}, batch {indices:?}") });
            }
            other => other?,
        };
        let grads = tape.backward(loss);
        let grads: Vec<Mat> = params
            .vars()
            .iter()
            .zip(self.model.store.values())
            .map(|(&v, p)| grads.get_or_zeros(v, p.rows, p.cols))
            .collect();
        if grads.iter().any(|g| !g.is_finite()) {
            log::error!("non-finite gradient at step {step}; batch indices {indices:?}");
            return Err(Error::NonFinite { term: format!("gradient at step {step}, batch {indices:?}") });
        }
        self.adam.step(self.model.store.values_mut(), &grads);
        self.step = step;
        Ok(StepLog { step, losses: breakdown, batch: indices })
    }

    /// Trains in memory until `config.steps`.
    pub fn fit(&mut self) -> Result<Vec<StepLog>> {
        let mut logs = Vec::with_capacity(self.model.config.steps.saturating_sub(self.step));
        while self.step < self.model.config.steps {
            logs.push(self.train_step()?);
        }
        Ok(logs)
    }

    /// Trains until `config.steps`, appending to `<out>/train.jsonl` and
    /// writing `<out>/ckpt_<step>` every `ckpt_every` steps and at the end.
    pub fn run(&mut self, out: &Path) -> Result<Vec<StepLog>> {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let log_path = out.join("train.jsonl");
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        let mut writer = BufWriter::new(file);
        let mut logs = Vec::new();
        let total = self.model.config.steps;
        let every = self.model.config.ckpt_every;
        while self.step < total {
            let record = match self.train_step() {
                Ok(r) => r,
                Err(e) => {
                    if let Error::NonFinite { term } = &e {
                        let dump = out.join("nonfinite_batch.json");
                        let _ = fs::write(&dump, serde_json::json!({ "error": term }).to_string());
                    }
                    writer.flush().map_err(|e| Error::io(&log_path, e))?;
                    return Err(e);
                }
            };
            writeln!(writer, "{}", serde_json::to_string(&record)?).map_err(|e| Error::io(&log_path, e))?;
            if record.step % every == 0 || record.step == total {
                writer.flush().map_err(|e| Error::io(&log_path, e))?;
                save_checkpoint(&checkpoint_dir(out, record.step), &self.model, &self.adam, record.step)?;
            }
            if record.step % 50 == 0 {
                log::info!("step {} total {:.5}", record.step, record.losses.total);
            }
            logs.push(record);
        }
        writer.flush().map_err(|e| Error::io(&log_path, e))?;
        Ok(logs)
    }
}

pub fn checkpoint_dir(out: &Path, step: usize) -> PathBuf {
    out.join(format!("ckpt_{step:06}"))
}

/// Latest `ckpt_*` directory under `out`, if any.
pub fn latest_checkpoint(out: &Path) -> Option<PathBuf> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(out)
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("ckpt_")))
        .collect();
    dirs.sort();
    dirs.pop()
}

/// Reads a JSON-lines training log.
pub fn read_log(path: &Path) -> Result<Vec<StepLog>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

/// Caps the global worker pool; `MPAE_THREADS` wins over `default`.
pub fn init_thread_pool(default: Option<usize>) {
    let threads = std::env::var("MPAE_THREADS").ok().and_then(|v| v.parse::<usize>().ok()).or(default);
    if let Some(n) = threads.filter(|&n| n > 0) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}
