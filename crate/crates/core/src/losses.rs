//! Training constraints on the similarity maps, descriptors and restored
//! images, and their weighted combination.
//!
//! Conventions: a similarity map `P` is a `(H_F·W_F) × (K+1)` tape variable,
//! row-major over the feature grid; columns `0..K` are foreground parts and
//! column `K` is the background.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Tape, UnOp, Var};
use crate::backbone::filter_bank_map;
use crate::error::{Error, Result};
use crate::spatial::{SparseKernel, SpatialMap};

/// Floor inside every logarithm.
pub const LOG_FLOOR: f64 = 1e-12;
/// Floor on every denominator.
pub const DIV_FLOOR: f64 = 1e-8;

/// Frozen multi-scale filter-bank pyramid used for the structural term of
/// the restoration loss. Scale `s` average-pools the image by `s` and then
/// applies the backbone filter bank at that resolution.
#[derive(Clone, Debug)]
pub struct PerceptualExtractor {
    pub height: usize,
    pub width: usize,
    stages: Vec<(Option<Arc<SpatialMap>>, Arc<SpatialMap>)>,
}

impl PerceptualExtractor {
    pub const SCALES: [usize; 3] = [1, 2, 4];

    pub fn new(height: usize, width: usize) -> Result<Self> {
        let scales: Vec<usize> =
            Self::SCALES.iter().copied().filter(|s| height % s == 0 && width % s == 0).collect();
        if height == 0 || width == 0 {
            return Err(Error::validation("perceptual extractor needs a non-empty image"));
        }
        let stages = scales
            .into_iter()
            .map(|s| {
                let pool = (s > 1).then(|| {
                    Arc::new(SpatialMap::per_channel(height * width, 3, SparseKernel::average_pool(height, width, s)))
                });
                (pool, Arc::new(filter_bank_map(height / s, width / s)))
            })
            .collect();
        Ok(Self { height, width, stages })
    }

    pub fn num_scales(&self) -> usize {
        self.stages.len()
    }

    /// Feature grids of an `(H·W) × 3` image variable, one per scale.
    pub fn forward(&self, tape: &Tape, image: Var) -> Vec<Var> {
        self.stages
            .iter()
            .map(|(pool, bank)| {
                let x = match pool {
                    Some(pool) => tape.spatial(image, pool.clone()),
                    None => image,
                };
                tape.spatial(x, bank.clone())
            })
            .collect()
    }

    /// Same as [`forward`](Self::forward) without a tape.
    pub fn features(&self, image: &Mat) -> Vec<Mat> {
        self.stages
            .iter()
            .map(|(pool, bank)| match pool {
                Some(pool) => bank.apply(&pool.apply(image)),
                None => bank.apply(image),
            })
            .collect()
    }
}

/// Precomputed `I` and `Φ(I)` for one training image.
#[derive(Clone, Debug)]
pub struct RestorationTarget {
    pub image: Mat,
    pub features: Vec<Mat>,
}

impl RestorationTarget {
    pub fn new(image: Mat, phi: &PerceptualExtractor) -> Self {
        let features = phi.features(&image);
        Self { image, features }
    }
}

/// Weights of the two halves of the restoration loss; the structural
/// weight can be zeroed to isolate the pixel term.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RestorationWeights {
    pub pixel: f64,
    pub structural: f64,
}

impl Default for RestorationWeights {
    fn default() -> Self {
        Self { pixel: 0.5, structural: 0.5 }
    }
}

fn mean_abs_diff(tape: &Tape, a: Var, target: &Mat) -> Var {
    let t = tape.constant(target.clone());
    let d = tape.sub(a, t);
    let d = tape.unary(UnOp::Abs, d);
    tape.mean_all(d)
}

/// `w_pix · mean|I − I'| + w_struct · mean_s mean|Φ_s(I) − Φ_s(I')|`.
///
/// With `masked_pixels` (an `(H·W) × 1` 0/1 column) the pixel term averages
/// only over masked pixels and `Φ` sees `I'` pasted into `I` on those pixels.
pub fn restoration_loss_to(
    tape: &Tape,
    target: &RestorationTarget,
    restored: Var,
    phi: &PerceptualExtractor,
    weights: RestorationWeights,
    masked_pixels: Option<&Mat>,
) -> Result<Var> {
    if tape.shape(restored) != target.image.shape() {
        return Err(Error::validation(format!(
            "restored image {:?} does not match input {:?}",
            tape.shape(restored),
            target.image.shape()
        )));
    }
    let (composite, pixel_term) = match masked_pixels {
        None => (restored, mean_abs_diff(tape, restored, &target.image)),
        Some(mask) => {
            let count = mask.data.iter().filter(|&&m| m > 0.0).count().max(1) as f64;
            let m = tape.constant(mask.clone());
            let i = tape.constant(target.image.clone());
            let delta = tape.sub(restored, i);
            let delta = tape.mul(delta, m);
            let abs = tape.unary(UnOp::Abs, delta);
            let pix = tape.scale(tape.sum_all(abs), 1.0 / (3.0 * count));
            (tape.add(i, delta), pix)
        }
    };
    let mut total = tape.scale(pixel_term, weights.pixel);
    if weights.structural != 0.0 {
        let feats = phi.forward(tape, composite);
        let n = feats.len() as f64;
        for (f, t) in feats.into_iter().zip(&target.features) {
            let term = mean_abs_diff(tape, f, t);
            total = tape.add(total, tape.scale(term, weights.structural / n));
        }
    }
    Ok(total)
}

/// Restoration loss between an input image matrix and a restored variable.
pub fn restoration_loss(
    tape: &Tape,
    input: &Mat,
    restored: Var,
    phi: &PerceptualExtractor,
    weights: RestorationWeights,
) -> Result<Var> {
    restoration_loss_to(tape, &RestorationTarget::new(input.clone(), phi), restored, phi, weights, None)
}

/// `d_{i,j}` on the feature grid, row-major (`H_F` rows of `W_F`).
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceWeights {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl DistanceWeights {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn as_column(&self) -> Mat {
        Mat::new(self.values.len(), 1, self.values.clone())
    }
}

/// `d = 2(x/(W_F−1) − ½)² + 2(y/(H_F−1) − ½)²` with zero-based `x, y`:
/// 0 at the exact centre, 1 at the corners.
pub fn center_distance_weights(height: usize, width: usize) -> Result<DistanceWeights> {
    if height < 2 || width < 2 {
        return Err(Error::validation(format!("distance weights need a grid of at least 2x2, got {height}x{width}")));
    }
    let mut values = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            // centred numerators keep mirrored cells bit-identical
            let u = (2.0 * x as f64 - (width - 1) as f64) / (2.0 * (width - 1) as f64);
            let v = (2.0 * y as f64 - (height - 1) as f64) / (2.0 * (height - 1) as f64);
            values.push(2.0 * u * u + 2.0 * v * v);
        }
    }
    Ok(DistanceWeights { height, width, values })
}

fn foreground_cols(tape: &Tape, p: Var) -> Var {
    let k1 = tape.shape(p).1;
    let cols: Vec<usize> = (0..k1 - 1).collect();
    tape.select_cols(p, &cols)
}

/// Mini-group foreground presence: per group of `G` consecutive samples,
/// `2 − mean_g max_{ij, k≤K} P − mean_k max_{ij, g} P`, averaged over groups.
pub fn foreground_presence_loss(tape: &Tape, maps: &[Var], group_size: usize) -> Result<Var> {
    if maps.is_empty() || group_size == 0 || maps.len() % group_size != 0 {
        return Err(Error::validation(format!(
            "batch of {} maps cannot be split into groups of {group_size}",
            maps.len()
        )));
    }
    let per_sample: Vec<Var> = maps.iter().map(|&p| tape.max_cols(foreground_cols(tape, p))).collect();
    let groups = maps.len() / group_size;
    let mut total: Option<Var> = None;
    for g in 0..groups {
        let stack = tape.concat_rows(&per_sample[g * group_size..(g + 1) * group_size]);
        let image_term = tape.mean_all(tape.max_rows(stack));
        let part_term = tape.mean_all(tape.max_cols(stack));
        let both = tape.add(image_term, part_term);
        let term = tape.unary(UnOp::AddScalar(2.0), tape.unary(UnOp::Neg, both));
        total = Some(match total {
            Some(t) => tape.add(t, term),
            None => term,
        });
    }
    Ok(tape.scale(total.expect("at least one group"), 1.0 / groups as f64))
}

/// `−mean_samples log(max_{ij} d_{ij} P_{ij,bg})`, log floored at [`LOG_FLOOR`].
pub fn background_presence_loss(tape: &Tape, maps: &[Var], distance: &DistanceWeights) -> Result<Var> {
    if maps.is_empty() {
        return Err(Error::validation("background presence loss needs at least one map"));
    }
    let d = tape.constant(distance.as_column());
    let mut total: Option<Var> = None;
    for &p in maps {
        let (cells, k1) = tape.shape(p);
        if cells != distance.values.len() {
            return Err(Error::validation(format!(
                "similarity map has {cells} cells, distance grid has {}",
                distance.values.len()
            )));
        }
        let bg = tape.select_cols(p, &[k1 - 1]);
        let weighted = tape.mul(bg, d);
        let term = tape.unary(UnOp::LogClamped(LOG_FLOOR), tape.max_cols(weighted));
        total = Some(match total {
            Some(t) => tape.add(t, term),
            None => term,
        });
    }
    Ok(tape.scale(total.expect("non-empty"), -1.0 / maps.len() as f64))
}

/// `F̄_t = Σ P_t F / Σ P_t` for the `K` foreground parts (`K × C`).
pub fn mean_part_features(tape: &Tape, p: Var, features: Var) -> Result<Var> {
    let (pr, _) = tape.shape(p);
    let (fr, _) = tape.shape(features);
    if pr != fr {
        return Err(Error::validation(format!("similarity map has {pr} cells, features have {fr}")));
    }
    let fg = foreground_cols(tape, p);
    let weighted = tape.matmul_tn(fg, features);
    let mass = tape.transpose(tape.sum_rows(fg));
    let mass = tape.unary(UnOp::ClampMin(DIV_FLOOR), mass);
    Ok(tape.div(weighted, mass))
}

/// Presence flags: part `k` is present iff `Σ_{ij} P_{ij,k}` exceeds the threshold.
pub fn part_presence(p: &Mat, threshold: f64) -> Vec<bool> {
    let k = p.cols - 1;
    (0..k)
        .map(|c| (0..p.rows).map(|r| p.get(r, c)).sum::<f64>() > threshold)
        .collect()
}

fn normalize_rows(tape: &Tape, x: Var) -> Var {
    let sq = tape.sum_cols(tape.unary(UnOp::Square, x));
    let norm = tape.unary(UnOp::Sqrt, tape.unary(UnOp::ClampMin(DIV_FLOOR * DIV_FLOOR), sq));
    tape.div(x, norm)
}

/// Additive-angular-margin consistency between descriptors and mean part
/// features, over present parts only. Row `k` of the logit matrix holds
/// `s·cos(θ_kk + m)` on the diagonal and `s·cos θ_(t,k)` for the other
/// present parts `t`; the loss is the mean cross-entropy of the diagonal.
/// Returns 0 when no part is present.
pub fn semantic_loss(
    tape: &Tape,
    descriptors: Var,
    mean_features: Var,
    presence: &[bool],
    scale: f64,
    margin: f64,
) -> Result<Var> {
    let (kf, cf) = tape.shape(mean_features);
    let (kd, cd) = tape.shape(descriptors);
    if presence.len() != kf || kd < kf || cd != cf {
        return Err(Error::validation(format!(
            "semantic loss shapes disagree: D {kd}x{cd}, F̄ {kf}x{cf}, {} flags",
            presence.len()
        )));
    }
    let present: Vec<usize> = (0..kf).filter(|&k| presence[k]).collect();
    if present.is_empty() {
        log::warn!("semantic loss: no part present; contributing 0");
        return Ok(tape.constant(Mat::scalar(0.0)));
    }
    let n = present.len();
    let d = normalize_rows(tape, tape.select_rows(descriptors, &present));
    let f = normalize_rows(tape, tape.select_rows(mean_features, &present));
    // cos[k][t] = cos θ_(t,k)
    let cos = tape.matmul_nt(d, f);
    let eye = tape.constant(Mat::identity(n));
    let diag = tape.sum_cols(tape.mul(cos, eye));
    // cos(θ + m) = cos θ cos m − sin θ sin m
    let sin = tape.unary(
        UnOp::Sqrt,
        tape.unary(UnOp::ClampMin(LOG_FLOOR), tape.unary(UnOp::AddScalar(1.0), tape.unary(UnOp::Neg, tape.unary(UnOp::Square, diag)))),
    );
    let margin_cos = tape.sub(tape.scale(diag, margin.cos()), tape.scale(sin, margin.sin()));
    let correction = tape.mul(eye, tape.sub(margin_cos, diag));
    let logits = tape.scale(tape.add(cos, correction), scale);
    let log_probs = tape.log_softmax_rows(logits);
    let picked = tape.sum_all(tape.mul(log_probs, eye));
    Ok(tape.scale(picked, -1.0 / n as f64))
}

fn neighbour_pairs(height: usize, width: usize) -> (Vec<usize>, Vec<usize>) {
    let (mut from, mut to) = (Vec::new(), Vec::new());
    for y in 0..height {
        for x in 0..width {
            if x + 1 < width {
                from.push(y * width + x);
                to.push(y * width + x + 1);
            }
            if y + 1 < height {
                from.push(y * width + x);
                to.push((y + 1) * width + x);
            }
        }
    }
    (from, to)
}

/// `(1/(H_F W_F)) Σ_k Σ_{ij} (|P_{i+1,j} − P_{ij}| + |P_{i,j+1} − P_{ij}|)`.
pub fn tv_loss(tape: &Tape, p: Var, height: usize, width: usize) -> Result<Var> {
    let (cells, _) = tape.shape(p);
    if cells != height * width || height < 2 || width < 2 {
        return Err(Error::validation(format!("tv loss needs a >=2x2 grid matching {cells} cells")));
    }
    let (from, to) = neighbour_pairs(height, width);
    let a = tape.select_rows(p, &from);
    let b = tape.select_rows(p, &to);
    let diff = tape.unary(UnOp::Abs, tape.sub(b, a));
    Ok(tape.scale(tape.sum_all(diff), 1.0 / cells as f64))
}

/// `−(1/(K+1)) Σ P log P` with `0 log 0 = 0`; divided additionally by the
/// cell count when `per_pixel` is set.
pub fn entropy_loss(tape: &Tape, p: Var, per_pixel: bool) -> Var {
    let (cells, k1) = tape.shape(p);
    let logp = tape.unary(UnOp::LogClamped(LOG_FLOOR), p);
    let s = tape.sum_all(tape.mul(p, logp));
    let mut norm = k1 as f64;
    if per_pixel {
        norm *= cells as f64;
    }
    tape.scale(s, -1.0 / norm)
}

/// Concentration baseline: per foreground part, the `P`-weighted mean squared
/// distance of cells to the part centroid (coordinates scaled to `[0, 1]`),
/// averaged over parts.
pub fn concentration_loss_baseline(tape: &Tape, p: Var, height: usize, width: usize) -> Result<Var> {
    let (cells, _) = tape.shape(p);
    if cells != height * width || height < 2 || width < 2 {
        return Err(Error::validation("concentration loss grid mismatch"));
    }
    let mut coords = Mat::zeros(cells, 2);
    let mut sq = Mat::zeros(cells, 1);
    for y in 0..height {
        for x in 0..width {
            let (u, v) = (y as f64 / (height - 1) as f64, x as f64 / (width - 1) as f64);
            coords.set(y * width + x, 0, u);
            coords.set(y * width + x, 1, v);
            sq.data[y * width + x] = u * u + v * v;
        }
    }
    let fg = foreground_cols(tape, p);
    let k = tape.shape(fg).1;
    let pos = tape.constant(coords);
    let mass = tape.unary(UnOp::ClampMin(DIV_FLOOR), tape.sum_rows(fg));
    let centroids = tape.div(tape.matmul_tn(fg, pos), tape.transpose(mass));
    let cross = tape.scale(tape.matmul_nt(pos, centroids), -2.0);
    let dist = tape.add(cross, tape.constant(sq));
    let csq = tape.transpose(tape.sum_cols(tape.unary(UnOp::Square, centroids)));
    let dist = tape.add(dist, csq);
    let per_part = tape.div(tape.sum_rows(tape.mul(fg, dist)), mass);
    Ok(tape.scale(tape.sum_all(per_part), 1.0 / k as f64))
}

/// Loss weights of the overall objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_p: f64,
    pub lambda_s: f64,
    pub lambda_d: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_p: 1.0, lambda_s: 0.25, lambda_d: 0.5 }
    }
}

/// Individual terms; `None` means the term is switched off.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossTerms {
    pub restoration: Option<Var>,
    pub foreground: Option<Var>,
    pub background: Option<Var>,
    pub semantic: Option<Var>,
    pub tv: Option<Var>,
    pub entropy: Option<Var>,
    pub concentration: Option<Var>,
}

/// Evaluated term values (0 for disabled terms) and the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    #[serde(rename = "L_r")]
    pub restoration: f64,
    #[serde(rename = "L_f")]
    pub foreground: f64,
    #[serde(rename = "L_b")]
    pub background: f64,
    #[serde(rename = "L_s")]
    pub semantic: f64,
    #[serde(rename = "L_v")]
    pub tv: f64,
    #[serde(rename = "L_e")]
    pub entropy: f64,
    #[serde(rename = "L_c", default)]
    pub concentration: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `L_r + λ_p(L_f + L_b) + λ_s L_s + λ_d(L_v + L_e + L_c)`.
    pub fn recombine(&self, w: &LossWeights) -> f64 {
        self.restoration
            + w.lambda_p * (self.foreground + self.background)
            + w.lambda_s * self.semantic
            + w.lambda_d * (self.tv + self.entropy + self.concentration)
    }
}

/// Weighted total with a per-term breakdown. Fails naming the first
/// non-finite term.
pub fn total_loss(tape: &Tape, terms: &LossTerms, weights: &LossWeights) -> Result<(Var, LossBreakdown)> {
    let named = [
        ("L_r", terms.restoration, 1.0),
        ("L_f", terms.foreground, weights.lambda_p),
        ("L_b", terms.background, weights.lambda_p),
        ("L_s", terms.semantic, weights.lambda_s),
        ("L_v", terms.tv, weights.lambda_d),
        ("L_e", terms.entropy, weights.lambda_d),
        ("L_c", terms.concentration, weights.lambda_d),
    ];
    let mut values = [0.0f64; 7];
    let mut total: Option<Var> = None;
    for (i, (name, term, w)) in named.iter().enumerate() {
        let Some(v) = term else { continue };
        let x = tape.scalar_value(*v);
        if !x.is_finite() {
            return Err(Error::NonFinite { term: (*name).to_string() });
        }
        values[i] = x;
        if *w == 0.0 {
            continue;
        }
        let scaled = tape.scale(*v, *w);
        total = Some(match total {
            Some(t) => tape.add(t, scaled),
            None => scaled,
        });
    }
    let total = total.unwrap_or_else(|| tape.constant(Mat::scalar(0.0)));
    let breakdown = LossBreakdown {
        restoration: values[0],
        foreground: values[1],
        background: values[2],
        semantic: values[3],
        tv: values[4],
        entropy: values[5],
        concentration: values[6],
        total: tape.scalar_value(total),
    };
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite { term: "total".into() });
    }
    Ok((total, breakdown))
}
