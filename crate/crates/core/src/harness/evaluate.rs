//! Scoring predicted part masks against annotated scenes, and the
//! masking-ratio sweep built on it.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{read_dataset, LabeledScene};
use crate::error::{Error, Result};
use crate::harness::train::Trainer;
use crate::inference::{predict_masks, MaskSidecar};
use crate::metrics::{
    ari, evaluation_pixels, nme, nmi, part_centroids, random_permutation_nmi, KeypointSet, UNKNOWN_LABEL,
};
use crate::model::Mpae;
use crate::raster::LabelMap;
use crate::tensors_io::{NmiNorm, RunConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub name: String,
    #[serde(rename = "NMI")]
    pub nmi: Option<f64>,
    #[serde(rename = "ARI")]
    pub ari: Option<f64>,
    /// Distinct foreground labels in the prediction.
    pub distinct_parts: usize,
    pub foreground_fraction: f64,
}

/// Evaluation report; NMI/ARI pool the scored pixels of every image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "NMI")]
    pub nmi: f64,
    #[serde(rename = "ARI")]
    pub ari: f64,
    #[serde(rename = "NME")]
    pub nme: Option<f64>,
    /// IoU of predicted foreground (label ≥ 1) and annotated foreground.
    pub foreground_iou: f64,
    /// Share of all pixels predicted as foreground.
    pub foreground_fraction: f64,
    pub mean_distinct_parts: f64,
    pub per_image: Vec<ImageScore>,
    pub config_hash: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub include_background: bool,
    pub norm: NmiNorm,
}

impl EvalOptions {
    pub fn from_config(c: &RunConfig) -> Self {
        Self { include_background: c.include_background_pixels, norm: c.nmi_norm }
    }
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { include_background: false, norm: NmiNorm::Sqrt }
    }
}

fn is_fg(l: u8) -> bool {
    l != 0 && l != UNKNOWN_LABEL
}

/// Scores predictions (aligned with `scenes`) for `num_parts` foreground parts.
pub fn score_predictions(
    predictions: &[LabelMap],
    scenes: &[LabeledScene],
    num_parts: usize,
    opts: EvalOptions,
) -> Result<(EvalReport, Vec<u8>, Vec<u8>)> {
    if predictions.len() != scenes.len() || scenes.is_empty() {
        return Err(Error::validation("need one prediction per annotated scene"));
    }
    let mut pooled_pred = Vec::new();
    let mut pooled_gt = Vec::new();
    let mut per_image = Vec::with_capacity(scenes.len());
    let (mut inter, mut union, mut fg_pred, mut total_px) = (0usize, 0usize, 0usize, 0usize);
    for (pred, scene) in predictions.iter().zip(scenes) {
        if (pred.height, pred.width) != (scene.gt.height, scene.gt.width) {
            return Err(Error::validation(format!("prediction for {} has the wrong size", scene.name)));
        }
        let (p, g) = evaluation_pixels(&pred.labels, &scene.gt.labels, opts.include_background);
        let (n, a) = if p.is_empty() { (None, None) } else { (Some(nmi(&p, &g, opts.norm)?), Some(ari(&p, &g)?)) };
        let mut seen = [false; 256];
        let mut fg = 0;
        for (&pl, &gl) in pred.labels.iter().zip(&scene.gt.labels) {
            seen[pl as usize] = true;
            if pl != 0 {
                fg += 1;
            }
            if gl == UNKNOWN_LABEL {
                continue;
            }
            let (a, b) = (pl != 0, is_fg(gl));
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        fg_pred += fg;
        total_px += pred.labels.len();
        per_image.push(ImageScore {
            name: scene.name.clone(),
            nmi: n,
            ari: a,
            distinct_parts: seen[1..].iter().filter(|&&s| s).count(),
            foreground_fraction: fg as f64 / pred.labels.len() as f64,
        });
        pooled_pred.extend(p);
        pooled_gt.extend(g);
    }
    let (nmi_all, ari_all) = if pooled_pred.is_empty() {
        (0.0, 0.0)
    } else {
        (nmi(&pooled_pred, &pooled_gt, opts.norm)?, ari(&pooled_pred, &pooled_gt)?)
    };

    let with_kp: Vec<usize> = (0..scenes.len()).filter(|&i| !scenes[i].keypoints.points.is_empty()).collect();
    let nme_value = if with_kp.len() >= 2 {
        let cut = with_kp.len() / 2;
        let cents = |idx: &[usize]| -> Vec<Vec<(f64, f64)>> {
            idx.iter().map(|&i| part_centroids(&predictions[i].labels, predictions[i].height, predictions[i].width, num_parts)).collect()
        };
        let kps = |idx: &[usize]| -> Vec<KeypointSet> { idx.iter().map(|&i| scenes[i].keypoints.clone()).collect() };
        let (train, test) = with_kp.split_at(cut);
        Some(nme(&cents(train), &kps(train), &cents(test), &kps(test))?.nme)
    } else {
        None
    };
    let report = EvalReport {
        nmi: nmi_all,
        ari: ari_all,
        nme: nme_value,
        foreground_iou: if union == 0 { 1.0 } else { inter as f64 / union as f64 },
        foreground_fraction: fg_pred as f64 / total_px.max(1) as f64,
        mean_distinct_parts: per_image.iter().map(|s| s.distinct_parts as f64).sum::<f64>() / per_image.len() as f64,
        per_image,
        config_hash: None,
    };
    Ok((report, pooled_pred, pooled_gt))
}

/// Predicts every scene with `model` and scores the result.
pub fn evaluate_model(model: &Mpae, scenes: &[LabeledScene], opts: EvalOptions) -> Result<EvalReport> {
    let preds: Vec<LabelMap> = scenes
        .par_iter()
        .map(|s| predict_masks(model, &s.image).map(|m| m.label_map()))
        .collect::<Result<_>>()?;
    let (mut report, _, _) = score_predictions(&preds, scenes, model.config.num_parts, opts)?;
    report.config_hash = Some(model.config.hash());
    Ok(report)
}

/// Like [`evaluate_model`], also returning the mean NMI of `trials` random
/// permutations of the pooled predicted labels.
pub fn evaluate_with_baseline(
    model: &Mpae,
    scenes: &[LabeledScene],
    opts: EvalOptions,
    trials: usize,
) -> Result<(EvalReport, f64)> {
    let preds: Vec<LabelMap> = scenes
        .par_iter()
        .map(|s| predict_masks(model, &s.image).map(|m| m.label_map()))
        .collect::<Result<_>>()?;
    let (mut report, p, g) = score_predictions(&preds, scenes, model.config.num_parts, opts)?;
    report.config_hash = Some(model.config.hash());
    let baseline = if p.is_empty() { 0.0 } else { random_permutation_nmi(&p, &g, trials, model.config.seed, opts.norm)? };
    Ok((report, baseline))
}

/// Scores a directory of exported masks (`<stem>.png` + optional sidecar)
/// against a dataset directory.
pub fn evaluate_dirs(pred_dir: &Path, gt_dir: &Path, opts: EvalOptions) -> Result<EvalReport> {
    let scenes: Vec<LabeledScene> = read_dataset(gt_dir)?.filter(|s| s.has_annotation()).collect();
    let mut preds = Vec::with_capacity(scenes.len());
    let mut num_parts = 0usize;
    let mut hash = None;
    for s in &scenes {
        let m = LabelMap::load_png(pred_dir.join(format!("{}.png", s.name)))?;
        let sidecar = pred_dir.join(format!("{}.json", s.name));
        if let Ok(text) = fs::read_to_string(&sidecar) {
            let side: MaskSidecar = serde_json::from_str(&text)?;
            num_parts = num_parts.max(side.num_parts);
            hash = Some(side.config_hash);
        }
        num_parts = num_parts.max(m.labels.iter().copied().max().unwrap_or(0) as usize);
        preds.push(m);
    }
    let (mut report, _, _) = score_predictions(&preds, &scenes, num_parts, opts)?;
    report.config_hash = hash;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub mask_ratio: f64,
    #[serde(rename = "NMI")]
    pub nmi: f64,
    #[serde(rename = "ARI")]
    pub ari: f64,
    pub final_loss: f64,
}

/// Trains one model per ratio and evaluates it; rows sorted by ratio.
pub fn sweep_mask_ratio(
    base: &RunConfig,
    train: &[LabeledScene],
    eval: &[LabeledScene],
    ratios: &[f64],
) -> Result<Vec<SweepRow>> {
    if let Some(&bad) = ratios.iter().find(|r| !(0.0..1.0).contains(*r)) {
        return Err(Error::Config {
            keys: vec!["mask_ratio".into()],
            message: format!("sweep ratio {bad} must lie in [0, 1); ratio 1 leaves no visible patches"),
        });
    }
    let mut sorted = ratios.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut rows = Vec::with_capacity(sorted.len());
    for r in sorted {
        let cfg = RunConfig { mask_ratio: r, ..base.clone() };
        let mut trainer = Trainer::from_scenes(&cfg, train, None)?;
        let logs = trainer.fit()?;
        let report = evaluate_model(&trainer.model, eval, EvalOptions::from_config(&cfg))?;
        log::info!("sweep r={r}: NMI {:.4}", report.nmi);
        rows.push(SweepRow {
            mask_ratio: r,
            nmi: report.nmi,
            ari: report.ari,
            final_loss: logs.last().map_or(f64::NAN, |l| l.losses.total),
        });
    }
    Ok(rows)
}

/// Plain-text table of sweep rows.
pub fn format_sweep(rows: &[SweepRow]) -> String {
    let mut out = String::from("mask_ratio      NMI      ARI  final_loss\n");
    for r in rows {
        out.push_str(&format!("{:>10.3} {:>8.4} {:>8.4} {:>11.5}\n", r.mask_ratio, r.nmi, r.ari, r.final_loss));
    }
    out
}
