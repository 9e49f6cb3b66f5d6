//! Clustering agreement (NMI, ARI) between predicted and annotated part
//! labels, a brute-force oracle for both, and keypoint regression error.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensors_io::{stream, NmiNorm, Stream};

/// Label value that marks pixels without annotation.
pub const UNKNOWN_LABEL: u8 = 255;
/// Largest input [`contingency_oracle`] accepts.
pub const ORACLE_LIMIT: usize = 10_000;

/// Joint label counts `n_uv`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContingencyTable {
    pub counts: Vec<Vec<u64>>,
    pub row_sums: Vec<u64>,
    pub col_sums: Vec<u64>,
    pub total: u64,
}

fn check_pair<L>(pred: &[L], gt: &[L]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::validation(format!("label arrays differ in length: {} vs {}", pred.len(), gt.len())));
    }
    if pred.is_empty() {
        return Err(Error::validation("label arrays are empty"));
    }
    Ok(())
}

fn dense_ids<L: Copy + Ord>(labels: &[L]) -> (Vec<usize>, usize) {
    let mut ids = BTreeMap::new();
    for &l in labels {
        let next = ids.len();
        ids.entry(l).or_insert(next);
    }
    (labels.iter().map(|l| ids[l]).collect(), ids.len())
}

impl ContingencyTable {
    pub fn new<L: Copy + Ord>(pred: &[L], gt: &[L]) -> Result<Self> {
        check_pair(pred, gt)?;
        let (u, nu) = dense_ids(pred);
        let (v, nv) = dense_ids(gt);
        let mut counts = vec![vec![0u64; nv]; nu];
        for (&a, &b) in u.iter().zip(&v) {
            counts[a][b] += 1;
        }
        let row_sums: Vec<u64> = counts.iter().map(|r| r.iter().sum()).collect();
        let col_sums: Vec<u64> = (0..nv).map(|j| counts.iter().map(|r| r[j]).sum()).collect();
        Ok(Self { counts, row_sums, col_sums, total: pred.len() as u64 })
    }

    /// True when both labelings induce the same partition.
    pub fn same_partition(&self) -> bool {
        let nonzero = self.counts.iter().flatten().filter(|&&c| c > 0).count();
        nonzero == self.row_sums.len() && nonzero == self.col_sums.len()
    }
}

fn entropy_of(counts: &[u64], n: f64) -> f64 {
    counts.iter().filter(|&&c| c > 0).map(|&c| {
        let p = c as f64 / n;
        -p * p.ln()
    }).sum()
}

fn normalise_mi(mi: f64, hu: f64, hv: f64, identical: bool, norm: NmiNorm) -> f64 {
    if identical {
        return 1.0;
    }
    if hu <= 0.0 || hv <= 0.0 {
        return 0.0;
    }
    let d = match norm {
        NmiNorm::Sqrt => (hu * hv).sqrt(),
        NmiNorm::Arithmetic => 0.5 * (hu + hv),
    };
    (mi / d).clamp(0.0, 1.0)
}

/// Normalised mutual information. Identical partitions score 1 (including
/// constant vs constant); otherwise a zero-entropy side scores 0.
pub fn nmi<L: Copy + Ord>(pred: &[L], gt: &[L], norm: NmiNorm) -> Result<f64> {
    let t = ContingencyTable::new(pred, gt)?;
    let n = t.total as f64;
    let hu = entropy_of(&t.row_sums, n);
    let hv = entropy_of(&t.col_sums, n);
    let mut mi = 0.0;
    for (i, row) in t.counts.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c > 0 {
                let c = c as f64;
                mi += c / n * (n * c / (t.row_sums[i] as f64 * t.col_sums[j] as f64)).ln();
            }
        }
    }
    Ok(normalise_mi(mi, hu, hv, t.same_partition(), norm))
}

fn pairs(n: u64) -> f64 {
    (n as f64) * (n as f64 - 1.0) / 2.0
}

fn adjusted(same_both: f64, same_pred: f64, same_gt: f64, total_pairs: f64) -> f64 {
    let expected = if total_pairs > 0.0 { same_pred * same_gt / total_pairs } else { 0.0 };
    let max = 0.5 * (same_pred + same_gt);
    let den = max - expected;
    if den == 0.0 {
        return 1.0;
    }
    (same_both - expected) / den
}

/// Adjusted Rand index by pair counting. A zero denominator (identical
/// trivial partitions, or a single element) scores 1.
pub fn ari<L: Copy + Ord>(pred: &[L], gt: &[L]) -> Result<f64> {
    let t = ContingencyTable::new(pred, gt)?;
    let both: f64 = t.counts.iter().flatten().map(|&c| pairs(c)).sum();
    let a: f64 = t.row_sums.iter().map(|&c| pairs(c)).sum();
    let b: f64 = t.col_sums.iter().map(|&c| pairs(c)).sum();
    Ok(adjusted(both, a, b, pairs(t.total)))
}

/// `(NMI, ARI)` computed from per-element and per-pair enumeration.
pub fn contingency_oracle<L: Copy + Ord>(pred: &[L], gt: &[L], norm: NmiNorm) -> Result<(f64, f64)> {
    check_pair(pred, gt)?;
    let n = pred.len();
    if n > ORACLE_LIMIT {
        return Err(Error::Refused(format!("oracle limited to {ORACLE_LIMIT} elements, got {n}")));
    }
    let nf = n as f64;
    let count = |f: &dyn Fn(usize) -> bool| (0..n).filter(|&j| f(j)).count() as f64;
    let (mut hu, mut hv, mut mi) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let cu = count(&|j| pred[j] == pred[i]);
        let cv = count(&|j| gt[j] == gt[i]);
        let cuv = count(&|j| pred[j] == pred[i] && gt[j] == gt[i]);
        hu -= (cu / nf).ln() / nf;
        hv -= (cv / nf).ln() / nf;
        mi += (nf * cuv / (cu * cv)).ln() / nf;
    }
    let (mut both, mut only_pred, mut only_gt, mut total) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        for j in i + 1..n {
            let sp = pred[i] == pred[j];
            let sg = gt[i] == gt[j];
            total += 1.0;
            match (sp, sg) {
                (true, true) => both += 1.0,
                (true, false) => only_pred += 1.0,
                (false, true) => only_gt += 1.0,
                _ => {}
            }
        }
    }
    let identical = only_pred == 0.0 && only_gt == 0.0;
    let nmi = normalise_mi(mi, hu.max(0.0), hv.max(0.0), identical, norm);
    let ari = adjusted(both, both + only_pred, both + only_gt, total);
    Ok((nmi, ari))
}

/// Pixel pairs scored by NMI/ARI: unannotated pixels are always dropped and
/// ground-truth background is dropped unless `include_background`.
pub fn evaluation_pixels(pred: &[u8], gt: &[u8], include_background: bool) -> (Vec<u8>, Vec<u8>) {
    pred.iter()
        .zip(gt)
        .filter(|(_, &g)| g != UNKNOWN_LABEL && (include_background || g != 0))
        .map(|(&p, &g)| (p, g))
        .unzip()
}

/// Mean NMI of `trials` random permutations of `pred` (same label counts)
/// against `gt`.
pub fn random_permutation_nmi(pred: &[u8], gt: &[u8], trials: usize, seed: u64, norm: NmiNorm) -> Result<f64> {
    check_pair(pred, gt)?;
    let mut shuffled = pred.to_vec();
    let mut total = 0.0;
    for t in 0..trials {
        shuffled.shuffle(&mut stream(seed, Stream::Eval, t as u64));
        total += nmi(&shuffled, gt, norm)?;
    }
    Ok(total / trials.max(1) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub visible: bool,
}

/// Keypoints of one image plus the length errors are divided by.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet {
    pub points: Vec<Keypoint>,
    pub norm: f64,
}

impl KeypointSet {
    /// Normalised by the image diagonal.
    pub fn with_diagonal(points: Vec<Keypoint>, height: usize, width: usize) -> Self {
        Self { points, norm: ((height * height + width * width) as f64).sqrt() }
    }
}

/// `(x, y)` mean pixel coordinate of labels `1..=K`; absent labels sit at
/// the image centre.
pub fn part_centroids(labels: &[u8], height: usize, width: usize, num_parts: usize) -> Vec<(f64, f64)> {
    let mut sums = vec![(0.0, 0.0, 0usize); num_parts];
    for (i, &l) in labels.iter().enumerate() {
        if l >= 1 && (l as usize) <= num_parts {
            let s = &mut sums[l as usize - 1];
            s.0 += (i % width) as f64;
            s.1 += (i / width) as f64;
            s.2 += 1;
        }
    }
    let centre = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
    sums.into_iter()
        .map(|(x, y, n)| if n == 0 { centre } else { (x / n as f64, y / n as f64) })
        .collect()
}

/// Mean visible-keypoint distance to `predicted`, divided by the set's norm.
pub fn nme_from_predictions(predicted: &[(f64, f64)], keypoints: &KeypointSet) -> Result<f64> {
    if predicted.len() != keypoints.points.len() {
        return Err(Error::validation(format!(
            "{} predictions for {} keypoints",
            predicted.len(),
            keypoints.points.len()
        )));
    }
    if !(keypoints.norm > 0.0) {
        return Err(Error::validation("normalisation length must be positive"));
    }
    let errs: Vec<f64> = predicted
        .iter()
        .zip(&keypoints.points)
        .filter(|(_, k)| k.visible)
        .map(|(p, k)| ((p.0 - k.x).powi(2) + (p.1 - k.y).powi(2)).sqrt())
        .collect();
    if errs.is_empty() {
        return Ok(0.0);
    }
    Ok(errs.iter().sum::<f64>() / errs.len() as f64 / keypoints.norm)
}

/// Affine map from concatenated part centroids to keypoint coordinates,
/// fitted per keypoint on the images where it is visible.
#[derive(Clone, Debug)]
pub struct CentroidRegressor {
    /// One `(2K+1) × 2` coefficient block per keypoint.
    pub coefficients: Vec<DMatrix<f64>>,
}

fn design_row(centroids: &[(f64, f64)]) -> Vec<f64> {
    let mut row: Vec<f64> = centroids.iter().flat_map(|&(x, y)| [x, y]).collect();
    row.push(1.0);
    row
}

impl CentroidRegressor {
    /// Least squares; rank-deficient systems get the minimum-norm solution.
    pub fn fit(centroids: &[Vec<(f64, f64)>], keypoints: &[KeypointSet]) -> Result<Self> {
        if centroids.is_empty() || centroids.len() != keypoints.len() {
            return Err(Error::validation("regression needs matching, non-empty centroid and keypoint lists"));
        }
        let width = design_row(&centroids[0]).len();
        let num_kp = keypoints[0].points.len();
        if keypoints.iter().any(|k| k.points.len() != num_kp) || centroids.iter().any(|c| 2 * c.len() + 1 != width) {
            return Err(Error::validation("inconsistent keypoint or part counts across images"));
        }
        let mut coefficients = Vec::with_capacity(num_kp);
        for kp in 0..num_kp {
            let rows: Vec<usize> = (0..centroids.len()).filter(|&i| keypoints[i].points[kp].visible).collect();
            if rows.is_empty() {
                log::warn!("keypoint {kp} never visible in the training split; predicting the origin");
                coefficients.push(DMatrix::zeros(width, 2));
                continue;
            }
            let a = DMatrix::from_fn(rows.len(), width, |r, c| design_row(&centroids[rows[r]])[c]);
            let b = DMatrix::from_fn(rows.len(), 2, |r, c| {
                let p = keypoints[rows[r]].points[kp];
                if c == 0 { p.x } else { p.y }
            });
            let svd = a.svd(true, true);
            let smax = svd.singular_values.max();
            let tol = smax * 1e-10 * (rows.len().max(width) as f64);
            let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
            if rank < width {
                log::warn!("centroid regression for keypoint {kp} is rank deficient ({rank} < {width}); using least-norm solution");
            }
            let x = svd.solve(&b, tol).map_err(|e| Error::validation(format!("regression failed: {e}")))?;
            coefficients.push(x);
        }
        Ok(Self { coefficients })
    }

    pub fn predict(&self, centroids: &[(f64, f64)]) -> Vec<(f64, f64)> {
        let row = design_row(centroids);
        self.coefficients
            .iter()
            .map(|c| {
                let dot = |col: usize| row.iter().enumerate().map(|(i, v)| v * c[(i, col)]).sum::<f64>();
                (dot(0), dot(1))
            })
            .collect()
    }
}

/// Keypoint error of a regression fitted on the train split and applied to
/// the test split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NmeReport {
    pub nme: f64,
    pub per_image: Vec<f64>,
}

pub fn nme(
    train_centroids: &[Vec<(f64, f64)>],
    train_keypoints: &[KeypointSet],
    test_centroids: &[Vec<(f64, f64)>],
    test_keypoints: &[KeypointSet],
) -> Result<NmeReport> {
    if test_centroids.is_empty() || test_centroids.len() != test_keypoints.len() {
        return Err(Error::validation("test split must be non-empty and aligned"));
    }
    let reg = CentroidRegressor::fit(train_centroids, train_keypoints)?;
    let per_image = test_centroids
        .iter()
        .zip(test_keypoints)
        .map(|(c, k)| nme_from_predictions(&reg.predict(c), k))
        .collect::<Result<Vec<_>>>()?;
    let nme = per_image.iter().sum::<f64>() / per_image.len() as f64;
    Ok(NmeReport { nme, per_image })
}
