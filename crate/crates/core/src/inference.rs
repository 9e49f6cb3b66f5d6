//! Pixel-resolution part masks: upsample `F` bilinearly to the image size,
//! match against `D`, and take the per-pixel argmax.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Tape};
use crate::error::{Error, Result};
use crate::masking::patchify;
use crate::model::Mpae;
use crate::raster::{Image, LabelMap};
use crate::tensors_io::{save_array, DenseArray};

/// Corner-aligned bilinear upsampling of a row-major `(h·w) × C` grid to
/// `(th·tw) × C`. Source grid points map exactly onto target corners.
pub fn interpolate_features(f: &Mat, h: usize, w: usize, th: usize, tw: usize) -> Result<Mat> {
    if f.rows != h * w || h == 0 || w == 0 {
        return Err(Error::validation(format!("feature map has {} rows, expected {h}x{w}", f.rows)));
    }
    if th < h || tw < w {
        return Err(Error::validation(format!("cannot interpolate {h}x{w} down to {th}x{tw}")));
    }
    let coord = |i: usize, src: usize, dst: usize| -> (usize, usize, f64) {
        if src == 1 || dst == 1 {
            return (0, 0, 0.0);
        }
        let num = i * (src - 1);
        let den = dst - 1;
        let lo = num / den;
        let frac = (num % den) as f64 / den as f64;
        (lo, (lo + 1).min(src - 1), frac)
    };
    let c = f.cols;
    let mut out = Mat::zeros(th * tw, c);
    for y in 0..th {
        let (y0, y1, fy) = coord(y, h, th);
        for x in 0..tw {
            let (x0, x1, fx) = coord(x, w, tw);
            let (a, b) = (f.row(y0 * w + x0), f.row(y0 * w + x1));
            let (cc, d) = (f.row(y1 * w + x0), f.row(y1 * w + x1));
            let row = out.row_mut(y * tw + x);
            for k in 0..c {
                let top = a[k] + fx * (b[k] - a[k]);
                let bottom = cc[k] + fx * (d[k] - cc[k]);
                row[k] = top + fy * (bottom - top);
            }
        }
    }
    Ok(out)
}

/// Hard and soft part masks at image resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct PartMasks {
    pub height: usize,
    pub width: usize,
    pub num_parts: usize,
    /// 0 = background, `k+1` = foreground descriptor `k`.
    pub labels: Vec<u8>,
    /// `(H·W) × (K+1)` similarity; columns `0..K` foreground, `K` background.
    pub soft: Mat,
}

impl PartMasks {
    /// Argmax of a soft map (ties go to the lowest column); the background
    /// column becomes label 0.
    pub fn from_soft(height: usize, width: usize, soft: Mat) -> Result<Self> {
        if soft.rows != height * width || soft.cols < 2 || soft.cols > 256 {
            return Err(Error::validation(format!("soft map {:?} does not fit {height}x{width}", soft.shape())));
        }
        let k = soft.cols - 1;
        let labels = (0..soft.rows)
            .map(|r| {
                let row = soft.row(r);
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                if best == k { 0 } else { (best + 1) as u8 }
            })
            .collect();
        Ok(Self { height, width, num_parts: k, labels, soft })
    }

    pub fn label_map(&self) -> LabelMap {
        LabelMap { height: self.height, width: self.width, labels: self.labels.clone() }
    }
}

fn softmax_rows(m: &mut Mat) {
    for r in 0..m.rows {
        let row = m.row_mut(r);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
}

/// Masks from precomputed raw features at a chosen output resolution.
pub fn predict_masks_at(model: &Mpae, image: &Image, raw: &Mat, height: usize, width: usize) -> Result<PartMasks> {
    if (image.height, image.width) != (model.config.input_height, model.config.input_width) {
        return Err(Error::validation(format!(
            "image is {}x{}, model expects {}x{}",
            image.height, image.width, model.config.input_height, model.config.input_width
        )));
    }
    let grid = patchify(image, model.config.patch_size)?;
    let tape = Tape::new();
    let p = model.store.bind_frozen(&tape);
    let (d, f) = model.descriptors_and_features(&tape, &p, &grid, raw)?;
    let (gh, gw) = model.grid();
    let up = interpolate_features(&tape.value(f), gh, gw, height, width)?;
    let mut soft = up.matmul_nt(&tape.value(d));
    softmax_rows(&mut soft);
    PartMasks::from_soft(height, width, soft)
}

/// Masks at the input image resolution using the built-in backbone.
pub fn predict_masks(model: &Mpae, image: &Image) -> Result<PartMasks> {
    let raw = model.raw_features(image)?;
    predict_masks_at(model, image, &raw, image.height, image.width)
}

/// JSON written next to every exported mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSidecar {
    pub num_parts: usize,
    pub config_hash: String,
    pub legend: BTreeMap<u8, String>,
}

/// Writes `<stem>.png` (pixel = label), `<stem>.json`, and optionally
/// `<stem>.soft.dna` (`H × W × (K+1)` f32).
pub fn export_masks(dir: &Path, stem: &str, masks: &PartMasks, config_hash: &str, soft: bool) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    masks.label_map().save_png(dir.join(format!("{stem}.png")))?;
    let mut legend = BTreeMap::new();
    legend.insert(0u8, "background".to_string());
    for k in 1..=masks.num_parts {
        legend.insert(k as u8, format!("part {k}"));
    }
    let sidecar = MaskSidecar { num_parts: masks.num_parts, config_hash: config_hash.to_string(), legend };
    let path = dir.join(format!("{stem}.json"));
    fs::write(&path, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(&path, e))?;
    if soft {
        let data: Vec<f32> = masks.soft.data.iter().map(|&v| v as f32).collect();
        let arr = DenseArray::new(
            vec![masks.height, masks.width, masks.num_parts + 1],
            crate::tensors_io::ArrayData::F32(data),
        )?;
        save_array(dir.join(format!("{stem}.soft.dna")), &arr)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensors_io::RunConfig;

    #[test]
    fn interpolation_examples() {
        let f = Mat::new(4, 2, vec![0.0, 5.0, 1.0, 5.0, 1.0, 5.0, 2.0, 5.0]);
        let same = interpolate_features(&f, 2, 2, 2, 2).unwrap();
        assert_eq!(same, f);
        let up = interpolate_features(&f, 2, 2, 3, 3).unwrap();
        assert_eq!(up.get(4, 0), 1.0);
        assert!(up.data.chunks(2).all(|r| r[1] == 5.0));
        assert_eq!(up.get(0, 0), 0.0);
        assert_eq!(up.get(8, 0), 2.0);
        assert!(interpolate_features(&f, 2, 2, 1, 3).is_err());
    }

    #[test]
    fn interpolation_is_exact_at_source_points() {
        let f = Mat::new(6, 1, vec![0.3, -1.0, 2.5, 7.0, 0.0, 1.25]);
        let up = interpolate_features(&f, 2, 3, 5, 9).unwrap();
        for y in 0..2 {
            for x in 0..3 {
                assert_eq!(up.get((y * 4) * 9 + x * 4, 0), f.get(y * 3 + x, 0));
            }
        }
    }

    #[test]
    fn argmax_ties_and_background() {
        let soft = Mat::from_rows(&[
            vec![0.4, 0.4, 0.2],
            vec![0.2, 0.2, 0.6],
            vec![0.1, 0.5, 0.4],
            vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
        ]);
        let m = PartMasks::from_soft(2, 2, soft).unwrap();
        assert_eq!(m.labels, vec![1, 0, 2, 1]);
    }

    fn tiny() -> RunConfig {
        RunConfig {
            num_parts: 3,
            dim: 8,
            patch_size: 4,
            input_height: 16,
            input_width: 16,
            batch_size: 2,
            group_size: 2,
            mlp_ratio: 2,
            ..RunConfig::default()
        }
    }

    fn test_image() -> Image {
        let mut img = Image::filled(16, 16, [0.1, 0.2, 0.3]);
        for y in 4..12 {
            for x in 2..10 {
                img.set_pixel(y, x, [0.8, 0.3 + 0.02 * x as f64, 0.1]);
            }
        }
        img
    }

    #[test]
    fn background_dominating_gives_zero_mask() {
        let mut model = Mpae::with_builtin_backbone(&tiny()).unwrap();
        // with a zero projection every cell's feature is the bias; aligning it
        // with the layer-normed background descriptor makes that logit largest
        let w = model.store.id("proj.weight").unwrap();
        let b = model.store.id("proj.bias").unwrap();
        *model.store.get_mut(w) = Mat::zeros(15, 8);
        let img = test_image();
        let grid = patchify(&img, 4).unwrap();
        let raw = model.raw_features(&img).unwrap();
        let tape = Tape::new();
        let p = model.store.bind_frozen(&tape);
        let (d, _) = model.descriptors_and_features(&tape, &p, &grid, &raw).unwrap();
        let d = tape.value(d);
        let bg = d.row(3).to_vec();
        *model.store.get_mut(b) = Mat::new(1, 8, bg.iter().map(|v| v * 50.0).collect());
        let dots: Vec<f64> = (0..4).map(|k| d.row(k).iter().zip(&bg).map(|(a, b)| a * b).sum()).collect();
        assert!(dots[3] > dots[..3].iter().cloned().fold(f64::MIN, f64::max));
        let masks = predict_masks(&model, &img).unwrap();
        assert!(masks.labels.iter().all(|&l| l == 0));
        assert!(masks.labels.iter().all(|&l| l <= 3));
    }

    #[test]
    fn deterministic_and_matches_training_path_at_source_resolution() {
        let model = Mpae::with_builtin_backbone(&tiny()).unwrap();
        let img = test_image();
        let a = predict_masks(&model, &img).unwrap();
        assert_eq!(a, predict_masks(&model, &img).unwrap());
        for r in 0..a.soft.rows {
            assert!((a.soft.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }

        let raw = model.raw_features(&img).unwrap();
        let at_grid = predict_masks_at(&model, &img, &raw, 4, 4).unwrap();
        let grid = patchify(&img, 4).unwrap();
        let tape = Tape::new();
        let p = model.store.bind_frozen(&tape);
        let (d, f) = model.descriptors_and_features(&tape, &p, &grid, &raw).unwrap();
        let train_p = tape.value(crate::matching::similarity_map(&tape, d, f).unwrap());
        let expected = PartMasks::from_soft(4, 4, train_p.clone()).unwrap();
        assert_eq!(at_grid.labels, expected.labels);
        for (x, y) in at_grid.soft.data.iter().zip(&train_p.data) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn export_writes_png_sidecar_and_soft_map() {
        let dir = tempfile::tempdir().unwrap();
        let soft = Mat::from_rows(&[vec![0.7, 0.3], vec![0.2, 0.8]]);
        let m = PartMasks::from_soft(1, 2, soft).unwrap();
        export_masks(dir.path(), "img0", &m, "abcd", true).unwrap();
        let back = LabelMap::load_png(dir.path().join("img0.png")).unwrap();
        assert_eq!(back.labels, vec![1, 0]);
        let side: MaskSidecar =
            serde_json::from_str(&fs::read_to_string(dir.path().join("img0.json")).unwrap()).unwrap();
        assert_eq!(side.num_parts, 1);
        assert_eq!(side.legend[&0], "background");
        let arr = crate::tensors_io::load_array(dir.path().join("img0.soft.dna")).unwrap();
        assert_eq!(arr.dims(), &[1, 2, 2]);
    }
}
