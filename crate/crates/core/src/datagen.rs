//! Synthetic part-annotated scenes and a reader/writer for image, mask and
//! keypoint directories.
//!
//! Directory layout:
//!
//! ```text
//! <root>/images/<stem>.png     RGB input
//! <root>/masks/<stem>.png      optional 8-bit label map (0 = background)
//! <root>/keypoints.json        optional {"<stem>": {"points": [{"x","y","visible"}], "norm"}}
//! ```

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{Keypoint, KeypointSet, UNKNOWN_LABEL};
use crate::raster::{Image, LabelMap};
use crate::tensors_io::{stream, Stream};

/// Seeds at or above this value are reserved for evaluation scenes.
pub const EVAL_SEED_OFFSET: u64 = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Ellipse,
    Rectangle,
    Triangle,
}

/// What to draw. Part 1 is the body; the others attach around it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub parts: Vec<ShapeKind>,
    /// Hide one non-body part.
    pub occlude: bool,
    /// Amplitude of per-pixel uniform colour noise.
    pub texture: f64,
}

impl SceneSpec {
    /// `num_parts` parts cycling through ellipse, rectangle, triangle.
    pub fn toy(height: usize, width: usize, num_parts: usize) -> Self {
        let kinds = [ShapeKind::Ellipse, ShapeKind::Rectangle, ShapeKind::Triangle];
        Self {
            height,
            width,
            parts: (0..num_parts).map(|i| kinds[i % 3]).collect(),
            occlude: false,
            texture: 0.04,
        }
    }
}

/// Where one part was drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartPose {
    pub kind: ShapeKind,
    pub color: [f64; 3],
    pub center: (f64, f64),
    pub half_extent: (f64, f64),
    pub angle: f64,
    pub hidden: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenePose {
    pub background: [f64; 3],
    pub parts: Vec<PartPose>,
}

/// Image with its part annotation. `gt` uses [`UNKNOWN_LABEL`] where no
/// annotation exists.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledScene {
    pub name: String,
    pub image: Image,
    pub gt: LabelMap,
    pub keypoints: KeypointSet,
    pub pose: Option<ScenePose>,
}

impl LabeledScene {
    pub fn has_annotation(&self) -> bool {
        self.gt.labels.iter().any(|&l| l != UNKNOWN_LABEL)
    }
}

/// Base part colours; pairwise RGB distance ≥ 0.5.
const PART_COLORS: [[f64; 3]; 6] = [
    [0.90, 0.15, 0.10],
    [0.10, 0.75, 0.20],
    [0.15, 0.25, 0.95],
    [0.95, 0.85, 0.15],
    [0.85, 0.20, 0.85],
    [0.10, 0.80, 0.90],
];
const BACKGROUND_COLORS: [[f64; 3]; 4] = [
    [0.45, 0.45, 0.45],
    [0.25, 0.18, 0.12],
    [0.82, 0.80, 0.72],
    [0.35, 0.40, 0.55],
];
const COLOR_JITTER: f64 = 0.03;
/// Minimum RGB distance between any two colours in a scene.
pub const MIN_COLOR_DISTANCE: f64 = 0.3;

pub fn color_distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn inside(pose: &PartPose, x: f64, y: f64) -> bool {
    let (dx, dy) = (x - pose.center.0, y - pose.center.1);
    let (s, c) = pose.angle.sin_cos();
    let u = c * dx + s * dy;
    let v = -s * dx + c * dy;
    let (a, b) = pose.half_extent;
    match pose.kind {
        ShapeKind::Ellipse => (u / a).powi(2) + (v / b).powi(2) <= 1.0,
        ShapeKind::Rectangle => u.abs() <= a && v.abs() <= b,
        // apex at +a on the u axis, base of half-width b at −a
        ShapeKind::Triangle => u >= -a && u <= a && v.abs() <= b * (a - u) / (2.0 * a),
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Deterministic scene for `(seed, spec)`.
pub fn generate_scene(seed: u64, spec: &SceneSpec) -> Result<LabeledScene> {
    let k = spec.parts.len();
    if k == 0 || k > PART_COLORS.len() {
        return Err(Error::validation(format!("scene needs 1..={} parts, got {k}", PART_COLORS.len())));
    }
    let side = spec.height.min(spec.width);
    if side < 8 * k.max(2) {
        return Err(Error::validation(format!(
            "{}x{} canvas is too small for {k} parts",
            spec.height, spec.width
        )));
    }
    if spec.occlude && k < 2 {
        return Err(Error::validation("occlusion needs at least two parts"));
    }
    let mut rng = stream(seed, Stream::Scene, 0);
    let (h, w) = (spec.height as f64, spec.width as f64);
    let radius = 0.22 * side as f64 * rng.gen_range(0.95..1.05);
    let center = (w / 2.0 + rng.gen_range(-0.03..0.03) * w, h / 2.0 + rng.gen_range(-0.03..0.03) * h);
    let base_angle = rng.gen_range(-0.3..0.3);

    let mut parts = Vec::with_capacity(k);
    for (i, &kind) in spec.parts.iter().enumerate() {
        let mut color = PART_COLORS[i];
        for c in &mut color {
            *c = (*c + rng.gen_range(-COLOR_JITTER..COLOR_JITTER)).clamp(0.0, 1.0);
        }
        let pose = if i == 0 {
            PartPose {
                kind,
                color,
                center,
                half_extent: (radius, radius * rng.gen_range(0.75..0.95)),
                angle: base_angle,
                hidden: false,
            }
        } else {
            let theta = base_angle + 2.0 * PI * (i - 1) as f64 / (k - 1) as f64 + rng.gen_range(-0.2..0.2);
            // inner tip at most 0.7·radius from the centre, inside the body
            let dist = radius * rng.gen_range(1.2..1.3);
            let size = radius * rng.gen_range(0.6..0.7);
            PartPose {
                kind,
                color,
                center: (center.0 + dist * theta.cos(), center.1 + dist * theta.sin()),
                half_extent: (size, size * 0.8),
                angle: theta,
                hidden: false,
            }
        };
        parts.push(pose);
    }
    if spec.occlude {
        let hide = rng.gen_range(1..k);
        parts[hide].hidden = true;
    }
    let mut bg_choices = BACKGROUND_COLORS.to_vec();
    bg_choices.shuffle(&mut rng);
    let background = bg_choices
        .into_iter()
        .find(|b| parts.iter().all(|p| color_distance(*b, p.color) >= MIN_COLOR_DISTANCE))
        .ok_or_else(|| Error::validation("no background colour is far enough from the part colours"))?;

    let (hu, wu) = (spec.height, spec.width);
    let mut labels = vec![0u8; hu * wu];
    let mut data = vec![0.0; hu * wu * 3];
    // attachments first so the body stays whole and touches every attachment
    let order: Vec<usize> = (1..k).chain(std::iter::once(0)).collect();
    for y in 0..hu {
        for x in 0..wu {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut label = 0u8;
            for &i in &order {
                if !parts[i].hidden && inside(&parts[i], px, py) {
                    label = i as u8 + 1;
                }
            }
            labels[y * wu + x] = label;
            let base = if label == 0 { background } else { parts[label as usize - 1].color };
            for c in 0..3 {
                let noise = rng.gen_range(-1.0..1.0) * spec.texture;
                data[(y * wu + x) * 3 + c] = quantize(base[c] + noise);
            }
        }
    }

    let background_pixels = labels.iter().filter(|&&l| l == 0).count();
    if (background_pixels as f64) < 0.2 * (hu * wu) as f64 {
        return Err(Error::validation("scene leaves less than 20% background"));
    }
    let mut points = Vec::with_capacity(k);
    for (i, pose) in parts.iter().enumerate() {
        let label = i as u8 + 1;
        let pixels: Vec<usize> = (0..labels.len()).filter(|&j| labels[j] == label).collect();
        if pose.hidden {
            points.push(Keypoint { x: 0.0, y: 0.0, visible: false });
            continue;
        }
        if pixels.is_empty() {
            return Err(Error::validation(format!("part {label} has no visible pixels")));
        }
        let n = pixels.len() as f64;
        let cx = pixels.iter().map(|&j| (j % wu) as f64).sum::<f64>() / n;
        let cy = pixels.iter().map(|&j| (j / wu) as f64).sum::<f64>() / n;
        let (rx, ry) = (cx.round() as usize, cy.round() as usize);
        let (kx, ky) = if labels[ry.min(hu - 1) * wu + rx.min(wu - 1)] == label {
            (cx, cy)
        } else {
            let nearest = pixels
                .iter()
                .min_by(|&&a, &&b| {
                    let d = |j: usize| ((j % wu) as f64 - cx).powi(2) + ((j / wu) as f64 - cy).powi(2);
                    d(a).total_cmp(&d(b))
                })
                .copied()
                .expect("non-empty");
            ((nearest % wu) as f64, (nearest / wu) as f64)
        };
        points.push(Keypoint { x: kx, y: ky, visible: true });
    }

    Ok(LabeledScene {
        name: format!("scene_{seed:08}"),
        image: Image::new(hu, wu, data)?,
        gt: LabelMap::new(hu, wu, labels)?,
        keypoints: KeypointSet::with_diagonal(points, hu, wu),
        pose: Some(ScenePose { background, parts }),
    })
}

/// Scene seeds for a split: training uses `0..count`, evaluation starts at
/// [`EVAL_SEED_OFFSET`].
pub fn split_seeds(eval: bool, count: usize) -> Vec<u64> {
    let start = if eval { EVAL_SEED_OFFSET } else { 0 };
    (start..start + count as u64).collect()
}

/// Generates the scenes for a list of seeds (in order).
pub fn generate_scenes(seeds: &[u64], spec: &SceneSpec) -> Result<Vec<LabeledScene>> {
    use rayon::prelude::*;
    seeds.par_iter().map(|&s| generate_scene(s, spec)).collect()
}

/// Writes scenes in the directory layout described in the module docs.
pub fn write_dataset(dir: &Path, scenes: &[LabeledScene]) -> Result<()> {
    let images = dir.join("images");
    let masks = dir.join("masks");
    for d in [&images, &masks] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut keypoints = BTreeMap::new();
    for s in scenes {
        s.image.save_png(images.join(format!("{}.png", s.name)))?;
        if s.has_annotation() {
            s.gt.save_png(masks.join(format!("{}.png", s.name)))?;
        }
        if !s.keypoints.points.is_empty() {
            keypoints.insert(s.name.clone(), s.keypoints.clone());
        }
    }
    let path = dir.join("keypoints.json");
    fs::write(&path, serde_json::to_string_pretty(&keypoints)?).map_err(|e| Error::io(&path, e))
}

/// Streams scenes from a dataset directory in sorted file-name order.
/// Files that fail to load are skipped and recorded in `skipped`.
pub struct DatasetReader {
    entries: std::vec::IntoIter<PathBuf>,
    masks: PathBuf,
    keypoints: BTreeMap<String, KeypointSet>,
    pub skipped: Vec<(String, String)>,
}

/// A directory without an `images/` subfolder is read as a bare folder of images.
pub fn read_dataset(dir: &Path) -> Result<DatasetReader> {
    let nested = dir.join("images");
    let images = if nested.is_dir() { nested } else { dir.to_path_buf() };
    let mut entries = Vec::new();
    if images.is_dir() {
        for e in fs::read_dir(&images).map_err(|e| Error::io(&images, e))? {
            let path = e.map_err(|e| Error::io(&images, e))?.path();
            let is_png = path.extension().and_then(|x| x.to_str()).is_some_and(|x| x.eq_ignore_ascii_case("png"));
            if path.is_file() && is_png {
                entries.push(path);
            }
        }
    }
    entries.sort();
    let kp_path = dir.join("keypoints.json");
    let keypoints = if kp_path.is_file() {
        let text = fs::read_to_string(&kp_path).map_err(|e| Error::io(&kp_path, e))?;
        serde_json::from_str(&text)?
    } else {
        BTreeMap::new()
    };
    Ok(DatasetReader { entries: entries.into_iter(), masks: dir.join("masks"), keypoints, skipped: Vec::new() })
}

impl DatasetReader {
    fn load(&self, path: &Path) -> Result<LabeledScene> {
        let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let image = Image::load_png(path)?;
        let mask_path = self.masks.join(format!("{name}.png"));
        let gt = if mask_path.is_file() {
            let gt = LabelMap::load_png(&mask_path)?;
            if (gt.height, gt.width) != (image.height, image.width) {
                return Err(Error::validation(format!(
                    "mask {}x{} does not match image {}x{}",
                    gt.height, gt.width, image.height, image.width
                )));
            }
            gt
        } else {
            LabelMap::new(image.height, image.width, vec![UNKNOWN_LABEL; image.height * image.width])?
        };
        let keypoints = self
            .keypoints
            .get(&name)
            .cloned()
            .unwrap_or_else(|| KeypointSet::with_diagonal(Vec::new(), image.height, image.width));
        Ok(LabeledScene { name, image, gt, keypoints, pose: None })
    }
}

impl Iterator for DatasetReader {
    type Item = LabeledScene;

    fn next(&mut self) -> Option<LabeledScene> {
        while let Some(path) = self.entries.next() {
            match self.load(&path) {
                Ok(scene) => return Some(scene),
                Err(e) => {
                    log::warn!("skipping {}: {e}", path.display());
                    self.skipped.push((path.display().to_string(), e.to_string()));
                }
            }
        }
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn label_set(s: &LabeledScene) -> BTreeSet<u8> {
        s.gt.labels.iter().copied().collect()
    }

    #[test]
    fn deterministic() {
        let spec = SceneSpec::toy(64, 64, 3);
        assert_eq!(generate_scene(5, &spec).unwrap(), generate_scene(5, &spec).unwrap());
        assert_ne!(generate_scene(5, &spec).unwrap().image, generate_scene(6, &spec).unwrap().image);
    }

    #[test]
    fn label_sets() {
        let s = generate_scene(1, &SceneSpec::toy(64, 64, 2)).unwrap();
        assert_eq!(label_set(&s), BTreeSet::from([0, 1, 2]));
        let spec = SceneSpec { occlude: true, ..SceneSpec::toy(64, 64, 3) };
        for seed in 0..10 {
            let s = generate_scene(seed, &spec).unwrap();
            let pose = s.pose.as_ref().unwrap();
            let hidden = pose.parts.iter().position(|p| p.hidden).unwrap() as u8 + 1;
            assert!(!label_set(&s).contains(&hidden));
            assert_eq!(label_set(&s).len(), 3);
            assert!(!s.keypoints.points[hidden as usize - 1].visible);
        }
    }

    #[test]
    fn infeasible_specs_rejected() {
        assert!(generate_scene(0, &SceneSpec::toy(64, 64, 7)).is_err());
        assert!(generate_scene(0, &SceneSpec::toy(16, 16, 3)).is_err());
        assert!(generate_scene(0, &SceneSpec { occlude: true, ..SceneSpec::toy(64, 64, 1) }).is_err());
        assert!(generate_scene(0, &SceneSpec::toy(64, 64, 0)).is_err());
    }

    fn parts_touch(s: &LabeledScene, a: u8, b: u8) -> bool {
        let (h, w) = (s.gt.height, s.gt.width);
        (0..h).any(|y| {
            (0..w).any(|x| {
                s.gt.get(y, x) == a
                    && [(0i64, 1i64), (1, 0), (0, -1), (-1, 0)].iter().any(|&(dy, dx)| {
                        let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                        ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w && s.gt.get(ny as usize, nx as usize) == b
                    })
            })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn scene_invariants(seed in 0u64..1_000_000, k in 1usize..=4) {
            let s = generate_scene(seed, &SceneSpec::toy(64, 64, k)).unwrap();
            let pose = s.pose.as_ref().unwrap();
            let mut colors = vec![pose.background];
            colors.extend(pose.parts.iter().map(|p| p.color));
            for i in 0..colors.len() {
                for j in i + 1..colors.len() {
                    prop_assert!(color_distance(colors[i], colors[j]) >= MIN_COLOR_DISTANCE);
                }
            }
            let bg = s.gt.labels.iter().filter(|&&l| l == 0).count();
            prop_assert!(bg as f64 >= 0.2 * 4096.0);
            for (i, kp) in s.keypoints.points.iter().enumerate() {
                prop_assert!(kp.visible);
                let label = i as u8 + 1;
                prop_assert_eq!(s.gt.get(kp.y.round() as usize, kp.x.round() as usize), label);
                if i > 0 {
                    prop_assert!(parts_touch(&s, 1, label), "part {} detached from body", label);
                }
            }
            prop_assert_eq!(label_set(&s).len(), k + 1);
        }
    }

    #[test]
    fn splits_are_disjoint() {
        let train: BTreeSet<u64> = split_seeds(false, 5000).into_iter().collect();
        assert!(split_seeds(true, 5000).iter().all(|s| !train.contains(s)));
    }

    #[test]
    fn round_trip_and_reader_contract() {
        let dir = tempfile::tempdir().unwrap();
        let empty = read_dataset(dir.path()).unwrap();
        assert_eq!(empty.count(), 0);

        let spec = SceneSpec::toy(32, 32, 2);
        let scenes = generate_scenes(&[3, 1, 2], &spec).unwrap();
        write_dataset(dir.path(), &scenes).unwrap();
        let back: Vec<LabeledScene> = read_dataset(dir.path()).unwrap().collect();
        let names: Vec<&str> = back.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names, ["scene_00000001", "scene_00000002", "scene_00000003"]);
        let orig = scenes.iter().find(|s| s.name == back[0].name).unwrap();
        assert_eq!(back[0].gt, orig.gt);
        assert_eq!(back[0].image, orig.image);
        assert_eq!(back[0].keypoints, orig.keypoints);

        fs::remove_file(dir.path().join("masks/scene_00000002.png")).unwrap();
        LabelMap::new(4, 4, vec![0; 16]).unwrap().save_png(dir.path().join("masks/scene_00000003.png")).unwrap();
        let mut reader = read_dataset(dir.path()).unwrap();
        let got: Vec<LabeledScene> = reader.by_ref().collect();
        assert_eq!(got.len(), 2);
        assert!(got[1].gt.labels.iter().all(|&l| l == UNKNOWN_LABEL));
        assert!(!got[1].has_annotation());
        assert_eq!(reader.skipped.len(), 1);
        assert!(reader.skipped[0].0.contains("scene_00000003"));
    }
}
