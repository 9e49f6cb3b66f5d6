//! Central finite differences against reverse-mode gradients for every
//! loss and differentiable block, on small random float64 instances.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Tape, UnOp, Var};
use crate::backbone::{DescriptorExtractor, DescriptorOptions, Projection};
use crate::error::{Error, Result};
use crate::harness::train::{batch_loss, LossContext, TrainSample};
use crate::losses::{
    background_presence_loss, center_distance_weights, concentration_loss_baseline, entropy_loss,
    foreground_presence_loss, mean_part_features, restoration_loss_to, semantic_loss, total_loss, tv_loss,
    LossTerms, LossWeights, PerceptualExtractor, RestorationTarget, RestorationWeights,
};
use crate::masking::{generate_mask, patchify, BinaryMask};
use crate::matching::{fill_masked, similarity_map};
use crate::model::Mpae;
use crate::nn::{sincos_position_encoding, Bound, Init, ParamStore};
use crate::raster::Image;
use crate::restoration::{Decoder, Encoder};
use crate::tensors_io::{labeled_stream, Rng, RunConfig};

const STEP: f64 = 1e-5;
/// Second differences above this (relative to `1 + |f|`) mark a kink
/// within one step of the sample; such instances are redrawn.
const KINK_TOLERANCE: f64 = 1e-6;
const MAX_REDRAWS: usize = 50;

type Scalar = Box<dyn Fn(&Tape, &[Var]) -> Result<Var>>;

/// A differentiable scalar function and the point to check it at.
pub struct Instance {
    pub inputs: Vec<Mat>,
    pub f: Scalar,
    /// Flat coordinates to check; `None` checks every coordinate.
    pub coords: Option<Vec<(usize, usize)>>,
}

type Builder = fn(&mut Rng) -> Result<Instance>;

fn uniform(rng: &mut Rng, rows: usize, cols: usize, bound: f64) -> Mat {
    Mat::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect())
}

/// Reduces a matrix output to a scalar with fixed random weights.
fn weighted_sum(tape: &Tape, out: Var, weights: &Mat) -> Var {
    tape.sum_all(tape.mul(out, tape.constant(weights.clone())))
}

fn params_of(store: &ParamStore) -> Vec<Mat> {
    store.values().to_vec()
}

fn check_similarity(rng: &mut Rng) -> Result<Instance> {
    let w = uniform(rng, 5, 3, 1.0);
    Ok(Instance {
        inputs: vec![uniform(rng, 3, 4, 1.0), uniform(rng, 5, 4, 1.0)],
        f: Box::new(move |t, v| Ok(weighted_sum(t, similarity_map(t, v[0], v[1])?, &w))),
        coords: None,
    })
}

fn check_fill(rng: &mut Rng) -> Result<Instance> {
    let mut cells: Vec<bool> = (0..6).map(|_| rng.gen_bool(0.5)).collect();
    cells[0] = false;
    cells[5] = true;
    let mask = BinaryMask::from_cells(2, 3, cells)?;
    let visible = mask.visible_indices();
    let w = uniform(rng, 6, 4, 1.0);
    Ok(Instance {
        inputs: vec![uniform(rng, visible.len(), 4, 1.0), uniform(rng, 3, 4, 1.0), uniform(rng, 6, 3, 2.0)],
        f: Box::new(move |t, v| {
            let p = t.softmax_rows(v[2]);
            let r = fill_masked(t, v[0], &visible, v[1], p, &mask)?;
            Ok(weighted_sum(t, r.values, &w))
        }),
        coords: None,
    })
}

fn check_projection(rng: &mut Rng) -> Result<Instance> {
    let mut store = ParamStore::new();
    let proj = Projection::new(&mut store, &Init::new(rng.gen()), 6, 4);
    let w = uniform(rng, 5, 4, 1.0);
    let mut inputs = vec![uniform(rng, 5, 6, 1.0)];
    inputs.extend(params_of(&store));
    Ok(Instance {
        inputs,
        f: Box::new(move |t, v| {
            let p = Bound::from_vars(v[1..].to_vec());
            Ok(weighted_sum(t, proj.forward(t, &p, v[0])?, &w))
        }),
        coords: None,
    })
}

fn check_descriptors(rng: &mut Rng) -> Result<Instance> {
    let mut store = ParamStore::new();
    let ext = DescriptorExtractor::new(&mut store, &Init::new(rng.gen()), 12, 3, 4, 2, 8);
    let pos = sincos_position_encoding(2, 2, 4);
    let w = uniform(rng, 3, 4, 1.0);
    let mut inputs = vec![uniform(rng, 4, 12, 1.0)];
    inputs.extend(params_of(&store));
    Ok(Instance {
        inputs,
        f: Box::new(move |t, v| {
            let p = Bound::from_vars(v[1..].to_vec());
            let d = ext.forward(t, &p, v[0], t.constant(pos.clone()), DescriptorOptions::default())?;
            Ok(weighted_sum(t, d, &w))
        }),
        coords: None,
    })
}

fn check_encoder(rng: &mut Rng) -> Result<Instance> {
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, &Init::new(rng.gen()), 12, 4, 2, 8);
    let pos = sincos_position_encoding(1, 3, 4);
    let w = uniform(rng, 3, 4, 1.0);
    let mut inputs = vec![uniform(rng, 3, 12, 1.0)];
    inputs.extend(params_of(&store));
    Ok(Instance {
        inputs,
        f: Box::new(move |t, v| {
            let p = Bound::from_vars(v[1..].to_vec());
            Ok(weighted_sum(t, enc.forward(t, &p, v[0], t.constant(pos.clone()))?, &w))
        }),
        coords: None,
    })
}

fn check_decoder(rng: &mut Rng) -> Result<Instance> {
    let mut store = ParamStore::new();
    let dec = Decoder::new(&mut store, &Init::new(rng.gen()), 2, 2, 2, 4, 2, 8);
    let pos = sincos_position_encoding(2, 2, 4);
    let w = uniform(rng, 16, 3, 1.0);
    let mut inputs = vec![uniform(rng, 4, 4, 1.0)];
    inputs.extend(params_of(&store));
    Ok(Instance {
        inputs,
        f: Box::new(move |t, v| {
            let p = Bound::from_vars(v[1..].to_vec());
            Ok(weighted_sum(t, dec.forward(t, &p, v[0], Some(t.constant(pos.clone())))?, &w))
        }),
        coords: None,
    })
}

fn check_restoration(rng: &mut Rng) -> Result<Instance> {
    let phi = PerceptualExtractor::new(4, 4)?;
    let target = RestorationTarget::new(Mat::new(16, 3, (0..48).map(|_| rng.gen_range(0.0..1.0)).collect()), &phi);
    Ok(Instance {
        inputs: vec![uniform(rng, 16, 3, 2.0)],
        f: Box::new(move |t, v| {
            let restored = t.unary(UnOp::Sigmoid, v[0]);
            restoration_loss_to(t, &target, restored, &phi, RestorationWeights::default(), None)
        }),
        coords: None,
    })
}

fn softmax_inputs(rng: &mut Rng, count: usize, rows: usize, cols: usize) -> Vec<Mat> {
    (0..count).map(|_| uniform(rng, rows, cols, 2.0)).collect()
}

fn check_foreground(rng: &mut Rng) -> Result<Instance> {
    Ok(Instance {
        inputs: softmax_inputs(rng, 4, 6, 3),
        f: Box::new(|t, v| {
            let maps: Vec<Var> = v.iter().map(|&x| t.softmax_rows(x)).collect();
            foreground_presence_loss(t, &maps, 2)
        }),
        coords: None,
    })
}

fn check_background(rng: &mut Rng) -> Result<Instance> {
    let d = center_distance_weights(3, 3)?;
    Ok(Instance {
        inputs: softmax_inputs(rng, 2, 9, 3),
        f: Box::new(move |t, v| {
            let maps: Vec<Var> = v.iter().map(|&x| t.softmax_rows(x)).collect();
            background_presence_loss(t, &maps, &d)
        }),
        coords: None,
    })
}

fn check_semantic(rng: &mut Rng) -> Result<Instance> {
    let mut present: Vec<bool> = (0..3).map(|_| rng.gen_bool(0.7)).collect();
    present[rng.gen_range(0..3)] = true;
    let (s, m) = (rng.gen_range(5.0..20.0), rng.gen_range(0.1..0.6));
    Ok(Instance {
        inputs: vec![uniform(rng, 4, 5, 1.0), uniform(rng, 3, 5, 1.0)],
        f: Box::new(move |t, v| semantic_loss(t, v[0], v[1], &present, s, m)),
        coords: None,
    })
}

fn check_mean_features(rng: &mut Rng) -> Result<Instance> {
    let w = uniform(rng, 2, 4, 1.0);
    Ok(Instance {
        inputs: vec![uniform(rng, 6, 3, 2.0), uniform(rng, 6, 4, 1.0)],
        f: Box::new(move |t, v| Ok(weighted_sum(t, mean_part_features(t, t.softmax_rows(v[0]), v[1])?, &w))),
        coords: None,
    })
}

fn check_tv(rng: &mut Rng) -> Result<Instance> {
    Ok(Instance {
        inputs: vec![uniform(rng, 6, 3, 2.0)],
        f: Box::new(|t, v| tv_loss(t, t.softmax_rows(v[0]), 2, 3)),
        coords: None,
    })
}

fn check_entropy(rng: &mut Rng) -> Result<Instance> {
    let per_pixel = rng.gen_bool(0.5);
    Ok(Instance {
        inputs: vec![uniform(rng, 6, 3, 2.0)],
        f: Box::new(move |t, v| Ok(entropy_loss(t, t.softmax_rows(v[0]), per_pixel))),
        coords: None,
    })
}

fn check_concentration(rng: &mut Rng) -> Result<Instance> {
    Ok(Instance {
        inputs: vec![uniform(rng, 9, 3, 2.0)],
        f: Box::new(|t, v| concentration_loss_baseline(t, t.softmax_rows(v[0]), 3, 3)),
        coords: None,
    })
}

fn check_total(rng: &mut Rng) -> Result<Instance> {
    let weights = LossWeights { lambda_p: rng.gen_range(0.1..2.0), lambda_s: rng.gen_range(0.1..1.0), lambda_d: rng.gen_range(0.1..1.0) };
    let d = center_distance_weights(2, 3)?;
    Ok(Instance {
        inputs: softmax_inputs(rng, 2, 6, 3),
        f: Box::new(move |t, v| {
            let maps: Vec<Var> = v.iter().map(|&x| t.softmax_rows(x)).collect();
            let terms = LossTerms {
                restoration: Some(t.sum_all(t.unary(UnOp::Square, v[0]))),
                foreground: Some(foreground_presence_loss(t, &maps, 2)?),
                background: Some(background_presence_loss(t, &maps, &d)?),
                semantic: None,
                tv: Some(tv_loss(t, maps[0], 2, 3)?),
                entropy: Some(entropy_loss(t, maps[1], false)),
                concentration: None,
            };
            Ok(total_loss(t, &terms, &weights)?.0)
        }),
        coords: None,
    })
}

fn check_end_to_end(rng: &mut Rng) -> Result<Instance> {
    let cfg = RunConfig {
        num_parts: 2,
        dim: 4,
        patch_size: 2,
        input_height: 8,
        input_width: 8,
        batch_size: 2,
        group_size: 2,
        mlp_ratio: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        descriptor_layers: 1,
        seed: rng.gen_range(0..1000),
        ..RunConfig::default()
    };
    let model = Mpae::with_builtin_backbone(&cfg)?;
    let ctx = LossContext::new(&cfg)?;
    let mut samples = Vec::new();
    let mut masks = Vec::new();
    for b in 0..2 {
        let img = Image::new(8, 8, (0..192).map(|_| rng.gen_range(0.0..1.0)).collect())?;
        samples.push(TrainSample {
            name: format!("g{b}"),
            grid: patchify(&img, 2)?,
            raw: model.raw_features(&img)?,
            target: RestorationTarget::new(img.to_mat(), &ctx.phi),
        });
        masks.push(generate_mask(4, 4, 0.5, cfg.seed, b)?);
    }
    let inputs = params_of(&model.store);
    let mut coords: Vec<(usize, usize)> =
        inputs.iter().enumerate().flat_map(|(i, m)| (0..m.data.len()).map(move |j| (i, j))).collect();
    // every parameter tensor is visited; the rest are sampled
    let mut picked: Vec<(usize, usize)> = (0..inputs.len()).map(|i| (i, rng.gen_range(0..inputs[i].data.len()))).collect();
    for _ in 0..60 {
        picked.push(coords.swap_remove(rng.gen_range(0..coords.len())));
    }
    picked.sort_unstable();
    picked.dedup();
    Ok(Instance {
        inputs,
        f: Box::new(move |t, v| {
            let p = Bound::from_vars(v.to_vec());
            let refs: Vec<&TrainSample> = samples.iter().collect();
            Ok(batch_loss(&model, t, &p, &refs, &masks, &ctx)?.0)
        }),
        coords: Some(picked),
    })
}

/// Registered checks in report order.
pub const COMPONENTS: &[(&str, Builder)] = &[
    ("projection", check_projection),
    ("descriptor_extractor", check_descriptors),
    ("encoder", check_encoder),
    ("decoder", check_decoder),
    ("similarity_map", check_similarity),
    ("fill_masked", check_fill),
    ("restoration_loss", check_restoration),
    ("foreground_presence_loss", check_foreground),
    ("background_presence_loss", check_background),
    ("mean_part_features", check_mean_features),
    ("semantic_loss", check_semantic),
    ("tv_loss", check_tv),
    ("entropy_loss", check_entropy),
    ("concentration_loss_baseline", check_concentration),
    ("total_loss", check_total),
    ("end_to_end", check_end_to_end),
];

pub fn component_names() -> Vec<&'static str> {
    COMPONENTS.iter().map(|(n, _)| *n).collect()
}

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub instances: usize,
    pub tolerance: f64,
    pub seed: u64,
    /// Components whose analytic gradient is deliberately doubled.
    pub corrupt: Vec<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self { instances: 20, tolerance: 1e-4, seed: 0, corrupt: Vec::new() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub instances: usize,
    pub redrawn: usize,
    pub coordinates: usize,
    pub max_relative_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub results: Vec<CheckResult>,
    pub warnings: Vec<String>,
    pub passed: bool,
}

impl GradcheckReport {
    /// Per-component table.
    pub fn table(&self) -> String {
        let mut out = format!("{:<30} {:>9} {:>7} {:>13}  status\n", "component", "instances", "coords", "max rel err");
        for r in &self.results {
            out.push_str(&format!(
                "{:<30} {:>9} {:>7} {:>13.3e}  {}\n",
                r.name,
                r.instances,
                r.coordinates,
                r.max_relative_error,
                if r.passed { "ok" } else { "FAIL" }
            ));
        }
        for w in &self.warnings {
            out.push_str(&format!("warning: {w}\n"));
        }
        out
    }
}

fn evaluate(inst: &Instance, inputs: &[Mat], corrupt: bool) -> Result<(Tape, Var, Vec<Var>)> {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.param(m.clone())).collect();
    let mut out = (inst.f)(&tape, &vars)?;
    if corrupt {
        out = tape.unary(UnOp::GradScale(2.0), out);
    }
    Ok((tape, out, vars))
}

fn scalar_at(inst: &Instance, inputs: &[Mat]) -> Result<f64> {
    let (tape, out, _) = evaluate(inst, inputs, false)?;
    Ok(tape.scalar_value(out))
}

/// `Some(relative error)` or `None` when a kink lies within one step.
fn compare(inst: &Instance, corrupt: bool) -> Result<Option<(f64, usize)>> {
    let (tape, out, vars) = evaluate(inst, &inst.inputs, corrupt)?;
    let f0 = tape.scalar_value(out);
    let grads = tape.backward(out);
    let coords: Vec<(usize, usize)> = match &inst.coords {
        Some(c) => c.clone(),
        None => inst.inputs.iter().enumerate().flat_map(|(i, m)| (0..m.data.len()).map(move |j| (i, j))).collect(),
    };
    let mut inputs = inst.inputs.clone();
    let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
    for &(i, j) in &coords {
        let x = inputs[i].data[j];
        inputs[i].data[j] = x + STEP;
        let fp = scalar_at(inst, &inputs)?;
        inputs[i].data[j] = x - STEP;
        let fm = scalar_at(inst, &inputs)?;
        inputs[i].data[j] = x;
        if (fp - 2.0 * f0 + fm).abs() > KINK_TOLERANCE * (1.0 + f0.abs()) {
            return Ok(None);
        }
        let numeric = (fp - fm) / (2.0 * STEP);
        let analytic = grads.get(vars[i]).map_or(0.0, |g| g.data[j]);
        diff2 += (numeric - analytic).powi(2);
        a2 += analytic * analytic;
        n2 += numeric * numeric;
    }
    let denom = a2.sqrt().max(n2.sqrt()).max(1e-8);
    Ok(Some((diff2.sqrt() / denom, coords.len())))
}

/// Runs the named checks (all of them for `["all"]`). An empty list passes
/// vacuously with a warning.
pub fn gradcheck(components: &[String], opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut warnings = Vec::new();
    if components.is_empty() {
        let w = "empty component list; nothing checked".to_string();
        log::warn!("{w}");
        warnings.push(w);
        return Ok(GradcheckReport { results: Vec::new(), warnings, passed: true });
    }
    let wanted: Vec<&str> = if components.iter().any(|c| c == "all") {
        component_names()
    } else {
        components.iter().map(String::as_str).collect()
    };
    let mut results = Vec::new();
    for name in wanted {
        let builder = COMPONENTS
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, b)| *b)
            .ok_or_else(|| Error::validation(format!("unknown gradcheck component {name}; known: {}", component_names().join(", "))))?;
        let corrupt = opts.corrupt.iter().any(|c| c == name);
        let (mut worst, mut redrawn, mut done, mut coords) = (0.0f64, 0usize, 0usize, 0usize);
        let mut attempt = 0u64;
        while done < opts.instances {
            if redrawn > MAX_REDRAWS {
                return Err(Error::validation(format!("{name}: could not draw kink-free instances")));
            }
            let mut rng = labeled_stream(opts.seed, &format!("gradcheck/{name}"), attempt);
            attempt += 1;
            let inst = builder(&mut rng)?;
            match compare(&inst, corrupt)? {
                None => redrawn += 1,
                Some((err, n)) => {
                    worst = worst.max(err);
                    coords += n;
                    done += 1;
                }
            }
        }
        results.push(CheckResult {
            name: name.to_string(),
            instances: done,
            redrawn,
            coordinates: coords,
            max_relative_error: worst,
            passed: worst < opts.tolerance,
        });
    }
    let passed = results.iter().all(|r| r.passed);
    Ok(GradcheckReport { results, warnings, passed })
}
