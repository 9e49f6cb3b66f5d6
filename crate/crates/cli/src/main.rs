use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mpae::datagen::{generate_scenes, read_dataset, split_seeds, write_dataset, LabeledScene, SceneSpec};
use mpae::harness::checkpoint::load_model;
use mpae::harness::evaluate::{evaluate_dirs, format_sweep, sweep_mask_ratio, EvalOptions};
use mpae::harness::gradcheck::{gradcheck, GradcheckOptions};
use mpae::harness::train::{init_thread_pool, latest_checkpoint, load_external_features, Trainer};
use mpae::inference::{export_masks, predict_masks_at};
use mpae::tensors_io::{load_config, NmiNorm, RunConfig};
use mpae::{Error, Result};

#[derive(Parser)]
#[command(name = "mpae", version, about = "Unsupervised part discovery by masked part restoration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic part-annotated dataset.
    Generate(GenerateArgs),
    /// Train a model and write checkpoints plus a JSON-lines log.
    Train(TrainArgs),
    /// Export part masks for a folder of images.
    Infer(InferArgs),
    /// Score exported masks against annotations.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
    /// Train and evaluate one model per masking ratio.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 256)]
    count: usize,
    /// Draw from the evaluation seed range.
    #[arg(long)]
    eval: bool,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 3)]
    parts: usize,
    #[arg(long)]
    occlude: bool,
}

#[derive(Args, Default)]
struct Ablations {
    #[arg(long)]
    without_lr: bool,
    #[arg(long)]
    without_lf: bool,
    #[arg(long)]
    without_lb: bool,
    #[arg(long)]
    without_ls: bool,
    #[arg(long)]
    without_lv: bool,
    #[arg(long)]
    without_le: bool,
}

impl Ablations {
    fn apply(&self, c: &mut RunConfig) {
        c.without_r |= self.without_lr;
        c.without_f |= self.without_lf;
        c.without_b |= self.without_lb;
        c.without_s |= self.without_ls;
        c.without_v |= self.without_lv;
        c.without_e |= self.without_le;
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Read raw features from `<dir>/<stem>.dna` instead of the built-in backbone.
    #[arg(long)]
    features_dir: Option<PathBuf>,
    /// Continue from a checkpoint directory (or `latest` in --out).
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    ablations: Ablations,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Refuse checkpoints whose model keys differ from this config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    features_dir: Option<PathBuf>,
    /// Also write the soft maps as `.soft.dna`.
    #[arg(long)]
    soft: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    include_background: bool,
    #[arg(long, value_parser = ["sqrt", "arithmetic"], default_value = "sqrt")]
    nmi_norm: String,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Components to check; defaults to all.
    components: Vec<String>,
    #[arg(long, default_value_t = 20)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Double the analytic gradient of this component (fault injection).
    #[arg(long)]
    corrupt: Vec<String>,
    /// Check nothing; exercises the empty-list path.
    #[arg(long)]
    none: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Evaluation dataset; defaults to --data.
    #[arg(long)]
    eval_data: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0.5,0.75,0.9")]
    ratios: Vec<f64>,
    /// Write the rows as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    ablations: Ablations,
}

fn load_scenes(dir: &Path) -> Result<Vec<LabeledScene>> {
    let mut reader = read_dataset(dir)?;
    let scenes: Vec<LabeledScene> = reader.by_ref().collect();
    for (file, why) in &reader.skipped {
        eprintln!("skipped {file}: {why}");
    }
    Ok(scenes)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::validation(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?)
        .map_err(|e| Error::validation(format!("cannot write {}: {e}", path.display())))
}

fn generate(a: GenerateArgs) -> Result<()> {
    let spec = SceneSpec { occlude: a.occlude, ..SceneSpec::toy(a.size, a.size, a.parts) };
    let scenes = generate_scenes(&split_seeds(a.eval, a.count), &spec)?;
    write_dataset(&a.out, &scenes)?;
    println!("wrote {} scenes to {}", scenes.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&a.config)?;
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    a.ablations.apply(&mut cfg);
    cfg.validate()?;
    let scenes = load_scenes(&a.data)?;
    if scenes.is_empty() {
        return Err(Error::validation(format!("no images found under {}", a.data.display())));
    }
    let features = a.features_dir.as_deref();
    let mut trainer = match &a.resume {
        Some(p) => {
            let ckpt = if p.as_os_str() == "latest" {
                latest_checkpoint(&a.out).ok_or_else(|| Error::validation("no checkpoint to resume from"))?
            } else {
                p.clone()
            };
            Trainer::resume(&ckpt, &cfg, &scenes, features)?
        }
        None => Trainer::from_scenes(&cfg, &scenes, features)?,
    };
    fs::create_dir_all(&a.out).map_err(|e| Error::validation(format!("{}: {e}", a.out.display())))?;
    fs::write(a.out.join("config.cfg"), cfg.to_text()).map_err(|e| Error::validation(e.to_string()))?;
    let logs = trainer.run(&a.out)?;
    if let Some(last) = logs.last() {
        println!("step {} total loss {:.6}", last.step, last.losses.total);
    }
    Ok(())
}

fn infer(a: InferArgs) -> Result<()> {
    let expected = a.config.as_deref().map(load_config).transpose()?;
    let model = load_model(&a.ckpt, expected.as_ref())?;
    let scenes = load_scenes(&a.images)?;
    let hash = model.config.hash();
    for s in &scenes {
        let raw = match &a.features_dir {
            Some(dir) => load_external_features(dir, &s.name, model.cells())?,
            None => model.raw_features(&s.image)?,
        };
        let masks = predict_masks_at(&model, &s.image, &raw, s.image.height, s.image.width)?;
        export_masks(&a.out, &s.name, &masks, &hash, a.soft)?;
    }
    println!("wrote {} masks to {}", scenes.len(), a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let norm = if a.nmi_norm == "arithmetic" { NmiNorm::Arithmetic } else { NmiNorm::Sqrt };
    let report = evaluate_dirs(&a.pred, &a.gt, EvalOptions { include_background: a.include_background, norm })?;
    write_json(&a.out, &report)?;
    println!("NMI {:.4}  ARI {:.4}  NME {}", report.nmi, report.ari, report.nme.map_or("n/a".into(), |v| format!("{v:.4}")));
    Ok(())
}

fn run_gradcheck(a: GradcheckArgs) -> Result<bool> {
    let components = if a.none {
        Vec::new()
    } else if a.components.is_empty() {
        vec!["all".to_string()]
    } else {
        a.components
    };
    let opts = GradcheckOptions { instances: a.instances, seed: a.seed, corrupt: a.corrupt, ..Default::default() };
    let report = gradcheck(&components, &opts)?;
    print!("{}", report.table());
    Ok(report.passed)
}

fn sweep(a: SweepArgs) -> Result<()> {
    let mut cfg = load_config(&a.config)?;
    a.ablations.apply(&mut cfg);
    let train = load_scenes(&a.data)?;
    let eval = match &a.eval_data {
        Some(d) => load_scenes(d)?,
        None => train.clone(),
    };
    let eval: Vec<LabeledScene> = eval.into_iter().filter(|s| s.has_annotation()).collect();
    let rows = sweep_mask_ratio(&cfg, &train, &eval, &a.ratios)?;
    print!("{}", format_sweep(&rows));
    if let Some(out) = &a.out {
        write_json(out, &rows)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    init_thread_pool(None);
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => generate(a).map(|_| true),
        Command::Train(a) => train(a).map(|_| true),
        Command::Infer(a) => infer(a).map(|_| true),
        Command::Eval(a) => eval(a).map(|_| true),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::Sweep(a) => sweep(a).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
