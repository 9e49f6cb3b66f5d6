use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "K = 2\nC = 8\np = 4\ninput_size = 16\nr = 0.5\nG = 2\nbatch_size = 4\nmlp_ratio = 2\n\
encoder_layers = 1\ndecoder_layers = 1\ndescriptor_layers = 1\nsteps = 6\nckpt_every = 3\nentropy_per_pixel = true\n";

fn mpae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mpae")).args(args).env("MPAE_THREADS", "1").output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn generate_train_infer_eval() {
    let dir = tempfile::tempdir().unwrap();
    let (train, eval, run, pred) =
        (dir.path().join("train"), dir.path().join("eval"), dir.path().join("run"), dir.path().join("pred"));
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();

    let o = mpae(&["generate", "--out", s(&train), "--count", "8", "--size", "16", "--parts", "2"]);
    assert!(o.status.success(), "{o:?}");
    let o = mpae(&["generate", "--out", s(&eval), "--count", "4", "--size", "16", "--parts", "2", "--eval"]);
    assert!(o.status.success());
    assert!(eval.join("keypoints.json").is_file());

    let o = mpae(&["train", "--config", s(&cfg), "--data", s(&train), "--out", s(&run)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_to_string(run.join("train.jsonl")).unwrap().lines().count(), 6);
    assert!(run.join("ckpt_000003/manifest.json").is_file());
    assert!(run.join("ckpt_000006/params").is_dir());

    let o = mpae(&["train", "--config", s(&cfg), "--data", s(&train), "--out", s(&run), "--resume", "latest", "--steps", "8"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_to_string(run.join("train.jsonl")).unwrap().lines().count(), 8);

    let ckpt = run.join("ckpt_000006");
    let o = mpae(&["infer", "--ckpt", s(&ckpt), "--images", s(&eval.join("images")), "--out", s(&pred), "--soft"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_dir(&pred).unwrap().count(), 12);

    let report = dir.path().join("report.json");
    let o = mpae(&["eval", "--pred", s(&pred), "--gt", s(&eval), "--out", s(&report)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    for key in ["NMI", "ARI", "NME"] {
        assert!(v.get(key).is_some(), "report lacks {key}");
    }

    // a checkpoint from another architecture is refused with exit code 1
    let wide = dir.path().join("wide.cfg");
    std::fs::write(&wide, TINY.replace("C = 8", "C = 16")).unwrap();
    let o = mpae(&["infer", "--ckpt", s(&ckpt), "--images", s(&eval), "--out", s(&pred), "--config", s(&wide)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("dim"));
}

#[test]
fn invalid_config_exits_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, TINY.replace("G = 2", "G = 3")).unwrap();
    let o = mpae(&["train", "--config", s(&cfg), "--data", s(dir.path()), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("group_size"));
}

#[test]
fn non_finite_features_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let (data, feats) = (dir.path().join("data"), dir.path().join("feats"));
    assert!(mpae(&["generate", "--out", s(&data), "--count", "4", "--size", "16", "--parts", "2"]).status.success());
    std::fs::create_dir_all(&feats).unwrap();
    for entry in std::fs::read_dir(data.join("images")).unwrap() {
        let stem = entry.unwrap().path().file_stem().unwrap().to_str().unwrap().to_string();
        let arr = mpae::tensors_io::DenseArray::from_f64(vec![16, 5], vec![f64::NAN; 80]).unwrap();
        mpae::tensors_io::save_array(feats.join(format!("{stem}.dna")), &arr).unwrap();
    }
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let out = dir.path().join("run");
    let o = mpae(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out), "--features-dir", s(&feats)]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("nonfinite_batch.json").is_file());
}

#[test]
fn gradcheck_passes_and_reports_injected_faults() {
    let o = mpae(&["gradcheck", "tv_loss", "entropy_loss", "--instances", "3"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("tv_loss"));

    let o = mpae(&["gradcheck", "tv_loss", "--instances", "3", "--corrupt", "tv_loss"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).lines().any(|l| l.contains("tv_loss") && l.contains("FAIL")), "{}", stdout(&o));

    let o = mpae(&["gradcheck", "--none"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).to_lowercase().contains("warn") || stdout(&o).to_lowercase().contains("warn"));

    let o = mpae(&["gradcheck", "no_such_block"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn sweep_rejects_ratio_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(mpae(&["generate", "--out", s(&data), "--count", "4", "--size", "16", "--parts", "2"]).status.success());
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let o = mpae(&["sweep", "--config", s(&cfg), "--data", s(&data), "--ratios", "0.5,1.0"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("mask_ratio"));

    let rows = dir.path().join("rows.json");
    let o = mpae(&["sweep", "--config", s(&cfg), "--data", s(&data), "--ratios", "0.9,0.5", "--out", s(&rows)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: Vec<serde_json::Value> = serde_json::from_str(&std::fs::read_to_string(&rows).unwrap()).unwrap();
    assert_eq!(v.len(), 2);
    assert_eq!(v[0]["mask_ratio"], 0.5);
}
