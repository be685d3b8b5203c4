use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--c", "16", "--heads", "2", "--encoder-depth", "2", "--decoder-depth", "1", "--groups", "8", "--group-size", "8",
    "--model.points", "128", "--train-per-class", "4", "--test-per-class", "2", "--points-per-cloud", "256",
];

fn run(command: &str, out: &Path, extra: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_m3cs"))
        .arg(command)
        .args(["--out-dir", out.to_str().unwrap()])
        .args(SMALL)
        .args(extra)
        .output()
        .unwrap()
}

fn ok(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn failure(o: &Output) -> String {
    assert!(!o.status.success());
    let err = String::from_utf8(o.stderr.clone()).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with("error: "), "{err}");
    err
}

#[test]
fn pretrain_writes_checkpoint_metrics_and_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("pre");
    ok(&run("pretrain", &out, &["--steps", "10", "--batch-size", "2"]));
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next().unwrap(), m3cs::pretrain::StepMetrics::CSV_HEADER);
    assert_eq!(lines.count(), 10);
    let ckpt = m3cs::checkpoint::Checkpoint::load(out.join("pretrain.ckpt")).unwrap();
    let model = m3cs::checkpoint::load_pretrained_model::<f32>(&ckpt).unwrap();
    assert_eq!(model.config.width, 16);
    let cfg: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["pretrain.steps"], 10);
    assert_eq!(cfg["model.width"], 16);
    assert_eq!(cfg["pretrain.mask_ratio"], 0.65);
}

#[test]
fn finetune_from_scratch_then_eval_replays_logits() {
    let dir = tempfile::tempdir().unwrap();
    let ft = dir.path().join("ft");
    let stdout = ok(&run("finetune", &ft, &["--from-scratch", "--steps", "3", "--batch-size", "2"]));
    assert!(stdout.contains("test_accuracy"));
    let ev = dir.path().join("ev");
    ok(&run("eval", &ev, &["--checkpoint", ft.join("finetune.ckpt").to_str().unwrap()]));
    let a = std::fs::read_to_string(ft.join("predictions.csv")).unwrap();
    let b = std::fs::read_to_string(ev.join("predictions.csv")).unwrap();
    assert!(a.starts_with("index,label,prediction,logit_0"));
    assert_eq!(a.lines().count(), 1 + 4 * 2);
    assert_eq!(a, b);
}

#[test]
fn finetune_consumes_pretraining_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let pre = dir.path().join("pre");
    ok(&run("pretrain", &pre, &["--steps", "2", "--batch-size", "2"]));
    let ft = dir.path().join("ft");
    ok(&run("finetune", &ft, &["--checkpoint", pre.join("pretrain.ckpt").to_str().unwrap(), "--steps", "2", "--batch-size", "2"]));
    let rows = std::fs::read_to_string(ft.join("finetune_metrics.csv")).unwrap();
    assert_eq!(rows.lines().count(), 3);
}

#[test]
fn same_seed_same_metric_stream() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&run("pretrain", out, &["--steps", "3", "--batch-size", "2", "--seed", "5"]));
    }
    let read = |p: &Path| std::fs::read_to_string(p.join("metrics.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
}

#[test]
fn config_file_with_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, r#"{"pretrain.steps": 7, "pretrain": {"batch_size": 2}, "model.c": 16}"#).unwrap();
    let out = dir.path().join("o");
    ok(&run("pretrain", &out, &["--config", cfg.to_str().unwrap(), "--steps", "2"]));
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
}

#[test]
fn errors_exit_nonzero_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let err = failure(&run("finetune", &out, &["--checkpoint", "missing.ckpt"]));
    assert!(err.contains("missing.ckpt"));
    failure(&run("finetune", &out, &[]));
    failure(&run("pretrain", &out, &["--no-such-key", "1"]));
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    failure(&run("pretrain", &out, &["--config", bad.to_str().unwrap()]));
    failure(&run("finetune", &out, &["--from-scratch", "--data.dir", dir.path().join("nowhere").to_str().unwrap()]));
}

#[test]
fn gen_data_fewshot_and_codebook_inspection() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&run("gen-data", &data, &["--train-per-class", "26"]));
    assert!(data.join("train/manifest.csv").exists() && data.join("test/manifest.csv").exists());
    let fs = dir.path().join("fs");
    let train_dir = data.join("train");
    let stdout = ok(&run("fewshot", &fs, &["--from-scratch", "--data.dir", train_dir.to_str().unwrap(), "--runs", "2", "--steps", "1"]));
    assert!(stdout.contains("2-way 5-shot"));
    let runs = std::fs::read_to_string(fs.join("fewshot_runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 3);
    assert!(std::fs::read_to_string(fs.join("fewshot_summary.csv")).unwrap().starts_with("mean,std\n"));

    let pre = dir.path().join("pre");
    ok(&run("pretrain", &pre, &["--steps", "1", "--batch-size", "2"]));
    let cloud = data.join("test").join(std::fs::read_dir(data.join("test")).unwrap().map(|e| e.unwrap().file_name()).find(|n| n.to_string_lossy().ends_with(".xyz")).unwrap());
    let ins = dir.path().join("ins");
    ok(&run("inspect-codebook", &ins, &["--checkpoint", pre.join("pretrain.ckpt").to_str().unwrap(), "--input", cloud.to_str().unwrap()]));
    let tokens = std::fs::read_to_string(ins.join("codebook_tokens.csv")).unwrap();
    let mut lines = tokens.lines();
    assert_eq!(lines.next().unwrap(), "x,y,z,token_id");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 8);
    assert!(rows.iter().all(|r| r.split(',').nth(3).unwrap().parse::<usize>().unwrap() < 64));
}
