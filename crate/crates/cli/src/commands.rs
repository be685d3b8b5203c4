//! One function per subcommand. Data goes to files and stdout; diagnostics
//! are returned as errors.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use m3cs::checkpoint::{self, Checkpoint};
use m3cs::config::RunConfig;
use m3cs::data::{gen_shapes, load_dir, load_xyz, save_dir, Dataset, Split};
use m3cs::finetune::{build_classifier, few_shot, Finetuner};
use m3cs::pretrain::{M3csModel, Pretrainer, StepMetrics};
use m3cs::rng::seeded;
use m3cs::{Dataset32, PointCloud32};

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const PRETRAIN_CKPT: &str = "pretrain.ckpt";
pub const FINETUNE_CKPT: &str = "finetune.ckpt";
pub const FINETUNE_METRICS: &str = "finetune_metrics.csv";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const FEWSHOT_RUNS: &str = "fewshot_runs.csv";
pub const FEWSHOT_SUMMARY: &str = "fewshot_summary.csv";
pub const TOKENS_FILE: &str = "codebook_tokens.csv";

fn out_dir(cfg: &RunConfig) -> anyhow::Result<PathBuf> {
    let dir = PathBuf::from(if cfg.out_dir.is_empty() { "out" } else { &cfg.out_dir });
    fs::create_dir_all(&dir).with_context(|| format!("creating output directory {}", dir.display()))?;
    fs::write(dir.join(CONFIG_FILE), serde_json::to_string_pretty(&cfg.to_flat())?)?;
    Ok(dir)
}

fn dataset(cfg: &RunConfig, split: Split) -> anyhow::Result<Dataset32> {
    let d = &cfg.data;
    let dir = match split {
        Split::Train => d.dir.as_deref(),
        Split::Test => d.test_dir.as_deref(),
    };
    match (dir, &d.dir) {
        (Some(dir), _) => load_dir(dir, split).with_context(|| format!("loading dataset {dir}")),
        (None, Some(_)) => bail!("data.test_dir is required when data.dir is set"),
        (None, None) => {
            let per_class = match split {
                Split::Train => d.train_per_class,
                Split::Test => d.test_per_class,
            };
            Ok(gen_shapes(&d.families, per_class, d.points_per_cloud, split, d.seed)?)
        }
    }
}

fn checkpoint_path(cfg: &RunConfig) -> anyhow::Result<&str> {
    cfg.checkpoint.as_deref().context("no checkpoint given (set --checkpoint PATH)")
}

fn load_checkpoint(path: &str) -> anyhow::Result<Checkpoint> {
    if !Path::new(path).exists() {
        bail!("checkpoint {path} does not exist");
    }
    Checkpoint::load(path).with_context(|| format!("reading checkpoint {path}"))
}

fn meta(cfg: &RunConfig) -> serde_json::Value {
    serde_json::Value::Object(cfg.to_flat())
}

pub fn pretrain(cfg: &RunConfig) -> anyhow::Result<()> {
    let dir = out_dir(cfg)?;
    let train = dataset(cfg, Split::Train)?;
    let mut p = match &cfg.checkpoint {
        Some(path) => checkpoint::restore_pretrainer::<f32>(&load_checkpoint(path)?)?,
        None => {
            let model = M3csModel::new(&cfg.model, &mut seeded(cfg.seed))?;
            Pretrainer::new(model, cfg.pretrain.clone(), cfg.seed)?
        }
    };
    p.config.steps = cfg.pretrain.steps;
    let mut csv = BufWriter::new(fs::File::create(dir.join(METRICS_FILE))?);
    writeln!(csv, "{}", StepMetrics::CSV_HEADER)?;
    let metrics = p.run(&train.clouds(), |m| {
        writeln!(csv, "{}", m.csv_row())?;
        Ok(())
    })?;
    csv.flush()?;
    let ckpt = dir.join(PRETRAIN_CKPT);
    checkpoint::pretrain_checkpoint(&p, meta(cfg)).save(&ckpt)?;
    if let Some(m) = metrics.last() {
        println!("step {} l_total {:.6} perplexity {:.3}", m.step, m.l_total, m.perplexity);
    }
    println!("checkpoint {}", ckpt.display());
    Ok(())
}

pub fn finetune(cfg: &RunConfig) -> anyhow::Result<()> {
    let dir = out_dir(cfg)?;
    let (train, test) = (dataset(cfg, Split::Train)?, dataset(cfg, Split::Test)?);
    if train.class_names != test.class_names {
        bail!("train classes {:?} differ from test classes {:?}", train.class_names, test.class_names);
    }
    let pretrained = if cfg.finetune.from_scratch {
        None
    } else {
        let path = checkpoint_path(cfg).context("finetune needs a pretraining checkpoint or --from-scratch")?;
        Some(checkpoint::load_pretrained_model::<f32>(&load_checkpoint(path)?)?)
    };
    let model_cfg = pretrained.as_ref().map_or(&cfg.model, |m| &m.config);
    let model = build_classifier(model_cfg, &cfg.finetune, train.num_classes(), pretrained.as_ref().map(|m| &m.store), cfg.seed)?;
    let mut tuner = Finetuner::new(model, cfg.finetune.clone(), cfg.seed);
    let mut csv = BufWriter::new(fs::File::create(dir.join(FINETUNE_METRICS))?);
    writeln!(csv, "step,loss,accuracy")?;
    tuner.run(&train.items, |m| {
        writeln!(csv, "{},{},{}", m.step, m.loss, m.accuracy)?;
        Ok(())
    })?;
    csv.flush()?;
    let ckpt = dir.join(FINETUNE_CKPT);
    checkpoint::finetune_checkpoint(&tuner.model, &cfg.finetune, &train.class_names, meta(cfg)).save(&ckpt)?;
    let acc = write_predictions(&dir, &tuner.model, &test)?;
    println!("test_accuracy {acc:.4}");
    println!("checkpoint {}", ckpt.display());
    Ok(())
}

/// One row per test cloud: label, prediction, then every logit.
fn write_predictions(dir: &Path, model: &m3cs::finetune::FinetuneModel<f32>, test: &Dataset32) -> anyhow::Result<f64> {
    let mut csv = BufWriter::new(fs::File::create(dir.join(PREDICTIONS_FILE))?);
    let logit_cols: Vec<String> = (0..test.num_classes()).map(|k| format!("logit_{k}")).collect();
    writeln!(csv, "index,label,prediction,{}", logit_cols.join(","))?;
    let mut hits = 0;
    for (i, (cloud, y)) in test.items.iter().enumerate() {
        let logits = model.predict_logits(cloud)?;
        let p = m3cs::codebook::argmax(&logits);
        hits += (p == *y) as usize;
        let cols: Vec<String> = logits.iter().map(f32::to_string).collect();
        writeln!(csv, "{i},{y},{p},{}", cols.join(","))?;
    }
    csv.flush()?;
    Ok(hits as f64 / test.len().max(1) as f64)
}

pub fn eval(cfg: &RunConfig) -> anyhow::Result<()> {
    let dir = out_dir(cfg)?;
    let (model, classes) = checkpoint::load_finetune_model::<f32>(&load_checkpoint(checkpoint_path(cfg)?)?)?;
    let test = dataset(cfg, Split::Test)?;
    if test.class_names != classes {
        bail!("checkpoint classes {classes:?} differ from dataset classes {:?}", test.class_names);
    }
    let acc = write_predictions(&dir, &model, &test)?;
    println!("test_accuracy {acc:.4}");
    Ok(())
}

pub fn fewshot(cfg: &RunConfig) -> anyhow::Result<()> {
    let dir = out_dir(cfg)?;
    let data = dataset(cfg, Split::Train)?;
    let pretrained = if cfg.finetune.from_scratch {
        None
    } else {
        let path = checkpoint_path(cfg).context("fewshot needs a pretraining checkpoint or --from-scratch")?;
        Some(checkpoint::load_pretrained_model::<f32>(&load_checkpoint(path)?)?)
    };
    let model_cfg = pretrained.as_ref().map_or(&cfg.model, |m| &m.config);
    let report = few_shot(&data, model_cfg, &cfg.finetune, &cfg.fewshot, pretrained.as_ref().map(|m| &m.store), cfg.seed)?;
    let mut runs = BufWriter::new(fs::File::create(dir.join(FEWSHOT_RUNS))?);
    writeln!(runs, "run,seed,accuracy")?;
    for r in &report.runs {
        writeln!(runs, "{},{},{}", r.run, r.seed, r.accuracy)?;
    }
    runs.flush()?;
    fs::write(dir.join(FEWSHOT_SUMMARY), format!("mean,std\n{},{}\n", report.mean, report.std))?;
    println!("{}-way {}-shot accuracy {:.4} +- {:.4}", cfg.fewshot.ways, cfg.fewshot.shots, report.mean, report.std);
    Ok(())
}

pub fn gen_data(cfg: &RunConfig) -> anyhow::Result<()> {
    let dir = out_dir(cfg)?;
    let d = &cfg.data;
    for (split, name, n) in [(Split::Train, "train", d.train_per_class), (Split::Test, "test", d.test_per_class)] {
        let data: Dataset<f32> = gen_shapes(&d.families, n, d.points_per_cloud, split, d.seed)?;
        save_dir(dir.join(name), &data)?;
        println!("{name}: {} clouds in {}", data.len(), dir.join(name).display());
    }
    Ok(())
}

pub fn inspect_codebook(cfg: &RunConfig) -> anyhow::Result<()> {
    let dir = out_dir(cfg)?;
    let model = checkpoint::load_pretrained_model::<f32>(&load_checkpoint(checkpoint_path(cfg)?)?)?;
    let cloud: PointCloud32 = match &cfg.input {
        Some(path) => load_xyz(path).with_context(|| format!("reading {path}"))?,
        None => dataset(cfg, Split::Test)?.items.swap_remove(0).0,
    };
    let (patches, ids) = model.token_ids(&cloud)?;
    let mut csv = BufWriter::new(fs::File::create(dir.join(TOKENS_FILE))?);
    writeln!(csv, "x,y,z,token_id")?;
    for (c, id) in patches.centers.iter().zip(&ids) {
        writeln!(csv, "{},{},{},{id}", c[0], c[1], c[2])?;
    }
    csv.flush()?;
    let mut used = ids.clone();
    used.sort_unstable();
    used.dedup();
    println!("{} patches, {} distinct tokens", ids.len(), used.len());
    Ok(())
}
