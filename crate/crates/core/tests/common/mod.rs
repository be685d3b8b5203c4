#![allow(dead_code)]

use m3cs::config::ModelConfig;
use m3cs::geometry::PointCloud;
use m3cs::nn::{Gradients, ParamStore};
use m3cs::rng::seeded;
use rand::Rng as _;

/// Width-8, two-block model small enough for exhaustive finite differences.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        width: 8,
        heads: 2,
        encoder_depth: 2,
        decoder_depth: 2,
        groups: 6,
        group_size: 4,
        codebook_size: 5,
        points: 48,
        siamese: true,
    }
}

pub fn random_cloud(n: usize, seed: u64) -> PointCloud<f64> {
    let mut rng = seeded(seed);
    let pts = (0..n).map(|_| [0; 3].map(|_| rng.random_range(-1.0..1.0))).collect();
    PointCloud::new(pts).unwrap()
}

#[derive(Debug)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel: f64,
    pub worst: String,
}

const STEP: f64 = 1e-5;
/// Magnitude below which errors are measured absolutely.
const FLOOR: f64 = 1e-6;

/// Central differences on up to `probes` entries of every trainable tensor
/// whose name starts with one of `prefixes` (all when empty). `loss` must be
/// a deterministic function of the store.
pub fn check_gradients(
    store: &mut ParamStore<f64>,
    prefixes: &[&str],
    probes: usize,
    loss: impl Fn(&ParamStore<f64>) -> (f64, Gradients<f64>),
) -> GradReport {
    let (_, grads) = loss(store);
    let mut report = GradReport { checked: 0, max_rel: 0.0, worst: String::new() };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        if !store.get(id).requires_grad() || !(prefixes.is_empty() || prefixes.iter().any(|p| name.starts_with(p))) {
            continue;
        }
        let n = store.get(id).numel();
        let analytic = grads.get(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        let stride = (n / probes.max(1)).max(1);
        for k in (0..n).step_by(stride).take(probes) {
            let orig = store.get(id).data()[k];
            store.get_mut(id).data_mut()[k] = orig + STEP;
            let up = loss(store).0;
            store.get_mut(id).data_mut()[k] = orig - STEP;
            let down = loss(store).0;
            store.get_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let rel = (numeric - analytic[k]).abs() / numeric.abs().max(analytic[k].abs()).max(FLOOR);
            report.checked += 1;
            if rel > report.max_rel {
                report.max_rel = rel;
                report.worst = format!("{name}[{k}]: analytic {} numeric {numeric}", analytic[k]);
            }
        }
    }
    report
}

use m3cs::config::{FinetuneConfig, MaskKind};
use m3cs::finetune::FinetuneModel;
use m3cs::geometry::group;
use m3cs::nn::Ctx;
use m3cs::pretrain::{align_loss, forward_student, forward_targets, make_mask, point_loss, EmaState, M3csModel};

/// One fixed pretraining instance: model, cloud, mask, and frozen targets.
pub struct PretrainCase {
    pub model: M3csModel<f64>,
    pub cloud: PointCloud<f64>,
    pub mask: m3cs::pretrain::MaskSpec,
    pub targets: m3cs::Tensor64,
}

pub fn pretrain_case(seed: u64) -> PretrainCase {
    let cfg = tiny_config();
    let mut model = M3csModel::<f64>::new(&cfg, &mut seeded(seed)).unwrap();
    // nonzero biases so their gradients are exercised
    let mut rng = seeded(seed + 100);
    for id in model.store.ids().collect::<Vec<_>>() {
        if model.store.name(id).ends_with("bias") || model.store.name(id).ends_with("beta") {
            for v in model.store.get_mut(id).data_mut() {
                *v = rng.random_range(-0.1..0.1);
            }
        }
    }
    let cloud = random_cloud(cfg.points, seed + 1);
    let patches = group(&cloud, cfg.groups, cfg.group_size, 0).unwrap();
    let mask = make_mask(MaskKind::Random, &patches.centers, 0.5, &mut seeded(seed + 2)).unwrap();
    let teacher = EmaState::new(&model, 0.996, 1.0).teacher;
    let mut ctx = Ctx::new(&model.store, false, false);
    let (tokens, pos) = model.embed(&mut ctx, &patches).unwrap();
    let targets = forward_targets(&model, &teacher, ctx.graph.value(tokens), ctx.graph.value(pos), &mask, 1, false).unwrap();
    PretrainCase { model, cloud, mask, targets }
}

/// tokenizer -> encoder -> decoder -> smooth-l1 alignment.
pub fn align_path(case: &PretrainCase, store: &ParamStore<f64>) -> (f64, Gradients<f64>) {
    let m = &case.model;
    let patches = group(&case.cloud, m.config.groups, m.config.group_size, 0).unwrap();
    let mut ctx = Ctx::new(store, true, false);
    let (tokens, pos) = m.embed(&mut ctx, &patches).unwrap();
    let student = forward_student(m, &mut ctx, tokens, pos, &case.mask).unwrap();
    let y = ctx.constant(case.targets.clone());
    let loss = align_loss(&mut ctx.graph, student.x, y, 1.0).unwrap();
    let v = ctx.graph.value(loss).item();
    (v, ctx.backward(loss).unwrap())
}

/// quantizer -> decoder -> point head -> grouped chamfer, with fixed noise.
pub fn point_path(case: &PretrainCase, store: &ParamStore<f64>) -> (f64, Gradients<f64>) {
    let m = &case.model;
    let patches = group(&case.cloud, m.config.groups, m.config.group_size, 0).unwrap();
    let mut ctx = Ctx::new(store, true, false);
    let (tokens, pos) = m.embed(&mut ctx, &patches).unwrap();
    let student = forward_student(m, &mut ctx, tokens, pos, &case.mask).unwrap();
    let branch = point_loss(m, &mut ctx, &student, &patches, &case.mask, 0.7, &mut seeded(77)).unwrap();
    let v = ctx.graph.value(branch.loss).item();
    (v, ctx.backward(branch.loss).unwrap())
}

pub fn classifier_case(seed: u64) -> (FinetuneModel<f64>, PointCloud<f64>) {
    let cfg = tiny_config();
    let ft = FinetuneConfig { hidden: 8, dropout: 0.0, layers: vec![0, 1], ..FinetuneConfig::default() };
    let model = FinetuneModel::<f64>::new(&cfg, &ft, 3, &mut seeded(seed)).unwrap();
    (model, random_cloud(cfg.points, seed + 1))
}

/// encoder features -> NetVLAD/HTA -> classifier -> cross-entropy.
pub fn classifier_path(model: &FinetuneModel<f64>, cloud: &PointCloud<f64>, store: &ParamStore<f64>) -> (f64, Gradients<f64>) {
    let mut ctx = Ctx::new(store, true, false);
    let logits = model.logits(&mut ctx, cloud, 0, &mut seeded(0)).unwrap();
    let loss = ctx.graph.cross_entropy(logits, &[2]).unwrap();
    let v = ctx.graph.value(loss).item();
    (v, ctx.backward(loss).unwrap())
}
