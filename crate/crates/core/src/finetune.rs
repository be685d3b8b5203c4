//! Classification on top of the pretrained encoder with hybrid token
//! aggregation, plus the K-way N-shot episode protocol.

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::EncoderStack;
use crate::config::{FewShotConfig, FinetuneConfig, ModelConfig};
use crate::data::{augment, prepare_eval, AugmentConfig, Dataset};
use crate::error::{invalid, Error, Result};
use crate::geometry::{group, PointCloud};
use crate::graph::{Graph, Var};
use crate::nn::{dropout, init_normal, Ctx, Gradients, Linear, ParamId, ParamStore};
use crate::optim::{cosine_lr, AdamW};
use crate::rng::{derive, Rng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tokenizer::{MiniPointNet, PosEmbed};

/// Soft assignment `alpha = softmax(x w + b)` (`N x T`) and residual
/// statistics `V_t = sum_j alpha_jt (x_j - c_t)` (`T x D`).
pub fn netvlad<T: Scalar>(graph: &mut Graph<T>, x: Var, centroids: Var, w: Var, b: Var) -> Result<(Var, Var)> {
    let (n, d) = graph.value(x).dims2()?;
    let (_, dc) = graph.value(centroids).dims2()?;
    if d != dc {
        return Err(crate::error::shape_err("netvlad", graph.shape(x), graph.shape(centroids)));
    }
    if n == 0 {
        return Err(invalid("netvlad: empty token set"));
    }
    let scores = graph.matmul(x, w)?;
    let scores = graph.add_row(scores, b)?;
    let alpha = graph.softmax(scores);
    let weighted = graph.matmul_t(alpha, x, true, false)?;
    let ones = graph.constant(Tensor::full(&[n, 1], T::one()));
    let mass = graph.matmul_t(alpha, ones, true, false)?;
    let shift = graph.mul_col(centroids, mass)?;
    let v = graph.sub(weighted, shift)?;
    Ok((alpha, v))
}

/// `[avg_pool(x) | max_pool(x) | avg_pool(V)]` as a `1 x (2c + D)` row.
pub fn hta<T: Scalar>(graph: &mut Graph<T>, x: Var, centroids: Var, w: Var, b: Var) -> Result<Var> {
    let avg = graph.mean_rows(x)?;
    let max = graph.max_rows(x)?;
    let (_, v) = netvlad(graph, x, centroids, w, b)?;
    let stat = graph.mean_rows(v)?;
    graph.concat_cols(&[avg, max, stat])
}

/// Centroid scoring layer and the classifier MLP.
#[derive(Clone, Debug)]
pub struct HtaHead {
    /// Centroid scores; shares its name with the pretraining assignment layer.
    pub assign: Linear,
    pub fc_1: Linear,
    pub fc_2: Linear,
    pub fc_3: Linear,
    pub dropout: f64,
}

impl HtaHead {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, width: usize, codebook_size: usize, hidden: usize, classes: usize, dropout: f64, rng: &mut Rng) -> Self {
        Self {
            assign: Linear::new(store, "codebook.assign", width, codebook_size, rng),
            fc_1: Linear::new(store, "head.fc_1", 3 * width, hidden, rng),
            fc_2: Linear::new(store, "head.fc_2", hidden, hidden, rng),
            fc_3: Linear::new(store, "head.fc_3", hidden, classes, rng),
            dropout,
        }
    }

    pub fn classify<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, o: Var, rng: &mut Rng) -> Result<Var> {
        let h = self.fc_1.forward(ctx, o)?;
        let h = ctx.graph.gelu(h);
        let h = dropout(ctx, h, self.dropout, rng)?;
        let h = self.fc_2.forward(ctx, h)?;
        let h = ctx.graph.gelu(h);
        let h = dropout(ctx, h, self.dropout, rng)?;
        self.fc_3.forward(ctx, h)
    }
}

/// Encoder, codebook entries and HTA head for one classification task.
#[derive(Clone, Debug)]
pub struct FinetuneModel<T> {
    pub config: ModelConfig,
    pub layers: Vec<usize>,
    pub classes: usize,
    pub store: ParamStore<T>,
    pub tokenizer: MiniPointNet,
    pub pos_embed: PosEmbed,
    pub encoder: EncoderStack,
    pub entries: ParamId,
    pub head: HtaHead,
}

impl<T: Scalar> FinetuneModel<T> {
    pub fn new(config: &ModelConfig, ft: &FinetuneConfig, classes: usize, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        if classes == 0 {
            return Err(invalid("classifier needs at least one class"));
        }
        let c = config.width;
        let mut store = ParamStore::new();
        let tokenizer = MiniPointNet::new(&mut store, "tokenizer", c, rng);
        let pos_embed = PosEmbed::new(&mut store, "pos_embed", c, rng);
        let encoder = EncoderStack::new(&mut store, "encoder", config.encoder_depth, c, config.heads, rng)?;
        let entries = store.add("codebook.entries", init_normal(&[config.codebook_size, c], 0.02, rng));
        let head = HtaHead::new(&mut store, c, config.codebook_size, ft.hidden, classes, ft.dropout, rng);
        let layers = if ft.layers.is_empty() { vec![config.encoder_depth - 1] } else { ft.layers.clone() };
        if let Some(&l) = layers.iter().find(|&&l| l >= config.encoder_depth) {
            return Err(invalid(format!("hidden layer {l} out of range for depth {}", config.encoder_depth)));
        }
        if ft.freeze_codebook {
            store.set_trainable(entries, false);
        }
        Ok(Self {
            config: config.clone(),
            layers,
            classes,
            store,
            tokenizer,
            pos_embed,
            encoder,
            entries,
            head,
        })
    }

    /// Copies every parameter whose name and shape match in `source`.
    /// Returns the number copied.
    pub fn load_pretrained(&mut self, source: &ParamStore<T>) -> Result<usize> {
        let mut copied = 0;
        for id in self.store.ids().collect::<Vec<_>>() {
            if let Some(sid) = source.id(self.store.name(id)) {
                let src = source.get(sid);
                if src.shape() != self.store.get(id).shape() {
                    return Err(invalid(format!("pretrained {} has shape {:?}", source.name(sid), src.shape())));
                }
                self.store.assign(id, src.data())?;
                copied += 1;
            }
        }
        if copied == 0 {
            return Err(invalid("pretrained store shares no parameters with the classifier"));
        }
        Ok(copied)
    }

    /// Selected hidden states averaged token-wise, then the encoder norm.
    pub fn features(&self, ctx: &mut Ctx<'_, T>, cloud: &PointCloud<T>, fps_start: usize) -> Result<Var> {
        let patches = group(cloud, self.config.groups, self.config.group_size, fps_start)?;
        let pts = ctx.constant(patches.groups_tensor());
        let tokens = self.tokenizer.forward(ctx, pts, patches.group_size)?;
        let centers = ctx.constant(patches.centers_tensor());
        let pos = self.pos_embed.forward(ctx, centers)?;
        let hidden = self.encoder.encode(ctx, tokens, pos, &self.layers)?;
        let mut x = hidden[&self.layers[0]];
        for l in &self.layers[1..] {
            x = ctx.graph.add(x, hidden[l])?;
        }
        if self.layers.len() > 1 {
            x = ctx.graph.scale(x, T::one() / T::from_usize_lossy(self.layers.len()));
        }
        self.encoder.norm.forward(ctx, x)
    }

    /// `1 x classes` logits for one cloud.
    pub fn logits(&self, ctx: &mut Ctx<'_, T>, cloud: &PointCloud<T>, fps_start: usize, rng: &mut Rng) -> Result<Var> {
        let x = self.features(ctx, cloud, fps_start)?;
        let o = self.aggregate(ctx, x)?;
        self.head.classify(ctx, o, rng)
    }

    pub fn aggregate(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let c = ctx.param(self.entries);
        let w = ctx.param(self.head.assign.weight);
        let b = ctx.param(self.head.assign.bias);
        hta(&mut ctx.graph, x, c, w, b)
    }

    /// Deterministic evaluation logits (no dropout, fixed subsample, FPS from 0).
    pub fn predict_logits(&self, cloud: &PointCloud<T>) -> Result<Vec<T>> {
        let cloud = prepare_eval(cloud, self.config.points);
        let mut ctx = Ctx::new(&self.store, false, false);
        let mut rng = derive(0, &[]);
        let l = self.logits(&mut ctx, &cloud, 0, &mut rng)?;
        Ok(ctx.graph.value(l).data().to_vec())
    }

    pub fn predict(&self, cloud: &PointCloud<T>) -> Result<usize> {
        Ok(crate::codebook::argmax(&self.predict_logits(cloud)?))
    }

    /// Fraction of correctly classified items.
    pub fn accuracy(&self, items: &[(PointCloud<T>, usize)]) -> Result<f64> {
        if items.is_empty() {
            return Err(invalid("accuracy over an empty set"));
        }
        let hits: Vec<Result<bool>> = items.par_iter().map(|(c, y)| Ok(self.predict(c)? == *y)).collect();
        let mut n = 0;
        for h in hits {
            n += h? as usize;
        }
        Ok(n as f64 / items.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneMetrics {
    pub step: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Classifier with its optimizer and schedule.
#[derive(Clone, Debug)]
pub struct Finetuner<T> {
    pub model: FinetuneModel<T>,
    pub optim: AdamW<T>,
    pub config: FinetuneConfig,
    pub seed: u64,
    pub step: usize,
}

impl<T: Scalar> Finetuner<T> {
    pub fn new(model: FinetuneModel<T>, config: FinetuneConfig, seed: u64) -> Self {
        Self {
            optim: AdamW::new(config.weight_decay),
            model,
            config,
            seed,
            step: 0,
        }
    }

    /// Per-sample loss and gradients, with the loss scaled by `scale`.
    fn sample_grads(&self, cloud: &PointCloud<T>, label: usize, scale: f64, rng: &mut Rng) -> Result<(f64, bool, Gradients<T>)> {
        let aug = AugmentConfig {
            points: self.model.config.points,
            identity: !self.config.augment,
            ..AugmentConfig::default()
        };
        let cloud = augment(cloud, &aug, rng);
        let start = rng.random_range(0..cloud.len());
        let mut ctx = Ctx::new(&self.model.store, true, true);
        let logits = self.model.logits(&mut ctx, &cloud, start, rng)?;
        let hit = crate::codebook::argmax(ctx.graph.value(logits).data()) == label;
        let loss = ctx.graph.cross_entropy(logits, &[label])?;
        let value = ctx.graph.value(loss).item().to_f64_lossy();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("finetune loss {value}")));
        }
        let scaled = ctx.graph.scale(loss, T::from_f64_lossy(scale));
        Ok((value, hit, ctx.backward(scaled)?))
    }

    /// One optimizer step over `batch`; reports mean loss and train accuracy.
    pub fn train_step(&mut self, batch: &[(PointCloud<T>, usize)]) -> Result<FinetuneMetrics> {
        if batch.is_empty() {
            return Err(invalid("empty batch"));
        }
        if let Some((_, y)) = batch.iter().find(|(_, y)| *y >= self.model.classes) {
            return Err(invalid(format!("label {y} outside {} classes", self.model.classes)));
        }
        let scale = 1.0 / batch.len() as f64;
        let step = self.step;
        let results: Vec<_> = batch
            .par_iter()
            .enumerate()
            .map(|(i, (c, y))| self.sample_grads(c, *y, scale, &mut derive(self.seed, &[2, step as u64, i as u64])))
            .collect();
        let mut grads = Gradients::empty(self.model.store.len());
        let (mut loss, mut hits) = (0.0, 0);
        for r in results {
            let (l, h, g) = r?;
            loss += l * scale;
            hits += h as usize;
            grads.accumulate(&g);
        }
        let c = &self.config;
        let lr = cosine_lr(step, c.steps, c.lr, c.min_lr, c.warmup_steps);
        self.optim.step(&mut self.model.store, &grads, T::from_f64_lossy(lr))?;
        self.step += 1;
        Ok(FinetuneMetrics {
            step,
            loss,
            accuracy: hits as f64 / batch.len() as f64,
        })
    }

    pub fn batch_indices(&self, len: usize, step: usize) -> Vec<usize> {
        let n = self.config.batch_size.min(len);
        sample(&mut derive(self.seed, &[3, step as u64]), len, n).into_vec()
    }

    /// Trains until `config.steps`.
    pub fn run(&mut self, items: &[(PointCloud<T>, usize)], mut on_step: impl FnMut(&FinetuneMetrics) -> Result<()>) -> Result<Vec<FinetuneMetrics>> {
        if items.is_empty() {
            return Err(invalid("fine-tuning needs at least one sample"));
        }
        let mut out = Vec::new();
        while self.step < self.config.steps {
            let batch: Vec<_> = self.batch_indices(items.len(), self.step).into_iter().map(|i| items[i].clone()).collect();
            let m = self.train_step(&batch)?;
            on_step(&m)?;
            out.push(m);
        }
        Ok(out)
    }
}

/// Builds a classifier, optionally initialized from pretrained weights.
pub fn build_classifier<T: Scalar>(
    model: &ModelConfig,
    ft: &FinetuneConfig,
    classes: usize,
    pretrained: Option<&ParamStore<T>>,
    seed: u64,
) -> Result<FinetuneModel<T>> {
    let mut m = FinetuneModel::new(model, ft, classes, &mut derive(seed, &[4]))?;
    if let Some(p) = pretrained {
        m.load_pretrained(p)?;
    }
    Ok(m)
}

/// Fine-tunes on `train` and reports accuracy on `test`.
pub fn finetune_and_eval<T: Scalar>(
    model: &ModelConfig,
    ft: &FinetuneConfig,
    train: &Dataset<T>,
    test: &Dataset<T>,
    pretrained: Option<&ParamStore<T>>,
    seed: u64,
) -> Result<(Finetuner<T>, f64)> {
    if train.class_names != test.class_names {
        return Err(invalid("train and test class lists differ"));
    }
    let m = build_classifier(model, ft, train.num_classes(), pretrained, seed)?;
    let mut tuner = Finetuner::new(m, ft.clone(), seed);
    tuner.run(&train.items, |_| Ok(()))?;
    let acc = tuner.model.accuracy(&test.items)?;
    Ok((tuner, acc))
}

/// Support and query indices into a dataset, plus the sampled classes.
/// Episode labels are positions in `classes`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FewShotEpisode {
    pub classes: Vec<usize>,
    pub support: Vec<(usize, usize)>,
    pub query: Vec<(usize, usize)>,
}

pub fn sample_episode<T: Scalar>(data: &Dataset<T>, ways: usize, shots: usize, queries: usize, rng: &mut Rng) -> Result<FewShotEpisode> {
    let by_class = data.by_class();
    if ways == 0 || shots == 0 || queries == 0 {
        return Err(invalid("ways, shots and queries must be positive"));
    }
    if ways > by_class.len() {
        return Err(invalid(format!("{ways}-way episode from {} classes", by_class.len())));
    }
    if let Some((c, items)) = by_class.iter().enumerate().find(|(_, v)| v.len() < shots + queries) {
        return Err(invalid(format!(
            "class {} has {} samples, needs {}",
            data.class_names[c],
            items.len(),
            shots + queries
        )));
    }
    let mut classes = sample(rng, by_class.len(), ways).into_vec();
    classes.sort_unstable();
    let (mut support, mut query) = (Vec::new(), Vec::new());
    for (label, &c) in classes.iter().enumerate() {
        let mut pool = by_class[c].clone();
        pool.shuffle(rng);
        support.extend(pool[..shots].iter().map(|&i| (i, label)));
        query.extend(pool[shots..shots + queries].iter().map(|&i| (i, label)));
    }
    Ok(FewShotEpisode { classes, support, query })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewShotRun {
    pub run: usize,
    pub seed: u64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FewShotReport {
    pub runs: Vec<FewShotRun>,
    pub mean: f64,
    pub std: f64,
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Episode seed of run `r`; pretrained and scratch runs share it.
pub fn episode_seed(seed: u64, run: usize) -> u64 {
    derive(seed, &[5, run as u64]).random()
}

/// Independent K-way N-shot episodes: fine-tune on support, score on query.
pub fn few_shot<T: Scalar>(
    data: &Dataset<T>,
    model: &ModelConfig,
    ft: &FinetuneConfig,
    fs: &FewShotConfig,
    pretrained: Option<&ParamStore<T>>,
    seed: u64,
) -> Result<FewShotReport> {
    let ft = FinetuneConfig {
        steps: fs.steps,
        batch_size: fs.ways * fs.shots,
        warmup_steps: ft.warmup_steps.min(fs.steps / 4),
        ..ft.clone()
    };
    let runs: Vec<Result<FewShotRun>> = (0..fs.runs)
        .into_par_iter()
        .map(|run| {
            let s = episode_seed(seed, run);
            let ep = sample_episode(data, fs.ways, fs.shots, fs.queries, &mut derive(s, &[0]))?;
            let pick = |v: &[(usize, usize)]| v.iter().map(|&(i, y)| (data.items[i].0.clone(), y)).collect::<Vec<_>>();
            let m = build_classifier(model, &ft, fs.ways, pretrained, s)?;
            let mut tuner = Finetuner::new(m, ft.clone(), s);
            tuner.run(&pick(&ep.support), |_| Ok(()))?;
            let accuracy = tuner.model.accuracy(&pick(&ep.query))?;
            Ok(FewShotRun { run, seed: s, accuracy })
        })
        .collect();
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
    let (mean, std) = mean_std(&runs.iter().map(|r| r.accuracy).collect::<Vec<_>>());
    Ok(FewShotReport { runs, mean, std })
}
