//! Multi-target masked point modeling.
//!
//! The student encodes visible patches only. One decoder is driven by two
//! inputs: mask tokens (predicting the teacher's representations of the
//! masked patches) and codebook mixtures of those predictions (reconstructing
//! the masked points). The teacher is an exponential moving average of the
//! student encoder and sees every patch.

use rand::seq::index::sample;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{EncoderStack, SiameseDecoder};
use crate::codebook::{perplexity, temperature, Codebook};
use crate::config::{MaskKind, ModelConfig, PretrainConfig};
use crate::data::{augment, prepare_eval, AugmentConfig};
use crate::error::{invalid, Error, Result};
use crate::geometry::{group, sq_dist, Point, PatchSet, PointCloud};
use crate::graph::{Graph, Var};
use crate::nn::{init_normal, Ctx, Gradients, Linear, ParamId, ParamStore};
use crate::optim::{cosine_lr, AdamW};
use crate::rng::{derive, Rng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tokenizer::{MiniPointNet, PosEmbed};

/// Tokenizer, encoder, decoder(s), codebook and point head in one store.
#[derive(Clone, Debug)]
pub struct M3csModel<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub tokenizer: MiniPointNet,
    pub pos_embed: PosEmbed,
    pub encoder: EncoderStack,
    pub decoder: SiameseDecoder,
    /// Separate point decoder, present only when weight sharing is disabled.
    pub point_decoder: Option<SiameseDecoder>,
    pub mask_token: ParamId,
    pub codebook: Codebook,
    pub point_head: Linear,
}

impl<T: Scalar> M3csModel<T> {
    pub fn new(config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let c = config.width;
        let mut store = ParamStore::new();
        let tokenizer = MiniPointNet::new(&mut store, "tokenizer", c, rng);
        let pos_embed = PosEmbed::new(&mut store, "pos_embed", c, rng);
        let encoder = EncoderStack::new(&mut store, "encoder", config.encoder_depth, c, config.heads, rng)?;
        let decoder = SiameseDecoder::new(&mut store, "decoder", config.decoder_depth, c, config.heads, rng)?;
        let point_decoder = if config.siamese {
            None
        } else {
            Some(SiameseDecoder::new(&mut store, "point_decoder", config.decoder_depth, c, config.heads, rng)?)
        };
        let mask_token = store.add("mask_token", init_normal(&[1, c], 0.02, rng));
        let codebook = Codebook::new(&mut store, "codebook", config.codebook_size, c, rng)?;
        let point_head = Linear::new(&mut store, "point_head", c, config.group_size * 3, rng);
        Ok(Self {
            config: config.clone(),
            store,
            tokenizer,
            pos_embed,
            encoder,
            decoder,
            point_decoder,
            mask_token,
            codebook,
            point_head,
        })
    }

    /// Parameters of every decoder stack the model owns.
    pub fn decoder_param_count(&self) -> usize {
        let mut ids = self.decoder.params();
        if let Some(d) = &self.point_decoder {
            ids.extend(d.params());
        }
        self.store.count(&ids)
    }

    pub fn point_branch_decoder(&self) -> &SiameseDecoder {
        self.point_decoder.as_ref().unwrap_or(&self.decoder)
    }

    pub fn encoder_params(&self) -> Vec<ParamId> {
        self.encoder.params()
    }

    /// Patch tokens and positional embeddings, `G x c` each.
    pub fn embed(&self, ctx: &mut Ctx<'_, T>, patches: &PatchSet<T>) -> Result<(Var, Var)> {
        let pts = ctx.constant(patches.groups_tensor());
        let tokens = self.tokenizer.forward(ctx, pts, patches.group_size)?;
        let centers = ctx.constant(patches.centers_tensor());
        let pos = self.pos_embed.forward(ctx, centers)?;
        Ok((tokens, pos))
    }

    /// Hard codebook id of every patch from the full-input student encoding.
    pub fn token_ids(&self, cloud: &PointCloud<T>) -> Result<(PatchSet<T>, Vec<usize>)> {
        let cloud = prepare_eval(cloud, self.config.points);
        let patches = group(&cloud, self.config.groups, self.config.group_size, 0)?;
        let mut ctx = Ctx::new(&self.store, false, false);
        let (tokens, pos) = self.embed(&mut ctx, &patches)?;
        let enc = self.encoder.forward(&mut ctx, tokens, pos)?;
        let ids = self.codebook.token_ids(&mut ctx, enc)?;
        Ok((patches, ids))
    }
}

/// Which patches are hidden from the student.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSpec {
    pub masked: Vec<bool>,
    pub ratio: f64,
    pub kind: MaskKind,
}

impl MaskSpec {
    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.masked.len()).filter(|&i| self.masked[i]).collect()
    }

    pub fn visible_indices(&self) -> Vec<usize> {
        (0..self.masked.len()).filter(|&i| !self.masked[i]).collect()
    }

    pub fn masked_count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }
}

pub fn masked_count(groups: usize, ratio: f64) -> Result<usize> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(invalid(format!("mask ratio must be in (0, 1), got {ratio}")));
    }
    let n = (ratio * groups as f64).round() as usize;
    if n == 0 || n >= groups {
        return Err(invalid(format!("mask ratio {ratio} over {groups} patches leaves no visible or no masked patch")));
    }
    Ok(n)
}

/// `round(ratio * G)` patches drawn uniformly without replacement.
pub fn mask_random(groups: usize, ratio: f64, rng: &mut Rng) -> Result<MaskSpec> {
    let n = masked_count(groups, ratio)?;
    let mut masked = vec![false; groups];
    for i in sample(rng, groups, n) {
        masked[i] = true;
    }
    Ok(MaskSpec {
        masked,
        ratio,
        kind: MaskKind::Random,
    })
}

/// A random seed patch and its nearest centers, `round(ratio * G)` in total.
pub fn mask_block<T: Scalar>(centers: &[Point<T>], ratio: f64, rng: &mut Rng) -> Result<MaskSpec> {
    let groups = centers.len();
    let n = masked_count(groups, ratio)?;
    let seed = rng.random_range(0..groups);
    let mut order: Vec<(T, usize)> = centers
        .iter()
        .enumerate()
        .map(|(i, c)| (sq_dist(c, &centers[seed]), i))
        .collect();
    order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1)));
    let mut masked = vec![false; groups];
    masked[seed] = true;
    for &(_, i) in order.iter().filter(|(_, i)| *i != seed).take(n - 1) {
        masked[i] = true;
    }
    Ok(MaskSpec {
        masked,
        ratio,
        kind: MaskKind::Block,
    })
}

pub fn make_mask<T: Scalar>(kind: MaskKind, centers: &[Point<T>], ratio: f64, rng: &mut Rng) -> Result<MaskSpec> {
    match kind {
        MaskKind::Random => mask_random(centers.len(), ratio, rng),
        MaskKind::Block => mask_block(centers, ratio, rng),
    }
}

/// Frozen teacher encoder updated only by exponential moving average.
#[derive(Clone, Debug)]
pub struct EmaState<T> {
    /// Same layout as the student store; only encoder entries are used.
    pub teacher: ParamStore<T>,
    pub encoder_ids: Vec<ParamId>,
    pub momentum: f64,
    pub start: f64,
    pub end: f64,
}

impl<T: Scalar> EmaState<T> {
    /// Teacher initialized as an exact copy of the student.
    pub fn new(model: &M3csModel<T>, start: f64, end: f64) -> Self {
        let mut teacher = model.store.clone();
        for id in teacher.ids().collect::<Vec<_>>() {
            teacher.set_trainable(id, false);
        }
        Self {
            teacher,
            encoder_ids: model.encoder_params(),
            momentum: start,
            start,
            end,
        }
    }

    /// Linear ramp from `start` towards `end`; `step < total` keeps it below `end`.
    pub fn schedule(&self, step: usize, total: usize) -> f64 {
        let p = if total == 0 { 0.0 } else { step as f64 / total as f64 };
        self.start + (self.end - self.start) * p.min(1.0)
    }

    /// `teacher = lambda * teacher + (1 - lambda) * student` on encoder weights.
    pub fn update(&mut self, student: &ParamStore<T>, lambda: f64) -> Result<()> {
        if student.len() != self.teacher.len() {
            return Err(invalid("ema_update: student and teacher parameter sets differ"));
        }
        let l = T::from_f64_lossy(lambda);
        let r = T::one() - l;
        for &id in &self.encoder_ids {
            let s = student.get(id);
            if student.name(id) != self.teacher.name(id) || s.shape() != self.teacher.get(id).shape() {
                return Err(invalid(format!("ema_update: mismatch at {}", student.name(id))));
            }
            let t = self.teacher.get_mut(id);
            for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
                *tv = l * *tv + r * sv;
            }
        }
        self.momentum = lambda;
        Ok(())
    }
}

/// Teacher targets at the masked positions: the mean of the last `layers`
/// block outputs of the full token set, each normalized without parameters,
/// then layer-normalized per token. Nothing is recorded for differentiation.
pub fn forward_targets<T: Scalar>(
    model: &M3csModel<T>,
    teacher: &ParamStore<T>,
    tokens: &Tensor<T>,
    pos: &Tensor<T>,
    mask: &MaskSpec,
    layers: usize,
    instance_norm: bool,
) -> Result<Tensor<T>> {
    let depth = model.encoder.depth();
    if layers == 0 || layers > depth {
        return Err(invalid(format!("target layers must be in 1..={depth}, got {layers}")));
    }
    let mut ctx = Ctx::new(teacher, false, false);
    let t = ctx.constant(tokens.clone());
    let p = ctx.constant(pos.clone());
    let collect: Vec<usize> = (depth - layers..depth).collect();
    let hidden = model.encoder.encode(&mut ctx, t, p, &collect)?;
    let mut normed = Vec::with_capacity(layers);
    for &l in &collect {
        let h = hidden[&l];
        let h = if instance_norm {
            let t = ctx.graph.transpose(h);
            let t = ctx.graph.layer_norm(t);
            ctx.graph.transpose(t)
        } else if layers > 1 {
            ctx.graph.layer_norm(h)
        } else {
            h
        };
        normed.push(h);
    }
    let mut sum = normed[0];
    for &h in &normed[1..] {
        sum = ctx.graph.add(sum, h)?;
    }
    let avg = ctx.graph.scale(sum, T::from_f64_lossy(1.0 / layers as f64));
    let sel = ctx.graph.gather_rows(avg, &mask.masked_indices())?;
    let y = ctx.graph.layer_norm(sel);
    Ok(ctx.graph.value(y).clone())
}

/// Student-side intermediate values for one cloud.
#[derive(Clone, Copy, Debug)]
pub struct StudentOutput {
    /// Encoder output for visible patches, `V x c`.
    pub visible: Var,
    /// Positions in decoder order (visible then masked), `G x c`.
    pub decoder_pos: Var,
    /// Decoder predictions at masked positions, `M x c`.
    pub x: Var,
}

pub fn forward_student<T: Scalar>(model: &M3csModel<T>, ctx: &mut Ctx<'_, T>, tokens: Var, pos: Var, mask: &MaskSpec) -> Result<StudentOutput> {
    let (vis, msk) = (mask.visible_indices(), mask.masked_indices());
    let ev = ctx.graph.gather_rows(tokens, &vis)?;
    let pv = ctx.graph.gather_rows(pos, &vis)?;
    let pm = ctx.graph.gather_rows(pos, &msk)?;
    let visible = model.encoder.forward(ctx, ev, pv)?;
    let mt = ctx.param(model.mask_token);
    let mask_tokens = ctx.graph.gather_rows(mt, &vec![0; msk.len()])?;
    let dec_in = ctx.graph.concat_rows(&[visible, mask_tokens])?;
    let decoder_pos = ctx.graph.concat_rows(&[pv, pm])?;
    let out = model.decoder.decode(ctx, dec_in, decoder_pos)?;
    let x = ctx.graph.slice_rows(out, vis.len(), vis.len() + msk.len())?;
    Ok(StudentOutput { visible, decoder_pos, x })
}

/// Mean smooth-L1 between predictions and (constant) targets.
pub fn align_loss<T: Scalar>(graph: &mut Graph<T>, x: Var, y: Var, beta: f64) -> Result<Var> {
    graph.smooth_l1(x, y, T::from_f64_lossy(beta))
}

#[derive(Clone, Copy, Debug)]
pub struct PointBranch {
    pub loss: Var,
    pub z: Var,
    /// `(M * S) x 3` predicted relative points.
    pub points: Var,
}

/// Quantize the masked predictions, decode them next to the visible
/// encodings, regress `S x 3` points per masked patch, and score with the
/// per-patch Chamfer distance averaged over masked patches.
pub fn point_loss<T: Scalar>(
    model: &M3csModel<T>,
    ctx: &mut Ctx<'_, T>,
    student: &StudentOutput,
    patches: &PatchSet<T>,
    mask: &MaskSpec,
    tau: f64,
    rng: &mut Rng,
) -> Result<PointBranch> {
    let msk = mask.masked_indices();
    let q = model.codebook.quantize(ctx, student.x, tau, rng)?;
    let dec_in = ctx.graph.concat_rows(&[student.visible, q.mixed])?;
    let f = model.point_branch_decoder().decode(ctx, dec_in, student.decoder_pos)?;
    let n_vis = mask.masked.len() - msk.len();
    let fm = ctx.graph.slice_rows(f, n_vis, n_vis + msk.len())?;
    let pred = model.point_head.forward(ctx, fm)?;
    let points = ctx.graph.reshape(pred, &[msk.len() * patches.group_size, 3])?;
    let target = ctx.constant(patches.groups_tensor_of(&msk));
    let loss = ctx.graph.chamfer_grouped(points, target, msk.len())?;
    Ok(PointBranch { loss, z: q.z, points })
}

/// Loss values and gradients for one cloud.
#[derive(Clone, Debug)]
pub struct SampleResult<T> {
    pub l_align: f64,
    pub l_rec: f64,
    pub z: Vec<T>,
    pub grads: Option<Gradients<T>>,
}

/// Full pretext task on one already-augmented cloud. `loss_scale` multiplies
/// the total before differentiation (1 / batch size in training).
#[allow(clippy::too_many_arguments)]
pub fn sample_loss<T: Scalar>(
    model: &M3csModel<T>,
    teacher: &ParamStore<T>,
    cloud: &PointCloud<T>,
    cfg: &PretrainConfig,
    tau: f64,
    fps_start: usize,
    rng: &mut Rng,
    train: bool,
    loss_scale: f64,
) -> Result<SampleResult<T>> {
    let mc = &model.config;
    let patches = group(cloud, mc.groups, mc.group_size, fps_start)?;
    let mask = make_mask(cfg.mask_kind, &patches.centers, cfg.mask_ratio, rng)?;
    let mut ctx = Ctx::new(&model.store, train, train);
    let (tokens, pos) = model.embed(&mut ctx, &patches)?;
    let y = forward_targets(model, teacher, ctx.graph.value(tokens), ctx.graph.value(pos), &mask, cfg.target_layers, cfg.target_instance_norm)?;
    let student = forward_student(model, &mut ctx, tokens, pos, &mask)?;
    let yv = ctx.constant(y);
    let la = align_loss(&mut ctx.graph, student.x, yv, cfg.smooth_l1_beta)?;
    let branch = point_loss(model, &mut ctx, &student, &patches, &mask, tau, rng)?;
    let weighted = ctx.graph.scale(branch.loss, T::from_f64_lossy(cfg.eta));
    let total = ctx.graph.add(la, weighted)?;
    let l_align = ctx.graph.value(la).item().to_f64_lossy();
    let l_rec = ctx.graph.value(branch.loss).item().to_f64_lossy();
    if !(l_align.is_finite() && l_rec.is_finite()) {
        return Err(Error::NonFinite(format!("pretrain loss (align {l_align}, rec {l_rec})")));
    }
    let z = ctx.graph.value(branch.z).data().to_vec();
    let grads = if train {
        let scaled = ctx.graph.scale(total, T::from_f64_lossy(loss_scale));
        Some(ctx.backward(scaled)?)
    } else {
        None
    };
    Ok(SampleResult { l_align, l_rec, z, grads })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub l_align: f64,
    pub l_rec: f64,
    pub l_total: f64,
    pub lambda: f64,
    pub tau: f64,
    pub perplexity: f64,
}

impl StepMetrics {
    pub const CSV_HEADER: &'static str = "step,l_align,l_rec,l_total,lambda,tau,perplexity";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.l_align, self.l_rec, self.l_total, self.lambda, self.tau, self.perplexity
        )
    }
}

/// Student, EMA teacher, optimizer and schedules.
#[derive(Clone, Debug)]
pub struct Pretrainer<T> {
    pub model: M3csModel<T>,
    pub ema: EmaState<T>,
    pub optim: AdamW<T>,
    pub config: PretrainConfig,
    pub seed: u64,
    pub step: usize,
}

impl<T: Scalar> Pretrainer<T> {
    pub fn new(model: M3csModel<T>, config: PretrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let ema = EmaState::new(&model, config.ema_start, config.ema_end);
        Ok(Self {
            optim: AdamW::new(config.weight_decay),
            model,
            ema,
            config,
            seed,
            step: 0,
        })
    }

    pub fn tau(&self) -> f64 {
        let c = &self.config;
        temperature(self.step, c.steps, c.tau_schedule, c.tau_start, c.tau_end)
    }

    fn augment_config(&self) -> AugmentConfig {
        AugmentConfig {
            points: self.model.config.points,
            identity: !self.config.augment,
            ..AugmentConfig::default()
        }
    }

    /// Loss, backward, AdamW step, then EMA update of the teacher.
    pub fn train_step(&mut self, batch: &[PointCloud<T>]) -> Result<StepMetrics> {
        if batch.is_empty() {
            return Err(invalid("empty batch"));
        }
        let tau = self.tau();
        let step = self.step;
        let aug = self.augment_config();
        let scale = 1.0 / batch.len() as f64;
        let (model, teacher, cfg, seed) = (&self.model, &self.ema.teacher, &self.config, self.seed);
        let results: Vec<Result<SampleResult<T>>> = batch
            .par_iter()
            .enumerate()
            .map(|(i, cloud)| {
                let mut rng = derive(seed, &[1, step as u64, i as u64]);
                let cloud = augment(cloud, &aug, &mut rng);
                let start = rng.random_range(0..cloud.len());
                sample_loss(model, teacher, &cloud, cfg, tau, start, &mut rng, true, scale)
            })
            .collect();
        let mut grads = Gradients::empty(self.model.store.len());
        let (mut la, mut lr) = (0.0, 0.0);
        let mut z = Vec::new();
        for r in results {
            let r = r?;
            la += r.l_align * scale;
            lr += r.l_rec * scale;
            z.extend(r.z);
            grads.accumulate(r.grads.as_ref().expect("training pass"));
        }
        let lr_now = cosine_lr(step, cfg.steps, cfg.lr, cfg.min_lr, cfg.warmup_steps);
        self.optim.step(&mut self.model.store, &grads, T::from_f64_lossy(lr_now))?;
        let lambda = self.ema.schedule(step, cfg.steps);
        self.ema.update(&self.model.store, lambda)?;
        self.step += 1;
        Ok(StepMetrics {
            step,
            l_align: la,
            l_rec: lr,
            l_total: la + cfg.eta * lr,
            lambda,
            tau,
            perplexity: perplexity(&z, self.model.config.codebook_size)?,
        })
    }

    /// Batch indices for `step`, drawn without replacement.
    pub fn batch_indices(&self, dataset_len: usize, step: usize) -> Vec<usize> {
        let n = self.config.batch_size.min(dataset_len);
        sample(&mut derive(self.seed, &[0, step as u64]), dataset_len, n).into_vec()
    }

    /// Runs until `config.steps`, calling `on_step` after each step.
    pub fn run(&mut self, clouds: &[PointCloud<T>], mut on_step: impl FnMut(&StepMetrics) -> Result<()>) -> Result<Vec<StepMetrics>> {
        if clouds.is_empty() {
            return Err(invalid("pretraining needs at least one cloud"));
        }
        let mut out = Vec::new();
        while self.step < self.config.steps {
            let idx = self.batch_indices(clouds.len(), self.step);
            let batch: Vec<PointCloud<T>> = idx.iter().map(|&i| clouds[i].clone()).collect();
            let m = self.train_step(&batch)?;
            on_step(&m)?;
            out.push(m);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn tiny() -> ModelConfig {
        ModelConfig {
            width: 8,
            heads: 2,
            encoder_depth: 2,
            decoder_depth: 2,
            groups: 8,
            group_size: 4,
            codebook_size: 4,
            points: 64,
            siamese: true,
        }
    }

    #[test]
    fn mask_counts() {
        let m = mask_random(64, 0.65, &mut seeded(1)).unwrap();
        assert_eq!(m.masked_count(), 42);
        let m = mask_random(2, 0.5, &mut seeded(1)).unwrap();
        assert_eq!(m.masked_count(), 1);
        assert!(mask_random(4, 0.05, &mut seeded(1)).is_err());
        assert!(mask_random(4, 0.95, &mut seeded(1)).is_err());
        assert!(mask_random(4, 1.0, &mut seeded(1)).is_err());
    }

    #[test]
    fn block_mask_contains_seed_and_count() {
        let centers: Vec<Point<f64>> = (0..16).map(|i| [(i % 4) as f64, (i / 4) as f64, 0.0]).collect();
        for s in 0..20 {
            let mut rng = seeded(s);
            let seed_patch = seeded(s).random_range(0..16);
            let m = mask_block(&centers, 0.5, &mut rng).unwrap();
            assert_eq!(m.masked_count(), 8);
            assert!(m.masked[seed_patch]);
        }
    }

    #[test]
    fn ema_zero_momentum_copies_student() {
        let mut rng = seeded(2);
        let mut model = M3csModel::<f64>::new(&tiny(), &mut rng).unwrap();
        let mut ema = EmaState::new(&model, 0.0, 0.0);
        for id in model.encoder_params() {
            model.store.get_mut(id).data_mut().iter_mut().for_each(|v| *v += 1.0);
        }
        ema.update(&model.store, 0.0).unwrap();
        for id in model.encoder_params() {
            assert_eq!(ema.teacher.get(id).data(), model.store.get(id).data());
            assert!(!ema.teacher.get(id).requires_grad());
        }
    }

    #[test]
    fn ema_schedule_stays_below_one() {
        let model = M3csModel::<f32>::new(&tiny(), &mut seeded(0)).unwrap();
        let ema = EmaState::new(&model, 0.996, 1.0);
        assert_eq!(ema.schedule(0, 100), 0.996);
        assert!(ema.schedule(99, 100) < 1.0);
    }

    #[test]
    fn shared_and_independent_decoders() {
        let shared = M3csModel::<f32>::new(&tiny(), &mut seeded(0)).unwrap();
        let split = M3csModel::<f32>::new(&ModelConfig { siamese: false, ..tiny() }, &mut seeded(0)).unwrap();
        assert_eq!(split.decoder_param_count(), 2 * shared.decoder_param_count());
    }

    #[test]
    fn sample_loss_is_finite_and_nonnegative() {
        let mut rng = seeded(3);
        let model = M3csModel::<f32>::new(&tiny(), &mut rng).unwrap();
        let pts: Vec<Point<f32>> = (0..64).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let cloud = PointCloud::new(pts).unwrap();
        let cfg = PretrainConfig::default();
        let r = sample_loss(&model, &model.store, &cloud, &cfg, 1.0, 0, &mut rng, true, 1.0).unwrap();
        assert!(r.l_align >= 0.0 && r.l_rec >= 0.0);
        assert_eq!(r.z.len(), 5 * 4);
        assert!(r.grads.unwrap().norm() > 0.0);
    }
}
