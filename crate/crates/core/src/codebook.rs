//! Learnable codebook and the Gumbel-softmax quantizer.

use std::f64::consts::PI;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::graph::{Graph, Var};
use crate::nn::{init_normal, Ctx, Linear, ParamId, ParamStore};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `T x D` matrix of semantic centroids plus the linear layer scoring
/// tokens against them.
#[derive(Clone, Debug)]
pub struct Codebook {
    pub entries: ParamId,
    pub assign: Linear,
    pub size: usize,
    pub width: usize,
}

/// Soft assignment `z` (rows sum to one) and the mixture `z * entries`.
#[derive(Clone, Copy, Debug)]
pub struct QuantizerOutput {
    pub z: Var,
    pub mixed: Var,
    pub tau: f64,
}

pub const ENTRY_INIT_STD: f64 = 0.02;

impl Codebook {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, size: usize, width: usize, rng: &mut Rng) -> Result<Self> {
        if size < 2 {
            return Err(invalid(format!("codebook needs at least 2 entries, got {size}")));
        }
        Ok(Self {
            entries: store.add(format!("{name}.entries"), init_normal(&[size, width], ENTRY_INIT_STD, rng)),
            assign: Linear::new(store, &format!("{name}.assign"), width, size, rng),
            size,
            width,
        })
    }

    /// Gumbel noise is drawn only when `ctx.train` is set.
    pub fn quantize<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var, tau: f64, rng: &mut Rng) -> Result<QuantizerOutput> {
        let logits = self.assign.forward(ctx, x)?;
        let noise = ctx.train.then_some(rng);
        let z = gumbel_softmax(&mut ctx.graph, logits, tau, noise)?;
        let entries = ctx.param(self.entries);
        let mixed = ctx.graph.matmul(z, entries)?;
        Ok(QuantizerOutput { z, mixed, tau })
    }

    /// Hard token id per row: argmax of the assignment logits.
    pub fn token_ids<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Vec<usize>> {
        let logits = self.assign.forward(ctx, x)?;
        let t = ctx.graph.value(logits);
        let (rows, _) = t.dims2()?;
        Ok((0..rows).map(|r| argmax(t.row(r))).collect())
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = vec![self.entries];
        p.extend(self.assign.params());
        p
    }
}

pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, T::neg_infinity()), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// `softmax((logits + g) / tau)` with `g ~ Gumbel(0, 1)` when `noise` is given.
pub fn gumbel_softmax<T: Scalar>(graph: &mut Graph<T>, logits: Var, tau: f64, noise: Option<&mut Rng>) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(invalid(format!("temperature must be positive, got {tau}")));
    }
    let mut x = logits;
    if let Some(rng) = noise {
        let shape = graph.shape(logits).to_vec();
        let g = Tensor::from_fn(&shape, |_| {
            let u: f64 = rng.random_range(f64::EPSILON..1.0);
            T::from_f64_lossy(-(-u.ln()).ln())
        });
        let g = graph.constant(g);
        x = graph.add(x, g)?;
    }
    let x = graph.scale(x, T::from_f64_lossy(1.0 / tau));
    Ok(graph.softmax(x))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TauSchedule {
    Cosine,
    Constant,
}

pub const TAU_START: f64 = 1.0;
pub const TAU_END: f64 = 0.0625;

/// Gumbel-softmax temperature at `step` of `total`.
pub fn temperature(step: usize, total: usize, schedule: TauSchedule, start: f64, end: f64) -> f64 {
    match schedule {
        TauSchedule::Constant => start,
        TauSchedule::Cosine => {
            let progress = if total == 0 { 1.0 } else { (step.min(total) as f64) / total as f64 };
            end + 0.5 * (start - end) * (1.0 + (PI * progress).cos())
        }
    }
}

/// `exp(entropy)` of the mean assignment over all rows of `z` (`rows x T`).
pub fn perplexity<T: Scalar>(z: &[T], size: usize) -> Result<f64> {
    if size == 0 || z.is_empty() || z.len() % size != 0 {
        return Err(invalid("perplexity: empty or ragged assignment batch"));
    }
    let rows = z.len() / size;
    let mut mean = vec![0.0f64; size];
    for (i, &v) in z.iter().enumerate() {
        mean[i % size] += v.to_f64_lossy();
    }
    let entropy: f64 = mean
        .iter()
        .map(|&m| m / rows as f64)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    Ok(entropy.exp())
}
