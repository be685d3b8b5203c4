//! Patch tokenizer (mini-PointNet) and the shared positional embedding.

use crate::error::Result;
use crate::graph::Var;
use crate::nn::{Ctx, Linear, ParamId, ParamStore};
use crate::rng::Rng;
use crate::scalar::Scalar;

/// Per-point MLP `3 -> 64 -> 128`, max-pool over the patch, then `128 -> c`.
#[derive(Clone, Debug)]
pub struct MiniPointNet {
    pub point_1: Linear,
    pub point_2: Linear,
    pub out: Linear,
}

pub const POINT_HIDDEN: [usize; 2] = [64, 128];

impl MiniPointNet {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize, rng: &mut Rng) -> Self {
        Self {
            point_1: Linear::new(store, &format!("{name}.point_1"), 3, POINT_HIDDEN[0], rng),
            point_2: Linear::new(store, &format!("{name}.point_2"), POINT_HIDDEN[0], POINT_HIDDEN[1], rng),
            out: Linear::new(store, &format!("{name}.out"), POINT_HIDDEN[1], width, rng),
        }
    }

    /// `(G * S) x 3` patch-major relative points -> `G x c` tokens.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, points: Var, group_size: usize) -> Result<Var> {
        let h = self.point_1.forward(ctx, points)?;
        let h = ctx.graph.gelu(h);
        let h = self.point_2.forward(ctx, h)?;
        let pooled = ctx.graph.max_pool_rows(h, group_size)?;
        self.out.forward(ctx, pooled)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [&self.point_1, &self.point_2, &self.out].iter().flat_map(|l| l.params()).collect()
    }
}

/// Learnable MLP `3 -> 128 -> c` mapping patch centers to embeddings. One
/// instance serves the encoder and every decoder call.
#[derive(Clone, Debug)]
pub struct PosEmbed {
    pub hidden: Linear,
    pub out: Linear,
}

pub const POS_HIDDEN: usize = 128;

impl PosEmbed {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize, rng: &mut Rng) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.hidden"), 3, POS_HIDDEN, rng),
            out: Linear::new(store, &format!("{name}.out"), POS_HIDDEN, width, rng),
        }
    }

    /// `G x 3` centers -> `G x c`.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, centers: Var) -> Result<Var> {
        let h = self.hidden.forward(ctx, centers)?;
        let h = ctx.graph.gelu(h);
        self.out.forward(ctx, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [&self.hidden, &self.out].iter().flat_map(|l| l.params()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::tensor::Tensor;
    use rand::seq::SliceRandom;
    use rand::Rng as _;

    fn setup() -> (ParamStore<f32>, MiniPointNet) {
        let mut store = ParamStore::new();
        let net = MiniPointNet::new(&mut store, "tok", 16, &mut seeded(3));
        (store, net)
    }

    fn token(store: &ParamStore<f32>, net: &MiniPointNet, pts: &[[f32; 3]]) -> Vec<f32> {
        let mut ctx = Ctx::new(store, false, false);
        let data = pts.iter().flatten().copied().collect();
        let x = ctx.constant(Tensor::new(&[pts.len(), 3], data).unwrap());
        let t = net.forward(&mut ctx, x, pts.len()).unwrap();
        assert_eq!(ctx.graph.shape(t), &[1, 16]);
        ctx.graph.value(t).data().to_vec()
    }

    #[test]
    fn permutation_and_duplicate_invariance() {
        let (store, net) = setup();
        let mut rng = seeded(9);
        let pts: Vec<[f32; 3]> = (0..12)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect();
        let base = token(&store, &net, &pts);
        for _ in 0..5 {
            let mut perm = pts.clone();
            perm.shuffle(&mut rng);
            let t = token(&store, &net, &perm);
            assert!(base.iter().zip(&t).all(|(a, b)| (a - b).abs() < 1e-6));
        }
        let mut dup = pts.clone();
        dup.push(pts[4]);
        let t = token(&store, &net, &dup);
        assert!(base.iter().zip(&t).all(|(a, b)| (a - b).abs() < 1e-6));
    }

    #[test]
    fn single_point_patch() {
        let (store, net) = setup();
        assert_eq!(token(&store, &net, &[[0.0, 0.0, 0.0]]).len(), 16);
    }
}
