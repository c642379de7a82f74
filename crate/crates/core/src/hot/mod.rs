//! Per-block encoder: the joint-wise MLP, permutation-equivariant linear
//! layers, higher-order attention, and the per-order encoder branches.

pub mod attention;
pub mod equivariant;
pub mod partitions;
pub mod performer;

pub use attention::{AttentionMode, HigherOrderAttention};
pub use equivariant::{permute_joint_tuples, EquivariantLinear};
pub use partitions::{bell_number, enumerate_partitions, SetPartition};
pub use performer::performer_features;

use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::tape::Tape;
use crate::tensor::Tensor;

/// Three-layer joint-wise MLP embedding one temporal block. Widths follow
/// the `C*T -> 6T -> 9T -> d` ladder with ReLU after the first two layers
/// and dropout before the last. Joints (and blocks) act as the batch
/// dimension, so there is no cross-joint mixing.
#[derive(Debug, Clone)]
pub struct MlpUnit {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub w3: Tensor,
    pub b3: Tensor,
}

impl MlpUnit {
    pub fn init(coords: usize, block_len: usize, d: usize, rng: &mut Rng) -> Self {
        let in_w = coords * block_len;
        let h1 = 6 * block_len;
        let h2 = 9 * block_len;
        let s1 = (2.0 / in_w as f64).sqrt();
        let s2 = (2.0 / h1 as f64).sqrt();
        let s3 = (1.0 / h2 as f64).sqrt();
        MlpUnit {
            w1: Tensor::random_normal(&[in_w, h1], s1, rng),
            b1: Tensor::zeros(&[h1]),
            w2: Tensor::random_normal(&[h1, h2], s2, rng),
            b2: Tensor::zeros(&[h2]),
            w3: Tensor::random_normal(&[h2, d], s3, rng),
            b3: Tensor::zeros(&[d]),
        }
    }

    pub fn output_width(&self) -> usize {
        self.w3.shape()[1]
    }

    /// Embed one `J x (C*T)` block into `J x d`. The dropout mask, when
    /// given, multiplies the second hidden activation elementwise.
    pub fn forward(&self, tape: &mut Tape, block: &Tensor, dropout_mask: Option<&Tensor>) -> Tensor {
        assert_eq!(block.shape()[1], self.w1.shape()[0], "block width");
        let h1 = tape.affine(block, &self.w1, &self.b1);
        let h1 = tape.relu(&h1);
        let h2 = tape.affine(&h1, &self.w2, &self.b2);
        let mut h2 = tape.relu(&h2);
        if let Some(mask) = dropout_mask {
            h2 = tape.dropout(&h2, mask);
        }
        tape.affine(&h2, &self.w3, &self.b3)
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3].into_iter()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
        ]
        .into_iter()
    }
}

/// One transformer layer between hyper-edge orders: higher-order attention
/// plus a two-layer equivariant feed-forward with a residual around the
/// feed-forward. The feed-forward reads a standardized copy of the
/// attention output (the normalization the transformer equations leave
/// implicit); with zero feed-forward weights the layer is exactly the
/// attention map.
#[derive(Debug, Clone)]
pub struct HotLayer {
    pub attention: HigherOrderAttention,
    pub ff1: EquivariantLinear,
    pub ff2: EquivariantLinear,
    pub norm_gain: Tensor,
    pub norm_bias: Tensor,
}

impl HotLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        m: usize,
        n: usize,
        d_in: usize,
        d_out: usize,
        d_ff: usize,
        heads: usize,
        d_head: usize,
        mode: AttentionMode,
        j: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(HotLayer {
            attention: HigherOrderAttention::init(m, n, d_in, d_out, heads, d_head, mode, j, rng)?,
            ff1: EquivariantLinear::init(n, n, d_out, d_ff, j, rng),
            ff2: EquivariantLinear::init(n, n, d_ff, d_out, j, rng),
            norm_gain: Tensor::full(&[d_out], 1.0),
            norm_bias: Tensor::zeros(&[d_out]),
        })
    }

    pub fn input_order(&self) -> usize {
        self.attention.input_order
    }

    pub fn output_order(&self) -> usize {
        self.attention.output_order
    }

    pub fn forward(&self, tape: &mut Tape, x: &Tensor, j: usize) -> Tensor {
        self.forward_batched(tape, x, j, 1)
    }

    /// Block-stacked variant: `[J^m, batch * d_in]` to `[J^n, batch * d_out]`.
    pub fn forward_batched(&self, tape: &mut Tape, x: &Tensor, j: usize, batch: usize) -> Tensor {
        let attended = self.attention.forward_batched(tape, x, j, batch);
        let dim = self.attention.d_out;
        let normed = tape.chunk_norm(&attended, &self.norm_gain, &self.norm_bias, dim);
        let h = self.ff1.apply_batched(tape, &normed, j, batch);
        let h = tape.relu(&h);
        let h = self.ff2.apply_batched(tape, &h, j, batch);
        tape.add(&attended, &h)
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.attention
            .params()
            .chain(self.ff1.params())
            .chain(self.ff2.params())
            .chain([&self.norm_gain, &self.norm_bias])
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.attention
            .params_mut()
            .chain(self.ff1.params_mut())
            .chain(self.ff2.params_mut())
            .chain([&mut self.norm_gain, &mut self.norm_bias])
    }
}

/// Encoder branch for one hyper-edge order: the first layer lifts the
/// per-joint block embedding from order 1 to order `m`, remaining layers
/// stay at order `m`. Applied independently per temporal block; each
/// branch owns its parameters.
#[derive(Debug, Clone)]
pub struct HotBranch {
    pub order: usize,
    pub layers: Vec<HotLayer>,
}

impl HotBranch {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        order: usize,
        depth: usize,
        d_in: usize,
        d_out: usize,
        d_ff: usize,
        heads: usize,
        d_head: usize,
        mode_for: impl Fn(usize, usize) -> AttentionMode,
        j: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        assert!(depth >= 1, "branch needs at least the lifting layer");
        let mut layers = Vec::with_capacity(depth);
        layers.push(HotLayer::init(
            1,
            order,
            d_in,
            d_out,
            d_ff,
            heads,
            d_head,
            mode_for(1, order),
            j,
            rng,
        )?);
        for _ in 1..depth {
            layers.push(HotLayer::init(
                order,
                order,
                d_out,
                d_out,
                d_ff,
                heads,
                d_head,
                mode_for(order, order),
                j,
                rng,
            )?);
        }
        Ok(HotBranch { order, layers })
    }

    /// Encode one block embedding `J x d` into `J^m x d'`.
    pub fn forward(&self, tape: &mut Tape, block_embedding: &Tensor, j: usize) -> Tensor {
        self.forward_batched(tape, block_embedding, j, 1)
    }

    /// Encode all blocks at once: `[J, batch * d]` to `[J^m, batch * d']`.
    pub fn forward_batched(
        &self,
        tape: &mut Tape,
        block_embeddings: &Tensor,
        j: usize,
        batch: usize,
    ) -> Tensor {
        let mut x = block_embeddings.clone();
        for layer in &self.layers {
            x = layer.forward_batched(tape, &x, j, batch);
        }
        x
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| l.params())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.params_mut())
    }
}
