//! Fusion of per-order hyper-edge features: multi-order tensor assembly,
//! coupled-mode self-attention, pooling over hyper-edges and temporal
//! blocks, and the classifier-headed model variants.
//!
//! The per-block encoder outputs, one `J^m x d'` tensor per order and
//! block, are reduced to their strictly increasing index tuples (the
//! canonical hyper-edge list), stacked across blocks, and concatenated
//! across orders into one `d' x N x tau` tensor. Attention over its
//! matricizations fuses information along coupled token modes: rows of a
//! matricization act as tokens, the remaining mode as the token width.
//! Two pooling modules reduce it to a fixed-width vector: hyper-edge
//! pooling with learned per-order aggregation matrices, and temporal-block
//! pooling with a choice of six reduction operators.

pub mod pooling;

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::hot::{AttentionMode, HotBranch, MlpUnit};
use crate::hypergraph::{binomial, enumerate_hyperedges, HyperEdgeIndex};
use crate::rng::Rng;
use crate::skeleton::{block_count, normalize, split_blocks, SkeletonSequence};
use crate::tensor::tape::Tape;
use crate::tensor::{Reduction, Tensor};

pub use pooling::{rank_coefficients, temporal_pool, PoolMethod, PoolParams};

/// Multi-order feature tensor `d' x N x tau` with its hyper-edge layout.
#[derive(Debug, Clone)]
pub struct MultiOrderTensor {
    pub data: Tensor,
    pub joints: usize,
    pub orders: Vec<usize>,
    pub edge_index: Vec<HyperEdgeIndex>,
    /// Start column of each order's edge span.
    pub order_offsets: Vec<usize>,
}

impl MultiOrderTensor {
    pub fn d_prime(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn edge_count(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn blocks(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn span(&self, order_pos: usize) -> (usize, usize) {
        (self.order_offsets[order_pos], self.edge_index[order_pos].len())
    }
}

/// Flat row indices of the strictly increasing tuples inside `J^m`.
fn edge_row_indices(index: &HyperEdgeIndex) -> Vec<usize> {
    let j = index.joints;
    let m = index.order;
    index
        .edges()
        .iter()
        .map(|edge| {
            edge.iter()
                .enumerate()
                .map(|(pos, &v)| v * j.pow((m - 1 - pos) as u32))
                .sum()
        })
        .collect()
}

/// Assemble block-stacked per-order encoder outputs into the multi-order
/// tensor. `features[k]` is the order `orders[k]` output `J^m x (tau * d')`
/// with blocks side by side in the channel mode; only coefficients at
/// strictly increasing tuples survive, in canonical hyper-edge order.
pub fn assemble_multi_order(
    tape: &mut Tape,
    features: &[Tensor],
    orders: &[usize],
    joints: usize,
    blocks: usize,
) -> Result<MultiOrderTensor> {
    if blocks == 0 {
        return Err(Error::InvalidArgument("no temporal blocks".into()));
    }
    let max_order = *orders.iter().max().expect("at least one order");
    if joints < max_order {
        return Err(Error::InvalidArgument(format!(
            "{joints} joints cannot form order-{max_order} hyper-edges"
        )));
    }
    let d_prime = features[0].shape()[1] / blocks;
    let mut edge_index = Vec::with_capacity(orders.len());
    let mut order_offsets = Vec::with_capacity(orders.len());
    let mut offset = 0;
    for &m in orders {
        let idx = enumerate_hyperedges(joints, m)?;
        order_offsets.push(offset);
        offset += idx.len();
        edge_index.push(idx);
    }
    // Per order: gather edge rows, peel the block factor off the channels,
    // and rotate to d' x N_m x tau; then concatenate orders along mode 2.
    let mut per_order = Vec::with_capacity(orders.len());
    for (k, idx) in edge_index.iter().enumerate() {
        let phi = &features[k];
        if phi.shape() != [joints.pow(idx.order as u32), blocks * d_prime] {
            return Err(Error::ShapeMismatch(format!(
                "order-{} features have shape {:?}",
                idx.order,
                phi.shape()
            )));
        }
        let rows = Arc::new(edge_row_indices(idx));
        let picked = tape.gather_rows(phi, rows.clone());
        let cube = tape.reshape(&picked, &[idx.len(), blocks, d_prime]);
        per_order.push(tape.permute_modes(&cube, &[2, 3, 1]));
    }
    let refs: Vec<&Tensor> = per_order.iter().collect();
    let data = tape.concat(2, &refs);
    Ok(MultiOrderTensor {
        data,
        joints,
        orders: orders.to_vec(),
        edge_index,
        order_offsets,
    })
}

/// Self-attention over the rows of a matricized tensor. Rows are tokens,
/// columns the token width; the learned square maps mix the token
/// dimension. Scaling is by the square root of the key token width.
/// Returns the output and the post-softmax attention matrix.
pub fn coupled_mode_attention(
    tape: &mut Tape,
    tokens: &Tensor,
    w_q: &Tensor,
    w_k: &Tensor,
    w_v: &Tensor,
) -> (Tensor, Tensor) {
    let width = tokens.shape()[1];
    let q = tape.matmul(w_q, tokens);
    // Scaling the queries scales the logits; the query matrix is the
    // smaller of the two.
    let q = tape.scale(&q, 1.0 / (width as f64).sqrt());
    let k = tape.matmul(w_k, tokens);
    let v = tape.matmul(w_v, tokens);
    let logits = tape.matmul_nt(&q, &k);
    let attn = tape.softmax_rows(&logits);
    let out = tape.matmul(&attn, &v);
    (out, attn)
}

/// Hyper-edge pooling: coupled-mode attention over edge tokens followed by
/// learned per-order aggregation onto joints.
#[derive(Debug, Clone)]
pub struct MpModule {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    /// Per order: `N_m x J` aggregation matrix.
    pub pool: Vec<Tensor>,
}

impl MpModule {
    /// `width` is the token-mode size d'' (either `d' * tau` or `d'`).
    /// Pooling matrices start from the normalized incidence pattern:
    /// column `j` averages the edges containing joint `j`.
    pub fn init(width: usize, joints: usize, orders: &[usize], rng: &mut Rng) -> Self {
        let scale = 1.0 / (width as f64).sqrt();
        let pool = orders
            .iter()
            .map(|&m| {
                let idx = enumerate_hyperedges(joints, m).expect("orders validated");
                let per_joint = binomial(joints - 1, m - 1).max(1) as f64;
                let mut h = vec![0.0; idx.len() * joints];
                for (e, edge) in idx.edges().iter().enumerate() {
                    for &v in edge {
                        h[e * joints + v] = 1.0 / per_joint;
                    }
                }
                Tensor::new(vec![idx.len(), joints], h).expect("sizes agree")
            })
            .collect();
        MpModule {
            w_q: Tensor::random_normal(&[width, width], scale, rng),
            w_k: Tensor::random_normal(&[width, width], scale, rng),
            w_v: Tensor::random_normal(&[width, width], scale, rng),
            pool,
        }
    }

    /// `input` is `d'' x N`; returns `(r * d'') x J` plus the attention
    /// matrix over the d'' token rows.
    pub fn forward(
        &self,
        tape: &mut Tape,
        input: &Tensor,
        spans: &[(usize, usize)],
    ) -> (Tensor, Tensor) {
        let (reweighted, attn) = coupled_mode_attention(tape, input, &self.w_q, &self.w_k, &self.w_v);
        let mut pooled = Vec::with_capacity(spans.len());
        for (k, &(offset, len)) in spans.iter().enumerate() {
            let span = tape.slice_mode(&reweighted, 2, offset, len);
            pooled.push(tape.matmul(&span, &self.pool[k]));
        }
        let refs: Vec<&Tensor> = pooled.iter().collect();
        (tape.concat(1, &refs), attn)
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        [&self.w_q, &self.w_k, &self.w_v].into_iter().chain(self.pool.iter())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        [&mut self.w_q, &mut self.w_k, &mut self.w_v]
            .into_iter()
            .chain(self.pool.iter_mut())
    }
}

/// Temporal-block pooling attention over the `tau` block tokens.
#[derive(Debug, Clone)]
pub struct TpModule {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
}

impl TpModule {
    pub fn init(width: usize, rng: &mut Rng) -> Self {
        let scale = 1.0 / (width as f64).sqrt();
        TpModule {
            w_q: Tensor::random_normal(&[width, width], scale, rng),
            w_k: Tensor::random_normal(&[width, width], scale, rng),
            w_v: Tensor::random_normal(&[width, width], scale, rng),
        }
    }

    /// `input` is `d''' x tau`; returns the same shape plus the attention
    /// matrix over the d''' token rows.
    pub fn forward(&self, tape: &mut Tape, input: &Tensor) -> (Tensor, Tensor) {
        coupled_mode_attention(tape, input, &self.w_q, &self.w_k, &self.w_v)
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        [&self.w_q, &self.w_k, &self.w_v].into_iter()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        [&mut self.w_q, &mut self.w_k, &mut self.w_v].into_iter()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Baseline,
    TpOnly,
    MpOnly,
    MpTp,
    TpMp,
    TwoBranch,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Variant> {
        Ok(match s {
            "baseline" => Variant::Baseline,
            "tp_only" => Variant::TpOnly,
            "mp_only" => Variant::MpOnly,
            "mp_tp" => Variant::MpTp,
            "tp_mp" => Variant::TpMp,
            "two_branch" => Variant::TwoBranch,
            other => {
                return Err(Error::InvalidArgument(format!("unknown variant '{other}'")))
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::TpOnly => "tp_only",
            Variant::MpOnly => "mp_only",
            Variant::MpTp => "mp_tp",
            Variant::TpMp => "tp_mp",
            Variant::TwoBranch => "two_branch",
        }
    }

    pub fn all() -> [Variant; 6] {
        [
            Variant::Baseline,
            Variant::TpOnly,
            Variant::MpOnly,
            Variant::MpTp,
            Variant::TpMp,
            Variant::TwoBranch,
        ]
    }
}

/// Post-softmax attention matrices captured during a forward pass, keyed
/// by the token composition of the module that produced them.
#[derive(Debug, Default, Clone)]
pub struct AttnCapture {
    /// Hyper-edge pooling over `d' * tau` tokens.
    pub channel_block: Option<Tensor>,
    /// Temporal pooling over `r * d' * J` tokens.
    pub order_channel_joint: Option<Tensor>,
    /// Temporal pooling over `d' * N` tokens.
    pub channel_edge: Option<Tensor>,
    /// Hyper-edge pooling over `d'` tokens.
    pub channel_only: Option<Tensor>,
}

impl AttnCapture {
    pub fn get(&self, token: &str) -> Option<&Tensor> {
        match token {
            "channel_block" => self.channel_block.as_ref(),
            "order_channel_joint" => self.order_channel_joint.as_ref(),
            "channel_edge" => self.channel_edge.as_ref(),
            "channel_only" => self.channel_only.as_ref(),
            _ => None,
        }
    }
}

/// Everything needed to build a model; training fills it from data plus
/// configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub joints: usize,
    pub coords: usize,
    pub num_classes: usize,
    pub orders: Vec<usize>,
    pub block_len: usize,
    pub stride: usize,
    /// Temporal blocks per sequence; fixed per dataset (the attention
    /// weights over block tokens are sized by it).
    pub tau: usize,
    pub d: usize,
    pub d_prime: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub d_head: usize,
    pub d_k: usize,
    pub depth: usize,
    pub variant: Variant,
    pub pool: PoolMethod,
}

impl ModelConfig {
    pub fn edge_total(&self) -> usize {
        self.orders.iter().map(|&m| binomial(self.joints, m)).sum()
    }

    /// Width of each pooling branch output: `r * d' * J` over the included
    /// orders.
    pub fn branch_width(&self) -> usize {
        self.orders.len() * self.d_prime * self.joints
    }
}

/// The full classifier: per-joint MLP, per-order encoder branches, the
/// pooling modules of the selected variant, and an affine head.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub mlp: MlpUnit,
    pub branches: Vec<HotBranch>,
    /// Hyper-edge pooling over `d' * tau` tokens (first module of the
    /// MP-then-TP branch).
    pub mp_a: Option<MpModule>,
    /// Temporal pooling over `r * d' * J` tokens (second module of the
    /// MP-then-TP branch).
    pub tp_a: Option<TpModule>,
    pub pool_a: Option<PoolParams>,
    /// Temporal pooling over `d' * N` tokens (first module of the
    /// TP-then-MP branch).
    pub tp_b: Option<TpModule>,
    pub pool_b: Option<PoolParams>,
    /// Hyper-edge pooling over `d'` tokens (second module of the
    /// TP-then-MP branch).
    pub mp_b: Option<MpModule>,
    /// Affine `d' * N -> r * d' * J` used when temporal pooling runs alone.
    pub tp_fc: Option<(Tensor, Tensor)>,
    /// Standardization of the pooled feature vector ahead of the head.
    pub head_norm_gain: Tensor,
    pub head_norm_bias: Tensor,
    pub classifier_w: Tensor,
    pub classifier_b: Tensor,
}

impl Model {
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Model> {
        if config.orders.is_empty() {
            return Err(Error::InvalidArgument("no hyper-edge orders selected".into()));
        }
        let mut sorted = config.orders.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted != config.orders {
            return Err(Error::InvalidArgument(
                "orders must be strictly increasing and unique".into(),
            ));
        }
        let max_order = *config.orders.last().unwrap();
        if max_order > config.joints {
            return Err(Error::InvalidArgument(format!(
                "order {max_order} exceeds {} joints",
                config.joints
            )));
        }
        let j = config.joints;
        // Exact coefficients are the oracle at small J; kernel attention is
        // the default once an order-m input makes them infeasible.
        let mode_for = |m_in: usize, _n: usize| {
            if m_in >= 2 && j > 8 {
                AttentionMode::Performer { d_k: config.d_k }
            } else {
                AttentionMode::Exact
            }
        };
        let mlp = MlpUnit::init(config.coords, config.block_len, config.d, rng);
        let mut branches = Vec::with_capacity(config.orders.len());
        for &m in &config.orders {
            branches.push(HotBranch::init(
                m,
                config.depth,
                config.d,
                config.d_prime,
                config.d_ff,
                config.heads,
                config.d_head,
                mode_for,
                j,
                rng,
            )?);
        }
        let n_edges = config.edge_total();
        let branch_width = config.branch_width();
        let (d2a, d3a) = (config.d_prime * config.tau, branch_width);
        let d3b = config.d_prime * n_edges;

        let needs_a = matches!(config.variant, Variant::MpTp | Variant::TwoBranch | Variant::MpOnly);
        let needs_b = matches!(config.variant, Variant::TpMp | Variant::TwoBranch | Variant::TpOnly);

        let mp_a = needs_a.then(|| MpModule::init(d2a, j, &config.orders, rng));
        let tp_a = matches!(config.variant, Variant::MpTp | Variant::TwoBranch)
            .then(|| TpModule::init(d3a, rng));
        let pool_a = matches!(config.variant, Variant::MpTp | Variant::TwoBranch)
            .then(|| PoolParams::init(config.pool, d3a, rng));
        let tp_b = needs_b.then(|| TpModule::init(d3b, rng));
        let pool_b = needs_b.then(|| PoolParams::init(config.pool, d3b, rng));
        let mp_b = matches!(config.variant, Variant::TpMp | Variant::TwoBranch)
            .then(|| MpModule::init(config.d_prime, j, &config.orders, rng));
        let tp_fc = matches!(config.variant, Variant::TpOnly).then(|| {
            let scale = 1.0 / (d3b as f64).sqrt();
            (
                Tensor::random_normal(&[d3b, branch_width], scale, rng),
                Tensor::zeros(&[branch_width]),
            )
        });

        let classifier_in = match config.variant {
            Variant::Baseline => config.orders.len() * config.d_prime,
            Variant::TwoBranch => 2 * branch_width,
            _ => branch_width,
        };
        let scale = 1.0 / (classifier_in as f64).sqrt();
        let classifier_w = Tensor::random_normal(&[classifier_in, config.num_classes], scale, rng);
        let classifier_b = Tensor::zeros(&[config.num_classes]);
        Ok(Model {
            config,
            mlp,
            branches,
            mp_a,
            tp_a,
            pool_a,
            tp_b,
            pool_b,
            mp_b,
            tp_fc,
            head_norm_gain: Tensor::full(&[classifier_in], 1.0),
            head_norm_bias: Tensor::zeros(&[classifier_in]),
            classifier_w,
            classifier_b,
        })
    }

    /// Clone the model with every parameter registered on the tape, so a
    /// forward pass through the clone is differentiable.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Model {
        let mut bound = self.clone();
        bound.visit_params_mut(&mut |_name, t| {
            *t = tape.leaf(t, trainable);
        });
        bound
    }

    /// Encode one sequence into the multi-order tensor. Subjects are
    /// normalized and encoded separately and averaged afterwards; all
    /// temporal blocks of one subject ride through the encoder together as
    /// stacked channels.
    pub fn encode(
        &self,
        tape: &mut Tape,
        seq: &SkeletonSequence,
        mut dropout: Option<(&mut Rng, f64)>,
    ) -> Result<MultiOrderTensor> {
        let cfg = &self.config;
        if seq.joint_count() != cfg.joints || seq.coord_count() != cfg.coords {
            return Err(Error::ShapeMismatch(format!(
                "sequence has J={} C={}, model wants J={} C={}",
                seq.joint_count(),
                seq.coord_count(),
                cfg.joints,
                cfg.coords
            )));
        }
        let tau = block_count(seq.frames(), cfg.block_len, cfg.stride);
        if tau != cfg.tau {
            return Err(Error::ShapeMismatch(format!(
                "sequence yields {tau} temporal blocks, model is sized for {}",
                cfg.tau
            )));
        }
        let normalized = normalize(seq)?;
        // features[k]: order orders[k] encoding, J^m x (tau * d'), averaged
        // over subjects.
        let mut features: Vec<Tensor> = Vec::new();
        let subject_scale = 1.0 / normalized.subject_count() as f64;
        for (s, skel) in normalized.subjects().enumerate() {
            let blocked = split_blocks(skel, cfg.block_len, cfg.stride)?;
            // Stack blocks as batch rows for the per-joint embedding.
            let block_refs: Vec<&Tensor> = blocked.blocks.iter().collect();
            let stacked = tape.concat(1, &block_refs);
            let mask = match &mut dropout {
                Some((rng, rate)) if *rate > 0.0 => Some(dropout_mask(
                    &[cfg.tau * cfg.joints, 9 * cfg.block_len],
                    *rate,
                    rng,
                )),
                _ => None,
            };
            let embedded = self.mlp.forward(tape, &stacked, mask.as_ref());
            // Rearrange (tau * J) x d rows into J x (tau * d) channels.
            let cube = tape.reshape(&embedded, &[cfg.tau, cfg.joints, cfg.d]);
            let swapped = tape.permute_modes(&cube, &[2, 1, 3]);
            let per_joint = tape.reshape(&swapped, &[cfg.joints, cfg.tau * cfg.d]);
            for (k, branch) in self.branches.iter().enumerate() {
                let phi = branch.forward_batched(tape, &per_joint, cfg.joints, cfg.tau);
                let phi = tape.scale(&phi, subject_scale);
                if s == 0 {
                    features.push(phi);
                } else {
                    features[k] = tape.add(&features[k], &phi);
                }
            }
        }
        assemble_multi_order(tape, &features, &cfg.orders, cfg.joints, cfg.tau)
    }

    /// Matricize `d' x N x tau` into edge tokens: `(d' * tau) x N`.
    fn edge_tokens(&self, tape: &mut Tape, m: &MultiOrderTensor) -> Tensor {
        let unfolded = tape.matricize(&m.data, 2);
        tape.permute_modes(&unfolded, &[2, 1])
    }

    /// Matricize `d' x N x tau` into block tokens: `(d' * N) x tau`.
    fn block_tokens(&self, tape: &mut Tape, m: &MultiOrderTensor) -> Tensor {
        let unfolded = tape.matricize(&m.data, 3);
        tape.permute_modes(&unfolded, &[2, 1])
    }

    /// Restack hyper-edge pooling output `(r * d' * tau) x J` into temporal
    /// tokens `(r * d' * J) x tau` by peeling the block factor out of the
    /// token rows.
    fn restack_edge_pooled(&self, tape: &mut Tape, pooled: &Tensor) -> Tensor {
        let cfg = &self.config;
        let r = cfg.orders.len();
        let cube = tape.reshape(pooled, &[r, cfg.d_prime, cfg.tau, cfg.joints]);
        let swapped = tape.permute_modes(&cube, &[1, 2, 4, 3]);
        tape.reshape(&swapped, &[r * cfg.d_prime * cfg.joints, cfg.tau])
    }

    fn spans(&self, m: &MultiOrderTensor) -> Vec<(usize, usize)> {
        (0..m.orders.len()).map(|k| m.span(k)).collect()
    }

    /// Full forward pass to class logits.
    pub fn forward(
        &self,
        tape: &mut Tape,
        seq: &SkeletonSequence,
        dropout: Option<(&mut Rng, f64)>,
        mut capture: Option<&mut AttnCapture>,
    ) -> Result<Tensor> {
        let m = self.encode(tape, seq, dropout)?;
        let spans = self.spans(&m);
        let cfg = &self.config;
        let features = match cfg.variant {
            Variant::Baseline => {
                // Per-order mean over edges and blocks of the multi-order
                // tensor, keeping orders distinct.
                let mut per_order = Vec::with_capacity(spans.len());
                for &(offset, len) in &spans {
                    let span = tape.slice_mode(&m.data, 2, offset, len);
                    let over_edges = tape.reduce(&span, 2, Reduction::Mean);
                    per_order.push(tape.reduce(&over_edges, 2, Reduction::Mean));
                }
                let refs: Vec<&Tensor> = per_order.iter().collect();
                tape.concat(1, &refs)
            }
            Variant::MpOnly => {
                let tokens = self.edge_tokens(tape, &m);
                let (pooled, attn) = self.mp_a.as_ref().unwrap().forward(tape, &tokens, &spans);
                if let Some(cap) = capture.as_deref_mut() {
                    cap.channel_block = Some(attn);
                }
                let temporal = self.restack_edge_pooled(tape, &pooled);
                tape.reduce(&temporal, 2, Reduction::Mean)
            }
            Variant::TpOnly => {
                let tokens = self.block_tokens(tape, &m);
                let (reweighted, attn) = self.tp_b.as_ref().unwrap().forward(tape, &tokens);
                if let Some(cap) = capture.as_deref_mut() {
                    cap.channel_edge = Some(attn);
                }
                let pooled =
                    temporal_pool(tape, &reweighted, cfg.pool, self.pool_b.as_ref().unwrap());
                let (w, b) = self.tp_fc.as_ref().unwrap();
                let row = tape.reshape(&pooled, &[1, pooled.len()]);
                let fc = tape.affine(&row, w, b);
                tape.reshape(&fc, &[cfg.branch_width()])
            }
            Variant::MpTp => self.branch_mp_tp(tape, &m, &spans, capture.as_deref_mut()),
            Variant::TpMp => self.branch_tp_mp(tape, &m, &spans, capture.as_deref_mut()),
            Variant::TwoBranch => {
                let a = self.branch_mp_tp(tape, &m, &spans, capture.as_deref_mut());
                let b = self.branch_tp_mp(tape, &m, &spans, capture.as_deref_mut());
                tape.concat(1, &[&a, &b])
            }
        };
        let normed = tape.chunk_norm(
            &features,
            &self.head_norm_gain,
            &self.head_norm_bias,
            features.len(),
        );
        let row = tape.reshape(&normed, &[1, features.len()]);
        let logits = tape.affine(&row, &self.classifier_w, &self.classifier_b);
        Ok(tape.reshape(&logits, &[cfg.num_classes]))
    }

    /// Hyper-edge pooling first, then temporal pooling; emits `r * d' * J`.
    fn branch_mp_tp(
        &self,
        tape: &mut Tape,
        m: &MultiOrderTensor,
        spans: &[(usize, usize)],
        mut capture: Option<&mut AttnCapture>,
    ) -> Tensor {
        let tokens = self.edge_tokens(tape, m);
        let (pooled, attn_mp) = self.mp_a.as_ref().unwrap().forward(tape, &tokens, spans);
        let temporal = self.restack_edge_pooled(tape, &pooled);
        let (reweighted, attn_tp) = self.tp_a.as_ref().unwrap().forward(tape, &temporal);
        if let Some(cap) = capture.as_deref_mut() {
            cap.channel_block = Some(attn_mp);
            cap.order_channel_joint = Some(attn_tp);
        }
        temporal_pool(tape, &reweighted, self.config.pool, self.pool_a.as_ref().unwrap())
    }

    /// Temporal pooling first, then hyper-edge pooling; emits `r * d' * J`.
    fn branch_tp_mp(
        &self,
        tape: &mut Tape,
        m: &MultiOrderTensor,
        spans: &[(usize, usize)],
        mut capture: Option<&mut AttnCapture>,
    ) -> Tensor {
        let cfg = &self.config;
        let tokens = self.block_tokens(tape, m);
        let (reweighted, attn_tp) = self.tp_b.as_ref().unwrap().forward(tape, &tokens);
        let pooled = temporal_pool(tape, &reweighted, cfg.pool, self.pool_b.as_ref().unwrap());
        let channel_only = tape.reshape(&pooled, &[cfg.d_prime, m.edge_count()]);
        let (joint_pooled, attn_mp) =
            self.mp_b.as_ref().unwrap().forward(tape, &channel_only, spans);
        if let Some(cap) = capture.as_deref_mut() {
            cap.channel_edge = Some(attn_tp);
            cap.channel_only = Some(attn_mp);
        }
        tape.reshape(&joint_pooled, &[cfg.branch_width()])
    }

    /// Visit every learnable tensor with a stable name, in a fixed order.
    pub fn visit_params(&self, f: &mut impl FnMut(String, &Tensor)) {
        let mut clone_guard = self.clone();
        clone_guard.visit_params_mut(&mut |name, t| f(name, t));
        // visit_params_mut on the clone leaves tensors untouched; the clone
        // only exists to share one traversal definition.
    }

    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor)) {
        visit_mlp(&mut self.mlp, f);
        for (k, branch) in self.branches.iter_mut().enumerate() {
            let order = branch.order;
            for (l, layer) in branch.layers.iter_mut().enumerate() {
                let base = format!("branch{order}.layer{l}");
                let attn = &mut layer.attention;
                for (i, q) in attn.query_layers.iter_mut().enumerate() {
                    visit_equivariant(q, &format!("{base}.q{i}"), f);
                }
                for (i, k1) in attn.key_layers.iter_mut().enumerate() {
                    visit_equivariant(k1, &format!("{base}.k{i}"), f);
                }
                for (i, w) in attn.w_value.iter_mut().enumerate() {
                    f(format!("{base}.wv{i}"), w);
                }
                for (i, w) in attn.w_output.iter_mut().enumerate() {
                    f(format!("{base}.wo{i}"), w);
                }
                visit_equivariant(&mut layer.ff1, &format!("{base}.ff1"), f);
                visit_equivariant(&mut layer.ff2, &format!("{base}.ff2"), f);
                f(format!("{base}.norm_g"), &mut layer.norm_gain);
                f(format!("{base}.norm_b"), &mut layer.norm_bias);
            }
            let _ = k;
        }
        for (tag, module) in [("mp_a", &mut self.mp_a), ("mp_b", &mut self.mp_b)] {
            if let Some(mp) = module {
                f(format!("{tag}.wq"), &mut mp.w_q);
                f(format!("{tag}.wk"), &mut mp.w_k);
                f(format!("{tag}.wv"), &mut mp.w_v);
                for (i, h) in mp.pool.iter_mut().enumerate() {
                    f(format!("{tag}.pool{i}"), h);
                }
            }
        }
        for (tag, module) in [("tp_a", &mut self.tp_a), ("tp_b", &mut self.tp_b)] {
            if let Some(tp) = module {
                f(format!("{tag}.wq"), &mut tp.w_q);
                f(format!("{tag}.wk"), &mut tp.w_k);
                f(format!("{tag}.wv"), &mut tp.w_v);
            }
        }
        for (tag, pool) in [("pool_a", &mut self.pool_a), ("pool_b", &mut self.pool_b)] {
            if let Some(p) = pool {
                if let Some(w) = p.attn_score.as_mut() {
                    f(format!("{tag}.attn_score"), w);
                }
                if let Some(u) = p.tri_mix.as_mut() {
                    f(format!("{tag}.tri_mix"), u);
                }
                if let Some(v) = p.tri_score.as_mut() {
                    f(format!("{tag}.tri_score"), v);
                }
            }
        }
        if let Some((w, b)) = self.tp_fc.as_mut() {
            f("tp_fc.w".into(), w);
            f("tp_fc.b".into(), b);
        }
        f("head_norm.g".into(), &mut self.head_norm_gain);
        f("head_norm.b".into(), &mut self.head_norm_bias);
        f("classifier.w".into(), &mut self.classifier_w);
        f("classifier.b".into(), &mut self.classifier_b);
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t| n += t.len());
        n
    }
}

fn visit_mlp(mlp: &mut MlpUnit, f: &mut impl FnMut(String, &mut Tensor)) {
    f("mlp.w1".into(), &mut mlp.w1);
    f("mlp.b1".into(), &mut mlp.b1);
    f("mlp.w2".into(), &mut mlp.w2);
    f("mlp.b2".into(), &mut mlp.b2);
    f("mlp.w3".into(), &mut mlp.w3);
    f("mlp.b3".into(), &mut mlp.b3);
}

fn visit_equivariant(
    layer: &mut crate::hot::EquivariantLinear,
    prefix: &str,
    f: &mut impl FnMut(String, &mut Tensor),
) {
    for (i, c) in layer.coeffs.iter_mut().enumerate() {
        f(format!("{prefix}.c{i}"), c);
    }
    for (i, b) in layer.biases.iter_mut().enumerate() {
        f(format!("{prefix}.b{i}"), b);
    }
}

/// Inverted-dropout mask with keep scaling, drawn from the given stream.
pub fn dropout_mask(shape: &[usize], rate: f64, rng: &mut Rng) -> Tensor {
    assert!((0.0..1.0).contains(&rate), "dropout rate in [0, 1)");
    let keep = 1.0 - rate;
    Tensor::from_fn(shape, |_| {
        if rng.uniform() < keep {
            1.0 / keep
        } else {
            0.0
        }
    })
}
