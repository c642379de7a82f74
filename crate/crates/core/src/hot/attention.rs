//! Higher-order self-attention between hyper-edge tensors.
//!
//! Attention from an order-`m` input to an order-`n` output decomposes over
//! equivalence classes of the combined `(m + n)`-index space, one per set
//! partition of the index positions. A pair `(i, j)` belongs to a class
//! when the combined tuple is constant within each of the partition's
//! blocks, so the finest partition covers every pair and coarser ones
//! restrict attention to diagonal slices. Per head and class, queries come
//! from an equivariant `m -> n` layer and keys from an `m -> m` layer;
//! coefficients are `exp(q . k)` normalized over the class support of each
//! output index, and zero off support.
//!
//! Exact mode materializes coefficients class by class and is the test
//! oracle at small `J`; performer mode replaces `exp(q . k)` with a product
//! of positive random features and computes the same normalized sums from
//! bucketed feature accumulators without ever forming the coefficients.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::tape::{softmax_into, Src, Tape, TapeOp};
use crate::tensor::Tensor;

use super::equivariant::{for_each_pair, for_each_triple, EquivariantLinear};
use super::partitions::{enumerate_partitions, SetPartition};
use super::performer::{
    dot, draw_projection, performer_backward, performer_features_into,
};

/// Attention shapes the pipeline uses; the class machinery is generated,
/// but anything outside this set is rejected up front.
pub const SUPPORTED_SHAPES: [(usize, usize); 5] = [(1, 1), (1, 2), (1, 3), (2, 2), (3, 3)];

/// Largest `J^(m+n)` the exact path will materialize per class.
const EXACT_LIMIT: usize = 1 << 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMode {
    Exact,
    Performer { d_k: usize },
}

/// Index bookkeeping for one attention class at fixed `J`, flattened to
/// plain index lists.
#[derive(Debug)]
pub struct AttnClassPlan {
    /// Per valid output tuple: (output row, bucket key, input row base).
    outputs: Vec<(u32, u32, u32)>,
    /// Input-row offsets of the free support relative to the base.
    free: Vec<u32>,
    /// Every valid input tuple with its bucket key.
    inputs: Vec<(u32, u32)>,
    bucket: usize,
}

fn build_attn_plan(class: &SetPartition, m: usize, n: usize, j: usize) -> AttnClassPlan {
    let blocks = class.blocks();
    let in_stride = |pos: usize| j.pow((m - 1 - pos) as u32);
    let out_stride = |pos: usize| j.pow((n - 1 - pos) as u32);

    let mut mixed_ids = Vec::new();
    for (b, members) in blocks.iter().enumerate() {
        let has_in = members.iter().any(|&e| e < m);
        let has_out = members.iter().any(|&e| e >= m);
        if has_in && has_out {
            mixed_ids.push(b);
        }
    }
    let bucket_weight: HashMap<usize, usize> = mixed_ids
        .iter()
        .enumerate()
        .map(|(idx, &b)| (b, j.pow((mixed_ids.len() - 1 - idx) as u32)))
        .collect();

    let mut out_w = Vec::new();
    let mut out_bw = Vec::new();
    let mut out_iw = Vec::new();
    let mut free_w = Vec::new();
    let mut in_all_w = Vec::new();
    let mut in_all_bw = Vec::new();
    for (b, members) in blocks.iter().enumerate() {
        let iw: usize = members.iter().filter(|&&e| e < m).map(|&e| in_stride(e)).sum();
        let ow: usize = members
            .iter()
            .filter(|&&e| e >= m)
            .map(|&e| out_stride(e - m))
            .sum();
        let has_in = members.iter().any(|&e| e < m);
        let has_out = members.iter().any(|&e| e >= m);
        let bw = bucket_weight.get(&b).copied().unwrap_or(0);
        if has_out {
            out_w.push(ow);
            out_bw.push(bw);
            out_iw.push(iw);
        }
        if has_in {
            in_all_w.push(iw);
            in_all_bw.push(bw);
            if !has_out {
                free_w.push(iw);
            }
        }
    }
    let mut outputs = Vec::new();
    for_each_triple(j, &out_w, &out_bw, &out_iw, |oi, bk, ib| {
        outputs.push((oi as u32, bk as u32, ib as u32));
    });
    let mut free = Vec::new();
    for_each_pair(j, &free_w, &free_w, |fi, _| free.push(fi as u32));
    let mut inputs = Vec::new();
    for_each_pair(j, &in_all_w, &in_all_bw, |ii, bk| {
        inputs.push((ii as u32, bk as u32));
    });
    AttnClassPlan {
        outputs,
        free,
        inputs,
        bucket: j.pow(mixed_ids.len() as u32),
    }
}

type PlanKey = (usize, usize, usize, Vec<u8>);

fn attn_plan_cache() -> &'static Mutex<HashMap<PlanKey, Arc<AttnClassPlan>>> {
    static CACHE: OnceLock<Mutex<HashMap<PlanKey, Arc<AttnClassPlan>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

fn attn_plan_for(class: &SetPartition, m: usize, n: usize, j: usize) -> Arc<AttnClassPlan> {
    let key = (m, n, j, class.rgs().to_vec());
    let mut cache = attn_plan_cache().lock().expect("attention plan cache");
    cache
        .entry(key)
        .or_insert_with(|| Arc::new(build_attn_plan(class, m, n, j)))
        .clone()
}

// ── Class-set attention over fused head/class slices ───────────────────
//
// Queries, keys, and values for every (head, class) pair ride in one
// tensor, `batch`-major then slice-major chunks of `d_head` along the
// channel axis. One op walks all slices so the per-index bookkeeping is
// paid once, not per class.

struct MultiSliceExact {
    /// Per class (slices cycle through these head-major).
    plans: Vec<Arc<AttnClassPlan>>,
    d_head: usize,
    batch: usize,
    slices: usize,
}

impl TapeOp for MultiSliceExact {
    fn name(&self) -> &'static str {
        "class_attention_exact"
    }

    fn forward(&self, inputs: &[Src]) -> (Vec<usize>, Vec<f64>, Vec<Arc<Vec<f64>>>) {
        let (dh, batch, slices) = (self.d_head, self.batch, self.slices);
        let w = batch * slices * dh;
        let (q, k, v) = (&inputs[0].data, &inputs[1].data, &inputs[2].data);
        let rows_out = inputs[0].shape[0];
        let mut out = vec![0.0; rows_out * w];
        let mut logits: Vec<f64> = Vec::new();
        let mut alpha: Vec<f64> = Vec::new();
        for s_idx in 0..slices {
            let plan = &self.plans[s_idx % self.plans.len()];
            let sup = plan.free.len();
            if sup == 1 {
                let fo = plan.free[0];
                for &(oi, _, ib) in &plan.outputs {
                    let (o, src) = (oi as usize, (ib + fo) as usize);
                    for b in 0..batch {
                        let col = (b * slices + s_idx) * dh;
                        out[o * w + col..o * w + col + dh]
                            .copy_from_slice(&v[src * w + col..src * w + col + dh]);
                    }
                }
                continue;
            }
            logits.resize(batch * sup, 0.0);
            alpha.resize(sup, 0.0);
            for &(oi, _, ib) in &plan.outputs {
                let o = oi as usize;
                for (pos, &fo) in plan.free.iter().enumerate() {
                    let src = (ib + fo) as usize;
                    for b in 0..batch {
                        let col = (b * slices + s_idx) * dh;
                        let mut dot = 0.0;
                        for c in 0..dh {
                            dot += q[o * w + col + c] * k[src * w + col + c];
                        }
                        logits[b * sup + pos] = dot;
                    }
                }
                for b in 0..batch {
                    let col = (b * slices + s_idx) * dh;
                    softmax_into(&logits[b * sup..(b + 1) * sup], &mut alpha);
                    let orow = &mut out[o * w + col..o * w + col + dh];
                    for (pos, &fo) in plan.free.iter().enumerate() {
                        let a = alpha[pos];
                        let src = (ib + fo) as usize;
                        let vrow = &v[src * w + col..src * w + col + dh];
                        for (ov, &vv) in orow.iter_mut().zip(vrow) {
                            *ov += a * vv;
                        }
                    }
                }
            }
        }
        (vec![rows_out, w], out, Vec::new())
    }

    fn backward(
        &self,
        inputs: &[Src],
        _saved: &[Arc<Vec<f64>>],
        _out_shape: &[usize],
        grad_out: &[f64],
    ) -> Vec<Option<Vec<f64>>> {
        let (dh, batch, slices) = (self.d_head, self.batch, self.slices);
        let w = batch * slices * dh;
        let (q, k, v) = (&inputs[0].data, &inputs[1].data, &inputs[2].data);
        let mut gq = vec![0.0; q.len()];
        let mut gk = vec![0.0; k.len()];
        let mut gv = vec![0.0; v.len()];
        let mut logits: Vec<f64> = Vec::new();
        let mut alpha: Vec<f64> = Vec::new();
        let mut dalpha: Vec<f64> = Vec::new();
        for s_idx in 0..slices {
            let plan = &self.plans[s_idx % self.plans.len()];
            let sup = plan.free.len();
            if sup == 1 {
                let fo = plan.free[0];
                for &(oi, _, ib) in &plan.outputs {
                    let (o, src) = (oi as usize, (ib + fo) as usize);
                    for b in 0..batch {
                        let col = (b * slices + s_idx) * dh;
                        let g = &grad_out[o * w + col..o * w + col + dh];
                        for (dst, &gg) in gv[src * w + col..src * w + col + dh]
                            .iter_mut()
                            .zip(g)
                        {
                            *dst += gg;
                        }
                    }
                }
                continue;
            }
            logits.resize(batch * sup, 0.0);
            alpha.resize(sup, 0.0);
            dalpha.resize(sup, 0.0);
            for &(oi, _, ib) in &plan.outputs {
                let o = oi as usize;
                for (pos, &fo) in plan.free.iter().enumerate() {
                    let src = (ib + fo) as usize;
                    for b in 0..batch {
                        let col = (b * slices + s_idx) * dh;
                        let mut dot = 0.0;
                        for c in 0..dh {
                            dot += q[o * w + col + c] * k[src * w + col + c];
                        }
                        logits[b * sup + pos] = dot;
                    }
                }
                for b in 0..batch {
                    let col = (b * slices + s_idx) * dh;
                    softmax_into(&logits[b * sup..(b + 1) * sup], &mut alpha);
                    let gb = &grad_out[o * w + col..o * w + col + dh];
                    let qb = &q[o * w + col..o * w + col + dh];
                    let mut mix = 0.0;
                    for (pos, &fo) in plan.free.iter().enumerate() {
                        let src = (ib + fo) as usize;
                        let vb = &v[src * w + col..src * w + col + dh];
                        let da: f64 = vb.iter().zip(gb).map(|(x, y)| x * y).sum();
                        dalpha[pos] = da;
                        mix += alpha[pos] * da;
                    }
                    for (pos, &fo) in plan.free.iter().enumerate() {
                        let src = (ib + fo) as usize;
                        let a = alpha[pos];
                        let dl = a * (dalpha[pos] - mix);
                        let kb = &k[src * w + col..src * w + col + dh];
                        for (g, &kv) in gq[o * w + col..o * w + col + dh].iter_mut().zip(kb) {
                            *g += dl * kv;
                        }
                        for (g, &qv) in gk[src * w + col..src * w + col + dh].iter_mut().zip(qb) {
                            *g += dl * qv;
                        }
                        for (g, &gg) in gv[src * w + col..src * w + col + dh].iter_mut().zip(gb) {
                            *g += a * gg;
                        }
                    }
                }
            }
        }
        vec![
            inputs[0].id.map(|_| gq),
            inputs[1].id.map(|_| gk),
            inputs[2].id.map(|_| gv),
        ]
    }
}

struct MultiSlicePerformer {
    plans: Vec<Arc<AttnClassPlan>>,
    d_head: usize,
    d_k: usize,
    batch: usize,
    slices: usize,
    omega: Arc<Vec<f64>>,
}

impl MultiSlicePerformer {
    /// Feature sums for one slice: `s1[key][b] = sum psi(k_i) v_i^T` and
    /// `s0[key][b] = sum psi(k_i)`.
    fn buckets(&self, plan: &AttnClassPlan, s_idx: usize, k: &[f64], v: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (dh, dk, batch, slices) = (self.d_head, self.d_k, self.batch, self.slices);
        let w = batch * slices * dh;
        let cell = dk * dh;
        let mut s1 = vec![0.0; plan.bucket * batch * cell];
        let mut s0 = vec![0.0; plan.bucket * batch * dk];
        let mut psi = vec![0.0; dk];
        for &(ii, bk) in &plan.inputs {
            let i = ii as usize;
            for b in 0..batch {
                let col = (b * slices + s_idx) * dh;
                performer_features_into(&k[i * w + col..i * w + col + dh], &self.omega, dk, &mut psi);
                let vrow = &v[i * w + col..i * w + col + dh];
                let slot = bk as usize * batch + b;
                let s1b = &mut s1[slot * cell..(slot + 1) * cell];
                for (l, &p) in psi.iter().enumerate() {
                    let row = &mut s1b[l * dh..(l + 1) * dh];
                    for (o, &vv) in row.iter_mut().zip(vrow) {
                        *o += p * vv;
                    }
                }
                let s0b = &mut s0[slot * dk..(slot + 1) * dk];
                for (o, &p) in s0b.iter_mut().zip(&psi) {
                    *o += p;
                }
            }
        }
        (s1, s0)
    }
}

impl TapeOp for MultiSlicePerformer {
    fn name(&self) -> &'static str {
        "class_attention_performer"
    }

    fn forward(&self, inputs: &[Src]) -> (Vec<usize>, Vec<f64>, Vec<Arc<Vec<f64>>>) {
        let (dh, dk, batch, slices) = (self.d_head, self.d_k, self.batch, self.slices);
        let w = batch * slices * dh;
        let cell = dk * dh;
        let (q, k, v) = (&inputs[0].data, &inputs[1].data, &inputs[2].data);
        let rows_out = inputs[0].shape[0];
        let mut out = vec![0.0; rows_out * w];
        let mut psi = vec![0.0; dk];
        for s_idx in 0..slices {
            let plan = &self.plans[s_idx % self.plans.len()];
            let (s1, s0) = self.buckets(plan, s_idx, k, v);
            for &(oi, bk, _) in &plan.outputs {
                let o = oi as usize;
                for b in 0..batch {
                    let col = (b * slices + s_idx) * dh;
                    performer_features_into(&q[o * w + col..o * w + col + dh], &self.omega, dk, &mut psi);
                    let slot = bk as usize * batch + b;
                    let z = dot(&psi, &s0[slot * dk..(slot + 1) * dk]);
                    let s1b = &s1[slot * cell..(slot + 1) * cell];
                    let orow = &mut out[o * w + col..o * w + col + dh];
                    for (l, &p) in psi.iter().enumerate() {
                        let row = &s1b[l * dh..(l + 1) * dh];
                        for (ov, &sv) in orow.iter_mut().zip(row) {
                            *ov += p * sv;
                        }
                    }
                    let inv = 1.0 / z;
                    for ov in orow.iter_mut() {
                        *ov *= inv;
                    }
                }
            }
        }
        (vec![rows_out, w], out, Vec::new())
    }

    fn backward(
        &self,
        inputs: &[Src],
        _saved: &[Arc<Vec<f64>>],
        _out_shape: &[usize],
        grad_out: &[f64],
    ) -> Vec<Option<Vec<f64>>> {
        let (dh, dk, batch, slices) = (self.d_head, self.d_k, self.batch, self.slices);
        let w = batch * slices * dh;
        let cell = dk * dh;
        let (q, k, v) = (&inputs[0].data, &inputs[1].data, &inputs[2].data);
        let mut gq = vec![0.0; q.len()];
        let mut gk = vec![0.0; k.len()];
        let mut gv = vec![0.0; v.len()];
        let mut psi = vec![0.0; dk];
        let mut gpsi = vec![0.0; dk];
        let mut a = vec![0.0; dh];
        for s_idx in 0..slices {
            let plan = &self.plans[s_idx % self.plans.len()];
            let (s1, s0) = self.buckets(plan, s_idx, k, v);
            let mut gs1 = vec![0.0; s1.len()];
            let mut gs0 = vec![0.0; s0.len()];
            for &(oi, bk, _) in &plan.outputs {
                let o = oi as usize;
                for b in 0..batch {
                    let col = (b * slices + s_idx) * dh;
                    let qrow = &q[o * w + col..o * w + col + dh];
                    performer_features_into(qrow, &self.omega, dk, &mut psi);
                    let slot = bk as usize * batch + b;
                    let s0b = &s0[slot * dk..(slot + 1) * dk];
                    let s1b = &s1[slot * cell..(slot + 1) * cell];
                    let z = dot(&psi, s0b);
                    let inv = 1.0 / z;
                    let grow = &grad_out[o * w + col..o * w + col + dh];
                    a.iter_mut().for_each(|x| *x = 0.0);
                    for (l, &p) in psi.iter().enumerate() {
                        let row = &s1b[l * dh..(l + 1) * dh];
                        for (av, &sv) in a.iter_mut().zip(row) {
                            *av += p * sv;
                        }
                    }
                    let out_dot_g = dot(&a, grow) * inv;
                    let dz = -out_dot_g * inv;
                    for (l, gp) in gpsi.iter_mut().enumerate() {
                        let row = &s1b[l * dh..(l + 1) * dh];
                        *gp = dot(row, grow) * inv + dz * s0b[l];
                    }
                    performer_backward(qrow, &psi, &gpsi, &self.omega, &mut gq[o * w + col..o * w + col + dh]);
                    let gs1b = &mut gs1[slot * cell..(slot + 1) * cell];
                    for (l, &p) in psi.iter().enumerate() {
                        let row = &mut gs1b[l * dh..(l + 1) * dh];
                        let pw = p * inv;
                        for (ov, &gg) in row.iter_mut().zip(grow) {
                            *ov += pw * gg;
                        }
                    }
                    let gs0b = &mut gs0[slot * dk..(slot + 1) * dk];
                    for (ov, &p) in gs0b.iter_mut().zip(&psi) {
                        *ov += dz * p;
                    }
                }
            }
            for &(ii, bk) in &plan.inputs {
                let i = ii as usize;
                for b in 0..batch {
                    let col = (b * slices + s_idx) * dh;
                    let krow = &k[i * w + col..i * w + col + dh];
                    performer_features_into(krow, &self.omega, dk, &mut psi);
                    let vrow = &v[i * w + col..i * w + col + dh];
                    let slot = bk as usize * batch + b;
                    let gs1b = &gs1[slot * cell..(slot + 1) * cell];
                    let gs0b = &gs0[slot * dk..(slot + 1) * dk];
                    for (l, gp) in gpsi.iter_mut().enumerate() {
                        let row = &gs1b[l * dh..(l + 1) * dh];
                        *gp = dot(row, vrow) + gs0b[l];
                    }
                    performer_backward(krow, &psi, &gpsi, &self.omega, &mut gk[i * w + col..i * w + col + dh]);
                    let gvrow = &mut gv[i * w + col..i * w + col + dh];
                    for (l, &p) in psi.iter().enumerate() {
                        let row = &gs1b[l * dh..(l + 1) * dh];
                        for (g, &sv) in gvrow.iter_mut().zip(row) {
                            *g += p * sv;
                        }
                    }
                }
            }
        }
        vec![
            inputs[0].id.map(|_| gq),
            inputs[1].id.map(|_| gk),
            inputs[2].id.map(|_| gv),
        ]
    }
}

// ── The full multi-head, multi-class attention ──────────────────────────

#[derive(Debug, Clone)]
pub struct HigherOrderAttention {
    pub input_order: usize,
    pub output_order: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub heads: usize,
    pub d_head: usize,
    pub classes: Vec<SetPartition>,
    /// Per (head, class): equivariant `m -> n` query map into head width.
    pub query_layers: Vec<EquivariantLinear>,
    /// Per (head, class): equivariant `m -> m` key map into head width.
    pub key_layers: Vec<EquivariantLinear>,
    /// Per (head, class): `d_in x d_head` value projection.
    pub w_value: Vec<Tensor>,
    /// Per (head, class): `d_head x d_out` output projection.
    pub w_output: Vec<Tensor>,
    pub mode: AttentionMode,
    /// Fixed random projection for performer mode, `d_k x d_head`.
    pub omega: Option<Arc<Vec<f64>>>,
}

impl HigherOrderAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        m: usize,
        n: usize,
        d_in: usize,
        d_out: usize,
        heads: usize,
        d_head: usize,
        mode: AttentionMode,
        j: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if !SUPPORTED_SHAPES.contains(&(m, n)) {
            return Err(Error::InvalidArgument(format!(
                "unsupported attention shape ({m}, {n})"
            )));
        }
        let classes = enumerate_partitions(m + n)?;
        let count = heads * classes.len();
        let mut query_layers = Vec::with_capacity(count);
        let mut key_layers = Vec::with_capacity(count);
        let mut w_value = Vec::with_capacity(count);
        let mut w_output = Vec::with_capacity(count);
        let out_scale = 1.0 / ((d_head * count) as f64).sqrt();
        let val_scale = 1.0 / (d_in as f64).sqrt();
        for _ in 0..count {
            query_layers.push(EquivariantLinear::init(m, n, d_in, d_head, j, rng));
            key_layers.push(EquivariantLinear::init(m, m, d_in, d_head, j, rng));
            w_value.push(Tensor::random_normal(&[d_in, d_head], val_scale, rng));
            w_output.push(Tensor::random_normal(&[d_head, d_out], out_scale, rng));
        }
        let omega = match mode {
            AttentionMode::Performer { d_k } => {
                Some(Arc::new(draw_projection(d_k, d_head, rng)))
            }
            AttentionMode::Exact => None,
        };
        Ok(HigherOrderAttention {
            input_order: m,
            output_order: n,
            d_in,
            d_out,
            heads,
            d_head,
            classes,
            query_layers,
            key_layers,
            w_value,
            w_output,
            mode,
            omega,
        })
    }

    /// Restrict the class set (rebuilding the per-class parameters).
    pub fn with_classes(mut self, classes: Vec<SetPartition>, j: usize, rng: &mut Rng) -> Self {
        let count = self.heads * classes.len();
        let out_scale = 1.0 / ((self.d_head * count) as f64).sqrt();
        let val_scale = 1.0 / (self.d_in as f64).sqrt();
        self.classes = classes;
        self.query_layers = (0..count)
            .map(|_| {
                EquivariantLinear::init(
                    self.input_order,
                    self.output_order,
                    self.d_in,
                    self.d_head,
                    j,
                    rng,
                )
            })
            .collect();
        self.key_layers = (0..count)
            .map(|_| {
                EquivariantLinear::init(
                    self.input_order,
                    self.input_order,
                    self.d_in,
                    self.d_head,
                    j,
                    rng,
                )
            })
            .collect();
        self.w_value = (0..count)
            .map(|_| Tensor::random_normal(&[self.d_in, self.d_head], val_scale, rng))
            .collect();
        self.w_output = (0..count)
            .map(|_| Tensor::random_normal(&[self.d_head, self.d_out], out_scale, rng))
            .collect();
        self
    }

    pub fn set_mode(&mut self, mode: AttentionMode, rng: &mut Rng) {
        self.mode = mode;
        self.omega = match mode {
            AttentionMode::Performer { d_k } => {
                Some(Arc::new(draw_projection(d_k, self.d_head, rng)))
            }
            AttentionMode::Exact => None,
        };
    }

    fn guard_exact(&self, j: usize) {
        let combined = j.pow((self.input_order + self.output_order) as u32);
        assert!(
            combined <= EXACT_LIMIT,
            "exact attention would materialize {combined} coefficients per class; \
             use performer mode at this size"
        );
    }

    /// Apply to `x` of shape `[J^m, d_in]`, producing `[J^n, d_out]`.
    pub fn forward(&self, tape: &mut Tape, x: &Tensor, j: usize) -> Tensor {
        self.forward_batched(tape, x, j, 1)
    }

    /// Apply to a block-stacked input `[J^m, batch * d_in]`, treating each
    /// `d_in`-wide channel slice as an independent instance sharing the
    /// attention parameters. Produces `[J^n, batch * d_out]`.
    ///
    /// All (head, class) pairs run as channel slices of one fused pass:
    /// their query/key basis coefficients concatenate along the output
    /// channels, the value and output projections stack, and a single op
    /// walks every class support.
    pub fn forward_batched(&self, tape: &mut Tape, x: &Tensor, j: usize, batch: usize) -> Tensor {
        let rows_in = j.pow(self.input_order as u32);
        let rows_out = j.pow(self.output_order as u32);
        assert_eq!(x.shape(), &[rows_in, batch * self.d_in], "input shape");
        if matches!(self.mode, AttentionMode::Exact) {
            self.guard_exact(j);
        }
        let slices = self.heads * self.classes.len();
        let dh = self.d_head;

        let fuse_layers = |tape: &mut Tape, layers: &[EquivariantLinear], n: usize| -> Tensor {
            let basis = layers[0].basis_size();
            let mut coeffs = Vec::with_capacity(basis);
            for p in 0..basis {
                let parts: Vec<&Tensor> = layers.iter().map(|l| &l.coeffs[p]).collect();
                coeffs.push(tape.concat(2, &parts));
            }
            let bias_count = layers[0].biases.len();
            let mut biases = Vec::with_capacity(bias_count);
            for p in 0..bias_count {
                let parts: Vec<&Tensor> = layers.iter().map(|l| &l.biases[p]).collect();
                biases.push(tape.concat(1, &parts));
            }
            let coeff_refs: Vec<&Tensor> = coeffs.iter().collect();
            let bias_refs: Vec<&Tensor> = biases.iter().collect();
            super::equivariant::apply_basis_batched(
                tape,
                x,
                self.input_order,
                n,
                j,
                batch,
                self.d_in,
                slices * dh,
                &coeff_refs,
                &bias_refs,
            )
        };
        let q_all = fuse_layers(tape, &self.query_layers, self.output_order);
        let k_all = fuse_layers(tape, &self.key_layers, self.input_order);

        let x_rows = tape.reshape(x, &[rows_in * batch, self.d_in]);
        let wv_refs: Vec<&Tensor> = self.w_value.iter().collect();
        let wv_all = tape.concat(2, &wv_refs);
        let v_rows = tape.matmul(&x_rows, &wv_all);
        let v_all = tape.reshape(&v_rows, &[rows_in, batch * slices * dh]);

        let plans: Vec<Arc<AttnClassPlan>> = self
            .classes
            .iter()
            .map(|c| attn_plan_for(c, self.input_order, self.output_order, j))
            .collect();
        let attended = match self.mode {
            AttentionMode::Exact => tape.custom(
                Arc::new(MultiSliceExact { plans, d_head: dh, batch, slices }),
                &[&q_all, &k_all, &v_all],
            ),
            AttentionMode::Performer { d_k } => tape.custom(
                Arc::new(MultiSlicePerformer {
                    plans,
                    d_head: dh,
                    d_k,
                    batch,
                    slices,
                    omega: self.omega.as_ref().expect("performer projection").clone(),
                }),
                &[&q_all, &k_all, &v_all],
            ),
        };
        let attended_rows = tape.reshape(&attended, &[rows_out * batch, slices * dh]);
        let wo_refs: Vec<&Tensor> = self.w_output.iter().collect();
        let wo_all = tape.concat(1, &wo_refs);
        let out = tape.matmul(&attended_rows, &wo_all);
        tape.reshape(&out, &[rows_out, batch * self.d_out])
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.query_layers
            .iter()
            .flat_map(|l| l.params())
            .chain(self.key_layers.iter().flat_map(|l| l.params()))
            .chain(self.w_value.iter())
            .chain(self.w_output.iter())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.query_layers
            .iter_mut()
            .flat_map(|l| l.params_mut())
            .chain(self.key_layers.iter_mut().flat_map(|l| l.params_mut()))
            .chain(self.w_value.iter_mut())
            .chain(self.w_output.iter_mut())
    }

    /// Dense exact-mode coefficients for one head and class, laid out
    /// `J^n x J^m` with zeros off support. Test instrumentation.
    pub fn alpha_dense(&self, x: &Tensor, j: usize, head: usize, class_idx: usize) -> Tensor {
        self.guard_exact(j);
        let mut tape = Tape::new();
        let idx = head * self.classes.len() + class_idx;
        let q = self.query_layers[idx].apply(&mut tape, x, j);
        let k = self.key_layers[idx].apply(&mut tape, x, j);
        let plan = attn_plan_for(
            &self.classes[class_idx],
            self.input_order,
            self.output_order,
            j,
        );
        let dh = self.d_head;
        let rows_out = j.pow(self.output_order as u32);
        let rows_in = j.pow(self.input_order as u32);
        let mut alpha = vec![0.0; rows_out * rows_in];
        let sup = plan.free.len();
        let mut logits = vec![0.0; sup];
        let mut probs = vec![0.0; sup];
        for &(oi, _, ib) in &plan.outputs {
            let qrow = &q.data()[oi as usize * dh..(oi as usize + 1) * dh];
            for (pos, &fo) in plan.free.iter().enumerate() {
                let src = (ib + fo) as usize;
                logits[pos] = dot(qrow, &k.data()[src * dh..(src + 1) * dh]);
            }
            softmax_into(&logits, &mut probs);
            for (pos, &fo) in plan.free.iter().enumerate() {
                alpha[oi as usize * rows_in + (ib + fo) as usize] = probs[pos];
            }
        }
        Tensor::from_parts(vec![rows_out, rows_in], alpha)
    }

    /// Support indicator of one class, laid out `J^n x J^m`.
    pub fn support_dense(&self, j: usize, class_idx: usize) -> Vec<bool> {
        let plan = attn_plan_for(
            &self.classes[class_idx],
            self.input_order,
            self.output_order,
            j,
        );
        let rows_out = j.pow(self.output_order as u32);
        let rows_in = j.pow(self.input_order as u32);
        let mut support = vec![false; rows_out * rows_in];
        for &(oi, _, ib) in &plan.outputs {
            for &fo in &plan.free {
                support[oi as usize * rows_in + (ib + fo) as usize] = true;
            }
        }
        support
    }
}

/// Median absolute deviation between performer and exact attention over 20
/// projection seeds, one median per requested feature count, on a fixed
/// well-conditioned random layer and input. Deviations must shrink as the
/// feature count grows; this powers both a unit test and the acceptance
/// suite.
pub fn performer_deviation_medians(base_seed: u64, feature_counts: &[usize]) -> Vec<f64> {
    let mut rng = Rng::new(base_seed);
    let (j, d, dh) = (6usize, 4, 3);
    let mut exact = HigherOrderAttention::init(1, 1, d, d, 2, dh, AttentionMode::Exact, j, &mut rng)
        .expect("supported shape");
    // Shrink query/key projections so exp(q . k) stays well conditioned.
    for layer in exact.query_layers.iter_mut().chain(exact.key_layers.iter_mut()) {
        for c in layer.coeffs.iter_mut() {
            *c = c.map(|v| v * 0.5);
        }
    }
    let x = Tensor::random_normal(&[j, d], 0.4, &mut rng);
    let mut tape = Tape::new();
    let baseline = exact.forward(&mut tape, &x, j);
    feature_counts
        .iter()
        .map(|&dk| {
            let mut devs: Vec<f64> = (0..20)
                .map(|seed| {
                    let mut approx = exact.clone();
                    approx.set_mode(
                        AttentionMode::Performer { d_k: dk },
                        &mut Rng::new(1000 + seed),
                    );
                    let y = approx.forward(&mut tape, &x, j);
                    y.data()
                        .iter()
                        .zip(baseline.data())
                        .map(|(a, b)| (a - b).abs())
                        .sum::<f64>()
                        / y.len() as f64
                })
                .collect();
            devs.sort_by(f64::total_cmp);
            (devs[9] + devs[10]) / 2.0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hot::equivariant::permute_joint_tuples;
    use crate::tensor::check::grad_check;
    use crate::tensor::matmul_raw;

    /// Finest partition of {0..k-1}: no index ties, all pairs in support.
    fn all_pairs_class(k: usize) -> SetPartition {
        SetPartition::from_rgs((0..k as u8).collect()).unwrap()
    }

    /// Straight-line reference for single-head all-pairs attention:
    /// softmax over keys of (X Wq)(X Wk)^T applied to X Wv Wo.
    fn eq1_reference(x: &Tensor, wq: &Tensor, wk: &Tensor, wv: &Tensor, wo: &Tensor) -> Tensor {
        let j = x.shape()[0];
        let d = x.shape()[1];
        let dh = wq.shape()[1];
        let q = matmul_raw(x.data(), wq.data(), j, d, dh);
        let k = matmul_raw(x.data(), wk.data(), j, d, dh);
        let v = matmul_raw(x.data(), wv.data(), j, d, dh);
        let mut out = vec![0.0; j * dh];
        for jj in 0..j {
            let mut logits = vec![0.0; j];
            for i in 0..j {
                logits[i] = dot(&q[jj * dh..(jj + 1) * dh], &k[i * dh..(i + 1) * dh]);
            }
            let mut probs = vec![0.0; j];
            softmax_into(&logits, &mut probs);
            for i in 0..j {
                for c in 0..dh {
                    out[jj * dh + c] += probs[i] * v[i * dh + c];
                }
            }
        }
        let d_out = wo.shape()[1];
        let projected = matmul_raw(&out, wo.data(), j, dh, d_out);
        Tensor::from_parts(vec![j, d_out], projected)
    }

    fn single_class_first_order(d: usize, dh: usize, rng: &mut Rng) -> HigherOrderAttention {
        let mut attn = HigherOrderAttention::init(1, 1, d, d, 1, dh, AttentionMode::Exact, 6, rng)
            .unwrap()
            .with_classes(vec![all_pairs_class(2)], 6, rng);
        // Make the query/key maps plain per-node projections: identity
        // basis only (canonical index 0 ties input to output).
        let wq = Tensor::random_normal(&[d, dh], 0.7, rng);
        let wk = Tensor::random_normal(&[d, dh], 0.7, rng);
        attn.query_layers[0] = EquivariantLinear::from_single_basis(1, 1, 0, wq);
        attn.key_layers[0] = EquivariantLinear::from_single_basis(1, 1, 0, wk);
        attn
    }

    #[test]
    fn all_pairs_class_reduces_to_plain_attention() {
        let mut rng = Rng::new(41);
        let (j, d, dh) = (6, 4, 3);
        let attn = single_class_first_order(d, dh, &mut rng);
        let x = Tensor::random_normal(&[j, d], 1.0, &mut rng);
        let mut tape = Tape::new();
        let got = attn.forward(&mut tape, &x, j);
        let want = eq1_reference(
            &x,
            &attn.query_layers[0].coeffs[0],
            &attn.key_layers[0].coeffs[0],
            &attn.w_value[0],
            &attn.w_output[0],
        );
        assert!(got.max_abs_diff(&want) < 1e-9);
    }

    #[test]
    fn alpha_rows_normalize_on_support_and_vanish_off_support() {
        let mut rng = Rng::new(43);
        let (j, d, dh) = (4usize, 3, 2);
        for &(m, n) in &[(1usize, 1usize), (1, 2), (2, 2)] {
            let attn =
                HigherOrderAttention::init(m, n, d, d, 2, dh, AttentionMode::Exact, j, &mut rng)
                    .unwrap();
            let x = Tensor::random_normal(&[j.pow(m as u32), d], 1.0, &mut rng);
            for ci in 0..attn.classes.len() {
                let alpha = attn.alpha_dense(&x, j, 1 % attn.heads, ci);
                let support = attn.support_dense(j, ci);
                let rows_in = j.pow(m as u32);
                for oi in 0..j.pow(n as u32) {
                    let row = &alpha.data()[oi * rows_in..(oi + 1) * rows_in];
                    let sup = &support[oi * rows_in..(oi + 1) * rows_in];
                    let sum: f64 = row.iter().sum();
                    if sup.iter().any(|&s| s) {
                        assert!((sum - 1.0).abs() < 1e-9, "row sum {sum}");
                    } else {
                        assert_eq!(sum, 0.0);
                    }
                    for (a, s) in row.iter().zip(sup) {
                        if !s {
                            assert_eq!(*a, 0.0, "off-support leak");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn exact_attention_is_equivariant() {
        let mut rng = Rng::new(47);
        let (j, d, dh) = (4usize, 3, 2);
        for &(m, n) in &[(1usize, 1usize), (1, 2), (2, 2)] {
            let attn =
                HigherOrderAttention::init(m, n, d, d, 2, dh, AttentionMode::Exact, j, &mut rng)
                    .unwrap();
            let x = Tensor::random_normal(&[j.pow(m as u32), d], 1.0, &mut rng);
            let mut tape = Tape::new();
            let y = attn.forward(&mut tape, &x, j);
            for _ in 0..5 {
                let mut perm: Vec<usize> = (0..j).collect();
                rng.shuffle(&mut perm);
                let px = permute_joint_tuples(&x, j, m, &perm);
                let py = attn.forward(&mut tape, &px, j);
                let y_p = permute_joint_tuples(&y, j, n, &perm);
                assert!(py.max_abs_diff(&y_p) < 1e-9, "({m},{n}) broke equivariance");
            }
        }
    }

    #[test]
    fn performer_attention_is_equivariant() {
        let mut rng = Rng::new(53);
        let (j, d, dh) = (5, 3, 2);
        let attn = HigherOrderAttention::init(
            1,
            2,
            d,
            d,
            1,
            dh,
            AttentionMode::Performer { d_k: 16 },
            j,
            &mut rng,
        )
        .unwrap();
        let x = Tensor::random_normal(&[j, d], 1.0, &mut rng);
        let mut tape = Tape::new();
        let y = attn.forward(&mut tape, &x, j);
        for _ in 0..5 {
            let mut perm: Vec<usize> = (0..j).collect();
            rng.shuffle(&mut perm);
            let px = permute_joint_tuples(&x, j, 1, &perm);
            let py = attn.forward(&mut tape, &px, j);
            let y_p = permute_joint_tuples(&y, j, 2, &perm);
            assert!(py.max_abs_diff(&y_p) < 1e-9);
        }
    }

    #[test]
    fn performer_error_shrinks_with_more_features() {
        let medians = performer_deviation_medians(59, &[16, 64, 256]);
        assert!(
            medians[0] > medians[1] && medians[1] > medians[2],
            "medians not decreasing: {medians:?}"
        );
    }

    #[test]
    fn gradients_check_in_both_modes() {
        let mut rng = Rng::new(61);
        let (j, d, dh) = (3usize, 2, 2);
        for &(m, n) in &[(1usize, 1usize), (1, 2)] {
            for mode in [AttentionMode::Exact, AttentionMode::Performer { d_k: 8 }] {
                let attn =
                    HigherOrderAttention::init(m, n, d, d, 1, dh, mode, j, &mut rng).unwrap();
                let x = Tensor::random_normal(&[j.pow(m as u32), d], 0.7, &mut rng);
                let err = grad_check(
                    |tape, x| {
                        let y = attn.forward(tape, x, j);
                        let sq = tape.mul_elem(&y, &y);
                        tape.sum_all(&sq)
                    },
                    &x,
                    1e-5,
                );
                assert!(err < 1e-6, "({m},{n}) {mode:?} grad err {err}");
            }
        }
    }

    #[test]
    fn rejects_unsupported_shapes() {
        let mut rng = Rng::new(1);
        assert!(HigherOrderAttention::init(2, 3, 2, 2, 1, 2, AttentionMode::Exact, 4, &mut rng)
            .is_err());
        assert!(HigherOrderAttention::init(4, 1, 2, 2, 1, 2, AttentionMode::Exact, 4, &mut rng)
            .is_err());
    }
}
