//! Linear layers over order-`m` joint tensors that commute with joint
//! relabeling.
//!
//! A map from `J^m x d_in` to `J^n x d_out` is permutation-equivariant
//! exactly when it is a combination of index-pattern operations: summing
//! input modes grouped together, broadcasting over free output modes, and
//! tying equal output modes. The patterns are indexed by set partitions of
//! the combined `m + n` index positions (input positions first), giving a
//! `Bell(m + n)`-element basis with one `d_in x d_out` weight matrix each,
//! plus one bias vector per partition of the output positions.
//!
//! Pattern semantics for a partition: every block with at least two
//! positions ties those indices together; blocks containing only input
//! positions are summed over; blocks containing only output positions
//! broadcast. A block spanning input and output positions carries the tied
//! input diagonal to the tied output diagonal.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use crate::rng::Rng;
use crate::tensor::tape::{Src, Tape, TapeOp};
use crate::tensor::{matmul_nt_raw, matmul_tn_raw, matmul_raw, Tensor};

use super::partitions::{bell_number, enumerate_partitions, SetPartition};

/// Iterate all assignments of values `0..j` to `wa.len()` slots, calling
/// `f` with the two weighted sums maintained incrementally.
pub(crate) fn for_each_pair(j: usize, wa: &[usize], wb: &[usize], mut f: impl FnMut(usize, usize)) {
    let k = wa.len();
    if k == 0 {
        f(0, 0);
        return;
    }
    let mut digits = vec![0usize; k];
    let (mut a, mut b) = (0usize, 0usize);
    loop {
        f(a, b);
        let mut d = k;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            if digits[d] + 1 < j {
                digits[d] += 1;
                a += wa[d];
                b += wb[d];
                break;
            }
            a -= digits[d] * wa[d];
            b -= digits[d] * wb[d];
            digits[d] = 0;
        }
    }
}

/// Three-weight variant of [`for_each_pair`].
pub(crate) fn for_each_triple(
    j: usize,
    wa: &[usize],
    wb: &[usize],
    wc: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let k = wa.len();
    if k == 0 {
        f(0, 0, 0);
        return;
    }
    let mut digits = vec![0usize; k];
    let (mut a, mut b, mut c) = (0usize, 0usize, 0usize);
    loop {
        f(a, b, c);
        let mut d = k;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            if digits[d] + 1 < j {
                digits[d] += 1;
                a += wa[d];
                b += wb[d];
                c += wc[d];
                break;
            }
            a -= digits[d] * wa[d];
            b -= digits[d] * wb[d];
            c -= digits[d] * wc[d];
            digits[d] = 0;
        }
    }
}

/// Index bookkeeping for one basis pattern at a fixed `J`, flattened to
/// plain index pairs so the apply loops are pure streaming adds.
#[derive(Debug)]
struct PatternPlan {
    /// (input row, bucket row) pairs: the contraction.
    gather: Vec<(u32, u32)>,
    /// (output row, bucket row) pairs: the broadcast.
    scatter: Vec<(u32, u32)>,
    bucket: usize,
}

#[derive(Debug)]
struct BiasPlan {
    rows: Vec<u32>,
}

/// Compiled evaluation plan for one (m, n, J) triple over the full basis.
#[derive(Debug)]
pub struct EquivariantPlan {
    n: usize,
    j: usize,
    patterns: Vec<PatternPlan>,
    bias_patterns: Vec<BiasPlan>,
}

/// Weights of a partition's blocks into flat row-major indices and the
/// shared mixed-block bucket.
fn pattern_plan(p: &SetPartition, m: usize, n: usize, j: usize) -> PatternPlan {
    let blocks = p.blocks();
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

    let mut in_w = Vec::new();
    let mut in_bw = Vec::new();
    let mut out_w = Vec::new();
    let mut out_bw = Vec::new();
    for (b, members) in blocks.iter().enumerate() {
        let iw: usize = members.iter().filter(|&&e| e < m).map(|&e| in_stride(e)).sum();
        let ow: usize = members
            .iter()
            .filter(|&&e| e >= m)
            .map(|&e| out_stride(e - m))
            .sum();
        let bw = bucket_weight.get(&b).copied().unwrap_or(0);
        if members.iter().any(|&e| e < m) {
            in_w.push(iw);
            in_bw.push(bw);
        }
        if members.iter().any(|&e| e >= m) {
            out_w.push(ow);
            out_bw.push(bw);
        }
    }
    let mut gather = Vec::new();
    for_each_pair(j, &in_w, &in_bw, |ii, bk| gather.push((ii as u32, bk as u32)));
    let mut scatter = Vec::new();
    for_each_pair(j, &out_w, &out_bw, |oi, bk| scatter.push((oi as u32, bk as u32)));
    PatternPlan {
        gather,
        scatter,
        bucket: j.pow(mixed_ids.len() as u32),
    }
}

fn build_plan(m: usize, n: usize, j: usize) -> EquivariantPlan {
    let patterns = enumerate_partitions(m + n)
        .expect("supported combined order")
        .iter()
        .map(|p| pattern_plan(p, m, n, j))
        .collect();
    let bias_patterns = enumerate_partitions(n)
        .expect("supported output order")
        .iter()
        .map(|p| {
            let blocks = p.blocks();
            let out_w: Vec<usize> = blocks
                .iter()
                .map(|members| {
                    members
                        .iter()
                        .map(|&e| j.pow((n - 1 - e) as u32))
                        .sum()
                })
                .collect();
            let mut rows = Vec::new();
            for_each_pair(j, &out_w, &out_w, |oi, _| rows.push(oi as u32));
            BiasPlan { rows }
        })
        .collect();
    EquivariantPlan { n, j, patterns, bias_patterns }
}

fn plan_cache() -> &'static Mutex<HashMap<(usize, usize, usize), Arc<EquivariantPlan>>> {
    static CACHE: OnceLock<Mutex<HashMap<(usize, usize, usize), Arc<EquivariantPlan>>>> =
        OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

pub fn plan_for(m: usize, n: usize, j: usize) -> Arc<EquivariantPlan> {
    let mut cache = plan_cache().lock().expect("plan cache lock");
    cache
        .entry((m, n, j))
        .or_insert_with(|| Arc::new(build_plan(m, n, j)))
        .clone()
}

/// Permutation-equivariant linear layer from order `m` to order `n`.
#[derive(Debug, Clone)]
pub struct EquivariantLinear {
    pub input_order: usize,
    pub output_order: usize,
    pub d_in: usize,
    pub d_out: usize,
    /// One `d_in x d_out` matrix per basis partition, canonical order.
    pub coeffs: Vec<Tensor>,
    /// One `d_out` vector per output-index partition, canonical order.
    pub biases: Vec<Tensor>,
}

impl EquivariantLinear {
    /// Initialize for use at `j` joints. Each basis coefficient is scaled
    /// down by its pattern's summation gain (`j` per summed-out input
    /// block), so all patterns contribute at comparable magnitude and
    /// activations stay O(1) regardless of the joint count. Patterns that
    /// differ only by a relabeling of input positions or of output
    /// positions start from the same matrix: the initial map treats index
    /// positions symmetrically and training breaks the tie only when the
    /// data wants it.
    pub fn init(m: usize, n: usize, d_in: usize, d_out: usize, j: usize, rng: &mut Rng) -> Self {
        let partitions = enumerate_partitions(m + n).expect("supported combined order");
        let basis = partitions.len();
        let base = 1.0 / ((d_in * basis) as f64).sqrt();
        let mut orbit_reps: HashMap<Vec<u8>, Tensor> = HashMap::new();
        let coeffs = partitions
            .iter()
            .map(|p| {
                let summed = p
                    .blocks()
                    .iter()
                    .filter(|members| members.iter().all(|&e| e < m))
                    .count();
                let gain = (j.max(1) as f64).powi(summed as i32);
                let key = orbit_signature(p, m);
                let rep = orbit_reps
                    .entry(key)
                    .or_insert_with(|| Tensor::random_normal(&[d_in, d_out], 1.0, rng));
                rep.map(|v| v * base / gain)
            })
            .collect();
        let biases = (0..bell_number(n)).map(|_| Tensor::zeros(&[d_out])).collect();
        EquivariantLinear { input_order: m, output_order: n, d_in, d_out, coeffs, biases }
    }

    /// Zero layer with one basis coefficient set to `w` (test scaffolding).
    pub fn from_single_basis(m: usize, n: usize, index: usize, w: Tensor) -> Self {
        let basis = bell_number(m + n);
        let (d_in, d_out) = (w.shape()[0], w.shape()[1]);
        let mut coeffs = vec![Tensor::zeros(&[d_in, d_out]); basis];
        coeffs[index] = w;
        let biases = (0..bell_number(n)).map(|_| Tensor::zeros(&[d_out])).collect();
        EquivariantLinear { input_order: m, output_order: n, d_in, d_out, coeffs, biases }
    }

    pub fn basis_size(&self) -> usize {
        self.coeffs.len()
    }

    /// Apply to `x` of shape `[J^m, d_in]`, producing `[J^n, d_out]`.
    pub fn apply(&self, tape: &mut Tape, x: &Tensor, j: usize) -> Tensor {
        self.apply_batched(tape, x, j, 1)
    }

    /// Apply to a block-stacked input `[J^m, batch * d_in]`, treating each
    /// `d_in`-wide channel slice as an independent instance that shares the
    /// layer weights. Produces `[J^n, batch * d_out]`.
    pub fn apply_batched(&self, tape: &mut Tape, x: &Tensor, j: usize, batch: usize) -> Tensor {
        let coeffs: Vec<&Tensor> = self.coeffs.iter().collect();
        let biases: Vec<&Tensor> = self.biases.iter().collect();
        apply_basis_batched(
            tape,
            x,
            self.input_order,
            self.output_order,
            j,
            batch,
            self.d_in,
            self.d_out,
            &coeffs,
            &biases,
        )
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.coeffs.iter().chain(self.biases.iter())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.coeffs.iter_mut().chain(self.biases.iter_mut())
    }
}

struct EquivariantApply {
    plan: Arc<EquivariantPlan>,
    d_in: usize,
    d_out: usize,
    batch: usize,
}

#[inline]
fn add_rows(dst: &mut [f64], dst_row: usize, src: &[f64], src_row: usize, width: usize) {
    let d = &mut dst[dst_row * width..(dst_row + 1) * width];
    let s = &src[src_row * width..(src_row + 1) * width];
    for (a, b) in d.iter_mut().zip(s) {
        *a += b;
    }
}

impl EquivariantApply {
    /// Contraction into `scratch[..bucket * width]`. When every bucket row
    /// is hit exactly once the rows are copied instead of zeroed and added.
    fn contract_into<'a>(&self, pat: &PatternPlan, x: &[f64], scratch: &'a mut Vec<f64>) -> &'a [f64] {
        let width = self.batch * self.d_in;
        let len = pat.bucket * width;
        if scratch.len() < len {
            scratch.resize(len, 0.0);
        }
        let bucket = &mut scratch[..len];
        if pat.gather.len() == pat.bucket {
            for &(src, bk) in &pat.gather {
                bucket[bk as usize * width..(bk as usize + 1) * width]
                    .copy_from_slice(&x[src as usize * width..(src as usize + 1) * width]);
            }
        } else {
            bucket.fill(0.0);
            for &(src, bk) in &pat.gather {
                add_rows(bucket, bk as usize, x, src as usize, width);
            }
        }
        bucket
    }
}

impl TapeOp for EquivariantApply {
    fn name(&self) -> &'static str {
        "equivariant_apply"
    }

    fn forward(&self, inputs: &[Src]) -> (Vec<usize>, Vec<f64>, Vec<Arc<Vec<f64>>>) {
        let plan = &self.plan;
        let (d_in, d_out, batch) = (self.d_in, self.d_out, self.batch);
        let w_out = batch * d_out;
        let x = &inputs[0].data;
        let rows_out = plan.j.pow(plan.n as u32);
        let mut out = vec![0.0; rows_out * w_out];
        let mut scratch = Vec::new();
        let mut mixed = Vec::new();
        for (p, pat) in plan.patterns.iter().enumerate() {
            let w = &inputs[1 + p].data;
            let bucket = self.contract_into(pat, x, &mut scratch);
            // Batch slices are contiguous inside each bucket row, so the
            // shared weight applies as one (bucket * batch) x d_in product.
            let mlen = pat.bucket * w_out;
            if mixed.len() < mlen {
                mixed.resize(mlen, 0.0);
            }
            mixed[..mlen].fill(0.0);
            crate::tensor::matmul_raw_into(bucket, w, pat.bucket * batch, d_in, d_out, &mut mixed[..mlen]);
            for &(dst, bk) in &pat.scatter {
                add_rows(&mut out, dst as usize, &mixed, bk as usize, w_out);
            }
        }
        let bias_base = 1 + plan.patterns.len();
        for (p, bp) in plan.bias_patterns.iter().enumerate() {
            let b = &inputs[bias_base + p].data;
            for &row in &bp.rows {
                let dst = &mut out[row as usize * w_out..(row as usize + 1) * w_out];
                for (chunk, _) in dst.chunks_mut(d_out).zip(0..batch) {
                    for (a, v) in chunk.iter_mut().zip(b.iter()) {
                        *a += v;
                    }
                }
            }
        }
        (vec![rows_out, w_out], out, Vec::new())
    }

    fn backward(
        &self,
        inputs: &[Src],
        _saved: &[Arc<Vec<f64>>],
        _out_shape: &[usize],
        grad_out: &[f64],
    ) -> Vec<Option<Vec<f64>>> {
        let plan = &self.plan;
        let (d_in, d_out, batch) = (self.d_in, self.d_out, self.batch);
        let (w_in, w_out) = (batch * d_in, batch * d_out);
        let x = &inputs[0].data;
        let want_x = inputs[0].id.is_some();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; inputs.len()];
        let mut gx = if want_x { Some(vec![0.0; x.len()]) } else { None };
        let mut scratch = Vec::new();
        let mut gathered: Vec<f64> = Vec::new();

        for (p, pat) in plan.patterns.iter().enumerate() {
            let w_src = &inputs[1 + p];
            let want_w = w_src.id.is_some();
            if !want_w && !want_x {
                continue;
            }
            // Gather the output gradient into the bucket domain.
            let glen = pat.bucket * w_out;
            if gathered.len() < glen {
                gathered.resize(glen, 0.0);
            }
            if pat.scatter.len() == pat.bucket {
                for &(dst, bk) in &pat.scatter {
                    gathered[bk as usize * w_out..(bk as usize + 1) * w_out]
                        .copy_from_slice(&grad_out[dst as usize * w_out..(dst as usize + 1) * w_out]);
                }
            } else {
                gathered[..glen].fill(0.0);
                for &(dst, bk) in &pat.scatter {
                    add_rows(&mut gathered, bk as usize, grad_out, dst as usize, w_out);
                }
            }
            if want_w {
                let bucket = self.contract_into(pat, x, &mut scratch);
                let gw = matmul_tn_raw(bucket, &gathered[..glen], d_in, pat.bucket * batch, d_out);
                grads[1 + p] = Some(gw);
            }
            if let Some(gx) = gx.as_mut() {
                let spread =
                    matmul_nt_raw(&gathered[..glen], &w_src.data, pat.bucket * batch, d_out, d_in);
                for &(src, bk) in &pat.gather {
                    add_rows(gx, src as usize, &spread, bk as usize, w_in);
                }
            }
        }
        let bias_base = 1 + plan.patterns.len();
        for (p, bp) in plan.bias_patterns.iter().enumerate() {
            if inputs[bias_base + p].id.is_none() {
                continue;
            }
            let mut gb = vec![0.0; d_out];
            for &row in &bp.rows {
                let src = &grad_out[row as usize * w_out..(row as usize + 1) * w_out];
                for chunk in src.chunks(d_out) {
                    for (a, v) in gb.iter_mut().zip(chunk) {
                        *a += v;
                    }
                }
            }
            grads[bias_base + p] = Some(gb);
        }
        grads[0] = gx;
        grads
    }
}

/// Canonical tag of a partition under separate relabelings of the input
/// and output positions: the multiset of (input-position count,
/// output-position count) block profiles.
fn orbit_signature(p: &SetPartition, m: usize) -> Vec<u8> {
    let mut profile: Vec<(u8, u8)> = p
        .blocks()
        .iter()
        .map(|members| {
            let ins = members.iter().filter(|&&e| e < m).count() as u8;
            let outs = members.len() as u8 - ins;
            (ins, outs)
        })
        .collect();
    profile.sort_unstable();
    profile.into_iter().flat_map(|(a, b)| [a, b]).collect()
}

/// Apply the full pattern basis with explicit parameters: one
/// `d_in x d_out` coefficient per basis partition and one `d_out` bias per
/// output partition. Lets several logical layers share one pass by
/// stacking their parameters along the output channels.
#[allow(clippy::too_many_arguments)]
pub fn apply_basis_batched(
    tape: &mut Tape,
    x: &Tensor,
    m: usize,
    n: usize,
    j: usize,
    batch: usize,
    d_in: usize,
    d_out: usize,
    coeffs: &[&Tensor],
    biases: &[&Tensor],
) -> Tensor {
    assert_eq!(x.shape(), &[j.pow(m as u32), batch * d_in], "equivariant input shape");
    let plan = plan_for(m, n, j);
    assert_eq!(coeffs.len(), plan.patterns.len(), "basis coefficient count");
    assert_eq!(biases.len(), plan.bias_patterns.len(), "bias pattern count");
    let op = Arc::new(EquivariantApply { plan, d_in, d_out, batch });
    let mut inputs: Vec<&Tensor> = Vec::with_capacity(1 + coeffs.len() + biases.len());
    inputs.push(x);
    inputs.extend(coeffs.iter().copied());
    inputs.extend(biases.iter().copied());
    tape.custom(op, &inputs)
}

/// Relabel joints of an order-`m` tensor: row for tuple `(i_1..i_m)` moves
/// to `(perm[i_1]..perm[i_m])`. Shared by the equivariance tests.
pub fn permute_joint_tuples(x: &Tensor, j: usize, m: usize, perm: &[usize]) -> Tensor {
    let d = x.shape()[1];
    assert_eq!(x.shape()[0], j.pow(m as u32));
    let mut out = vec![0.0; x.len()];
    let rows = j.pow(m as u32);
    for row in 0..rows {
        // Decode the tuple, apply the relabeling, re-encode.
        let mut rest = row;
        let mut target = 0usize;
        for pos in 0..m {
            let digit = rest / j.pow((m - 1 - pos) as u32);
            rest %= j.pow((m - 1 - pos) as u32);
            target += perm[digit] * j.pow((m - 1 - pos) as u32);
        }
        out[target * d..(target + 1) * d].copy_from_slice(&x.data()[row * d..(row + 1) * d]);
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}
