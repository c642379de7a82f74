//! Reduction of the temporal block mode to a fixed-width vector.
//!
//! First-order reductions (average, maximum, sum) are order-free; the
//! attentional and trilinear forms learn score vectors over the blocks;
//! rank pooling applies fixed closed-form coefficients whose inner product
//! with a time series encodes its temporal progression (the coefficients
//! sum to zero, so a constant-in-time input pools to zero).

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::tape::{Src, Tape, TapeOp};
use crate::tensor::{Reduction, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMethod {
    Avg,
    Max,
    Sum,
    Attn,
    Tri,
    Rank,
}

impl PoolMethod {
    pub fn parse(s: &str) -> Result<PoolMethod> {
        Ok(match s {
            "avg" => PoolMethod::Avg,
            "max" => PoolMethod::Max,
            "sum" => PoolMethod::Sum,
            "attn" => PoolMethod::Attn,
            "tri" => PoolMethod::Tri,
            "rank" => PoolMethod::Rank,
            other => return Err(Error::InvalidArgument(format!("unknown pooling '{other}'"))),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            PoolMethod::Avg => "avg",
            PoolMethod::Max => "max",
            PoolMethod::Sum => "sum",
            PoolMethod::Attn => "attn",
            PoolMethod::Tri => "tri",
            PoolMethod::Rank => "rank",
        }
    }

    pub fn all() -> [PoolMethod; 6] {
        [
            PoolMethod::Avg,
            PoolMethod::Max,
            PoolMethod::Sum,
            PoolMethod::Attn,
            PoolMethod::Tri,
            PoolMethod::Rank,
        ]
    }
}

/// Learnables for the score-based pooling forms, sized by the token width.
#[derive(Debug, Clone, Default)]
pub struct PoolParams {
    /// Attentional pooling score vector.
    pub attn_score: Option<Tensor>,
    /// Trilinear mixing vector (the modulation factor).
    pub tri_mix: Option<Tensor>,
    /// Trilinear score vector (softmax weights over blocks).
    pub tri_score: Option<Tensor>,
}

impl PoolParams {
    pub fn init(method: PoolMethod, width: usize, rng: &mut Rng) -> Self {
        let scale = 1.0 / (width as f64).sqrt();
        match method {
            PoolMethod::Attn => PoolParams {
                attn_score: Some(Tensor::random_normal(&[width], scale, rng)),
                ..Default::default()
            },
            PoolMethod::Tri => PoolParams {
                tri_mix: Some(Tensor::random_normal(&[width], scale, rng)),
                tri_score: Some(Tensor::random_normal(&[width], scale, rng)),
                ..Default::default()
            },
            _ => PoolParams::default(),
        }
    }
}

/// Closed-form rank pooling coefficients for `tau` blocks:
/// `rho(t) = 2 (tau - t + 1) - (tau + 1) (H_tau - H_{t-1})` with harmonic
/// numbers `H_k`. They sum to zero and weight later blocks upward, so the
/// pooled vector points along the temporal progression of the features.
pub fn rank_coefficients(tau: usize) -> Vec<f64> {
    let harmonic = |k: usize| (1..=k).map(|q| 1.0 / q as f64).sum::<f64>();
    let h_tau = harmonic(tau);
    (1..=tau)
        .map(|t| 2.0 * (tau - t + 1) as f64 - (tau + 1) as f64 * (h_tau - harmonic(t - 1)))
        .collect()
}

/// Scale every column to unit Euclidean norm (guarded near zero).
struct ColumnUnitNorm;

const NORM_EPS: f64 = 1e-12;

impl TapeOp for ColumnUnitNorm {
    fn name(&self) -> &'static str {
        "column_unit_norm"
    }

    fn forward(&self, inputs: &[Src]) -> (Vec<usize>, Vec<f64>, Vec<Arc<Vec<f64>>>) {
        let (rows, cols) = (inputs[0].shape[0], inputs[0].shape[1]);
        let x = &inputs[0].data;
        let mut out = vec![0.0; rows * cols];
        for t in 0..cols {
            let mut sq = 0.0;
            for r in 0..rows {
                sq += x[r * cols + t] * x[r * cols + t];
            }
            let inv = 1.0 / (sq + NORM_EPS).sqrt();
            for r in 0..rows {
                out[r * cols + t] = x[r * cols + t] * inv;
            }
        }
        (vec![rows, cols], out, Vec::new())
    }

    fn backward(
        &self,
        inputs: &[Src],
        _saved: &[Arc<Vec<f64>>],
        _out_shape: &[usize],
        grad_out: &[f64],
    ) -> Vec<Option<Vec<f64>>> {
        if inputs[0].id.is_none() {
            return vec![None];
        }
        let (rows, cols) = (inputs[0].shape[0], inputs[0].shape[1]);
        let x = &inputs[0].data;
        let mut gx = vec![0.0; rows * cols];
        for t in 0..cols {
            let mut sq = 0.0;
            let mut gdotx = 0.0;
            for r in 0..rows {
                let v = x[r * cols + t];
                sq += v * v;
                gdotx += grad_out[r * cols + t] * v;
            }
            let norm = (sq + NORM_EPS).sqrt();
            let inv = 1.0 / norm;
            let inv3 = inv * inv * inv;
            for r in 0..rows {
                gx[r * cols + t] =
                    grad_out[r * cols + t] * inv - x[r * cols + t] * gdotx * inv3;
            }
        }
        vec![Some(gx)]
    }
}

/// Pool a `width x tau` temporal representation down to a `width` vector.
pub fn temporal_pool(
    tape: &mut Tape,
    input: &Tensor,
    method: PoolMethod,
    params: &PoolParams,
) -> Tensor {
    assert_eq!(input.rank(), 2, "temporal_pool wants width x tau");
    let width = input.shape()[0];
    let tau = input.shape()[1];
    match method {
        PoolMethod::Avg => tape.reduce(input, 2, Reduction::Mean),
        PoolMethod::Sum => tape.reduce(input, 2, Reduction::Sum),
        PoolMethod::Max => tape.reduce(input, 2, Reduction::Max),
        PoolMethod::Attn => {
            let w = params.attn_score.as_ref().expect("attn pooling score");
            let normalized = tape.custom(Arc::new(ColumnUnitNorm), &[input]);
            let w_row = tape.reshape(w, &[1, width]);
            let scores = tape.matmul(&w_row, &normalized);
            let weights = tape.softmax_rows(&scores);
            let weights_col = tape.reshape(&weights, &[tau, 1]);
            let pooled = tape.matmul(input, &weights_col);
            tape.reshape(&pooled, &[width])
        }
        PoolMethod::Tri => {
            let u = params.tri_mix.as_ref().expect("tri pooling mix");
            let v = params.tri_score.as_ref().expect("tri pooling score");
            let u_row = tape.reshape(u, &[1, width]);
            let v_row = tape.reshape(v, &[1, width]);
            let mixing = tape.matmul(&u_row, input);
            let scores = tape.matmul(&v_row, input);
            let weights = tape.softmax_rows(&scores);
            let blended = tape.mul_elem(&weights, &mixing);
            let blended_col = tape.reshape(&blended, &[tau, 1]);
            let pooled = tape.matmul(input, &blended_col);
            tape.reshape(&pooled, &[width])
        }
        PoolMethod::Rank => {
            let rho = Tensor::new(vec![tau, 1], rank_coefficients(tau)).expect("sizes agree");
            let pooled = tape.matmul(input, &rho);
            tape.reshape(&pooled, &[width])
        }
    }
}
