//! Hyper-edge combinatorics over body joints, plus reference graph and
//! hypergraph convolution updates used as baselines and test oracles.
//!
//! Joints are numbered `0..J`. An order-`m` hyper-edge is a strictly
//! increasing `m`-tuple of joints; the canonical ordering of all
//! `binomial(J, m)` such edges is lexicographic, and every consumer in the
//! crate (feature assembly, weighted pooling, exports) relies on that one
//! ordering.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// All hyper-edges of one order, lexicographically sorted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HyperEdgeIndex {
    pub order: usize,
    pub joints: usize,
    edges: Vec<Vec<usize>>,
}

impl HyperEdgeIndex {
    pub fn edges(&self) -> &[Vec<usize>] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    /// Position of an edge in the canonical ordering.
    pub fn position(&self, edge: &[usize]) -> Option<usize> {
        self.edges.binary_search_by(|e| e.as_slice().cmp(edge)).ok()
    }
}

/// Enumerate all strictly increasing `m`-tuples over `0..j`, lexicographic.
pub fn enumerate_hyperedges(j: usize, m: usize) -> Result<HyperEdgeIndex> {
    if m == 0 || m > j {
        return Err(Error::InvalidArgument(format!(
            "edge order {m} out of range for {j} joints"
        )));
    }
    let mut edges = Vec::with_capacity(binomial(j, m));
    let mut current: Vec<usize> = (0..m).collect();
    loop {
        edges.push(current.clone());
        // Advance the rightmost position that can still grow.
        let mut d = m;
        loop {
            if d == 0 {
                return Ok(HyperEdgeIndex { order: m, joints: j, edges });
            }
            d -= 1;
            if current[d] < j - (m - d) {
                current[d] += 1;
                for k in d + 1..m {
                    current[k] = current[k - 1] + 1;
                }
                break;
            }
        }
    }
}

pub fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc as usize
}

/// Total hyper-edge count over orders `1..=r`.
pub fn total_hyperedges(j: usize, r: usize) -> Result<usize> {
    if r > j {
        return Err(Error::InvalidArgument(format!(
            "max order {r} exceeds {j} joints"
        )));
    }
    Ok((1..=r).map(|m| binomial(j, m)).sum())
}

/// Joint-by-edge incidence with diagonal edge weights (all ones by default).
#[derive(Debug, Clone)]
pub struct IncidenceMatrix {
    pub joints: usize,
    /// `h[v * edges + e]` is 1.0 when joint `v` belongs to edge `e`.
    h: Vec<f64>,
    edge_count: usize,
    edge_weights: Vec<f64>,
}

impl IncidenceMatrix {
    pub fn from_edges(joints: usize, edges: &[Vec<usize>]) -> Self {
        let edge_count = edges.len();
        let mut h = vec![0.0; joints * edge_count];
        for (e, edge) in edges.iter().enumerate() {
            for &v in edge {
                assert!(v < joints, "joint index out of range");
                h[v * edge_count + e] = 1.0;
            }
        }
        IncidenceMatrix {
            joints,
            h,
            edge_count,
            edge_weights: vec![1.0; edge_count],
        }
    }

    pub fn from_index(index: &HyperEdgeIndex) -> Self {
        Self::from_edges(index.joints, index.edges())
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Self {
        assert_eq!(weights.len(), self.edge_count);
        self.edge_weights = weights;
        self
    }

    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    pub fn entry(&self, v: usize, e: usize) -> f64 {
        self.h[v * self.edge_count + e]
    }

    pub fn weights(&self) -> &[f64] {
        &self.edge_weights
    }

    /// Joint degree: weighted count of edges passing through `v`.
    pub fn node_degree(&self, v: usize) -> f64 {
        (0..self.edge_count)
            .map(|e| self.edge_weights[e] * self.entry(v, e))
            .sum()
    }

    /// Edge degree: number of joints the edge contains.
    pub fn edge_degree(&self, e: usize) -> f64 {
        (0..self.joints).map(|v| self.entry(v, e)).sum()
    }

    pub fn as_matrix(&self) -> Tensor {
        Tensor::new(vec![self.joints, self.edge_count], self.h.clone()).expect("sizes agree")
    }
}

/// Adjacency of a pairwise graph from its joint-by-edge incidence: the
/// off-diagonal of `H H^T` counts the edges joining each pair, and the
/// diagonal self-counts are removed. Every column must contain exactly two
/// ones.
pub fn adjacency_from_incidence(h: &IncidenceMatrix) -> Result<Tensor> {
    let j = h.joints;
    for e in 0..h.edge_count() {
        let deg = h.edge_degree(e);
        if deg != 2.0 {
            return Err(Error::InvalidArgument(format!(
                "edge {e} joins {deg} joints; pairwise incidence requires 2"
            )));
        }
    }
    let mut a = vec![0.0; j * j];
    for v in 0..j {
        for w in 0..j {
            if v == w {
                continue;
            }
            let mut s = 0.0;
            for e in 0..h.edge_count() {
                s += h.entry(v, e) * h.entry(w, e);
            }
            a[v * j + w] = s;
        }
    }
    Tensor::new(vec![j, j], a)
}

fn relu_inplace(data: &mut [f64]) {
    for v in data.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// One graph-convolution step with renormalized self-loops:
/// `relu(D^{-1/2} (A + I) D^{-1/2} X W)` where `D` is the row-degree of
/// `A + I`.
pub fn gcn_update(x: &Tensor, adjacency: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let j = x.shape()[0];
    if adjacency.shape() != [j, j] {
        return Err(Error::ShapeMismatch("adjacency must be J x J".into()));
    }
    let d_in = x.shape()[1];
    if weights.shape()[0] != d_in {
        return Err(Error::ShapeMismatch("weight rows must match features".into()));
    }
    let mut a_tilde = adjacency.data().to_vec();
    for v in 0..j {
        a_tilde[v * j + v] += 1.0;
    }
    let mut deg = vec![0.0; j];
    for v in 0..j {
        deg[v] = a_tilde[v * j..(v + 1) * j].iter().sum();
        if deg[v] <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "joint {v} has nonpositive degree after self-loops"
            )));
        }
    }
    let mut norm = vec![0.0; j * j];
    for v in 0..j {
        for w in 0..j {
            norm[v * j + w] = a_tilde[v * j + w] / (deg[v] * deg[w]).sqrt();
        }
    }
    let mixed = crate::tensor::matmul_raw(&norm, x.data(), j, j, d_in);
    let d_out = weights.shape()[1];
    let mut out = crate::tensor::matmul_raw(&mixed, weights.data(), j, d_in, d_out);
    relu_inplace(&mut out);
    Tensor::new(vec![j, d_out], out)
}

/// One hypergraph-convolution step, exactly as the reference update reads:
/// `relu(Dv^{1/2} H W De^{-1} H^T Dv^{1/2} X Theta)`.
pub fn hgcn_update(x: &Tensor, incidence: &IncidenceMatrix, theta: &Tensor) -> Result<Tensor> {
    let j = incidence.joints;
    let e = incidence.edge_count();
    if x.shape()[0] != j {
        return Err(Error::ShapeMismatch("features must have one row per joint".into()));
    }
    let mut dv = vec![0.0; j];
    for (v, slot) in dv.iter_mut().enumerate() {
        *slot = incidence.node_degree(v);
        if *slot <= 0.0 {
            return Err(Error::InvalidArgument(format!("joint {v} has zero degree")));
        }
    }
    let mut de = vec![0.0; e];
    for (k, slot) in de.iter_mut().enumerate() {
        *slot = incidence.edge_degree(k);
        if *slot <= 0.0 {
            return Err(Error::InvalidArgument(format!("edge {k} has zero degree")));
        }
    }
    // P = Dv^{1/2} H W De^{-1} H^T Dv^{1/2}
    let mut prop = vec![0.0; j * j];
    for v in 0..j {
        for w in 0..j {
            let mut s = 0.0;
            for k in 0..e {
                s += incidence.entry(v, k) * incidence.weights()[k] / de[k]
                    * incidence.entry(w, k);
            }
            prop[v * j + w] = dv[v].sqrt() * s * dv[w].sqrt();
        }
    }
    let d_in = x.shape()[1];
    let d_out = theta.shape()[1];
    let mixed = crate::tensor::matmul_raw(&prop, x.data(), j, j, d_in);
    let mut out = crate::tensor::matmul_raw(&mixed, theta.data(), j, d_in, d_out);
    relu_inplace(&mut out);
    Tensor::new(vec![j, d_out], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn singleton_edges() {
        let idx = enumerate_hyperedges(7, 1).unwrap();
        assert_eq!(idx.len(), 7);
        for (i, e) in idx.edges().iter().enumerate() {
            assert_eq!(e, &vec![i]);
        }
    }

    #[test]
    fn kinetics_order_four_count() {
        assert_eq!(enumerate_hyperedges(18, 4).unwrap().len(), 3060);
    }

    #[test]
    fn triple_count_matches_brute_force() {
        let idx = enumerate_hyperedges(25, 3).unwrap();
        let mut brute = 0usize;
        for a in 0..25 {
            for b in a + 1..25 {
                for _c in b + 1..25 {
                    brute += 1;
                }
            }
        }
        assert_eq!(idx.len(), brute);
        assert_eq!(idx.len(), 2300);
    }

    #[test]
    fn edges_strictly_sorted_and_unique() {
        for j in 2..=10 {
            for m in 1..=j.min(4) {
                let idx = enumerate_hyperedges(j, m).unwrap();
                assert_eq!(idx.len(), binomial(j, m));
                for e in idx.edges() {
                    assert!(e.windows(2).all(|w| w[0] < w[1]));
                }
                for pair in idx.edges().windows(2) {
                    assert!(pair[0] < pair[1], "not lexicographically sorted");
                }
            }
        }
    }

    #[test]
    fn rejects_order_above_joint_count() {
        assert!(enumerate_hyperedges(3, 4).is_err());
        assert!(enumerate_hyperedges(3, 0).is_err());
    }

    #[test]
    fn totals() {
        assert_eq!(total_hyperedges(18, 3).unwrap(), 18 + 153 + 816);
        assert_eq!(total_hyperedges(9, 1).unwrap(), 9);
        // Power-set identity: sum over all orders is 2^J - 1.
        assert_eq!(total_hyperedges(5, 5).unwrap(), 31);
    }

    #[test]
    fn adjacency_of_single_edge() {
        let h = IncidenceMatrix::from_edges(2, &[vec![0, 1]]);
        let a = adjacency_from_incidence(&h).unwrap();
        assert_eq!(a.data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn adjacency_of_edgeless_graph() {
        let h = IncidenceMatrix::from_edges(3, &[]);
        let a = adjacency_from_incidence(&h).unwrap();
        assert!(a.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adjacency_of_path() {
        // 0 - 1 - 2, checked against the edge list by hand.
        let h = IncidenceMatrix::from_edges(3, &[vec![0, 1], vec![1, 2]]);
        let a = adjacency_from_incidence(&h).unwrap();
        assert_eq!(
            a.data(),
            &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]
        );
    }

    #[test]
    fn adjacency_rejects_hyper_edges() {
        let h = IncidenceMatrix::from_edges(3, &[vec![0, 1, 2]]);
        assert!(adjacency_from_incidence(&h).is_err());
    }

    #[test]
    fn degrees_match_row_and_column_sums() {
        let mut rng = Rng::new(31);
        let idx = enumerate_hyperedges(6, 3).unwrap();
        let weights: Vec<f64> = (0..idx.len()).map(|_| rng.uniform_in(0.5, 2.0)).collect();
        let h = IncidenceMatrix::from_index(&idx).with_weights(weights.clone());
        for e in 0..h.edge_count() {
            assert_eq!(h.edge_degree(e), 3.0);
        }
        for v in 0..6 {
            let by_sum: f64 = (0..h.edge_count())
                .map(|e| weights[e] * h.entry(v, e))
                .sum();
            assert!((h.node_degree(v) - by_sum).abs() < 1e-12);
        }
        // Handshake identity: sum of node degrees = sum of w(e) * delta(e).
        let lhs: f64 = (0..6).map(|v| h.node_degree(v)).sum();
        let rhs: f64 = (0..h.edge_count())
            .map(|e| weights[e] * h.edge_degree(e))
            .sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn isolated_joint_has_zero_degree() {
        let h = IncidenceMatrix::from_edges(3, &[vec![0, 1]]);
        assert_eq!(h.node_degree(2), 0.0);
    }

    #[test]
    fn gcn_with_empty_graph_is_pointwise() {
        let x = Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.0, 4.0]).unwrap();
        let a = Tensor::zeros(&[2, 2]);
        let theta = Tensor::eye(2);
        // A = 0 means self-loops only and unit degrees, so relu(X Theta).
        let out = gcn_update(&x, &a, &theta).unwrap();
        assert_eq!(out.data(), &[1.0, 0.0, 3.0, 4.0]);
    }

    #[test]
    fn gcn_two_node_complete_graph_hand_check() {
        // A = [[0,1],[1,0]], A~ = [[1,1],[1,1]], degrees (2,2),
        // normalized = all entries 1/2. With Theta = I and X >= 0 the
        // update averages the two rows.
        let x = Tensor::new(vec![2, 1], vec![2.0, 6.0]).unwrap();
        let a = Tensor::new(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let out = gcn_update(&x, &a, &Tensor::eye(1)).unwrap();
        assert!((out.data()[0] - 4.0).abs() < 1e-12);
        assert!((out.data()[1] - 4.0).abs() < 1e-12);
    }

    fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        let mut out = vec![0.0; rows * cols];
        for (src, &dst) in perm.iter().enumerate() {
            out[dst * cols..(dst + 1) * cols]
                .copy_from_slice(&t.data()[src * cols..(src + 1) * cols]);
        }
        Tensor::new(vec![rows, cols], out).unwrap()
    }

    #[test]
    fn gcn_update_is_permutation_equivariant() {
        let mut rng = Rng::new(5);
        let j = 5;
        let x = Tensor::random_normal(&[j, 3], 1.0, &mut rng);
        let theta = Tensor::random_normal(&[3, 3], 1.0, &mut rng);
        let edges = vec![vec![0, 1], vec![1, 2], vec![2, 3], vec![3, 4], vec![0, 4]];
        let h = IncidenceMatrix::from_edges(j, &edges);
        let a = adjacency_from_incidence(&h).unwrap();
        let out = gcn_update(&x, &a, &theta).unwrap();

        let perm = vec![2, 0, 4, 1, 3];
        let px = permute_rows(&x, &perm);
        let p_edges: Vec<Vec<usize>> = edges
            .iter()
            .map(|e| {
                let mut m: Vec<usize> = e.iter().map(|&v| perm[v]).collect();
                m.sort_unstable();
                m
            })
            .collect();
        let ph = IncidenceMatrix::from_edges(j, &p_edges);
        let pa = adjacency_from_incidence(&ph).unwrap();
        let pout = gcn_update(&px, &pa, &theta).unwrap();
        assert!(pout.max_abs_diff(&permute_rows(&out, &perm)) < 1e-12);
    }

    #[test]
    fn hgcn_matches_graph_sparsity_on_pairwise_edges() {
        let mut rng = Rng::new(8);
        let j = 5;
        let x = Tensor::random_normal(&[j, 2], 1.0, &mut rng).map(f64::abs);
        let theta = Tensor::eye(2);
        let edges = vec![vec![0, 1], vec![1, 2], vec![3, 4]];
        let h = IncidenceMatrix::from_edges(j, &edges);
        let out = hgcn_update(&x, &h, &theta);
        // Joint 3 never interacts with joints 0..3's component, so its
        // output depends only on rows 3 and 4: zeroing row 0 leaves it.
        let out = out.unwrap();
        let mut x2 = x.data().to_vec();
        x2[0] = 0.0;
        x2[1] = 0.0;
        let x2 = Tensor::new(vec![j, 2], x2).unwrap();
        let out2 = hgcn_update(&x2, &h, &theta).unwrap();
        for c in 0..2 {
            assert_eq!(out.get(&[3, c]), out2.get(&[3, c]));
            assert_eq!(out.get(&[4, c]), out2.get(&[4, c]));
        }
    }

    #[test]
    fn hgcn_single_all_joint_edge_is_rank_one() {
        let j = 4;
        let h = IncidenceMatrix::from_edges(j, &[vec![0, 1, 2, 3]]);
        // H W De^{-1} H^T = (1/J) * all-ones; degrees are all 1, so the
        // propagation matrix is exactly (1/J) ones.
        let x = Tensor::eye(j);
        let out = hgcn_update(&x, &h, &Tensor::eye(j)).unwrap();
        for v in 0..j {
            for w in 0..j {
                assert!((out.get(&[v, w]) - 0.25).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hgcn_is_permutation_equivariant() {
        let mut rng = Rng::new(21);
        let j = 5;
        let x = Tensor::random_normal(&[j, 3], 1.0, &mut rng);
        let theta = Tensor::random_normal(&[3, 2], 1.0, &mut rng);
        let edges = vec![vec![0, 1, 2], vec![1, 3, 4], vec![0, 2, 4]];
        let h = IncidenceMatrix::from_edges(j, &edges);
        let out = hgcn_update(&x, &h, &theta).unwrap();

        let perm = vec![4, 2, 0, 1, 3];
        let px = permute_rows(&x, &perm);
        let p_edges: Vec<Vec<usize>> = edges
            .iter()
            .map(|e| {
                let mut m: Vec<usize> = e.iter().map(|&v| perm[v]).collect();
                m.sort_unstable();
                m
            })
            .collect();
        let ph = IncidenceMatrix::from_edges(j, &p_edges);
        let pout = hgcn_update(&px, &ph, &theta).unwrap();
        assert!(pout.max_abs_diff(&permute_rows(&out, &perm)) < 1e-12);
    }

    #[test]
    fn hgcn_rejects_zero_degrees() {
        let h = IncidenceMatrix::from_edges(3, &[vec![0, 1]]);
        let x = Tensor::zeros(&[3, 2]);
        assert!(hgcn_update(&x, &h, &Tensor::eye(2)).is_err());
    }
}
