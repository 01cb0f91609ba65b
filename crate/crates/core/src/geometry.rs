//! Point clouds and the spatial primitives built on them: exact k-nearest
//! neighbour graphs, farthest point sampling and a neighbourhood-truncated RBF
//! kernel density estimate.

use crate::tensor::Tensor;
use crate::{Error, Result};

/// `N` points in 3-space, each carrying `channels` feature values.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    positions: Vec<[f64; 3]>,
    features: Vec<f64>,
    channels: usize,
}

impl PointCloud {
    pub fn new(positions: Vec<[f64; 3]>) -> Result<Self> {
        Self::with_features(positions, Vec::new(), 0)
    }

    pub fn with_features(
        positions: Vec<[f64; 3]>,
        features: Vec<f64>,
        channels: usize,
    ) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::invalid("point cloud needs at least one point"));
        }
        if features.len() != positions.len() * channels {
            return Err(Error::invalid(format!(
                "{} feature values do not fill {} points x {channels} channels",
                features.len(),
                positions.len()
            )));
        }
        if positions
            .iter()
            .flatten()
            .chain(&features)
            .any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite("point cloud coordinates".into()));
        }
        Ok(PointCloud {
            positions,
            features,
            channels,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn feature_row(&self, i: usize) -> &[f64] {
        &self.features[i * self.channels..(i + 1) * self.channels]
    }

    pub fn positions_tensor(&self) -> Tensor {
        Tensor::from_rows(&self.positions)
    }

    pub fn features_tensor(&self) -> Tensor {
        Tensor::new(vec![self.len(), self.channels], self.features.clone()).expect("feature shape")
    }

    /// Positions and features concatenated per point, `[N, 3 + C]`.
    pub fn joint_tensor(&self) -> Tensor {
        let w = 3 + self.channels;
        let mut data = Vec::with_capacity(self.len() * w);
        for i in 0..self.len() {
            data.extend_from_slice(&self.positions[i]);
            data.extend_from_slice(self.feature_row(i));
        }
        Tensor::new(vec![self.len(), w], data).expect("joint shape")
    }

    /// Splits a `[N, 3 + C]` tensor back into a cloud.
    pub fn from_joint(t: &Tensor) -> Result<Self> {
        if t.rank() != 2 || t.row_len() < 3 {
            return Err(Error::invalid(format!(
                "expected [N, 3+C] tensor, got {:?}",
                t.shape()
            )));
        }
        let c = t.row_len() - 3;
        let mut pos = Vec::with_capacity(t.rows());
        let mut feats = Vec::with_capacity(t.rows() * c);
        for i in 0..t.rows() {
            let r = t.row(i);
            pos.push([r[0], r[1], r[2]]);
            feats.extend_from_slice(&r[3..]);
        }
        Self::with_features(pos, feats, c)
    }

    pub fn without_features(&self) -> Self {
        PointCloud {
            positions: self.positions.clone(),
            features: Vec::new(),
            channels: 0,
        }
    }

    pub fn translated(&self, t: [f64; 3]) -> Self {
        let mut out = self.clone();
        for p in &mut out.positions {
            for k in 0..3 {
                p[k] += t[k];
            }
        }
        out
    }

    /// Applies `p ↦ R p + t` to every position.
    pub fn transformed(&self, rot: &[[f64; 3]; 3], t: [f64; 3]) -> Self {
        let mut out = self.clone();
        for p in &mut out.positions {
            let q = *p;
            for (r, row) in rot.iter().enumerate() {
                p[r] = row[0] * q[0] + row[1] * q[1] + row[2] * q[2] + t[r];
            }
        }
        out
    }

    /// Reorders points so that point `i` of the result is point `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let positions = perm.iter().map(|&i| self.positions[i]).collect();
        let features = perm
            .iter()
            .flat_map(|&i| self.feature_row(i).iter().copied())
            .collect();
        PointCloud {
            positions,
            features,
            channels: self.channels,
        }
    }

    pub fn subset(&self, index: &[usize]) -> Self {
        self.permuted(index)
    }
}

#[inline]
pub fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

#[inline]
pub fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    dist2(a, b).sqrt()
}

/// Fixed-size neighbourhood lists, stored flat as `N × k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnnGraph {
    k: usize,
    include_self: bool,
    neighbors: Vec<usize>,
}

impl KnnGraph {
    /// Wraps explicit neighbour lists (each of length `k`).
    pub fn from_lists(lists: &[Vec<usize>], include_self: bool) -> Result<Self> {
        let k = lists.first().map_or(0, Vec::len);
        if k == 0 || lists.iter().any(|l| l.len() != k) {
            return Err(Error::invalid(
                "neighbour lists must be non-empty and equally long",
            ));
        }
        let n = lists.len();
        if lists.iter().flatten().any(|&j| j >= n) {
            return Err(Error::invalid("neighbour index out of range"));
        }
        Ok(KnnGraph {
            k,
            include_self,
            neighbors: lists.concat(),
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.neighbors.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn includes_self(&self) -> bool {
        self.include_self
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i * self.k..(i + 1) * self.k]
    }

    /// All lists back to back; entry `i * k + r` is the `r`-th neighbour of `i`.
    pub fn flat(&self) -> &[usize] {
        &self.neighbors
    }

    /// Center index of each flat entry.
    pub fn centers(&self) -> Vec<usize> {
        (0..self.len())
            .flat_map(|i| std::iter::repeat_n(i, self.k))
            .collect()
    }
}

/// Exact k-NN graph with the point itself as first entry of its own list.
pub fn build_knn_graph(cloud: &PointCloud, k: usize) -> Result<KnnGraph> {
    knn_graph(cloud.positions(), k, true)
}

/// Exact brute-force k-NN graph over `positions`.
///
/// With `include_self` each list is the point itself followed by its `k − 1`
/// nearest other points; otherwise the `k` nearest other points. Distance
/// ties go to the smaller index.
pub fn knn_graph(positions: &[[f64; 3]], k: usize, include_self: bool) -> Result<KnnGraph> {
    let n = positions.len();
    let available = if include_self { n } else { n.saturating_sub(1) };
    if k == 0 || k > available {
        return Err(Error::invalid(format!(
            "k = {k} neighbours requested from {n} points (include_self = {include_self})"
        )));
    }
    let others = if include_self { k - 1 } else { k };
    let mut neighbors = Vec::with_capacity(n * k);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
    for (i, p) in positions.iter().enumerate() {
        cand.clear();
        cand.extend(
            positions
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(j, q)| (dist2(p, q), j)),
        );
        let by_dist = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if others > 0 && others < cand.len() {
            cand.select_nth_unstable_by(others - 1, by_dist);
        }
        let head = &mut cand[..others];
        head.sort_unstable_by(by_dist);
        if include_self {
            neighbors.push(i);
        }
        neighbors.extend(head.iter().map(|&(_, j)| j));
    }
    Ok(KnnGraph {
        k,
        include_self,
        neighbors,
    })
}

/// Greedy farthest point sampling starting from `start`.
///
/// Each pick maximises the distance to the nearest already-selected point;
/// ties go to the smaller index.
pub fn farthest_point_sampling(
    positions: &[[f64; 3]],
    m: usize,
    start: usize,
) -> Result<Vec<usize>> {
    let n = positions.len();
    if m == 0 || m > n {
        return Err(Error::invalid(format!("cannot sample {m} of {n} points")));
    }
    if start >= n {
        return Err(Error::invalid(format!(
            "start index {start} out of range for {n} points"
        )));
    }
    let mut picked = Vec::with_capacity(m);
    let mut nearest = vec![f64::INFINITY; n];
    let mut cur = start;
    picked.push(cur);
    while picked.len() < m {
        let mut best = usize::MAX;
        let mut best_d = -1.0;
        for (j, q) in positions.iter().enumerate() {
            let d = dist2(&positions[cur], q);
            if d < nearest[j] {
                nearest[j] = d;
            }
            if nearest[j] > best_d {
                best_d = nearest[j];
                best = j;
            }
        }
        cur = best;
        picked.push(cur);
    }
    Ok(picked)
}

/// Mean distance over all (center, non-self neighbour) pairs of the graph.
pub fn kernel_bandwidth(positions: &[[f64; 3]], graph: &KnnGraph) -> Result<f64> {
    if graph.k() < 2 && graph.includes_self() {
        return Err(Error::invalid(
            "bandwidth needs k >= 2 so that distinct neighbours exist",
        ));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..graph.len() {
        for &j in graph.neighbors(i) {
            if j != i {
                total += dist(&positions[i], &positions[j]);
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::invalid("graph has no distinct neighbour pairs"));
    }
    Ok(total / count as f64)
}

/// Unnormalised RBF density estimate at each point.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityEstimate {
    pub sigma: f64,
    pub values: Vec<f64>,
}

impl DensityEstimate {
    /// Densities as an `[N, 1]` column for broadcasting against features.
    pub fn column(&self) -> Tensor {
        Tensor::new(vec![self.values.len(), 1], self.values.clone()).expect("density shape")
    }
}

/// `Σ_{j∈N(i)} exp(−‖p_i − p_j‖² / 2σ²)` truncated to the graph neighbourhood.
pub fn kde_density(
    positions: &[[f64; 3]],
    graph: &KnnGraph,
    sigma: f64,
) -> Result<DensityEstimate> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!(
            "kernel bandwidth must be positive, got {sigma}"
        )));
    }
    let denom = 2.0 * sigma * sigma;
    let values = (0..graph.len())
        .map(|i| {
            graph
                .neighbors(i)
                .iter()
                .map(|&j| (-dist2(&positions[i], &positions[j]) / denom).exp())
                .sum::<f64>()
        })
        .collect();
    Ok(DensityEstimate { sigma, values })
}

/// Bandwidth from the graph, then the density.
pub fn estimate_density(positions: &[[f64; 3]], graph: &KnnGraph) -> Result<DensityEstimate> {
    let sigma = kernel_bandwidth(positions, graph)?;
    kde_density(positions, graph, sigma)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(v: &[[f64; 3]]) -> PointCloud {
        PointCloud::new(v.to_vec()).unwrap()
    }

    #[test]
    fn colinear_knn() {
        let c = pts(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        let g = build_knn_graph(&c, 2).unwrap();
        assert_eq!(g.neighbors(0), &[0, 1]);
        assert_eq!(g.neighbors(1), &[1, 0]);
        assert_eq!(g.neighbors(2), &[2, 1]);
    }

    #[test]
    fn k1_is_self_only() {
        let c = pts(&[[0.0, 0.0, 0.0], [1.0, 5.0, 0.0], [2.0, 0.0, 3.0]]);
        let g = build_knn_graph(&c, 1).unwrap();
        for i in 0..3 {
            assert_eq!(g.neighbors(i), &[i]);
        }
    }

    #[test]
    fn duplicates_break_ties_by_index() {
        let c = pts(&[[0.0; 3], [1.0, 0.0, 0.0], [0.0; 3], [0.0; 3]]);
        let g = build_knn_graph(&c, 3).unwrap();
        assert_eq!(g.neighbors(0), &[0, 2, 3]);
        assert_eq!(g.neighbors(3), &[3, 0, 2]);
        assert_eq!(g, build_knn_graph(&c, 3).unwrap());
    }

    #[test]
    fn knn_k_too_large() {
        let c = pts(&[[0.0; 3], [1.0, 0.0, 0.0]]);
        assert!(build_knn_graph(&c, 3).is_err());
        assert!(knn_graph(c.positions(), 2, false).is_err());
    }

    #[test]
    fn fps_square_corners() {
        let sq = [
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [1.0, 1.0, 0.0],
        ];
        assert_eq!(farthest_point_sampling(&sq, 2, 0).unwrap(), vec![0, 3]);
        assert_eq!(farthest_point_sampling(&sq, 1, 2).unwrap(), vec![2]);
        let mut all = farthest_point_sampling(&sq, 4, 0).unwrap();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3]);
        assert!(farthest_point_sampling(&sq, 5, 0).is_err());
    }

    #[test]
    fn bandwidth_of_pair() {
        let c = pts(&[[0.0; 3], [0.0, 2.5, 0.0]]);
        let g = build_knn_graph(&c, 2).unwrap();
        assert!((kernel_bandwidth(c.positions(), &g).unwrap() - 2.5).abs() < 1e-15);
        let g1 = build_knn_graph(&c, 1).unwrap();
        assert!(kernel_bandwidth(c.positions(), &g1).is_err());
    }

    #[test]
    fn bandwidth_of_chain_tends_to_spacing() {
        let h = 0.3;
        let chain: Vec<[f64; 3]> = (0..2000).map(|i| [i as f64 * h, 0.0, 0.0]).collect();
        let g = knn_graph(&chain, 2, true).unwrap();
        assert!((kernel_bandwidth(&chain, &g).unwrap() - h).abs() < 1e-9);
    }

    #[test]
    fn pair_density() {
        let d = 1.7;
        let c = pts(&[[0.0; 3], [d, 0.0, 0.0]]);
        let g = build_knn_graph(&c, 2).unwrap();
        let est = kde_density(c.positions(), &g, d).unwrap();
        let expect = 1.0 + (-0.5f64).exp();
        for v in est.values {
            assert!((v - expect).abs() < 1e-12);
        }
        assert!((expect - 1.6065).abs() < 1e-4);
    }

    #[test]
    fn grid_interior_densities_equal() {
        let mut grid = Vec::new();
        for x in 0..7 {
            for y in 0..7 {
                grid.push([x as f64, y as f64, 0.0]);
            }
        }
        let g = knn_graph(&grid, 5, true).unwrap();
        let est = kde_density(&grid, &g, 1.0).unwrap();
        let center = est.values[3 * 7 + 3];
        for x in 1..6 {
            for y in 1..6 {
                assert!((est.values[x * 7 + y] - center).abs() < 1e-12);
            }
        }
        assert!(est.values.iter().all(|&v| v > 0.0));
    }
}
