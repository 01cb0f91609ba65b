//! Statistical distances between equal-size point clouds.
//!
//! All optimal-transport values use uniform masses `1/m`, so the exact and
//! auction distances are the mean matched distance and the Sinkhorn value is
//! `⟨γ, M⟩` with row and column sums `1/m`.

mod auction;
mod hungarian;
mod sinkhorn;

pub use auction::{auction_assignment, auction_emd, AuctionConfig};
pub use hungarian::min_cost_assignment;
pub use sinkhorn::{sinkhorn, sinkhorn_plan, SinkhornConfig};

use serde::{Deserialize, Serialize};

use crate::geometry::PointCloud;
use crate::tensor::{Graph, Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostMetric {
    /// Euclidean distance between positions.
    Euclidean,
    /// Euclidean distance between positions concatenated with features.
    Joint,
}

/// Dense `m × n` pairwise distance matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    metric: CostMetric,
}

impl CostMatrix {
    /// Distances between the rows of two `[m, w]` / `[n, w]` tensors.
    pub fn between_rows(x: &Tensor, y: &Tensor, metric: CostMetric) -> Result<Self> {
        if x.rank() != 2 || y.rank() != 2 || x.row_len() != y.row_len() {
            return Err(Error::ShapeMismatch {
                op: "cost_matrix",
                lhs: x.shape().to_vec(),
                rhs: y.shape().to_vec(),
            });
        }
        let (m, n) = (x.rows(), y.rows());
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            let xi = x.row(i);
            for j in 0..n {
                let d2: f64 = xi
                    .iter()
                    .zip(y.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                data.push(d2.sqrt());
            }
        }
        Ok(CostMatrix {
            rows: m,
            cols: n,
            data,
            metric,
        })
    }

    pub fn euclidean(a: &PointCloud, b: &PointCloud) -> Result<Self> {
        Self::between_rows(
            &a.positions_tensor(),
            &b.positions_tensor(),
            CostMetric::Euclidean,
        )
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "{} costs do not fill {rows}x{cols}",
                data.len()
            )));
        }
        if data.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(Error::invalid("costs must be finite and non-negative"));
        }
        Ok(CostMatrix {
            rows,
            cols,
            data,
            metric: CostMetric::Euclidean,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn metric(&self) -> CostMetric {
        self.metric
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn max(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &c| m.max(c))
    }

    /// `⟨plan, M⟩_F`.
    pub fn dot(&self, plan: &[f64]) -> f64 {
        self.data.iter().zip(plan).map(|(c, p)| c * p).sum()
    }

    fn require_square(&self) -> Result<usize> {
        if self.rows != self.cols || self.rows == 0 {
            return Err(Error::invalid(format!(
                "transport needs two non-empty clouds of equal size, got {} and {}",
                self.rows, self.cols
            )));
        }
        Ok(self.rows)
    }
}

/// L2 cost on positions concatenated with latent features.
pub fn sim_cost_matrix(a: &PointCloud, b: &PointCloud) -> Result<CostMatrix> {
    if a.channels() != b.channels() || a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op: "sim_cost_matrix",
            lhs: vec![a.len(), 3 + a.channels()],
            rhs: vec![b.len(), 3 + b.channels()],
        });
    }
    CostMatrix::between_rows(&a.joint_tensor(), &b.joint_tensor(), CostMetric::Joint)
}

/// A coupling between two uniform empirical measures of size `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub m: usize,
    /// Row-major `m × m`.
    pub gamma: Vec<f64>,
    /// `⟨γ, M⟩` on the unnormalised cost.
    pub cost: f64,
    /// `max_i |Σ_j γ_ij − 1/m|`.
    pub row_residual: f64,
    /// `max_j |Σ_i γ_ij − 1/m|`.
    pub col_residual: f64,
    /// Entropic dual objective at the returned potentials, in cost units;
    /// `None` for direct solvers.
    pub dual: Option<f64>,
    /// Solver iterations used, zero for direct solvers.
    pub iterations: usize,
    pub converged: bool,
}

impl TransportPlan {
    /// Plan `γ_{i σ(i)} = 1/m` from an assignment.
    pub fn from_assignment(cost: &CostMatrix, assignment: &[usize]) -> Self {
        let m = assignment.len();
        let mut gamma = vec![0.0; m * m];
        for (i, &j) in assignment.iter().enumerate() {
            gamma[i * m + j] = 1.0 / m as f64;
        }
        Self::from_gamma(cost, gamma, 0, true)
    }

    pub(crate) fn from_gamma(
        cost: &CostMatrix,
        gamma: Vec<f64>,
        iterations: usize,
        converged: bool,
    ) -> Self {
        let m = cost.rows;
        let target = 1.0 / m as f64;
        let mut row_residual = 0.0f64;
        let mut cols = vec![0.0; m];
        for i in 0..m {
            let row = &gamma[i * m..(i + 1) * m];
            row_residual = row_residual.max((row.iter().sum::<f64>() - target).abs());
            for (c, g) in cols.iter_mut().zip(row) {
                *c += g;
            }
        }
        let col_residual = cols.iter().fold(0.0f64, |r, c| r.max((c - target).abs()));
        TransportPlan {
            m,
            cost: cost.dot(&gamma),
            gamma,
            row_residual,
            col_residual,
            dual: None,
            iterations,
            converged,
        }
    }

    pub fn max_residual(&self) -> f64 {
        self.row_residual.max(self.col_residual)
    }
}

/// `Σ_{x∈a} min_y ‖x−y‖ + Σ_{y∈b} min_x ‖x−y‖` over positions.
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    let cost = CostMatrix::euclidean(a, b)?;
    let (m, n) = (cost.rows, cost.cols);
    let forward: f64 = (0..m)
        .map(|i| (0..n).map(|j| cost.get(i, j)).fold(f64::INFINITY, f64::min))
        .sum();
    let backward: f64 = (0..n)
        .map(|j| (0..m).map(|i| cost.get(i, j)).fold(f64::INFINITY, f64::min))
        .sum();
    Ok(forward + backward)
}

/// Exact uniform-mass EMD on positions via min-cost assignment.
pub fn exact_emd(a: &PointCloud, b: &PointCloud) -> Result<(f64, TransportPlan)> {
    let cost = CostMatrix::euclidean(a, b)?;
    let plan = exact_plan(&cost)?;
    Ok((plan.cost, plan))
}

pub fn exact_plan(cost: &CostMatrix) -> Result<TransportPlan> {
    cost.require_square()?;
    let assignment = min_cost_assignment(cost);
    Ok(TransportPlan::from_assignment(cost, &assignment))
}

/// Reconstruction losses available to training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Chamfer,
    Auction,
    Sinkhorn,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "chamfer" => Ok(LossKind::Chamfer),
            "auction" | "auction_emd" => Ok(LossKind::Auction),
            "sinkhorn" => Ok(LossKind::Sinkhorn),
            other => Err(Error::invalid(format!("unknown loss {other:?}"))),
        }
    }
}

/// Loss settings shared by the training loops.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub kind: LossKind,
    pub sinkhorn: SinkhornConfig,
    pub auction: AuctionConfig,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kind: LossKind::Sinkhorn,
            sinkhorn: SinkhornConfig::training(),
            auction: AuctionConfig::default(),
        }
    }
}

/// Differentiable distance between the rows of `pred` and `target`.
///
/// Transport plans are computed on the forward values and held fixed, so the
/// gradient is that of `⟨γ, M(pred, target)⟩` with `γ` constant. `cost_scale`
/// overrides the Sinkhorn normaliser (pass the batch maximum).
pub fn distance_loss(
    g: &mut Graph,
    pred: Var,
    target: Var,
    cfg: &LossConfig,
    cost_scale: Option<f64>,
) -> Result<Var> {
    match cfg.kind {
        LossKind::Chamfer => g.chamfer(pred, target),
        LossKind::Auction => {
            let cost =
                CostMatrix::between_rows(g.value(pred), g.value(target), CostMetric::Euclidean)?;
            let assignment = auction_assignment(&cost, &cfg.auction)?;
            let plan = TransportPlan::from_assignment(&cost, &assignment);
            g.transport_cost(pred, target, &plan.gamma)
        }
        LossKind::Sinkhorn => {
            let cost =
                CostMatrix::between_rows(g.value(pred), g.value(target), CostMetric::Euclidean)?;
            let mut sc = cfg.sinkhorn.clone();
            if cost_scale.is_some() {
                sc.cost_scale = cost_scale;
            }
            let plan = sinkhorn_plan(&cost, &sc)?;
            g.transport_cost(pred, target, &plan.gamma)
        }
    }
}

/// Largest positional distance over a batch of (prediction, target) pairs.
pub fn batch_cost_scale(pairs: &[(&Tensor, &Tensor)]) -> Result<f64> {
    let mut scale = 0.0f64;
    for (x, y) in pairs {
        scale = scale.max(CostMatrix::between_rows(x, y, CostMetric::Euclidean)?.max());
    }
    Ok(scale)
}
