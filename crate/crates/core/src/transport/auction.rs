//! Forward auction for the assignment problem with ε-scaling.
//!
//! Bidders are processed one at a time from a FIFO queue (Gauss-Seidel), so
//! the result is deterministic. Each phase ends with a complete assignment
//! whose total cost is within `m·ε` of optimal.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::CostMatrix;
use crate::geometry::PointCloud;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuctionConfig {
    /// The last phase runs at the first ε below `max_cost / (2·m·scale)`.
    pub scale: f64,
    /// Ratio between consecutive ε values.
    pub reduction: f64,
    /// Total bid budget across all phases.
    pub max_bids: usize,
}

impl Default for AuctionConfig {
    fn default() -> Self {
        AuctionConfig {
            scale: 64.0,
            reduction: 4.0,
            max_bids: 20_000_000,
        }
    }
}

/// Approximate minimum-cost assignment by ε-scaled auction.
pub fn auction_assignment(cost: &CostMatrix, cfg: &AuctionConfig) -> Result<Vec<usize>> {
    let m = cost.require_square()?;
    if !(cfg.scale > 0.0 && cfg.reduction > 1.0) {
        return Err(Error::invalid("auction needs scale > 0 and reduction > 1"));
    }
    let max_cost = cost.max();
    if m == 1 || max_cost == 0.0 {
        return Ok((0..m).collect());
    }
    let eps_final = max_cost / (2.0 * m as f64 * cfg.scale);
    let mut eps = max_cost / 8.0;
    let mut prices = vec![0.0f64; m];
    let mut owner: Vec<Option<usize>> = vec![None; m];
    let mut assigned: Vec<Option<usize>> = vec![None; m];
    let mut best: Option<Vec<usize>> = None;
    let mut bids = 0usize;
    loop {
        owner.fill(None);
        assigned.fill(None);
        let mut queue: VecDeque<usize> = (0..m).collect();
        while let Some(i) = queue.pop_front() {
            if bids == cfg.max_bids {
                let best_cost = best
                    .as_ref()
                    .map_or(f64::INFINITY, |a| assignment_cost(cost, a) / m as f64);
                return Err(Error::AuctionNotConverged {
                    iterations: bids,
                    best_cost,
                });
            }
            bids += 1;
            let (mut j1, mut v1, mut v2) = (0usize, f64::NEG_INFINITY, f64::NEG_INFINITY);
            for j in 0..m {
                let v = -cost.get(i, j) - prices[j];
                if v > v1 {
                    v2 = v1;
                    v1 = v;
                    j1 = j;
                } else if v > v2 {
                    v2 = v;
                }
            }
            prices[j1] += v1 - v2 + eps;
            if let Some(prev) = owner[j1].replace(i) {
                assigned[prev] = None;
                queue.push_back(prev);
            }
            assigned[i] = Some(j1);
        }
        let complete: Vec<usize> = assigned
            .iter()
            .map(|a| a.expect("auction phase leaves no bidder unassigned"))
            .collect();
        best = Some(complete);
        if eps < eps_final {
            break;
        }
        eps /= cfg.reduction;
    }
    Ok(best.expect("at least one phase"))
}

fn assignment_cost(cost: &CostMatrix, assignment: &[usize]) -> f64 {
    assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| cost.get(i, j))
        .sum()
}

/// Auction-approximated EMD on positions, normalised per point like
/// [`exact_emd`](super::exact_emd).
pub fn auction_emd(a: &PointCloud, b: &PointCloud, cfg: &AuctionConfig) -> Result<f64> {
    let cost = CostMatrix::euclidean(a, b)?;
    let assignment = auction_assignment(&cost, cfg)?;
    Ok(assignment_cost(&cost, &assignment) / assignment.len() as f64)
}
