//! Optimal one-to-one assignment of ground-truth targets to prediction slots.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{giou, BBox};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatchError {
    #[error("cost matrix has {rows} rows but only {cols} columns")]
    TooFewColumns { rows: usize, cols: usize },
    #[error("cost matrix data has {got} entries, expected {rows}x{cols}")]
    ShapeMismatch { rows: usize, cols: usize, got: usize },
    #[error("non-finite cost at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
}

/// Dense row-major cost matrix, rows are targets and columns are queries.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, MatchError> {
        if data.len() != rows * cols {
            return Err(MatchError::ShapeMismatch {
                rows,
                cols,
                got: data.len(),
            });
        }
        if cols < rows {
            return Err(MatchError::TooFewColumns { rows, cols });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(MatchError::NonFinite {
                row: i / cols.max(1),
                col: i % cols.max(1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(
        rows: usize,
        cols: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self, MatchError> {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self::new(rows, cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }
}

/// Injective map from rows (targets) to columns (queries).
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `row_to_col[r]` is the column assigned to row `r`.
    pub row_to_col: Vec<usize>,
    /// Sum of the assigned costs, accumulated in row order.
    pub total_cost: f64,
}

impl Assignment {
    /// Inverse view: for every column, the row assigned to it (if any).
    pub fn col_to_row(&self, cols: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; cols];
        for (r, &c) in self.row_to_col.iter().enumerate() {
            out[c] = Some(r);
        }
        out
    }
}

/// Sums `costs[r][assignment[r]]` over rows in order.
pub fn assignment_cost(costs: &CostMatrix, row_to_col: &[usize]) -> f64 {
    row_to_col
        .iter()
        .enumerate()
        .map(|(r, &c)| costs.get(r, c))
        .sum()
}

/// Minimum-cost assignment via shortest augmenting paths with dual potentials
/// (Kuhn-Munkres in the Jonker-Volgenant formulation), `O(rows^2 * cols)`.
///
/// Ties are broken towards the lowest column index when scanning, so the
/// result is a deterministic function of the matrix.
pub fn hungarian(costs: &CostMatrix) -> Assignment {
    let n = costs.rows;
    let m = costs.cols;
    if n == 0 {
        return Assignment {
            row_to_col: Vec::new(),
            total_cost: 0.0,
        };
    }
    // 1-based indexing for rows and columns; index 0 is the virtual source.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut col_owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    let mut minv = vec![f64::INFINITY; m + 1];
    let mut used = vec![false; m + 1];

    for i in 1..=n {
        col_owner[0] = i;
        let mut j0 = 0usize;
        minv.iter_mut().for_each(|x| *x = f64::INFINITY);
        used.iter_mut().for_each(|x| *x = false);
        loop {
            used[j0] = true;
            let i0 = col_owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = costs.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[col_owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_owner[j0] = col_owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut row_to_col = vec![0usize; n];
    for j in 1..=m {
        if col_owner[j] != 0 {
            row_to_col[col_owner[j] - 1] = j - 1;
        }
    }
    let total_cost = assignment_cost(costs, &row_to_col);
    Assignment {
        row_to_col,
        total_cost,
    }
}

/// Weights of the set-prediction matching cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchWeights {
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for MatchWeights {
    fn default() -> Self {
        Self {
            class: 1.0,
            l1: 5.0,
            giou: 2.0,
        }
    }
}

/// Cost of explaining `target` with a query that assigns probability
/// `target_class_prob` to the target's class and predicts `pred_box`.
///
/// Uses the raw probability rather than its log, as DETR's matcher does.
pub fn match_cost(
    target_class_prob: f64,
    pred_box: &BBox,
    target_box: &BBox,
    weights: &MatchWeights,
) -> f64 {
    let l1: f64 = pred_box
        .as_array()
        .iter()
        .zip(target_box.as_array())
        .map(|(a, b)| (a - b).abs())
        .sum();
    -weights.class * target_class_prob
        + weights.l1 * l1
        + weights.giou * (1.0 - giou(pred_box, target_box))
}
