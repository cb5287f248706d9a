//! Executable verification that the corruption chains actually mix.
//!
//! The reverse process is only trainable because the forward chains converge
//! to the uniform distribution regardless of the input. Rather than trusting
//! that on paper, this module checks the three load-bearing properties on
//! the concrete matrices:
//!
//! 1. **doubly stochastic** — rows and columns both sum to 1, so uniform is
//!    a stationary distribution ([`check_doubly_stochastic`]);
//! 2. **ergodic (sufficient condition)** — the directed graph of non-zero
//!    entries is strongly connected and at least one state has a self-loop,
//!    which rules out periodicity ([`check_ergodic`]);
//! 3. **convergence** — the worst-case total-variation distance between the
//!    `t`-step distribution and uniform is non-increasing and actually
//!    reaches a target threshold at finite `t` ([`stationary_gap`]).

use ndarray::Array2;
use serde::Serialize;

use crate::error::{Error, Result};

/// Row/column sum deviations of a candidate doubly stochastic matrix.
#[derive(Debug, Clone, Serialize)]
pub struct DoublyStochasticReport {
    /// Largest `|row_sum - 1|`.
    pub max_row_dev: f64,
    /// Largest `|col_sum - 1|`.
    pub max_col_dev: f64,
    /// Tolerance the verdict was computed against.
    pub tol: f64,
    /// True when both deviations are within `tol`.
    pub ok: bool,
}

/// Measures how far `m` is from doubly stochastic.
pub fn check_doubly_stochastic(m: &Array2<f64>, tol: f64) -> Result<DoublyStochasticReport> {
    let n = square_dim(m)?;
    let mut max_row_dev = 0.0f64;
    let mut max_col_dev = 0.0f64;
    for i in 0..n {
        max_row_dev = max_row_dev.max((m.row(i).sum() - 1.0).abs());
        max_col_dev = max_col_dev.max((m.column(i).sum() - 1.0).abs());
    }
    Ok(DoublyStochasticReport {
        max_row_dev,
        max_col_dev,
        tol,
        ok: max_row_dev <= tol && max_col_dev <= tol,
    })
}

/// Connectivity/aperiodicity facts about the non-zero structure of a chain.
#[derive(Debug, Clone, Serialize)]
pub struct ErgodicityReport {
    /// Number of states.
    pub n_states: usize,
    /// Every state reaches every other state through non-zero transitions.
    pub strongly_connected: bool,
    /// Some state can stay put, which makes the period 1.
    pub has_self_loop: bool,
}

impl ErgodicityReport {
    /// Sufficient condition for ergodicity: connected and aperiodic.
    pub fn is_ergodic(&self) -> bool {
        self.strongly_connected && self.has_self_loop
    }
}

/// Checks the sufficient ergodicity condition on the non-zero graph of `m`.
pub fn check_ergodic(m: &Array2<f64>) -> Result<ErgodicityReport> {
    let n = square_dim(m)?;
    let reach = |transpose: bool| -> usize {
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        let mut count = 1;
        while let Some(v) = stack.pop() {
            for w in 0..n {
                let edge = if transpose { m[[w, v]] } else { m[[v, w]] };
                if edge != 0.0 && !seen[w] {
                    seen[w] = true;
                    count += 1;
                    stack.push(w);
                }
            }
        }
        count
    };
    // Strong connectivity via double reachability from state 0.
    let strongly_connected = reach(false) == n && reach(true) == n;
    let has_self_loop = (0..n).any(|i| m[[i, i]] != 0.0);
    Ok(ErgodicityReport {
        n_states: n,
        strongly_connected,
        has_self_loop,
    })
}

/// Worst-case convergence curve of a chain toward the uniform distribution.
#[derive(Debug, Clone, Serialize)]
pub struct ChainReport {
    /// Number of states.
    pub n_states: usize,
    /// Threshold used for [`ChainReport::t_star`], if one was requested.
    pub threshold: Option<f64>,
    /// First step at which the curve dropped below the threshold.
    pub t_star: Option<usize>,
    /// `tv_curve[t]` = max over start states of the total-variation distance
    /// between the `t`-step distribution and uniform. Entry 0 is the point
    /// mass: `1 - 1/n`.
    pub tv_curve: Vec<f64>,
}

/// Tracks `max_start TV(M^t[start, .], uniform)` for `t = 0..=t_max`.
///
/// Stops early once the curve drops below `stop_below` (the remaining steps
/// are omitted from the curve). The matrix powers use the column sparsity of
/// `m`, so sparse kernels advance in `O(n^2 * nnz_per_col)` instead of
/// `O(n^3)`.
pub fn stationary_gap(
    m: &Array2<f64>,
    t_max: usize,
    stop_below: Option<f64>,
) -> Result<ChainReport> {
    let n = square_dim(m)?;
    for i in 0..n {
        if (m.row(i).sum() - 1.0).abs() > 1e-6 || m.row(i).iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "row {i} is not a probability distribution"
            )));
        }
    }
    // Column adjacency: P_{t+1}[i, j] = sum_r P_t[i, r] * m[r, j].
    let cols: Vec<Vec<(u32, f64)>> = (0..n)
        .map(|j| {
            (0..n)
                .filter_map(|r| {
                    let v = m[[r, j]];
                    (v != 0.0).then_some((r as u32, v))
                })
                .collect()
        })
        .collect();

    let uniform = 1.0 / n as f64;
    let max_tv = |p: &[f64]| -> f64 {
        // p is the dense n x n power, row-major.
        (0..n)
            .map(|i| {
                p[i * n..(i + 1) * n]
                    .iter()
                    .map(|&v| (v - uniform).abs())
                    .sum::<f64>()
                    / 2.0
            })
            .fold(0.0, f64::max)
    };

    // t = 0: identity, every row is a point mass.
    let mut tv_curve = vec![1.0 - uniform];
    let mut t_star = stop_below.and_then(|th| (tv_curve[0] < th).then_some(0));

    let mut power = vec![0.0f64; n * n];
    for i in 0..n {
        power[i * n + i] = 1.0;
    }
    let mut next = vec![0.0f64; n * n];
    for t in 1..=t_max {
        if t_star.is_some() {
            break;
        }
        for i in 0..n {
            let prow = &power[i * n..(i + 1) * n];
            let orow = &mut next[i * n..(i + 1) * n];
            for (j, col) in cols.iter().enumerate() {
                orow[j] = col.iter().map(|&(r, v)| prow[r as usize] * v).sum();
            }
        }
        std::mem::swap(&mut power, &mut next);
        let tv = max_tv(&power);
        tv_curve.push(tv);
        if let Some(th) = stop_below {
            if tv < th {
                t_star = Some(t);
            }
        }
    }
    Ok(ChainReport {
        n_states: n,
        threshold: stop_below,
        t_star,
        tv_curve,
    })
}

fn square_dim(m: &Array2<f64>) -> Result<usize> {
    if m.nrows() != m.ncols() || m.nrows() == 0 {
        return Err(Error::InvalidArgument(format!(
            "expected a non-empty square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(m.nrows())
}
