//! Corpus and inference metrics.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

use crate::rl::compute_reward;
use crate::trajectory::{TokenizedTrajectory, Trajectory};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalyticsError {
    #[error("degenerate table: {0}")]
    DegenerateTable(String),
    #[error("domain error: {0}")]
    DomainError(String),
}

/// Rows: answer correct / incorrect. Columns: code succeeded / failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ContingencyTable2x2 {
    pub a: u64,
    pub b: u64,
    pub c: u64,
    pub d: u64,
}

impl ContingencyTable2x2 {
    pub fn new(a: u64, b: u64, c: u64, d: u64) -> Self {
        ContingencyTable2x2 { a, b, c, d }
    }

    pub fn total(&self) -> u64 {
        self.a + self.b + self.c + self.d
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChiSquare {
    pub chi2: f64,
    pub p: f64,
    pub dof: u32,
}

/// Pearson chi-square test of independence, no continuity correction.
pub fn chi_square_2x2(t: &ContingencyTable2x2) -> Result<ChiSquare, AnalyticsError> {
    let cells = [t.a, t.b, t.c, t.d].map(|x| x as f64);
    let rows = [cells[0] + cells[1], cells[2] + cells[3]];
    let cols = [cells[0] + cells[2], cells[1] + cells[3]];
    if rows.contains(&0.0) || cols.contains(&0.0) {
        return Err(AnalyticsError::DegenerateTable(format!(
            "row sums {rows:?}, column sums {cols:?}"
        )));
    }
    let n = rows[0] + rows[1];
    let mut chi2 = 0.0;
    for (i, &obs) in cells.iter().enumerate() {
        let expected = rows[i / 2] * cols[i % 2] / n;
        chi2 += (obs - expected).powi(2) / expected;
    }
    Ok(ChiSquare {
        chi2,
        p: erfc((chi2 / 2.0).sqrt()),
        dof: 1,
    })
}

/// Table over (trajectory, gold) pairs. Trajectories without any Action are skipped;
/// code counts as succeeded when every execution succeeded.
pub fn contingency_from_trajectories(items: &[(&Trajectory, &str)]) -> ContingencyTable2x2 {
    let mut t = ContingencyTable2x2::default();
    for (traj, gold) in items {
        if traj.action_count() == 0 {
            continue;
        }
        let correct = compute_reward(traj, gold) == 1;
        let code_ok = !traj.has_failed_execution();
        match (correct, code_ok) {
            (true, true) => t.a += 1,
            (true, false) => t.b += 1,
            (false, true) => t.c += 1,
            (false, false) => t.d += 1,
        }
    }
    t
}

/// Unbiased pass@k estimate `1 - C(n-c, k) / C(n, k)` in product form.
pub fn pass_at_k(n: u64, c: u64, k: u64) -> Result<f64, AnalyticsError> {
    if c > n || k == 0 || k > n {
        return Err(AnalyticsError::DomainError(format!(
            "need 0 <= c <= n and 1 <= k <= n, got n={n} c={c} k={k}"
        )));
    }
    if k == 1 {
        return Ok(c as f64 / n as f64);
    }
    if n - c < k {
        return Ok(1.0);
    }
    let miss: f64 = (n - c + 1..=n).map(|i| 1.0 - k as f64 / i as f64).product();
    Ok(1.0 - miss)
}

/// Fraction of trajectories with at least one Action; 0 for an empty corpus.
pub fn code_ratio(trajectories: &[Trajectory]) -> f64 {
    if trajectories.is_empty() {
        return 0.0;
    }
    let with_code = trajectories.par_iter().filter(|t| t.action_count() > 0).count();
    with_code as f64 / trajectories.len() as f64
}

/// Action count -> number of trajectories.
pub fn round_histogram(trajectories: &[Trajectory]) -> BTreeMap<usize, usize> {
    let mut hist = BTreeMap::new();
    for t in trajectories {
        *hist.entry(t.action_count()).or_insert(0) += 1;
    }
    hist
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenCost {
    pub mean_model_tokens: f64,
    pub per_traj: Vec<usize>,
}

/// Model-origin token counts; observations are not model cost.
pub fn token_cost(trajectories: &[TokenizedTrajectory]) -> TokenCost {
    let per_traj: Vec<usize> = trajectories.par_iter().map(|t| t.model_token_count()).collect();
    let mean_model_tokens = if per_traj.is_empty() {
        0.0
    } else {
        per_traj.iter().sum::<usize>() as f64 / per_traj.len() as f64
    };
    TokenCost {
        mean_model_tokens,
        per_traj,
    }
}
