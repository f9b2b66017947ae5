use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{HarnessError, RunRecord};

/// Probability that `k` distinct runs drawn from `n` all succeeded, given `c` successes.
///
/// Evaluated as the product `∏ (c - i) / (n - i)` for `i < k`, which equals
/// `C(c, k) / C(n, k)` without overflowing the binomials.
pub fn pass_hat_k(n: u64, c: u64, k: u64) -> Result<f64, HarnessError> {
    if k == 0 || k > n {
        return Err(HarnessError::Parameter(format!("k must be in 1..={n}, got {k}")));
    }
    if c > n {
        return Err(HarnessError::Parameter(format!("{c} successes out of {n} runs")));
    }
    if c < k {
        return Ok(0.0);
    }
    Ok((0..k).map(|i| (c - i) as f64 / (n - i) as f64).product())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Complexity {
    Low,
    Medium,
    High,
}

impl fmt::Display for Complexity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Complexity::Low => "low",
            Complexity::Medium => "medium",
            Complexity::High => "high",
        })
    }
}

/// Success rate at or above 75% is low complexity, at or below 25% high.
///
/// Compared in integers so the boundaries are exact.
pub fn complexity(successes: u64, runs: u64) -> Complexity {
    if runs == 0 {
        return Complexity::High;
    }
    if 4 * successes >= 3 * runs {
        Complexity::Low
    } else if 4 * successes <= runs {
        Complexity::High
    } else {
        Complexity::Medium
    }
}

/// Complexity per task id over all the given records.
pub fn stratify(records: &[RunRecord]) -> BTreeMap<String, Complexity> {
    let mut tally: BTreeMap<&str, (u64, u64)> = BTreeMap::new();
    for r in records {
        let t = tally.entry(&r.task_id).or_default();
        t.0 += u64::from(r.success);
        t.1 += 1;
    }
    tally.into_iter().map(|(id, (c, n))| (id.to_string(), complexity(c, n))).collect()
}
