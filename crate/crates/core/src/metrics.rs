// Copyright (c) The bftorder Authors
// SPDX-License-Identifier: Apache-2.0

use std::time::Duration;

/// Nearest-rank percentiles of a latency sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Percentiles {
    pub count: usize,
    pub p50: Duration,
    pub p90: Duration,
    pub p95: Duration,
    pub p99: Duration,
    pub max: Duration,
}

/// The nearest-rank `p`-th percentile of an ascending sample.
pub fn nearest_rank(sorted: &[Duration], p: f64) -> Duration {
    assert!(!sorted.is_empty());
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

impl Percentiles {
    pub fn of(samples: impl IntoIterator<Item = Duration>) -> Option<Self> {
        let mut v: Vec<Duration> = samples.into_iter().collect();
        if v.is_empty() {
            return None;
        }
        v.sort_unstable();
        Some(Self {
            count: v.len(),
            p50: nearest_rank(&v, 50.0),
            p90: nearest_rank(&v, 90.0),
            p95: nearest_rank(&v, 95.0),
            p99: nearest_rank(&v, 99.0),
            max: *v.last().expect("non-empty"),
        })
    }
}

/// Median of a non-empty slice of floats (mean of the middle pair for even lengths).
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty());
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}
