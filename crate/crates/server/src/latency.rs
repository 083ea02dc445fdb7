use std::fmt;
use std::sync::Mutex;
use std::time::Duration;

use serde::Serialize;

/// Message-to-reply latencies of completed generations.
#[derive(Debug, Default)]
pub struct LatencyHistogram {
    samples: Mutex<Vec<Duration>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LatencySummary {
    pub count: usize,
    pub p50_ms: f64,
    pub p99_ms: f64,
    pub max_ms: f64,
}

/// Nearest-rank percentile of an ascending slice.
fn percentile(sorted: &[Duration], q: f64) -> Duration {
    let rank = (q * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

impl LatencyHistogram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, d: Duration) {
        self.samples.lock().expect("latency lock poisoned").push(d);
    }

    pub fn summary(&self) -> LatencySummary {
        let mut s = self.samples.lock().expect("latency lock poisoned").clone();
        LatencySummary::from_samples(&mut s)
    }
}

impl LatencySummary {
    pub fn from_samples(samples: &mut [Duration]) -> Self {
        if samples.is_empty() {
            return LatencySummary {
                count: 0,
                p50_ms: 0.0,
                p99_ms: 0.0,
                max_ms: 0.0,
            };
        }
        samples.sort_unstable();
        let ms = |d: Duration| d.as_secs_f64() * 1e3;
        LatencySummary {
            count: samples.len(),
            p50_ms: ms(percentile(samples, 0.5)),
            p99_ms: ms(percentile(samples, 0.99)),
            max_ms: ms(samples[samples.len() - 1]),
        }
    }
}

impl fmt::Display for LatencySummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} requests, p50 {:.2} ms, p99 {:.2} ms, max {:.2} ms",
            self.count, self.p50_ms, self.p99_ms, self.max_ms
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_percentiles() {
        let mut v: Vec<Duration> = (1..=100).rev().map(Duration::from_millis).collect();
        let s = LatencySummary::from_samples(&mut v);
        assert_eq!(s.count, 100);
        assert_eq!(s.p50_ms, 50.0);
        assert_eq!(s.p99_ms, 99.0);
        assert_eq!(s.max_ms, 100.0);
    }

    #[test]
    fn empty_and_single() {
        assert_eq!(LatencyHistogram::new().summary().count, 0);
        let h = LatencyHistogram::new();
        h.record(Duration::from_millis(7));
        let s = h.summary();
        assert_eq!((s.p50_ms, s.p99_ms), (7.0, 7.0));
    }
}
