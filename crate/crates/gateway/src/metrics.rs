//! Request counters, latency quantiles, and the per-request routing log.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::Serialize;

use router_core::engine::RouteTarget;

const LATENCY_CAPACITY: usize = 65_536;
const ROUTE_LOG_CAPACITY: usize = 10_000;

/// Bounded sample recorder with exact quantiles at snapshot time.
struct LatencyRecorder {
    samples: Mutex<(Vec<f64>, usize)>, // ring buffer + write cursor
}

impl LatencyRecorder {
    fn new() -> Self {
        Self {
            samples: Mutex::new((Vec::new(), 0)),
        }
    }

    fn record(&self, ms: f64) {
        let mut guard = self.samples.lock().expect("latency lock");
        let (buf, cursor) = &mut *guard;
        if buf.len() < LATENCY_CAPACITY {
            buf.push(ms);
        } else {
            buf[*cursor % LATENCY_CAPACITY] = ms;
        }
        *cursor += 1;
    }

    fn summary(&self) -> LatencySummary {
        let guard = self.samples.lock().expect("latency lock");
        let mut sorted = guard.0.clone();
        drop(guard);
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite latencies"));
        let quantile = |q: f64| -> f64 {
            if sorted.is_empty() {
                return 0.0;
            }
            let rank = (q * sorted.len() as f64).ceil() as usize;
            sorted[rank.clamp(1, sorted.len()) - 1]
        };
        LatencySummary {
            count: sorted.len() as u64,
            p50_ms: quantile(0.50),
            p95_ms: quantile(0.95),
            p99_ms: quantile(0.99),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct LatencySummary {
    pub count: u64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub p99_ms: f64,
}

pub struct Metrics {
    started: Instant,
    requests_total: AtomicU64,
    strong_count: AtomicU64,
    weak_count: AtomicU64,
    predictor_fallbacks: AtomicU64,
    backend_fallbacks: AtomicU64,
    routing_latency: LatencyRecorder,
    backend_latency: LatencyRecorder,
}

impl Metrics {
    pub fn new() -> Self {
        Self {
            started: Instant::now(),
            requests_total: AtomicU64::new(0),
            strong_count: AtomicU64::new(0),
            weak_count: AtomicU64::new(0),
            predictor_fallbacks: AtomicU64::new(0),
            backend_fallbacks: AtomicU64::new(0),
            routing_latency: LatencyRecorder::new(),
            backend_latency: LatencyRecorder::new(),
        }
    }

    pub fn record_request(
        &self,
        decision: RouteTarget,
        routing_ms: f64,
        backend_ms: f64,
        predictor_fallback: bool,
        backend_fallback: bool,
    ) {
        self.requests_total.fetch_add(1, Ordering::Relaxed);
        match decision {
            RouteTarget::Strong => self.strong_count.fetch_add(1, Ordering::Relaxed),
            RouteTarget::Weak => self.weak_count.fetch_add(1, Ordering::Relaxed),
        };
        if predictor_fallback {
            self.predictor_fallbacks.fetch_add(1, Ordering::Relaxed);
        }
        if backend_fallback {
            self.backend_fallbacks.fetch_add(1, Ordering::Relaxed);
        }
        self.routing_latency.record(routing_ms);
        self.backend_latency.record(backend_ms);
    }

    pub fn snapshot(&self) -> MetricsSnapshot {
        let uptime = self.started.elapsed().as_secs_f64();
        let total = self.requests_total.load(Ordering::Relaxed);
        MetricsSnapshot {
            requests_total: total,
            strong_count: self.strong_count.load(Ordering::Relaxed),
            weak_count: self.weak_count.load(Ordering::Relaxed),
            predictor_fallbacks: self.predictor_fallbacks.load(Ordering::Relaxed),
            backend_fallbacks: self.backend_fallbacks.load(Ordering::Relaxed),
            routing_latency_ms: self.routing_latency.summary(),
            backend_latency_ms: self.backend_latency.summary(),
            uptime_seconds: uptime,
            requests_per_second: if uptime > 0.0 {
                total as f64 / uptime
            } else {
                0.0
            },
        }
    }
}

impl Default for Metrics {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsSnapshot {
    pub requests_total: u64,
    pub strong_count: u64,
    pub weak_count: u64,
    pub predictor_fallbacks: u64,
    pub backend_fallbacks: u64,
    pub routing_latency_ms: LatencySummary,
    pub backend_latency_ms: LatencySummary,
    pub uptime_seconds: f64,
    pub requests_per_second: f64,
}

/// One routed request; the query is kept only as a hash.
#[derive(Debug, Clone, Serialize)]
pub struct RouteLogEntry {
    pub timestamp_ms: u64,
    pub query_hash: String,
    pub win_probability: f64,
    pub alpha: f64,
    pub decision: RouteTarget,
    pub predictor_name: String,
    pub routing_latency_ms: f64,
    pub backend_latency_ms: f64,
    pub predictor_fallback: bool,
    pub backend_fallback: bool,
}

/// Bounded in-memory log of recent routing decisions.
pub struct RouteLog {
    entries: Mutex<VecDeque<RouteLogEntry>>,
}

impl RouteLog {
    pub fn new() -> Self {
        Self {
            entries: Mutex::new(VecDeque::new()),
        }
    }

    pub fn push(&self, entry: RouteLogEntry) {
        let mut entries = self.entries.lock().expect("route log lock");
        if entries.len() == ROUTE_LOG_CAPACITY {
            entries.pop_front();
        }
        entries.push_back(entry);
    }

    pub fn entries(&self) -> Vec<RouteLogEntry> {
        self.entries.lock().expect("route log lock").iter().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("route log lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Default for RouteLog {
    fn default() -> Self {
        Self::new()
    }
}
