//! Run-scoped time.
//!
//! Everything that ends up in a store record (history events, memory entry
//! stamps, iteration records) is stamped with *logical* time: the timestamp
//! of the most recent model call in the run. During a live run the gateway
//! advances the logical clock with wall-clock time as it writes each audit
//! record; during replay it advances it with the timestamps copied from the
//! recorded run. That makes a replayed run's store output reproduce the
//! original byte for byte.
//!
//! Hard wall-time limits are checked against real monotonic time, never the
//! logical clock.

use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Arc;
use std::time::Instant;

/// Milliseconds since the Unix epoch. All persisted timestamps use this.
pub type TimestampMs = i64;

/// Current wall-clock time in Unix milliseconds.
pub fn wall_now_ms() -> TimestampMs {
    chrono::Utc::now().timestamp_millis()
}

/// Render a millisecond timestamp as RFC 3339 for human-facing output.
pub fn format_ms(ts: TimestampMs) -> String {
    chrono::DateTime::from_timestamp_millis(ts)
        .map(|dt| dt.to_rfc3339_opts(chrono::SecondsFormat::Millis, true))
        .unwrap_or_else(|| format!("{ts}ms"))
}

/// Shared logical clock plus the real start instant for limit checks.
#[derive(Debug)]
pub struct RunClock {
    logical_ms: AtomicI64,
    started: Instant,
}

impl RunClock {
    /// A clock seeded with the given logical origin (run header timestamp).
    pub fn seeded(origin_ms: TimestampMs) -> Arc<Self> {
        Arc::new(RunClock {
            logical_ms: AtomicI64::new(origin_ms),
            started: Instant::now(),
        })
    }

    /// A clock for a live run, seeded with current wall time.
    pub fn live() -> Arc<Self> {
        Self::seeded(wall_now_ms())
    }

    /// Logical now: the timestamp of the latest recorded model call.
    pub fn now_ms(&self) -> TimestampMs {
        self.logical_ms.load(Ordering::SeqCst)
    }

    /// Advance logical time. Called by the audit tap after each model call.
    /// Never moves backwards, so a malformed record cannot rewind the run.
    pub fn advance_to(&self, ts: TimestampMs) {
        self.logical_ms.fetch_max(ts, Ordering::SeqCst);
    }

    /// Real elapsed time since this clock (i.e. this process's run) started.
    pub fn elapsed(&self) -> std::time::Duration {
        self.started.elapsed()
    }
}
