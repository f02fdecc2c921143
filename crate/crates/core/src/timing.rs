//! Cycle counter and its calibration against the monotonic clock.

use std::time::{Duration, Instant};

#[cfg(target_arch = "x86_64")]
#[inline(always)]
pub fn read_cycles() -> u64 {
    // SAFETY: rdtsc is available on every x86-64 CPU and has no side effects.
    unsafe { core::arch::x86_64::_rdtsc() }
}

#[cfg(not(target_arch = "x86_64"))]
pub fn read_cycles() -> u64 {
    use std::sync::OnceLock;
    static EPOCH: OnceLock<Instant> = OnceLock::new();
    EPOCH.get_or_init(Instant::now).elapsed().as_nanos() as u64
}

/// Cycles per second measured by busy-waiting for `window`.
pub fn calibrate(window: Duration) -> f64 {
    let a = Anchor::now();
    while a.at.elapsed() < window {
        std::hint::spin_loop();
    }
    a.hz().unwrap_or(0.0)
}

/// A paired (cycle counter, monotonic clock) reading. The rate between two
/// anchors spans the whole run, which averages out scheduling noise.
#[derive(Debug, Clone, Copy)]
pub struct Anchor {
    pub cycles: u64,
    pub at: Instant,
}

impl Anchor {
    pub fn now() -> Self {
        let at = Instant::now();
        let cycles = read_cycles();
        Self { cycles, at }
    }

    /// Cycles per second since this anchor; `None` if no time has passed.
    pub fn hz(&self) -> Option<f64> {
        let at = Instant::now();
        let cycles = read_cycles();
        let secs = at.duration_since(self.at).as_secs_f64();
        (secs > 0.0).then(|| cycles.wrapping_sub(self.cycles) as f64 / secs)
    }
}

/// Minimum anchor span before its rate is trusted.
pub const MIN_CALIBRATION_SPAN: Duration = Duration::from_millis(10);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monotonic() {
        let mut last = read_cycles();
        for _ in 0..10_000 {
            let now = read_cycles();
            assert!(now >= last);
            last = now;
        }
    }

    #[test]
    fn busy_wait_matches_clock() {
        let hz = calibrate(Duration::from_millis(20));
        assert!(hz > 0.0);
        let t0 = Instant::now();
        let c0 = read_cycles();
        while t0.elapsed() < Duration::from_millis(10) {}
        let secs = read_cycles().wrapping_sub(c0) as f64 / hz;
        assert!((secs - 0.010).abs() <= 0.002, "{secs}");
    }

    #[test]
    fn repeatable() {
        let a = calibrate(Duration::from_millis(20));
        let b = calibrate(Duration::from_millis(20));
        assert!((a - b).abs() / a <= 0.05, "{a} vs {b}");
    }
}
