use std::sync::Mutex;
use std::time::Duration;

use super::Clock;

/// Spacing limiter: successive dispatches are at least `60 / rpm` seconds apart.
///
/// This is a token bucket of capacity one. In any half-open window of length
/// `w` at most `ceil(w * rpm / 60)` requests are dispatched. Callers reserve a
/// slot under the lock and sleep outside it, so concurrent callers queue up in
/// reservation order.
#[derive(Debug)]
pub struct RateLimiter {
    interval: Duration,
    next_slot: Mutex<Option<Duration>>,
}

impl RateLimiter {
    pub fn per_minute(requests_per_minute: f64) -> Self {
        assert!(
            requests_per_minute.is_finite() && requests_per_minute > 0.0,
            "requests_per_minute must be positive"
        );
        RateLimiter {
            interval: Duration::from_secs_f64(60.0 / requests_per_minute),
            next_slot: Mutex::new(None),
        }
    }

    pub fn interval(&self) -> Duration {
        self.interval
    }

    /// Reserves the next slot and returns how long the caller must wait for it.
    pub fn reserve(&self, now: Duration) -> Duration {
        let mut next = self.next_slot.lock().unwrap();
        let slot = match *next {
            Some(n) if n > now => n,
            _ => now,
        };
        *next = Some(slot + self.interval);
        slot - now
    }

    /// Blocks (via `clock`) until the caller may dispatch. Returns the dispatch time.
    pub fn acquire(&self, clock: &dyn Clock) -> Duration {
        let now = clock.now();
        let wait = self.reserve(now);
        if !wait.is_zero() {
            clock.sleep(wait);
        }
        now + wait
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::SimClock;
    use proptest::prelude::*;

    #[test]
    fn first_request_is_immediate() {
        let clock = SimClock::new();
        let limiter = RateLimiter::per_minute(60.0);
        assert_eq!(limiter.acquire(&clock), Duration::ZERO);
        assert_eq!(limiter.acquire(&clock), Duration::from_secs(1));
        assert_eq!(clock.sleeps(), vec![Duration::from_secs(1)]);
    }

    #[test]
    fn idle_time_does_not_bank_tokens() {
        let clock = SimClock::new();
        let limiter = RateLimiter::per_minute(6.0);
        limiter.acquire(&clock);
        clock.advance(Duration::from_secs(600));
        let t1 = limiter.acquire(&clock);
        let t2 = limiter.acquire(&clock);
        assert_eq!(t2 - t1, Duration::from_secs(10));
    }

    proptest! {
        #[test]
        fn window_bound_holds(
            rpm in 1.0f64..600.0,
            gaps_ms in proptest::collection::vec(0u64..3_000, 1..120),
            window_s in 0.5f64..120.0,
        ) {
            let clock = SimClock::new();
            let limiter = RateLimiter::per_minute(rpm);
            let mut dispatched = Vec::new();
            for gap in gaps_ms {
                clock.advance(Duration::from_millis(gap));
                dispatched.push(limiter.acquire(&clock).as_secs_f64());
            }
            let window = window_s;
            let bound = (window * rpm / 60.0).ceil() as usize;
            for &start in &dispatched {
                let count = dispatched
                    .iter()
                    .filter(|&&t| t >= start && t < start + window - 1e-9)
                    .count();
                prop_assert!(count <= bound.max(1), "count {count} > bound {bound}");
            }
        }
    }
}
