//! In-flight caps and request rate limiting, per endpoint.

use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

/// Counting semaphore bounding concurrent requests to one endpoint.
pub struct InFlightLimiter {
    capacity: usize,
    state: Mutex<usize>,
    freed: Condvar,
}

impl InFlightLimiter {
    pub fn new(capacity: usize) -> InFlightLimiter {
        InFlightLimiter {
            capacity: capacity.max(1),
            state: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> InFlightPermit<'_> {
        let mut in_flight = self.state.lock().unwrap();
        while *in_flight >= self.capacity {
            in_flight = self.freed.wait(in_flight).unwrap();
        }
        *in_flight += 1;
        InFlightPermit { limiter: self }
    }
}

pub struct InFlightPermit<'a> {
    limiter: &'a InFlightLimiter,
}

impl Drop for InFlightPermit<'_> {
    fn drop(&mut self) {
        let mut in_flight = self.limiter.state.lock().unwrap();
        *in_flight -= 1;
        self.limiter.freed.notify_one();
    }
}

/// Token bucket: `rate` tokens per second up to `burst`. `take` blocks
/// until a token is available.
pub struct TokenBucket {
    rate: f64,
    burst: f64,
    state: Mutex<BucketState>,
}

struct BucketState {
    tokens: f64,
    last_refill: Instant,
}

impl TokenBucket {
    pub fn new(rate: f64, burst: f64) -> TokenBucket {
        TokenBucket {
            rate: rate.max(1e-9),
            burst: burst.max(1.0),
            state: Mutex::new(BucketState {
                tokens: burst.max(1.0),
                last_refill: Instant::now(),
            }),
        }
    }

    pub fn take(&self) {
        loop {
            let wait = {
                let mut s = self.state.lock().unwrap();
                let now = Instant::now();
                let elapsed = now.duration_since(s.last_refill).as_secs_f64();
                s.tokens = (s.tokens + elapsed * self.rate).min(self.burst);
                s.last_refill = now;
                if s.tokens >= 1.0 {
                    s.tokens -= 1.0;
                    return;
                }
                Duration::from_secs_f64((1.0 - s.tokens) / self.rate)
            };
            std::thread::sleep(wait.min(Duration::from_millis(50)));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    #[test]
    fn in_flight_limiter_caps_concurrency() {
        let limiter = Arc::new(InFlightLimiter::new(3));
        let current = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        let mut handles = Vec::new();
        for _ in 0..16 {
            let limiter = Arc::clone(&limiter);
            let current = Arc::clone(&current);
            let peak = Arc::clone(&peak);
            handles.push(std::thread::spawn(move || {
                let _permit = limiter.acquire();
                let now = current.fetch_add(1, Ordering::SeqCst) + 1;
                peak.fetch_max(now, Ordering::SeqCst);
                std::thread::sleep(Duration::from_millis(5));
                current.fetch_sub(1, Ordering::SeqCst);
            }));
        }
        for h in handles {
            h.join().unwrap();
        }
        assert!(peak.load(Ordering::SeqCst) <= 3);
    }

    #[test]
    fn token_bucket_spaces_requests() {
        let bucket = TokenBucket::new(1000.0, 1.0);
        let start = Instant::now();
        for _ in 0..5 {
            bucket.take();
        }
        // 5 tokens at 1000/s from a burst of 1: at least ~4ms.
        assert!(start.elapsed() >= Duration::from_millis(3));
    }
}
