//! Per-endpoint concurrency cap plus token-bucket rate limit.

use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

#[derive(Debug)]
pub struct Throttle {
    max_in_flight: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
    bucket: Mutex<Bucket>,
    rate_per_sec: f64,
    burst: f64,
}

#[derive(Debug)]
struct Bucket {
    tokens: f64,
    refilled_at: Instant,
}

/// Holds one concurrency slot until dropped.
pub struct Permit<'a> {
    throttle: &'a Throttle,
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.throttle.in_flight.lock().unwrap();
        *n -= 1;
        self.throttle.freed.notify_one();
    }
}

impl Throttle {
    /// `rate_per_sec <= 0` disables rate limiting.
    pub fn new(max_in_flight: usize, rate_per_sec: f64, burst: usize) -> Self {
        let burst = burst.max(1) as f64;
        Self {
            max_in_flight: max_in_flight.max(1),
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
            bucket: Mutex::new(Bucket {
                tokens: burst,
                refilled_at: Instant::now(),
            }),
            rate_per_sec,
            burst,
        }
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }

    /// Blocks until a slot and a token are available.
    pub fn acquire(&self) -> Permit<'_> {
        self.take_token();
        let mut n = self.in_flight.lock().unwrap();
        while *n >= self.max_in_flight {
            n = self.freed.wait(n).unwrap();
        }
        *n += 1;
        Permit { throttle: self }
    }

    fn take_token(&self) {
        if self.rate_per_sec <= 0.0 {
            return;
        }
        loop {
            let wait = {
                let mut b = self.bucket.lock().unwrap();
                let now = Instant::now();
                let elapsed = now.duration_since(b.refilled_at).as_secs_f64();
                b.tokens = (b.tokens + elapsed * self.rate_per_sec).min(self.burst);
                b.refilled_at = now;
                if b.tokens >= 1.0 {
                    b.tokens -= 1.0;
                    return;
                }
                Duration::from_secs_f64((1.0 - b.tokens) / self.rate_per_sec)
            };
            std::thread::sleep(wait);
        }
    }
}
