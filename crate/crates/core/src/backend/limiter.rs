use std::sync::{Condvar, Mutex};

/// Counting semaphore bounding in-flight requests to one backend.
#[derive(Debug)]
pub struct Limiter {
    max: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
}

pub struct Permit<'a> {
    limiter: &'a Limiter,
}

impl Limiter {
    pub fn new(max: usize) -> Self {
        Limiter {
            max: max.max(1),
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_flight.lock().expect("limiter poisoned");
        while *n >= self.max {
            n = self.freed.wait(n).expect("limiter poisoned");
        }
        *n += 1;
        Permit { limiter: self }
    }

    pub fn in_flight(&self) -> usize {
        *self.in_flight.lock().expect("limiter poisoned")
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.limiter.in_flight.lock().expect("limiter poisoned");
        *n -= 1;
        self.limiter.freed.notify_one();
    }
}
