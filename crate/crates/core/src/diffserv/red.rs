use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::sim::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RedParams {
    pub min_th: f64,
    pub max_th: f64,
    pub max_p: f64,
    pub w_q: f64,
    pub capacity: usize,
}

impl Default for RedParams {
    fn default() -> Self {
        Self {
            min_th: 5.0,
            max_th: 15.0,
            max_p: 0.1,
            w_q: 0.002,
            capacity: 50,
        }
    }
}

impl RedParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.min_th >= 0.0 && self.min_th < self.max_th && self.max_th <= self.capacity as f64)
        {
            return Err(format!(
                "RED thresholds need 0 <= min_th < max_th <= capacity, got {} / {} / {}",
                self.min_th, self.max_th, self.capacity
            ));
        }
        if !(self.max_p > 0.0 && self.max_p <= 1.0) {
            return Err(format!("RED max_p must be in (0, 1], got {}", self.max_p));
        }
        if !(self.w_q > 0.0 && self.w_q < 1.0) {
            return Err(format!("RED w_q must be in (0, 1), got {}", self.w_q));
        }
        Ok(())
    }

    /// Base drop probability for an average queue in the linear region.
    pub fn p_b(&self, avg: f64) -> f64 {
        self.max_p * (avg - self.min_th) / (self.max_th - self.min_th)
    }
}

/// Drop probability corrected for packets accepted since the last drop.
pub fn p_a(p_b: f64, count: u64) -> f64 {
    let denom = 1.0 - count as f64 * p_b;
    if denom <= 0.0 {
        1.0
    } else {
        (p_b / denom).min(1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnqueueOutcome {
    Accept,
    /// Probabilistic drop in the linear region.
    DropEarly,
    /// Average at or above `max_th`.
    DropForced,
    /// Backlog already at capacity.
    DropOverflow,
}

impl EnqueueOutcome {
    pub fn accepted(self) -> bool {
        self == EnqueueOutcome::Accept
    }
}

#[derive(Debug, Clone)]
pub struct RedQueue<T> {
    params: RedParams,
    avg: f64,
    count: u64,
    backlog: VecDeque<T>,
}

impl<T> RedQueue<T> {
    pub fn new(params: RedParams) -> Self {
        Self {
            params,
            avg: 0.0,
            count: 0,
            backlog: VecDeque::new(),
        }
    }

    pub fn params(&self) -> &RedParams {
        &self.params
    }

    pub fn avg(&self) -> f64 {
        self.avg
    }

    pub fn count_since_drop(&self) -> u64 {
        self.count
    }

    pub fn len(&self) -> usize {
        self.backlog.len()
    }

    pub fn is_empty(&self) -> bool {
        self.backlog.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.backlog.iter()
    }

    /// The random stream is consulted only in the linear region, so the
    /// number of draws is a function of the input sequence alone.
    pub fn red_enqueue(&mut self, item: T, rng: &mut RngStream) -> Result<(), (T, EnqueueOutcome)> {
        let p = self.params;
        self.avg = (1.0 - p.w_q) * self.avg + p.w_q * self.backlog.len() as f64;
        let outcome = if self.backlog.len() >= p.capacity {
            EnqueueOutcome::DropOverflow
        } else if self.avg < p.min_th {
            EnqueueOutcome::Accept
        } else if self.avg >= p.max_th {
            EnqueueOutcome::DropForced
        } else if rng.uniform() < p_a(p.p_b(self.avg), self.count) {
            EnqueueOutcome::DropEarly
        } else {
            EnqueueOutcome::Accept
        };
        if outcome.accepted() {
            self.count += 1;
            self.backlog.push_back(item);
            Ok(())
        } else {
            self.count = 0;
            Err((item, outcome))
        }
    }

    pub fn dequeue(&mut self) -> Option<T> {
        self.backlog.pop_front()
    }

    pub fn drain(&mut self) -> impl Iterator<Item = T> + '_ {
        self.backlog.drain(..)
    }
}

/// Plain FIFO with a hard capacity.
#[derive(Debug, Clone)]
pub struct DropTailQueue<T> {
    capacity: usize,
    backlog: VecDeque<T>,
}

impl<T> DropTailQueue<T> {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            backlog: VecDeque::new(),
        }
    }

    pub fn enqueue(&mut self, item: T) -> Result<(), (T, EnqueueOutcome)> {
        if self.backlog.len() >= self.capacity {
            Err((item, EnqueueOutcome::DropOverflow))
        } else {
            self.backlog.push_back(item);
            Ok(())
        }
    }

    pub fn dequeue(&mut self) -> Option<T> {
        self.backlog.pop_front()
    }

    pub fn len(&self) -> usize {
        self.backlog.len()
    }

    pub fn is_empty(&self) -> bool {
        self.backlog.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.backlog.iter()
    }

    pub fn drain(&mut self) -> impl Iterator<Item = T> + '_ {
        self.backlog.drain(..)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn midpoint_base_probability() {
        let p = RedParams::default();
        let mid = (p.min_th + p.max_th) / 2.0;
        assert!((p.p_b(mid) - 0.05).abs() < 1e-12);
        assert!((p_a(p.p_b(mid), 0) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn p_a_saturates() {
        assert_eq!(p_a(0.05, 20), 1.0);
        assert_eq!(p_a(0.05, 40), 1.0);
        assert!((p_a(0.05, 10) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn below_min_accepts_without_draw() {
        let mut q = RedQueue::new(RedParams::default());
        let mut rng = RngStream::new(1);
        let mut probe = RngStream::new(1);
        for i in 0..5 {
            assert!(q.red_enqueue(i, &mut rng).is_ok());
        }
        assert_eq!(rng.uniform(), probe.uniform());
    }

    #[test]
    fn at_or_above_max_forced_drop() {
        let params = RedParams {
            w_q: 0.9,
            ..RedParams::default()
        };
        let mut q = RedQueue::new(params);
        let mut rng = RngStream::new(3);
        let mut outcomes = Vec::new();
        for i in 0..60 {
            outcomes.push(q.red_enqueue(i, &mut rng).err().map(|e| e.1));
        }
        assert!(outcomes.contains(&Some(EnqueueOutcome::DropForced)));
    }

    #[test]
    fn capacity_enforced() {
        let params = RedParams {
            min_th: 100.0,
            max_th: 200.0,
            capacity: 200,
            ..RedParams::default()
        };
        let mut q = RedQueue::new(RedParams { capacity: 3, ..params });
        let mut rng = RngStream::new(0);
        for i in 0..3 {
            q.red_enqueue(i, &mut rng).unwrap();
        }
        assert_eq!(q.red_enqueue(9, &mut rng), Err((9, EnqueueOutcome::DropOverflow)));
    }

    #[test]
    fn validate_rejects_bad_params() {
        assert!(RedParams::default().validate().is_ok());
        assert!(RedParams { min_th: 20.0, ..RedParams::default() }.validate().is_err());
        assert!(RedParams { max_p: 0.0, ..RedParams::default() }.validate().is_err());
        assert!(RedParams { w_q: 1.0, ..RedParams::default() }.validate().is_err());
    }

    // Independent replay of the accounting rule with its own rng.
    fn oracle(ops: &[bool], params: RedParams, seed: u64) -> Vec<bool> {
        let mut rng = RngStream::new(seed);
        let (mut avg, mut count, mut len) = (0.0f64, 0u64, 0usize);
        let mut out = Vec::new();
        for &is_enqueue in ops {
            if !is_enqueue {
                len = len.saturating_sub(1);
                continue;
            }
            avg = (1.0 - params.w_q) * avg + params.w_q * len as f64;
            let accept = if len >= params.capacity {
                false
            } else if avg < params.min_th {
                true
            } else if avg >= params.max_th {
                false
            } else {
                let pb = params.max_p * (avg - params.min_th) / (params.max_th - params.min_th);
                let pa = if count as f64 * pb >= 1.0 { 1.0 } else { pb / (1.0 - count as f64 * pb) };
                rng.uniform() >= pa
            };
            if accept {
                count += 1;
                len += 1;
            } else {
                count = 0;
            }
            out.push(accept);
        }
        out
    }

    proptest! {
        #[test]
        fn matches_oracle_and_is_deterministic(
            ops in proptest::collection::vec(prop::bool::weighted(0.8), 1..600),
            seed in any::<u64>(),
            w_q in 0.01f64..0.5,
        ) {
            let params = RedParams { w_q, ..RedParams::default() };
            let run = || {
                let mut q = RedQueue::new(params);
                let mut rng = RngStream::new(seed);
                let mut out = Vec::new();
                for (i, &is_enqueue) in ops.iter().enumerate() {
                    if is_enqueue {
                        out.push(q.red_enqueue(i, &mut rng).is_ok());
                    } else {
                        q.dequeue();
                    }
                    prop_assert!(q.avg() >= 0.0);
                    prop_assert!(q.len() <= params.capacity);
                }
                Ok(out)
            };
            let a = run()?;
            let b = run()?;
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(a, oracle(&ops, params, seed));
        }
    }
}
