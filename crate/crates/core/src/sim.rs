//! Discrete-event engine: integer clock, totally ordered event queue and the
//! per-run random stream.
//!
//! Events are ordered by `(fire_at, lane, insertion_seq)`. The lane lets
//! packet arrivals that land in the same microsecond as a timer or a
//! link-layer event be processed first; within a lane the order is FIFO by
//! insertion.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;
use std::ops::{Add, AddAssign, Sub};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Microseconds since the start of a run.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);
    pub const MAX: SimTime = SimTime(u64::MAX);

    pub const fn from_micros(us: u64) -> Self {
        SimTime(us)
    }

    pub const fn from_millis(ms: u64) -> Self {
        SimTime(ms * 1_000)
    }

    pub const fn from_secs(s: u64) -> Self {
        SimTime(s * 1_000_000)
    }

    /// Rounds to the nearest microsecond; negative input clamps to zero.
    pub fn from_secs_f64(s: f64) -> Self {
        if s <= 0.0 {
            SimTime(0)
        } else {
            SimTime((s * 1e6).round() as u64)
        }
    }

    pub const fn as_micros(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1e6
    }

    pub fn as_millis_f64(self) -> f64 {
        self.0 as f64 / 1e3
    }

    pub fn saturating_sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(rhs.0))
    }
}

impl Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 + rhs.0)
    }
}

impl AddAssign for SimTime {
    fn add_assign(&mut self, rhs: SimTime) {
        self.0 += rhs.0;
    }
}

impl Sub for SimTime {
    type Output = SimTime;
    fn sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 - rhs.0)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Processing lane inside one microsecond. Lower lanes run first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Lane {
    Packet = 0,
    Timer = 1,
    Link = 2,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SimError {
    #[error("event at {fire_at} us scheduled in the past (clock is {now} us)")]
    PastEvent { fire_at: SimTime, now: SimTime },
}

/// A pending event. `target` is an opaque node index chosen by the caller.
#[derive(Debug, Clone)]
pub struct SimEvent<P> {
    pub fire_at: SimTime,
    pub lane: Lane,
    pub insertion_seq: u64,
    pub target: usize,
    pub payload: P,
}

impl<P> SimEvent<P> {
    fn key(&self) -> (SimTime, Lane, u64) {
        (self.fire_at, self.lane, self.insertion_seq)
    }
}

impl<P> PartialEq for SimEvent<P> {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}

impl<P> Eq for SimEvent<P> {}

impl<P> PartialOrd for SimEvent<P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<P> Ord for SimEvent<P> {
    // BinaryHeap is a max-heap; invert so the earliest key pops first.
    fn cmp(&self, other: &Self) -> Ordering {
        other.key().cmp(&self.key())
    }
}

/// Event queue plus clock.
#[derive(Debug)]
pub struct Scheduler<P> {
    now: SimTime,
    next_seq: u64,
    heap: BinaryHeap<SimEvent<P>>,
    processed: u64,
}

impl<P> Default for Scheduler<P> {
    fn default() -> Self {
        Self::new()
    }
}

impl<P> Scheduler<P> {
    pub fn new() -> Self {
        Self {
            now: SimTime::ZERO,
            next_seq: 0,
            heap: BinaryHeap::new(),
            processed: 0,
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn pending(&self) -> usize {
        self.heap.len()
    }

    pub fn processed(&self) -> u64 {
        self.processed
    }

    pub fn schedule(
        &mut self,
        fire_at: SimTime,
        lane: Lane,
        target: usize,
        payload: P,
    ) -> Result<u64, SimError> {
        if fire_at < self.now {
            return Err(SimError::PastEvent {
                fire_at,
                now: self.now,
            });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(SimEvent {
            fire_at,
            lane,
            insertion_seq: seq,
            target,
            payload,
        });
        Ok(seq)
    }

    /// Schedules `delay` after the current clock. Never fails.
    pub fn schedule_in(&mut self, delay: SimTime, lane: Lane, target: usize, payload: P) -> u64 {
        let at = self.now + delay;
        self.schedule(at, lane, target, payload)
            .expect("relative schedule is never in the past")
    }

    pub fn peek_time(&self) -> Option<SimTime> {
        self.heap.peek().map(|e| e.fire_at)
    }

    /// Pops the next event if it fires at or before `end`, advancing the clock.
    pub fn pop_until(&mut self, end: SimTime) -> Option<SimEvent<P>> {
        match self.heap.peek() {
            Some(e) if e.fire_at <= end => {
                let ev = self.heap.pop().expect("peeked");
                self.now = ev.fire_at;
                self.processed += 1;
                Some(ev)
            }
            _ => None,
        }
    }

    /// Drives `handler` over every event with `fire_at <= end`. The handler
    /// may schedule more events. Returns the number processed by this call.
    pub fn run_until<F>(&mut self, end: SimTime, mut handler: F) -> u64
    where
        F: FnMut(&mut Self, SimEvent<P>),
    {
        let mut count = 0;
        while let Some(ev) = self.pop_until(end) {
            handler(self, ev);
            count += 1;
        }
        if self.now < end {
            self.now = end;
        }
        count
    }

    /// Clock jump used by drivers that run their own pop loop.
    pub fn advance_to(&mut self, t: SimTime) {
        if t > self.now {
            self.now = t;
        }
    }

    /// Remaining events in pop order. Consumes the queue.
    pub fn drain_sorted(&mut self) -> Vec<SimEvent<P>> {
        let mut out = Vec::with_capacity(self.heap.len());
        while let Some(e) = self.heap.pop() {
            out.push(e);
        }
        out
    }

    pub fn iter_pending(&self) -> impl Iterator<Item = &SimEvent<P>> {
        self.heap.iter()
    }
}

/// The single random stream of a run.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    pub fn below(&mut self, n: u64) -> u64 {
        if n == 0 {
            0
        } else {
            self.rng.gen_range(0..n)
        }
    }
}
