use serde::{Deserialize, Serialize};

use super::phb::TrafficClass;
use super::red::{DropTailQueue, EnqueueOutcome, RedParams, RedQueue};
use crate::sim::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QueueParams {
    pub ef_capacity: usize,
    pub red: RedParams,
}

impl Default for QueueParams {
    fn default() -> Self {
        Self {
            ef_capacity: 50,
            red: RedParams::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ClassCounters {
    pub enqueued: u64,
    pub dequeued: u64,
    pub early_drops: u64,
    pub forced_drops: u64,
    pub overflow_drops: u64,
}

impl ClassCounters {
    pub fn drops(&self) -> u64 {
        self.early_drops + self.forced_drops + self.overflow_drops
    }
}

/// Per-link egress: EF drop-tail, RED for every AF class and BE, served in
/// strict priority.
#[derive(Debug, Clone)]
pub struct EgressQueue<T> {
    ef: DropTailQueue<T>,
    red: [RedQueue<T>; 5],
    counters: [ClassCounters; 6],
}

impl<T> EgressQueue<T> {
    pub fn new(params: QueueParams) -> Self {
        Self {
            ef: DropTailQueue::new(params.ef_capacity),
            red: std::array::from_fn(|_| RedQueue::new(params.red)),
            counters: [ClassCounters::default(); 6],
        }
    }

    pub fn enqueue(
        &mut self,
        item: T,
        class: TrafficClass,
        rng: &mut RngStream,
    ) -> Result<(), (T, EnqueueOutcome)> {
        let res = match class {
            TrafficClass::Ef => self.ef.enqueue(item),
            other => self.red[other.index() - 1].red_enqueue(item, rng),
        };
        let c = &mut self.counters[class.index()];
        match &res {
            Ok(()) => c.enqueued += 1,
            Err((_, EnqueueOutcome::DropEarly)) => c.early_drops += 1,
            Err((_, EnqueueOutcome::DropForced)) => c.forced_drops += 1,
            Err((_, _)) => c.overflow_drops += 1,
        }
        res
    }

    /// Head of the highest-priority non-empty class.
    pub fn dequeue(&mut self) -> Option<(T, TrafficClass)> {
        let found = if let Some(x) = self.ef.dequeue() {
            Some((x, TrafficClass::Ef))
        } else {
            self.red
                .iter_mut()
                .enumerate()
                .find_map(|(i, q)| q.dequeue().map(|x| (x, TrafficClass::ALL[i + 1])))
        };
        if let Some((_, class)) = &found {
            self.counters[class.index()].dequeued += 1;
        }
        found
    }

    pub fn len(&self) -> usize {
        self.ef.len() + self.red.iter().map(RedQueue::len).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn class_len(&self, class: TrafficClass) -> usize {
        match class {
            TrafficClass::Ef => self.ef.len(),
            other => self.red[other.index() - 1].len(),
        }
    }

    pub fn counters(&self, class: TrafficClass) -> ClassCounters {
        self.counters[class.index()]
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.ef.iter().chain(self.red.iter().flat_map(RedQueue::iter))
    }

    /// Removes everything, highest priority first.
    pub fn drain_all(&mut self) -> Vec<T> {
        let mut out: Vec<T> = self.ef.drain().collect();
        for q in &mut self.red {
            out.extend(q.drain());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn big() -> QueueParams {
        QueueParams {
            ef_capacity: 1000,
            red: RedParams {
                min_th: 500.0,
                max_th: 900.0,
                capacity: 1000,
                ..RedParams::default()
            },
        }
    }

    #[test]
    fn strict_priority_order() {
        let mut q = EgressQueue::new(big());
        let mut rng = RngStream::new(0);
        q.enqueue("be", TrafficClass::Be, &mut rng).unwrap();
        q.enqueue("af2", TrafficClass::Af2, &mut rng).unwrap();
        q.enqueue("ef", TrafficClass::Ef, &mut rng).unwrap();
        q.enqueue("af1", TrafficClass::Af1, &mut rng).unwrap();
        let order: Vec<_> = std::iter::from_fn(|| q.dequeue()).map(|x| x.0).collect();
        assert_eq!(order, vec!["ef", "af1", "af2", "be"]);
    }

    #[test]
    fn be_waits_while_higher_classes_backlogged() {
        // Continuously backlogged EF starves BE entirely.
        let mut q = EgressQueue::new(big());
        let mut rng = RngStream::new(0);
        q.enqueue(0u32, TrafficClass::Be, &mut rng).unwrap();
        for i in 1..=100u32 {
            q.enqueue(i, TrafficClass::Ef, &mut rng).unwrap();
            let (x, class) = q.dequeue().unwrap();
            assert_eq!(class, TrafficClass::Ef);
            assert_eq!(x, i);
        }
        assert_eq!(q.dequeue(), Some((0, TrafficClass::Be)));
    }

    #[test]
    fn ef_is_drop_tail() {
        let mut q = EgressQueue::new(QueueParams {
            ef_capacity: 2,
            ..QueueParams::default()
        });
        let mut rng = RngStream::new(0);
        q.enqueue(1, TrafficClass::Ef, &mut rng).unwrap();
        q.enqueue(2, TrafficClass::Ef, &mut rng).unwrap();
        assert_eq!(
            q.enqueue(3, TrafficClass::Ef, &mut rng),
            Err((3, EnqueueOutcome::DropOverflow))
        );
        assert_eq!(q.counters(TrafficClass::Ef).overflow_drops, 1);
        assert_eq!(q.counters(TrafficClass::Ef).enqueued, 2);
    }
}
