use std::collections::{BTreeSet, VecDeque};

use serde::Serialize;

use crate::model::ExecutionId;

/// Bounded processing capacity for starting preparation and postprocessing.
/// Waiting executions are served first come, first served.
#[derive(Debug, Clone, Serialize)]
pub struct SlotPool {
    pub max_preparing: usize,
    pub max_postprocessing: usize,
    preparing: BTreeSet<ExecutionId>,
    postprocessing: BTreeSet<ExecutionId>,
    preparing_queue: VecDeque<ExecutionId>,
    postprocessing_queue: VecDeque<ExecutionId>,
}

impl SlotPool {
    pub fn new(max_preparing: usize, max_postprocessing: usize) -> Self {
        Self {
            max_preparing: max_preparing.max(1),
            max_postprocessing: max_postprocessing.max(1),
            preparing: BTreeSet::new(),
            postprocessing: BTreeSet::new(),
            preparing_queue: VecDeque::new(),
            postprocessing_queue: VecDeque::new(),
        }
    }

    pub fn preparing_occupancy(&self) -> usize {
        self.preparing.len()
    }

    pub fn postprocessing_occupancy(&self) -> usize {
        self.postprocessing.len()
    }

    pub fn has_free_preparing(&self) -> bool {
        self.preparing.len() < self.max_preparing
    }

    pub fn has_free_postprocessing(&self) -> bool {
        self.postprocessing.len() < self.max_postprocessing
    }

    pub fn enqueue_preparing(&mut self, id: ExecutionId) {
        self.preparing_queue.push_back(id);
    }

    pub fn enqueue_postprocessing(&mut self, id: ExecutionId) {
        self.postprocessing_queue.push_back(id);
    }

    /// Next waiting execution, if a preparing slot is free.
    pub fn next_preparing(&mut self) -> Option<ExecutionId> {
        if self.has_free_preparing() {
            self.preparing_queue.pop_front()
        } else {
            None
        }
    }

    pub fn next_postprocessing(&mut self) -> Option<ExecutionId> {
        if self.has_free_postprocessing() {
            self.postprocessing_queue.pop_front()
        } else {
            None
        }
    }

    pub fn has_waiting(&self) -> bool {
        (!self.preparing_queue.is_empty() && self.has_free_preparing())
            || (!self.postprocessing_queue.is_empty() && self.has_free_postprocessing())
    }

    /// Panics if the pool is full; callers check first.
    pub fn occupy_preparing(&mut self, id: &ExecutionId) {
        assert!(
            self.preparing.contains(id) || self.has_free_preparing(),
            "preparing slots exhausted"
        );
        self.preparing.insert(id.clone());
    }

    pub fn occupy_postprocessing(&mut self, id: &ExecutionId) {
        assert!(
            self.postprocessing.contains(id) || self.has_free_postprocessing(),
            "postprocessing slots exhausted"
        );
        self.postprocessing.insert(id.clone());
    }

    pub fn release(&mut self, id: &ExecutionId) {
        self.preparing.remove(id);
        self.postprocessing.remove(id);
    }

    /// Drops `id` from both queues.
    pub fn dequeue(&mut self, id: &ExecutionId) {
        self.preparing_queue.retain(|x| x != id);
        self.postprocessing_queue.retain(|x| x != id);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fifo_and_bounded() {
        let mut p = SlotPool::new(2, 1);
        for i in 0..4 {
            p.enqueue_preparing(format!("e{i}").into());
        }
        let a = p.next_preparing().unwrap();
        p.occupy_preparing(&a);
        let b = p.next_preparing().unwrap();
        p.occupy_preparing(&b);
        assert_eq!((a.as_str(), b.as_str()), ("e0", "e1"));
        assert!(p.next_preparing().is_none());
        p.release(&a);
        assert_eq!(p.next_preparing().unwrap().as_str(), "e2");
    }
}
