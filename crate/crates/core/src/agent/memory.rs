use std::collections::VecDeque;

use rand::Rng;

use crate::world_model::TransitionRecord;

/// Transitions gathered since the last learning phase.
#[derive(Debug, Clone, Default)]
pub struct OnPolicyMemory {
    records: Vec<TransitionRecord>,
}

impl OnPolicyMemory {
    pub fn push(&mut self, record: TransitionRecord) {
        self.records.push(record);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[TransitionRecord] {
        &self.records
    }

    /// Removes and returns every stored transition.
    pub fn wipe(&mut self) -> Vec<TransitionRecord> {
        std::mem::take(&mut self.records)
    }
}

/// Fixed-capacity FIFO of recent transitions for world-model training.
#[derive(Debug, Clone)]
pub struct WorldModelMemory {
    records: VecDeque<TransitionRecord>,
    capacity: usize,
}

impl WorldModelMemory {
    pub fn new(capacity: usize) -> Self {
        Self {
            records: VecDeque::with_capacity(capacity.min(1 << 16)),
            capacity: capacity.max(1),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn push(&mut self, record: TransitionRecord) {
        if self.records.len() == self.capacity {
            self.records.pop_front();
        }
        self.records.push_back(record);
    }

    pub fn extend(&mut self, records: impl IntoIterator<Item = TransitionRecord>) {
        for r in records {
            self.push(r);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &TransitionRecord> {
        self.records.iter()
    }

    /// Up to `size` distinct transitions drawn uniformly.
    pub fn sample<R: Rng + ?Sized>(&self, size: usize, rng: &mut R) -> Vec<TransitionRecord> {
        let n = size.min(self.records.len());
        rand::seq::index::sample(rng, self.records.len(), n)
            .into_iter()
            .map(|i| self.records[i].clone())
            .collect()
    }
}
