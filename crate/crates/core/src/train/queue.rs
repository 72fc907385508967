//! First-in first-out store of past negatives.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{DsfError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FifoQueue<E> {
    capacity: usize,
    items: VecDeque<E>,
}

impl<E> FifoQueue<E> {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(DsfError::config("loss.queue_capacity", "must be >= 1"));
        }
        Ok(Self {
            capacity,
            items: VecDeque::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Appends `batch`, evicting the oldest entries beyond capacity.
    pub fn push_batch(&mut self, batch: impl IntoIterator<Item = E>) {
        for e in batch {
            if self.items.len() == self.capacity {
                self.items.pop_front();
            }
            self.items.push_back(e);
        }
    }

    /// Entries from oldest to newest as one slice.
    pub fn as_slice(&mut self) -> &[E] {
        self.items.make_contiguous()
    }

    pub fn iter(&self) -> impl Iterator<Item = &E> {
        self.items.iter()
    }
}
