//! FIFO replay buffer.

use std::collections::VecDeque;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    /// Action before squashing.
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer { capacity: capacity.max(1), items: VecDeque::new() }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Appends, evicting the oldest entry at capacity.
    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.items.get(i)
    }

    /// `n` uniform draws with replacement.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Vec<&Transition> {
        if self.items.is_empty() {
            return Vec::new();
        }
        (0..n).map(|_| &self.items[rng.gen_range(0..self.items.len())]).collect()
    }
}
