use crate::rng::{Prng, PrngState};
use crate::tensor::Tensor;

/// Pool of previously generated images fed to a discriminator.
///
/// Until full, every fresh image is stored and returned as is. Once full,
/// each query returns the fresh image with probability 1/2; otherwise the
/// fresh image replaces a uniformly chosen stored one, which is returned.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    stored: Vec<Tensor<f32>>,
    rng: Prng,
}

/// Outcome of one query on a full buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BufferChoice {
    ReturnFresh,
    Swap(usize),
}

impl ReplayBuffer {
    pub fn new(capacity: usize, rng: Prng) -> Self {
        Self {
            capacity,
            stored: Vec::with_capacity(capacity),
            rng,
        }
    }

    pub fn from_parts(capacity: usize, stored: Vec<Tensor<f32>>, rng_state: &PrngState) -> Self {
        Self {
            capacity,
            stored,
            rng: Prng::from_state(rng_state),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.stored.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stored.is_empty()
    }

    pub fn stored(&self) -> &[Tensor<f32>] {
        &self.stored
    }

    pub fn rng_state(&self) -> PrngState {
        self.rng.state()
    }

    pub fn query(&mut self, fresh: Tensor<f32>) -> Tensor<f32> {
        if self.stored.len() < self.capacity {
            self.stored.push(fresh.clone());
            return fresh;
        }
        if self.capacity == 0 {
            return fresh;
        }
        let choice = if self.rng.coin() {
            BufferChoice::ReturnFresh
        } else {
            BufferChoice::Swap(self.rng.below(self.capacity))
        };
        self.apply(fresh, choice)
    }

    /// Applies a given choice to a full buffer (also used by tests to force
    /// a branch).
    pub fn apply(&mut self, fresh: Tensor<f32>, choice: BufferChoice) -> Tensor<f32> {
        match choice {
            BufferChoice::ReturnFresh => fresh,
            BufferChoice::Swap(i) => std::mem::replace(&mut self.stored[i], fresh),
        }
    }
}
