use rand::Rng;

use crate::env::Observation;
use crate::error::{Error, Result};
use crate::io::dataset::{dequantize, quantize};
use crate::nn::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub s: Observation,
    pub a: usize,
    pub r: f32,
    pub s_next: Observation,
    pub terminal: bool,
}

/// Stacked minibatch ready for a network update.
#[derive(Clone, Debug)]
pub struct Batch {
    pub s: Tensor,
    pub actions: Vec<usize>,
    pub rewards: Vec<f32>,
    pub s_next: Tensor,
    pub terminals: Vec<bool>,
}

struct Slot {
    s: Vec<u8>,
    a: usize,
    r: f32,
    s_next: Vec<u8>,
    terminal: bool,
}

/// Fixed-capacity ring buffer; frames are kept 8-bit quantized.
pub struct ReplayBuffer {
    slots: Vec<Slot>,
    capacity: usize,
    next: usize,
    shape: [usize; 3],
}

impl ReplayBuffer {
    pub fn new(capacity: usize, shape: [usize; 3]) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::config("replay capacity must be positive"));
        }
        Ok(Self { slots: Vec::with_capacity(capacity.min(1 << 16)), capacity, next: 0, shape })
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: Transition) -> Result<()> {
        if t.s.shape() != self.shape || t.s_next.shape() != self.shape {
            return Err(Error::dim(format!("transition shape {:?} vs buffer {:?}", t.s.shape(), self.shape)));
        }
        let slot = Slot { s: quantize(t.s.data()), a: t.a, r: t.r, s_next: quantize(t.s_next.data()), terminal: t.terminal };
        if self.slots.len() < self.capacity {
            self.slots.push(slot);
        } else {
            self.slots[self.next] = slot;
        }
        self.next = (self.next + 1) % self.capacity;
        Ok(())
    }

    /// Transition `i` in storage order.
    pub fn get(&self, i: usize) -> Result<Transition> {
        let slot = self.slots.get(i).ok_or_else(|| Error::input(format!("replay index {i} out of range")))?;
        let obs = |q: &[u8]| Observation::new(Tensor::new(self.shape.to_vec(), dequantize(q)).expect("shape"));
        Ok(Transition { s: obs(&slot.s)?, a: slot.a, r: slot.r, s_next: obs(&slot.s_next)?, terminal: slot.terminal })
    }

    /// `n` indices drawn uniformly with replacement.
    pub fn sample_indices<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<usize>> {
        if self.slots.len() < n {
            return Err(Error::state(format!("cannot sample {n} from a buffer holding {}", self.slots.len())));
        }
        Ok((0..n).map(|_| rng.gen_range(0..self.slots.len())).collect())
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let [k, h, w] = self.shape;
        let per = k * h * w;
        let mut s = Vec::with_capacity(per * indices.len());
        let mut s_next = Vec::with_capacity(per * indices.len());
        let (mut actions, mut rewards, mut terminals) = (Vec::new(), Vec::new(), Vec::new());
        for &i in indices {
            let slot = self.slots.get(i).ok_or_else(|| Error::input(format!("replay index {i} out of range")))?;
            s.extend(dequantize(&slot.s));
            s_next.extend(dequantize(&slot.s_next));
            actions.push(slot.a);
            rewards.push(slot.r);
            terminals.push(slot.terminal);
        }
        let shape = vec![indices.len(), k, h, w];
        Ok(Batch { s: Tensor::new(shape.clone(), s)?, actions, rewards, s_next: Tensor::new(shape, s_next)?, terminals })
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Batch> {
        let idx = self.sample_indices(n, rng)?;
        self.batch(&idx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn obs(v: f32) -> Observation {
        Observation::new(Tensor::full(&[1, 2, 2], v)).unwrap()
    }

    fn tr(i: usize) -> Transition {
        Transition { s: obs(0.0), a: i, r: i as f32, s_next: obs(1.0), terminal: false }
    }

    #[test]
    fn never_exceeds_capacity_and_overwrites_oldest() {
        let mut b = ReplayBuffer::new(3, [1, 2, 2]).unwrap();
        for i in 0..5 {
            b.push(tr(i)).unwrap();
            assert!(b.len() <= 3);
        }
        let rs: Vec<f32> = (0..3).map(|i| b.get(i).unwrap().r).collect();
        assert_eq!(rs, vec![3.0, 4.0, 2.0]);
    }

    #[test]
    fn sampling_needs_a_full_batch() {
        let mut b = ReplayBuffer::new(10, [1, 2, 2]).unwrap();
        b.push(tr(0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(b.sample_indices(2, &mut rng), Err(Error::State(_))));
        b.push(tr(1)).unwrap();
        let batch = b.sample(2, &mut rng).unwrap();
        assert_eq!(batch.s.shape(), &[2, 1, 2, 2]);
        assert_eq!(batch.s_next.data(), &[1.0; 8]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut b = ReplayBuffer::new(2, [2, 2, 2]).unwrap();
        assert!(matches!(b.push(tr(0)), Err(Error::Dimension(_))));
    }
}
