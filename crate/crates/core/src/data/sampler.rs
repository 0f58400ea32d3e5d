use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::DataError;

/// Class-balanced batches: every draw picks a class with probability ½ and
/// takes the next index from that class's reshuffled queue. An epoch draws
/// `2·|minority|` indices, so the minority class is revisited within it.
#[derive(Debug, Clone)]
pub struct BalancedSampler {
    classes: [Vec<usize>; 2],
    queues: [Vec<usize>; 2],
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl BalancedSampler {
    pub fn new(labels: &[bool], batch_size: usize, rng: ChaCha8Rng) -> Result<Self, DataError> {
        if batch_size == 0 {
            return Err(DataError::Sampler("batch size must be positive".into()));
        }
        let neg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
        let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
        if pos.is_empty() || neg.is_empty() {
            return Err(DataError::Sampler(format!(
                "both classes are required, got {} positives and {} negatives",
                pos.len(),
                neg.len()
            )));
        }
        Ok(Self { classes: [neg, pos], queues: [Vec::new(), Vec::new()], batch_size, rng })
    }

    pub fn minority(&self) -> usize {
        self.classes[0].len().min(self.classes[1].len())
    }

    /// `ceil(2·|minority| / batch_size)`.
    pub fn batches_per_epoch(&self) -> usize {
        (2 * self.minority()).div_ceil(self.batch_size)
    }

    fn draw(&mut self) -> usize {
        let class = self.rng.random_bool(0.5) as usize;
        if self.queues[class].is_empty() {
            let mut q = self.classes[class].clone();
            q.shuffle(&mut self.rng);
            q.reverse();
            self.queues[class] = q;
        }
        self.queues[class].pop().expect("refilled")
    }

    /// Index batches for one epoch; the last batch may be short.
    pub fn epoch(&mut self) -> Vec<Vec<usize>> {
        let total = 2 * self.minority();
        let mut batches = Vec::with_capacity(self.batches_per_epoch());
        let mut drawn = 0;
        while drawn < total {
            let n = self.batch_size.min(total - drawn);
            batches.push((0..n).map(|_| self.draw()).collect());
            drawn += n;
        }
        batches
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn single_class_is_rejected() {
        assert!(BalancedSampler::new(&[true, true], 4, ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn epoch_length() {
        let mut labels = vec![false; 100];
        labels[..10].iter_mut().for_each(|l| *l = true);
        let mut s = BalancedSampler::new(&labels, 8, ChaCha8Rng::seed_from_u64(0)).unwrap();
        let e = s.epoch();
        assert_eq!(e.len(), 3);
        assert_eq!(e.iter().map(Vec::len).sum::<usize>(), 20);
    }
}
