use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Endless stream of index batches.
///
/// Balanced mode picks a class uniformly for every slot and then a trial of
/// that class uniformly, so minority classes are drawn with replacement.
/// Classes without trials are left out of the draw.
/// Shuffled mode walks seeded permutations of the whole set.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    rng: ChaCha8Rng,
    batch_size: usize,
    mode: Mode,
}

#[derive(Clone, Debug)]
enum Mode {
    Balanced(Vec<Vec<usize>>),
    Shuffled { order: Vec<usize>, cursor: usize },
}

impl BatchSampler {
    pub fn balanced(labels: &[usize], n_classes: usize, batch_size: usize, rng: ChaCha8Rng) -> Result<Self> {
        check_batch(batch_size)?;
        let mut by_class = vec![Vec::new(); n_classes];
        for (i, &y) in labels.iter().enumerate() {
            if y >= n_classes {
                return Err(Error::data(format!("labels[{i}]"), format!("class {y} out of range")));
            }
            by_class[y].push(i);
        }
        by_class.retain(|c| !c.is_empty());
        if by_class.is_empty() {
            return Err(Error::data("trials", "empty training set"));
        }
        Ok(BatchSampler { rng, batch_size, mode: Mode::Balanced(by_class) })
    }

    pub fn shuffled(n: usize, batch_size: usize, rng: ChaCha8Rng) -> Result<Self> {
        check_batch(batch_size)?;
        if n == 0 {
            return Err(Error::data("trials", "empty training set"));
        }
        let order: Vec<usize> = (0..n).collect();
        Ok(BatchSampler {
            rng,
            batch_size,
            mode: Mode::Shuffled { cursor: n, order },
        })
    }
}

fn check_batch(batch_size: usize) -> Result<()> {
    if batch_size == 0 {
        return Err(Error::config("train.batch_size", "must be positive"));
    }
    Ok(())
}

impl Iterator for BatchSampler {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let rng = &mut self.rng;
        let batch = match &mut self.mode {
            Mode::Balanced(by_class) => (0..self.batch_size)
                .map(|_| {
                    let class = &by_class[rng.gen_range(0..by_class.len())];
                    class[rng.gen_range(0..class.len())]
                })
                .collect(),
            Mode::Shuffled { order, cursor } => (0..self.batch_size)
                .map(|_| {
                    if *cursor == order.len() {
                        order.shuffle(rng);
                        *cursor = 0;
                    }
                    *cursor += 1;
                    order[*cursor - 1]
                })
                .collect(),
        };
        Some(batch)
    }
}

/// Class-balanced index batches, deterministic in `seed`.
pub fn balanced_batches(labels: &[usize], n_classes: usize, batch_size: usize, seed: u64) -> Result<BatchSampler> {
    use rand::SeedableRng;
    BatchSampler::balanced(labels, n_classes, batch_size, ChaCha8Rng::seed_from_u64(seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn minority_class_is_upsampled() {
        let labels: Vec<usize> = (0..600).map(|i| usize::from(i % 6 == 0)).collect();
        let sampler = balanced_batches(&labels, 2, 100, 11).unwrap();
        let targets: usize = sampler
            .take(1000)
            .map(|b| b.iter().filter(|&&i| labels[i] == 1).count())
            .sum();
        let frac = targets as f64 / 100_000.0;
        assert!((0.48..=0.52).contains(&frac), "{frac}");
    }

    #[test]
    fn chi_square_on_batch_counts() {
        // 3 classes, imbalanced 1:2:7; counts per class over 1000 batches of 30
        let labels: Vec<usize> = (0..100).map(|i| if i < 10 { 0 } else if i < 30 { 1 } else { 2 }).collect();
        let mut counts = [0f64; 3];
        for b in balanced_batches(&labels, 3, 30, 5).unwrap().take(1000) {
            for i in b {
                counts[labels[i]] += 1.0;
            }
        }
        let expected = 30_000.0 / 3.0;
        let chi2: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
        // chi-square with 2 degrees of freedom, p = 0.01
        assert!(chi2 < 9.21, "{chi2}");
    }

    #[test]
    fn balanced_set_keeps_marginals() {
        let labels: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let mut hits = [0usize; 40];
        for b in balanced_batches(&labels, 2, 40, 3).unwrap().take(500) {
            for i in b {
                hits[i] += 1;
            }
        }
        // each trial expected 500 times
        assert!(hits.iter().all(|&h| (400..600).contains(&h)));
    }

    #[test]
    fn deterministic_in_seed() {
        let labels = [0, 1, 1, 0, 1];
        let a: Vec<_> = balanced_batches(&labels, 2, 4, 9).unwrap().take(5).collect();
        let b: Vec<_> = balanced_batches(&labels, 2, 4, 9).unwrap().take(5).collect();
        let c: Vec<_> = balanced_batches(&labels, 2, 4, 10).unwrap().take(5).collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn absent_class_is_skipped() {
        let b = balanced_batches(&[0, 2, 2, 2], 3, 64, 1).unwrap().next().unwrap();
        let zeros = b.iter().filter(|&&i| i == 0).count();
        assert!(zeros > 16 && zeros < 48, "{zeros}");
        assert!(balanced_batches(&[], 2, 4, 1).is_err());
        assert!(balanced_batches(&[0, 1], 2, 0, 1).is_err());
    }

    #[test]
    fn shuffled_covers_every_trial_per_pass() {
        let s = BatchSampler::shuffled(10, 5, ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut seen: Vec<usize> = s.take(2).flatten().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }
}
