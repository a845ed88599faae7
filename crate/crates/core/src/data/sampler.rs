//! Epoch-wise sampling without replacement with a fresh caption draw per visit.
//!
//! Scenes are laid out as a stream of per-epoch permutations; batch `s` takes
//! stream positions `s·B .. (s+1)·B`. When a batch straddles two epochs, scenes
//! of the new epoch that already appear in the old epoch's tail are swapped with
//! later entries of the new permutation, so every batch holds distinct scenes
//! and every epoch still visits each scene exactly once.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{LlipError, Result};
use crate::rng;

/// One sampled pair: scene index and caption index within that scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Draw {
    pub scene: usize,
    pub caption: usize,
}

#[derive(Debug, Clone)]
pub struct Sampler {
    counts: Vec<usize>,
    batch: usize,
    seed: u64,
    /// `(epoch, permutation)` for the two most recent epochs.
    cache: Vec<(usize, Vec<usize>)>,
}

impl Sampler {
    /// `caption_counts[i]` is the number of captions of scene `i`; `seed` is
    /// the sampling seed.
    pub fn new(caption_counts: Vec<usize>, batch: usize, seed: u64) -> Result<Self> {
        let n = caption_counts.len();
        if batch == 0 || batch > n {
            return Err(LlipError::Contract(format!(
                "batch size {} must be in 1..={} (dataset size)",
                batch, n
            )));
        }
        if caption_counts.contains(&0) {
            return Err(LlipError::Input("every scene needs at least one caption".into()));
        }
        Ok(Sampler {
            counts: caption_counts,
            batch,
            seed,
            cache: Vec::new(),
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    fn shuffled(&self, epoch: usize) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..self.counts.len()).collect();
        let mut r = ChaCha8Rng::seed_from_u64(rng::derive_indexed(self.seed, &[0, epoch as u64]));
        perm.shuffle(&mut r);
        perm
    }

    /// Swaps duplicates of `prev`'s straddling tail out of `next`'s head.
    fn repair(&self, prev: &[usize], next: &mut [usize], tail: usize) {
        let n = prev.len();
        let head = self.batch - tail;
        let taken: std::collections::HashSet<usize> = prev[n - tail..].iter().copied().collect();
        let mut donor = head;
        for i in 0..head {
            if taken.contains(&next[i]) {
                while taken.contains(&next[donor]) {
                    donor += 1;
                }
                next.swap(i, donor);
                donor += 1;
            }
        }
    }

    fn epoch(&mut self, e: usize) -> &[usize] {
        if let Some(pos) = self.cache.iter().position(|(k, _)| *k == e) {
            return &self.cache[pos].1;
        }
        let start = match self.cache.iter().filter(|(k, _)| *k < e).map(|(k, _)| *k).max() {
            Some(k) => k,
            None => {
                self.cache = vec![(0, self.shuffled(0))];
                0
            }
        };
        let mut prev = self
            .cache
            .iter()
            .find(|(k, _)| *k == start)
            .map(|(_, p)| p.clone())
            .expect("cached epoch");
        for k in start + 1..=e {
            let mut next = self.shuffled(k);
            let tail = (k * self.counts.len()) % self.batch;
            if tail != 0 {
                self.repair(&prev, &mut next, tail);
            }
            self.cache = vec![(k - 1, prev), (k, next.clone())];
            prev = next;
        }
        &self.cache.iter().find(|(k, _)| *k == e).expect("cached epoch").1
    }

    /// The pairs of training step `step` (0-based). Deterministic in
    /// `(seed, step)` regardless of call order.
    pub fn batch_at(&mut self, step: usize) -> Vec<Draw> {
        let n = self.counts.len();
        let mut out = Vec::with_capacity(self.batch);
        for slot in 0..self.batch {
            let pos = step * self.batch + slot;
            let scene = self.epoch(pos / n)[pos % n];
            let mut r = ChaCha8Rng::seed_from_u64(rng::derive_indexed(self.seed, &[1, pos as u64]));
            let caption = r.random_range(0..self.counts[scene]);
            out.push(Draw { scene, caption });
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn batch_larger_than_dataset_is_contract_error() {
        assert!(matches!(Sampler::new(vec![3; 4], 5, 0), Err(LlipError::Contract(_))));
        assert!(matches!(Sampler::new(vec![3; 4], 0, 0), Err(LlipError::Contract(_))));
    }

    #[test]
    fn epochs_and_batches_are_duplicate_free() {
        for (n, b) in [(10, 3), (7, 7), (9, 4), (5, 4), (12, 6)] {
            let mut s = Sampler::new(vec![2; n], b, 11).unwrap();
            let steps = 40;
            let mut stream = Vec::new();
            for step in 0..steps {
                let batch = s.batch_at(step);
                let distinct: HashSet<usize> = batch.iter().map(|d| d.scene).collect();
                assert_eq!(distinct.len(), b, "n={n} b={b} step={step}");
                stream.extend(batch.iter().map(|d| d.scene));
            }
            for epoch in stream.chunks_exact(n) {
                let set: HashSet<usize> = epoch.iter().copied().collect();
                assert_eq!(set.len(), n);
            }
        }
    }

    #[test]
    fn reproducible_out_of_order() {
        let mut a = Sampler::new(vec![3; 10], 4, 2).unwrap();
        let seq: Vec<_> = (0..20).map(|s| a.batch_at(s)).collect();
        let mut b = Sampler::new(vec![3; 10], 4, 2).unwrap();
        assert_eq!(b.batch_at(17), seq[17]);
        assert_eq!(b.batch_at(3), seq[3]);
        assert_eq!(b.batch_at(12), seq[12]);
    }
}
