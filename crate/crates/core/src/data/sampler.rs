//! Identity-balanced P×K batches.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Yields batches of `p` distinct identities with `k` sample indices each.
/// One epoch visits every identity at least once; ids left over when the
/// identity count is not a multiple of `p` are topped up with other ids.
#[derive(Debug, Clone)]
pub struct BalancedBatches {
    by_id: Vec<(u32, Vec<usize>)>,
    p: usize,
    k: usize,
    rng: ChaCha8Rng,
}

impl BalancedBatches {
    /// `items` pairs a sample index with its identity.
    pub fn new(items: &[(usize, u32)], p: usize, k: usize, seed: u64) -> Result<Self> {
        if p == 0 || k == 0 {
            return Err(Error::config("P and K must be positive"));
        }
        let mut map: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for &(i, id) in items {
            map.entry(id).or_default().push(i);
        }
        if map.len() < p {
            return Err(Error::config(format!("{} identities cannot fill batches of P = {p}", map.len())));
        }
        Ok(BalancedBatches {
            by_id: map.into_iter().collect(),
            p,
            k,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    pub fn set_rng(&mut self, rng: ChaCha8Rng) {
        self.rng = rng;
    }

    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.by_id.len().div_ceil(self.p)
    }

    fn draw(&mut self, slot: usize) -> Vec<usize> {
        let pool = &self.by_id[slot].1;
        if pool.len() >= self.k {
            pool.choose_multiple(&mut self.rng, self.k).copied().collect()
        } else {
            (0..self.k).map(|_| *pool.choose(&mut self.rng).expect("non-empty pool")).collect()
        }
    }

    /// The batches of one epoch.
    pub fn epoch(&mut self) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.by_id.len()).collect();
        order.shuffle(&mut self.rng);
        let mut out = Vec::with_capacity(self.batches_per_epoch());
        for chunk in order.chunks(self.p) {
            let mut slots = chunk.to_vec();
            if slots.len() < self.p {
                let mut rest: Vec<usize> = order.iter().copied().filter(|s| !chunk.contains(s)).collect();
                rest.shuffle(&mut self.rng);
                slots.extend(rest.into_iter().take(self.p - chunk.len()));
            }
            let batch = slots.into_iter().flat_map(|s| self.draw(s)).collect();
            out.push(batch);
        }
        out
    }
}
