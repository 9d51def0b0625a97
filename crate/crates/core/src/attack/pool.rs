//! The mutable set of admissible timesteps kept by the adaptive search.

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};

/// Sorted, disjoint, non-empty half-open integer intervals.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TimestepPool {
    intervals: Vec<(usize, usize)>,
}

impl TimestepPool {
    /// `[0, steps)`.
    pub fn full(steps: usize) -> Self {
        Self {
            intervals: vec![(0, steps)],
        }
    }

    pub fn from_intervals(intervals: Vec<(usize, usize)>) -> Result<Self> {
        for w in intervals.windows(2) {
            if w[0].1 > w[1].0 {
                return Err(Error::invalid("timestep_pool", "intervals overlap or are unsorted"));
            }
        }
        if intervals.iter().any(|(lo, hi)| lo >= hi) {
            return Err(Error::invalid("timestep_pool", "empty interval"));
        }
        // Merge touching neighbours so the representation is canonical.
        let mut merged: Vec<(usize, usize)> = Vec::with_capacity(intervals.len());
        for (lo, hi) in intervals {
            match merged.last_mut() {
                Some(last) if last.1 == lo => last.1 = hi,
                _ => merged.push((lo, hi)),
            }
        }
        Ok(Self { intervals: merged })
    }

    pub fn intervals(&self) -> &[(usize, usize)] {
        &self.intervals
    }

    /// Total number of timesteps in the pool.
    pub fn len(&self) -> usize {
        self.intervals.iter().map(|(lo, hi)| hi - lo).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    pub fn contains(&self, t: usize) -> bool {
        self.intervals.iter().any(|&(lo, hi)| lo <= t && t < hi)
    }

    /// The `i`-th smallest timestep.
    pub fn nth(&self, mut i: usize) -> Option<usize> {
        for &(lo, hi) in &self.intervals {
            if i < hi - lo {
                return Some(lo + i);
            }
            i -= hi - lo;
        }
        None
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.intervals.iter().flat_map(|&(lo, hi)| lo..hi)
    }

    /// Pool with `[lo, hi)` removed. May be empty.
    pub fn without(&self, lo: usize, hi: usize) -> Self {
        let mut out = Vec::with_capacity(self.intervals.len() + 1);
        for &(a, b) in &self.intervals {
            if b <= lo || a >= hi {
                out.push((a, b));
                continue;
            }
            if a < lo {
                out.push((a, lo));
            }
            if hi < b {
                out.push((hi, b));
            }
        }
        Self { intervals: out }
    }

    pub fn is_subset_of(&self, other: &TimestepPool) -> bool {
        self.intervals.iter().all(|&(lo, hi)| {
            other
                .intervals
                .iter()
                .any(|&(a, b)| a <= lo && hi <= b)
        })
    }

    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let i = rng.gen_range(0..self.len());
        self.nth(i).expect("index within pool")
    }

    /// Up to `k` distinct timesteps drawn without replacement, in draw order.
    pub fn sample_distinct<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Vec<usize> {
        let n = self.len();
        index::sample(rng, n, k.min(n))
            .into_iter()
            .map(|i| self.nth(i).expect("index within pool"))
            .collect()
    }

    /// One `lo hi` line per interval.
    pub fn to_text(&self) -> String {
        self.intervals
            .iter()
            .map(|(lo, hi)| format!("{lo} {hi}\n"))
            .collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut intervals = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let mut parts = line.split_whitespace().map(str::parse::<usize>);
            match (parts.next(), parts.next(), parts.next()) {
                (Some(Ok(lo)), Some(Ok(hi)), None) => intervals.push((lo, hi)),
                _ => return Err(Error::Format(format!("bad pool line `{line}`"))),
            }
        }
        Self::from_intervals(intervals)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;

    #[test]
    fn removal_splits_and_clamps() {
        let p = TimestepPool::full(100);
        let q = p.without(10, 20);
        assert_eq!(q.intervals(), &[(0, 10), (20, 100)]);
        assert_eq!(q.len(), 90);
        let r = q.without(0, 15).without(95, 200);
        assert_eq!(r.intervals(), &[(20, 95)]);
        assert!(r.is_subset_of(&q) && q.is_subset_of(&p));
        assert!(p.without(0, 100).is_empty());
    }

    #[test]
    fn nth_walks_intervals() {
        let p = TimestepPool::from_intervals(vec![(0, 3), (10, 12)]).unwrap();
        let all: Vec<usize> = (0..p.len()).map(|i| p.nth(i).unwrap()).collect();
        assert_eq!(all, vec![0, 1, 2, 10, 11]);
        assert_eq!(p.iter().collect::<Vec<_>>(), all);
        assert_eq!(p.nth(5), None);
    }

    #[test]
    fn distinct_sampling_falls_back_to_everything() {
        let p = TimestepPool::from_intervals(vec![(4, 7)]).unwrap();
        let mut s = p.sample_distinct(5, &mut seeded(1));
        s.sort();
        assert_eq!(s, vec![4, 5, 6]);
    }

    #[test]
    fn rejects_malformed_intervals() {
        assert!(TimestepPool::from_intervals(vec![(5, 5)]).is_err());
        assert!(TimestepPool::from_intervals(vec![(0, 10), (5, 20)]).is_err());
        let merged = TimestepPool::from_intervals(vec![(0, 5), (5, 9)]).unwrap();
        assert_eq!(merged.intervals(), &[(0, 9)]);
    }

    #[test]
    fn text_round_trip() {
        let p = TimestepPool::full(1000).without(300, 340).without(900, 1000);
        assert_eq!(TimestepPool::parse(&p.to_text()).unwrap(), p);
    }

    proptest! {
        #[test]
        fn removals_keep_invariants(cuts in prop::collection::vec((0usize..1000, 1usize..60), 0..30)) {
            let mut pool = TimestepPool::full(1000);
            for (lo, w) in cuts {
                let next = pool.without(lo, lo + w);
                prop_assert!(next.is_subset_of(&pool));
                let removed = pool.len() - next.len();
                prop_assert!(removed <= w);
                for t in pool.iter() {
                    let inside = t >= lo && t < lo + w;
                    prop_assert_eq!(next.contains(t), !inside);
                }
                pool = next;
                let iv = pool.intervals();
                prop_assert!(iv.windows(2).all(|w| w[0].1 < w[1].0));
                prop_assert!(iv.iter().all(|(a, b)| a < b));
            }
        }
    }
}
