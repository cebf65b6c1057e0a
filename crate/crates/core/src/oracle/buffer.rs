use std::fmt::Write as _;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::{OracleError, Result};

/// One training pair: unscaled network input `(x, u)` and label `h(x, u)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: DVector<f64>,
    pub label: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WritePolicy {
    #[default]
    Fifo,
    /// Replace the entry nearest to the newcomer when that raises the minimum
    /// pairwise distance, else the oldest.
    Diversity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    policy: WritePolicy,
    entries: Vec<Sample>,
    /// Insertion stamp per slot.
    stamps: Vec<u64>,
    counter: u64,
}

fn dist2(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm_squared()
}

impl ReplayBuffer {
    pub fn new(capacity: usize, policy: WritePolicy) -> Result<Self> {
        if capacity == 0 {
            return Err(OracleError::InvalidParam("buffer capacity must be positive".into()));
        }
        Ok(Self { capacity, policy, entries: Vec::new(), stamps: Vec::new(), counter: 0 })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn policy(&self) -> WritePolicy {
        self.policy
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() == self.capacity
    }

    pub fn entries(&self) -> &[Sample] {
        &self.entries
    }

    /// Entries from oldest to newest.
    pub fn ordered(&self) -> Vec<&Sample> {
        let mut idx: Vec<usize> = (0..self.entries.len()).collect();
        idx.sort_by_key(|&i| self.stamps[i]);
        idx.into_iter().map(|i| &self.entries[i]).collect()
    }

    fn oldest(&self) -> usize {
        (0..self.stamps.len()).min_by_key(|&i| self.stamps[i]).unwrap_or(0)
    }

    fn min_pairwise_excluding(&self, skip: usize) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.entries.len() {
            if i == skip {
                continue;
            }
            for j in i + 1..self.entries.len() {
                if j != skip {
                    best = best.min(dist2(&self.entries[i].input, &self.entries[j].input));
                }
            }
        }
        best
    }

    /// Inserts `sample`; returns the index of the replaced slot, if any.
    pub fn push(&mut self, sample: Sample) -> Result<Option<usize>> {
        if sample.input.iter().chain(sample.label.iter()).any(|v| !v.is_finite()) {
            return Err(OracleError::NonFinite);
        }
        if let Some(first) = self.entries.first() {
            if first.input.len() != sample.input.len() || first.label.len() != sample.label.len() {
                return Err(OracleError::ShapeMismatch("sample dimensions differ from buffer".into()));
            }
        }
        let stamp = self.counter;
        self.counter += 1;
        if !self.is_full() {
            self.entries.push(sample);
            self.stamps.push(stamp);
            return Ok(None);
        }
        let slot = match self.policy {
            WritePolicy::Fifo => self.oldest(),
            WritePolicy::Diversity => self.diversity_slot(&sample.input),
        };
        self.entries[slot] = sample;
        self.stamps[slot] = stamp;
        Ok(Some(slot))
    }

    fn diversity_slot(&self, input: &DVector<f64>) -> usize {
        let (nearest, _) = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (i, dist2(&e.input, input)))
            .fold((0, f64::INFINITY), |acc, (i, d)| if d < acc.1 { (i, d) } else { acc });
        let old_min = self.min_pairwise_excluding(usize::MAX);
        let to_new = self
            .entries
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != nearest)
            .map(|(_, e)| dist2(&e.input, input))
            .fold(f64::INFINITY, f64::min);
        let new_min = self.min_pairwise_excluding(nearest).min(to_new);
        if new_min > old_min {
            nearest
        } else {
            self.oldest()
        }
    }

    /// CSV dump, oldest first, with columns `x0..,u0..,h0..`.
    pub fn to_csv(&self, state_dim: usize) -> String {
        let mut s = String::new();
        let Some(first) = self.entries.first() else {
            return s;
        };
        let mut header: Vec<String> = Vec::new();
        let n_in = first.input.len();
        for i in 0..n_in {
            header.push(if i < state_dim { format!("x{i}") } else { format!("u{}", i - state_dim) });
        }
        header.extend((0..first.label.len()).map(|i| format!("h{i}")));
        let _ = writeln!(s, "{}", header.join(","));
        for e in self.ordered() {
            let row: Vec<String> = e.input.iter().chain(e.label.iter()).map(|v| format!("{v:e}")).collect();
            let _ = writeln!(s, "{}", row.join(","));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::dvec;

    fn sample(v: f64) -> Sample {
        Sample { input: dvec(&[v]), label: dvec(&[v * 10.0]) }
    }

    #[test]
    fn fifo_keeps_the_newest() {
        let mut b = ReplayBuffer::new(2, WritePolicy::Fifo).unwrap();
        for v in [1.0, 2.0, 3.0] {
            b.push(sample(v)).unwrap();
        }
        let inputs: Vec<f64> = b.ordered().iter().map(|s| s.input[0]).collect();
        assert_eq!(inputs, vec![2.0, 3.0]);
    }

    #[test]
    fn diversity_evicts_the_nearest_clustered_entry() {
        let mut b = ReplayBuffer::new(3, WritePolicy::Diversity).unwrap();
        for v in [0.0, 0.1, 0.15] {
            b.push(sample(v)).unwrap();
        }
        b.push(sample(10.0)).unwrap();
        let mut inputs: Vec<f64> = b.entries().iter().map(|s| s.input[0]).collect();
        inputs.sort_by(f64::total_cmp);
        assert_eq!(inputs, vec![0.0, 0.1, 10.0]);
    }

    #[test]
    fn diversity_falls_back_to_oldest() {
        let mut b = ReplayBuffer::new(3, WritePolicy::Diversity).unwrap();
        for v in [0.0, 5.0, 10.0] {
            b.push(sample(v)).unwrap();
        }
        // A point in the middle of a pair cannot raise the minimum distance.
        b.push(sample(5.1)).unwrap();
        let inputs: Vec<f64> = b.ordered().iter().map(|s| s.input[0]).collect();
        assert_eq!(inputs, vec![5.0, 10.0, 5.1]);
    }

    #[test]
    fn rejects_non_finite() {
        let mut b = ReplayBuffer::new(2, WritePolicy::Fifo).unwrap();
        assert_eq!(b.push(sample(f64::NAN)), Err(OracleError::NonFinite));
        assert!(b.is_empty());
    }

    #[test]
    fn csv_header() {
        let mut b = ReplayBuffer::new(2, WritePolicy::Fifo).unwrap();
        b.push(Sample { input: dvec(&[1.0, 2.0]), label: dvec(&[3.0]) }).unwrap();
        let csv = b.to_csv(1);
        assert_eq!(csv.lines().next(), Some("x0,u0,h0"));
        assert_eq!(csv.lines().count(), 2);
    }
}
