//! Labelled FIFO memory of detached EMA embeddings.

use std::collections::VecDeque;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::dot;

const UNIT_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct QueueEntry {
    pub z: Vec<f64>,
    pub label: usize,
    pub index: u64,
}

#[derive(Clone, Debug)]
pub struct MemoryQueue {
    capacity: usize,
    dim: usize,
    entries: VecDeque<QueueEntry>,
    next_index: u64,
}

impl MemoryQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::Config(format!(
                "queue needs positive capacity and dim, got {capacity} × {dim}"
            )));
        }
        Ok(Self {
            capacity,
            dim,
            entries: VecDeque::with_capacity(capacity),
            next_index: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &QueueEntry> {
        self.entries.iter()
    }

    /// Append in order, evicting the oldest entries beyond capacity. The
    /// whole batch is validated before anything is inserted.
    pub fn enqueue_batch(&mut self, embeddings: &[Vec<f64>], labels: &[usize]) -> Result<()> {
        if embeddings.len() != labels.len() {
            return Err(Error::Contract(format!(
                "{} embeddings but {} labels",
                embeddings.len(),
                labels.len()
            )));
        }
        for z in embeddings {
            if z.len() != self.dim {
                return Err(Error::ShapeMismatch {
                    op: "enqueue",
                    left: vec![z.len()],
                    right: vec![self.dim],
                });
            }
            let n = dot(z, z).sqrt();
            if (n - 1.0).abs() > UNIT_TOL {
                return Err(Error::Contract(format!("queue entry has norm {n}, expected 1")));
            }
        }
        for (z, &label) in embeddings.iter().zip(labels) {
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
            }
            self.entries.push_back(QueueEntry {
                z: z.clone(),
                label,
                index: self.next_index,
            });
            self.next_index += 1;
        }
        Ok(())
    }

    pub fn snapshot(&self) -> Snapshot {
        let mut data = Vec::with_capacity(self.entries.len() * self.dim);
        let mut labels = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            data.extend_from_slice(&e.z);
            labels.push(e.label);
        }
        Snapshot {
            dim: self.dim,
            data: Arc::new(data),
            labels: Arc::new(labels),
        }
    }

    /// Positions of entries labelled `label`.
    pub fn positives_of(&self, label: usize) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.label == label)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Frozen copy of the queue: an `n × dim` embedding matrix and its labels.
/// Cheap to clone and safe to share across threads.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    dim: usize,
    data: Arc<Vec<f64>>,
    labels: Arc<Vec<usize>>,
}

impl Snapshot {
    /// Build a snapshot directly from rows (used by probes and tests).
    pub fn from_rows(rows: &[Vec<f64>], labels: &[usize], dim: usize) -> Result<Self> {
        if rows.len() != labels.len() {
            return Err(Error::Contract("rows and labels differ in length".into()));
        }
        if let Some(r) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::ShapeMismatch {
                op: "snapshot",
                left: vec![r.len()],
                right: vec![dim],
            });
        }
        Ok(Self {
            dim,
            data: Arc::new(rows.concat()),
            labels: Arc::new(labels.to_vec()),
        })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            data: Arc::new(vec![]),
            labels: Arc::new(vec![]),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrix(&self) -> &[f64] {
        &self.data
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.data[k * self.dim..(k + 1) * self.dim]
    }

    /// `P_i`: rows whose label equals `label`.
    pub fn positives_of(&self, label: usize) -> Vec<usize> {
        (0..self.len()).filter(|&k| self.labels[k] == label).collect()
    }

    /// `N_i`: the complement of [`Snapshot::positives_of`].
    pub fn negatives_of(&self, label: usize) -> Vec<usize> {
        (0..self.len()).filter(|&k| self.labels[k] != label).collect()
    }

    pub fn count_of(&self, label: usize) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Same snapshot with rows reordered by `perm` (row `k` of the result is
    /// row `perm[k]` of `self`).
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        let mut labels = Vec::with_capacity(self.len());
        for &p in perm {
            data.extend_from_slice(self.row(p));
            labels.push(self.labels[p]);
        }
        Self {
            dim: self.dim,
            data: Arc::new(data),
            labels: Arc::new(labels),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(i: usize) -> Vec<f64> {
        let mut v = vec![0.0; 4];
        v[i % 4] = 1.0;
        v
    }

    #[test]
    fn fifo_eviction() {
        let mut q = MemoryQueue::new(4, 4).unwrap();
        for i in 0..5 {
            q.enqueue_batch(&[e(i)], &[10 + i]).unwrap();
        }
        let labels: Vec<usize> = q.entries().map(|x| x.label).collect();
        assert_eq!(labels, vec![11, 12, 13, 14]);
        let idx: Vec<u64> = q.entries().map(|x| x.index).collect();
        assert_eq!(idx, vec![1, 2, 3, 4]);
    }

    #[test]
    fn empty_batch_is_identity() {
        let mut q = MemoryQueue::new(4, 4).unwrap();
        q.enqueue_batch(&[e(0), e(1)], &[1, 2]).unwrap();
        let before = q.snapshot();
        q.enqueue_batch(&[], &[]).unwrap();
        assert_eq!(q.snapshot(), before);
    }

    #[test]
    fn contract_errors() {
        let mut q = MemoryQueue::new(4, 4).unwrap();
        assert!(matches!(
            q.enqueue_batch(&[vec![1.0, 1.0, 0.0, 0.0]], &[0]),
            Err(Error::Contract(_))
        ));
        assert!(q.enqueue_batch(&[e(0)], &[0, 1]).is_err());
        assert!(q.enqueue_batch(&[vec![1.0]], &[0]).is_err());
        // nothing was inserted by the failed calls
        assert!(q.is_empty());
    }

    #[test]
    fn positives_filter() {
        let mut q = MemoryQueue::new(8, 4).unwrap();
        q.enqueue_batch(&[e(0), e(1), e(2), e(3)], &[1, 2, 1, 3]).unwrap();
        assert_eq!(q.positives_of(1), vec![0, 2]);
        assert!(q.positives_of(7).is_empty());
        let s = q.snapshot();
        assert_eq!(s.positives_of(1), vec![0, 2]);
        assert_eq!(s.negatives_of(1), vec![1, 3]);
    }

    #[test]
    fn snapshot_is_frozen() {
        let mut q = MemoryQueue::new(3, 4).unwrap();
        let empty = q.snapshot();
        assert_eq!(empty.len(), 0);
        assert!(empty.matrix().is_empty());
        q.enqueue_batch(&[e(0), e(1)], &[0, 1]).unwrap();
        let s = q.snapshot();
        q.enqueue_batch(&[e(2), e(3)], &[2, 3]).unwrap();
        assert_eq!(s.labels(), &[0, 1]);
        for (k, entry) in [e(0), e(1)].iter().enumerate() {
            assert_eq!(s.row(k), entry.as_slice());
        }
        assert_eq!(q.snapshot().labels(), &[1, 2, 3]);
    }
}
