//! Neighbourhood pseudo-labelling and the label-aware negative queue.

use std::collections::VecDeque;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::model::argmax;

const NORM_EPS: f64 = 1e-12;

fn normalized(row: &[f64]) -> Vec<f64> {
    let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
    row.iter().map(|v| v / n).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Fixed-capacity FIFO of (unit feature, probability) pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    capacity: usize,
    dim: usize,
    classes: usize,
    features: Vec<Vec<f64>>,
    probs: Vec<Vec<f64>>,
    cursor: usize,
}

impl MemoryBank {
    pub fn new(capacity: usize, dim: usize, classes: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 || classes == 0 {
            return Err(Error::InvalidArgument("bank capacity, dim and classes must be >= 1".into()));
        }
        Ok(Self {
            capacity,
            dim,
            classes,
            features: Vec::new(),
            probs: Vec::new(),
            cursor: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn feature(&self, slot: usize) -> &[f64] {
        &self.features[slot]
    }

    pub fn probs(&self, slot: usize) -> &[f64] {
        &self.probs[slot]
    }

    /// Writes every row at the cursor, overwriting the oldest entry once full.
    pub fn update(&mut self, features: &Tensor, probs: &Tensor) -> Result<()> {
        if features.rank() != 2 || features.shape()[1] != self.dim {
            return Err(Error::shape(
                "bank_update",
                format!("features {:?}, bank dim {}", features.shape(), self.dim),
            ));
        }
        if probs.rank() != 2 || probs.shape()[1] != self.classes || probs.shape()[0] != features.shape()[0] {
            return Err(Error::shape(
                "bank_update",
                format!("probs {:?}, bank classes {}", probs.shape(), self.classes),
            ));
        }
        for i in 0..features.shape()[0] {
            let f = normalized(features.row(i));
            let p = probs.row(i).to_vec();
            if self.features.len() < self.capacity {
                self.features.push(f);
                self.probs.push(p);
            } else {
                self.features[self.cursor] = f;
                self.probs[self.cursor] = p;
            }
            self.cursor = (self.cursor + 1) % self.capacity;
        }
        Ok(())
    }

    /// Slots of the `k` most cosine-similar entries, most similar first,
    /// ties to the lower slot.
    pub fn knn(&self, query: &[f64], k: usize) -> Result<Vec<usize>> {
        if query.len() != self.dim {
            return Err(Error::shape("knn_neighbors", format!("query dim {} != {}", query.len(), self.dim)));
        }
        if k > self.len() {
            return Err(Error::BankTooSmall {
                requested: k,
                available: self.len(),
            });
        }
        let q = normalized(query);
        let mut scored: Vec<(f64, usize)> = self
            .features
            .iter()
            .enumerate()
            .map(|(j, f)| (dot(&q, f), j))
            .collect();
        let order = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
        if k < scored.len() && k > 0 {
            scored.select_nth_unstable_by(k - 1, order);
            scored.truncate(k);
        }
        scored.sort_by(order);
        scored.truncate(k);
        Ok(scored.into_iter().map(|(_, j)| j).collect())
    }

    /// Mean probability of the `k` nearest entries and its argmax.
    pub fn refine(&self, query: &[f64], k: usize) -> Result<RefinedLabel> {
        if k == 0 {
            return Err(Error::InvalidArgument("K must be >= 1".into()));
        }
        let neighbors = self.knn(query, k)?;
        let mut probs = vec![0.0; self.classes];
        for &j in &neighbors {
            for (a, b) in probs.iter_mut().zip(&self.probs[j]) {
                *a += b;
            }
        }
        probs.iter_mut().for_each(|v| *v /= k as f64);
        Ok(RefinedLabel {
            label: argmax(&probs),
            probs,
            neighbors,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefinedLabel {
    pub probs: Vec<f64>,
    pub label: usize,
    pub neighbors: Vec<usize>,
}

/// One key in a [`TemporalQueue`] with its recent pseudo-labels.
#[derive(Clone, Debug, PartialEq)]
pub struct QueueEntry {
    /// Dataset index of the sample the key came from.
    pub id: usize,
    pub key: Vec<f64>,
    /// `(epoch, label)` pairs, oldest first.
    pub history: Vec<(u64, usize)>,
}

/// FIFO of negative keys that remembers each key's pseudo-labels over the
/// last `history_len` epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalQueue {
    capacity: usize,
    history_len: usize,
    dim: usize,
    entries: VecDeque<QueueEntry>,
}

fn trim(history: &mut Vec<(u64, usize)>, epoch: u64, t: usize) {
    history.retain(|&(e, _)| e + t as u64 > epoch);
    if history.len() > t {
        history.drain(..history.len() - t);
    }
}

impl TemporalQueue {
    pub fn new(capacity: usize, history_len: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || history_len == 0 || dim == 0 {
            return Err(Error::InvalidArgument("queue capacity, T and dim must be >= 1".into()));
        }
        Ok(Self {
            capacity,
            history_len,
            dim,
            entries: VecDeque::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn history_len(&self) -> usize {
        self.history_len
    }

    pub fn entries(&self) -> impl Iterator<Item = &QueueEntry> {
        self.entries.iter()
    }

    pub fn entry(&self, j: usize) -> &QueueEntry {
        &self.entries[j]
    }

    /// History of sample `id`, if it is queued.
    pub fn history_of(&self, id: usize) -> Option<&[(u64, usize)]> {
        self.entries.iter().find(|e| e.id == id).map(|e| e.history.as_slice())
    }

    /// Enqueues `keys` (normalized) with their labels at `epoch`. A sample
    /// already in the queue is moved to the back with its refreshed key and
    /// its history extended; histories keep only the last `T` epochs.
    pub fn record(&mut self, ids: &[usize], keys: &Tensor, labels: &[usize], epoch: u64) -> Result<()> {
        if keys.rank() != 2 || keys.shape()[1] != self.dim || keys.shape()[0] != ids.len() || labels.len() != ids.len() {
            return Err(Error::shape(
                "queue_record",
                format!("keys {:?}, {} ids, {} labels, dim {}", keys.shape(), ids.len(), labels.len(), self.dim),
            ));
        }
        for (i, (&id, &label)) in ids.iter().zip(labels).enumerate() {
            let mut history = match self.entries.iter().position(|e| e.id == id) {
                Some(pos) => self.entries.remove(pos).expect("present").history,
                None => Vec::new(),
            };
            history.retain(|&(e, _)| e != epoch);
            history.push((epoch, label));
            trim(&mut history, epoch, self.history_len);
            self.entries.push_back(QueueEntry {
                id,
                key: normalized(keys.row(i)),
                history,
            });
            while self.entries.len() > self.capacity {
                self.entries.pop_front();
            }
        }
        Ok(())
    }

    /// `[dim, len]` matrix of keys, for similarity products.
    pub fn keys_transposed(&self) -> Tensor {
        let n = self.entries.len();
        let mut data = vec![0.0; self.dim * n];
        for (j, e) in self.entries.iter().enumerate() {
            for (d, &v) in e.key.iter().enumerate() {
                data[d * n + j] = v;
            }
        }
        Tensor::new(vec![self.dim, n], data).expect("sized")
    }

    /// Queue positions whose history never shares a label with `query` at a
    /// common epoch.
    pub fn exclusion_set(&self, query: &[(u64, usize)]) -> Vec<usize> {
        exclusion_set(self.entries.iter().map(|e| e.history.as_slice()), query)
    }
}

/// Indices `j` such that `histories[j]` and `query` disagree at every epoch
/// present in both; an empty history is always included.
pub fn exclusion_set<'a, I>(histories: I, query: &[(u64, usize)]) -> Vec<usize>
where
    I: IntoIterator<Item = &'a [(u64, usize)]>,
{
    histories
        .into_iter()
        .enumerate()
        .filter(|(_, h)| {
            !h.iter()
                .any(|&(e, y)| query.iter().any(|&(qe, qy)| qe == e && qy == y))
        })
        .map(|(j, _)| j)
        .collect()
}
