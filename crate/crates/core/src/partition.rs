//! Weighted z-order partitioning, payload migration, ghost layers and
//! load-imbalance statistics.

use std::fmt::Write as _;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::octree::Adjacency;
use crate::status::CellStatus;
use crate::transport::{Transport, TransportError};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PartitionError {
    #[error("part count must be at least 1")]
    NoParts,
    #[error("active weight must be at least 1")]
    ZeroActiveWeight,
    #[error("part {part} out of range for {parts} parts")]
    PartOutOfRange { part: usize, parts: usize },
    #[error("payload of part {part} has {got} records, its range holds {expected}")]
    PayloadLength {
        part: usize,
        expected: usize,
        got: usize,
    },
    #[error("partitions cover different leaf counts ({0} vs {1})")]
    LeafCount(usize, usize),
    #[error("no samples")]
    EmptySamples,
    #[error(transparent)]
    Transport(#[from] TransportError),
}

pub type Result<T> = std::result::Result<T, PartitionError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightFunction {
    w_active: u64,
    w_inactive: u64,
}

impl WeightFunction {
    pub fn new(w_active: u64, w_inactive: u64) -> Result<Self> {
        if w_active == 0 {
            return Err(PartitionError::ZeroActiveWeight);
        }
        Ok(WeightFunction {
            w_active,
            w_inactive,
        })
    }

    pub fn w_active(&self) -> u64 {
        self.w_active
    }

    pub fn w_inactive(&self) -> u64 {
        self.w_inactive
    }

    pub fn weight(&self, s: CellStatus) -> u64 {
        if s.is_active() {
            self.w_active
        } else {
            self.w_inactive
        }
    }
}

impl Default for WeightFunction {
    fn default() -> Self {
        WeightFunction {
            w_active: 1,
            w_inactive: 1,
        }
    }
}

pub fn compute_weights(status: &[CellStatus], w: WeightFunction) -> Vec<u64> {
    status.iter().map(|&s| w.weight(s)).collect()
}

/// Contiguous ranges of the Morton-ordered leaves, one per part.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    boundaries: Vec<usize>,
}

impl Partition {
    /// Everything on part 0.
    pub fn single(leaves: usize) -> Self {
        Partition {
            boundaries: vec![0, leaves],
        }
    }

    /// `boundaries` must start at 0 and be non-decreasing.
    pub fn from_boundaries(boundaries: Vec<usize>) -> Result<Self> {
        if boundaries.len() < 2 {
            return Err(PartitionError::NoParts);
        }
        assert!(boundaries[0] == 0 && boundaries.windows(2).all(|w| w[0] <= w[1]));
        Ok(Partition { boundaries })
    }

    pub fn num_parts(&self) -> usize {
        self.boundaries.len() - 1
    }

    pub fn num_leaves(&self) -> usize {
        *self.boundaries.last().expect("non-empty")
    }

    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    pub fn range(&self, part: usize) -> Range<usize> {
        self.boundaries[part]..self.boundaries[part + 1]
    }

    /// Part owning leaf `leaf`; empty parts never own anything.
    pub fn owner(&self, leaf: usize) -> usize {
        self.boundaries.partition_point(|&b| b <= leaf) - 1
    }

    pub fn loads(&self, weights: &[u64]) -> Vec<u64> {
        (0..self.num_parts())
            .map(|p| weights[self.range(p)].iter().sum())
            .collect()
    }

    /// Split a global per-leaf array into per-part owned arrays.
    pub fn scatter<T: Clone>(&self, global: &[T]) -> Vec<Vec<T>> {
        (0..self.num_parts())
            .map(|p| global[self.range(p)].to_vec())
            .collect()
    }

    pub fn gather<T: Clone>(&self, owned: &[Vec<T>]) -> Vec<T> {
        owned.iter().flatten().cloned().collect()
    }
}

/// Boundary `k` is the first leaf index whose prefix weight reaches
/// `k * W / P`, compared exactly in integers.
pub fn partition_by_weight(weights: &[u64], parts: usize) -> Result<Partition> {
    if parts == 0 {
        return Err(PartitionError::NoParts);
    }
    let total: u128 = weights.iter().map(|&w| w as u128).sum();
    let p = parts as u128;
    let mut boundaries = Vec::with_capacity(parts + 1);
    boundaries.push(0);
    let mut prefix: u128 = 0;
    let mut i = 0;
    for k in 1..parts as u128 {
        while i < weights.len() && prefix * p < k * total {
            prefix += weights[i] as u128;
            i += 1;
        }
        boundaries.push(i);
    }
    boundaries.push(weights.len());
    Ok(Partition { boundaries })
}

/// Move per-part payloads from `old` to `new` ownership.
pub fn redistribute<T: Clone + Send>(
    old: &Partition,
    new: &Partition,
    payloads: Vec<Vec<T>>,
    transport: &Transport,
) -> Result<Vec<Vec<T>>> {
    if old.num_leaves() != new.num_leaves() {
        return Err(PartitionError::LeafCount(old.num_leaves(), new.num_leaves()));
    }
    if payloads.len() != old.num_parts() {
        return Err(PartitionError::PartOutOfRange {
            part: payloads.len(),
            parts: old.num_parts(),
        });
    }
    for (part, data) in payloads.iter().enumerate() {
        let expected = old.range(part).len();
        if data.len() != expected {
            return Err(PartitionError::PayloadLength {
                part,
                expected,
                got: data.len(),
            });
        }
    }
    if old == new {
        return Ok(payloads);
    }
    // Each part sends one contiguous chunk per overlapping new range.
    let mut outboxes: Vec<Vec<(usize, (usize, Vec<T>))>> = payloads
        .into_iter()
        .enumerate()
        .map(|(part, data)| {
            let r = old.range(part);
            let mut out = Vec::new();
            let mut lo = r.start;
            while lo < r.end {
                let to = new.owner(lo);
                let hi = new.range(to).end.min(r.end);
                out.push((to, (lo, data[lo - r.start..hi - r.start].to_vec())));
                lo = hi;
            }
            out
        })
        .collect();
    outboxes.resize_with(old.num_parts().max(new.num_parts()), Vec::new);
    let mut inboxes = transport.exchange(outboxes)?;
    inboxes.truncate(new.num_parts());
    Ok(inboxes
        .into_iter()
        .map(|mut inbox| {
            inbox.sort_by_key(|(_, (start, _))| *start);
            inbox.into_iter().flat_map(|(_, (_, chunk))| chunk).collect()
        })
        .collect())
}

/// Leaves owned by other parts that touch at least one leaf of `part`, as
/// `(leaf index, owner)` sorted by leaf index.
pub fn ghost_layer(
    adjacency: &Adjacency,
    partition: &Partition,
    part: usize,
) -> Result<Vec<(usize, usize)>> {
    if part >= partition.num_parts() {
        return Err(PartitionError::PartOutOfRange {
            part,
            parts: partition.num_parts(),
        });
    }
    let own = partition.range(part);
    let mut out: Vec<usize> = own
        .clone()
        .flat_map(|i| adjacency.neighbors(i).iter().copied())
        .filter(|j| !own.contains(j))
        .collect();
    out.sort_unstable();
    out.dedup();
    Ok(out
        .into_iter()
        .map(|j| (j, partition.owner(j)))
        .collect())
}

/// Quantities tracked for load balance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Quantity {
    Cells,
    WeightedCells,
    ActiveCells,
    Dofs,
}

impl Quantity {
    pub const ALL: [Quantity; 4] = [
        Quantity::Cells,
        Quantity::WeightedCells,
        Quantity::ActiveCells,
        Quantity::Dofs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Quantity::Cells => "cells",
            Quantity::WeightedCells => "weighted_cells",
            Quantity::ActiveCells => "active_cells",
            Quantity::Dofs => "dofs",
        }
    }
}

/// Population mean, standard deviation and coefficient of variation.
pub fn sample_stats(samples: &[f64]) -> Result<(f64, f64, f64)> {
    if samples.is_empty() {
        return Err(PartitionError::EmptySamples);
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let sigma = var.sqrt();
    let cv = if mean > 0.0 { sigma / mean } else { 0.0 };
    Ok((mean, sigma, cv))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: usize,
    pub quantity: Quantity,
    pub mean: f64,
    pub sigma: f64,
    pub cv: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceReport {
    pub rows: Vec<StepStats>,
    /// Time average of the per-step coefficient of variation.
    pub mean_cv: Vec<(Quantity, f64)>,
}

/// One record of per-part samples: `(step, quantity, value per part)`.
pub type PartSample = (usize, Quantity, Vec<f64>);

pub fn imbalance_stats(samples: &[PartSample]) -> Result<ImbalanceReport> {
    if samples.is_empty() {
        return Err(PartitionError::EmptySamples);
    }
    let mut rows = Vec::with_capacity(samples.len());
    for (step, quantity, values) in samples {
        let (mean, sigma, cv) = sample_stats(values)?;
        rows.push(StepStats {
            step: *step,
            quantity: *quantity,
            mean,
            sigma,
            cv,
        });
    }
    let mean_cv = Quantity::ALL
        .iter()
        .filter_map(|&q| {
            let cvs: Vec<f64> = rows.iter().filter(|r| r.quantity == q).map(|r| r.cv).collect();
            (!cvs.is_empty()).then(|| (q, cvs.iter().sum::<f64>() / cvs.len() as f64))
        })
        .collect();
    Ok(ImbalanceReport { rows, mean_cv })
}

impl ImbalanceReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,quantity,mean,sigma,cv\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.step,
                r.quantity.name(),
                r.mean,
                r.sigma,
                r.cv
            );
        }
        out
    }

    pub fn mean_cv(&self, q: Quantity) -> Option<f64> {
        self.mean_cv.iter().find(|(k, _)| *k == q).map(|&(_, v)| v)
    }
}
