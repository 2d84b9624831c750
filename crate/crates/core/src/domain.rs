//! The growing computational domain split across parts: a replicated leaf
//! sequence, per-part owned statuses, and one ghost layer per part.

use crate::octree::{origin_index, Adjacency, LeafOrigin, OctreeMesh};
use crate::partition::{
    compute_weights, ghost_layer, partition_by_weight, redistribute, Partition, PartitionError,
    WeightFunction,
};
use crate::status::{exchange_ghost_status, CellStatus, GhostStatus, StatusError};
use crate::transport::Transport;

#[derive(Debug, thiserror::Error)]
pub enum DomainError {
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    Status(#[from] StatusError),
    #[error("status array has length {got}, mesh has {expected} leaves")]
    LengthMismatch { expected: usize, got: usize },
}

#[derive(Clone, Debug)]
pub struct DistributedMesh {
    mesh: OctreeMesh,
    partition: Partition,
    adjacency: Adjacency,
    owned: Vec<Vec<CellStatus>>,
    ghosts: Vec<Vec<(usize, usize)>>,
    ghost_status: GhostStatus,
}

impl DistributedMesh {
    /// Partition `mesh` by weight and distribute `status`.
    pub fn new(
        mesh: OctreeMesh,
        status: Vec<CellStatus>,
        parts: usize,
        weights: WeightFunction,
        transport: &Transport,
    ) -> Result<Self, DomainError> {
        if status.len() != mesh.len() {
            return Err(DomainError::LengthMismatch {
                expected: mesh.len(),
                got: status.len(),
            });
        }
        if parts == 0 {
            return Err(PartitionError::NoParts.into());
        }
        // Start with everything on part 0 and let rebalance scatter it.
        let mut owned = vec![status];
        owned.resize_with(parts, Vec::new);
        let start = Partition::from_boundaries(
            std::iter::once(0)
                .chain(std::iter::repeat(mesh.len()).take(parts))
                .collect(),
        )?;
        let mut dm = DistributedMesh {
            adjacency: Adjacency::default(),
            mesh,
            partition: start,
            owned,
            ghosts: Vec::new(),
            ghost_status: Vec::new(),
        };
        dm.rebalance(weights, transport)?;
        Ok(dm)
    }

    pub fn mesh(&self) -> &OctreeMesh {
        &self.mesh
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn adjacency(&self) -> &Adjacency {
        &self.adjacency
    }

    pub fn num_parts(&self) -> usize {
        self.partition.num_parts()
    }

    pub fn owned(&self, part: usize) -> &[CellStatus] {
        &self.owned[part]
    }

    pub fn owned_mut(&mut self, part: usize) -> &mut [CellStatus] {
        &mut self.owned[part]
    }

    pub fn ghosts(&self, part: usize) -> &[(usize, usize)] {
        &self.ghosts[part]
    }

    pub fn ghost_status(&self, part: usize) -> &[(usize, CellStatus)] {
        &self.ghost_status[part]
    }

    /// Status of `leaf` as seen by `part`: owned leaves and ghosts only.
    pub fn status_of(&self, part: usize, leaf: usize) -> Option<CellStatus> {
        let r = self.partition.range(part);
        if r.contains(&leaf) {
            return Some(self.owned[part][leaf - r.start]);
        }
        let g = &self.ghost_status[part];
        g.binary_search_by_key(&leaf, |&(l, _)| l).ok().map(|i| g[i].1)
    }

    /// Concatenation of the owned statuses in leaf order.
    pub fn gather_status(&self) -> Vec<CellStatus> {
        self.partition.gather(&self.owned)
    }

    /// Recompute the weighted partition, migrate statuses to their new
    /// owners and refresh the ghost layer (two exchanges).
    pub fn rebalance(&mut self, weights: WeightFunction, transport: &Transport) -> Result<(), DomainError> {
        let parts = self.partition.num_parts();
        let local: Vec<Vec<u64>> = transport.superstep(parts, |p| compute_weights(&self.owned[p], weights));
        let all: Vec<u64> = local.into_iter().flatten().collect();
        let new = partition_by_weight(&all, parts)?;
        let owned = std::mem::take(&mut self.owned);
        self.owned = redistribute(&self.partition, &new, owned, transport)?;
        self.partition = new;
        self.refresh_ghosts(transport)
    }

    /// Rebuild adjacency and ghost lists, then exchange ghost statuses.
    pub fn refresh_ghosts(&mut self, transport: &Transport) -> Result<(), DomainError> {
        if self.adjacency.len() != self.mesh.len() {
            self.adjacency = self.mesh.adjacency();
        }
        let parts = self.partition.num_parts();
        self.ghosts = transport
            .superstep(parts, |p| ghost_layer(&self.adjacency, &self.partition, p))
            .into_iter()
            .collect::<Result<_, _>>()?;
        self.exchange_ghosts(transport)
    }

    /// One ghost status exchange round with unchanged ghost lists.
    pub fn exchange_ghosts(&mut self, transport: &Transport) -> Result<(), DomainError> {
        self.ghost_status = exchange_ghost_status(&self.partition, &self.owned, &self.ghosts, transport)?;
        Ok(())
    }

    /// Replace the mesh by a transformation of it. Each part derives the
    /// statuses of the leaves it inherits from its own leaves; ownership
    /// follows the origin map until the next [`DistributedMesh::rebalance`].
    pub fn apply_transform(&mut self, new_mesh: OctreeMesh, origin: &[LeafOrigin]) {
        let parts = self.partition.num_parts();
        let mut boundaries = Vec::with_capacity(parts + 1);
        boundaries.push(0);
        for p in 1..parts {
            let b = self.partition.boundaries()[p];
            boundaries.push(origin.partition_point(|&o| origin_index(o) < b));
        }
        boundaries.push(origin.len());
        let transitional = Partition::from_boundaries(boundaries).expect("monotone origins");
        let old = &self.partition;
        let owned = &self.owned;
        self.owned = (0..parts)
            .map(|p| {
                let start = old.range(p).start;
                origin[transitional.range(p)]
                    .iter()
                    .map(|&o| owned[p][origin_index(o) - start])
                    .collect()
            })
            .collect();
        self.partition = transitional;
        self.mesh = new_mesh;
        self.adjacency = Adjacency::default();
        self.ghosts = vec![Vec::new(); parts];
        self.ghost_status = vec![Vec::new(); parts];
    }

    /// Replace per-part statuses wholesale (same partition).
    pub fn set_owned(&mut self, owned: Vec<Vec<CellStatus>>) {
        debug_assert!(owned
            .iter()
            .enumerate()
            .all(|(p, o)| o.len() == self.partition.range(p).len()));
        self.owned = owned;
    }
}
