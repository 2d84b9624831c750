//! Per-leaf activity status for the element-birth method.

use serde::{Deserialize, Serialize};

use crate::octree::{LeafOrigin, OctantKey, OctreeMesh};
use crate::partition::Partition;
use crate::transport::{Transport, TransportError};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum StatusError {
    #[error("leaf index {index} out of range for {len} leaves")]
    UnknownLeaf { index: usize, len: usize },
    #[error("octant {0:?} is not a leaf of the mesh")]
    UnknownKey(OctantKey),
    #[error("expected 8 sibling statuses, got {0}")]
    Arity(usize),
    #[error("status array has length {got}, expected {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Transport(#[from] TransportError),
}

/// Classification of an inactive cell, used only for boundary losses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum InactiveTag {
    Powder,
    #[default]
    Gas,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CellStatus {
    Active,
    Inactive(InactiveTag),
}

impl Default for CellStatus {
    fn default() -> Self {
        CellStatus::Inactive(InactiveTag::Gas)
    }
}

impl CellStatus {
    #[inline]
    pub fn is_active(self) -> bool {
        matches!(self, CellStatus::Active)
    }

    /// Value stored in the VTK "status" channel.
    pub fn vtk_code(self) -> u8 {
        self.is_active() as u8
    }
}

/// Mark the listed leaves active. Never deactivates.
pub fn activate_cells(status: &mut [CellStatus], activated: &[usize]) -> Result<(), StatusError> {
    let len = status.len();
    if let Some(&index) = activated.iter().find(|&&i| i >= len) {
        return Err(StatusError::UnknownLeaf { index, len });
    }
    for &i in activated {
        status[i] = CellStatus::Active;
    }
    Ok(())
}

/// Keyed variant of [`activate_cells`].
pub fn activate_keys(
    mesh: &OctreeMesh,
    status: &mut [CellStatus],
    keys: &[OctantKey],
) -> Result<(), StatusError> {
    let idx = keys
        .iter()
        .map(|k| mesh.find(k).ok_or(StatusError::UnknownKey(*k)))
        .collect::<Result<Vec<_>, _>>()?;
    activate_cells(status, &idx)
}

pub fn inherit_on_refine(parent: CellStatus) -> [CellStatus; 8] {
    [parent; 8]
}

/// Siblings may merge only when their statuses, tags included, coincide.
pub fn coarsen_admissible(siblings: &[CellStatus]) -> Result<bool, StatusError> {
    if siblings.len() != 8 {
        return Err(StatusError::Arity(siblings.len()));
    }
    Ok(siblings.iter().all(|&s| s == siblings[0]))
}

/// Status of every leaf of a transformed mesh. Coarsened octets must have
/// been admissible; they take the common status.
pub fn transfer_status(origin: &[LeafOrigin], old: &[CellStatus]) -> Vec<CellStatus> {
    crate::octree::inherit(origin, old, |octet| {
        debug_assert!(coarsen_admissible(octet).unwrap_or(false));
        octet[0]
    })
}

/// Indices of the active leaves, in Morton order.
pub fn active_submesh(status: &[CellStatus]) -> Vec<usize> {
    status
        .iter()
        .enumerate()
        .filter_map(|(i, s)| s.is_active().then_some(i))
        .collect()
}

/// Per-part ghost statuses `(leaf index, status)`, sorted by leaf index.
pub type GhostStatus = Vec<Vec<(usize, CellStatus)>>;

/// One exchange round: owners push the current status of every leaf that
/// is a ghost of another part. `owned[p]` holds the statuses of the leaves
/// in `partition.range(p)`; `ghosts[p]` lists the ghost leaf indices of `p`.
pub fn exchange_ghost_status(
    partition: &Partition,
    owned: &[Vec<CellStatus>],
    ghosts: &[Vec<(usize, usize)>],
    transport: &Transport,
) -> Result<GhostStatus, StatusError> {
    let parts = partition.num_parts();
    for p in 0..parts {
        let expected = partition.range(p).len();
        if owned[p].len() != expected {
            return Err(StatusError::LengthMismatch {
                expected,
                got: owned[p].len(),
            });
        }
    }
    // Owners learn who needs what from the ghost lists; adjacency is
    // symmetric, so this is the same set the owners would compute locally.
    let mut requests: Vec<Vec<(usize, usize)>> = vec![Vec::new(); parts];
    for (p, list) in ghosts.iter().enumerate() {
        for &(leaf, owner) in list {
            requests[owner].push((p, leaf));
        }
    }
    let outboxes: Vec<Vec<(usize, (usize, CellStatus))>> = requests
        .iter()
        .enumerate()
        .map(|(owner, reqs)| {
            let start = partition.range(owner).start;
            reqs.iter()
                .map(|&(to, leaf)| (to, (leaf, owned[owner][leaf - start])))
                .collect()
        })
        .collect();
    let inboxes = transport.exchange(outboxes)?;
    Ok(inboxes
        .into_iter()
        .map(|inbox| {
            let mut v: Vec<(usize, CellStatus)> = inbox.into_iter().map(|(_, m)| m).collect();
            v.sort_unstable_by_key(|&(leaf, _)| leaf);
            v
        })
        .collect())
}
