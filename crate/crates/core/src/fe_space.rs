//! Trilinear (Q1) degrees of freedom on the active leaves, hanging-node
//! constraints, and transfer of nodal fields between meshes.

use std::collections::HashMap;

use crate::octree::{OctreeMesh, MAX_LEVEL, ROOT_LEN};
use crate::partition::Partition;
use crate::solver::RowLayout;
use crate::status::CellStatus;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum FeError {
    #[error("mesh is not 2:1 balanced")]
    Unbalanced,
    #[error("hanging node {0:?} is constrained by another hanging node")]
    ConstraintChain([u32; 3]),
    #[error("status array has length {got}, mesh has {expected} leaves")]
    StatusLength { expected: usize, got: usize },
    #[error("field has {got} values, the DOF map has {expected}")]
    FieldLength { expected: usize, got: usize },
    #[error("active region shrinks between the meshes")]
    ShrinkingDomain,
    #[error("meshes map different geometries")]
    UnrelatedMeshes,
}

/// Integer node position packed as 21 bits per coordinate.
pub fn node_key(p: [u32; 3]) -> u64 {
    p[0] as u64 | (p[1] as u64) << 21 | (p[2] as u64) << 42
}

pub fn node_coords(k: u64) -> [u32; 3] {
    let m = (1u64 << 21) - 1;
    [(k & m) as u32, ((k >> 21) & m) as u32, ((k >> 42) & m) as u32]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NodeRef {
    Dof(u32),
    /// Index into the constraint list.
    Hanging(u32),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Constraint {
    pub node: [u32; 3],
    /// `(master dof, coefficient)`; coefficients sum to one.
    pub masters: Vec<(u32, f64)>,
}

/// DOF numbering over the active leaves of one mesh.
#[derive(Clone, Debug, PartialEq)]
pub struct DofMap {
    active: Vec<usize>,
    cell_of_leaf: Vec<u32>,
    cells: Vec<[NodeRef; 8]>,
    dof_nodes: Vec<[u32; 3]>,
    constraints: Vec<Constraint>,
    nodes: HashMap<u64, NodeRef>,
    dofs_before_cell: Vec<u32>,
}

const NO_CELL: u32 = u32::MAX;

/// The 12 edges as corner pairs `(a, b)` with `b = a | bit`.
pub(crate) const EDGES: [(usize, usize); 12] = [
    (0, 1), (2, 3), (4, 5), (6, 7),
    (0, 2), (1, 3), (4, 6), (5, 7),
    (0, 4), (1, 5), (2, 6), (3, 7),
];

/// Corners of face `2 * axis + side`, in tensor order of the two free axes.
pub(crate) fn face_corners(face: usize) -> [usize; 4] {
    let axis = face / 2;
    let side = face % 2;
    let free: Vec<usize> = (0..3).filter(|&d| d != axis).collect();
    std::array::from_fn(|i| {
        let mut c = side << axis;
        c |= (i & 1) << free[0];
        c |= ((i >> 1) & 1) << free[1];
        c
    })
}

fn midpoint(a: [u32; 3], b: [u32; 3]) -> [u32; 3] {
    [(a[0] + b[0]) / 2, (a[1] + b[1]) / 2, (a[2] + b[2]) / 2]
}

pub fn build_dof_map(mesh: &OctreeMesh, status: &[CellStatus]) -> Result<DofMap, FeError> {
    if status.len() != mesh.len() {
        return Err(FeError::StatusLength {
            expected: mesh.len(),
            got: status.len(),
        });
    }
    let active: Vec<usize> = (0..mesh.len()).filter(|&i| status[i].is_active()).collect();
    if !active.is_empty() && !mesh.is_balanced() {
        return Err(FeError::Unbalanced);
    }
    let mut cell_of_leaf = vec![NO_CELL; mesh.len()];
    for (c, &i) in active.iter().enumerate() {
        cell_of_leaf[i] = c as u32;
    }
    let corners_of = |i: usize| {
        let k = mesh.leaves()[i];
        std::array::from_fn::<[u32; 3], 8, _>(|c| k.corner(c))
    };

    let mut corner_set: HashMap<u64, ()> = HashMap::with_capacity(active.len() * 2);
    for &i in &active {
        for p in corners_of(i) {
            corner_set.insert(node_key(p), ());
        }
    }

    // Hanging nodes: edge midpoints and face centres of an active cell that
    // are corners of finer active cells.
    let mut hanging: HashMap<u64, Vec<[u32; 3]>> = HashMap::new();
    let mut hanging_order: Vec<u64> = Vec::new();
    for &i in &active {
        if mesh.leaves()[i].level() == MAX_LEVEL {
            continue;
        }
        let c = corners_of(i);
        for (a, b) in EDGES {
            let m = node_key(midpoint(c[a], c[b]));
            if corner_set.contains_key(&m) && !hanging.contains_key(&m) {
                hanging.insert(m, vec![c[a], c[b]]);
                hanging_order.push(m);
            }
        }
        for f in 0..6 {
            let fc = face_corners(f);
            let m = node_key(midpoint(c[fc[0]], c[fc[3]]));
            if corner_set.contains_key(&m) && !hanging.contains_key(&m) {
                hanging.insert(m, fc.iter().map(|&k| c[k]).collect());
                hanging_order.push(m);
            }
        }
    }
    for (key, masters) in &hanging {
        if masters.iter().any(|m| hanging.contains_key(&node_key(*m))) {
            return Err(FeError::ConstraintChain(node_coords(*key)));
        }
    }

    // First-touch numbering along the Morton order of the active cells.
    let mut nodes: HashMap<u64, NodeRef> = HashMap::with_capacity(corner_set.len());
    let mut dof_nodes = Vec::new();
    let mut dofs_before_cell = Vec::with_capacity(active.len() + 1);
    let mut cells = Vec::with_capacity(active.len());
    let mut pending: Vec<(usize, u64)> = Vec::new();
    for (ci, &i) in active.iter().enumerate() {
        dofs_before_cell.push(dof_nodes.len() as u32);
        let c = corners_of(i);
        let mut refs = [NodeRef::Dof(0); 8];
        for (local, p) in c.iter().enumerate() {
            let key = node_key(*p);
            if hanging.contains_key(&key) {
                pending.push((ci * 8 + local, key));
                continue;
            }
            let r = *nodes.entry(key).or_insert_with(|| {
                dof_nodes.push(*p);
                NodeRef::Dof(dof_nodes.len() as u32 - 1)
            });
            refs[local] = r;
        }
        cells.push(refs);
    }
    dofs_before_cell.push(dof_nodes.len() as u32);

    let mut constraints = Vec::with_capacity(hanging.len());
    for key in hanging_order {
        let masters = &hanging[&key];
        let w = 1.0 / masters.len() as f64;
        let m = masters
            .iter()
            .map(|p| match nodes[&node_key(*p)] {
                NodeRef::Dof(d) => (d, w),
                NodeRef::Hanging(_) => unreachable!("chains rejected above"),
            })
            .collect();
        nodes.insert(key, NodeRef::Hanging(constraints.len() as u32));
        constraints.push(Constraint {
            node: node_coords(key),
            masters: m,
        });
    }
    for (slot, key) in pending {
        cells[slot / 8][slot % 8] = nodes[&key];
    }

    Ok(DofMap {
        active,
        cell_of_leaf,
        cells,
        dof_nodes,
        constraints,
        nodes,
        dofs_before_cell,
    })
}

/// Rows of the local-to-condensed map of one cell: local node `i`
/// contributes `coef[a][i]` to condensed DOF `dofs[a]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CellTransform {
    pub dofs: Vec<u32>,
    pub coef: Vec<[f64; 8]>,
    pub identity: bool,
}

impl DofMap {
    pub fn num_dofs(&self) -> usize {
        self.dof_nodes.len()
    }

    pub fn num_cells(&self) -> usize {
        self.active.len()
    }

    /// Leaf index of every active cell, Morton order.
    pub fn active_leaves(&self) -> &[usize] {
        &self.active
    }

    pub fn cell_of_leaf(&self, leaf: usize) -> Option<usize> {
        match self.cell_of_leaf.get(leaf) {
            Some(&c) if c != NO_CELL => Some(c as usize),
            _ => None,
        }
    }

    pub fn cell_nodes(&self, cell: usize) -> &[NodeRef; 8] {
        &self.cells[cell]
    }

    pub fn dof_node(&self, dof: usize) -> [u32; 3] {
        self.dof_nodes[dof]
    }

    pub fn dof_nodes(&self) -> &[[u32; 3]] {
        &self.dof_nodes
    }

    pub fn constraints(&self) -> &[Constraint] {
        &self.constraints
    }

    pub fn node(&self, p: [u32; 3]) -> Option<NodeRef> {
        self.nodes.get(&node_key(p)).copied()
    }

    /// DOFs numbered before active cell `cell` is visited.
    pub fn dofs_before_cell(&self, cell: usize) -> usize {
        self.dofs_before_cell[cell] as usize
    }

    /// DOF ownership induced by a leaf partition: each DOF belongs to the
    /// part owning the first active cell that touches it.
    pub fn layout(&self, partition: &Partition) -> RowLayout {
        let mut offsets = Vec::with_capacity(partition.num_parts() + 1);
        for p in 0..partition.num_parts() {
            let first_leaf = partition.range(p).start;
            let cell = self.active.partition_point(|&l| l < first_leaf);
            offsets.push(self.dofs_before_cell[cell] as usize);
        }
        offsets.push(self.num_dofs());
        offsets[0] = 0;
        RowLayout::new(offsets)
    }

    /// Nodal values of a cell with hanging nodes resolved.
    pub fn cell_values(&self, cell: usize, values: &[f64]) -> [f64; 8] {
        self.cells[cell].map(|r| self.node_value(r, values))
    }

    pub fn node_value(&self, r: NodeRef, values: &[f64]) -> f64 {
        match r {
            NodeRef::Dof(d) => values[d as usize],
            NodeRef::Hanging(h) => self.constraints[h as usize]
                .masters
                .iter()
                .map(|&(d, w)| w * values[d as usize])
                .sum(),
        }
    }

    pub fn cell_transform(&self, cell: usize) -> CellTransform {
        let refs = &self.cells[cell];
        let mut dofs: Vec<u32> = Vec::with_capacity(12);
        let mut coef: Vec<[f64; 8]> = Vec::with_capacity(12);
        let mut identity = true;
        let slot = |d: u32, dofs: &mut Vec<u32>, coef: &mut Vec<[f64; 8]>| -> usize {
            match dofs.iter().position(|&x| x == d) {
                Some(a) => a,
                None => {
                    dofs.push(d);
                    coef.push([0.0; 8]);
                    dofs.len() - 1
                }
            }
        };
        for (i, r) in refs.iter().enumerate() {
            match *r {
                NodeRef::Dof(d) => {
                    let a = slot(d, &mut dofs, &mut coef);
                    coef[a][i] += 1.0;
                }
                NodeRef::Hanging(h) => {
                    identity = false;
                    for &(d, w) in &self.constraints[h as usize].masters {
                        let a = slot(d, &mut dofs, &mut coef);
                        coef[a][i] += w;
                    }
                }
            }
        }
        CellTransform { dofs, coef, identity }
    }

    /// Value at a point given in quanta of the root cube, from the first
    /// active leaf (in a fixed probing order) whose closed box contains it.
    pub fn evaluate(&self, mesh: &OctreeMesh, values: &[f64], p: [f64; 3]) -> Option<f64> {
        let base = p.map(|v| v.floor() as i64);
        for probe in 0..8 {
            let mut q = [0u32; 3];
            let mut valid = true;
            for d in 0..3 {
                let mut v = base[d];
                if (probe >> d) & 1 == 1 {
                    // Step back when the point sits on a lattice plane.
                    if p[d] != v as f64 {
                        valid = false;
                    }
                    v -= 1;
                }
                if v < 0 || v >= ROOT_LEN as i64 {
                    valid = false;
                }
                q[d] = v.clamp(0, ROOT_LEN as i64 - 1) as u32;
            }
            if !valid {
                continue;
            }
            let leaf = mesh.locate(q);
            let Some(cell) = self.cell_of_leaf(leaf) else { continue };
            let k = mesh.leaves()[leaf];
            let s = k.size() as f64;
            let a = k.anchor();
            let xi: [f64; 3] = std::array::from_fn(|d| (p[d] - a[d] as f64) / s);
            if xi.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
                continue;
            }
            let v = self.cell_values(cell, values);
            return Some(trilinear(&v, xi));
        }
        None
    }
}

/// Q1 shape function of corner `c` at reference point `xi` in `[0,1]^3`.
#[inline]
pub fn shape(c: usize, xi: [f64; 3]) -> f64 {
    let f = |b: usize, x: f64| if b == 1 { x } else { 1.0 - x };
    f(c & 1, xi[0]) * f((c >> 1) & 1, xi[1]) * f((c >> 2) & 1, xi[2])
}

/// Reference gradient of the shape function of corner `c`.
#[inline]
pub fn shape_grad(c: usize, xi: [f64; 3]) -> [f64; 3] {
    let f = |b: usize, x: f64| if b == 1 { x } else { 1.0 - x };
    let df = |b: usize| if b == 1 { 1.0 } else { -1.0 };
    let (bx, by, bz) = (c & 1, (c >> 1) & 1, (c >> 2) & 1);
    [
        df(bx) * f(by, xi[1]) * f(bz, xi[2]),
        f(bx, xi[0]) * df(by) * f(bz, xi[2]),
        f(bx, xi[0]) * f(by, xi[1]) * df(bz),
    ]
}

pub fn trilinear(v: &[f64; 8], xi: [f64; 3]) -> f64 {
    (0..8).map(|c| v[c] * shape(c, xi)).sum()
}

/// Condensed local system `T K T^t`, `T f`.
pub fn apply_constraints(k: &[[f64; 8]; 8], f: &[f64; 8], t: &CellTransform) -> (Vec<Vec<f64>>, Vec<f64>) {
    if t.identity {
        return (k.iter().map(|r| r.to_vec()).collect(), f.to_vec());
    }
    let m = t.dofs.len();
    // tk = T K  (m x 8)
    let tk: Vec<[f64; 8]> = t
        .coef
        .iter()
        .map(|row| std::array::from_fn(|j| (0..8).map(|i| row[i] * k[i][j]).sum()))
        .collect();
    let kc = (0..m)
        .map(|a| {
            (0..m)
                .map(|b| (0..8).map(|j| tk[a][j] * t.coef[b][j]).sum())
                .collect()
        })
        .collect();
    let fc = t.coef.iter().map(|row| (0..8).map(|i| row[i] * f[i]).sum()).collect();
    (kc, fc)
}

/// Values on `new_map` from a field on `old_map`: nodes inside the old
/// active region take the old function's value there (exact interpolation
/// under refinement, injection under coarsening); other nodes take `init`.
pub fn transfer(
    old_mesh: &OctreeMesh,
    old_map: &DofMap,
    old_values: &[f64],
    new_map: &DofMap,
    init: f64,
) -> Result<Vec<f64>, FeError> {
    if old_values.len() != old_map.num_dofs() {
        return Err(FeError::FieldLength {
            expected: old_map.num_dofs(),
            got: old_values.len(),
        });
    }
    Ok(new_map
        .dof_nodes
        .iter()
        .map(|p| {
            old_map
                .evaluate(old_mesh, old_values, p.map(|v| v as f64))
                .unwrap_or(init)
        })
        .collect())
}

/// Transfer across a pure refine/coarsen step (same active region).
pub fn project_on_transform(
    old_mesh: &OctreeMesh,
    old_map: &DofMap,
    old_values: &[f64],
    new_mesh: &OctreeMesh,
    new_map: &DofMap,
) -> Result<Vec<f64>, FeError> {
    if old_mesh.geometry() != new_mesh.geometry() {
        return Err(FeError::UnrelatedMeshes);
    }
    transfer(old_mesh, old_map, old_values, new_map, f64::NAN).and_then(|v| {
        if v.iter().any(|x| x.is_nan()) && !old_values.iter().any(|x| x.is_nan()) {
            Err(FeError::UnrelatedMeshes)
        } else {
            Ok(v)
        }
    })
}

/// Transfer onto a grown active region; new DOFs start at `init`.
pub fn increment(
    old_mesh: &OctreeMesh,
    old_map: &DofMap,
    old_values: &[f64],
    new_mesh: &OctreeMesh,
    new_map: &DofMap,
    init: f64,
) -> Result<Vec<f64>, FeError> {
    if old_mesh.geometry() != new_mesh.geometry() {
        return Err(FeError::UnrelatedMeshes);
    }
    if !covers(old_mesh, old_map, new_mesh, new_map) {
        return Err(FeError::ShrinkingDomain);
    }
    transfer(old_mesh, old_map, old_values, new_map, init)
}

/// True when every old active leaf lies inside the new active region.
pub fn covers(old_mesh: &OctreeMesh, old_map: &DofMap, new_mesh: &OctreeMesh, new_map: &DofMap) -> bool {
    old_map.active.iter().all(|&i| {
        let key = old_mesh.leaves()[i];
        new_mesh
            .leaves_within(&key)
            .all(|j| new_map.cell_of_leaf(j).is_some())
    })
}
