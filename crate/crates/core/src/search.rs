//! Iterative mesh transformation toward a heat-affected volume: refine
//! every leaf the volume touches up to the maximum level, coarsen the rest,
//! and activate the touched leaves.

use std::time::Instant;

use crate::collision::{bounds_overlap, cell_obb, intersects, CollisionError, Cuboid, HeatAffectedVolume};
use crate::domain::{DistributedMesh, DomainError};
use crate::geometry::Point3;
use crate::octree::{compose_origins, LeafOrigin, OctreeError, OctreeMesh, RefinementFlag};
use crate::partition::WeightFunction;
use crate::status::{coarsen_admissible, CellStatus};
use crate::transport::Transport;

/// The search volume is shrunk by this relative amount so that a volume
/// flush with a cell face does not pick up the cell on the other side.
pub const FLUSH_TOLERANCE: f64 = 1e-9;

#[derive(Debug, thiserror::Error)]
pub enum SearchError {
    #[error("level bounds violated: need max {max} >= search min {search_min} >= mesh min {min}")]
    LevelBounds { max: u8, search_min: u8, min: u8 },
    #[error("transformation did not settle within {0} iterations")]
    NoConvergence(usize),
    #[error(transparent)]
    Octree(#[from] OctreeError),
    #[error(transparent)]
    Collision(#[from] CollisionError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("hook failed: {0}")]
    Hook(String),
}

/// Mesh states before and after one remeshing step, in global leaf order.
pub struct RemeshStep<'a> {
    pub old_mesh: &'a OctreeMesh,
    pub old_status: &'a [CellStatus],
    pub new_mesh: &'a OctreeMesh,
    pub new_status: &'a [CellStatus],
    pub origin: &'a [LeafOrigin],
}

/// Callbacks run after each refine/coarsen/balance step, before the
/// repartition.
pub trait TransformHooks {
    fn after_remesh(&mut self, _step: &RemeshStep<'_>) -> Result<(), SearchError> {
        Ok(())
    }
}

pub struct NoHooks;

impl TransformHooks for NoHooks {}

#[derive(Clone, Copy, Debug)]
pub struct SearchParams {
    pub max_level: u8,
    /// Minimum level of leaves inside the volume's vertical slab.
    pub search_min_level: u8,
    pub weights: WeightFunction,
}

#[derive(Clone, Debug, Default)]
pub struct TransformOutcome {
    /// Leaves touched by the volume (all at the maximum level).
    pub activated: Vec<usize>,
    /// The subset of `activated` that was inactive before.
    pub newly_activated: Vec<usize>,
    pub iterations: usize,
    pub remesh_steps: usize,
    pub search_seconds: f64,
    pub remesh_seconds: f64,
}

struct PartFlags {
    flags: Vec<RefinementFlag>,
    hits: Vec<bool>,
    refine: bool,
}

fn leaf_bounds(mesh: &OctreeMesh, i: usize) -> Result<(Cuboid, (Point3, Point3)), CollisionError> {
    let obb = cell_obb(mesh, i)?;
    let b = obb.bounds();
    Ok((obb, b))
}

/// Bounding box of the leaves `range` for axis-aligned maps.
fn part_bounds(mesh: &OctreeMesh, range: std::ops::Range<usize>) -> Option<(Point3, Point3)> {
    if range.is_empty() || !mesh.geometry().is_axis_aligned() {
        return None;
    }
    let mut lo = [u32::MAX; 3];
    let mut hi = [0u32; 3];
    for k in &mesh.leaves()[range] {
        let a = k.anchor();
        let c = k.corner(7);
        for i in 0..3 {
            lo[i] = lo[i].min(a[i]);
            hi[i] = hi[i].max(c[i]);
        }
    }
    Some((mesh.point(lo), mesh.point(hi)))
}

struct Classifier<'a> {
    mesh: &'a OctreeMesh,
    probe: &'a Cuboid,
    probe_bounds: &'a (Point3, Point3),
    params: &'a SearchParams,
}

impl Classifier<'_> {
    /// `(hit, minimum level)` of leaf `i`.
    fn classify(&self, i: usize, skip: bool) -> Result<(bool, u8), CollisionError> {
        let (obb, b) = leaf_bounds(self.mesh, i)?;
        let hit = !skip && bounds_overlap(&b, self.probe_bounds) && intersects(self.probe, &obb);
        let in_slab = b.0[2] <= self.probe_bounds.1[2] && self.probe_bounds.0[2] <= b.1[2];
        let min = if in_slab {
            self.params.search_min_level
        } else {
            self.mesh.min_level()
        };
        Ok((hit, min))
    }
}

fn flag_part(
    dm: &DistributedMesh,
    part: usize,
    probe: &Cuboid,
    probe_bounds: &(Point3, Point3),
    params: &SearchParams,
) -> Result<PartFlags, CollisionError> {
    let mesh = dm.mesh();
    let range = dm.partition().range(part);
    let n = range.len();
    let cls = Classifier {
        mesh,
        probe,
        probe_bounds,
        params,
    };
    let mut out = PartFlags {
        flags: vec![RefinementFlag::Keep; n],
        hits: vec![false; n],
        refine: false,
    };
    let skip = part_bounds(mesh, range.clone()).is_some_and(|b| !bounds_overlap(&b, probe_bounds));
    let mut candidate = vec![false; n];
    for (local, i) in range.clone().enumerate() {
        let level = mesh.leaves()[i].level();
        let (hit, min) = cls.classify(i, skip)?;
        out.hits[local] = hit;
        if (hit && level < params.max_level) || level < min {
            out.refine = true;
            out.flags[local] = RefinementFlag::Refine;
        }
        candidate[local] = !hit && level > min;
    }
    // Merge only complete octets whose members are all candidates and share
    // one status; siblings owned elsewhere are classified here as well.
    for (local, i) in range.clone().enumerate() {
        if !candidate[local] {
            continue;
        }
        let start = i - mesh.leaves()[i].child_index();
        if !mesh.is_octet_start(start) {
            continue;
        }
        let mut ok = true;
        for j in start..start + 8 {
            let c = if range.contains(&j) {
                candidate[j - range.start]
            } else {
                let (hit, min) = cls.classify(j, false)?;
                !hit && mesh.leaves()[j].level() > min
            };
            if !c {
                ok = false;
                break;
            }
        }
        ok = ok && {
            let statuses: Option<Vec<CellStatus>> = (start..start + 8).map(|j| dm.status_of(part, j)).collect();
            statuses.is_some_and(|s| coarsen_admissible(&s).unwrap_or(false))
        };
        if ok {
            out.flags[local] = RefinementFlag::Coarsen;
        }
    }
    Ok(out)
}

/// Transform the domain until every leaf touched by `hav` sits at
/// `params.max_level`, then activate those leaves.
pub fn transform_to_hav(
    dm: &mut DistributedMesh,
    hav: &HeatAffectedVolume,
    params: &SearchParams,
    hooks: &mut dyn TransformHooks,
    transport: &Transport,
) -> Result<TransformOutcome, SearchError> {
    let min = dm.mesh().min_level();
    if !(params.max_level >= params.search_min_level
        && params.search_min_level >= min
        && params.max_level <= dm.mesh().max_level())
    {
        return Err(SearchError::LevelBounds {
            max: params.max_level,
            search_min: params.search_min_level,
            min,
        });
    }
    let probe = hav.cuboid().scaled(1.0 - FLUSH_TOLERANCE);
    let probe_bounds = probe.bounds();
    let bound = (params.max_level - min) as usize + 1;
    let parts = dm.num_parts();
    let mut outcome = TransformOutcome::default();

    loop {
        outcome.iterations += 1;
        if outcome.iterations > bound {
            return Err(SearchError::NoConvergence(bound));
        }
        let t0 = Instant::now();
        let per_part = transport
            .superstep(parts, |p| flag_part(dm, p, &probe, &probe_bounds, params))
            .into_iter()
            .collect::<Result<Vec<_>, _>>()?;
        let refine = per_part.iter().any(|f| f.refine);
        let mut newly = Vec::new();
        if !refine {
            // Every touched leaf is at the maximum level: activate them
            // where they are owned.
            let mut owned: Vec<Vec<CellStatus>> = (0..parts).map(|p| dm.owned(p).to_vec()).collect();
            for (p, f) in per_part.iter().enumerate() {
                let start = dm.partition().range(p).start;
                for (local, &hit) in f.hits.iter().enumerate() {
                    if hit {
                        outcome.activated.push(start + local);
                        if !owned[p][local].is_active() {
                            newly.push(start + local);
                        }
                        owned[p][local] = CellStatus::Active;
                    }
                }
            }
            dm.set_owned(owned);
        }
        outcome.search_seconds += t0.elapsed().as_secs_f64();

        let t1 = Instant::now();
        let flags: Vec<RefinementFlag> = per_part.into_iter().flat_map(|f| f.flags).collect();
        let changed = flags.iter().any(|&f| f != RefinementFlag::Keep);
        if changed {
            let old_mesh = dm.mesh().clone();
            let old_status = dm.gather_status();
            let (mid, first, _) = old_mesh.refine_and_coarsen(&flags)?;
            let (new_mesh, second) = mid.enforce_2to1_balance();
            let origin = compose_origins(old_mesh.leaves(), &first, &second, new_mesh.leaves());
            dm.apply_transform(new_mesh, &origin);
            let new_status = dm.gather_status();
            hooks.after_remesh(&RemeshStep {
                old_mesh: &old_mesh,
                old_status: &old_status,
                new_mesh: dm.mesh(),
                new_status: &new_status,
                origin: &origin,
            })?;
            if !refine {
                let remap = |list: &mut Vec<usize>| {
                    let mut it = list.iter().peekable();
                    let mut out = Vec::with_capacity(list.len());
                    for (i, o) in origin.iter().enumerate() {
                        if let LeafOrigin::Kept(j) = *o {
                            while it.peek().is_some_and(|&&x| x < j) {
                                it.next();
                            }
                            if it.peek() == Some(&&j) {
                                out.push(i);
                            }
                        }
                    }
                    *list = out;
                };
                remap(&mut outcome.activated);
                remap(&mut newly);
            }
            outcome.remesh_steps += 1;
        }
        dm.rebalance(params.weights, transport)?;
        outcome.remesh_seconds += t1.elapsed().as_secs_f64();
        if !refine {
            outcome.newly_activated = newly;
            return Ok(outcome);
        }
    }
}
