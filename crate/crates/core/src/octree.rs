//! Linear single-root octree: leaves are kept sorted along the z-order
//! (Morton) curve and addressed by integer anchors in units of the finest
//! level quantum.

use std::fmt::Write as _;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::geometry::{GeometryMap, Point3};

/// Deepest admissible refinement level. Three interleaved 19-bit coordinates
/// fill 57 bits of a `u64`.
pub const MAX_LEVEL: u8 = 19;

/// Side of the root octant in finest-level quanta.
pub const ROOT_LEN: u32 = 1 << MAX_LEVEL;

const ROOT_VOLUME: u64 = 1 << (3 * MAX_LEVEL as u32);

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum OctreeError {
    #[error("invalid octant key (level {level}, anchor {anchor:?}): {reason}")]
    InvalidKey {
        level: u8,
        anchor: [u32; 3],
        reason: &'static str,
    },
    #[error("octant {0:?} is not a leaf of the mesh")]
    LeafNotFound(OctantKey),
    #[error("per-leaf array has length {got}, mesh has {expected} leaves")]
    LengthMismatch { expected: usize, got: usize },
    #[error("invalid level bounds: min {min}, max {max}")]
    LevelBounds { min: u8, max: u8 },
    #[error("leaves do not tile the root octant: {0}")]
    NotATiling(&'static str),
}

pub type Result<T> = std::result::Result<T, OctreeError>;

/// Morton index of an octant: one 3-bit child digit per level, coarsest
/// level most significant. Digit convention `c = x + 2y + 4z`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MortonIndex(pub u64);

/// An octant of the root cube.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OctantKey {
    level: u8,
    anchor: [u32; 3],
}

impl PartialOrd for OctantKey {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OctantKey {
    /// Depth-first (pre-order) traversal order: ancestors sort before
    /// their descendants.
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.sfc_code(), self.level).cmp(&(other.sfc_code(), other.level))
    }
}

/// Interleave a 21-bit integer with two zero bits between consecutive bits.
fn spread(v: u32) -> u64 {
    let mut w = v as u64 & 0x1f_ffff;
    w = (w | w << 32) & 0x001f_0000_0000_ffff;
    w = (w | w << 16) & 0x001f_0000_ff00_00ff;
    w = (w | w << 8) & 0x100f_00f0_0f00_f00f;
    w = (w | w << 4) & 0x10c3_0c30_c30c_30c3;
    w = (w | w << 2) & 0x1249_2492_4924_9249;
    w
}

fn compact(code: u64) -> u32 {
    let mut w = code & 0x1249_2492_4924_9249;
    w = (w ^ (w >> 2)) & 0x10c3_0c30_c30c_30c3;
    w = (w ^ (w >> 4)) & 0x100f_00f0_0f00_f00f;
    w = (w ^ (w >> 8)) & 0x001f_0000_ff00_00ff;
    w = (w ^ (w >> 16)) & 0x001f_0000_0000_ffff;
    w = (w ^ (w >> 32)) & 0x1f_ffff;
    w as u32
}

fn interleave(p: [u32; 3]) -> u64 {
    spread(p[0]) | spread(p[1]) << 1 | spread(p[2]) << 2
}

fn deinterleave(code: u64) -> [u32; 3] {
    [compact(code), compact(code >> 1), compact(code >> 2)]
}

/// Validating constructor for the Morton index of `(level, anchor)`.
pub fn morton_encode(level: u8, anchor: [u32; 3]) -> Result<MortonIndex> {
    OctantKey::new(level, anchor).map(|k| k.morton())
}

/// Inverse of [`morton_encode`].
pub fn morton_decode(level: u8, index: MortonIndex) -> Result<OctantKey> {
    if level > MAX_LEVEL {
        return Err(OctreeError::InvalidKey {
            level,
            anchor: [0; 3],
            reason: "level exceeds MAX_LEVEL",
        });
    }
    if level < 64 / 3 && index.0 >> (3 * level as u32) != 0 {
        return Err(OctreeError::InvalidKey {
            level,
            anchor: [0; 3],
            reason: "index has more digits than the level",
        });
    }
    let shift = 3 * (MAX_LEVEL - level) as u32;
    Ok(OctantKey {
        level,
        anchor: deinterleave(index.0 << shift),
    })
}

pub(crate) const DIRECTIONS: [[i64; 3]; 26] = {
    let mut out = [[0i64; 3]; 26];
    let mut n = 0;
    let mut dz = -1;
    while dz <= 1 {
        let mut dy = -1;
        while dy <= 1 {
            let mut dx = -1;
            while dx <= 1 {
                if dx != 0 || dy != 0 || dz != 0 {
                    out[n] = [dx, dy, dz];
                    n += 1;
                }
                dx += 1;
            }
            dy += 1;
        }
        dz += 1;
    }
    out
};

impl OctantKey {
    pub fn new(level: u8, anchor: [u32; 3]) -> Result<Self> {
        if level > MAX_LEVEL {
            return Err(OctreeError::InvalidKey {
                level,
                anchor,
                reason: "level exceeds MAX_LEVEL",
            });
        }
        let size = 1u32 << (MAX_LEVEL - level);
        for &a in &anchor {
            if a >= ROOT_LEN {
                return Err(OctreeError::InvalidKey {
                    level,
                    anchor,
                    reason: "anchor outside the root octant",
                });
            }
            if a % size != 0 {
                return Err(OctreeError::InvalidKey {
                    level,
                    anchor,
                    reason: "anchor not aligned to the octant size",
                });
            }
        }
        Ok(OctantKey { level, anchor })
    }

    pub const fn root() -> Self {
        OctantKey {
            level: 0,
            anchor: [0; 3],
        }
    }

    /// Octant at `level` given coordinates counted in cells of that level.
    pub fn from_level_coords(level: u8, coords: [u32; 3]) -> Result<Self> {
        let shift = (MAX_LEVEL.saturating_sub(level)) as u32;
        let anchor = coords.map(|c| c.checked_shl(shift).unwrap_or(u32::MAX));
        if coords.iter().any(|&c| (c as u64) << shift >= ROOT_LEN as u64) {
            return Err(OctreeError::InvalidKey {
                level,
                anchor,
                reason: "coordinates outside the root octant",
            });
        }
        Self::new(level, anchor)
    }

    #[inline]
    pub fn level(&self) -> u8 {
        self.level
    }

    #[inline]
    pub fn anchor(&self) -> [u32; 3] {
        self.anchor
    }

    /// Edge length in finest-level quanta.
    #[inline]
    pub fn size(&self) -> u32 {
        1 << (MAX_LEVEL - self.level)
    }

    #[inline]
    pub fn volume(&self) -> u64 {
        1u64 << (3 * (MAX_LEVEL - self.level) as u32)
    }

    /// Morton code of the anchor at full depth; leaves of a linear octree
    /// occupy the contiguous code range `[sfc_code, sfc_code + volume)`.
    #[inline]
    pub fn sfc_code(&self) -> u64 {
        interleave(self.anchor)
    }

    pub fn morton(&self) -> MortonIndex {
        MortonIndex(self.sfc_code() >> (3 * (MAX_LEVEL - self.level) as u32))
    }

    pub fn child(&self, c: usize) -> OctantKey {
        debug_assert!(self.level < MAX_LEVEL && c < 8);
        let h = self.size() >> 1;
        OctantKey {
            level: self.level + 1,
            anchor: [
                self.anchor[0] + (c as u32 & 1) * h,
                self.anchor[1] + ((c as u32 >> 1) & 1) * h,
                self.anchor[2] + ((c as u32 >> 2) & 1) * h,
            ],
        }
    }

    pub fn children(&self) -> [OctantKey; 8] {
        std::array::from_fn(|c| self.child(c))
    }

    pub fn parent(&self) -> Option<OctantKey> {
        if self.level == 0 {
            return None;
        }
        let psize = self.size() << 1;
        Some(OctantKey {
            level: self.level - 1,
            anchor: self.anchor.map(|a| a - a % psize),
        })
    }

    /// Position among the siblings, `x + 2y + 4z`.
    pub fn child_index(&self) -> usize {
        if self.level == 0 {
            return 0;
        }
        let s = self.size();
        let b = |a: u32| ((a / s) & 1) as usize;
        b(self.anchor[0]) | b(self.anchor[1]) << 1 | b(self.anchor[2]) << 2
    }

    /// Corner `c` (`x + 2y + 4z`) in quanta; may equal `ROOT_LEN`.
    pub fn corner(&self, c: usize) -> [u32; 3] {
        let s = self.size();
        [
            self.anchor[0] + (c as u32 & 1) * s,
            self.anchor[1] + ((c as u32 >> 1) & 1) * s,
            self.anchor[2] + ((c as u32 >> 2) & 1) * s,
        ]
    }

    pub fn contains_point(&self, p: [u32; 3]) -> bool {
        let s = self.size();
        (0..3).all(|i| p[i] >= self.anchor[i] && p[i] - self.anchor[i] < s)
    }

    pub fn contains(&self, other: &OctantKey) -> bool {
        other.level >= self.level && self.contains_point(other.anchor)
    }

    /// Closed boxes share at least one point (vertex, edge, face or volume).
    pub fn touches(&self, other: &OctantKey) -> bool {
        let (s, t) = (self.size(), other.size());
        (0..3).all(|i| {
            self.anchor[i] <= other.anchor[i] + t && other.anchor[i] <= self.anchor[i] + s
        })
    }

    /// Same-level octant displaced by `d` octant widths, if inside the root.
    pub fn neighbor(&self, d: [i64; 3]) -> Option<OctantKey> {
        let s = self.size() as i64;
        let mut anchor = [0u32; 3];
        for i in 0..3 {
            let a = self.anchor[i] as i64 + d[i] * s;
            if a < 0 || a >= ROOT_LEN as i64 {
                return None;
            }
            anchor[i] = a as u32;
        }
        Some(OctantKey {
            level: self.level,
            anchor,
        })
    }
}

/// Per-leaf transformation request.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum RefinementFlag {
    Coarsen,
    #[default]
    Keep,
    Refine,
}

impl RefinementFlag {
    pub fn as_i8(self) -> i8 {
        match self {
            RefinementFlag::Coarsen => -1,
            RefinementFlag::Keep => 0,
            RefinementFlag::Refine => 1,
        }
    }

    pub fn from_i8(v: i8) -> Self {
        match v.signum() {
            -1 => RefinementFlag::Coarsen,
            1 => RefinementFlag::Refine,
            _ => RefinementFlag::Keep,
        }
    }
}

/// Where a leaf of a transformed mesh came from in the previous mesh.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LeafOrigin {
    Kept(usize),
    /// Descendant of the old leaf at this index.
    Refined(usize),
    /// Parent of the sibling octet starting at this old index.
    Coarsened(usize),
}

/// Flags that could not be honoured because of the level bounds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ClampReport {
    pub refine_clamped: usize,
    pub coarsen_clamped: usize,
}

/// A linear octree: the leaves of a single root, sorted by Morton index.
#[derive(Clone, Debug, PartialEq)]
pub struct OctreeMesh {
    leaves: Vec<OctantKey>,
    min_level: u8,
    max_level: u8,
    geometry: GeometryMap,
}

impl OctreeMesh {
    /// Validates that `leaves` tile the root in Morton order.
    pub fn new(
        leaves: Vec<OctantKey>,
        min_level: u8,
        max_level: u8,
        geometry: GeometryMap,
    ) -> Result<Self> {
        if min_level > max_level || max_level > MAX_LEVEL {
            return Err(OctreeError::LevelBounds {
                min: min_level,
                max: max_level,
            });
        }
        let mut next = 0u64;
        for k in &leaves {
            if k.sfc_code() != next {
                return Err(OctreeError::NotATiling(
                    "gap, overlap or wrong order between consecutive leaves",
                ));
            }
            next += k.volume();
        }
        if next != ROOT_VOLUME {
            return Err(OctreeError::NotATiling("leaves do not cover the root"));
        }
        Ok(OctreeMesh {
            leaves,
            min_level,
            max_level,
            geometry,
        })
    }

    /// Every leaf at `level`.
    pub fn uniform(level: u8, min_level: u8, max_level: u8, geometry: GeometryMap) -> Result<Self> {
        if min_level > max_level || max_level > MAX_LEVEL || level > max_level {
            return Err(OctreeError::LevelBounds {
                min: min_level,
                max: max_level,
            });
        }
        let n = 1u64 << (3 * level as u32);
        let leaves = (0..n)
            .map(|m| morton_decode(level, MortonIndex(m)).expect("in range"))
            .collect();
        Ok(OctreeMesh {
            leaves,
            min_level,
            max_level,
            geometry,
        })
    }

    pub fn leaves(&self) -> &[OctantKey] {
        &self.leaves
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }

    pub fn min_level(&self) -> u8 {
        self.min_level
    }

    pub fn max_level(&self) -> u8 {
        self.max_level
    }

    pub fn geometry(&self) -> &GeometryMap {
        &self.geometry
    }

    pub fn with_level_bounds(mut self, min_level: u8, max_level: u8) -> Result<Self> {
        if min_level > max_level || max_level > MAX_LEVEL {
            return Err(OctreeError::LevelBounds {
                min: min_level,
                max: max_level,
            });
        }
        self.min_level = min_level;
        self.max_level = max_level;
        Ok(self)
    }

    /// Index of `key` among the leaves.
    pub fn find(&self, key: &OctantKey) -> Option<usize> {
        self.leaves.binary_search(key).ok()
    }

    pub fn index_of(&self, key: &OctantKey) -> Result<usize> {
        self.find(key).ok_or(OctreeError::LeafNotFound(*key))
    }

    /// Leaf containing the quantum cell anchored at `p` (`p < ROOT_LEN`).
    pub fn locate(&self, p: [u32; 3]) -> usize {
        let code = interleave(p);
        let idx = self.leaves.partition_point(|k| k.sfc_code() <= code);
        debug_assert!(idx > 0 && self.leaves[idx - 1].contains_point(p));
        idx - 1
    }

    /// Range of leaves inside the aligned octant `key`; if a leaf contains
    /// `key`, the range holds just that leaf.
    pub fn leaves_within(&self, key: &OctantKey) -> Range<usize> {
        let lo = key.sfc_code();
        let hi = lo + key.volume();
        let start = self.leaves.partition_point(|k| k.sfc_code() < lo);
        let end = self.leaves.partition_point(|k| k.sfc_code() < hi);
        if start < self.leaves.len() && self.leaves[start].sfc_code() == lo {
            start..end
        } else {
            // `key` sits strictly inside a coarser leaf.
            let j = self.locate(key.anchor);
            j..j + 1
        }
    }

    /// Indices of all leaves sharing at least a vertex with leaf `idx`,
    /// sorted ascending.
    pub fn adjacent(&self, idx: usize) -> Vec<usize> {
        let key = self.leaves[idx];
        let mut out = Vec::with_capacity(26);
        for d in DIRECTIONS {
            let Some(nb) = key.neighbor(d) else { continue };
            let range = self.leaves_within(&nb);
            if range.len() == 1 && self.leaves[range.start].level <= key.level {
                out.push(range.start);
                continue;
            }
            for j in range {
                if self.leaves[j].touches(&key) {
                    out.push(j);
                }
            }
        }
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Keyed variant of [`OctreeMesh::adjacent`].
    pub fn adjacent_leaves(&self, leaf: &OctantKey) -> Result<Vec<OctantKey>> {
        let idx = self.index_of(leaf)?;
        Ok(self
            .adjacent(idx)
            .into_iter()
            .map(|j| self.leaves[j])
            .collect())
    }

    /// Apply per-leaf flags. A sibling octet is merged only when all eight
    /// siblings are leaves flagged for coarsening; flags beyond the level
    /// bounds are ignored and counted.
    pub fn refine_and_coarsen(
        &self,
        flags: &[RefinementFlag],
    ) -> Result<(OctreeMesh, Vec<LeafOrigin>, ClampReport)> {
        if flags.len() != self.leaves.len() {
            return Err(OctreeError::LengthMismatch {
                expected: self.leaves.len(),
                got: flags.len(),
            });
        }
        let n = self.leaves.len();
        let mut leaves = Vec::with_capacity(n);
        let mut origin = Vec::with_capacity(n);
        let mut report = ClampReport::default();
        let mut i = 0;
        while i < n {
            let k = self.leaves[i];
            match flags[i] {
                RefinementFlag::Refine if k.level < self.max_level => {
                    leaves.extend_from_slice(&k.children());
                    origin.extend(std::iter::repeat(LeafOrigin::Refined(i)).take(8));
                    i += 1;
                }
                RefinementFlag::Refine => {
                    report.refine_clamped += 1;
                    leaves.push(k);
                    origin.push(LeafOrigin::Kept(i));
                    i += 1;
                }
                RefinementFlag::Coarsen if k.level > self.min_level => {
                    if self.octet_flagged_at(i, flags) {
                        leaves.push(k.parent().expect("level > 0"));
                        origin.push(LeafOrigin::Coarsened(i));
                        i += 8;
                    } else {
                        leaves.push(k);
                        origin.push(LeafOrigin::Kept(i));
                        i += 1;
                    }
                }
                RefinementFlag::Coarsen => {
                    report.coarsen_clamped += 1;
                    leaves.push(k);
                    origin.push(LeafOrigin::Kept(i));
                    i += 1;
                }
                RefinementFlag::Keep => {
                    leaves.push(k);
                    origin.push(LeafOrigin::Kept(i));
                    i += 1;
                }
            }
        }
        let mesh = OctreeMesh {
            leaves,
            min_level: self.min_level,
            max_level: self.max_level,
            geometry: self.geometry.clone(),
        };
        Ok((mesh, origin, report))
    }

    /// True when leaves `i..i+8` are the complete sibling octet of leaf `i`.
    pub fn is_octet_start(&self, i: usize) -> bool {
        let k = self.leaves[i];
        if k.level == 0 || k.child_index() != 0 || i + 8 > self.leaves.len() {
            return false;
        }
        let parent = k.parent().expect("level > 0");
        (1..8).all(|c| self.leaves[i + c] == parent.child(c))
    }

    fn octet_flagged_at(&self, i: usize, flags: &[RefinementFlag]) -> bool {
        self.is_octet_start(i) && flags[i..i + 8].iter().all(|&f| f == RefinementFlag::Coarsen)
    }

    /// Refine (never coarsen) until leaves sharing a face, edge or vertex
    /// differ by at most one level.
    pub fn enforce_2to1_balance(&self) -> (OctreeMesh, Vec<LeafOrigin>) {
        let mut mesh = self.clone();
        let mut origin: Vec<LeafOrigin> = (0..mesh.len()).map(LeafOrigin::Kept).collect();
        let mut check: Vec<usize> = (0..mesh.len()).collect();
        loop {
            let mut flags = vec![RefinementFlag::Keep; mesh.len()];
            // A neighbour refined once may still be too coarse.
            let mut recheck = vec![false; mesh.len()];
            let mut any = false;
            for &i in &check {
                let key = mesh.leaves[i];
                if key.level < 2 {
                    continue;
                }
                for d in DIRECTIONS {
                    let Some(nb) = key.neighbor(d) else { continue };
                    let j = mesh.locate(nb.anchor);
                    if mesh.leaves[j].level + 1 < key.level {
                        flags[j] = RefinementFlag::Refine;
                        recheck[i] = true;
                        any = true;
                    }
                }
            }
            if !any {
                break;
            }
            // Violating leaves are at most max_level - 2, nothing is clamped.
            let mut bounded = mesh.clone();
            bounded.max_level = MAX_LEVEL;
            let (next, step, _) = bounded
                .refine_and_coarsen(&flags)
                .expect("flag length matches");
            check = step
                .iter()
                .enumerate()
                .filter_map(|(i, o)| match *o {
                    LeafOrigin::Refined(_) => Some(i),
                    LeafOrigin::Kept(m) if recheck[m] => Some(i),
                    _ => None,
                })
                .collect();
            origin = step
                .iter()
                .map(|o| match *o {
                    LeafOrigin::Kept(m) => origin[m],
                    LeafOrigin::Refined(m) => match origin[m] {
                        LeafOrigin::Kept(x) | LeafOrigin::Refined(x) => LeafOrigin::Refined(x),
                        LeafOrigin::Coarsened(_) => unreachable!("balance never coarsens"),
                    },
                    LeafOrigin::Coarsened(_) => unreachable!("balance never coarsens"),
                })
                .collect();
            mesh.leaves = next.leaves;
        }
        (mesh, origin)
    }

    /// Full (vertex) 2:1 balance check.
    pub fn is_balanced(&self) -> bool {
        self.leaves.iter().all(|key| {
            key.level < 2
                || DIRECTIONS.iter().all(|&d| match key.neighbor(d) {
                    Some(nb) => self.leaves[self.locate(nb.anchor)].level + 1 >= key.level,
                    None => true,
                })
        })
    }

    /// Physical image of an integer point of the root cube.
    pub fn point(&self, p: [u32; 3]) -> Point3 {
        let s = 1.0 / ROOT_LEN as f64;
        self.geometry
            .map([p[0] as f64 * s, p[1] as f64 * s, p[2] as f64 * s])
    }

    /// The 8 mapped corners of leaf `idx`, ordered `x + 2y + 4z`.
    pub fn leaf_corners(&self, idx: usize) -> [Point3; 8] {
        let key = self.leaves[idx];
        std::array::from_fn(|c| self.point(key.corner(c)))
    }

    /// Keyed variant of [`OctreeMesh::leaf_corners`].
    pub fn leaf_box(&self, leaf: &OctantKey) -> Result<[Point3; 8]> {
        Ok(self.leaf_corners(self.index_of(leaf)?))
    }

    /// Text dump, one leaf per line: `level morton x y z`.
    pub fn dump(&self) -> String {
        let mut out = String::with_capacity(self.leaves.len() * 24);
        for k in &self.leaves {
            let [x, y, z] = k.anchor;
            let _ = writeln!(out, "{} {} {} {} {}", k.level, k.morton().0, x, y, z);
        }
        out
    }

    /// Sum of leaf volumes in quanta.
    pub fn total_volume(&self) -> u128 {
        self.leaves.iter().map(|k| k.volume() as u128).sum()
    }

    /// Vertex adjacency of every leaf in compressed form.
    pub fn adjacency(&self) -> Adjacency {
        let mut offsets = Vec::with_capacity(self.len() + 1);
        let mut targets = Vec::with_capacity(self.len() * 26);
        offsets.push(0);
        for i in 0..self.len() {
            targets.extend(self.adjacent(i));
            offsets.push(targets.len());
        }
        Adjacency { offsets, targets }
    }
}

/// Compressed leaf adjacency lists, each sorted ascending.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Adjacency {
    offsets: Vec<usize>,
    targets: Vec<usize>,
}

impl Adjacency {
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.targets[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn len(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-leaf payload carried through a transformation: kept and refined
/// leaves copy their source; coarsened leaves take `merge` of the octet.
pub fn inherit<T: Clone>(
    origin: &[LeafOrigin],
    old: &[T],
    mut merge: impl FnMut(&[T]) -> T,
) -> Vec<T> {
    origin
        .iter()
        .map(|o| match *o {
            LeafOrigin::Kept(i) | LeafOrigin::Refined(i) => old[i].clone(),
            LeafOrigin::Coarsened(i) => merge(&old[i..i + 8]),
        })
        .collect()
}

/// Origins of `last` relative to `first_leaves`, given the origins of an
/// intermediate mesh (`first`) and a refinement-only step after it (`second`).
pub fn compose_origins(
    first_leaves: &[OctantKey],
    first: &[LeafOrigin],
    second: &[LeafOrigin],
    last: &[OctantKey],
) -> Vec<LeafOrigin> {
    second
        .iter()
        .zip(last)
        .map(|(o, key)| match *o {
            LeafOrigin::Kept(m) => first[m],
            LeafOrigin::Refined(m) => match first[m] {
                LeafOrigin::Kept(x) | LeafOrigin::Refined(x) => LeafOrigin::Refined(x),
                // A merged octet split again: the leaf lies in one of the
                // original siblings.
                LeafOrigin::Coarsened(x) => {
                    let j = (x..x + 8)
                        .find(|&j| first_leaves[j].contains(key))
                        .expect("descendant of the merged octet");
                    if first_leaves[j] == *key {
                        LeafOrigin::Kept(j)
                    } else {
                        LeafOrigin::Refined(j)
                    }
                }
            },
            LeafOrigin::Coarsened(_) => panic!("second step must not coarsen"),
        })
        .collect()
}

/// Index of the source leaf each origin refers to (first sibling for merges).
pub fn origin_index(o: LeafOrigin) -> usize {
    match o {
        LeafOrigin::Kept(i) | LeafOrigin::Refined(i) | LeafOrigin::Coarsened(i) => i,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(level: u8) -> OctreeMesh {
        OctreeMesh::uniform(level, 0, 8, GeometryMap::unit()).unwrap()
    }

    /// Bit-by-bit reference interleaving, independent of the magic-mask path.
    fn reference_morton(level: u8, coords: [u32; 3]) -> u64 {
        let mut m = 0u64;
        for l in 0..level {
            let bit = level - 1 - l;
            let digit = ((coords[0] >> bit) & 1) | ((coords[1] >> bit) & 1) << 1 | ((coords[2] >> bit) & 1) << 2;
            m = (m << 3) | digit as u64;
        }
        m
    }

    #[test]
    fn morton_examples() {
        assert_eq!(OctantKey::root().morton(), MortonIndex(0));
        let k = OctantKey::from_level_coords(1, [1, 0, 1]).unwrap();
        assert_eq!(k.morton(), MortonIndex(5));
        // level-2 bits x=(1,0), y=(0,1), z=(0,0), most significant first
        let k = OctantKey::from_level_coords(2, [0b10, 0b01, 0b00]).unwrap();
        assert_eq!(reference_morton(2, [0b10, 0b01, 0b00]), 10);
        assert_eq!(k.morton(), MortonIndex(10));
    }

    #[test]
    fn morton_matches_reference_interleaving() {
        for level in [1u8, 3, 7, 19] {
            for s in 0..200u32 {
                let n = 1u32 << level;
                let c = [
                    s.wrapping_mul(2654435761) % n,
                    s.wrapping_mul(40503) % n,
                    s.wrapping_mul(97) % n,
                ];
                let k = OctantKey::from_level_coords(level, c).unwrap();
                assert_eq!(k.morton().0, reference_morton(level, c));
                assert_eq!(morton_decode(level, k.morton()).unwrap(), k);
            }
        }
    }

    #[test]
    fn misaligned_anchor_is_rejected() {
        let err = morton_encode(1, [1, 0, 0]).unwrap_err();
        assert!(matches!(err, OctreeError::InvalidKey { .. }));
        assert!(OctantKey::new(20, [0; 3]).is_err());
        assert!(OctantKey::new(0, [ROOT_LEN, 0, 0]).is_err());
    }

    #[test]
    fn children_parent_roundtrip() {
        let k = OctantKey::from_level_coords(3, [5, 2, 7]).unwrap();
        for (c, child) in k.children().iter().enumerate() {
            assert_eq!(child.parent(), Some(k));
            assert_eq!(child.child_index(), c);
            assert!(k.contains(child));
        }
    }

    #[test]
    fn uniform_refinement_counts() {
        let m = unit(0);
        let f = vec![RefinementFlag::Refine; 1];
        let (m, _, _) = m.refine_and_coarsen(&f).unwrap();
        let f = vec![RefinementFlag::Refine; 8];
        let (m, _, _) = m.refine_and_coarsen(&f).unwrap();
        assert_eq!(m.len(), 64);

        let m = unit(1);
        let mut f = vec![RefinementFlag::Keep; 8];
        f[3] = RefinementFlag::Refine;
        let (m, _, _) = m.refine_and_coarsen(&f).unwrap();
        assert_eq!(m.len(), 15);
        assert_eq!(m.total_volume(), ROOT_VOLUME as u128);
    }

    #[test]
    fn partial_octet_is_not_coarsened() {
        let m = unit(1);
        let mut f = vec![RefinementFlag::Coarsen; 8];
        f[5] = RefinementFlag::Keep;
        let (out, _, _) = m.refine_and_coarsen(&f).unwrap();
        assert_eq!(out.leaves(), m.leaves());
        let (out, origin, _) = m.refine_and_coarsen(&[RefinementFlag::Coarsen; 8]).unwrap();
        assert_eq!(out.leaves(), &[OctantKey::root()]);
        assert_eq!(origin, vec![LeafOrigin::Coarsened(0)]);
    }

    #[test]
    fn flags_outside_level_bounds_are_clamped() {
        let m = OctreeMesh::uniform(1, 1, 1, GeometryMap::unit()).unwrap();
        let (out, _, rep) = m.refine_and_coarsen(&[RefinementFlag::Refine; 8]).unwrap();
        assert_eq!(out.len(), 8);
        assert_eq!(rep.refine_clamped, 8);
        let (out, _, rep) = m.refine_and_coarsen(&[RefinementFlag::Coarsen; 8]).unwrap();
        assert_eq!(out.len(), 8);
        assert_eq!(rep.coarsen_clamped, 8);
        assert!(m.refine_and_coarsen(&[RefinementFlag::Keep; 3]).is_err());
    }

    #[test]
    fn adjacency_in_uniform_meshes() {
        let m = unit(1);
        for i in 0..8 {
            let adj = m.adjacent(i);
            assert_eq!(adj.len(), 7);
            assert!(!adj.contains(&i));
        }
        let m = unit(2);
        let corner = m.find(&OctantKey::from_level_coords(2, [0, 0, 0]).unwrap()).unwrap();
        assert_eq!(m.adjacent(corner).len(), 7);
        let inner = m.find(&OctantKey::from_level_coords(2, [1, 1, 1]).unwrap()).unwrap();
        assert_eq!(m.adjacent(inner).len(), 26);
        let missing = OctantKey::from_level_coords(3, [0, 0, 0]).unwrap();
        assert!(m.adjacent_leaves(&missing).is_err());
    }

    #[test]
    fn fig1_corner_hanging_vertex_is_balanced_away() {
        // Refine the corner child twice so a level-3 leaf touches a level-1
        // leaf only through a vertex.
        let m = unit(1);
        let mut f = vec![RefinementFlag::Keep; 8];
        f[0] = RefinementFlag::Refine;
        let (m, _, _) = m.refine_and_coarsen(&f).unwrap();
        let target = m.find(&OctantKey::from_level_coords(2, [1, 1, 1]).unwrap()).unwrap();
        let mut f = vec![RefinementFlag::Keep; m.len()];
        f[target] = RefinementFlag::Refine;
        let (m, _, _) = m.refine_and_coarsen(&f).unwrap();
        assert!(!m.is_balanced());
        let (b, origin) = m.enforce_2to1_balance();
        assert!(b.is_balanced());
        assert_eq!(origin.len(), b.len());
        // All 7 level-1 siblings touch the level-3 leaves and get split.
        assert!(b.leaves().iter().all(|k| k.level() >= 2));
        let (again, _) = b.enforce_2to1_balance();
        assert_eq!(again.leaves(), b.leaves());
    }

    #[test]
    fn neighbor_two_levels_deeper_forces_one_refinement() {
        let m = unit(2);
        let i = m.find(&OctantKey::from_level_coords(2, [1, 1, 1]).unwrap()).unwrap();
        let mut f = vec![RefinementFlag::Keep; m.len()];
        f[i] = RefinementFlag::Refine;
        let (m, _, _) = m.refine_and_coarsen(&f).unwrap();
        let i = m.find(&OctantKey::from_level_coords(3, [3, 3, 3]).unwrap()).unwrap();
        let mut f = vec![RefinementFlag::Keep; m.len()];
        f[i] = RefinementFlag::Refine;
        let (m, _, _) = m.refine_and_coarsen(&f).unwrap();
        let (b, _) = m.enforce_2to1_balance();
        // Brute-force: every touching pair differs by at most one level.
        for (a, ka) in b.leaves().iter().enumerate() {
            for kb in &b.leaves()[a + 1..] {
                if ka.touches(kb) {
                    assert!(ka.level().abs_diff(kb.level()) <= 1);
                }
            }
        }
        // The level-2 leaf at (2,2,2) touches the level-4 leaves and was split once.
        let split = OctantKey::from_level_coords(2, [2, 2, 2]).unwrap();
        assert!(b.find(&split).is_none());
        assert!(b.find(&split.child(0)).is_some());
    }

    #[test]
    fn leaf_box_identity() {
        let m = unit(1);
        let k = OctantKey::from_level_coords(1, [1, 0, 0]).unwrap();
        let c = m.leaf_box(&k).unwrap();
        assert_eq!(c[0], [0.5, 0.0, 0.0]);
        assert_eq!(c[7], [1.0, 0.5, 0.5]);
        let r = unit(0).leaf_box(&OctantKey::root()).unwrap();
        assert_eq!(r[0], [0.0; 3]);
        assert_eq!(r[7], [1.0; 3]);
    }

    #[test]
    fn wiggle_leaf_box_is_the_map_at_corners() {
        let g = GeometryMap::Wiggle {
            origin: [0.0; 3],
            extent: [30.72, 30.72, 30.72],
            amplitude: 3.0,
        };
        let m = OctreeMesh::uniform(2, 0, 5, g.clone()).unwrap();
        let k = m.leaves()[13];
        let c = m.leaf_box(&k).unwrap();
        for (i, p) in c.iter().enumerate() {
            let q = k.corner(i).map(|v| v as f64 / ROOT_LEN as f64);
            assert_eq!(*p, g.map(q));
        }
    }

    #[test]
    fn dump_format() {
        let d = unit(1).dump();
        let lines: Vec<_> = d.lines().collect();
        assert_eq!(lines.len(), 8);
        assert_eq!(lines[0], "1 0 0 0 0");
        assert_eq!(lines[5], format!("1 5 {} 0 {}", ROOT_LEN / 2, ROOT_LEN / 2));
    }

    #[test]
    fn new_rejects_non_tilings() {
        let mut leaves = unit(1).leaves().to_vec();
        leaves.pop();
        assert!(OctreeMesh::new(leaves.clone(), 0, 3, GeometryMap::unit()).is_err());
        leaves.swap(0, 1);
        assert!(OctreeMesh::new(leaves, 0, 3, GeometryMap::unit()).is_err());
    }
}
