//! Oriented cuboids, the separating-axis disjointness test, and the
//! heat-affected volume swept by the laser during one increment.

use serde::{Deserialize, Serialize};

use crate::geometry::{add, cross, dot, norm, scale, sub, Point3};
use crate::octree::{OctantKey, OctreeMesh};

const ORTHONORMAL_TOL: f64 = 1e-12;
/// Cross products of nearly parallel edges are skipped below this norm.
const DEGENERATE_AXIS: f64 = 1e-12;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CollisionError {
    #[error("invalid cuboid: {0}")]
    InvalidCuboid(&'static str),
    #[error("heat-affected volume needs a segment of positive horizontal length")]
    ZeroLengthSegment,
    #[error("heat-affected volume needs positive width, thickness and a scale >= 1")]
    BadHavDimensions,
    #[error("mapped cell {0:?} is degenerate or inverted")]
    DegenerateCell(OctantKey),
}

/// Box with center, half extents and orthonormal axes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cuboid {
    center: Point3,
    half_extents: Point3,
    axes: [Point3; 3],
}

impl Cuboid {
    pub fn new(center: Point3, half_extents: Point3, axes: [Point3; 3]) -> Result<Self, CollisionError> {
        if half_extents.iter().any(|&h| !(h > 0.0) || !h.is_finite()) {
            return Err(CollisionError::InvalidCuboid("half extents must be positive"));
        }
        for i in 0..3 {
            if (norm(axes[i]) - 1.0).abs() > ORTHONORMAL_TOL {
                return Err(CollisionError::InvalidCuboid("axis is not unit length"));
            }
            for j in i + 1..3 {
                if dot(axes[i], axes[j]).abs() > ORTHONORMAL_TOL {
                    return Err(CollisionError::InvalidCuboid("axes are not orthogonal"));
                }
            }
        }
        Ok(Cuboid {
            center,
            half_extents,
            axes,
        })
    }

    /// Axis-aligned box `[lo, hi]`.
    pub fn aabb(lo: Point3, hi: Point3) -> Result<Self, CollisionError> {
        Self::new(
            scale(add(lo, hi), 0.5),
            scale(sub(hi, lo), 0.5),
            [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        )
    }

    pub fn center(&self) -> Point3 {
        self.center
    }

    pub fn half_extents(&self) -> Point3 {
        self.half_extents
    }

    pub fn axes(&self) -> [Point3; 3] {
        self.axes
    }

    /// Corners ordered `x + 2y + 4z` in the local frame (minus side first).
    pub fn vertices(&self) -> [Point3; 8] {
        std::array::from_fn(|c| {
            let mut p = self.center;
            for i in 0..3 {
                let s = if (c >> i) & 1 == 1 { 1.0 } else { -1.0 };
                p = add(p, scale(self.axes[i], s * self.half_extents[i]));
            }
            p
        })
    }

    /// Half width of the projection onto `axis` (any length).
    #[inline]
    fn radius(&self, axis: Point3) -> f64 {
        (0..3)
            .map(|i| self.half_extents[i] * dot(self.axes[i], axis).abs())
            .sum()
    }

    /// Axis-aligned bounding box `(lo, hi)`.
    pub fn bounds(&self) -> (Point3, Point3) {
        let r = [
            self.radius([1.0, 0.0, 0.0]),
            self.radius([0.0, 1.0, 0.0]),
            self.radius([0.0, 0.0, 1.0]),
        ];
        (sub(self.center, r), add(self.center, r))
    }

    /// Same box with every half extent scaled by `factor`.
    pub fn scaled(&self, factor: f64) -> Cuboid {
        Cuboid {
            half_extents: scale(self.half_extents, factor),
            ..*self
        }
    }

    /// Rigidly moved copy: `x -> R x + t`.
    pub fn transformed(&self, rotation: &[[f64; 3]; 3], translation: Point3) -> Cuboid {
        let rot = |v: Point3| -> Point3 { std::array::from_fn(|i| dot(rotation[i], v)) };
        Cuboid {
            center: add(rot(self.center), translation),
            half_extents: self.half_extents,
            axes: self.axes.map(rot),
        }
    }
}

/// True iff one of the 15 candidate axes strictly separates the
/// projections. Boxes that merely touch are not disjoint.
pub fn separating_axis_disjoint(a: &Cuboid, b: &Cuboid) -> bool {
    let d = sub(b.center, a.center);
    let separates = |axis: Point3| dot(d, axis).abs() > a.radius(axis) + b.radius(axis);
    if a.axes.iter().chain(b.axes.iter()).any(|&ax| separates(ax)) {
        return true;
    }
    for ea in &a.axes {
        for eb in &b.axes {
            let axis = cross(*ea, *eb);
            if norm(axis) < DEGENERATE_AXIS {
                continue;
            }
            if separates(axis) {
                return true;
            }
        }
    }
    false
}

pub fn intersects(a: &Cuboid, b: &Cuboid) -> bool {
    !separating_axis_disjoint(a, b)
}

/// Axis-aligned boxes overlap (closed).
#[inline]
pub fn bounds_overlap(a: &(Point3, Point3), b: &(Point3, Point3)) -> bool {
    (0..3).all(|i| a.0[i] <= b.1[i] && b.0[i] <= a.1[i])
}

/// The cuboid swept by the laser between two positions of one layer. The
/// `z` coordinate of the positions is the top of the current layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatAffectedVolume {
    pub previous_position: Point3,
    pub current_position: Point3,
    pub laser_width: f64,
    pub layer_thickness: f64,
    pub xy_scale: f64,
    cuboid: Cuboid,
}

pub fn build_hav(
    prev: Point3,
    cur: Point3,
    width: f64,
    thickness: f64,
    xy_scale: f64,
) -> Result<HeatAffectedVolume, CollisionError> {
    if !(width > 0.0 && thickness > 0.0 && xy_scale >= 1.0) {
        return Err(CollisionError::BadHavDimensions);
    }
    let dx = cur[0] - prev[0];
    let dy = cur[1] - prev[1];
    let len = dx.hypot(dy);
    if !(len > 0.0) {
        return Err(CollisionError::ZeroLengthSegment);
    }
    let a1 = [dx / len, dy / len, 0.0];
    let a2 = [-a1[1], a1[0], 0.0];
    let top = cur[2];
    let center = [
        0.5 * (prev[0] + cur[0]),
        0.5 * (prev[1] + cur[1]),
        top - 0.5 * thickness,
    ];
    let cuboid = Cuboid::new(
        center,
        [0.5 * len * xy_scale, 0.5 * width * xy_scale, 0.5 * thickness],
        [a1, a2, [0.0, 0.0, 1.0]],
    )?;
    Ok(HeatAffectedVolume {
        previous_position: prev,
        current_position: cur,
        laser_width: width,
        layer_thickness: thickness,
        xy_scale,
        cuboid,
    })
}

impl HeatAffectedVolume {
    /// Axis-aligned volume `[lo, hi]`, e.g. a whole layer slab.
    pub fn from_bounds(lo: Point3, hi: Point3) -> Result<Self, CollisionError> {
        let cuboid = Cuboid::aabb(lo, hi)?;
        Ok(HeatAffectedVolume {
            previous_position: [lo[0], 0.5 * (lo[1] + hi[1]), hi[2]],
            current_position: [hi[0], 0.5 * (lo[1] + hi[1]), hi[2]],
            laser_width: hi[1] - lo[1],
            layer_thickness: hi[2] - lo[2],
            xy_scale: 1.0,
            cuboid,
        })
    }

    pub fn cuboid(&self) -> &Cuboid {
        &self.cuboid
    }

    /// Full extents along the box axes.
    pub fn extents(&self) -> Point3 {
        scale(self.cuboid.half_extents, 2.0)
    }

    pub fn vertices(&self) -> [Point3; 8] {
        self.cuboid.vertices()
    }

    pub fn centroid(&self) -> Point3 {
        let v = self.vertices();
        let s = v.iter().fold([0.0; 3], |acc, p| add(acc, *p));
        scale(s, 0.125)
    }

    pub fn bounds(&self) -> (Point3, Point3) {
        self.cuboid.bounds()
    }
}

/// Oriented box representing leaf `idx` for the intersection test: exact
/// for axis-aligned maps, otherwise fitted through the 8 mapped corners.
pub fn cell_obb(mesh: &OctreeMesh, idx: usize) -> Result<Cuboid, CollisionError> {
    let key = mesh.leaves()[idx];
    if mesh.geometry().is_axis_aligned() {
        let lo = mesh.point(key.anchor());
        let hi = mesh.point(key.corner(7));
        return Cuboid::aabb(lo, hi).map_err(|_| CollisionError::DegenerateCell(key));
    }
    fit_obb(&mesh.leaf_corners(idx)).ok_or(CollisionError::DegenerateCell(key))
}

/// Best-fit oriented box through hexahedron corners ordered `x + 2y + 4z`.
pub fn fit_obb(c: &[Point3; 8]) -> Option<Cuboid> {
    let edge_mean = |pairs: [(usize, usize); 4]| {
        pairs
            .iter()
            .fold([0.0; 3], |acc, &(i, j)| add(acc, scale(sub(c[j], c[i]), 0.25)))
    };
    let u = edge_mean([(0, 1), (2, 3), (4, 5), (6, 7)]);
    let v = edge_mean([(0, 2), (1, 3), (4, 6), (5, 7)]);
    let w = edge_mean([(0, 4), (1, 5), (2, 6), (3, 7)]);
    let nu = norm(u);
    if !(nu > 0.0) {
        return None;
    }
    let e1 = scale(u, 1.0 / nu);
    let v = sub(v, scale(e1, dot(v, e1)));
    let nv = norm(v);
    if !(nv > 1e-12 * nu) {
        return None;
    }
    let e2 = scale(v, 1.0 / nv);
    let e3 = cross(e1, e2);
    if !(dot(w, e3) > 1e-12 * nu) {
        return None;
    }
    let axes = [e1, e2, e3];
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in c {
        for i in 0..3 {
            let s = dot(*p, axes[i]);
            lo[i] = lo[i].min(s);
            hi[i] = hi[i].max(s);
        }
    }
    let mut center = [0.0; 3];
    let mut half = [0.0; 3];
    for i in 0..3 {
        center = add(center, scale(axes[i], 0.5 * (lo[i] + hi[i])));
        half[i] = 0.5 * (hi[i] - lo[i]);
    }
    Cuboid::new(center, half, axes).ok()
}

/// Reference-space coordinates of a physical point under an axis-aligned
/// map, in quanta (unclamped).
#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{rotation_z, GeometryMap};

    const I3: [Point3; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

    fn rotated_z(center: Point3, half: Point3, angle: f64) -> Cuboid {
        let r = rotation_z(angle);
        let axes = [
            [r[0][0], r[1][0], 0.0],
            [r[0][1], r[1][1], 0.0],
            [0.0, 0.0, 1.0],
        ];
        Cuboid::new(center, half, axes).unwrap()
    }

    #[test]
    fn sat_examples() {
        let a = Cuboid::new([0.0; 3], [1.0; 3], I3).unwrap();
        assert!(!separating_axis_disjoint(&a, &a));
        let b = Cuboid::new([3.0, 0.0, 0.0], [1.0; 3], I3).unwrap();
        assert!(separating_axis_disjoint(&a, &b));
        let c = rotated_z([2.40, 0.0, 0.0], [1.0; 3], std::f64::consts::FRAC_PI_4);
        assert!(!separating_axis_disjoint(&a, &c));
        let far = rotated_z([2.42, 0.0, 0.0], [1.0; 3], std::f64::consts::FRAC_PI_4);
        assert!(separating_axis_disjoint(&a, &far));
    }

    #[test]
    fn touching_boxes_intersect() {
        let a = Cuboid::aabb([0.0; 3], [1.0; 3]).unwrap();
        let b = Cuboid::aabb([1.0, 0.0, 0.0], [2.0, 1.0, 1.0]).unwrap();
        assert!(intersects(&a, &b));
        let corner = Cuboid::aabb([1.0; 3], [2.0; 3]).unwrap();
        assert!(intersects(&a, &corner));
    }

    #[test]
    fn invalid_axes_rejected() {
        let bad = [[1.0, 0.0, 0.0], [0.1, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(Cuboid::new([0.0; 3], [1.0; 3], bad).is_err());
        assert!(Cuboid::new([0.0; 3], [1.0, 0.0, 1.0], I3).is_err());
    }

    #[test]
    fn hav_extents() {
        let h = build_hav([0.0, 0.0, 1.0], [0.96, 0.0, 1.0], 0.48, 0.06, 1.01).unwrap();
        let e = h.extents();
        assert!((e[0] - 0.9696).abs() < 1e-12);
        assert!((e[1] - 0.4848).abs() < 1e-12);
        assert!((e[2] - 0.06).abs() < 1e-12);
        let (lo, hi) = h.bounds();
        assert!((hi[2] - 1.0).abs() < 1e-12 && (lo[2] - 0.94).abs() < 1e-12);
        let c = h.centroid();
        assert!((c[0] - 0.48).abs() < 1e-12 && (c[2] - 0.97).abs() < 1e-12);

        let raw = build_hav([0.0; 3], [0.96, 0.0, 0.0], 0.48, 0.06, 1.0).unwrap();
        assert_eq!(raw.extents(), [0.96, 0.48, 0.06]);

        let diag = build_hav([0.0; 3], [1.0, 1.0, 0.0], 0.1, 0.1, 1.0).unwrap();
        let a = diag.cuboid().axes()[0];
        assert!((a[0] - a[1]).abs() < 1e-15 && a[2] == 0.0);
        assert!(build_hav([1.0; 3], [1.0; 3], 0.1, 0.1, 1.0).is_err());
    }

    #[test]
    fn cell_obb_identity_and_rotation() {
        let mesh = OctreeMesh::uniform(1, 0, 3, GeometryMap::cube([1.0, 2.0, 3.0], 2.0)).unwrap();
        let obb = cell_obb(&mesh, 7).unwrap();
        assert_eq!(obb.center(), [2.5, 3.5, 4.5]);
        assert_eq!(obb.half_extents(), [0.5; 3]);

        let g = GeometryMap::Rigid {
            origin: [0.0; 3],
            extent: [2.0; 3],
            rotation: rotation_z(0.7),
            pivot: [0.0; 3],
        };
        let mesh = OctreeMesh::uniform(1, 0, 3, g).unwrap();
        let obb = cell_obb(&mesh, 3).unwrap();
        for h in obb.half_extents() {
            assert!((h - 0.5).abs() < 1e-12);
        }
        let corners = mesh.leaf_corners(3);
        let v = obb.vertices();
        for (p, q) in corners.iter().zip(v.iter()) {
            assert!(norm(sub(*p, *q)) < 1e-12);
        }
    }

    #[test]
    fn inverted_cell_is_rejected() {
        let mut c: [Point3; 8] = std::array::from_fn(|i| {
            [(i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64]
        });
        for p in c.iter_mut() {
            p[2] = -p[2];
        }
        assert!(fit_obb(&c).is_none());
    }
}
