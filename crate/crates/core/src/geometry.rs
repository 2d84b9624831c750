//! Smooth maps from the unit root cube to physical space.

use serde::{Deserialize, Serialize};

pub type Point3 = [f64; 3];

/// Bijection from the reference root cube `[0,1]^3` to physical coordinates (mm).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum GeometryMap {
    /// Axis-aligned box: `x = origin + extent * xi`.
    Box { origin: Point3, extent: Point3 },
    /// Box followed by a rigid rotation about `pivot` (row-major rotation matrix).
    Rigid {
        origin: Point3,
        extent: Point3,
        rotation: [[f64; 3]; 3],
        pivot: Point3,
    },
    /// Box sheared in `x` by a C1 wiggle of `y`: two parabolic arcs of
    /// opposite sign joined at `eta = 0.5`, peak offset `amplitude`.
    Wiggle {
        origin: Point3,
        extent: Point3,
        amplitude: f64,
    },
}

impl Default for GeometryMap {
    fn default() -> Self {
        GeometryMap::unit()
    }
}

impl GeometryMap {
    pub fn unit() -> Self {
        GeometryMap::Box {
            origin: [0.0; 3],
            extent: [1.0; 3],
        }
    }

    pub fn cube(origin: Point3, side: f64) -> Self {
        GeometryMap::Box {
            origin,
            extent: [side; 3],
        }
    }

    pub fn origin(&self) -> Point3 {
        match self {
            GeometryMap::Box { origin, .. }
            | GeometryMap::Rigid { origin, .. }
            | GeometryMap::Wiggle { origin, .. } => *origin,
        }
    }

    pub fn extent(&self) -> Point3 {
        match self {
            GeometryMap::Box { extent, .. }
            | GeometryMap::Rigid { extent, .. }
            | GeometryMap::Wiggle { extent, .. } => *extent,
        }
    }

    /// True when leaf images are axis-aligned boxes.
    pub fn is_axis_aligned(&self) -> bool {
        matches!(self, GeometryMap::Box { .. })
    }

    pub fn map(&self, xi: Point3) -> Point3 {
        match self {
            GeometryMap::Box { origin, extent } => [
                origin[0] + extent[0] * xi[0],
                origin[1] + extent[1] * xi[1],
                origin[2] + extent[2] * xi[2],
            ],
            GeometryMap::Rigid {
                origin,
                extent,
                rotation,
                pivot,
            } => {
                let p = [
                    origin[0] + extent[0] * xi[0] - pivot[0],
                    origin[1] + extent[1] * xi[1] - pivot[1],
                    origin[2] + extent[2] * xi[2] - pivot[2],
                ];
                let mut out = *pivot;
                for (i, row) in rotation.iter().enumerate() {
                    out[i] += row[0] * p[0] + row[1] * p[1] + row[2] * p[2];
                }
                out
            }
            GeometryMap::Wiggle {
                origin,
                extent,
                amplitude,
            } => [
                origin[0] + extent[0] * xi[0] + amplitude * wiggle_profile(xi[1]),
                origin[1] + extent[1] * xi[1],
                origin[2] + extent[2] * xi[2],
            ],
        }
    }
}

/// `8 eta (1 - 2 eta)` on `[0, 0.5]`, mirrored with opposite sign on `[0.5, 1]`.
pub fn wiggle_profile(eta: f64) -> f64 {
    if eta <= 0.5 {
        8.0 * eta * (1.0 - 2.0 * eta)
    } else {
        let u = eta - 0.5;
        -8.0 * u * (1.0 - 2.0 * u)
    }
}

/// Rotation matrix about the `z` axis.
pub fn rotation_z(angle: f64) -> [[f64; 3]; 3] {
    let (s, c) = angle.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

pub(crate) fn sub(a: Point3, b: Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn add(a: Point3, b: Point3) -> Point3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub(crate) fn scale(a: Point3, s: f64) -> Point3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub(crate) fn dot(a: Point3, b: Point3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross(a: Point3, b: Point3) -> Point3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn norm(a: Point3) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wiggle_profile_is_c1_at_the_join() {
        let h = 1e-7;
        let left = (wiggle_profile(0.5) - wiggle_profile(0.5 - h)) / h;
        let right = (wiggle_profile(0.5 + h) - wiggle_profile(0.5)) / h;
        assert!((left - right).abs() < 1e-5);
        assert_eq!(wiggle_profile(0.0), 0.0);
        assert!((wiggle_profile(0.25) - 1.0).abs() < 1e-15);
        assert!((wiggle_profile(0.75) + 1.0).abs() < 1e-15);
    }

    #[test]
    fn rigid_map_preserves_distances() {
        let g = GeometryMap::Rigid {
            origin: [0.0; 3],
            extent: [2.0; 3],
            rotation: rotation_z(0.3),
            pivot: [1.0, 1.0, 1.0],
        };
        let a = g.map([0.0, 0.0, 0.0]);
        let b = g.map([1.0, 0.5, 0.25]);
        let d = norm(sub(a, b));
        assert!((d - (4.0f64 + 1.0 + 0.25).sqrt()).abs() < 1e-12);
    }
}
