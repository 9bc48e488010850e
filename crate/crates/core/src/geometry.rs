//! Oriented boxes rotated about the vertical axis, their world-frame AABBs and
//! hard overlap tests.

use crate::scene::ObjectRecord;

/// Axis-aligned box given by center and half extents.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub center: [f64; 3],
    pub half: [f64; 3],
}

impl Aabb {
    pub fn lo(&self, k: usize) -> f64 {
        self.center[k] - self.half[k]
    }

    pub fn hi(&self, k: usize) -> f64 {
        self.center[k] + self.half[k]
    }

    pub fn volume(&self) -> f64 {
        8.0 * self.half[0] * self.half[1] * self.half[2]
    }

    pub fn overlap_len(&self, other: &Aabb, k: usize) -> f64 {
        (self.hi(k).min(other.hi(k)) - self.lo(k).max(other.lo(k))).max(0.0)
    }

    pub fn intersection_volume(&self, other: &Aabb) -> f64 {
        (0..3).map(|k| self.overlap_len(other, k)).product()
    }

    pub fn iou(&self, other: &Aabb) -> f64 {
        let inter = self.intersection_volume(other);
        let union = self.volume() + other.volume() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Euclidean distance between the two boxes; zero when they touch or overlap.
    pub fn gap(&self, other: &Aabb) -> f64 {
        let mut sq = 0.0;
        for k in 0..3 {
            let d = (self.center[k] - other.center[k]).abs() - self.half[k] - other.half[k];
            if d > 0.0 {
                sq += d * d;
            }
        }
        libm::sqrt(sq)
    }

    /// Horizontal (XZ) containment of `self` inside `other`, with slack `tol`.
    pub fn within_xz(&self, other: &Aabb, tol: f64) -> bool {
        [0, 2]
            .iter()
            .all(|&k| self.lo(k) >= other.lo(k) - tol && self.hi(k) <= other.hi(k) + tol)
    }

    pub fn overlaps_xz(&self, other: &Aabb) -> bool {
        [0, 2].iter().all(|&k| self.overlap_len(other, k) > 0.0)
    }
}

/// Horizontal axes of a box rotated by `theta` about `y`: local +x and local +z
/// (the facing direction), as (x, z) pairs.
pub fn local_axes(theta: f64) -> ([f64; 2], [f64; 2]) {
    let (s, c) = (libm::sin(theta), libm::cos(theta));
    ([c, -s], [s, c])
}

/// Unit facing direction in the XZ plane.
pub fn facing(theta: f64) -> [f64; 2] {
    local_axes(theta).1
}

/// World-frame AABB of an oriented object.
pub fn world_aabb(obj: &ObjectRecord) -> Aabb {
    let (c, s) = (libm::cos(obj.theta).abs(), libm::sin(obj.theta).abs());
    let [sx, sy, sz] = obj.half_size;
    Aabb {
        center: obj.translation,
        half: [c * sx + s * sz, sy, s * sx + c * sz],
    }
}

/// Footprint corners in the XZ plane, counter-clockwise in local coordinates.
pub fn footprint_corners(obj: &ObjectRecord) -> [[f64; 2]; 4] {
    let (ax, az) = local_axes(obj.theta);
    let [sx, _, sz] = obj.half_size;
    let c = [obj.translation[0], obj.translation[2]];
    let corner = |u: f64, v: f64| {
        [
            c[0] + u * sx * ax[0] + v * sz * az[0],
            c[1] + u * sx * ax[1] + v * sz * az[1],
        ]
    };
    [
        corner(-1.0, -1.0),
        corner(1.0, -1.0),
        corner(1.0, 1.0),
        corner(-1.0, 1.0),
    ]
}

/// Whether the XZ point lies inside the object's oriented footprint.
pub fn footprint_contains(obj: &ObjectRecord, p: [f64; 2]) -> bool {
    let (ax, az) = local_axes(obj.theta);
    let d = [p[0] - obj.translation[0], p[1] - obj.translation[2]];
    let u = d[0] * ax[0] + d[1] * ax[1];
    let v = d[0] * az[0] + d[1] * az[1];
    u.abs() <= obj.half_size[0] && v.abs() <= obj.half_size[2]
}

/// Distance along a ray in XZ to the object's oriented footprint, if it is hit
/// in front of the origin.
pub fn ray_hits_footprint(origin: [f64; 2], dir: [f64; 2], obj: &ObjectRecord) -> Option<f64> {
    let (ax, az) = local_axes(obj.theta);
    let d = [
        origin[0] - obj.translation[0],
        origin[1] - obj.translation[2],
    ];
    let o = [d[0] * ax[0] + d[1] * ax[1], d[0] * az[0] + d[1] * az[1]];
    let r = [
        dir[0] * ax[0] + dir[1] * ax[1],
        dir[0] * az[0] + dir[1] * az[1],
    ];
    let half = [obj.half_size[0], obj.half_size[2]];
    let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
    for k in 0..2 {
        if r[k].abs() < 1e-12 {
            if o[k].abs() > half[k] {
                return None;
            }
        } else {
            let a = (-half[k] - o[k]) / r[k];
            let b = (half[k] - o[k]) / r[k];
            let (a, b) = if a < b { (a, b) } else { (b, a) };
            t0 = t0.max(a);
            t1 = t1.min(b);
            if t0 > t1 {
                return None;
            }
        }
    }
    Some(t0)
}

/// Hard IoU of the two objects' world-frame AABBs.
pub fn box_iou(a: &ObjectRecord, b: &ObjectRecord) -> f64 {
    world_aabb(a).iou(&world_aabb(b))
}
