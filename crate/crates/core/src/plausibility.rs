//! Physical plausibility diagnostics: overlaps, objects leaving the room and
//! unsupported secondary objects.

use crate::geometry::{box_iou, footprint_corners, world_aabb};
use crate::scene::{ObjectRecord, Scene};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlausibilityThresholds {
    /// Pairs above this hard IoU count as overlapping.
    pub overlap_iou: f64,
    /// Allowed bottom-face gap to a support, in meters.
    pub support_gap: f64,
    /// Footprint corners are pulled toward the center by this fraction before the
    /// room-mask test.
    pub corner_shrink: f64,
}

impl Default for PlausibilityThresholds {
    fn default() -> Self {
        Self {
            overlap_iou: 1e-3,
            support_gap: 0.02,
            corner_shrink: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PlausibilityReport {
    pub overlap_rate: f64,
    pub oob_rate: f64,
    pub support_violation_rate: f64,
    pub scenes: usize,
    pub objects: usize,
    pub pairs: usize,
    pub overlapping_pairs: usize,
    pub oob_objects: usize,
    pub secondary_objects: usize,
    pub unsupported: usize,
    pub mean_primary: f64,
    pub mean_secondary: f64,
}

/// Whether the object's footprint leaves the room mask. Geometry is world frame;
/// the scene frame maps it onto the mask.
pub fn out_of_bounds(scene: &Scene, obj: &ObjectRecord, shrink: f64) -> bool {
    let n = scene.frame.to_normalized(obj);
    let c = [n.translation[0], n.translation[2]];
    if !scene.room_mask.contains(c[0], c[1]) {
        return true;
    }
    footprint_corners(&n).iter().any(|p| {
        let q = [p[0] + (c[0] - p[0]) * shrink, p[1] + (c[1] - p[1]) * shrink];
        !scene.room_mask.contains(q[0], q[1])
    })
}

/// Whether a secondary object rests within `gap` of the floor or of the top of
/// a primary object it overlaps horizontally.
pub fn is_supported(scene: &Scene, obj: &ObjectRecord, gap: f64) -> bool {
    if obj.bottom().abs() <= gap {
        return true;
    }
    let a = world_aabb(obj);
    scene
        .primary
        .iter()
        .any(|p| a.overlaps_xz(&world_aabb(p)) && (obj.bottom() - p.top()).abs() <= gap)
}

/// Rates over a set of world-frame scenes.
pub fn plausibility(scenes: &[Scene], th: &PlausibilityThresholds) -> PlausibilityReport {
    let mut r = PlausibilityReport {
        scenes: scenes.len(),
        ..Default::default()
    };
    let mut n_primary = 0usize;
    for scene in scenes {
        let objs: alloc::vec::Vec<&ObjectRecord> = scene.objects().collect();
        n_primary += scene.primary.len();
        r.objects += objs.len();
        for i in 0..objs.len() {
            for j in i + 1..objs.len() {
                r.pairs += 1;
                if box_iou(objs[i], objs[j]) > th.overlap_iou {
                    r.overlapping_pairs += 1;
                }
            }
            if out_of_bounds(scene, objs[i], th.corner_shrink) {
                r.oob_objects += 1;
            }
        }
        for s in &scene.secondary {
            r.secondary_objects += 1;
            if !is_supported(scene, s, th.support_gap) {
                r.unsupported += 1;
            }
        }
    }
    let rate = |num: usize, den: usize| {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    r.overlap_rate = rate(r.overlapping_pairs, r.pairs);
    r.oob_rate = rate(r.oob_objects, r.objects);
    r.support_violation_rate = rate(r.unsupported, r.secondary_objects);
    r.mean_primary = rate(n_primary, scenes.len());
    r.mean_secondary = rate(r.secondary_objects, scenes.len());
    r
}
