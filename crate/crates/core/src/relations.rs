//! The seven directed spatial relations between objects and exhaustive graph
//! extraction.
//!
//! All thresholds are in world meters; predicates run on world-frame objects.

use alloc::vec::Vec;

use crate::geometry::{facing, ray_hits_footprint, world_aabb};
use crate::scene::{Edge, ObjectRecord, SceneGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Relation {
    LeftOf = 0,
    RightOf = 1,
    InFrontOf = 2,
    Behind = 3,
    CloseTo = 4,
    OnTopOf = 5,
    Facing = 6,
}

impl Relation {
    pub const ALL: [Relation; 7] = [
        Relation::LeftOf,
        Relation::RightOf,
        Relation::InFrontOf,
        Relation::Behind,
        Relation::CloseTo,
        Relation::OnTopOf,
        Relation::Facing,
    ];

    pub fn from_id(id: u8) -> Option<Relation> {
        Self::ALL.get(id as usize).copied()
    }

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            Relation::LeftOf => "left_of",
            Relation::RightOf => "right_of",
            Relation::InFrontOf => "in_front_of",
            Relation::Behind => "behind",
            Relation::CloseTo => "close_to",
            Relation::OnTopOf => "on_top_of",
            Relation::Facing => "facing",
        }
    }
}

/// Thresholds for the predicates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelationThresholds {
    /// Maximum XZ center distance for the four directional relations.
    pub directional_range: f64,
    /// Surface gap below which two objects are close.
    pub close_gap: f64,
    /// Allowed distance between a bottom face and the supporting top face.
    pub contact_tol: f64,
    /// Maximum distance along the facing ray.
    pub facing_range: f64,
}

impl Default for RelationThresholds {
    fn default() -> Self {
        Self {
            directional_range: 3.0,
            close_gap: 0.5,
            contact_tol: 1e-2,
            facing_range: 4.0,
        }
    }
}

impl RelationThresholds {
    /// Whether `relation(src, dst)` holds.
    pub fn holds(&self, relation: Relation, src: &ObjectRecord, dst: &ObjectRecord) -> bool {
        let a = world_aabb(src);
        let b = world_aabb(dst);
        let dx = b.center[0] - a.center[0];
        let dz = b.center[2] - a.center[2];
        let in_range = libm::hypot(dx, dz) <= self.directional_range;
        let sum_x = a.half[0] + b.half[0];
        let sum_z = a.half[2] + b.half[2];
        match relation {
            // -x is left, +z is front.
            Relation::LeftOf => in_range && dx > sum_x,
            Relation::RightOf => in_range && -dx > sum_x,
            Relation::InFrontOf => in_range && -dz > sum_z,
            Relation::Behind => in_range && dz > sum_z,
            Relation::CloseTo => a.gap(&b) < self.close_gap,
            Relation::OnTopOf => {
                (src.bottom() - dst.top()).abs() <= self.contact_tol && a.within_xz(&b, 1e-6)
            }
            Relation::Facing => ray_hits_footprint(
                [src.translation[0], src.translation[2]],
                facing(src.theta),
                dst,
            )
            .is_some_and(|d| d <= self.facing_range),
        }
    }
}

/// Applies every predicate to every ordered pair of primary objects. Edges come
/// out sorted by `(src, dst, relation)`.
pub fn extract_graph(primary: &[ObjectRecord], thresholds: &RelationThresholds) -> SceneGraph {
    let mut edges = Vec::new();
    for (i, a) in primary.iter().enumerate() {
        for (j, b) in primary.iter().enumerate() {
            if i == j {
                continue;
            }
            for rel in Relation::ALL {
                if thresholds.holds(rel, a, b) {
                    edges.push(Edge {
                        src: i,
                        dst: j,
                        relation: rel.id(),
                    });
                }
            }
        }
    }
    SceneGraph {
        vertices: SceneGraph::vertices_for(primary),
        edges,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube(x: f64, z: f64) -> ObjectRecord {
        ObjectRecord::new(0, [x, 0.5, z], [0.5; 3], 0.0)
    }

    #[test]
    fn single_object_has_no_edges() {
        let g = extract_graph(&[cube(0.0, 0.0)], &RelationThresholds::default());
        assert!(g.edges.is_empty());
        assert_eq!(g.vertices.len(), 1);
    }

    #[test]
    fn cubes_two_apart_on_x() {
        // Centers 2 m apart, extents sum to 1 m: left-of holds, 1 m gap is not close.
        let g = extract_graph(
            &[cube(0.0, 0.0), cube(2.0, 0.0)],
            &RelationThresholds::default(),
        );
        let left: Vec<_> = g.edges.iter().filter(|e| e.relation == 0).collect();
        assert_eq!(left.len(), 1);
        assert_eq!((left[0].src, left[0].dst), (0, 1));
        assert!(g.edges.contains(&Edge {
            src: 1,
            dst: 0,
            relation: 1
        }));
        assert!(!g.edges.iter().any(|e| e.relation == Relation::CloseTo.id()));
        assert_eq!(g.edges.len(), 2);
    }

    #[test]
    fn stacked_box_is_on_top() {
        let base = ObjectRecord::new(0, [0.0, 0.4, 0.0], [1.0, 0.4, 0.5], 0.0);
        let item = ObjectRecord::new(1, [0.2, 0.9, 0.1], [0.1, 0.1, 0.1], 0.0);
        let th = RelationThresholds::default();
        assert!(th.holds(Relation::OnTopOf, &item, &base));
        assert!(!th.holds(Relation::OnTopOf, &base, &item));
        assert!(th.holds(Relation::CloseTo, &item, &base));
    }

    #[test]
    fn facing_requires_range() {
        let th = RelationThresholds::default();
        let chair = ObjectRecord::new(0, [0.0, 0.4, 0.0], [0.25; 3], 0.0);
        assert!(th.holds(Relation::Facing, &chair, &cube(0.0, 2.0)));
        assert!(!th.holds(Relation::Facing, &chair, &cube(0.0, 5.0)));
        assert!(!th.holds(Relation::Facing, &chair, &cube(0.0, -2.0)));
    }
}
