//! Procedural, relation-consistent scene generator.
//!
//! Primary furniture is placed against walls or relative to an already placed
//! parent (chairs at desks, nightstands beside beds). Secondary objects are then
//! sampled onto primary top faces or onto the floor next to furniture, weighted
//! by per-parent support tables and room-type co-occurrence. Every placement is
//! checked for overlap against what is already in the room; geometry is
//! quantized to 0.1 mm so that scenes serialize compactly and re-parse exactly.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::{FRAC_PI_2, PI, SQRT_2};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::world_aabb;
use crate::relations::{extract_graph, Relation, RelationThresholds};
use crate::scene::{
    canonical_theta, Caps, Edge, Frame, ObjectRecord, RoomMask, Scene, SceneGraph, FILTER_PRIMARY,
    FILTER_SECONDARY,
};
use crate::taxonomy::{CategoryTaxonomy, Tier};

/// Room mask resolution written by the generator.
pub const MASK_RESOLUTION: usize = 64;

const QUANTUM: f64 = 1e-4;
const MAX_ATTEMPTS: usize = 40;

fn quantize(v: f64) -> f64 {
    libm::round(v / QUANTUM) * QUANTUM
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RoomType {
    Bedroom,
    Living,
    Office,
}

impl RoomType {
    pub const ALL: [RoomType; 3] = [RoomType::Bedroom, RoomType::Living, RoomType::Office];

    pub fn word(self) -> &'static str {
        match self {
            RoomType::Bedroom => "bedroom",
            RoomType::Living => "living_room",
            RoomType::Office => "office",
        }
    }

    pub fn parse(s: &str) -> Option<RoomType> {
        match s {
            "bedroom" => Some(RoomType::Bedroom),
            "living" | "living_room" => Some(RoomType::Living),
            "office" => Some(RoomType::Office),
            _ => None,
        }
    }
}

/// Axis-aligned room outline in meters, with one corner at the origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Footprint {
    Rect {
        width: f64,
        depth: f64,
    },
    /// Rectangle with the `(+x, +z)` corner of size `cut_width x cut_depth` removed.
    LShape {
        width: f64,
        depth: f64,
        cut_width: f64,
        cut_depth: f64,
    },
}

/// One wall segment: fixed coordinate, extent along the other horizontal axis and
/// inward normal.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Wall {
    /// `true` when the wall runs along x (fixed z).
    along_x: bool,
    fixed: f64,
    start: f64,
    end: f64,
    normal: [f64; 2],
}

impl Footprint {
    pub fn bounds(&self) -> (f64, f64) {
        match *self {
            Footprint::Rect { width, depth } | Footprint::LShape { width, depth, .. } => {
                (width, depth)
            }
        }
    }

    fn cut(&self) -> Option<Aabb2> {
        match *self {
            Footprint::Rect { .. } => None,
            Footprint::LShape {
                width,
                depth,
                cut_width,
                cut_depth,
            } => Some(Aabb2 {
                lo: [width - cut_width, depth - cut_depth],
                hi: [width, depth],
            }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (w, d) = self.bounds();
        if !(w > 0.5 && d > 0.5 && w.is_finite() && d.is_finite()) {
            return Err(Error::Room("room sides must exceed 0.5 m"));
        }
        if let Footprint::LShape {
            cut_width,
            cut_depth,
            ..
        } = *self
        {
            if !(cut_width > 0.0 && cut_width < w && cut_depth > 0.0 && cut_depth < d) {
                return Err(Error::Room("L-shape cut must lie strictly inside the room"));
            }
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        let (w, d) = self.bounds();
        w * d - self.cut().map_or(0.0, |c| c.area())
    }

    /// Whether an XZ rectangle lies inside the room.
    fn contains_rect(&self, r: &Aabb2) -> bool {
        let (w, d) = self.bounds();
        let eps = 1e-9;
        if r.lo[0] < -eps || r.lo[1] < -eps || r.hi[0] > w + eps || r.hi[1] > d + eps {
            return false;
        }
        self.cut().is_none_or(|c| r.intersection_area(&c) <= 0.0)
    }

    pub fn contains_point(&self, x: f64, z: f64) -> bool {
        let (w, d) = self.bounds();
        if !(0.0..=w).contains(&x) || !(0.0..=d).contains(&z) {
            return false;
        }
        self.cut().is_none_or(|c| !(x > c.lo[0] && z > c.lo[1]))
    }

    fn walls(&self) -> Vec<Wall> {
        let (w, d) = self.bounds();
        let wall = |along_x, fixed, start, end, normal| Wall {
            along_x,
            fixed,
            start,
            end,
            normal,
        };
        match *self {
            Footprint::Rect { .. } => vec![
                wall(true, 0.0, 0.0, w, [0.0, 1.0]),
                wall(true, d, 0.0, w, [0.0, -1.0]),
                wall(false, 0.0, 0.0, d, [1.0, 0.0]),
                wall(false, w, 0.0, d, [-1.0, 0.0]),
            ],
            Footprint::LShape {
                cut_width,
                cut_depth,
                ..
            } => vec![
                wall(true, 0.0, 0.0, w, [0.0, 1.0]),
                wall(false, w, 0.0, d - cut_depth, [-1.0, 0.0]),
                wall(true, d - cut_depth, w - cut_width, w, [0.0, -1.0]),
                wall(false, w - cut_width, d - cut_depth, d, [-1.0, 0.0]),
                wall(true, d, 0.0, w - cut_width, [0.0, -1.0]),
                wall(false, 0.0, 0.0, d, [1.0, 0.0]),
            ],
        }
    }

    /// Normalization frame: bounding-square center on the floor, half-diagonal scale.
    pub fn frame(&self) -> Frame {
        let (w, d) = self.bounds();
        let side = w.max(d);
        Frame {
            center: [w * 0.5, 0.0, d * 0.5],
            scale: side * SQRT_2 * 0.5,
        }
    }

    /// Top-down mask over the frame's normalized square. A cell is set when it
    /// overlaps the room interior, so every interior point lands on a set cell.
    pub fn mask(&self, resolution: usize) -> RoomMask {
        let frame = self.frame();
        let (w, d) = self.bounds();
        let room = Aabb2 {
            lo: [0.0, 0.0],
            hi: [w, d],
        };
        let cut = self.cut();
        let cell = 2.0 / resolution as f64;
        let mut cells = vec![0u8; resolution * resolution];
        for row in 0..resolution {
            let z0 = (-1.0 + row as f64 * cell) * frame.scale + frame.center[2];
            let z1 = z0 + cell * frame.scale;
            for col in 0..resolution {
                let x0 = (-1.0 + col as f64 * cell) * frame.scale + frame.center[0];
                let x1 = x0 + cell * frame.scale;
                let px = Aabb2 {
                    lo: [x0, z0],
                    hi: [x1, z1],
                };
                let area =
                    px.intersection_area(&room) - cut.map_or(0.0, |c| px.intersection_area(&c));
                cells[row * resolution + col] = (area > 1e-12) as u8;
            }
        }
        RoomMask {
            height: resolution,
            width: resolution,
            cells,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Aabb2 {
    lo: [f64; 2],
    hi: [f64; 2],
}

impl Aabb2 {
    fn of(obj: &ObjectRecord) -> Self {
        let a = world_aabb(obj);
        Aabb2 {
            lo: [a.lo(0), a.lo(2)],
            hi: [a.hi(0), a.hi(2)],
        }
    }

    fn area(&self) -> f64 {
        (self.hi[0] - self.lo[0]) * (self.hi[1] - self.lo[1])
    }

    fn intersection_area(&self, o: &Aabb2) -> f64 {
        let w = (self.hi[0].min(o.hi[0]) - self.lo[0].max(o.lo[0])).max(0.0);
        let h = (self.hi[1].min(o.hi[1]) - self.lo[1].max(o.lo[1])).max(0.0);
        w * h
    }

    /// Overlap test after growing `self` by `margin` on every side.
    fn overlaps(&self, o: &Aabb2, margin: f64) -> bool {
        self.lo[0] - margin < o.hi[0]
            && o.lo[0] < self.hi[0] + margin
            && self.lo[1] - margin < o.hi[1]
            && o.lo[1] < self.hi[1] + margin
    }
}

/// What to generate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoomSpec {
    pub footprint: Footprint,
    pub room_type: RoomType,
    pub target_primary: usize,
    pub target_secondary: usize,
}

impl RoomSpec {
    pub fn validate(&self) -> Result<()> {
        self.footprint.validate()?;
        if self.target_primary >= FILTER_PRIMARY || self.target_secondary >= FILTER_SECONDARY {
            return Err(Error::Room("target counts must stay below 20 / 100"));
        }
        Ok(())
    }

    /// Random room of the given type with targets inside `caps`.
    pub fn sample<R: Rng>(room_type: RoomType, caps: Caps, rng: &mut R) -> RoomSpec {
        let side = |rng: &mut R| libm::round(rng.random_range(3.2..6.0) * 10.0) / 10.0;
        let width = side(rng);
        let depth = side(rng);
        let footprint = if rng.random_bool(0.3) {
            Footprint::LShape {
                width,
                depth,
                cut_width: libm::round(width * rng.random_range(0.3..0.45) * 10.0) / 10.0,
                cut_depth: libm::round(depth * rng.random_range(0.3..0.45) * 10.0) / 10.0,
            }
        } else {
            Footprint::Rect { width, depth }
        };
        let max_p = caps.primary.min(FILTER_PRIMARY - 1).min(9);
        let max_s = caps.secondary.min(FILTER_SECONDARY - 1);
        let target_primary = if max_p >= 4 {
            rng.random_range(4..=max_p)
        } else {
            max_p
        };
        let target_secondary = if max_s >= 2 {
            rng.random_range(max_s / 2..=max_s)
        } else {
            max_s
        };
        RoomSpec {
            footprint,
            room_type,
            target_primary,
            target_secondary,
        }
    }
}

/// A generated scene with its creation log.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedScene {
    pub scene: Scene,
    /// Objects in creation order with the tier the generator assigned them.
    pub created: Vec<(ObjectRecord, Tier)>,
    /// Relations planted during placement (a subset of the emitted graph).
    pub planted: Vec<Edge>,
    /// Fewer objects than requested could be placed.
    pub reduced: bool,
}

struct ClassPrior {
    name: &'static str,
    lo: [f64; 3],
    hi: [f64; 3],
}

const PRIORS: [ClassPrior; 22] = [
    ClassPrior {
        name: "bed",
        lo: [0.7, 0.25, 1.0],
        hi: [1.0, 0.3, 1.1],
    },
    ClassPrior {
        name: "nightstand",
        lo: [0.2, 0.25, 0.2],
        hi: [0.28, 0.3, 0.25],
    },
    ClassPrior {
        name: "wardrobe",
        lo: [0.5, 1.0, 0.28],
        hi: [1.0, 1.1, 0.32],
    },
    ClassPrior {
        name: "dresser",
        lo: [0.4, 0.4, 0.22],
        hi: [0.7, 0.45, 0.27],
    },
    ClassPrior {
        name: "desk",
        lo: [0.5, 0.37, 0.3],
        hi: [0.8, 0.38, 0.4],
    },
    ClassPrior {
        name: "chair",
        lo: [0.22, 0.42, 0.22],
        hi: [0.26, 0.46, 0.26],
    },
    ClassPrior {
        name: "bookshelf",
        lo: [0.4, 0.8, 0.15],
        hi: [0.6, 1.0, 0.2],
    },
    ClassPrior {
        name: "sofa",
        lo: [0.8, 0.4, 0.4],
        hi: [1.2, 0.45, 0.5],
    },
    ClassPrior {
        name: "coffee_table",
        lo: [0.4, 0.2, 0.25],
        hi: [0.6, 0.25, 0.35],
    },
    ClassPrior {
        name: "tv_stand",
        lo: [0.6, 0.25, 0.2],
        hi: [0.9, 0.3, 0.25],
    },
    ClassPrior {
        name: "dining_table",
        lo: [0.5, 0.37, 0.4],
        hi: [0.9, 0.38, 0.5],
    },
    ClassPrior {
        name: "armchair",
        lo: [0.35, 0.4, 0.35],
        hi: [0.4, 0.45, 0.4],
    },
    ClassPrior {
        name: "table_lamp",
        lo: [0.1, 0.2, 0.1],
        hi: [0.15, 0.25, 0.15],
    },
    ClassPrior {
        name: "book",
        lo: [0.08, 0.02, 0.1],
        hi: [0.12, 0.04, 0.14],
    },
    ClassPrior {
        name: "pillow",
        lo: [0.2, 0.06, 0.15],
        hi: [0.3, 0.08, 0.2],
    },
    ClassPrior {
        name: "plant",
        lo: [0.15, 0.3, 0.15],
        hi: [0.25, 0.6, 0.25],
    },
    ClassPrior {
        name: "vase",
        lo: [0.06, 0.12, 0.06],
        hi: [0.1, 0.2, 0.1],
    },
    ClassPrior {
        name: "laptop",
        lo: [0.15, 0.01, 0.11],
        hi: [0.18, 0.02, 0.13],
    },
    ClassPrior {
        name: "monitor",
        lo: [0.25, 0.2, 0.08],
        hi: [0.3, 0.25, 0.1],
    },
    ClassPrior {
        name: "cup",
        lo: [0.04, 0.05, 0.04],
        hi: [0.05, 0.06, 0.05],
    },
    ClassPrior {
        name: "box",
        lo: [0.15, 0.1, 0.15],
        hi: [0.3, 0.2, 0.3],
    },
    ClassPrior {
        name: "floor_lamp",
        lo: [0.15, 0.7, 0.15],
        hi: [0.2, 0.8, 0.2],
    },
];

/// Secondary classes each primary class can carry on its top face.
const SUPPORT: [(&str, &[(&str, f64)]); 11] = [
    ("bed", &[("pillow", 3.0), ("book", 1.0)]),
    (
        "nightstand",
        &[
            ("table_lamp", 3.0),
            ("book", 2.0),
            ("cup", 1.0),
            ("vase", 1.0),
        ],
    ),
    ("wardrobe", &[("box", 2.0)]),
    (
        "dresser",
        &[
            ("vase", 2.0),
            ("table_lamp", 1.0),
            ("book", 1.0),
            ("box", 1.0),
        ],
    ),
    (
        "desk",
        &[
            ("monitor", 2.0),
            ("laptop", 2.0),
            ("table_lamp", 1.0),
            ("cup", 2.0),
            ("book", 2.0),
        ],
    ),
    ("bookshelf", &[("book", 2.0), ("vase", 1.0)]),
    ("sofa", &[("pillow", 3.0)]),
    (
        "coffee_table",
        &[("cup", 2.0), ("book", 2.0), ("vase", 1.0), ("laptop", 1.0)],
    ),
    ("tv_stand", &[("vase", 1.0), ("box", 1.0), ("book", 1.0)]),
    (
        "dining_table",
        &[("cup", 3.0), ("vase", 1.0), ("laptop", 1.0), ("book", 1.0)],
    ),
    ("armchair", &[("pillow", 1.0)]),
];

const FLOOR_ITEMS: [(&str, f64); 3] = [("plant", 1.0), ("floor_lamp", 0.7), ("box", 0.5)];

fn room_affinity(room: RoomType, class: &str) -> f64 {
    match (room, class) {
        (RoomType::Bedroom, "pillow" | "table_lamp") => 2.0,
        (RoomType::Office, "monitor" | "laptop" | "book") => 2.0,
        (RoomType::Living, "vase" | "plant" | "cup") => 1.5,
        _ => 1.0,
    }
}

/// How a primary object is positioned.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Anchor {
    Wall,
    /// Against the wall opposite the most recent object of the named class.
    Opposite(&'static str),
    /// Beside the most recent object of the named class, along its wall.
    Beside(&'static str),
    /// In front of the most recent object of the named class, facing the same way.
    InFront(&'static str),
    /// In front of the named class, turned to face it.
    Facing(&'static str),
    /// Next to the named class, turned to face it.
    FlankFacing(&'static str),
    Free,
}

fn recipe<R: Rng>(room: RoomType, rng: &mut R) -> Vec<(&'static str, Anchor)> {
    use Anchor::*;
    let mut r: Vec<(&'static str, Anchor)> = Vec::new();
    fn maybe<R: Rng>(
        rng: &mut R,
        r: &mut Vec<(&'static str, Anchor)>,
        p: f64,
        item: (&'static str, Anchor),
    ) {
        if rng.random_bool(p) {
            r.push(item);
        }
    }
    match room {
        RoomType::Bedroom => {
            r.push(("bed", Wall));
            maybe(rng, &mut r, 0.85, ("nightstand", Beside("bed")));
            maybe(rng, &mut r, 0.85, ("nightstand", Beside("bed")));
            maybe(rng, &mut r, 0.7, ("wardrobe", Wall));
            maybe(rng, &mut r, 0.5, ("dresser", Wall));
            if rng.random_bool(0.35) {
                r.push(("desk", Wall));
                r.push(("chair", Facing("desk")));
            }
            maybe(rng, &mut r, 0.3, ("bookshelf", Wall));
            maybe(rng, &mut r, 0.25, ("armchair", Free));
        }
        RoomType::Living => {
            r.push(("sofa", Wall));
            maybe(rng, &mut r, 0.9, ("coffee_table", InFront("sofa")));
            maybe(rng, &mut r, 0.8, ("tv_stand", Opposite("sofa")));
            maybe(rng, &mut r, 0.6, ("armchair", FlankFacing("coffee_table")));
            maybe(rng, &mut r, 0.4, ("armchair", FlankFacing("coffee_table")));
            maybe(rng, &mut r, 0.4, ("bookshelf", Wall));
            if rng.random_bool(0.35) {
                r.push(("dining_table", Free));
                r.push(("chair", Facing("dining_table")));
                r.push(("chair", Facing("dining_table")));
            }
        }
        RoomType::Office => {
            r.push(("desk", Wall));
            r.push(("chair", Facing("desk")));
            maybe(rng, &mut r, 0.9, ("bookshelf", Wall));
            if rng.random_bool(0.5) {
                r.push(("desk", Wall));
                r.push(("chair", Facing("desk")));
            }
            maybe(rng, &mut r, 0.5, ("bookshelf", Wall));
            maybe(rng, &mut r, 0.3, ("armchair", Free));
            if rng.random_bool(0.25) {
                r.push(("sofa", Wall));
                r.push(("coffee_table", InFront("sofa")));
            }
            maybe(rng, &mut r, 0.3, ("dresser", Wall));
        }
    }
    let fillers: &[(&'static str, Anchor)] = match room {
        RoomType::Bedroom => &[("dresser", Wall), ("bookshelf", Wall), ("armchair", Free)],
        RoomType::Living => &[("bookshelf", Wall), ("armchair", Free), ("dresser", Wall)],
        RoomType::Office => &[("bookshelf", Wall), ("dresser", Wall), ("armchair", Free)],
    };
    for i in 0..8 {
        r.push(fillers[i % fillers.len()]);
    }
    r
}

/// Textual prompt: room type and object counts.
pub fn describe(room: RoomType, primary: usize, secondary: usize) -> String {
    format!(
        "a {} with {} furniture pieces and {} small objects",
        room.word(),
        primary,
        secondary
    )
}

/// Every word the prompt template or a class list can produce.
pub fn prompt_vocabulary(taxonomy: &CategoryTaxonomy) -> Vec<String> {
    let mut words: Vec<String> = [
        "a",
        "with",
        "furniture",
        "pieces",
        "and",
        "small",
        "objects",
    ]
    .iter()
    .map(|s| String::from(*s))
    .collect();
    words.extend(RoomType::ALL.iter().map(|r| String::from(r.word())));
    words.extend((0..FILTER_SECONDARY).map(|n| format!("{n}")));
    words.extend(taxonomy.classes().iter().cloned());
    words
}

struct Builder<'a> {
    spec: &'a RoomSpec,
    taxonomy: &'a CategoryTaxonomy,
    rng: ChaCha8Rng,
    created: Vec<(ObjectRecord, Tier)>,
    primary: Vec<ObjectRecord>,
    primary_names: Vec<&'static str>,
    secondary: Vec<ObjectRecord>,
    /// Index of the supporting primary for each secondary, `None` for floor.
    support_of: Vec<Option<usize>>,
    planted: Vec<(usize, usize)>,
}

fn prior(name: &str) -> Option<&'static ClassPrior> {
    PRIORS.iter().find(|p| p.name == name)
}

fn theta_for_normal(n: [f64; 2]) -> f64 {
    // facing(theta) = (sin theta, cos theta)
    canonical_theta(libm::atan2(n[0], n[1]))
}

impl Builder<'_> {
    fn sample_size(&mut self, name: &str) -> Option<[f64; 3]> {
        let p = prior(name)?;
        let mut s = [0.0; 3];
        for k in 0..3 {
            s[k] = quantize(self.rng.random_range(p.lo[k]..=p.hi[k]));
        }
        Some(s)
    }

    fn last_of(&self, name: &str) -> Option<usize> {
        self.primary_names.iter().rposition(|n| *n == name)
    }

    fn floor_clear(&self, candidate: &ObjectRecord, margin: f64) -> bool {
        let r = Aabb2::of(candidate);
        if !self.spec.footprint.contains_rect(&r) {
            return false;
        }
        let floor_secondary = self
            .secondary
            .iter()
            .zip(&self.support_of)
            .filter(|(_, s)| s.is_none())
            .map(|(o, _)| o);
        !self
            .primary
            .iter()
            .chain(floor_secondary)
            .any(|o| r.overlaps(&Aabb2::of(o), margin))
    }

    fn make(
        &self,
        class_name: &str,
        size: [f64; 3],
        xz: [f64; 2],
        y: f64,
        theta: f64,
    ) -> ObjectRecord {
        ObjectRecord {
            class: self.taxonomy.index_of(class_name).unwrap_or(usize::MAX),
            translation: [quantize(xz[0]), quantize(y), quantize(xz[1])],
            half_size: size,
            theta: canonical_theta(theta),
        }
    }

    fn wall_position(&mut self, wall: &Wall, size: [f64; 3]) -> Option<([f64; 2], f64)> {
        let (hx, hz) = (size[0], size[2]);
        let lo = wall.start + hx + 0.02;
        let hi = wall.end - hx - 0.02;
        if lo >= hi {
            return None;
        }
        let u = self.rng.random_range(lo..hi);
        let off = hz + self.rng.random_range(0.01..0.05);
        let xz = if wall.along_x {
            [u, wall.fixed + wall.normal[1] * off]
        } else {
            [wall.fixed + wall.normal[0] * off, u]
        };
        Some((xz, theta_for_normal(wall.normal)))
    }

    fn try_primary(
        &mut self,
        name: &'static str,
        anchor: Anchor,
    ) -> Option<(usize, Option<usize>)> {
        self.taxonomy.index_of(name).ok()?;
        let walls = self.spec.footprint.walls();
        for _ in 0..MAX_ATTEMPTS {
            let size = self.sample_size(name)?;
            let (hx, hy, hz) = (size[0], size[1], size[2]);
            let placed: Option<([f64; 2], f64, Option<usize>)> = match anchor {
                Anchor::Wall => {
                    let w = walls[self.rng.random_range(0..walls.len())];
                    self.wall_position(&w, size).map(|(p, t)| (p, t, None))
                }
                Anchor::Opposite(parent) => {
                    let parent_idx = self.last_of(parent);
                    let wanted = parent_idx.map(|i| {
                        let f = crate::geometry::facing(self.primary[i].theta);
                        [-f[0], -f[1]]
                    });
                    let options: Vec<Wall> = walls
                        .iter()
                        .copied()
                        .filter(|w| {
                            wanted.is_none_or(|n| {
                                (w.normal[0] - n[0]).abs() < 1e-9
                                    && (w.normal[1] - n[1]).abs() < 1e-9
                            })
                        })
                        .collect();
                    let pool = if options.is_empty() {
                        walls.clone()
                    } else {
                        options
                    };
                    let w = pool[self.rng.random_range(0..pool.len())];
                    self.wall_position(&w, size)
                        .map(|(p, t)| (p, t, parent_idx))
                }
                Anchor::Beside(parent) => self.last_of(parent).map(|pi| {
                    let p = self.primary[pi];
                    let (ax, az) = crate::geometry::local_axes(p.theta);
                    let side = if self.rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    let along = p.half_size[0] + hx + self.rng.random_range(0.03..0.1);
                    // Keep the back flush with the parent's back (the wall).
                    let back = -p.half_size[2] + hz;
                    let c = [
                        p.translation[0] + side * along * ax[0] + back * az[0],
                        p.translation[2] + side * along * ax[1] + back * az[1],
                    ];
                    (c, p.theta, Some(pi))
                }),
                Anchor::InFront(parent) => self.last_of(parent).map(|pi| {
                    let p = self.primary[pi];
                    let (ax, az) = crate::geometry::local_axes(p.theta);
                    let lateral = self.rng.random_range(-0.1..0.1);
                    let ahead = p.half_size[2] + hz + self.rng.random_range(0.3..0.5);
                    let c = [
                        p.translation[0] + lateral * ax[0] + ahead * az[0],
                        p.translation[2] + lateral * ax[1] + ahead * az[1],
                    ];
                    (c, p.theta, Some(pi))
                }),
                Anchor::Facing(parent) => self.last_of(parent).map(|pi| {
                    let p = self.primary[pi];
                    let (ax, az) = crate::geometry::local_axes(p.theta);
                    let (u_max, side) = if name == "chair" && parent == "dining_table" {
                        // Any of the four sides of a free-standing table.
                        let k = self.rng.random_range(0..4);
                        (p.half_size[0].min(p.half_size[2]) * 0.5, k)
                    } else {
                        (p.half_size[0] * 0.6, 0)
                    };
                    let lateral = self.rng.random_range(-u_max..=u_max);
                    let gap = self.rng.random_range(0.1..0.25);
                    let (dir, ext, lat_axis) = match side {
                        0 => (az, p.half_size[2], ax),
                        1 => ([-az[0], -az[1]], p.half_size[2], ax),
                        2 => (ax, p.half_size[0], az),
                        _ => ([-ax[0], -ax[1]], p.half_size[0], az),
                    };
                    let dist = ext + hz + gap;
                    let c = [
                        p.translation[0] + dist * dir[0] + lateral * lat_axis[0],
                        p.translation[2] + dist * dir[1] + lateral * lat_axis[1],
                    ];
                    (c, theta_for_normal([-dir[0], -dir[1]]), Some(pi))
                }),
                Anchor::FlankFacing(parent) => self.last_of(parent).map(|pi| {
                    let p = self.primary[pi];
                    let (ax, _) = crate::geometry::local_axes(p.theta);
                    let side = if self.rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    let dir = [side * ax[0], side * ax[1]];
                    let dist = p.half_size[0] + hz + self.rng.random_range(0.2..0.4);
                    let c = [
                        p.translation[0] + dist * dir[0],
                        p.translation[2] + dist * dir[1],
                    ];
                    (c, theta_for_normal([-dir[0], -dir[1]]), Some(pi))
                }),
                Anchor::Free => {
                    let (w, d) = self.spec.footprint.bounds();
                    let ext = hx.max(hz) + 0.3;
                    if 2.0 * ext >= w || 2.0 * ext >= d {
                        None
                    } else {
                        let c = [
                            self.rng.random_range(ext..w - ext),
                            self.rng.random_range(ext..d - ext),
                        ];
                        let theta = self.rng.random_range(0..4) as f64 * FRAC_PI_2 - PI;
                        Some((c, theta, None))
                    }
                }
            };
            let Some((xz, theta, parent)) = placed else {
                if matches!(anchor, Anchor::Wall | Anchor::Opposite(_) | Anchor::Free) {
                    continue;
                }
                return None;
            };
            let obj = self.make(name, size, xz, hy, theta);
            if self.floor_clear(&obj, 0.02) {
                self.primary.push(obj);
                self.primary_names.push(name);
                self.created.push((obj, Tier::Primary));
                return Some((self.primary.len() - 1, parent));
            }
        }
        None
    }

    fn surface_clear(&self, candidate: &ObjectRecord, parent: usize) -> bool {
        let r = Aabb2::of(candidate);
        !self
            .secondary
            .iter()
            .zip(&self.support_of)
            .filter(|(_, s)| **s == Some(parent))
            .any(|(o, _)| r.overlaps(&Aabb2::of(o), 0.01))
    }

    fn try_secondary(&mut self) -> bool {
        // Weighted menu of (parent or floor, class).
        let mut menu: Vec<(Option<usize>, &'static str, f64)> = Vec::new();
        for (pi, pname) in self.primary_names.iter().enumerate() {
            if let Some((_, items)) = SUPPORT.iter().find(|(n, _)| n == pname) {
                for &(item, w) in items.iter() {
                    menu.push((Some(pi), item, w * room_affinity(self.spec.room_type, item)));
                }
            }
        }
        for &(item, w) in FLOOR_ITEMS.iter() {
            menu.push((None, item, w * room_affinity(self.spec.room_type, item)));
        }
        menu.retain(|(_, item, _)| self.taxonomy.index_of(item).is_ok());
        let total: f64 = menu.iter().map(|m| m.2).sum();
        if total <= 0.0 {
            return false;
        }
        let mut pick = self.rng.random_range(0.0..total);
        let mut choice = menu[menu.len() - 1];
        for m in &menu {
            if pick < m.2 {
                choice = *m;
                break;
            }
            pick -= m.2;
        }
        let (support, name, _) = choice;
        for _ in 0..MAX_ATTEMPTS / 4 {
            let Some(size) = self.sample_size(name) else {
                return false;
            };
            let quarter = self.rng.random_range(0..2) as f64 * PI;
            match support {
                Some(pi) => {
                    let parent = self.primary[pi];
                    let theta = parent.theta + quarter;
                    let top = world_aabb(&parent);
                    let probe = ObjectRecord::new(0, [0.0; 3], size, theta);
                    let ext = world_aabb(&probe).half;
                    let span_x = top.half[0] - ext[0] - 0.01;
                    let span_z = top.half[2] - ext[2] - 0.01;
                    if span_x <= 0.0 || span_z <= 0.0 {
                        return false;
                    }
                    let xz = [
                        top.center[0] + self.rng.random_range(-span_x..=span_x),
                        top.center[2] + self.rng.random_range(-span_z..=span_z),
                    ];
                    let mut obj = self.make(name, size, xz, parent.top() + size[1], theta);
                    if obj.bottom() < parent.top() {
                        obj.translation[1] += QUANTUM;
                    }
                    if Aabb2::of(&obj).lo[0] >= Aabb2::of(&parent).lo[0]
                        && Aabb2::of(&obj).hi[0] <= Aabb2::of(&parent).hi[0]
                        && Aabb2::of(&obj).lo[1] >= Aabb2::of(&parent).lo[1]
                        && Aabb2::of(&obj).hi[1] <= Aabb2::of(&parent).hi[1]
                        && self.surface_clear(&obj, pi)
                    {
                        self.push_secondary(obj, Some(pi));
                        return true;
                    }
                }
                None => {
                    let theta = self.rng.random_range(0..4) as f64 * FRAC_PI_2 - PI;
                    let xz = if !self.primary.is_empty() && self.rng.random_bool(0.7) {
                        let p = self.primary[self.rng.random_range(0..self.primary.len())];
                        let a = world_aabb(&p);
                        let r = size[0].max(size[2]);
                        let gap = self.rng.random_range(0.05..0.4);
                        match self.rng.random_range(0..4) {
                            0 => [
                                a.hi(0) + r + gap,
                                a.center[2] + self.rng.random_range(-a.half[2]..=a.half[2]),
                            ],
                            1 => [
                                a.lo(0) - r - gap,
                                a.center[2] + self.rng.random_range(-a.half[2]..=a.half[2]),
                            ],
                            2 => [
                                a.center[0] + self.rng.random_range(-a.half[0]..=a.half[0]),
                                a.hi(2) + r + gap,
                            ],
                            _ => [
                                a.center[0] + self.rng.random_range(-a.half[0]..=a.half[0]),
                                a.lo(2) - r - gap,
                            ],
                        }
                    } else {
                        let (w, d) = self.spec.footprint.bounds();
                        [self.rng.random_range(0.0..w), self.rng.random_range(0.0..d)]
                    };
                    let obj = self.make(name, size, xz, size[1], theta);
                    if self.floor_clear(&obj, 0.02) {
                        self.push_secondary(obj, None);
                        return true;
                    }
                }
            }
        }
        false
    }

    fn push_secondary(&mut self, obj: ObjectRecord, support: Option<usize>) {
        self.secondary.push(obj);
        self.support_of.push(support);
        self.created.push((obj, Tier::Secondary));
    }
}

/// Deterministic scene for `(spec, seed)`, in world meters.
pub fn generate_scene(
    spec: &RoomSpec,
    seed: u64,
    taxonomy: &CategoryTaxonomy,
) -> Result<GeneratedScene> {
    spec.validate()?;
    let mut b = Builder {
        spec,
        taxonomy,
        rng: ChaCha8Rng::seed_from_u64(seed),
        created: Vec::new(),
        primary: Vec::new(),
        primary_names: Vec::new(),
        secondary: Vec::new(),
        support_of: Vec::new(),
        planted: Vec::new(),
    };
    let plan = recipe(spec.room_type, &mut b.rng);
    let mut reduced = false;
    let mut dropped: Vec<&'static str> = Vec::new();
    for (name, anchor) in plan {
        if b.primary.len() >= spec.target_primary {
            break;
        }
        let parent_missing = match anchor {
            Anchor::Beside(p) | Anchor::InFront(p) | Anchor::Facing(p) | Anchor::FlankFacing(p) => {
                b.last_of(p).is_none()
            }
            _ => false,
        };
        let anchor = if parent_missing { Anchor::Free } else { anchor };
        match b.try_primary(name, anchor) {
            Some((child, Some(parent))) => b.planted.push((child, parent)),
            Some(_) => {}
            None => dropped.push(name),
        }
    }
    reduced |= b.primary.len() < spec.target_primary;

    let mut misses = 0;
    while b.secondary.len() < spec.target_secondary && misses < spec.target_secondary * 4 + 8 {
        if !b.try_secondary() {
            misses += 1;
        }
    }
    reduced |= b.secondary.len() < spec.target_secondary;

    let thresholds = RelationThresholds::default();
    let full = extract_graph(&b.primary, &thresholds);
    let mut edges: Vec<Edge> = Vec::new();
    for &(child, parent) in &b.planted {
        for (src, dst) in [(child, parent), (parent, child)] {
            for rel in [
                Relation::LeftOf,
                Relation::RightOf,
                Relation::InFrontOf,
                Relation::Behind,
                Relation::CloseTo,
                Relation::Facing,
            ] {
                if thresholds.holds(rel, &b.primary[src], &b.primary[dst]) {
                    edges.push(Edge {
                        src,
                        dst,
                        relation: rel.id(),
                    });
                }
            }
        }
    }
    let planted = edges.clone();
    // A couple of extra true relations per object so every vertex is described.
    for i in 0..b.primary.len() {
        let mut candidates: Vec<Edge> = full
            .edges
            .iter()
            .copied()
            .filter(|e| e.src == i && !edges.contains(e))
            .collect();
        for _ in 0..2 {
            if candidates.is_empty() {
                break;
            }
            let k = b.rng.random_range(0..candidates.len());
            edges.push(candidates.swap_remove(k));
        }
    }
    edges.sort();
    edges.dedup();

    let n_p = b.primary.len();
    let n_s = b.secondary.len();
    let graph = SceneGraph::new(&b.primary, edges)?;
    let scene = Scene {
        primary: b.primary,
        secondary: b.secondary,
        graph,
        room_mask: spec.footprint.mask(MASK_RESOLUTION),
        text: describe(spec.room_type, n_p, n_s),
        source: format!("synthetic/{}", spec.room_type.word()),
        frame: spec.footprint.frame(),
    };
    Ok(GeneratedScene {
        scene,
        created: b.created,
        planted,
        reduced,
    })
}

/// Scene `index` of a corpus: the spec is drawn from `seed` and `index`, then
/// generated with its own derived seed.
pub fn generate_indexed(
    index: u64,
    seed: u64,
    room_types: &[RoomType],
    caps: Caps,
    taxonomy: &CategoryTaxonomy,
) -> Result<GeneratedScene> {
    let mixed = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    let mut rng = ChaCha8Rng::seed_from_u64(mixed);
    let room = room_types[rng.random_range(0..room_types.len())];
    let spec = RoomSpec::sample(room, caps, &mut rng);
    generate_scene(&spec, rng.random(), taxonomy)
}

/// Largest support gap of any secondary object: distance from its bottom face
/// to the floor or to the top of a primary whose footprint contains it.
pub fn worst_support_gap(scene: &Scene) -> f64 {
    scene
        .secondary
        .iter()
        .map(|s| {
            let a = world_aabb(s);
            let mut best = s.bottom().abs();
            for p in &scene.primary {
                if a.within_xz(&world_aabb(p), 1e-6) {
                    best = best.min((s.bottom() - p.top()).abs());
                }
            }
            best
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::box_iou;
    use crate::scene::split_scene;

    fn spec(room_type: RoomType, p: usize, s: usize) -> RoomSpec {
        RoomSpec {
            footprint: Footprint::Rect {
                width: 4.5,
                depth: 4.0,
            },
            room_type,
            target_primary: p,
            target_secondary: s,
        }
    }

    #[test]
    fn zero_primary_target_gives_empty_graph() {
        let tax = CategoryTaxonomy::desk();
        let g = generate_scene(&spec(RoomType::Bedroom, 0, 5), 3, &tax).unwrap();
        assert!(g.scene.primary.is_empty());
        assert!(g.scene.graph.edges.is_empty());
    }

    #[test]
    fn same_seed_same_scene() {
        let tax = CategoryTaxonomy::desk();
        let s = spec(RoomType::Living, 7, 20);
        assert_eq!(
            generate_scene(&s, 7, &tax).unwrap(),
            generate_scene(&s, 7, &tax).unwrap()
        );
        assert_ne!(
            generate_scene(&s, 7, &tax).unwrap().scene,
            generate_scene(&s, 8, &tax).unwrap().scene
        );
    }

    #[test]
    fn generated_scenes_satisfy_placement_invariants() {
        let tax = CategoryTaxonomy::desk();
        let th = RelationThresholds::default();
        for i in 0..60u64 {
            let g = generate_indexed(i, 11, &RoomType::ALL, Caps::default(), &tax).unwrap();
            let scene = &g.scene;
            let all: Vec<_> = scene.objects().copied().collect();
            for a in 0..all.len() {
                for b in a + 1..all.len() {
                    let iou = box_iou(&all[a], &all[b]);
                    if a < scene.primary.len() && b < scene.primary.len() {
                        assert_eq!(iou, 0.0, "scene {i} pair {a},{b}");
                    }
                    assert!(iou <= 1e-12, "scene {i} pair {a},{b}: {iou}");
                }
            }
            assert!(worst_support_gap(scene) < 1e-3, "scene {i}");
            for e in &scene.graph.edges {
                let rel = Relation::from_id(e.relation).unwrap();
                assert!(th.holds(rel, &scene.primary[e.src], &scene.primary[e.dst]));
            }
            let full = extract_graph(&scene.primary, &th);
            assert!(g.planted.iter().all(|e| full.edges.contains(e)));
            assert!(scene.graph.edges.iter().all(|e| full.edges.contains(e)));
            let objs: Vec<_> = g.created.iter().map(|(o, _)| *o).collect();
            let (p, s) = split_scene(&objs, &tax).unwrap();
            let labelled_p: Vec<_> = g
                .created
                .iter()
                .filter(|(_, t)| *t == Tier::Primary)
                .map(|(o, _)| *o)
                .collect();
            assert_eq!(p, labelled_p);
            assert_eq!(p, scene.primary);
            assert_eq!(s, scene.secondary);
            let frame = scene.frame;
            for o in scene.objects() {
                let n = frame.to_normalized(o);
                assert!(scene.room_mask.contains(n.translation[0], n.translation[2]));
            }
        }
    }

    #[test]
    fn counts_respect_caps() {
        let tax = CategoryTaxonomy::desk();
        let caps = Caps::new(12, 32);
        let mut total_s = 0;
        for i in 0..40u64 {
            let g = generate_indexed(i, 5, &RoomType::ALL, caps, &tax).unwrap();
            assert!(g.scene.primary.len() <= 12);
            assert!(g.scene.secondary.len() <= 32);
            total_s += g.scene.secondary.len();
        }
        assert!(total_s > 40 * 10, "corpus should be dense, got {total_s}");
    }

    #[test]
    fn l_shaped_mask_excludes_cut() {
        let fp = Footprint::LShape {
            width: 5.0,
            depth: 4.0,
            cut_width: 2.0,
            cut_depth: 1.5,
        };
        let mask = fp.mask(64);
        let f = fp.frame();
        let norm = |x: f64, z: f64| ((x - f.center[0]) / f.scale, (z - f.center[2]) / f.scale);
        let (x, z) = norm(4.5, 3.5);
        assert!(!mask.contains(x, z));
        let (x, z) = norm(1.0, 3.5);
        assert!(mask.contains(x, z));
        assert!(!fp.contains_point(4.5, 3.5));
    }

    #[test]
    fn text_mentions_counts() {
        assert_eq!(
            describe(RoomType::Office, 3, 12),
            "a office with 3 furniture pieces and 12 small objects"
        );
    }
}
