//! Object records, fixed-slot layout tensors, scene graphs and scenes.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::angle::{decode_angle, encode_angle, wrap_angle};
use crate::error::{Error, Result};
use crate::taxonomy::{CategoryTaxonomy, Tier};

/// Number of spatial relation types.
pub const NUM_RELATIONS: usize = 7;
/// Geometry fields after the class block: translation, half-size, (cos, sin).
pub const GEOMETRY_DIM: usize = 8;
/// Decoded half-sizes are clamped to at least this value.
pub const MIN_HALF_SIZE: f64 = 1e-4;

/// Corpus-level filter: scenes keep strictly fewer than this many objects per tier.
pub const FILTER_PRIMARY: usize = 20;
pub const FILTER_SECONDARY: usize = 100;

/// One object: class index, box center, half-size and yaw about the vertical axis.
///
/// The vertical axis is `y`; `t[1] - s[1]` is the bottom face.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectRecord {
    pub class: usize,
    pub translation: [f64; 3],
    pub half_size: [f64; 3],
    pub theta: f64,
}

impl ObjectRecord {
    pub fn new(class: usize, translation: [f64; 3], half_size: [f64; 3], theta: f64) -> Self {
        Self {
            class,
            translation,
            half_size,
            theta,
        }
    }

    pub fn orientation(&self) -> [f64; 2] {
        encode_angle(self.theta)
    }

    pub fn bottom(&self) -> f64 {
        self.translation[1] - self.half_size[1]
    }

    pub fn top(&self) -> f64 {
        self.translation[1] + self.half_size[1]
    }
}

/// Per-tier slot capacities `(N_L, N_S)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Caps {
    pub primary: usize,
    pub secondary: usize,
}

impl Caps {
    pub const fn new(primary: usize, secondary: usize) -> Self {
        Self { primary, secondary }
    }

    pub fn for_tier(&self, tier: Tier) -> usize {
        match tier {
            Tier::Primary => self.primary,
            Tier::Secondary => self.secondary,
        }
    }

    /// Keep iff both tiers fit their slot caps and the strict `< 20` / `< 100` filter.
    pub fn admits(&self, primary: usize, secondary: usize) -> bool {
        primary < FILTER_PRIMARY
            && secondary < FILTER_SECONDARY
            && primary <= self.primary
            && secondary <= self.secondary
    }
}

impl Default for Caps {
    fn default() -> Self {
        Self::new(12, 32)
    }
}

/// Partitions objects into primary and secondary lists, preserving input order.
pub fn split_scene(
    objects: &[ObjectRecord],
    taxonomy: &CategoryTaxonomy,
) -> Result<(Vec<ObjectRecord>, Vec<ObjectRecord>)> {
    let mut primary = Vec::new();
    let mut secondary = Vec::new();
    for obj in objects {
        match taxonomy.tier_of(obj.class)? {
            Tier::Primary => primary.push(*obj),
            Tier::Secondary => secondary.push(*obj),
        }
    }
    Ok((primary, secondary))
}

/// Row-major `N x D` slot matrix with `D = C + 8`.
///
/// Field offsets per slot: `[0, C)` class one-hot, `C..C+3` translation,
/// `C+3..C+6` half-size, `C+6..C+8` (cos, sin). Empty slots carry the empty
/// class and all-zero geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct LayoutTensor {
    pub tier: Tier,
    num_slots: usize,
    num_classes: usize,
    values: Vec<f64>,
}

impl LayoutTensor {
    pub fn empty(tier: Tier, num_slots: usize, num_classes: usize) -> Self {
        let dim = num_classes + GEOMETRY_DIM;
        let mut values = vec![0.0; num_slots * dim];
        for slot in 0..num_slots {
            values[slot * dim + num_classes - 1] = 1.0;
        }
        Self {
            tier,
            num_slots,
            num_classes,
            values,
        }
    }

    pub fn from_values(
        tier: Tier,
        num_slots: usize,
        num_classes: usize,
        values: Vec<f64>,
    ) -> Result<Self> {
        let expected = num_slots * (num_classes + GEOMETRY_DIM);
        if values.len() != expected {
            return Err(Error::Shape {
                expected,
                got: values.len(),
            });
        }
        Ok(Self {
            tier,
            num_slots,
            num_classes,
            values,
        })
    }

    pub fn num_slots(&self) -> usize {
        self.num_slots
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.num_classes + GEOMETRY_DIM
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn slot(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.values[i * d..(i + 1) * d]
    }

    pub fn slot_mut(&mut self, i: usize) -> &mut [f64] {
        let d = self.dim();
        &mut self.values[i * d..(i + 1) * d]
    }

    /// Class decoded by argmax over the class block; the empty token wins ties.
    pub fn slot_class(&self, i: usize) -> usize {
        let c = self.num_classes;
        let block = &self.slot(i)[..c];
        let empty = c - 1;
        let mut best = empty;
        let mut best_val = block[empty];
        for (k, &v) in block[..empty].iter().enumerate() {
            if v > best_val {
                best = k;
                best_val = v;
            }
        }
        best
    }

    pub fn is_empty_slot(&self, i: usize) -> bool {
        self.slot_class(i) == self.num_classes - 1
    }

    pub fn occupancy(&self) -> usize {
        (0..self.num_slots)
            .filter(|&i| !self.is_empty_slot(i))
            .count()
    }

    /// 1.0 for occupied slots, 0.0 for empty ones.
    pub fn occupancy_mask(&self) -> Vec<f64> {
        (0..self.num_slots)
            .map(|i| if self.is_empty_slot(i) { 0.0 } else { 1.0 })
            .collect()
    }
}

/// Writes objects into the first slots of a fresh tensor; the rest stay empty.
pub fn encode_layout(
    objects: &[ObjectRecord],
    tier: Tier,
    caps: Caps,
    taxonomy: &CategoryTaxonomy,
) -> Result<LayoutTensor> {
    let cap = caps.for_tier(tier);
    if objects.len() > cap {
        return Err(Error::Overflow {
            tier: tier.as_str(),
            cap,
            count: objects.len(),
        });
    }
    let c = taxonomy.num_classes();
    let mut layout = LayoutTensor::empty(tier, cap, c);
    for (i, obj) in objects.iter().enumerate() {
        if obj.class >= taxonomy.num_real_classes() {
            return Err(Error::UnknownClass {
                index: obj.class,
                classes: taxonomy.num_real_classes(),
            });
        }
        let slot = layout.slot_mut(i);
        slot[c - 1] = 0.0;
        slot[obj.class] = 1.0;
        slot[c..c + 3].copy_from_slice(&obj.translation);
        slot[c + 3..c + 6].copy_from_slice(&obj.half_size);
        slot[c + 6..c + 8].copy_from_slice(&obj.orientation());
    }
    Ok(layout)
}

/// Decoded objects plus the number of slots whose orientation pair was near zero.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedLayout {
    pub objects: Vec<ObjectRecord>,
    pub degenerate_orientations: usize,
}

/// Reads every non-empty slot back into an object. Orientation is renormalized
/// and half-sizes are clamped to [`MIN_HALF_SIZE`].
pub fn decode_layout(layout: &LayoutTensor) -> DecodedLayout {
    let c = layout.num_classes();
    let mut objects = Vec::new();
    let mut degenerate_orientations = 0;
    for i in 0..layout.num_slots() {
        let class = layout.slot_class(i);
        if class == c - 1 {
            continue;
        }
        let slot = layout.slot(i);
        let angle = decode_angle([slot[c + 6], slot[c + 7]]);
        degenerate_orientations += angle.degenerate as usize;
        let mut half_size = [0.0; 3];
        for (h, &v) in half_size.iter_mut().zip(&slot[c + 3..c + 6]) {
            *h = v.max(MIN_HALF_SIZE);
        }
        objects.push(ObjectRecord {
            class,
            translation: [slot[c], slot[c + 1], slot[c + 2]],
            half_size,
            theta: angle.theta,
        });
    }
    DecodedLayout {
        objects,
        degenerate_orientations,
    }
}

/// Scene graph vertex: category and intra-class instance index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vertex {
    pub class: usize,
    pub instance: usize,
}

/// Directed, typed edge between primary slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub relation: u8,
}

/// Graph over the primary objects. Vertex `i` is primary slot `i`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SceneGraph {
    pub vertices: Vec<Vertex>,
    pub edges: Vec<Edge>,
}

impl SceneGraph {
    /// Vertices for a primary object list, with instance indices assigned by slot
    /// order within each class.
    pub fn vertices_for(objects: &[ObjectRecord]) -> Vec<Vertex> {
        let mut seen: Vec<(usize, usize)> = Vec::new();
        objects
            .iter()
            .map(|o| {
                let instance = match seen.iter_mut().find(|(c, _)| *c == o.class) {
                    Some((_, n)) => {
                        *n += 1;
                        *n - 1
                    }
                    None => {
                        seen.push((o.class, 1));
                        0
                    }
                };
                Vertex {
                    class: o.class,
                    instance,
                }
            })
            .collect()
    }

    pub fn new(objects: &[ObjectRecord], edges: Vec<Edge>) -> Result<Self> {
        let graph = Self {
            vertices: Self::vertices_for(objects),
            edges,
        };
        graph.validate()?;
        Ok(graph)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        for e in &self.edges {
            if e.relation as usize >= NUM_RELATIONS {
                return Err(Error::RelationType(e.relation));
            }
            if e.src >= n || e.dst >= n || e.src == e.dst {
                return Err(Error::Edge {
                    src: e.src,
                    dst: e.dst,
                    vertices: n,
                });
            }
        }
        for (i, a) in self.vertices.iter().enumerate() {
            if self.vertices[..i].contains(a) {
                return Err(Error::Taxonomy("duplicate (class, instance) vertex"));
            }
        }
        Ok(())
    }

    pub fn max_instance(&self) -> usize {
        self.vertices.iter().map(|v| v.instance).max().unwrap_or(0)
    }
}

/// Binary top-down room mask over the normalized square `[-1, 1]^2` of the XZ plane.
/// Row index follows `z`, column index follows `x`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoomMask {
    pub height: usize,
    pub width: usize,
    pub cells: Vec<u8>,
}

impl RoomMask {
    pub fn new(height: usize, width: usize, cells: Vec<u8>) -> Result<Self> {
        if cells.len() != height * width || cells.iter().any(|&c| c > 1) {
            return Err(Error::Room("mask must be binary with h*w cells"));
        }
        Ok(Self {
            height,
            width,
            cells,
        })
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self {
            height,
            width,
            cells: vec![value as u8; height * width],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.cells[row * self.width + col] != 0
    }

    /// Mask value at a normalized `(x, z)` point; points outside `[-1, 1]^2` are outside.
    pub fn contains(&self, x: f64, z: f64) -> bool {
        if !(-1.0..1.0).contains(&x) || !(-1.0..1.0).contains(&z) {
            return false;
        }
        let col = ((x + 1.0) * 0.5 * self.width as f64) as usize;
        let row = ((z + 1.0) * 0.5 * self.height as f64) as usize;
        self.get(row.min(self.height - 1), col.min(self.width - 1))
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c != 0).count()
    }

    /// Alternating run lengths in row-major order, starting with a run of zeros
    /// (possibly of length 0).
    pub fn to_rle(&self) -> Vec<u32> {
        let mut runs = Vec::new();
        let mut current = 0u8;
        let mut len = 0u32;
        for &c in &self.cells {
            if c == current {
                len += 1;
            } else {
                runs.push(len);
                current = c;
                len = 1;
            }
        }
        runs.push(len);
        runs
    }

    pub fn from_rle(height: usize, width: usize, runs: &[u32]) -> Result<Self> {
        let mut cells = Vec::with_capacity(height * width);
        for (i, &r) in runs.iter().enumerate() {
            let v = (i % 2) as u8;
            cells.extend(core::iter::repeat_n(v, r as usize));
        }
        if cells.len() != height * width {
            return Err(Error::Room("run lengths do not sum to h*w"));
        }
        Ok(Self {
            height,
            width,
            cells,
        })
    }

    /// Nearest-neighbour resample to `size x size`.
    pub fn resized(&self, size: usize) -> RoomMask {
        let mut cells = Vec::with_capacity(size * size);
        for r in 0..size {
            let sr = (r * self.height) / size;
            for c in 0..size {
                let sc = (c * self.width) / size;
                cells.push(self.cells[sr * self.width + sc]);
            }
        }
        RoomMask {
            height: size,
            width: size,
            cells,
        }
    }
}

/// Maps world meters to the normalized frame: `x' = (x - center) / scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame {
    pub center: [f64; 3],
    pub scale: f64,
}

impl Frame {
    pub const IDENTITY: Frame = Frame {
        center: [0.0; 3],
        scale: 1.0,
    };

    pub fn validate(&self) -> Result<()> {
        if self.scale > 0.0 && self.scale.is_finite() {
            Ok(())
        } else {
            Err(Error::BadScale(self.scale))
        }
    }

    pub fn to_normalized(&self, obj: &ObjectRecord) -> ObjectRecord {
        let mut out = *obj;
        for k in 0..3 {
            out.translation[k] = (obj.translation[k] - self.center[k]) / self.scale;
            out.half_size[k] = obj.half_size[k] / self.scale;
        }
        out
    }

    pub fn to_world(&self, obj: &ObjectRecord) -> ObjectRecord {
        let mut out = *obj;
        for k in 0..3 {
            out.translation[k] = obj.translation[k] * self.scale + self.center[k];
            out.half_size[k] = obj.half_size[k] * self.scale;
        }
        out
    }
}

/// One scene: both tiers, the primary graph, room mask, prompt and source label.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub primary: Vec<ObjectRecord>,
    pub secondary: Vec<ObjectRecord>,
    pub graph: SceneGraph,
    pub room_mask: RoomMask,
    pub text: String,
    pub source: String,
    pub frame: Frame,
}

impl Scene {
    pub fn objects(&self) -> impl Iterator<Item = &ObjectRecord> {
        self.primary.iter().chain(&self.secondary)
    }

    pub fn encode(
        &self,
        caps: Caps,
        taxonomy: &CategoryTaxonomy,
    ) -> Result<(LayoutTensor, LayoutTensor)> {
        Ok((
            encode_layout(&self.primary, Tier::Primary, caps, taxonomy)?,
            encode_layout(&self.secondary, Tier::Secondary, caps, taxonomy)?,
        ))
    }
}

/// Maps a world-frame scene into `frame`. Orientation is untouched; the frame is
/// recorded on the output.
pub fn normalize_scene(scene: &Scene, frame: Frame) -> Result<Scene> {
    frame.validate()?;
    let mut out = scene.clone();
    out.primary
        .iter_mut()
        .for_each(|o| *o = frame.to_normalized(o));
    out.secondary
        .iter_mut()
        .for_each(|o| *o = frame.to_normalized(o));
    out.frame = frame;
    Ok(out)
}

/// Inverse of [`normalize_scene`].
pub fn denormalize_scene(scene: &Scene, frame: Frame) -> Result<Scene> {
    frame.validate()?;
    let mut out = scene.clone();
    out.primary.iter_mut().for_each(|o| *o = frame.to_world(o));
    out.secondary
        .iter_mut()
        .for_each(|o| *o = frame.to_world(o));
    out.frame = frame;
    Ok(out)
}

/// Canonical angle used when storing an object.
pub fn canonical_theta(theta: f64) -> f64 {
    wrap_angle(theta)
}
