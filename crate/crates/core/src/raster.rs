//! Orthogonal projections of box layouts onto binary or count rasters.
//!
//! Rasters cover `[-1, 1]^2` of the normalized frame. A pixel is filled when its
//! center lies inside the projected footprint.

use alloc::vec;
use alloc::vec::Vec;

use crate::geometry::{footprint_contains, world_aabb};
use crate::scene::ObjectRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Plane {
    /// Top-down: columns follow x, rows follow z.
    XZ,
    /// Front: columns follow x, rows follow y.
    XY,
    /// Side: columns follow z, rows follow y.
    YZ,
}

impl Plane {
    pub const ALL: [Plane; 3] = [Plane::XZ, Plane::XY, Plane::YZ];

    pub fn name(self) -> &'static str {
        match self {
            Plane::XZ => "XZ",
            Plane::XY => "XY",
            Plane::YZ => "YZ",
        }
    }

    pub fn parse(s: &str) -> Option<Plane> {
        match s.to_ascii_uppercase().as_str() {
            "XZ" => Some(Plane::XZ),
            "XY" => Some(Plane::XY),
            "YZ" => Some(Plane::YZ),
            _ => None,
        }
    }

    /// World axes mapped to (column, row).
    fn axes(self) -> (usize, usize) {
        match self {
            Plane::XZ => (0, 2),
            Plane::XY => (0, 1),
            Plane::YZ => (2, 1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RasterOptions {
    pub resolution: usize,
    /// Count overlapping boxes instead of marking coverage.
    pub counts: bool,
    /// Use the oriented footprint in the top-down plane instead of its AABB.
    pub oriented: bool,
}

impl Default for RasterOptions {
    fn default() -> Self {
        Self {
            resolution: 64,
            counts: false,
            oriented: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProjectionImage {
    pub plane: Plane,
    pub resolution: usize,
    /// Row-major pixels.
    pub pixels: Vec<u16>,
}

impl ProjectionImage {
    pub fn filled(&self) -> usize {
        self.pixels.iter().filter(|&&p| p > 0).count()
    }

    pub fn get(&self, row: usize, col: usize) -> u16 {
        self.pixels[row * self.resolution + col]
    }

    /// Binary portable graymap (P5), filled pixels white.
    pub fn to_pgm(&self) -> Vec<u8> {
        let r = self.resolution;
        let mut out = alloc::format!("P5\n{r} {r}\n255\n").into_bytes();
        let max = self.pixels.iter().copied().max().unwrap_or(0).max(1) as u32;
        out.extend(self.pixels.iter().map(|&p| ((p as u32 * 255) / max) as u8));
        out
    }
}

fn pixel_center(i: usize, r: usize) -> f64 {
    -1.0 + (i as f64 + 0.5) * 2.0 / r as f64
}

/// Pixel index range whose centers fall inside `[lo, hi]`.
fn span(lo: f64, hi: f64, r: usize) -> core::ops::Range<usize> {
    let rf = r as f64;
    let first = libm::ceil((lo + 1.0) * rf * 0.5 - 0.5).max(0.0);
    let last = libm::floor((hi + 1.0) * rf * 0.5 - 0.5).min(rf - 1.0);
    if last < first {
        0..0
    } else {
        first as usize..last as usize + 1
    }
}

/// Projects normalized objects onto `plane`.
pub fn rasterize<'a, I>(objects: I, plane: Plane, opts: RasterOptions) -> ProjectionImage
where
    I: IntoIterator<Item = &'a ObjectRecord>,
{
    let r = opts.resolution;
    let mut pixels = vec![0u16; r * r];
    let (cu, cv) = plane.axes();
    for obj in objects {
        let a = world_aabb(obj);
        let cols = span(a.lo(cu), a.hi(cu), r);
        let rows = span(a.lo(cv), a.hi(cv), r);
        let exact_aabb = plane != Plane::XZ || !opts.oriented;
        for row in rows {
            for col in cols.clone() {
                if !exact_aabb {
                    let p = [pixel_center(col, r), pixel_center(row, r)];
                    if !footprint_contains(obj, p) {
                        continue;
                    }
                }
                let px = &mut pixels[row * r + col];
                *px = if opts.counts { px.saturating_add(1) } else { 1 };
            }
        }
    }
    ProjectionImage {
        plane,
        resolution: r,
        pixels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::f64::consts::FRAC_PI_2;

    fn centered(theta: f64) -> ObjectRecord {
        ObjectRecord::new(0, [0.0, 0.2, 0.0], [0.5, 0.2, 0.5], theta)
    }

    #[test]
    fn empty_scene_is_blank() {
        let img = rasterize(&[], Plane::XZ, RasterOptions::default());
        assert_eq!(img.filled(), 0);
        assert_eq!(img.pixels.len(), 64 * 64);
    }

    #[test]
    fn centered_box_fills_32_by_32() {
        let o = [centered(0.0)];
        let img = rasterize(&o, Plane::XZ, RasterOptions::default());
        assert_eq!(img.filled(), 1024);
        let turned = [centered(FRAC_PI_2)];
        assert_eq!(rasterize(&turned, Plane::XZ, RasterOptions::default()), img);
    }

    #[test]
    fn oriented_footprint_differs_from_aabb() {
        let o = [ObjectRecord::new(0, [0.0; 3], [0.5, 0.2, 0.1], 0.6)];
        let oriented = rasterize(&o, Plane::XZ, RasterOptions::default());
        let aabb = rasterize(
            &o,
            Plane::XZ,
            RasterOptions {
                oriented: false,
                ..RasterOptions::default()
            },
        );
        assert!(oriented.filled() < aabb.filled());
    }

    #[test]
    fn counts_accumulate() {
        let o = [centered(0.0), centered(0.0)];
        let opts = RasterOptions {
            counts: true,
            ..RasterOptions::default()
        };
        let img = rasterize(&o, Plane::XY, opts);
        assert_eq!(img.pixels.iter().copied().max(), Some(2));
    }

    #[test]
    fn pgm_header() {
        let img = rasterize(
            &[centered(0.0)],
            Plane::YZ,
            RasterOptions {
                resolution: 8,
                ..Default::default()
            },
        );
        let pgm = img.to_pgm();
        assert!(pgm.starts_with(b"P5\n8 8\n255\n"));
        assert_eq!(pgm.len(), 11 + 64);
    }
}
