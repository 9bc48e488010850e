//! Distribution distances over orthogonal-projection rasters, plausibility
//! summaries and the ablation report.

use std::fmt::Write as _;

use layoutdiff_core::plausibility::{plausibility, PlausibilityReport, PlausibilityThresholds};
use layoutdiff_core::raster::{rasterize, Plane, ProjectionImage, RasterOptions};
use layoutdiff_core::{normalize_scene, Scene};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Side of the block-averaged raster used as the feature core.
pub const FEATURE_GRID: usize = 16;
/// Ridge added to both covariances before the matrix square roots.
pub const RIDGE: f64 = 1e-6;

/// Rasters of world-frame scenes, each first mapped to its own normalized frame.
pub fn rasterize_scenes(
    scenes: &[Scene],
    plane: Plane,
    opts: RasterOptions,
) -> Result<Vec<ProjectionImage>> {
    scenes
        .iter()
        .map(|s| {
            let n = normalize_scene(s, s.frame)?;
            Ok(rasterize(n.objects(), plane, opts))
        })
        .collect()
}

/// Block-averaged `16 x 16` occupancy followed by six moments: fill fraction,
/// centroid row and column, and the three second central moments.
pub fn features(img: &ProjectionImage) -> Vec<f64> {
    let r = img.resolution;
    let mut grid = vec![0.0; FEATURE_GRID * FEATURE_GRID];
    let mut mass = 0.0;
    let (mut mr, mut mc) = (0.0, 0.0);
    for row in 0..r {
        for col in 0..r {
            let v = (img.get(row, col) > 0) as u8 as f64;
            let g = (row * FEATURE_GRID / r) * FEATURE_GRID + col * FEATURE_GRID / r;
            grid[g] += v;
            mass += v;
            mr += v * row as f64;
            mc += v * col as f64;
        }
    }
    let cell = (r * r) as f64 / (FEATURE_GRID * FEATURE_GRID) as f64;
    grid.iter_mut().for_each(|g| *g /= cell);
    let (mut srr, mut scc, mut src) = (0.0, 0.0, 0.0);
    if mass > 0.0 {
        mr /= mass;
        mc /= mass;
        for row in 0..r {
            for col in 0..r {
                if img.get(row, col) > 0 {
                    let dr = row as f64 - mr;
                    let dc = col as f64 - mc;
                    srr += dr * dr;
                    scc += dc * dc;
                    src += dr * dc;
                }
            }
        }
        srr /= mass;
        scc /= mass;
        src /= mass;
    }
    let rf = r as f64;
    grid.extend([
        mass / (rf * rf),
        mr / rf,
        mc / rf,
        srr / (rf * rf),
        scc / (rf * rf),
        src / (rf * rf),
    ]);
    grid
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Distance {
    pub frechet: f64,
    pub mmd: f64,
    /// Set when a covariance was rank-deficient before the ridge.
    pub regularized: bool,
}

fn matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let d = rows[0].len();
    DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j])
}

fn mean_cov(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows() as f64;
    let mean = x.row_mean().transpose();
    let centered = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] - mean[j]);
    let denom = (n - 1.0).max(1.0);
    let cov = centered.transpose() * &centered / denom;
    (mean, cov)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Frechet distance between Gaussian fits of the two feature sets.
pub fn frechet(a: &[Vec<f64>], b: &[Vec<f64>]) -> (f64, bool) {
    let (ma, ca) = mean_cov(&matrix(a));
    let (mb, cb) = mean_cov(&matrix(b));
    let d = ca.nrows();
    let rank_def = |c: &DMatrix<f64>| {
        let e = SymmetricEigen::new(c.clone()).eigenvalues;
        e.iter().any(|&v| v <= 1e-12)
    };
    let regularized = rank_def(&ca) || rank_def(&cb);
    let eye = DMatrix::<f64>::identity(d, d) * RIDGE;
    let ca = ca + &eye;
    let cb = cb + &eye;
    let sa = sym_sqrt(&ca);
    let cross = sym_sqrt(&(&sa * &cb * &sa));
    let diff = ma - mb;
    let value = diff.dot(&diff) + ca.trace() + cb.trace() - 2.0 * cross.trace();
    (value.max(0.0), regularized)
}

fn poly_kernel(x: &[f64], y: &[f64]) -> f64 {
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    (dot / x.len() as f64 + 1.0).powi(3)
}

/// Unbiased squared MMD with the cubic polynomial kernel, clamped at zero.
pub fn mmd(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let within = |s: &[Vec<f64>]| {
        let m = s.len();
        if m < 2 {
            return 0.0;
        }
        let mut sum = 0.0;
        for i in 0..m {
            for j in (i + 1)..m {
                sum += poly_kernel(&s[i], &s[j]);
            }
        }
        2.0 * sum / (m * (m - 1)) as f64
    };
    // Kernel values are summed in sorted order so swapping the sets is exact.
    let mut ks: Vec<f64> = a
        .iter()
        .flat_map(|x| b.iter().map(move |y| poly_kernel(x, y)))
        .collect();
    ks.sort_by(f64::total_cmp);
    let cross: f64 = ks.iter().sum();
    let cross = cross / (a.len() * b.len()) as f64;
    let (wa, wb) = (within(a), within(b));
    let (lo, hi) = if wa <= wb { (wa, wb) } else { (wb, wa) };
    (lo + hi - 2.0 * cross).max(0.0)
}

/// Frechet and MMD proxies between two raster sets.
pub fn distribution_distance(a: &[ProjectionImage], b: &[ProjectionImage]) -> Result<Distance> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Shape(
            "distribution distance needs two non-empty sets".into(),
        ));
    }
    let fa: Vec<Vec<f64>> = a.iter().map(features).collect();
    let fb: Vec<Vec<f64>> = b.iter().map(features).collect();
    if fa == fb {
        return Ok(Distance {
            frechet: 0.0,
            mmd: 0.0,
            regularized: false,
        });
    }
    let (f, regularized) = frechet(&fa, &fb);
    if regularized {
        log::debug!("covariance regularized with ridge {RIDGE}");
    }
    Ok(Distance {
        frechet: f,
        mmd: mmd(&fa, &fb),
        regularized,
    })
}

/// Distances between generated and reference scenes on one plane.
pub fn scene_distance(
    generated: &[Scene],
    reference: &[Scene],
    plane: Plane,
    opts: RasterOptions,
) -> Result<Distance> {
    distribution_distance(
        &rasterize_scenes(generated, plane, opts)?,
        &rasterize_scenes(reference, plane, opts)?,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaneRow {
    pub plane: String,
    pub distance: Distance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigRow {
    pub config: String,
    pub planes: Vec<PlaneRow>,
    pub overlap_rate: f64,
    pub oob_rate: f64,
    pub support_violation_rate: f64,
    pub mean_primary: f64,
    pub mean_secondary: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<ConfigRow>,
    /// Configurations that could not be evaluated, with the reason.
    pub skipped: Vec<(String, String)>,
}

/// One report row: distances on every plane plus plausibility rates.
pub fn evaluate_config(
    name: &str,
    generated: &[Scene],
    reference: &[Scene],
    planes: &[Plane],
    opts: RasterOptions,
) -> Result<ConfigRow> {
    let mut rows = Vec::new();
    for &plane in planes {
        rows.push(PlaneRow {
            plane: plane.name().to_string(),
            distance: scene_distance(generated, reference, plane, opts)?,
        });
    }
    let p: PlausibilityReport = plausibility(generated, &PlausibilityThresholds::default());
    Ok(ConfigRow {
        config: name.to_string(),
        planes: rows,
        overlap_rate: p.overlap_rate,
        oob_rate: p.oob_rate,
        support_violation_rate: p.support_violation_rate,
        mean_primary: p.mean_primary,
        mean_secondary: p.mean_secondary,
    })
}

impl AblationReport {
    /// One metric per line: `config plane metric value`. Plausibility rates use
    /// the plane `-`.
    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            for p in &r.planes {
                let _ = writeln!(
                    out,
                    "{} {} frechet_proxy {:.6}",
                    r.config, p.plane, p.distance.frechet
                );
                let _ = writeln!(
                    out,
                    "{} {} mmd_proxy {:.6}",
                    r.config, p.plane, p.distance.mmd
                );
            }
            let _ = writeln!(out, "{} - overlap_rate {:.6}", r.config, r.overlap_rate);
            let _ = writeln!(out, "{} - oob_rate {:.6}", r.config, r.oob_rate);
            let _ = writeln!(
                out,
                "{} - support_violation_rate {:.6}",
                r.config, r.support_violation_rate
            );
        }
        for (name, why) in &self.skipped {
            let _ = writeln!(out, "# skipped {name}: {why}");
        }
        out
    }

    /// Aligned table, one row per configuration.
    pub fn to_table(&self) -> String {
        let planes: Vec<String> = self
            .rows
            .first()
            .map(|r| r.planes.iter().map(|p| p.plane.clone()).collect())
            .unwrap_or_default();
        let mut header = vec!["config".to_string()];
        for p in &planes {
            header.push(format!("fd_{p}"));
            header.push(format!("mmd_{p}"));
        }
        header.extend(["overlap", "oob", "unsupported"].map(String::from));
        let mut cells = vec![header];
        for r in &self.rows {
            let mut row = vec![r.config.clone()];
            for p in &r.planes {
                row.push(format!("{:.4}", p.distance.frechet));
                row.push(format!("{:.5}", p.distance.mmd));
            }
            row.push(format!("{:.3}", r.overlap_rate));
            row.push(format!("{:.3}", r.oob_rate));
            row.push(format!("{:.3}", r.support_violation_rate));
            cells.push(row);
        }
        let cols = cells[0].len();
        let widths: Vec<usize> = (0..cols)
            .map(|c| {
                cells
                    .iter()
                    .map(|r| r.get(c).map_or(0, String::len))
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let mut out = String::new();
        for row in &cells {
            let line: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(c, s)| format!("{:<w$}", s, w = widths[c]))
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
        }
        for (name, why) in &self.skipped {
            let _ = writeln!(out, "skipped {name}: {why}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(fill: &[(usize, usize)]) -> ProjectionImage {
        let mut pixels = vec![0u16; 64 * 64];
        for &(r, c) in fill {
            pixels[r * 64 + c] = 1;
        }
        ProjectionImage {
            plane: Plane::XZ,
            resolution: 64,
            pixels,
        }
    }

    #[test]
    fn feature_layout() {
        let f = features(&img(&[(0, 0), (0, 1), (1, 0), (1, 1)]));
        assert_eq!(f.len(), FEATURE_GRID * FEATURE_GRID + 6);
        assert!((f[0] - 4.0 / 16.0).abs() < 1e-12);
        assert!((f[256] - 4.0 / 4096.0).abs() < 1e-12);
    }

    #[test]
    fn mmd_is_symmetric_and_zero_on_self() {
        let a: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, 1.0, 0.5]).collect();
        let b: Vec<Vec<f64>> = (0..7).map(|i| vec![0.3 * i as f64, -1.0, 2.0]).collect();
        assert_eq!(mmd(&a, &b), mmd(&b, &a));
        assert!(mmd(&a, &b) > 0.0);
        assert_eq!(mmd(&a, &a), 0.0);
    }
}
