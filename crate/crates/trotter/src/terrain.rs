//! Height-map terrain: grid storage, world/cell mapping, cropping, plane
//! fitting, and the on-disk terrain description format.
//!
//! A [`HeightMap`] is an immutable row-major grid of cell elevations with an
//! explicit per-cell "unknown" flag. World coordinates map to cells through
//! `floor((p - origin) / resolution)`; a point on a shared cell edge belongs
//! to the cell whose lower boundary it is. Maps are loaded from TOML files
//! carrying either a dense elevation list (`nan` marks unknown cells) or a
//! list of axis-aligned box primitives rasterized over a base elevation.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::Deserialize;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TerrainError {
    #[error("resolution must be positive and finite, got {0}")]
    BadResolution(f64),
    #[error("map must have at least one cell")]
    EmptyMap,
    #[error("elevation list has {got} entries, grid is {width}x{height} = {expected}")]
    CellCountMismatch {
        got: usize,
        width: usize,
        height: usize,
        expected: usize,
    },
    #[error("point ({0:.3}, {1:.3}) lies outside the map")]
    OutOfBounds(f64, f64),
    #[error("plane fit needs at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("plane fit is degenerate: points are collinear or coincident")]
    DegeneratePlane,
    #[error("terrain file: {0}")]
    Io(#[from] std::io::Error),
    #[error("terrain file: {0}")]
    Parse(String),
    #[error("terrain file must give `elevations`, a `base`, or at least one [[box]]")]
    MissingCells,
}

/// Axis-aligned raised box used by the primitive terrain format. A cell takes
/// the box elevation `z` when its center lies inside the half-open footprint
/// `[min, max)`.
#[derive(Debug, Clone, Copy)]
pub struct BoxPrimitive {
    pub min: Vector2<f64>,
    pub max: Vector2<f64>,
    pub z: f64,
}

/// Immutable elevation grid. Row-major: cell `(ix, iy)` is stored at
/// `iy * width + ix`, `ix` along world x, `iy` along world y.
#[derive(Debug, Clone)]
pub struct HeightMap {
    origin: Vector2<f64>,
    resolution: f64,
    width: usize,
    height: usize,
    cells: Vec<f64>,
    known: Vec<bool>,
}

impl HeightMap {
    /// Builds a map from per-cell elevations; `None` marks unknown cells.
    pub fn new(
        origin: Vector2<f64>,
        resolution: f64,
        width: usize,
        height: usize,
        cells: Vec<Option<f64>>,
    ) -> Result<Self, TerrainError> {
        if !(resolution.is_finite() && resolution > 0.0) {
            return Err(TerrainError::BadResolution(resolution));
        }
        if width == 0 || height == 0 {
            return Err(TerrainError::EmptyMap);
        }
        let expected = width * height;
        if cells.len() != expected {
            return Err(TerrainError::CellCountMismatch {
                got: cells.len(),
                width,
                height,
                expected,
            });
        }
        let known = cells.iter().map(Option::is_some).collect();
        let cells = cells.into_iter().map(|c| c.unwrap_or(0.0)).collect();
        Ok(Self {
            origin,
            resolution,
            width,
            height,
            cells,
            known,
        })
    }

    /// Uniform known elevation everywhere.
    pub fn flat(
        origin: Vector2<f64>,
        resolution: f64,
        width: usize,
        height: usize,
        z: f64,
    ) -> Self {
        Self::new(origin, resolution, width, height, vec![Some(z); width * height])
            .expect("flat map dimensions")
    }

    /// Rasterizes box primitives over a base elevation. Overlapping boxes
    /// resolve to the maximum elevation at each cell.
    pub fn from_boxes(
        origin: Vector2<f64>,
        resolution: f64,
        width: usize,
        height: usize,
        base: f64,
        boxes: &[BoxPrimitive],
    ) -> Result<Self, TerrainError> {
        let mut map = Self::new(origin, resolution, width, height, vec![Some(base); width * height])?;
        for iy in 0..height {
            for ix in 0..width {
                let c = map.cell_center(ix, iy);
                let mut z = base;
                for b in boxes {
                    let inside = c.x >= b.min.x && c.x < b.max.x && c.y >= b.min.y && c.y < b.max.y;
                    if inside && b.z > z {
                        z = b.z;
                    }
                }
                map.cells[iy * width + ix] = z;
            }
        }
        Ok(map)
    }

    pub fn origin(&self) -> Vector2<f64> {
        self.origin
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// World xy of a cell center.
    pub fn cell_center(&self, ix: usize, iy: usize) -> Vector2<f64> {
        Vector2::new(
            self.origin.x + (ix as f64 + 0.5) * self.resolution,
            self.origin.y + (iy as f64 + 0.5) * self.resolution,
        )
    }

    /// Cell elevation, `None` if the cell is unknown. Panics on bad indices.
    pub fn cell(&self, ix: usize, iy: usize) -> Option<f64> {
        assert!(ix < self.width && iy < self.height, "cell index out of range");
        let i = iy * self.width + ix;
        self.known[i].then(|| self.cells[i])
    }

    /// Maps a world point to its containing cell, `None` outside the grid.
    pub fn cell_index(&self, p: Vector2<f64>) -> Option<(usize, usize)> {
        let fx = ((p.x - self.origin.x) / self.resolution).floor();
        let fy = ((p.y - self.origin.y) / self.resolution).floor();
        if fx < 0.0 || fy < 0.0 || fx >= self.width as f64 || fy >= self.height as f64 {
            return None;
        }
        Some((fx as usize, fy as usize))
    }

    /// Elevation under a world point: `Ok(None)` for a known-unknown cell,
    /// `Err` outside the map.
    pub fn height_at(&self, p: Vector2<f64>) -> Result<Option<f64>, TerrainError> {
        let (ix, iy) = self
            .cell_index(p)
            .ok_or(TerrainError::OutOfBounds(p.x, p.y))?;
        Ok(self.cell(ix, iy))
    }

    /// Square sub-grid centered on the cell containing `center`, extending
    /// `round(half_extent / resolution)` cells on each side. Cells falling
    /// outside the source grid come back unknown, so the crop is always full
    /// size and lookups inside it agree with the source map.
    pub fn crop(&self, center: Vector2<f64>, half_extent: f64) -> Result<HeightMap, TerrainError> {
        let (cx, cy) = self
            .cell_index(center)
            .ok_or(TerrainError::OutOfBounds(center.x, center.y))?;
        let k = ((half_extent / self.resolution).round() as i64).max(0);
        let side = (2 * k + 1) as usize;
        let x0 = cx as i64 - k;
        let y0 = cy as i64 - k;
        let mut cells = Vec::with_capacity(side * side);
        for dy in 0..side as i64 {
            for dx in 0..side as i64 {
                let sx = x0 + dx;
                let sy = y0 + dy;
                let inside =
                    sx >= 0 && sy >= 0 && (sx as usize) < self.width && (sy as usize) < self.height;
                cells.push(if inside {
                    self.cell(sx as usize, sy as usize)
                } else {
                    None
                });
            }
        }
        let origin = Vector2::new(
            self.origin.x + x0 as f64 * self.resolution,
            self.origin.y + y0 as f64 * self.resolution,
        );
        HeightMap::new(origin, self.resolution, side, side, cells)
    }

    /// Parses the TOML terrain description format.
    pub fn parse(text: &str) -> Result<Self, TerrainError> {
        let file: TerrainFile = toml::from_str(text).map_err(|e| TerrainError::Parse(e.to_string()))?;
        file.build()
    }

    /// Loads a terrain description file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, TerrainError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TerrainFile {
    origin: [f64; 2],
    resolution: f64,
    width: usize,
    height: usize,
    elevations: Option<Vec<f64>>,
    base: Option<f64>,
    #[serde(default, rename = "box")]
    boxes: Vec<BoxEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BoxEntry {
    min: [f64; 2],
    max: [f64; 2],
    z: f64,
}

impl TerrainFile {
    fn build(self) -> Result<HeightMap, TerrainError> {
        let origin = Vector2::new(self.origin[0], self.origin[1]);
        match self.elevations {
            Some(list) => {
                let cells = list
                    .into_iter()
                    .map(|z| if z.is_nan() { None } else { Some(z) })
                    .collect();
                HeightMap::new(origin, self.resolution, self.width, self.height, cells)
            }
            None if !self.boxes.is_empty() || self.base.is_some() => {
                let boxes: Vec<BoxPrimitive> = self
                    .boxes
                    .iter()
                    .map(|b| BoxPrimitive {
                        min: Vector2::new(b.min[0], b.min[1]),
                        max: Vector2::new(b.max[0], b.max[1]),
                        z: b.z,
                    })
                    .collect();
                HeightMap::from_boxes(
                    origin,
                    self.resolution,
                    self.width,
                    self.height,
                    self.base.unwrap_or(0.0),
                    &boxes,
                )
            }
            None => Err(TerrainError::MissingCells),
        }
    }
}

/// Least-squares plane through a set of points.
#[derive(Debug, Clone, Copy)]
pub struct TerrainPlane {
    /// Unit normal with positive z component.
    pub normal: Vector3<f64>,
    /// Centroid of the fitted points; lies on the plane.
    pub centroid: Vector3<f64>,
    /// Root-mean-square orthogonal distance of the points to the plane.
    pub rms_residual: f64,
}

impl TerrainPlane {
    /// Plane elevation under a world xy point.
    pub fn height_at(&self, p: Vector2<f64>) -> f64 {
        // n . (x - c) = 0 solved for z; n.z > 0 is guaranteed by the fit.
        self.centroid.z
            - (self.normal.x * (p.x - self.centroid.x) + self.normal.y * (p.y - self.centroid.y))
                / self.normal.z
    }
}

/// Fits the least-squares plane to `points` by taking the smallest principal
/// direction of the centered scatter matrix. Needs three or more points that
/// are not collinear; the returned normal points up.
pub fn fit_plane(points: &[Vector3<f64>]) -> Result<TerrainPlane, TerrainError> {
    if points.len() < 3 {
        return Err(TerrainError::TooFewPoints(points.len()));
    }
    let n = points.len() as f64;
    let centroid = points.iter().sum::<Vector3<f64>>() / n;
    let mut scatter = Matrix3::zeros();
    for p in points {
        let d = p - centroid;
        scatter += d * d.transpose();
    }
    let eig = scatter.symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let [lo, mid, hi] = order;
    // Collinear or coincident points leave the two smallest principal
    // components empty; the plane is then unconstrained around the line.
    if eig.eigenvalues[hi] <= 0.0 || eig.eigenvalues[mid] <= 1e-10 * eig.eigenvalues[hi] {
        return Err(TerrainError::DegeneratePlane);
    }
    let mut normal = eig.eigenvectors.column(lo).into_owned();
    if normal.z.abs() < 1e-12 {
        // Vertical plane: no single-valued elevation, useless as terrain.
        return Err(TerrainError::DegeneratePlane);
    }
    if normal.z < 0.0 {
        normal = -normal;
    }
    normal /= normal.norm();
    let rms_residual = (eig.eigenvalues[lo].max(0.0) / n).sqrt();
    Ok(TerrainPlane {
        normal,
        centroid,
        rms_residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn grid(origin: (f64, f64), res: f64, w: usize, h: usize, z: f64) -> HeightMap {
        HeightMap::flat(Vector2::new(origin.0, origin.1), res, w, h, z)
    }

    #[test]
    fn flat_lookup() {
        let m = grid((0.0, 0.0), 0.5, 2, 2, 0.0);
        assert_eq!(m.height_at(Vector2::new(0.3, 0.9)).unwrap(), Some(0.0));
    }

    #[test]
    fn out_of_bounds_query_errors() {
        let m = grid((0.0, 0.0), 0.5, 2, 2, 0.0);
        assert!(matches!(
            m.height_at(Vector2::new(-0.1, 0.5)),
            Err(TerrainError::OutOfBounds(..))
        ));
        assert!(matches!(
            m.height_at(Vector2::new(1.0, 0.5)), // x == origin + width*res is outside
            Err(TerrainError::OutOfBounds(..))
        ));
    }

    #[test]
    fn boundary_point_maps_to_single_cell() {
        let m = grid((0.0, 0.0), 0.5, 4, 4, 0.0);
        // Point exactly on the shared edge between cells 0 and 1 in x.
        assert_eq!(m.cell_index(Vector2::new(0.5, 0.1)), Some((1, 0)));
        assert_eq!(m.cell_index(Vector2::new(0.0, 0.0)), Some((0, 0)));
    }

    #[test]
    fn unknown_cells_are_flagged_not_sentinel() {
        let cells = vec![Some(1.0), None, Some(3.0), Some(4.0)];
        let m = HeightMap::new(Vector2::new(0.0, 0.0), 1.0, 2, 2, cells).unwrap();
        assert_eq!(m.height_at(Vector2::new(1.5, 0.5)).unwrap(), None);
        assert_eq!(m.cell(0, 0), Some(1.0));
        assert_eq!(m.cell(0, 1), Some(3.0));
    }

    #[test]
    fn cell_count_mismatch_rejected() {
        let r = HeightMap::new(Vector2::new(0.0, 0.0), 1.0, 2, 2, vec![Some(0.0); 3]);
        assert!(matches!(r, Err(TerrainError::CellCountMismatch { .. })));
    }

    #[test]
    fn crop_agrees_with_source_everywhere_inside() {
        let mut cells = Vec::new();
        for iy in 0..20 {
            for ix in 0..20 {
                cells.push(if (ix + iy) % 7 == 0 {
                    None
                } else {
                    Some(0.01 * (ix * iy) as f64)
                });
            }
        }
        let m = HeightMap::new(Vector2::new(-1.0, -1.0), 0.1, 20, 20, cells).unwrap();
        let c = m.crop(Vector2::new(0.05, -0.35), 0.3).unwrap();
        assert_eq!(c.width(), 7);
        assert_eq!(c.height(), 7);
        for iy in 0..c.height() {
            for ix in 0..c.width() {
                let p = c.cell_center(ix, iy);
                assert_eq!(c.height_at(p).unwrap(), m.height_at(p).unwrap());
            }
        }
    }

    #[test]
    fn crop_pads_unknown_outside_source() {
        let m = grid((0.0, 0.0), 0.1, 5, 5, 2.0);
        let c = m.crop(Vector2::new(0.05, 0.05), 0.2).unwrap();
        assert_eq!(c.width(), 5);
        assert_eq!(c.cell(0, 0), None); // source (-2,-2)
        assert_eq!(c.cell(2, 2), Some(2.0)); // source (0,0)
        assert!(matches!(
            m.crop(Vector2::new(9.0, 0.0), 0.2),
            Err(TerrainError::OutOfBounds(..))
        ));
    }

    #[test]
    fn parse_dense_elevations_with_unknowns() {
        let text = r#"
            origin = [0.0, 0.0]
            resolution = 0.5
            width = 2
            height = 2
            elevations = [0.1, nan, 0.3, 0.4]
        "#;
        let m = HeightMap::parse(text).unwrap();
        assert_eq!(m.cell(1, 0), None);
        assert_eq!(m.cell(1, 1), Some(0.4));
    }

    #[test]
    fn parse_rejects_short_elevations() {
        let text = r#"
            origin = [0.0, 0.0]
            resolution = 0.5
            width = 2
            height = 2
            elevations = [0.1, 0.2, 0.3]
        "#;
        assert!(matches!(
            HeightMap::parse(text),
            Err(TerrainError::CellCountMismatch { .. })
        ));
    }

    #[test]
    fn box_rasterization_beam_heights() {
        // Three beams 0.2 m wide along x; middle one lower.
        let text = r#"
            origin = [0.0, 0.0]
            resolution = 0.02
            width = 40
            height = 10
            [[box]]
            min = [0.0, 0.0]
            max = [0.2, 0.2]
            z = 0.15
            [[box]]
            min = [0.2, 0.0]
            max = [0.4, 0.2]
            z = 0.12
            [[box]]
            min = [0.6, 0.0]
            max = [0.8, 0.2]
            z = 0.15
        "#;
        let m = HeightMap::parse(text).unwrap();
        assert_eq!(m.height_at(Vector2::new(0.1, 0.1)).unwrap(), Some(0.15));
        assert_eq!(m.height_at(Vector2::new(0.3, 0.1)).unwrap(), Some(0.12));
        assert_eq!(m.height_at(Vector2::new(0.5, 0.1)).unwrap(), Some(0.0));
        assert_eq!(m.height_at(Vector2::new(0.7, 0.1)).unwrap(), Some(0.15));
        // Beam footprints are half-open: x = 0.2 starts the second beam.
        assert_eq!(m.height_at(Vector2::new(0.21, 0.1)).unwrap(), Some(0.12));
    }

    #[test]
    fn fit_plane_flat() {
        let pts = [
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
            Vector3::new(1.0, 1.0, 0.0),
        ];
        let p = fit_plane(&pts).unwrap();
        assert_relative_eq!(p.normal, Vector3::new(0.0, 0.0, 1.0), epsilon = 1e-12);
        assert!(p.rms_residual < 1e-12);
    }

    #[test]
    fn fit_plane_inclined_exact() {
        // z = 0.1 x, normal proportional to (-0.1, 0, 1).
        let pts = [
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.1),
            Vector3::new(0.0, 1.0, 0.0),
            Vector3::new(1.0, 1.0, 0.1),
        ];
        let p = fit_plane(&pts).unwrap();
        let expected = Vector3::new(-0.1, 0.0, 1.0) / (1.0f64 + 0.01).sqrt();
        assert_relative_eq!(p.normal, expected, epsilon = 1e-12);
        assert!(p.rms_residual < 1e-12);
        assert_relative_eq!(p.height_at(Vector2::new(3.0, -2.0)), 0.3, epsilon = 1e-12);
    }

    #[test]
    fn fit_plane_collinear_errors() {
        let pts = [
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 1.0, 1.0),
            Vector3::new(2.0, 2.0, 2.0),
        ];
        assert!(matches!(fit_plane(&pts), Err(TerrainError::DegeneratePlane)));
        assert!(matches!(
            fit_plane(&pts[..2]),
            Err(TerrainError::TooFewPoints(2))
        ));
    }

    #[test]
    fn fit_plane_is_least_squares_minimum() {
        // Noisy samples of z = 0.05x - 0.02y + 0.3; perturbing the fitted
        // normal must not reduce the sum of squared orthogonal distances.
        let mut pts = Vec::new();
        let mut s = 1234u64;
        let mut rnd = || {
            // xorshift, deterministic
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s % 1000) as f64 / 1000.0 - 0.5
        };
        for i in 0..12 {
            let x = (i % 4) as f64 * 0.3;
            let y = (i / 4) as f64 * 0.3;
            pts.push(Vector3::new(x, y, 0.05 * x - 0.02 * y + 0.3 + 0.01 * rnd()));
        }
        let fit = fit_plane(&pts).unwrap();
        let ssd = |n: Vector3<f64>, c: Vector3<f64>| -> f64 {
            pts.iter().map(|p| (n.dot(&(p - c))).powi(2)).sum()
        };
        let best = ssd(fit.normal, fit.centroid);
        for (da, db) in [(1e-3, 0.0), (0.0, 1e-3), (-1e-3, 1e-3), (2e-3, -1e-3)] {
            let n = (fit.normal + Vector3::new(da, db, 0.0)).normalize();
            assert!(ssd(n, fit.centroid) >= best - 1e-15);
        }
    }

    #[test]
    fn fit_plane_translation_equivariant() {
        let pts = [
            Vector3::new(0.1, 0.0, 0.02),
            Vector3::new(0.9, 0.1, 0.07),
            Vector3::new(0.2, 0.8, -0.01),
            Vector3::new(1.0, 0.9, 0.05),
        ];
        let t = Vector3::new(12.0, -7.0, 3.0);
        let shifted: Vec<_> = pts.iter().map(|p| p + t).collect();
        let a = fit_plane(&pts).unwrap();
        let b = fit_plane(&shifted).unwrap();
        assert_relative_eq!(a.normal, b.normal, epsilon = 1e-10);
        assert_relative_eq!(a.centroid + t, b.centroid, epsilon = 1e-10);
        assert_relative_eq!(a.rms_residual, b.rms_residual, epsilon = 1e-10);
    }
}
