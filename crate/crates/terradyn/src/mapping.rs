//! Robot-centric terrain mapping: feature-augmented points accumulate into
//! a sparse 3D voxel map with closest-observation fusion, flatten into a 2D
//! terrain feature map, and fill small gaps from neighboring cells.
//!
//! Voxels are keyed by world-grid integer coordinates, so re-centering the
//! map around the robot only evicts cells that fall outside the extents and
//! never resamples stored data.

use crate::io::TensorBlob;
use crate::TdError;
use std::collections::BTreeMap;
use std::path::Path;

pub const DEFAULT_RESOLUTION: f64 = 0.2;
pub const DEFAULT_EXTENT: [f64; 3] = [100.0, 100.0, 10.0];
pub const FILL_RADIUS: f64 = 0.4;

/// One observed point: position in map frame, its feature vector, and the
/// distance from the map origin at observation time.
#[derive(Clone, Debug)]
pub struct FeaturePoint {
    pub position: [f64; 3],
    pub feature: Vec<f64>,
    pub observation_distance: f64,
}

#[derive(Clone, Debug)]
struct Voxel {
    feature: Vec<f64>,
    observation_distance: f64,
}

/// Sparse voxel map with closest-observation fusion.
#[derive(Clone, Debug)]
pub struct VoxelMap {
    resolution: f64,
    feature_dim: usize,
    /// Cells per axis; valid relative cells span [-n/2, n/2) per axis.
    extent_cells: [i64; 3],
    /// World-grid cell of the map center.
    origin_cell: [i64; 3],
    voxels: BTreeMap<[i64; 3], Voxel>,
    dropped: u64,
}

impl VoxelMap {
    pub fn new(resolution: f64, feature_dim: usize, extent_m: [f64; 3]) -> Self {
        assert!(resolution > 0.0);
        let extent_cells = extent_m.map(|e| ((e / resolution).round() as i64).max(2));
        VoxelMap {
            resolution,
            feature_dim,
            extent_cells,
            origin_cell: [0; 3],
            voxels: BTreeMap::new(),
            dropped: 0,
        }
    }

    pub fn with_defaults(feature_dim: usize) -> Self {
        Self::new(DEFAULT_RESOLUTION, feature_dim, DEFAULT_EXTENT)
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin_cell.map(|c| c as f64 * self.resolution)
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn dropped_points(&self) -> u64 {
        self.dropped
    }

    fn cell_of(&self, p: &[f64; 3]) -> [i64; 3] {
        [
            (p[0] / self.resolution).floor() as i64,
            (p[1] / self.resolution).floor() as i64,
            (p[2] / self.resolution).floor() as i64,
        ]
    }

    fn in_extent(&self, cell: &[i64; 3]) -> bool {
        (0..3).all(|a| {
            let rel = cell[a] - self.origin_cell[a];
            rel >= -self.extent_cells[a] / 2 && rel < self.extent_cells[a] / 2
        })
    }

    /// Move the map center to the cell containing `center`, evicting voxels
    /// that fall outside the extents. Stored data is never resampled.
    pub fn recenter(&mut self, center: [f64; 3]) {
        self.origin_cell = self.cell_of(&center);
        let origin = self.origin_cell;
        let extent = self.extent_cells;
        self.voxels.retain(|cell, _| {
            (0..3).all(|a| {
                let rel = cell[a] - origin[a];
                rel >= -extent[a] / 2 && rel < extent[a] / 2
            })
        });
    }

    /// Insert observations with closest-observation fusion: an incoming
    /// point replaces a stored one iff its observation distance is strictly
    /// smaller; ties keep the incumbent. Returns the number of points
    /// dropped for being outside the map extents.
    pub fn insert_points(&mut self, points: &[FeaturePoint]) -> usize {
        let mut dropped = 0;
        for p in points {
            assert_eq!(p.feature.len(), self.feature_dim, "feature dim mismatch");
            debug_assert!(p.observation_distance >= 0.0);
            let cell = self.cell_of(&p.position);
            if !self.in_extent(&cell) {
                dropped += 1;
                continue;
            }
            match self.voxels.get_mut(&cell) {
                None => {
                    self.voxels.insert(
                        cell,
                        Voxel {
                            feature: p.feature.clone(),
                            observation_distance: p.observation_distance,
                        },
                    );
                }
                Some(v) => {
                    if p.observation_distance < v.observation_distance {
                        v.feature.clone_from(&p.feature);
                        v.observation_distance = p.observation_distance;
                    }
                }
            }
        }
        self.dropped += dropped as u64;
        dropped
    }

    /// Compress each vertical voxel stack to its lowest valid voxel,
    /// producing the 2D terrain feature map with elevations and normals.
    pub fn flatten(&self) -> TerrainFeatureMap {
        let mut cells: BTreeMap<[i64; 2], TerrainCell> = BTreeMap::new();
        for (cell, voxel) in &self.voxels {
            let col = [cell[0], cell[1]];
            // Voxel elevation is the cell-center height.
            let elevation = (cell[2] as f64 + 0.5) * self.resolution;
            let replace = match cells.get(&col) {
                None => true,
                Some(existing) => elevation < existing.elevation,
            };
            if replace {
                cells.insert(
                    col,
                    TerrainCell {
                        feature: voxel.feature.clone(),
                        elevation,
                        normal: [0.0, 0.0, 1.0],
                        provenance: Provenance::Direct,
                    },
                );
            }
        }
        let mut map = TerrainFeatureMap {
            resolution: self.resolution,
            feature_dim: self.feature_dim,
            extent_cells: [self.extent_cells[0], self.extent_cells[1]],
            origin_cell: [self.origin_cell[0], self.origin_cell[1]],
            cells,
        };
        map.recompute_normals();
        map
    }

    pub fn save(&self, path: &Path) -> Result<(), TdError> {
        let n = self.voxels.len();
        let mut keys = Vec::with_capacity(n * 3);
        let mut dists = Vec::with_capacity(n);
        let mut feats = Vec::with_capacity(n * self.feature_dim);
        for (cell, v) in &self.voxels {
            keys.extend(cell.iter().map(|&c| c as f64));
            dists.push(v.observation_distance);
            feats.extend_from_slice(&v.feature);
        }
        let mut blob = TensorBlob::default();
        blob.push("voxel.keys", n.max(1), 3, if n == 0 { vec![0.0; 3] } else { keys });
        blob.push("voxel.dist", n.max(1), 1, if n == 0 { vec![0.0] } else { dists });
        blob.push(
            "voxel.features",
            n.max(1),
            self.feature_dim,
            if n == 0 { vec![0.0; self.feature_dim] } else { feats },
        );
        blob.meta.insert("n".into(), n.to_string());
        blob.meta.insert("resolution".into(), format!("{}", self.resolution));
        blob.meta.insert("feature_dim".into(), self.feature_dim.to_string());
        blob.meta.insert(
            "extent_cells".into(),
            format!("{} {} {}", self.extent_cells[0], self.extent_cells[1], self.extent_cells[2]),
        );
        blob.meta.insert(
            "origin_cell".into(),
            format!("{} {} {}", self.origin_cell[0], self.origin_cell[1], self.origin_cell[2]),
        );
        blob.meta.insert("dropped".into(), self.dropped.to_string());
        blob.write(path)
    }

    pub fn load(path: &Path) -> Result<Self, TdError> {
        let blob = TensorBlob::read(path)?;
        let parse3 = |s: &str| -> Result<[i64; 3], TdError> {
            let v: Vec<i64> = s.split_whitespace().filter_map(|t| t.parse().ok()).collect();
            if v.len() != 3 {
                return Err(TdError::format(path, "bad 3-vector in metadata"));
            }
            Ok([v[0], v[1], v[2]])
        };
        let meta = |k: &str| -> Result<&str, TdError> {
            blob.meta
                .get(k)
                .map(|s| s.as_str())
                .ok_or_else(|| TdError::format(path, format!("missing metadata {k}")))
        };
        let n: usize = meta("n")?.parse().map_err(|_| TdError::format(path, "bad n"))?;
        let resolution: f64 =
            meta("resolution")?.parse().map_err(|_| TdError::format(path, "bad resolution"))?;
        let feature_dim: usize =
            meta("feature_dim")?.parse().map_err(|_| TdError::format(path, "bad feature_dim"))?;
        let extent_cells = parse3(meta("extent_cells")?)?;
        let origin_cell = parse3(meta("origin_cell")?)?;
        let dropped: u64 = meta("dropped")?.parse().unwrap_or(0);
        let (_, _, keys) = blob.require("voxel.keys", path)?;
        let (_, _, dists) = blob.require("voxel.dist", path)?;
        let (_, fd, feats) = blob.require("voxel.features", path)?;
        if fd != feature_dim {
            return Err(TdError::format(path, "feature dim mismatch in blob"));
        }
        let mut voxels = BTreeMap::new();
        for i in 0..n {
            let cell = [keys[i * 3] as i64, keys[i * 3 + 1] as i64, keys[i * 3 + 2] as i64];
            voxels.insert(
                cell,
                Voxel {
                    feature: feats[i * feature_dim..(i + 1) * feature_dim].to_vec(),
                    observation_distance: dists[i],
                },
            );
        }
        Ok(VoxelMap { resolution, feature_dim, extent_cells, origin_cell, voxels, dropped })
    }
}

/// How a terrain cell got its contents.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Direct,
    /// Filled from the recorded source cell within the fill radius.
    NeighborFilled { source: [i64; 2] },
}

#[derive(Clone, Debug)]
pub struct TerrainCell {
    pub feature: Vec<f64>,
    pub elevation: f64,
    pub normal: [f64; 3],
    pub provenance: Provenance,
}

/// 2D terrain feature map produced by flattening the voxel map.
#[derive(Clone, Debug)]
pub struct TerrainFeatureMap {
    resolution: f64,
    feature_dim: usize,
    extent_cells: [i64; 2],
    origin_cell: [i64; 2],
    cells: BTreeMap<[i64; 2], TerrainCell>,
}

/// Result of a map query at one position.
#[derive(Clone, Debug)]
pub struct CellQuery {
    /// None when the cell is invalid or out of bounds.
    pub feature: Option<Vec<f64>>,
    pub elevation: Option<f64>,
    /// Unit surface normal; (0, 0, 1) for missing cells.
    pub normal: [f64; 3],
}

/// Relative cell offsets within the fill radius, ordered by distance then
/// row-major, which fixes the tie-break deterministically.
fn fill_offsets(resolution: f64) -> Vec<[i64; 2]> {
    let max_cells = (FILL_RADIUS / resolution).floor() as i64;
    let r2 = (FILL_RADIUS / resolution) * (FILL_RADIUS / resolution);
    let mut offs: Vec<[i64; 2]> = Vec::new();
    for dy in -max_cells..=max_cells {
        for dx in -max_cells..=max_cells {
            if dx == 0 && dy == 0 {
                continue;
            }
            if ((dx * dx + dy * dy) as f64) <= r2 + 1e-9 {
                offs.push([dx, dy]);
            }
        }
    }
    offs.sort_by_key(|o| (o[0] * o[0] + o[1] * o[1], o[1], o[0]));
    offs
}

impl TerrainFeatureMap {
    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn cells(&self) -> impl Iterator<Item = (&[i64; 2], &TerrainCell)> {
        self.cells.iter()
    }

    pub fn cell(&self, key: &[i64; 2]) -> Option<&TerrainCell> {
        self.cells.get(key)
    }

    fn in_extent(&self, cell: &[i64; 2]) -> bool {
        (0..2).all(|a| {
            let rel = cell[a] - self.origin_cell[a];
            rel >= -self.extent_cells[a] / 2 && rel < self.extent_cells[a] / 2
        })
    }

    pub fn cell_of(&self, position: [f64; 2]) -> [i64; 2] {
        [
            (position[0] / self.resolution).floor() as i64,
            (position[1] / self.resolution).floor() as i64,
        ]
    }

    fn elevation_at(&self, key: &[i64; 2]) -> Option<f64> {
        self.cells.get(key).map(|c| c.elevation)
    }

    /// Normals from elevation differences: central where both neighbors
    /// exist, one-sided where only one does, flat otherwise.
    pub fn recompute_normals(&mut self) {
        let keys: Vec<[i64; 2]> = self.cells.keys().copied().collect();
        let mut normals = Vec::with_capacity(keys.len());
        for key in &keys {
            let e0 = self.cells[key].elevation;
            let slope = |a: usize| -> f64 {
                let mut lo = *key;
                let mut hi = *key;
                lo[a] -= 1;
                hi[a] += 1;
                match (self.elevation_at(&lo), self.elevation_at(&hi)) {
                    (Some(el), Some(eh)) => (eh - el) / (2.0 * self.resolution),
                    (Some(el), None) => (e0 - el) / self.resolution,
                    (None, Some(eh)) => (eh - e0) / self.resolution,
                    (None, None) => 0.0,
                }
            };
            let (sx, sy) = (slope(0), slope(1));
            let norm = (sx * sx + sy * sy + 1.0).sqrt();
            normals.push([-sx / norm, -sy / norm, 1.0 / norm]);
        }
        for (key, n) in keys.iter().zip(normals) {
            self.cells.get_mut(key).unwrap().normal = n;
        }
    }

    /// Fill invalid cells from the nearest directly observed cell within
    /// the fill radius. Direct observations are never overwritten, and the
    /// source set is restricted to direct cells, so the operation is
    /// idempotent. Normals are recomputed afterwards.
    pub fn fill_gaps(&self) -> TerrainFeatureMap {
        let offsets = fill_offsets(self.resolution);
        let direct: BTreeMap<[i64; 2], ()> = self
            .cells
            .iter()
            .filter(|(_, c)| c.provenance == Provenance::Direct)
            .map(|(k, _)| (*k, ()))
            .collect();
        // Candidate holes: in-extent empty cells adjacent to a direct cell.
        let mut candidates: BTreeMap<[i64; 2], ()> = BTreeMap::new();
        for key in direct.keys() {
            for off in &offsets {
                let cand = [key[0] + off[0], key[1] + off[1]];
                if self.in_extent(&cand) && !self.cells.contains_key(&cand) {
                    candidates.insert(cand, ());
                }
            }
        }
        let mut out = self.clone();
        for hole in candidates.keys() {
            for off in &offsets {
                let src = [hole[0] + off[0], hole[1] + off[1]];
                if direct.contains_key(&src) {
                    let src_cell = &self.cells[&src];
                    out.cells.insert(
                        *hole,
                        TerrainCell {
                            feature: src_cell.feature.clone(),
                            elevation: src_cell.elevation,
                            normal: [0.0, 0.0, 1.0],
                            provenance: Provenance::NeighborFilled { source: src },
                        },
                    );
                    break;
                }
            }
        }
        out.recompute_normals();
        out
    }

    /// Nearest-cell lookup with the floor convention; out-of-bounds or
    /// missing cells return an invalid result with a flat default normal.
    pub fn query(&self, position: [f64; 2]) -> CellQuery {
        let cell = self.cell_of(position);
        if !self.in_extent(&cell) {
            return CellQuery { feature: None, elevation: None, normal: [0.0, 0.0, 1.0] };
        }
        match self.cells.get(&cell) {
            Some(c) => CellQuery {
                feature: Some(c.feature.clone()),
                elevation: Some(c.elevation),
                normal: c.normal,
            },
            None => CellQuery { feature: None, elevation: None, normal: [0.0, 0.0, 1.0] },
        }
    }

    /// Debug text export: row-major elevation grid over the populated
    /// bounding box, `.` for invalid cells.
    pub fn debug_text(&self) -> String {
        if self.cells.is_empty() {
            return String::from("(empty map)\n");
        }
        let xs: Vec<i64> = self.cells.keys().map(|k| k[0]).collect();
        let ys: Vec<i64> = self.cells.keys().map(|k| k[1]).collect();
        let (x0, x1) = (*xs.iter().min().unwrap(), *xs.iter().max().unwrap());
        let (y0, y1) = (*ys.iter().min().unwrap(), *ys.iter().max().unwrap());
        let mut s = String::new();
        for y in (y0..=y1).rev() {
            for x in x0..=x1 {
                match self.cells.get(&[x, y]) {
                    Some(c) => s.push_str(&format!("{:7.2}", c.elevation)),
                    None => s.push_str("      ."),
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Pinhole camera with pose; `rotation` maps world vectors into the camera
/// frame (z forward, x right, y down).
#[derive(Clone, Debug)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub patch: usize,
    pub position: [f64; 3],
    pub rotation: [[f64; 3]; 3],
}

impl CameraModel {
    /// Patch-grid dimensions (columns, rows) of the feature image.
    pub fn patch_grid(&self) -> (usize, usize) {
        (self.width / self.patch, self.height / self.patch)
    }
}

/// Patch-grid feature image, row-major over (rows, cols).
#[derive(Clone, Debug)]
pub struct FeatureImage {
    pub cols: usize,
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl FeatureImage {
    pub fn patch(&self, col: usize, row: usize) -> &[f64] {
        assert!(col < self.cols && row < self.rows);
        let i = (row * self.cols + col) * self.dim;
        &self.data[i..i + self.dim]
    }
}

/// Project points into the camera; points that land inside the image take
/// the feature of the containing patch. Observation distance is measured
/// from the camera position (the robot location at observation time).
pub fn project_points_to_image(
    points: &[[f64; 3]],
    camera: &CameraModel,
    image: &FeatureImage,
) -> Vec<FeaturePoint> {
    let (gc, gr) = camera.patch_grid();
    assert_eq!((image.cols, image.rows), (gc, gr), "feature image grid mismatch");
    let mut out = Vec::new();
    for p in points {
        let d = [
            p[0] - camera.position[0],
            p[1] - camera.position[1],
            p[2] - camera.position[2],
        ];
        let cam = [
            camera.rotation[0][0] * d[0] + camera.rotation[0][1] * d[1] + camera.rotation[0][2] * d[2],
            camera.rotation[1][0] * d[0] + camera.rotation[1][1] * d[1] + camera.rotation[1][2] * d[2],
            camera.rotation[2][0] * d[0] + camera.rotation[2][1] * d[1] + camera.rotation[2][2] * d[2],
        ];
        if cam[2] <= 0.0 {
            continue;
        }
        let u = camera.fx * cam[0] / cam[2] + camera.cx;
        let v = camera.fy * cam[1] / cam[2] + camera.cy;
        if u < 0.0 || v < 0.0 || u >= camera.width as f64 || v >= camera.height as f64 {
            continue;
        }
        let (pc, pr) = ((u as usize) / camera.patch, (v as usize) / camera.patch);
        if pc >= image.cols || pr >= image.rows {
            continue;
        }
        let dist = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        out.push(FeaturePoint {
            position: *p,
            feature: image.patch(pc, pr).to_vec(),
            observation_distance: dist,
        });
    }
    out
}
