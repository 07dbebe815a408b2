//! Triangulated study domain and barycentric observation matrices.
//!
//! The mesh is a Delaunay triangulation of the (cutoff-merged) input points
//! plus an outer extension band that pushes boundary effects away from the
//! data region, refined by longest-edge midpoint insertion until interior
//! edges fall below `max_edge_inner` and extension-band edges below
//! `max_edge_outer`. The plain Delaunay kernel is `delaunator`; everything
//! around it (merging, band construction, refinement, orientation, the
//! projector) lives here.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Read, Write};

use delaunator::{triangulate, Point};

use crate::geodata::ElevationRaster;
use crate::{Error, Result};

/// Construction parameters, in the same (degree) units as the coordinates.
#[derive(Debug, Clone, Copy)]
pub struct MeshParams {
    /// edge-length target inside the data hull
    pub max_edge_inner: f64,
    /// edge-length target in the extension band
    pub max_edge_outer: f64,
    /// input points closer than this are merged
    pub cutoff: f64,
    /// width of the outer band added around the data hull
    pub extension: f64,
}

impl Default for MeshParams {
    fn default() -> Self {
        MeshParams {
            max_edge_inner: 0.25,
            max_edge_outer: 1.0,
            cutoff: 0.05,
            extension: 1.0,
        }
    }
}

/// Conforming triangulation with positively oriented triangles.
#[derive(Debug, Clone)]
pub struct TriangleMesh {
    vertices: Vec<[f64; 2]>,
    triangles: Vec<[usize; 3]>,
    boundary: Vec<bool>,
    /// filled by [`vertex_elevations`]; zero until then
    vertex_elevation_km: Vec<f64>,
    /// convex hull of the merged input points (for inner/outer classification)
    data_hull: Vec<[f64; 2]>,
}

/// Sparse barycentric-weight rows, one per target location. In-domain rows
/// hold at most three weights in [0, 1] summing to one; out-of-domain rows
/// are empty.
#[derive(Debug, Clone)]
pub struct ObservationMatrix {
    n_vertices: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl ObservationMatrix {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_vertices(&self) -> usize {
        self.n_vertices
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    pub fn in_domain(&self, i: usize) -> bool {
        !self.rows[i].is_empty()
    }

    /// A x for a per-vertex vector.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n_vertices);
        self.rows
            .iter()
            .map(|row| row.iter().map(|&(j, w)| w * x[j]).sum())
            .collect()
    }
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Greedy merge of points closer than `cutoff`, keeping first occurrences.
pub fn merge_close_points(points: &[[f64; 2]], cutoff: f64) -> Vec<[f64; 2]> {
    let c2 = cutoff * cutoff;
    let mut kept: Vec<[f64; 2]> = Vec::with_capacity(points.len());
    for &p in points {
        if kept.iter().all(|&q| dist2(p, q) > c2) {
            kept.push(p);
        }
    }
    kept
}

/// Convex hull (counter-clockwise, no collinear vertices): monotone chain.
pub fn convex_hull(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut pts: Vec<[f64; 2]> = points.to_vec();
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut lower: Vec<[f64; 2]> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<[f64; 2]> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Signed area of a simple polygon (positive for counter-clockwise).
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    let mut s = 0.0;
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        s += a[0] * b[1] - b[0] * a[1];
    }
    s / 2.0
}

/// Signed distance style check: inside (or on) a CCW convex polygon.
fn inside_convex(poly: &[[f64; 2]], p: [f64; 2], tol: f64) -> bool {
    let n = poly.len();
    if n < 3 {
        return false;
    }
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        let len = dist2(a, b).sqrt().max(1e-300);
        if cross(a, b, p) / len < -tol {
            return false;
        }
    }
    true
}

/// Offset a CCW convex polygon outward by `r` (Minkowski sum with a disk,
/// arcs discretised; the arc radius is inflated so the chords stay at least
/// `r` away from the polygon).
fn offset_polygon(hull: &[[f64; 2]], r: f64) -> Vec<[f64; 2]> {
    let n = hull.len();
    let max_arc = 30f64.to_radians();
    let r_arc = r / (max_arc / 2.0).cos();
    let mut out = Vec::new();
    for i in 0..n {
        let prev = hull[(i + n - 1) % n];
        let cur = hull[i];
        let next = hull[(i + 1) % n];
        let norm = |d: [f64; 2]| {
            let l = (d[0] * d[0] + d[1] * d[1]).sqrt();
            [d[0] / l, d[1] / l]
        };
        // outward normals of the incident edges (CCW polygon: rotate -90)
        let e0 = norm([cur[0] - prev[0], cur[1] - prev[1]]);
        let e1 = norm([next[0] - cur[0], next[1] - cur[1]]);
        let n0 = [e0[1], -e0[0]];
        let n1 = [e1[1], -e1[0]];
        let a0 = n0[1].atan2(n0[0]);
        let mut a1 = n1[1].atan2(n1[0]);
        while a1 < a0 {
            a1 += std::f64::consts::TAU;
        }
        let steps = ((a1 - a0) / max_arc).ceil().max(1.0) as usize;
        for s in 0..=steps {
            let t = a0 + (a1 - a0) * s as f64 / steps as f64;
            out.push([cur[0] + r_arc * t.cos(), cur[1] + r_arc * t.sin()]);
        }
    }
    out
}

fn quantize(p: [f64; 2]) -> (i64, i64) {
    ((p[0] / 1e-9).round() as i64, (p[1] / 1e-9).round() as i64)
}

fn run_delaunator(vertices: &[[f64; 2]]) -> Result<Vec<[usize; 3]>> {
    let pts: Vec<Point> = vertices.iter().map(|v| Point { x: v[0], y: v[1] }).collect();
    let t = triangulate(&pts);
    if t.triangles.is_empty() {
        return Err(Error::Mesh("degenerate input: triangulation is empty".into()));
    }
    // collinear point runs (e.g. midpoints on band edges) can yield exactly
    // degenerate triangles; they carry no area and are dropped
    let (mut xmin, mut xmax, mut ymin, mut ymax) =
        (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for v in vertices {
        xmin = xmin.min(v[0]);
        xmax = xmax.max(v[0]);
        ymin = ymin.min(v[1]);
        ymax = ymax.max(v[1]);
    }
    let area_floor = 1e-14 * (xmax - xmin).max(1e-300) * (ymax - ymin).max(1e-300);
    let mut tris = Vec::with_capacity(t.triangles.len() / 3);
    for tri in t.triangles.chunks_exact(3) {
        let (a, b, c) = (tri[0], tri[1], tri[2]);
        let signed = cross(vertices[a], vertices[b], vertices[c]);
        if signed.abs() / 2.0 <= area_floor {
            continue;
        }
        // normalize to positive (counter-clockwise) orientation
        if signed > 0.0 {
            tris.push([a, b, c]);
        } else {
            tris.push([a, c, b]);
        }
    }
    if tris.is_empty() {
        return Err(Error::Mesh("degenerate input: all triangles have zero area".into()));
    }
    Ok(tris)
}

/// Build the refined triangulation. Points closer than `cutoff` are merged;
/// the data hull is surrounded by an extension band of width
/// `params.extension`; triangle edges are split at midpoints until the
/// inner/outer edge-length targets hold.
pub fn build_mesh(points: &[[f64; 2]], params: &MeshParams) -> Result<TriangleMesh> {
    if params.max_edge_inner <= 0.0 || params.max_edge_outer <= 0.0 || params.extension < 0.0 {
        return Err(Error::invalid("mesh parameters must be positive"));
    }
    let merged = merge_close_points(points, params.cutoff);
    let hull = convex_hull(&merged);
    if hull.len() < 3 {
        return Err(Error::Mesh(format!(
            "need at least 3 non-collinear points after cutoff merging, got {} hull vertices",
            hull.len()
        )));
    }

    let mut vertices = merged.clone();
    if params.extension > 0.0 {
        let band = offset_polygon(&hull, params.extension);
        let mut seen: BTreeSet<(i64, i64)> = vertices.iter().map(|&p| quantize(p)).collect();
        for p in band {
            if seen.insert(quantize(p)) {
                vertices.push(p);
            }
        }
    }

    // refinement: split every too-long edge at its midpoint and re-triangulate
    let inner_tol = params.max_edge_inner * params.max_edge_inner * (1.0 + 1e-9);
    let outer_tol = params.max_edge_outer * params.max_edge_outer * (1.0 + 1e-9);
    let mut triangles = run_delaunator(&vertices)?;
    let mut existing: BTreeSet<(i64, i64)> = vertices.iter().map(|&p| quantize(p)).collect();
    for _round in 0..60 {
        let mut new_points: BTreeSet<(i64, i64)> = BTreeSet::new();
        let mut added: Vec<[f64; 2]> = Vec::new();
        for t in &triangles {
            let centroid = [
                (vertices[t[0]][0] + vertices[t[1]][0] + vertices[t[2]][0]) / 3.0,
                (vertices[t[0]][1] + vertices[t[1]][1] + vertices[t[2]][1]) / 3.0,
            ];
            let limit2 = if inside_convex(&hull, centroid, 1e-12) {
                inner_tol
            } else {
                outer_tol
            };
            for e in 0..3 {
                let a = vertices[t[e]];
                let b = vertices[t[(e + 1) % 3]];
                if dist2(a, b) > limit2 {
                    let mid = [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0];
                    let key = quantize(mid);
                    if !existing.contains(&key) && new_points.insert(key) {
                        added.push(mid);
                    }
                }
            }
        }
        if added.is_empty() {
            break;
        }
        existing.extend(new_points);
        vertices.extend(added);
        triangles = run_delaunator(&vertices)?;
    }

    // boundary vertices: endpoints of edges used by exactly one triangle
    let mut edge_use: std::collections::BTreeMap<(usize, usize), u32> = Default::default();
    for t in &triangles {
        for e in 0..3 {
            let (a, b) = (t[e], t[(e + 1) % 3]);
            let key = (a.min(b), a.max(b));
            *edge_use.entry(key).or_insert(0) += 1;
        }
    }
    let mut boundary = vec![false; vertices.len()];
    for (&(a, b), &uses) in &edge_use {
        if uses == 1 {
            boundary[a] = true;
            boundary[b] = true;
        }
    }

    let mut referenced = vec![false; vertices.len()];
    for t in &triangles {
        for &v in t {
            referenced[v] = true;
        }
    }
    if referenced.iter().any(|r| !r) {
        return Err(Error::Mesh("triangulation left unreferenced vertices".into()));
    }

    let n = vertices.len();
    Ok(TriangleMesh {
        vertices,
        triangles,
        boundary,
        vertex_elevation_km: vec![0.0; n],
        data_hull: hull,
    })
}

impl TriangleMesh {
    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn boundary_flags(&self) -> &[bool] {
        &self.boundary
    }

    pub fn vertex_elevations_km(&self) -> &[f64] {
        &self.vertex_elevation_km
    }

    pub fn set_vertex_elevations(&mut self, elev: Vec<f64>) {
        assert_eq!(elev.len(), self.vertices.len());
        self.vertex_elevation_km = elev;
    }

    pub fn data_hull(&self) -> &[[f64; 2]] {
        &self.data_hull
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        cross(self.vertices[a], self.vertices[b], self.vertices[c]) / 2.0
    }

    /// Barycentric weights of `p` in triangle `t` (may be negative outside).
    fn barycentric(&self, t: usize, p: [f64; 2]) -> [f64; 3] {
        let [ia, ib, ic] = self.triangles[t];
        let (a, b, c) = (self.vertices[ia], self.vertices[ib], self.vertices[ic]);
        let det = cross(a, b, c);
        let w0 = cross(p, b, c) / det;
        let w1 = cross(a, p, c) / det;
        let w2 = 1.0 - w0 - w1;
        [w0, w1, w2]
    }

    /// Export as delimited text: a vertex table then a triangle table.
    pub fn write(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "vertices {}", self.vertices.len())?;
        for (i, v) in self.vertices.iter().enumerate() {
            writeln!(
                w,
                "{} {} {} {} {}",
                v[0],
                v[1],
                u8::from(self.boundary[i]),
                self.vertex_elevation_km[i],
                i
            )?;
        }
        writeln!(w, "triangles {}", self.triangles.len())?;
        for t in &self.triangles {
            writeln!(w, "{} {} {}", t[0], t[1], t[2])?;
        }
        writeln!(w, "hull {}", self.data_hull.len())?;
        for h in &self.data_hull {
            writeln!(w, "{} {}", h[0], h[1])?;
        }
        Ok(())
    }

    pub fn read(r: impl Read) -> Result<Self> {
        let mut lines = BufReader::new(r).lines();
        let mut next_line = || -> Result<String> {
            lines
                .next()
                .ok_or_else(|| Error::Parse("truncated mesh file".into()))?
                .map_err(Error::from)
        };
        let head = next_line()?;
        let n: usize = head
            .strip_prefix("vertices ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Parse("mesh file must start with 'vertices N'".into()))?;
        let mut vertices = Vec::with_capacity(n);
        let mut boundary = Vec::with_capacity(n);
        let mut elev = Vec::with_capacity(n);
        for _ in 0..n {
            let line = next_line()?;
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() < 4 {
                return Err(Error::Parse(format!("bad mesh vertex row: {line:?}")));
            }
            vertices.push([
                f[0].parse().map_err(|_| Error::Parse("bad vertex x".into()))?,
                f[1].parse().map_err(|_| Error::Parse("bad vertex y".into()))?,
            ]);
            boundary.push(f[2] == "1");
            elev.push(f[3].parse().map_err(|_| Error::Parse("bad vertex elevation".into()))?);
        }
        let head = next_line()?;
        let m: usize = head
            .strip_prefix("triangles ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Parse("expected 'triangles N'".into()))?;
        let mut triangles = Vec::with_capacity(m);
        for _ in 0..m {
            let line = next_line()?;
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 3 {
                return Err(Error::Parse(format!("bad mesh triangle row: {line:?}")));
            }
            let parse = |s: &str| -> Result<usize> {
                s.parse().map_err(|_| Error::Parse("bad triangle index".into()))
            };
            triangles.push([parse(f[0])?, parse(f[1])?, parse(f[2])?]);
        }
        let mut data_hull = Vec::new();
        if let Ok(head) = next_line() {
            if let Some(k) = head.strip_prefix("hull ").and_then(|s| s.parse::<usize>().ok()) {
                for _ in 0..k {
                    let line = next_line()?;
                    let f: Vec<&str> = line.split_whitespace().collect();
                    data_hull.push([
                        f[0].parse().map_err(|_| Error::Parse("bad hull x".into()))?,
                        f[1].parse().map_err(|_| Error::Parse("bad hull y".into()))?,
                    ]);
                }
            }
        }
        Ok(TriangleMesh {
            vertex_elevation_km: elev,
            boundary,
            data_hull,
            vertices,
            triangles,
        })
    }
}

/// Uniform-grid triangle index used for point location.
struct TriLocator<'m> {
    mesh: &'m TriangleMesh,
    xmin: f64,
    ymin: f64,
    cell: f64,
    nx: usize,
    ny: usize,
    buckets: Vec<Vec<usize>>,
}

impl<'m> TriLocator<'m> {
    fn new(mesh: &'m TriangleMesh) -> Self {
        let (mut xmin, mut ymin) = (f64::INFINITY, f64::INFINITY);
        let (mut xmax, mut ymax) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for v in &mesh.vertices {
            xmin = xmin.min(v[0]);
            xmax = xmax.max(v[0]);
            ymin = ymin.min(v[1]);
            ymax = ymax.max(v[1]);
        }
        let target = (mesh.triangles.len() as f64).sqrt().ceil().max(1.0) as usize;
        let nx = target.min(256);
        let ny = target.min(256);
        let cell = ((xmax - xmin) / nx as f64)
            .max((ymax - ymin) / ny as f64)
            .max(1e-12);
        let nx = ((xmax - xmin) / cell).ceil().max(1.0) as usize;
        let ny = ((ymax - ymin) / cell).ceil().max(1.0) as usize;
        let mut buckets = vec![Vec::new(); nx * ny];
        for (t, tri) in mesh.triangles.iter().enumerate() {
            let xs = tri.map(|i| mesh.vertices[i][0]);
            let ys = tri.map(|i| mesh.vertices[i][1]);
            let x0 = ((xs.iter().copied().fold(f64::INFINITY, f64::min) - xmin) / cell) as usize;
            let x1 = (((xs.iter().copied().fold(f64::NEG_INFINITY, f64::max) - xmin) / cell)
                as usize)
                .min(nx - 1);
            let y0 = ((ys.iter().copied().fold(f64::INFINITY, f64::min) - ymin) / cell) as usize;
            let y1 = (((ys.iter().copied().fold(f64::NEG_INFINITY, f64::max) - ymin) / cell)
                as usize)
                .min(ny - 1);
            for gy in y0..=y1 {
                for gx in x0..=x1 {
                    buckets[gy * nx + gx].push(t);
                }
            }
        }
        TriLocator {
            mesh,
            xmin,
            ymin,
            cell,
            nx,
            ny,
            buckets,
        }
    }

    fn locate(&self, p: [f64; 2]) -> Option<(usize, [f64; 3])> {
        let gx = ((p[0] - self.xmin) / self.cell).floor();
        let gy = ((p[1] - self.ymin) / self.cell).floor();
        if gx < 0.0 || gy < 0.0 {
            return None;
        }
        let (gx, gy) = (gx as usize, gy as usize);
        if gx >= self.nx || gy >= self.ny {
            return None;
        }
        const TOL: f64 = 1e-10;
        for &t in &self.buckets[gy * self.nx + gx] {
            let w = self.mesh.barycentric(t, p);
            if w.iter().all(|&x| x >= -TOL) {
                return Some((t, w));
            }
        }
        None
    }
}

/// Barycentric projector rows for `locations`; out-of-domain locations get
/// empty rows (flagged, not fatal).
pub fn projector(mesh: &TriangleMesh, locations: &[[f64; 2]]) -> ObservationMatrix {
    let locator = TriLocator::new(mesh);
    let rows = locations
        .iter()
        .map(|&p| match locator.locate(p) {
            Some((t, w)) => {
                let tri = mesh.triangles[t];
                // clamp tiny negatives and renormalize so weights sum to one
                let w = w.map(|x| x.max(0.0));
                let s: f64 = w.iter().sum();
                let mut row: Vec<(usize, f64)> = tri
                    .iter()
                    .zip(w.iter())
                    .filter(|(_, &wi)| wi > 0.0)
                    .map(|(&v, &wi)| (v, wi / s))
                    .collect();
                row.sort_by_key(|&(v, _)| v);
                row
            }
            None => Vec::new(),
        })
        .collect();
    ObservationMatrix {
        n_vertices: mesh.n_vertices(),
        rows,
    }
}

/// Bilinear elevation at every vertex; extension-band vertices outside the
/// raster are clamped to the nearest in-extent value. `lon_mean`/`lat_mean`
/// are the centring means that map mesh coordinates back to raster
/// coordinates.
pub fn vertex_elevations(
    mesh: &TriangleMesh,
    raster: &ElevationRaster,
    lon_mean: f64,
    lat_mean: f64,
) -> Result<Vec<f64>> {
    if raster.value_range().is_none() {
        return Err(Error::data("elevation raster holds no data"));
    }
    mesh.vertices
        .iter()
        .map(|v| {
            raster
                .elevation_clamped(v[0] + lon_mean, v[1] + lat_mean)
                .ok_or_else(|| Error::data("raster lookup failed"))
        })
        .collect()
}
