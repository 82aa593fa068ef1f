//! Multi-object visualization.
//!
//! Each detection's saliency map is reduced to a canonical shape (ellipse from
//! principal components, iso-contours, density clusters or a convex polygon)
//! and all detections are drawn into one overlay, with a detection's box,
//! label and shape sharing one palette color.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::Detection;
use crate::image::{encode_png, Image, ImageError};
use crate::saliency::SaliencyMap;

#[derive(Debug, Error)]
pub enum MovisError {
    #[error("saliency map is all zero")]
    EmptyMap,
    #[error("quantile must lie strictly between 0 and 1, got {0}")]
    BadQuantile(f64),
    #[error("point spread is degenerate")]
    DegenerateSpread,
    #[error("{shapes} shapes for {detections} detections")]
    CountMismatch { detections: usize, shapes: usize },
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error(transparent)]
    Image(#[from] ImageError),
}

pub const DEFAULT_QUANTILE: f64 = 0.8;
pub const DEFAULT_CONTOUR_LEVELS: [f32; 2] = [0.5, 0.8];
pub const DEFAULT_MIN_PTS: usize = 4;

/// Ten high-contrast colors, cycled per detection.
pub const PALETTE: [[u8; 3]; 10] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MovisMethod {
    PrincipalComponents,
    Contours,
    DensityClusters,
    ConvexPolygon,
}

impl MovisMethod {
    pub const ALL: [MovisMethod; 4] =
        [Self::PrincipalComponents, Self::Contours, Self::DensityClusters, Self::ConvexPolygon];

    pub fn name(&self) -> &'static str {
        match self {
            Self::PrincipalComponents => "principal_components",
            Self::Contours => "contours",
            Self::DensityClusters => "density_clusters",
            Self::ConvexPolygon => "convex_polygon",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "principal_components" | "ellipse" | "pca" => Some(Self::PrincipalComponents),
            "contours" | "contour" => Some(Self::Contours),
            "density_clusters" | "clusters" | "dbscan" => Some(Self::DensityClusters),
            "convex_polygon" | "polygon" | "hull" => Some(Self::ConvexPolygon),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportantPixelSet {
    /// `(row, col)`
    pub coordinates: Vec<(usize, usize)>,
    pub weights: Vec<f32>,
    pub threshold: f32,
}

impl ImportantPixelSet {
    pub fn len(&self) -> usize {
        self.coordinates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coordinates.is_empty()
    }
}

/// Pixels whose value reaches the `q`-quantile of the map's nonzero values.
///
/// The quantile interpolates linearly between order statistics at position
/// `q * (n - 1)` of the sorted nonzero values.
pub fn select_important(map: &SaliencyMap, q: f64) -> Result<ImportantPixelSet, MovisError> {
    if !(q > 0.0 && q < 1.0) {
        return Err(MovisError::BadQuantile(q));
    }
    let mut nonzero: Vec<f32> = map.grid.iter().copied().filter(|&v| v > 0.0).collect();
    if nonzero.is_empty() {
        // A constant nonzero map normalizes to zeros too; treat it as all-important.
        if map.raw_range.0 == map.raw_range.1 && map.raw_range.0 > 0.0 {
            let coordinates = (0..map.height).flat_map(|r| (0..map.width).map(move |c| (r, c))).collect::<Vec<_>>();
            let weights = vec![0.0; coordinates.len()];
            return Ok(ImportantPixelSet { coordinates, weights, threshold: 0.0 });
        }
        return Err(MovisError::EmptyMap);
    }
    nonzero.sort_by(f32::total_cmp);
    let pos = q * (nonzero.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    let frac = pos - lo as f64;
    let threshold = (nonzero[lo] as f64 + frac * (nonzero[hi] as f64 - nonzero[lo] as f64)) as f32;
    let mut coordinates = Vec::new();
    let mut weights = Vec::new();
    for r in 0..map.height {
        for c in 0..map.width {
            let v = map.get(r, c);
            if v >= threshold && v > 0.0 {
                coordinates.push((r, c));
                weights.push(v);
            }
        }
    }
    Ok(ImportantPixelSet { coordinates, weights, threshold })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    /// `(row, col)` center of mass.
    pub center: (f64, f64),
    /// Unit axes in `(row, col)` components; major first.
    pub axes: [(f64, f64); 2],
    /// `2 * sqrt(eigenvalue)` per axis.
    pub lengths: [f64; 2],
}

/// Principal-component ellipse of a weighted point set.
pub fn to_ellipse(pixels: &ImportantPixelSet) -> Result<Ellipse, MovisError> {
    let pts: Vec<(f64, f64)> = pixels.coordinates.iter().map(|&(r, c)| (r as f64, c as f64)).collect();
    let w: Vec<f64> = if pixels.weights.iter().all(|&v| v <= 0.0) {
        vec![1.0; pts.len()]
    } else {
        pixels.weights.iter().map(|&v| v.max(0.0) as f64).collect()
    };
    ellipse_from_points(&pts, &w)
}

pub fn ellipse_from_points(pts: &[(f64, f64)], weights: &[f64]) -> Result<Ellipse, MovisError> {
    let total: f64 = weights.iter().sum();
    if pts.len() < 2 || total <= 0.0 {
        return Err(MovisError::DegenerateSpread);
    }
    let mr = pts.iter().zip(weights).map(|(p, w)| p.0 * w).sum::<f64>() / total;
    let mc = pts.iter().zip(weights).map(|(p, w)| p.1 * w).sum::<f64>() / total;
    let (mut srr, mut scc, mut src) = (0.0, 0.0, 0.0);
    for (p, w) in pts.iter().zip(weights) {
        let (dr, dc) = (p.0 - mr, p.1 - mc);
        srr += w * dr * dr;
        scc += w * dc * dc;
        src += w * dr * dc;
    }
    let (srr, scc, src) = (srr / total, scc / total, src / total);
    if srr == 0.0 && scc == 0.0 && src == 0.0 {
        return Err(MovisError::DegenerateSpread);
    }
    // Symmetric 2x2 eigen-decomposition.
    let half_trace = (srr + scc) / 2.0;
    let disc = (((srr - scc) / 2.0).powi(2) + src * src).sqrt();
    let l1 = half_trace + disc;
    let l2 = (half_trace - disc).max(0.0);
    let major = if src.abs() > 0.0 {
        normalize((l1 - scc, src))
    } else if srr >= scc {
        (1.0, 0.0)
    } else {
        (0.0, 1.0)
    };
    let minor = (-major.1, major.0);
    Ok(Ellipse { center: (mr, mc), axes: [major, minor], lengths: [2.0 * l1.max(0.0).sqrt(), 2.0 * l2.sqrt()] })
}

fn normalize(v: (f64, f64)) -> (f64, f64) {
    let n = (v.0 * v.0 + v.1 * v.1).sqrt();
    (v.0 / n, v.1 / n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polyline {
    /// `(row, col)` points in grid coordinates (pixel centers at integers).
    pub points: Vec<(f64, f64)>,
    pub closed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContourLevel {
    pub level: f32,
    pub polylines: Vec<Polyline>,
}

/// Marching-squares iso-lines of `map` at each level. Cells are formed by
/// four neighbouring pixel centers; saddles are resolved by the cell mean.
pub fn to_contours(map: &SaliencyMap, levels: &[f32]) -> Result<Vec<ContourLevel>, MovisError> {
    if levels.windows(2).any(|w| w[0] >= w[1]) || levels.iter().any(|&l| !(l > 0.0 && l < 1.0)) {
        return Err(MovisError::InvalidParam("contour levels must be strictly increasing in (0, 1)".into()));
    }
    Ok(levels.iter().map(|&level| ContourLevel { level, polylines: iso_lines(map, level) }).collect())
}

type EdgeKey = (usize, usize, u8);

fn iso_lines(map: &SaliencyMap, level: f32) -> Vec<Polyline> {
    let (h, w) = (map.height, map.width);
    if h < 2 || w < 2 {
        return Vec::new();
    }
    let above = |r: usize, c: usize| map.get(r, c) >= level;
    // Edge keys: (r, c, 0) horizontal edge from (r,c) to (r,c+1);
    // (r, c, 1) vertical edge from (r,c) to (r+1,c).
    let point_on = |e: EdgeKey| -> (f64, f64) {
        let (r, c, dir) = e;
        let (r2, c2) = if dir == 0 { (r, c + 1) } else { (r + 1, c) };
        let (a, b) = (map.get(r, c) as f64, map.get(r2, c2) as f64);
        let t = (level as f64 - a) / (b - a);
        (r as f64 + t * (r2 - r) as f64, c as f64 + t * (c2 - c) as f64)
    };
    let mut segments: Vec<(EdgeKey, EdgeKey)> = Vec::new();
    for r in 0..h - 1 {
        for c in 0..w - 1 {
            let tl = above(r, c);
            let tr = above(r, c + 1);
            let br = above(r + 1, c + 1);
            let bl = above(r + 1, c);
            let top = (r, c, 0);
            let bottom = (r + 1, c, 0);
            let left = (r, c, 1);
            let right = (r, c + 1, 1);
            let case = (tl as u8) << 3 | (tr as u8) << 2 | (br as u8) << 1 | bl as u8;
            let center_above = || {
                let m = (map.get(r, c) + map.get(r, c + 1) + map.get(r + 1, c + 1) + map.get(r + 1, c)) / 4.0;
                m >= level
            };
            match case {
                0 | 15 => {}
                1 | 14 => segments.push((left, bottom)),
                2 | 13 => segments.push((bottom, right)),
                3 | 12 => segments.push((left, right)),
                4 | 11 => segments.push((top, right)),
                6 | 9 => segments.push((top, bottom)),
                7 | 8 => segments.push((left, top)),
                5 => {
                    // tr and bl above
                    if center_above() {
                        segments.push((left, top));
                        segments.push((bottom, right));
                    } else {
                        segments.push((top, right));
                        segments.push((left, bottom));
                    }
                }
                10 => {
                    // tl and br above
                    if center_above() {
                        segments.push((top, right));
                        segments.push((left, bottom));
                    } else {
                        segments.push((left, top));
                        segments.push((bottom, right));
                    }
                }
                _ => unreachable!(),
            }
        }
    }
    chain_segments(&segments)
        .into_iter()
        .map(|(keys, closed)| Polyline { points: keys.into_iter().map(point_on).collect(), closed })
        .collect()
}

/// Joins segments sharing edge points into maximal chains.
fn chain_segments(segments: &[(EdgeKey, EdgeKey)]) -> Vec<(Vec<EdgeKey>, bool)> {
    use std::collections::BTreeMap;
    let mut adj: BTreeMap<EdgeKey, Vec<usize>> = BTreeMap::new();
    for (i, (a, b)) in segments.iter().enumerate() {
        adj.entry(*a).or_default().push(i);
        adj.entry(*b).or_default().push(i);
    }
    let mut used = vec![false; segments.len()];
    let mut chains = Vec::new();
    let walk = |start: EdgeKey, first_seg: usize, used: &mut Vec<bool>| -> Vec<EdgeKey> {
        let mut chain = vec![start];
        let mut seg = first_seg;
        let mut at = start;
        loop {
            used[seg] = true;
            let (a, b) = segments[seg];
            let next = if a == at { b } else { a };
            chain.push(next);
            at = next;
            match adj[&at].iter().find(|&&s| !used[s]) {
                Some(&s) => seg = s,
                None => break,
            }
        }
        chain
    };
    // Open chains start at endpoints of degree 1.
    let endpoints: Vec<EdgeKey> = adj.iter().filter(|(_, v)| v.len() == 1).map(|(k, _)| *k).collect();
    for e in endpoints {
        let s = adj[&e][0];
        if !used[s] {
            chains.push((walk(e, s, &mut used), false));
        }
    }
    for i in 0..segments.len() {
        if !used[i] {
            let mut chain = walk(segments[i].0, i, &mut used);
            let closed = chain.first() == chain.last();
            if closed {
                chain.pop();
            }
            chains.push((chain, closed));
        }
    }
    chains
}

/// DBSCAN labels: `Some(cluster)` or `None` for noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSet {
    pub points: Vec<(usize, usize)>,
    pub labels: Vec<Option<usize>>,
    pub eps: f64,
    pub min_pts: usize,
}

impl ClusterSet {
    pub fn cluster_count(&self) -> usize {
        self.labels.iter().flatten().max().map_or(0, |m| m + 1)
    }

    pub fn clustered_points(&self) -> Vec<(usize, usize)> {
        self.points.iter().zip(&self.labels).filter(|(_, l)| l.is_some()).map(|(p, _)| *p).collect()
    }
}

fn dist2(a: (usize, usize), b: (usize, usize)) -> f64 {
    let dr = a.0 as f64 - b.0 as f64;
    let dc = a.1 as f64 - b.1 as f64;
    dr * dr + dc * dc
}

/// Standard DBSCAN over pixel coordinates. A point's neighbourhood includes
/// itself. Points are scanned in index order, so a border point reachable from
/// several clusters joins the one started first.
pub fn dbscan(points: &[(usize, usize)], eps: f64, min_pts: usize) -> Result<ClusterSet, MovisError> {
    if !(eps > 0.0) || min_pts == 0 {
        return Err(MovisError::InvalidParam("dbscan needs eps > 0 and min_pts >= 1".into()));
    }
    let eps2 = eps * eps;
    let neighbours =
        |i: usize| -> Vec<usize> { (0..points.len()).filter(|&j| dist2(points[i], points[j]) <= eps2).collect() };
    let mut labels: Vec<Option<usize>> = vec![None; points.len()];
    let mut visited = vec![false; points.len()];
    let mut cluster = 0;
    for i in 0..points.len() {
        if visited[i] {
            continue;
        }
        visited[i] = true;
        let seeds = neighbours(i);
        if seeds.len() < min_pts {
            continue;
        }
        labels[i] = Some(cluster);
        let mut queue: std::collections::VecDeque<usize> = seeds.into_iter().collect();
        while let Some(j) = queue.pop_front() {
            if labels[j].is_none() {
                labels[j] = Some(cluster);
            }
            if visited[j] {
                continue;
            }
            visited[j] = true;
            let nb = neighbours(j);
            if nb.len() >= min_pts {
                queue.extend(nb);
            }
        }
        cluster += 1;
    }
    Ok(ClusterSet { points: points.to_vec(), labels, eps, min_pts })
}

/// Sorted distances from every point to its `k`-th nearest other point.
pub fn k_distances(points: &[(usize, usize)], k: usize) -> Vec<f64> {
    let mut out: Vec<f64> = points
        .iter()
        .enumerate()
        .filter_map(|(i, &p)| {
            let mut d: Vec<f64> =
                points.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &q)| dist2(p, q).sqrt()).collect();
            if d.len() < k || k == 0 {
                return None;
            }
            d.sort_by(f64::total_cmp);
            Some(d[k - 1])
        })
        .collect();
    out.sort_by(f64::total_cmp);
    out
}

/// Elbow of the sorted k-distance curve: the point farthest from the chord
/// joining its first and last values. Never below one pixel.
pub fn eps_from_k_distance(points: &[(usize, usize)], k: usize) -> f64 {
    let d = k_distances(points, k);
    if d.len() < 3 {
        return d.last().copied().unwrap_or(1.0).max(1.0);
    }
    let n = d.len() - 1;
    let (x0, y0, x1, y1) = (0.0, d[0], n as f64, d[n]);
    let len = ((x1 - x0).powi(2) + (y1 - y0).powi(2)).sqrt();
    let mut best = (0, -1.0);
    for (i, &y) in d.iter().enumerate() {
        let dist = ((y1 - y0) * i as f64 - (x1 - x0) * y + x1 * y0 - y1 * x0).abs() / len;
        if dist > best.1 {
            best = (i, dist);
        }
    }
    d[best.0].max(1.0)
}

pub fn cluster_pixels(pixels: &ImportantPixelSet, eps: Option<f64>, min_pts: usize) -> Result<ClusterSet, MovisError> {
    let eps = eps.unwrap_or_else(|| eps_from_k_distance(&pixels.coordinates, min_pts));
    dbscan(&pixels.coordinates, eps, min_pts)
}

fn cross(o: (i64, i64), a: (i64, i64), b: (i64, i64)) -> i64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Andrew's monotone chain over `(x, y)` integer points. Returns hull
/// vertices counter-clockwise (in a y-up frame) without collinear points,
/// starting from the lowest-x, lowest-y vertex.
pub fn convex_hull(points: &[(i64, i64)]) -> Vec<(i64, i64)> {
    let mut pts = points.to_vec();
    pts.sort_unstable();
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<(i64, i64)> = Vec::with_capacity(2 * pts.len());
    for &p in &pts {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower = hull.len() + 1;
    for &p in pts.iter().rev().skip(1) {
        while hull.len() >= lower && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    hull
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polygon {
    /// `(row, col)` vertices, counter-clockwise in `(x = col, y = row)`.
    pub vertices: Vec<(usize, usize)>,
    /// Fewer than three non-collinear points; vertices then describe a point
    /// or segment.
    pub degenerate: bool,
}

/// Convex hull of the non-noise points of a cluster set.
pub fn to_convex_polygon(clusters: &ClusterSet) -> Polygon {
    let pts: Vec<(i64, i64)> = clusters.clustered_points().iter().map(|&(r, c)| (c as i64, r as i64)).collect();
    let hull = convex_hull(&pts);
    let degenerate = hull.len() < 3;
    let vertices = if degenerate {
        // collinear input: keep the two extremes
        let mut sorted = pts.clone();
        sorted.sort_unstable();
        sorted.dedup();
        match (sorted.first(), sorted.last()) {
            (Some(&a), Some(&b)) if a != b => vec![a, b],
            (Some(&a), _) => vec![a],
            _ => vec![],
        }
    } else {
        hull
    };
    Polygon { vertices: vertices.into_iter().map(|(x, y)| (y as usize, x as usize)).collect(), degenerate }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", content = "geometry", rename_all = "snake_case")]
pub enum ShapeGeometry {
    Ellipse(Ellipse),
    ContourSet(Vec<ContourLevel>),
    ClusterSet(ClusterSet),
    Polygon(Polygon),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanonicalShape {
    #[serde(flatten)]
    pub shape: ShapeGeometry,
    pub detection_ref: usize,
    pub color_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MovisParams {
    pub quantile: f64,
    pub levels: [f32; 2],
    pub min_pts: usize,
    pub eps: Option<f64>,
}

impl Default for MovisParams {
    fn default() -> Self {
        Self { quantile: DEFAULT_QUANTILE, levels: DEFAULT_CONTOUR_LEVELS, min_pts: DEFAULT_MIN_PTS, eps: None }
    }
}

/// Canonical shape for detection `detection_ref`. Maps whose important pixels
/// cannot support the requested shape fall back to the nearest simpler one
/// (a degenerate polygon, or an ellipse with zero lengths). An all-zero map
/// yields an empty degenerate polygon.
pub fn canonical_shape(
    method: MovisMethod,
    map: &SaliencyMap,
    detection_ref: usize,
    params: &MovisParams,
) -> Result<CanonicalShape, MovisError> {
    match shape_geometry(method, map, params) {
        Ok(shape) => Ok(CanonicalShape { shape, detection_ref, color_index: detection_ref % PALETTE.len() }),
        Err(MovisError::EmptyMap) => Ok(CanonicalShape {
            shape: ShapeGeometry::Polygon(Polygon { vertices: Vec::new(), degenerate: true }),
            detection_ref,
            color_index: detection_ref % PALETTE.len(),
        }),
        Err(e) => Err(e),
    }
}

fn shape_geometry(method: MovisMethod, map: &SaliencyMap, params: &MovisParams) -> Result<ShapeGeometry, MovisError> {
    Ok(match method {
        MovisMethod::Contours => ShapeGeometry::ContourSet(to_contours(map, &params.levels)?),
        MovisMethod::PrincipalComponents => {
            let px = select_important(map, params.quantile)?;
            match to_ellipse(&px) {
                Ok(e) => ShapeGeometry::Ellipse(e),
                Err(MovisError::DegenerateSpread) => {
                    let (r, c) = px.coordinates[0];
                    ShapeGeometry::Ellipse(Ellipse {
                        center: (r as f64, c as f64),
                        axes: [(1.0, 0.0), (0.0, 1.0)],
                        lengths: [0.0, 0.0],
                    })
                }
                Err(e) => return Err(e),
            }
        }
        MovisMethod::DensityClusters => {
            let px = select_important(map, params.quantile)?;
            ShapeGeometry::ClusterSet(cluster_pixels(&px, params.eps, params.min_pts)?)
        }
        MovisMethod::ConvexPolygon => {
            let px = select_important(map, params.quantile)?;
            ShapeGeometry::Polygon(to_convex_polygon(&cluster_pixels(&px, params.eps, params.min_pts)?))
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LegendEntry {
    pub detection_index: usize,
    pub class_id: usize,
    pub score: f32,
    pub color_index: usize,
}

/// Raster overlay, upscaled from the input image.
#[derive(Debug, Clone)]
pub struct Overlay {
    pub width: usize,
    pub height: usize,
    pub scale: usize,
    pub pixels: Vec<[u8; 3]>,
    pub legend: Vec<LegendEntry>,
}

impl Overlay {
    fn from_image(image: &Image, scale: usize) -> Self {
        let (w, h) = (image.width() * scale, image.height() * scale);
        let mut pixels = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let p = image.pixel((y / scale) * image.width() + x / scale);
                pixels.push(p.map(crate::image::to_u8));
            }
        }
        Self { width: w, height: h, scale, pixels, legend: Vec::new() }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        self.pixels[y * self.width + x]
    }

    fn put(&mut self, x: i64, y: i64, color: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.pixels[y as usize * self.width + x as usize] = color;
        }
    }

    fn line(&mut self, a: (f64, f64), b: (f64, f64), color: [u8; 3]) {
        let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            self.put((a.0 + t * (b.0 - a.0)).round() as i64, (a.1 + t * (b.1 - a.1)).round() as i64, color);
        }
    }

    fn rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, color: [u8; 3], filled: bool) {
        for y in y0..=y1 {
            for x in x0..=x1 {
                if filled || y == y0 || y == y1 || x == x0 || x == x1 {
                    self.put(x, y, color);
                }
            }
        }
    }

    /// Grid `(row, col)` pixel-center coordinates to canvas `(x, y)`.
    fn to_canvas(&self, rc: (f64, f64)) -> (f64, f64) {
        let s = self.scale as f64;
        (rc.1 * s + s / 2.0, rc.0 * s + s / 2.0)
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Rgb(self.pixel(x as usize, y as usize))
        })
    }

    pub fn to_png(&self) -> Result<Vec<u8>, MovisError> {
        Ok(encode_png(&self.to_rgb8())?)
    }
}

/// 3x5 digit glyphs, one row per `u8` with the low three bits used.
const DIGITS: [[u8; 5]; 10] = [
    [7, 5, 5, 5, 7],
    [2, 6, 2, 2, 7],
    [7, 1, 7, 4, 7],
    [7, 1, 7, 1, 7],
    [5, 5, 7, 1, 1],
    [7, 4, 7, 1, 7],
    [7, 4, 7, 5, 7],
    [7, 1, 1, 1, 1],
    [7, 5, 7, 5, 7],
    [7, 5, 7, 1, 7],
];

pub const DEFAULT_OVERLAY_SCALE: usize = 8;

/// Draws every detection's box, a class label tag and its shape in the
/// detection's palette color over an upscaled copy of `image`.
pub fn merge_visualization(
    image: &Image,
    detections: &[Detection],
    shapes: &[CanonicalShape],
    scale: usize,
) -> Result<Overlay, MovisError> {
    if detections.len() != shapes.len() {
        return Err(MovisError::CountMismatch { detections: detections.len(), shapes: shapes.len() });
    }
    let scale = scale.max(1);
    let mut overlay = Overlay::from_image(image, scale);
    let (w, h) = ((image.width() * scale) as f64, (image.height() * scale) as f64);
    for (i, (det, shape)) in detections.iter().zip(shapes).enumerate() {
        let color_index = i % PALETTE.len();
        let color = PALETTE[color_index];
        let b = det.bbox;
        let (x0, y0) = ((b.x_min as f64 * w).round() as i64, (b.y_min as f64 * h).round() as i64);
        let (x1, y1) =
            (((b.x_max as f64 * w).round() as i64 - 1).max(x0), ((b.y_max as f64 * h).round() as i64 - 1).max(y0));
        overlay.rect(x0, y0, x1, y1, color, false);
        draw_label(&mut overlay, x0, y0, det.class_id, color);
        draw_shape(&mut overlay, &shape.shape, color);
        overlay.legend.push(LegendEntry { detection_index: i, class_id: det.class_id, score: det.score, color_index });
    }
    Ok(overlay)
}

fn draw_label(overlay: &mut Overlay, x0: i64, y0: i64, class_id: usize, color: [u8; 3]) {
    let digits: Vec<usize> = class_id.to_string().bytes().map(|b| (b - b'0') as usize).collect();
    let tag_w = 4 * digits.len() as i64 + 1;
    overlay.rect(x0, y0, x0 + tag_w, y0 + 6, color, true);
    for (n, &d) in digits.iter().enumerate() {
        for (row, bits) in DIGITS[d].iter().enumerate() {
            for col in 0..3 {
                if bits & (4 >> col) != 0 {
                    overlay.put(x0 + 1 + 4 * n as i64 + col, y0 + 1 + row as i64, [0, 0, 0]);
                }
            }
        }
    }
}

fn draw_shape(overlay: &mut Overlay, shape: &ShapeGeometry, color: [u8; 3]) {
    match shape {
        ShapeGeometry::Ellipse(e) => {
            let n = 64;
            let mut prev = None;
            for i in 0..=n {
                let t = i as f64 / n as f64 * std::f64::consts::TAU;
                let (a, b) = (e.lengths[0] * t.cos(), e.lengths[1] * t.sin());
                let rc =
                    (e.center.0 + a * e.axes[0].0 + b * e.axes[1].0, e.center.1 + a * e.axes[0].1 + b * e.axes[1].1);
                let p = overlay.to_canvas(rc);
                if let Some(q) = prev {
                    overlay.line(q, p, color);
                }
                prev = Some(p);
            }
            let c = overlay.to_canvas(e.center);
            overlay.rect(c.0 as i64 - 1, c.1 as i64 - 1, c.0 as i64 + 1, c.1 as i64 + 1, color, true);
        }
        ShapeGeometry::ContourSet(levels) => {
            for level in levels {
                for line in &level.polylines {
                    let pts: Vec<_> = line.points.iter().map(|&p| overlay.to_canvas(p)).collect();
                    for seg in pts.windows(2) {
                        overlay.line(seg[0], seg[1], color);
                    }
                    if line.closed && pts.len() > 2 {
                        overlay.line(pts[pts.len() - 1], pts[0], color);
                    }
                }
            }
        }
        ShapeGeometry::ClusterSet(c) => {
            for (p, label) in c.points.iter().zip(&c.labels) {
                if label.is_some() {
                    let q = overlay.to_canvas((p.0 as f64, p.1 as f64));
                    overlay.rect(q.0 as i64 - 1, q.1 as i64 - 1, q.0 as i64, q.1 as i64, color, true);
                }
            }
        }
        ShapeGeometry::Polygon(poly) => {
            let pts: Vec<_> = poly.vertices.iter().map(|&(r, c)| overlay.to_canvas((r as f64, c as f64))).collect();
            for i in 0..pts.len() {
                let j = (i + 1) % pts.len();
                if pts.len() > 1 {
                    overlay.line(pts[i], pts[j], color);
                }
            }
        }
    }
}
