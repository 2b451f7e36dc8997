//! Chart atlases with SPD metric fields and their sampled meshes.
//!
//! A manifold (with or without boundary) is a list of ball / half-ball
//! coordinate charts, transition maps between them, and named metric field
//! sets. `sample_mesh` discretizes a coordinate window of the atlas into a
//! weighted vertex/edge graph: grid vertices per chart at spacing `h`,
//! 8-neighborhood edges (axes plus diagonals), exact-coincidence vertex
//! identification through transitions, seam edges across non-aligned chart
//! overlaps, and per-metric edge lengths by 3-point Gauss-Legendre quadrature.

use crate::expr::{eval_expr, ExprAst};
use crate::field::{FieldError, MetricField};
use crate::linalg;
use std::collections::{BTreeMap, HashMap};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AtlasError {
    #[error("window intersects no chart")]
    EmptyWindow,
    #[error("no metric `{0}` registered")]
    UnknownMetric(String),
    #[error("non-finite metric coefficient on chart {chart} at {point:?}")]
    NonFiniteCoefficient { chart: usize, point: Vec<f64> },
    #[error("metric not positive definite on chart {chart} at {point:?} (min eigenvalue {min_eig})")]
    NotPositiveDefinite { chart: usize, point: Vec<f64>, min_eig: f64 },
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("mesh vertex budget exceeded ({0} vertices)")]
    TooManyVertices(usize),
}

// ---------------------------------------------------------------------------
// Charts and atlases
// ---------------------------------------------------------------------------

/// Coordinate domain of a chart. Half-balls always carry their flat boundary
/// on `x_m = 0` with the domain on `x_m <= 0`.
#[derive(Debug, Clone)]
pub enum ChartDomain {
    Ball { center: Vec<f64>, radius: f64 },
    HalfBall { radius: f64 },
}

impl ChartDomain {
    pub fn contains(&self, p: &[f64]) -> bool {
        const TOL: f64 = 1e-9;
        match self {
            ChartDomain::Ball { center, radius } => {
                let r2: f64 = p.iter().zip(center).map(|(x, c)| (x - c) * (x - c)).sum();
                r2 <= (radius + TOL) * (radius + TOL)
            }
            ChartDomain::HalfBall { radius } => {
                let r2: f64 = p.iter().map(|x| x * x).sum();
                let last = p[p.len() - 1];
                r2 <= (radius + TOL) * (radius + TOL) && last <= TOL
            }
        }
    }

    pub fn is_half_ball(&self) -> bool {
        matches!(self, ChartDomain::HalfBall { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChartSide {
    /// Chart of the original manifold (or of the M part of a gluing).
    M,
    /// Chart of the Q part of a gluing.
    Q,
    /// Collar chart spanning the interface; the collar coordinate is the
    /// last one, negative on the M side.
    Collar,
}

#[derive(Debug, Clone)]
pub struct Chart {
    pub name: String,
    pub domain: ChartDomain,
    pub side: ChartSide,
}

/// Smooth map from one chart's coordinates into another's, valid where the
/// overlap predicate is positive.
#[derive(Debug, Clone)]
pub struct TransitionMap {
    pub source: usize,
    pub target: usize,
    pub map: Vec<ExprAst>,
    pub overlap: ExprAst,
}

impl TransitionMap {
    pub fn applies(&self, p: &[f64]) -> bool {
        matches!(eval_expr(&self.overlap, p), Ok(v) if v > 0.0)
    }

    pub fn apply(&self, p: &[f64]) -> Option<Vec<f64>> {
        self.map.iter().map(|c| eval_expr(c, p).ok()).collect()
    }

    /// Jacobian at `p` via the symbolic partials of the component maps.
    pub fn jacobian(&self, p: &[f64]) -> Option<Vec<f64>> {
        let m = p.len();
        let mut j = vec![0.0; m * m];
        for (r, comp) in self.map.iter().enumerate() {
            for c in 0..m {
                j[r * m + c] = eval_expr(&crate::expr::diff_expr(comp, c), p).ok()?;
            }
        }
        Some(j)
    }
}

/// Boundary component parametrized as `u -> (u, 0)` inside one half-ball
/// chart, with `u` in `[u_min, u_max]`, periodic when the component is a
/// circle.
#[derive(Debug, Clone)]
pub struct BoundaryComponent {
    pub chart: usize,
    pub u_min: f64,
    pub u_max: f64,
    pub periodic: bool,
}

#[derive(Debug, Clone)]
pub struct ManifoldWithBoundary {
    pub dim: usize,
    pub charts: Vec<Chart>,
    pub transitions: Vec<TransitionMap>,
    pub boundary: Vec<BoundaryComponent>,
    /// Named metric field sets; entry i applies to chart i (None where the
    /// metric is not defined, e.g. the M metric on Q-side charts).
    pub metrics: BTreeMap<String, Vec<Option<MetricField>>>,
}

impl ManifoldWithBoundary {
    pub fn metric(&self, tag: &str) -> Result<&Vec<Option<MetricField>>, AtlasError> {
        self.metrics.get(tag).ok_or_else(|| AtlasError::UnknownMetric(tag.to_string()))
    }

    pub fn metric_on_chart(&self, tag: &str, chart: usize) -> Result<&MetricField, AtlasError> {
        self.metric(tag)?
            .get(chart)
            .and_then(|o| o.as_ref())
            .ok_or_else(|| AtlasError::UnknownMetric(format!("{tag} on chart {chart}")))
    }
}

// ---------------------------------------------------------------------------
// SPD checks
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SpdReport {
    pub min_eigenvalue: f64,
    pub argmin: Vec<f64>,
    pub accepted: bool,
    pub samples: usize,
}

/// Scans the chart domain on a grid of spacing `grid_step` and reports the
/// smallest metric eigenvalue found. The chart is accepted iff it stays
/// strictly positive.
pub fn check_spd(
    domain: &ChartDomain,
    metric: &MetricField,
    grid_step: f64,
) -> Result<SpdReport, AtlasError> {
    let m = metric.dim();
    let radius = match domain {
        ChartDomain::Ball { radius, .. } | ChartDomain::HalfBall { radius } => *radius,
    };
    assert!(grid_step < radius, "grid step must resolve the chart");
    let steps = (radius / grid_step).floor() as i64;
    let mut min_eig = f64::INFINITY;
    let mut argmin = vec![0.0; m];
    let mut samples = 0usize;
    let mut idx = vec![-steps; m];
    loop {
        let p: Vec<f64> = match domain {
            ChartDomain::Ball { center, .. } => {
                idx.iter().zip(center).map(|(i, c)| c + *i as f64 * grid_step).collect()
            }
            ChartDomain::HalfBall { .. } => idx.iter().map(|i| *i as f64 * grid_step).collect(),
        };
        if domain.contains(&p) {
            samples += 1;
            let g = metric.matrix(&p)?;
            if g.iter().any(|v| !v.is_finite()) {
                return Err(AtlasError::NonFiniteCoefficient { chart: usize::MAX, point: p });
            }
            let lam = linalg::min_eigenvalue_sym(&g, m);
            if lam < min_eig {
                min_eig = lam;
                argmin = p;
            }
        }
        // odometer increment
        let mut k = 0;
        loop {
            idx[k] += 1;
            if idx[k] <= steps {
                break;
            }
            idx[k] = -steps;
            k += 1;
            if k == m {
                return Ok(SpdReport { min_eigenvalue: min_eig, argmin, accepted: min_eig > 0.0, samples });
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Windows
// ---------------------------------------------------------------------------

/// Sampling extent: a coordinate rectangle per chart (charts without an entry
/// are not sampled), with optional excluded balls (punctured domains).
#[derive(Debug, Clone, Default)]
pub struct Window {
    pub rects: BTreeMap<usize, (Vec<f64>, Vec<f64>)>,
    pub excluded: Vec<(usize, Vec<f64>, f64)>,
}

impl Window {
    pub fn single(chart: usize, lo: Vec<f64>, hi: Vec<f64>) -> Window {
        let mut rects = BTreeMap::new();
        rects.insert(chart, (lo, hi));
        Window { rects, excluded: Vec::new() }
    }

    pub fn with_rect(mut self, chart: usize, lo: Vec<f64>, hi: Vec<f64>) -> Window {
        self.rects.insert(chart, (lo, hi));
        self
    }

    pub fn contains(&self, chart: usize, p: &[f64]) -> bool {
        const TOL: f64 = 1e-9;
        let Some((lo, hi)) = self.rects.get(&chart) else { return false };
        if !p.iter().zip(lo.iter().zip(hi)).all(|(x, (l, h))| *x >= l - TOL && *x <= h + TOL) {
            return false;
        }
        for (c, center, r) in &self.excluded {
            if *c == chart {
                let d2: f64 = p.iter().zip(center).map(|(x, y)| (x - y) * (x - y)).sum();
                if d2 < r * r {
                    return false;
                }
            }
        }
        true
    }
}

// ---------------------------------------------------------------------------
// Mesh
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Default)]
pub struct VertexFlags {
    pub in_m: bool,
    pub in_q: bool,
    pub on_interface: bool,
}

#[derive(Debug, Clone)]
pub struct Vertex {
    pub chart: usize,
    pub coords: Vec<f64>,
    pub flags: VertexFlags,
}

#[derive(Debug, Clone)]
enum TagDef {
    Fields,
    /// Lengths of `base` scaled by exp of a linearly interpolated per-vertex
    /// exponent field (conformal deformation).
    ConformalOf { base: String, exponent: Vec<f64> },
}

#[derive(Debug, Clone)]
pub struct Mesh {
    pub dim: usize,
    pub h: f64,
    pub vertices: Vec<Vertex>,
    pub edges: Vec<(u32, u32)>,
    /// edge lengths per registered metric tag, parallel to `edges`
    pub edge_len: BTreeMap<String, Vec<f64>>,
    tag_defs: BTreeMap<String, TagDef>,
    pub adjacency: Vec<Vec<(u32, u32)>>, // vertex -> (edge index, neighbor)
}

impl Mesh {
    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn lengths(&self, tag: &str) -> Result<&[f64], AtlasError> {
        self.edge_len
            .get(tag)
            .map(|v| v.as_slice())
            .ok_or_else(|| AtlasError::UnknownMetric(tag.to_string()))
    }

    pub fn has_tag(&self, tag: &str) -> bool {
        self.edge_len.contains_key(tag)
    }

    /// Exponent field and base tag of a conformal tag.
    pub fn conformal_exponent(&self, tag: &str) -> Option<(&str, &[f64])> {
        match self.tag_defs.get(tag) {
            Some(TagDef::ConformalOf { base, exponent }) => Some((base, exponent)),
            _ => None,
        }
    }

    /// Nearest mesh vertex to chart point `(chart, p)` by coordinate distance
    /// within that chart.
    pub fn nearest_vertex(&self, chart: usize, p: &[f64]) -> Option<u32> {
        let mut best: Option<(f64, u32)> = None;
        for (i, v) in self.vertices.iter().enumerate() {
            if v.chart != chart {
                continue;
            }
            let d2: f64 = v.coords.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum();
            if best.map_or(true, |(bd, _)| d2 < bd) {
                best = Some((d2, i as u32));
            }
        }
        best.map(|(_, i)| i)
    }

    /// Registers a conformally deformed copy of `base`: every edge length is
    /// rescaled by quadrature of `exp(E)` with `E` interpolated linearly along
    /// the edge from the per-vertex exponent field.
    pub fn register_conformal(
        &mut self,
        tag: &str,
        base: &str,
        exponent: Vec<f64>,
        man: &ManifoldWithBoundary,
    ) -> Result<(), AtlasError> {
        assert_eq!(exponent.len(), self.vertices.len());
        let fields = man.metric(base)?;
        let mut lens = Vec::with_capacity(self.edges.len());
        for (a, b) in &self.edges {
            let va = &self.vertices[*a as usize];
            let vb = &self.vertices[*b as usize];
            let (ea, eb) = (exponent[*a as usize], exponent[*b as usize]);
            let len = if ea == 0.0 && eb == 0.0 {
                self.edge_len[base][lens.len()]
            } else {
                let (chart, pa, pb) = common_chart_segment(man, va, vb, Some(fields))
                    .ok_or(AtlasError::UnknownMetric(format!("{base} segment")))?;
                let g = fields[chart].as_ref().ok_or_else(|| {
                    AtlasError::UnknownMetric(format!("{base} on chart {chart}"))
                })?;
                conformal_segment_length(g, &pa, &pb, ea, eb)?
            };
            lens.push(len);
        }
        self.edge_len.insert(tag.to_string(), lens);
        self.tag_defs
            .insert(tag.to_string(), TagDef::ConformalOf { base: base.to_string(), exponent });
        Ok(())
    }
}

/// Length of segment `a -> b` under `exp(2E) g`, with `E` linear along the
/// segment between endpoint values.
pub fn conformal_segment_length(
    g: &MetricField,
    a: &[f64],
    b: &[f64],
    ea: f64,
    eb: f64,
) -> Result<f64, FieldError> {
    const NODES: [(f64, f64); 3] = [
        (0.5 - 0.387_298_334_620_741_7, 5.0 / 18.0),
        (0.5, 8.0 / 18.0),
        (0.5 + 0.387_298_334_620_741_7, 5.0 / 18.0),
    ];
    let m = a.len();
    let v: Vec<f64> = (0..m).map(|i| b[i] - a[i]).collect();
    let mut acc = 0.0;
    let mut q = vec![0.0; m];
    for (t, w) in NODES {
        for i in 0..m {
            q[i] = a[i] + t * v[i];
        }
        let e = ea + t * (eb - ea);
        acc += w * e.exp() * g.speed(&q, &v)?;
    }
    Ok(acc)
}

/// Finds a chart containing both endpoints (their own charts first, then any
/// chart reachable by one transition from each) and returns the segment in
/// that chart's coordinates. With `fields` given, only charts carrying the
/// metric are considered.
pub fn common_chart_segment(
    man: &ManifoldWithBoundary,
    a: &Vertex,
    b: &Vertex,
    fields: Option<&[Option<MetricField>]>,
) -> Option<(usize, Vec<f64>, Vec<f64>)> {
    let into_chart = |target: usize, chart: usize, coords: &[f64]| -> Option<Vec<f64>> {
        if chart == target {
            return Some(coords.to_vec());
        }
        for t in &man.transitions {
            if t.source == chart && t.target == target && t.applies(coords) {
                if let Some(p) = t.apply(coords) {
                    if man.charts[target].domain.contains(&p) {
                        return Some(p);
                    }
                }
            }
        }
        None
    };
    let mut candidates: Vec<usize> = vec![a.chart, b.chart];
    candidates.extend(0..man.charts.len());
    for c in candidates {
        if let Some(f) = fields {
            if f.get(c).map_or(true, |m| m.is_none()) {
                continue;
            }
        }
        if let (Some(pa), Some(pb)) =
            (into_chart(c, a.chart, &a.coords), into_chart(c, b.chart, &b.coords))
        {
            return Some((c, pa, pb));
        }
    }
    None
}

// ---------------------------------------------------------------------------
// Mesh sampling
// ---------------------------------------------------------------------------

const MAX_VERTICES: usize = 4_000_000;

fn quantize(p: &[f64]) -> Vec<i64> {
    p.iter().map(|x| (x / 1e-6).round() as i64).collect()
}

/// Samples the atlas into a mesh. Grid vertices per chart at spacing `h`
/// (restricted to domain, window, and side condition), edges along axes and
/// diagonals, vertices identified across charts when a transition maps them
/// onto each other exactly, seam edges otherwise.
pub fn sample_mesh(
    man: &ManifoldWithBoundary,
    h: f64,
    window: &Window,
) -> Result<Mesh, AtlasError> {
    assert!(h > 0.0);
    let m = man.dim;
    // Per-chart grids.
    let mut grid: Vec<BTreeMap<Vec<i64>, u32>> = vec![BTreeMap::new(); man.charts.len()];
    let mut all: Vec<(usize, Vec<f64>)> = Vec::new();
    for (ci, chart) in man.charts.iter().enumerate() {
        let Some((lo, hi)) = window.rects.get(&ci) else { continue };
        let lo_i: Vec<i64> = lo.iter().map(|x| (x / h - 1e-9).ceil() as i64).collect();
        let hi_i: Vec<i64> = hi.iter().map(|x| (x / h + 1e-9).floor() as i64).collect();
        if lo_i.iter().zip(&hi_i).any(|(a, b)| a > b) {
            continue;
        }
        let mut idx = lo_i.clone();
        'grid: loop {
            let p: Vec<f64> = idx.iter().map(|i| *i as f64 * h).collect();
            if chart.domain.contains(&p) && window.contains(ci, &p) {
                grid[ci].insert(idx.clone(), all.len() as u32);
                all.push((ci, p));
                if all.len() > MAX_VERTICES {
                    return Err(AtlasError::TooManyVertices(all.len()));
                }
            }
            let mut k = 0;
            loop {
                idx[k] += 1;
                if idx[k] <= hi_i[k] {
                    break;
                }
                idx[k] = lo_i[k];
                k += 1;
                if k == m {
                    break 'grid;
                }
            }
        }
    }
    if all.is_empty() {
        return Err(AtlasError::EmptyWindow);
    }

    // Identify exact coincidences through transitions (union-find).
    let mut parent: Vec<u32> = (0..all.len() as u32).collect();
    fn find(parent: &mut [u32], mut i: u32) -> u32 {
        while parent[i as usize] != i {
            parent[i as usize] = parent[parent[i as usize] as usize];
            i = parent[i as usize];
        }
        i
    }
    let mut spatial: HashMap<(usize, Vec<i64>), u32> = HashMap::new();
    for (i, (ci, p)) in all.iter().enumerate() {
        spatial.insert((*ci, quantize(p)), i as u32);
    }
    let mut seams: Vec<(u32, u32)> = Vec::new();
    for t in &man.transitions {
        for (i, (ci, p)) in all.iter().enumerate() {
            if *ci != t.source || !t.applies(p) {
                continue;
            }
            let Some(q) = t.apply(p) else { continue };
            if let Some(&j) = spatial.get(&(t.target, quantize(&q))) {
                let (ri, rj) = (find(&mut parent, i as u32), find(&mut parent, j));
                if ri != rj {
                    let (lo, hi) = if ri < rj { (ri, rj) } else { (rj, ri) };
                    parent[hi as usize] = lo;
                }
            } else {
                // Non-aligned overlap: link to the surrounding grid cell.
                let cell: Vec<i64> = q.iter().map(|x| (x / h).floor() as i64).collect();
                let mut offs = vec![0i64; m];
                loop {
                    let key: Vec<i64> = cell.iter().zip(&offs).map(|(c, o)| c + o).collect();
                    if let Some(&j) = grid[t.target].get(&key) {
                        seams.push((i as u32, j));
                    }
                    let mut k = 0;
                    loop {
                        offs[k] += 1;
                        if offs[k] <= 1 {
                            break;
                        }
                        offs[k] = 0;
                        k += 1;
                        if k == m {
                            break;
                        }
                    }
                    if k == m {
                        break;
                    }
                }
            }
        }
    }

    // Canonical ids.
    let mut canon: Vec<u32> = vec![u32::MAX; all.len()];
    let mut vertices: Vec<Vertex> = Vec::new();
    for i in 0..all.len() as u32 {
        let r = find(&mut parent, i);
        if canon[r as usize] == u32::MAX {
            let (ci, p) = &all[r as usize];
            let side = man.charts[*ci].side;
            let on_interface = match (man.charts[*ci].domain.is_half_ball(), side) {
                (true, _) => p[m - 1].abs() <= 1e-12,
                (false, ChartSide::Collar) => p[m - 1].abs() <= 1e-12,
                _ => false,
            };
            let flags = VertexFlags {
                in_m: side == ChartSide::M || (side == ChartSide::Collar && p[m - 1] <= 1e-12),
                in_q: side == ChartSide::Q || (side == ChartSide::Collar && p[m - 1] >= -1e-12),
                on_interface,
            };
            canon[r as usize] = vertices.len() as u32;
            vertices.push(Vertex { chart: *ci, coords: p.clone(), flags });
        }
        canon[i as usize] = canon[r as usize];
    }
    // Merge side flags across identified representatives.
    for i in 0..all.len() {
        let v = canon[i] as usize;
        let (ci, p) = &all[i];
        let side = man.charts[*ci].side;
        match side {
            ChartSide::M => vertices[v].flags.in_m = true,
            ChartSide::Q => vertices[v].flags.in_q = true,
            ChartSide::Collar => {
                if p[m - 1] <= 1e-12 {
                    vertices[v].flags.in_m = true;
                }
                if p[m - 1] >= -1e-12 {
                    vertices[v].flags.in_q = true;
                }
            }
        }
        if man.charts[*ci].domain.is_half_ball() && p[m - 1].abs() <= 1e-12 {
            vertices[v].flags.on_interface = true;
        }
    }

    // Edges: canonical direction offsets within each chart grid.
    let mut offsets: Vec<Vec<i64>> = Vec::new();
    {
        let mut o = vec![-1i64; m];
        loop {
            if o.iter().any(|&x| x != 0) {
                // keep only one representative of +/- pairs
                if o.iter().find(|&&x| x != 0).copied().unwrap() > 0 {
                    offsets.push(o.clone());
                }
            }
            let mut k = 0;
            loop {
                o[k] += 1;
                if o[k] <= 1 {
                    break;
                }
                o[k] = -1;
                k += 1;
                if k == m {
                    break;
                }
            }
            if k == m {
                break;
            }
        }
    }
    let mut edge_set: BTreeMap<(u32, u32), ()> = BTreeMap::new();
    for (ci, g) in grid.iter().enumerate() {
        let _ = ci;
        for (idx, &raw) in g {
            let a = canon[find(&mut parent, raw) as usize];
            for off in &offsets {
                let nidx: Vec<i64> = idx.iter().zip(off).map(|(i, o)| i + o).collect();
                if let Some(&nraw) = g.get(&nidx) {
                    let b = canon[find(&mut parent, nraw) as usize];
                    if a != b {
                        let key = if a < b { (a, b) } else { (b, a) };
                        edge_set.insert(key, ());
                    }
                }
            }
        }
    }
    for (raw_a, raw_b) in seams {
        let a = canon[find(&mut parent, raw_a) as usize];
        let b = canon[find(&mut parent, raw_b) as usize];
        if a != b {
            let key = if a < b { (a, b) } else { (b, a) };
            edge_set.insert(key, ());
        }
    }
    let edges: Vec<(u32, u32)> = edge_set.into_keys().collect();

    // Per-tag edge lengths.
    let mut edge_len: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut tag_defs: BTreeMap<String, TagDef> = BTreeMap::new();
    for (tag, fields) in &man.metrics {
        use rayon::prelude::*;
        let lens: Vec<f64> = edges
            .par_iter()
            .map(|(a, b)| -> f64 {
                let va = &vertices[*a as usize];
                let vb = &vertices[*b as usize];
                let Some((chart, pa, pb)) = common_chart_segment(man, va, vb, Some(fields)) else {
                    return f64::NAN;
                };
                match fields[chart].as_ref() {
                    None => f64::NAN,
                    Some(g) => g.segment_length(&pa, &pb).unwrap_or(f64::NAN),
                }
            })
            .collect();
        edge_len.insert(tag.clone(), lens);
        tag_defs.insert(tag.clone(), TagDef::Fields);
    }

    let mut adjacency: Vec<Vec<(u32, u32)>> = vec![Vec::new(); vertices.len()];
    for (ei, (a, b)) in edges.iter().enumerate() {
        adjacency[*a as usize].push((ei as u32, *b));
        adjacency[*b as usize].push((ei as u32, *a));
    }

    Ok(Mesh { dim: m, h, vertices, edges, edge_len, tag_defs, adjacency })
}

/// Vertices flagged as lying on the boundary (`x_m = 0` rows of half-ball
/// charts, or the interface of a gluing).
pub fn boundary_vertices(mesh: &Mesh) -> Vec<u32> {
    mesh.vertices
        .iter()
        .enumerate()
        .filter(|(_, v)| v.flags.on_interface)
        .map(|(i, _)| i as u32)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse_expr;
    use approx::assert_relative_eq;

    fn flat_half_plane(radius: f64) -> ManifoldWithBoundary {
        let chart = Chart {
            name: "m0".into(),
            domain: ChartDomain::HalfBall { radius },
            side: ChartSide::M,
        };
        let mut metrics = BTreeMap::new();
        metrics.insert("g".to_string(), vec![Some(MetricField::identity(2))]);
        ManifoldWithBoundary {
            dim: 2,
            charts: vec![chart],
            transitions: vec![],
            boundary: vec![BoundaryComponent { chart: 0, u_min: -radius, u_max: radius, periodic: false }],
            metrics,
        }
    }

    #[test]
    fn spd_identity_metric() {
        let g = MetricField::identity(2);
        let dom = ChartDomain::Ball { center: vec![0.0, 0.0], radius: 1.0 };
        let rep = check_spd(&dom, &g, 0.25).unwrap();
        assert_eq!(rep.min_eigenvalue, 1.0);
        assert!(rep.accepted);
    }

    #[test]
    fn spd_half_ball_bounded_coefficient() {
        // diag(1, 1 - x2) with x2 <= 0 keeps eigenvalues >= 1.
        let g = MetricField::from_exprs(
            2,
            vec![
                parse_expr("1", 2).unwrap(),
                parse_expr("0", 2).unwrap(),
                parse_expr("1 - x2", 2).unwrap(),
            ],
        );
        let dom = ChartDomain::HalfBall { radius: 1.0 };
        let rep = check_spd(&dom, &g, 0.2).unwrap();
        assert!(rep.min_eigenvalue >= 1.0 - 1e-12);
    }

    #[test]
    fn spd_full_ball_reports_smallest_eigenvalue() {
        let g = MetricField::from_exprs(
            2,
            vec![
                parse_expr("1", 2).unwrap(),
                parse_expr("0", 2).unwrap(),
                parse_expr("1 - x2", 2).unwrap(),
            ],
        );
        let dom = ChartDomain::Ball { center: vec![0.0, 0.0], radius: 1.0 };
        let rep = check_spd(&dom, &g, 0.3).unwrap();
        // grid point nearest the top has x2 = 0.9 => eigenvalue 0.1
        assert!(rep.accepted);
        assert!(rep.min_eigenvalue < 1.0);
        assert_relative_eq!(rep.min_eigenvalue, 1.0 - rep.argmin[1], epsilon = 1e-12);
    }

    #[test]
    fn flat_half_plane_mesh_shape() {
        let man = flat_half_plane(100.0);
        let window = Window::single(0, vec![-1.0, -1.0], vec![1.0, 1.0]);
        let mesh = sample_mesh(&man, 0.5, &window).unwrap();
        // x1 in {-1,-0.5,0,0.5,1}, x2 in {-1,-0.5,0}
        assert_eq!(mesh.vertex_count(), 15);
        assert!(mesh.vertices.iter().all(|v| v.coords[1] <= 1e-12));
        let lens = mesh.lengths("g").unwrap();
        for (ei, (a, b)) in mesh.edges.iter().enumerate() {
            let va = &mesh.vertices[*a as usize];
            let vb = &mesh.vertices[*b as usize];
            let d: f64 = va
                .coords
                .iter()
                .zip(&vb.coords)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            assert_relative_eq!(lens[ei], d, epsilon = 1e-12);
        }
        assert_eq!(boundary_vertices(&mesh).len(), 5);
    }

    #[test]
    fn empty_window_is_error() {
        let man = flat_half_plane(100.0);
        let window = Window::single(0, vec![5.0, 5.0], vec![6.0, 6.0]);
        assert!(matches!(sample_mesh(&man, 0.5, &window), Err(AtlasError::EmptyWindow)));
    }

    #[test]
    fn boundaryless_chart_has_no_boundary_vertices() {
        let chart = Chart {
            name: "plane".into(),
            domain: ChartDomain::Ball { center: vec![0.0, 0.0], radius: 50.0 },
            side: ChartSide::M,
        };
        let mut metrics = BTreeMap::new();
        metrics.insert("g".to_string(), vec![Some(MetricField::identity(2))]);
        let man = ManifoldWithBoundary {
            dim: 2,
            charts: vec![chart],
            transitions: vec![],
            boundary: vec![],
            metrics,
        };
        let mesh =
            sample_mesh(&man, 0.5, &Window::single(0, vec![-1.0, -1.0], vec![1.0, 1.0])).unwrap();
        assert!(boundary_vertices(&mesh).is_empty());
    }

    #[test]
    fn hyperbolic_vertical_edge_length() {
        // (1/x2^2) I sampled between x2 = 1 and 2 at h = 0.05: summed vertical
        // edges approximate ln 2 well within 2%.
        let chart = Chart {
            name: "h".into(),
            domain: ChartDomain::Ball { center: vec![0.0, 1.5], radius: 10.0 },
            side: ChartSide::M,
        };
        let mut metrics = BTreeMap::new();
        metrics.insert(
            "g".to_string(),
            vec![Some(MetricField::conformal_expr(2, "1/(x2*x2)"))],
        );
        let man = ManifoldWithBoundary {
            dim: 2,
            charts: vec![chart],
            transitions: vec![],
            boundary: vec![],
            metrics,
        };
        let mesh =
            sample_mesh(&man, 0.05, &Window::single(0, vec![-0.1, 1.0], vec![0.1, 2.0])).unwrap();
        // walk the column x1 = 0 from x2=1 to x2=2
        let lens = mesh.lengths("g").unwrap();
        let mut total = 0.0;
        for (ei, (a, b)) in mesh.edges.iter().enumerate() {
            let va = &mesh.vertices[*a as usize];
            let vb = &mesh.vertices[*b as usize];
            if va.coords[0] == 0.0 && vb.coords[0] == 0.0 && (va.coords[1] - vb.coords[1]).abs() < 0.05 + 1e-9 {
                total += lens[ei];
            }
        }
        assert_relative_eq!(total, std::f64::consts::LN_2, max_relative = 0.02);
    }

    #[test]
    fn periodic_wrap_identifies_seam_column() {
        // Cylinder: theta in [0, 1] with wrap x1 -> x1 - 1.
        let chart = Chart {
            name: "cyl".into(),
            domain: ChartDomain::Ball { center: vec![0.0, 0.0], radius: 100.0 },
            side: ChartSide::M,
        };
        let wrap = TransitionMap {
            source: 0,
            target: 0,
            map: vec![parse_expr("x1 - 1", 2).unwrap(), parse_expr("x2", 2).unwrap()],
            overlap: parse_expr("x1 - 0.75", 2).unwrap(),
        };
        let mut metrics = BTreeMap::new();
        metrics.insert("g".to_string(), vec![Some(MetricField::identity(2))]);
        let man = ManifoldWithBoundary {
            dim: 2,
            charts: vec![chart],
            transitions: vec![wrap],
            boundary: vec![],
            metrics,
        };
        let mesh =
            sample_mesh(&man, 0.25, &Window::single(0, vec![0.0, 0.0], vec![1.0, 1.0])).unwrap();
        // 5x5 grid with last column identified onto the first: 4*5 vertices.
        assert_eq!(mesh.vertex_count(), 20);
    }
}
