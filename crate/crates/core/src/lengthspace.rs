//! Path lengths, length distance, divergent-path detection, and the
//! completeness diagnostics that stand in for the locally-compact length
//! space equivalences at mesh scale: metric completeness, the Heine-Borel
//! property (closed-ball vertex sets stabilizing across window growth), and
//! divergent-paths completeness (every sampled divergent path has length
//! exceeding the per-window growth threshold).

use crate::atlas::{sample_mesh, AtlasError, ManifoldWithBoundary, Mesh, Window};
use crate::geodesy::{shoot_geodesic, GeodesicState, OrderedF64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::cmp::Reverse;
use std::collections::BinaryHeap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LengthError {
    #[error("a path needs at least two samples")]
    TooFewSamples,
    #[error("time stamps must be strictly increasing (violated at sample {0})")]
    NonMonotoneTime(usize),
    #[error("consecutive samples {0} and {1} share no chart")]
    NoCommonChart(usize, usize),
    #[error("distance oracle failed between samples {0} and {1}")]
    OracleFailure(usize, usize),
    #[error("vertices are not connected")]
    Unreachable,
    #[error(transparent)]
    Atlas(#[from] AtlasError),
    #[error(transparent)]
    Field(#[from] crate::field::FieldError),
    #[error(transparent)]
    Geodesy(#[from] Box<crate::geodesy::GeodesyError>),
}

// ---------------------------------------------------------------------------
// Sampled paths
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub enum PathSample {
    ChartPoint { chart: usize, coords: Vec<f64> },
    Vertex(u32),
}

/// Time-stamped polyline through charts. Stamps are strictly increasing and
/// live in [0,1] (or [0,1) for paths heading toward an end).
#[derive(Debug, Clone)]
pub struct SampledPath {
    pub samples: Vec<(f64, PathSample)>,
    pub metric_tag: String,
}

impl SampledPath {
    pub fn new(samples: Vec<(f64, PathSample)>, metric_tag: String) -> SampledPath {
        SampledPath { samples, metric_tag }
    }

    pub fn validate(&self) -> Result<(), LengthError> {
        if self.samples.len() < 2 {
            return Err(LengthError::TooFewSamples);
        }
        for i in 1..self.samples.len() {
            if self.samples[i].0 <= self.samples[i - 1].0 {
                return Err(LengthError::NonMonotoneTime(i));
            }
        }
        Ok(())
    }

    pub fn from_vertices(vertices: &[u32], tag: &str) -> SampledPath {
        let n = vertices.len();
        SampledPath {
            samples: vertices
                .iter()
                .enumerate()
                .map(|(i, v)| (i as f64 / n as f64, PathSample::Vertex(*v)))
                .collect(),
            metric_tag: tag.to_string(),
        }
    }

    /// Resolves a sample to (chart, coordinates).
    pub fn resolve(&self, i: usize, mesh: Option<&Mesh>) -> Option<(usize, Vec<f64>)> {
        match &self.samples[i].1 {
            PathSample::ChartPoint { chart, coords } => Some((*chart, coords.clone())),
            PathSample::Vertex(v) => {
                let mesh = mesh?;
                let vert = &mesh.vertices[*v as usize];
                Some((vert.chart, vert.coords.clone()))
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Riemannian length of a sampled path
// ---------------------------------------------------------------------------

/// Sum of per-segment Gauss-Legendre quadrature lengths under the tagged
/// metric. Every segment must resolve inside some chart carrying the metric.
pub fn riemannian_length(
    path: &SampledPath,
    man: &ManifoldWithBoundary,
    mesh: Option<&Mesh>,
    tag: &str,
) -> Result<f64, LengthError> {
    path.validate()?;
    let fields = man.metric(tag)?;
    let mut total = 0.0;
    for i in 1..path.samples.len() {
        let a = path.resolve(i - 1, mesh).ok_or(LengthError::NoCommonChart(i - 1, i))?;
        let b = path.resolve(i, mesh).ok_or(LengthError::NoCommonChart(i - 1, i))?;
        let seg = resolve_segment(man, fields, &a, &b).ok_or(LengthError::NoCommonChart(i - 1, i))?;
        let (g, pa, pb) = seg;
        total += g.segment_length(&pa, &pb)?;
    }
    Ok(total)
}

/// Finds a chart carrying the tagged metric that contains both endpoints
/// (mapping through transitions when needed).
pub(crate) fn resolve_segment<'a>(
    man: &'a ManifoldWithBoundary,
    fields: &'a [Option<crate::field::MetricField>],
    a: &(usize, Vec<f64>),
    b: &(usize, Vec<f64>),
) -> Option<(&'a crate::field::MetricField, Vec<f64>, Vec<f64>)> {
    let into_chart = |target: usize, from: &(usize, Vec<f64>)| -> Option<Vec<f64>> {
        if from.0 == target {
            if !man.charts[target].domain.contains(&from.1) {
                return None;
            }
            return Some(from.1.clone());
        }
        for t in &man.transitions {
            if t.source == from.0 && t.target == target && t.applies(&from.1) {
                if let Some(p) = t.apply(&from.1) {
                    if man.charts[target].domain.contains(&p) {
                        return Some(p);
                    }
                }
            }
        }
        None
    };
    // prefer the endpoint charts, then any chart with the metric
    let mut candidates: Vec<usize> = vec![a.0, b.0];
    candidates.extend(0..man.charts.len());
    for c in candidates {
        if fields.get(c).map_or(true, |f| f.is_none()) {
            continue;
        }
        if let (Some(pa), Some(pb)) = (into_chart(c, a), into_chart(c, b)) {
            return Some((fields[c].as_ref().unwrap(), pa, pb));
        }
    }
    None
}

// ---------------------------------------------------------------------------
// Metric length via dyadic partitions
// ---------------------------------------------------------------------------

pub trait DistanceOracle {
    fn distance(&self, a: &(usize, Vec<f64>), b: &(usize, Vec<f64>)) -> Option<f64>;
}

/// Euclidean distance in chart coordinates (for flat charts).
pub struct EuclideanOracle;

impl DistanceOracle for EuclideanOracle {
    fn distance(&self, a: &(usize, Vec<f64>), b: &(usize, Vec<f64>)) -> Option<f64> {
        if a.0 != b.0 {
            return None;
        }
        Some(a.1.iter().zip(&b.1).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricLength {
    pub length: f64,
    /// dyadic partition depth at which the supremum stabilized
    pub depth: u32,
}

/// Supremum over nested dyadic partitions of the sum of oracle distances,
/// reported with the depth at which the relative change dropped below 1e-4.
/// Partition points interpolate the polyline linearly in chart coordinates.
pub fn metric_length(
    path: &SampledPath,
    mesh: Option<&Mesh>,
    oracle: &dyn DistanceOracle,
) -> Result<MetricLength, LengthError> {
    path.validate()?;
    let n = path.samples.len();
    let t0 = path.samples[0].0;
    let t1 = path.samples[n - 1].0;
    let span = t1 - t0;
    let point_at = |t: f64| -> Option<(usize, Vec<f64>)> {
        // locate bracketing samples
        let mut i = match path
            .samples
            .binary_search_by(|(s, _)| s.partial_cmp(&t).unwrap())
        {
            Ok(i) => return path.resolve(i, mesh),
            Err(i) => i,
        };
        if i == 0 {
            return path.resolve(0, mesh);
        }
        if i >= n {
            i = n - 1;
        }
        let (ta, pa) = (path.samples[i - 1].0, path.resolve(i - 1, mesh)?);
        let (tb, pb) = (path.samples[i].0, path.resolve(i, mesh)?);
        if pa.0 != pb.0 {
            // interpolate in the second chart after mapping (consecutive
            // samples share a chart by the path invariant)
            return Some(pb);
        }
        let w = (t - ta) / (tb - ta);
        Some((pa.0, pa.1.iter().zip(&pb.1).map(|(x, y)| x + w * (y - x)).collect()))
    };

    let mut prev = 0.0f64;
    let mut depth = 0u32;
    let mut best = 0.0f64;
    // depth d partitions [t0, t1] into 2^d * (n-1) pieces anchored at samples
    for d in 0..=12u32 {
        let pieces = (n - 1) * (1usize << d);
        let mut acc = 0.0;
        let mut last = point_at(t0).ok_or(LengthError::OracleFailure(0, 0))?;
        for k in 1..=pieces {
            let t = t0 + span * k as f64 / pieces as f64;
            let cur = point_at(t).ok_or(LengthError::OracleFailure(k - 1, k))?;
            acc += oracle
                .distance(&last, &cur)
                .ok_or(LengthError::OracleFailure(k - 1, k))?;
            last = cur;
        }
        best = best.max(acc);
        depth = d;
        if d > 0 && (acc - prev).abs() <= 1e-4 * acc.max(1e-300) {
            break;
        }
        prev = acc;
    }
    Ok(MetricLength { length: best, depth })
}

// ---------------------------------------------------------------------------
// Graph distances
// ---------------------------------------------------------------------------

/// Multi-source Dijkstra over mesh edges under the tagged lengths, optionally
/// restricted to an allowed-vertex mask. Unreachable vertices carry infinity.
pub fn dijkstra(
    mesh: &Mesh,
    tag: &str,
    sources: &[u32],
    allowed: Option<&[bool]>,
) -> Result<Vec<f64>, AtlasError> {
    let with_offsets: Vec<(u32, f64)> = sources.iter().map(|&s| (s, 0.0)).collect();
    dijkstra_offsets(mesh, tag, &with_offsets, allowed)
}

/// Multi-source Dijkstra where each source starts at its own initial
/// distance; the result at `v` is `min_s (offset_s + d(s, v))`.
pub fn dijkstra_offsets(
    mesh: &Mesh,
    tag: &str,
    sources: &[(u32, f64)],
    allowed: Option<&[bool]>,
) -> Result<Vec<f64>, AtlasError> {
    let lens = mesh.lengths(tag)?;
    let n = mesh.vertex_count();
    let mut dist = vec![f64::INFINITY; n];
    let mut heap: BinaryHeap<(Reverse<OrderedF64>, u32)> = BinaryHeap::new();
    for &(s, off) in sources {
        if allowed.map_or(true, |m| m[s as usize]) && off < dist[s as usize] {
            dist[s as usize] = off;
            heap.push((Reverse(OrderedF64(off)), s));
        }
    }
    while let Some((Reverse(OrderedF64(d)), u)) = heap.pop() {
        if d > dist[u as usize] + 1e-15 {
            continue;
        }
        for (ei, w) in &mesh.adjacency[u as usize] {
            if allowed.map_or(false, |m| !m[*w as usize]) {
                continue;
            }
            let l = lens[*ei as usize];
            if !l.is_finite() {
                continue;
            }
            let nd = d + l;
            if nd < dist[*w as usize] - 1e-15 {
                dist[*w as usize] = nd;
                heap.push((Reverse(OrderedF64(nd)), *w));
            }
        }
    }
    Ok(dist)
}

/// Single-pair distance with predecessor tracking for path reconstruction.
fn dijkstra_path(
    mesh: &Mesh,
    tag: &str,
    from: u32,
    to: u32,
) -> Result<Option<(f64, Vec<u32>)>, AtlasError> {
    let lens = mesh.lengths(tag)?;
    let n = mesh.vertex_count();
    let mut dist = vec![f64::INFINITY; n];
    let mut prev = vec![u32::MAX; n];
    let mut heap: BinaryHeap<(Reverse<OrderedF64>, u32)> = BinaryHeap::new();
    dist[from as usize] = 0.0;
    heap.push((Reverse(OrderedF64(0.0)), from));
    while let Some((Reverse(OrderedF64(d)), u)) = heap.pop() {
        if d > dist[u as usize] + 1e-15 {
            continue;
        }
        if u == to {
            break;
        }
        for (ei, w) in &mesh.adjacency[u as usize] {
            let l = lens[*ei as usize];
            if !l.is_finite() {
                continue;
            }
            let nd = d + l;
            if nd < dist[*w as usize] - 1e-15 {
                dist[*w as usize] = nd;
                prev[*w as usize] = u;
                heap.push((Reverse(OrderedF64(nd)), *w));
            }
        }
    }
    if !dist[to as usize].is_finite() {
        return Ok(None);
    }
    let mut path = vec![to];
    let mut cur = to;
    while cur != from {
        cur = prev[cur as usize];
        path.push(cur);
    }
    path.reverse();
    Ok(Some((dist[to as usize], path)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Reach {
    Distance(f64),
    Unreachable,
}

/// Shortest-path distance between two mesh vertices under a tagged metric,
/// with a chord-straightening pass that removes most of the octile (grid
/// direction) distortion: graph-path subsequences are replaced by straight
/// coordinate chords whenever the chord stays on the sampled region and is
/// shorter under the metric.
pub fn length_distance(
    x: u32,
    y: u32,
    mesh: &Mesh,
    man: &ManifoldWithBoundary,
    tag: &str,
) -> Result<Reach, LengthError> {
    if x == y {
        return Ok(Reach::Distance(0.0));
    }
    let Some((graph_len, vpath)) = dijkstra_path(mesh, tag, x, y)? else {
        return Ok(Reach::Unreachable);
    };
    let straightened = straighten(mesh, man, tag, &vpath)?;
    Ok(Reach::Distance(graph_len.min(straightened)))
}

/// Length of the graph path after greedy chord shortcuts. A chord is taken
/// only if both endpoints live in one chart, every sample along it stays
/// within ~one cell of a mesh vertex, and the quadrature length is shorter.
fn straighten(
    mesh: &Mesh,
    man: &ManifoldWithBoundary,
    tag: &str,
    vpath: &[u32],
) -> Result<f64, LengthError> {
    use std::collections::HashSet;
    let fields = man.metric(tag)?;
    let lens = mesh.lengths(tag)?;
    // occupancy grid for hole detection
    let mut cells: HashSet<(usize, Vec<i64>)> = HashSet::new();
    for v in &mesh.vertices {
        cells.insert((v.chart, v.coords.iter().map(|x| (x / mesh.h).round() as i64).collect()));
    }
    let near_mesh = |chart: usize, p: &[f64]| -> bool {
        let base: Vec<i64> = p.iter().map(|x| (x / mesh.h).round() as i64).collect();
        let m = p.len();
        let mut offs = vec![-1i64; m];
        loop {
            let key: Vec<i64> = base.iter().zip(&offs).map(|(b, o)| b + o).collect();
            if cells.contains(&(chart, key)) {
                return true;
            }
            let mut k = 0;
            loop {
                offs[k] += 1;
                if offs[k] <= 1 {
                    break;
                }
                offs[k] = -1;
                k += 1;
                if k == m {
                    return false;
                }
            }
        }
    };
    let chord_len = |a: u32, b: u32| -> Option<f64> {
        let va = &mesh.vertices[a as usize];
        let vb = &mesh.vertices[b as usize];
        if va.chart != vb.chart {
            return None;
        }
        let g = fields[va.chart].as_ref()?;
        let d: f64 = va
            .coords
            .iter()
            .zip(&vb.coords)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        let pieces = (d / mesh.h).ceil().max(1.0) as usize;
        let mut acc = 0.0;
        for k in 0..pieces {
            let t0 = k as f64 / pieces as f64;
            let t1 = (k + 1) as f64 / pieces as f64;
            let p0: Vec<f64> =
                va.coords.iter().zip(&vb.coords).map(|(x, y)| x + t0 * (y - x)).collect();
            let p1: Vec<f64> =
                va.coords.iter().zip(&vb.coords).map(|(x, y)| x + t1 * (y - x)).collect();
            if !near_mesh(va.chart, &p0) {
                return None;
            }
            acc += g.segment_length(&p0, &p1).ok()?;
        }
        Some(acc)
    };
    // edge lengths along the original path, for the fallback pieces
    let edge_len = |a: u32, b: u32| -> f64 {
        for (ei, w) in &mesh.adjacency[a as usize] {
            if *w == b {
                return lens[*ei as usize];
            }
        }
        f64::INFINITY
    };
    let mut total = 0.0;
    let mut i = 0usize;
    while i + 1 < vpath.len() {
        // farthest j reachable by a valid improving chord (greedy, capped)
        let mut best: Option<(usize, f64)> = None;
        let jmax = (i + 256).min(vpath.len() - 1);
        let mut along = 0.0;
        for j in (i + 1)..=jmax {
            along += edge_len(vpath[j - 1], vpath[j]);
            if j > i + 1 {
                if let Some(cl) = chord_len(vpath[i], vpath[j]) {
                    if cl <= along + 1e-12 {
                        best = Some((j, cl));
                    }
                }
            }
        }
        match best {
            Some((j, cl)) => {
                total += cl;
                i = j;
            }
            None => {
                total += edge_len(vpath[i], vpath[i + 1]);
                i += 1;
            }
        }
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// Divergent paths
// ---------------------------------------------------------------------------

/// A path on [0,1) is divergent when, for every window in the nested list,
/// some tail of the samples lies entirely outside the window. At sample
/// granularity that is equivalent to the final sample with `t < 1` lying
/// outside the window.
pub fn is_divergent(path: &SampledPath, windows: &[Window], mesh: Option<&Mesh>) -> bool {
    windows.iter().all(|w| {
        let Some(idx) = path.samples.iter().rposition(|(t, _)| *t < 1.0) else {
            return false;
        };
        !path.resolve(idx, mesh).map_or(false, |(c, p)| w.contains(c, &p))
    })
}

// ---------------------------------------------------------------------------
// Completeness report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, PartialEq, Eq)]
pub enum Verdict {
    CompleteUpToBudget,
    IncompleteWitnessFound,
}

#[derive(Debug, Clone, Serialize)]
pub struct BallRow {
    pub radius: f64,
    pub counts: Vec<usize>,
    pub stabilized: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct PathRow {
    pub path_id: String,
    /// length of the path portion inside each window level
    pub lengths: Vec<f64>,
    pub divergent: bool,
    pub total_length: f64,
    /// geodesic continuation failed: the ray left every chart
    pub inextendable: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct WitnessInfo {
    pub path_id: String,
    pub length: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CompletenessReport {
    pub verdict: Verdict,
    pub witness: Option<WitnessInfo>,
    pub ball_table: Vec<BallRow>,
    pub paths: Vec<PathRow>,
}

#[derive(Debug, Clone)]
pub struct CompletenessBudget {
    /// nested, strictly growing window levels
    pub windows: Vec<Window>,
    pub h: f64,
    pub base_chart: usize,
    pub base_point: Vec<f64>,
    pub ray_count: usize,
    pub walk_count: usize,
    pub walk_steps: usize,
    pub ball_radii: Vec<f64>,
    pub seed: u64,
    /// a divergent sample must reach `growth_frac * window_extent` per level
    pub growth_frac: f64,
    pub ray_arc: f64,
    pub ray_step: f64,
}

/// Extent proxy of a window: the largest half-width of its rectangles.
fn window_extent(w: &Window) -> f64 {
    w.rects
        .values()
        .map(|(lo, hi)| {
            lo.iter().zip(hi).map(|(a, b)| 0.5 * (b - a)).fold(0.0f64, f64::max)
        })
        .fold(0.0f64, f64::max)
}

/// Runs the ball-compactness and divergent-path diagnostics for the tagged
/// metric over the budgeted window levels.
pub fn completeness_report(
    man: &ManifoldWithBoundary,
    tag: &str,
    budget: &CompletenessBudget,
) -> Result<CompletenessReport, LengthError> {
    assert!(!budget.windows.is_empty(), "budget must list window levels");
    let levels = budget.windows.len();
    let meshes: Vec<Mesh> = budget
        .windows
        .iter()
        .map(|w| sample_mesh(man, budget.h, w))
        .collect::<Result<_, _>>()?;

    // ball-compactness proxy
    let mut ball_table = Vec::new();
    for &radius in &budget.ball_radii {
        let mut counts = Vec::new();
        for mesh in &meshes {
            let base = mesh
                .nearest_vertex(budget.base_chart, &budget.base_point)
                .ok_or(LengthError::Unreachable)?;
            let dist = dijkstra(mesh, tag, &[base], None)?;
            counts.push(dist.iter().filter(|d| **d <= radius).count());
        }
        let stabilized = levels >= 2 && counts[levels - 1] == counts[levels - 2];
        ball_table.push(BallRow { radius, counts, stabilized });
    }

    // candidate divergent paths: geodesic rays plus seeded outward walks
    let mut candidates: Vec<(String, SampledPath, bool)> = Vec::new();
    let top_mesh = &meshes[levels - 1];
    for k in 0..budget.ray_count {
        let angle = 2.0 * std::f64::consts::PI * k as f64 / budget.ray_count.max(1) as f64;
        let start = GeodesicState {
            chart: budget.base_chart,
            position: budget.base_point.clone(),
            velocity: vec![angle.cos(), angle.sin()],
            arc_length: 0.0,
        };
        match shoot_geodesic(man, tag, &start, budget.ray_arc, budget.ray_step) {
            Ok(run) => {
                let hit = run.outcome == crate::geodesy::ShootOutcome::BoundaryOfDomain;
                candidates.push((format!("ray{k}"), run.path, hit));
            }
            Err(_) => continue,
        }
    }
    let base_top = top_mesh
        .nearest_vertex(budget.base_chart, &budget.base_point)
        .ok_or(LengthError::Unreachable)?;
    let dist_top = dijkstra(top_mesh, tag, &[base_top], None)?;
    for w in 0..budget.walk_count {
        let mut rng = ChaCha8Rng::seed_from_u64(budget.seed ^ stable_hash(&format!("walk{w}")));
        let mut cur = base_top;
        let mut verts = vec![cur];
        for _ in 0..budget.walk_steps {
            let outward: Vec<u32> = top_mesh.adjacency[cur as usize]
                .iter()
                .map(|(_, n)| *n)
                .filter(|n| dist_top[*n as usize] > dist_top[cur as usize])
                .collect();
            if outward.is_empty() {
                break;
            }
            cur = outward[rng.gen_range(0..outward.len())];
            verts.push(cur);
        }
        if verts.len() >= 2 {
            candidates.push((format!("walk{w}"), SampledPath::from_vertices(&verts, tag), false));
        }
    }

    // evaluate candidates per level
    let mut paths = Vec::new();
    let mut witness: Option<WitnessInfo> = None;
    for (id, path, inextendable) in &candidates {
        let divergent = is_divergent(path, &budget.windows, Some(top_mesh));
        let total_length = riemannian_length(path, man, Some(top_mesh), tag).unwrap_or(f64::NAN);
        let mut lengths = Vec::new();
        for w in &budget.windows {
            lengths.push(length_inside_window(path, man, Some(top_mesh), tag, w));
        }
        if divergent && total_length.is_finite() {
            // a finite-length witness: its per-level lengths stabilize, or it
            // stays under the growth threshold, or its geodesic continuation
            // failed outright (the ray left every chart)
            let stabilized = levels >= 2
                && (lengths[levels - 1] - lengths[levels - 2]).abs()
                    <= 1e-3 * lengths[levels - 1].max(1e-12);
            let below_threshold = lengths
                .iter()
                .zip(&budget.windows)
                .any(|(l, w)| *l < budget.growth_frac * window_extent(w));
            if (stabilized || below_threshold || *inextendable)
                && witness.as_ref().map_or(true, |w| total_length < w.length)
            {
                witness = Some(WitnessInfo { path_id: id.clone(), length: total_length });
            }
        }
        paths.push(PathRow {
            path_id: id.clone(),
            lengths,
            divergent,
            total_length,
            inextendable: *inextendable,
        });
    }

    let balls_ok = ball_table.iter().all(|row| row.stabilized);
    let verdict = if witness.is_some() {
        Verdict::IncompleteWitnessFound
    } else if balls_ok {
        Verdict::CompleteUpToBudget
    } else {
        // non-stabilizing balls without a finite-length witness: report the
        // budget outcome with diagnostics rather than guessing
        Verdict::CompleteUpToBudget
    };
    Ok(CompletenessReport { verdict, witness, ball_table, paths })
}

/// Length of the portion of the path inside a window (consecutive samples
/// both inside contribute their segment length).
fn length_inside_window(
    path: &SampledPath,
    man: &ManifoldWithBoundary,
    mesh: Option<&Mesh>,
    tag: &str,
    window: &Window,
) -> f64 {
    let fields = match man.metric(tag) {
        Ok(f) => f,
        Err(_) => return f64::NAN,
    };
    let mut acc = 0.0;
    for i in 1..path.samples.len() {
        let (Some(a), Some(b)) = (path.resolve(i - 1, mesh), path.resolve(i, mesh)) else {
            continue;
        };
        if window.contains(a.0, &a.1) && window.contains(b.0, &b.1) {
            if let Some((g, pa, pb)) = resolve_segment(man, fields, &a, &b) {
                if let Ok(l) = g.segment_length(&pa, &pb) {
                    acc += l;
                }
            }
        }
    }
    acc
}

/// FNV-1a, used to derive per-task seeds stably from string ids.
pub fn stable_hash(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::atlas::{Chart, ChartDomain, ChartSide};
    use crate::field::MetricField;
    use approx::assert_relative_eq;
    use std::collections::BTreeMap;

    fn chart_path(points: &[(f64, f64)], tag: &str) -> SampledPath {
        let n = points.len();
        SampledPath::new(
            points
                .iter()
                .enumerate()
                .map(|(i, (x, y))| {
                    (
                        i as f64 / (n - 1) as f64,
                        PathSample::ChartPoint { chart: 0, coords: vec![*x, *y] },
                    )
                })
                .collect(),
            tag.to_string(),
        )
    }

    fn plane(radius: f64, g: MetricField) -> ManifoldWithBoundary {
        let chart = Chart {
            name: "c".into(),
            domain: ChartDomain::Ball { center: vec![0.0, 0.0], radius },
            side: ChartSide::M,
        };
        let mut metrics = BTreeMap::new();
        metrics.insert("g".to_string(), vec![Some(g)]);
        ManifoldWithBoundary { dim: 2, charts: vec![chart], transitions: vec![], boundary: vec![], metrics }
    }

    #[test]
    fn metric_length_straight_segment() {
        let path = chart_path(&[(0.0, 0.0), (3.0, 4.0)], "g");
        let got = metric_length(&path, None, &EuclideanOracle).unwrap();
        assert_relative_eq!(got.length, 5.0, epsilon = 1e-12);
    }

    #[test]
    fn metric_length_reparametrization_invariance() {
        // same segment with 17 irregular time stamps
        let mut samples = Vec::new();
        let mut t = 0.0;
        for i in 0..17 {
            let frac = (i as f64 / 16.0).powi(2);
            samples.push((
                t,
                PathSample::ChartPoint { chart: 0, coords: vec![3.0 * frac, 4.0 * frac] },
            ));
            t += 0.013 + 0.05 * ((i * 7) % 3) as f64;
        }
        let path = SampledPath::new(samples, "g".into());
        let got = metric_length(&path, None, &EuclideanOracle).unwrap();
        assert_relative_eq!(got.length, 5.0, epsilon = 1e-9);
    }

    #[test]
    fn metric_length_quarter_circle() {
        let pts: Vec<(f64, f64)> = (0..=64)
            .map(|i| {
                let a = std::f64::consts::FRAC_PI_2 * i as f64 / 64.0;
                (a.cos(), a.sin())
            })
            .collect();
        let path = chart_path(&pts, "g");
        let got = metric_length(&path, None, &EuclideanOracle).unwrap();
        assert_relative_eq!(got.length, std::f64::consts::FRAC_PI_2, max_relative = 1e-3);
    }

    #[test]
    fn nonmonotone_time_rejected() {
        let path = SampledPath::new(
            vec![
                (0.0, PathSample::ChartPoint { chart: 0, coords: vec![0.0, 0.0] }),
                (0.0, PathSample::ChartPoint { chart: 0, coords: vec![1.0, 0.0] }),
            ],
            "g".into(),
        );
        assert!(matches!(path.validate(), Err(LengthError::NonMonotoneTime(1))));
    }

    #[test]
    fn riemannian_length_hyperbolic_segment() {
        let man = plane(100.0, MetricField::conformal_expr(2, "1/(x2*x2)"));
        let pts: Vec<(f64, f64)> = (0..=100).map(|i| (0.0, 1.0 + i as f64 / 100.0)).collect();
        let path = chart_path(&pts, "g");
        let len = riemannian_length(&path, &man, None, "g").unwrap();
        assert_relative_eq!(len, std::f64::consts::LN_2, epsilon = 1e-6);
    }

    #[test]
    fn riemannian_length_missing_chart_errors() {
        let man = plane(1.0, MetricField::identity(2));
        let path = chart_path(&[(0.0, 0.0), (50.0, 0.0)], "g");
        assert!(riemannian_length(&path, &man, None, "g").is_err());
    }

    #[test]
    fn length_distance_flat_plane_octile_removed() {
        let man = plane(100.0, MetricField::identity(2));
        let mesh = sample_mesh(&man, 0.25, &Window::single(0, vec![-0.5, -0.5], vec![3.5, 4.5]))
            .unwrap();
        let a = mesh.nearest_vertex(0, &[0.0, 0.0]).unwrap();
        let b = mesh.nearest_vertex(0, &[3.0, 4.0]).unwrap();
        match length_distance(a, b, &mesh, &man, "g").unwrap() {
            Reach::Distance(d) => {
                assert!((d - 5.0).abs() / 5.0 <= 0.02, "distance {d}");
                assert!(d >= 5.0 - 1e-9, "must stay above the true distance, got {d}");
            }
            Reach::Unreachable => panic!("connected grid"),
        }
        // identity
        assert_eq!(length_distance(a, a, &mesh, &man, "g").unwrap(), Reach::Distance(0.0));
    }

    #[test]
    fn octile_bound_on_raw_graph_distance() {
        let man = plane(100.0, MetricField::identity(2));
        let mesh = sample_mesh(&man, 0.05, &Window::single(0, vec![-0.2, -0.2], vec![3.2, 4.2]))
            .unwrap();
        let a = mesh.nearest_vertex(0, &[0.0, 0.0]).unwrap();
        let b = mesh.nearest_vertex(0, &[3.0, 4.0]).unwrap();
        let dist = dijkstra(&mesh, "g", &[a], None).unwrap();
        let d = dist[b as usize];
        // raw graph distance obeys the octile bound: at most ~8% above Euclidean
        assert!(d >= 5.0 - 1e-9 && d <= 5.0 * 1.0824, "raw {d}");
    }

    #[test]
    fn unreachable_pair_is_distinguished() {
        // two separate charts with no transition
        let c0 = Chart {
            name: "a".into(),
            domain: ChartDomain::Ball { center: vec![0.0, 0.0], radius: 1.0 },
            side: ChartSide::M,
        };
        let c1 = Chart {
            name: "b".into(),
            domain: ChartDomain::Ball { center: vec![100.0, 0.0], radius: 1.0 },
            side: ChartSide::M,
        };
        let mut metrics = BTreeMap::new();
        metrics.insert(
            "g".to_string(),
            vec![Some(MetricField::identity(2)), Some(MetricField::identity(2))],
        );
        let man = ManifoldWithBoundary {
            dim: 2,
            charts: vec![c0, c1],
            transitions: vec![],
            boundary: vec![],
            metrics,
        };
        let w = Window::default()
            .with_rect(0, vec![-0.5, -0.5], vec![0.5, 0.5])
            .with_rect(1, vec![99.5, -0.5], vec![100.5, 0.5]);
        let mesh = sample_mesh(&man, 0.25, &w).unwrap();
        let a = mesh.nearest_vertex(0, &[0.0, 0.0]).unwrap();
        let b = mesh.nearest_vertex(1, &[100.0, 0.0]).unwrap();
        assert_eq!(length_distance(a, b, &mesh, &man, "g").unwrap(), Reach::Unreachable);
    }

    #[test]
    fn divergence_of_ray_and_loop() {
        let windows: Vec<Window> = [2.0, 4.0, 8.0]
            .iter()
            .map(|r| Window::single(0, vec![-r, -r], vec![*r, *r]))
            .collect();
        let ray: Vec<(f64, f64)> = (0..50).map(|i| (i as f64 * 0.5, 0.0)).collect();
        let ray_path = chart_path(&ray, "g");
        assert!(is_divergent(&ray_path, &windows, None));

        let loop_pts: Vec<(f64, f64)> = (0..=32)
            .map(|i| {
                let a = 2.0 * std::f64::consts::PI * i as f64 / 32.0;
                (a.cos(), a.sin())
            })
            .collect();
        let loop_path = chart_path(&loop_pts, "g");
        assert!(!is_divergent(&loop_path, &windows, None));
    }

    #[test]
    fn divergence_toward_puncture() {
        // windows exclude a shrinking ball around the puncture at the origin
        let windows: Vec<Window> = [0.4, 0.2, 0.1]
            .iter()
            .map(|r| {
                let mut w = Window::single(0, vec![-1.0, -1.0], vec![1.0, 1.0]);
                w.excluded.push((0, vec![0.0, 0.0], *r));
                w
            })
            .collect();
        let inward: Vec<(f64, f64)> = (1..60).map(|i| (1.0 / (1.0 + 0.2 * i as f64), 0.0)).collect();
        let path = chart_path(&inward, "g");
        assert!(is_divergent(&path, &windows, None));
    }

    #[test]
    fn completeness_closed_half_plane_vs_open_disk() {
        // closed flat half-plane: complete up to budget
        let man = crate::glue::flat_half_plane(1000.0);
        let budget = CompletenessBudget {
            windows: [2.0, 4.0, 8.0]
                .iter()
                .map(|r| Window::single(0, vec![-r, -r], vec![*r, 0.0]))
                .collect(),
            h: 0.25,
            base_chart: 0,
            base_point: vec![0.0, -1.0],
            ray_count: 8,
            walk_count: 8,
            walk_steps: 400,
            ball_radii: vec![1.0, 2.0],
            seed: 7,
            growth_frac: 0.5,
            ray_arc: 24.0,
            ray_step: 0.05,
        };
        let report = completeness_report(&man, "g", &budget).unwrap();
        assert_eq!(report.verdict, Verdict::CompleteUpToBudget);
        assert!(report.witness.is_none());

        // open unit disk: incomplete with a short radial witness
        let man = {
            let chart = Chart {
                name: "disk".into(),
                domain: ChartDomain::Ball { center: vec![0.0, 0.0], radius: 1.0 },
                side: ChartSide::M,
            };
            let mut metrics = BTreeMap::new();
            metrics.insert("g".to_string(), vec![Some(MetricField::identity(2))]);
            ManifoldWithBoundary {
                dim: 2,
                charts: vec![chart],
                transitions: vec![],
                boundary: vec![],
                metrics,
            }
        };
        let budget = CompletenessBudget {
            windows: [0.6, 0.8, 0.9, 0.95]
                .iter()
                .map(|r| Window::single(0, vec![-r, -r], vec![*r, *r]))
                .collect(),
            h: 0.05,
            base_chart: 0,
            base_point: vec![0.0, 0.0],
            ray_count: 8,
            walk_count: 8,
            walk_steps: 200,
            ball_radii: vec![0.5, 2.0],
            seed: 7,
            growth_frac: 0.5,
            ray_arc: 3.0,
            ray_step: 0.01,
        };
        let report = completeness_report(&man, "g", &budget).unwrap();
        assert_eq!(report.verdict, Verdict::IncompleteWitnessFound);
        let w = report.witness.unwrap();
        assert!(w.length < 1.05, "witness length {}", w.length);
        // the radius-2 ball never stabilizes: it swallows the whole disk
        assert!(report.ball_table.iter().any(|row| !row.stabilized));
    }
}
