//! Conformal completeness deformation driven by annulus-crossing
//! certificates.
//!
//! An exhaustion of the glued manifold (metric balls about a base vertex, or
//! sublevels of a supplied proper field when the extension metric is itself
//! incomplete and its balls saturate) cuts the complement of P into annulus
//! components and wider 3-level bands. Two families of infima are certified
//! per component: `q1` - the cheapest crossing of the annulus inside the
//! component - and `q2` - the worst ratio of in-band distance to intrinsic
//! P-distance between boundary-trace points. Bump functions with plateaus on
//! the components scale the metric by `exp(2 sum max(0, -ln q))`, which makes
//! every annulus crossing cost at least 1 and every in-band connection cost
//! at least the P-distance, up to the documented mesh slack.

use crate::atlas::Mesh;
use crate::field::smooth_step_value;
use crate::lengthspace::dijkstra;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CompleteError {
    #[error("exhaustion step {0} produces no strictly nested levels")]
    DegenerateStep(f64),
    #[error("exhaustion base vertex is outside the mesh")]
    BadBase,
    #[error("q2 ratio {ratio} at pair ({x}, {y}) fell below the positivity guard; the mesh is too coarse or the geometry degenerate")]
    Q2Guard { ratio: f64, x: u32, y: u32 },
    #[error("bump {kind}[{j}][{index}] violates its {constraint} constraint at vertex {vertex}")]
    BumpConstraint {
        kind: &'static str,
        j: usize,
        index: usize,
        constraint: &'static str,
        vertex: u32,
    },
    #[error("conformal factor differs from 1 at M vertex {vertex}")]
    FactorOnM { vertex: u32 },
    #[error(transparent)]
    Atlas(#[from] crate::atlas::AtlasError),
}

// ---------------------------------------------------------------------------
// Exhaustion
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ExhaustionKind {
    /// closed metric balls of radius (j+1)*step about a base vertex
    MetricBall,
    /// sublevels { field <= j*step } of a supplied proper field
    Field,
}

#[derive(Debug, Clone)]
pub struct Exhaustion {
    pub step: f64,
    /// number of usable levels J: N_0 through N_J reach the whole window
    pub levels: usize,
    /// per-vertex value of the base function f
    pub field: Vec<f64>,
    pub kind: ExhaustionKind,
}

impl Exhaustion {
    /// Level value L_j with N_j = { f <= L_j }; j < 0 yields -infinity.
    pub fn level_value(&self, j: i64) -> f64 {
        if j < 0 {
            return f64::NEG_INFINITY;
        }
        match self.kind {
            ExhaustionKind::MetricBall => (j as f64 + 1.0) * self.step,
            ExhaustionKind::Field => j as f64 * self.step,
        }
    }

    /// f in units of levels: N_j = { lvl <= j }.
    pub fn level_units(&self, v: usize) -> f64 {
        match self.kind {
            ExhaustionKind::MetricBall => self.field[v] / self.step - 1.0,
            ExhaustionKind::Field => self.field[v] / self.step,
        }
    }
}

/// Metric-ball exhaustion (the default): N_j is the closed ball of radius
/// (j+1)*step about `base` in mesh distance under `tag`.
pub fn build_exhaustion(
    mesh: &Mesh,
    tag: &str,
    base: u32,
    step: f64,
) -> Result<Exhaustion, CompleteError> {
    if step <= 0.0 {
        return Err(CompleteError::DegenerateStep(step));
    }
    if base as usize >= mesh.vertex_count() {
        return Err(CompleteError::BadBase);
    }
    let field = dijkstra(mesh, tag, &[base], None)?;
    finish_exhaustion(field, step, ExhaustionKind::MetricBall)
}

/// Sublevel-set exhaustion of a supplied per-vertex field. Used when the
/// extension metric is incomplete and its metric balls saturate instead of
/// exhausting the window; the base function must be proper on the window.
pub fn exhaustion_from_field(field: Vec<f64>, step: f64) -> Result<Exhaustion, CompleteError> {
    if step <= 0.0 {
        return Err(CompleteError::DegenerateStep(step));
    }
    finish_exhaustion(field, step, ExhaustionKind::Field)
}

fn finish_exhaustion(
    field: Vec<f64>,
    step: f64,
    kind: ExhaustionKind,
) -> Result<Exhaustion, CompleteError> {
    let mut exh = Exhaustion { step, levels: 0, field, kind };
    let count_at = |exh: &Exhaustion, j: i64| -> usize {
        let l = exh.level_value(j);
        exh.field.iter().filter(|f| **f <= l + 1e-12).count()
    };
    // strict nesting: reject a step so small that N_1 = N_0
    if count_at(&exh, 1) <= count_at(&exh, 0) {
        return Err(CompleteError::DegenerateStep(step));
    }
    let total = exh.field.iter().filter(|f| f.is_finite()).count();
    let mut j = 1i64;
    while count_at(&exh, j) < total && j <= 10_000 {
        j += 1;
    }
    exh.levels = j as usize;
    Ok(exh)
}

// ---------------------------------------------------------------------------
// Annulus decomposition
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct ComponentData {
    pub j: usize,
    pub index: usize,
    pub vertices: Vec<u32>,
    /// trace on the inner level surface (boundary of N_j)
    pub inner_trace: Vec<u32>,
    /// trace on the outer level surface (boundary of N_{j+1})
    pub outer_trace: Vec<u32>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BandData {
    pub j: usize,
    pub index: usize,
    pub vertices: Vec<u32>,
    /// band vertices on the boundary of P
    pub p_trace: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct AnnulusComponents {
    /// per level j: the components N_{j,a}
    pub annuli: Vec<Vec<ComponentData>>,
    /// per level j: the bands containing at least one level-j component
    pub bands: Vec<Vec<BandData>>,
    pub p_mask: Vec<bool>,
    pub int_p: Vec<bool>,
}

const LEVEL_TOL: f64 = 1e-9;

/// Flood-fill decomposition of (N minus int P) into annulus components and
/// 3-level band components, with level and P traces.
pub fn decompose_annuli(mesh: &Mesh, exh: &Exhaustion, p_mask: &[bool]) -> AnnulusComponents {
    let n = mesh.vertex_count();
    let mut int_p = vec![false; n];
    for v in 0..n {
        int_p[v] = p_mask[v] && mesh.adjacency[v].iter().all(|(_, w)| p_mask[*w as usize]);
    }
    let f = &exh.field;
    let in_range = |v: usize, lo: f64, hi: f64| -> bool {
        f[v].is_finite() && f[v] >= lo - LEVEL_TOL && f[v] <= hi + LEVEL_TOL
    };

    let mut annuli = Vec::new();
    let mut bands = Vec::new();
    for j in 0..exh.levels {
        let lj = exh.level_value(j as i64);
        let lj1 = exh.level_value(j as i64 + 1);
        // closed annulus [L_j, L_{j+1}]; for real-valued ball fields the rim
        // of vertices just inside N_j adjacent to the open annulus is added
        // as the mesh closure
        let mut in_annulus = vec![false; n];
        for v in 0..n {
            if !int_p[v] && in_range(v, lj, lj1) {
                in_annulus[v] = true;
            }
        }
        if exh.kind == ExhaustionKind::MetricBall {
            let snapshot = in_annulus.clone();
            for v in 0..n {
                if int_p[v] || snapshot[v] || !f[v].is_finite() || f[v] > lj {
                    continue;
                }
                if mesh.adjacency[v].iter().any(|(_, w)| snapshot[*w as usize]) {
                    in_annulus[v] = true;
                }
            }
        }
        let comps = flood_fill(mesh, &in_annulus);
        let mut level_comps = Vec::new();
        for (index, vertices) in comps.into_iter().enumerate() {
            let inner_trace: Vec<u32> = vertices
                .iter()
                .copied()
                .filter(|v| f[*v as usize] <= lj + LEVEL_TOL)
                .collect();
            let outer_trace: Vec<u32> = vertices
                .iter()
                .copied()
                .filter(|v| {
                    (f[*v as usize] - lj1).abs() <= LEVEL_TOL
                        || mesh.adjacency[*v as usize]
                            .iter()
                            .any(|(_, w)| f[*w as usize] > lj1 + LEVEL_TOL)
                })
                .collect();
            level_comps.push(ComponentData { j, index, vertices, inner_trace, outer_trace });
        }

        // bands [L_{j-1}, L_{j+2}]
        let ljm1 = exh.level_value(j as i64 - 1);
        let lj2 = exh.level_value(j as i64 + 2);
        let mut in_band = vec![false; n];
        for v in 0..n {
            let above = ljm1.is_infinite() || f[v] >= ljm1 - LEVEL_TOL;
            if !int_p[v] && f[v].is_finite() && above && f[v] <= lj2 + LEVEL_TOL {
                in_band[v] = true;
            }
        }
        let band_comps = flood_fill(mesh, &in_band);
        let mut level_bands = Vec::new();
        for (index, vertices) in band_comps.into_iter().enumerate() {
            // keep only bands containing at least one component of this level
            let contains = level_comps.iter().any(|c| {
                c.vertices.first().map_or(false, |v0| vertices.binary_search(v0).is_ok())
            });
            if !contains {
                continue;
            }
            let p_trace: Vec<u32> =
                vertices.iter().copied().filter(|v| p_mask[*v as usize]).collect();
            level_bands.push(BandData { j, index, vertices, p_trace });
        }
        annuli.push(level_comps);
        bands.push(level_bands);
    }
    AnnulusComponents { annuli, bands, p_mask: p_mask.to_vec(), int_p }
}

/// Connected components of the masked vertex set, each sorted by vertex id;
/// components ordered by their smallest vertex.
fn flood_fill(mesh: &Mesh, mask: &[bool]) -> Vec<Vec<u32>> {
    let n = mesh.vertex_count();
    let mut seen = vec![false; n];
    let mut out = Vec::new();
    for start in 0..n {
        if !mask[start] || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        let mut stack = vec![start as u32];
        seen[start] = true;
        while let Some(v) = stack.pop() {
            comp.push(v);
            for (_, w) in &mesh.adjacency[v as usize] {
                let wi = *w as usize;
                if mask[wi] && !seen[wi] {
                    seen[wi] = true;
                    stack.push(*w);
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

// ---------------------------------------------------------------------------
// q1 and q2 certificates
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Q1Result {
    Crossing(f64),
    /// the component misses one of the level surfaces: the infimum is over
    /// an empty pair set and contributes no factor term
    NoCrossing,
}

const Q2_GUARD: f64 = 1e-6;
const PAIR_CAP: usize = 10_000;

/// Cheapest crossing of the annulus inside the component: the minimum over
/// (inner trace, outer trace) pairs of the in-component shortest-path
/// distance. For metric-ball exhaustions the level quantization offsets are
/// added back so the value never undershoots the continuum infimum.
pub fn compute_q1(
    mesh: &Mesh,
    tag: &str,
    exh: &Exhaustion,
    comp: &ComponentData,
) -> Result<Q1Result, CompleteError> {
    if comp.inner_trace.is_empty() || comp.outer_trace.is_empty() {
        return Ok(Q1Result::NoCrossing);
    }
    let mut mask = vec![false; mesh.vertex_count()];
    for v in &comp.vertices {
        mask[*v as usize] = true;
    }
    let lj = exh.level_value(comp.j as i64);
    let lj1 = exh.level_value(comp.j as i64 + 1);
    let snap = exh.kind == ExhaustionKind::MetricBall;
    // for metric-ball fields the quantization offsets ride along as initial
    // distances, so one multi-source run yields the corrected minimum
    let sources: Vec<(u32, f64)> = comp
        .inner_trace
        .iter()
        .map(|&x| {
            let off = if snap { (lj - exh.field[x as usize]).max(0.0) } else { 0.0 };
            (x, off)
        })
        .collect();
    let dist = crate::lengthspace::dijkstra_offsets(mesh, tag, &sources, Some(&mask))?;
    let mut best = f64::INFINITY;
    for &y in &comp.outer_trace {
        let d = dist[y as usize];
        if d.is_finite() {
            let off_out = if snap { (lj1 - exh.field[y as usize]).max(0.0) } else { 0.0 };
            best = best.min(d + off_out);
        }
    }
    if best.is_finite() {
        Ok(Q1Result::Crossing(best))
    } else {
        Ok(Q1Result::NoCrossing)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SamplingMode {
    Exhaustive,
    FarthestPoint,
}

#[derive(Debug, Clone, Serialize)]
pub struct Q2Value {
    pub value: f64,
    pub mode: SamplingMode,
    pub pairs: usize,
}

/// Worst ratio of in-band distance to intrinsic P-distance over boundary
/// trace pairs: exhaustive when the pair count fits the cap, otherwise over
/// a deterministic farthest-point sample. Vacuous traces give ratio 1.
/// Ratios at the positivity guard are configuration errors.
pub fn compute_q2(
    mesh: &Mesh,
    tag: &str,
    band: &BandData,
    p_mask: &[bool],
) -> Result<Q2Value, CompleteError> {
    if band.p_trace.len() < 2 {
        return Ok(Q2Value { value: 1.0, mode: SamplingMode::Exhaustive, pairs: 0 });
    }
    let n_trace = band.p_trace.len();
    let (sources, mode) = if n_trace * (n_trace - 1) / 2 <= PAIR_CAP {
        (band.p_trace.clone(), SamplingMode::Exhaustive)
    } else {
        let k = ((1.0 + (1.0 + 8.0 * PAIR_CAP as f64).sqrt()) / 2.0).floor() as usize;
        (farthest_point_sample(mesh, &band.p_trace, k), SamplingMode::FarthestPoint)
    };
    let mut band_mask = vec![false; mesh.vertex_count()];
    for v in &band.vertices {
        band_mask[*v as usize] = true;
    }
    let mut best = f64::INFINITY;
    let mut arg = (0u32, 0u32);
    let mut pairs = 0usize;
    for (i, &x) in sources.iter().enumerate() {
        let d_band = dijkstra(mesh, tag, &[x], Some(&band_mask))?;
        let d_p = dijkstra(mesh, tag, &[x], Some(p_mask))?;
        for &y in sources.iter().skip(i + 1) {
            let num = d_band[y as usize];
            let den = d_p[y as usize];
            if !num.is_finite() || !den.is_finite() || den <= 0.0 {
                continue;
            }
            pairs += 1;
            let ratio = num / den;
            if ratio < best {
                best = ratio;
                arg = (x, y);
            }
        }
    }
    if !best.is_finite() {
        return Ok(Q2Value { value: 1.0, mode, pairs });
    }
    if best <= Q2_GUARD {
        return Err(CompleteError::Q2Guard { ratio: best, x: arg.0, y: arg.1 });
    }
    Ok(Q2Value { value: best, mode, pairs })
}

/// Deterministic farthest-point subset (coordinate metric): greedy from the
/// smallest vertex id, ties broken by id.
fn farthest_point_sample(mesh: &Mesh, trace: &[u32], k: usize) -> Vec<u32> {
    if trace.len() <= k {
        return trace.to_vec();
    }
    let coord = |v: u32| -> &[f64] { &mesh.vertices[v as usize].coords };
    let d2 =
        |a: u32, b: u32| -> f64 { coord(a).iter().zip(coord(b)).map(|(x, y)| (x - y) * (x - y)).sum() };
    let mut chosen = vec![trace[0]];
    let mut min_d: Vec<f64> = trace.iter().map(|&v| d2(v, trace[0])).collect();
    while chosen.len() < k {
        let mut best = (0usize, -1.0f64);
        for (i, d) in min_d.iter().enumerate() {
            if *d > best.1 {
                best = (i, *d);
            }
        }
        if best.1 <= 0.0 {
            break;
        }
        let new = trace[best.0];
        chosen.push(new);
        for (i, &v) in trace.iter().enumerate() {
            min_d[i] = min_d[i].min(d2(v, new));
        }
    }
    chosen.sort_unstable();
    chosen
}

// ---------------------------------------------------------------------------
// Conformal factor
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct CertificateRow {
    pub j: usize,
    pub component: usize,
    pub kind: String,
    pub value: f64,
    pub mode: String,
    pub pairs: usize,
}

#[derive(Debug, Clone)]
pub struct ConformalFactorField {
    /// per-vertex exponent E; the metric scales by exp(2E), lengths by exp(E)
    pub exponent: Vec<f64>,
    pub factor: Vec<f64>,
    pub certificates: Vec<CertificateRow>,
    /// largest number of simultaneously active bump terms at a vertex
    pub max_active_terms: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ConformalParams {
    /// width (in the q-depth coordinate) of the ramp keeping bumps off M
    pub qm_width: f64,
    /// upper-ramp spill of the band bumps beyond N_{j+2}, in level units
    pub spill_levels: f64,
}

impl Default for ConformalParams {
    fn default() -> Self {
        ConformalParams { qm_width: 0.05, spill_levels: 0.05 }
    }
}

/// Assembles the conformal exponent field from the certificates:
/// `E = sum_j [ sum_a max(0, -ln q1) mu_{j,a} + sum_b max(0, -ln q2) nu_{j,b} ]`
/// with plateaus on the components / bands, zero sets on the inner levels,
/// and supports kept off M by the q-depth mask. Plateau and support
/// constraints are asserted per vertex.
pub fn conformal_metric(
    mesh: &Mesh,
    exh: &Exhaustion,
    ann: &AnnulusComponents,
    q1s: &[Vec<Q1Result>],
    q2s: &[Vec<Q2Value>],
    q_depth: &[f64],
    params: &ConformalParams,
) -> Result<ConformalFactorField, CompleteError> {
    let n = mesh.vertex_count();
    let qm: Vec<f64> = (0..n)
        .map(|v| {
            if mesh.vertices[v].flags.in_m {
                0.0
            } else {
                smooth_step_value(q_depth[v] / params.qm_width)
            }
        })
        .collect();
    let lvl: Vec<f64> = (0..n).map(|v| exh.level_units(v)).collect();

    let mut exponent = vec![0.0; n];
    let mut active = vec![0usize; n];
    let mut certificates = Vec::new();

    for (j, comps) in ann.annuli.iter().enumerate() {
        let jf = j as f64;
        for (a, comp) in comps.iter().enumerate() {
            let q1 = q1s[j][a];
            let (value, weight) = match q1 {
                Q1Result::NoCrossing => (f64::INFINITY, 0.0),
                Q1Result::Crossing(v) => (v, (-v.ln()).max(0.0)),
            };
            certificates.push(CertificateRow {
                j,
                component: a,
                kind: "q1".into(),
                value,
                mode: "exhaustive".into(),
                pairs: comp.inner_trace.len() * comp.outer_trace.len(),
            });
            if weight == 0.0 {
                continue;
            }
            // plateau floor: mesh-closure rims of metric-ball annuli sit
            // slightly inside N_j
            let plo = comp
                .vertices
                .iter()
                .map(|v| lvl[*v as usize])
                .fold(jf, f64::min)
                .max(jf - 0.9);
            for v in 0..n {
                let mu = mu_bump(lvl[v], jf, plo) * qm[v];
                if mu > 0.0 {
                    exponent[v] += weight * mu;
                    active[v] += 1;
                }
            }
            assert_annulus_bump(mesh, comp, &lvl, &qm, j, plo)?;
        }
        for (b, band) in ann.bands[j].iter().enumerate() {
            let q2 = &q2s[j][b];
            certificates.push(CertificateRow {
                j,
                component: b,
                kind: "q2".into(),
                value: q2.value,
                mode: match q2.mode {
                    SamplingMode::Exhaustive => "exhaustive".into(),
                    SamplingMode::FarthestPoint => "farthest-point".into(),
                },
                pairs: q2.pairs,
            });
            let weight = (-q2.value.ln()).max(0.0);
            if weight == 0.0 {
                continue;
            }
            for v in 0..n {
                let nu = smooth_step_value(lvl[v] - (jf - 2.0))
                    * (1.0 - smooth_step_value((lvl[v] - (jf + 2.0)) / params.spill_levels))
                    * qm[v];
                if nu > 0.0 {
                    exponent[v] += weight * nu;
                    active[v] += 1;
                }
            }
            assert_band_bump(mesh, band, &lvl, &qm, j, params)?;
        }
    }

    // factor = 1 on M, exactly
    for v in 0..n {
        if mesh.vertices[v].flags.in_m && exponent[v] != 0.0 {
            return Err(CompleteError::FactorOnM { vertex: v as u32 });
        }
    }
    let factor: Vec<f64> = exponent.iter().map(|e| (2.0 * e).exp()).collect();
    let max_active_terms = active.iter().copied().max().unwrap_or(0);
    Ok(ConformalFactorField { exponent, factor, certificates, max_active_terms })
}

/// Annulus bump profile in level units: plateau on `[plo, j+1]`, up-ramp
/// from `j-1`, down-ramp to `j+2`.
fn mu_bump(lvl: f64, jf: f64, plo: f64) -> f64 {
    let denom = (plo - (jf - 1.0)).max(1e-9);
    smooth_step_value((lvl - (jf - 1.0)) / denom) * (1.0 - smooth_step_value(lvl - (jf + 1.0)))
}

/// Plateau / zero-set / support assertions for an annulus bump.
fn assert_annulus_bump(
    mesh: &Mesh,
    comp: &ComponentData,
    lvl: &[f64],
    qm: &[f64],
    j: usize,
    plo: f64,
) -> Result<(), CompleteError> {
    let jf = j as f64;
    let mu = |v: usize| -> f64 { mu_bump(lvl[v], jf, plo) * qm[v] };
    for &v in &comp.vertices {
        // the q-depth ramp may clip component vertices abutting P itself;
        // those sit on the P boundary layer and are checked for support only
        let vi = v as usize;
        if qm[vi] == 1.0 && (mu(vi) - 1.0).abs() > 1e-12 {
            return Err(CompleteError::BumpConstraint {
                kind: "mu",
                j,
                index: comp.index,
                constraint: "plateau",
                vertex: v,
            });
        }
    }
    for v in 0..mesh.vertex_count() {
        let value = mu(v);
        if value == 0.0 {
            continue;
        }
        if mesh.vertices[v].flags.in_m {
            return Err(CompleteError::BumpConstraint {
                kind: "mu",
                j,
                index: comp.index,
                constraint: "support off M",
                vertex: v as u32,
            });
        }
        if lvl[v] > jf + 2.0 + 1e-12 {
            return Err(CompleteError::BumpConstraint {
                kind: "mu",
                j,
                index: comp.index,
                constraint: "support in N_{j+2}",
                vertex: v as u32,
            });
        }
        if lvl[v] <= jf - 1.0 + 1e-12 {
            return Err(CompleteError::BumpConstraint {
                kind: "mu",
                j,
                index: comp.index,
                constraint: "zero on N_{j-1}",
                vertex: v as u32,
            });
        }
    }
    Ok(())
}

/// The band bump plateau covers the whole band; its upper ramp spills past
/// N_{j+2} by the configured fraction of a level (an exactly contained
/// support cannot also plateau on the closed band).
fn assert_band_bump(
    mesh: &Mesh,
    band: &BandData,
    lvl: &[f64],
    qm: &[f64],
    j: usize,
    params: &ConformalParams,
) -> Result<(), CompleteError> {
    let jf = j as f64;
    let nu = |v: usize| -> f64 {
        smooth_step_value(lvl[v] - (jf - 2.0))
            * (1.0 - smooth_step_value((lvl[v] - (jf + 2.0)) / params.spill_levels))
            * qm[v]
    };
    for &v in &band.vertices {
        let vi = v as usize;
        if qm[vi] == 1.0 && (nu(vi) - 1.0).abs() > 1e-12 {
            return Err(CompleteError::BumpConstraint {
                kind: "nu",
                j,
                index: band.index,
                constraint: "plateau",
                vertex: v,
            });
        }
    }
    for v in 0..mesh.vertex_count() {
        let value = nu(v);
        if value == 0.0 {
            continue;
        }
        if mesh.vertices[v].flags.in_m {
            return Err(CompleteError::BumpConstraint {
                kind: "nu",
                j,
                index: band.index,
                constraint: "support off M",
                vertex: v as u32,
            });
        }
        if lvl[v] > jf + 2.0 + params.spill_levels + 1e-12 {
            return Err(CompleteError::BumpConstraint {
                kind: "nu",
                j,
                index: band.index,
                constraint: "support in N_{j+2} plus spill",
                vertex: v as u32,
            });
        }
        if lvl[v] <= jf - 2.0 + 1e-12 {
            return Err(CompleteError::BumpConstraint {
                kind: "nu",
                j,
                index: band.index,
                constraint: "zero on N_{j-2}",
                vertex: v as u32,
            });
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Crossing-cost audit
// ---------------------------------------------------------------------------

pub const CROSSING_SLACK: f64 = 0.05;

#[derive(Debug, Clone, Serialize)]
pub struct CrossingRowA {
    pub j: usize,
    pub component: usize,
    pub pairs: usize,
    pub min_cost: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct CrossingRowB {
    pub j: usize,
    pub band: usize,
    pub pairs: usize,
    /// min over pairs of (in-band g_N distance) / (P-distance)
    pub min_ratio: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct CrossingAudit {
    pub rows_a: Vec<CrossingRowA>,
    pub rows_b: Vec<CrossingRowB>,
    pub pass: bool,
}

/// Audits the two crossing-cost properties of the deformed metric: (a) every
/// in-component path between the level traces costs at least `1 - slack`
/// under g_N; (b) every in-band connection between P-trace points costs at
/// least `(1 - slack)` times the P-distance.
pub fn verify_crossing_cost(
    mesh: &Mesh,
    gn_tag: &str,
    gp_tag: &str,
    exh: &Exhaustion,
    ann: &AnnulusComponents,
    factor: &ConformalFactorField,
    trials: usize,
    seed: u64,
) -> Result<CrossingAudit, CompleteError> {
    let mut rows_a = Vec::new();
    let mut rows_b = Vec::new();
    let snap = exh.kind == ExhaustionKind::MetricBall;
    for (j, comps) in ann.annuli.iter().enumerate() {
        for (a, comp) in comps.iter().enumerate() {
            if comp.inner_trace.is_empty() || comp.outer_trace.is_empty() {
                continue;
            }
            let mut mask = vec![false; mesh.vertex_count()];
            for v in &comp.vertices {
                mask[*v as usize] = true;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(
                seed ^ crate::lengthspace::stable_hash(&format!("audit-a-{j}-{a}")),
            );
            let lj = exh.level_value(j as i64);
            let lj1 = exh.level_value(j as i64 + 1);
            // sampled trace subsets; one offset run covers all their pairs
            let pick = |trace: &[u32], rng: &mut ChaCha8Rng| -> Vec<u32> {
                if trace.len() <= trials {
                    trace.to_vec()
                } else {
                    let mut chosen: Vec<u32> =
                        (0..trials).map(|_| trace[rng.gen_range(0..trace.len())]).collect();
                    chosen.sort_unstable();
                    chosen.dedup();
                    chosen
                }
            };
            let inner = pick(&comp.inner_trace, &mut rng);
            let outer = pick(&comp.outer_trace, &mut rng);
            let sources: Vec<(u32, f64)> = inner
                .iter()
                .map(|&x| {
                    let off = if snap {
                        (lj - exh.field[x as usize]).max(0.0) * factor.exponent[x as usize].exp()
                    } else {
                        0.0
                    };
                    (x, off)
                })
                .collect();
            let dist =
                crate::lengthspace::dijkstra_offsets(mesh, gn_tag, &sources, Some(&mask))?;
            let mut min_cost = f64::INFINITY;
            let mut pairs = 0usize;
            for &y in &outer {
                let d = dist[y as usize];
                if !d.is_finite() {
                    continue;
                }
                pairs += inner.len();
                let off_out = if snap {
                    (lj1 - exh.field[y as usize]).max(0.0) * factor.exponent[y as usize].exp()
                } else {
                    0.0
                };
                min_cost = min_cost.min(d + off_out);
            }
            let pass = min_cost >= 1.0 - CROSSING_SLACK;
            rows_a.push(CrossingRowA { j, component: a, pairs, min_cost, pass });
        }
        for (b, band) in ann.bands[j].iter().enumerate() {
            if band.p_trace.len() < 2 {
                continue;
            }
            let n_trace = band.p_trace.len();
            let sources = if n_trace * (n_trace - 1) / 2 <= PAIR_CAP {
                band.p_trace.clone()
            } else {
                let k = ((1.0 + (1.0 + 8.0 * PAIR_CAP as f64).sqrt()) / 2.0).floor() as usize;
                farthest_point_sample(mesh, &band.p_trace, k)
            };
            let mut band_mask = vec![false; mesh.vertex_count()];
            for v in &band.vertices {
                band_mask[*v as usize] = true;
            }
            let mut min_ratio = f64::INFINITY;
            let mut pairs = 0usize;
            for (i, &x) in sources.iter().enumerate() {
                let d_band = dijkstra(mesh, gn_tag, &[x], Some(&band_mask))?;
                let d_p = dijkstra(mesh, gp_tag, &[x], Some(&ann.p_mask))?;
                for &y in sources.iter().skip(i + 1) {
                    let num = d_band[y as usize];
                    let den = d_p[y as usize];
                    if !num.is_finite() || !den.is_finite() || den <= 0.0 {
                        continue;
                    }
                    pairs += 1;
                    min_ratio = min_ratio.min(num / den);
                }
            }
            let pass = !min_ratio.is_finite() || min_ratio >= 1.0 - CROSSING_SLACK;
            rows_b.push(CrossingRowB { j, band: b, pairs, min_ratio, pass });
        }
    }
    let pass = rows_a.iter().all(|r| r.pass) && rows_b.iter().all(|r| r.pass);
    Ok(CrossingAudit { rows_a, rows_b, pass })
}

// ---------------------------------------------------------------------------
// Three-case completeness certification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, PartialEq, Eq)]
pub enum PathCase {
    EventuallyOutsideP,
    EventuallyInsideP,
    Oscillating,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExcursionCheck {
    pub start: usize,
    pub end: usize,
    pub gn_length: f64,
    pub p_distance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct CaseRow {
    pub path_id: String,
    pub case: PathCase,
    pub gn_length: f64,
    /// case 1: annulus levels crossed by the tail outside P
    pub crossings: usize,
    pub crossing_bound_pass: bool,
    /// case 2: the g_N length dominates the g_P length
    pub domination_pass: bool,
    /// case 3: per-excursion substitution bounds
    pub excursions: Vec<ExcursionCheck>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ThreeCaseReport {
    pub rows: Vec<CaseRow>,
    pub pass: bool,
}

pub const EXCURSION_FACTOR: f64 = 2.0;

/// Classifies sampled divergent vertex paths by their eventual position
/// relative to P and checks the corresponding length bound: crossing
/// accumulation outside P, g_P domination inside P, or the per-excursion
/// substitution inequality for oscillating paths.
pub fn certify_completeness(
    mesh: &Mesh,
    gn_tag: &str,
    gp_tag: &str,
    exh: &Exhaustion,
    ann: &AnnulusComponents,
    paths: &[(String, Vec<u32>)],
) -> Result<ThreeCaseReport, CompleteError> {
    let gn = mesh.lengths(gn_tag)?.to_vec();
    let gp = mesh.lengths(gp_tag)?.to_vec();
    let edge_len = |lens: &[f64], a: u32, b: u32| -> f64 {
        for (ei, w) in &mesh.adjacency[a as usize] {
            if *w == b {
                return lens[*ei as usize];
            }
        }
        f64::NAN
    };
    let mut rows = Vec::new();
    for (id, verts) in paths {
        if verts.len() < 2 {
            continue;
        }
        let in_p: Vec<bool> = verts.iter().map(|v| ann.p_mask[*v as usize]).collect();
        let n = verts.len();
        let tail_start = n - (n / 4).max(1);
        let tail = &in_p[tail_start..];
        let case = if tail.iter().all(|p| !p) {
            PathCase::EventuallyOutsideP
        } else if tail.iter().all(|p| *p) {
            PathCase::EventuallyInsideP
        } else {
            PathCase::Oscillating
        };
        let gn_length: f64 = (1..n).map(|i| edge_len(&gn, verts[i - 1], verts[i])).sum();

        let mut crossings = 0usize;
        let mut crossing_bound_pass = true;
        let mut domination_pass = true;
        let mut excursions = Vec::new();
        match case {
            PathCase::EventuallyOutsideP => {
                let exit = in_p.iter().rposition(|p| *p).map_or(0, |i| i + 1);
                let f_exit = exh.field[verts[exit] as usize];
                let f_max = verts[exit..]
                    .iter()
                    .map(|v| exh.field[*v as usize])
                    .fold(f64::NEG_INFINITY, f64::max);
                crossings = (0..exh.levels as i64)
                    .filter(|j| {
                        let l = exh.level_value(*j);
                        l > f_exit && l <= f_max
                    })
                    .count();
                let tail_len: f64 =
                    (exit.max(1)..n).map(|i| edge_len(&gn, verts[i - 1], verts[i])).sum();
                crossing_bound_pass =
                    tail_len >= crossings as f64 * (1.0 - CROSSING_SLACK) - 1e-9;
            }
            PathCase::EventuallyInsideP => {
                let gp_length: f64 =
                    (1..n).map(|i| edge_len(&gp, verts[i - 1], verts[i])).sum();
                domination_pass = gn_length >= gp_length - 1e-9;
            }
            PathCase::Oscillating => {
                let mut i = 0usize;
                while i < n {
                    if in_p[i] {
                        i += 1;
                        continue;
                    }
                    let start = i;
                    while i < n && !in_p[i] {
                        i += 1;
                    }
                    let end = i; // first in-P index after the run, or n
                    if start == 0 || end == n {
                        continue;
                    }
                    let x = verts[start - 1];
                    let y = verts[end];
                    let seg_len: f64 =
                        (start..=end).map(|k| edge_len(&gn, verts[k - 1], verts[k])).sum();
                    let d_p = dijkstra(mesh, gp_tag, &[x], Some(&ann.p_mask))?[y as usize];
                    let pass = d_p.is_finite()
                        && d_p <= (EXCURSION_FACTOR + CROSSING_SLACK) * seg_len + 1e-9;
                    excursions.push(ExcursionCheck {
                        start,
                        end,
                        gn_length: seg_len,
                        p_distance: d_p,
                        pass,
                    });
                }
            }
        }
        rows.push(CaseRow {
            path_id: id.clone(),
            case,
            gn_length,
            crossings,
            crossing_bound_pass,
            domination_pass,
            excursions,
        });
    }
    let pass = rows
        .iter()
        .all(|r| r.crossing_bound_pass && r.domination_pass && r.excursions.iter().all(|e| e.pass));
    Ok(ThreeCaseReport { rows, pass })
}

// ---------------------------------------------------------------------------
// P mask and q-depth helpers
// ---------------------------------------------------------------------------

/// P mask: all of M plus the Q-side collar region up to the reflection depth.
pub fn p_mask_from_collar(
    mesh: &Mesh,
    glued: &crate::glue::GluedManifold,
    collars: &[crate::extend::FermiCollar],
) -> Vec<bool> {
    mesh.vertices
        .iter()
        .map(|v| {
            if v.flags.in_m {
                return true;
            }
            match crate::glue::collar_coordinates(glued, v.chart, &v.coords) {
                Ok((u, s)) if s >= 0.0 => collars.iter().any(|c| s <= c.s0_at(u) + 1e-12),
                _ => false,
            }
        })
        .collect()
}

/// Smooth penetration depth into the Q side (0 on M and on the interface):
/// the collar coordinate where available, graph distance from M otherwise.
pub fn q_depth_field(
    mesh: &Mesh,
    glued: &crate::glue::GluedManifold,
    tag: &str,
) -> Result<Vec<f64>, CompleteError> {
    let m_verts: Vec<u32> = (0..mesh.vertex_count() as u32)
        .filter(|v| mesh.vertices[*v as usize].flags.in_m)
        .collect();
    let dist_from_m = dijkstra(mesh, tag, &m_verts, None)?;
    Ok(mesh
        .vertices
        .iter()
        .enumerate()
        .map(|(i, v)| {
            if v.flags.in_m {
                0.0
            } else {
                match crate::glue::collar_coordinates(glued, v.chart, &v.coords) {
                    Ok((_, s)) if s >= 0.0 => s,
                    _ => dist_from_m[i],
                }
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::atlas::{sample_mesh, Chart, ChartDomain, ChartSide, ManifoldWithBoundary, Window};
    use crate::field::MetricField;
    use approx::assert_relative_eq;
    use std::collections::BTreeMap;

    fn flat_plane(extent: f64, h: f64) -> (ManifoldWithBoundary, Mesh) {
        let chart = Chart {
            name: "plane".into(),
            domain: ChartDomain::Ball { center: vec![0.0, 0.0], radius: 1e6 },
            side: ChartSide::Q,
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
        let mesh = sample_mesh(
            &man,
            h,
            &Window::single(0, vec![-extent, -extent], vec![extent, extent]),
        )
        .unwrap();
        (man, mesh)
    }

    #[test]
    fn metric_ball_exhaustion_on_flat_plane() {
        let (_, mesh) = flat_plane(4.5, 0.25);
        let base = mesh.nearest_vertex(0, &[0.0, 0.0]).unwrap();
        let exh = build_exhaustion(&mesh, "g", base, 1.0).unwrap();
        assert_eq!(exh.kind, ExhaustionKind::MetricBall);
        assert!(exh.levels >= 3);
        let n0 = exh.field.iter().filter(|f| **f <= 1.0 + 1e-12).count();
        let expect = std::f64::consts::PI / (0.25 * 0.25);
        assert!((n0 as f64) > 0.8 * expect && (n0 as f64) < 1.3 * expect, "n0 = {n0}");
    }

    #[test]
    fn degenerate_step_is_rejected() {
        let (_, mesh) = flat_plane(2.0, 0.25);
        let base = mesh.nearest_vertex(0, &[0.0, 0.0]).unwrap();
        assert!(matches!(
            build_exhaustion(&mesh, "g", base, 0.0),
            Err(CompleteError::DegenerateStep(_))
        ));
        assert!(matches!(
            build_exhaustion(&mesh, "g", base, 1e-9),
            Err(CompleteError::DegenerateStep(_))
        ));
    }

    #[test]
    fn flat_annulus_q1_is_the_ball_gap() {
        let (_, mesh) = flat_plane(4.5, 0.25);
        let base = mesh.nearest_vertex(0, &[0.0, 0.0]).unwrap();
        let exh = build_exhaustion(&mesh, "g", base, 1.0).unwrap();
        // no P at all: everything is outside int P
        let p_mask = vec![false; mesh.vertex_count()];
        let ann = decompose_annuli(&mesh, &exh, &p_mask);
        assert_eq!(ann.annuli[1].len(), 1, "one annulus component");
        let q1 = compute_q1(&mesh, "g", &exh, &ann.annuli[1][0]).unwrap();
        match q1 {
            Q1Result::Crossing(v) => {
                assert!((v - 1.0).abs() <= 0.02, "q1 = {v}");
                assert!(v >= 1.0 - 1e-9, "snap correction keeps q1 at the gap");
            }
            Q1Result::NoCrossing => panic!("annulus must cross"),
        }
    }

    #[test]
    fn clipped_component_reports_no_crossing() {
        let (_, mesh) = flat_plane(1.6, 0.2);
        let base = mesh.nearest_vertex(0, &[0.0, 0.0]).unwrap();
        let exh = build_exhaustion(&mesh, "g", base, 1.0).unwrap();
        let p_mask = vec![false; mesh.vertex_count()];
        let ann = decompose_annuli(&mesh, &exh, &p_mask);
        let last = ann.annuli.last().unwrap();
        if let Some(comp) = last.first() {
            let q1 = compute_q1(&mesh, "g", &exh, comp).unwrap();
            assert_eq!(q1, Q1Result::NoCrossing);
        }
    }

    #[test]
    fn factor_is_one_when_all_certificates_exceed_one() {
        let (_, mesh) = flat_plane(4.5, 0.25);
        let base = mesh.nearest_vertex(0, &[0.0, 0.0]).unwrap();
        let exh = build_exhaustion(&mesh, "g", base, 1.0).unwrap();
        let p_mask = vec![false; mesh.vertex_count()];
        let ann = decompose_annuli(&mesh, &exh, &p_mask);
        let q1s: Vec<Vec<Q1Result>> = ann
            .annuli
            .iter()
            .map(|comps| comps.iter().map(|c| compute_q1(&mesh, "g", &exh, c).unwrap()).collect())
            .collect();
        let q2s: Vec<Vec<Q2Value>> = ann
            .bands
            .iter()
            .map(|bands| bands.iter().map(|b| compute_q2(&mesh, "g", b, &p_mask).unwrap()).collect())
            .collect();
        let q_depth: Vec<f64> = mesh.vertices.iter().map(|_| 1.0).collect();
        let field =
            conformal_metric(&mesh, &exh, &ann, &q1s, &q2s, &q_depth, &ConformalParams::default())
                .unwrap();
        for f in &field.factor {
            assert_relative_eq!(*f, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn farthest_point_sample_is_deterministic() {
        let (_, mesh) = flat_plane(2.0, 0.25);
        let trace: Vec<u32> = (0..mesh.vertex_count() as u32).collect();
        let a = farthest_point_sample(&mesh, &trace, 20);
        let b = farthest_point_sample(&mesh, &trace, 20);
        assert_eq!(a, b);
        assert_eq!(a.len(), 20);
    }
}
