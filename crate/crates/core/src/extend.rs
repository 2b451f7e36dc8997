//! Extending the M metric past the interface and reflecting a collar of the
//! Q side back onto M.
//!
//! Chart-wise the extension is a three-term reflection
//! `s~(u, s) = 6 g(u, -s) - 32 g(u, -s/2) + 27 g(u, -s/3)` for `s > 0`, whose
//! coefficients solve `sum c_k (-1/k)^j = 1` for `j = 0, 1, 2`, so values,
//! first, and second derivatives match across the interface. A partition of
//! unity in the collar coordinate blends the extension with the Q metric into
//! a global field `gt` that restricts to the M metric exactly. Unit-speed
//! normal geodesics of `gt` shot from boundary samples build Fermi
//! coordinates `(u, s)`; the reflection `rho: (u, s) -> (u, -s)` maps the
//! collar region of the Q side onto M with operator norm at most `1 + eps`,
//! the depth being chosen per sample by a halving search.

use crate::atlas::{ManifoldWithBoundary, Mesh};
use crate::expr::ExprAst;
use crate::field::{CoeffField, MetricField, Weight1d};
use crate::geodesy::{shoot_geodesic, GeodesicState};
use crate::glue::{CollarInfo, GluedManifold};
use crate::lengthspace::riemannian_length;
use crate::linalg::{self, ClampedSpline};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExtendError {
    #[error("metric coefficient on the boundary chart is not a closed-form expression")]
    NonSymbolicMetric,
    #[error("metric degenerates on the boundary (min eigenvalue {min_eig} at u = {u})")]
    DegenerateBoundaryMetric { u: f64, min_eig: f64 },
    #[error("no positive extension depth keeps the metric positive definite")]
    NoPositiveDepth,
    #[error("partition-of-unity support {r1} exceeds the extension validity threshold {t_beta}")]
    SupportExceedsValidity { r1: f64, t_beta: f64 },
    #[error("partition of unity does not sum to 1 at vertex {vertex} (defect {defect})")]
    PartitionSum { vertex: u32, defect: f64 },
    #[error("assembled metric is not positive definite at vertex {vertex} on chart {chart} (min eigenvalue {min_eig})")]
    NotPositiveDefiniteAtVertex { vertex: u32, chart: usize, min_eig: f64 },
    #[error("assembled metric does not restrict to the M metric at vertex {vertex} (defect {defect})")]
    RestrictionDefect { vertex: u32, defect: f64 },
    #[error("epsilon must be positive: the reflection of a curved boundary strictly exceeds norm 1 at any depth")]
    EpsilonNotPositive,
    #[error("point {point:?} lies outside P = M plus the reflected collar")]
    OutsideP { point: Vec<f64> },
    #[error("geodesic shooting failed while building the Fermi collar: {0}")]
    Shooting(String),
    #[error(transparent)]
    Field(#[from] crate::field::FieldError),
    #[error(transparent)]
    Atlas(#[from] crate::atlas::AtlasError),
}

/// Seeley reflection data: `sum c_k * g(u, scale_k * s)`.
pub const SEELEY_TERMS: [(f64, f64); 3] =
    [(6.0, -1.0), (-32.0, -0.5), (27.0, -1.0 / 3.0)];

// ---------------------------------------------------------------------------
// Chart-wise extension
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LocalExtension {
    /// collar chart this extension lives on
    pub collar_chart: usize,
    /// the extended field in collar coordinates (original for s <= 0,
    /// reflection combination for s > 0)
    pub ext: MetricField,
    /// upper-triangle ASTs of the reflected side, for pullbacks onto Q charts
    pub pos_asts: Vec<ExprAst>,
    /// largest collar depth (halved for safety) on which the extension stays
    /// positive definite
    pub t_beta: f64,
}

/// Extends the M metric of one collar chart by the three-term reflection and
/// scans for the validity threshold `t_beta`.
pub fn extend_chart_metric(
    glued: &GluedManifold,
    collar: &CollarInfo,
    grid_step: f64,
) -> Result<LocalExtension, ExtendError> {
    let man = &glued.man;
    let dim = man.dim;
    let gm = man
        .metric_on_chart("gM", collar.chart)
        .map_err(|_| ExtendError::NonSymbolicMetric)?;

    // boundary non-degeneracy
    let u_samples = 33;
    let span = collar.component.u_max - collar.component.u_min;
    for k in 0..u_samples {
        let u = collar.component.u_min + span * (k as f64 + 0.5) / u_samples as f64;
        let min_eig = gm.min_eigenvalue(&[u, 0.0])?;
        if min_eig <= 0.0 {
            return Err(ExtendError::DegenerateBoundaryMetric { u, min_eig });
        }
    }

    let mut neg_asts = Vec::new();
    let mut pos_asts = Vec::new();
    for i in 0..dim {
        for j in i..dim {
            let CoeffField::Expr(f) = gm.coeff(i, j) else {
                return Err(ExtendError::NonSymbolicMetric);
            };
            neg_asts.push(f.ast().clone());
            pos_asts.push(f.ast().reflect_combination(dim - 1, &SEELEY_TERMS));
        }
    }
    let coeffs: Vec<CoeffField> = neg_asts
        .iter()
        .zip(&pos_asts)
        .map(|(n, p)| CoeffField::TwoSided {
            axis: dim - 1,
            neg: Box::new(CoeffField::expr(n.clone())),
            pos: Box::new(CoeffField::expr(p.clone())),
        })
        .collect();
    let ext = MetricField::new(dim, coeffs);

    // largest grid depth with positive definiteness, halved for margin
    let pos_field = MetricField::new(
        dim,
        pos_asts.iter().map(|a| CoeffField::expr(a.clone())).collect(),
    );
    let mut t_valid: Option<f64> = None;
    let mut t = grid_step;
    while t <= collar.half_width + 1e-12 {
        let mut ok = true;
        'scan: for k in 0..u_samples {
            let u = collar.component.u_min + span * (k as f64 + 0.5) / u_samples as f64;
            for d in 1..=8 {
                let s = t * d as f64 / 8.0;
                let lam = pos_field.min_eigenvalue(&[u, s])?;
                if !(lam.is_finite() && lam > 0.0) {
                    ok = false;
                    break 'scan;
                }
            }
        }
        if ok {
            t_valid = Some(t);
        } else {
            break;
        }
        t += grid_step;
    }
    let t_beta = t_valid.ok_or(ExtendError::NoPositiveDepth)? * 0.5;
    Ok(LocalExtension { collar_chart: collar.chart, ext, pos_asts, t_beta })
}

// ---------------------------------------------------------------------------
// Partition of unity and global assembly
// ---------------------------------------------------------------------------

/// Collar-coordinate partition of unity: the extension weight `eta_beta` is 1
/// on `|s| <= r0` and 0 beyond `|s| >= r1`; `eta_M = 1 - eta_beta` on the M
/// side, `eta_Q = 1 - eta_beta` on the Q side. The three weights sum to 1
/// identically and `eta_M = 1` outside the collar inside M.
#[derive(Debug, Clone, Copy)]
pub struct PartitionOfUnity {
    pub r0: f64,
    pub r1: f64,
}

impl PartitionOfUnity {
    pub fn new(r0: f64, r1: f64) -> PartitionOfUnity {
        assert!(0.0 < r0 && r0 < r1);
        PartitionOfUnity { r0, r1 }
    }

    pub fn eta_beta(&self, s: f64) -> f64 {
        Weight1d::window(-self.r1, -self.r0, self.r0, self.r1).eval(s).0
    }

    pub fn eta_m(&self, s: f64) -> f64 {
        if s >= 0.0 {
            0.0
        } else {
            1.0 - self.eta_beta(s)
        }
    }

    pub fn eta_q(&self, s: f64) -> f64 {
        if s <= 0.0 {
            0.0
        } else {
            1.0 - self.eta_beta(s)
        }
    }
}

/// Assembles the global extension metric `gt` from the per-collar local
/// extensions and the partition of unity, then validates it on the mesh:
/// weights sum to 1, `gt = gM` exactly at M vertices, and the assembled
/// matrix is positive definite at every vertex.
pub fn assemble_global_metric(
    glued: &mut GluedManifold,
    exts: &[LocalExtension],
    pou: &PartitionOfUnity,
    mesh: Option<&Mesh>,
) -> Result<(), ExtendError> {
    for ext in exts {
        if pou.r1 > ext.t_beta {
            return Err(ExtendError::SupportExceedsValidity { r1: pou.r1, t_beta: ext.t_beta });
        }
    }
    let dim = glued.man.dim;
    let n_charts = glued.man.charts.len();
    let gm_fields = glued.man.metric("gM")?.clone();
    let gq_fields = glued.man.metric("gQ")?.clone();

    let mut gt: Vec<Option<MetricField>> = vec![None; n_charts];
    // M charts: exact restriction.
    for (ci, f) in gm_fields.iter().enumerate().take(glued.m_charts) {
        gt[ci] = f.clone();
    }
    // Q charts: either plain gQ (away from every collar) or a blend along the
    // chart's own boundary coordinate.
    for ci in glued.m_charts..glued.m_charts + glued.q_charts {
        let Some(gq) = gq_fields[ci].as_ref() else { continue };
        let collar = glued.collars.iter().find(|c| c.q_chart == ci);
        match collar {
            None => gt[ci] = Some(gq.clone()),
            Some(info) => {
                let ext = exts
                    .iter()
                    .find(|e| e.collar_chart == info.chart)
                    .ok_or(ExtendError::NoPositiveDepth)?;
                // pull the reflected side back through (uq, x2q) -> (eta^-1(uq), -x2q)
                let pulled = pull_back_upper_tri(&ext.pos_asts, &info.eta.inverse, dim)?;
                let mut coeffs = Vec::new();
                for (idx, _) in iter_upper(dim).enumerate() {
                    let CoeffField::Expr(q) = gq.coeff_linear(idx) else {
                        return Err(ExtendError::NonSymbolicMetric);
                    };
                    // eta_beta in Q coordinates: up-ramp on x2q in [-r1, -r0]
                    coeffs.push(CoeffField::Blend {
                        axis: dim - 1,
                        terms: vec![
                            (Weight1d::up(-pou.r1, -pou.r0), CoeffField::expr(pulled[idx].clone())),
                            (Weight1d::down(-pou.r1, -pou.r0), CoeffField::expr(q.ast().clone())),
                        ],
                    });
                }
                gt[ci] = Some(MetricField::new(dim, coeffs));
            }
        }
    }
    // Collar charts: two-sided with the blend on the positive side.
    for info in &glued.collars {
        let ext = exts
            .iter()
            .find(|e| e.collar_chart == info.chart)
            .ok_or(ExtendError::NoPositiveDepth)?;
        let gm = gm_fields[info.chart].as_ref().ok_or(ExtendError::NonSymbolicMetric)?;
        let gq = gq_fields[info.chart].as_ref().ok_or(ExtendError::NonSymbolicMetric)?;
        let mut coeffs = Vec::new();
        for (idx, _) in iter_upper(dim).enumerate() {
            let CoeffField::Expr(m) = gm.coeff_linear(idx) else {
                return Err(ExtendError::NonSymbolicMetric);
            };
            let CoeffField::Expr(q) = gq.coeff_linear(idx) else {
                return Err(ExtendError::NonSymbolicMetric);
            };
            let blend = CoeffField::Blend {
                axis: dim - 1,
                terms: vec![
                    (Weight1d::down(pou.r0, pou.r1), CoeffField::expr(ext.pos_asts[idx].clone())),
                    (Weight1d::up(pou.r0, pou.r1), CoeffField::expr(q.ast().clone())),
                ],
            };
            coeffs.push(CoeffField::TwoSided {
                axis: dim - 1,
                neg: Box::new(CoeffField::expr(m.ast().clone())),
                pos: Box::new(blend),
            });
        }
        gt[info.chart] = Some(MetricField::new(dim, coeffs));
    }
    glued.man.metrics.insert("gt".to_string(), gt);

    if let Some(mesh) = mesh {
        validate_assembly(glued, pou, mesh)?;
    }
    Ok(())
}

fn iter_upper(m: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..m).flat_map(move |i| (i..m).map(move |j| (i, j)))
}

/// Pullback of upper-triangle ASTs under `(uq, x2q) -> (inv(uq), -x2q)`.
fn pull_back_upper_tri(
    asts: &[ExprAst],
    inverse_1d: &ExprAst,
    dim: usize,
) -> Result<Vec<ExprAst>, ExtendError> {
    assert_eq!(dim, 2);
    let inv = inverse_1d.substitute(&[ExprAst::var(0, dim)]);
    let dinv = crate::expr::diff_expr(&inv, 0);
    let maps =
        vec![inv.clone(), crate::expr::parse_expr("-x2", dim).map_err(|_| ExtendError::NonSymbolicMetric)?];
    let mut out = Vec::new();
    for (idx, (i, j)) in iter_upper(dim).enumerate() {
        let mut ast = asts[idx].substitute(&maps);
        for index in [i, j] {
            if index == 0 {
                ast = crate::expr::parse_expr(&format!("({ast})*({dinv})"), dim)
                    .map_err(|_| ExtendError::NonSymbolicMetric)?;
            } else {
                ast = crate::expr::parse_expr(&format!("-({ast})"), dim)
                    .map_err(|_| ExtendError::NonSymbolicMetric)?;
            }
        }
        out.push(ast);
    }
    Ok(out)
}

const RESTRICTION_TOL: f64 = 1e-12;

/// Mesh-vertex validation of the assembled metric: partition sums to 1, the
/// restriction to M is exact, and the matrix stays positive definite.
pub fn validate_assembly(
    glued: &GluedManifold,
    pou: &PartitionOfUnity,
    mesh: &Mesh,
) -> Result<(), ExtendError> {
    let man = &glued.man;
    let gt = man.metric("gt")?;
    let gm = man.metric("gM")?;
    for (vi, v) in mesh.vertices.iter().enumerate() {
        // partition-of-unity sum on collar-side vertices
        if let Ok((_, s)) = crate::glue::collar_coordinates(glued, v.chart, &v.coords) {
            let sum = pou.eta_m(s) + pou.eta_q(s) + pou.eta_beta(s);
            if (sum - 1.0).abs() > 1e-9 {
                return Err(ExtendError::PartitionSum { vertex: vi as u32, defect: (sum - 1.0).abs() });
            }
        }
        let Some(g) = gt[v.chart].as_ref() else { continue };
        let mat = g.matrix(&v.coords)?;
        let min_eig = linalg::min_eigenvalue_sym(&mat, man.dim);
        if !(min_eig.is_finite() && min_eig > 0.0) {
            return Err(ExtendError::NotPositiveDefiniteAtVertex {
                vertex: vi as u32,
                chart: v.chart,
                min_eig,
            });
        }
        if v.flags.in_m {
            if let Some(gm_field) = gm[v.chart].as_ref() {
                let mm = gm_field.matrix(&v.coords)?;
                let defect = mat
                    .iter()
                    .zip(&mm)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f64, f64::max);
                if defect > RESTRICTION_TOL {
                    return Err(ExtendError::RestrictionDefect { vertex: vi as u32, defect });
                }
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Fermi collar and the reflection rho
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct FermiSample {
    pub chart: usize,
    pub u: f64,
    /// chosen reflection depth (arc length)
    pub s0: f64,
    /// largest sampled operator norm of d rho down to depth s0
    pub max_drho: f64,
    arc_step: f64,
    /// normal geodesic into the Q side, points at arc steps (collar chart)
    q_points: Vec<Vec<f64>>,
    /// normal geodesic into the M side
    m_points: Vec<Vec<f64>>,
}

impl FermiSample {
    /// Point at signed Fermi depth: positive into Q, negative into M.
    pub fn point_at_depth(&self, t: f64) -> (usize, Vec<f64>) {
        let pts = if t >= 0.0 { &self.q_points } else { &self.m_points };
        let a = t.abs() / self.arc_step;
        let i = (a.floor() as usize).min(pts.len() - 1);
        let j = (i + 1).min(pts.len() - 1);
        let w = (a - i as f64).clamp(0.0, 1.0);
        let p: Vec<f64> =
            pts[i].iter().zip(&pts[j]).map(|(x, y)| x + w * (y - x)).collect();
        (self.chart, p)
    }
}

#[derive(Debug)]
pub struct FermiCollar {
    pub samples: Vec<FermiSample>,
    pub eps: f64,
    pub collar_chart: usize,
    pub periodic: bool,
    /// smoothed depth profile along the boundary parameter
    pub s0_spline: ClampedSpline,
    /// boundary sample spacing in the u coordinate
    pub u_spacing: f64,
}

impl FermiCollar {
    pub fn s0_at(&self, u: f64) -> f64 {
        self.s0_spline.eval(u)
    }

    pub fn min_s0(&self) -> f64 {
        self.samples.iter().map(|s| s.s0).fold(f64::INFINITY, f64::min)
    }
}

/// Shoots unit-speed normal geodesics of `gt` from boundary samples and picks
/// the reflection depth per sample by a 20-iteration halving search on the
/// combined injectivity and `|d rho| <= 1 + eps` predicate.
pub fn build_fermi_collar(
    glued: &GluedManifold,
    collar: &CollarInfo,
    eps: f64,
    spacing: f64,
    s0_cap: f64,
) -> Result<FermiCollar, ExtendError> {
    if eps <= 0.0 {
        return Err(ExtendError::EpsilonNotPositive);
    }
    let man = &glued.man;
    let g = man.metric_on_chart("gt", collar.chart)?;
    let span = collar.component.u_max - collar.component.u_min;
    let count = (span / spacing).ceil().max(4.0) as usize;
    let du = span / count as f64;
    let n_samples = if collar.component.periodic { count } else { count + 1 };
    // stay inside the collar chart
    let cap = s0_cap.min(0.9 * collar.half_width);
    let arc_step = (cap / 40.0).min(spacing / 2.0);
    let n_arc = (cap / arc_step).ceil() as usize + 1;

    let mut samples = Vec::with_capacity(n_samples);
    for k in 0..n_samples {
        let u = collar.component.u_min + k as f64 * du;
        let p = [u, 0.0];
        let gm = g.matrix(&p)?;
        let inv = linalg::invert(&gm, 2).ok_or(ExtendError::NoPositiveDepth)?;
        // outward unit normal (+s side): g^{-1} ds / |g^{-1} ds|
        let g22_up = inv[3];
        let nu = [inv[1] / g22_up.sqrt(), inv[3] / g22_up.sqrt()];
        let shoot_side = |dir: [f64; 2]| -> Result<Vec<Vec<f64>>, ExtendError> {
            let start = GeodesicState {
                chart: collar.chart,
                position: vec![u, 0.0],
                velocity: vec![dir[0], dir[1]],
                arc_length: 0.0,
            };
            let run = shoot_geodesic(man, "gt", &start, cap + arc_step, arc_step)
                .map_err(|e| ExtendError::Shooting(e.to_string()))?;
            let mut pts = Vec::with_capacity(n_arc);
            for (_, sample) in &run.path.samples {
                if let crate::lengthspace::PathSample::ChartPoint { chart, coords } = sample {
                    if *chart != collar.chart {
                        break;
                    }
                    pts.push(coords.clone());
                }
            }
            if pts.len() < 2 {
                return Err(ExtendError::Shooting("trajectory left the collar".into()));
            }
            Ok(pts)
        };
        let q_points = shoot_side([nu[0], nu[1]])?;
        let m_points = shoot_side([-nu[0], -nu[1]])?;
        samples.push(FermiSample {
            chart: collar.chart,
            u,
            s0: cap.min((q_points.len().min(m_points.len()) - 1) as f64 * arc_step),
            max_drho: 1.0,
            arc_step,
            q_points,
            m_points,
        });
    }

    // boundary spacing under gt, for the injectivity threshold
    let g_spacing = {
        let mut min_sp = f64::INFINITY;
        for k in 0..samples.len() {
            let k2 = (k + 1) % samples.len();
            if k2 == 0 && !collar.component.periodic {
                break;
            }
            let a = [samples[k].u, 0.0];
            let b = [samples[k2].u, 0.0];
            // periodic wrap: skip the long jump, distance via du instead
            let d = if (b[0] - a[0]).abs() > 1.5 * du {
                g.segment_length(&[a[0], 0.0], &[a[0] + du, 0.0])?
            } else {
                g.segment_length(&a, &b)?
            };
            min_sp = min_sp.min(d);
        }
        min_sp
    };

    // per-sample halving search
    let n = samples.len();
    let mut chosen = vec![0.0f64; n];
    let mut max_drho = vec![1.0f64; n];
    for i in 0..n {
        let prev = if i == 0 {
            if collar.component.periodic { n - 1 } else { usize::MAX }
        } else {
            i - 1
        };
        let next = if i + 1 == n {
            if collar.component.periodic { 0 } else { usize::MAX }
        } else {
            i + 1
        };
        let predicate = |depth: f64| -> Result<(bool, f64), ExtendError> {
            let grid = 16usize;
            let mut worst = 1.0f64;
            for d in 1..=grid {
                let s = depth * d as f64 / grid as f64;
                // injectivity: tip separation at depth s from the neighbors
                for nb in [prev, next] {
                    if nb == usize::MAX {
                        continue;
                    }
                    let (_, tip_i) = samples[i].point_at_depth(s);
                    let (_, tip_n) = samples[nb].point_at_depth(s);
                    let sep = g.segment_length(&tip_i, &tip_n)?;
                    if sep < 0.5 * g_spacing {
                        return Ok((false, worst));
                    }
                }
                // finite-difference tangential stretch of rho at depth s
                if prev != usize::MAX && next != usize::MAX {
                    let ratio = stretch_ratio(man, &samples, i, prev, next, s)?;
                    worst = worst.max(ratio);
                    if ratio > 1.0 + eps {
                        return Ok((false, worst));
                    }
                }
            }
            Ok((true, worst))
        };
        let cap_i = samples[i].s0;
        let (full_ok, full_worst) = predicate(cap_i)?;
        if full_ok {
            chosen[i] = cap_i;
            max_drho[i] = full_worst;
        } else {
            let mut lo = 0.0;
            let mut hi = cap_i;
            let mut worst = 1.0;
            for _ in 0..20 {
                let mid = 0.5 * (lo + hi);
                let (ok, w) = predicate(mid)?;
                if ok {
                    lo = mid;
                    worst = w;
                } else {
                    hi = mid;
                }
            }
            if lo == 0.0 {
                return Err(ExtendError::NoPositiveDepth);
            }
            chosen[i] = lo;
            max_drho[i] = worst;
        }
    }
    for (i, s) in samples.iter_mut().enumerate() {
        s.s0 = chosen[i];
        s.max_drho = max_drho[i];
    }

    let us: Vec<f64> = samples.iter().map(|s| s.u).collect();
    let s0s: Vec<f64> = samples.iter().map(|s| s.s0).collect();
    let s0_spline = ClampedSpline::fit(us, s0s);
    Ok(FermiCollar {
        samples,
        eps,
        collar_chart: collar.chart,
        periodic: collar.component.periodic,
        s0_spline,
        u_spacing: du,
    })
}

/// Tangential stretch of the reflection at `(u_i, s)`, estimated from the
/// neighboring normal geodesics: |image difference| / |source difference|
/// under gt.
fn stretch_ratio(
    man: &ManifoldWithBoundary,
    samples: &[FermiSample],
    i: usize,
    prev: usize,
    next: usize,
    s: f64,
) -> Result<f64, ExtendError> {
    let g = man.metric_on_chart("gt", samples[i].chart)?;
    let (_, src_c) = samples[i].point_at_depth(s);
    let (_, src_p) = samples[prev].point_at_depth(s);
    let (_, src_n) = samples[next].point_at_depth(s);
    let (_, img_c) = samples[i].point_at_depth(-s);
    let (_, img_p) = samples[prev].point_at_depth(-s);
    let (_, img_n) = samples[next].point_at_depth(-s);
    let dv = |a: &[f64], b: &[f64]| -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| y - x).collect()
    };
    let src_vec = dv(&src_p, &src_n);
    let img_vec = dv(&img_p, &img_n);
    let num = g.speed(&img_c, &img_vec)?;
    let den = g.speed(&src_c, &src_vec)?;
    if den <= 0.0 {
        return Err(ExtendError::NoPositiveDepth);
    }
    Ok(num / den)
}

/// The reflection `rho`: identity on M, Fermi reflection `(u, s) -> (u, -s)`
/// on the collar region of the Q side.
pub fn project_rho(
    collar: &FermiCollar,
    glued: &GluedManifold,
    chart: usize,
    p: &[f64],
) -> Result<(usize, Vec<f64>), ExtendError> {
    // M points map to themselves
    let side_m = match glued.man.charts[chart].side {
        crate::atlas::ChartSide::M => true,
        crate::atlas::ChartSide::Collar => p[p.len() - 1] <= 1e-12,
        crate::atlas::ChartSide::Q => false,
    };
    if side_m {
        return Ok((chart, p.to_vec()));
    }
    // resolve into collar coordinates
    let (u, s) = crate::glue::collar_coordinates(glued, chart, p)
        .map_err(|_| ExtendError::OutsideP { point: p.to_vec() })?;
    if s <= 1e-12 {
        return Ok((chart, p.to_vec()));
    }
    // locate the Fermi coordinates by nearest normal trajectories
    let (i0, i1, w, depth) = locate_fermi(collar, &[u, s])?;
    if depth > collar.s0_at(u) + 1e-9 {
        return Err(ExtendError::OutsideP { point: p.to_vec() });
    }
    let (_, m0) = collar.samples[i0].point_at_depth(-depth);
    let (_, m1) = collar.samples[i1].point_at_depth(-depth);
    let img: Vec<f64> = m0.iter().zip(&m1).map(|(a, b)| a + w * (b - a)).collect();
    Ok((collar.collar_chart, img))
}

/// Finds the bracketing boundary samples and interpolation weight for a
/// collar-chart point, together with its Fermi depth.
fn locate_fermi(collar: &FermiCollar, p: &[f64]) -> Result<(usize, usize, f64, f64), ExtendError> {
    let n = collar.samples.len();
    let mut best = (0usize, f64::INFINITY, 0.0f64); // (sample, distance^2, depth)
    for (i, s) in collar.samples.iter().enumerate() {
        // project p onto the polyline of the outgoing trajectory
        for k in 1..s.q_points.len() {
            let a = &s.q_points[k - 1];
            let b = &s.q_points[k];
            let seg: Vec<f64> = a.iter().zip(b).map(|(x, y)| y - x).collect();
            let rel: Vec<f64> = a.iter().zip(p).map(|(x, y)| y - x).collect();
            let len2: f64 = seg.iter().map(|x| x * x).sum();
            if len2 == 0.0 {
                continue;
            }
            let t = (seg.iter().zip(&rel).map(|(x, y)| x * y).sum::<f64>() / len2).clamp(0.0, 1.0);
            let d2: f64 = (0..p.len())
                .map(|d| (a[d] + t * seg[d] - p[d]).powi(2))
                .sum();
            if d2 < best.1 {
                best = (i, d2, ((k - 1) as f64 + t) * s.arc_step);
            }
        }
    }
    let (i, _, depth) = best;
    // neighbor side: compare distance to the two adjacent trajectories
    let n_next = if i + 1 < n { i + 1 } else if collar.periodic { 0 } else { i };
    let n_prev = if i > 0 { i - 1 } else if collar.periodic { n - 1 } else { i };
    let d_to = |j: usize| -> f64 {
        let (_, q) = collar.samples[j].point_at_depth(depth);
        q.iter().zip(p).map(|(x, y)| (x - y) * (x - y)).sum()
    };
    let (j, dj) = if d_to(n_next) <= d_to(n_prev) { (n_next, d_to(n_next)) } else { (n_prev, d_to(n_prev)) };
    let di = d_to(i);
    let w = if di + dj <= 0.0 { 0.0 } else { (di.sqrt()) / (di.sqrt() + dj.sqrt()) };
    Ok((i, j, w, depth))
}

/// Round-trip defect |rho^{-1}(rho(x)) - x| in collar coordinates, for tests:
/// reflecting twice is the identity on the collar.
pub fn rho_round_trip_defect(
    collar: &FermiCollar,
    glued: &GluedManifold,
    chart: usize,
    p: &[f64],
) -> Result<f64, ExtendError> {
    let (c1, img) = project_rho(collar, glued, chart, p)?;
    // reflect the image back by negating its Fermi depth
    let (u, s) = crate::glue::collar_coordinates(glued, c1, &img)
        .map_err(|_| ExtendError::OutsideP { point: img.clone() })?;
    let (i0, i1, w, depth) = locate_fermi_signed(collar, &[u, s])?;
    let (_, q0) = collar.samples[i0].point_at_depth(-depth);
    let (_, q1) = collar.samples[i1].point_at_depth(-depth);
    let back: Vec<f64> = q0.iter().zip(&q1).map(|(a, b)| a + w * (b - a)).collect();
    let (u0, s0) = crate::glue::collar_coordinates(glued, chart, p)
        .map_err(|_| ExtendError::OutsideP { point: p.to_vec() })?;
    Ok(((back[0] - u0).powi(2) + (back[1] - s0).powi(2)).sqrt())
}

fn locate_fermi_signed(
    collar: &FermiCollar,
    p: &[f64],
) -> Result<(usize, usize, f64, f64), ExtendError> {
    if p[1] >= 0.0 {
        return locate_fermi(collar, p);
    }
    let flipped = [p[0], -p[1]];
    // mirror: measure depth along the m-side trajectories
    let n = collar.samples.len();
    let mut best = (0usize, f64::INFINITY, 0.0f64);
    for (i, s) in collar.samples.iter().enumerate() {
        for k in 1..s.m_points.len() {
            let a = &s.m_points[k - 1];
            let b = &s.m_points[k];
            let seg: Vec<f64> = a.iter().zip(b).map(|(x, y)| y - x).collect();
            let rel: Vec<f64> = a.iter().zip(p).map(|(x, y)| y - x).collect();
            let len2: f64 = seg.iter().map(|x| x * x).sum();
            if len2 == 0.0 {
                continue;
            }
            let t = (seg.iter().zip(&rel).map(|(x, y)| x * y).sum::<f64>() / len2).clamp(0.0, 1.0);
            let d2: f64 = (0..p.len())
                .map(|d| (a[d] + t * seg[d] - p[d]).powi(2))
                .sum();
            if d2 < best.1 {
                best = (i, d2, -(((k - 1) as f64 + t) * s.arc_step));
            }
        }
    }
    let _ = flipped;
    let (i, _, depth) = best;
    let n_next = if i + 1 < n { i + 1 } else if collar.periodic { 0 } else { i };
    let n_prev = if i > 0 { i - 1 } else if collar.periodic { n - 1 } else { i };
    let d_to = |j: usize| -> f64 {
        let (_, q) = collar.samples[j].point_at_depth(depth);
        q.iter().zip(p).map(|(x, y)| (x - y) * (x - y)).sum()
    };
    let (j, dj) = if d_to(n_next) <= d_to(n_prev) { (n_next, d_to(n_next)) } else { (n_prev, d_to(n_prev)) };
    let di = d_to(i);
    let w = if di + dj <= 0.0 { 0.0 } else { (di.sqrt()) / (di.sqrt() + dj.sqrt()) };
    Ok((i, j, w, depth))
}

// ---------------------------------------------------------------------------
// Lipschitz audit
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize)]
pub struct LipschitzRow {
    pub path_id: String,
    pub source_length: f64,
    pub image_length: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct LipschitzAudit {
    pub rows: Vec<LipschitzRow>,
    pub max_ratio: f64,
    pub bound: f64,
    pub pass: bool,
}

pub const LIPSCHITZ_SLACK: f64 = 0.02;

/// Max over sampled paths of `L_gM(rho . gamma) / L_gt(gamma)`; passes iff
/// the max stays within `(1 + eps)(1 + tau)` with tau the discretization
/// slack.
pub fn lipschitz_audit(
    collar: &FermiCollar,
    glued: &GluedManifold,
    paths: &[(String, crate::lengthspace::SampledPath)],
    mesh: Option<&Mesh>,
) -> Result<LipschitzAudit, ExtendError> {
    let bound = (1.0 + collar.eps) * (1.0 + LIPSCHITZ_SLACK);
    let mut rows = Vec::new();
    let mut max_ratio = 0.0f64;
    for (id, path) in paths {
        let source_length = riemannian_length(path, &glued.man, mesh, "gt")
            .map_err(|e| ExtendError::Shooting(e.to_string()))?;
        // map every sample through rho
        let mut mapped = Vec::new();
        for (k, (t, sample)) in path.samples.iter().enumerate() {
            let (chart, coords) = match sample {
                crate::lengthspace::PathSample::ChartPoint { chart, coords } => {
                    (*chart, coords.clone())
                }
                crate::lengthspace::PathSample::Vertex(v) => {
                    let mesh = mesh.ok_or(ExtendError::OutsideP { point: vec![] })?;
                    let vert = &mesh.vertices[*v as usize];
                    (vert.chart, vert.coords.clone())
                }
            };
            let (c2, p2) = project_rho(collar, glued, chart, &coords)?;
            let _ = k;
            mapped.push((*t, crate::lengthspace::PathSample::ChartPoint { chart: c2, coords: p2 }));
        }
        let image = crate::lengthspace::SampledPath::new(mapped, "gM".to_string());
        let image_length = riemannian_length(&image, &glued.man, mesh, "gM")
            .map_err(|e| ExtendError::Shooting(e.to_string()))?;
        let ratio = if source_length > 0.0 { image_length / source_length } else { 1.0 };
        max_ratio = max_ratio.max(ratio);
        rows.push(LipschitzRow {
            path_id: id.clone(),
            source_length,
            image_length,
            ratio,
        });
    }
    Ok(LipschitzAudit { rows, max_ratio, bound, pass: max_ratio <= bound })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::atlas::{sample_mesh, Window};
    use crate::expr::parse_expr;
    use crate::glue::{glue, BoundaryDiffeo, ComponentDiffeo};
    use approx::assert_relative_eq;

    fn flat_double() -> GluedManifold {
        let m = crate::glue::flat_half_plane(50.0);
        let q = crate::glue::flat_half_plane(50.0);
        let eta = BoundaryDiffeo { components: vec![ComponentDiffeo::identity()] };
        glue(&m, &q, &eta, 1.0).unwrap()
    }

    fn window3(extent: f64) -> Window {
        Window::default()
            .with_rect(0, vec![-extent, -extent], vec![extent, extent])
            .with_rect(1, vec![-extent, -extent], vec![extent, extent])
            .with_rect(2, vec![-extent, -extent], vec![extent, extent])
    }

    #[test]
    fn seeley_coefficients_match_derivative_conditions() {
        for j in 0..3 {
            let sum: f64 = SEELEY_TERMS.iter().map(|(c, s)| c * s.powi(j)).sum();
            assert_relative_eq!(sum, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn constant_metric_extends_to_itself() {
        let glued = flat_double();
        let ext = extend_chart_metric(&glued, &glued.collars[0], 0.1).unwrap();
        // full collar depth valid, halved by policy
        assert_relative_eq!(ext.t_beta, 0.5, epsilon = 1e-12);
        for s in [0.1, 0.3, 0.7] {
            let m = ext.ext.matrix(&[0.2, s]).unwrap();
            assert_relative_eq!(m[0], 1.0, epsilon = 1e-12);
            assert_relative_eq!(m[1], 0.0, epsilon = 1e-12);
            assert_relative_eq!(m[3], 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn variable_coefficient_extension_continues_smoothly() {
        // M metric diag(1, 1 - x2) on x2 <= 0; the reflection reproduces the
        // polynomial exactly (degree <= 2), so the extension is 1 - x2 on the
        // far side too and stays PD until x2 = 1.
        let mut m = crate::glue::flat_half_plane(50.0);
        let g = crate::field::MetricField::from_exprs(
            2,
            vec![
                parse_expr("1", 2).unwrap(),
                parse_expr("0", 2).unwrap(),
                parse_expr("1 - x2", 2).unwrap(),
            ],
        );
        m.metrics.insert("g".to_string(), vec![Some(g)]);
        let q = crate::glue::flat_half_plane(50.0);
        let eta = BoundaryDiffeo { components: vec![ComponentDiffeo::identity()] };
        let glued = glue(&m, &q, &eta, 1.0).unwrap();
        let ext = extend_chart_metric(&glued, &glued.collars[0], 0.1).unwrap();
        for s in [0.2, 0.5, 0.8] {
            let mat = ext.ext.matrix(&[0.0, s]).unwrap();
            assert_relative_eq!(mat[3], 1.0 - s, epsilon = 1e-9);
        }
        assert!(ext.t_beta > 0.3);
    }

    #[test]
    fn degenerate_boundary_metric_is_rejected() {
        let mut m = crate::glue::flat_half_plane(50.0);
        // vanishes on the boundary x2 = 0
        let g = crate::field::MetricField::from_exprs(
            2,
            vec![
                parse_expr("x2*x2", 2).unwrap(),
                parse_expr("0", 2).unwrap(),
                parse_expr("1", 2).unwrap(),
            ],
        );
        m.metrics.insert("g".to_string(), vec![Some(g)]);
        let q = crate::glue::flat_half_plane(50.0);
        let eta = BoundaryDiffeo { components: vec![ComponentDiffeo::identity()] };
        let glued = glue(&m, &q, &eta, 1.0).unwrap();
        assert!(matches!(
            extend_chart_metric(&glued, &glued.collars[0], 0.1),
            Err(ExtendError::DegenerateBoundaryMetric { .. })
        ));
    }

    #[test]
    fn flat_double_assembles_to_identity() {
        let mut glued = flat_double();
        let ext = extend_chart_metric(&glued, &glued.collars[0], 0.1).unwrap();
        let pou = PartitionOfUnity::new(0.1, 0.4);
        let mesh = sample_mesh(&glued.man, 0.25, &window3(1.5)).unwrap();
        assemble_global_metric(&mut glued, &[ext], &pou, Some(&mesh)).unwrap();
        let gt = glued.man.metric("gt").unwrap();
        for chart in 0..3 {
            let g = gt[chart].as_ref().unwrap();
            for p in [[0.3, -0.9], [0.0, 0.0], [-0.2, 0.2], [0.5, 0.8]] {
                if !glued.man.charts[chart].domain.contains(&p) {
                    continue;
                }
                let mat = g.matrix(&p).unwrap();
                assert_relative_eq!(mat[0], 1.0, epsilon = 1e-9);
                assert_relative_eq!(mat[1], 0.0, epsilon = 1e-9);
                assert_relative_eq!(mat[3], 1.0, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn blended_metric_interpolates_and_restricts() {
        // gM = I, gQ = 4I: gt must equal I on the M side exactly and 4I deep
        // on the Q side.
        let m = crate::glue::flat_half_plane(50.0);
        let mut q = crate::glue::flat_half_plane(50.0);
        q.metrics.insert(
            "g".to_string(),
            vec![Some(crate::field::MetricField::conformal_expr(2, "4"))],
        );
        let eta = BoundaryDiffeo { components: vec![ComponentDiffeo::identity()] };
        let mut glued = glue(&m, &q, &eta, 1.0).unwrap();
        let ext = extend_chart_metric(&glued, &glued.collars[0], 0.1).unwrap();
        let pou = PartitionOfUnity::new(0.1, 0.4);
        let mesh = sample_mesh(&glued.man, 0.25, &window3(1.5)).unwrap();
        assemble_global_metric(&mut glued, &[ext], &pou, Some(&mesh)).unwrap();
        let gt = glued.man.metric("gt").unwrap();
        let collar_g = gt[glued.collars[0].chart].as_ref().unwrap();
        // M side: exactly I
        let mat = collar_g.matrix(&[0.1, -0.2]).unwrap();
        assert_relative_eq!(mat[0], 1.0, epsilon = 1e-12);
        // interface: the extension dominates, still I
        let mat = collar_g.matrix(&[0.1, 0.05]).unwrap();
        assert_relative_eq!(mat[0], 1.0, epsilon = 1e-12);
        // deep Q side: 4I
        let mat = collar_g.matrix(&[0.1, 0.8]).unwrap();
        assert_relative_eq!(mat[0], 4.0, epsilon = 1e-12);
        // in-between: strictly interpolating and SPD
        let mat = collar_g.matrix(&[0.1, 0.25]).unwrap();
        assert!(mat[0] > 1.0 && mat[0] < 4.0);
        // the hand blend at s = 0.25: eta_beta * 1 + eta_q * 4
        let pou_v = PartitionOfUnity::new(0.1, 0.4);
        let expect = pou_v.eta_beta(0.25) + 4.0 * pou_v.eta_q(0.25);
        assert_relative_eq!(mat[0], expect, epsilon = 1e-12);
        // Q chart carries the same blend in its own coordinates
        let q_g = gt[1].as_ref().unwrap();
        let mat_q = q_g.matrix(&[0.1, -0.25]).unwrap();
        assert_relative_eq!(mat_q[0], expect, epsilon = 1e-12);
    }

    #[test]
    fn support_exceeding_validity_is_rejected() {
        let mut glued = flat_double();
        let mut ext = extend_chart_metric(&glued, &glued.collars[0], 0.1).unwrap();
        ext.t_beta = 0.2;
        let pou = PartitionOfUnity::new(0.1, 0.4);
        assert!(matches!(
            assemble_global_metric(&mut glued, &[ext], &pou, None),
            Err(ExtendError::SupportExceedsValidity { .. })
        ));
    }

    #[test]
    fn flat_double_fermi_collar_is_isometric() {
        let mut glued = flat_double();
        let ext = extend_chart_metric(&glued, &glued.collars[0], 0.1).unwrap();
        let pou = PartitionOfUnity::new(0.1, 0.4);
        assemble_global_metric(&mut glued, &[ext], &pou, None).unwrap();
        // restrict the boundary extent so sampling stays modest
        let mut g2 = glued.clone();
        g2.collars[0].component.u_min = -2.0;
        g2.collars[0].component.u_max = 2.0;
        let collar = build_fermi_collar(&g2, &g2.collars[0], 1.0, 0.25, 0.5).unwrap();
        for s in &collar.samples {
            assert!((s.max_drho - 1.0).abs() <= 1e-9, "flat reflection stretches: {}", s.max_drho);
            assert_relative_eq!(s.s0, 0.5, epsilon = 1e-9);
        }
        // rho maps (x, s) to (x, -s)
        let (chart, img) = project_rho(&collar, &g2, g2.collars[0].chart, &[0.3, 0.2]).unwrap();
        assert_eq!(chart, g2.collars[0].chart);
        assert_relative_eq!(img[0], 0.3, epsilon = 1e-9);
        assert_relative_eq!(img[1], -0.2, epsilon = 1e-9);
        // identity on M
        let (_, img) = project_rho(&collar, &g2, 0, &[0.5, -0.4]).unwrap();
        assert_eq!(img, vec![0.5, -0.4]);
        // outside P
        assert!(matches!(
            project_rho(&collar, &g2, g2.collars[0].chart, &[0.0, 0.9]),
            Err(ExtendError::OutsideP { .. })
        ));
    }

    #[test]
    fn zero_epsilon_is_rejected() {
        let glued = flat_double();
        assert!(matches!(
            build_fermi_collar(&glued, &glued.collars[0], 0.0, 0.25, 0.5),
            Err(ExtendError::EpsilonNotPositive)
        ));
    }

    #[test]
    fn lipschitz_audit_flat_double_is_exact() {
        let mut glued = flat_double();
        let ext = extend_chart_metric(&glued, &glued.collars[0], 0.1).unwrap();
        let pou = PartitionOfUnity::new(0.1, 0.4);
        assemble_global_metric(&mut glued, &[ext], &pou, None).unwrap();
        let mut g2 = glued.clone();
        g2.collars[0].component.u_min = -2.0;
        g2.collars[0].component.u_max = 2.0;
        let collar = build_fermi_collar(&g2, &g2.collars[0], 1.0, 0.25, 0.5).unwrap();
        let collar_chart = g2.collars[0].chart;
        // a path crossing the interface diagonally, inside P
        let pts: Vec<(f64, crate::lengthspace::PathSample)> = (0..=20)
            .map(|i| {
                let t = i as f64 / 21.0;
                let x = -1.0 + 2.0 * t;
                let s = -0.4 + 0.8 * t;
                (
                    t,
                    crate::lengthspace::PathSample::ChartPoint {
                        chart: collar_chart,
                        coords: vec![x, s.min(0.45)],
                    },
                )
            })
            .collect();
        let path = crate::lengthspace::SampledPath::new(pts, "gt".into());
        // and one entirely inside M
        let m_pts: Vec<(f64, crate::lengthspace::PathSample)> = (0..=10)
            .map(|i| {
                let t = i as f64 / 11.0;
                (
                    t,
                    crate::lengthspace::PathSample::ChartPoint {
                        chart: 0,
                        coords: vec![t, -1.0 - t],
                    },
                )
            })
            .collect();
        let m_path = crate::lengthspace::SampledPath::new(m_pts, "gt".into());
        let audit = lipschitz_audit(
            &collar,
            &g2,
            &[("cross".into(), path), ("inside".into(), m_path)],
            None,
        )
        .unwrap();
        assert!(audit.pass);
        for row in &audit.rows {
            assert!(row.ratio <= 1.0 + 1e-9, "flat ratios stay at 1: {}", row.ratio);
        }
        let inside = audit.rows.iter().find(|r| r.path_id == "inside").unwrap();
        assert_relative_eq!(inside.ratio, 1.0, epsilon = 1e-12);
    }
}
