//! Differential-geometric kernels on chart atlases: Christoffel symbols,
//! geodesic shooting with chart hand-off, Gaussian curvature from symbolic
//! second derivatives, Riccati evolution of shape-operator eigenvalues,
//! curvature collars, and smooth Lipschitz exhaustion / cutoff fields.

use crate::atlas::{ManifoldWithBoundary, Mesh};
use crate::extend::FermiCollar;
use crate::field::{cutoff_profile, FieldError, MetricField};
use crate::lengthspace::{dijkstra, PathSample, SampledPath};
use crate::linalg;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeodesyError {
    #[error("metric is singular at {point:?}")]
    SingularMetric { point: Vec<f64> },
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Atlas(#[from] crate::atlas::AtlasError),
    #[error("smoothing radius {r} must be at least twice the mesh resolution {h}")]
    SmoothingTooNarrow { r: f64, h: f64 },
    #[error("curvature bound already violated on M at {point:?} (K = {k})")]
    BoundViolatedOnM { point: Vec<f64>, k: f64 },
    #[error("no positive collar depth satisfies the requested bounds")]
    NoCollarDepth,
}

// ---------------------------------------------------------------------------
// Christoffel symbols and curvature
// ---------------------------------------------------------------------------

/// Christoffel symbols of the second kind at `p`, indexed `gamma[k][i][j]`.
pub fn christoffel(g: &MetricField, p: &[f64]) -> Result<Vec<Vec<Vec<f64>>>, GeodesyError> {
    let m = g.dim();
    let gm = g.matrix(p)?;
    let inv = linalg::invert(&gm, m)
        .ok_or_else(|| GeodesyError::SingularMetric { point: p.to_vec() })?;
    let dg: Vec<Vec<f64>> =
        (0..m).map(|k| g.partial_matrix(k, p)).collect::<Result<_, _>>()?;
    let mut gamma = vec![vec![vec![0.0; m]; m]; m];
    for k in 0..m {
        for i in 0..m {
            for j in 0..m {
                let mut acc = 0.0;
                for l in 0..m {
                    acc += inv[k * m + l] * (dg[i][j * m + l] + dg[j][i * m + l] - dg[l][i * m + j]);
                }
                gamma[k][i][j] = 0.5 * acc;
            }
        }
    }
    Ok(gamma)
}

/// Partial derivatives of the Christoffel symbols, `dgamma[a][k][i][j]`
/// = d Gamma^k_ij / d x_a, from first and second metric derivatives.
fn christoffel_derivatives(
    g: &MetricField,
    p: &[f64],
) -> Result<Vec<Vec<Vec<Vec<f64>>>>, GeodesyError> {
    let m = g.dim();
    let gm = g.matrix(p)?;
    let inv = linalg::invert(&gm, m)
        .ok_or_else(|| GeodesyError::SingularMetric { point: p.to_vec() })?;
    let dg: Vec<Vec<f64>> =
        (0..m).map(|k| g.partial_matrix(k, p)).collect::<Result<_, _>>()?;
    // second derivatives ddg[a][b] = d^2 g / dx_a dx_b as matrices
    let mut ddg = vec![vec![vec![0.0; m * m]; m]; m];
    for a in 0..m {
        for b in 0..m {
            for i in 0..m {
                for j in i..m {
                    let v = g.coeff(i, j).second(a, b, p)?;
                    ddg[a][b][i * m + j] = v;
                    ddg[a][b][j * m + i] = v;
                }
            }
        }
    }
    // d(g^-1)/dx_a = -g^-1 (dg/dx_a) g^-1
    let mut dinv = vec![vec![0.0; m * m]; m];
    for a in 0..m {
        for k in 0..m {
            for l in 0..m {
                let mut acc = 0.0;
                for r in 0..m {
                    for s in 0..m {
                        acc += inv[k * m + r] * dg[a][r * m + s] * inv[s * m + l];
                    }
                }
                dinv[a][k * m + l] = -acc;
            }
        }
    }
    let mut dgamma = vec![vec![vec![vec![0.0; m]; m]; m]; m];
    for a in 0..m {
        for k in 0..m {
            for i in 0..m {
                for j in 0..m {
                    let mut acc = 0.0;
                    for l in 0..m {
                        let bracket = dg[i][j * m + l] + dg[j][i * m + l] - dg[l][i * m + j];
                        let dbracket =
                            ddg[a][i][j * m + l] + ddg[a][j][i * m + l] - ddg[a][l][i * m + j];
                        acc += dinv[a][k * m + l] * bracket + inv[k * m + l] * dbracket;
                    }
                    dgamma[a][k][i][j] = 0.5 * acc;
                }
            }
        }
    }
    Ok(dgamma)
}

/// Sectional curvature of the coordinate plane spanned by `e_a, e_b`.
pub fn sectional_curvature(
    g: &MetricField,
    p: &[f64],
    a: usize,
    b: usize,
) -> Result<f64, GeodesyError> {
    let m = g.dim();
    let gm = g.matrix(p)?;
    let gamma = christoffel(g, p)?;
    let dgamma = christoffel_derivatives(g, p)?;
    // R(e_a, e_b) e_b, k component
    let mut r = vec![0.0; m];
    for k in 0..m {
        let mut acc = dgamma[a][k][b][b] - dgamma[b][k][a][b];
        for l in 0..m {
            acc += gamma[k][a][l] * gamma[l][b][b] - gamma[k][b][l] * gamma[l][a][b];
        }
        r[k] = acc;
    }
    // <R(e_a,e_b)e_b, e_a>
    let mut num = 0.0;
    for k in 0..m {
        num += gm[a * m + k] * r[k];
    }
    let den = gm[a * m + a] * gm[b * m + b] - gm[a * m + b] * gm[a * m + b];
    if den.abs() < 1e-300 {
        return Err(GeodesyError::SingularMetric { point: p.to_vec() });
    }
    Ok(num / den)
}

/// Gaussian curvature of a surface metric (m = 2).
pub fn gaussian_curvature(g: &MetricField, p: &[f64]) -> Result<f64, GeodesyError> {
    assert_eq!(g.dim(), 2, "Gaussian curvature is the m = 2 kernel");
    sectional_curvature(g, p, 0, 1)
}

// ---------------------------------------------------------------------------
// Geodesic shooting
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GeodesicState {
    pub chart: usize,
    pub position: Vec<f64>,
    pub velocity: Vec<f64>,
    pub arc_length: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ShootOutcome {
    /// Reached the requested arc length.
    Completed,
    /// Left every chart: the desk-scale witness of an inextendable geodesic.
    BoundaryOfDomain,
}

#[derive(Debug, Clone)]
pub struct GeodesicRun {
    pub path: SampledPath,
    pub final_state: GeodesicState,
    pub outcome: ShootOutcome,
    /// max relative deviation of the g-speed from 1 along the trajectory
    pub max_speed_drift: f64,
}

/// Integrates the geodesic equation from `start` for arc length `total` with
/// fixed RK4 steps, handing the state across chart transitions as needed.
/// `start.velocity` is normalized to unit g-speed before integration.
pub fn shoot_geodesic(
    man: &ManifoldWithBoundary,
    tag: &str,
    start: &GeodesicState,
    total: f64,
    step: f64,
) -> Result<GeodesicRun, GeodesyError> {
    assert!(step > 0.0 && total > 0.0);
    let fields = man.metric(tag)?;
    let mut chart = start.chart;
    let mut x = start.position.clone();
    let mut v = start.velocity.clone();
    let m = man.dim;

    let metric_on = |chart: usize| -> Result<&MetricField, GeodesyError> {
        fields[chart].as_ref().ok_or(GeodesyError::SingularMetric { point: vec![] })
    };

    // normalize to unit speed
    let g0 = metric_on(chart)?;
    let sp = g0.speed(&x, &v)?;
    if sp <= 0.0 {
        return Err(GeodesyError::SingularMetric { point: x });
    }
    for vi in v.iter_mut() {
        *vi /= sp;
    }

    let mut samples: Vec<(usize, Vec<f64>)> = vec![(chart, x.clone())];
    let mut arc = 0.0;
    let mut max_drift = 0.0f64;
    let n_steps = (total / step).ceil() as usize;
    let mut outcome = ShootOutcome::Completed;

    'outer: for k in 0..n_steps {
        let dt = step.min(total - arc);
        if dt <= 0.0 {
            break;
        }
        let g = metric_on(chart)?;
        let deriv = |x: &[f64], v: &[f64]| -> Result<(Vec<f64>, Vec<f64>), GeodesyError> {
            let gamma = christoffel(g, x)?;
            let mut acc = vec![0.0; m];
            for kk in 0..m {
                let mut s = 0.0;
                for i in 0..m {
                    for j in 0..m {
                        s += gamma[kk][i][j] * v[i] * v[j];
                    }
                }
                acc[kk] = -s;
            }
            Ok((v.to_vec(), acc))
        };
        // RK4 step; if any stage leaves the chart metric's domain, fall through
        // to the hand-off logic below with the unadvanced state.
        let stepped = (|| -> Result<(Vec<f64>, Vec<f64>), GeodesyError> {
            let (k1x, k1v) = deriv(&x, &v)?;
            let xa: Vec<f64> = (0..m).map(|i| x[i] + 0.5 * dt * k1x[i]).collect();
            let va: Vec<f64> = (0..m).map(|i| v[i] + 0.5 * dt * k1v[i]).collect();
            let (k2x, k2v) = deriv(&xa, &va)?;
            let xb: Vec<f64> = (0..m).map(|i| x[i] + 0.5 * dt * k2x[i]).collect();
            let vb: Vec<f64> = (0..m).map(|i| v[i] + 0.5 * dt * k2v[i]).collect();
            let (k3x, k3v) = deriv(&xb, &vb)?;
            let xc: Vec<f64> = (0..m).map(|i| x[i] + dt * k3x[i]).collect();
            let vc: Vec<f64> = (0..m).map(|i| v[i] + dt * k3v[i]).collect();
            let (k4x, k4v) = deriv(&xc, &vc)?;
            let nx: Vec<f64> = (0..m)
                .map(|i| x[i] + dt / 6.0 * (k1x[i] + 2.0 * k2x[i] + 2.0 * k3x[i] + k4x[i]))
                .collect();
            let nv: Vec<f64> = (0..m)
                .map(|i| v[i] + dt / 6.0 * (k1v[i] + 2.0 * k2v[i] + 2.0 * k3v[i] + k4v[i]))
                .collect();
            Ok((nx, nv))
        })();
        let (nx, nv) = match stepped {
            Ok(s) => s,
            Err(_) => {
                outcome = ShootOutcome::BoundaryOfDomain;
                break 'outer;
            }
        };
        x = nx;
        v = nv;
        arc += dt;

        // chart hand-off when the state leaves the current chart
        if !man.charts[chart].domain.contains(&x) {
            let mut moved = false;
            for t in &man.transitions {
                if t.source != chart {
                    continue;
                }
                if !t.applies(&x) {
                    continue;
                }
                if let Some(mapped) = t.apply(&x) {
                    if man.charts[t.target].domain.contains(&mapped) {
                        if let Some(jac) = t.jacobian(&x) {
                            v = linalg::mat_vec(&jac, &v);
                            x = mapped;
                            chart = t.target;
                            moved = true;
                            break;
                        }
                    }
                }
            }
            if !moved {
                outcome = ShootOutcome::BoundaryOfDomain;
                break 'outer;
            }
        }
        samples.push((chart, x.clone()));
        if k % 16 == 0 {
            let sp = metric_on(chart)?.speed(&x, &v)?;
            max_drift = max_drift.max((sp - 1.0).abs());
        }
    }
    let sp_end = metric_on(chart).and_then(|g| Ok(g.speed(&x, &v)?)).unwrap_or(1.0);
    max_drift = max_drift.max((sp_end - 1.0).abs());

    let n = samples.len();
    let path = SampledPath::new(
        samples
            .into_iter()
            .enumerate()
            .map(|(i, (c, p))| {
                (i as f64 / n as f64, PathSample::ChartPoint { chart: c, coords: p })
            })
            .collect(),
        tag.to_string(),
    );
    Ok(GeodesicRun {
        path,
        final_state: GeodesicState { chart, position: x, velocity: v, arc_length: arc },
        outcome,
        max_speed_drift: max_drift,
    })
}

// ---------------------------------------------------------------------------
// Riccati evolution
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum RiccatiOutcome {
    Value(f64),
    BlowUp { time: f64 },
}

/// RK4 solution of `dl/dt = l^2 + K(t)` from `lambda0` to `t_end`. Blow-up is
/// declared when |l| exceeds `1/step`; the reported time is refined by
/// halving the step near the pole.
pub fn riccati_evolve(
    lambda0: f64,
    k: &dyn Fn(f64) -> f64,
    t_end: f64,
    step: f64,
) -> RiccatiOutcome {
    let threshold = 1.0 / step;
    let mut l = lambda0;
    let mut t = 0.0;
    let mut dt = step;
    let f = |t: f64, l: f64| l * l + k(t);
    while t < t_end - 1e-15 {
        let h = dt.min(t_end - t);
        let k1 = f(t, l);
        let k2 = f(t + 0.5 * h, l + 0.5 * h * k1);
        let k3 = f(t + 0.5 * h, l + 0.5 * h * k2);
        let k4 = f(t + h, l + h * k3);
        let nl = l + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        if !nl.is_finite() || nl.abs() > threshold {
            // refine the blow-up location
            if dt > step * 1e-6 {
                dt *= 0.5;
                continue;
            }
            return RiccatiOutcome::BlowUp { time: t };
        }
        l = nl;
        t += h;
    }
    RiccatiOutcome::Value(l)
}

// ---------------------------------------------------------------------------
// Curvature collar
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundSense {
    Below, // Curv < C
    Above, // Curv > C
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct LambdaRecord {
    pub u: f64,
    pub lambda0: f64,
    pub lambda_end: f64,
    pub sign_preserved: bool,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct CurvatureCollarReport {
    pub bound: f64,
    pub sense: String,
    pub depth: f64,
    pub k_min: f64,
    pub k_max: f64,
    /// margin between the strict bound and the worst collar sample
    pub margin: f64,
    pub lambda: Vec<LambdaRecord>,
    /// sampled parallel hypersurfaces (depth -> boundary-sample positions)
    pub parallel_family: Vec<(f64, Vec<Vec<f64>>)>,
}

/// Searches for the largest depth `eps <= s0` such that the curvature bound
/// holds at every Fermi-collar sample down to `eps` and, when requested, the
/// boundary shape-operator eigenvalue keeps its sign along every normal
/// geodesic up to `eps`.
pub fn curvature_collar(
    man: &ManifoldWithBoundary,
    tag: &str,
    collar: &FermiCollar,
    bound: f64,
    sense: BoundSense,
    check_convexity: bool,
    m_samples: &[(usize, Vec<f64>)],
) -> Result<CurvatureCollarReport, GeodesyError> {
    let fields = man.metric(tag)?;
    let ok = |k: f64| match sense {
        BoundSense::Below => k < bound,
        BoundSense::Above => k > bound,
    };
    // precondition: bound strict on M samples
    for (chart, p) in m_samples {
        let g = fields[*chart].as_ref().ok_or(GeodesyError::NoCollarDepth)?;
        let k = gaussian_curvature(g, p)?;
        if !ok(k) {
            return Err(GeodesyError::BoundViolatedOnM { point: p.clone(), k });
        }
    }

    let depth_grid = 24usize;
    let s0_min = collar.samples.iter().map(|s| s.s0).fold(f64::INFINITY, f64::min);
    let lambda0s: Vec<f64> = collar
        .samples
        .iter()
        .map(|s| boundary_shape_eigenvalue(man, tag, s.chart, s.u))
        .collect::<Result<_, _>>()?;

    // predicate: bound and sign persistence hold down to depth eps
    let check = |eps: f64| -> Result<bool, GeodesyError> {
        for (si, s) in collar.samples.iter().enumerate() {
            for d in 0..=depth_grid {
                let t = eps * d as f64 / depth_grid as f64;
                let (chart, p) = s.point_at_depth(t);
                let g = fields[chart].as_ref().ok_or(GeodesyError::NoCollarDepth)?;
                let k = gaussian_curvature(g, &p)?;
                if !ok(k) {
                    return Ok(false);
                }
            }
            if check_convexity {
                let s_ref = s.clone();
                let man_ref = man;
                let kf = move |t: f64| -> f64 {
                    let (chart, p) = s_ref.point_at_depth(t);
                    fields[chart]
                        .as_ref()
                        .and_then(|g| gaussian_curvature(g, &p).ok())
                        .unwrap_or(f64::NAN)
                };
                let _ = man_ref;
                let sign0 = lambda0s[si].signum();
                if sign0 == 0.0 {
                    return Ok(false);
                }
                // march and watch the sign
                let steps = 64;
                let mut l = lambda0s[si];
                let dt = eps / steps as f64;
                for st in 0..steps {
                    match riccati_evolve(l, &kf, dt, dt.max(1e-6)) {
                        RiccatiOutcome::Value(nl) => {
                            if nl.signum() != sign0 {
                                return Ok(false);
                            }
                            l = nl;
                        }
                        RiccatiOutcome::BlowUp { .. } => return Ok(false),
                    }
                    let _ = st;
                }
            }
        }
        Ok(true)
    };

    // halving search for the largest passing depth
    let mut lo = 0.0f64;
    let mut hi = s0_min;
    if !check(hi)? {
        for _ in 0..20 {
            let mid = 0.5 * (lo + hi);
            if check(mid)? {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        if lo == 0.0 {
            return Err(GeodesyError::NoCollarDepth);
        }
    } else {
        lo = hi;
    }
    let eps = lo;

    // collect extrema and lambda records at the chosen depth
    let mut k_min = f64::INFINITY;
    let mut k_max = f64::NEG_INFINITY;
    let mut lambda = Vec::new();
    let mut family: Vec<(f64, Vec<Vec<f64>>)> = Vec::new();
    for frac in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let t = eps * frac;
        let mut ring = Vec::new();
        for s in &collar.samples {
            let (chart, p) = s.point_at_depth(t);
            let g = fields[chart].as_ref().ok_or(GeodesyError::NoCollarDepth)?;
            let k = gaussian_curvature(g, &p)?;
            k_min = k_min.min(k);
            k_max = k_max.max(k);
            ring.push(p);
        }
        family.push((t, ring));
    }
    for (si, s) in collar.samples.iter().enumerate() {
        let s_ref = s.clone();
        let kf = move |t: f64| -> f64 {
            let (chart, p) = s_ref.point_at_depth(t);
            fields[chart]
                .as_ref()
                .and_then(|g| gaussian_curvature(g, &p).ok())
                .unwrap_or(f64::NAN)
        };
        let l0 = lambda0s[si];
        let l_end = match riccati_evolve(l0, &kf, eps, 1e-3) {
            RiccatiOutcome::Value(v) => v,
            RiccatiOutcome::BlowUp { .. } => f64::NAN,
        };
        lambda.push(LambdaRecord {
            u: s.u,
            lambda0: l0,
            lambda_end: l_end,
            sign_preserved: l_end.is_finite() && l_end.signum() == l0.signum(),
        });
    }
    let margin = match sense {
        BoundSense::Below => bound - k_max,
        BoundSense::Above => k_min - bound,
    };
    Ok(CurvatureCollarReport {
        bound,
        sense: match sense {
            BoundSense::Below => "<".into(),
            BoundSense::Above => ">".into(),
        },
        depth: eps,
        k_min,
        k_max,
        margin,
        lambda,
        parallel_family: family,
    })
}

/// Shape-operator eigenvalue of the interface curve `u -> (u, 0)` in a collar
/// chart, with respect to the outward (+s) unit normal: the m = 2 geodesic
/// curvature lambda = <nu, nabla_T T> / <T, T>.
pub fn boundary_shape_eigenvalue(
    man: &ManifoldWithBoundary,
    tag: &str,
    collar_chart: usize,
    u: f64,
) -> Result<f64, GeodesyError> {
    let g = man.metric_on_chart(tag, collar_chart)?;
    let p = [u, 0.0];
    let gm = g.matrix(&p)?;
    let inv = linalg::invert(&gm, 2)
        .ok_or_else(|| GeodesyError::SingularMetric { point: p.to_vec() })?;
    let gamma = christoffel(g, &p)?;
    // outward unit normal: g^{-1} ds normalized, components (g^12, g^22)/sqrt(g^22)
    let g22_up = inv[3];
    let nu = [inv[1] / g22_up.sqrt(), inv[3] / g22_up.sqrt()];
    // nabla_T T with T = e_1
    let acc = [gamma[0][0][0], gamma[1][0][0]];
    let mut num = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            num += nu[i] * gm[i * 2 + j] * acc[j];
        }
    }
    Ok(num / gm[0])
}

// ---------------------------------------------------------------------------
// Exhaustion function and cutoff sequence
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ExhaustionField {
    pub rho: Vec<f64>,
    pub max_gradient: f64,
    pub scale: f64,
}

/// Smooth Lipschitz exhaustion proxy: graph distance to `base` mollified by
/// metric-ball averaging of radius `r`, then rescaled so that every sampled
/// difference quotient stays within the Lipschitz budget `L`.
pub fn exhaustion_function(
    mesh: &Mesh,
    tag: &str,
    base: u32,
    lipschitz_budget: f64,
    r: f64,
) -> Result<ExhaustionField, GeodesyError> {
    assert!(lipschitz_budget > 1.0, "budget must exceed 1");
    if r < 2.0 * mesh.h {
        return Err(GeodesyError::SmoothingTooNarrow { r, h: mesh.h });
    }
    let dist = dijkstra(mesh, tag, &[base], None)?;
    // mollify: average of dist over the metric ball of radius r
    let lens = mesh.lengths(tag)?.to_vec();
    let n = mesh.vertex_count();
    let mut rho = vec![0.0; n];
    for v in 0..n {
        // bounded Dijkstra ball around v
        let mut local = std::collections::BTreeMap::new();
        let mut heap = std::collections::BinaryHeap::new();
        local.insert(v as u32, 0.0f64);
        heap.push((std::cmp::Reverse(ordered(0.0)), v as u32));
        let mut acc = 0.0;
        let mut cnt = 0usize;
        while let Some((std::cmp::Reverse(d), u)) = heap.pop() {
            let d = d.0;
            if d > local[&u] + 1e-15 {
                continue;
            }
            acc += dist[u as usize];
            cnt += 1;
            for (ei, w) in &mesh.adjacency[u as usize] {
                let nd = d + lens[*ei as usize];
                if nd <= r && local.get(w).map_or(true, |&old| nd < old - 1e-15) {
                    local.insert(*w, nd);
                    heap.push((std::cmp::Reverse(ordered(nd)), *w));
                }
            }
        }
        rho[v] = acc / cnt as f64;
    }
    // measure gradient and rescale into the budget if needed
    let mut max_grad = 0.0f64;
    for (ei, (a, b)) in mesh.edges.iter().enumerate() {
        if lens[ei] > 0.0 {
            max_grad = max_grad.max((rho[*a as usize] - rho[*b as usize]).abs() / lens[ei]);
        }
    }
    let scale = if max_grad > lipschitz_budget { lipschitz_budget / max_grad } else { 1.0 };
    if scale < 1.0 {
        for v in rho.iter_mut() {
            *v *= scale;
        }
        max_grad *= scale;
    }
    Ok(ExhaustionField { rho, max_gradient: max_grad, scale })
}

#[derive(Debug, Clone)]
pub struct CutoffField {
    pub psi: Vec<f64>,
    pub max_gradient: f64,
}

/// Cutoff `psi_k = psi(rho / k)` with the fixed smooth profile (1 on t <= 1,
/// 0 on t >= 2); the sampled gradient sup scales like 1/k.
pub fn cutoff_sequence(mesh: &Mesh, tag: &str, rho: &[f64], k: u32) -> Result<CutoffField, GeodesyError> {
    assert!(k >= 1);
    let lens = mesh.lengths(tag)?;
    let psi: Vec<f64> = rho.iter().map(|&v| cutoff_profile(v / k as f64)).collect();
    let mut max_grad = 0.0f64;
    for (ei, (a, b)) in mesh.edges.iter().enumerate() {
        if lens[ei] > 0.0 {
            max_grad = max_grad.max((psi[*a as usize] - psi[*b as usize]).abs() / lens[ei]);
        }
    }
    Ok(CutoffField { psi, max_gradient: max_grad })
}

fn ordered(x: f64) -> OrderedF64 {
    OrderedF64(x)
}

#[derive(PartialEq, PartialOrd)]
pub(crate) struct OrderedF64(pub f64);

impl Eq for OrderedF64 {}

#[allow(clippy::derive_ord_xor_partial_ord)]
impl Ord for OrderedF64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.partial_cmp(other).expect("distances are never NaN")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::atlas::{sample_mesh, Chart, ChartDomain, ChartSide, Window};
    use crate::field::MetricField;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use std::collections::BTreeMap;

    fn single_chart_manifold(domain: ChartDomain, g: MetricField) -> ManifoldWithBoundary {
        let chart = Chart { name: "c".into(), domain, side: ChartSide::M };
        let mut metrics = BTreeMap::new();
        metrics.insert("g".to_string(), vec![Some(g)]);
        ManifoldWithBoundary {
            dim: 2,
            charts: vec![chart],
            transitions: vec![],
            boundary: vec![],
            metrics,
        }
    }

    #[test]
    fn flat_christoffel_vanishes() {
        let g = MetricField::identity(2);
        let gamma = christoffel(&g, &[0.3, -0.7]).unwrap();
        for k in 0..2 {
            for i in 0..2 {
                for j in 0..2 {
                    assert_eq!(gamma[k][i][j], 0.0);
                }
            }
        }
    }

    #[test]
    fn hyperbolic_christoffel_values() {
        // upper half plane metric (1/x2^2) I at (0, 1)
        let g = MetricField::conformal_expr(2, "1/(x2*x2)");
        let gamma = christoffel(&g, &[0.0, 1.0]).unwrap();
        assert_relative_eq!(gamma[0][0][1], -1.0, epsilon = 1e-12);
        assert_relative_eq!(gamma[0][1][0], -1.0, epsilon = 1e-12);
        assert_relative_eq!(gamma[1][0][0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(gamma[1][1][1], -1.0, epsilon = 1e-12);
        // symmetry in the lower indices
        for k in 0..2 {
            assert_eq!(gamma[k][0][1], gamma[k][1][0]);
        }
    }

    #[test]
    fn degenerate_metric_is_an_error() {
        let g = MetricField::conformal_expr(2, "0");
        assert!(matches!(
            christoffel(&g, &[0.0, 0.0]),
            Err(GeodesyError::SingularMetric { .. })
        ));
    }

    #[test]
    fn curvature_constants() {
        let flat = MetricField::identity(2);
        assert_abs_diff_eq!(gaussian_curvature(&flat, &[0.4, 0.2]).unwrap(), 0.0, epsilon = 1e-12);

        let hyper = MetricField::conformal_expr(2, "1/(x2*x2)");
        for p in [[0.0, 1.0], [0.5, 2.0], [-1.0, 0.3]] {
            assert_abs_diff_eq!(gaussian_curvature(&hyper, &p).unwrap(), -1.0, epsilon = 1e-8);
        }

        let sphere = MetricField::conformal_expr(2, "4/((1 + x1*x1 + x2*x2)^2)");
        for p in [[0.0, 0.0], [1.0, 0.0], [0.3, -0.8]] {
            assert_abs_diff_eq!(gaussian_curvature(&sphere, &p).unwrap(), 1.0, epsilon = 1e-8);
        }
    }

    #[test]
    fn flat_geodesic_is_straight() {
        let man = single_chart_manifold(
            ChartDomain::Ball { center: vec![0.0, 0.0], radius: 100.0 },
            MetricField::identity(2),
        );
        let start = GeodesicState {
            chart: 0,
            position: vec![0.0, 0.0],
            velocity: vec![3.0, 4.0],
            arc_length: 0.0,
        };
        let run = shoot_geodesic(&man, "g", &start, 5.0, 1e-2).unwrap();
        assert_eq!(run.outcome, ShootOutcome::Completed);
        assert_relative_eq!(run.final_state.position[0], 3.0, epsilon = 1e-9);
        assert_relative_eq!(run.final_state.position[1], 4.0, epsilon = 1e-9);
        assert!(run.max_speed_drift < 1e-12);
    }

    #[test]
    fn sphere_great_circle_returns() {
        // stereographic unit sphere; equator = unit circle of the chart
        let man = single_chart_manifold(
            ChartDomain::Ball { center: vec![0.0, 0.0], radius: 5.0 },
            MetricField::conformal_expr(2, "4/((1 + x1*x1 + x2*x2)^2)"),
        );
        let start = GeodesicState {
            chart: 0,
            position: vec![1.0, 0.0],
            velocity: vec![0.0, 1.0],
            arc_length: 0.0,
        };
        let run =
            shoot_geodesic(&man, "g", &start, 2.0 * std::f64::consts::PI, 1e-3).unwrap();
        assert_eq!(run.outcome, ShootOutcome::Completed);
        let err = ((run.final_state.position[0] - 1.0).powi(2)
            + run.final_state.position[1].powi(2))
        .sqrt();
        assert!(err <= 1e-4, "return error {err}");
        assert!(run.max_speed_drift <= 1e-6);
    }

    #[test]
    fn open_disk_ray_hits_domain_boundary() {
        let man = single_chart_manifold(
            ChartDomain::Ball { center: vec![0.0, 0.0], radius: 1.0 },
            MetricField::identity(2),
        );
        let start = GeodesicState {
            chart: 0,
            position: vec![0.0, 0.0],
            velocity: vec![1.0, 0.0],
            arc_length: 0.0,
        };
        let run = shoot_geodesic(&man, "g", &start, 2.0, 1e-3).unwrap();
        assert_eq!(run.outcome, ShootOutcome::BoundaryOfDomain);
        assert!((run.final_state.arc_length - 1.0).abs() <= 2e-3);
    }

    #[test]
    fn geodesic_reversibility() {
        let man = single_chart_manifold(
            ChartDomain::Ball { center: vec![0.0, 0.0], radius: 5.0 },
            MetricField::conformal_expr(2, "4/((1 + x1*x1 + x2*x2)^2)"),
        );
        let start = GeodesicState {
            chart: 0,
            position: vec![0.5, -0.2],
            velocity: vec![1.0, 2.0],
            arc_length: 0.0,
        };
        let out = shoot_geodesic(&man, "g", &start, 1.0, 1e-3).unwrap();
        let back_start = GeodesicState {
            chart: out.final_state.chart,
            position: out.final_state.position.clone(),
            velocity: out.final_state.velocity.iter().map(|v| -v).collect(),
            arc_length: 0.0,
        };
        let back = shoot_geodesic(&man, "g", &back_start, 1.0, 1e-3).unwrap();
        let err = ((back.final_state.position[0] - 0.5).powi(2)
            + (back.final_state.position[1] + 0.2).powi(2))
        .sqrt();
        assert!(err <= 1e-5, "round trip error {err}");
    }

    #[test]
    fn riccati_closed_forms() {
        // K = 0: l(t) = l0 / (1 - l0 t)
        match riccati_evolve(-1.0, &|_| 0.0, 0.5, 1e-3) {
            RiccatiOutcome::Value(l) => assert_abs_diff_eq!(l, -2.0 / 3.0, epsilon = 1e-6),
            other => panic!("unexpected {other:?}"),
        }
        // K = 1: l(t) = tan(t + arctan l0)
        match riccati_evolve(0.0, &|_| 1.0, std::f64::consts::FRAC_PI_4, 1e-3) {
            RiccatiOutcome::Value(l) => assert_abs_diff_eq!(l, 1.0, epsilon = 1e-6),
            other => panic!("unexpected {other:?}"),
        }
        // K = -1 from 0: l(t) = -tanh(t)
        match riccati_evolve(0.0, &|_| -1.0, 2.0, 1e-3) {
            RiccatiOutcome::Value(l) => assert_abs_diff_eq!(l, -(2.0f64.tanh()), epsilon = 1e-6),
            other => panic!("unexpected {other:?}"),
        }
        // K = 0, l0 = 1 blows up at t = 1
        match riccati_evolve(1.0, &|_| 0.0, 2.0, 1e-3) {
            RiccatiOutcome::BlowUp { time } => assert!((time - 1.0).abs() < 5e-3, "time {time}"),
            other => panic!("expected blow-up, got {other:?}"),
        }
    }

    #[test]
    fn exhaustion_field_flat_plane() {
        let man = single_chart_manifold(
            ChartDomain::Ball { center: vec![0.0, 0.0], radius: 100.0 },
            MetricField::identity(2),
        );
        let mesh =
            sample_mesh(&man, 0.25, &Window::single(0, vec![-3.0, -3.0], vec![3.0, 3.0])).unwrap();
        let base = mesh.nearest_vertex(0, &[0.0, 0.0]).unwrap();
        let field = exhaustion_function(&mesh, "g", base, 1.1, 0.5).unwrap();
        assert!(field.max_gradient <= 1.03, "gradient {}", field.max_gradient);
        // rho approximates |x| (octile metric plus mollification bias)
        for (v, vert) in mesh.vertices.iter().enumerate() {
            let r = (vert.coords[0].powi(2) + vert.coords[1].powi(2)).sqrt();
            assert!(field.rho[v] >= r - 0.5, "rho too small at {:?}", vert.coords);
            assert!(field.rho[v] <= 1.09 * r + 0.5, "rho too large at {:?}", vert.coords);
        }
        // narrow smoothing radius is rejected
        assert!(matches!(
            exhaustion_function(&mesh, "g", base, 1.1, 0.25),
            Err(GeodesyError::SmoothingTooNarrow { .. })
        ));
    }

    #[test]
    fn cutoff_gradient_halves_when_k_doubles() {
        let man = single_chart_manifold(
            ChartDomain::Ball { center: vec![0.0, 0.0], radius: 100.0 },
            MetricField::identity(2),
        );
        let mesh =
            sample_mesh(&man, 0.2, &Window::single(0, vec![-9.0, -9.0], vec![9.0, 9.0])).unwrap();
        let base = mesh.nearest_vertex(0, &[0.0, 0.0]).unwrap();
        let field = exhaustion_function(&mesh, "g", base, 1.1, 0.4).unwrap();
        let c2 = cutoff_sequence(&mesh, "g", &field.rho, 2).unwrap();
        let c4 = cutoff_sequence(&mesh, "g", &field.rho, 4).unwrap();
        let ratio = c2.max_gradient / c4.max_gradient;
        assert!((ratio - 2.0).abs() <= 0.2, "ratio {ratio}");
        // large k saturates at 1 on the window
        let c64 = cutoff_sequence(&mesh, "g", &field.rho, 64).unwrap();
        assert!(c64.psi.iter().all(|&v| v == 1.0));
    }
}
