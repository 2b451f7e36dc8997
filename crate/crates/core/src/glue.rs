//! Gluing two manifolds with diffeomorphic boundaries into one manifold
//! without boundary.
//!
//! Both inputs must present each boundary component in product form: a
//! half-ball chart `(u, x_m)` with the component on `x_m = 0` and the
//! manifold on `x_m <= 0`. The glued atlas keeps all M charts, all Q charts
//! (reindexed), and adds one collar chart per boundary component pair with
//! coordinates `(u, s)`, `s < 0` on the M side, related to the Q chart by
//! `(u, s) -> (eta(u), -s)`. Interface points are identified exactly: the
//! transition maps carry grid vertices of one chart onto grid vertices of the
//! other, so a mesh of N has a single vertex per identified pair.

use crate::atlas::{
    BoundaryComponent, Chart, ChartDomain, ChartSide, ManifoldWithBoundary, TransitionMap,
};
use crate::expr::{diff_expr, eval_expr, parse_expr, ExprAst};
use crate::field::{CoeffField, MetricField};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GlueError {
    #[error("boundary component counts differ: M has {m}, Q has {q}")]
    ComponentCountMismatch { m: usize, q: usize },
    #[error("eta is not invertible on component {component}: |eta^-1(eta(u)) - u| = {defect} at u = {u}")]
    NotInvertible { component: usize, u: f64, defect: f64 },
    #[error("boundary chart {chart} of {side} is not a half-ball product chart")]
    NotProductChart { chart: usize, side: &'static str },
    #[error("metric `{0}` missing on a boundary chart")]
    MissingMetric(String),
    #[error("point {point:?} of chart {chart} lies outside the collar")]
    OutsideCollar { chart: usize, point: Vec<f64> },
}

/// Per-component boundary identification `eta` with its inverse, both as
/// one-variable expressions of the boundary parameter (`x1`).
#[derive(Debug, Clone)]
pub struct ComponentDiffeo {
    pub forward: ExprAst,
    pub inverse: ExprAst,
}

impl ComponentDiffeo {
    pub fn identity() -> ComponentDiffeo {
        ComponentDiffeo {
            forward: parse_expr("x1", 1).unwrap(),
            inverse: parse_expr("x1", 1).unwrap(),
        }
    }

    pub fn parse(forward: &str, inverse: &str) -> Result<ComponentDiffeo, crate::expr::ParseError> {
        Ok(ComponentDiffeo { forward: parse_expr(forward, 1)?, inverse: parse_expr(inverse, 1)? })
    }
}

/// Boundary identification for every component, in order.
#[derive(Debug, Clone)]
pub struct BoundaryDiffeo {
    pub components: Vec<ComponentDiffeo>,
}

/// One collar chart of the glued manifold.
#[derive(Debug, Clone)]
pub struct CollarInfo {
    /// chart index (in the glued atlas) of the collar chart
    pub chart: usize,
    /// M boundary chart (glued atlas index, equals the original M index)
    pub m_chart: usize,
    /// Q boundary chart (glued atlas index)
    pub q_chart: usize,
    pub component: BoundaryComponent,
    /// collar half-width in the s coordinate
    pub half_width: f64,
    /// +1 when eta is orientation preserving on this component
    pub orientation: i8,
    pub eta: ComponentDiffeo,
}

#[derive(Debug, Clone)]
pub struct GluedManifold {
    pub man: ManifoldWithBoundary,
    pub collars: Vec<CollarInfo>,
    pub m_charts: usize,
    pub q_charts: usize,
}

const ETA_CHECK_SAMPLES: usize = 256;
const ETA_TOL: f64 = 1e-9;

/// Glues `m` and `q` along `eta`. The primary metric tag of each input (named
/// `g`) is re-registered on the result as `gM` / `gQ`; the collar charts carry
/// both, expressed in collar coordinates.
pub fn glue(
    m: &ManifoldWithBoundary,
    q: &ManifoldWithBoundary,
    eta: &BoundaryDiffeo,
    collar_half_width: f64,
) -> Result<GluedManifold, GlueError> {
    if m.boundary.len() != q.boundary.len() || m.boundary.len() != eta.components.len() {
        return Err(GlueError::ComponentCountMismatch { m: m.boundary.len(), q: q.boundary.len() });
    }
    let dim = m.dim;
    assert_eq!(dim, q.dim);

    // Validate eta on every component: round trip and orientation.
    let mut orientations = Vec::new();
    for (ci, comp) in eta.components.iter().enumerate() {
        let bm = &m.boundary[ci];
        let span = bm.u_max - bm.u_min;
        let mut orientation = 0i8;
        for k in 0..ETA_CHECK_SAMPLES {
            let u = bm.u_min + span * (k as f64 + 0.5) / ETA_CHECK_SAMPLES as f64;
            let v = eval_expr(&comp.forward, &[u]).unwrap_or(f64::NAN);
            let back = eval_expr(&comp.inverse, &[v]).unwrap_or(f64::NAN);
            let mut defect = (back - u).abs();
            if bm.periodic {
                defect = defect.min((defect - span).abs());
            }
            if !defect.is_finite() || defect > ETA_TOL {
                return Err(GlueError::NotInvertible { component: ci, u, defect });
            }
            let d = eval_expr(&diff_expr(&comp.forward, 0), &[u]).unwrap_or(f64::NAN);
            if d == 0.0 || !d.is_finite() {
                return Err(GlueError::NotInvertible { component: ci, u, defect: f64::INFINITY });
            }
            let sign = if d > 0.0 { 1 } else { -1 };
            if orientation == 0 {
                orientation = sign;
            } else if orientation != sign {
                return Err(GlueError::NotInvertible { component: ci, u, defect: f64::INFINITY });
            }
        }
        orientations.push(orientation);
    }

    // Chart list: M charts, then Q charts, then collars.
    let mut charts: Vec<Chart> = Vec::new();
    let mut transitions: Vec<TransitionMap> = Vec::new();
    for c in &m.charts {
        charts.push(Chart { name: format!("M.{}", c.name), domain: c.domain.clone(), side: ChartSide::M });
    }
    let q_off = charts.len();
    for c in &q.charts {
        charts.push(Chart { name: format!("Q.{}", c.name), domain: c.domain.clone(), side: ChartSide::Q });
    }
    for t in &m.transitions {
        transitions.push(t.clone());
    }
    for t in &q.transitions {
        transitions.push(TransitionMap {
            source: t.source + q_off,
            target: t.target + q_off,
            map: t.map.clone(),
            overlap: t.overlap.clone(),
        });
    }

    let m_fields = m.metrics.get("g").ok_or_else(|| GlueError::MissingMetric("g".into()))?;
    let q_fields = q.metrics.get("g").ok_or_else(|| GlueError::MissingMetric("g".into()))?;
    let mut gm: Vec<Option<MetricField>> = m_fields.clone();
    gm.extend(std::iter::repeat_with(|| None).take(q.charts.len()));
    let mut gq: Vec<Option<MetricField>> =
        std::iter::repeat_with(|| None).take(m.charts.len()).collect();
    gq.extend(q_fields.clone());

    let mut collars = Vec::new();
    let mut boundary = Vec::new();
    for (ci, comp) in eta.components.iter().enumerate() {
        let bm = &m.boundary[ci];
        let bq = &q.boundary[ci];
        if !m.charts[bm.chart].domain.is_half_ball() {
            return Err(GlueError::NotProductChart { chart: bm.chart, side: "M" });
        }
        if !q.charts[bq.chart].domain.is_half_ball() {
            return Err(GlueError::NotProductChart { chart: bq.chart, side: "Q" });
        }
        let collar_idx = charts.len();
        let radius = match m.charts[bm.chart].domain {
            ChartDomain::HalfBall { radius } => radius,
            _ => unreachable!(),
        };
        let umid = 0.5 * (bm.u_min + bm.u_max);
        charts.push(Chart {
            name: format!("collar{ci}"),
            domain: ChartDomain::Ball {
                center: vec![umid, 0.0],
                radius: radius + (bm.u_max - bm.u_min),
            },
            side: ChartSide::Collar,
        });

        // collar -> M: identity on s <= 0 (interface row included).
        transitions.push(TransitionMap {
            source: collar_idx,
            target: bm.chart,
            map: vec![parse_expr("x1", dim).unwrap(), parse_expr("x2", dim).unwrap()],
            overlap: parse_expr("1e-7 - x2", dim).unwrap(),
        });
        // M -> collar: identity on x2 > -half_width.
        transitions.push(TransitionMap {
            source: bm.chart,
            target: collar_idx,
            map: vec![parse_expr("x1", dim).unwrap(), parse_expr("x2", dim).unwrap()],
            overlap: parse_expr(&format!("x2 + {collar_half_width}"), dim).unwrap(),
        });
        // collar -> Q: (u, s) -> (eta(u), -s) on s >= 0.
        let eta_of_x1 = lift_1d(&comp.forward, dim);
        transitions.push(TransitionMap {
            source: collar_idx,
            target: bq.chart + q_off,
            map: vec![eta_of_x1.clone(), parse_expr("-x2", dim).unwrap()],
            overlap: parse_expr("x2 + 1e-7", dim).unwrap(),
        });
        // Q -> collar: (uq, x2q) -> (eta^-1(uq), -x2q) on x2q > -half_width.
        let inv_of_x1 = lift_1d(&comp.inverse, dim);
        transitions.push(TransitionMap {
            source: bq.chart + q_off,
            target: collar_idx,
            map: vec![inv_of_x1, parse_expr("-x2", dim).unwrap()],
            overlap: parse_expr(&format!("x2 + {collar_half_width}"), dim).unwrap(),
        });

        // gM on the collar chart is the M-chart field itself (identity map);
        // gQ is the pullback of the Q field under (u,s) -> (eta(u), -s).
        let m_metric = m_fields[bm.chart]
            .as_ref()
            .ok_or_else(|| GlueError::MissingMetric("g (M boundary chart)".into()))?;
        let q_metric = q_fields[bq.chart]
            .as_ref()
            .ok_or_else(|| GlueError::MissingMetric("g (Q boundary chart)".into()))?;
        let q_pulled = pull_back_product(q_metric, &eta_of_x1, dim)
            .ok_or_else(|| GlueError::MissingMetric("symbolic Q metric".into()))?;
        gm.push(Some(m_metric.clone()));
        gq.push(Some(q_pulled));

        boundary.push(BoundaryComponent {
            chart: collar_idx,
            u_min: bm.u_min,
            u_max: bm.u_max,
            periodic: bm.periodic,
        });
        collars.push(CollarInfo {
            chart: collar_idx,
            m_chart: bm.chart,
            q_chart: bq.chart + q_off,
            component: bm.clone(),
            half_width: collar_half_width,
            orientation: orientations[ci],
            eta: comp.clone(),
        });
    }

    let mut metrics = BTreeMap::new();
    metrics.insert("gM".to_string(), gm);
    metrics.insert("gQ".to_string(), gq);

    let man = ManifoldWithBoundary { dim, charts, transitions, boundary, metrics };
    Ok(GluedManifold { man, collars, m_charts: m.charts.len(), q_charts: q.charts.len() })
}

/// Lifts a 1-variable expression of the boundary parameter to `dim` variables.
fn lift_1d(e: &ExprAst, dim: usize) -> ExprAst {
    e.substitute(&[ExprAst::var(0, dim)])
}

/// Pullback of a symbolic metric under the product map
/// `T(u, s) = (eta(u), -s)`: `G'(x) = J^T G(T(x)) J` with `J = diag(eta', -1)`.
/// Returns None when the metric has non-expression coefficients.
fn pull_back_product(g: &MetricField, eta_lifted: &ExprAst, dim: usize) -> Option<MetricField> {
    assert_eq!(dim, 2, "product pullback implemented for surfaces");
    let comp_maps = vec![eta_lifted.clone(), parse_expr("-x2", dim).unwrap()];
    let deta = diff_expr(eta_lifted, 0);
    let mut coeffs = Vec::new();
    for i in 0..dim {
        for j in i..dim {
            let CoeffField::Expr(f) = g.coeff(i, j) else { return None };
            let mut ast = f.ast().substitute(&comp_maps);
            for idx in [i, j] {
                if idx == 0 {
                    ast = product(&ast, &deta);
                } else {
                    ast = negate(&ast);
                }
            }
            coeffs.push(CoeffField::expr(ast));
        }
    }
    Some(MetricField::new(dim, coeffs))
}

fn product(a: &ExprAst, b: &ExprAst) -> ExprAst {
    if a.is_const(1.0) {
        return b.clone();
    }
    if b.is_const(1.0) {
        return a.clone();
    }
    if a.is_const(0.0) || b.is_const(0.0) {
        return ExprAst::constant(0.0, a.dim());
    }
    parse_expr(&format!("({a})*({b})"), a.dim()).unwrap()
}

fn negate(a: &ExprAst) -> ExprAst {
    if a.is_const(0.0) {
        return a.clone();
    }
    parse_expr(&format!("-({a})"), a.dim()).unwrap()
}

/// Collar coordinates `(u, s)` of a point near the interface: `s < 0` on the
/// M side, `s = 0` exactly on the interface.
pub fn collar_coordinates(
    glued: &GluedManifold,
    chart: usize,
    p: &[f64],
) -> Result<(f64, f64), GlueError> {
    for info in &glued.collars {
        if chart == info.chart && p[1].abs() <= info.half_width {
            return Ok((p[0], p[1]));
        }
        if chart == info.m_chart && p[1] >= -info.half_width {
            return Ok((p[0], p[1]));
        }
        if chart == info.q_chart && p[1] >= -info.half_width {
            let u = eval_expr(&info.eta.inverse, &[p[0]]).map_err(|_| {
                GlueError::OutsideCollar { chart, point: p.to_vec() }
            })?;
            return Ok((u, -p[1]));
        }
    }
    Err(GlueError::OutsideCollar { chart, point: p.to_vec() })
}

#[cfg(test)]
pub(crate) fn flat_half_plane(radius: f64) -> ManifoldWithBoundary {
    let chart =
        Chart { name: "half".into(), domain: ChartDomain::HalfBall { radius }, side: ChartSide::M };
    let mut metrics = BTreeMap::new();
    metrics.insert("g".to_string(), vec![Some(MetricField::identity(2))]);
    ManifoldWithBoundary {
        dim: 2,
        charts: vec![chart],
        transitions: vec![],
        boundary: vec![BoundaryComponent {
            chart: 0,
            u_min: -radius,
            u_max: radius,
            periodic: false,
        }],
        metrics,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::atlas::{sample_mesh, Window};

    #[test]
    fn flat_double_is_a_plane() {
        let m = flat_half_plane(50.0);
        let q = flat_half_plane(50.0);
        let eta = BoundaryDiffeo { components: vec![ComponentDiffeo::identity()] };
        let glued = glue(&m, &q, &eta, 1.0).unwrap();
        assert_eq!(glued.man.charts.len(), 3);
        assert_eq!(glued.collars.len(), 1);
        assert_eq!(glued.collars[0].orientation, 1);

        let w = Window::default()
            .with_rect(0, vec![-1.0, -1.0], vec![1.0, 1.0])
            .with_rect(1, vec![-1.0, -1.0], vec![1.0, 1.0])
            .with_rect(2, vec![-1.0, -1.0], vec![1.0, 1.0]);
        let mesh = sample_mesh(&glued.man, 0.5, &w).unwrap();
        // 5 columns x 5 rows: two 5x3 half grids sharing the interface row
        assert_eq!(mesh.vertex_count(), 25);
        let interface = mesh.vertices.iter().filter(|v| v.flags.on_interface).count();
        assert_eq!(interface, 5);
        for v in &mesh.vertices {
            assert!(v.flags.in_m || v.flags.in_q);
        }
    }

    #[test]
    fn collar_coordinates_product_structure() {
        let m = flat_half_plane(50.0);
        let q = flat_half_plane(50.0);
        let eta = BoundaryDiffeo { components: vec![ComponentDiffeo::identity()] };
        let glued = glue(&m, &q, &eta, 1.0).unwrap();
        let (u, s) = collar_coordinates(&glued, glued.collars[0].chart, &[0.25, 0.0]).unwrap();
        assert_eq!((u, s), (0.25, 0.0));
        let (u, s) = collar_coordinates(&glued, 0, &[0.5, -0.3]).unwrap();
        assert_eq!((u, s), (0.5, -0.3));
        // Q-side point at depth 0.3 sits at s = +0.3
        let (u, s) = collar_coordinates(&glued, 1, &[0.5, -0.3]).unwrap();
        assert_eq!((u, s), (0.5, 0.3));
        assert!(collar_coordinates(&glued, 0, &[0.0, -5.0]).is_err());
    }

    #[test]
    fn mismatched_component_counts_rejected() {
        let m = flat_half_plane(50.0);
        let mut q = flat_half_plane(50.0);
        q.boundary.clear();
        let eta = BoundaryDiffeo { components: vec![ComponentDiffeo::identity()] };
        assert!(matches!(
            glue(&m, &q, &eta, 1.0),
            Err(GlueError::ComponentCountMismatch { .. })
        ));
    }

    #[test]
    fn non_invertible_eta_rejected() {
        let m = flat_half_plane(50.0);
        let q = flat_half_plane(50.0);
        let eta = BoundaryDiffeo {
            components: vec![ComponentDiffeo::parse("x1*x1", "sqrt(x1)").unwrap()],
        };
        assert!(matches!(glue(&m, &q, &eta, 1.0), Err(GlueError::NotInvertible { .. })));
    }

    #[test]
    fn orientation_swap_is_valid_and_flagged() {
        let m = flat_half_plane(50.0);
        let q = flat_half_plane(50.0);
        let eta =
            BoundaryDiffeo { components: vec![ComponentDiffeo::parse("-x1", "-x1").unwrap()] };
        let glued = glue(&m, &q, &eta, 1.0).unwrap();
        assert_eq!(glued.collars[0].orientation, -1);
    }

    #[test]
    fn m_side_of_glued_mesh_matches_standalone_m_mesh() {
        let m = flat_half_plane(50.0);
        let q = flat_half_plane(50.0);
        let eta = BoundaryDiffeo { components: vec![ComponentDiffeo::identity()] };
        let glued = glue(&m, &q, &eta, 1.0).unwrap();
        let wm = Window::single(0, vec![-1.0, -1.0], vec![1.0, 1.0]);
        let mesh_m = sample_mesh(&m, 0.5, &wm).unwrap();
        let w = Window::default()
            .with_rect(0, vec![-1.0, -1.0], vec![1.0, 1.0])
            .with_rect(1, vec![-1.0, -1.0], vec![1.0, 1.0])
            .with_rect(2, vec![-1.0, -1.0], vec![1.0, 1.0]);
        let mesh_n = sample_mesh(&glued.man, 0.5, &w).unwrap();
        let key = |v: &crate::atlas::Vertex| {
            ((v.coords[0] * 1e6).round() as i64, (v.coords[1] * 1e6).round() as i64)
        };
        let m_keys: std::collections::BTreeSet<_> = mesh_m.vertices.iter().map(key).collect();
        let n_keys: std::collections::BTreeSet<_> =
            mesh_n.vertices.iter().filter(|v| v.flags.in_m).map(|v| key(v)).collect();
        assert_eq!(m_keys, n_keys);
        let n_in_m_edges = mesh_n
            .edges
            .iter()
            .filter(|(a, b)| {
                mesh_n.vertices[*a as usize].flags.in_m && mesh_n.vertices[*b as usize].flags.in_m
            })
            .count();
        assert_eq!(mesh_m.edges.len(), n_in_m_edges);
    }
}
