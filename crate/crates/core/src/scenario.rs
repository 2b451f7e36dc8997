//! Built-in scenarios: the concrete manifolds, gluings, windows, and
//! exhaustion choices that the pipeline and the acceptance suite run on.
//!
//! Periodic charts use period 6.4 for the wrap coordinate so that every
//! shipped resolution divides the circumference and the wrap transition maps
//! grid vertices onto grid vertices exactly.

use crate::atlas::{
    BoundaryComponent, Chart, ChartDomain, ChartSide, ManifoldWithBoundary, TransitionMap, Window,
};
use crate::expr::parse_expr;
use crate::extend::PartitionOfUnity;
use crate::field::MetricField;
use crate::glue::{glue, BoundaryDiffeo, ComponentDiffeo, GluedManifold};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("unknown scenario `{0}`")]
    Unknown(String),
    #[error("resolution {h} does not divide the periodic circumference {period}")]
    BadResolution { h: f64, period: f64 },
    #[error(transparent)]
    Glue(#[from] crate::glue::GlueError),
}

/// Circumference of every periodic coordinate in the shipped scenarios.
pub const PERIOD: f64 = 6.4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioKind {
    /// full gluing / extension / completion pipeline
    Glued,
    /// completeness diagnostics only
    Completeness,
    /// exhaustion and cutoff fields only
    ExhaustionField,
    /// curvature kernel suite only
    Curvature,
}

#[derive(Debug, Clone)]
pub struct ScenarioInfo {
    pub name: &'static str,
    pub description: &'static str,
    pub kind: ScenarioKind,
}

pub fn catalog() -> Vec<ScenarioInfo> {
    vec![
        ScenarioInfo {
            name: "flat-double",
            description: "two flat closed half-planes glued along the line; the double is the flat plane and every stage is exact",
            kind: ScenarioKind::Glued,
        },
        ScenarioInfo {
            name: "disk-patch",
            description: "plane-minus-disk glued to a closed disk along the unit circle; collar reflection stretches by (1+s)/(1-s)",
            kind: ScenarioKind::Glued,
        },
        ScenarioInfo {
            name: "disk-core",
            description: "closed unit disk glued to the plane complement; strictly convex boundary with shape eigenvalue -1",
            kind: ScenarioKind::Glued,
        },
        ScenarioInfo {
            name: "cusp-tail",
            description: "flat half-cylinder glued to a finite-length cusp tail exp(-2t) I; the deformation certificates are e^{-j}(1 - 1/e)",
            kind: ScenarioKind::Glued,
        },
        ScenarioInfo {
            name: "two-tail",
            description: "flat cylinder band glued to cusp tails on both boundary circles; two annulus components per level",
            kind: ScenarioKind::Glued,
        },
        ScenarioInfo {
            name: "hyperbolic-collar",
            description: "curvature -1 half-plane region glued to a flat patch; curvature collar search under K < -1/2",
            kind: ScenarioKind::Glued,
        },
        ScenarioInfo {
            name: "open-disk",
            description: "open flat unit disk: incomplete, with a radial finite-length witness",
            kind: ScenarioKind::Completeness,
        },
        ScenarioInfo {
            name: "half-plane",
            description: "closed flat half-plane: complete up to budget",
            kind: ScenarioKind::Completeness,
        },
        ScenarioInfo {
            name: "flat-plane",
            description: "flat plane: smooth Lipschitz exhaustion field and cutoff sequence",
            kind: ScenarioKind::ExhaustionField,
        },
        ScenarioInfo {
            name: "sphere-curvature",
            description: "round unit sphere in the stereographic chart: K = +1 and closed great circles",
            kind: ScenarioKind::Curvature,
        },
        ScenarioInfo {
            name: "hyperbolic-curvature",
            description: "hyperbolic upper half plane: K = -1 and the standard Christoffel symbols",
            kind: ScenarioKind::Curvature,
        },
    ]
}

pub fn list(filter: Option<&str>) -> Vec<ScenarioInfo> {
    catalog()
        .into_iter()
        .filter(|s| filter.map_or(true, |f| s.name.contains(f)))
        .collect()
}

// ---------------------------------------------------------------------------
// Primitive manifolds
// ---------------------------------------------------------------------------

fn one_metric(g: MetricField) -> BTreeMap<String, Vec<Option<MetricField>>> {
    let mut m = BTreeMap::new();
    m.insert("g".to_string(), vec![Some(g)]);
    m
}

/// Flat closed half-plane `x2 <= 0` as a single product chart.
pub fn flat_half_plane(radius: f64) -> ManifoldWithBoundary {
    ManifoldWithBoundary {
        dim: 2,
        charts: vec![Chart {
            name: "half".into(),
            domain: ChartDomain::HalfBall { radius },
            side: ChartSide::M,
        }],
        transitions: vec![],
        boundary: vec![BoundaryComponent {
            chart: 0,
            u_min: -radius,
            u_max: radius,
            periodic: false,
        }],
        metrics: one_metric(MetricField::identity(2)),
    }
}

fn wrap_transition(chart: usize, dim: usize) -> Vec<TransitionMap> {
    let fwd = TransitionMap {
        source: chart,
        target: chart,
        map: vec![
            parse_expr(&format!("x1 - {PERIOD}"), dim).unwrap(),
            parse_expr("x2", dim).unwrap(),
        ],
        overlap: parse_expr(&format!("x1 - {}", PERIOD / 2.0), dim).unwrap(),
    };
    let bwd = TransitionMap {
        source: chart,
        target: chart,
        map: vec![
            parse_expr(&format!("x1 + {PERIOD}"), dim).unwrap(),
            parse_expr("x2", dim).unwrap(),
        ],
        overlap: parse_expr(&format!("{} - x1", -PERIOD / 2.0), dim).unwrap(),
    };
    vec![fwd, bwd]
}

/// Half-cylinder `t <= 0` with a periodic coordinate of circumference 6.4 and
/// the metric given by an expression matrix over `(x1, x2) = (theta, t)`.
pub fn half_cylinder(metric_exprs: [&str; 3]) -> ManifoldWithBoundary {
    let g = MetricField::from_exprs(
        2,
        metric_exprs.iter().map(|s| parse_expr(s, 2).unwrap()).collect(),
    );
    ManifoldWithBoundary {
        dim: 2,
        charts: vec![Chart {
            name: "cyl".into(),
            domain: ChartDomain::HalfBall { radius: 60.0 },
            side: ChartSide::M,
        }],
        transitions: wrap_transition(0, 2),
        boundary: vec![BoundaryComponent { chart: 0, u_min: 0.0, u_max: PERIOD, periodic: true }],
        metrics: one_metric(g),
    }
}

/// Angular scale of the shipped circle charts: the unit circle is
/// parametrized by `u` of period 6.4, so angles are `ANGLE_SCALE * u`.
pub const ANGLE_SCALE: f64 = 2.0 * std::f64::consts::PI / PERIOD;

/// Flat plane minus the open unit disk, in the product chart
/// `(u, s = 1 - r)`, `s <= 0`, plus the periodic wrap.
pub fn disk_complement() -> ManifoldWithBoundary {
    let c2 = ANGLE_SCALE * ANGLE_SCALE;
    let g = MetricField::from_exprs(
        2,
        vec![
            parse_expr(&format!("{c2}*(1 - x2)*(1 - x2)"), 2).unwrap(),
            parse_expr("0", 2).unwrap(),
            parse_expr("1", 2).unwrap(),
        ],
    );
    ManifoldWithBoundary {
        dim: 2,
        charts: vec![Chart {
            name: "exterior".into(),
            domain: ChartDomain::HalfBall { radius: 60.0 },
            side: ChartSide::M,
        }],
        transitions: wrap_transition(0, 2),
        boundary: vec![BoundaryComponent { chart: 0, u_min: 0.0, u_max: PERIOD, periodic: true }],
        metrics: one_metric(g),
    }
}

/// Closed unit disk: polar product chart `(u, s = r - 1)` plus a cartesian
/// chart over the center, linked by seam transitions (polar to cartesian).
pub fn closed_disk() -> ManifoldWithBoundary {
    let c2 = ANGLE_SCALE * ANGLE_SCALE;
    let polar = MetricField::from_exprs(
        2,
        vec![
            parse_expr(&format!("{c2}*(1 + x2)*(1 + x2)"), 2).unwrap(),
            parse_expr("0", 2).unwrap(),
            parse_expr("1", 2).unwrap(),
        ],
    );
    let mut transitions = wrap_transition(0, 2);
    // polar -> cartesian on the overlap annulus 0.15 < r < 0.85
    transitions.push(TransitionMap {
        source: 0,
        target: 1,
        map: vec![
            parse_expr(&format!("(1 + x2)*cos({ANGLE_SCALE}*x1)"), 2).unwrap(),
            parse_expr(&format!("(1 + x2)*sin({ANGLE_SCALE}*x1)"), 2).unwrap(),
        ],
        overlap: parse_expr("(0 - x2 - 0.15)*(x2 + 0.85)", 2).unwrap(),
    });
    let mut metrics = BTreeMap::new();
    metrics.insert("g".to_string(), vec![Some(polar), Some(MetricField::identity(2))]);
    ManifoldWithBoundary {
        dim: 2,
        charts: vec![
            Chart {
                name: "rim".into(),
                domain: ChartDomain::HalfBall { radius: 60.0 },
                side: ChartSide::M,
            },
            Chart {
                name: "center".into(),
                domain: ChartDomain::Ball { center: vec![0.0, 0.0], radius: 0.82 },
                side: ChartSide::M,
            },
        ],
        transitions,
        boundary: vec![BoundaryComponent { chart: 0, u_min: 0.0, u_max: PERIOD, periodic: true }],
        metrics,
    }
}

/// Hyperbolic region `y >= 1` of the upper half plane in the product chart
/// `(u, s = 1 - y)`, `s <= 0`; curvature is identically -1.
pub fn hyperbolic_shelf() -> ManifoldWithBoundary {
    let g = MetricField::conformal_expr(2, "1/((1 - x2)*(1 - x2))");
    ManifoldWithBoundary {
        dim: 2,
        charts: vec![Chart {
            name: "shelf".into(),
            domain: ChartDomain::HalfBall { radius: 40.0 },
            side: ChartSide::M,
        }],
        transitions: vec![],
        boundary: vec![BoundaryComponent { chart: 0, u_min: -4.0, u_max: 4.0, periodic: false }],
        metrics: one_metric(g),
    }
}

// ---------------------------------------------------------------------------
// Built glued scenarios
// ---------------------------------------------------------------------------

/// How the completion stage builds its exhaustion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExhaustionChoice {
    /// metric balls about the interface midpoint
    MetricBall { step: f64 },
    /// sublevels of the collar tail coordinate, offset to the P rim; used
    /// when the extension metric is incomplete and its balls saturate
    TailCoordinate { step: f64, rim: f64 },
}

#[derive(Debug, Clone)]
pub struct GluedScenario {
    pub name: String,
    pub glued: GluedManifold,
    pub window: Window,
    pub pou: PartitionOfUnity,
    /// cap for the Fermi reflection depth search
    pub s0_cap: f64,
    pub boundary_spacing: f64,
    pub exhaustion: ExhaustionChoice,
    /// grid step for the local-extension validity scan
    pub t_scan_step: f64,
    /// base point (chart, coords) for diagnostics
    pub base: (usize, Vec<f64>),
}

#[derive(Debug, Clone)]
pub struct RunParams {
    pub h: f64,
    /// scales tail / half-plane extents; level k of nested windows uses
    /// `extent * level_fracs[k]`
    pub extent: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for RunParams {
    fn default() -> Self {
        RunParams { h: 0.05, extent: 3.0, eps: 1.0, seed: 17 }
    }
}

fn check_period(h: f64) -> Result<(), ScenarioError> {
    let k = PERIOD / h;
    if (k - k.round()).abs() > 1e-9 {
        return Err(ScenarioError::BadResolution { h, period: PERIOD });
    }
    Ok(())
}

pub fn build_glued(name: &str, p: &RunParams) -> Result<GluedScenario, ScenarioError> {
    match name {
        "flat-double" => {
            let m = flat_half_plane(60.0);
            let q = flat_half_plane(60.0);
            let eta = BoundaryDiffeo { components: vec![ComponentDiffeo::identity()] };
            let glued = glue(&m, &q, &eta, 1.0)?;
            let e = p.extent;
            let window = Window::default()
                .with_rect(0, vec![-e, -e], vec![e, 0.0])
                .with_rect(1, vec![-e, -e], vec![e, 0.0])
                .with_rect(2, vec![-e, -0.6], vec![e, 0.6]);
            Ok(GluedScenario {
                name: name.into(),
                glued,
                window,
                pou: PartitionOfUnity::new(0.1, 0.4),
                s0_cap: 0.5,
                boundary_spacing: p.h.max(0.05),
                exhaustion: ExhaustionChoice::MetricBall { step: 1.0 },
                t_scan_step: 0.1,
                base: (0, vec![0.0, 0.0]),
            })
        }
        "disk-patch" | "disk-core" => {
            check_period(p.h)?;
            let exterior = disk_complement();
            let disk = closed_disk();
            let eta = BoundaryDiffeo { components: vec![ComponentDiffeo::identity()] };
            let (m, q) = if name == "disk-patch" { (exterior, disk) } else { (disk, exterior) };
            let glued = glue(&m, &q, &eta, 0.5)?;
            let e = p.extent.min(2.0);
            // rect windows per chart: rim charts span the full period and
            // reach depth e on their manifold side; the collar follows
            let mut window = Window::default();
            let (rim_m, cart_m, rim_q, cart_q, collar) = if name == "disk-patch" {
                (0usize, usize::MAX, 1usize, 2usize, 3usize)
            } else {
                (0, 1, 2, usize::MAX, 3)
            };
            window = window.with_rect(rim_m, vec![0.0, -e], vec![PERIOD, 0.0]);
            window = window.with_rect(rim_q, vec![0.0, -0.9], vec![PERIOD, 0.0]);
            if cart_m != usize::MAX {
                window = window.with_rect(cart_m, vec![-0.8, -0.8], vec![0.8, 0.8]);
            }
            if cart_q != usize::MAX {
                window = window.with_rect(cart_q, vec![-0.8, -0.8], vec![0.8, 0.8]);
            }
            window = window.with_rect(collar, vec![0.0, -0.45], vec![PERIOD, 0.45]);
            Ok(GluedScenario {
                name: name.into(),
                glued,
                window,
                pou: PartitionOfUnity::new(0.1, 0.2),
                s0_cap: 0.45,
                boundary_spacing: p.h,
                exhaustion: ExhaustionChoice::MetricBall { step: 0.5 },
                t_scan_step: 0.05,
                base: (0, vec![0.0, -0.5]),
            })
        }
        "cusp-tail" => {
            check_period(p.h)?;
            let m = half_cylinder(["1", "0", "1"]);
            let q = half_cylinder(["exp(2*x2)", "0", "exp(2*x2)"]);
            let eta = BoundaryDiffeo { components: vec![ComponentDiffeo::identity()] };
            let glued = glue(&m, &q, &eta, 0.5)?;
            let tail = p.extent + 1.25;
            let window = Window::default()
                .with_rect(0, vec![0.0, -2.0], vec![PERIOD, 0.0])
                .with_rect(1, vec![0.0, -tail], vec![PERIOD, 0.0])
                .with_rect(2, vec![0.0, -0.45], vec![PERIOD, 0.45]);
            // P covers exactly one tail grid row; the exhaustion levels then
            // start on the first row outside int P
            let rim = p.h;
            Ok(GluedScenario {
                name: name.into(),
                glued,
                window,
                pou: PartitionOfUnity::new(2.0 * p.h, 0.15_f64.max(3.5 * p.h)),
                s0_cap: 1.5 * p.h,
                boundary_spacing: p.h,
                exhaustion: ExhaustionChoice::TailCoordinate { step: 1.0, rim },
                t_scan_step: 0.05,
                base: (0, vec![0.0, -1.0]),
            })
        }
        "two-tail" => {
            check_period(p.h)?;
            // M: flat band -2 <= t <= 0 in chart A coordinates (x2 = t), with
            // chart B at the other end (x2 = -2 - t)
            let band = {
                let g = MetricField::identity(2);
                let mut metrics = BTreeMap::new();
                metrics.insert(
                    "g".to_string(),
                    vec![Some(g.clone()), Some(g)],
                );
                let mut transitions = wrap_transition(0, 2);
                transitions.extend(wrap_transition(1, 2));
                // A <-> B: (x1, x2) -> (x1, -2 - x2)
                transitions.push(TransitionMap {
                    source: 0,
                    target: 1,
                    map: vec![
                        parse_expr("x1", 2).unwrap(),
                        parse_expr("-2 - x2", 2).unwrap(),
                    ],
                    overlap: parse_expr("1", 2).unwrap(),
                });
                transitions.push(TransitionMap {
                    source: 1,
                    target: 0,
                    map: vec![
                        parse_expr("x1", 2).unwrap(),
                        parse_expr("-2 - x2", 2).unwrap(),
                    ],
                    overlap: parse_expr("1", 2).unwrap(),
                });
                ManifoldWithBoundary {
                    dim: 2,
                    charts: vec![
                        Chart {
                            name: "endA".into(),
                            domain: ChartDomain::HalfBall { radius: 60.0 },
                            side: ChartSide::M,
                        },
                        Chart {
                            name: "endB".into(),
                            domain: ChartDomain::HalfBall { radius: 60.0 },
                            side: ChartSide::M,
                        },
                    ],
                    transitions,
                    boundary: vec![
                        BoundaryComponent { chart: 0, u_min: 0.0, u_max: PERIOD, periodic: true },
                        BoundaryComponent { chart: 1, u_min: 0.0, u_max: PERIOD, periodic: true },
                    ],
                    metrics,
                }
            };
            // Q: two cusp tails
            let tails = {
                let g0 = MetricField::conformal_expr(2, "exp(2*x2)");
                let g1 = MetricField::conformal_expr(2, "exp(2*x2)");
                let mut metrics = BTreeMap::new();
                metrics.insert("g".to_string(), vec![Some(g0), Some(g1)]);
                let mut transitions = wrap_transition(0, 2);
                transitions.extend(wrap_transition(1, 2));
                ManifoldWithBoundary {
                    dim: 2,
                    charts: vec![
                        Chart {
                            name: "tailA".into(),
                            domain: ChartDomain::HalfBall { radius: 60.0 },
                            side: ChartSide::M,
                        },
                        Chart {
                            name: "tailB".into(),
                            domain: ChartDomain::HalfBall { radius: 60.0 },
                            side: ChartSide::M,
                        },
                    ],
                    transitions,
                    boundary: vec![
                        BoundaryComponent { chart: 0, u_min: 0.0, u_max: PERIOD, periodic: true },
                        BoundaryComponent { chart: 1, u_min: 0.0, u_max: PERIOD, periodic: true },
                    ],
                    metrics,
                }
            };
            let eta = BoundaryDiffeo {
                components: vec![ComponentDiffeo::identity(), ComponentDiffeo::identity()],
            };
            let glued = glue(&band, &tails, &eta, 0.5)?;
            let tail = p.extent + 1.25;
            let window = Window::default()
                .with_rect(0, vec![0.0, -2.0], vec![PERIOD, 0.0])
                .with_rect(1, vec![0.0, -2.0], vec![PERIOD, 0.0])
                .with_rect(2, vec![0.0, -tail], vec![PERIOD, 0.0])
                .with_rect(3, vec![0.0, -tail], vec![PERIOD, 0.0])
                .with_rect(4, vec![0.0, -0.45], vec![PERIOD, 0.45])
                .with_rect(5, vec![0.0, -0.45], vec![PERIOD, 0.45]);
            let rim = p.h;
            Ok(GluedScenario {
                name: name.into(),
                glued,
                window,
                pou: PartitionOfUnity::new(2.0 * p.h, 0.15_f64.max(3.5 * p.h)),
                s0_cap: 1.5 * p.h,
                boundary_spacing: p.h,
                exhaustion: ExhaustionChoice::TailCoordinate { step: 1.0, rim },
                t_scan_step: 0.05,
                base: (0, vec![0.0, -1.0]),
            })
        }
        "hyperbolic-collar" => {
            let m = hyperbolic_shelf();
            let q = flat_half_plane(40.0);
            let eta = BoundaryDiffeo { components: vec![ComponentDiffeo::identity()] };
            let glued = glue(&m, &q, &eta, 0.45)?;
            let e = p.extent.min(3.0);
            let window = Window::default()
                .with_rect(0, vec![-e, -e], vec![e, 0.0])
                .with_rect(1, vec![-e, -e], vec![e, 0.0])
                .with_rect(2, vec![-e, -0.4], vec![e, 0.4]);
            Ok(GluedScenario {
                name: name.into(),
                glued,
                window,
                pou: PartitionOfUnity::new(0.05, 0.15),
                s0_cap: 0.35,
                boundary_spacing: p.h.max(0.05),
                exhaustion: ExhaustionChoice::MetricBall { step: 1.0 },
                t_scan_step: 0.05,
                base: (0, vec![0.0, 0.0]),
            })
        }
        other => Err(ScenarioError::Unknown(other.into())),
    }
}

/// Window schedule for nested-level runs of a glued scenario: level k scales
/// the manifold-side depth while keeping collar rects fixed.
pub fn window_at_level(sc: &GluedScenario, base_extent: f64, level: usize) -> Window {
    let mut w = sc.window.clone();
    let extent = base_extent + level as f64;
    match sc.name.as_str() {
        "cusp-tail" => {
            w.rects.insert(1, (vec![0.0, -(extent + 1.25)], vec![PERIOD, 0.0]));
        }
        "two-tail" => {
            w.rects.insert(2, (vec![0.0, -(extent + 1.25)], vec![PERIOD, 0.0]));
            w.rects.insert(3, (vec![0.0, -(extent + 1.25)], vec![PERIOD, 0.0]));
        }
        "flat-double" => {
            for c in 0..2 {
                w.rects.insert(c, (vec![-extent, -extent], vec![extent, 0.0]));
            }
            w.rects.insert(2, (vec![-extent, -0.6], vec![extent, 0.6]));
        }
        _ => {}
    }
    w
}

// ---------------------------------------------------------------------------
// Diagnostic manifolds
// ---------------------------------------------------------------------------

/// Open flat unit disk (no boundary chart: the rim is missing, not glued).
pub fn open_disk() -> ManifoldWithBoundary {
    ManifoldWithBoundary {
        dim: 2,
        charts: vec![Chart {
            name: "open".into(),
            domain: ChartDomain::Ball { center: vec![0.0, 0.0], radius: 1.0 },
            side: ChartSide::M,
        }],
        transitions: vec![],
        boundary: vec![],
        metrics: one_metric(MetricField::identity(2)),
    }
}

/// Flat plane as a single chart.
pub fn flat_plane() -> ManifoldWithBoundary {
    ManifoldWithBoundary {
        dim: 2,
        charts: vec![Chart {
            name: "plane".into(),
            domain: ChartDomain::Ball { center: vec![0.0, 0.0], radius: 1e6 },
            side: ChartSide::M,
        }],
        transitions: vec![],
        boundary: vec![],
        metrics: one_metric(MetricField::identity(2)),
    }
}

/// Stereographic chart of the round unit sphere.
pub fn sphere_chart() -> ManifoldWithBoundary {
    ManifoldWithBoundary {
        dim: 2,
        charts: vec![Chart {
            name: "stereo".into(),
            domain: ChartDomain::Ball { center: vec![0.0, 0.0], radius: 6.0 },
            side: ChartSide::M,
        }],
        transitions: vec![],
        boundary: vec![],
        metrics: one_metric(MetricField::conformal_expr(2, "4/((1 + x1*x1 + x2*x2)^2)")),
    }
}

/// Hyperbolic upper half plane, chart centered away from the axis.
pub fn hyperbolic_chart() -> ManifoldWithBoundary {
    ManifoldWithBoundary {
        dim: 2,
        charts: vec![Chart {
            name: "upper".into(),
            domain: ChartDomain::Ball { center: vec![0.0, 1.5], radius: 1.2 },
            side: ChartSide::M,
        }],
        transitions: vec![],
        boundary: vec![],
        metrics: one_metric(MetricField::conformal_expr(2, "1/(x2*x2)")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::atlas::sample_mesh;

    #[test]
    fn catalog_has_at_least_six_scenarios() {
        assert!(catalog().len() >= 6);
    }

    #[test]
    fn filter_matches_cusp() {
        let hits = list(Some("cusp"));
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].name, "cusp-tail");
        assert!(list(Some("no-such")).is_empty());
    }

    #[test]
    fn all_glued_scenarios_build_and_mesh() {
        let p = RunParams { h: 0.1, extent: 1.5, ..Default::default() };
        for name in ["flat-double", "disk-patch", "disk-core", "cusp-tail", "two-tail", "hyperbolic-collar"] {
            let sc = build_glued(name, &p).unwrap_or_else(|e| panic!("{name}: {e}"));
            let mesh = sample_mesh(&sc.glued.man, p.h, &sc.window)
                .unwrap_or_else(|e| panic!("{name}: {e}"));
            assert!(mesh.vertex_count() > 100, "{name}: {}", mesh.vertex_count());
            // both sides present
            assert!(mesh.vertices.iter().any(|v| v.flags.in_m));
            assert!(mesh.vertices.iter().any(|v| v.flags.in_q));
            assert!(!crate::atlas::boundary_vertices(&mesh).is_empty());
        }
    }

    #[test]
    fn bad_resolution_is_rejected_for_periodic_charts() {
        let p = RunParams { h: 0.07, ..Default::default() };
        assert!(matches!(
            build_glued("cusp-tail", &p),
            Err(ScenarioError::BadResolution { .. })
        ));
    }

    #[test]
    fn cusp_wrap_identifies_the_seam() {
        let p = RunParams { h: 0.2, extent: 1.0, ..Default::default() };
        let sc = build_glued("cusp-tail", &p).unwrap();
        let mesh = sample_mesh(&sc.glued.man, p.h, &sc.window).unwrap();
        // no vertex at x1 = PERIOD: the wrap merged it onto x1 = 0
        for v in &mesh.vertices {
            assert!(v.coords[0] < PERIOD - 1e-9, "unmerged seam vertex at {:?}", v.coords);
        }
    }
}
