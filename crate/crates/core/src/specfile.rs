//! JSON manifold and gluing descriptions.
//!
//! A manifold file lists the dimension, the charts (ball or half-ball
//! domains with an expression-matrix metric), transition maps, boundary
//! components, a per-chart sampling window, and the resolution. A glue file
//! references or inlines two manifold descriptions plus the per-component
//! boundary identification. Expression strings use the grammar of the
//! expression module (`x1..xm`, literals, `+ - * / ^`, unary calls).

use crate::atlas::{
    BoundaryComponent, Chart, ChartDomain, ChartSide, ManifoldWithBoundary, TransitionMap, Window,
};
use crate::expr::parse_expr;
use crate::field::MetricField;
use crate::glue::{BoundaryDiffeo, ComponentDiffeo};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SpecError {
    #[error("i/o error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed spec file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("expression `{text}`: {message}")]
    Expr { text: String, message: String },
    #[error("unknown chart id `{0}`")]
    UnknownChart(String),
    #[error("metric of chart `{chart}` is not symmetric at {point:?}")]
    AsymmetricMetric { chart: String, point: Vec<f64> },
    #[error("metric of chart `{chart}` must be {dim}x{dim}")]
    BadMetricShape { chart: String, dim: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DomainSpec {
    Ball { center: Vec<f64>, radius: f64 },
    HalfBall { radius: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChartSpec {
    pub id: String,
    pub domain: DomainSpec,
    /// full m x m matrix of expression strings; symmetry is validated on a
    /// sample grid
    pub metric: Vec<Vec<String>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransitionSpec {
    pub source: String,
    pub target: String,
    pub map: Vec<String>,
    /// the transition applies where this expression is positive
    pub overlap: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundarySpec {
    pub chart: String,
    pub u_min: f64,
    pub u_max: f64,
    #[serde(default)]
    pub periodic: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifoldSpec {
    pub dimension: usize,
    pub charts: Vec<ChartSpec>,
    #[serde(default)]
    pub transitions: Vec<TransitionSpec>,
    #[serde(default)]
    pub boundary: Vec<BoundarySpec>,
    /// chart id -> [[lo_1, hi_1], ..., [lo_m, hi_m]]
    #[serde(default)]
    pub window: BTreeMap<String, Vec<[f64; 2]>>,
    #[serde(default)]
    pub resolution: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EtaSpec {
    pub forward: String,
    pub inverse: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ManifoldRef {
    Path(String),
    Inline(Box<ManifoldSpec>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GlueSpec {
    #[serde(rename = "M")]
    pub m: ManifoldRef,
    #[serde(rename = "Q")]
    pub q: ManifoldRef,
    pub eta: Vec<EtaSpec>,
    #[serde(default = "default_collar_width")]
    pub collar_half_width: f64,
}

fn default_collar_width() -> f64 {
    1.0
}

/// Top-level scenario file: either a standalone manifold or a gluing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioSpec {
    #[serde(flatten)]
    pub manifold: Option<ManifoldSpec>,
    #[serde(default)]
    pub glue: Option<GlueSpec>,
}

fn expr_err(text: &str, e: impl std::fmt::Display) -> SpecError {
    SpecError::Expr { text: text.to_string(), message: e.to_string() }
}

impl ManifoldSpec {
    pub fn load(path: &std::path::Path) -> Result<ManifoldSpec, SpecError> {
        let data = std::fs::read_to_string(path)
            .map_err(|source| SpecError::Io { path: path.display().to_string(), source })?;
        Ok(serde_json::from_str(&data)?)
    }

    /// Materializes the spec into a manifold plus its sampling window.
    pub fn build(&self) -> Result<(ManifoldWithBoundary, Window), SpecError> {
        let m = self.dimension;
        let index: BTreeMap<&str, usize> =
            self.charts.iter().enumerate().map(|(i, c)| (c.id.as_str(), i)).collect();
        let mut charts = Vec::new();
        let mut fields = Vec::new();
        for c in &self.charts {
            if c.metric.len() != m || c.metric.iter().any(|row| row.len() != m) {
                return Err(SpecError::BadMetricShape { chart: c.id.clone(), dim: m });
            }
            let domain = match &c.domain {
                DomainSpec::Ball { center, radius } => {
                    ChartDomain::Ball { center: center.clone(), radius: *radius }
                }
                DomainSpec::HalfBall { radius } => ChartDomain::HalfBall { radius: *radius },
            };
            let mut upper = Vec::new();
            for i in 0..m {
                for j in i..m {
                    let ast = parse_expr(&c.metric[i][j], m)
                        .map_err(|e| expr_err(&c.metric[i][j], e))?;
                    // numeric symmetry check on a small sample grid
                    if i != j {
                        let other = parse_expr(&c.metric[j][i], m)
                            .map_err(|e| expr_err(&c.metric[j][i], e))?;
                        for k in 0..5 {
                            let p: Vec<f64> =
                                (0..m).map(|d| 0.17 * (k + d + 1) as f64 - 0.4).collect();
                            let a = crate::expr::eval_expr(&ast, &p);
                            let b = crate::expr::eval_expr(&other, &p);
                            if let (Ok(a), Ok(b)) = (a, b) {
                                if (a - b).abs() > 1e-9 * (1.0 + a.abs()) {
                                    return Err(SpecError::AsymmetricMetric {
                                        chart: c.id.clone(),
                                        point: p,
                                    });
                                }
                            }
                        }
                    }
                    upper.push(ast);
                }
            }
            charts.push(Chart { name: c.id.clone(), domain, side: ChartSide::M });
            fields.push(Some(MetricField::from_exprs(m, upper)));
        }
        let mut transitions = Vec::new();
        for t in &self.transitions {
            let source =
                *index.get(t.source.as_str()).ok_or_else(|| SpecError::UnknownChart(t.source.clone()))?;
            let target =
                *index.get(t.target.as_str()).ok_or_else(|| SpecError::UnknownChart(t.target.clone()))?;
            let map = t
                .map
                .iter()
                .map(|s| parse_expr(s, m).map_err(|e| expr_err(s, e)))
                .collect::<Result<Vec<_>, _>>()?;
            let overlap = parse_expr(&t.overlap, m).map_err(|e| expr_err(&t.overlap, e))?;
            transitions.push(TransitionMap { source, target, map, overlap });
        }
        let mut boundary = Vec::new();
        for b in &self.boundary {
            let chart =
                *index.get(b.chart.as_str()).ok_or_else(|| SpecError::UnknownChart(b.chart.clone()))?;
            boundary.push(BoundaryComponent {
                chart,
                u_min: b.u_min,
                u_max: b.u_max,
                periodic: b.periodic,
            });
        }
        let mut window = Window::default();
        for (id, rect) in &self.window {
            let chart =
                *index.get(id.as_str()).ok_or_else(|| SpecError::UnknownChart(id.clone()))?;
            let lo: Vec<f64> = rect.iter().map(|r| r[0]).collect();
            let hi: Vec<f64> = rect.iter().map(|r| r[1]).collect();
            window = window.with_rect(chart, lo, hi);
        }
        let mut metrics = BTreeMap::new();
        metrics.insert("g".to_string(), fields);
        Ok((ManifoldWithBoundary { dim: m, charts, transitions, boundary, metrics }, window))
    }
}

impl GlueSpec {
    pub fn resolve(
        &self,
        base_dir: &std::path::Path,
    ) -> Result<(ManifoldSpec, ManifoldSpec), SpecError> {
        let load = |r: &ManifoldRef| -> Result<ManifoldSpec, SpecError> {
            match r {
                ManifoldRef::Inline(spec) => Ok((**spec).clone()),
                ManifoldRef::Path(p) => ManifoldSpec::load(&base_dir.join(p)),
            }
        };
        Ok((load(&self.m)?, load(&self.q)?))
    }

    pub fn eta(&self) -> Result<BoundaryDiffeo, SpecError> {
        let components = self
            .eta
            .iter()
            .map(|e| {
                ComponentDiffeo::parse(&e.forward, &e.inverse)
                    .map_err(|err| expr_err(&e.forward, err))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(BoundaryDiffeo { components })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const HALF_PLANE_JSON: &str = r#"{
        "dimension": 2,
        "charts": [
            {"id": "m0",
             "domain": {"kind": "half_ball", "radius": 50.0},
             "metric": [["1", "0"], ["0", "1"]]}
        ],
        "boundary": [{"chart": "m0", "u_min": -50.0, "u_max": 50.0}],
        "window": {"m0": [[-1.0, 1.0], [-1.0, 0.0]]},
        "resolution": 0.5
    }"#;

    #[test]
    fn half_plane_round_trip() {
        let spec: ManifoldSpec = serde_json::from_str(HALF_PLANE_JSON).unwrap();
        let (man, window) = spec.build().unwrap();
        assert_eq!(man.charts.len(), 1);
        assert_eq!(man.boundary.len(), 1);
        let mesh = crate::atlas::sample_mesh(&man, 0.5, &window).unwrap();
        assert_eq!(mesh.vertex_count(), 15);
        // serialize back and reparse
        let text = serde_json::to_string(&spec).unwrap();
        let again: ManifoldSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(again.charts[0].id, "m0");
    }

    #[test]
    fn asymmetric_metric_rejected() {
        let bad = r#"{
            "dimension": 2,
            "charts": [
                {"id": "c",
                 "domain": {"kind": "ball", "center": [0.0, 0.0], "radius": 1.0},
                 "metric": [["1", "x1"], ["x2", "1"]]}
            ]
        }"#;
        let spec: ManifoldSpec = serde_json::from_str(bad).unwrap();
        assert!(matches!(spec.build(), Err(SpecError::AsymmetricMetric { .. })));
    }

    #[test]
    fn glue_spec_with_inline_manifolds() {
        let m: ManifoldSpec = serde_json::from_str(HALF_PLANE_JSON).unwrap();
        let gspec = GlueSpec {
            m: ManifoldRef::Inline(Box::new(m.clone())),
            q: ManifoldRef::Inline(Box::new(m)),
            eta: vec![EtaSpec { forward: "x1".into(), inverse: "x1".into() }],
            collar_half_width: 1.0,
        };
        let (ms, qs) = gspec.resolve(std::path::Path::new(".")).unwrap();
        let (mm, _) = ms.build().unwrap();
        let (qm, _) = qs.build().unwrap();
        let glued = crate::glue::glue(&mm, &qm, &gspec.eta().unwrap(), 1.0).unwrap();
        assert_eq!(glued.man.charts.len(), 3);
    }

    #[test]
    fn unknown_chart_in_window_rejected() {
        let bad = r#"{
            "dimension": 2,
            "charts": [
                {"id": "c",
                 "domain": {"kind": "ball", "center": [0.0, 0.0], "radius": 1.0},
                 "metric": [["1", "0"], ["0", "1"]]}
            ],
            "window": {"zzz": [[0.0, 1.0], [0.0, 1.0]]}
        }"#;
        let spec: ManifoldSpec = serde_json::from_str(bad).unwrap();
        assert!(matches!(spec.build(), Err(SpecError::UnknownChart(_))));
    }
}
