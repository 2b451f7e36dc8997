//! Batch pipeline runner: build or load a scenario, execute
//! glue -> extend -> complete -> certify (plus geodesy diagnostics), and
//! emit certificates, audits, and reports. Exit codes: 0 pass, 2 audit
//! failure, 3 spec error, 4 numeric guard.

use crate::atlas::{sample_mesh, ChartSide, Mesh, Window};
use crate::complete::{
    build_exhaustion, certify_completeness, compute_q1, compute_q2, conformal_metric,
    decompose_annuli, exhaustion_from_field, p_mask_from_collar, verify_crossing_cost,
    AnnulusComponents, CompleteError, ConformalFactorField, ConformalParams, Exhaustion, Q1Result,
    Q2Value,
};
use crate::extend::{
    assemble_global_metric, build_fermi_collar, extend_chart_metric, lipschitz_audit,
    validate_assembly, FermiCollar,
};
use crate::geodesy::{shoot_geodesic, GeodesicState};
use crate::glue::GluedManifold;
use crate::lengthspace::{
    completeness_report, stable_hash, CompletenessBudget, PathSample, SampledPath,
};
use crate::report::{fmt, write_csv, write_json};
use crate::scenario::{
    self, build_glued, window_at_level, ExhaustionChoice, GluedScenario, RunParams, ScenarioKind,
};
use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::path::{Path, PathBuf};

pub const EXIT_OK: i32 = 0;
pub const EXIT_AUDIT: i32 = 2;
pub const EXIT_SPEC: i32 = 3;
pub const EXIT_GUARD: i32 = 4;

#[derive(Parser)]
#[command(name = "riemext", about = "chart-atlas metric extension and completion pipelines")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// List the built-in scenarios.
    Scenarios {
        /// substring filter on scenario names
        #[arg(long)]
        filter: Option<String>,
    },
    /// Run a scenario or a spec file through the pipeline.
    Run {
        /// built-in scenario name
        #[arg(long)]
        scenario: Option<String>,
        /// JSON manifold / glue spec file
        #[arg(long)]
        spec: Option<PathBuf>,
        /// comma-separated stages: glue,extend,complete,certify,geodesy
        #[arg(long, default_value = "glue,extend,complete,certify,geodesy")]
        stages: String,
        /// mesh resolution h
        #[arg(long)]
        resolution: Option<f64>,
        /// window extent scale
        #[arg(long)]
        window: Option<f64>,
        /// collar Lipschitz budget epsilon
        #[arg(long, default_value_t = 1.0)]
        epsilon: f64,
        #[arg(long, default_value_t = 17)]
        seed: u64,
        /// output directory (RIEMEXT_OUT overrides)
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

pub fn main() {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Scenarios { filter } => {
            for info in scenario::list(filter.as_deref()) {
                println!("{:20} {}", info.name, info.description);
            }
            EXIT_OK
        }
        Command::Run { scenario, spec, stages, resolution, window, epsilon, seed, out } => {
            let out = std::env::var("RIEMEXT_OUT").map(PathBuf::from).unwrap_or(out);
            let stages = Stages::parse(&stages);
            let mut params = RunParams { eps: epsilon, seed, ..Default::default() };
            if let Some(h) = resolution {
                params.h = h;
            }
            if let Some(w) = window {
                params.extent = w;
            }
            let result = match (scenario, spec) {
                (Some(name), None) => run_named(&name, &params, &stages, &out),
                (None, Some(path)) => run_spec_file(&path, &params, &stages, &out),
                _ => {
                    eprintln!("exactly one of --scenario / --spec is required");
                    std::process::exit(EXIT_SPEC);
                }
            };
            match result {
                Ok(outcome) => {
                    println!("{}", outcome.describe());
                    outcome.exit_code
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    e.exit_code()
                }
            }
        }
    };
    std::process::exit(code);
}

#[derive(Debug, Clone, Copy)]
pub struct Stages {
    pub glue: bool,
    pub extend: bool,
    pub complete: bool,
    pub certify: bool,
    pub geodesy: bool,
}

impl Stages {
    pub fn all() -> Stages {
        Stages { glue: true, extend: true, complete: true, certify: true, geodesy: true }
    }

    pub fn parse(text: &str) -> Stages {
        let mut s = Stages { glue: false, extend: false, complete: false, certify: false, geodesy: false };
        for part in text.split(',') {
            match part.trim() {
                "glue" => s.glue = true,
                "extend" => s.extend = true,
                "complete" => s.complete = true,
                "certify" => s.certify = true,
                "geodesy" => s.geodesy = true,
                _ => {}
            }
        }
        s
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Scenario(#[from] crate::scenario::ScenarioError),
    #[error(transparent)]
    Spec(#[from] crate::specfile::SpecError),
    #[error(transparent)]
    Glue(#[from] crate::glue::GlueError),
    #[error(transparent)]
    Extend(#[from] crate::extend::ExtendError),
    #[error(transparent)]
    Complete(#[from] CompleteError),
    #[error(transparent)]
    Atlas(#[from] crate::atlas::AtlasError),
    #[error(transparent)]
    Length(#[from] crate::lengthspace::LengthError),
    #[error(transparent)]
    Geodesy(#[from] crate::geodesy::GeodesyError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Scenario(_) | PipelineError::Spec(_) | PipelineError::Glue(_) => {
                EXIT_SPEC
            }
            PipelineError::Complete(CompleteError::Q2Guard { .. }) => EXIT_GUARD,
            PipelineError::Extend(_) | PipelineError::Complete(_) | PipelineError::Geodesy(_) => {
                EXIT_GUARD
            }
            _ => EXIT_GUARD,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct PipelineOutcome {
    pub scenario: String,
    pub exit_code: i32,
    pub crossing_audit_pass: Option<bool>,
    pub lipschitz_pass: Option<bool>,
    pub three_case_pass: Option<bool>,
    pub completeness_verdict: Option<String>,
    pub notes: Vec<String>,
}

impl PipelineOutcome {
    pub fn describe(&self) -> String {
        format!(
            "{}: exit {}{}",
            self.scenario,
            self.exit_code,
            if self.exit_code == EXIT_OK { " (pass)" } else { "" }
        )
    }
}

fn run_named(
    name: &str,
    params: &RunParams,
    stages: &Stages,
    out: &Path,
) -> Result<PipelineOutcome, PipelineError> {
    let info = scenario::catalog()
        .into_iter()
        .find(|s| s.name == name)
        .ok_or_else(|| crate::scenario::ScenarioError::Unknown(name.to_string()))?;
    match info.kind {
        ScenarioKind::Glued => {
            let sc = build_glued(name, params)?;
            let run = run_glued(&sc, params, stages, out)?;
            Ok(run.outcome)
        }
        ScenarioKind::Completeness => run_completeness_scenario(name, params, out),
        ScenarioKind::ExhaustionField => run_exhaustion_scenario(params, out),
        ScenarioKind::Curvature => run_curvature_scenario(name, params, out),
    }
}

fn run_spec_file(
    path: &Path,
    params: &RunParams,
    stages: &Stages,
    out: &Path,
) -> Result<PipelineOutcome, PipelineError> {
    let data = std::fs::read_to_string(path).map_err(|source| crate::specfile::SpecError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let spec: crate::specfile::ScenarioSpec =
        serde_json::from_str(&data).map_err(crate::specfile::SpecError::Json)?;
    let base = path.parent().unwrap_or(Path::new("."));
    if let Some(gspec) = &spec.glue {
        let (ms, qs) = gspec.resolve(base)?;
        let (m, mw) = ms.build()?;
        let (q, qw) = qs.build()?;
        let glued = crate::glue::glue(&m, &q, &gspec.eta()?, gspec.collar_half_width)?;
        // merge windows: M rects keep chart ids, Q rects shift, collars span
        let mut window = Window::default();
        for (c, (lo, hi)) in mw.rects {
            window = window.with_rect(c, lo, hi);
        }
        for (c, (lo, hi)) in qw.rects {
            window = window.with_rect(c + m.charts.len(), lo, hi);
        }
        for info in &glued.collars {
            let comp = &info.component;
            window = window.with_rect(
                info.chart,
                vec![comp.u_min, -0.9 * info.half_width],
                vec![comp.u_max, 0.9 * info.half_width],
            );
        }
        let h = ms.resolution.unwrap_or(params.h);
        let sc = GluedScenario {
            name: path.display().to_string(),
            glued,
            window,
            pou: crate::extend::PartitionOfUnity::new(0.1, 0.3),
            s0_cap: 0.5,
            boundary_spacing: h,
            exhaustion: ExhaustionChoice::MetricBall { step: 1.0 },
            t_scan_step: 0.1,
            base: (0, vec![0.0, -1.0]),
        };
        let mut p = params.clone();
        p.h = h;
        let run = run_glued(&sc, &p, stages, out)?;
        Ok(run.outcome)
    } else if let Some(mspec) = &spec.manifold {
        // standalone manifold: completeness diagnostics only
        let (man, window) = mspec.build()?;
        let h = mspec.resolution.unwrap_or(params.h);
        let budget = CompletenessBudget {
            windows: vec![window.clone()],
            h,
            base_chart: 0,
            base_point: vec![0.0, 0.0],
            ray_count: 8,
            walk_count: 8,
            walk_steps: 2000,
            ball_radii: vec![1.0, 2.0],
            seed: params.seed,
            growth_frac: 0.5,
            ray_arc: 16.0,
            ray_step: h / 2.0,
        };
        let report = completeness_report(&man, "g", &budget)?;
        write_json(&out.join("completeness.json"), &report)?;
        Ok(PipelineOutcome {
            scenario: path.display().to_string(),
            exit_code: EXIT_OK,
            crossing_audit_pass: None,
            lipschitz_pass: None,
            three_case_pass: None,
            completeness_verdict: Some(format!("{:?}", report.verdict)),
            notes: vec![],
        })
    } else {
        Err(crate::specfile::SpecError::Json(serde_json::Error::io(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            "spec file contains neither a manifold nor a glue block",
        )))
        .into())
    }
}

// ---------------------------------------------------------------------------
// Glued pipeline
// ---------------------------------------------------------------------------

/// Everything the glued pipeline produced, for reuse by tests.
pub struct GluedRun {
    pub outcome: PipelineOutcome,
    pub mesh: Mesh,
    pub glued: GluedManifold,
    pub collars: Vec<FermiCollar>,
    pub exhaustion: Option<Exhaustion>,
    pub annuli: Option<AnnulusComponents>,
    pub q1s: Vec<Vec<Q1Result>>,
    pub q2s: Vec<Vec<Q2Value>>,
    pub factor: Option<ConformalFactorField>,
    pub crossing: Option<crate::complete::CrossingAudit>,
    pub lipschitz: Option<crate::extend::LipschitzAudit>,
    pub three_case: Option<crate::complete::ThreeCaseReport>,
    pub divergent_paths: Vec<(String, Vec<u32>)>,
}

/// Runs the glued pipeline on one window. Stage selection:
/// `complete` off means the conformal deformation is skipped (factor 1),
/// which is the negative control for incomplete extensions.
pub fn run_glued(
    sc: &GluedScenario,
    params: &RunParams,
    stages: &Stages,
    out: &Path,
) -> Result<GluedRun, PipelineError> {
    std::fs::create_dir_all(out)?;
    let mut glued = sc.glued.clone();
    let mut notes = Vec::new();

    // extend: chart-wise extensions and the global blend
    let mut exts = Vec::new();
    for info in &glued.collars.clone() {
        exts.push(extend_chart_metric(&glued, info, sc.t_scan_step)?);
    }
    assemble_global_metric(&mut glued, &exts, &sc.pou, None)?;

    let mesh = sample_mesh(&glued.man, params.h, &sc.window)?;
    validate_assembly(&glued, &sc.pou, &mesh)?;

    // Fermi collars and the reflection audit
    let mut collars = Vec::new();
    for info in &glued.collars {
        let collar = build_fermi_collar(&glued, info, params.eps, sc.boundary_spacing, sc.s0_cap)?;
        collars.push(collar);
    }
    let mut collar_rows = Vec::new();
    for collar in &collars {
        for s in &collar.samples {
            collar_rows.push(vec![fmt(s.u), fmt(s.s0), fmt(s.max_drho)]);
        }
    }
    write_csv(&out.join("collar_audit.csv"), &["u", "s0", "max_drho"], &collar_rows)?;

    let lipschitz = if stages.extend {
        let paths = sample_audit_paths(&glued, &collars, &mesh, params.seed);
        let audit = lipschitz_audit(&collars[0], &glued, &paths, Some(&mesh))?;
        write_json(&out.join("lipschitz.json"), &audit)?;
        Some(audit)
    } else {
        None
    };

    // complete: exhaustion, certificates, deformation
    let p_mask = p_mask_from_collar(&mesh, &glued, &collars);
    let exh = match sc.exhaustion {
        ExhaustionChoice::MetricBall { step } => {
            let base = mesh
                .nearest_vertex(sc.base.0, &sc.base.1)
                .ok_or(CompleteError::BadBase)?;
            build_exhaustion(&mesh, "gt", base, step)?
        }
        ExhaustionChoice::TailCoordinate { step, rim } => {
            let field: Vec<f64> = mesh
                .vertices
                .iter()
                .map(|v| {
                    let s = match glued.man.charts[v.chart].side {
                        ChartSide::M => v.coords[1],
                        ChartSide::Q => -v.coords[1],
                        ChartSide::Collar => v.coords[1],
                    };
                    s - rim
                })
                .collect();
            exhaustion_from_field(field, step)?
        }
    };
    let ann = decompose_annuli(&mesh, &exh, &p_mask);
    let mut q1s = Vec::new();
    let mut q2s = Vec::new();
    for (j, comps) in ann.annuli.iter().enumerate() {
        let mut row = Vec::new();
        for comp in comps {
            row.push(compute_q1(&mesh, "gt", &exh, comp)?);
        }
        q1s.push(row);
        let mut brow = Vec::new();
        for band in &ann.bands[j] {
            brow.push(compute_q2(&mesh, "gt", band, &p_mask)?);
        }
        q2s.push(brow);
    }

    let (factor, mesh) = if stages.complete {
        let q_depth = crate::complete::q_depth_field(&mesh, &glued, "gt")?;
        let cp = ConformalParams { qm_width: (2.0 * params.h).min(0.05), spill_levels: 0.05 };
        let factor = conformal_metric(&mesh, &exh, &ann, &q1s, &q2s, &q_depth, &cp)?;
        let mut mesh = mesh;
        mesh.register_conformal("gN", "gt", factor.exponent.clone(), &glued.man)?;
        (Some(factor), mesh)
    } else {
        notes.push("deformation disabled: gN = gt".to_string());
        let mut mesh = mesh;
        mesh.register_conformal("gN", "gt", vec![0.0; mesh.vertex_count()], &glued.man)?;
        let zero = ConformalFactorField {
            exponent: vec![0.0; mesh.vertex_count()],
            factor: vec![1.0; mesh.vertex_count()],
            certificates: vec![],
            max_active_terms: 0,
        };
        (Some(zero), mesh)
    };
    let factor = factor.unwrap();

    // certificates table
    let cert_rows: Vec<Vec<String>> = factor
        .certificates
        .iter()
        .map(|c| {
            vec![
                c.j.to_string(),
                c.component.to_string(),
                c.kind.clone(),
                fmt(c.value),
                c.mode.clone(),
                c.pairs.to_string(),
            ]
        })
        .collect();
    write_csv(
        &out.join("certificates.csv"),
        &["j", "component", "kind", "value", "mode", "pairs"],
        &cert_rows,
    )?;
    // factor field export
    let factor_rows: Vec<serde_json::Value> = mesh
        .vertices
        .iter()
        .enumerate()
        .map(|(i, v)| {
            serde_json::json!({
                "vertex": i,
                "chart": v.chart,
                "coords": v.coords,
                "exponent": factor.exponent[i],
                "factor": factor.factor[i],
            })
        })
        .collect();
    write_json(&out.join("factor.json"), &factor_rows)?;

    // certify: crossing audits and the three-case classification
    let (crossing, three_case, divergent_paths) = if stages.certify {
        let audit = verify_crossing_cost(
            &mesh, "gN", "gt", &exh, &ann, &factor, 50, params.seed,
        )?;
        write_json(&out.join("crossing_audit.json"), &audit)?;
        let paths = sample_divergent_vertex_paths(&mesh, &exh, params.seed, 32);
        let report = certify_completeness(&mesh, "gN", "gt", &exh, &ann, &paths)?;
        write_json(&out.join("three_case.json"), &report)?;
        (Some(audit), Some(report), paths)
    } else {
        (None, None, Vec::new())
    };

    // geodesy diagnostics: one interface-crossing trajectory
    if stages.geodesy {
        if let Some(info) = glued.collars.first() {
            let umid = 0.5 * (info.component.u_min + info.component.u_max);
            let start = GeodesicState {
                chart: info.chart,
                position: vec![umid, -0.3 * info.half_width],
                velocity: vec![0.3, 1.0],
                arc_length: 0.0,
            };
            if let Ok(run) = shoot_geodesic(&glued.man, "gt", &start, 0.6 * info.half_width, 1e-3)
            {
                let mut rows = Vec::new();
                for (t, sample) in &run.path.samples {
                    if let PathSample::ChartPoint { chart, coords } = sample {
                        rows.push(vec![
                            fmt(*t),
                            chart.to_string(),
                            fmt(coords[0]),
                            fmt(coords[1]),
                            fmt(1.0 - run.max_speed_drift),
                        ]);
                    }
                }
                write_csv(
                    &out.join("trajectory.csv"),
                    &["t", "chart", "x1", "x2", "speed"],
                    &rows,
                )?;
            }
        }
    }

    let crossing_pass = crossing.as_ref().map(|a| a.pass);
    let lipschitz_pass = lipschitz.as_ref().map(|a| a.pass);
    let three_pass = three_case.as_ref().map(|r| r.pass);
    let exit_code = if crossing_pass == Some(false)
        || lipschitz_pass == Some(false)
        || three_pass == Some(false)
    {
        EXIT_AUDIT
    } else {
        EXIT_OK
    };
    let outcome = PipelineOutcome {
        scenario: sc.name.clone(),
        exit_code,
        crossing_audit_pass: crossing_pass,
        lipschitz_pass,
        three_case_pass: three_pass,
        completeness_verdict: None,
        notes,
    };
    write_json(&out.join("summary.json"), &outcome)?;
    Ok(GluedRun {
        outcome,
        mesh,
        glued,
        collars,
        exhaustion: Some(exh),
        annuli: Some(ann),
        q1s,
        q2s,
        factor: Some(factor),
        crossing,
        lipschitz,
        three_case,
        divergent_paths,
    })
}

/// Audit paths for the Lipschitz check: interface-crossing segments inside P
/// plus a couple of in-M paths.
fn sample_audit_paths(
    glued: &GluedManifold,
    collars: &[FermiCollar],
    _mesh: &Mesh,
    seed: u64,
) -> Vec<(String, SampledPath)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stable_hash("lipschitz-paths"));
    let mut out = Vec::new();
    for (ci, collar) in collars.iter().enumerate() {
        let info = &glued.collars[ci];
        let span = info.component.u_max - info.component.u_min;
        for k in 0..6 {
            let u0 = info.component.u_min + span * (0.1 + 0.8 * rng.gen::<f64>());
            let du = span * 0.05 * (rng.gen::<f64>() - 0.5);
            let depth = collar.min_s0();
            // diagonal crossing from M side into the reflected collar region
            let pts: Vec<(f64, PathSample)> = (0..=16)
                .map(|i| {
                    let t = i as f64 / 17.0;
                    let s = -0.3 + (0.3 + 0.95 * depth) * t;
                    (
                        t,
                        PathSample::ChartPoint {
                            chart: info.chart,
                            coords: vec![u0 + du * t, s.min(0.95 * depth)],
                        },
                    )
                })
                .collect();
            out.push((format!("cross{ci}_{k}"), SampledPath::new(pts, "gt".into())));
        }
        // a path along the boundary inside the reflected region
        let depth = 0.5 * collar.min_s0();
        let pts: Vec<(f64, PathSample)> = (0..=24)
            .map(|i| {
                let t = i as f64 / 25.0;
                let u = info.component.u_min + span * (0.1 + 0.8 * t);
                (t, PathSample::ChartPoint { chart: info.chart, coords: vec![u, depth] })
            })
            .collect();
        out.push((format!("tangent{ci}"), SampledPath::new(pts, "gt".into())));
        // and one entirely inside M
        let pts: Vec<(f64, PathSample)> = (0..=16)
            .map(|i| {
                let t = i as f64 / 17.0;
                let u = info.component.u_min + span * (0.2 + 0.6 * t);
                (
                    t,
                    PathSample::ChartPoint {
                        chart: info.chart,
                        coords: vec![u, -0.2 - 0.2 * t],
                    },
                )
            })
            .collect();
        out.push((format!("inside{ci}"), SampledPath::new(pts, "gt".into())));
    }
    out
}

/// Deterministic divergent vertex paths: greedy exhaustion-ascending walks
/// (the mesh counterpart of rays toward the ends) plus seeded outward random
/// walks.
pub fn sample_divergent_vertex_paths(
    mesh: &Mesh,
    exh: &Exhaustion,
    seed: u64,
    count: usize,
) -> Vec<(String, Vec<u32>)> {
    let n = mesh.vertex_count();
    let mut out = Vec::new();
    // start vertices spread over the lowest level
    let mut starts: Vec<u32> = (0..n as u32)
        .filter(|v| exh.field[*v as usize] <= exh.level_value(0))
        .collect();
    if starts.is_empty() {
        starts = vec![0];
    }
    let half = count / 2;
    for k in 0..half {
        let start = starts[(k * starts.len()) / half.max(1) % starts.len()];
        let mut cur = start;
        let mut path = vec![cur];
        // greedy ascent of the exhaustion field
        loop {
            let next = mesh.adjacency[cur as usize]
                .iter()
                .map(|(_, w)| *w)
                .filter(|w| exh.field[*w as usize] > exh.field[cur as usize] + 1e-12)
                .min_by(|a, b| {
                    exh.field[*b as usize]
                        .partial_cmp(&exh.field[*a as usize])
                        .unwrap()
                        .then(a.cmp(b))
                });
            match next {
                Some(w) => {
                    cur = w;
                    path.push(w);
                }
                None => break,
            }
            if path.len() > 100_000 {
                break;
            }
        }
        if path.len() >= 2 {
            out.push((format!("ascent{k}"), path));
        }
    }
    for k in half..count {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stable_hash(&format!("divwalk{k}")));
        let start = starts[rng.gen_range(0..starts.len())];
        let mut cur = start;
        let mut path = vec![cur];
        for _ in 0..100_000 {
            let ups: Vec<u32> = mesh.adjacency[cur as usize]
                .iter()
                .map(|(_, w)| *w)
                .filter(|w| exh.field[*w as usize] > exh.field[cur as usize])
                .collect();
            if ups.is_empty() {
                break;
            }
            cur = ups[rng.gen_range(0..ups.len())];
            path.push(cur);
        }
        if path.len() >= 2 {
            out.push((format!("divwalk{k}"), path));
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Growth across window levels
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct GrowthRow {
    pub level: usize,
    pub annuli: usize,
    pub min_divergent_length: f64,
}

/// Runs the full pipeline per nested window level and reports the minimal
/// deformed length among the sampled divergent paths at each level.
pub fn growth_across_levels(
    name: &str,
    params: &RunParams,
    stages: &Stages,
    levels: std::ops::RangeInclusive<usize>,
    out: &Path,
) -> Result<Vec<GrowthRow>, PipelineError> {
    let mut rows = Vec::new();
    for level in levels {
        let mut p = params.clone();
        p.extent = level as f64;
        let sc = build_glued(name, &p)?;
        let mut sc = sc;
        sc.window = window_at_level(&sc, 0.0, level);
        let run = run_glued(&sc, &p, stages, &out.join(format!("level{level}")))?;
        let exh = run.exhaustion.as_ref().unwrap();
        let lens = run.mesh.lengths("gN")?;
        let edge_len = |a: u32, b: u32| -> f64 {
            for (ei, w) in &run.mesh.adjacency[a as usize] {
                if *w == b {
                    return lens[*ei as usize];
                }
            }
            f64::NAN
        };
        // minimal length among paths that actually diverge into the tail
        let mut min_len = f64::INFINITY;
        for (_, verts) in &run.divergent_paths {
            let end_lvl = exh.level_units(*verts.last().unwrap() as usize);
            if end_lvl < exh.levels as f64 - 1.5 {
                continue; // did not reach the outermost annuli
            }
            let len: f64 = (1..verts.len()).map(|i| edge_len(verts[i - 1], verts[i])).sum();
            min_len = min_len.min(len);
        }
        rows.push(GrowthRow { level, annuli: exh.levels, min_divergent_length: min_len });
    }
    let csv: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![r.level.to_string(), r.annuli.to_string(), fmt(r.min_divergent_length)])
        .collect();
    write_csv(&out.join("growth.csv"), &["level", "annuli", "min_divergent_length"], &csv)?;
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Diagnostic scenarios
// ---------------------------------------------------------------------------

pub fn completeness_budget_for(name: &str, params: &RunParams) -> CompletenessBudget {
    match name {
        "open-disk" => CompletenessBudget {
            windows: [0.6, 0.8, 0.9, 0.95]
                .iter()
                .map(|r| Window::single(0, vec![-r, -r], vec![*r, *r]))
                .collect(),
            h: params.h.min(0.05),
            base_chart: 0,
            base_point: vec![0.0, 0.0],
            ray_count: 16,
            walk_count: 16,
            walk_steps: 400,
            ball_radii: vec![0.5, 0.9, 2.0],
            seed: params.seed,
            growth_frac: 0.5,
            ray_arc: 3.0,
            ray_step: 0.005,
        },
        _ => CompletenessBudget {
            windows: [2.0, 4.0, 8.0]
                .iter()
                .map(|r| Window::single(0, vec![-r, -r], vec![*r, 0.0]))
                .collect(),
            h: params.h.max(0.1),
            base_chart: 0,
            base_point: vec![0.0, -1.0],
            ray_count: 16,
            walk_count: 16,
            walk_steps: 800,
            ball_radii: vec![1.0, 2.0],
            seed: params.seed,
            growth_frac: 0.5,
            ray_arc: 24.0,
            ray_step: 0.02,
        },
    }
}

fn run_completeness_scenario(
    name: &str,
    params: &RunParams,
    out: &Path,
) -> Result<PipelineOutcome, PipelineError> {
    let man = match name {
        "open-disk" => scenario::open_disk(),
        _ => scenario::flat_half_plane(1000.0),
    };
    let budget = completeness_budget_for(name, params);
    let report = completeness_report(&man, "g", &budget)?;
    write_json(&out.join("completeness.json"), &report)?;
    let rows: Vec<Vec<String>> = report
        .paths
        .iter()
        .flat_map(|p| {
            p.lengths.iter().enumerate().map(move |(level, len)| {
                vec![level.to_string(), p.path_id.clone(), fmt(*len)]
            })
        })
        .collect();
    write_csv(&out.join("completeness_paths.csv"), &["window_level", "path_id", "length"], &rows)?;
    Ok(PipelineOutcome {
        scenario: name.to_string(),
        exit_code: EXIT_OK,
        crossing_audit_pass: None,
        lipschitz_pass: None,
        three_case_pass: None,
        completeness_verdict: Some(format!("{:?}", report.verdict)),
        notes: vec![],
    })
}

fn run_exhaustion_scenario(params: &RunParams, out: &Path) -> Result<PipelineOutcome, PipelineError> {
    let man = scenario::flat_plane();
    let extent = params.extent.max(13.0);
    let mesh = sample_mesh(
        &man,
        params.h.max(0.1),
        &Window::single(0, vec![-extent, -extent], vec![extent, extent]),
    )?;
    let base = mesh.nearest_vertex(0, &[0.0, 0.0]).ok_or(CompleteError::BadBase)?;
    let field = crate::geodesy::exhaustion_function(&mesh, "g", base, 1.1, 2.5 * params.h.max(0.1))?;
    let c2 = crate::geodesy::cutoff_sequence(&mesh, "g", &field.rho, 2)?;
    let c4 = crate::geodesy::cutoff_sequence(&mesh, "g", &field.rho, 4)?;
    #[derive(Serialize)]
    struct ExhaustionSummary {
        max_gradient: f64,
        min_rho_outside_12: f64,
        cutoff_gradient_k2: f64,
        cutoff_gradient_k4: f64,
    }
    let min_outside = mesh
        .vertices
        .iter()
        .enumerate()
        .filter(|(_, v)| v.coords.iter().any(|c| c.abs() > 12.0))
        .map(|(i, _)| field.rho[i])
        .fold(f64::INFINITY, f64::min);
    let summary = ExhaustionSummary {
        max_gradient: field.max_gradient,
        min_rho_outside_12: min_outside,
        cutoff_gradient_k2: c2.max_gradient,
        cutoff_gradient_k4: c4.max_gradient,
    };
    write_json(&out.join("exhaustion.json"), &summary)?;
    Ok(PipelineOutcome {
        scenario: "flat-plane".into(),
        exit_code: EXIT_OK,
        crossing_audit_pass: None,
        lipschitz_pass: None,
        three_case_pass: None,
        completeness_verdict: None,
        notes: vec![],
    })
}

fn run_curvature_scenario(
    name: &str,
    params: &RunParams,
    out: &Path,
) -> Result<PipelineOutcome, PipelineError> {
    let (man, expected_k) = match name {
        "sphere-curvature" => (scenario::sphere_chart(), 1.0),
        _ => (scenario::hyperbolic_chart(), -1.0),
    };
    let g = man.metric_on_chart("g", 0)?;
    let mut rows = Vec::new();
    let mut max_err = 0.0f64;
    let pts: Vec<[f64; 2]> = match name {
        "sphere-curvature" => vec![[0.0, 0.0], [1.0, 0.0], [0.3, -0.8], [2.0, 1.0]],
        _ => vec![[0.0, 1.0], [0.5, 2.0], [-0.4, 1.2], [0.2, 0.8]],
    };
    for p in pts {
        let k = crate::geodesy::gaussian_curvature(g, &p)?;
        max_err = max_err.max((k - expected_k).abs());
        rows.push(vec![fmt(p[0]), fmt(p[1]), fmt(k)]);
    }
    write_csv(&out.join("curvature.csv"), &["x1", "x2", "K"], &rows)?;
    let _ = params;
    Ok(PipelineOutcome {
        scenario: name.to_string(),
        exit_code: if max_err <= 1e-8 { EXIT_OK } else { EXIT_AUDIT },
        crossing_audit_pass: None,
        lipschitz_pass: None,
        three_case_pass: None,
        completeness_verdict: None,
        notes: vec![format!("max curvature deviation {max_err:.3e}")],
    })
}
