// temporary instrumentation, deleted before shipping
use riemext::cli::{run_glued, Stages};
use riemext::scenario::{build_glued, RunParams};

#[test]
#[ignore]
fn debug_q2() {
    let params = RunParams { h: 0.04, extent: 3.0, ..Default::default() };
    let sc = build_glued("cusp-tail", &params).unwrap();
    let run = run_glued(&sc, &params, &Stages::all(), std::path::Path::new("/tmp/dbg")).unwrap();
    let ann = run.annuli.as_ref().unwrap();
    let mesh = &run.mesh;
    let band = &ann.bands[0][0];
    println!("band vertices {} p_trace {}", band.vertices.len(), band.p_trace.len());
    let fmin = band.vertices.iter().map(|v| run.exhaustion.as_ref().unwrap().field[*v as usize]).fold(f64::INFINITY, f64::min);
    let fmax = band.vertices.iter().map(|v| run.exhaustion.as_ref().unwrap().field[*v as usize]).fold(f64::NEG_INFINITY, f64::max);
    println!("band f range [{fmin}, {fmax}]");
    // recompute the argmin ratio with full detail
    let mut mask = vec![false; mesh.vertex_count()];
    for v in &band.vertices {
        mask[*v as usize] = true;
    }
    let sources: Vec<u32> = band.p_trace.iter().copied().step_by(8).collect();
    let mut best = (f64::INFINITY, 0u32, 0u32, 0.0, 0.0);
    for &x in &sources {
        let db = riemext::lengthspace::dijkstra(mesh, "gt", &[x], Some(&mask)).unwrap();
        let dp = riemext::lengthspace::dijkstra(mesh, "gt", &[x], Some(&ann.p_mask)).unwrap();
        for &y in &sources {
            if x == y || !db[y as usize].is_finite() || !dp[y as usize].is_finite() || dp[y as usize] <= 0.0 {
                continue;
            }
            let r = db[y as usize] / dp[y as usize];
            if r < best.0 {
                best = (r, x, y, db[y as usize], dp[y as usize]);
            }
        }
    }
    let (r, x, y, db, dp) = best;
    let vx = &mesh.vertices[x as usize];
    let vy = &mesh.vertices[y as usize];
    println!("ratio {r} d_band {db} d_P {dp}");
    println!("x: chart {} {:?}  y: chart {} {:?}", vx.chart, vx.coords, vy.chart, vy.coords);
    // p_mask along the rim row near the seam
    for (i, v) in mesh.vertices.iter().enumerate() {
        if (v.coords[1] + 0.04).abs() < 1e-9 && (v.coords[0] > 6.0 || v.coords[0] < 0.3) {
            println!("u={:.2} chart {} p_mask {} in_m {}", v.coords[0], v.chart, ann.p_mask[i], v.flags.in_m);
        }
    }
}
