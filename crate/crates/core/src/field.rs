//! Piecewise-smooth scalar fields for metric coefficients.
//!
//! Plain `ExprAst` trees cannot express the two constructions the extension
//! machinery needs: reflection extensions (one formula on each side of the
//! interface) and partition-of-unity blends (exact plateaus require the
//! `exp(-1/t)`-glued-to-zero profile, which is not a closed form over the
//! expression grammar). `CoeffField` layers both on top of ASTs while keeping
//! exact first and second derivatives, so Christoffel symbols and curvature
//! stay fully symbolic.

use crate::expr::{diff_expr, eval_expr, ExprAst};
use crate::linalg;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("field evaluation failed at {point:?}: {source}")]
    Eval {
        point: Vec<f64>,
        #[source]
        source: crate::expr::EvalError,
    },
}

// ---------------------------------------------------------------------------
// The C-infinity step profile
// ---------------------------------------------------------------------------

// exp(-1/u) glued to 0 at u <= 0. Below U_CUT the value is under 1e-86 and is
// snapped to an exact 0 so plateau assertions hold bitwise.
const U_CUT: f64 = 0.005;

fn bump_f(u: f64) -> (f64, f64, f64) {
    if u <= U_CUT {
        return (0.0, 0.0, 0.0);
    }
    let e = (-1.0 / u).exp();
    let u2 = u * u;
    let f1 = e / u2;
    let f2 = e * (1.0 - 2.0 * u) / (u2 * u2);
    (e, f1, f2)
}

/// Smooth step: exactly 0 for `u <= 0`, exactly 1 for `u >= 1`, strictly
/// increasing in between, C-infinity up to an O(1e-86) snap at the edges.
/// Returns (value, first, second derivative).
pub fn smooth_step(u: f64) -> (f64, f64, f64) {
    if u <= U_CUT {
        return (0.0, 0.0, 0.0);
    }
    if u >= 1.0 - U_CUT {
        return (1.0, 0.0, 0.0);
    }
    let (a, a1, a2) = bump_f(u);
    let (b, nb1, b2) = bump_f(1.0 - u);
    let b1 = -nb1;
    let d = a + b;
    let d1 = a1 + b1;
    let d2 = a2 + b2;
    let v = a / d;
    let v1 = (a1 * d - a * d1) / (d * d);
    let v2 = a2 / d - (2.0 * a1 * d1 + a * d2) / (d * d) + 2.0 * a * d1 * d1 / (d * d * d);
    (v, v1, v2)
}

/// Value-only variant for per-vertex bump fields.
pub fn smooth_step_value(u: f64) -> f64 {
    smooth_step(u).0
}

/// Fixed cutoff profile: 1 for `t <= 1`, 0 for `t >= 2`, smooth in between.
pub fn cutoff_profile(t: f64) -> f64 {
    1.0 - smooth_step_value(t - 1.0)
}

/// sup |psi'| of the cutoff profile, sampled once at high resolution.
pub fn cutoff_profile_max_slope() -> f64 {
    let mut max = 0.0f64;
    for k in 0..=2000 {
        let t = 1.0 + k as f64 / 1000.0;
        let (_, d, _) = smooth_step(t - 1.0);
        max = max.max(d.abs());
    }
    max
}

/// One-dimensional partition-of-unity weight in a single coordinate: an
/// up-ramp over `[up_lo, up_hi]` times a down-ramp over `[down_lo, down_hi]`.
/// `None` disables the corresponding ramp.
#[derive(Debug, Clone)]
pub struct Weight1d {
    pub up: Option<(f64, f64)>,
    pub down: Option<(f64, f64)>,
}

impl Weight1d {
    pub fn one() -> Weight1d {
        Weight1d { up: None, down: None }
    }

    pub fn up(lo: f64, hi: f64) -> Weight1d {
        Weight1d { up: Some((lo, hi)), down: None }
    }

    pub fn down(lo: f64, hi: f64) -> Weight1d {
        Weight1d { up: None, down: Some((lo, hi)) }
    }

    pub fn window(up_lo: f64, up_hi: f64, down_lo: f64, down_hi: f64) -> Weight1d {
        Weight1d { up: Some((up_lo, up_hi)), down: Some((down_lo, down_hi)) }
    }

    /// (value, d/ds, d2/ds2) at collar coordinate `s`.
    pub fn eval(&self, s: f64) -> (f64, f64, f64) {
        let (a, a1, a2) = match self.up {
            None => (1.0, 0.0, 0.0),
            Some((lo, hi)) => {
                let w = hi - lo;
                let (v, d1, d2) = smooth_step((s - lo) / w);
                (v, d1 / w, d2 / (w * w))
            }
        };
        let (b, b1, b2) = match self.down {
            None => (1.0, 0.0, 0.0),
            Some((lo, hi)) => {
                let w = hi - lo;
                let (v, d1, d2) = smooth_step((s - lo) / w);
                (1.0 - v, -d1 / w, -d2 / (w * w))
            }
        };
        (a * b, a1 * b + a * b1, a2 * b + 2.0 * a1 * b1 + a * b2)
    }
}

// ---------------------------------------------------------------------------
// Coefficient fields
// ---------------------------------------------------------------------------

/// A scalar coefficient over chart coordinates with exact value, gradient,
/// and Hessian evaluation.
#[derive(Debug, Clone)]
pub enum CoeffField {
    Expr(ExprField),
    /// Piecewise along coordinate `axis`, split at 0: `neg` applies for
    /// `x_axis <= 0`. Construction is responsible for C^2 matching.
    TwoSided { axis: usize, neg: Box<CoeffField>, pos: Box<CoeffField> },
    /// `sum_k w_k(x_axis) * part_k(x)` with one-dimensional weights.
    Blend { axis: usize, terms: Vec<(Weight1d, CoeffField)> },
}

/// Expression plus eagerly differentiated first/second partials.
#[derive(Debug, Clone)]
pub struct ExprField {
    ast: ExprAst,
    d: Vec<ExprAst>,
    dd: Vec<ExprAst>, // row-major upper triangle: (i,j) with i <= j
}

fn tri_index(i: usize, j: usize, m: usize) -> usize {
    let (i, j) = if i <= j { (i, j) } else { (j, i) };
    i * m - i * (i + 1) / 2 + j
}

impl ExprField {
    pub fn new(ast: ExprAst) -> ExprField {
        let m = ast.dim();
        let d: Vec<ExprAst> = (0..m).map(|i| diff_expr(&ast, i)).collect();
        let mut dd = Vec::with_capacity(m * (m + 1) / 2);
        for i in 0..m {
            for j in i..m {
                dd.push(diff_expr(&d[i], j));
            }
        }
        ExprField { ast, d, dd }
    }

    pub fn ast(&self) -> &ExprAst {
        &self.ast
    }
}

impl CoeffField {
    pub fn expr(ast: ExprAst) -> CoeffField {
        CoeffField::Expr(ExprField::new(ast))
    }

    pub fn constant(value: f64, dim: usize) -> CoeffField {
        CoeffField::expr(ExprAst::constant(value, dim))
    }

    pub fn dim(&self) -> usize {
        match self {
            CoeffField::Expr(e) => e.ast.dim(),
            CoeffField::TwoSided { neg, .. } => neg.dim(),
            CoeffField::Blend { terms, .. } => terms[0].1.dim(),
        }
    }

    pub fn value(&self, p: &[f64]) -> Result<f64, FieldError> {
        match self {
            CoeffField::Expr(e) => eval(&e.ast, p),
            CoeffField::TwoSided { axis, neg, pos } => {
                if p[*axis] <= 0.0 {
                    neg.value(p)
                } else {
                    pos.value(p)
                }
            }
            CoeffField::Blend { axis, terms } => {
                let mut acc = 0.0;
                for (w, part) in terms {
                    let (wv, _, _) = w.eval(p[*axis]);
                    if wv != 0.0 {
                        acc += wv * part.value(p)?;
                    }
                }
                Ok(acc)
            }
        }
    }

    pub fn partial(&self, i: usize, p: &[f64]) -> Result<f64, FieldError> {
        match self {
            CoeffField::Expr(e) => eval(&e.d[i], p),
            CoeffField::TwoSided { axis, neg, pos } => {
                if p[*axis] <= 0.0 {
                    neg.partial(i, p)
                } else {
                    pos.partial(i, p)
                }
            }
            CoeffField::Blend { axis, terms } => {
                let mut acc = 0.0;
                for (w, part) in terms {
                    let (wv, wd, _) = w.eval(p[*axis]);
                    if wv != 0.0 {
                        acc += wv * part.partial(i, p)?;
                    }
                    if i == *axis && wd != 0.0 {
                        acc += wd * part.value(p)?;
                    }
                }
                Ok(acc)
            }
        }
    }

    pub fn second(&self, i: usize, j: usize, p: &[f64]) -> Result<f64, FieldError> {
        match self {
            CoeffField::Expr(e) => {
                let m = e.ast.dim();
                eval(&e.dd[tri_index(i, j, m)], p)
            }
            CoeffField::TwoSided { axis, neg, pos } => {
                if p[*axis] <= 0.0 {
                    neg.second(i, j, p)
                } else {
                    pos.second(i, j, p)
                }
            }
            CoeffField::Blend { axis, terms } => {
                let a = *axis;
                let mut acc = 0.0;
                for (w, part) in terms {
                    let (wv, wd, wdd) = w.eval(p[a]);
                    if wv != 0.0 {
                        acc += wv * part.second(i, j, p)?;
                    }
                    if i == a && wd != 0.0 {
                        acc += wd * part.partial(j, p)?;
                    }
                    if j == a && wd != 0.0 {
                        acc += wd * part.partial(i, p)?;
                    }
                    if i == a && j == a && wdd != 0.0 {
                        acc += wdd * part.value(p)?;
                    }
                }
                Ok(acc)
            }
        }
    }
}

fn eval(ast: &ExprAst, p: &[f64]) -> Result<f64, FieldError> {
    eval_expr(ast, p).map_err(|source| FieldError::Eval { point: p.to_vec(), source })
}

// ---------------------------------------------------------------------------
// Symmetric metric coefficient matrices
// ---------------------------------------------------------------------------

/// An m x m symmetric matrix of coefficient fields; only the upper triangle
/// is stored.
#[derive(Debug, Clone)]
pub struct MetricField {
    m: usize,
    coeffs: Vec<CoeffField>, // upper triangle, row-major
}

impl MetricField {
    pub fn new(m: usize, coeffs: Vec<CoeffField>) -> MetricField {
        assert_eq!(coeffs.len(), m * (m + 1) / 2);
        MetricField { m, coeffs }
    }

    pub fn from_exprs(m: usize, upper: Vec<ExprAst>) -> MetricField {
        MetricField::new(m, upper.into_iter().map(CoeffField::expr).collect())
    }

    pub fn identity(m: usize) -> MetricField {
        let mut coeffs = Vec::new();
        for i in 0..m {
            for j in i..m {
                coeffs.push(CoeffField::constant(if i == j { 1.0 } else { 0.0 }, m));
            }
        }
        MetricField::new(m, coeffs)
    }

    /// Conformal metric `factor * I` from a scalar expression.
    pub fn conformal_expr(m: usize, factor: &str) -> MetricField {
        let ast = crate::expr::parse_expr(factor, m).expect("conformal factor must parse");
        let mut coeffs = Vec::new();
        for i in 0..m {
            for j in i..m {
                if i == j {
                    coeffs.push(CoeffField::expr(ast.clone()));
                } else {
                    coeffs.push(CoeffField::constant(0.0, m));
                }
            }
        }
        MetricField::new(m, coeffs)
    }

    pub fn dim(&self) -> usize {
        self.m
    }

    pub fn coeff(&self, i: usize, j: usize) -> &CoeffField {
        &self.coeffs[tri_index(i, j, self.m)]
    }

    /// Upper-triangle coefficient by linear index (row-major).
    pub fn coeff_linear(&self, idx: usize) -> &CoeffField {
        &self.coeffs[idx]
    }

    pub fn coeffs(&self) -> &[CoeffField] {
        &self.coeffs
    }

    /// Full symmetric matrix at `p`, row-major.
    pub fn matrix(&self, p: &[f64]) -> Result<Vec<f64>, FieldError> {
        let m = self.m;
        let mut g = vec![0.0; m * m];
        for i in 0..m {
            for j in i..m {
                let v = self.coeff(i, j).value(p)?;
                g[i * m + j] = v;
                g[j * m + i] = v;
            }
        }
        Ok(g)
    }

    /// Entry-wise partial derivative matrix d g / d x_k.
    pub fn partial_matrix(&self, k: usize, p: &[f64]) -> Result<Vec<f64>, FieldError> {
        let m = self.m;
        let mut g = vec![0.0; m * m];
        for i in 0..m {
            for j in i..m {
                let v = self.coeff(i, j).partial(k, p)?;
                g[i * m + j] = v;
                g[j * m + i] = v;
            }
        }
        Ok(g)
    }

    pub fn min_eigenvalue(&self, p: &[f64]) -> Result<f64, FieldError> {
        Ok(linalg::min_eigenvalue_sym(&self.matrix(p)?, self.m))
    }

    /// Riemannian speed sqrt(v^T g(p) v).
    pub fn speed(&self, p: &[f64], v: &[f64]) -> Result<f64, FieldError> {
        Ok(linalg::quad_form(&self.matrix(p)?, v).max(0.0).sqrt())
    }

    /// 3-point Gauss-Legendre length of the coordinate segment `a -> b`.
    pub fn segment_length(&self, a: &[f64], b: &[f64]) -> Result<f64, FieldError> {
        const NODES: [(f64, f64); 3] = [
            (0.5 - 0.387_298_334_620_741_7, 5.0 / 18.0),
            (0.5, 8.0 / 18.0),
            (0.5 + 0.387_298_334_620_741_7, 5.0 / 18.0),
        ];
        let m = self.m;
        let v: Vec<f64> = (0..m).map(|i| b[i] - a[i]).collect();
        let mut acc = 0.0;
        let mut q = vec![0.0; m];
        for (t, w) in NODES {
            for i in 0..m {
                q[i] = a[i] + t * v[i];
            }
            acc += w * self.speed(&q, &v)?;
        }
        Ok(acc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse_expr;
    use approx::assert_relative_eq;

    #[test]
    fn smooth_step_plateaus_are_exact() {
        assert_eq!(smooth_step(-1.0).0, 0.0);
        assert_eq!(smooth_step(0.0).0, 0.0);
        assert_eq!(smooth_step(1.0).0, 1.0);
        assert_eq!(smooth_step(2.0).0, 1.0);
        let mid = smooth_step(0.5).0;
        assert_relative_eq!(mid, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn smooth_step_is_monotone() {
        let mut prev = -1.0;
        for k in 0..=100 {
            let v = smooth_step(k as f64 / 100.0).0;
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn smooth_step_derivatives_match_finite_differences() {
        let h = 1e-6;
        for k in 1..40 {
            let u = 0.025 * k as f64;
            let (_, d1, d2) = smooth_step(u);
            let fd1 = (smooth_step(u + h).0 - smooth_step(u - h).0) / (2.0 * h);
            let fd2 = (smooth_step(u + h).0 - 2.0 * smooth_step(u).0 + smooth_step(u - h).0)
                / (h * h);
            assert!((d1 - fd1).abs() < 1e-5 * (1.0 + d1.abs()), "u={u}: {d1} vs {fd1}");
            assert!((d2 - fd2).abs() < 2e-3 * (1.0 + d2.abs()), "u={u}: {d2} vs {fd2}");
        }
    }

    #[test]
    fn cutoff_profile_plateaus() {
        assert_eq!(cutoff_profile(0.5), 1.0);
        assert_eq!(cutoff_profile(1.0), 1.0);
        assert_eq!(cutoff_profile(2.0), 0.0);
        assert_eq!(cutoff_profile(3.0), 0.0);
        assert!(cutoff_profile(1.5) > 0.0 && cutoff_profile(1.5) < 1.0);
    }

    #[test]
    fn weight_window_plateau_and_support() {
        let w = Weight1d::window(0.0, 0.1, 0.4, 0.5);
        assert_eq!(w.eval(-1.0).0, 0.0);
        assert_eq!(w.eval(0.2).0, 1.0);
        assert_eq!(w.eval(0.3).0, 1.0);
        assert_eq!(w.eval(0.6).0, 0.0);
    }

    #[test]
    fn blend_of_identical_parts_is_exact() {
        let g = parse_expr("1 - x2", 2).unwrap();
        let blend = CoeffField::Blend {
            axis: 1,
            terms: vec![
                (Weight1d::down(-0.2, 0.2), CoeffField::expr(g.clone())),
                (Weight1d::up(-0.2, 0.2), CoeffField::expr(g.clone())),
            ],
        };
        for s in [-0.5, -0.1, 0.0, 0.1, 0.5] {
            let p = [0.3, s];
            let expect = 1.0 - s;
            assert_relative_eq!(blend.value(&p).unwrap(), expect, epsilon = 1e-14);
        }
    }

    #[test]
    fn blend_partials_respect_product_rule() {
        let a = CoeffField::expr(parse_expr("x1*x1", 2).unwrap());
        let b = CoeffField::expr(parse_expr("2 + x2", 2).unwrap());
        let blend = CoeffField::Blend {
            axis: 1,
            terms: vec![(Weight1d::down(-0.5, 0.5), a), (Weight1d::up(-0.5, 0.5), b)],
        };
        let p = [0.7, 0.1];
        let h = 1e-6;
        for i in 0..2 {
            let mut hi = p;
            let mut lo = p;
            hi[i] += h;
            lo[i] -= h;
            let fd = (blend.value(&hi).unwrap() - blend.value(&lo).unwrap()) / (2.0 * h);
            let sym = blend.partial(i, &p).unwrap();
            assert!((sym - fd).abs() < 1e-6 * (1.0 + sym.abs()), "i={i}: {sym} vs {fd}");
        }
        for (i, j) in [(0, 0), (0, 1), (1, 1)] {
            let mut pp = p;
            let mut pm = p;
            let mut mp = p;
            let mut mm = p;
            pp[i] += h;
            pp[j] += h;
            pm[i] += h;
            pm[j] -= h;
            mp[i] -= h;
            mp[j] += h;
            mm[i] -= h;
            mm[j] -= h;
            let fd = (blend.value(&pp).unwrap() - blend.value(&pm).unwrap()
                - blend.value(&mp).unwrap()
                + blend.value(&mm).unwrap())
                / (4.0 * h * h);
            let sym = blend.second(i, j, &p).unwrap();
            assert!((sym - fd).abs() < 5e-4 * (1.0 + sym.abs()), "({i},{j}): {sym} vs {fd}");
        }
    }

    #[test]
    fn segment_length_flat_metric_is_euclidean() {
        let g = MetricField::identity(2);
        let len = g.segment_length(&[0.0, 0.0], &[3.0, 4.0]).unwrap();
        assert_relative_eq!(len, 5.0, epsilon = 1e-12);
    }

    #[test]
    fn segment_length_hyperbolic_vertical() {
        // (1/x2^2) I on the upper half plane: distance (0,1) -> (0,2) is ln 2.
        let g = MetricField::conformal_expr(2, "1/(x2*x2)");
        let mut acc = 0.0;
        let n = 64;
        for k in 0..n {
            let a = [0.0, 1.0 + k as f64 / n as f64];
            let b = [0.0, 1.0 + (k + 1) as f64 / n as f64];
            acc += g.segment_length(&a, &b).unwrap();
        }
        assert_relative_eq!(acc, std::f64::consts::LN_2, epsilon = 1e-9);
    }
}
