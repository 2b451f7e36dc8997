//! Dense helpers for the small (m = 2 or 3) symmetric matrices that metric
//! coefficients produce. Matrices are row-major `Vec<f64>` of length m*m.

/// Smallest eigenvalue of a symmetric matrix via cyclic Jacobi sweeps.
pub fn min_eigenvalue_sym(a: &[f64], m: usize) -> f64 {
    debug_assert_eq!(a.len(), m * m);
    if m == 1 {
        return a[0];
    }
    if m == 2 {
        // Closed form for the 2x2 case, which dominates usage.
        let tr = a[0] + a[3];
        let det = a[0] * a[3] - a[1] * a[2];
        let disc = (tr * tr - 4.0 * det).max(0.0).sqrt();
        return 0.5 * (tr - disc);
    }
    let mut w = a.to_vec();
    for _ in 0..64 {
        let mut off = 0.0;
        for i in 0..m {
            for j in (i + 1)..m {
                off += w[i * m + j].abs();
            }
        }
        if off < 1e-14 {
            break;
        }
        for p in 0..m {
            for q in (p + 1)..m {
                let apq = w[p * m + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = w[p * m + p];
                let aqq = w[q * m + q];
                let theta = if (app - aqq).abs() < 1e-300 {
                    std::f64::consts::FRAC_PI_4
                } else {
                    0.5 * (2.0 * apq / (app - aqq)).atan()
                };
                let (s, c) = theta.sin_cos();
                for k in 0..m {
                    let wkp = w[k * m + p];
                    let wkq = w[k * m + q];
                    w[k * m + p] = c * wkp + s * wkq;
                    w[k * m + q] = -s * wkp + c * wkq;
                }
                for k in 0..m {
                    let wpk = w[p * m + k];
                    let wqk = w[q * m + k];
                    w[p * m + k] = c * wpk + s * wqk;
                    w[q * m + k] = -s * wpk + c * wqk;
                }
            }
        }
    }
    (0..m).map(|i| w[i * m + i]).fold(f64::INFINITY, f64::min)
}

/// Inverse via Gauss-Jordan with partial pivoting. Returns `None` when the
/// matrix is numerically singular.
pub fn invert(a: &[f64], m: usize) -> Option<Vec<f64>> {
    debug_assert_eq!(a.len(), m * m);
    let mut w = a.to_vec();
    let mut inv = vec![0.0; m * m];
    for i in 0..m {
        inv[i * m + i] = 1.0;
    }
    for col in 0..m {
        let mut pivot = col;
        for r in (col + 1)..m {
            if w[r * m + col].abs() > w[pivot * m + col].abs() {
                pivot = r;
            }
        }
        if w[pivot * m + col].abs() < 1e-300 {
            return None;
        }
        if pivot != col {
            for k in 0..m {
                w.swap(col * m + k, pivot * m + k);
                inv.swap(col * m + k, pivot * m + k);
            }
        }
        let d = w[col * m + col];
        for k in 0..m {
            w[col * m + k] /= d;
            inv[col * m + k] /= d;
        }
        for r in 0..m {
            if r == col {
                continue;
            }
            let f = w[r * m + col];
            if f == 0.0 {
                continue;
            }
            for k in 0..m {
                w[r * m + k] -= f * w[col * m + k];
                inv[r * m + k] -= f * inv[col * m + k];
            }
        }
    }
    Some(inv)
}

/// Determinant for m <= 3.
pub fn det(a: &[f64], m: usize) -> f64 {
    match m {
        1 => a[0],
        2 => a[0] * a[3] - a[1] * a[2],
        3 => {
            a[0] * (a[4] * a[8] - a[5] * a[7]) - a[1] * (a[3] * a[8] - a[5] * a[6])
                + a[2] * (a[3] * a[7] - a[4] * a[6])
        }
        _ => panic!("det only implemented for m <= 3"),
    }
}

/// Quadratic form v^T A v.
pub fn quad_form(a: &[f64], v: &[f64]) -> f64 {
    let m = v.len();
    let mut acc = 0.0;
    for i in 0..m {
        for j in 0..m {
            acc += v[i] * a[i * m + j] * v[j];
        }
    }
    acc
}

/// Matrix-vector product.
pub fn mat_vec(a: &[f64], v: &[f64]) -> Vec<f64> {
    let m = v.len();
    (0..m).map(|i| (0..m).map(|j| a[i * m + j] * v[j]).sum()).collect()
}

/// Natural cubic spline with clamped (zero-slope) end conditions through
/// `(xs[i], ys[i])`; evaluates at `x` with constant extrapolation outside.
#[derive(Debug, Clone)]
pub struct ClampedSpline {
    xs: Vec<f64>,
    ys: Vec<f64>,
    m2: Vec<f64>, // second derivatives at knots
}

impl ClampedSpline {
    pub fn fit(xs: Vec<f64>, ys: Vec<f64>) -> ClampedSpline {
        let n = xs.len();
        assert!(n >= 2 && ys.len() == n);
        // Solve tridiagonal system for second derivatives with clamped ends
        // (first derivative zero at both ends).
        let mut a = vec![0.0; n];
        let mut b = vec![0.0; n];
        let mut c = vec![0.0; n];
        let mut d = vec![0.0; n];
        let h: Vec<f64> = xs.windows(2).map(|w| w[1] - w[0]).collect();
        b[0] = 2.0 * h[0];
        c[0] = h[0];
        d[0] = 6.0 * ((ys[1] - ys[0]) / h[0]);
        for i in 1..n - 1 {
            a[i] = h[i - 1];
            b[i] = 2.0 * (h[i - 1] + h[i]);
            c[i] = h[i];
            d[i] = 6.0 * ((ys[i + 1] - ys[i]) / h[i] - (ys[i] - ys[i - 1]) / h[i - 1]);
        }
        a[n - 1] = h[n - 2];
        b[n - 1] = 2.0 * h[n - 2];
        d[n - 1] = -6.0 * ((ys[n - 1] - ys[n - 2]) / h[n - 2]);
        // Thomas algorithm.
        for i in 1..n {
            let w = a[i] / b[i - 1];
            b[i] -= w * c[i - 1];
            d[i] -= w * d[i - 1];
        }
        let mut m2 = vec![0.0; n];
        m2[n - 1] = d[n - 1] / b[n - 1];
        for i in (0..n - 1).rev() {
            m2[i] = (d[i] - c[i] * m2[i + 1]) / b[i];
        }
        ClampedSpline { xs, ys, m2 }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let n = self.xs.len();
        if x <= self.xs[0] {
            return self.ys[0];
        }
        if x >= self.xs[n - 1] {
            return self.ys[n - 1];
        }
        let mut i = match self.xs.binary_search_by(|v| v.partial_cmp(&x).unwrap()) {
            Ok(i) => i,
            Err(i) => i - 1,
        };
        i = i.min(n - 2);
        let h = self.xs[i + 1] - self.xs[i];
        let t = x - self.xs[i];
        let u = self.xs[i + 1] - x;
        (self.m2[i] * u * u * u + self.m2[i + 1] * t * t * t) / (6.0 * h)
            + (self.ys[i] / h - self.m2[i] * h / 6.0) * u
            + (self.ys[i + 1] / h - self.m2[i + 1] * h / 6.0) * t
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn identity_min_eigenvalue() {
        let id = vec![1.0, 0.0, 0.0, 1.0];
        assert_eq!(min_eigenvalue_sym(&id, 2), 1.0);
    }

    #[test]
    fn eigenvalues_of_known_matrix() {
        // [[2, 1], [1, 2]] has eigenvalues 1 and 3.
        let a = vec![2.0, 1.0, 1.0, 2.0];
        assert_relative_eq!(min_eigenvalue_sym(&a, 2), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn jacobi_3x3() {
        // diag(5, 2, 9) conjugated stays spectrum {2,5,9}.
        let a = vec![5.0, 0.5, 0.0, 0.5, 2.0, 0.1, 0.0, 0.1, 9.0];
        let lam = min_eigenvalue_sym(&a, 3);
        assert!(lam > 1.8 && lam < 2.0, "lam = {lam}");
    }

    #[test]
    fn invert_round_trip() {
        let a = vec![2.0, 1.0, 1.0, 3.0];
        let inv = invert(&a, 2).unwrap();
        let prod_00 = a[0] * inv[0] + a[1] * inv[2];
        let prod_01 = a[0] * inv[1] + a[1] * inv[3];
        assert_relative_eq!(prod_00, 1.0, epsilon = 1e-12);
        assert_relative_eq!(prod_01, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn singular_matrix_returns_none() {
        let a = vec![1.0, 2.0, 2.0, 4.0];
        assert!(invert(&a, 2).is_none());
    }

    #[test]
    fn spline_interpolates_and_clamps() {
        let xs = vec![0.0, 1.0, 2.0, 3.0];
        let ys = vec![1.0, 2.0, 2.0, 1.0];
        let s = ClampedSpline::fit(xs, ys);
        assert_relative_eq!(s.eval(1.0), 2.0, epsilon = 1e-12);
        assert_relative_eq!(s.eval(-5.0), 1.0, epsilon = 1e-12);
        assert_relative_eq!(s.eval(9.0), 1.0, epsilon = 1e-12);
        assert!(s.eval(1.5) > 1.9);
    }
}
