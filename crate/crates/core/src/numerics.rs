//! Small dense linear algebra and finite differences.
//!
//! Everything here is sized for the handful of coordinates the solvers work
//! with: vectors are plain `&[f64]` slices and [`Matrix`] is a square,
//! row-major buffer. There is no attempt at blocking or sparsity.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative step used by [`default_grad_step`].
pub const GRAD_STEP: f64 = 1e-6;
/// Relative step used by [`default_hess_step`].
pub const HESS_STEP: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SpdError {
    #[error("matrix is asymmetric (max |M_ij - M_ji| = {max_asymmetry:e})")]
    Asymmetric { max_asymmetry: f64 },
    #[error("matrix is not positive definite (pivot {index} = {pivot:e})")]
    NotPositiveDefinite { index: usize, pivot: f64 },
    #[error("matrix has non-finite entries")]
    NonFinite,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FiniteDiffError {
    #[error("objective is not finite at probe point {point:?}")]
    NonFiniteProbe { point: Vec<f64> },
    #[error("finite-difference step must be positive, got {0}")]
    BadStep(f64),
}

/// Square dense matrix stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct Matrix {
    n: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::scaled_identity(n, 1.0)
    }

    pub fn scaled_identity(n: usize, s: f64) -> Self {
        Self::diagonal(&vec![s; n])
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * n + i] = d;
        }
        m
    }

    /// Builds a matrix from rows. Returns `None` unless the rows form a square.
    pub fn from_rows(rows: &[Vec<f64>]) -> Option<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return None;
        }
        Some(Self {
            n,
            data: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.n.max(1)).map(|r| r.to_vec()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `out = self * v`
    pub fn mul_vec_into(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.n);
        for (i, o) in out.iter_mut().enumerate().take(self.n) {
            let row = &self.data[i * self.n..(i + 1) * self.n];
            *o = row.iter().zip(v).map(|(a, b)| a * b).sum();
        }
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        self.mul_vec_into(v, &mut out);
        out
    }

    /// `v^T M v`
    pub fn quad_form(&self, v: &[f64]) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.n {
            for j in 0..self.n {
                acc += v[i] * self.data[i * self.n + j] * v[j];
            }
        }
        acc
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut worst = 0.0_f64;
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }

    /// `(M + M^T) / 2`; the result is exactly symmetric.
    pub fn symmetrized(&self) -> Self {
        let mut out = self.clone();
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                let avg = 0.5 * (self.get(i, j) + self.get(j, i));
                out.set(i, j, avg);
                out.set(j, i, avg);
            }
        }
        out
    }

    /// Principal submatrix over the selected indices.
    pub fn submatrix(&self, idx: &[usize]) -> Self {
        let k = idx.len();
        let mut out = Self::zeros(k);
        for (a, &i) in idx.iter().enumerate() {
            for (b, &j) in idx.iter().enumerate() {
                out.set(a, b, self.get(i, j));
            }
        }
        out
    }

    /// Solves `M x = b` by Gaussian elimination with partial pivoting.
    ///
    /// Returns `None` when some pivot magnitude falls below `pivot_tol`.
    pub fn lu_solve(&self, b: &[f64], pivot_tol: f64) -> Option<Vec<f64>> {
        let n = self.n;
        let mut a = self.data.clone();
        let mut x = b.to_vec();
        for col in 0..n {
            let (p, pmax) = (col..n)
                .map(|r| (r, a[r * n + col].abs()))
                .fold((col, -1.0), |best, c| if c.1 > best.1 { c } else { best });
            if !(pmax >= pivot_tol) || pmax == 0.0 {
                return None;
            }
            if p != col {
                for j in 0..n {
                    a.swap(col * n + j, p * n + j);
                }
                x.swap(col, p);
            }
            let d = a[col * n + col];
            for r in (col + 1)..n {
                let factor = a[r * n + col] / d;
                if factor != 0.0 {
                    for j in col..n {
                        a[r * n + j] -= factor * a[col * n + j];
                    }
                    x[r] -= factor * x[col];
                }
            }
        }
        for col in (0..n).rev() {
            let mut s = x[col];
            for j in (col + 1)..n {
                s -= a[col * n + j] * x[j];
            }
            x[col] = s / a[col * n + col];
        }
        Some(x)
    }
}

impl TryFrom<Vec<Vec<f64>>> for Matrix {
    type Error = String;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self, Self::Error> {
        Matrix::from_rows(&rows).ok_or_else(|| "matrix rows must form a square".to_string())
    }
}

impl From<Matrix> for Vec<Vec<f64>> {
    fn from(m: Matrix) -> Self {
        m.rows()
    }
}

/// Cholesky factor `M = L L^T` of a symmetric positive definite matrix.
#[derive(Debug, Clone)]
pub struct Cholesky {
    n: usize,
    lower: Vec<f64>,
}

impl Cholesky {
    /// Factors the lower triangle of `m`. The upper triangle is ignored.
    pub fn factor(m: &Matrix) -> Result<Self, SpdError> {
        if !m.is_finite() {
            return Err(SpdError::NonFinite);
        }
        let n = m.dim();
        let mut l = vec![0.0; n * n];
        for j in 0..n {
            let mut d = m.get(j, j);
            for k in 0..j {
                d -= l[j * n + k] * l[j * n + k];
            }
            if !(d > 0.0) {
                return Err(SpdError::NotPositiveDefinite { index: j, pivot: d });
            }
            let djj = d.sqrt();
            l[j * n + j] = djj;
            for i in (j + 1)..n {
                let mut s = m.get(i, j);
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                l[i * n + j] = s / djj;
            }
        }
        Ok(Self { n, lower: l })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Solves `M x = b` in place.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.n;
        let l = &self.lower;
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= l[i * n + k] * b[k];
            }
            b[i] = s / l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in (i + 1)..n {
                s -= l[k * n + i] * b[k];
            }
            b[i] = s / l[i * n + i];
        }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }

    /// Spectral norm of `M^{-1}`, i.e. `1 / lambda_min(M)`, by inverse power
    /// iteration.
    pub fn inverse_norm(&self) -> f64 {
        let n = self.n;
        if n == 0 {
            return 0.0;
        }
        let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 0.1 * i as f64).collect();
        let mut est = 0.0;
        for _ in 0..500 {
            let norm = norm2(&v);
            v.iter_mut().for_each(|c| *c /= norm);
            let mut w = v.clone();
            self.solve_in_place(&mut w);
            let next = norm2(&w);
            let done = (next - est).abs() <= 1e-14 * next;
            est = next;
            v = w;
            if done {
                break;
            }
        }
        est
    }
}

/// Checks that `m` is symmetric within `sym_tol` and that the Cholesky
/// factorization of its symmetric part has strictly positive pivots.
pub fn spd_check(m: &Matrix, sym_tol: f64) -> Result<(), SpdError> {
    if !m.is_finite() {
        return Err(SpdError::NonFinite);
    }
    let max_asymmetry = m.max_asymmetry();
    if max_asymmetry > sym_tol {
        return Err(SpdError::Asymmetric { max_asymmetry });
    }
    Cholesky::factor(&m.symmetrized()).map(|_| ())
}

pub fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|c| c * c).sum::<f64>().sqrt()
}

pub fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, c| m.max(c.abs()))
}

pub fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub fn default_grad_step(x: &[f64]) -> f64 {
    GRAD_STEP * norm_inf(x).max(1.0)
}

/// Second differences lose `eps / h^2` to rounding, so the Hessian stencil
/// uses a larger step than the gradient.
pub fn default_hess_step(x: &[f64]) -> f64 {
    HESS_STEP * norm_inf(x).max(1.0)
}

fn probe<F: Fn(&[f64]) -> f64>(f: &F, p: &[f64]) -> Result<f64, FiniteDiffError> {
    let v = f(p);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(FiniteDiffError::NonFiniteProbe { point: p.to_vec() })
    }
}

/// Central-difference gradient, written into `out`.
///
/// The divisor is the representable width `(x + h) - (x - h)` rather than
/// `2h`, so quadratics are differentiated exactly up to rounding of `f`.
pub fn central_diff_grad_into<F>(
    f: F,
    x: &[f64],
    h: f64,
    out: &mut [f64],
) -> Result<(), FiniteDiffError>
where
    F: Fn(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(FiniteDiffError::BadStep(h));
    }
    let mut p = x.to_vec();
    for i in 0..x.len() {
        let xi = x[i];
        let hi = xi + h;
        let lo = xi - h;
        p[i] = hi;
        let fp = probe(&f, &p)?;
        p[i] = lo;
        let fm = probe(&f, &p)?;
        p[i] = xi;
        out[i] = (fp - fm) / (hi - lo);
    }
    Ok(())
}

pub fn central_diff_grad<F>(f: F, x: &[f64], h: f64) -> Result<Vec<f64>, FiniteDiffError>
where
    F: Fn(&[f64]) -> f64,
{
    let mut out = vec![0.0; x.len()];
    central_diff_grad_into(f, x, h, &mut out)?;
    Ok(out)
}

/// Second-order central Hessian stencil, symmetrized.
pub fn central_diff_hess<F>(f: F, x: &[f64], h: f64) -> Result<Matrix, FiniteDiffError>
where
    F: Fn(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(FiniteDiffError::BadStep(h));
    }
    let n = x.len();
    let mut hess = Matrix::zeros(n);
    let mut p = x.to_vec();
    let f0 = probe(&f, &p)?;
    for i in 0..n {
        p[i] = x[i] + h;
        let fp = probe(&f, &p)?;
        p[i] = x[i] - h;
        let fm = probe(&f, &p)?;
        p[i] = x[i];
        hess.set(i, i, (fp - 2.0 * f0 + fm) / (h * h));
        for j in (i + 1)..n {
            let mut corner = |si: f64, sj: f64| {
                p[i] = x[i] + si * h;
                p[j] = x[j] + sj * h;
                let v = probe(&f, &p);
                p[i] = x[i];
                p[j] = x[j];
                v
            };
            let fpp = corner(1.0, 1.0)?;
            let fpm = corner(1.0, -1.0)?;
            let fmp = corner(-1.0, 1.0)?;
            let fmm = corner(-1.0, -1.0)?;
            let v = (fpp - fpm - fmp + fmm) / (4.0 * h * h);
            hess.set(i, j, v);
            hess.set(j, i, v);
        }
    }
    Ok(hess.symmetrized())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_is_spd() {
        assert!(spd_check(&Matrix::identity(2), 1e-12).is_ok());
    }

    #[test]
    fn negative_eigenvalue_rejected() {
        let m = Matrix::diagonal(&[1.0, -1.0]);
        assert!(matches!(
            spd_check(&m, 1e-12),
            Err(SpdError::NotPositiveDefinite { index: 1, .. })
        ));
    }

    #[test]
    fn coupled_two_by_two_is_spd() {
        let m = Matrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        // scan det(M - tI) for sign changes to locate the eigenvalues
        let det = |t: f64| (m.get(0, 0) - t) * (m.get(1, 1) - t) - m.get(0, 1) * m.get(1, 0);
        let mut roots = Vec::new();
        let mut prev = det(-10.0);
        for i in 1..=40_000 {
            let t = -10.0 + i as f64 * 5e-4;
            let cur = det(t);
            if prev == 0.0 || prev.signum() != cur.signum() {
                roots.push(t);
            }
            prev = cur;
        }
        roots.dedup_by(|a, b| (*a - *b).abs() < 1e-2);
        assert_eq!(roots.len(), 2);
        assert!((roots[0] - 1.0).abs() < 1e-3 && (roots[1] - 3.0).abs() < 1e-3);
        assert!(spd_check(&m, 1e-12).is_ok());
    }

    #[test]
    fn asymmetry_reported_separately() {
        let m = Matrix::from_rows(&[vec![2.0, 1.0], vec![0.0, 2.0]]).unwrap();
        assert!(matches!(
            spd_check(&m, 1e-12),
            Err(SpdError::Asymmetric { .. })
        ));
        // within tolerance the symmetric part is used
        assert!(spd_check(&m, 2.0).is_ok());
    }

    #[test]
    fn cholesky_solve_and_inverse_norm() {
        let m = Matrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let c = Cholesky::factor(&m).unwrap();
        let x = c.solve(&[3.0, 3.0]);
        assert!((x[0] - 1.0).abs() < 1e-15 && (x[1] - 1.0).abs() < 1e-15);
        assert!((c.inverse_norm() - 1.0).abs() < 1e-12);
        let d = Cholesky::factor(&Matrix::diagonal(&[100.0, 1e-5])).unwrap();
        assert!((d.inverse_norm() - 1e5).abs() < 1e-6);
    }

    #[test]
    fn lu_solve_handles_indefinite_and_singular() {
        let m = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(m.lu_solve(&[2.0, 3.0], 1e-12), Some(vec![3.0, 2.0]));
        assert_eq!(Matrix::zeros(1).lu_solve(&[1.0], 1e-12), None);
        assert_eq!(Matrix::diagonal(&[1e-14]).lu_solve(&[1.0], 1e-12), None);
    }

    #[test]
    fn grad_of_half_square() {
        let g = central_diff_grad(|x| 0.5 * x[0] * x[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 3.0).abs() <= 1e-8);
    }

    #[test]
    fn grad_of_constant_is_zero() {
        let g = central_diff_grad(|_| 7.25, &[1.0, -4.0, 1e3], 1e-6).unwrap();
        assert_eq!(g, vec![0.0; 3]);
    }

    #[test]
    fn grad_of_quartic_matches_analytic() {
        let f = |x: &[f64]| x[0].powi(4) + x[0].sin();
        let analytic = 4.0 * 1000.0 + 10f64.cos();
        let g = central_diff_grad(f, &[10.0], 1e-5).unwrap();
        assert!((g[0] - analytic).abs() / analytic < 1e-9, "{}", g[0]);
    }

    #[test]
    fn nonfinite_probe_is_reported() {
        let f = |x: &[f64]| if x[0] > 1.0 { f64::INFINITY } else { x[0] };
        let err = central_diff_grad(f, &[1.0], 1e-3).unwrap_err();
        assert_eq!(
            err,
            FiniteDiffError::NonFiniteProbe {
                point: vec![1.0 + 1e-3]
            }
        );
        assert!(matches!(
            central_diff_grad(|x| x[0], &[0.0], 0.0),
            Err(FiniteDiffError::BadStep(_))
        ));
    }

    #[test]
    fn hessian_stencils() {
        let h = central_diff_hess(|x| 0.5 * x[0] * x[0], &[-2.5], 1e-4).unwrap();
        assert!((h.get(0, 0) - 1.0).abs() < 1e-6);

        let h = central_diff_hess(|x| x[0] * x[1], &[0.0, 0.0], 1e-4).unwrap();
        assert!(h.get(0, 0).abs() < 1e-6 && h.get(1, 1).abs() < 1e-6);
        assert!((h.get(0, 1) - 1.0).abs() < 1e-6);
        assert_eq!(h.get(0, 1), h.get(1, 0));

        let f4 = |x: &[f64]| {
            let v = x[0];
            7.0 * v.powi(3) + v.powi(4) + (v * v).exp() + (-v * v).exp()
        };
        let h = central_diff_hess(f4, &[0.0], default_hess_step(&[0.0])).unwrap();
        assert!(h.get(0, 0).abs() <= 1e-4, "{}", h.get(0, 0));
    }

    #[test]
    fn matrix_serde_as_rows() {
        let m = Matrix::from_rows(&[vec![100.0, 0.0], vec![0.0, 1e-5]]).unwrap();
        let s = serde_json::to_string(&m).unwrap();
        assert_eq!(s, "[[100.0,0.0],[0.0,0.00001]]");
        let back: Matrix = serde_json::from_str(&s).unwrap();
        assert_eq!(back, m);
        assert!(serde_json::from_str::<Matrix>("[[1.0,2.0]]").is_err());
    }
}
