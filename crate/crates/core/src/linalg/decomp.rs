//! Factorizations: LU (inverse, solve, determinant), Householder QR, and
//! one-sided Jacobi SVD with the pseudoinverse built on top of it.

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

/// Sweep cap for the Jacobi SVD.
pub const SVD_MAX_SWEEPS: usize = 100;
/// A column pair is rotated while `|⟨a_p, a_q⟩| / (‖a_p‖‖a_q‖)` exceeds this.
pub const SVD_TOLERANCE: f64 = 1e-12;
/// Default relative cutoff for pseudoinverse singular values.
pub const DEFAULT_RCOND: f64 = 1e-10;

/// LU factorization with partial pivoting, `P·A = L·U`.
#[derive(Debug, Clone)]
pub struct Lu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
    sign: f64,
}

impl Lu {
    pub fn factor(a: &DenseMatrix) -> Result<Lu> {
        if !a.is_square() {
            return Err(Error::shape("lu", a.shape(), (a.cols(), a.cols())));
        }
        let n = a.rows();
        let mut lu = a.data().to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut sign = 1.0;
        let scale = a.infinity_norm();
        let tiny = scale * f64::EPSILON * n as f64;
        for k in 0..n {
            let (p, pivot) = (k..n)
                .map(|r| (r, lu[r * n + k].abs()))
                .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if pivot <= tiny || pivot == 0.0 {
                return Err(Error::Singular { block: None });
            }
            if p != k {
                for c in 0..n {
                    lu.swap(k * n + c, p * n + c);
                }
                perm.swap(k, p);
                sign = -sign;
            }
            let d = lu[k * n + k];
            for r in k + 1..n {
                let f = lu[r * n + k] / d;
                lu[r * n + k] = f;
                if f != 0.0 {
                    for c in k + 1..n {
                        lu[r * n + c] -= f * lu[k * n + c];
                    }
                }
            }
        }
        Ok(Lu { n, lu, perm, sign })
    }

    pub fn determinant(&self) -> f64 {
        (0..self.n).fold(self.sign, |acc, i| acc * self.lu[i * self.n + i])
    }

    /// Solves `A·X = B`.
    pub fn solve(&self, b: &DenseMatrix) -> Result<DenseMatrix> {
        let n = self.n;
        if b.rows() != n {
            return Err(Error::shape("lu solve", (n, n), b.shape()));
        }
        let m = b.cols();
        let mut x = vec![0.0; n * m];
        for (i, &p) in self.perm.iter().enumerate() {
            x[i * m..(i + 1) * m].copy_from_slice(b.row(p));
        }
        for i in 0..n {
            for k in 0..i {
                let f = self.lu[i * n + k];
                if f != 0.0 {
                    for c in 0..m {
                        x[i * m + c] -= f * x[k * m + c];
                    }
                }
            }
        }
        for i in (0..n).rev() {
            for k in i + 1..n {
                let f = self.lu[i * n + k];
                if f != 0.0 {
                    for c in 0..m {
                        x[i * m + c] -= f * x[k * m + c];
                    }
                }
            }
            let d = self.lu[i * n + i];
            for c in 0..m {
                x[i * m + c] /= d;
            }
        }
        let out = DenseMatrix::from_raw(n, m, x);
        if !out.is_finite() {
            return Err(Error::Singular { block: None });
        }
        Ok(out)
    }

    pub fn inverse(&self) -> Result<DenseMatrix> {
        self.solve(&DenseMatrix::identity(self.n))
    }
}

/// Inverse via LU; fails with [`Error::Singular`] for (numerically) singular input.
pub fn inverse(a: &DenseMatrix) -> Result<DenseMatrix> {
    Lu::factor(a)?.inverse()
}

pub fn determinant(a: &DenseMatrix) -> Result<f64> {
    match Lu::factor(a) {
        Ok(lu) => Ok(lu.determinant()),
        Err(Error::Singular { .. }) => Ok(0.0),
        Err(e) => Err(e),
    }
}

/// Householder QR of a square matrix. `R` has a non-negative diagonal.
pub fn qr(a: &DenseMatrix) -> Result<(DenseMatrix, DenseMatrix)> {
    if !a.is_square() {
        return Err(Error::shape("qr", a.shape(), (a.cols(), a.cols())));
    }
    let n = a.rows();
    let mut r = a.clone();
    let mut q = DenseMatrix::identity(n);
    let mut v = vec![0.0; n];
    for k in 0..n.saturating_sub(1) {
        let norm: f64 = (k..n).map(|i| r[(i, k)] * r[(i, k)]).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if r[(k, k)] > 0.0 { -norm } else { norm };
        for i in 0..n {
            v[i] = if i < k { 0.0 } else { r[(i, k)] };
        }
        v[k] -= alpha;
        let vnorm2: f64 = v[k..].iter().map(|x| x * x).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        // R ← (I − 2vvᵀ/vᵀv) R
        for c in 0..n {
            let dot: f64 = (k..n).map(|i| v[i] * r[(i, c)]).sum();
            let f = 2.0 * dot / vnorm2;
            for i in k..n {
                r[(i, c)] -= f * v[i];
            }
        }
        // Q ← Q (I − 2vvᵀ/vᵀv)
        for row in 0..n {
            let dot: f64 = (k..n).map(|i| q[(row, i)] * v[i]).sum();
            let f = 2.0 * dot / vnorm2;
            for i in k..n {
                q[(row, i)] -= f * v[i];
            }
        }
    }
    for k in 0..n {
        if r[(k, k)] < 0.0 {
            for c in 0..n {
                r[(k, c)] = -r[(k, c)];
            }
            for row in 0..n {
                q[(row, k)] = -q[(row, k)];
            }
        }
        for c in 0..k {
            r[(k, c)] = 0.0;
        }
    }
    Ok((q, r))
}

/// Thin singular value decomposition `A = U·diag(σ)·Vᵀ`.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: DenseMatrix,
    pub singular_values: Vec<f64>,
    pub v: DenseMatrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> DenseMatrix {
        let mut us = self.u.clone();
        for r in 0..us.rows() {
            for (x, s) in us.row_mut(r).iter_mut().zip(&self.singular_values) {
                *x *= s;
            }
        }
        us.mul_nt(&self.v)
    }

    pub fn max_singular_value(&self) -> f64 {
        self.singular_values.first().copied().unwrap_or(0.0)
    }

    pub fn min_singular_value(&self) -> f64 {
        self.singular_values.last().copied().unwrap_or(0.0)
    }
}

/// One-sided Jacobi SVD.
pub fn svd(a: &DenseMatrix) -> Result<SvdResult> {
    if !a.is_finite() {
        return Err(Error::NonFinite("svd input"));
    }
    if a.rows() < a.cols() {
        let t = svd_tall(&a.transpose())?;
        return Ok(SvdResult {
            u: t.v,
            singular_values: t.singular_values,
            v: t.u,
        });
    }
    svd_tall(a)
}

fn svd_tall(a: &DenseMatrix) -> Result<SvdResult> {
    let (m, n) = a.shape();
    // Columns of A and of V, each stored contiguously.
    let mut cols = a.transpose().into_data();
    let mut vcols = DenseMatrix::identity(n).into_data();
    let negligible = (a.frobenius() * 1e-15).powi(2);

    let mut converged = false;
    let mut residual = 0.0;
    let mut sweeps = 0;
    while sweeps < SVD_MAX_SWEEPS {
        sweeps += 1;
        residual = 0.0_f64;
        let mut rotated = false;
        for p in 0..n.saturating_sub(1) {
            for q in p + 1..n {
                let (cp, cq) = column_pair(&mut cols, m, p, q);
                let alpha: f64 = cp.iter().map(|x| x * x).sum();
                let beta: f64 = cq.iter().map(|x| x * x).sum();
                if alpha <= negligible || beta <= negligible {
                    continue;
                }
                let gamma: f64 = cp.iter().zip(cq.iter()).map(|(x, y)| x * y).sum();
                let ratio = gamma.abs() / (alpha * beta).sqrt();
                residual = residual.max(ratio);
                if ratio <= SVD_TOLERANCE {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(cp, cq, c, s);
                let (vp, vq) = column_pair(&mut vcols, n, p, q);
                rotate(vp, vq, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence {
            iterations: sweeps,
            residual,
        });
    }

    let mut order: Vec<(usize, f64)> = (0..n)
        .map(|j| {
            let norm2: f64 = cols[j * m..(j + 1) * m].iter().map(|x| x * x).sum();
            (j, if norm2 <= negligible { 0.0 } else { norm2.sqrt() })
        })
        .collect();
    order.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));

    let mut u = DenseMatrix::zeros(m, n);
    let mut v = DenseMatrix::zeros(n, n);
    let mut sigma = Vec::with_capacity(n);
    let mut missing = Vec::new();
    for (k, &(j, s)) in order.iter().enumerate() {
        sigma.push(s);
        for r in 0..n {
            v[(r, k)] = vcols[j * n + r];
        }
        if s > 0.0 {
            for r in 0..m {
                u[(r, k)] = cols[j * m + r] / s;
            }
        } else {
            missing.push(k);
        }
    }
    complete_orthonormal_columns(&mut u, &missing);
    Ok(SvdResult {
        u,
        singular_values: sigma,
        v,
    })
}

fn column_pair(buf: &mut [f64], len: usize, p: usize, q: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(p < q);
    let (head, tail) = buf.split_at_mut(q * len);
    (&mut head[p * len..(p + 1) * len], &mut tail[..len])
}

#[inline]
fn rotate(xp: &mut [f64], xq: &mut [f64], c: f64, s: f64) {
    for (a, b) in xp.iter_mut().zip(xq.iter_mut()) {
        let (x, y) = (*a, *b);
        *a = c * x - s * y;
        *b = s * x + c * y;
    }
}

/// Fills the listed (zero) columns of `u` with unit vectors orthogonal to
/// every other column, by Gram–Schmidt over the standard basis.
fn complete_orthonormal_columns(u: &mut DenseMatrix, missing: &[usize]) {
    let m = u.rows();
    let mut candidate = 0;
    for &k in missing {
        while candidate < m {
            let mut e = vec![0.0; m];
            e[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for j in 0..u.cols() {
                    if j == k {
                        continue;
                    }
                    let dot: f64 = (0..m).map(|r| u[(r, j)] * e[r]).sum();
                    for (r, x) in e.iter_mut().enumerate() {
                        *x -= dot * u[(r, j)];
                    }
                }
            }
            let norm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.5 {
                for (r, x) in e.iter().enumerate() {
                    u[(r, k)] = x / norm;
                }
                break;
            }
        }
    }
}

/// Moore–Penrose pseudoinverse. Singular values below `rcond · σ_max` are
/// treated as zero.
pub fn pinv(a: &DenseMatrix, rcond: f64) -> Result<DenseMatrix> {
    if !(rcond > 0.0 && rcond < 1.0) {
        return Err(Error::Config(format!("rcond must lie in (0, 1), got {rcond}")));
    }
    let s = svd(a)?;
    let cutoff = rcond * s.max_singular_value();
    let mut v = s.v.clone();
    for r in 0..v.rows() {
        for (x, &sigma) in v.row_mut(r).iter_mut().zip(&s.singular_values) {
            *x = if sigma > cutoff && sigma > 0.0 {
                *x / sigma
            } else {
                0.0
            };
        }
    }
    Ok(v.mul_nt(&s.u))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg_matrix(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        let mut s = seed.wrapping_add(0x1234_5678);
        DenseMatrix::from_fn(rows, cols, |_, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    fn check_svd(a: &DenseMatrix) -> SvdResult {
        let s = svd(a).unwrap();
        let rec = s.reconstruct().sub(a).unwrap().frobenius();
        assert!(rec <= 1e-8 * a.frobenius().max(1.0), "reconstruction {rec}");
        let r = s.singular_values.len();
        let ortho = |m: &DenseMatrix| {
            m.mul_tn(m)
                .sub(&DenseMatrix::identity(m.cols()))
                .unwrap()
                .frobenius()
        };
        assert!(ortho(&s.u) <= 1e-8 * (r as f64).sqrt());
        assert!(ortho(&s.v) <= 1e-8 * (r as f64).sqrt());
        assert!(s.singular_values.windows(2).all(|w| w[0] >= w[1]));
        assert!(s.singular_values.iter().all(|&x| x >= 0.0));
        s
    }

    #[test]
    fn svd_of_diagonal_and_identity() {
        let s = check_svd(&DenseMatrix::from_diag(&[3.0, 1.0]));
        assert_eq!(s.singular_values, vec![3.0, 1.0]);
        let s = check_svd(&DenseMatrix::identity(4));
        assert!(s.singular_values.iter().all(|&x| (x - 1.0).abs() < 1e-15));
    }

    #[test]
    fn svd_wide_tall_and_rank_deficient() {
        check_svd(&lcg_matrix(6, 4, 1));
        check_svd(&lcg_matrix(3, 7, 2));
        let a = lcg_matrix(5, 2, 3);
        let b = lcg_matrix(2, 6, 4);
        let s = check_svd(&a.mul(&b));
        assert!(s.singular_values[2] < 1e-12);
        check_svd(&DenseMatrix::zeros(3, 3));
    }

    #[test]
    fn pinv_examples() {
        let i2 = DenseMatrix::identity(2);
        assert!(pinv(&i2, DEFAULT_RCOND).unwrap().max_abs_diff(&i2) < 1e-15);
        let p = DenseMatrix::from_diag(&[1.0, 0.0]);
        assert!(pinv(&p, DEFAULT_RCOND).unwrap().max_abs_diff(&p) < 1e-15);
        let d = DenseMatrix::from_diag(&[2.0, 0.5]);
        let expected = DenseMatrix::from_diag(&[0.5, 2.0]);
        assert!(pinv(&d, DEFAULT_RCOND).unwrap().max_abs_diff(&expected) < 1e-14);
    }

    #[test]
    fn pinv_penrose_conditions() {
        for (seed, (r, c)) in [(5, (6, 4)), (6, (4, 6)), (7, (5, 5))] {
            let a = lcg_matrix(r, c, seed);
            let p = pinv(&a, DEFAULT_RCOND).unwrap();
            let apa = a.mul(&p).mul(&a);
            let pap = p.mul(&a).mul(&p);
            assert!(apa.sub(&a).unwrap().frobenius() <= 1e-7 * a.frobenius().max(1.0));
            assert!(pap.sub(&p).unwrap().frobenius() <= 1e-7 * p.frobenius().max(1.0));
        }
    }

    #[test]
    fn pinv_rejects_bad_rcond() {
        assert!(pinv(&DenseMatrix::identity(2), 0.0).is_err());
        assert!(pinv(&DenseMatrix::identity(2), 1.0).is_err());
    }

    #[test]
    fn pinv_twice_is_identity_on_full_rank() {
        let a = lcg_matrix(5, 5, 42);
        let back = pinv(&pinv(&a, DEFAULT_RCOND).unwrap(), DEFAULT_RCOND).unwrap();
        assert!(back.sub(&a).unwrap().frobenius() <= 1e-7 * a.frobenius());
    }

    #[test]
    fn lu_inverse_and_determinant() {
        let a = lcg_matrix(6, 6, 9);
        let inv = inverse(&a).unwrap();
        let err = a.mul(&inv).sub(&DenseMatrix::identity(6)).unwrap().frobenius();
        assert!(err < 1e-10);
        let d = DenseMatrix::from_rows(&[[2.0, 1.0], [1.0, 3.0]]).unwrap();
        assert!((determinant(&d).unwrap() - 5.0).abs() < 1e-14);
        let singular = DenseMatrix::from_rows(&[[1.0, 2.0], [2.0, 4.0]]).unwrap();
        assert!(matches!(inverse(&singular), Err(Error::Singular { .. })));
        assert_eq!(determinant(&singular).unwrap(), 0.0);
    }

    #[test]
    fn qr_factors_reconstruct() {
        let a = lcg_matrix(7, 7, 77);
        let (q, r) = qr(&a).unwrap();
        assert!(q.orthogonality_error() < 1e-12);
        assert!(q.mul(&r).max_abs_diff(&a) < 1e-12);
        for k in 0..7 {
            assert!(r[(k, k)] >= 0.0);
            for c in 0..k {
                assert_eq!(r[(k, c)], 0.0);
            }
        }
    }
}
