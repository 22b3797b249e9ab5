//! Dense complex matrix routines on detached data.
//!
//! Matrices are interleaved (re, im) slices in row-major order, the same
//! layout as complex [`Tensor`](super::Tensor) storage. Sizes in this
//! pipeline are tiny (at most the antenna count), so the solvers favour
//! clarity and determinism over speed: unblocked Cholesky and cyclic Jacobi.

use crate::error::{Error, Result};

#[inline]
fn c(m: &[f64], n: usize, i: usize, j: usize) -> (f64, f64) {
    let p = 2 * (i * n + j);
    (m[p], m[p + 1])
}

#[inline]
fn set(m: &mut [f64], n: usize, i: usize, j: usize, v: (f64, f64)) {
    let p = 2 * (i * n + j);
    m[p] = v.0;
    m[p + 1] = v.1;
}

#[inline]
pub fn cadd(a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    (a.0 + b.0, a.1 + b.1)
}

#[inline]
pub fn csub(a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    (a.0 - b.0, a.1 - b.1)
}

#[inline]
pub fn cmul(a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    (a.0 * b.0 - a.1 * b.1, a.0 * b.1 + a.1 * b.0)
}

#[inline]
pub fn cconj(a: (f64, f64)) -> (f64, f64) {
    (a.0, -a.1)
}

#[inline]
pub fn cabs2(a: (f64, f64)) -> f64 {
    a.0 * a.0 + a.1 * a.1
}

#[inline]
pub fn cdiv(a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    let d = cabs2(b);
    ((a.0 * b.0 + a.1 * b.1) / d, (a.1 * b.0 - a.0 * b.1) / d)
}

/// C += op(A)·op(B) for complex interleaved row-major matrices, where each
/// operand is either taken as-is or conjugate-transposed.
pub fn cmm_acc(
    out: &mut [f64],
    a: &[f64],
    a_herm: bool,
    b: &[f64],
    b_herm: bool,
    m: usize,
    k: usize,
    n: usize,
) {
    // op(A) is m×k, op(B) is k×n. Raw A is k×m when conjugate-transposed.
    for i in 0..m {
        for p in 0..k {
            let av = if a_herm {
                cconj(c(a, m, p, i))
            } else {
                c(a, k, i, p)
            };
            if av.0 == 0.0 && av.1 == 0.0 {
                continue;
            }
            for j in 0..n {
                let bv = if b_herm {
                    cconj(c(b, k, j, p))
                } else {
                    c(b, n, p, j)
                };
                let idx = 2 * (i * n + j);
                out[idx] += av.0 * bv.0 - av.1 * bv.1;
                out[idx + 1] += av.0 * bv.1 + av.1 * bv.0;
            }
        }
    }
}

/// Lower Cholesky factor of a Hermitian positive definite matrix.
/// Fails naming the diagonal entry when positivity is lost.
pub fn cholesky(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; 2 * n * n];
    for i in 0..n {
        for j in 0..=i {
            // sum = A[i,j] - sum_p L[i,p] * conj(L[j,p])
            let mut s = c(a, n, i, j);
            for p in 0..j {
                s = csub(s, cmul(c(&l, n, i, p), cconj(c(&l, n, j, p))));
            }
            if i == j {
                let d = s.0;
                if d <= 0.0 || !d.is_finite() {
                    return Err(Error::numeric(
                        "cholesky",
                        format!("non-positive pivot {d:.3e} at diagonal entry {i}"),
                    ));
                }
                set(&mut l, n, i, i, (d.sqrt(), 0.0));
            } else {
                let piv = c(&l, n, j, j);
                set(&mut l, n, i, j, cdiv(s, piv));
            }
        }
    }
    Ok(l)
}

/// A^{-1} from its lower Cholesky factor: invert L by forward substitution,
/// then A^{-1} = L^{-H} L^{-1}.
pub fn inverse_from_cholesky(l: &[f64], n: usize) -> Vec<f64> {
    let mut linv = vec![0.0; 2 * n * n];
    for j in 0..n {
        set(&mut linv, n, j, j, cdiv((1.0, 0.0), c(l, n, j, j)));
        for i in j + 1..n {
            let mut s = (0.0, 0.0);
            for p in j..i {
                s = cadd(s, cmul(c(l, n, i, p), c(&linv, n, p, j)));
            }
            let v = cdiv((-s.0, -s.1), c(l, n, i, i));
            set(&mut linv, n, i, j, v);
        }
    }
    let mut inv = vec![0.0; 2 * n * n];
    cmm_acc(&mut inv, &linv, true, &linv, false, n, n, n);
    inv
}

/// Eigendecomposition of a Hermitian matrix by cyclic Jacobi rotations.
/// Returns eigenvalues in descending order and the matching eigenvectors as
/// columns of a complex n×n matrix.
pub fn hermitian_eig(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut m = a.to_vec();
    let mut v = vec![0.0; 2 * n * n];
    for i in 0..n {
        set(&mut v, n, i, i, (1.0, 0.0));
    }
    let scale: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
    let tol = 1e-14 * scale;
    for _sweep in 0..60 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in p + 1..n {
                off = off.max(cabs2(c(&m, n, p, q)).sqrt());
            }
        }
        if off < tol {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = c(&m, n, p, q);
                let abs_apq = cabs2(apq).sqrt();
                if abs_apq < tol * 1e-2 {
                    continue;
                }
                let app = c(&m, n, p, p).0;
                let aqq = c(&m, n, q, q).0;
                let u = (apq.0 / abs_apq, apq.1 / abs_apq);
                let tau = (aqq - app) / (2.0 * abs_apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let cc = 1.0 / (1.0 + t * t).sqrt();
                let ss = t * cc;
                // Right-multiply columns p,q of M and V by J, then
                // left-multiply rows p,q of M by J^H.
                let su = (ss * u.0, ss * u.1);
                let suc = cconj(su);
                for i in 0..n {
                    let mip = c(&m, n, i, p);
                    let miq = c(&m, n, i, q);
                    set(&mut m, n, i, p, csub((cc * mip.0, cc * mip.1), cmul(suc, miq)));
                    set(&mut m, n, i, q, cadd(cmul(su, mip), (cc * miq.0, cc * miq.1)));
                    let vip = c(&v, n, i, p);
                    let viq = c(&v, n, i, q);
                    set(&mut v, n, i, p, csub((cc * vip.0, cc * vip.1), cmul(suc, viq)));
                    set(&mut v, n, i, q, cadd(cmul(su, vip), (cc * viq.0, cc * viq.1)));
                }
                for j in 0..n {
                    let mpj = c(&m, n, p, j);
                    let mqj = c(&m, n, q, j);
                    set(&mut m, n, p, j, csub((cc * mpj.0, cc * mpj.1), cmul(su, mqj)));
                    set(&mut m, n, q, j, cadd(cmul(suc, mpj), (cc * mqj.0, cc * mqj.1)));
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    let evals: Vec<f64> = (0..n).map(|i| c(&m, n, i, i).0).collect();
    order.sort_by(|&i, &j| evals[j].partial_cmp(&evals[i]).unwrap());
    let sorted_vals: Vec<f64> = order.iter().map(|&i| evals[i]).collect();
    let mut sorted_vecs = vec![0.0; 2 * n * n];
    for (new_j, &old_j) in order.iter().enumerate() {
        for i in 0..n {
            set(&mut sorted_vecs, n, i, new_j, c(&v, n, i, old_j));
        }
    }
    (sorted_vals, sorted_vecs)
}

/// Squared singular values of a complex m×n matrix, descending: eigenvalues
/// of the smaller Gram matrix, clamped at zero.
pub fn singular_values_sq(h: &[f64], m: usize, n: usize) -> Vec<f64> {
    let d = m.min(n);
    let mut gram = vec![0.0; 2 * d * d];
    if n <= m {
        cmm_acc(&mut gram, h, true, h, false, n, m, n);
    } else {
        cmm_acc(&mut gram, h, false, h, true, m, n, m);
    }
    let (vals, _) = hermitian_eig(&gram, d);
    vals.into_iter().map(|x| x.max(0.0)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn random_hpd(n: usize, rng: &mut RngStream) -> Vec<f64> {
        // A = M M^H + n*I is Hermitian positive definite.
        let mut m = vec![0.0; 2 * n * n];
        for x in m.iter_mut() {
            *x = rng.normal();
        }
        let mut a = vec![0.0; 2 * n * n];
        cmm_acc(&mut a, &m, false, &m, true, n, n, n);
        for i in 0..n {
            a[2 * (i * n + i)] += n as f64;
        }
        a
    }

    #[test]
    fn cholesky_reconstructs() {
        let mut rng = RngStream::derive(1, "chol");
        for n in 1..=6 {
            let a = random_hpd(n, &mut rng);
            let l = cholesky(&a, n).unwrap();
            let mut back = vec![0.0; 2 * n * n];
            cmm_acc(&mut back, &l, false, &l, true, n, n, n);
            for (x, y) in a.iter().zip(back.iter()) {
                assert!((x - y).abs() < 1e-9, "n={n}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        // diag(1, -2) is Hermitian but not positive definite.
        let a = vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, -2.0, 0.0];
        let err = cholesky(&a, 2).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("diagonal entry 1"), "{msg}");
    }

    #[test]
    fn inverse_from_cholesky_works() {
        let mut rng = RngStream::derive(2, "inv");
        for n in 1..=5 {
            let a = random_hpd(n, &mut rng);
            let l = cholesky(&a, n).unwrap();
            let inv = inverse_from_cholesky(&l, n);
            let mut prod = vec![0.0; 2 * n * n];
            cmm_acc(&mut prod, &a, false, &inv, false, n, n, n);
            for i in 0..n {
                for j in 0..n {
                    let v = c(&prod, n, i, j);
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((v.0 - want).abs() < 1e-9 && v.1.abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn eig_diagonalizes() {
        let mut rng = RngStream::derive(3, "eig");
        for n in [2usize, 3, 5, 8, 16] {
            let a = random_hpd(n, &mut rng);
            let (vals, vecs) = hermitian_eig(&a, n);
            // Descending order.
            for w in vals.windows(2) {
                assert!(w[0] >= w[1] - 1e-9);
            }
            // A v_j = lambda_j v_j
            let mut av = vec![0.0; 2 * n * n];
            cmm_acc(&mut av, &a, false, &vecs, false, n, n, n);
            for j in 0..n {
                for i in 0..n {
                    let got = c(&av, n, i, j);
                    let vij = c(&vecs, n, i, j);
                    let want = (vals[j] * vij.0, vals[j] * vij.1);
                    assert!(
                        (got.0 - want.0).abs() < 1e-8 && (got.1 - want.1).abs() < 1e-8,
                        "n={n} ({i},{j}): {got:?} vs {want:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn singular_values_of_identity_embedding() {
        // 4x2 matrix with I_2 on top: singular values are 1, 1.
        let mut h = vec![0.0; 2 * 4 * 2];
        h[2 * 0] = 1.0;
        h[2 * 3] = 1.0;
        let s2 = singular_values_sq(&h, 4, 2);
        assert_eq!(s2.len(), 2);
        assert!((s2[0] - 1.0).abs() < 1e-12 && (s2[1] - 1.0).abs() < 1e-12);
    }
}
