//! Eigendecomposition of complex Hermitian matrices by the cyclic Jacobi
//! method. Deliberately dependency-free: the matrices diagonalized here stay
//! small (a few hundred rows), so an O(n³)-per-sweep method is fine and keeps
//! results bit-reproducible across thread counts.

use ndarray::{Array1, Array2};
use num_complex::Complex64;

/// Eigenvalues (ascending) and eigenvectors (columns) of a Hermitian matrix.
///
/// The input is assumed Hermitian; only its Hermitian part is meaningful.
pub fn eigh(h: &Array2<Complex64>) -> (Array1<f64>, Array2<Complex64>) {
    let n = h.nrows();
    assert_eq!(n, h.ncols(), "eigh requires a square matrix");
    let mut a = h.clone();
    let mut v = Array2::<Complex64>::eye(n);
    if n == 0 {
        return (Array1::zeros(0), v);
    }

    let fro: f64 = a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    let tol = (fro * 1e-14).max(f64::MIN_POSITIVE);

    for _sweep in 0..60 {
        let mut off = 0.0_f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[(p, q)].norm_sqr();
            }
        }
        if (2.0 * off).sqrt() <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                let r = apq.norm();
                if r <= tol / (n as f64) {
                    continue;
                }
                let phase = apq / r; // e^{iφ}
                let app = a[(p, p)].re;
                let aqq = a[(q, q)].re;
                let tau = (aqq - app) / (2.0 * r);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                // Columns: col_p' = c·col_p − s·conj(phase)·col_q,
                //          col_q' = s·phase·col_p + c·col_q, then same on rows.
                let cs = Complex64::new(c, 0.0);
                let sp = phase * s;
                for i in 0..n {
                    let aip = a[(i, p)];
                    let aiq = a[(i, q)];
                    a[(i, p)] = aip * cs - aiq * sp.conj();
                    a[(i, q)] = aip * sp + aiq * cs;
                }
                for j in 0..n {
                    let apj = a[(p, j)];
                    let aqj = a[(q, j)];
                    a[(p, j)] = apj * cs - aqj * sp;
                    a[(q, j)] = apj * sp.conj() + aqj * cs;
                }
                for i in 0..n {
                    let vip = v[(i, p)];
                    let viq = v[(i, q)];
                    v[(i, p)] = vip * cs - viq * sp.conj();
                    v[(i, q)] = vip * sp + viq * cs;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].re.partial_cmp(&a[(j, j)].re).unwrap());
    let vals = Array1::from_iter(order.iter().map(|&i| a[(i, i)].re));
    let mut vecs = Array2::<Complex64>::zeros((n, n));
    for (new_col, &old_col) in order.iter().enumerate() {
        for i in 0..n {
            vecs[(i, new_col)] = v[(i, old_col)];
        }
    }
    (vals, vecs)
}

/// Trace distance ½·Tr|ρ − σ| between Hermitian matrices.
pub fn trace_distance(rho: &Array2<Complex64>, sigma: &Array2<Complex64>) -> f64 {
    let diff = rho - sigma;
    let (vals, _) = eigh(&diff);
    0.5 * vals.iter().map(|x| x.abs()).sum::<f64>()
}
