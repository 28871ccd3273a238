//! Dense complex matrix exponential (Padé order 13 with scaling and squaring).
//!
//! The approximant and the θ₁₃ switching threshold follow Higham's method;
//! the linear solve is Gaussian elimination with partial pivoting, which is
//! deterministic and accurate enough at the dimensions used here (≤ a few
//! hundred).

use ndarray::Array2;
use num_complex::Complex64;

use super::FockError;

/// Padé(13,13) numerator coefficients, normalized to b₀ = 1.
const PADE13: [f64; 14] = [
    1.0,
    0.5,
    0.12,
    1.8333333333333333e-2,
    1.9927536231884058e-3,
    1.6304347826086956e-4,
    1.0351966873706004e-5,
    5.175983436853002e-7,
    2.0431513566525008e-8,
    6.306022705717595e-10,
    1.4837700484041396e-11,
    2.5291534915979653e-13,
    2.8101705462199623e-15,
    1.5440497506703088e-17,
];

/// Largest 1-norm for which the order-13 approximant is used unscaled.
const THETA13: f64 = 5.371920351148152;

/// Hard cap on the number of squarings; beyond this the input norm is so
/// large that the result would overflow or lose all accuracy.
const MAX_SQUARINGS: u32 = 64;

pub fn one_norm(a: &Array2<Complex64>) -> f64 {
    let mut max = 0.0_f64;
    for col in a.columns() {
        let s: f64 = col.iter().map(|z| z.norm()).sum();
        if s > max {
            max = s;
        }
    }
    max
}

/// exp(a) for a square complex matrix.
pub fn expm(a: &Array2<Complex64>) -> Result<Array2<Complex64>, FockError> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(FockError::NotSquare {
            rows: n,
            cols: a.ncols(),
        });
    }
    if a.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(FockError::NumericRange(
            "matrix exponential input contains non-finite entries".into(),
        ));
    }
    let norm = one_norm(a);
    let squarings = if norm > THETA13 {
        (norm / THETA13).log2().ceil() as i64
    } else {
        0
    };
    if squarings > MAX_SQUARINGS as i64 {
        return Err(FockError::NumericRange(format!(
            "matrix exponential input norm {norm:.3e} exceeds the supported range"
        )));
    }
    let squarings = squarings.max(0) as u32;
    let scale = Complex64::new((0.5_f64).powi(squarings as i32), 0.0);
    let scaled = a.mapv(|z| z * scale);

    let (u, v) = pade13(&scaled);
    let num = &v + &u;
    let den = &v - &u;
    let mut result = solve(&den, &num)?;
    for _ in 0..squarings {
        result = result.dot(&result);
    }
    Ok(result)
}

/// Order-13 Padé numerator split exp(A) ≈ (V − U)⁻¹ (V + U).
fn pade13(a: &Array2<Complex64>) -> (Array2<Complex64>, Array2<Complex64>) {
    let n = a.nrows();
    let id = Array2::<Complex64>::eye(n);
    let a2 = a.dot(a);
    let a4 = a2.dot(&a2);
    let a6 = a2.dot(&a4);

    let mut w = a6.mapv(|z| z * PADE13[13]);
    w = &w + &a4.mapv(|z| z * PADE13[11]);
    w = &w + &a2.mapv(|z| z * PADE13[9]);
    let mut u = a6.dot(&w);
    u = &u + &a6.mapv(|z| z * PADE13[7]);
    u = &u + &a4.mapv(|z| z * PADE13[5]);
    u = &u + &a2.mapv(|z| z * PADE13[3]);
    u = &u + &id.mapv(|z| z * PADE13[1]);
    let u = a.dot(&u);

    let mut w = a6.mapv(|z| z * PADE13[12]);
    w = &w + &a4.mapv(|z| z * PADE13[10]);
    w = &w + &a2.mapv(|z| z * PADE13[8]);
    let mut v = a6.dot(&w);
    v = &v + &a6.mapv(|z| z * PADE13[6]);
    v = &v + &a4.mapv(|z| z * PADE13[4]);
    v = &v + &a2.mapv(|z| z * PADE13[2]);
    v = &v + &id.mapv(|z| z * PADE13[0]);

    (u, v)
}

/// Solve A X = B by Gaussian elimination with partial pivoting.
pub fn solve(a: &Array2<Complex64>, b: &Array2<Complex64>) -> Result<Array2<Complex64>, FockError> {
    let n = a.nrows();
    let m = b.ncols();
    let mut lhs = a.clone();
    let mut rhs = b.clone();

    for k in 0..n {
        let mut pivot_row = k;
        let mut pivot_mag = lhs[(k, k)].norm();
        for i in (k + 1)..n {
            let mag = lhs[(i, k)].norm();
            if mag > pivot_mag {
                pivot_mag = mag;
                pivot_row = i;
            }
        }
        if pivot_mag == 0.0 {
            return Err(FockError::NumericRange(
                "singular matrix in linear solve".into(),
            ));
        }
        if pivot_row != k {
            for j in 0..n {
                lhs.swap((k, j), (pivot_row, j));
            }
            for j in 0..m {
                rhs.swap((k, j), (pivot_row, j));
            }
        }
        let pivot = lhs[(k, k)];
        for i in (k + 1)..n {
            let factor = lhs[(i, k)] / pivot;
            if factor.norm() == 0.0 {
                continue;
            }
            for j in k..n {
                let v = lhs[(k, j)];
                lhs[(i, j)] -= factor * v;
            }
            for j in 0..m {
                let v = rhs[(k, j)];
                rhs[(i, j)] -= factor * v;
            }
        }
    }

    let mut x = Array2::<Complex64>::zeros((n, m));
    for col in 0..m {
        for i in (0..n).rev() {
            let mut acc = rhs[(i, col)];
            for j in (i + 1)..n {
                acc -= lhs[(i, j)] * x[(j, col)];
            }
            x[(i, col)] = acc / lhs[(i, i)];
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn max_abs_diff(a: &Array2<Complex64>, b: &Array2<Complex64>) -> f64 {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).norm())
            .fold(0.0, f64::max)
    }

    #[test]
    fn exp_of_zero_is_identity() {
        let z = Array2::<Complex64>::zeros((4, 4));
        let e = expm(&z).unwrap();
        assert!(max_abs_diff(&e, &Array2::eye(4)) < 1e-14);
    }

    #[test]
    fn exp_of_diagonal_is_elementwise() {
        let mut d = Array2::<Complex64>::zeros((3, 3));
        d[(0, 0)] = c(0.3, 0.0);
        d[(1, 1)] = c(-1.2, 0.4);
        d[(2, 2)] = c(2.0, -3.0);
        let e = expm(&d).unwrap();
        for i in 0..3 {
            assert!((e[(i, i)] - d[(i, i)].exp()).norm() < 1e-12);
        }
        assert!(e[(0, 1)].norm() < 1e-14);
    }

    #[test]
    fn exp_of_pauli_x_rotation() {
        // exp(-i θ/2 σx) = cos(θ/2) I - i sin(θ/2) σx
        let theta = 1.1_f64;
        let mut g = Array2::<Complex64>::zeros((2, 2));
        g[(0, 1)] = c(0.0, -theta / 2.0);
        g[(1, 0)] = c(0.0, -theta / 2.0);
        let e = expm(&g).unwrap();
        assert!((e[(0, 0)] - c((theta / 2.0).cos(), 0.0)).norm() < 1e-13);
        assert!((e[(0, 1)] - c(0.0, -(theta / 2.0).sin())).norm() < 1e-13);
    }

    #[test]
    fn large_norm_triggers_scaling_and_matches() {
        // exp(t N) for diagonal N with t large enough to force squaring.
        let n = 6;
        let mut g = Array2::<Complex64>::zeros((n, n));
        for i in 0..n {
            g[(i, i)] = c(0.0, 7.0 * i as f64);
        }
        let e = expm(&g).unwrap();
        for i in 0..n {
            assert!((e[(i, i)] - g[(i, i)].exp()).norm() < 1e-10);
        }
    }

    #[test]
    fn extreme_norm_is_rejected() {
        let mut g = Array2::<Complex64>::zeros((2, 2));
        g[(0, 0)] = c(1e24, 0.0);
        assert!(matches!(expm(&g), Err(FockError::NumericRange(_))));
    }

    #[test]
    fn solve_recovers_known_system() {
        let mut a = Array2::<Complex64>::zeros((2, 2));
        a[(0, 0)] = c(2.0, 0.0);
        a[(0, 1)] = c(0.0, 1.0);
        a[(1, 0)] = c(1.0, 0.0);
        a[(1, 1)] = c(3.0, 0.0);
        let x_true = Array2::from_shape_fn((2, 2), |(i, j)| c(i as f64 + 0.5, j as f64 - 1.0));
        let b = a.dot(&x_true);
        let x = solve(&a, &b).unwrap();
        assert!(max_abs_diff(&x, &x_true) < 1e-12);
    }
}
