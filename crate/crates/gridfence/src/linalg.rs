//! Small dense linear-algebra helpers: matrix exponential and the combined
//! state/input discretization integral.

use nalgebra::{DMatrix, Matrix2};

/// Taylor order used by [`expm`]. With the scaled norm kept at or below 0.5
/// the series remainder is ~0.5^19/19! ≈ 1e-23, far below accumulated
/// rounding, so the squaring phase dominates the error budget.
const EXPM_TAYLOR_ORDER: usize = 18;
const EXPM_TARGET_NORM: f64 = 0.5;

/// Matrix exponential by scaling-and-squaring over a fixed-order truncated
/// Taylor series.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(a.nrows(), a.ncols(), "expm needs a square matrix");
    let n = a.nrows();
    let norm = one_norm(a);
    let squarings = if norm <= EXPM_TARGET_NORM {
        0
    } else {
        (norm / EXPM_TARGET_NORM).log2().ceil() as u32
    };
    let scaled = a / 2f64.powi(squarings as i32);

    let mut result = DMatrix::<f64>::identity(n, n);
    let mut term = DMatrix::<f64>::identity(n, n);
    for l in 1..=EXPM_TAYLOR_ORDER {
        term = (&term * &scaled) / l as f64;
        result += &term;
    }
    for _ in 0..squarings {
        result = &result * &result;
    }
    result
}

/// Discretizes `x' = A x + (inputs)` over one sample period: returns
/// `(e^{A T}, Y)` with `Y = ∫_0^T e^{A s} ds`, so any constant-over-the-step
/// input channel `w` contributes `Y w` to the state update.
///
/// `Y` is read off the top-right block of `exp([[A, I], [0, 0]] T)`, which
/// stays well defined when `A` is singular (an explicit `A⁻¹(e^{AT} − I)`
/// formula would not).
pub fn discretize_pair(a: &DMatrix<f64>, t_samp: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    assert_eq!(a.nrows(), a.ncols(), "discretize_pair needs a square matrix");
    let n = a.nrows();
    let mut augmented = DMatrix::<f64>::zeros(2 * n, 2 * n);
    augmented.view_mut((0, 0), (n, n)).copy_from(a);
    augmented
        .view_mut((0, n), (n, n))
        .copy_from(&DMatrix::identity(n, n));
    augmented *= t_samp;
    let e = expm(&augmented);
    let a_d = e.view((0, 0), (n, n)).into_owned();
    let y = e.view((0, n), (n, n)).into_owned();
    (a_d, y)
}

/// Maximum absolute column sum.
pub fn one_norm(a: &DMatrix<f64>) -> f64 {
    a.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum())
        .fold(0.0, f64::max)
}

/// Spectral radius of a 2×2 matrix from the characteristic polynomial.
pub fn spectral_radius2(m: &Matrix2<f64>) -> f64 {
    let tr = m.trace();
    let det = m.determinant();
    let disc = tr * tr - 4.0 * det;
    if disc >= 0.0 {
        let s = disc.sqrt();
        (((tr + s) / 2.0).abs()).max(((tr - s) / 2.0).abs())
    } else {
        // complex pair: |λ|² = det
        det.abs().sqrt()
    }
}

/// Largest singular value of a 2×2 matrix (closed form via the Gram matrix).
pub fn operator_norm2(m: &Matrix2<f64>) -> f64 {
    let g = m.transpose() * m;
    let tr = g.trace();
    let det = g.determinant().max(0.0);
    let disc = (tr * tr / 4.0 - det).max(0.0);
    (tr / 2.0 + disc.sqrt()).max(0.0).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::Vector2;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Independent oracle: plain truncated series Σ_{l=0}^{30} (A)^l / l!
    /// with its own halving loop (pre-scale until one-norm ≤ 0.25, square back).
    fn expm_series_oracle(a: &DMatrix<f64>) -> DMatrix<f64> {
        let n = a.nrows();
        let mut halvings = 0u32;
        let mut scaled = a.clone();
        while one_norm(&scaled) > 0.25 {
            scaled /= 2.0;
            halvings += 1;
        }
        let mut acc = DMatrix::<f64>::identity(n, n);
        let mut term = DMatrix::<f64>::identity(n, n);
        for l in 1..=30usize {
            term = (&term * &scaled) / l as f64;
            acc += &term;
        }
        for _ in 0..halvings {
            acc = &acc * &acc;
        }
        acc
    }

    fn random_matrix(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DMatrix<f64> {
        DMatrix::from_fn(n, n, |_, _| rng.random_range(-scale..=scale))
    }

    #[test]
    fn exp_of_zero_is_identity() {
        let z = DMatrix::<f64>::zeros(3, 3);
        let e = expm(&z);
        assert_abs_diff_eq!(e, DMatrix::identity(3, 3), epsilon = 1e-15);
    }

    #[test]
    fn exp_of_diagonal_matches_scalar_exponentials() {
        let d = DMatrix::from_diagonal(&nalgebra::dvector![-1.0, 0.5, -2000.0]);
        let e = expm(&d);
        for (i, lam) in [-1.0f64, 0.5, -2000.0].iter().enumerate() {
            assert_abs_diff_eq!(e[(i, i)], lam.exp(), epsilon = 1e-12 * lam.exp().max(1.0));
        }
    }

    #[test]
    fn matches_series_oracle_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let n = rng.random_range(1..=4);
            // Scaled-generator territory (‖A·T_samp‖ up to ~40): larger spectra
            // overflow e^A in both routes, which is outside the use domain.
            let scale = 10f64.powf(rng.random_range(-1.0..=1.0));
            let a = random_matrix(&mut rng, n, scale);
            let e = expm(&a);
            let oracle = expm_series_oracle(&a);
            let denom = one_norm(&oracle).max(1.0);
            assert!(
                one_norm(&(&e - &oracle)) / denom < 1e-12,
                "expm disagrees with series oracle: rel err {}",
                one_norm(&(&e - &oracle)) / denom
            );
        }
    }

    #[test]
    fn semigroup_property_holds() {
        // e^{A(t1+t2)} = e^{A t1} e^{A t2}
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..50 {
            let a = random_matrix(&mut rng, 3, 100.0);
            let e1 = expm(&(&a * 0.3e-3));
            let e2 = expm(&(&a * 0.7e-3));
            let whole = expm(&(&a * 1.0e-3));
            let split = &e1 * &e2;
            assert!(
                one_norm(&(&whole - &split)) / one_norm(&whole).max(1.0) < 1e-12,
                "semigroup violated"
            );
        }
    }

    #[test]
    fn discretize_pair_of_zero_generator() {
        // A = 0: A_d = I and Y = T·I.
        let z = DMatrix::<f64>::zeros(2, 2);
        let (a_d, y) = discretize_pair(&z, 1e-3);
        assert_abs_diff_eq!(a_d, DMatrix::identity(2, 2), epsilon = 1e-15);
        assert_abs_diff_eq!(y, DMatrix::identity(2, 2) * 1e-3, epsilon = 1e-18);
    }

    #[test]
    fn discretize_pair_matches_quadrature() {
        // Y = ∫_0^T e^{As} ds via composite Simpson on e^{As}.
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..20 {
            let a = random_matrix(&mut rng, 2, 1000.0);
            let t = 1e-3;
            let (_, y) = discretize_pair(&a, t);
            let panels = 400;
            let h = t / panels as f64;
            let mut quad = DMatrix::<f64>::zeros(2, 2);
            for p in 0..panels {
                let s0 = p as f64 * h;
                let f0 = expm(&(&a * s0));
                let f1 = expm(&(&a * (s0 + h / 2.0)));
                let f2 = expm(&(&a * (s0 + h)));
                quad += (f0 + f1 * 4.0 + f2) * (h / 6.0);
            }
            assert!(
                one_norm(&(&y - &quad)) / one_norm(&y).max(1e-12) < 1e-9,
                "Y disagrees with Simpson quadrature"
            );
        }
    }

    #[test]
    fn spectral_radius_and_operator_norm_agree_with_nalgebra() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let m = Matrix2::from_fn(|_, _| rng.random_range(-3.0..=3.0));
            let sv = m.svd(false, false).singular_values;
            assert_abs_diff_eq!(operator_norm2(&m), sv[0], epsilon = 1e-10);
            let eigs = m.complex_eigenvalues();
            let rho = eigs.iter().map(|c| c.norm()).fold(0.0, f64::max);
            assert_abs_diff_eq!(spectral_radius2(&m), rho, epsilon = 1e-10);
        }
    }

    #[test]
    fn operator_norm_bounds_vector_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let m = Matrix2::from_fn(|_, _| rng.random_range(-2.0..=2.0));
            let v = Vector2::new(rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0));
            assert!((m * v).norm() <= operator_norm2(&m) * v.norm() + 1e-12);
        }
    }
}
