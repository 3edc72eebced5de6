use super::matrix::{dot, Matrix};
use crate::error::{Error, Result};

/// How [`cholesky_psd`] reacts to a failed factorization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum JitterPolicy {
    /// Fail immediately.
    None,
    /// Retry with `1e-12 · tr(M)/D · 10^k` added to the diagonal for `k = 0..=6`.
    Ladder,
}

/// Lower-triangular factor and the diagonal jitter it needed.
#[derive(Clone, Debug)]
pub struct Cholesky {
    pub lower: Matrix,
    pub jitter: f64,
}

const SYMMETRY_TOL: f64 = 1e-9;

pub fn cholesky_psd(m: &Matrix, policy: JitterPolicy) -> Result<Cholesky> {
    let (n, c) = m.shape();
    if n != c {
        return Err(Error::shape("cholesky_psd", format!("{n}x{n}"), format!("{n}x{c}")));
    }
    if !m.is_finite() {
        return Err(Error::NonFinite("cholesky_psd"));
    }
    let asym = m.asymmetry();
    if asym > SYMMETRY_TOL {
        return Err(Error::NotSymmetric(asym));
    }
    if let Some(lower) = try_cholesky(m, 0.0) {
        return Ok(Cholesky { lower, jitter: 0.0 });
    }
    let mut last = 0.0;
    if policy == JitterPolicy::Ladder && n > 0 {
        let base = 1e-12 * (m.trace().abs() / n as f64).max(f64::MIN_POSITIVE);
        for k in 0..=6 {
            let jitter = base * 10f64.powi(k);
            last = jitter;
            if let Some(lower) = try_cholesky(m, jitter) {
                return Ok(Cholesky { lower, jitter });
            }
        }
    }
    Err(Error::NotPsd { jitter: last })
}

fn try_cholesky(m: &Matrix, jitter: f64) -> Option<Matrix> {
    let n = m.rows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let d = m.get(j, j) + jitter - dot(&l.row(j)[..j], &l.row(j)[..j]);
        if d <= 0.0 || !d.is_finite() {
            return None;
        }
        let ljj = d.sqrt();
        l.set(j, j, ljj);
        for i in (j + 1)..n {
            let s = m.get(i, j) - dot(&l.row(i)[..j], &l.row(j)[..j]);
            l.set(i, j, s / ljj);
        }
    }
    Some(l)
}

impl Cholesky {
    /// Solves `L Lᵀ x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let l = &self.lower;
        let n = l.rows();
        let mut y = vec![0.0; n];
        for i in 0..n {
            y[i] = (b[i] - dot(&l.row(i)[..i], &y[..i])) / l.get(i, i);
        }
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= l.get(k, i) * x[k];
            }
            x[i] = s / l.get(i, i);
        }
        x
    }

    /// Full inverse of `L Lᵀ`, symmetrized.
    pub fn inverse(&self) -> Matrix {
        let n = self.lower.rows();
        let mut inv = Matrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[j] = 1.0;
            let col = self.solve(&e);
            inv.set_col(j, &col);
        }
        inv.symmetrize();
        inv
    }
}

/// Inverse of a symmetric positive-definite matrix.
pub fn spd_inverse(m: &Matrix) -> Result<Matrix> {
    Ok(cholesky_psd(m, JitterPolicy::None)?.inverse())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::derive_stream;

    fn reconstruct(l: &Matrix) -> Matrix {
        l.matmul_t(l).unwrap()
    }

    #[test]
    fn identity_factor_is_identity() {
        let ch = cholesky_psd(&Matrix::identity(4), JitterPolicy::Ladder).unwrap();
        assert_eq!(ch.lower, Matrix::identity(4));
        assert_eq!(ch.jitter, 0.0);
    }

    #[test]
    fn two_by_two_hand_factor() {
        let m = Matrix::from_rows(&[vec![4.0, 2.0], vec![2.0, 3.0]]).unwrap();
        let l = cholesky_psd(&m, JitterPolicy::Ladder).unwrap().lower;
        let want = Matrix::from_rows(&[vec![2.0, 0.0], vec![1.0, 2f64.sqrt()]]).unwrap();
        assert!(l.max_abs_diff(&want) < 1e-15);
        assert!(reconstruct(&l).max_abs_diff(&m) < 1e-14);
    }

    #[test]
    fn indefinite_matrix_fails_after_ladder() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        match cholesky_psd(&m, JitterPolicy::Ladder) {
            Err(Error::NotPsd { jitter }) => assert!((jitter - 1e-6).abs() < 1e-18),
            other => panic!("expected NotPsd, got {other:?}"),
        }
    }

    #[test]
    fn singular_psd_matrix_needs_jitter() {
        let m = Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let ch = cholesky_psd(&m, JitterPolicy::Ladder).unwrap();
        assert!(ch.jitter > 0.0);
        assert!(cholesky_psd(&m, JitterPolicy::None).is_err());
    }

    #[test]
    fn random_psd_reconstruction() {
        let mut rng = derive_stream(11, "cholesky-test");
        for trial in 0..100 {
            let d = 1 + trial % 16;
            let a = Matrix::from_fn(d + 2, d, |_, _| rng.normal());
            let m = a.t_matmul(&a).unwrap();
            let ch = cholesky_psd(&m, JitterPolicy::Ladder).unwrap();
            let mut target = m.clone();
            for i in 0..d {
                target.set(i, i, target.get(i, i) + ch.jitter);
            }
            let rel = reconstruct(&ch.lower).sub(&target).unwrap().frobenius() / target.frobenius();
            assert!(rel < 1e-8, "trial {trial}: rel err {rel}");
        }
    }

    #[test]
    fn solve_and_inverse() {
        let m = Matrix::from_rows(&[vec![4.0, 2.0], vec![2.0, 3.0]]).unwrap();
        let inv = spd_inverse(&m).unwrap();
        assert!(m.matmul(&inv).unwrap().max_abs_diff(&Matrix::identity(2)) < 1e-14);
    }
}
