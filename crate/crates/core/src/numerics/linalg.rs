use super::{Matrix, NumericsError};

/// Above this estimate a `lambda == 0` solve is refused.
pub const MAX_CONDITION: f64 = 1e12;

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
#[derive(Clone, Debug)]
pub struct Cholesky {
    factor: Matrix,
}

impl Cholesky {
    pub fn new(spd: &Matrix) -> Result<Self, NumericsError> {
        let n = spd.rows();
        if spd.cols() != n {
            return Err(NumericsError::DimensionMismatch {
                op: "cholesky",
                left: spd.shape(),
                right: spd.shape(),
            });
        }
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let mut diag = spd.get(j, j);
            for k in 0..j {
                diag -= l.get(j, k) * l.get(j, k);
            }
            if !(diag > 0.0) || !diag.is_finite() {
                return Err(NumericsError::NotPositiveDefinite { pivot: j });
            }
            let d = diag.sqrt();
            l.set(j, j, d);
            for i in j + 1..n {
                let mut acc = spd.get(i, j);
                for k in 0..j {
                    acc -= l.get(i, k) * l.get(j, k);
                }
                l.set(i, j, acc / d);
            }
        }
        Ok(Self { factor: l })
    }

    pub fn factor(&self) -> &Matrix {
        &self.factor
    }

    /// Squared ratio of extreme pivots; a cheap lower bound on the
    /// 2-norm condition number of the factored matrix.
    pub fn condition_estimate(&self) -> f64 {
        let n = self.factor.rows();
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for i in 0..n {
            let d = self.factor.get(i, i);
            lo = lo.min(d);
            hi = hi.max(d);
        }
        (hi / lo).powi(2)
    }

    /// Solves `S X = rhs` for `X`.
    pub fn solve(&self, rhs: &Matrix) -> Result<Matrix, NumericsError> {
        let n = self.factor.rows();
        if rhs.rows() != n {
            return Err(NumericsError::DimensionMismatch {
                op: "cholesky_solve",
                left: self.factor.shape(),
                right: rhs.shape(),
            });
        }
        let l = &self.factor;
        let mut x = rhs.clone();
        for c in 0..rhs.cols() {
            // forward: L y = b
            for i in 0..n {
                let mut acc = x.get(i, c);
                for k in 0..i {
                    acc -= l.get(i, k) * x.get(k, c);
                }
                x.set(i, c, acc / l.get(i, i));
            }
            // backward: L^T x = y
            for i in (0..n).rev() {
                let mut acc = x.get(i, c);
                for k in i + 1..n {
                    acc -= l.get(k, i) * x.get(k, c);
                }
                x.set(i, c, acc / l.get(i, i));
            }
        }
        Ok(x)
    }
}

/// Ridge pseudoinverse `(g^T g + lambda I)^{-1} g^T` of a tall matrix `g`.
///
/// For `lambda == 0` the Gram matrix must have a condition estimate below
/// [`MAX_CONDITION`].
pub fn ridge_pinv(g: &Matrix, lambda: f64) -> Result<Matrix, NumericsError> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(NumericsError::InvalidArgument(format!(
            "ridge lambda must be finite and non-negative, got {lambda}"
        )));
    }
    let mut gram = g.t_matmul(g)?;
    for i in 0..gram.rows() {
        let v = gram.get(i, i) + lambda;
        gram.set(i, i, v);
    }
    let chol = Cholesky::new(&gram)?;
    if lambda == 0.0 {
        let estimate = chol.condition_estimate();
        if estimate >= MAX_CONDITION {
            return Err(NumericsError::IllConditioned { estimate });
        }
    }
    chol.solve(&g.transpose())
}
