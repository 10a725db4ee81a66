use crate::error::{Error, Result};

/// Smallest |det W| accepted before a matrix is treated as singular.
pub const SINGULAR_DET: f64 = 1e-30;

/// LU factorization with partial pivoting, `P A = L U`, held in f64.
#[derive(Debug, Clone)]
pub struct LuFactors {
    n: usize,
    // L below the diagonal (unit diagonal implied), U on and above
    lu: Vec<f64>,
    // row i of PA is row perm[i] of A
    perm: Vec<usize>,
    log_abs_det: f64,
    sign: f64,
}

impl LuFactors {
    pub fn factorize(a: &[f64], n: usize) -> Result<Self> {
        assert_eq!(a.len(), n * n);
        let mut lu = a.to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut sign = 1.0;
        let mut log_abs_det = 0.0;
        for k in 0..n {
            let p = (k..n)
                .max_by(|&i, &j| lu[i * n + k].abs().total_cmp(&lu[j * n + k].abs()))
                .expect("non-empty pivot range");
            let pivot = lu[p * n + k];
            if pivot == 0.0 || !pivot.is_finite() {
                return Err(Error::SingularMatrix { threshold: SINGULAR_DET });
            }
            if p != k {
                for j in 0..n {
                    lu.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
                sign = -sign;
            }
            if pivot < 0.0 {
                sign = -sign;
            }
            log_abs_det += pivot.abs().ln();
            for i in k + 1..n {
                let f = lu[i * n + k] / pivot;
                lu[i * n + k] = f;
                for j in k + 1..n {
                    lu[i * n + j] -= f * lu[k * n + j];
                }
            }
        }
        if log_abs_det < SINGULAR_DET.ln() {
            return Err(Error::SingularMatrix { threshold: SINGULAR_DET });
        }
        Ok(LuFactors { n, lu, perm, log_abs_det, sign })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn log_abs_det(&self) -> f64 {
        self.log_abs_det
    }

    pub fn det_sign(&self) -> f64 {
        self.sign
    }

    /// Solves `A x = b` in place.
    pub fn solve_in_place(&self, b: &mut [f64], scratch: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            scratch[i] = b[self.perm[i]];
        }
        for i in 0..n {
            let mut acc = scratch[i];
            for j in 0..i {
                acc -= self.lu[i * n + j] * scratch[j];
            }
            scratch[i] = acc;
        }
        for i in (0..n).rev() {
            let mut acc = scratch[i];
            for j in i + 1..n {
                acc -= self.lu[i * n + j] * scratch[j];
            }
            scratch[i] = acc / self.lu[i * n + i];
        }
        b[..n].copy_from_slice(&scratch[..n]);
    }

    /// Row-major `A^{-1}`.
    pub fn inverse(&self) -> Vec<f64> {
        let n = self.n;
        let mut inv = vec![0.0; n * n];
        let mut col = vec![0.0; n];
        let mut scratch = vec![0.0; n];
        for j in 0..n {
            col.fill(0.0);
            col[j] = 1.0;
            self.solve_in_place(&mut col, &mut scratch);
            for i in 0..n {
                inv[i * n + j] = col[i];
            }
        }
        inv
    }
}

/// `log|det A|` by LU, or `None` when singular.
pub fn log_abs_det(a: &[f64], n: usize) -> Option<f64> {
    LuFactors::factorize(a, n).ok().map(|f| f.log_abs_det())
}
