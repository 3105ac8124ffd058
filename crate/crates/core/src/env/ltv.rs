use nalgebra::{DMatrix, DVector};

use super::Environment;
use crate::error::{Error, Result};
use crate::numerics::symmetric_eigen;

/// Linear time-varying system `x_{k+1} = A_k x_k + B_k u_k + w_k` with cost
/// `x_k^T Q_k x_k + u_k^T R_k u_k` per step and no terminal cost.
#[derive(Clone, Debug, PartialEq)]
pub struct LtvSystem {
    a: Vec<DMatrix<f64>>,
    b: Vec<DMatrix<f64>>,
    w: Vec<DVector<f64>>,
    q: Vec<DMatrix<f64>>,
    r: Vec<DMatrix<f64>>,
}

impl LtvSystem {
    /// Validates shapes, `Q_k >= 0` and `R_k > 0`.
    pub fn new(
        a: Vec<DMatrix<f64>>,
        b: Vec<DMatrix<f64>>,
        w: Vec<DVector<f64>>,
        q: Vec<DMatrix<f64>>,
        r: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        let len = a.len();
        if len == 0 {
            return Err(Error::InvalidConfig("LTV system needs at least one step".into()));
        }
        for (name, got) in [("B", b.len()), ("w", w.len()), ("Q", q.len()), ("R", r.len())] {
            if got != len {
                return Err(Error::InvalidConfig(format!(
                    "LTV {name} has {got} steps, A has {len}"
                )));
            }
        }
        let n = a[0].nrows();
        let m = b[0].ncols();
        for k in 0..len {
            let shapes = [
                (a[k].shape(), (n, n)),
                (b[k].shape(), (n, m)),
                ((w[k].len(), 1), (n, 1)),
                (q[k].shape(), (n, n)),
                (r[k].shape(), (m, m)),
            ];
            for (got, want) in shapes {
                if got != want {
                    return Err(Error::DimensionMismatch {
                        expected: want.0 * want.1,
                        got: got.0 * got.1,
                    });
                }
            }
            let sym_q = (&q[k] - q[k].transpose()).amax() <= 1e-12 * q[k].amax().max(1.0);
            let (qv, _) = symmetric_eigen(&q[k])?;
            if !sym_q || qv[0] < -1e-12 * qv[qv.len() - 1].abs().max(1.0) {
                return Err(Error::IndefiniteQ { step: k });
            }
            let sym_r = (&r[k] - r[k].transpose()).amax() <= 1e-12 * r[k].amax().max(1.0);
            let (rv, _) = symmetric_eigen(&r[k])?;
            if !sym_r || rv[0] <= 0.0 {
                return Err(Error::SingularR { step: k });
            }
        }
        Ok(Self { a, b, w, q, r })
    }

    /// The same `(A, B, w, Q, R)` repeated for `len` steps.
    pub fn time_invariant(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        w: DVector<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        len: usize,
    ) -> Result<Self> {
        Self::new(
            vec![a; len],
            vec![b; len],
            vec![w; len],
            vec![q; len],
            vec![r; len],
        )
    }

    /// Steps `start..start + len` as a new system indexed from zero.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.len() || len == 0 {
            return Err(Error::IndexOutOfRange {
                index: start + len,
                len: self.len(),
            });
        }
        let range = start..start + len;
        Ok(Self {
            a: self.a[range.clone()].to_vec(),
            b: self.b[range.clone()].to_vec(),
            w: self.w[range.clone()].to_vec(),
            q: self.q[range.clone()].to_vec(),
            r: self.r[range].to_vec(),
        })
    }

    /// Number of stored steps.
    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    pub fn a(&self, k: usize) -> &DMatrix<f64> {
        &self.a[k]
    }
    pub fn b(&self, k: usize) -> &DMatrix<f64> {
        &self.b[k]
    }
    pub fn w(&self, k: usize) -> &DVector<f64> {
        &self.w[k]
    }
    pub fn q(&self, k: usize) -> &DMatrix<f64> {
        &self.q[k]
    }
    pub fn r(&self, k: usize) -> &DMatrix<f64> {
        &self.r[k]
    }
}

/// `A_h x + B_h u + w_h`.
pub fn ltv_step(sys: &LtvSystem, x: &[f64], u: &[f64], h: usize) -> Result<Vec<f64>> {
    if h >= sys.len() {
        return Err(Error::IndexOutOfRange {
            index: h,
            len: sys.len(),
        });
    }
    if x.len() != sys.state_dim() {
        return Err(Error::DimensionMismatch {
            expected: sys.state_dim(),
            got: x.len(),
        });
    }
    if u.len() != sys.control_dim() {
        return Err(Error::DimensionMismatch {
            expected: sys.control_dim(),
            got: u.len(),
        });
    }
    Ok(sys.step(x, u, h))
}

impl Environment for LtvSystem {
    fn state_dim(&self) -> usize {
        self.a[0].nrows()
    }

    fn control_dim(&self) -> usize {
        self.b[0].ncols()
    }

    fn step_into(&self, x: &[f64], u: &[f64], k: usize, next: &mut [f64]) {
        let (a, b, w) = (&self.a[k], &self.b[k], &self.w[k]);
        for (i, out) in next.iter_mut().enumerate() {
            let mut acc = w[i];
            for (j, xj) in x.iter().enumerate() {
                acc += a[(i, j)] * xj;
            }
            for (j, uj) in u.iter().enumerate() {
                acc += b[(i, j)] * uj;
            }
            *out = acc;
        }
    }

    fn running_cost(&self, x: &[f64], u: &[f64], k: usize) -> f64 {
        quad_form(&self.q[k], x) + quad_form(&self.r[k], u)
    }

    fn terminal_cost(&self, _x: &[f64], _k: usize) -> f64 {
        0.0
    }
}

fn quad_form(m: &DMatrix<f64>, v: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (i, vi) in v.iter().enumerate() {
        let mut row = 0.0;
        for (j, vj) in v.iter().enumerate() {
            row += m[(i, j)] * vj;
        }
        acc += vi * row;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_system(a: f64, b: f64, w: f64, len: usize) -> LtvSystem {
        LtvSystem::time_invariant(
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, b),
            DVector::from_element(1, w),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            len,
        )
        .unwrap()
    }

    #[test]
    fn identity_dynamics() {
        let sys = LtvSystem::time_invariant(
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 1),
            DVector::zeros(2),
            DMatrix::identity(2, 2),
            DMatrix::identity(1, 1),
            3,
        )
        .unwrap();
        assert_eq!(ltv_step(&sys, &[1.5, -2.0], &[7.0], 1).unwrap(), vec![1.5, -2.0]);
    }

    #[test]
    fn double_integrator_step() {
        let dt = 0.1;
        let sys = LtvSystem::time_invariant(
            DMatrix::from_row_slice(2, 2, &[1.0, dt, 0.0, 1.0]),
            DMatrix::from_row_slice(2, 1, &[0.0, dt]),
            DVector::zeros(2),
            DMatrix::identity(2, 2),
            DMatrix::identity(1, 1),
            1,
        )
        .unwrap();
        assert_eq!(ltv_step(&sys, &[0.0, 0.0], &[1.0], 0).unwrap(), vec![0.0, 0.1]);
    }

    #[test]
    fn affine_offset() {
        let sys = scalar_system(0.9, 2.0, 0.25, 4);
        assert_eq!(ltv_step(&sys, &[0.0], &[0.0], 2).unwrap(), vec![0.25]);
    }

    #[test]
    fn index_and_dimension_errors() {
        let sys = scalar_system(1.0, 1.0, 0.0, 2);
        assert_eq!(
            ltv_step(&sys, &[0.0], &[0.0], 2),
            Err(Error::IndexOutOfRange { index: 2, len: 2 })
        );
        assert!(matches!(
            ltv_step(&sys, &[0.0, 1.0], &[0.0], 0),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn rejects_bad_cost_matrices() {
        let bad_r = LtvSystem::time_invariant(
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
            DVector::zeros(1),
            DMatrix::identity(1, 1),
            DMatrix::zeros(1, 1),
            2,
        );
        assert_eq!(bad_r, Err(Error::SingularR { step: 0 }));
        let bad_q = LtvSystem::time_invariant(
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
            DVector::zeros(1),
            DMatrix::from_element(1, 1, -1.0),
            DMatrix::identity(1, 1),
            2,
        );
        assert_eq!(bad_q, Err(Error::IndefiniteQ { step: 0 }));
    }

    #[test]
    fn window_reindexes() {
        let sys = LtvSystem::new(
            (0..4).map(|k| DMatrix::from_element(1, 1, k as f64)).collect(),
            vec![DMatrix::identity(1, 1); 4],
            vec![DVector::zeros(1); 4],
            vec![DMatrix::identity(1, 1); 4],
            vec![DMatrix::identity(1, 1); 4],
        )
        .unwrap();
        let win = sys.window(2, 2).unwrap();
        assert_eq!(win.a(0)[(0, 0)], 2.0);
        assert!(sys.window(3, 2).is_err());
    }
}
