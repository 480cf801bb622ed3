//! Matrix products and layout ops.

use crate::error::{AutodiffError, Result};
use crate::tape::{Op, Var};
use crate::tensor::Tensor;

/// Row-major `c = op(a) * op(b) (+ c if accumulate)` where `op(a)` is
/// `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    // Strides of op(a) (m x k) and op(b) (k x n).
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices were length-checked above against the shapes and
    // strides handed to sgemm, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(AutodiffError::BadRank {
            op,
            expected: 2,
            shape: s.to_vec(),
        }),
    }
}

pub(crate) fn matmul_backward(a: &Tensor, b: &Tensor, g: &[f32]) -> (Vec<f32>, Vec<f32>) {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut ga = vec![0.0; m * k];
    let mut gb = vec![0.0; k * n];
    // dA = G B^T, dB = A^T G
    gemm(m, n, k, g, false, b.data(), true, &mut ga, false);
    gemm(k, m, n, a.data(), true, g, false, &mut gb, false);
    (ga, gb)
}

pub(crate) fn transpose2(t: &Tensor) -> Tensor {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let d = t.data();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = d[i * c + j];
        }
    }
    Tensor::new(vec![c, r], out).expect("transpose keeps element count")
}

impl<'t> Var<'t> {
    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&rhs);
        let (a, b) = (self.value(), rhs.value());
        let (m, k) = dims2("matmul", &a)?;
        let (k2, n) = dims2("matmul", &b)?;
        if k != k2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
        Ok(self.tape.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul {
                lhs: self.id,
                rhs: rhs.id,
            },
            &[self.id, rhs.id],
        ))
    }

    /// Transpose of a rank-2 tensor.
    pub fn t(self) -> Result<Var<'t>> {
        let x = self.value();
        dims2("transpose", &x)?;
        Ok(self
            .tape
            .push(transpose2(&x), Op::Transpose { input: self.id }, &[self.id]))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let out = x.reshape(shape)?;
        Ok(self
            .tape
            .push(out, Op::Reshape { input: self.id }, &[self.id]))
    }
}

#[cfg(test)]
mod tests {
    use crate::{Tape, Tensor};

    fn mat(r: usize, c: usize, v: &[f32]) -> Tensor {
        Tensor::new(vec![r, c], v.to_vec()).unwrap()
    }

    #[test]
    fn identity_times_a() {
        let tape = Tape::new();
        let i = tape.constant(mat(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let a = tape.constant(mat(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        assert_eq!(*i.matmul(a).unwrap().value(), *a.value());
    }

    #[test]
    fn row_times_column() {
        let tape = Tape::new();
        let a = tape.constant(mat(1, 2, &[1.0, 2.0]));
        let b = tape.constant(mat(2, 1, &[3.0, 4.0]));
        assert_eq!(a.matmul(b).unwrap().value().data(), &[11.0]);
    }

    #[test]
    fn inner_dim_mismatch() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(a.matmul(b).is_err());
    }

    #[test]
    fn transpose_roundtrip_and_gradient() {
        let tape = Tape::new();
        let a = tape.param(mat(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let at = a.t().unwrap();
        assert_eq!(at.value().data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let w = tape.constant(mat(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        at.mul(w).unwrap().sum().backward().unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[1.0, 3.0, 5.0, 2.0, 4.0, 6.0]);
    }
}
