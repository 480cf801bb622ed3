//! Functions built from primitives: softmax, log-softmax, cross-entropy.

use crate::error::{AutodiffError, Result};
use crate::tape::Var;
use crate::tensor::Tensor;

impl<'t> Var<'t> {
    /// Softmax of `self / temperature` along the last axis.
    pub fn softmax(self, temperature: f32) -> Result<Var<'t>> {
        let log_p = self.log_softmax(temperature)?;
        Ok(log_p.exp())
    }

    /// Log-softmax of `self / temperature` along the last axis. The row max
    /// is subtracted as a constant, which leaves the result and its gradient
    /// unchanged.
    pub fn log_softmax(self, temperature: f32) -> Result<Var<'t>> {
        if !(temperature > 0.0) {
            return Err(AutodiffError::Invalid(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let rank = self.shape().len();
        if rank == 0 {
            return Err(AutodiffError::BadRank {
                op: "softmax",
                expected: 1,
                shape: vec![],
            });
        }
        let axis = rank - 1;
        let z = self.scale(1.0 / temperature);
        let m = z.max_axes(&[axis], true)?.stop_grad();
        let shifted = z.sub(m)?;
        let lse = shifted.exp().sum_axes(&[axis], true)?.ln();
        shifted.sub(lse)
    }

    /// Mean cross-entropy of `self: [N, C]` logits against integer labels.
    pub fn cross_entropy(self, labels: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        let (n, c) = match shape[..] {
            [n, c] => (n, c),
            _ => {
                return Err(AutodiffError::BadRank {
                    op: "cross_entropy",
                    expected: 2,
                    shape,
                })
            }
        };
        if labels.len() != n {
            return Err(AutodiffError::ShapeMismatch {
                op: "cross_entropy (labels)",
                lhs: shape,
                rhs: vec![labels.len()],
            });
        }
        let mut onehot = Tensor::zeros(&[n, c]);
        for (i, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(AutodiffError::IndexOutOfRange { index: y, len: c });
            }
            onehot.set(&[i, y], 1.0);
        }
        let log_p = self.log_softmax(1.0)?;
        let picked = log_p.mul_const(onehot)?.sum();
        Ok(picked.scale(-1.0 / n as f32))
    }
}

#[cfg(test)]
mod tests {
    use crate::{Tape, Tensor};

    #[test]
    fn uniform_logits_cross_entropy_is_log_c() {
        let tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[4, 10]));
        let ce = logits.cross_entropy(&[0, 3, 9, 5]).unwrap();
        assert!((ce.item().unwrap() - 10f32.ln()).abs() < 1e-6);
    }

    #[test]
    fn label_out_of_range() {
        let tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[1, 3]));
        assert!(logits.cross_entropy(&[3]).is_err());
    }

    #[test]
    fn softmax_sums_to_one_and_sharpens() {
        let tape = Tape::new();
        let w = tape.constant(Tensor::new(vec![3], vec![0.1, 0.3, 0.2]).unwrap());
        let p = w.softmax(1.0).unwrap().value();
        let s: f32 = p.data().iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
        let sharp = w.softmax(1e-5).unwrap().value();
        assert!(sharp.data()[1] > 1.0 - 1e-6);
    }
}
