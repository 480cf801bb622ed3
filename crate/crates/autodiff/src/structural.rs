//! Indexing, concatenation, masking and straight-through primitives.

use crate::error::{AutodiffError, Result};
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

pub(crate) fn flip_last(t: &Tensor) -> Tensor {
    let w = *t.shape().last().unwrap_or(&1);
    let mut out = t.data().to_vec();
    if w > 0 {
        out.chunks_mut(w).for_each(|row| row.reverse());
    }
    Tensor::new(t.shape().to_vec(), out).expect("flip keeps shape")
}

impl Tape {
    /// Concatenate along the leading axis.
    pub fn concat0<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let values: Vec<Tensor> = parts.iter().map(|p| (*p.value()).clone()).collect();
        let out = Tensor::concat0(&values)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(self.push(out, Op::Concat0 { inputs: ids.clone() }, &ids))
    }

    /// Stack same-shaped variables along a new leading axis.
    pub fn stack<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let lifted = parts
            .iter()
            .map(|p| {
                let mut s = vec![1];
                s.extend(p.shape());
                p.reshape(&s)
            })
            .collect::<Result<Vec<_>>>()?;
        self.concat0(&lifted)
    }

    /// A node whose forward value is exactly `value` while the backward pass
    /// treats it as `input + (mu - stop_grad(mu))`: the upstream gradient is
    /// passed unchanged to `input` (same shape as `value`) and summed into the
    /// scalar `mu`. Either route may be omitted.
    pub fn straight_through<'t>(
        &'t self,
        value: Tensor,
        input: Option<Var<'t>>,
        mu: Option<Var<'t>>,
    ) -> Result<Var<'t>> {
        if let Some(x) = input {
            if x.shape() != value.shape() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "straight_through",
                    lhs: value.shape().to_vec(),
                    rhs: x.shape(),
                });
            }
        }
        if let Some(m) = mu {
            if m.numel() != 1 {
                return Err(AutodiffError::ShapeMismatch {
                    op: "straight_through (mu must be a scalar)",
                    lhs: value.shape().to_vec(),
                    rhs: m.shape(),
                });
            }
        }
        let ids: Vec<usize> = input.iter().chain(mu.iter()).map(|v| v.id).collect();
        Ok(self.push(
            value,
            Op::StraightThrough {
                input: input.map(|v| v.id),
                mu: mu.map(|v| v.id),
            },
            &ids,
        ))
    }
}

impl<'t> Var<'t> {
    /// Rows `start..start+len` of the leading axis.
    pub fn narrow0(self, start: usize, len: usize) -> Result<Var<'t>> {
        let out = self.value().narrow0(start, len)?;
        Ok(self.tape.push(
            out,
            Op::Narrow0 {
                input: self.id,
                start,
            },
            &[self.id],
        ))
    }

    /// Gather rows of the leading axis (repeats allowed).
    pub fn select0(self, rows: &[usize]) -> Result<Var<'t>> {
        let out = self.value().select0(rows)?;
        Ok(self.tape.push(
            out,
            Op::Select0 {
                input: self.id,
                rows: rows.to_vec(),
            },
            &[self.id],
        ))
    }

    /// Element `index` of a rank-1 variable, as a rank-0 variable.
    pub fn index(self, index: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.len() != 1 {
            return Err(AutodiffError::BadRank {
                op: "index",
                expected: 1,
                shape,
            });
        }
        self.select0(&[index])?.reshape(&[])
    }

    /// Mirror the last axis.
    pub fn flip_last(self) -> Var<'t> {
        let out = flip_last(&self.value());
        self.tape.push(out, Op::FlipLast { input: self.id }, &[self.id])
    }

    /// Elementwise `mask ? self : other` with a constant mask. Values are
    /// copied, never blended.
    pub fn where_mask(self, mask: &[bool], other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() || mask.len() != a.numel() {
            return Err(AutodiffError::ShapeMismatch {
                op: "where_mask",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let data = mask
            .iter()
            .zip(a.data().iter().zip(b.data()))
            .map(|(&m, (&x, &y))| if m { x } else { y })
            .collect();
        let out = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.tape.push(
            out,
            Op::Where {
                mask: mask.to_vec(),
                on_true: self.id,
                on_false: other.id,
            },
            &[self.id, other.id],
        ))
    }
}
