//! Dense row-major `f32` tensors and the shape arithmetic shared by the ops.

use std::fmt;

use crate::error::{AutodiffError, Result};

/// An owned N-dimensional `f32` array stored row-major.
///
/// A tensor is plain data. Participation in differentiation happens by
/// recording it on a [`Tape`](crate::Tape), which hands back a
/// [`Var`](crate::Var).
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(AutodiffError::BadLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    /// A rank-0 tensor holding one value.
    pub fn scalar(value: f32) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let len: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..len).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<f32> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Flat offset of a multi-index. Panics on rank mismatch or overflow.
    pub fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut off = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            assert!(i < d, "index {i} out of bounds for dim {d}");
            off = off * d + i;
        }
        off
    }

    pub fn at(&self, index: &[usize]) -> f32 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f32) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    /// Slice `len` entries of the leading axis starting at `start`.
    pub fn narrow0(&self, start: usize, len: usize) -> Result<Self> {
        let lead = *self.shape.first().ok_or(AutodiffError::BadRank {
            op: "narrow0",
            expected: 1,
            shape: self.shape.clone(),
        })?;
        if start + len > lead {
            return Err(AutodiffError::IndexOutOfRange {
                index: start + len,
                len: lead,
            });
        }
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = len;
        Ok(Self {
            shape,
            data: self.data[start * inner..(start + len) * inner].to_vec(),
        })
    }

    /// Gather rows of the leading axis.
    pub fn select0(&self, rows: &[usize]) -> Result<Self> {
        let lead = *self.shape.first().ok_or(AutodiffError::BadRank {
            op: "select0",
            expected: 1,
            shape: self.shape.clone(),
        })?;
        let inner: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            if r >= lead {
                return Err(AutodiffError::IndexOutOfRange { index: r, len: lead });
            }
            data.extend_from_slice(&self.data[r * inner..(r + 1) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Ok(Self { shape, data })
    }

    /// Concatenate along the leading axis. All trailing dims must agree.
    pub fn concat0(parts: &[Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| AutodiffError::Invalid("concat0 of zero tensors".into()))?;
        if first.rank() == 0 {
            return Err(AutodiffError::BadRank {
                op: "concat0",
                expected: 1,
                shape: first.shape.clone(),
            });
        }
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.shape[1..] != first.shape[1..] || p.rank() != first.rank() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat0",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            lead += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = lead;
        Ok(Self { shape, data })
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?} [", self.shape)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", ... ({} total)", self.data.len())?;
        }
        write!(f, "]")
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Numpy-style broadcast of two shapes (right-aligned, dims equal or 1).
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every flat index of `out`, the flat index into a tensor of shape
/// `src` broadcast to `out`.
pub(crate) fn broadcast_map(src: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let src_strides = strides(src);
    // Effective strides in output-rank coordinates; zero where broadcast.
    let mut eff = vec![0usize; rank];
    for i in 0..src.len() {
        let oi = rank - src.len() + i;
        if src[i] != 1 {
            eff[oi] = src_strides[i];
        }
    }
    let total: usize = out.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..total {
        map.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += eff[d];
            if idx[d] < out[d] {
                break;
            }
            off -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

/// How a flat output index maps onto an operand broadcast to the output.
/// The common layouts avoid materializing an index table.
#[derive(Clone, Debug)]
pub(crate) enum Bcast {
    Same,
    /// Each operand element covers this many consecutive outputs
    /// (trailing axes broadcast; includes scalars).
    Repeat(usize),
    /// The operand repeats with this period (leading axes broadcast).
    Tile(usize),
    Map(Vec<usize>),
}

impl Bcast {
    pub(crate) fn new(src: &[usize], out: &[usize]) -> Self {
        let n: usize = src.iter().product();
        let total: usize = out.iter().product();
        if n == total {
            return Bcast::Same;
        }
        if n == 0 {
            return Bcast::Map(broadcast_map(src, out));
        }
        let rank = out.len();
        let padded: Vec<usize> = (0..rank)
            .map(|i| if i + src.len() >= rank { src[i + src.len() - rank] } else { 1 })
            .collect();
        let last = padded.iter().rposition(|&d| d != 1).map_or(0, |p| p + 1);
        if padded[..last] == out[..last] {
            return Bcast::Repeat(total / n);
        }
        let first = padded.iter().position(|&d| d != 1).unwrap_or(rank);
        if padded[first..] == out[first..] {
            return Bcast::Tile(n);
        }
        Bcast::Map(broadcast_map(src, out))
    }

    #[inline]
    pub(crate) fn index(&self, k: usize) -> usize {
        match self {
            Bcast::Same => k,
            Bcast::Repeat(r) => k / r,
            Bcast::Tile(p) => k % p,
            Bcast::Map(m) => m[k],
        }
    }
}
