//! Axis reductions. Sums and means accumulate in `f64`.

use crate::error::{AutodiffError, Result};
use crate::tape::{Op, Var};
use crate::tensor::{Bcast, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Min,
    Max,
}

pub(crate) struct Reduced {
    pub value: Tensor,
    pub keep_shape: Vec<usize>,
    pub arg: Vec<usize>,
}

pub(crate) fn reduce_forward(
    kind: ReduceKind,
    x: &Tensor,
    axes: &[usize],
    keepdim: bool,
) -> Result<Reduced> {
    let rank = x.rank();
    let mut reduced = vec![false; rank];
    for &a in axes {
        if a >= rank {
            return Err(AutodiffError::AxisOutOfRange { axis: a, rank });
        }
        reduced[a] = true;
    }
    let keep_shape: Vec<usize> = x
        .shape()
        .iter()
        .zip(&reduced)
        .map(|(&d, &r)| if r { 1 } else { d })
        .collect();
    let out_shape: Vec<usize> = if keepdim {
        keep_shape.clone()
    } else {
        x.shape()
            .iter()
            .zip(&reduced)
            .filter(|(_, &r)| !r)
            .map(|(&d, _)| d)
            .collect()
    };
    let out_len: usize = keep_shape.iter().product();
    let group: usize = if out_len == 0 { 0 } else { x.numel() / out_len };
    if matches!(kind, ReduceKind::Min | ReduceKind::Max) && group == 0 {
        return Err(AutodiffError::Invalid(
            "min/max over an empty axis".to_string(),
        ));
    }
    let map = Bcast::new(&keep_shape, x.shape());
    let data = x.data();
    let mut arg = Vec::new();
    let out: Vec<f32> = match kind {
        ReduceKind::Sum | ReduceKind::Mean => {
            let mut acc = vec![0.0f64; out_len];
            for (i, &v) in data.iter().enumerate() {
                acc[map.index(i)] += v as f64;
            }
            if kind == ReduceKind::Mean {
                let n = group as f64;
                acc.iter().map(|&v| (v / n) as f32).collect()
            } else {
                acc.iter().map(|&v| v as f32).collect()
            }
        }
        ReduceKind::Min | ReduceKind::Max => {
            let mut best: Vec<Option<usize>> = vec![None; out_len];
            for i in 0..data.len() {
                let o = map.index(i);
                let better = match best[o] {
                    None => true,
                    // Strict comparison keeps the first extremum on ties.
                    Some(j) if kind == ReduceKind::Max => data[i] > data[j],
                    Some(j) => data[i] < data[j],
                };
                if better {
                    best[o] = Some(i);
                }
            }
            arg = best.into_iter().map(|b| b.unwrap_or(0)).collect();
            arg.iter().map(|&i| data[i]).collect()
        }
    };
    Ok(Reduced {
        value: Tensor::new(out_shape, out)?,
        keep_shape,
        arg,
    })
}

pub(crate) fn reduce_backward(
    kind: ReduceKind,
    x: &Tensor,
    keep_shape: &[usize],
    arg: &[usize],
    g: &[f32],
) -> Vec<f32> {
    match kind {
        ReduceKind::Sum | ReduceKind::Mean => {
            let map = Bcast::new(keep_shape, x.shape());
            let scale = if kind == ReduceKind::Mean {
                let out_len: usize = keep_shape.iter().product();
                out_len as f32 / x.numel() as f32
            } else {
                1.0
            };
            (0..x.numel()).map(|i| g[map.index(i)] * scale).collect()
        }
        ReduceKind::Min | ReduceKind::Max => {
            let mut gx = vec![0.0; x.numel()];
            for (o, &i) in arg.iter().enumerate() {
                gx[i] += g[o];
            }
            gx
        }
    }
}

impl<'t> Var<'t> {
    pub fn reduce(self, kind: ReduceKind, axes: &[usize], keepdim: bool) -> Result<Var<'t>> {
        let x = self.value();
        let r = reduce_forward(kind, &x, axes, keepdim)?;
        Ok(self.tape.push(
            r.value,
            Op::Reduce {
                input: self.id,
                kind,
                keep_shape: r.keep_shape,
                arg: r.arg,
            },
            &[self.id],
        ))
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum(self) -> Var<'t> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.reduce(ReduceKind::Sum, &axes, false)
            .expect("axes in range")
    }

    pub fn mean(self) -> Var<'t> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.reduce(ReduceKind::Mean, &axes, false)
            .expect("axes in range")
    }

    pub fn sum_axes(self, axes: &[usize], keepdim: bool) -> Result<Var<'t>> {
        self.reduce(ReduceKind::Sum, axes, keepdim)
    }

    pub fn mean_axes(self, axes: &[usize], keepdim: bool) -> Result<Var<'t>> {
        self.reduce(ReduceKind::Mean, axes, keepdim)
    }

    pub fn max_axes(self, axes: &[usize], keepdim: bool) -> Result<Var<'t>> {
        self.reduce(ReduceKind::Max, axes, keepdim)
    }

    pub fn min_axes(self, axes: &[usize], keepdim: bool) -> Result<Var<'t>> {
        self.reduce(ReduceKind::Min, axes, keepdim)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tape;

    fn vec1(v: &[f32]) -> Tensor {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn mean_and_its_gradient() {
        let tape = Tape::new();
        let x = tape.param(vec1(&[2.0, 4.0, 6.0]));
        let m = x.mean();
        assert_eq!(m.item(), Some(4.0));
        m.backward().unwrap();
        let g = tape.grad(x).unwrap();
        for &v in g.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn empty_axis_list_is_identity() {
        let tape = Tape::new();
        let x = tape.param(vec1(&[1.0, -2.0]));
        let y = x.sum_axes(&[], false).unwrap();
        assert_eq!(y.value().data(), &[1.0, -2.0]);
        assert_eq!(y.shape(), vec![2]);
    }

    #[test]
    fn max_routes_to_argmax_only() {
        let tape = Tape::new();
        let x = tape.param(vec1(&[1.0, 5.0, 3.0]));
        let m = x.max_axes(&[0], false).unwrap();
        assert_eq!(m.item(), Some(5.0));
        m.backward().unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn max_tie_goes_to_first() {
        let tape = Tape::new();
        let x = tape.param(vec1(&[5.0, 1.0, 5.0]));
        x.max_axes(&[0], false).unwrap().backward().unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn axis_out_of_range() {
        let tape = Tape::new();
        let x = tape.param(vec1(&[1.0]));
        assert!(matches!(
            x.sum_axes(&[1], false),
            Err(AutodiffError::AxisOutOfRange { axis: 1, rank: 1 })
        ));
    }

    #[test]
    fn reduce_inner_axes_keepdim() {
        let x = Tensor::from_fn(&[2, 2, 3], |i| i as f32);
        let r = reduce_forward(ReduceKind::Sum, &x, &[1, 2], true).unwrap();
        assert_eq!(r.value.shape(), &[2, 1, 1]);
        assert_eq!(r.value.data(), &[15.0, 51.0]);
    }
}
