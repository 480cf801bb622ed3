//! Vector-Jacobian products for every recorded primitive.

use crate::conv::{conv_backward_input, conv_backward_weight, conv_forward};
use crate::elementwise::binary_backward;
use crate::linalg::{matmul_backward, transpose2};
use crate::reduce::reduce_backward;
use crate::sample::{affine_grid_backward, grid_sample_backward};
use crate::structural::flip_last;
use crate::tape::{Node, Op};
use crate::tensor::Tensor;

fn wants(nodes: &[Node], id: usize) -> bool {
    nodes[id].requires_grad
}

pub(crate) fn apply(nodes: &[Node], node: &Node, g: &[f32]) -> Vec<(usize, Vec<f32>)> {
    let val = |id: usize| -> &Tensor { &nodes[id].value };
    let y = &node.value;
    match &node.op {
        Op::Leaf => Vec::new(),
        Op::Unary { input, kind } => {
            let x = val(*input);
            let gx = x
                .data()
                .iter()
                .zip(y.data())
                .zip(g)
                .map(|((&xv, &yv), &gv)| gv * kind.derivative(xv, yv))
                .collect();
            vec![(*input, gx)]
        }
        Op::Binary { lhs, rhs, kind } => {
            let want = (wants(nodes, *lhs), wants(nodes, *rhs));
            let (ga, gb) = binary_backward(*kind, val(*lhs), val(*rhs), y, g, want);
            [(*lhs, ga), (*rhs, gb)]
                .into_iter()
                .filter_map(|(id, g)| g.map(|g| (id, g)))
                .collect()
        }
        Op::Reduce {
            input,
            kind,
            keep_shape,
            arg,
        } => vec![(*input, reduce_backward(*kind, val(*input), keep_shape, arg, g))],
        Op::MatMul { lhs, rhs } => {
            let (ga, gb) = matmul_backward(val(*lhs), val(*rhs), g);
            vec![(*lhs, ga), (*rhs, gb)]
        }
        Op::Transpose { input } => {
            let gt = Tensor::new(y.shape().to_vec(), g.to_vec()).expect("grad shape");
            vec![(*input, transpose2(&gt).into_data())]
        }
        Op::Reshape { input } => vec![(*input, g.to_vec())],
        Op::Conv2d {
            input,
            weight,
            geom,
        } => {
            let mut out = Vec::with_capacity(2);
            if wants(nodes, *input) {
                out.push((*input, conv_backward_input(geom, g, val(*weight).data())));
            }
            if wants(nodes, *weight) {
                out.push((*weight, conv_backward_weight(geom, val(*input).data(), g)));
            }
            out
        }
        Op::Conv2dInputGrad {
            grad_out,
            weight,
            geom,
        } => {
            // Forward is x_grad = convT(gy, w); it is linear in each argument.
            let mut out = Vec::with_capacity(2);
            if wants(nodes, *grad_out) {
                out.push((*grad_out, conv_forward(geom, g, val(*weight).data())));
            }
            if wants(nodes, *weight) {
                out.push((*weight, conv_backward_weight(geom, g, val(*grad_out).data())));
            }
            out
        }
        Op::GridSample { input, grid } => {
            let (wx, wg) = (wants(nodes, *input), wants(nodes, *grid));
            let (gx, gg) = grid_sample_backward(val(*input), val(*grid), g, wx, wg);
            let mut out = Vec::with_capacity(2);
            if wx {
                out.push((*input, gx));
            }
            if wg {
                out.push((*grid, gg));
            }
            out
        }
        Op::AffineGrid { theta } => {
            let (h, w) = (y.shape()[1], y.shape()[2]);
            vec![(*theta, affine_grid_backward(h, w, g))]
        }
        Op::Narrow0 { input, start } => {
            let x = val(*input);
            let inner: usize = x.shape()[1..].iter().product();
            let mut gx = vec![0.0; x.numel()];
            gx[start * inner..start * inner + g.len()].copy_from_slice(g);
            vec![(*input, gx)]
        }
        Op::Select0 { input, rows } => {
            let x = val(*input);
            let inner: usize = x.shape()[1..].iter().product();
            let mut gx = vec![0.0; x.numel()];
            for (k, &r) in rows.iter().enumerate() {
                let src = &g[k * inner..(k + 1) * inner];
                gx[r * inner..(r + 1) * inner]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(a, b)| *a += b);
            }
            vec![(*input, gx)]
        }
        Op::Concat0 { inputs } => {
            let mut off = 0;
            inputs
                .iter()
                .map(|&id| {
                    let n = val(id).numel();
                    let part = g[off..off + n].to_vec();
                    off += n;
                    (id, part)
                })
                .collect()
        }
        Op::FlipLast { input } => {
            let gt = Tensor::new(y.shape().to_vec(), g.to_vec()).expect("grad shape");
            vec![(*input, flip_last(&gt).into_data())]
        }
        Op::Where {
            mask,
            on_true,
            on_false,
        } => {
            let gt = mask
                .iter()
                .zip(g)
                .map(|(&m, &v)| if m { v } else { 0.0 })
                .collect();
            let gf = mask
                .iter()
                .zip(g)
                .map(|(&m, &v)| if m { 0.0 } else { v })
                .collect();
            vec![(*on_true, gt), (*on_false, gf)]
        }
        Op::StraightThrough { input, mu } => {
            let mut out = Vec::with_capacity(2);
            if let Some(x) = input {
                out.push((*x, g.to_vec()));
            }
            if let Some(m) = mu {
                let s: f64 = g.iter().map(|&v| v as f64).sum();
                out.push((*m, vec![s as f32]));
            }
            out
        }
    }
}
