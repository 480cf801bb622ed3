//! Differentiable resampling: affine sampling grids and bilinear lookup.
//!
//! Coordinates are normalized to `[-1, 1]` with the align-corners=false
//! convention: pixel `i` of an axis of size `n` has its center at
//! `(2i + 1) / n - 1`. Samples outside the image read as zero.

use crate::error::{AutodiffError, Result};
use crate::tape::{Op, Var};
use crate::tensor::Tensor;

/// Normalized coordinate of pixel center `i` on an axis of length `n`.
pub fn pixel_center(i: usize, n: usize) -> f64 {
    (2 * i + 1) as f64 / n as f64 - 1.0
}

/// Continuous pixel index of a normalized coordinate.
pub fn unnormalize(coord: f64, n: usize) -> f64 {
    ((coord + 1.0) * n as f64 - 1.0) / 2.0
}

struct Corners {
    x0: isize,
    y0: isize,
    fx: f32,
    fy: f32,
}

fn corners(gx: f32, gy: f32, w: usize, h: usize) -> Corners {
    let ix = unnormalize(gx as f64, w);
    let iy = unnormalize(gy as f64, h);
    let (x0, y0) = (ix.floor(), iy.floor());
    Corners {
        x0: x0 as isize,
        y0: y0 as isize,
        fx: (ix - x0) as f32,
        fy: (iy - y0) as f32,
    }
}

#[inline]
fn tap(plane: &[f32], w: usize, h: usize, x: isize, y: isize) -> f32 {
    if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
        0.0
    } else {
        plane[y as usize * w + x as usize]
    }
}

fn check_shapes(x: &Tensor, grid: &Tensor) -> Result<()> {
    let xs = x.shape();
    let gs = grid.shape();
    if xs.len() != 4 {
        return Err(AutodiffError::BadRank {
            op: "grid_sample",
            expected: 4,
            shape: xs.to_vec(),
        });
    }
    if gs.len() != 4 || gs[3] != 2 {
        return Err(AutodiffError::ShapeMismatch {
            op: "grid_sample (grid must be [N,H,W,2])",
            lhs: xs.to_vec(),
            rhs: gs.to_vec(),
        });
    }
    if gs[0] != xs[0] && gs[0] != 1 {
        return Err(AutodiffError::ShapeMismatch {
            op: "grid_sample (batch)",
            lhs: xs.to_vec(),
            rhs: gs.to_vec(),
        });
    }
    Ok(())
}

pub(crate) fn grid_sample_forward(x: &Tensor, grid: &Tensor) -> Tensor {
    let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [gn, ho, wo] = [grid.shape()[0], grid.shape()[1], grid.shape()[2]];
    let (xd, gd) = (x.data(), grid.data());
    let mut out = vec![0.0; n * c * ho * wo];
    for b in 0..n {
        let gb = if gn == 1 { 0 } else { b };
        for oy in 0..ho {
            for ox in 0..wo {
                let gi = ((gb * ho + oy) * wo + ox) * 2;
                let k = corners(gd[gi], gd[gi + 1], w, h);
                let (w00, w01) = ((1.0 - k.fx) * (1.0 - k.fy), k.fx * (1.0 - k.fy));
                let (w10, w11) = ((1.0 - k.fx) * k.fy, k.fx * k.fy);
                for ch in 0..c {
                    let plane = &xd[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                    let v = w00 * tap(plane, w, h, k.x0, k.y0)
                        + w01 * tap(plane, w, h, k.x0 + 1, k.y0)
                        + w10 * tap(plane, w, h, k.x0, k.y0 + 1)
                        + w11 * tap(plane, w, h, k.x0 + 1, k.y0 + 1);
                    out[((b * c + ch) * ho + oy) * wo + ox] = v;
                }
            }
        }
    }
    Tensor::new(vec![n, c, ho, wo], out).expect("grid_sample output shape")
}

pub(crate) fn grid_sample_backward(
    x: &Tensor,
    grid: &Tensor,
    g: &[f32],
    want_x: bool,
    want_grid: bool,
) -> (Vec<f32>, Vec<f32>) {
    let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [gn, ho, wo] = [grid.shape()[0], grid.shape()[1], grid.shape()[2]];
    let (xd, gd) = (x.data(), grid.data());
    let mut gx = if want_x { vec![0.0; x.numel()] } else { Vec::new() };
    let mut ggrid = if want_grid { vec![0.0f64; grid.numel()] } else { Vec::new() };
    let (sx, sy) = (w as f32 / 2.0, h as f32 / 2.0);
    let inside = |x: isize, y: isize| x >= 0 && y >= 0 && x < w as isize && y < h as isize;
    for b in 0..n {
        let gb = if gn == 1 { 0 } else { b };
        for oy in 0..ho {
            for ox in 0..wo {
                let gi = ((gb * ho + oy) * wo + ox) * 2;
                let k = corners(gd[gi], gd[gi + 1], w, h);
                let taps = [
                    (k.x0, k.y0, (1.0 - k.fx) * (1.0 - k.fy)),
                    (k.x0 + 1, k.y0, k.fx * (1.0 - k.fy)),
                    (k.x0, k.y0 + 1, (1.0 - k.fx) * k.fy),
                    (k.x0 + 1, k.y0 + 1, k.fx * k.fy),
                ];
                let mut dgx = 0.0f32;
                let mut dgy = 0.0f32;
                for ch in 0..c {
                    let base = (b * c + ch) * h * w;
                    let go = g[((b * c + ch) * ho + oy) * wo + ox];
                    if go == 0.0 {
                        continue;
                    }
                    if want_x {
                        for &(tx, ty, wt) in &taps {
                            if inside(tx, ty) {
                                gx[base + ty as usize * w + tx as usize] += go * wt;
                            }
                        }
                    }
                    if want_grid {
                        let plane = &xd[base..base + h * w];
                        let v00 = tap(plane, w, h, k.x0, k.y0);
                        let v01 = tap(plane, w, h, k.x0 + 1, k.y0);
                        let v10 = tap(plane, w, h, k.x0, k.y0 + 1);
                        let v11 = tap(plane, w, h, k.x0 + 1, k.y0 + 1);
                        dgx += go * ((1.0 - k.fy) * (v01 - v00) + k.fy * (v11 - v10));
                        dgy += go * ((1.0 - k.fx) * (v10 - v00) + k.fx * (v11 - v01));
                    }
                }
                if want_grid {
                    ggrid[gi] += (dgx * sx) as f64;
                    ggrid[gi + 1] += (dgy * sy) as f64;
                }
            }
        }
    }
    (gx, ggrid.into_iter().map(|v| v as f32).collect())
}

pub(crate) fn affine_grid_forward(theta: &Tensor, h: usize, w: usize) -> Tensor {
    let t: Vec<f64> = theta.data().iter().map(|&v| v as f64).collect();
    let mut out = Vec::with_capacity(h * w * 2);
    for i in 0..h {
        let yn = pixel_center(i, h);
        for j in 0..w {
            let xn = pixel_center(j, w);
            out.push((t[0] * xn + t[1] * yn + t[2]) as f32);
            out.push((t[3] * xn + t[4] * yn + t[5]) as f32);
        }
    }
    Tensor::new(vec![1, h, w, 2], out).expect("affine grid shape")
}

pub(crate) fn affine_grid_backward(h: usize, w: usize, g: &[f32]) -> Vec<f32> {
    let mut acc = [0.0f64; 6];
    for i in 0..h {
        let yn = pixel_center(i, h);
        for j in 0..w {
            let xn = pixel_center(j, w);
            let k = (i * w + j) * 2;
            let (gx, gy) = (g[k] as f64, g[k + 1] as f64);
            acc[0] += gx * xn;
            acc[1] += gx * yn;
            acc[2] += gx;
            acc[3] += gy * xn;
            acc[4] += gy * yn;
            acc[5] += gy;
        }
    }
    acc.iter().map(|&v| v as f32).collect()
}

impl<'t> Var<'t> {
    /// Bilinear sampling of `self: [N,C,H,W]` at `grid: [N or 1, Ho, Wo, 2]`
    /// (last axis is `(x, y)` in normalized coordinates), zero padding.
    pub fn grid_sample(self, grid: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&grid);
        let (x, gr) = (self.value(), grid.value());
        check_shapes(&x, &gr)?;
        let out = grid_sample_forward(&x, &gr);
        Ok(self.tape.push(
            out,
            Op::GridSample {
                input: self.id,
                grid: grid.id,
            },
            &[self.id, grid.id],
        ))
    }

    /// Sampling grid `[1,H,W,2]` of the affine map `self: [2,3]` applied to
    /// normalized output pixel centers.
    pub fn affine_grid(self, height: usize, width: usize) -> Result<Var<'t>> {
        let theta = self.value();
        if theta.shape() != [2, 3] {
            return Err(AutodiffError::BadRank {
                op: "affine_grid (theta must be [2,3])",
                expected: 2,
                shape: theta.shape().to_vec(),
            });
        }
        let out = affine_grid_forward(&theta, height, width);
        Ok(self
            .tape
            .push(out, Op::AffineGrid { theta: self.id }, &[self.id]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tape;

    fn identity_theta(tape: &Tape) -> Var<'_> {
        tape.constant(Tensor::new(vec![2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap())
    }

    #[test]
    fn identity_grid_reproduces_input() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 8, 8], |i| ((i * 37) % 101) as f32 / 100.0));
        let grid = identity_theta(&tape).affine_grid(8, 8).unwrap();
        let y = x.grid_sample(grid).unwrap();
        assert_eq!(*y.value(), *x.value());
    }

    #[test]
    fn identity_grid_non_square() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[1, 1, 4, 8], |i| i as f32));
        let grid = identity_theta(&tape).affine_grid(4, 8).unwrap();
        assert_eq!(*x.grid_sample(grid).unwrap().value(), *x.value());
    }

    #[test]
    fn out_of_range_grid_reads_zero() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 2, 4, 4]));
        let theta = tape.constant(
            Tensor::new(vec![2, 3], vec![1.0, 0.0, 5.0, 0.0, 1.0, 0.0]).unwrap(),
        );
        let grid = theta.affine_grid(4, 4).unwrap();
        let y = x.grid_sample(grid).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grid_last_dim_must_be_two() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 1, 4, 4]));
        let grid = tape.constant(Tensor::zeros(&[1, 4, 4, 3]));
        assert!(x.grid_sample(grid).is_err());
    }

    #[test]
    fn half_pixel_shift_averages_neighbours() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 1, 1, 2], vec![0.0, 1.0]).unwrap());
        // x = 0 in normalized coords sits between the two pixel centers.
        let grid = tape.constant(Tensor::new(vec![1, 1, 1, 2], vec![0.0, 0.0]).unwrap());
        assert_eq!(x.grid_sample(grid).unwrap().item(), Some(0.5));
    }
}
