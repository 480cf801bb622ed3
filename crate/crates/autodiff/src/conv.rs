//! 2-D cross-correlation over NCHW batches, lowered to im2col + GEMM.

use crate::error::{AutodiffError, Result};
use crate::linalg::gemm;
use crate::tape::{Op, Var};
use crate::tensor::Tensor;

/// Static geometry of one convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    fn patch(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn input_shape(&self) -> [usize; 4] {
        [self.batch, self.in_channels, self.height, self.width]
    }

    fn output_shape(&self) -> [usize; 4] {
        [
            self.batch,
            self.out_channels,
            self.out_height(),
            self.out_width(),
        ]
    }

    fn from_shapes(x: &[usize], w: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if stride < 1 {
            return Err(AutodiffError::InvalidStride(stride));
        }
        let (&[n, c, h, wd], &[f, wc, kh, kw]) = (x, w) else {
            return Err(AutodiffError::BadRank {
                op: "conv2d",
                expected: 4,
                shape: if x.len() != 4 { x.to_vec() } else { w.to_vec() },
            });
        };
        if c != wc {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv2d",
                lhs: x.to_vec(),
                rhs: w.to_vec(),
            });
        }
        if kh > h + 2 * padding || kw > wd + 2 * padding {
            return Err(AutodiffError::KernelTooLarge {
                kernel: [kh, kw],
                input: [h + 2 * padding, wd + 2 * padding],
            });
        }
        Ok(Self {
            batch: n,
            in_channels: c,
            out_channels: f,
            height: h,
            width: wd,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
        })
    }
}

/// Unfold one image `[C,H,W]` into `[C*kh*kw, Ho*Wo]` columns.
fn im2col(g: &ConvGeom, img: &[f32], cols: &mut [f32]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let (h, w) = (g.height as isize, g.width as isize);
    let pad = g.padding as isize;
    let mut row = 0;
    for c in 0..g.in_channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - pad;
                        *v = if ix < 0 || ix >= w { 0.0 } else { src[ix as usize] };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Fold columns back, accumulating into one image `[C,H,W]`.
fn col2im(g: &ConvGeom, cols: &[f32], img: &mut [f32]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let (h, w) = (g.height as isize, g.width as isize);
    let pad = g.padding as isize;
    let mut row = 0;
    for c in 0..g.in_channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kj) as isize - pad;
                        if ix >= 0 && ix < w {
                            plane[iy as usize * g.width + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

pub(crate) fn conv_forward(g: &ConvGeom, x: &[f32], w: &[f32]) -> Vec<f32> {
    let (hw_in, hw_out) = (g.height * g.width, g.out_height() * g.out_width());
    let patch = g.patch();
    let mut cols = vec![0.0; patch * hw_out];
    let mut out = vec![0.0; g.batch * g.out_channels * hw_out];
    for n in 0..g.batch {
        im2col(g, &x[n * g.in_channels * hw_in..(n + 1) * g.in_channels * hw_in], &mut cols);
        let dst = &mut out[n * g.out_channels * hw_out..(n + 1) * g.out_channels * hw_out];
        gemm(g.out_channels, patch, hw_out, w, false, &cols, false, dst, false);
    }
    out
}

/// Gradient of the convolution w.r.t. its input (a transposed convolution).
pub(crate) fn conv_backward_input(g: &ConvGeom, gy: &[f32], w: &[f32]) -> Vec<f32> {
    let (hw_in, hw_out) = (g.height * g.width, g.out_height() * g.out_width());
    let patch = g.patch();
    let mut cols = vec![0.0; patch * hw_out];
    let mut gx = vec![0.0; g.batch * g.in_channels * hw_in];
    for n in 0..g.batch {
        let gyn = &gy[n * g.out_channels * hw_out..(n + 1) * g.out_channels * hw_out];
        gemm(patch, g.out_channels, hw_out, w, true, gyn, false, &mut cols, false);
        col2im(
            g,
            &cols,
            &mut gx[n * g.in_channels * hw_in..(n + 1) * g.in_channels * hw_in],
        );
    }
    gx
}

/// Gradient of the convolution w.r.t. its weights.
pub(crate) fn conv_backward_weight(g: &ConvGeom, x: &[f32], gy: &[f32]) -> Vec<f32> {
    let (hw_in, hw_out) = (g.height * g.width, g.out_height() * g.out_width());
    let patch = g.patch();
    let mut cols = vec![0.0; patch * hw_out];
    let mut gw = vec![0.0; g.out_channels * patch];
    for n in 0..g.batch {
        im2col(g, &x[n * g.in_channels * hw_in..(n + 1) * g.in_channels * hw_in], &mut cols);
        let gyn = &gy[n * g.out_channels * hw_out..(n + 1) * g.out_channels * hw_out];
        gemm(g.out_channels, hw_out, patch, gyn, false, &cols, true, &mut gw, true);
    }
    gw
}

impl<'t> Var<'t> {
    /// Cross-correlation of `self: [N,C,H,W]` with `weight: [F,C,kh,kw]`.
    pub fn conv2d(self, weight: Var<'t>, stride: usize, padding: usize) -> Result<Var<'t>> {
        self.same_tape(&weight);
        let (x, w) = (self.value(), weight.value());
        let geom = ConvGeom::from_shapes(x.shape(), w.shape(), stride, padding)?;
        let out = conv_forward(&geom, x.data(), w.data());
        Ok(self.tape.push(
            Tensor::new(geom.output_shape().to_vec(), out)?,
            Op::Conv2d {
                input: self.id,
                weight: weight.id,
                geom,
            },
            &[self.id, weight.id],
        ))
    }

    /// The input-gradient of a convolution, as a differentiable function of
    /// both the upstream gradient `self: [N,F,Ho,Wo]` and `weight`.
    ///
    /// `input_hw` is the spatial size of the convolution input being
    /// differentiated. Recording this on the tape lets a loss depend on an
    /// input-gradient while only ever running first-order reverse sweeps.
    pub fn conv2d_input_grad(
        self,
        weight: Var<'t>,
        input_hw: (usize, usize),
        stride: usize,
        padding: usize,
    ) -> Result<Var<'t>> {
        self.same_tape(&weight);
        let (gy, w) = (self.value(), weight.value());
        let ws = w.shape();
        let gs = gy.shape();
        if ws.len() != 4 || gs.len() != 4 {
            return Err(AutodiffError::BadRank {
                op: "conv2d_input_grad",
                expected: 4,
                shape: if gs.len() != 4 { gs.to_vec() } else { ws.to_vec() },
            });
        }
        let x_shape = [gs[0], ws[1], input_hw.0, input_hw.1];
        let geom = ConvGeom::from_shapes(&x_shape, ws, stride, padding)?;
        if geom.output_shape() != gs || gs[1] != ws[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv2d_input_grad",
                lhs: gs.to_vec(),
                rhs: geom.output_shape().to_vec(),
            });
        }
        let out = conv_backward_input(&geom, gy.data(), w.data());
        Ok(self.tape.push(
            Tensor::new(geom.input_shape().to_vec(), out)?,
            Op::Conv2dInputGrad {
                grad_out: self.id,
                weight: weight.id,
                geom,
            },
            &[self.id, weight.id],
        ))
    }
}
