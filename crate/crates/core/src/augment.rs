//! Differentiable forward implementations of every operation.
//!
//! Inputs are `[N,C,H,W]` images in `[0,1]` and a scalar magnitude μ in
//! `[0,1]`; outputs are `[N,C,H,W]` in `[0,1]`.

use crate::ops::{params, OpKind};
use augsearch_autodiff::{AutodiffError, Result, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use std::f32::consts::PI;

/// Random choices an operation makes, drawn before it runs so that the
/// reference implementations can replay them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OpDraws {
    /// Per-image `(row, col)` cutout centers.
    pub cutout_centers: Vec<(usize, usize)>,
    /// Per-image partner index for sample pairing.
    pub pairing: Vec<usize>,
}

impl OpDraws {
    pub fn sample(kind: OpKind, n: usize, h: usize, w: usize, rng: &mut impl Rng) -> Self {
        match kind {
            OpKind::Cutout => OpDraws {
                cutout_centers: (0..n)
                    .map(|_| (rng.gen_range(0..h), rng.gen_range(0..w)))
                    .collect(),
                pairing: Vec::new(),
            },
            OpKind::SamplePairing => {
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(rng);
                OpDraws {
                    cutout_centers: Vec::new(),
                    pairing: perm,
                }
            }
            _ => OpDraws::default(),
        }
    }
}

pub(crate) fn dims(shape: &[usize]) -> Result<[usize; 4]> {
    match shape {
        &[n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(AutodiffError::BadRank {
            op: "augmentation",
            expected: 4,
            shape: shape.to_vec(),
        }),
    }
}

/// Applies `kind` with magnitude `mu` (a scalar variable) to `x`.
pub fn apply<'t>(kind: OpKind, x: Var<'t>, mu: Var<'t>, draws: &OpDraws) -> Result<Var<'t>> {
    let [n, c, h, w] = dims(&x.shape())?;
    if mu.numel() != 1 {
        return Err(AutodiffError::Invalid(format!(
            "magnitude must be a scalar, got shape {:?}",
            mu.shape()
        )));
    }
    let tape = x.tape();
    match kind {
        OpKind::ShearX
        | OpKind::ShearY
        | OpKind::TranslateX
        | OpKind::TranslateY
        | OpKind::Rotate => {
            let theta = affine_theta(kind, mu, h, w)?;
            let grid = theta.affine_grid(h, w)?;
            Ok(x.grid_sample(grid)?.clamp01())
        }
        OpKind::Flip => Ok(x.flip_last()),
        OpKind::Invert => Ok(x.rsub_scalar(1.0)),
        OpKind::Solarize => {
            let thr = params::solarize_threshold(mu.item().expect("scalar"));
            let mask: Vec<bool> = x.value().data().iter().map(|&v| v >= thr).collect();
            let routed = x.rsub_scalar(1.0).where_mask(&mask, x)?;
            tape.straight_through((*routed.value()).clone(), Some(routed), Some(mu))
        }
        OpKind::Posterize => {
            let bits = params::posterize_bits(mu.item().expect("scalar"));
            let value = x.value().map(|v| posterize_value(v, bits));
            tape.straight_through(value, Some(x), Some(mu))
        }
        OpKind::Contrast | OpKind::Color | OpKind::Brightness => {
            let t = mu.affine(1.8, 0.1).clamp(0.0, 2.0);
            let degenerate = match kind {
                OpKind::Contrast => Some(luma(x)?.mean_axes(&[1, 2, 3], true)?),
                OpKind::Color => Some(luma(x)?),
                _ => None,
            };
            let out = match degenerate {
                Some(d) => d.add(x.sub(d)?.mul(t)?)?,
                None => x.mul(t)?,
            };
            Ok(out.clamp01())
        }
        OpKind::Sharpness => sharpness(x, n, c, h, w),
        OpKind::AutoContrast => {
            let (lo, range) = channel_stretch(&x.value(), n, c, h * w);
            let lo = tape.constant(lo);
            let range = tape.constant(range);
            Ok(x.sub(lo)?.div(range)?.clamp01())
        }
        OpKind::Equalize => {
            let value = equalize(&x.value(), n, c, h * w);
            tape.straight_through(value, Some(x), None)
        }
        OpKind::Cutout => {
            if draws.cutout_centers.len() != n {
                return Err(AutodiffError::Invalid(format!(
                    "cutout needs {n} centers, got {}",
                    draws.cutout_centers.len()
                )));
            }
            let side = params::cutout_side(mu.item().expect("scalar"), h, w);
            let keep = cutout_keep_mask(&draws.cutout_centers, side, c, h, w);
            let fill = tape.constant(Tensor::full(&[n, c, h, w], params::CUTOUT_FILL));
            let routed = x.where_mask(&keep, fill)?;
            tape.straight_through((*routed.value()).clone(), Some(routed), Some(mu))
        }
        OpKind::SamplePairing => {
            if draws.pairing.len() != n {
                return Err(AutodiffError::Invalid(format!(
                    "sample pairing needs a permutation of {n}, got {}",
                    draws.pairing.len()
                )));
            }
            let alpha = mu.scale(0.4);
            let partner = x.select0(&draws.pairing)?;
            Ok(x.add(partner.sub(x)?.mul(alpha)?)?.clamp01())
        }
    }
}

/// The `[2,3]` map from normalized output coordinates to normalized source
/// coordinates. Aspect factors keep rotations and shears isotropic in pixel
/// units on non-square images.
fn affine_theta<'t>(kind: OpKind, mu: Var<'t>, h: usize, w: usize) -> Result<Var<'t>> {
    let tape = mu.tape();
    let zero = tape.scalar(0.0);
    let one = tape.scalar(1.0);
    let signed = mu.affine(2.0, -1.0);
    let h_over_w = h as f32 / w as f32;
    let w_over_h = w as f32 / h as f32;
    let entries = match kind {
        OpKind::Rotate => {
            let a = signed.scale(30.0 * PI / 180.0);
            let (cos, sin) = (a.cos(), a.sin());
            [cos, sin.scale(-h_over_w), zero, sin.scale(w_over_h), cos, zero]
        }
        OpKind::ShearX => [one, signed.scale(0.3 * h_over_w), zero, zero, one, zero],
        OpKind::ShearY => [one, zero, zero, signed.scale(0.3 * w_over_h), one, zero],
        OpKind::TranslateX => [one, zero, signed.scale(0.6), zero, one, zero],
        OpKind::TranslateY => [one, zero, zero, zero, one, signed.scale(0.6)],
        _ => unreachable!("not an affine op"),
    };
    tape.stack(&entries)?.reshape(&[2, 3])
}

fn luma<'t>(x: Var<'t>) -> Result<Var<'t>> {
    match x.shape()[1] {
        1 => Ok(x),
        3 => {
            let wts = Tensor::new(vec![1, 3, 1, 1], params::LUMA.to_vec())?;
            x.mul_const(wts)?.sum_axes(&[1], true)
        }
        _ => x.mean_axes(&[1], true),
    }
}

pub(crate) const SMOOTH_KERNEL: [f32; 9] = [1.0, 1.0, 1.0, 1.0, 5.0, 1.0, 1.0, 1.0, 1.0];

fn sharpness<'t>(x: Var<'t>, n: usize, c: usize, h: usize, w: usize) -> Result<Var<'t>> {
    if h < 3 || w < 3 {
        return Ok(x);
    }
    let tape = x.tape();
    let kernel = Tensor::new(vec![1, 1, 3, 3], SMOOTH_KERNEL.map(|v| v / 13.0).to_vec())?;
    let blur = x
        .reshape(&[n * c, 1, h, w])?
        .conv2d(tape.constant(kernel), 1, 1)?
        .reshape(&[n, c, h, w])?;
    let f = params::SHARPNESS_FACTOR;
    let sharp = x.scale(f).sub(blur.scale(f - 1.0))?.clamp01();
    let interior: Vec<bool> = (0..n * c * h * w)
        .map(|i| {
            let (r, col) = ((i / w) % h, i % w);
            r > 0 && r + 1 < h && col > 0 && col + 1 < w
        })
        .collect();
    sharp.where_mask(&interior, x)
}

pub(crate) fn posterize_value(v: f32, bits: u32) -> f32 {
    let levels = ((1u32 << bits) - 1) as f32;
    (v * levels + 0.5).floor() / levels
}

/// Per-channel `(lo, hi - lo)` as `[N,C,1,1]` tensors; constant channels get
/// `(0, 1)` so the rescale leaves them unchanged.
fn channel_stretch(x: &Tensor, n: usize, c: usize, plane: usize) -> (Tensor, Tensor) {
    let mut lo = Vec::with_capacity(n * c);
    let mut range = Vec::with_capacity(n * c);
    for chunk in x.data().chunks(plane) {
        let mn = chunk.iter().copied().fold(f32::INFINITY, f32::min);
        let mx = chunk.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        if mx > mn {
            lo.push(mn);
            range.push(mx - mn);
        } else {
            lo.push(0.0);
            range.push(1.0);
        }
    }
    (
        Tensor::new(vec![n, c, 1, 1], lo).expect("shape"),
        Tensor::new(vec![n, c, 1, 1], range).expect("shape"),
    )
}

pub(crate) fn level(v: f32) -> usize {
    (v * 255.0).round().clamp(0.0, 255.0) as usize
}

/// 256-bin cumulative-histogram equalization of each channel plane.
/// Degenerate planes (one occupied bin, or too few pixels outside the top
/// bin to define a step) are returned unchanged.
fn equalize(x: &Tensor, n: usize, c: usize, plane: usize) -> Tensor {
    let mut out = Vec::with_capacity(n * c * plane);
    for chunk in x.data().chunks(plane) {
        let mut hist = [0usize; 256];
        for &v in chunk {
            hist[level(v)] += 1;
        }
        let last = hist.iter().rposition(|&k| k > 0).unwrap_or(0);
        let occupied = hist.iter().filter(|&&k| k > 0).count();
        let step = (plane - hist[last]) / 255;
        if occupied <= 1 || step == 0 {
            out.extend_from_slice(chunk);
            continue;
        }
        let mut lut = [0f32; 256];
        let mut below = 0;
        for (i, slot) in lut.iter_mut().enumerate() {
            *slot = ((step / 2 + below) / step).min(255) as f32 / 255.0;
            below += hist[i];
        }
        out.extend(chunk.iter().map(|&v| lut[level(v)]));
    }
    Tensor::new(x.shape().to_vec(), out).expect("shape")
}

/// Row span `[start, end)` of a cutout patch of `side` centered at `center`
/// on an axis of length `len`.
pub(crate) fn patch_span(center: usize, side: usize, len: usize) -> (usize, usize) {
    let start = center as isize - (side / 2) as isize;
    let end = start + side as isize;
    (start.clamp(0, len as isize) as usize, end.clamp(0, len as isize) as usize)
}

fn cutout_keep_mask(centers: &[(usize, usize)], side: usize, c: usize, h: usize, w: usize) -> Vec<bool> {
    let mut keep = vec![true; centers.len() * c * h * w];
    for (img, &(cy, cx)) in centers.iter().enumerate() {
        let (r0, r1) = patch_span(cy, side, h);
        let (c0, c1) = patch_span(cx, side, w);
        for ch in 0..c {
            let base = (img * c + ch) * h * w;
            for r in r0..r1 {
                keep[base + r * w + c0..base + r * w + c1].fill(false);
            }
        }
    }
    keep
}

/// Convenience wrapper: applies `kind` to a constant image with a constant
/// magnitude on a throwaway tape and returns the value.
pub fn apply_value(kind: OpKind, x: &Tensor, mu: f32, draws: &OpDraws) -> Result<Tensor> {
    let tape = Tape::new();
    let out = apply(kind, tape.constant(x.clone()), tape.scalar(mu), draws)?;
    let v = (*out.value()).clone();
    Ok(v)
}
