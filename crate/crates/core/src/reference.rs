//! Plain, non-differentiable implementations of every operation, written
//! directly in pixel space. They serve as forward oracles for the
//! differentiable versions and as the transform behind synthetic targets.

use crate::augment::OpDraws;
use crate::ops::{params, OpKind};
use augsearch_autodiff::Tensor;

struct Planes<'a> {
    data: &'a [f32],
    h: usize,
    w: usize,
}

impl Planes<'_> {
    fn get(&self, plane: usize, r: isize, c: isize) -> f64 {
        if r < 0 || c < 0 || r >= self.h as isize || c >= self.w as isize {
            0.0
        } else {
            self.data[plane * self.h * self.w + r as usize * self.w + c as usize] as f64
        }
    }

    /// Bilinear read at continuous pixel coordinates (pixel centers at
    /// integers), zero outside.
    fn bilinear(&self, plane: usize, y: f64, x: f64) -> f64 {
        let (y0, x0) = (y.floor(), x.floor());
        let (fy, fx) = (y - y0, x - x0);
        let (r, c) = (y0 as isize, x0 as isize);
        (1.0 - fy) * ((1.0 - fx) * self.get(plane, r, c) + fx * self.get(plane, r, c + 1))
            + fy * ((1.0 - fx) * self.get(plane, r + 1, c) + fx * self.get(plane, r + 1, c + 1))
    }
}

fn clamp01(v: f64) -> f32 {
    v.clamp(0.0, 1.0) as f32
}

/// Applies `kind` at magnitude `mu` to `x: [N,C,H,W]`.
pub fn apply(kind: OpKind, x: &Tensor, mu: f32, draws: &OpDraws) -> Tensor {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let phys = kind.magnitude_map().apply(mu as f64);
    let src = Planes {
        data: x.data(),
        h,
        w,
    };
    let mut out = vec![0f32; x.numel()];
    let at = |p: usize, r: usize, col: usize| (p * h + r) * w + col;

    match kind {
        OpKind::Rotate | OpKind::ShearX | OpKind::ShearY | OpKind::TranslateX | OpKind::TranslateY => {
            let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
            let (sin, cos) = phys.to_radians().sin_cos();
            for p in 0..n * c {
                for r in 0..h {
                    for col in 0..w {
                        // Offsets of the output pixel center from the image center.
                        let dy = r as f64 + 0.5 - cy;
                        let dx = col as f64 + 0.5 - cx;
                        let (sx, sy) = match kind {
                            OpKind::Rotate => (cos * dx - sin * dy, sin * dx + cos * dy),
                            OpKind::ShearX => (dx + phys * dy, dy),
                            OpKind::ShearY => (dx, dy + phys * dx),
                            OpKind::TranslateX => (dx + phys * w as f64, dy),
                            _ => (dx, dy + phys * h as f64),
                        };
                        let v = src.bilinear(p, sy + cy - 0.5, sx + cx - 0.5);
                        out[at(p, r, col)] = clamp01(v);
                    }
                }
            }
        }
        OpKind::Flip => {
            for p in 0..n * c {
                for r in 0..h {
                    for col in 0..w {
                        out[at(p, r, col)] = x.data()[at(p, r, w - 1 - col)];
                    }
                }
            }
        }
        OpKind::Invert => {
            for (o, &v) in out.iter_mut().zip(x.data()) {
                *o = 1.0 - v;
            }
        }
        OpKind::Solarize => {
            let thr = params::solarize_threshold(mu);
            for (o, &v) in out.iter_mut().zip(x.data()) {
                *o = if v < thr { v } else { 1.0 - v };
            }
        }
        OpKind::Posterize => {
            let bits = phys as i32;
            let top = (2f32).powi(bits) - 1.0;
            for (o, &v) in out.iter_mut().zip(x.data()) {
                *o = (v * top + 0.5).floor() / top;
            }
        }
        OpKind::Contrast | OpKind::Color | OpKind::Brightness => {
            let t = phys;
            for img in 0..n {
                let gray = |r: usize, col: usize| -> f64 {
                    match c {
                        1 => src.get(img, r as isize, col as isize),
                        3 => (0..3)
                            .map(|ch| params::LUMA[ch] as f64 * src.get(img * 3 + ch, r as isize, col as isize))
                            .sum(),
                        _ => {
                            (0..c)
                                .map(|ch| src.get(img * c + ch, r as isize, col as isize))
                                .sum::<f64>()
                                / c as f64
                        }
                    }
                };
                let mean = (0..h)
                    .flat_map(|r| (0..w).map(move |col| (r, col)))
                    .map(|(r, col)| gray(r, col))
                    .sum::<f64>()
                    / (h * w) as f64;
                for ch in 0..c {
                    let p = img * c + ch;
                    for r in 0..h {
                        for col in 0..w {
                            let d = match kind {
                                OpKind::Contrast => mean,
                                OpKind::Color => gray(r, col),
                                _ => 0.0,
                            };
                            let v = src.get(p, r as isize, col as isize);
                            out[at(p, r, col)] = clamp01((1.0 - t) * d + t * v);
                        }
                    }
                }
            }
        }
        OpKind::Sharpness => {
            let f = params::SHARPNESS_FACTOR as f64;
            for p in 0..n * c {
                for r in 0..h {
                    for col in 0..w {
                        let v = src.get(p, r as isize, col as isize);
                        let border = r == 0 || col == 0 || r + 1 >= h || col + 1 >= w;
                        out[at(p, r, col)] = if border {
                            v as f32
                        } else {
                            let mut acc = 0.0;
                            for dr in -1..=1isize {
                                for dc in -1..=1isize {
                                    let k = if dr == 0 && dc == 0 { 5.0 } else { 1.0 };
                                    acc += k * src.get(p, r as isize + dr, col as isize + dc);
                                }
                            }
                            clamp01(f * v - (f - 1.0) * acc / 13.0)
                        };
                    }
                }
            }
        }
        OpKind::AutoContrast => {
            for (o_plane, plane) in out.chunks_mut(h * w).zip(x.data().chunks(h * w)) {
                let lo = plane.iter().cloned().fold(f32::INFINITY, f32::min);
                let hi = plane.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                for (o, &v) in o_plane.iter_mut().zip(plane) {
                    *o = if hi > lo { ((v - lo) / (hi - lo)).clamp(0.0, 1.0) } else { v };
                }
            }
        }
        OpKind::Equalize => {
            for (o_plane, plane) in out.chunks_mut(h * w).zip(x.data().chunks(h * w)) {
                o_plane.copy_from_slice(&equalize_plane(plane));
            }
        }
        OpKind::Cutout => {
            out.copy_from_slice(x.data());
            let side = params::cutout_side(mu, h, w) as isize;
            for (img, &(cy, cx)) in draws.cutout_centers.iter().enumerate() {
                let (top, left) = (cy as isize - side / 2, cx as isize - side / 2);
                for ch in 0..c {
                    for r in 0..h as isize {
                        for col in 0..w as isize {
                            if r >= top && r < top + side && col >= left && col < left + side {
                                out[at(img * c + ch, r as usize, col as usize)] = params::CUTOUT_FILL;
                            }
                        }
                    }
                }
            }
        }
        OpKind::SamplePairing => {
            let a = phys;
            let per = c * h * w;
            for img in 0..n {
                let partner = draws.pairing[img];
                for k in 0..per {
                    let v = x.data()[img * per + k] as f64;
                    let q = x.data()[partner * per + k] as f64;
                    out[img * per + k] = clamp01((1.0 - a) * v + a * q);
                }
            }
        }
    }
    Tensor::new(s.to_vec(), out).expect("same shape")
}

/// Histogram equalization of one channel, following the lookup-table
/// construction of the common imaging-library implementation: the step is
/// the pixel count outside the highest occupied bin divided by 255, and bin
/// `i` maps to `(step/2 + count below i) / step`.
fn equalize_plane(plane: &[f32]) -> Vec<f32> {
    let levels: Vec<usize> = plane
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as usize)
        .collect();
    let mut histogram = vec![0usize; 256];
    for &l in &levels {
        histogram[l] += 1;
    }
    let nonzero: Vec<usize> = histogram.iter().copied().filter(|&k| k > 0).collect();
    if nonzero.len() <= 1 {
        return plane.to_vec();
    }
    let step = (nonzero.iter().sum::<usize>() - nonzero[nonzero.len() - 1]) / 255;
    if step == 0 {
        return plane.to_vec();
    }
    let mut lut = Vec::with_capacity(256);
    let mut acc = step / 2;
    for count in &histogram {
        lut.push((acc / step).min(255));
        acc += count;
    }
    levels.iter().map(|&l| lut[l] as f32 / 255.0).collect()
}
