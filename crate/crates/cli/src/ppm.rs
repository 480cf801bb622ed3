//! Binary PPM (P6) output.

use augsearch_autodiff::Tensor;
use std::io::{self, Write};

fn level(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes images `i` of each batch in `panels`, placed left to right.
/// One-channel images are written as gray.
pub fn encode_row(panels: &[&Tensor], i: usize) -> io::Result<Vec<u8>> {
    let s = panels[0].shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    if c != 1 && c != 3 {
        return Err(io::Error::new(
            io::ErrorKind::InvalidInput,
            format!("PPM needs 1 or 3 channels, images have {c}"),
        ));
    }
    let mut out = Vec::with_capacity(20 + 3 * h * w * panels.len());
    write!(out, "P6\n{} {}\n255\n", w * panels.len(), h)?;
    let per = c * h * w;
    for r in 0..h {
        for p in panels {
            let img = &p.data()[i * per..(i + 1) * per];
            for col in 0..w {
                for ch in 0..3 {
                    let plane = if c == 1 { 0 } else { ch };
                    out.push(level(img[(plane * h + r) * w + col]));
                }
            }
        }
    }
    Ok(out)
}
