//! Minimal binary PPM/PGM writers for qualitative artifacts (sensitivity
//! maps, goal images, frames). No compression, no dependencies.

use std::io::Write;
use std::path::Path;

use anyhow::Result;

/// RGB image from interleaved bytes, row-major.
pub fn write_ppm(path: &Path, w: usize, h: usize, rgb: &[u8]) -> Result<()> {
    assert_eq!(rgb.len(), 3 * w * h);
    let mut f = std::fs::File::create(path)?;
    write!(f, "P6\n{w} {h}\n255\n")?;
    f.write_all(rgb)?;
    Ok(())
}

/// Grayscale image from floats in [0,1], nearest-neighbor upscaled.
pub fn write_pgm_scaled(path: &Path, w: usize, h: usize, vals: &[f32], scale: usize) -> Result<()> {
    assert_eq!(vals.len(), w * h);
    let (ow, oh) = (w * scale, h * scale);
    let mut f = std::fs::File::create(path)?;
    write!(f, "P5\n{ow} {oh}\n255\n")?;
    let mut row = vec![0u8; ow];
    for y in 0..oh {
        for x in 0..ow {
            let v = vals[(y / scale) * w + x / scale].clamp(0.0, 1.0);
            row[x] = (v * 255.0).round() as u8;
        }
        f.write_all(&row)?;
    }
    Ok(())
}

/// CHW float image in [0,1] to interleaved RGB bytes.
pub fn chw_to_rgb(chw: &[f32], px: usize) -> Vec<u8> {
    assert_eq!(chw.len(), 3 * px * px);
    let mut out = vec![0u8; 3 * px * px];
    for y in 0..px {
        for x in 0..px {
            for c in 0..3 {
                out[3 * (y * px + x) + c] =
                    (chw[c * px * px + y * px + x].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    out
}
