//! Binary PGM/PPM sample grids.

use std::path::Path;

use dlf_core::Tensor;

use crate::error::{Error, Result};

pub const GUTTER: usize = 2;

/// `floor(x · 256)` clamped to `0..=255`.
pub fn quantize(x: f64) -> u8 {
    if x.is_nan() {
        return 0;
    }
    (x * 256.0).floor().clamp(0.0, 255.0) as u8
}

/// `(columns, rows)` of the near-square grid holding `n` tiles.
pub fn grid_dims(n: usize) -> (usize, usize) {
    let cols = (n as f64).sqrt().ceil().max(1.0) as usize;
    (cols, n.div_ceil(cols).max(1))
}

/// Tiles `[N, H, W, C]` samples row-major with black gutters between
/// tiles. Returns the encoded P5 (C = 1) or P6 (C = 3) file.
pub fn encode_grid(samples: &Tensor) -> Result<Vec<u8>> {
    if samples.rank() != 4 {
        return Err(Error::Usage(format!("image grid needs [N, H, W, C] samples, got {:?}", samples.shape())));
    }
    let [n, h, w, c] = [samples.shape()[0], samples.shape()[1], samples.shape()[2], samples.shape()[3]];
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(Error::Usage(format!("{c}-channel samples cannot be written as PGM/PPM"))),
    };
    let (cols, rows) = grid_dims(n);
    let width = cols * w + (cols - 1) * GUTTER;
    let height = rows * h + (rows - 1) * GUTTER;
    let mut pixels = vec![0u8; width * height * c];
    let data = samples.data();
    for s in 0..n {
        let (oy, ox) = ((s / cols) * (h + GUTTER), (s % cols) * (w + GUTTER));
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    pixels[((oy + y) * width + ox + x) * c + ch] = quantize(data[((s * h + y) * w + x) * c + ch]);
                }
            }
        }
    }
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(&pixels);
    Ok(out)
}

pub fn write_image_grid(samples: &Tensor, path: &Path) -> Result<()> {
    let bytes = encode_grid(samples)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pixels(bytes: &[u8]) -> &[u8] {
        let mut newlines = 0;
        let start = bytes
            .iter()
            .position(|&b| {
                newlines += usize::from(b == b'\n');
                newlines == 3
            })
            .unwrap();
        &bytes[start + 1..]
    }

    #[test]
    fn quantization_rule() {
        let t = Tensor::new(&[1, 2, 2, 1], vec![0.0, 0.25, 0.5, 0.75]).unwrap();
        let bytes = encode_grid(&t).unwrap();
        assert!(bytes.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(pixels(&bytes), &[0, 64, 128, 192]);
        assert_eq!(quantize(0.999_999), 255);
        assert_eq!(quantize(1.7), 255);
        assert_eq!(quantize(-0.2), 0);
    }

    #[test]
    fn ten_samples_make_four_by_three() {
        assert_eq!(grid_dims(10), (4, 3));
        let t = Tensor::full(&[10, 2, 2, 3], 0.5);
        let bytes = encode_grid(&t).unwrap();
        let (w, h) = (4 * 2 + 3 * GUTTER, 3 * 2 + 2 * GUTTER);
        assert!(bytes.starts_with(format!("P6\n{w} {h}\n255\n").as_bytes()));
        let px = pixels(&bytes);
        // Bottom-right cell is blank.
        let (y, x) = (2 * (2 + GUTTER), 3 * (2 + GUTTER));
        assert_eq!(px[(y * w + x) * 3], 0);
        assert_eq!(px[0], 128);
    }

    #[test]
    fn unsupported_channels() {
        assert!(matches!(encode_grid(&Tensor::zeros(&[1, 2, 2, 2])), Err(Error::Usage(_))));
    }
}
