use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Square RGB image with 8-bit channels, row-major `H × W × 3`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    side: usize,
    pixels: Vec<u8>,
}

pub const CHANNELS: usize = 3;

impl Image {
    pub fn new(side: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != side * side * CHANNELS {
            return Err(Error::Shape(format!(
                "{} bytes cannot fill a {side}x{side} RGB image",
                pixels.len()
            )));
        }
        Ok(Image { side, pixels })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    #[inline]
    pub fn pixel(&self, r: usize, c: usize) -> [u8; 3] {
        let o = (r * self.side + c) * CHANNELS;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    pub fn mean_color(&self) -> [f64; 3] {
        let mut acc = [0.0f64; 3];
        for px in self.pixels.chunks_exact(CHANNELS) {
            for (a, &v) in acc.iter_mut().zip(px) {
                *a += v as f64;
            }
        }
        let n = (self.side * self.side) as f64;
        acc.map(|a| a / n)
    }

    /// Binary PPM (P6).
    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut buf = format!("P6\n{} {}\n255\n", self.side, self.side).into_bytes();
        buf.extend_from_slice(&self.pixels);
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }
}

pub fn color_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}
