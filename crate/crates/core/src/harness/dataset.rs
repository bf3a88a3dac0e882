//! Synthetic class-conditional image sets and the `.mvds` container.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::write_atomic;
use crate::error::{Error, Result};
use crate::image::{color_distance, Image, CHANNELS};

const MAGIC: &[u8; 4] = b"MVDS";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 * 6;

/// Minimum pairwise distance between class mean colors, in byte levels.
pub const MIN_CLASS_SEPARATION: f64 = 40.0;
pub const NOISE_SIGMA: f64 = 8.0;

#[derive(Clone, Debug, PartialEq)]
pub struct ToyDataset {
    pub side: usize,
    pub n_classes: usize,
    pub images: Vec<Image>,
    pub labels: Vec<u8>,
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = (h / 60.0).rem_euclid(6.0);
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) * 255.0, (g + m) * 255.0, (b + m) * 255.0]
}

/// Background and foreground colors of each class.
pub fn class_palette(n_classes: usize) -> Vec<([f64; 3], [f64; 3])> {
    (0..n_classes)
        .map(|k| {
            let hue = 360.0 * k as f64 / n_classes as f64;
            (hsv_to_rgb(hue, 0.8, 0.85), hsv_to_rgb(hue, 0.8, 0.4))
        })
        .collect()
}

/// Largest per-sample shift of a pattern, in pixels.
pub const MAX_JITTER: i64 = 2;

/// True where class `k` paints its foreground, with the pattern moved by
/// `shift` pixels. Every pattern covers a quarter of the image: even classes
/// a half-side square in a class-dependent quadrant, odd classes period-4
/// stripes with class-dependent orientation and phase.
pub fn class_mask(k: usize, side: usize, shift: (i64, i64), r: usize, c: usize) -> bool {
    let j = k / 2;
    if k % 2 == 0 {
        let h = side / 2;
        let (qr, qc) = ((j % 4) / 2, j % 2);
        let origin = |q: usize, s: i64| ((q * h) as i64 + s).clamp(0, (side - h) as i64) as usize;
        let (r0, c0) = (origin(qr, shift.0), origin(qc, shift.1));
        (r0..r0 + h).contains(&r) && (c0..c0 + h).contains(&c)
    } else {
        let coord = if j % 2 == 0 { r } else { c };
        (coord as i64 - shift.0).rem_euclid(4) as usize == (j / 2) % 4
    }
}

/// Noise-free mean color of every class (independent of the shift), from the palette and pattern areas.
pub fn nominal_class_colors(n_classes: usize, side: usize) -> Vec<[f64; 3]> {
    class_palette(n_classes)
        .into_iter()
        .enumerate()
        .map(|(k, (bg, fg))| {
            let mut acc = [0.0; 3];
            for r in 0..side {
                for c in 0..side {
                    let px = if class_mask(k, side, (0, 0), r, c) { fg } else { bg };
                    for ch in 0..3 {
                        acc[ch] += px[ch].round();
                    }
                }
            }
            acc.map(|a| a / (side * side) as f64)
        })
        .collect()
}

pub fn generate_toy_dataset(
    n_classes: usize,
    samples_per_class: usize,
    side: usize,
    seed: u64,
) -> Result<ToyDataset> {
    if n_classes < 2 || n_classes > 256 {
        return Err(Error::InvalidArgument(format!(
            "n_classes must lie in 2..=256, got {n_classes}"
        )));
    }
    if samples_per_class == 0 || side < 4 || side % 4 != 0 {
        return Err(Error::InvalidArgument(format!(
            "need samples_per_class >= 1 and a side divisible by 4, got {samples_per_class} and {side}"
        )));
    }
    let means = nominal_class_colors(n_classes, side);
    for a in 0..n_classes {
        for b in a + 1..n_classes {
            let dist = color_distance(&means[a], &means[b]);
            if dist < MIN_CLASS_SEPARATION {
                return Err(Error::InvalidArgument(format!(
                    "classes {a} and {b} are only {dist:.1} levels apart; use fewer classes"
                )));
            }
        }
    }
    let palette = class_palette(n_classes);
    let noise = Normal::new(0.0, NOISE_SIGMA).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n_classes * samples_per_class);
    let mut labels = Vec::with_capacity(n_classes * samples_per_class);
    for _ in 0..samples_per_class {
        for (k, (bg, fg)) in palette.iter().enumerate() {
            let shift = if k % 2 == 0 {
                (
                    rng.random_range(-MAX_JITTER..=MAX_JITTER),
                    rng.random_range(-MAX_JITTER..=MAX_JITTER),
                )
            } else {
                (rng.random_range(-1..=1), 0)
            };
            let mut pixels = Vec::with_capacity(side * side * CHANNELS);
            for r in 0..side {
                for c in 0..side {
                    let px = if class_mask(k, side, shift, r, c) { fg } else { bg };
                    for v in px {
                        let noisy = v.round() + noise.sample(&mut rng);
                        pixels.push(noisy.round().clamp(0.0, 255.0) as u8);
                    }
                }
            }
            images.push(Image::new(side, pixels)?);
            labels.push(k as u8);
        }
    }
    Ok(ToyDataset {
        side,
        n_classes,
        images,
        labels,
    })
}

impl ToyDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Empirical mean color per class; classes without samples get NaN.
    pub fn class_mean_colors(&self) -> Vec<[f64; 3]> {
        let mut acc = vec![[0.0f64; 3]; self.n_classes];
        let mut counts = vec![0usize; self.n_classes];
        for (img, &l) in self.images.iter().zip(&self.labels) {
            let m = img.mean_color();
            for ch in 0..3 {
                acc[l as usize][ch] += m[ch];
            }
            counts[l as usize] += 1;
        }
        acc.iter()
            .zip(&counts)
            .map(|(a, &n)| a.map(|v| v / n as f64))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.len() * (self.side * self.side * CHANNELS + 1));
        out.extend_from_slice(MAGIC);
        for v in [VERSION, self.len() as u32, self.side as u32, self.side as u32, CHANNELS as u32, self.n_classes as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for img in &self.images {
            out.extend_from_slice(img.pixels());
        }
        out.extend_from_slice(&self.labels);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            kind: "dataset",
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < HEADER_LEN {
            return Err(bad(format!("{} bytes is shorter than the header", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(bad("missing MVDS magic".into()));
        }
        let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (version, count, h, w, c, n_classes) = (field(0), field(1), field(2), field(3), field(4), field(5));
        if version != VERSION as usize {
            return Err(bad(format!("unsupported version {version}")));
        }
        if count == 0 || h != w || c != CHANNELS || n_classes == 0 {
            return Err(bad(format!(
                "unsupported header: count={count} H={h} W={w} C={c} n_classes={n_classes}"
            )));
        }
        let per_image = h
            .checked_mul(w)
            .and_then(|v| v.checked_mul(c))
            .ok_or_else(|| bad("image size overflows".into()))?;
        let expected = per_image
            .checked_mul(count)
            .and_then(|v| v.checked_add(HEADER_LEN + count))
            .ok_or_else(|| bad("payload size overflows".into()))?;
        if bytes.len() != expected {
            return Err(bad(format!("expected {expected} bytes, found {}", bytes.len())));
        }
        let body = &bytes[HEADER_LEN..];
        let images = body[..per_image * count]
            .chunks_exact(per_image)
            .map(|px| Image::new(h, px.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let labels = body[per_image * count..].to_vec();
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= n_classes) {
            return Err(bad(format!("label {l} out of range for {n_classes} classes")));
        }
        Ok(ToyDataset {
            side: h,
            n_classes,
            images,
            labels,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
