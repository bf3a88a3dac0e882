//! Fixed multi-scale residual vector quantizer.
//!
//! Images are cut into `patch × patch` pixel patches, each lifted to a
//! `dim`-vector by a fixed orthonormal map. The resulting feature grid is
//! quantized coarse-to-fine: at every scale the current residual is mean-pooled
//! to that scale's side, each cell is snapped to its nearest codeword, and the
//! upsampled reconstruction is subtracted before moving to the next scale.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};
use crate::schedule::{pool_grid, upsample_grid, Grid, ScaleSchedule};
use crate::tensor::Mat;

/// Shared table of code vectors. Row 0 of fitted codebooks is the zero vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    dim: usize,
    vectors: Vec<f32>,
}

impl Codebook {
    pub fn new(dim: usize, vectors: Vec<f32>) -> Result<Self> {
        if dim == 0 || vectors.len() % dim != 0 {
            return Err(Error::Shape(format!(
                "{} values do not form rows of width {dim}",
                vectors.len()
            )));
        }
        if vectors.len() / dim < 2 {
            return Err(Error::InvalidArgument(
                "a codebook needs at least two entries".into(),
            ));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("codebook".into()));
        }
        Ok(Codebook { dim, vectors })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Shape("codebook rows differ in width".into()));
        }
        Codebook::new(dim, rows.concat())
    }

    pub fn size(&self) -> usize {
        self.vectors.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entry(&self, id: usize) -> &[f32] {
        &self.vectors[id * self.dim..(id + 1) * self.dim]
    }

    pub fn as_mat(&self) -> Mat<f32> {
        Mat::from_vec(self.size(), self.dim, self.vectors.clone()).unwrap()
    }

    fn entry_checked(&self, id: u32) -> Result<&[f32]> {
        if (id as usize) < self.size() {
            Ok(self.entry(id as usize))
        } else {
            Err(Error::OutOfRange(format!(
                "token id {id} outside a {}-entry codebook",
                self.size()
            )))
        }
    }
}

/// Nearest codeword by squared Euclidean distance, lowest index on ties.
pub fn quantize_nearest(vec: &[f64], codebook: &Codebook) -> Result<(usize, Vec<f64>)> {
    if vec.len() != codebook.dim {
        return Err(Error::Shape(format!(
            "vector of width {} against a codebook of width {}",
            vec.len(),
            codebook.dim
        )));
    }
    if vec.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("quantizer input".into()));
    }
    Ok(nearest_unchecked(vec, codebook))
}

fn nearest_unchecked(vec: &[f64], codebook: &Codebook) -> (usize, Vec<f64>) {
    let mut best = 0;
    let mut best_dist = f64::INFINITY;
    for id in 0..codebook.size() {
        let dist: f64 = codebook
            .entry(id)
            .iter()
            .zip(vec)
            .map(|(&c, &v)| {
                let e = v - c as f64;
                e * e
            })
            .sum();
        if dist < best_dist {
            best = id;
            best_dist = dist;
        }
    }
    (best, codebook.entry(best).iter().map(|&c| c as f64).collect())
}

/// Per-scale grids of token ids, coarsest first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenMapPyramid {
    schedule: ScaleSchedule,
    maps: Vec<Vec<u32>>,
}

impl TokenMapPyramid {
    pub fn new(schedule: ScaleSchedule, maps: Vec<Vec<u32>>) -> Result<Self> {
        if maps.len() != schedule.len() {
            return Err(Error::Shape(format!(
                "{} token maps for a {}-scale schedule",
                maps.len(),
                schedule.len()
            )));
        }
        for (i, (m, &s)) in maps.iter().zip(schedule.sides()).enumerate() {
            if m.len() != s * s {
                return Err(Error::Shape(format!(
                    "scale {i} map holds {} ids, expected {}",
                    m.len(),
                    s * s
                )));
            }
        }
        Ok(TokenMapPyramid { schedule, maps })
    }

    pub fn schedule(&self) -> &ScaleSchedule {
        &self.schedule
    }

    pub fn maps(&self) -> &[Vec<u32>] {
        &self.maps
    }

    pub fn map(&self, i: usize) -> &[u32] {
        &self.maps[i]
    }

    /// All ids flattened in sequence order.
    pub fn flat(&self) -> Vec<u32> {
        self.maps.concat()
    }

    pub fn check_vocab(&self, vocab: usize) -> Result<()> {
        match self.flat().into_iter().find(|&id| id as usize >= vocab) {
            Some(id) => Err(Error::OutOfRange(format!(
                "token id {id} outside vocabulary of {vocab}"
            ))),
            None => Ok(()),
        }
    }
}

pub fn encode_multiscale(
    features: &Grid<f64>,
    schedule: &ScaleSchedule,
    codebook: &Codebook,
) -> Result<TokenMapPyramid> {
    let n = schedule.finest();
    if features.side() != n {
        return Err(Error::Shape(format!(
            "feature grid is {0}x{0} but the schedule ends at {n}x{n}",
            features.side()
        )));
    }
    if features.dim() != codebook.dim() {
        return Err(Error::Shape(format!(
            "feature width {} against codebook width {}",
            features.dim(),
            codebook.dim()
        )));
    }
    if features.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("tokenizer features".into()));
    }
    let mut residual = features.clone();
    let mut maps = Vec::with_capacity(schedule.len());
    for &side in schedule.sides() {
        let pooled = pool_grid(&residual, side)?;
        let mut quantized = Grid::zeros(side, codebook.dim());
        let mut ids = Vec::with_capacity(side * side);
        for r in 0..side {
            for c in 0..side {
                let (id, q) = nearest_unchecked(pooled.cell(r, c), codebook);
                ids.push(id as u32);
                quantized.cell_mut(r, c).copy_from_slice(&q);
            }
        }
        residual.sub_assign(&upsample_grid(&quantized, n)?);
        maps.push(ids);
    }
    TokenMapPyramid::new(schedule.clone(), maps)
}

/// Codebook vectors of one token map as a grid.
pub fn embed_map(ids: &[u32], side: usize, codebook: &Codebook) -> Result<Grid<f64>> {
    let mut g = Grid::zeros(side, codebook.dim());
    for (k, &id) in ids.iter().enumerate() {
        let e = codebook.entry_checked(id)?;
        for (o, &v) in g.cell_mut(k / side, k % side).iter_mut().zip(e) {
            *o = v as f64;
        }
    }
    Ok(g)
}

/// Sum of the first `n_scales` upsampled reconstructions at the finest side.
pub fn decode_prefix(
    pyramid: &TokenMapPyramid,
    n_scales: usize,
    codebook: &Codebook,
) -> Result<Grid<f64>> {
    let schedule = pyramid.schedule();
    let n = schedule.finest();
    let mut out = Grid::zeros(n, codebook.dim());
    for (ids, &side) in pyramid.maps().iter().zip(schedule.sides()).take(n_scales) {
        let q = embed_map(ids, side, codebook)?;
        out.add_assign(&upsample_grid(&q, n)?);
    }
    Ok(out)
}

pub fn decode_multiscale(pyramid: &TokenMapPyramid, codebook: &Codebook) -> Result<Grid<f64>> {
    decode_prefix(pyramid, pyramid.schedule().len(), codebook)
}

/// Squared Frobenius norm of `features − decode(first prefix_len scales)`.
pub fn residual_energy(
    features: &Grid<f64>,
    schedule: &ScaleSchedule,
    prefix_len: usize,
    codebook: &Codebook,
) -> Result<f64> {
    if prefix_len == 0 || prefix_len > schedule.len() {
        return Err(Error::OutOfRange(format!(
            "prefix length {prefix_len} outside 1..={}",
            schedule.len()
        )));
    }
    let pyramid = encode_multiscale(features, schedule, codebook)?;
    let mut diff = features.clone();
    diff.sub_assign(&decode_prefix(&pyramid, prefix_len, codebook)?);
    Ok(diff.sum_sq())
}

/// Fixed linear map from `patch × patch × 3` pixel patches to `dim`-vectors.
///
/// Rows are orthonormal and the first three are the per-channel mean
/// directions, so lifting then unlifting preserves every patch's mean color.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchLift {
    patch: usize,
    rows: Mat<f32>,
}

impl PatchLift {
    pub fn new(patch: usize, dim: usize, seed: u64) -> Result<Self> {
        let width = patch * patch * CHANNELS;
        if patch == 0 || dim < CHANNELS || dim > width {
            return Err(Error::InvalidArgument(format!(
                "lift width {dim} must lie in {CHANNELS}..={width} for {patch}x{patch} patches"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(dim);
        let inv = 1.0 / patch as f64;
        for ch in 0..CHANNELS {
            basis.push(
                (0..width)
                    .map(|i| if i % CHANNELS == ch { inv } else { 0.0 })
                    .collect(),
            );
        }
        while basis.len() < dim {
            let mut v = Mat::<f64>::randn(1, width, 1.0, &mut rng).into_vec();
            // two Gram-Schmidt passes for orthogonality at f64 precision
            for _ in 0..2 {
                for b in &basis {
                    let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                    v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-6 {
                continue;
            }
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
        let data = basis.concat().into_iter().map(|x| x as f32).collect();
        Ok(PatchLift {
            patch,
            rows: Mat::from_vec(dim, width, data)?,
        })
    }

    pub fn from_mat(patch: usize, rows: Mat<f32>) -> Result<Self> {
        if rows.cols() != patch * patch * CHANNELS {
            return Err(Error::Shape(format!(
                "lift matrix has {} columns, expected {}",
                rows.cols(),
                patch * patch * CHANNELS
            )));
        }
        Ok(PatchLift { patch, rows })
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn dim(&self) -> usize {
        self.rows.rows()
    }

    pub fn matrix(&self) -> &Mat<f32> {
        &self.rows
    }

    pub fn lift(&self, image: &Image) -> Result<Grid<f64>> {
        let p = self.patch;
        if image.side() % p != 0 {
            return Err(Error::Shape(format!(
                "image side {} is not a multiple of patch size {p}",
                image.side()
            )));
        }
        let n = image.side() / p;
        let mut patch = vec![0.0f64; p * p * CHANNELS];
        let mut out = Grid::zeros(n, self.dim());
        for gr in 0..n {
            for gc in 0..n {
                for r in 0..p {
                    for c in 0..p {
                        let px = image.pixel(gr * p + r, gc * p + c);
                        for ch in 0..CHANNELS {
                            patch[(r * p + c) * CHANNELS + ch] = px[ch] as f64 / 127.5 - 1.0;
                        }
                    }
                }
                let cell = out.cell_mut(gr, gc);
                for (k, o) in cell.iter_mut().enumerate() {
                    *o = self
                        .rows
                        .row(k)
                        .iter()
                        .zip(&patch)
                        .map(|(&w, &x)| w as f64 * x)
                        .sum();
                }
            }
        }
        Ok(out)
    }

    pub fn unlift(&self, grid: &Grid<f64>) -> Result<Image> {
        if grid.dim() != self.dim() {
            return Err(Error::Shape(format!(
                "grid width {} against lift width {}",
                grid.dim(),
                self.dim()
            )));
        }
        let p = self.patch;
        let n = grid.side();
        let side = n * p;
        let mut pixels = vec![0u8; side * side * CHANNELS];
        let mut patch = vec![0.0f64; p * p * CHANNELS];
        for gr in 0..n {
            for gc in 0..n {
                patch.iter_mut().for_each(|v| *v = 0.0);
                for (k, &f) in grid.cell(gr, gc).iter().enumerate() {
                    for (v, &w) in patch.iter_mut().zip(self.rows.row(k)) {
                        *v += f * w as f64;
                    }
                }
                for r in 0..p {
                    for c in 0..p {
                        for ch in 0..CHANNELS {
                            let x = patch[(r * p + c) * CHANNELS + ch];
                            let byte = ((x + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
                            pixels[((gr * p + r) * side + gc * p + c) * CHANNELS + ch] = byte;
                        }
                    }
                }
            }
        }
        Image::new(side, pixels)
    }

    /// Mean RGB color (byte scale, unclamped) of the image a feature grid decodes to.
    pub fn mean_color(&self, grid: &Grid<f64>) -> [f64; 3] {
        // the first three rows are the channel means scaled by `patch`
        let n = (grid.side() * grid.side()) as f64;
        let mut acc = [0.0f64; 3];
        for cell in grid.data().chunks_exact(grid.dim()) {
            for ch in 0..CHANNELS {
                acc[ch] += cell[ch];
            }
        }
        let p = self.patch as f64;
        acc.map(|a| (a / n / p + 1.0) * 127.5)
    }
}

/// Image tokenizer: patch lift plus shared residual codebook.
#[derive(Clone, Debug, PartialEq)]
pub struct Tokenizer {
    pub schedule: ScaleSchedule,
    pub lift: PatchLift,
    pub codebook: Codebook,
}

impl Tokenizer {
    pub fn image_side(&self) -> usize {
        self.schedule.finest() * self.lift.patch()
    }

    pub fn encode(&self, image: &Image) -> Result<TokenMapPyramid> {
        encode_multiscale(&self.lift.lift(image)?, &self.schedule, &self.codebook)
    }

    pub fn decode_features(&self, pyramid: &TokenMapPyramid) -> Result<Grid<f64>> {
        decode_multiscale(pyramid, &self.codebook)
    }

    pub fn decode(&self, pyramid: &TokenMapPyramid) -> Result<Image> {
        self.lift.unlift(&self.decode_features(pyramid)?)
    }

    /// Fits the codebook by k-means over per-scale detail vectors of `images`
    /// and prepends the zero vector.
    pub fn fit(
        images: &[Image],
        schedule: &ScaleSchedule,
        lift: PatchLift,
        vocab: usize,
        iters: usize,
        seed: u64,
    ) -> Result<Self> {
        if vocab < 2 {
            return Err(Error::InvalidArgument("vocabulary must be at least 2".into()));
        }
        let n = schedule.finest();
        let mut samples: Vec<Vec<f64>> = Vec::new();
        for img in images {
            let mut r = lift.lift(img)?;
            if r.side() != n {
                return Err(Error::Shape(format!(
                    "image lifts to a {0}x{0} grid, schedule needs {n}x{n}",
                    r.side()
                )));
            }
            for &side in schedule.sides() {
                let pooled = pool_grid(&r, side)?;
                samples.extend(pooled.data().chunks_exact(lift.dim()).map(<[f64]>::to_vec));
                r.sub_assign(&upsample_grid(&pooled, n)?);
            }
        }
        let centers = kmeans(&samples, vocab - 1, iters, seed)?;
        let mut rows = vec![vec![0.0f32; lift.dim()]];
        rows.extend(
            centers
                .into_iter()
                .map(|c| c.into_iter().map(|v| v as f32).collect()),
        );
        Ok(Tokenizer {
            schedule: schedule.clone(),
            codebook: Codebook::from_rows(&rows)?,
            lift,
        })
    }
}

/// Lloyd's k-means with seeded sample initialization. Empty clusters keep
/// their previous center.
pub fn kmeans(samples: &[Vec<f64>], k: usize, iters: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("k-means needs at least one sample".into()));
    }
    let dim = samples[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<Vec<f64>> = if samples.len() >= k {
        sample(&mut rng, samples.len(), k)
            .into_iter()
            .map(|i| samples[i].clone())
            .collect()
    } else {
        (0..k).map(|i| samples[i % samples.len()].clone()).collect()
    };
    let mut assign = vec![0usize; samples.len()];
    for _ in 0..iters {
        for (a, s) in assign.iter_mut().zip(samples) {
            let mut best = f64::INFINITY;
            for (j, c) in centers.iter().enumerate() {
                let d: f64 = c.iter().zip(s).map(|(x, y)| (x - y) * (x - y)).sum();
                if d < best {
                    best = d;
                    *a = j;
                }
            }
        }
        let mut sums = vec![vec![0.0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (&a, s) in assign.iter().zip(samples) {
            counts[a] += 1;
            sums[a].iter_mut().zip(s).for_each(|(t, v)| *t += v);
        }
        for ((c, s), &n) in centers.iter_mut().zip(sums).zip(&counts) {
            if n > 0 {
                *c = s.into_iter().map(|v| v / n as f64).collect();
            }
        }
    }
    Ok(centers)
}
