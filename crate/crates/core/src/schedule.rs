//! Coarse-to-fine scale lists and the flattened token-stream layout.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Side lengths of the square token maps, coarsest first.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct ScaleSchedule {
    sides: Vec<usize>,
}

impl ScaleSchedule {
    pub fn new(sides: Vec<usize>) -> Result<Self> {
        if sides.is_empty() {
            return Err(Error::InvalidSchedule("schedule is empty".into()));
        }
        if sides[0] != 1 {
            return Err(Error::InvalidSchedule(format!(
                "first scale must have side 1, got {}",
                sides[0]
            )));
        }
        if let Some(w) = sides.windows(2).find(|w| w[1] <= w[0]) {
            return Err(Error::InvalidSchedule(format!(
                "sides must be strictly increasing, found {} then {}",
                w[0], w[1]
            )));
        }
        Ok(ScaleSchedule { sides })
    }

    /// `[1, 2, 3, 4]`, 30 tokens.
    pub fn tiny() -> Self {
        ScaleSchedule {
            sides: vec![1, 2, 3, 4],
        }
    }

    /// The ten-step schedule `[1, 2, 3, 4, 5, 6, 8, 10, 13, 16]`, 680 tokens.
    pub fn ten_step() -> Self {
        ScaleSchedule {
            sides: vec![1, 2, 3, 4, 5, 6, 8, 10, 13, 16],
        }
    }

    pub fn sides(&self) -> &[usize] {
        &self.sides
    }

    pub fn len(&self) -> usize {
        self.sides.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn finest(&self) -> usize {
        *self.sides.last().unwrap()
    }

    /// First `n` scales as a schedule of its own.
    pub fn prefix(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.sides.len() {
            return Err(Error::OutOfRange(format!(
                "prefix length {n} outside 1..={}",
                self.sides.len()
            )));
        }
        Ok(ScaleSchedule {
            sides: self.sides[..n].to_vec(),
        })
    }

    pub fn layout(&self) -> SequenceLayout {
        build_layout(self)
    }
}

impl TryFrom<Vec<usize>> for ScaleSchedule {
    type Error = Error;

    fn try_from(sides: Vec<usize>) -> Result<Self> {
        ScaleSchedule::new(sides)
    }
}

impl From<ScaleSchedule> for Vec<usize> {
    fn from(s: ScaleSchedule) -> Self {
        s.sides
    }
}

impl fmt::Display for ScaleSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.sides.iter().map(|s| s.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for ScaleSchedule {
    type Err = Error;

    /// Parses a comma-separated list such as `1,2,3,4`.
    fn from_str(s: &str) -> Result<Self> {
        let sides = s
            .split(',')
            .map(|p| {
                p.trim().parse::<usize>().map_err(|_| {
                    Error::InvalidSchedule(format!("`{}` is not a positive integer", p.trim()))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        ScaleSchedule::new(sides)
    }
}

/// Where each scale's block sits in the concatenated token stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceLayout {
    pub block_lengths: Vec<usize>,
    pub block_offsets: Vec<usize>,
    pub total_len: usize,
}

impl SequenceLayout {
    pub fn n_blocks(&self) -> usize {
        self.block_lengths.len()
    }

    pub fn block_range(&self, i: usize) -> Range<usize> {
        self.block_offsets[i]..self.block_offsets[i] + self.block_lengths[i]
    }

    pub fn block_of_position(&self, pos: usize) -> Result<usize> {
        block_of_position(self, pos)
    }

    /// Key range visible to each query under block-diagonal masking.
    pub fn block_diagonal_ranges(&self) -> Vec<Range<usize>> {
        let mut out = Vec::with_capacity(self.total_len);
        for i in 0..self.n_blocks() {
            let r = self.block_range(i);
            out.extend(std::iter::repeat_n(r.clone(), r.len()));
        }
        out
    }

    /// Key range visible to each query under the scale-causal mask: all of its
    /// own block and every earlier block.
    pub fn scale_causal_ranges(&self) -> Vec<Range<usize>> {
        let mut out = Vec::with_capacity(self.total_len);
        for i in 0..self.n_blocks() {
            let r = self.block_range(i);
            out.extend(std::iter::repeat_n(0..r.end, r.len()));
        }
        out
    }
}

pub fn build_layout(schedule: &ScaleSchedule) -> SequenceLayout {
    let block_lengths: Vec<usize> = schedule.sides.iter().map(|s| s * s).collect();
    let mut block_offsets = Vec::with_capacity(block_lengths.len());
    let mut acc = 0;
    for &k in &block_lengths {
        block_offsets.push(acc);
        acc += k;
    }
    SequenceLayout {
        block_lengths,
        block_offsets,
        total_len: acc,
    }
}

pub fn block_of_position(layout: &SequenceLayout, pos: usize) -> Result<usize> {
    if pos >= layout.total_len {
        return Err(Error::OutOfRange(format!(
            "position {pos} outside a {}-token sequence",
            layout.total_len
        )));
    }
    // last block whose offset is <= pos
    Ok(layout.block_offsets.partition_point(|&o| o <= pos) - 1)
}

/// Square `side × side` grid of `dim`-vectors, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    side: usize,
    dim: usize,
    data: Vec<T>,
}

impl<T: Scalar> Grid<T> {
    pub fn zeros(side: usize, dim: usize) -> Self {
        Grid {
            side,
            dim,
            data: vec![T::zero(); side * side * dim],
        }
    }

    pub fn from_vec(side: usize, dim: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != side * side * dim {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {side}x{side}x{dim} grid",
                data.len()
            )));
        }
        Ok(Grid { side, dim, data })
    }

    pub fn from_fn(side: usize, dim: usize, mut f: impl FnMut(usize, usize) -> Vec<T>) -> Self {
        let mut data = Vec::with_capacity(side * side * dim);
        for r in 0..side {
            for c in 0..side {
                let cell = f(r, c);
                assert_eq!(cell.len(), dim);
                data.extend(cell);
            }
        }
        Grid { side, dim, data }
    }

    #[inline]
    pub fn side(&self) -> usize {
        self.side
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn cell(&self, r: usize, c: usize) -> &[T] {
        let o = (r * self.side + c) * self.dim;
        &self.data[o..o + self.dim]
    }

    #[inline]
    pub fn cell_mut(&mut self, r: usize, c: usize) -> &mut [T] {
        let o = (r * self.side + c) * self.dim;
        &mut self.data[o..o + self.dim]
    }

    pub fn sub_assign(&mut self, other: &Grid<T>) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a - *b;
        }
    }

    pub fn add_assign(&mut self, other: &Grid<T>) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b;
        }
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v.f64() * v.f64()).sum()
    }
}

/// Source index that output index `i` of an upsample from `src` to `dst` copies.
#[inline]
pub(crate) fn nearest_source(i: usize, src: usize, dst: usize) -> usize {
    i * src / dst
}

/// Nearest-neighbor upsampling: output cell `(r, c)` copies source cell
/// `(⌊r·h/dst⌋, ⌊c·w/dst⌋)`.
pub fn upsample_grid<T: Scalar>(src: &Grid<T>, dst_side: usize) -> Result<Grid<T>> {
    let h = src.side;
    if h == 0 || dst_side < h {
        return Err(Error::Shape(format!(
            "cannot upsample a {h}x{h} grid to {dst_side}x{dst_side}"
        )));
    }
    let mut out = Grid::zeros(dst_side, src.dim);
    for r in 0..dst_side {
        let sr = nearest_source(r, h, dst_side);
        for c in 0..dst_side {
            let sc = nearest_source(c, h, dst_side);
            out.cell_mut(r, c).copy_from_slice(src.cell(sr, sc));
        }
    }
    Ok(out)
}

/// Mean pooling, the adjoint of [`upsample_grid`]: each coarse cell averages the
/// fine cells that upsampling would fill from it.
pub fn pool_grid<T: Scalar>(src: &Grid<T>, dst_side: usize) -> Result<Grid<T>> {
    let n = src.side;
    if dst_side == 0 || dst_side > n {
        return Err(Error::Shape(format!(
            "cannot pool a {n}x{n} grid to {dst_side}x{dst_side}"
        )));
    }
    let mut out = Grid::zeros(dst_side, src.dim);
    let mut counts = vec![0usize; dst_side * dst_side];
    for r in 0..n {
        let dr = nearest_source(r, dst_side, n);
        for c in 0..n {
            let dc = nearest_source(c, dst_side, n);
            counts[dr * dst_side + dc] += 1;
            let cell = src.cell(r, c);
            for (o, &v) in out.cell_mut(dr, dc).iter_mut().zip(cell) {
                *o = *o + v;
            }
        }
    }
    for (i, &k) in counts.iter().enumerate() {
        let inv = T::one() / T::of(k as f64);
        let o = i * src.dim;
        for v in &mut out.data[o..o + src.dim] {
            *v = *v * inv;
        }
    }
    Ok(out)
}

/// Picks one representative fine cell per coarse cell, inverting
/// [`upsample_grid`] exactly.
pub fn subsample_grid<T: Scalar>(src: &Grid<T>, dst_side: usize) -> Result<Grid<T>> {
    let n = src.side;
    if dst_side == 0 || dst_side > n {
        return Err(Error::Shape(format!(
            "cannot subsample a {n}x{n} grid to {dst_side}x{dst_side}"
        )));
    }
    // smallest fine index r with ⌊r·dst/n⌋ == a is ⌈a·n/dst⌉
    let pick = |a: usize| (a * n).div_ceil(dst_side);
    let mut out = Grid::zeros(dst_side, src.dim);
    for a in 0..dst_side {
        for b in 0..dst_side {
            out.cell_mut(a, b).copy_from_slice(src.cell(pick(a), pick(b)));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_examples() {
        let l = build_layout(&ScaleSchedule::new(vec![1]).unwrap());
        assert_eq!(l.block_lengths, vec![1]);
        assert_eq!(l.total_len, 1);

        assert_eq!(ScaleSchedule::ten_step().layout().total_len, 680);

        let l = build_layout(&ScaleSchedule::new(vec![1, 2, 4]).unwrap());
        assert_eq!(l.block_offsets, vec![0, 1, 5]);
        assert_eq!(l.total_len, 21);
    }

    #[test]
    fn rejects_bad_schedules() {
        assert!(ScaleSchedule::new(vec![]).is_err());
        assert!(ScaleSchedule::new(vec![2, 3]).is_err());
        assert!(ScaleSchedule::new(vec![1, 2, 2]).is_err());
        assert!(ScaleSchedule::new(vec![1, 3, 2]).is_err());
        assert!("1,x".parse::<ScaleSchedule>().is_err());
        assert_eq!(
            "1, 2,3".parse::<ScaleSchedule>().unwrap().sides(),
            &[1, 2, 3]
        );
    }

    #[test]
    fn block_of_position_examples() {
        let l = ScaleSchedule::new(vec![1, 2, 4]).unwrap().layout();
        assert_eq!(block_of_position(&l, 0).unwrap(), 0);
        assert_eq!(block_of_position(&l, 4).unwrap(), 1);
        assert_eq!(block_of_position(&l, 20).unwrap(), 2);
        assert!(block_of_position(&l, 21).is_err());
    }

    #[test]
    fn upsample_examples() {
        let v = Grid::from_vec(1, 2, vec![0.5f64, -1.0]).unwrap();
        let up = upsample_grid(&v, 2).unwrap();
        for r in 0..2 {
            for c in 0..2 {
                assert_eq!(up.cell(r, c), &[0.5, -1.0]);
            }
        }

        let g = Grid::from_vec(2, 1, vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(upsample_grid(&g, 2).unwrap(), g);

        let up = upsample_grid(&g, 4).unwrap();
        let want = [
            [1.0, 1.0, 2.0, 2.0],
            [1.0, 1.0, 2.0, 2.0],
            [3.0, 3.0, 4.0, 4.0],
            [3.0, 3.0, 4.0, 4.0],
        ];
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(up.cell(r, c)[0], want[r][c]);
            }
        }
        assert!(upsample_grid(&g, 1).is_err());
    }

    #[test]
    fn pooling_averages_replicated_cells() {
        let g = Grid::from_vec(2, 1, vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let pooled = pool_grid(&upsample_grid(&g, 4).unwrap(), 2).unwrap();
        assert_eq!(pooled, g);
        let mean = pool_grid(&g, 1).unwrap();
        assert_eq!(mean.cell(0, 0), &[2.5]);
    }
}
