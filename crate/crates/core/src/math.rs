//! Stateless numerical primitives.
//!
//! Everything here is generic over [`Scalar`] so the training math can be
//! instantiated in f64 for gradient checking; production paths use f32.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};

pub trait Scalar: Float + FromPrimitive + Sum + Debug + Default + Send + Sync + 'static {
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Above this many terms, reductions over grids switch to compensated summation.
pub const COMPENSATED_THRESHOLD: usize = 1 << 16;

/// Row-major 2-D grid in patch (or pixel) units.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid2D<F = f32> {
    height: usize,
    width: usize,
    values: Vec<F>,
}

impl<F: Scalar> Grid2D<F> {
    pub fn new(height: usize, width: usize, values: Vec<F>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidParameter(format!(
                "grid must be at least 1x1, got {height}x{width}"
            )));
        }
        if values.len() != height * width {
            return Err(Error::DimensionMismatch(format!(
                "{height}x{width} grid needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        Ok(Grid2D {
            height,
            width,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, value: F) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[F] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [F] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<F> {
        self.values
    }

    pub fn at(&self, row: usize, col: usize) -> F {
        self.values[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: F) {
        self.values[row * self.width + col] = value;
    }

    pub fn min(&self) -> F {
        self.values.iter().copied().fold(F::infinity(), F::min)
    }

    pub fn max(&self) -> F {
        self.values.iter().copied().fold(F::neg_infinity(), F::max)
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Grid2D {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Copies the `h`x`w` block whose top-left cell is (`row`, `col`).
    pub fn crop(&self, row: usize, col: usize, h: usize, w: usize) -> Result<Self> {
        if row + h > self.height || col + w > self.width {
            return Err(Error::DimensionMismatch(format!(
                "crop {h}x{w} at ({row},{col}) exceeds {}x{} grid",
                self.height, self.width
            )));
        }
        let mut values = Vec::with_capacity(h * w);
        for r in row..row + h {
            let start = r * self.width + col;
            values.extend_from_slice(&self.values[start..start + w]);
        }
        Grid2D::new(h, w, values)
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<F = f32> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
}

impl<F: Scalar> Matrix<F> {
    pub fn new(rows: usize, cols: usize, data: Vec<F>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![F::zero(); rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::DimensionMismatch("ragged rows".into()));
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: F) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [F] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Pairwise summation; deterministic and accurate to O(log n) ulps.
pub fn pairwise_sum<F: Scalar>(values: &[F]) -> F {
    const BLOCK: usize = 64;
    if values.len() <= BLOCK {
        return values.iter().fold(F::zero(), |acc, &v| acc + v);
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Kahan-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum<F> {
    sum: F,
    carry: F,
}

impl<F: Scalar> KahanSum<F> {
    pub fn add(&mut self, v: F) {
        let y = v - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
    }

    pub fn value(&self) -> F {
        self.sum
    }
}

pub fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).fold(F::zero(), |acc, (&x, &y)| acc + x * y)
}

pub fn l2_norm<F: Scalar>(a: &[F]) -> F {
    dot(a, a).sqrt()
}

pub fn cosine_similarity<F: Scalar>(a: &[F], b: &[F]) -> Result<F> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "cosine of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if !(na > F::zero()) || !(nb > F::zero()) {
        return Err(Error::DegenerateVector);
    }
    let c = dot(a, b) / (na * nb);
    Ok(c.max(-F::one()).min(F::one()))
}

/// In-place max-subtracted softmax over a slice.
pub fn softmax_in_place<F: Scalar>(values: &mut [F]) {
    if values.is_empty() {
        return;
    }
    let max = values.iter().copied().fold(F::neg_infinity(), F::max);
    for v in values.iter_mut() {
        *v = (*v - max).exp();
    }
    let total = pairwise_sum(values);
    for v in values.iter_mut() {
        *v = *v / total;
    }
}

/// Softmax over every cell of the grid jointly.
pub fn spatial_softmax<F: Scalar>(g: &Grid2D<F>) -> Grid2D<F> {
    let mut out = g.clone();
    softmax_in_place(out.values_mut());
    out
}

pub fn row_softmax<F: Scalar>(m: &Matrix<F>) -> Matrix<F> {
    let mut out = m.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

/// Numerically stable `ln(sum(exp(values)))`.
pub fn log_sum_exp<F: Scalar>(values: impl Iterator<Item = F> + Clone) -> F {
    let max = values.clone().fold(F::neg_infinity(), F::max);
    if max == F::neg_infinity() {
        return max;
    }
    let total = values.fold(F::zero(), |acc, v| acc + (v - max).exp());
    max + total.ln()
}

// Source taps and blend weight for one output coordinate (half-pixel centers).
fn bilinear_taps<F: Scalar>(dst: usize, src_len: usize, dst_len: usize) -> (usize, usize, F) {
    let scale = F::from_usize(src_len).unwrap() / F::from_usize(dst_len).unwrap();
    let half = F::lit(0.5);
    let max = F::from_usize(src_len - 1).unwrap();
    let x = ((F::from_usize(dst).unwrap() + half) * scale - half)
        .max(F::zero())
        .min(max);
    let x0 = x.floor();
    let i0 = x0.to_usize().unwrap();
    let i1 = (i0 + 1).min(src_len - 1);
    (i0, i1, x - x0)
}

/// Bilinear upsampling with the align-corners-false convention.
pub fn bilinear_upsample<F: Scalar>(
    g: &Grid2D<F>,
    height: usize,
    width: usize,
) -> Result<Grid2D<F>> {
    let (h, w) = g.dims();
    if height < h || width < w {
        return Err(Error::DownsamplingUnsupported {
            from_h: h,
            from_w: w,
            to_h: height,
            to_w: width,
        });
    }
    let cols: Vec<(usize, usize, F)> = (0..width).map(|x| bilinear_taps(x, w, width)).collect();
    let mut values = Vec::with_capacity(height * width);
    for y in 0..height {
        let (r0, r1, fy) = bilinear_taps::<F>(y, h, height);
        for &(c0, c1, fx) in &cols {
            let top = g.at(r0, c0) * (F::one() - fx) + g.at(r0, c1) * fx;
            let bottom = g.at(r1, c0) * (F::one() - fx) + g.at(r1, c1) * fx;
            values.push(top * (F::one() - fy) + bottom * fy);
        }
    }
    Grid2D::new(height, width, values)
}

/// Affine remap sending `min(g)` to `lo` and `max(g)` to `hi`.
///
/// A (numerically) constant grid maps to the midpoint of the range.
pub fn minmax_remap<F: Scalar>(g: &Grid2D<F>, lo: F, hi: F) -> Grid2D<F> {
    let min = g.min();
    let max = g.max();
    let span = max - min;
    if span < F::lit(1e-12) {
        let mid = (lo + hi) / F::lit(2.0);
        return g.map(|_| mid);
    }
    let scale = (hi - lo) / span;
    g.map(|v| {
        if v == max {
            hi
        } else {
            (lo + (v - min) * scale).max(lo).min(hi)
        }
    })
}

/// Index of the maximum; ties go to the lowest index.
pub fn argmax_with_tiebreak<F: Scalar>(scores: &[F]) -> Result<usize> {
    let (first, rest) = scores
        .split_first()
        .ok_or(Error::Empty("argmax over no scores"))?;
    let mut best = 0;
    let mut best_val = *first;
    for (i, &v) in rest.iter().enumerate() {
        if v > best_val {
            best = i + 1;
            best_val = v;
        }
    }
    Ok(best)
}
