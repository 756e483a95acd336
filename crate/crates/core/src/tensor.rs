//! Dense containers: matrices, patch-feature grids, patch sets, score maps and images.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::DimensionMismatch("ragged rows".into()));
        }
        Ok(Self { rows: rows.len(), cols, data: rows.concat() })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        debug_assert_eq!(self.shape(), other.shape());
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, s: T) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "matmul inner dimension");
        let mut out = Self::zeros(self.rows, other.cols);
        gemm_into(self, false, other, false, T::zero(), &mut out);
        out
    }

    /// `self * other^T`.
    pub fn matmul_t(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.cols, "matmul_t inner dimension");
        let mut out = Self::zeros(self.rows, other.rows);
        gemm_into(self, false, other, true, T::zero(), &mut out);
        out
    }

    /// `self^T * other`.
    pub fn t_matmul(&self, other: &Self) -> Self {
        assert_eq!(self.rows, other.rows, "t_matmul inner dimension");
        let mut out = Self::zeros(self.cols, other.cols);
        gemm_into(self, true, other, false, T::zero(), &mut out);
        out
    }
}

/// `out = op(a) * op(b) + beta * out`, where `op` optionally transposes.
pub(crate) fn gemm_into<T: Scalar>(
    a: &Matrix<T>,
    ta: bool,
    b: &Matrix<T>,
    tb: bool,
    beta: T,
    out: &mut Matrix<T>,
) {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (kb, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, kb, "gemm inner dimension");
    assert_eq!(out.shape(), (m, n), "gemm output shape");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out.scale_assign(beta);
        return;
    }
    let (rsa, csa) = if ta { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    // SAFETY: shapes were checked above, so every strided index stays inside
    // the three buffers; `out` is a distinct &mut borrow.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.data.as_mut_ptr(),
            out.cols as isize,
            1,
        );
    }
}

fn check_finite<T: Scalar>(data: &[T], what: &str) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NonFinite(format!("{what} value at flat index {i}"))),
        None => Ok(()),
    }
}

/// Grid of patch features, `grid_h x grid_w x channels`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid<T> {
    grid_h: usize,
    grid_w: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Scalar> FeatureGrid<T> {
    pub fn new(grid_h: usize, grid_w: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if grid_h == 0 || grid_w == 0 || channels == 0 {
            return Err(Error::InvalidArgument(format!(
                "feature grid dims must be positive, got {grid_h}x{grid_w}x{channels}"
            )));
        }
        if data.len() != grid_h * grid_w * channels {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {grid_h}x{grid_w}x{channels} grid",
                data.len()
            )));
        }
        check_finite(&data, "feature grid")?;
        Ok(Self { grid_h, grid_w, channels, data })
    }

    /// Reshape an `(grid_h * grid_w) x channels` matrix of patch rows.
    pub fn from_matrix(grid_h: usize, grid_w: usize, m: Matrix<T>) -> Result<Self> {
        if m.rows() != grid_h * grid_w {
            return Err(Error::DimensionMismatch(format!(
                "{} patch rows for a {grid_h}x{grid_w} grid",
                m.rows()
            )));
        }
        let channels = m.cols();
        Self::new(grid_h, grid_w, channels, m.into_vec())
    }

    pub fn grid_h(&self) -> usize {
        self.grid_h
    }

    pub fn grid_w(&self) -> usize {
        self.grid_w
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn num_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn patch(&self, row: usize, col: usize) -> &[T] {
        self.patch_flat(row * self.grid_w + col)
    }

    pub fn patch_flat(&self, index: usize) -> &[T] {
        &self.data[index * self.channels..(index + 1) * self.channels]
    }

    pub fn to_matrix(&self) -> Matrix<T> {
        Matrix { rows: self.num_patches(), cols: self.channels, data: self.data.clone() }
    }

    pub fn to_patch_set(&self) -> PatchSet<T> {
        PatchSet { count: self.num_patches(), channels: self.channels, data: self.data.clone() }
    }
}

/// A set of `count` patch vectors with `channels` features each.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet<T> {
    count: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Scalar> PatchSet<T> {
    pub fn new(count: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if count == 0 || channels == 0 {
            return Err(Error::InvalidArgument(format!(
                "patch set dims must be positive, got {count}x{channels}"
            )));
        }
        if data.len() != count * channels {
            return Err(Error::DimensionMismatch(format!(
                "{} values for {count} patches of {channels} channels",
                data.len()
            )));
        }
        check_finite(&data, "patch set")?;
        Ok(Self { count, channels, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let channels = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != channels) {
            return Err(Error::DimensionMismatch("ragged patch rows".into()));
        }
        Self::new(rows.len(), channels, rows.concat())
    }

    /// Stack several sets with a common channel count.
    pub fn concat(sets: &[PatchSet<T>]) -> Result<Self> {
        let channels = sets.first().ok_or(Error::InvalidArgument("no patch sets".into()))?.channels;
        if sets.iter().any(|s| s.channels != channels) {
            return Err(Error::DimensionMismatch("channel counts differ".into()));
        }
        let data: Vec<T> = sets.iter().flat_map(|s| s.data.iter().copied()).collect();
        let count = data.len() / channels;
        Ok(Self { count, channels, data })
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.channels..(i + 1) * self.channels]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks_exact(self.channels)
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        let data = indices.iter().flat_map(|&i| self.row(i).iter().copied()).collect();
        Self { count: indices.len(), channels: self.channels, data }
    }

    pub fn to_matrix(&self) -> Matrix<T> {
        Matrix { rows: self.count, cols: self.channels, data: self.data.clone() }
    }
}

/// Dense `height x width` anomaly scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap<T> {
    height: usize,
    width: usize,
    values: Vec<T>,
    normalized: bool,
}

impl<T: Scalar> ScoreMap<T> {
    pub fn new(height: usize, width: usize, values: Vec<T>) -> Result<Self> {
        Self::build(height, width, values, false)
    }

    /// A map whose values are all in `[0, 1]`.
    pub fn new_normalized(height: usize, width: usize, values: Vec<T>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| **v < T::zero() || **v > T::one()) {
            return Err(Error::InvalidArgument(format!("normalized score {v} outside [0, 1]")));
        }
        Self::build(height, width, values, true)
    }

    fn build(height: usize, width: usize, values: Vec<T>, normalized: bool) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument("score map dims must be positive".into()));
        }
        if values.len() != height * width {
            return Err(Error::DimensionMismatch(format!(
                "{} scores for a {height}x{width} map",
                values.len()
            )));
        }
        check_finite(&values, "score map")?;
        Ok(Self { height, width, values, normalized })
    }

    pub fn constant(height: usize, width: usize, value: T) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> T {
        self.values[y * self.width + x]
    }

    pub fn max(&self) -> T {
        self.values.iter().copied().fold(T::neg_infinity(), T::max)
    }

    pub fn min(&self) -> T {
        self.values.iter().copied().fold(T::infinity(), T::min)
    }

    pub fn mean(&self) -> T {
        self.values.iter().copied().sum::<T>() / T::of(self.values.len() as f64)
    }
}

/// Planar pixel grid, `channels x height x width`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<T> {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Scalar> Image<T> {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidArgument("image dims must be positive".into()));
        }
        if data.len() != channels * height * width {
            return Err(Error::DimensionMismatch(format!(
                "{} pixels for a {channels}x{height}x{width} image",
                data.len()
            )));
        }
        check_finite(&data, "image")?;
        Ok(Self { channels, height, width, data })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Same geometry, new pixel values.
    pub fn with_data(&self, data: Vec<T>) -> Result<Self> {
        Self::new(self.channels, self.height, self.width, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree_with_transpose() {
        let a = Matrix::<f64>::from_fn(3, 4, |i, j| (i * 4 + j) as f64 * 0.5 - 2.0);
        let b = Matrix::<f64>::from_fn(4, 2, |i, j| (i as f64) - (j as f64) * 1.5);
        let ab = a.matmul(&b);
        assert_eq!(ab, a.matmul_t(&b.transpose()));
        assert_eq!(ab, a.transpose().t_matmul(&b));
        let naive = Matrix::from_fn(3, 2, |i, j| (0..4).map(|k| a.get(i, k) * b.get(k, j)).sum());
        assert_eq!(ab, naive);
    }

    #[test]
    fn grid_rejects_non_finite() {
        assert!(FeatureGrid::new(1, 1, 2, vec![0.0, f64::NAN]).is_err());
        assert!(FeatureGrid::<f64>::new(0, 1, 1, vec![]).is_err());
    }

    #[test]
    fn flattened_grid_has_one_row_per_patch() {
        let g = FeatureGrid::new(2, 3, 2, (0..12).map(f64::from).collect()).unwrap();
        let p = g.to_patch_set();
        assert_eq!(p.count(), 6);
        assert_eq!(p.row(4), g.patch(1, 1));
    }

    #[test]
    fn normalized_map_bounds() {
        assert!(ScoreMap::new_normalized(1, 2, vec![0.0, 1.5]).is_err());
        assert!(ScoreMap::new_normalized(1, 2, vec![0.0, 1.0f64]).unwrap().is_normalized());
    }
}
