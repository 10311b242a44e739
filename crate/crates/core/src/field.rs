//! 2-D grids, scalar fields with validity masks, and planar images.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{ensure, Result};
use crate::tensor::Tensor;

/// Row-major 2-D grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

pub type Mask = Grid<bool>;

impl<T: Clone> Grid<T> {
    pub fn new(height: usize, width: usize, fill: T) -> Self {
        Self { height, width, data: vec![fill; height * width] }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), height * width, "grid data does not match {height}x{width}");
        Self { height, width, data }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self { height, width, data }
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
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> &T {
        &self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: T) {
        self.data[y * self.width + x] = v;
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

    pub fn map<U: Clone>(&self, f: impl Fn(&T) -> U) -> Grid<U> {
        Grid { height: self.height, width: self.width, data: self.data.iter().map(f).collect() }
    }

    pub fn zip_map<U: Clone, V: Clone>(&self, other: &Grid<U>, f: impl Fn(&T, &U) -> V) -> Grid<V> {
        assert_eq!(self.dims(), other.dims());
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(a, b)| f(a, b)).collect(),
        }
    }
}

impl Grid<bool> {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// 3x3 binary dilation, one iteration.
    pub fn dilate3(&self) -> Mask {
        let (h, w) = self.dims();
        Grid::from_fn(h, w, |y, x| {
            let (y0, y1) = (y.saturating_sub(1), (y + 1).min(h - 1));
            let (x0, x1) = (x.saturating_sub(1), (x + 1).min(w - 1));
            (y0..=y1).any(|yy| (x0..=x1).any(|xx| *self.get(yy, xx)))
        })
    }
}

/// Real-valued field with a per-pixel validity mask. Houses disparities,
/// residuals and filter responses.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    pub values: Grid<f64>,
    pub valid: Mask,
}

/// Per-pixel horizontal displacement in pixels.
pub type DisparityMap = ScalarField;

impl ScalarField {
    pub fn dense(values: Grid<f64>) -> Self {
        let valid = Grid::new(values.height(), values.width(), true);
        Self { values, valid }
    }

    pub fn new(values: Grid<f64>, valid: Mask) -> Result<Self> {
        ensure!(
            values.dims() == valid.dims(),
            Shape,
            "values {:?} vs mask {:?}",
            values.dims(),
            valid.dims()
        );
        ensure!(
            values.as_slice().iter().zip(valid.as_slice()).all(|(v, &m)| !m || v.is_finite()),
            Contract,
            "non-finite value at a valid pixel"
        );
        Ok(Self { values, valid })
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        Self::dense(Grid::new(height, width, value))
    }

    pub fn dims(&self) -> (usize, usize) {
        self.values.dims()
    }

    pub fn height(&self) -> usize {
        self.values.height()
    }

    pub fn width(&self) -> usize {
        self.values.width()
    }

    #[inline]
    pub fn value(&self, y: usize, x: usize) -> f64 {
        *self.values.get(y, x)
    }

    #[inline]
    pub fn is_valid(&self, y: usize, x: usize) -> bool {
        *self.valid.get(y, x)
    }

    pub fn valid_count(&self) -> usize {
        self.valid.count()
    }

    pub fn is_dense(&self) -> bool {
        self.valid.as_slice().iter().all(|&v| v)
    }

    /// Elementwise map of the values; mask unchanged.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> ScalarField {
        ScalarField { values: self.values.map(|&v| f(v)), valid: self.valid.clone() }
    }

    /// `[1, H, W]` tensor of the values.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[1, self.height(), self.width()], self.values.as_slice().to_vec())
    }

    /// Dense field from channel 0 of a `[C, H, W]` tensor.
    pub fn from_tensor(t: &Tensor) -> Self {
        let (_, h, w) = t.chw();
        Self::dense(Grid::from_vec(h, w, t.channel(0).to_vec()))
    }

    pub fn min_max(&self) -> Option<(f64, f64)> {
        self.values
            .as_slice()
            .iter()
            .zip(self.valid.as_slice())
            .filter(|(_, &m)| m)
            .fold(None, |acc, (&v, _)| match acc {
                None => Some((v, v)),
                Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
            })
    }
}

/// Planar image; channel values are expected in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    pub fn from_planar(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), channels * height * width);
        Self { channels, height, width, data }
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

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[self.channels, self.height, self.width], self.data.clone())
    }

    /// Replicate-pads on the bottom and right so both sides are multiples of `k`.
    pub fn pad_to_multiple(&self, k: usize) -> Image {
        let h = self.height.div_ceil(k) * k;
        let w = self.width.div_ceil(k) * k;
        if (h, w) == (self.height, self.width) {
            return self.clone();
        }
        let mut out = Image::new(self.channels, h, w);
        for c in 0..self.channels {
            for y in 0..h {
                for x in 0..w {
                    let v = self.get(c, y.min(self.height - 1), x.min(self.width - 1));
                    out.set(c, y, x, v);
                }
            }
        }
        out
    }
}
