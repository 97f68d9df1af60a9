//! Ordered collections of single-channel images.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Origin of an image set along the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SetTag {
    Real,
    Marginal,
    /// Intermediate set `Z^j` on the diffusion path.
    Intermediate(usize),
    Generated,
}

/// `n` images of `rows x cols` pixels, each stored row-major and concatenated.
///
/// Every pixel is finite and lies in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSet<T> {
    rows: usize,
    cols: usize,
    pixels: Vec<T>,
    tag: SetTag,
}

impl<T: Scalar> ImageSet<T> {
    pub fn new(rows: usize, cols: usize, pixels: Vec<T>, tag: SetTag) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Shape(format!("image dims must be positive, got {rows}x{cols}")));
        }
        let dim = rows * cols;
        if !pixels.len().is_multiple_of(dim) {
            return Err(Error::Shape(format!(
                "{} pixels is not a multiple of the image size {rows}x{cols}",
                pixels.len()
            )));
        }
        if let Some(pos) = pixels
            .iter()
            .position(|p| !p.is_finite() || *p < T::zero() || *p > T::one())
        {
            return Err(Error::Input(format!(
                "pixel {} of image {} is {} (must be finite and in [0, 1])",
                pos % dim,
                pos / dim,
                pixels[pos]
            )));
        }
        Ok(Self { rows, cols, pixels, tag })
    }

    /// A set with no images, used for empty generation results.
    pub fn empty(rows: usize, cols: usize, tag: SetTag) -> Self {
        Self { rows, cols, pixels: Vec::new(), tag }
    }

    pub(crate) fn from_parts_unchecked(rows: usize, cols: usize, pixels: Vec<T>, tag: SetTag) -> Self {
        debug_assert_eq!(pixels.len() % (rows * cols), 0);
        Self { rows, cols, pixels, tag }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Pixels per image.
    pub fn dim(&self) -> usize {
        self.rows * self.cols
    }

    pub fn len(&self) -> usize {
        self.pixels.len() / self.dim()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn tag(&self) -> SetTag {
        self.tag
    }

    pub fn with_tag(mut self, tag: SetTag) -> Self {
        self.tag = tag;
        self
    }

    pub fn pixels(&self) -> &[T] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<T> {
        self.pixels
    }

    pub fn image(&self, i: usize) -> &[T] {
        let d = self.dim();
        &self.pixels[i * d..(i + 1) * d]
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = &[T]> + '_ {
        self.pixels.chunks_exact(self.dim())
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    /// New set holding the images at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut pixels = Vec::with_capacity(indices.len() * self.dim());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        Self::from_parts_unchecked(self.rows, self.cols, pixels, self.tag)
    }

    /// Appends the images of `other`; shapes must agree.
    pub fn extend(&mut self, other: &Self) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::Shape(format!(
                "cannot append {}x{} images to a {}x{} set",
                other.rows, other.cols, self.rows, self.cols
            )));
        }
        self.pixels.extend_from_slice(&other.pixels);
        Ok(())
    }

    pub(crate) fn push_image(&mut self, image: &[T]) {
        debug_assert_eq!(image.len(), self.dim());
        self.pixels.extend_from_slice(image);
    }

    pub fn convert<U: Scalar>(&self) -> ImageSet<U> {
        ImageSet {
            rows: self.rows,
            cols: self.cols,
            pixels: self
                .pixels
                .iter()
                .map(|p| U::from_f64(p.as_f64()).expect("pixel conversion"))
                .collect(),
            tag: self.tag,
        }
    }
}
