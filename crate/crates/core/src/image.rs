//! Planar multi-channel images with values nominally in [-1, 1].

use alloc::vec::Vec;

use crate::error::{check_dim, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Channel-major, then row-major.
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        check_dim("image buffer", channels * height * width, data.len())?;
        Ok(Self { channels, height, width, data })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self { channels, height, width, data: alloc::vec![value; channels * height * width] }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.pixels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &Image) -> Result<()> {
        check_dim("image channels", self.channels, other.channels)?;
        check_dim("image height", self.height, other.height)?;
        check_dim("image width", self.width, other.width)
    }
}

/// Stacks images into an `[n, c, h, w]` tensor.
pub fn to_tensor<T: Real>(images: &[&Image]) -> Result<Tensor<T>> {
    let first = images.first().ok_or(crate::Error::Empty("image batch"))?;
    let mut data = Vec::with_capacity(images.len() * first.data.len());
    for im in images {
        first.same_shape(im)?;
        data.extend(im.data.iter().map(|v| T::of(*v)));
    }
    Ok(Tensor::from_vec(data, &[images.len(), first.channels, first.height, first.width]))
}

/// Splits an `[n, c, h, w]` tensor into images.
pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Vec<Image> {
    let [n, c, h, w] = t.dims4();
    let per = c * h * w;
    let d = t.data();
    (0..n)
        .map(|i| Image { channels: c, height: h, width: w, data: d[i * per..(i + 1) * per].iter().map(|v| v.as_f64()).collect() })
        .collect()
}
