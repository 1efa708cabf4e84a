use imitate_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Single-channel image, row-major, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Self {
        assert_eq!(pixels.len(), height * width, "pixel count");
        Self { height, width, pixels }
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn check_range(&self) -> Result<()> {
        match self.pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            Some(&v) => Err(Error::ImageRange(v)),
            None => Ok(()),
        }
    }
}

/// Stacks equally-sized images into an `[N, 1, H, W]` tensor.
pub fn stack(images: &[&Image]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::Config("no images to stack".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        if (img.height, img.width) != (h, w) {
            return Err(Error::ImageExtent {
                height: img.height,
                width: img.width,
                multiple: h,
            });
        }
        data.extend_from_slice(&img.pixels);
    }
    Ok(Tensor::new(vec![images.len(), 1, h, w], data)?)
}
