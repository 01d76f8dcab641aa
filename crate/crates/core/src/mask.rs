use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// `H×W` grid of 0/1 values.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::Shape {
                shape: vec![height, width],
                reason: format!("mask needs {} cells, got {}", height * width, bits.len()),
            });
        }
        if let Some(bad) = bits.iter().find(|&&b| b > 1) {
            return Err(Error::Contract(format!("mask value {bad} is not 0 or 1")));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                bits.push(u8::from(f(y, x)));
            }
        }
        Self {
            height,
            width,
            bits,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x] == 1
    }

    pub fn count(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn same_shape(&self, other: &BinaryMask) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn complement(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().map(|&b| 1 - b).collect(),
        }
    }

    pub fn to_reals<T: Real>(&self) -> Vec<T> {
        self.bits.iter().map(|&b| T::of(b as f64)).collect()
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_parts(vec![self.height, self.width], self.to_reals())
    }
}
