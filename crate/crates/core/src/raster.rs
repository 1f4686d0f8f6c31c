//! Dense image and mask containers.
//!
//! Images are stored planar (channel-major, then row-major), which is the
//! layout the network consumes directly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `channels × height × width` intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {channels}x{height}x{width} image",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn is_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }
}

/// `height × width` mask over `{0, 1}`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {height}x{width} mask",
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::NonBinaryInput);
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![1; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v as u8;
    }

    /// Number of foreground pixels.
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v <= 1)
    }
}

/// Per-pixel foreground probabilities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl ProbabilityMask {
    /// Pixels with probability `>= threshold` become foreground.
    pub fn threshold(&self, threshold: f32) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&p| (p >= threshold) as u8).collect(),
        }
    }
}
