use crate::error::{Error, Result};
use crate::model::Modality;
use crate::tensor::{Scalar, Tensor};

/// Planar 8-bit image, `channels × height × width`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0; channels * height * width],
        }
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> u8 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: u8) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }
}

/// Normalized `[0, 1]` frame ready for tokenization. Single-channel
/// modalities are replicated to three channels.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameTensor {
    pub modality: Modality,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FrameTensor {
    pub const CHANNELS: usize = 3;

    pub fn new(modality: Modality, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != Self::CHANNELS * height * width {
            return Err(Error::Data(format!(
                "frame buffer has {} values, expected 3x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            modality,
            height,
            width,
            data,
        })
    }

    /// Convert from planar `[C, H, W]` floats with `C` of 1 or 3.
    pub fn from_planar(modality: Modality, channels: usize, height: usize, width: usize, planar: &[f64]) -> Result<Self> {
        let plane = height * width;
        match channels {
            3 => Self::new(modality, height, width, planar.to_vec()),
            1 => Self::new(modality, height, width, planar[..plane].repeat(3)),
            c => Err(Error::Data(format!("unsupported channel count {c}"))),
        }
    }

    pub fn from_image(modality: Modality, image: &Image) -> Result<Self> {
        let planar: Vec<f64> = image.data.iter().map(|&v| v as f64 / 255.0).collect();
        Self::from_planar(modality, image.channels, image.height, image.width, &planar)
    }

    pub fn to_tensor<S: Scalar>(&self) -> Tensor<S> {
        Tensor::from_fn(&[Self::CHANNELS, self.height, self.width], |i| {
            S::from_f64(self.data[i])
        })
    }
}
