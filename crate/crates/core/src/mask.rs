use candle_core::{DType, Device, Tensor};

use crate::error::{shape_err, Result};

/// A binary segmentation mask stored row-major, one byte per pixel (0 or 1).
#[derive(Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl std::fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "BinaryMask({}x{}, fg={})",
            self.height,
            self.width,
            self.foreground_count()
        )
    }
}

impl BinaryMask {
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

    /// Any nonzero byte counts as foreground.
    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(shape_err!(
                "mask data has {} entries, expected {height}x{width}",
                data.len()
            ));
        }
        let data = data.into_iter().map(|v| u8::from(v != 0)).collect();
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(u8::from(f(y, x)));
            }
        }
        Self {
            height,
            width,
            data,
        }
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

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn set(&mut self, y: usize, x: usize, value: bool) {
        self.data[y * self.width + x] = u8::from(value);
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.data
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn has_foreground(&self) -> bool {
        self.data.iter().any(|&v| v != 0)
    }

    /// Row-major [H, W] tensor of 0/1 values.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_vec(self.data.clone(), (self.height, self.width), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Nearest-neighbour resize (pixel-centre sampling).
    pub fn resize_nearest(&self, height: usize, width: usize) -> Self {
        Self::from_fn(height, width, |y, x| {
            let sy = ((y as f64 + 0.5) * self.height as f64 / height as f64).floor() as usize;
            let sx = ((x as f64 + 0.5) * self.width as f64 / width as f64).floor() as usize;
            self.get(sy.min(self.height - 1), sx.min(self.width - 1))
        })
    }

    /// Grayscale 0/255 image bytes.
    pub fn to_gray_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect()
    }
}
