//! RGB images as `3 x H x W` planes of values in `[0, 1]`.

use crate::error::{KpbeError, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    /// Channel-major: `data[(c * height + y) * width + x]`.
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(KpbeError::shape(format!(
                "image buffer of {} values does not match 3x{height}x{width}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(KpbeError::invalid(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in rgb {
            data.extend(std::iter::repeat_n(c.clamp(0.0, 1.0), height * width));
        }
        Self { height, width, data }
    }

    /// Builds an image from any tensor with 3·H·W values, clamping into `[0, 1]`.
    pub fn from_tensor<T: Real>(t: &Tensor<T>, height: usize, width: usize) -> Result<Self> {
        let data: Vec<f32> = t
            .data()
            .iter()
            .map(|v| (v.to_f64_lossy() as f32).clamp(0.0, 1.0))
            .collect();
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v.clamp(0.0, 1.0);
    }

    pub fn check_size(&self, side: usize) -> Result<()> {
        if self.height != side || self.width != side {
            return Err(KpbeError::invalid(format!(
                "expected a 3x{side}x{side} image, got 3x{}x{}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// `(1, 3, H, W)` tensor.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_vec(
            &[1, 3, self.height, self.width],
            self.data.iter().map(|&v| T::from_f64_lossy(f64::from(v))).collect(),
        )
    }

    /// Stacks same-sized images into `(n, 3, H, W)`.
    pub fn batch<T: Real>(images: &[&ImageTensor]) -> Result<Tensor<T>> {
        let first = images
            .first()
            .ok_or_else(|| KpbeError::invalid("empty image batch"))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::with_capacity(images.len() * 3 * h * w);
        for img in images {
            if img.height != h || img.width != w {
                return Err(KpbeError::shape("images in a batch must share one size"));
            }
            data.extend(img.data.iter().map(|&v| T::from_f64_lossy(f64::from(v))));
        }
        Ok(Tensor::from_vec(&[images.len(), 3, h, w], data))
    }

    /// Interleaved 8-bit RGB with `round(v * 255)`.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let plane = self.height * self.width;
        let mut out = Vec::with_capacity(3 * plane);
        for i in 0..plane {
            for c in 0..3 {
                out.push((self.data[c * plane + i] * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
        out
    }

    pub fn from_rgb8(height: usize, width: usize, rgb: &[u8]) -> Result<Self> {
        let plane = height * width;
        if rgb.len() != 3 * plane {
            return Err(KpbeError::shape("RGB buffer length does not match image size"));
        }
        let mut data = vec![0.0; 3 * plane];
        for i in 0..plane {
            for c in 0..3 {
                data[c * plane + i] = f32::from(rgb[3 * i + c]) / 255.0;
            }
        }
        Ok(Self { height, width, data })
    }

    /// Bilinear resize (pixel-center aligned).
    pub fn resized(&self, height: usize, width: usize) -> Self {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let mut data = vec![0.0f32; 3 * height * width];
        let sy = self.height as f32 / height as f32;
        let sx = self.width as f32 / width as f32;
        for c in 0..3 {
            for y in 0..height {
                let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f32);
                let y0 = fy.floor() as usize;
                let y1 = (y0 + 1).min(self.height - 1);
                let ty = fy - y0 as f32;
                for x in 0..width {
                    let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f32);
                    let x0 = fx.floor() as usize;
                    let x1 = (x0 + 1).min(self.width - 1);
                    let tx = fx - x0 as f32;
                    let top = self.get(c, y0, x0) * (1.0 - tx) + self.get(c, y0, x1) * tx;
                    let bot = self.get(c, y1, x0) * (1.0 - tx) + self.get(c, y1, x1) * tx;
                    data[(c * height + y) * width + x] = (top * (1.0 - ty) + bot * ty).clamp(0.0, 1.0);
                }
            }
        }
        Self { height, width, data }
    }
}

/// Default frame rate recorded with sequences; the model itself ignores it.
pub const DEFAULT_FRAME_RATE: f64 = 25.0;

/// A non-empty run of equally sized frames.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    frames: Vec<ImageTensor>,
    frame_rate: f64,
}

impl FrameSequence {
    pub fn new(frames: Vec<ImageTensor>) -> Result<Self> {
        Self::with_rate(frames, DEFAULT_FRAME_RATE)
    }

    pub fn with_rate(frames: Vec<ImageTensor>, frame_rate: f64) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| KpbeError::invalid("frame sequence must not be empty"))?;
        let (h, w) = (first.height, first.width);
        if let Some(i) = frames.iter().position(|f| (f.height, f.width) != (h, w)) {
            return Err(KpbeError::shape(format!(
                "frame {i} is {}x{}, expected {h}x{w}",
                frames[i].height, frames[i].width
            )));
        }
        if !(frame_rate.is_finite() && frame_rate > 0.0) {
            return Err(KpbeError::invalid(format!("frame rate must be positive, got {frame_rate}")));
        }
        Ok(Self { frames, frame_rate })
    }

    pub fn frames(&self) -> &[ImageTensor] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn get(&self, i: usize) -> Option<&ImageTensor> {
        self.frames.get(i)
    }

    pub fn truncated(&self, len: usize) -> Self {
        Self {
            frames: self.frames[..len.clamp(1, self.frames.len())].to_vec(),
            frame_rate: self.frame_rate,
        }
    }

    pub fn into_frames(self) -> Vec<ImageTensor> {
        self.frames
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_pixels() {
        assert!(ImageTensor::new(1, 1, vec![0.0, 1.5, 0.2]).is_err());
        assert!(ImageTensor::new(1, 1, vec![0.0, 0.5]).is_err());
    }

    #[test]
    fn rgb8_round_trip_within_quantization() {
        let img = ImageTensor::new(2, 2, (0..12).map(|i| i as f32 / 11.0).collect()).unwrap();
        let back = ImageTensor::from_rgb8(2, 2, &img.to_rgb8()).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn resize_of_constant_is_constant() {
        let img = ImageTensor::filled(10, 12, [0.2, 0.4, 0.6]);
        let r = img.resized(64, 64);
        assert!(r.data()[..64 * 64].iter().all(|&v| (v - 0.2).abs() < 1e-6));
    }
}
