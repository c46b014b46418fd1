//! RGB8 frame sequences and their `[-1, 1]` tensor form.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::RgbImage;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Video {
    frames: usize,
    height: usize,
    width: usize,
    /// `L x H x W x 3`, row-major.
    data: Vec<u8>,
}

impl Video {
    pub fn new(frames: usize, height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        let expected = frames * height * width * 3;
        if data.len() != expected {
            return Err(Error::LengthMismatch {
                what: "video bytes",
                expected,
                got: data.len(),
            });
        }
        Ok(Self {
            frames,
            height,
            width,
            data,
        })
    }

    pub fn blank(frames: usize, height: usize, width: usize) -> Self {
        Self {
            frames,
            height,
            width,
            data: vec![0; frames * height * width * 3],
        }
    }

    pub fn from_images(images: &[RgbImage]) -> Result<Self> {
        let first = images.first().ok_or_else(|| Error::Spec("video needs at least one frame".into()))?;
        let (w, h) = first.dimensions();
        let mut data = Vec::with_capacity(images.len() * (w * h * 3) as usize);
        for img in images {
            if img.dimensions() != (w, h) {
                return Err(Error::Spec("frames differ in size".into()));
            }
            data.extend_from_slice(img.as_raw());
        }
        Self::new(images.len(), h as usize, w as usize, data)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn frame(&self, i: usize) -> &[u8] {
        let n = self.height * self.width * 3;
        &self.data[i * n..(i + 1) * n]
    }

    pub fn frame_mut(&mut self, i: usize) -> &mut [u8] {
        let n = self.height * self.width * 3;
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn pixel(&self, i: usize, row: usize, col: usize) -> [u8; 3] {
        let o = ((i * self.height + row) * self.width + col) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn image(&self, i: usize) -> RgbImage {
        RgbImage::from_raw(self.width as u32, self.height as u32, self.frame(i).to_vec())
            .expect("frame buffer has the right size")
    }

    pub fn save_frame_png(&self, i: usize, path: impl AsRef<Path>) -> Result<()> {
        self.image(i).save(path)?;
        Ok(())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<RgbImage> {
        Ok(image::open(path)?.to_rgb8())
    }

    /// `L x 3 x H x W` in `[-1, 1]`.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_vec(self.data.clone(), (self.frames, self.height, self.width, 3), device)?;
        let t = t.permute((0, 3, 1, 2))?.to_dtype(DType::F32)?;
        Ok(((t / 127.5)? - 1.0)?.to_dtype(dtype)?.contiguous()?)
    }

    /// First frame only: `1 x 3 x H x W`.
    pub fn first_frame_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(self.to_tensor(dtype, device)?.narrow(0, 0, 1)?)
    }

    /// Inverse of [`Video::to_tensor`]; values are clamped to `[-1, 1]`
    /// and rounded.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (l, c, h, w) = t.dims4()?;
        if c != 3 {
            return Err(Error::fault(format!("expected 3 channels, got {c}")));
        }
        let v = t
            .to_dtype(DType::F32)?
            .clamp(-1f32, 1f32)?
            .permute((0, 2, 3, 1))?
            .flatten_all()?
            .to_vec1::<f32>()?;
        let data = v.iter().map(|x| ((x + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8).collect();
        Self::new(l, h, w, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_round_trip() {
        let data: Vec<u8> = (0..2 * 3 * 4 * 3).map(|i| (i * 7 % 256) as u8).collect();
        let v = Video::new(2, 3, 4, data).unwrap();
        let t = v.to_tensor(DType::F32, &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[2, 3, 3, 4]);
        assert_eq!(Video::from_tensor(&t).unwrap(), v);
        assert_eq!(v.pixel(1, 2, 3), [v.frame(1)[33], v.frame(1)[34], v.frame(1)[35]]);
    }

    #[test]
    fn range_endpoints() {
        let v = Video::new(1, 1, 2, vec![0, 0, 0, 255, 255, 255]).unwrap();
        let t = v.to_tensor(DType::F64, &Device::Cpu).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(t, vec![-1.0, 1.0, -1.0, 1.0, -1.0, 1.0]);
    }

    #[test]
    fn wrong_size_rejected() {
        assert!(Video::new(1, 2, 2, vec![0; 11]).is_err());
    }
}
