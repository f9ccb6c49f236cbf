//! Binary 8-bit PGM (P5) output for activation and attention images.

use std::fs;
use std::io;
use std::path::Path;

use bamrl_core::tensor::{Tensor, TensorError, TensorResult};

/// A grayscale plane still in float units, before 8-bit quantization.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> TensorResult<Self> {
        if pixels.len() != height * width {
            return Err(TensorError::InvalidArgument {
                context: "pgm",
                message: format!(
                    "{}x{} image needs {} pixels, got {}",
                    height,
                    width,
                    height * width,
                    pixels.len()
                ),
            });
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    /// Min-max normalized 8-bit pixels; a constant image maps to all 0.
    pub fn quantize(&self) -> Vec<u8> {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &v in &self.pixels {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !(hi > lo) {
            return vec![0; self.pixels.len()];
        }
        self.pixels
            .iter()
            .map(|&v| (((v - lo) / (hi - lo)) * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    /// Writes the image as binary PGM (magic `P5`, maxval 255).
    pub fn write_pgm(&self, path: &Path) -> io::Result<()> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.quantize());
        fs::write(path, out)
    }
}

fn rank3_view(t: &Tensor<f32>) -> TensorResult<(usize, usize, usize)> {
    let shape = t.shape();
    match shape {
        [c, h, w] => Ok((*c, *h, *w)),
        [1, c, h, w] => Ok((*c, *h, *w)),
        _ => Err(TensorError::InvalidArgument {
            context: "pgm",
            message: format!("expected [C,H,W] or [1,C,H,W], got {shape:?}"),
        }),
    }
}

/// Mean over the channel axis of a `[C,H,W]` (or `[1,C,H,W]`) activation.
pub fn channel_mean(t: &Tensor<f32>) -> TensorResult<GrayImage> {
    let (c, h, w) = rank3_view(t)?;
    let data = t.data();
    let mut pixels = vec![0.0f32; h * w];
    for ch in 0..c {
        let plane = &data[ch * h * w..(ch + 1) * h * w];
        for (acc, &v) in pixels.iter_mut().zip(plane) {
            *acc += v;
        }
    }
    let scale = 1.0 / c as f32;
    for v in &mut pixels {
        *v *= scale;
    }
    GrayImage::new(h, w, pixels)
}

/// One channel plane of a `[C,H,W]` (or `[1,C,H,W]`) tensor.
pub fn channel_plane(t: &Tensor<f32>, channel: usize) -> TensorResult<GrayImage> {
    let (c, h, w) = rank3_view(t)?;
    if channel >= c {
        return Err(TensorError::InvalidArgument {
            context: "pgm",
            message: format!("channel {channel} out of range for {c} channels"),
        });
    }
    let plane = t.data()[channel * h * w..(channel + 1) * h * w].to_vec();
    GrayImage::new(h, w, plane)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantize_spans_full_range() {
        let img = GrayImage::new(1, 3, vec![0.0, 0.5, 1.0]).unwrap();
        assert_eq!(img.quantize(), vec![0, 128, 255]);
    }

    #[test]
    fn constant_image_maps_to_black() {
        let img = GrayImage::new(2, 2, vec![0.7; 4]).unwrap();
        assert_eq!(img.quantize(), vec![0; 4]);
        let zeros = GrayImage::new(2, 2, vec![0.0; 4]).unwrap();
        assert_eq!(zeros.quantize(), vec![0; 4]);
    }

    #[test]
    fn pgm_bytes_have_p5_header() {
        let dir = std::env::temp_dir().join("bamrl-pgm-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.pgm");
        let img = GrayImage::new(2, 3, vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0]).unwrap();
        img.write_pgm(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(bytes.len(), b"P5\n3 2\n255\n".len() + 6);
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn channel_mean_averages_planes() {
        let t = Tensor::from_vec(&[2, 1, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let img = channel_mean(&t).unwrap();
        assert_eq!(img.pixels, vec![3.0, 5.0]);
        let batched = Tensor::from_vec(&[1, 2, 1, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        assert_eq!(channel_mean(&batched).unwrap().pixels, vec![3.0, 5.0]);
    }

    #[test]
    fn channel_plane_picks_one_channel() {
        let t = Tensor::from_vec(&[2, 1, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        assert_eq!(channel_plane(&t, 1).unwrap().pixels, vec![5.0, 7.0]);
        assert!(channel_plane(&t, 2).is_err());
    }

    #[test]
    fn size_mismatch_is_rejected() {
        assert!(GrayImage::new(2, 2, vec![0.0; 3]).is_err());
    }
}
