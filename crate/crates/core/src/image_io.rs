//! Image tensors and PNG I/O. Pixels map to the canonical `[-1, 1]` range
//! as `2p/255 - 1`; saving inverts with round-half-up.

use std::io::Write;
use std::path::Path;

use image::{ColorType, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One 8-bit quantisation step in canonical units.
pub const QUANT_STEP: f64 = 1.0 / 127.5;

/// `C×H×W` image in the canonical range.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    tensor: Tensor<f32>,
}

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Self {
        Self {
            tensor: Tensor::new(&[channels, height, width], data),
        }
    }

    pub fn from_tensor(t: Tensor<f32>) -> Self {
        match t.shape().len() {
            3 => Self { tensor: t },
            4 if t.shape()[0] == 1 => {
                let s = t.shape()[1..].to_vec();
                Self { tensor: t.reshaped(&s) }
            }
            _ => panic!("expected C×H×W tensor, got {:?}", t.shape()),
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            tensor: Tensor::full(&[channels, height, width], value),
        }
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn data(&self) -> &[f32] {
        self.tensor.data()
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        self.tensor.data_mut()
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.tensor
    }

    /// `[1, C, H, W]` copy for batched model input.
    pub fn to_batch(&self) -> Tensor<f32> {
        let s = self.tensor.shape();
        self.tensor.clone().reshaped(&[1, s[0], s[1], s[2]])
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.tensor.data()[(c * self.height() + y) * self.width() + x]
    }

    pub fn clamp(&mut self) {
        self.tensor.data_mut().iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
    }

    pub fn max_abs_diff(&self, other: &Self) -> f32 {
        assert_eq!(self.tensor.shape(), other.tensor.shape());
        self.data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0f32; 3 * h * w];
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[(c * h + y as usize) * w + x as usize] = pixel_to_unit(px[c]);
            }
        }
        Self::new(3, h, w, data)
    }

    pub fn to_rgb8(&self) -> RgbImage {
        assert_eq!(self.channels(), 3, "RGB output needs 3 channels");
        let (h, w) = (self.height(), self.width());
        RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c: usize| unit_to_pixel(self.at(c, y as usize, x as usize));
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    /// Round-trips through 8-bit quantisation.
    pub fn quantized(&self) -> Self {
        let mut out = self.clone();
        out.data_mut()
            .iter_mut()
            .for_each(|v| *v = pixel_to_unit(unit_to_pixel(*v)));
        out
    }
}

#[inline]
pub fn pixel_to_unit(p: u8) -> f32 {
    2.0 * p as f32 / 255.0 - 1.0
}

#[inline]
pub fn unit_to_pixel(v: f32) -> u8 {
    ((v as f64 + 1.0) * 127.5 + 0.5).floor().clamp(0.0, 255.0) as u8
}

pub fn load_image(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    let err = |message: String| Error::Image {
        path: path.to_path_buf(),
        message,
    };
    let reader = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let img = reader.decode().map_err(|e| err(e.to_string()))?;
    if img.color() != ColorType::Rgb8 {
        return Err(err(format!("expected 8-bit RGB, found {:?}", img.color())));
    }
    Ok(ImageTensor::from_rgb8(&img.to_rgb8()))
}

pub fn save_image(img: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = std::io::Cursor::new(Vec::new());
    img.to_rgb8()
        .write_to(&mut buf, ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    write_atomic(path, buf.get_ref())
}

/// Writes via a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}
