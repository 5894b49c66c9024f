//! Visual tools: lossless crops, mask union and mask decoding.

use std::io::Cursor;
use std::path::Path;

use image::{GrayImage, ImageFormat, Luma, Rgb, RgbImage};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::messages::{clamp_box, BoundingBox};

#[derive(Debug, Error)]
pub enum ToolError {
    #[error("box {0} is not inside the {1}x{2} image")]
    RejectedBox(BoundingBox, u32, u32),
    #[error("mask dimensions differ: {0:?} vs {1:?}")]
    DimensionMismatch((u32, u32), (u32, u32)),
    #[error("no masks to combine")]
    EmptyMaskList,
    #[error("could not read {path}: {source}")]
    Read {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
    #[error("could not decode image: {0}")]
    Decode(String),
    #[error("could not encode image: {0}")]
    Encode(String),
    #[error("invalid image buffer: {0}")]
    Invalid(String),
}

/// Row-major RGB8 image.
#[derive(Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl std::fmt::Debug for ImageBuffer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ImageBuffer")
            .field("width", &self.width)
            .field("height", &self.height)
            .finish_non_exhaustive()
    }
}

impl ImageBuffer {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self, ToolError> {
        if width == 0 || height == 0 {
            return Err(ToolError::Invalid(format!("zero dimension {width}x{height}")));
        }
        if pixels.len() != width as usize * height as usize * 3 {
            return Err(ToolError::Invalid(format!(
                "{} bytes for a {width}x{height} RGB image",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity(width as usize * height as usize * 3);
        for y in 0..height {
            for x in 0..width {
                pixels.extend_from_slice(&f(x, y));
            }
        }
        Self::new(width, height, pixels).expect("from_fn dimensions")
    }

    pub fn from_rgb(img: RgbImage) -> Result<Self, ToolError> {
        let (w, h) = img.dimensions();
        Self::new(w, h, img.into_raw())
    }

    /// Decode PNG or JPEG bytes.
    pub fn decode(bytes: &[u8]) -> Result<Self, ToolError> {
        let img = image::load_from_memory(bytes).map_err(|e| ToolError::Decode(e.to_string()))?;
        Self::from_rgb(img.to_rgb8())
    }

    pub fn open(path: &Path) -> Result<Self, ToolError> {
        let bytes = std::fs::read(path).map_err(|source| ToolError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::decode(&bytes).map_err(|e| match e {
            ToolError::Decode(m) => ToolError::Decode(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn as_raw(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn to_rgb(&self) -> RgbImage {
        RgbImage::from_raw(self.width, self.height, self.pixels.clone()).expect("valid buffer")
    }

    pub fn encode_png(&self) -> Result<Vec<u8>, ToolError> {
        let mut out = Cursor::new(Vec::new());
        self.to_rgb()
            .write_to(&mut out, ImageFormat::Png)
            .map_err(|e| ToolError::Encode(e.to_string()))?;
        Ok(out.into_inner())
    }

    /// SHA-256 over dimensions and raw pixels.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.width.to_le_bytes());
        h.update(self.height.to_le_bytes());
        h.update(&self.pixels);
        hex::encode(h.finalize())
    }
}

/// Binary mask, row-major, `true` = tampered.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskImage {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl MaskImage {
    pub fn zeros(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width as usize * height as usize],
        }
    }

    pub fn from_bits(width: u32, height: u32, bits: Vec<bool>) -> Result<Self, ToolError> {
        if width == 0 || height == 0 || bits.len() != width as usize * height as usize {
            return Err(ToolError::Invalid(format!(
                "{} bits for a {width}x{height} mask",
                bits.len()
            )));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let bits = (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| f(x, y))
            .collect();
        Self {
            width,
            height,
            bits,
        }
    }

    /// Mask that is set exactly inside `boxes` (after clamping).
    pub fn from_boxes(width: u32, height: u32, boxes: &[BoundingBox]) -> Self {
        let mut m = Self::zeros(width, height);
        for b in boxes.iter().filter_map(|b| clamp_box(b, (width, height))) {
            for y in b.y1..b.y2 {
                for x in b.x1..b.x2 {
                    m.set(x as u32, y as u32, true);
                }
            }
        }
        m
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, v: bool) {
        let w = self.width as usize;
        self.bits[y as usize * w + x as usize] = v;
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Fraction of set pixels.
    pub fn coverage(&self) -> f64 {
        self.count_ones() as f64 / self.bits.len() as f64
    }

    /// 8-bit grayscale PNG, 255 = tampered.
    pub fn encode_png(&self) -> Result<Vec<u8>, ToolError> {
        let gray = GrayImage::from_fn(self.width, self.height, |x, y| {
            Luma([if self.get(x, y) { 255 } else { 0 }])
        });
        let mut out = Cursor::new(Vec::new());
        gray.write_to(&mut out, ImageFormat::Png)
            .map_err(|e| ToolError::Encode(e.to_string()))?;
        Ok(out.into_inner())
    }

    /// Load a mask file, binarizing at `> 127`.
    pub fn open(path: &Path) -> Result<Self, ToolError> {
        let bytes = std::fs::read(path).map_err(|source| ToolError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let img = image::load_from_memory(&bytes)
            .map_err(|e| ToolError::Decode(format!("{}: {e}", path.display())))?;
        let gray = img.to_luma8();
        let (w, h) = gray.dimensions();
        Ok(Self::from_fn(w, h, |x, y| gray.get_pixel(x, y)[0] > 127))
    }
}

/// Lossless crop of `b` out of `image`.
pub fn crop(image: &ImageBuffer, b: &BoundingBox) -> Result<ImageBuffer, ToolError> {
    if !b.is_within(image.width, image.height) {
        return Err(ToolError::RejectedBox(*b, image.width, image.height));
    }
    let (w, h) = (b.width() as usize, b.height() as usize);
    let stride = image.width as usize * 3;
    let mut pixels = Vec::with_capacity(w * h * 3);
    for row in b.y1 as usize..b.y2 as usize {
        let start = row * stride + b.x1 as usize * 3;
        pixels.extend_from_slice(&image.pixels[start..start + w * 3]);
    }
    ImageBuffer::new(w as u32, h as u32, pixels)
}

/// Grow `b` on every side by `margin` times its width/height (rounded),
/// clamped to the image.
pub fn pad_box(b: &BoundingBox, margin: f64, dims: (u32, u32)) -> BoundingBox {
    let dx = (b.width() as f64 * margin).round() as i64;
    let dy = (b.height() as f64 * margin).round() as i64;
    let grown = BoundingBox::new(b.x1 - dx, b.y1 - dy, b.x2 + dx, b.y2 + dy);
    clamp_box(&grown, dims).unwrap_or(*b)
}

/// Pixelwise OR.
pub fn union_masks(masks: &[MaskImage]) -> Result<MaskImage, ToolError> {
    let (first, rest) = masks.split_first().ok_or(ToolError::EmptyMaskList)?;
    let mut out = first.clone();
    for m in rest {
        if m.dims() != out.dims() {
            return Err(ToolError::DimensionMismatch(out.dims(), m.dims()));
        }
        for (o, &b) in out.bits.iter_mut().zip(&m.bits) {
            *o |= b;
        }
    }
    Ok(out)
}

/// Decode an 8-bit single-channel image and set bits where gray > `threshold`.
pub fn binarize_mask(payload: &[u8], threshold: u8) -> Result<MaskImage, ToolError> {
    let img = image::load_from_memory(payload).map_err(|e| ToolError::Decode(e.to_string()))?;
    let image::DynamicImage::ImageLuma8(gray) = img else {
        return Err(ToolError::Decode(format!(
            "expected 8-bit grayscale mask, got {:?}",
            img.color()
        )));
    };
    let (w, h) = gray.dimensions();
    Ok(MaskImage::from_fn(w, h, |x, y| gray.get_pixel(x, y)[0] > threshold))
}

/// Side-by-side panel: input | mask | red alpha blend of the mask over the input.
pub fn render_overlay(image: &ImageBuffer, mask: &MaskImage) -> Result<ImageBuffer, ToolError> {
    if image.dims() != mask.dims() {
        return Err(ToolError::DimensionMismatch(image.dims(), mask.dims()));
    }
    let (w, h) = image.dims();
    let mut out = RgbImage::new(w * 3, h);
    const ALPHA: f32 = 0.5;
    const TINT: [f32; 3] = [255.0, 0.0, 0.0];
    for y in 0..h {
        for x in 0..w {
            let px = image.pixel(x, y);
            let on = mask.get(x, y);
            out.put_pixel(x, y, Rgb(px));
            out.put_pixel(w + x, y, Rgb(if on { [255; 3] } else { [0; 3] }));
            let blended = if on {
                let mut b = [0u8; 3];
                for c in 0..3 {
                    b[c] = (f32::from(px[c]) * (1.0 - ALPHA) + TINT[c] * ALPHA).round() as u8;
                }
                b
            } else {
                px
            };
            out.put_pixel(2 * w + x, y, Rgb(blended));
        }
    }
    ImageBuffer::from_rgb(out)
}
