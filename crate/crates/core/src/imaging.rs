//! Pixel geometry for both stages: short-edge center crop, bilinear resize,
//! and extraction of the fixed-size diagnostic square around an ROI center.
//!
//! Resampling contract (bit-exact, relied on by tests and by anyone porting
//! the engine): for output pixel `d` on an axis of `n_in -> n_out` samples the
//! source coordinate is `(d + 0.5) * (n_in / n_out) - 0.5`, clamped to
//! `[0, n_in - 1]`. With `x0 = floor(sx)`, `x1 = min(x0 + 1, n_in - 1)`,
//! `fx = sx - x0` (same for y), each channel is
//!
//! ```text
//! v = (1 - fy) * ((1 - fx) * p00 + fx * p01) + fy * ((1 - fx) * p10 + fx * p11)
//! ```
//!
//! evaluated in `f64` in exactly that order, then stored as `floor(v + 0.5)`
//! clamped to `0..=255`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CHANNELS: usize = 3;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("image dimensions must be at least 1x1, got {width}x{height}")]
    EmptyImage { width: u32, height: u32 },
    #[error("buffer holds {actual} bytes, expected {expected} for {width}x{height} RGB")]
    BadBufferLength { width: u32, height: u32, expected: usize, actual: usize },
    #[error("invalid ROI box: {0}")]
    InvalidBox(String),
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("window ({x0},{y0},{side}) does not fit a {width}x{height} image")]
    WindowOutOfBounds { x0: u32, y0: u32, side: u32, width: u32, height: u32 },
    #[error("image codec error: {0}")]
    Codec(#[from] image::ImageError),
}

/// Owned 8-bit RGB raster, row-major.
#[derive(Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl std::fmt::Debug for ImageBuffer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ImageBuffer").field("width", &self.width).field("height", &self.height).finish_non_exhaustive()
    }
}

impl ImageBuffer {
    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Result<Self, ImagingError> {
        if width == 0 || height == 0 {
            return Err(ImagingError::EmptyImage { width, height });
        }
        let expected = width as usize * height as usize * CHANNELS;
        if data.len() != expected {
            return Err(ImagingError::BadBufferLength { width, height, expected, actual: data.len() });
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Result<Self, ImagingError> {
        let n = width as usize * height as usize;
        let data = rgb.iter().copied().cycle().take(n * CHANNELS).collect();
        Self::new(width, height, data)
    }

    /// Builds an image by evaluating `f(x, y)` for every pixel.
    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> [u8; 3]) -> Result<Self, ImagingError> {
        let mut data = Vec::with_capacity(width as usize * height as usize * CHANNELS);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self::new(width, height, data)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Copies the `w`x`h` rectangle at (`x0`, `y0`).
    pub fn crop(&self, x0: u32, y0: u32, w: u32, h: u32) -> Result<ImageBuffer, ImagingError> {
        if w == 0 || h == 0 || x0 as u64 + w as u64 > self.width as u64 || y0 as u64 + h as u64 > self.height as u64 {
            return Err(ImagingError::WindowOutOfBounds {
                x0,
                y0,
                side: w.max(h),
                width: self.width,
                height: self.height,
            });
        }
        let stride = self.width as usize * CHANNELS;
        let row_len = w as usize * CHANNELS;
        let mut data = Vec::with_capacity(row_len * h as usize);
        for y in y0..y0 + h {
            let start = y as usize * stride + x0 as usize * CHANNELS;
            data.extend_from_slice(&self.data[start..start + row_len]);
        }
        Ok(ImageBuffer { width: w, height: h, data })
    }

    /// Decodes a PNG or JPEG file into RGB8.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, ImagingError> {
        let rgb = image::open(path)?.to_rgb8();
        let (w, h) = rgb.dimensions();
        Self::new(w, h, rgb.into_raw())
    }

    /// Writes a PNG with fast compression; used for backend hand-off files.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), ImagingError> {
        use image::codecs::png::{CompressionType, FilterType, PngEncoder};
        use image::ImageEncoder;

        let file = std::fs::File::create(path).map_err(image::ImageError::IoError)?;
        let encoder =
            PngEncoder::new_with_quality(std::io::BufWriter::new(file), CompressionType::Fast, FilterType::NoFilter);
        encoder.write_image(&self.data, self.width, self.height, image::ExtendedColorType::Rgb8)?;
        Ok(())
    }
}

/// Stage-1 bounding box. Disease-agnostic: it carries no class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBox")]
pub struct RoiBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub confidence: f64,
}

#[derive(Deserialize)]
struct RawBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
    confidence: f64,
}

impl TryFrom<RawBox> for RoiBox {
    type Error = ImagingError;

    fn try_from(r: RawBox) -> Result<Self, Self::Error> {
        RoiBox::new(r.x_min, r.y_min, r.x_max, r.y_max, r.confidence)
    }
}

impl RoiBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64, confidence: f64) -> Result<Self, ImagingError> {
        let all = [x_min, y_min, x_max, y_max, confidence];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(ImagingError::InvalidBox("non-finite value".into()));
        }
        if !(x_min < x_max && y_min < y_max) {
            return Err(ImagingError::InvalidBox(format!("degenerate box ({x_min},{y_min})-({x_max},{y_max})")));
        }
        if x_min < 0.0 || y_min < 0.0 {
            return Err(ImagingError::InvalidBox(format!("negative coordinate ({x_min},{y_min})")));
        }
        if !(0.0..=1.0).contains(&confidence) {
            return Err(ImagingError::InvalidBox(format!("confidence {confidence} outside [0,1]")));
        }
        Ok(Self { x_min, y_min, x_max, y_max, confidence })
    }

    pub fn fits_within(&self, width: u32, height: u32) -> bool {
        self.x_max <= width as f64 && self.y_max <= height as f64
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }
}

/// Side lengths used by the two stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineGeometry {
    /// Square side the raw image is normalized to before detection.
    pub stage1_size: u32,
    /// Square side fed to the classifier.
    pub stage2_size: u32,
    /// Side of the diagnostic square cut around each ROI center.
    pub square: u32,
}

impl Default for PipelineGeometry {
    fn default() -> Self {
        Self { stage1_size: 1472, stage2_size: 512, square: 512 }
    }
}

impl PipelineGeometry {
    pub fn new(stage1_size: u32, stage2_size: u32, square: u32) -> Result<Self, ImagingError> {
        let g = Self { stage1_size, stage2_size, square };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), ImagingError> {
        if self.stage1_size == 0 || self.stage2_size == 0 || self.square == 0 {
            return Err(ImagingError::InvalidGeometry("all sizes must be positive".into()));
        }
        if self.square > self.stage1_size {
            return Err(ImagingError::InvalidGeometry(format!(
                "diagnostic square {} exceeds stage-1 size {}",
                self.square, self.stage1_size
            )));
        }
        Ok(())
    }
}

/// Square crop window in stage-1 coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub x0: u32,
    pub y0: u32,
    pub side: u32,
}

pub fn round_half_up(v: f64) -> f64 {
    (v + 0.5).floor()
}

/// Offset of the largest centered square on the long axis.
pub fn short_edge_offsets(width: u32, height: u32) -> (u32, u32, u32) {
    let side = width.min(height);
    ((width - side) / 2, (height - side) / 2, side)
}

pub fn center_crop_short_edge(img: &ImageBuffer) -> ImageBuffer {
    let (x0, y0, side) = short_edge_offsets(img.width, img.height);
    if x0 == 0 && y0 == 0 && side == img.width && side == img.height {
        return img.clone();
    }
    img.crop(x0, y0, side, side).expect("centered square is in bounds")
}

#[derive(Debug, Clone, Copy)]
struct Tap {
    i0: usize,
    i1: usize,
    frac: f64,
}

fn axis_taps(n_in: u32, n_out: u32) -> Vec<Tap> {
    let scale = n_in as f64 / n_out as f64;
    let max = (n_in - 1) as f64;
    (0..n_out)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, max);
            let i0 = s.floor();
            let i0u = i0 as usize;
            Tap { i0: i0u, i1: (i0u + 1).min(n_in as usize - 1), frac: s - i0 }
        })
        .collect()
}

/// Bilinear resize with half-pixel centers and edge clamping.
///
/// # Panics
/// If either output dimension is zero.
pub fn resize_bilinear(img: &ImageBuffer, out_w: u32, out_h: u32) -> ImageBuffer {
    assert!(out_w >= 1 && out_h >= 1, "output dimensions must be positive");
    let xs = axis_taps(img.width, out_w);
    let ys = axis_taps(img.height, out_h);
    let stride = img.width as usize * CHANNELS;
    let src = &img.data;

    let mut data = Vec::with_capacity(out_w as usize * out_h as usize * CHANNELS);
    for ty in &ys {
        let row0 = ty.i0 * stride;
        let row1 = ty.i1 * stride;
        let fy = ty.frac;
        for tx in &xs {
            let c0 = tx.i0 * CHANNELS;
            let c1 = tx.i1 * CHANNELS;
            let fx = tx.frac;
            for ch in 0..CHANNELS {
                let p00 = src[row0 + c0 + ch] as f64;
                let p01 = src[row0 + c1 + ch] as f64;
                let p10 = src[row1 + c0 + ch] as f64;
                let p11 = src[row1 + c1 + ch] as f64;
                let v = (1.0 - fy) * ((1.0 - fx) * p00 + fx * p01) + fy * ((1.0 - fx) * p10 + fx * p11);
                data.push(round_half_up(v).clamp(0.0, 255.0) as u8);
            }
        }
    }
    ImageBuffer { width: out_w, height: out_h, data }
}

/// Result of normalizing a raw image to the stage-1 square.
#[derive(Debug, Clone)]
pub struct Preprocessed {
    pub image: ImageBuffer,
    pub source_size: (u32, u32),
    /// The cropped square was smaller than the stage-1 size.
    pub upscaled: bool,
}

/// Short-edge center crop followed by bilinear resize to `size`x`size`.
pub fn preprocess_stage1(img: &ImageBuffer, size: u32) -> Preprocessed {
    let square = center_crop_short_edge(img);
    let upscaled = square.width < size;
    let image = if square.width == size { square } else { resize_bilinear(&square, size, size) };
    Preprocessed { image, source_size: (img.width, img.height), upscaled }
}

/// The `square`x`square` window centered on the box, shifted to stay inside
/// the stage-1 frame.
pub fn diagnostic_square(roi: &RoiBox, geom: &PipelineGeometry) -> Window {
    let side = geom.square;
    let limit = (geom.stage1_size - side) as f64;
    let half = side as f64 / 2.0;
    let (cx, cy) = roi.center();
    let place = |c: f64| round_half_up(c - half).clamp(0.0, limit) as u32;
    Window { x0: place(cx), y0: place(cy), side }
}

/// Cuts the diagnostic square out of the stage-1 image and resizes it to the
/// classifier input size.
pub fn extract_and_resize(
    img: &ImageBuffer,
    roi: &RoiBox,
    geom: &PipelineGeometry,
) -> Result<(Window, ImageBuffer), ImagingError> {
    if img.width != geom.stage1_size || img.height != geom.stage1_size {
        return Err(ImagingError::InvalidGeometry(format!(
            "expected a {0}x{0} stage-1 image, got {1}x{2}",
            geom.stage1_size, img.width, img.height
        )));
    }
    let w = diagnostic_square(roi, geom);
    let patch = img.crop(w.x0, w.y0, w.side, w.side)?;
    let out =
        if w.side == geom.stage2_size { patch } else { resize_bilinear(&patch, geom.stage2_size, geom.stage2_size) };
    Ok((w, out))
}
