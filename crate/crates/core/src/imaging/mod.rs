//! Raster and geometry kernels behind the crop, enhance and measure tools.
//!
//! Every operation takes its inputs by reference and returns a new value.

mod canny;
mod clahe;
mod foreground;
mod measure;
mod otsu;

use std::fmt;
use std::io::Cursor;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use canny::{edge_map, CANNY_HIGH, CANNY_LOW};
pub use clahe::{clahe, clahe_with_stats, global_equalize, ClaheStats, CLAHE_CLIP_LIMIT, CLAHE_TILES};
pub use foreground::{
    center_box, close3, connected_components, foreground_extract, foreground_extract_with,
    median_blur, open3, ForegroundParams, ForegroundResult, FALLBACK_COVERAGE, MEDIAN_KERNEL,
};
pub use measure::{measure_angle, measure_distance, Measurement};
pub use otsu::{otsu_threshold, OtsuThreshold};

#[derive(Debug, thiserror::Error)]
pub enum ImagingError {
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("bounding box {bbox} lies outside a {width}x{height} image")]
    BoxOutOfRange {
        bbox: BBox,
        width: u32,
        height: u32,
    },
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error("expected a single-channel image, got {0} channels")]
    NotGrayscale(u8),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("histogram is empty")]
    EmptyHistogram,
    #[error("non-finite coordinate")]
    NonFinite,
    #[error("zero-length arm at the vertex")]
    ZeroLengthArm,
    #[error("png codec: {0}")]
    Codec(#[from] image::ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ImagingError>;

/// Row-major 8-bit image with 1 (gray) or 3 (RGB) interleaved channels.
#[derive(Clone, PartialEq, Eq)]
pub struct RasterImage {
    width: u32,
    height: u32,
    channels: u8,
    data: Vec<u8>,
}

impl fmt::Debug for RasterImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RasterImage")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("channels", &self.channels)
            .finish_non_exhaustive()
    }
}

impl RasterImage {
    pub fn new(width: u32, height: u32, channels: u8, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(ImagingError::InvalidImage(format!(
                "dimensions must be positive, got {width}x{height}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(ImagingError::InvalidImage(format!(
                "channels must be 1 or 3, got {channels}"
            )));
        }
        let expected = width as usize * height as usize * channels as usize;
        if data.len() != expected {
            return Err(ImagingError::InvalidImage(format!(
                "expected {expected} samples, got {}",
                data.len()
            )));
        }
        Ok(RasterImage {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: u32, height: u32, channels: u8, value: u8) -> Result<Self> {
        let len = width as usize * height as usize * channels as usize;
        Self::new(width, height, channels, vec![value; len])
    }

    pub fn from_gray_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> u8) -> Result<Self> {
        let mut data = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(width, height, 1, data)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn channels(&self) -> u8 {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn full_box(&self) -> BBox {
        BBox {
            x0: 0,
            y0: 0,
            x1: self.width,
            y1: self.height,
        }
    }

    /// Sample at `(x, y)` in channel `c`.
    #[inline]
    pub fn get(&self, x: u32, y: u32, c: u8) -> u8 {
        let idx = (y as usize * self.width as usize + x as usize) * self.channels as usize + c as usize;
        self.data[idx]
    }

    /// Luma conversion with weights 0.299/0.587/0.114, rounded half up.
    /// Single-channel images are returned as a copy.
    pub fn to_gray(&self) -> RasterImage {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(3)
            .map(|p| {
                let v = 299 * p[0] as u32 + 587 * p[1] as u32 + 114 * p[2] as u32;
                ((v + 500) / 1000) as u8
            })
            .collect();
        RasterImage {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    pub fn histogram(&self) -> Result<[u64; 256]> {
        if self.channels != 1 {
            return Err(ImagingError::NotGrayscale(self.channels));
        }
        let mut hist = [0u64; 256];
        for &v in &self.data {
            hist[v as usize] += 1;
        }
        Ok(hist)
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())?;
        Ok(Self::from_dynamic(img))
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?;
        Ok(Self::from_dynamic(img))
    }

    fn from_dynamic(img: image::DynamicImage) -> Self {
        let color = img.color();
        if color.has_color() {
            let rgb = img.to_rgb8();
            let (w, h) = rgb.dimensions();
            RasterImage {
                width: w,
                height: h,
                channels: 3,
                data: rgb.into_raw(),
            }
        } else {
            let gray = img.to_luma8();
            let (w, h) = gray.dimensions();
            RasterImage {
                width: w,
                height: h,
                channels: 1,
                data: gray.into_raw(),
            }
        }
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Cursor::new(Vec::new());
        let color = if self.channels == 1 {
            image::ExtendedColorType::L8
        } else {
            image::ExtendedColorType::Rgb8
        };
        image::write_buffer_with_format(
            &mut out,
            &self.data,
            self.width,
            self.height,
            color,
            image::ImageFormat::Png,
        )?;
        Ok(out.into_inner())
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_png_bytes()?)?;
        Ok(())
    }
}

/// Axis-aligned pixel box, half-open on the max side.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl BBox {
    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Result<Self> {
        if x0 >= x1 || y0 >= y1 {
            return Err(ImagingError::InvalidBox(format!(
                "({x0},{y0},{x1},{y1}) is empty or inverted"
            )));
        }
        Ok(BBox { x0, y0, x1, y1 })
    }

    pub fn width(&self) -> u32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> u32 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    pub fn fits(&self, width: u32, height: u32) -> bool {
        self.x0 < self.x1 && self.y0 < self.y1 && self.x1 <= width && self.y1 <= height
    }

    pub fn intersection(&self, other: &BBox) -> Option<BBox> {
        let x0 = self.x0.max(other.x0);
        let y0 = self.y0.max(other.y0);
        let x1 = self.x1.min(other.x1);
        let y1 = self.y1.min(other.y1);
        (x0 < x1 && y0 < y1).then_some(BBox { x0, y0, x1, y1 })
    }

    /// Parses four integers separated by commas or whitespace, optionally
    /// wrapped in `()` or `[]`, e.g. `"(10, 20, 50, 60)"`.
    pub fn parse(s: &str) -> Option<BBox> {
        let inner = s
            .trim()
            .trim_start_matches(['(', '['])
            .trim_end_matches([')', ']']);
        let nums: Vec<u32> = inner
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|p| !p.is_empty())
            .map(|p| p.parse().ok())
            .collect::<Option<_>>()?;
        match nums.as_slice() {
            &[x0, y0, x1, y1] => BBox::new(x0, y0, x1, y1).ok(),
            _ => None,
        }
    }

    /// Scans free text for the first group of four integers that forms a
    /// non-empty box.
    pub fn find_in_text(s: &str) -> Option<BBox> {
        let nums: Vec<u32> = s
            .split(|c: char| !c.is_ascii_digit())
            .filter(|p| !p.is_empty())
            .filter_map(|p| p.parse().ok())
            .collect();
        nums.windows(4)
            .find_map(|w| BBox::new(w[0], w[1], w[2], w[3]).ok())
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.x0, self.y0, self.x1, self.y1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    /// Parses `x,y` with optional surrounding parentheses.
    pub fn parse(s: &str) -> Option<Point> {
        let inner = s.trim().trim_start_matches('(').trim_end_matches(')');
        let (x, y) = inner.split_once(',')?;
        let p = Point::new(x.trim().parse().ok()?, y.trim().parse().ok()?);
        p.is_finite().then_some(p)
    }
}

/// Copies the pixels inside `bbox`.
pub fn crop(image: &RasterImage, bbox: &BBox) -> Result<RasterImage> {
    if !bbox.fits(image.width, image.height) {
        return Err(ImagingError::BoxOutOfRange {
            bbox: *bbox,
            width: image.width,
            height: image.height,
        });
    }
    let ch = image.channels as usize;
    let row_len = bbox.width() as usize * ch;
    let mut data = Vec::with_capacity(row_len * bbox.height() as usize);
    for y in bbox.y0..bbox.y1 {
        let start = (y as usize * image.width as usize + bbox.x0 as usize) * ch;
        data.extend_from_slice(&image.data[start..start + row_len]);
    }
    RasterImage::new(bbox.width(), bbox.height(), image.channels, data)
}
