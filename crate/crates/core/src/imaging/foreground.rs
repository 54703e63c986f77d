//! Unsupervised crop-target extraction: background estimate, differencing,
//! Otsu binarization, 3x3 open/close, largest connected component.

use serde::{Deserialize, Serialize};

use super::{otsu_threshold, BBox, ImagingError, RasterImage, Result};

pub const MEDIAN_KERNEL: u32 = 31;
/// Masks covering more than this fraction of the image fall back to the
/// center box.
pub const FALLBACK_COVERAGE: f64 = 0.95;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForegroundParams {
    pub median_kernel: u32,
    pub max_coverage: f64,
}

impl Default for ForegroundParams {
    fn default() -> Self {
        ForegroundParams {
            median_kernel: MEDIAN_KERNEL,
            max_coverage: FALLBACK_COVERAGE,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForegroundResult {
    pub bbox: BBox,
    pub fallback: bool,
    pub threshold: u8,
    /// Fraction of pixels in the cleaned mask.
    pub coverage: f64,
}

/// Centered box spanning half of each dimension (at least one pixel).
pub fn center_box(width: u32, height: u32) -> BBox {
    let bw = (width / 2).max(1);
    let bh = (height / 2).max(1);
    let x0 = (width - bw) / 2;
    let y0 = (height - bh) / 2;
    BBox {
        x0,
        y0,
        x1: x0 + bw,
        y1: y0 + bh,
    }
}

pub fn foreground_extract(image: &RasterImage, background: Option<&RasterImage>) -> Result<BBox> {
    foreground_extract_with(image, background, &ForegroundParams::default()).map(|r| r.bbox)
}

pub fn foreground_extract_with(
    image: &RasterImage,
    background: Option<&RasterImage>,
    params: &ForegroundParams,
) -> Result<ForegroundResult> {
    let (w, h) = (image.width(), image.height());
    let fallback = |threshold, coverage| ForegroundResult {
        bbox: center_box(w, h),
        fallback: true,
        threshold,
        coverage,
    };
    if w < 2 || h < 2 {
        return Ok(fallback(0, 0.0));
    }
    let gray = image.to_gray();
    let bg = match background {
        Some(b) => {
            if b.width() != w || b.height() != h {
                return Err(ImagingError::InvalidImage(format!(
                    "background is {}x{}, image is {w}x{h}",
                    b.width(),
                    b.height()
                )));
            }
            b.to_gray()
        }
        None => median_blur(&gray, params.median_kernel)?,
    };
    let diff: Vec<u8> = gray
        .data()
        .iter()
        .zip(bg.data())
        .map(|(&a, &b)| a.abs_diff(b))
        .collect();
    let mut hist = [0u64; 256];
    for &d in &diff {
        hist[d as usize] += 1;
    }
    let otsu = otsu_threshold(&hist)?;
    let mask: Vec<bool> = diff.iter().map(|&d| d > otsu.threshold).collect();
    let mask = close3(&open3(&mask, w, h), w, h);

    let on = mask.iter().filter(|&&m| m).count();
    let coverage = on as f64 / mask.len() as f64;
    if on == 0 || coverage > params.max_coverage {
        return Ok(fallback(otsu.threshold, coverage));
    }
    let components = connected_components(&mask, w, h);
    // components come in raster order of their first pixel; max_by_key keeps
    // the last maximum, so scan in reverse to keep the first.
    let largest = components
        .iter()
        .rev()
        .max_by_key(|c| c.area)
        .expect("non-empty mask has a component");
    Ok(ForegroundResult {
        bbox: largest.bbox,
        fallback: false,
        threshold: otsu.threshold,
        coverage,
    })
}

/// Median filter with a square `kernel` (odd) and replicated borders.
pub fn median_blur(image: &RasterImage, kernel: u32) -> Result<RasterImage> {
    if image.channels() != 1 {
        return Err(ImagingError::NotGrayscale(image.channels()));
    }
    if kernel.is_multiple_of(2) {
        return Err(ImagingError::InvalidParameter(format!(
            "median kernel must be odd, got {kernel}"
        )));
    }
    let (w, h) = (image.width() as i64, image.height() as i64);
    let r = (kernel / 2) as i64;
    let half = (kernel as usize * kernel as usize) / 2;
    let src = image.data();
    let at = |x: i64, y: i64| src[(y.clamp(0, h - 1) * w + x.clamp(0, w - 1)) as usize];
    let mut out = vec![0u8; src.len()];
    for y in 0..h {
        // sliding histogram along the row
        let mut hist = [0u32; 256];
        for dy in -r..=r {
            for dx in -r..=r {
                hist[at(dx, y + dy) as usize] += 1;
            }
        }
        for x in 0..w {
            if x > 0 {
                for dy in -r..=r {
                    hist[at(x - r - 1, y + dy) as usize] -= 1;
                    hist[at(x + r, y + dy) as usize] += 1;
                }
            }
            let mut acc = 0usize;
            let mut v = 0usize;
            while v < 256 {
                acc += hist[v] as usize;
                if acc > half {
                    break;
                }
                v += 1;
            }
            out[(y * w + x) as usize] = v as u8;
        }
    }
    RasterImage::new(image.width(), image.height(), 1, out)
}

fn morph(mask: &[bool], w: u32, h: u32, dilate: bool) -> Vec<bool> {
    let (w, h) = (w as i64, h as i64);
    let mut out = vec![false; mask.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = !dilate;
            'win: for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w || ny >= h {
                        continue;
                    }
                    let v = mask[(ny * w + nx) as usize];
                    if dilate && v {
                        acc = true;
                        break 'win;
                    }
                    if !dilate && !v {
                        acc = false;
                        break 'win;
                    }
                }
            }
            out[(y * w + x) as usize] = acc;
        }
    }
    out
}

/// Erosion then dilation with a 3x3 square; pixels outside the image are
/// ignored.
pub fn open3(mask: &[bool], w: u32, h: u32) -> Vec<bool> {
    morph(&morph(mask, w, h, false), w, h, true)
}

/// Dilation then erosion with a 3x3 square.
pub fn close3(mask: &[bool], w: u32, h: u32) -> Vec<bool> {
    morph(&morph(mask, w, h, true), w, h, false)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Component {
    pub area: usize,
    pub bbox: BBox,
}

/// 8-connected components, ordered by the raster position of their first
/// pixel.
pub fn connected_components(mask: &[bool], w: u32, h: u32) -> Vec<Component> {
    let (wi, hi) = (w as i64, h as i64);
    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0u32, 0u32);
        let mut area = 0;
        while let Some(p) = stack.pop() {
            area += 1;
            let (px, py) = ((p as i64 % wi), (p as i64 / wi));
            x0 = x0.min(px as u32);
            y0 = y0.min(py as u32);
            x1 = x1.max(px as u32 + 1);
            y1 = y1.max(py as u32 + 1);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (px + dx, py + dy);
                    if nx < 0 || ny < 0 || nx >= wi || ny >= hi {
                        continue;
                    }
                    let q = (ny * wi + nx) as usize;
                    if mask[q] && !seen[q] {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            }
        }
        out.push(Component {
            area,
            bbox: BBox { x0, y0, x1, y1 },
        });
    }
    out
}
