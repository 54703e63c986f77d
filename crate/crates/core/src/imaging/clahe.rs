//! Contrast-limited adaptive histogram equalization.

use super::{ImagingError, RasterImage, Result};

pub const CLAHE_CLIP_LIMIT: f64 = 2.0;
pub const CLAHE_TILES: (u32, u32) = (8, 8);

/// Per-tile bookkeeping, row-major over tiles.
#[derive(Clone, Debug, PartialEq)]
pub struct ClaheStats {
    pub tiles: (u32, u32),
    pub tile_pixels: Vec<u64>,
    /// Histogram mass after clipping and redistribution.
    pub clipped_mass: Vec<u64>,
}

/// Tile grid sizes larger than the image are reduced to one tile per pixel
/// along that axis. `clip_limit = f64::INFINITY` disables clipping.
pub fn clahe(image: &RasterImage, clip_limit: f64, tiles: (u32, u32)) -> Result<RasterImage> {
    clahe_with_stats(image, clip_limit, tiles).map(|(img, _)| img)
}

pub fn clahe_with_stats(
    image: &RasterImage,
    clip_limit: f64,
    tiles: (u32, u32),
) -> Result<(RasterImage, ClaheStats)> {
    if image.channels() != 1 {
        return Err(ImagingError::NotGrayscale(image.channels()));
    }
    if clip_limit.is_nan() || clip_limit < 1.0 {
        return Err(ImagingError::InvalidParameter(format!(
            "clip limit must be >= 1, got {clip_limit}"
        )));
    }
    if tiles.0 == 0 || tiles.1 == 0 {
        return Err(ImagingError::InvalidParameter("tile counts must be >= 1".into()));
    }
    let (w, h) = (image.width(), image.height());
    let nx = tiles.0.min(w);
    let ny = tiles.1.min(h);
    let xb: Vec<u32> = (0..=nx).map(|i| (i as u64 * w as u64 / nx as u64) as u32).collect();
    let yb: Vec<u32> = (0..=ny).map(|j| (j as u64 * h as u64 / ny as u64) as u32).collect();
    let src = image.data();

    let mut luts = Vec::with_capacity((nx * ny) as usize);
    let mut stats = ClaheStats {
        tiles: (nx, ny),
        tile_pixels: Vec::new(),
        clipped_mass: Vec::new(),
    };
    for j in 0..ny as usize {
        for i in 0..nx as usize {
            let mut hist = [0u64; 256];
            for y in yb[j]..yb[j + 1] {
                let row = &src[(y * w) as usize..((y + 1) * w) as usize];
                for &v in &row[xb[i] as usize..xb[i + 1] as usize] {
                    hist[v as usize] += 1;
                }
            }
            let pixels = ((xb[i + 1] - xb[i]) as u64) * ((yb[j + 1] - yb[j]) as u64);
            clip_histogram(&mut hist, clip_limit, pixels);
            stats.tile_pixels.push(pixels);
            stats.clipped_mass.push(hist.iter().sum());
            luts.push(equalization_lut(&hist, pixels));
        }
    }

    let centers = |b: &[u32]| -> Vec<f64> {
        b.windows(2)
            .map(|p| (p[0] as f64 + p[1] as f64 - 1.0) / 2.0)
            .collect()
    };
    let cx = centers(&xb);
    let cy = centers(&yb);
    let xs: Vec<(usize, usize, f64)> = (0..w).map(|x| neighbours(&cx, x as f64)).collect();

    let mut out = vec![0u8; src.len()];
    for y in 0..h {
        let (j0, j1, wy) = neighbours(&cy, y as f64);
        for x in 0..w {
            let (i0, i1, wx) = xs[x as usize];
            let idx = (y * w + x) as usize;
            let v = src[idx] as usize;
            let l00 = luts[j0 * nx as usize + i0][v] as f64;
            let l10 = luts[j0 * nx as usize + i1][v] as f64;
            let l01 = luts[j1 * nx as usize + i0][v] as f64;
            let l11 = luts[j1 * nx as usize + i1][v] as f64;
            let top = l00 + wx * (l10 - l00);
            let bottom = l01 + wx * (l11 - l01);
            let val = top + wy * (bottom - top);
            out[idx] = val.round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok((RasterImage::new(w, h, 1, out)?, stats))
}

/// Lower/upper tile index and interpolation weight for coordinate `p`.
fn neighbours(centers: &[f64], p: f64) -> (usize, usize, f64) {
    let last = centers.len() - 1;
    if p <= centers[0] {
        return (0, 0, 0.0);
    }
    if p >= centers[last] {
        return (last, last, 0.0);
    }
    let i = centers.partition_point(|&c| c <= p) - 1;
    let wgt = (p - centers[i]) / (centers[i + 1] - centers[i]);
    (i, i + 1, wgt)
}

/// Clips at `clip_limit * pixels / 256` and spreads the excess evenly; the
/// remainder is handed out one count per bin at a fixed stride.
fn clip_histogram(hist: &mut [u64; 256], clip_limit: f64, pixels: u64) {
    if clip_limit.is_infinite() {
        return;
    }
    let limit = ((clip_limit * pixels as f64 / 256.0).floor() as u64).max(1);
    let mut excess = 0u64;
    for b in hist.iter_mut() {
        if *b > limit {
            excess += *b - limit;
            *b = limit;
        }
    }
    let inc = excess / 256;
    for b in hist.iter_mut() {
        *b += inc;
    }
    let residual = (excess % 256) as usize;
    if residual > 0 {
        let step = (256 / residual).max(1);
        for k in 0..residual {
            hist[k * step] += 1;
        }
    }
}

fn equalization_lut(hist: &[u64; 256], pixels: u64) -> [u8; 256] {
    let mut lut = [0u8; 256];
    let mut cdf = 0u64;
    for (v, &c) in hist.iter().enumerate() {
        cdf += c;
        lut[v] = ((cdf * 255 + pixels / 2) / pixels) as u8;
    }
    lut
}

/// Global histogram equalization: `round(255 * cdf(v) / N)`.
pub fn global_equalize(image: &RasterImage) -> Result<RasterImage> {
    let hist = image.histogram()?;
    let lut = equalization_lut(&hist, image.pixel_count() as u64);
    let data = image.data().iter().map(|&v| lut[v as usize]).collect();
    RasterImage::new(image.width(), image.height(), 1, data)
}
