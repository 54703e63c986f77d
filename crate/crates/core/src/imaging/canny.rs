//! Canny edge detector: 5x5 Gaussian (sigma 1.4), Sobel, four-sector
//! non-maximum suppression, double-threshold hysteresis.

use super::{ImagingError, RasterImage, Result};

pub const CANNY_LOW: f64 = 50.0;
pub const CANNY_HIGH: f64 = 150.0;

const SIGMA: f64 = 1.4;

fn gaussian_kernel() -> [f64; 5] {
    let mut k = [0.0; 5];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - 2.0;
        *v = (-(d * d) / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Returns a `{0, 255}` mask. Thresholds apply to the L2 Sobel magnitude on
/// the 0–255 intensity scale.
pub fn edge_map(image: &RasterImage, low: f64, high: f64) -> Result<RasterImage> {
    if image.channels() != 1 {
        return Err(ImagingError::NotGrayscale(image.channels()));
    }
    if !(low >= 0.0 && low <= high) {
        return Err(ImagingError::InvalidParameter(format!(
            "need 0 <= low <= high, got low={low} high={high}"
        )));
    }
    let (w, h) = (image.width() as usize, image.height() as usize);
    let src: Vec<f64> = image.data().iter().map(|&v| v as f64).collect();
    let k = gaussian_kernel();

    let clampx = |x: isize| x.clamp(0, w as isize - 1) as usize;
    let clampy = |y: isize| y.clamp(0, h as isize - 1) as usize;

    // separable blur, replicated borders
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = (0..5)
                .map(|i| k[i] * src[y * w + clampx(x as isize + i as isize - 2)])
                .sum();
        }
    }
    let mut blur = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            blur[y * w + x] = (0..5)
                .map(|i| k[i] * tmp[clampy(y as isize + i as isize - 2) * w + x])
                .sum();
        }
    }

    let at = |x: isize, y: isize| blur[clampy(y) * w + clampx(x)];
    let mut mag = vec![0.0; w * h];
    let mut sector = vec![0u8; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
            let gy = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
            let idx = y as usize * w + x as usize;
            mag[idx] = gx.hypot(gy);
            sector[idx] = quantize(gy.atan2(gx));
        }
    }

    // Keep a pixel when it beats the neighbour on one side and is not beaten
    // on the other, so a symmetric ridge keeps exactly one pixel.
    let m = |x: isize, y: isize| -> f64 {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0.0
        } else {
            mag[y as usize * w + x as usize]
        }
    };
    let mut thin = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let idx = y as usize * w + x as usize;
            let v = mag[idx];
            if v == 0.0 {
                continue;
            }
            let (dx, dy) = match sector[idx] {
                0 => (1, 0),
                1 => (1, 1),
                2 => (0, 1),
                _ => (-1, 1),
            };
            if v > m(x - dx, y - dy) && v >= m(x + dx, y + dy) {
                thin[idx] = v;
            }
        }
    }

    let mut out = vec![0u8; w * h];
    let mut stack: Vec<usize> = Vec::new();
    for (idx, &v) in thin.iter().enumerate() {
        if v >= high && v > 0.0 {
            out[idx] = 255;
            stack.push(idx);
        }
    }
    while let Some(p) = stack.pop() {
        let (px, py) = ((p % w) as isize, (p / w) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (nx, ny) = (px + dx, py + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let q = ny as usize * w + nx as usize;
                if out[q] == 0 && thin[q] >= low && thin[q] > 0.0 {
                    out[q] = 255;
                    stack.push(q);
                }
            }
        }
    }
    RasterImage::new(image.width(), image.height(), 1, out)
}

/// Gradient direction to one of four sectors: 0 = horizontal gradient,
/// 1 = 45°, 2 = vertical, 3 = 135°.
fn quantize(angle: f64) -> u8 {
    let mut deg = angle.to_degrees();
    if deg < 0.0 {
        deg += 180.0;
    }
    if !(22.5..157.5).contains(&deg) {
        0
    } else if deg < 67.5 {
        1
    } else if deg < 112.5 {
        2
    } else {
        3
    }
}
