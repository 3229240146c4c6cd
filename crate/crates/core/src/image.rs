//! 8-bit grayscale image buffer and the few pixel operations the pipeline needs.

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ImageError {
    #[error("buffer has {actual} bytes, expected {width}x{height} = {}", width * height)]
    SizeMismatch {
        width: usize,
        height: usize,
        actual: usize,
    },
    #[error("image {width}x{height} is smaller than the required {min}x{min}")]
    TooSmall {
        width: usize,
        height: usize,
        min: usize,
    },
    #[error("crop {x},{y} {w}x{h} does not fit a {width}x{height} image")]
    BadCrop {
        x: usize,
        y: usize,
        w: usize,
        h: usize,
        width: usize,
        height: usize,
    },
}

/// Row-major 8 bits per pixel.
#[derive(Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl std::fmt::Debug for GrayImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "GrayImage({}x{})", self.width, self.height)
    }
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0)
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<u8>) -> Result<Self, ImageError> {
        if data.len() != width * height {
            return Err(ImageError::SizeMismatch {
                width,
                height,
                actual: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn as_raw(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    #[inline]
    pub fn row(&self, y: usize) -> &[u8] {
        &self.data[y * self.width..(y + 1) * self.width]
    }

    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<GrayImage, ImageError> {
        if x + w > self.width || y + h > self.height || w == 0 || h == 0 {
            return Err(ImageError::BadCrop {
                x,
                y,
                w,
                h,
                width: self.width,
                height: self.height,
            });
        }
        let mut data = Vec::with_capacity(w * h);
        for yy in y..y + h {
            data.extend_from_slice(&self.row(yy)[x..x + w]);
        }
        Ok(GrayImage {
            width: w,
            height: h,
            data,
        })
    }

    /// Averages `factor x factor` blocks; trailing partial blocks are discarded.
    pub fn bin(&self, factor: usize) -> GrayImage {
        if factor <= 1 {
            return self.clone();
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let n = (factor * factor) as u32;
        GrayImage::from_fn(w, h, |x, y| {
            let mut sum = 0u32;
            for yy in 0..factor {
                let row = self.row(y * factor + yy);
                for xx in 0..factor {
                    sum += row[x * factor + xx] as u32;
                }
            }
            ((sum + n / 2) / n) as u8
        })
    }

    /// Inverts intensities (`255 - v`).
    pub fn inverted(&self) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| 255 - v).collect(),
        }
    }

    /// Translates content by `(dx, dy)`; uncovered pixels take `fill`.
    pub fn shifted(&self, dx: isize, dy: isize, fill: u8) -> GrayImage {
        GrayImage::from_fn(self.width, self.height, |x, y| {
            let sx = x as isize - dx;
            let sy = y as isize - dy;
            if sx >= 0 && sy >= 0 && (sx as usize) < self.width && (sy as usize) < self.height {
                self.get(sx as usize, sy as usize)
            } else {
                fill
            }
        })
    }

    /// Bilinear sample in float coordinates; clamps at the border.
    #[inline]
    pub fn sample_bilinear(&self, x: f64, y: f64) -> f64 {
        let maxx = (self.width - 1) as f64;
        let maxy = (self.height - 1) as f64;
        let x = x.clamp(0.0, maxx);
        let y = y.clamp(0.0, maxy);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let p00 = self.get(x0, y0) as f64;
        let p10 = self.get(x1, y0) as f64;
        let p01 = self.get(x0, y1) as f64;
        let p11 = self.get(x1, y1) as f64;
        (p00 * (1.0 - fx) + p10 * fx) * (1.0 - fy) + (p01 * (1.0 - fx) + p11 * fx) * fy
    }
}

/// Summed-area table with one row/column of zero padding.
pub struct IntegralImage {
    stride: usize,
    sums: Vec<u32>,
}

impl IntegralImage {
    pub fn new(img: &GrayImage) -> Self {
        let stride = img.width() + 1;
        let mut sums = vec![0u32; stride * (img.height() + 1)];
        for y in 0..img.height() {
            let mut run = 0u32;
            let row = img.row(y);
            for x in 0..img.width() {
                run += row[x] as u32;
                sums[(y + 1) * stride + x + 1] = sums[y * stride + x + 1] + run;
            }
        }
        Self { stride, sums }
    }

    /// Sum over the inclusive rectangle `[x0, x1] x [y0, y1]`.
    #[inline]
    pub fn rect_sum(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> u32 {
        let s = self.stride;
        self.sums[(y1 + 1) * s + x1 + 1] + self.sums[y0 * s + x0]
            - self.sums[y0 * s + x1 + 1]
            - self.sums[(y1 + 1) * s + x0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integral_matches_direct_sum() {
        let img = GrayImage::from_fn(13, 9, |x, y| ((x * 31 + y * 17) % 251) as u8);
        let ii = IntegralImage::new(&img);
        let direct: u32 = (2..=6)
            .flat_map(|y| (3..=10).map(move |x| (x, y)))
            .map(|(x, y)| img.get(x, y) as u32)
            .sum();
        assert_eq!(ii.rect_sum(3, 2, 10, 6), direct);
    }

    #[test]
    fn binning_averages_blocks() {
        let img = GrayImage::from_raw(4, 2, vec![0, 2, 10, 10, 4, 6, 10, 10]).unwrap();
        let b = img.bin(2);
        assert_eq!(b.as_raw(), &[3, 10]);
    }

    #[test]
    fn from_raw_rejects_wrong_length() {
        assert!(GrayImage::from_raw(3, 3, vec![0; 8]).is_err());
    }
}
