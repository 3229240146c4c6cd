use std::collections::HashMap;

use super::{Keypoint, SensorError};
use crate::image::{GrayImage, ImageError};

pub const MIN_IMAGE_SIZE: usize = 32;
/// Side of the square tiles the spatial cap is counted in.
pub const TILE_SIZE: i32 = 16;
const ARC: usize = 9;
const RADIUS: usize = 3;

/// Bresenham circle of radius 3, clockwise from 12 o'clock.
pub const CIRCLE: [(i32, i32); 16] = [
    (0, -3),
    (1, -3),
    (2, -2),
    (3, -1),
    (3, 0),
    (3, 1),
    (2, 2),
    (1, 3),
    (0, 3),
    (-1, 3),
    (-2, 2),
    (-3, 1),
    (-3, 0),
    (-3, -1),
    (-2, -2),
    (-1, -3),
];

/// Longest cyclic run of `true` in a 16-entry mask, with its start index.
fn longest_run(mask: u16) -> (usize, usize) {
    if mask == 0xFFFF {
        return (0, 16);
    }
    let mut best = (0, 0);
    // Start scanning right after a zero so cyclic runs are not split.
    let zero = (0..16).find(|i| mask & (1 << i) == 0).unwrap_or(0);
    let mut len = 0;
    let mut start = 0;
    for k in 1..=16 {
        let i = (zero + k) % 16;
        if mask & (1 << i) != 0 {
            if len == 0 {
                start = i;
            }
            len += 1;
            if len > best.1 {
                best = (start, len);
            }
        } else {
            len = 0;
        }
    }
    best
}

/// FAST-9 segment test at `(x, y)`. Returns the SAD over the qualifying
/// contiguous arc, or `None` when the pixel is not a corner.
///
/// The caller guarantees a 3 pixel margin around `(x, y)`.
pub fn fast_score(img: &GrayImage, x: usize, y: usize, threshold: f64) -> Option<u32> {
    let p = img.get(x, y) as i32;
    let mut vals = [0i32; 16];
    for (i, (dx, dy)) in CIRCLE.iter().enumerate() {
        vals[i] = img.get((x as i32 + dx) as usize, (y as i32 + dy) as usize) as i32;
    }
    // Any 9-arc covers at least two of the four compass pixels.
    let compass = [vals[0], vals[4], vals[8], vals[12]];
    let nb = compass.iter().filter(|&&v| (v - p) as f64 > threshold).count();
    let nd = compass.iter().filter(|&&v| (p - v) as f64 > threshold).count();
    if nb < 2 && nd < 2 {
        return None;
    }
    let mut bright = 0u16;
    let mut dark = 0u16;
    for (i, &v) in vals.iter().enumerate() {
        if (v - p) as f64 > threshold {
            bright |= 1 << i;
        } else if (p - v) as f64 > threshold {
            dark |= 1 << i;
        }
    }
    for mask in [bright, dark] {
        let (start, len) = longest_run(mask);
        if len >= ARC {
            let sad = (0..len)
                .map(|k| (vals[(start + k) % 16] - p).unsigned_abs())
                .sum();
            return Some(sad);
        }
    }
    None
}

/// FAST-9 detection over the whole image (3 px margin), sorted by
/// descending cornerness with raster order breaking ties.
pub fn detect_fast(img: &GrayImage, threshold: f64) -> Result<Vec<Keypoint>, SensorError> {
    let (w, h) = (img.width(), img.height());
    if w < MIN_IMAGE_SIZE || h < MIN_IMAGE_SIZE {
        return Err(ImageError::TooSmall {
            width: w,
            height: h,
            min: MIN_IMAGE_SIZE,
        }
        .into());
    }
    let mut out = Vec::new();
    for y in RADIUS..h - RADIUS {
        for x in RADIUS..w - RADIUS {
            if let Some(score) = fast_score(img, x, y, threshold) {
                out.push(Keypoint {
                    x: x as i32,
                    y: y as i32,
                    cornerness: score,
                });
            }
        }
    }
    sort_keypoints(&mut out);
    Ok(out)
}

pub(crate) fn sort_keypoints(kps: &mut [Keypoint]) {
    kps.sort_by(|a, b| {
        b.cornerness
            .cmp(&a.cornerness)
            .then(a.y.cmp(&b.y))
            .then(a.x.cmp(&b.x))
    });
}

/// 3x3 non-maximum suppression, then greedy per-tile admission capped at
/// `spatial_cap`, then truncation to `max_descriptors`.
///
/// Equal-cornerness neighbours resolve in favour of the one earlier in
/// raster order.
pub fn suppress_and_cap(
    keypoints: &[Keypoint],
    spatial_cap: usize,
    max_descriptors: usize,
) -> Vec<Keypoint> {
    let score: HashMap<(i32, i32), u32> = keypoints
        .iter()
        .map(|k| ((k.x, k.y), k.cornerness))
        .collect();
    let is_max = |k: &Keypoint| {
        for dy in -1..=1 {
            for dx in -1..=1 {
                if dx == 0 && dy == 0 {
                    continue;
                }
                if let Some(&c) = score.get(&(k.x + dx, k.y + dy)) {
                    let earlier = (dy, dx) < (0, 0);
                    if c > k.cornerness || (c == k.cornerness && earlier) {
                        return false;
                    }
                }
            }
        }
        true
    };
    let mut per_tile: HashMap<(i32, i32), usize> = HashMap::new();
    let mut out = Vec::new();
    for k in keypoints.iter().filter(|k| is_max(k)) {
        if out.len() >= max_descriptors {
            break;
        }
        let n = per_tile
            .entry((k.x.div_euclid(TILE_SIZE), k.y.div_euclid(TILE_SIZE)))
            .or_insert(0);
        if *n < spatial_cap {
            *n += 1;
            out.push(*k);
        }
    }
    out
}
