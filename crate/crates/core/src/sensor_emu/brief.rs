use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Keypoint, BORDER_MARGIN};
use crate::image::{GrayImage, IntegralImage};

pub const DESCRIPTOR_BITS: usize = 256;
pub(crate) const DEFAULT_PATTERN_SEED: u64 = 0x0F5E_2024;
const PATCH_RADIUS: i32 = 15;
const SMOOTH_RADIUS: i32 = 2;

/// 256-bit binary descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Descriptor(pub [u64; 4]);

impl Descriptor {
    #[inline]
    pub fn hamming(&self, other: &Descriptor) -> u32 {
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a ^ b).count_ones())
            .sum()
    }

    #[inline]
    pub fn bit(&self, i: usize) -> bool {
        self.0[i / 64] >> (i % 64) & 1 == 1
    }

    fn set(&mut self, i: usize) {
        self.0[i / 64] |= 1 << (i % 64);
    }
}

/// Test-point pairs, offsets relative to the keypoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BriefPattern {
    pairs: Vec<[(i32, i32); 2]>,
}

impl BriefPattern {
    /// Isotropic Gaussian sampling (sigma = 31/5) inside the 31x31 patch.
    pub fn generate(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal: Normal<f64> = Normal::new(0.0, 31.0 / 5.0).expect("valid sigma");
        let draw = |rng: &mut ChaCha8Rng| loop {
            let x = normal.sample(rng).round() as i32;
            let y = normal.sample(rng).round() as i32;
            if x.abs() <= PATCH_RADIUS && y.abs() <= PATCH_RADIUS {
                return (x, y);
            }
        };
        let mut pairs = Vec::with_capacity(DESCRIPTOR_BITS);
        while pairs.len() < DESCRIPTOR_BITS {
            let p = draw(&mut rng);
            let q = draw(&mut rng);
            if p != q {
                pairs.push([p, q]);
            }
        }
        Self { pairs }
    }

    pub fn default_pattern() -> &'static BriefPattern {
        static PATTERN: OnceLock<BriefPattern> = OnceLock::new();
        PATTERN.get_or_init(|| BriefPattern::generate(DEFAULT_PATTERN_SEED))
    }

    pub fn pairs(&self) -> &[[(i32, i32); 2]] {
        &self.pairs
    }

    /// 5x5 box sum around `(x, y)`; caller guarantees the support is inside.
    #[inline]
    pub fn smoothed(ii: &IntegralImage, x: i32, y: i32) -> u32 {
        ii.rect_sum(
            (x - SMOOTH_RADIUS) as usize,
            (y - SMOOTH_RADIUS) as usize,
            (x + SMOOTH_RADIUS) as usize,
            (y + SMOOTH_RADIUS) as usize,
        )
    }

    /// Bit `i` is set iff smoothed(p_i) < smoothed(q_i); equal sums give 0.
    pub fn describe_at(&self, ii: &IntegralImage, x: i32, y: i32) -> Descriptor {
        let mut d = Descriptor::default();
        for (i, [p, q]) in self.pairs.iter().enumerate() {
            let sp = Self::smoothed(ii, x + p.0, y + p.1);
            let sq = Self::smoothed(ii, x + q.0, y + q.1);
            if sp < sq {
                d.set(i);
            }
        }
        d
    }

    /// Describes every keypoint far enough from the border; others are dropped.
    pub fn describe(&self, img: &GrayImage, keypoints: &[Keypoint]) -> Vec<(Keypoint, Descriptor)> {
        let ii = IntegralImage::new(img);
        keypoints
            .iter()
            .filter(|k| is_describable(img.width(), img.height(), k.x, k.y))
            .map(|k| (*k, self.describe_at(&ii, k.x, k.y)))
            .collect()
    }
}

/// True when `(x, y)` is more than [`BORDER_MARGIN`] pixels from every edge.
#[inline]
pub fn is_describable(width: usize, height: usize, x: i32, y: i32) -> bool {
    let m = BORDER_MARGIN as i32;
    x > m && y > m && x < width as i32 - 1 - m && y < height as i32 - 1 - m
}

/// BRIEF description with the default seeded pattern.
pub fn describe_brief(img: &GrayImage, keypoints: &[Keypoint]) -> Vec<(Keypoint, Descriptor)> {
    BriefPattern::default_pattern().describe(img, keypoints)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn texture(w: usize, h: usize, seed: u64) -> GrayImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GrayImage::from_fn(w, h, |_, _| rng.random())
    }

    fn kp(x: i32, y: i32) -> Keypoint {
        Keypoint { x, y, cornerness: 0 }
    }

    #[test]
    fn pattern_is_seed_deterministic_and_bounded() {
        let a = BriefPattern::generate(1);
        assert_eq!(a, BriefPattern::generate(1));
        assert_ne!(a, BriefPattern::generate(2));
        assert_eq!(a.pairs().len(), DESCRIPTOR_BITS);
        for [p, q] in a.pairs() {
            assert!(p != q);
            for (x, y) in [p, q] {
                assert!(x.abs() <= 15 && y.abs() <= 15);
            }
        }
    }

    #[test]
    fn repeated_description_is_identical() {
        let img = texture(80, 80, 3);
        let a = describe_brief(&img, &[kp(40, 40)]);
        let b = describe_brief(&img, &[kp(40, 40)]);
        assert_eq!(a, b);
    }

    #[test]
    fn shift_equivariance() {
        let img = texture(96, 96, 5);
        let shifted = img.shifted(3, 0, 0);
        for (x, y) in [(30, 30), (40, 50), (60, 70)] {
            let a = describe_brief(&img, &[kp(x, y)]);
            let b = describe_brief(&shifted, &[kp(x + 3, y)]);
            assert_eq!(a[0].1, b[0].1);
        }
    }

    #[test]
    fn inverted_patch_complements_untied_bits() {
        let img = texture(64, 64, 11);
        let inv = img.inverted();
        let pattern = BriefPattern::default_pattern();
        let ii = IntegralImage::new(&img);
        let (x, y) = (32, 32);
        let d = describe_brief(&img, &[kp(x, y)])[0].1;
        let di = describe_brief(&inv, &[kp(x, y)])[0].1;
        for (i, [p, q]) in pattern.pairs().iter().enumerate() {
            let tie = BriefPattern::smoothed(&ii, x + p.0, y + p.1) == BriefPattern::smoothed(&ii, x + q.0, y + q.1);
            if tie {
                assert!(!d.bit(i) && !di.bit(i));
            } else {
                assert_ne!(d.bit(i), di.bit(i), "bit {i}");
            }
        }
    }

    #[test]
    fn border_keypoints_dropped() {
        let img = texture(64, 64, 1);
        let kps = [kp(16, 32), kp(17, 32), kp(46, 32), kp(47, 32), kp(32, 17), kp(32, 16)];
        let out: Vec<(i32, i32)> = describe_brief(&img, &kps).iter().map(|(k, _)| (k.x, k.y)).collect();
        assert_eq!(out, vec![(17, 32), (46, 32), (32, 17)]);
    }

    #[test]
    fn hamming_counts_bits() {
        let a = Descriptor([0b1011, 0, u64::MAX, 0]);
        let b = Descriptor([0b0001, 0, 0, 1]);
        assert_eq!(a.hamming(&b), 2 + 64 + 1);
        assert_eq!(a.hamming(&a), 0);
    }
}
