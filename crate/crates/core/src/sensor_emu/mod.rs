//! Software model of an on-sensor optical-flow unit.
//!
//! Each frame goes through crop/binning, FAST-9 detection, non-maximum
//! suppression with a per-tile density cap, BRIEF description and a
//! bounded-range Hamming match against the previous frame. A proportional
//! controller retunes the cornerness threshold so the descriptor count
//! follows a target. Only [`FlowVector`]s leave the emulator; descriptors
//! are kept for exactly one frame.

mod brief;
mod controller;
mod fast;
mod matching;
mod stream;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::ImageError;
use crate::kv::{KeyValues, KvError};

pub use brief::{describe_brief, BriefPattern, Descriptor, DESCRIPTOR_BITS};
pub use controller::{
    update_threshold, CONTROLLER_ALPHA, INITIAL_THRESHOLD, THRESHOLD_MAX, THRESHOLD_MIN,
};
pub use fast::{detect_fast, fast_score, suppress_and_cap, CIRCLE, MIN_IMAGE_SIZE, TILE_SIZE};
pub use matching::match_frames;
pub use stream::{emulate_stream, FrameOutput, SensorEmulator};

/// Keypoints closer than this to any edge are never described.
pub const BORDER_MARGIN: usize = 16;
/// Hardware limit on motion vectors per frame.
pub const HARD_MAX_DESCRIPTORS: usize = 2048;
pub const MAX_PROCESSED_WIDTH: usize = 640;
pub const MAX_PROCESSED_HEIGHT: usize = 480;

#[derive(Debug, Error)]
pub enum SensorError {
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("invalid sensor config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Config(#[from] KvError),
    #[error("frame is {actual_w}x{actual_h}, emulator configured for {expected_w}x{expected_h}")]
    FrameSize {
        expected_w: usize,
        expected_h: usize,
        actual_w: usize,
        actual_h: usize,
    },
    #[error("stream needs at least 2 frames, got {0}")]
    TooFewFrames(usize),
}

/// Integer pixel position in processed-image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pixel {
    pub x: i32,
    pub y: i32,
}

impl Pixel {
    pub const fn new(x: i32, y: i32) -> Self {
        Self { x, y }
    }

    #[inline]
    pub fn chebyshev(&self, other: &Pixel) -> i32 {
        (self.x - other.x).abs().max((self.y - other.y).abs())
    }

    #[inline]
    pub fn dist2(&self, other: &Pixel) -> i64 {
        let dx = (self.x - other.x) as i64;
        let dy = (self.y - other.y) as i64;
        dx * dx + dy * dy
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: i32,
    pub y: i32,
    pub cornerness: u32,
}

impl Keypoint {
    pub fn pixel(&self) -> Pixel {
        Pixel::new(self.x, self.y)
    }
}

/// One matched feature displacement between consecutive frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowVector {
    pub prev: Pixel,
    pub curr: Pixel,
    pub hamming: u32,
    /// Cornerness of the current-frame keypoint.
    pub cornerness: u32,
}

impl FlowVector {
    pub fn displacement(&self) -> (i32, i32) {
        (self.curr.x - self.prev.x, self.curr.y - self.prev.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorConfig {
    /// Size of the frames fed to the emulator.
    pub frame_width: usize,
    pub frame_height: usize,
    /// Applied before binning. `None` keeps the full frame.
    pub crop: Option<CropRect>,
    /// Binning factor: 1, 2 or 4.
    pub subsample: usize,
    pub fps: f64,
    pub brief_target: usize,
    pub max_descriptors: usize,
    /// Maximum described keypoints per 16x16 tile.
    pub spatial_cap: usize,
    /// Chebyshev search radius for matching, processed pixels.
    pub search_radius: i32,
    pub max_hamming: u32,
    pub initial_threshold: f64,
    pub brief_seed: u64,
}

impl Default for SensorConfig {
    /// Baseline set: VGA, 20 FPS, target 200 (max 300), 4 per tile.
    fn default() -> Self {
        Self {
            frame_width: 640,
            frame_height: 480,
            crop: None,
            subsample: 1,
            fps: 20.0,
            brief_target: 200,
            max_descriptors: 300,
            spatial_cap: 4,
            search_radius: 48,
            max_hamming: 60,
            initial_threshold: INITIAL_THRESHOLD,
            brief_seed: brief::DEFAULT_PATTERN_SEED,
        }
    }
}

impl SensorConfig {
    /// Descriptor budget paired with each BRIEF target in the recorded
    /// parameter sets (150 -> 200, 200 -> 300, 300 -> 500).
    pub fn for_target(brief_target: usize) -> Self {
        let max_descriptors = match brief_target {
            150 => 200,
            200 => 300,
            300 => 500,
            t => (t * 3 / 2).min(HARD_MAX_DESCRIPTORS),
        };
        Self {
            brief_target,
            max_descriptors,
            ..Self::default()
        }
    }

    pub fn crop_rect(&self) -> CropRect {
        self.crop.unwrap_or(CropRect {
            x: 0,
            y: 0,
            width: self.frame_width,
            height: self.frame_height,
        })
    }

    pub fn processed_size(&self) -> (usize, usize) {
        let c = self.crop_rect();
        let f = self.subsample.max(1);
        (c.width / f, c.height / f)
    }

    /// Center of a processed pixel in full-frame pixel coordinates.
    pub fn to_frame_pixel(&self, p: Pixel) -> (f64, f64) {
        let c = self.crop_rect();
        let f = self.subsample.max(1) as f64;
        (
            c.x as f64 + (p.x as f64 + 0.5) * f - 0.5,
            c.y as f64 + (p.y as f64 + 0.5) * f - 0.5,
        )
    }

    pub fn validate(&self) -> Result<(), SensorError> {
        let bad = |m: String| Err(SensorError::InvalidConfig(m));
        if ![1, 2, 4].contains(&self.subsample) {
            return bad(format!("subsample must be 1, 2 or 4, got {}", self.subsample));
        }
        let c = self.crop_rect();
        if c.x + c.width > self.frame_width || c.y + c.height > self.frame_height {
            return bad(format!("crop {c:?} exceeds frame {}x{}", self.frame_width, self.frame_height));
        }
        let (w, h) = self.processed_size();
        if w > MAX_PROCESSED_WIDTH || h > MAX_PROCESSED_HEIGHT {
            return bad(format!("processed image {w}x{h} exceeds VGA; crop or subsample"));
        }
        if w < MIN_IMAGE_SIZE || h < MIN_IMAGE_SIZE {
            return bad(format!("processed image {w}x{h} below {MIN_IMAGE_SIZE}x{MIN_IMAGE_SIZE}"));
        }
        if self.max_descriptors > HARD_MAX_DESCRIPTORS {
            return bad(format!("max_descriptors {} > {HARD_MAX_DESCRIPTORS}", self.max_descriptors));
        }
        if self.spatial_cap < 1 {
            return bad("spatial_cap must be >= 1".into());
        }
        if self.brief_target == 0 || self.brief_target > self.max_descriptors {
            return bad(format!(
                "brief_target {} must be in 1..=max_descriptors ({})",
                self.brief_target, self.max_descriptors
            ));
        }
        if self.search_radius < 0 {
            return bad("search_radius must be >= 0".into());
        }
        if !(self.fps > 0.0) {
            return bad("fps must be > 0".into());
        }
        if !(THRESHOLD_MIN..=THRESHOLD_MAX).contains(&self.initial_threshold) {
            return bad(format!("initial_threshold must lie in [{THRESHOLD_MIN}, {THRESHOLD_MAX}]"));
        }
        Ok(())
    }

    /// Reads a `key = value` config; absent keys keep their defaults.
    /// Returns the config and the list of unrecognised keys.
    pub fn from_kv_text(text: &str) -> Result<(Self, Vec<String>), SensorError> {
        let kv = KeyValues::parse(text)?;
        let d = Self::default();
        let crop = kv.get_floats::<4>("crop")?.map(|[x, y, w, h]| CropRect {
            x: x as usize,
            y: y as usize,
            width: w as usize,
            height: h as usize,
        });
        let brief_target = kv.get_or("brief_target", d.brief_target)?;
        let preset = Self::for_target(brief_target);
        let cfg = Self {
            frame_width: kv.get_or("frame_width", d.frame_width)?,
            frame_height: kv.get_or("frame_height", d.frame_height)?,
            crop,
            subsample: kv.get_or("subsample", d.subsample)?,
            fps: kv.get_or("fps", d.fps)?,
            brief_target,
            max_descriptors: kv.get_or("max_descriptors", preset.max_descriptors)?,
            spatial_cap: kv.get_or("spatial_cap", d.spatial_cap)?,
            search_radius: kv.get_or("search_radius", d.search_radius)?,
            max_hamming: kv.get_or("max_hamming", d.max_hamming)?,
            initial_threshold: kv.get_or("initial_threshold", d.initial_threshold)?,
            brief_seed: kv.get_or("brief_seed", d.brief_seed)?,
        };
        cfg.validate()?;
        Ok((cfg, kv.unused_keys()))
    }

    pub fn to_kv_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("frame_width = {}\nframe_height = {}\n", self.frame_width, self.frame_height));
        if let Some(c) = self.crop {
            s.push_str(&format!("crop = {} {} {} {}\n", c.x, c.y, c.width, c.height));
        }
        s.push_str(&format!("subsample = {}\nfps = {}\n", self.subsample, self.fps));
        s.push_str(&format!(
            "brief_target = {}\nmax_descriptors = {}\nspatial_cap = {}\n",
            self.brief_target, self.max_descriptors, self.spatial_cap
        ));
        s.push_str(&format!(
            "search_radius = {}\nmax_hamming = {}\ninitial_threshold = {}\nbrief_seed = {}\n",
            self.search_radius, self.max_hamming, self.initial_threshold, self.brief_seed
        ));
        s
    }
}
