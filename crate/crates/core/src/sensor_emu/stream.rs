use super::brief::BriefPattern;
use super::{
    detect_fast, match_frames, suppress_and_cap, update_threshold, Descriptor, FlowVector,
    Keypoint, SensorConfig, SensorError, BORDER_MARGIN,
};
use crate::image::GrayImage;

/// What the emulated sensor reports for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameOutput {
    pub flow: Vec<FlowVector>,
    /// Cornerness threshold used for this frame's detection.
    pub threshold: f64,
    pub descriptor_count: usize,
}

/// Stateful single-stream emulator. Holds the previous frame's descriptors
/// and the controller threshold, nothing else.
pub struct SensorEmulator {
    config: SensorConfig,
    pattern: BriefPattern,
    threshold: f64,
    previous: Option<Vec<(Keypoint, Descriptor)>>,
}

impl SensorEmulator {
    pub fn new(config: SensorConfig) -> Result<Self, SensorError> {
        config.validate()?;
        Ok(Self {
            pattern: BriefPattern::generate(config.brief_seed),
            threshold: config.initial_threshold,
            config,
            previous: None,
        })
    }

    pub fn config(&self) -> &SensorConfig {
        &self.config
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    /// Crop, then bin.
    pub fn preprocess(&self, frame: &GrayImage) -> Result<GrayImage, SensorError> {
        let c = &self.config;
        if frame.width() != c.frame_width || frame.height() != c.frame_height {
            return Err(SensorError::FrameSize {
                expected_w: c.frame_width,
                expected_h: c.frame_height,
                actual_w: frame.width(),
                actual_h: frame.height(),
            });
        }
        let r = c.crop_rect();
        let cropped = if r.x == 0 && r.y == 0 && r.width == frame.width() && r.height == frame.height() {
            frame.clone()
        } else {
            frame.crop(r.x, r.y, r.width, r.height)?
        };
        Ok(cropped.bin(c.subsample))
    }

    /// Detected, suppressed, capped and described keypoints of one
    /// processed image at the given threshold.
    pub fn describe_frame(&self, img: &GrayImage, threshold: f64) -> Result<Vec<(Keypoint, Descriptor)>, SensorError> {
        let (w, h) = (img.width() as i32, img.height() as i32);
        let m = BORDER_MARGIN as i32;
        let detected: Vec<Keypoint> = detect_fast(img, threshold)?
            .into_iter()
            .filter(|k| k.x > m && k.y > m && k.x < w - 1 - m && k.y < h - 1 - m)
            .collect();
        let kept = suppress_and_cap(&detected, self.config.spatial_cap, self.config.max_descriptors);
        Ok(self.pattern.describe(img, &kept))
    }

    pub fn process_frame(&mut self, frame: &GrayImage) -> Result<FrameOutput, SensorError> {
        let img = self.preprocess(frame)?;
        let threshold = self.threshold;
        let described = self.describe_frame(&img, threshold)?;
        let flow = match &self.previous {
            Some(prev) => match_frames(prev, &described, &self.config),
            None => Vec::new(),
        };
        let descriptor_count = described.len();
        self.threshold = update_threshold(threshold, descriptor_count, self.config.brief_target);
        self.previous = Some(described);
        Ok(FrameOutput {
            flow,
            threshold,
            descriptor_count,
        })
    }

    /// Forgets the previous frame and restores the initial threshold.
    pub fn reset(&mut self) {
        self.previous = None;
        self.threshold = self.config.initial_threshold;
    }
}

/// Runs a fresh emulator over a frame sequence.
pub fn emulate_stream<'a, I>(frames: I, config: &SensorConfig) -> Result<Vec<FrameOutput>, SensorError>
where
    I: IntoIterator<Item = &'a GrayImage>,
{
    let mut emu = SensorEmulator::new(config.clone())?;
    let out = frames
        .into_iter()
        .map(|f| emu.process_frame(f))
        .collect::<Result<Vec<_>, _>>()?;
    if out.len() < 2 {
        return Err(SensorError::TooFewFrames(out.len()));
    }
    Ok(out)
}
