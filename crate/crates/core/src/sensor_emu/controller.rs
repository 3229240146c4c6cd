pub const CONTROLLER_ALPHA: f64 = 0.5;
pub const THRESHOLD_MIN: f64 = 5.0;
pub const THRESHOLD_MAX: f64 = 120.0;
pub const INITIAL_THRESHOLD: f64 = 20.0;

/// Multiplicative proportional step towards `brief_target` descriptors:
/// `threshold * (detected / target)^alpha`, clamped to the allowed range.
pub fn update_threshold(threshold: f64, detected_count: usize, brief_target: usize) -> f64 {
    if brief_target == 0 {
        return threshold.clamp(THRESHOLD_MIN, THRESHOLD_MAX);
    }
    let ratio = detected_count as f64 / brief_target as f64;
    (threshold * ratio.powf(CONTROLLER_ALPHA)).clamp(THRESHOLD_MIN, THRESHOLD_MAX)
}
