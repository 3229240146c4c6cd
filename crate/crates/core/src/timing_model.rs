//! Link-latency arithmetic, the sensor frame-rate table and composition of
//! per-stage timings into an odometry latency breakdown.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Shipped frame-rate table (`format,height,n_vectors,fps`).
pub const DEFAULT_FRAME_RATES_CSV: &str = include_str!("../data/frame_rates.csv");
/// Reference per-stage timings (`path,stage,mean,sd,min,max`, ms).
pub const REFERENCE_STAGE_TIMINGS_CSV: &str = include_str!("../data/stage_timings.csv");

#[derive(Debug, Error, PartialEq)]
pub enum TimingError {
    #[error("image dimensions must be positive, got {width}x{height}")]
    ZeroDimension { width: u64, height: u64 },
    #[error("no frame-rate row for ({format}, {n_vectors} vectors); configured rows nearby: {nearest}")]
    MissingRow {
        format: String,
        n_vectors: u32,
        nearest: String,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("estimator rate {rate} Hz does not divide camera rate {fps} Hz")]
    NotDivisible { fps: f64, rate: f64 },
    #[error("stage '{0}' has no samples")]
    NoSamples(String),
    #[error("missing reference stage {path}/{stage}")]
    MissingStage { path: String, stage: String },
    #[error("{0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkConfig {
    pub bitrate_bps: u64,
    pub bits_per_pixel: u64,
    pub vector_bytes: u64,
}

impl Default for LinkConfig {
    fn default() -> Self {
        Self {
            bitrate_bps: 804_000_000,
            bits_per_pixel: 8,
            vector_bytes: 8,
        }
    }
}

impl LinkConfig {
    pub fn seconds(&self, bits: u64) -> f64 {
        bits as f64 / self.bitrate_bps as f64
    }
}

/// Payload of one image, bits.
pub fn image_tx_bits(width: u64, height: u64, link: &LinkConfig) -> Result<u64, TimingError> {
    if width == 0 || height == 0 {
        return Err(TimingError::ZeroDimension { width, height });
    }
    Ok(width * height * link.bits_per_pixel)
}

/// Image transmission time, seconds.
pub fn image_tx_latency(width: u64, height: u64, link: &LinkConfig) -> Result<f64, TimingError> {
    Ok(link.seconds(image_tx_bits(width, height, link)?))
}

/// Worst-case payload of `max_vectors` flow records, bits.
pub fn flow_tx_bits(max_vectors: u64, link: &LinkConfig) -> u64 {
    max_vectors * link.vector_bytes * 8
}

/// Worst-case flow transmission time, seconds.
pub fn flow_tx_latency(max_vectors: u64, link: &LinkConfig) -> f64 {
    link.seconds(flow_tx_bits(max_vectors, link))
}

/// Rounds to `sig` significant figures for display.
pub fn format_sig(x: f64, sig: usize) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let mag = x.abs().log10().floor() as i32;
    let decimals = sig as i32 - 1 - mag;
    if decimals >= 0 {
        let s = format!("{:.*}", decimals as usize, x);
        // Rounding can carry into a new digit (9.996 -> 10.00); redo once.
        let mag2 = s.parse::<f64>().map(|v| v.abs().log10().floor() as i32).unwrap_or(mag);
        if mag2 > mag && decimals > 0 {
            return format!("{:.*}", (decimals - 1) as usize, x);
        }
        s
    } else {
        let p = 10f64.powi(-decimals);
        format!("{}", (x / p).round() * p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRateRow {
    pub format: String,
    pub height: u32,
    pub n_vectors: u32,
    pub fps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRateTable {
    pub rows: Vec<FrameRateRow>,
}

impl FrameRateTable {
    pub fn parse(text: &str) -> Result<Self, TimingError> {
        let mut rows = Vec::new();
        let mut header_seen = false;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if !header_seen {
                if line != "format,height,n_vectors,fps" {
                    return Err(TimingError::Parse {
                        line: i + 1,
                        msg: format!("expected header format,height,n_vectors,fps, got '{line}'"),
                    });
                }
                header_seen = true;
                continue;
            }
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            let bad = |msg: String| TimingError::Parse { line: i + 1, msg };
            if cols.len() != 4 {
                return Err(bad(format!("expected 4 columns, got {}", cols.len())));
            }
            rows.push(FrameRateRow {
                format: cols[0].to_string(),
                height: cols[1].parse().map_err(|e| bad(format!("height: {e}")))?,
                n_vectors: cols[2].parse().map_err(|e| bad(format!("n_vectors: {e}")))?,
                fps: cols[3].parse().map_err(|e| bad(format!("fps: {e}")))?,
            });
        }
        Ok(Self { rows })
    }

    pub fn load(path: &Path) -> Result<Self, TimingError> {
        let text = std::fs::read_to_string(path).map_err(|e| TimingError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn shipped() -> Self {
        Self::parse(DEFAULT_FRAME_RATES_CSV).expect("shipped table parses")
    }

    /// Exact lookup; a miss lists the closest configured rows.
    pub fn max_frame_rate(&self, format: &str, n_vectors: u32) -> Result<f64, TimingError> {
        if let Some(r) = self
            .rows
            .iter()
            .find(|r| r.format.eq_ignore_ascii_case(format) && r.n_vectors == n_vectors)
        {
            return Ok(r.fps);
        }
        let mut near: Vec<&FrameRateRow> = self.rows.iter().filter(|r| r.format.eq_ignore_ascii_case(format)).collect();
        if near.is_empty() {
            near = self.rows.iter().collect();
        }
        near.sort_by_key(|r| (r.n_vectors as i64 - n_vectors as i64).abs());
        let nearest = near
            .iter()
            .take(3)
            .map(|r| format!("({}, {}) -> {} Hz", r.format, r.n_vectors, r.fps))
            .collect::<Vec<_>>()
            .join(", ");
        Err(TimingError::MissingRow {
            format: format.to_string(),
            n_vectors,
            nearest,
        })
    }
}

/// Summary statistics of one stage, ms. SD is the sample SD (n - 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl StageStats {
    pub fn from_samples(name: &str, samples: &[f64]) -> Result<Self, TimingError> {
        if samples.is_empty() {
            return Err(TimingError::NoSamples(name.to_string()));
        }
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = if samples.len() > 1 {
            samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Ok(Self {
            name: name.to_string(),
            mean,
            sd: var.sqrt(),
            min: samples.iter().copied().fold(f64::INFINITY, f64::min),
            max: samples.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            count: samples.len(),
        })
    }

    /// A deterministic stage (fixed latency).
    pub fn constant(name: &str, value: f64) -> Self {
        Self {
            name: name.to_string(),
            mean: value,
            sd: 0.0,
            min: value,
            max: value,
            count: 1,
        }
    }
}

/// Stage statistics feeding a breakdown, all in ms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageInputs {
    pub image_tx: StageStats,
    pub of_tx: StageStats,
    /// Feature update without handing data to the estimator.
    pub feature_update: StageStats,
    /// Feature update including the hand-off to the estimator.
    pub feature_update_send: StageStats,
    pub estimation: StageStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyBreakdown {
    pub stages: StageInputs,
    pub updates_per_estimate: u32,
    /// image tx + OF tx + feature update with send + estimation.
    pub end_to_end_ms: f64,
    /// Feature update with send + estimation (host compute only).
    pub compute_path_ms: f64,
    /// `updates_per_estimate * feature_update + estimation`.
    pub per_estimate_mean_ms: f64,
    /// `(updates_per_estimate - 1) * feature_update + feature_update_send + estimation`.
    pub per_estimate_with_send_ms: f64,
}

/// Composes stage means into end-to-end and per-estimate latencies.
pub fn compose_breakdown(stages: &StageInputs, camera_fps: f64, estimator_rate: f64) -> Result<LatencyBreakdown, TimingError> {
    let ratio = camera_fps / estimator_rate;
    let n = ratio.round();
    if !(camera_fps > 0.0 && estimator_rate > 0.0) || n < 1.0 || (ratio - n).abs() > 1e-9 * n {
        return Err(TimingError::NotDivisible {
            fps: camera_fps,
            rate: estimator_rate,
        });
    }
    let s = stages;
    Ok(LatencyBreakdown {
        updates_per_estimate: n as u32,
        end_to_end_ms: s.image_tx.mean + s.of_tx.mean + s.feature_update_send.mean + s.estimation.mean,
        compute_path_ms: s.feature_update_send.mean + s.estimation.mean,
        per_estimate_mean_ms: n * s.feature_update.mean + s.estimation.mean,
        per_estimate_with_send_ms: (n - 1.0) * s.feature_update.mean + s.feature_update_send.mean + s.estimation.mean,
        stages: stages.clone(),
    })
}

/// Reference stage timings for `path` (`of` or `baseline`), with the
/// link stages filled from the given link and payload.
pub fn reference_stages(path: &str, image_tx_ms: f64, of_tx_ms: f64) -> Result<StageInputs, TimingError> {
    let mut found: Vec<(String, StageStats)> = Vec::new();
    for (i, raw) in REFERENCE_STAGE_TIMINGS_CSV.lines().enumerate().skip(1) {
        let c: Vec<&str> = raw.split(',').map(str::trim).collect();
        if c.len() != 6 {
            continue;
        }
        let num = |k: usize| {
            c[k].parse::<f64>().map_err(|e| TimingError::Parse {
                line: i + 1,
                msg: e.to_string(),
            })
        };
        if c[0] == path {
            found.push((
                c[1].to_string(),
                StageStats {
                    name: c[1].to_string(),
                    mean: num(2)?,
                    sd: num(3)?,
                    min: num(4)?,
                    max: num(5)?,
                    count: 0,
                },
            ));
        }
    }
    let take = |stage: &str| {
        found
            .iter()
            .find(|(s, _)| s == stage)
            .map(|(_, v)| v.clone())
            .ok_or_else(|| TimingError::MissingStage {
                path: path.to_string(),
                stage: stage.to_string(),
            })
    };
    Ok(StageInputs {
        image_tx: StageStats::constant("image_tx", image_tx_ms),
        of_tx: StageStats::constant("of_tx", of_tx_ms),
        feature_update: take("feature_update")?,
        feature_update_send: take("feature_update_send")?,
        estimation: take("estimation")?,
    })
}

/// Horizontal stacked bars, one per labelled breakdown, over the
/// end-to-end critical path.
pub fn breakdown_svg(items: &[(&str, &LatencyBreakdown)]) -> String {
    let colors = ["#8da0cb", "#66c2a5", "#fc8d62", "#e78ac3"];
    let names = ["image tx", "OF tx", "feature update", "estimation"];
    let (w, bar_h, left) = (640.0, 28.0, 90.0);
    let h = 40.0 + items.len() as f64 * (bar_h + 16.0) + 30.0;
    let max = items.iter().map(|(_, b)| b.end_to_end_ms).fold(1e-9, f64::max);
    let scale = (w - left - 20.0) / max;
    let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n");
    for (i, (label, b)) in items.iter().enumerate() {
        let y = 30.0 + i as f64 * (bar_h + 16.0);
        let _ = writeln!(s, "<text x=\"4\" y=\"{}\" font-size=\"12\">{label}</text>", y + bar_h * 0.65);
        let parts = [
            b.stages.image_tx.mean,
            b.stages.of_tx.mean,
            b.stages.feature_update_send.mean,
            b.stages.estimation.mean,
        ];
        let mut x = left;
        for (k, v) in parts.iter().enumerate() {
            let width = v * scale;
            let _ = writeln!(
                s,
                "<rect x=\"{x:.2}\" y=\"{y}\" width=\"{width:.2}\" height=\"{bar_h}\" fill=\"{}\"><title>{}: {} ms</title></rect>",
                colors[k],
                names[k],
                format_sig(*v, 3)
            );
            x += width;
        }
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{}\" font-size=\"11\">{} ms</text>",
            (x + 4.0).min(w - 60.0),
            y + bar_h + 12.0,
            format_sig(b.end_to_end_ms, 3)
        );
    }
    let ly = h - 12.0;
    for (k, n) in names.iter().enumerate() {
        let x = left + 130.0 * k as f64;
        let _ = writeln!(s, "<rect x=\"{x}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{}\"/>", ly - 9.0, colors[k]);
        let _ = writeln!(s, "<text x=\"{}\" y=\"{ly}\" font-size=\"11\">{n}</text>", x + 14.0);
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vga_image_latency() {
        let t = image_tx_latency(640, 480, &LinkConfig::default()).unwrap();
        assert!((t - 3.057e-3).abs() < 1e-6);
        assert_eq!(format_sig(t * 1e3, 3), "3.06");
    }

    #[test]
    fn zero_width_rejected() {
        assert_eq!(
            image_tx_latency(0, 480, &LinkConfig::default()),
            Err(TimingError::ZeroDimension { width: 0, height: 480 })
        );
    }

    #[test]
    fn full_frame_latency_by_hand() {
        // 1124 * 1364 * 8 = 12_265_088 bits over 804e6 bit/s.
        let t = image_tx_latency(1124, 1364, &LinkConfig::default()).unwrap();
        assert!((t - 12_265_088.0 / 804e6).abs() < 1e-15);
        assert!((t - 15.25e-3).abs() < 1e-5);
    }

    #[test]
    fn flow_latencies() {
        let l = LinkConfig::default();
        for (n, want) in [(200, 1.592e-5), (300, 2.388e-5), (500, 3.98e-5)] {
            assert!((flow_tx_latency(n, &l) - want).abs() < 1e-8);
        }
    }

    #[test]
    fn shipped_table_rows() {
        let t = FrameRateTable::shipped();
        assert_eq!(t.rows.len(), 8);
        assert_eq!(t.max_frame_rate("VGA", 1024).unwrap(), 205.0);
        assert_eq!(t.max_frame_rate("QVGA", 1024).unwrap(), 338.0);
        assert_eq!(t.max_frame_rate("FULL", 0).unwrap(), 88.0);
        match t.max_frame_rate("QVGA", 0) {
            Err(TimingError::MissingRow { nearest, .. }) => assert!(nearest.contains("QVGA, 1024")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn table_parse_errors_name_line() {
        let err = FrameRateTable::parse("format,height,n_vectors,fps\nVGA,480,x,1\n").unwrap_err();
        assert!(matches!(err, TimingError::Parse { line: 2, .. }));
    }

    fn stages(a: f64, b: f64, c: f64) -> StageInputs {
        StageInputs {
            image_tx: StageStats::constant("image_tx", 0.0),
            of_tx: StageStats::constant("of_tx", 0.0),
            feature_update: StageStats::constant("a", a),
            feature_update_send: StageStats::constant("b", b),
            estimation: StageStats::constant("c", c),
        }
    }

    #[test]
    fn reference_compositions() {
        let of = compose_breakdown(&stages(0.339, 0.4932, 74.3676), 20.0, 10.0).unwrap();
        assert!((of.per_estimate_mean_ms - 75.0456).abs() < 1e-9);
        assert!((of.per_estimate_mean_ms - 75.20).abs() < 0.5);
        assert!((of.per_estimate_with_send_ms - 75.1998).abs() < 1e-9);
        let base = compose_breakdown(&stages(14.2538, 60.7917, 87.3183), 20.0, 10.0).unwrap();
        assert!((base.per_estimate_mean_ms - 115.8259).abs() < 1e-9);
        assert!((base.per_estimate_with_send_ms - 162.3638).abs() < 1e-9);
        assert!((base.compute_path_ms - 148.11).abs() < 0.01);
    }

    #[test]
    fn zero_stages_compose_to_zero() {
        let b = compose_breakdown(&stages(0.0, 0.0, 0.0), 20.0, 10.0).unwrap();
        assert_eq!(
            (b.end_to_end_ms, b.per_estimate_mean_ms, b.per_estimate_with_send_ms, b.compute_path_ms),
            (0.0, 0.0, 0.0, 0.0)
        );
    }

    #[test]
    fn non_divisible_rates_rejected() {
        assert!(matches!(compose_breakdown(&stages(1.0, 1.0, 1.0), 20.0, 3.0), Err(TimingError::NotDivisible { .. })));
        assert!(matches!(compose_breakdown(&stages(1.0, 1.0, 1.0), 10.0, 20.0), Err(TimingError::NotDivisible { .. })));
    }

    #[test]
    fn reference_stage_file_matches_compositions() {
        let s = reference_stages("of", 3.06, 0.016).unwrap();
        assert_eq!(s.feature_update.mean, 0.339);
        let b = compose_breakdown(&s, 20.0, 10.0).unwrap();
        assert!((b.compute_path_ms - 74.86).abs() < 0.01);
        assert!(reference_stages("nope", 0.0, 0.0).is_err());
        assert!(breakdown_svg(&[("OF", &b)]).contains("<rect"));
    }

    #[test]
    fn stage_stats_from_samples() {
        let s = StageStats::from_samples("x", &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!((s.mean, s.min, s.max, s.count), (2.5, 1.0, 4.0, 4));
        assert!((s.sd - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!(StageStats::from_samples("y", &[]).is_err());
    }

    #[test]
    fn significant_figures() {
        assert_eq!(format_sig(0.015920398, 3), "0.0159");
        assert_eq!(format_sig(75.0456, 3), "75.0");
        assert_eq!(format_sig(162.3638, 3), "162");
        assert_eq!(format_sig(9.996, 3), "10.0");
        assert_eq!(format_sig(1234.0, 3), "1230");
    }
}
