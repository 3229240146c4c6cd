//! Feature tracks built by chaining flow vectors frame to frame.
//!
//! A flow vector extends a track when its `prev` pixel equals the track's
//! last observed pixel. Tracks that are not extended are dropped. Free
//! slots are refilled with the lowest-Hamming unused vectors.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{undistort_project, CameraModel};
use crate::geometry::Vec3;
use crate::sensor_emu::{FlowVector, Pixel};

pub const DEFAULT_CAPACITY: usize = 150;

#[derive(Debug, Error, PartialEq)]
pub enum TrackerError {
    #[error("frame {got} ingested after frame {last}; tracks cannot bridge missing frames")]
    FrameGap { last: u64, got: u64 },
    #[error("decimation must be >= 1")]
    BadDecimation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackObservation {
    pub frame_id: u64,
    /// Pixel in flow-record coordinates.
    pub pixel: Pixel,
    /// Undistorted unit bearing in the camera frame.
    pub bearing: Vec3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTrack {
    pub track_id: u64,
    pub observations: Vec<TrackObservation>,
    /// Hamming score of the flow vector that produced observation `k + 1`.
    pub hamming_history: Vec<u32>,
}

impl FeatureTrack {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn last(&self) -> &TrackObservation {
        self.observations.last().expect("tracks are never empty")
    }

    pub fn mean_hamming(&self) -> f64 {
        if self.hamming_history.is_empty() {
            return 0.0;
        }
        self.hamming_history.iter().map(|&h| h as f64).sum::<f64>() / self.hamming_history.len() as f64
    }
}

/// One feature observation handed to the estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureObservation {
    pub track_id: u64,
    pub bearing: Vec3,
    /// Frame pixel (distorted) the bearing was computed from.
    pub pixel: (f64, f64),
}

/// All observations of one camera frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureFrame {
    pub frame_id: u64,
    pub observations: Vec<FeatureObservation>,
}

/// Maps flow-record pixels to frame pixels and bearings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelMapping {
    pub camera: CameraModel,
    pub origin: (f64, f64),
    pub scale: f64,
}

impl PixelMapping {
    pub fn identity(camera: CameraModel) -> Self {
        Self {
            camera,
            origin: (0.0, 0.0),
            scale: 1.0,
        }
    }

    pub fn frame_pixel(&self, p: Pixel) -> (f64, f64) {
        (
            self.origin.0 + (p.x as f64 + 0.5) * self.scale - 0.5,
            self.origin.1 + (p.y as f64 + 0.5) * self.scale - 0.5,
        )
    }

    pub fn bearing(&self, p: Pixel) -> Option<Vec3> {
        let px = self.frame_pixel(p);
        match undistort_project(px, &self.camera.intrinsics, &self.camera.distortion) {
            Ok(b) => Some(b),
            Err(e) => {
                log::warn!("dropping flow endpoint {p:?}: {e}");
                None
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestOutcome {
    pub extended: usize,
    pub dropped: Vec<u64>,
    pub candidates: Vec<FlowVector>,
}

#[derive(Debug, Clone)]
pub struct TrackerState {
    capacity: usize,
    mapping: PixelMapping,
    tracks: BTreeMap<u64, FeatureTrack>,
    endpoints: HashMap<Pixel, u64>,
    next_track_id: u64,
    last_frame: Option<u64>,
}

impl TrackerState {
    pub fn new(mapping: PixelMapping, capacity: usize) -> Self {
        Self {
            capacity,
            mapping,
            tracks: BTreeMap::new(),
            endpoints: HashMap::new(),
            next_track_id: 0,
            last_frame: None,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn tracks(&self) -> &BTreeMap<u64, FeatureTrack> {
        &self.tracks
    }

    pub fn active_count(&self) -> usize {
        self.tracks.len()
    }

    pub fn last_frame(&self) -> Option<u64> {
        self.last_frame
    }

    pub fn endpoint_track(&self, p: Pixel) -> Option<u64> {
        self.endpoints.get(&p).copied()
    }

    /// Extends tracks with the vectors ending in `frame_id` and drops the
    /// rest; unused vectors come back as admission candidates.
    pub fn ingest_flow(&mut self, frame_id: u64, flow: &[FlowVector]) -> Result<IngestOutcome, TrackerError> {
        if let Some(last) = self.last_frame {
            if frame_id != last + 1 {
                return Err(TrackerError::FrameGap { last, got: frame_id });
            }
        }
        self.last_frame = Some(frame_id);

        let mut extended_ids = Vec::new();
        let mut candidates = Vec::new();
        for v in flow {
            let hit = self.endpoints.get(&v.prev).copied();
            match hit {
                Some(id) => {
                    let Some(bearing) = self.mapping.bearing(v.curr) else { continue };
                    let t = self.tracks.get_mut(&id).expect("endpoint index consistent");
                    t.observations.push(TrackObservation {
                        frame_id,
                        pixel: v.curr,
                        bearing,
                    });
                    t.hamming_history.push(v.hamming);
                    extended_ids.push(id);
                }
                None => candidates.push(*v),
            }
        }

        let keep: std::collections::HashSet<u64> = extended_ids.iter().copied().collect();
        let dropped: Vec<u64> = self.tracks.keys().filter(|id| !keep.contains(id)).copied().collect();
        for id in &dropped {
            self.tracks.remove(id);
        }
        let mut dropped = dropped;
        dropped.extend(self.truncate_to_capacity());
        self.rebuild_endpoints();
        Ok(IngestOutcome {
            extended: self.tracks.len(),
            dropped,
            candidates,
        })
    }

    /// Admits candidates as new length-2 tracks while slots are free, in
    /// ascending Hamming then descending cornerness order. Returns new ids.
    pub fn admit_tracks(&mut self, candidates: &[FlowVector]) -> Vec<u64> {
        let Some(frame_id) = self.last_frame else {
            return Vec::new();
        };
        let mut order: Vec<&FlowVector> = candidates.iter().collect();
        order.sort_by(|a, b| a.hamming.cmp(&b.hamming).then(b.cornerness.cmp(&a.cornerness)));
        let mut admitted = Vec::new();
        for v in order {
            if self.tracks.len() >= self.capacity {
                break;
            }
            if self.endpoints.contains_key(&v.curr) || frame_id == 0 {
                continue;
            }
            let (Some(b0), Some(b1)) = (self.mapping.bearing(v.prev), self.mapping.bearing(v.curr)) else {
                continue;
            };
            let id = self.next_track_id;
            self.next_track_id += 1;
            self.tracks.insert(
                id,
                FeatureTrack {
                    track_id: id,
                    observations: vec![
                        TrackObservation {
                            frame_id: frame_id - 1,
                            pixel: v.prev,
                            bearing: b0,
                        },
                        TrackObservation {
                            frame_id,
                            pixel: v.curr,
                            bearing: b1,
                        },
                    ],
                    hamming_history: vec![v.hamming],
                },
            );
            self.endpoints.insert(v.curr, id);
            admitted.push(id);
        }
        admitted
    }

    /// Ingest then admit, the per-frame update.
    pub fn update(&mut self, frame_id: u64, flow: &[FlowVector]) -> Result<IngestOutcome, TrackerError> {
        let out = self.ingest_flow(frame_id, flow)?;
        self.admit_tracks(&out.candidates);
        Ok(out)
    }

    /// Observations for the estimator on frames where `frame_id % decimation == 0`.
    pub fn emit_feature_frame(&self, frame_id: u64, decimation: u64) -> Result<Option<FeatureFrame>, TrackerError> {
        if decimation == 0 {
            return Err(TrackerError::BadDecimation);
        }
        if !frame_id.is_multiple_of(decimation) {
            return Ok(None);
        }
        let observations = self
            .tracks
            .values()
            .filter(|t| t.len() >= 2 && t.last().frame_id == frame_id)
            .map(|t| {
                let o = t.last();
                FeatureObservation {
                    track_id: t.track_id,
                    bearing: o.bearing,
                    pixel: self.mapping.frame_pixel(o.pixel),
                }
            })
            .collect();
        Ok(Some(FeatureFrame { frame_id, observations }))
    }

    /// Keeps the `capacity` longest tracks (ties: lower mean Hamming, then
    /// lower id). Returns the removed ids.
    fn truncate_to_capacity(&mut self) -> Vec<u64> {
        if self.tracks.len() <= self.capacity {
            return Vec::new();
        }
        let mut ranked: Vec<&FeatureTrack> = self.tracks.values().collect();
        ranked.sort_by(|a, b| {
            b.len()
                .cmp(&a.len())
                .then(a.mean_hamming().total_cmp(&b.mean_hamming()))
                .then(a.track_id.cmp(&b.track_id))
        });
        let removed: Vec<u64> = ranked[self.capacity..].iter().map(|t| t.track_id).collect();
        for id in &removed {
            self.tracks.remove(id);
        }
        removed
    }

    /// Lowers the capacity, truncating immediately if needed.
    pub fn set_capacity(&mut self, capacity: usize) -> Vec<u64> {
        self.capacity = capacity;
        let removed = self.truncate_to_capacity();
        self.rebuild_endpoints();
        removed
    }

    fn rebuild_endpoints(&mut self) {
        self.endpoints = self.tracks.values().map(|t| (t.last().pixel, t.track_id)).collect();
    }
}

/// Writes tracks as `track_id,frame_id,x,y,ux,uy,uz,hamming`. The first
/// observation repeats the Hamming score of the vector that created it.
pub fn write_track_csv<'a, W: Write>(
    out: &mut W,
    tracks: impl IntoIterator<Item = &'a FeatureTrack>,
) -> std::io::Result<()> {
    writeln!(out, "track_id,frame_id,x,y,ux,uy,uz,hamming")?;
    for t in tracks {
        for (k, o) in t.observations.iter().enumerate() {
            let h = t.hamming_history.get(k.saturating_sub(1)).copied().unwrap_or(0);
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                t.track_id, o.frame_id, o.pixel.x, o.pixel.y, o.bearing.x, o.bearing.y, o.bearing.z, h
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{Distortion, Intrinsics};

    fn mapping() -> PixelMapping {
        PixelMapping::identity(CameraModel::new(
            Intrinsics {
                fx: 400.0,
                fy: 400.0,
                cx: 320.0,
                cy: 240.0,
            },
            Distortion::default(),
        ))
    }

    fn fv(px: i32, py: i32, cx: i32, cy: i32, hamming: u32, cornerness: u32) -> FlowVector {
        FlowVector {
            prev: Pixel::new(px, py),
            curr: Pixel::new(cx, cy),
            hamming,
            cornerness,
        }
    }

    #[test]
    fn cold_start_yields_all_candidates() {
        let mut st = TrackerState::new(mapping(), 150);
        let flow: Vec<_> = (0..7).map(|i| fv(10 * i, 5, 10 * i + 1, 5, 3, 100)).collect();
        let out = st.ingest_flow(1, &flow).unwrap();
        assert_eq!(out.extended, 0);
        assert_eq!(out.candidates.len(), 7);
    }

    #[test]
    fn track_extends_through_matching_endpoint() {
        let mut st = TrackerState::new(mapping(), 150);
        st.update(1, &[fv(9, 10, 10, 10, 2, 50)]).unwrap();
        let out = st.update(2, &[fv(10, 10, 11, 10, 4, 50)]).unwrap();
        assert_eq!(out.extended, 1);
        let t = st.tracks().values().next().unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t.last().pixel, Pixel::new(11, 10));
        assert_eq!(st.endpoint_track(Pixel::new(11, 10)), Some(t.track_id));
        assert_eq!(t.hamming_history, vec![2, 4]);
    }

    #[test]
    fn unmatched_tracks_dropped_and_ids_not_reused() {
        let mut st = TrackerState::new(mapping(), 150);
        st.update(1, &[fv(0, 0, 1, 1, 0, 0)]).unwrap();
        let out = st.update(2, &[fv(50, 50, 51, 51, 0, 0)]).unwrap();
        assert_eq!(out.dropped, vec![0]);
        assert_eq!(st.tracks().keys().copied().collect::<Vec<_>>(), vec![1]);
    }

    #[test]
    fn frame_gap_is_an_error() {
        let mut st = TrackerState::new(mapping(), 150);
        st.update(1, &[]).unwrap();
        assert_eq!(st.ingest_flow(3, &[]), Err(TrackerError::FrameGap { last: 1, got: 3 }));
    }

    #[test]
    fn full_state_admits_nothing() {
        let mut st = TrackerState::new(mapping(), 3);
        let first: Vec<_> = (0..3).map(|i| fv(10 * i, 0, 10 * i, 1, 1, 1)).collect();
        st.update(1, &first).unwrap();
        let mut next: Vec<_> = (0..3).map(|i| fv(10 * i, 1, 10 * i, 2, 1, 1)).collect();
        next.extend((0..5).map(|i| fv(100 + i, 100, 100 + i, 101, 0, 900)));
        let out = st.ingest_flow(2, &next).unwrap();
        assert!(st.admit_tracks(&out.candidates).is_empty());
        assert_eq!(st.active_count(), 3);
    }

    #[test]
    fn admission_prefers_low_hamming() {
        let mut st = TrackerState::new(mapping(), 3);
        let cands: Vec<_> = [4, 9, 2, 7, 2]
            .iter()
            .enumerate()
            .map(|(i, &h)| fv(20 * i as i32, 0, 20 * i as i32, 1, h, 10))
            .collect();
        let out = st.ingest_flow(1, &cands).unwrap();
        st.admit_tracks(&out.candidates);
        let mut hs: Vec<u32> = st.tracks().values().map(|t| t.hamming_history[0]).collect();
        hs.sort();
        assert_eq!(hs, vec![2, 2, 4]);
    }

    #[test]
    fn cornerness_breaks_hamming_ties() {
        let mut st = TrackerState::new(mapping(), 1);
        let cands = [fv(0, 0, 0, 1, 5, 10), fv(9, 0, 9, 1, 5, 30)];
        let out = st.ingest_flow(1, &cands).unwrap();
        st.admit_tracks(&out.candidates);
        assert_eq!(st.tracks().values().next().unwrap().last().pixel, Pixel::new(9, 1));
    }

    #[test]
    fn truncation_prefers_long_then_low_hamming_then_low_id() {
        let mut st = TrackerState::new(mapping(), 5);
        let xs_h = [(0, 9), (10, 1), (20, 5), (40, 5)];
        let f1: Vec<_> = xs_h.iter().map(|&(x, h)| fv(x, 0, x, 1, h, 0)).collect();
        st.update(1, &f1).unwrap();
        let mut f2: Vec<_> = xs_h.iter().map(|&(x, h)| fv(x, 1, x, 2, h, 0)).collect();
        f2.push(fv(30, 1, 30, 2, 0, 0));
        st.update(2, &f2).unwrap();
        let x_of = |st: &TrackerState| -> Vec<(u64, i32, usize)> {
            st.tracks().values().map(|t| (t.track_id, t.last().pixel.x, t.len())).collect()
        };
        // Admission order at frame 1 was by Hamming: x10, x20, x40, x0.
        assert_eq!(x_of(&st), vec![(0, 10, 3), (1, 20, 3), (2, 40, 3), (3, 0, 3), (4, 30, 2)]);
        let removed = st.set_capacity(2);
        assert_eq!(removed.len(), 3);
        // Lowest mean Hamming first, then the lower id among equal means.
        assert_eq!(x_of(&st), vec![(0, 10, 3), (1, 20, 3)]);
        assert_eq!(st.endpoint_track(Pixel::new(40, 2)), None);
    }

    #[test]
    fn emission_follows_decimation() {
        let mut st = TrackerState::new(mapping(), 150);
        st.update(3, &[fv(1, 1, 2, 2, 0, 0)]).unwrap();
        assert_eq!(st.emit_feature_frame(3, 2).unwrap(), None);
        let f = st.emit_feature_frame(3, 1).unwrap().unwrap();
        assert_eq!(f.observations.len(), 1);
        assert!(st.emit_feature_frame(3, 0).is_err());
        assert!((f.observations[0].bearing.norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn constant_pan_tracks_grow_one_per_frame() {
        let mut st = TrackerState::new(mapping(), 150);
        let pts: Vec<(i32, i32)> = (0..40).map(|i| (30 + 13 * (i % 8), 40 + 17 * (i / 8))).collect();
        for k in 1..=6u64 {
            let d = k as i32;
            let flow: Vec<_> = pts.iter().map(|&(x, y)| fv(x + d - 1, y, x + d, y, 1, 1)).collect();
            st.update(k, &flow).unwrap();
        }
        assert_eq!(st.active_count(), 40);
        for t in st.tracks().values() {
            assert_eq!(t.len(), 7);
            for w in t.observations.windows(2) {
                assert_eq!(w[1].pixel.x - w[0].pixel.x, 1);
                assert_eq!(w[1].pixel.y, w[0].pixel.y);
            }
        }
    }

    #[test]
    fn csv_dump_has_one_row_per_observation() {
        let mut st = TrackerState::new(mapping(), 150);
        st.update(1, &[fv(1, 1, 2, 2, 3, 0)]).unwrap();
        let mut buf = Vec::new();
        write_track_csv(&mut buf, st.tracks().values()).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().nth(1).unwrap().starts_with("0,0,1,1,"));
    }
}
