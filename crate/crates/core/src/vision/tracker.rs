//! Frame-to-frame association of LED blobs so that small blobs can be
//! decoded from several frames' stripe profiles.

use std::collections::VecDeque;

use crate::occ_link::DecodeError;
use crate::rs_camera::RsFrame;

use super::{bounded_push, decode_fused, decode_roi, detect_rois, extract_profile, RoiDetection, TimedProfile, VisionConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackerConfig {
    pub vision: VisionConfig,
    /// Maximum centroid jump between frames, pixels.
    pub gate_px: f64,
    /// Profiles kept per track for fusion.
    pub history: usize,
    /// Frames a track survives without a matching blob.
    pub max_missed: usize,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            vision: VisionConfig::default(),
            gate_px: 60.0,
            history: 12,
            max_missed: 10,
        }
    }
}

#[derive(Debug)]
struct Track {
    id: u64,
    centroid: (f64, f64),
    uid: Option<u8>,
    history: VecDeque<TimedProfile>,
    missed: usize,
}

/// A blob in the current frame with whatever identity is known for it.
#[derive(Debug, Clone)]
pub struct TrackedRoi {
    pub track_id: u64,
    pub roi: RoiDetection,
    pub uid: Option<u8>,
    /// Why the blob is still unidentified, if it is.
    pub pending: Option<DecodeError>,
}

#[derive(Debug, Default)]
pub struct LampTracker {
    cfg: TrackerConfig,
    tracks: Vec<Track>,
    next_id: u64,
}

impl LampTracker {
    pub fn new(cfg: TrackerConfig) -> Self {
        Self {
            cfg,
            tracks: Vec::new(),
            next_id: 0,
        }
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.cfg
    }

    pub fn reset(&mut self) {
        self.tracks.clear();
    }

    pub fn process(&mut self, frame: &RsFrame) -> Vec<TrackedRoi> {
        let rois = detect_rois(&frame.image, &self.cfg.vision);

        // greedy nearest-first matching
        let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
        for (ri, roi) in rois.iter().enumerate() {
            for (ti, tr) in self.tracks.iter().enumerate() {
                let d = ((roi.centroid.0 - tr.centroid.0).powi(2) + (roi.centroid.1 - tr.centroid.1).powi(2)).sqrt();
                if d <= self.cfg.gate_px {
                    pairs.push((d, ri, ti));
                }
            }
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut roi_track: Vec<Option<usize>> = vec![None; rois.len()];
        let mut track_used = vec![false; self.tracks.len()];
        for (_, ri, ti) in pairs {
            if roi_track[ri].is_none() && !track_used[ti] {
                roi_track[ri] = Some(ti);
                track_used[ti] = true;
            }
        }
        for (ti, used) in track_used.iter().enumerate() {
            if !used {
                self.tracks[ti].missed += 1;
            }
        }

        let mut out = Vec::with_capacity(rois.len());
        for (ri, roi) in rois.into_iter().enumerate() {
            let ti = match roi_track[ri] {
                Some(ti) => ti,
                None => {
                    self.tracks.push(Track {
                        id: self.next_id,
                        centroid: roi.centroid,
                        uid: None,
                        history: VecDeque::new(),
                        missed: 0,
                    });
                    self.next_id += 1;
                    self.tracks.len() - 1
                }
            };
            let cap = self.cfg.history;
            let track = &mut self.tracks[ti];
            track.centroid = roi.centroid;
            track.missed = 0;
            let mut pending = None;
            if track.uid.is_none() {
                match extract_profile(&frame.image, &roi, &self.cfg.vision) {
                    Err(_) => pending = Some(DecodeError::DegenerateProfile),
                    Ok(profile) => match decode_roi(&profile) {
                        Ok(r) => track.uid = Some(r.uid),
                        Err(e) => {
                            bounded_push(
                                &mut track.history,
                                TimedProfile {
                                    profile,
                                    timing: frame.timing(),
                                },
                                cap,
                            );
                            pending = Some(e);
                            if track.history.len() >= 2 {
                                let segs: Vec<TimedProfile> = track.history.iter().cloned().collect();
                                match decode_fused(&segs) {
                                    Ok(d) => {
                                        track.uid = Some(d.result.uid);
                                        pending = None;
                                    }
                                    Err(e) => pending = Some(e),
                                }
                            }
                        }
                    },
                }
            }
            if track.uid.is_some() {
                track.history.clear();
            }
            out.push(TrackedRoi {
                track_id: track.id,
                roi,
                uid: track.uid,
                pending,
            });
        }
        let max_missed = self.cfg.max_missed;
        self.tracks.retain(|t| t.missed <= max_missed);
        out
    }
}
