//! Core domain types shared by the whole pipeline: entity tracks, derived
//! geometric features, and labeled segment timelines.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityKind {
    Human,
    Object,
}

/// One entity's track through a video: keypoints in pixels, precomputed
/// visual features, and frame-wise labels. All arrays span exactly T frames.
#[derive(Clone, Debug, PartialEq)]
pub struct EntityTrack {
    pub entity_id: String,
    pub kind: EntityKind,
    /// T x K x 2 pixel positions; masked slots hold 0.
    pub keypoints: Tensor,
    /// T x K validity flags.
    pub keypoint_mask: Vec<bool>,
    /// T x Dv visual features.
    pub visual: Tensor,
    /// T frame-wise class indices (within the kind's label space).
    pub labels: Vec<usize>,
    /// T label validity flags.
    pub label_mask: Vec<bool>,
}

/// One video: a set of entity tracks over a common frame range.
#[derive(Clone, Debug, PartialEq)]
pub struct EntitySequence {
    pub video_id: String,
    pub frames: usize,
    pub fps: f64,
    pub activity: String,
    pub entities: Vec<EntityTrack>,
}

impl EntitySequence {
    pub fn k_budget(&self) -> usize {
        self.entities
            .first()
            .map(|e| e.keypoints.shape()[1])
            .unwrap_or(0)
    }

    pub fn visual_dim(&self) -> usize {
        self.entities
            .first()
            .map(|e| e.visual.shape()[1])
            .unwrap_or(0)
    }

    pub fn n_humans(&self) -> usize {
        self.entities
            .iter()
            .filter(|e| e.kind == EntityKind::Human)
            .count()
    }

    pub fn n_objects(&self) -> usize {
        self.entities
            .iter()
            .filter(|e| e.kind == EntityKind::Object)
            .count()
    }

    /// Checks the structural invariants every consumer relies on.
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::data(format!("{}: empty sequence", self.video_id)));
        }
        if self.n_humans() == 0 {
            return Err(Error::data(format!(
                "{}: needs at least one human entity",
                self.video_id
            )));
        }
        let k = self.k_budget();
        let dv = self.visual_dim();
        for track in &self.entities {
            let id = &track.entity_id;
            track
                .keypoints
                .check_shape(&[self.frames, k, 2], &format!("{id} keypoints"))?;
            track
                .visual
                .check_shape(&[self.frames, dv], &format!("{id} visual"))?;
            if track.keypoint_mask.len() != self.frames * k {
                return Err(Error::data(format!("{id}: keypoint mask length")));
            }
            if track.labels.len() != self.frames || track.label_mask.len() != self.frames {
                return Err(Error::data(format!("{id}: label arrays must span T frames")));
            }
            for t in 0..self.frames {
                for ki in 0..k {
                    let idx = t * k + ki;
                    if !track.keypoint_mask[idx] {
                        let p = &track.keypoints.data()[idx * 2..idx * 2 + 2];
                        if p[0] != 0.0 || p[1] != 0.0 {
                            return Err(Error::data(format!(
                                "{id}: masked keypoint ({t},{ki}) carries nonzero value"
                            )));
                        }
                    }
                    // objects use exactly the first two keypoint slots
                    if track.kind == EntityKind::Object && ki >= 2 && track.keypoint_mask[idx] {
                        return Err(Error::data(format!(
                            "{id}: object keypoint slot {ki} must be masked"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Keeps every `stride`-th frame. Stride 1 is the identity.
    pub fn subsample(&self, stride: usize) -> EntitySequence {
        if stride <= 1 {
            return self.clone();
        }
        let kept: Vec<usize> = (0..self.frames).step_by(stride).collect();
        let k = self.k_budget();
        let dv = self.visual_dim();
        let entities = self
            .entities
            .iter()
            .map(|track| {
                let mut keypoints = Tensor::zeros(&[kept.len(), k, 2]);
                let mut keypoint_mask = vec![false; kept.len() * k];
                let mut visual = Tensor::zeros(&[kept.len(), dv]);
                let mut labels = vec![0usize; kept.len()];
                let mut label_mask = vec![false; kept.len()];
                for (new_t, &t) in kept.iter().enumerate() {
                    keypoints.data_mut()[new_t * k * 2..(new_t + 1) * k * 2]
                        .copy_from_slice(&track.keypoints.data()[t * k * 2..(t + 1) * k * 2]);
                    keypoint_mask[new_t * k..(new_t + 1) * k]
                        .copy_from_slice(&track.keypoint_mask[t * k..(t + 1) * k]);
                    visual.data_mut()[new_t * dv..(new_t + 1) * dv]
                        .copy_from_slice(&track.visual.data()[t * dv..(t + 1) * dv]);
                    labels[new_t] = track.labels[t];
                    label_mask[new_t] = track.label_mask[t];
                }
                EntityTrack {
                    entity_id: track.entity_id.clone(),
                    kind: track.kind,
                    keypoints,
                    keypoint_mask,
                    visual,
                    labels,
                    label_mask,
                }
            })
            .collect();
        EntitySequence {
            video_id: self.video_id.clone(),
            frames: kept.len(),
            fps: self.fps / stride as f64,
            activity: self.activity.clone(),
            entities,
        }
    }
}

/// Pixel-to-unit normalization for keypoint coordinates.
#[derive(Copy, Clone, Debug, Serialize, Deserialize)]
pub struct NormalizationSpec {
    pub width: f64,
    pub height: f64,
}

/// Per-keypoint position+velocity channels for a whole sequence.
///
/// Channel layout is [x, y, vx, vy] in normalized units; velocity is the
/// backward difference of normalized positions with v = 0 at frame 0 and
/// wherever either endpoint of the difference is masked.
#[derive(Clone, Debug, PartialEq)]
pub struct GeometricFeatures {
    /// T x E x K x 4.
    pub values: Tensor,
    /// T x E x K.
    pub mask: Vec<bool>,
}

impl GeometricFeatures {
    pub fn frames(&self) -> usize {
        self.values.shape()[0]
    }
    pub fn entities(&self) -> usize {
        self.values.shape()[1]
    }
    pub fn keypoints(&self) -> usize {
        self.values.shape()[2]
    }
}

pub fn derive_geometric_features(
    seq: &EntitySequence,
    normalize: &NormalizationSpec,
) -> Result<GeometricFeatures> {
    if seq.frames == 0 {
        return Err(Error::data(format!("{}: empty sequence", seq.video_id)));
    }
    let t_len = seq.frames;
    let n_entities = seq.entities.len();
    let k = seq.k_budget();
    let mut values = Tensor::zeros(&[t_len, n_entities, k, 4]);
    let mut mask = vec![false; t_len * n_entities * k];
    for (e, track) in seq.entities.iter().enumerate() {
        for t in 0..t_len {
            for ki in 0..k {
                let src = t * k + ki;
                if !track.keypoint_mask[src] {
                    continue;
                }
                let px = track.keypoints.data()[src * 2] / normalize.width;
                let py = track.keypoints.data()[src * 2 + 1] / normalize.height;
                let dst = ((t * n_entities + e) * k + ki) * 4;
                values.data_mut()[dst] = px;
                values.data_mut()[dst + 1] = py;
                if t > 0 && track.keypoint_mask[(t - 1) * k + ki] {
                    let prev = (t - 1) * k + ki;
                    let qx = track.keypoints.data()[prev * 2] / normalize.width;
                    let qy = track.keypoints.data()[prev * 2 + 1] / normalize.height;
                    values.data_mut()[dst + 2] = px - qx;
                    values.data_mut()[dst + 3] = py - qy;
                }
                mask[(t * n_entities + e) * k + ki] = true;
            }
        }
    }
    Ok(GeometricFeatures { values, mask })
}

/// One labeled segment over an inclusive frame range.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub class: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }
    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Ordered, non-overlapping labeled segments over a frame range.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentTimeline {
    pub segments: Vec<Segment>,
}

impl SegmentTimeline {
    pub fn new(segments: Vec<Segment>) -> Self {
        SegmentTimeline { segments }
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    /// Writes segment classes back onto a frame array (None outside segments).
    pub fn rasterize(&self, frames: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; frames];
        for seg in &self.segments {
            for slot in out.iter_mut().take(seg.end + 1).skip(seg.start) {
                *slot = Some(seg.class);
            }
        }
        out
    }
}

/// Maximal contiguous runs of equal class over valid frames. A masked frame
/// always terminates the current run.
pub fn extract_segments(labels: &[usize], label_mask: &[bool]) -> Result<SegmentTimeline> {
    if labels.is_empty() {
        return Err(Error::data("extract_segments: empty label array"));
    }
    assert_eq!(labels.len(), label_mask.len(), "label mask length");
    let mut segments = Vec::new();
    let mut current: Option<Segment> = None;
    for t in 0..labels.len() {
        if !label_mask[t] {
            if let Some(seg) = current.take() {
                segments.push(seg);
            }
            continue;
        }
        match &mut current {
            Some(seg) if seg.class == labels[t] && seg.end + 1 == t => {
                seg.end = t;
            }
            Some(seg) => {
                segments.push(*seg);
                current = Some(Segment {
                    start: t,
                    end: t,
                    class: labels[t],
                });
            }
            None => {
                current = Some(Segment {
                    start: t,
                    end: t,
                    class: labels[t],
                });
            }
        }
    }
    if let Some(seg) = current {
        segments.push(seg);
    }
    Ok(SegmentTimeline::new(segments))
}
