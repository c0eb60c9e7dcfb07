//! Synthetic occlusion generation and application.
//!
//! Consistent occlusions (top/bottom/middle) are temporally constant: top and
//! bottom crop the affected rows away and stretch the remainder back to
//! 64x64 (re-binarized at 128), middle zeroes a vertically centered band.
//! Dynamic occlusions are moving zeroing patches: a square patch
//! (`dynamic_small`) or a full-height bar (`dynamic_tall`) translating
//! horizontally at a sub-pixel speed, wrapping around the frame edge.
//!
//! Every applied occlusion is described by a fully resolved [`OcclusionSpec`]
//! that replays bit-identically, and yields a [`VisibilityLabel`] used as
//! ground truth when training the visibility estimation network.

use ndarray::{Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::derive_rng;
use crate::silhouette::{rebinarize_f32, resize_bilinear, SilhouetteSequence};

/// Occlusion amount range for top/bottom/middle and the dynamic_small patch.
pub const RANGE_CONSISTENT: (f64, f64) = (0.4, 0.6);
/// Width range for the dynamic_tall bar (tall obstacles are thin).
pub const RANGE_TALL: (f64, f64) = (0.2, 0.4);
/// Speed range for moving patches, pixels per frame.
pub const RANGE_SPEED: (f64, f64) = (0.5, 1.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OcclusionKind {
    None,
    Top,
    Bottom,
    Middle,
    DynamicSmall,
    DynamicTall,
}

impl OcclusionKind {
    pub const ALL: [OcclusionKind; 6] = [
        OcclusionKind::None,
        OcclusionKind::Top,
        OcclusionKind::Bottom,
        OcclusionKind::Middle,
        OcclusionKind::DynamicSmall,
        OcclusionKind::DynamicTall,
    ];

    pub fn is_consistent(self) -> bool {
        matches!(
            self,
            OcclusionKind::Top | OcclusionKind::Bottom | OcclusionKind::Middle
        )
    }

    pub fn is_dynamic(self) -> bool {
        matches!(self, OcclusionKind::DynamicSmall | OcclusionKind::DynamicTall)
    }

    /// Valid amount range for this kind.
    pub fn amount_range(self) -> (f64, f64) {
        match self {
            OcclusionKind::None => (0.0, 0.0),
            OcclusionKind::DynamicTall => RANGE_TALL,
            _ => RANGE_CONSISTENT,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            OcclusionKind::None => "none",
            OcclusionKind::Top => "top",
            OcclusionKind::Bottom => "bottom",
            OcclusionKind::Middle => "middle",
            OcclusionKind::DynamicSmall => "dynamic_small",
            OcclusionKind::DynamicTall => "dynamic_tall",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        OcclusionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown occlusion kind `{s}`")))
    }
}

impl std::fmt::Display for OcclusionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    LeftToRight,
    RightToLeft,
}

/// Fully resolved description of one applied occlusion, sufficient to replay
/// it bit-exactly. Serializes to a flat JSON object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcclusionSpec {
    pub kind: OcclusionKind,
    /// Fraction in [0,1]: cropped/zeroed height fraction for consistent
    /// kinds, patch side fraction for dynamic_small, bar width fraction for
    /// dynamic_tall.
    pub amount: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub direction: Option<Direction>,
    /// Pixels per frame (dynamic kinds only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub speed: Option<f64>,
    /// Initial left column of the patch (dynamic kinds only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub start_offset: Option<usize>,
    /// Top row of a dynamic_small patch.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vertical_offset: Option<usize>,
    pub seed: u64,
}

impl OcclusionSpec {
    pub fn none() -> Self {
        OcclusionSpec {
            kind: OcclusionKind::None,
            amount: 0.0,
            direction: None,
            speed: None,
            start_offset: None,
            vertical_offset: None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.kind.amount_range();
        if self.kind == OcclusionKind::None {
            if self.amount != 0.0 {
                return Err(Error::Validation(
                    "kind none requires amount = 0".to_string(),
                ));
            }
            return Ok(());
        }
        if !(lo..=hi).contains(&self.amount) {
            return Err(Error::Validation(format!(
                "{} amount {} outside [{lo}, {hi}]",
                self.kind, self.amount
            )));
        }
        if self.kind.is_dynamic() {
            let speed = self
                .speed
                .ok_or_else(|| Error::Validation("dynamic spec missing speed".into()))?;
            if !(RANGE_SPEED.0..=RANGE_SPEED.1).contains(&speed) {
                return Err(Error::Validation(format!(
                    "speed {speed} outside [{}, {}]",
                    RANGE_SPEED.0, RANGE_SPEED.1
                )));
            }
            if self.direction.is_none() || self.start_offset.is_none() {
                return Err(Error::Validation(
                    "dynamic spec missing direction/start_offset".into(),
                ));
            }
            if self.kind == OcclusionKind::DynamicSmall && self.vertical_offset.is_none() {
                return Err(Error::Validation(
                    "dynamic_small spec missing vertical_offset".into(),
                ));
            }
        } else if self.speed.is_some() || self.direction.is_some() {
            return Err(Error::Validation(
                "consistent spec carries dynamic fields".into(),
            ));
        }
        Ok(())
    }

    /// Left column of the patch at frame `t` (dynamic kinds).
    /// Sub-pixel speeds accumulate as floor(speed * t); the patch wraps
    /// around the frame edge.
    pub fn patch_left_at(&self, t: usize, frame_width: usize) -> usize {
        let start = self.start_offset.unwrap_or(0) as i64;
        let disp = (self.speed.unwrap_or(0.0) * t as f64).floor() as i64;
        let signed = match self.direction.unwrap_or(Direction::LeftToRight) {
            Direction::LeftToRight => start + disp,
            Direction::RightToLeft => start - disp,
        };
        signed.rem_euclid(frame_width as i64) as usize
    }
}

/// Ground-truth label emitted when an occlusion is applied: the class index
/// within a [`ClassSet`] and the regression target (0 for no occlusion,
/// otherwise the spec amount).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VisibilityLabel {
    pub class_index: usize,
    pub amount_target: f64,
}

/// Ordered set of occlusion classes. Index 0 is always `none`; class indices
/// follow the configured order and are recorded in checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSet(Vec<OcclusionKind>);

impl ClassSet {
    pub fn new(kinds: Vec<OcclusionKind>) -> Result<Self> {
        if !kinds.contains(&OcclusionKind::None) {
            return Err(Error::Config("class set must include `none`".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for k in &kinds {
            if !seen.insert(*k) {
                return Err(Error::Config(format!("duplicate class `{k}`")));
            }
        }
        Ok(ClassSet(kinds))
    }

    /// The default set used for top/bottom training: {none, top, bottom}.
    pub fn default_top_bottom() -> Self {
        ClassSet(vec![
            OcclusionKind::None,
            OcclusionKind::Top,
            OcclusionKind::Bottom,
        ])
    }

    /// Class set covering `kinds` plus `none`, in canonical order.
    pub fn covering(kinds: &[OcclusionKind]) -> Self {
        let mut v = vec![OcclusionKind::None];
        for k in OcclusionKind::ALL {
            if k != OcclusionKind::None && kinds.contains(&k) {
                v.push(k);
            }
        }
        ClassSet(v)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn kinds(&self) -> &[OcclusionKind] {
        &self.0
    }

    pub fn index_of(&self, kind: OcclusionKind) -> Option<usize> {
        self.0.iter().position(|&k| k == kind)
    }

    pub fn covers(&self, kinds: &[OcclusionKind]) -> bool {
        kinds.iter().all(|k| self.0.contains(k))
    }
}

/// Occlusion generator/applier configured with a class set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcclusionEngine {
    pub class_set: ClassSet,
}

impl OcclusionEngine {
    pub fn new(class_set: ClassSet) -> Self {
        OcclusionEngine { class_set }
    }

    /// Draw a fully resolved spec: kind uniform over `allowed_kinds`, amount
    /// uniform over the kind's range (optionally overridden), dynamic
    /// parameters uniform over theirs. Deterministic under a fixed seed;
    /// every call is an independent draw, so probe and gallery occlusions
    /// are uncorrelated.
    pub fn sample_spec(
        &self,
        allowed_kinds: &[OcclusionKind],
        rng_seed: u64,
    ) -> Result<OcclusionSpec> {
        self.sample_spec_with_range(allowed_kinds, None, rng_seed)
    }

    /// Like [`Self::sample_spec`] but with an optional amount-range override
    /// (used by the occlusion-range sweep protocol).
    pub fn sample_spec_with_range(
        &self,
        allowed_kinds: &[OcclusionKind],
        amount_range_override: Option<(f64, f64)>,
        rng_seed: u64,
    ) -> Result<OcclusionSpec> {
        if allowed_kinds.is_empty() {
            return Err(Error::Validation("allowed_kinds must be non-empty".into()));
        }
        let mut rng = derive_rng(rng_seed, &["occlusion_spec"]);
        let kind = allowed_kinds[rng.random_range(0..allowed_kinds.len())];
        if kind == OcclusionKind::None {
            return Ok(OcclusionSpec::none());
        }
        let (lo, hi) = amount_range_override.unwrap_or_else(|| kind.amount_range());
        let amount = rng.random_range(lo..=hi);
        let mut spec = OcclusionSpec {
            kind,
            amount,
            direction: None,
            speed: None,
            start_offset: None,
            vertical_offset: None,
            seed: rng_seed,
        };
        if kind.is_dynamic() {
            spec.direction = Some(if rng.random_range(0..2) == 0 {
                Direction::LeftToRight
            } else {
                Direction::RightToLeft
            });
            spec.speed = Some(rng.random_range(RANGE_SPEED.0..=RANGE_SPEED.1));
            // Any start column is valid since motion wraps.
            spec.start_offset = Some(rng.random_range(0..64));
            if kind == OcclusionKind::DynamicSmall {
                let patch_h = (amount * 64.0).floor() as usize;
                spec.vertical_offset = Some(rng.random_range(0..=64 - patch_h.min(64)));
            }
        }
        Ok(spec)
    }

    /// Apply `spec` to a sequence, returning the occluded sequence and the
    /// ground-truth visibility label. `none` is the identity.
    pub fn apply(
        &self,
        seq: &SilhouetteSequence,
        spec: &OcclusionSpec,
    ) -> Result<(SilhouetteSequence, VisibilityLabel)> {
        spec.validate()?;
        let class_index = self.class_set.index_of(spec.kind).ok_or_else(|| {
            Error::Validation(format!("kind `{}` not in engine class set", spec.kind))
        })?;
        let label = VisibilityLabel {
            class_index,
            amount_target: if spec.kind == OcclusionKind::None {
                0.0
            } else {
                spec.amount
            },
        };
        let out = match spec.kind {
            OcclusionKind::None => seq.clone(),
            OcclusionKind::Top | OcclusionKind::Bottom | OcclusionKind::Middle => {
                apply_consistent(seq, spec)?
            }
            OcclusionKind::DynamicSmall | OcclusionKind::DynamicTall => apply_dynamic(seq, spec)?,
        };
        Ok((out, label))
    }
}

fn expect_64(seq: &SilhouetteSequence) -> Result<()> {
    if seq.height() != 64 || seq.width() != 64 {
        return Err(Error::Validation(format!(
            "occlusion expects 64x64 frames, got {}x{}",
            seq.height(),
            seq.width()
        )));
    }
    Ok(())
}

/// Apply a temporally constant occlusion. Top/bottom crop `floor(amount*H)`
/// rows off the respective edge of every frame and stretch the remainder
/// back to 64x64 (bilinear, re-binarized at 128); middle zeroes a vertically
/// centered band of that many rows with no resize.
pub fn apply_consistent(seq: &SilhouetteSequence, spec: &OcclusionSpec) -> Result<SilhouetteSequence> {
    if !spec.kind.is_consistent() {
        return Err(Error::Validation(format!(
            "apply_consistent got kind `{}`",
            spec.kind
        )));
    }
    expect_64(seq)?;
    let h = seq.height();
    let w = seq.width();
    let k = (spec.amount * h as f64).floor() as usize;
    if k == 0 {
        return Ok(seq.clone());
    }
    let mut frames = Array3::<u8>::zeros((seq.len(), h, w));
    for (t, frame) in seq.frames.axis_iter(Axis(0)).enumerate() {
        let out = match spec.kind {
            OcclusionKind::Top => {
                let crop = frame.slice(ndarray::s![k.., ..]).mapv(|p| p as f32 * 255.0);
                rebinarize_f32(&resize_bilinear(&crop, h, w))
            }
            OcclusionKind::Bottom => {
                let crop = frame
                    .slice(ndarray::s![..h - k, ..])
                    .mapv(|p| p as f32 * 255.0);
                rebinarize_f32(&resize_bilinear(&crop, h, w))
            }
            OcclusionKind::Middle => {
                let start = (h - k) / 2;
                let mut out = frame.to_owned();
                out.slice_mut(ndarray::s![start..start + k, ..]).fill(0);
                out
            }
            _ => unreachable!(),
        };
        frames.index_axis_mut(Axis(0), t).assign(&out);
    }
    rebuild(seq, frames)
}

/// Apply a moving zeroing patch. dynamic_small is a `floor(amount*H)` x
/// `floor(amount*W)` rectangle at a fixed vertical offset; dynamic_tall is a
/// full-height bar of width `floor(amount*W)`. The patch translates at
/// `speed` px/frame in `direction` and wraps around the frame edge.
pub fn apply_dynamic(seq: &SilhouetteSequence, spec: &OcclusionSpec) -> Result<SilhouetteSequence> {
    if !spec.kind.is_dynamic() {
        return Err(Error::Validation(format!(
            "apply_dynamic got kind `{}`",
            spec.kind
        )));
    }
    expect_64(seq)?;
    let h = seq.height();
    let w = seq.width();
    let patch_w = (spec.amount * w as f64).floor() as usize;
    let (row0, row1) = match spec.kind {
        OcclusionKind::DynamicTall => (0, h),
        OcclusionKind::DynamicSmall => {
            let ph = (spec.amount * h as f64).floor() as usize;
            let top = spec.vertical_offset.unwrap_or(0).min(h - ph.min(h));
            (top, top + ph)
        }
        _ => unreachable!(),
    };
    let mut frames = seq.frames.clone();
    for t in 0..seq.len() {
        let left = spec.patch_left_at(t, w);
        let mut frame = frames.index_axis_mut(Axis(0), t);
        for dc in 0..patch_w {
            let c = (left + dc) % w;
            for r in row0..row1 {
                frame[[r, c]] = 0;
            }
        }
    }
    rebuild(seq, frames)
}

/// Occlude the first `ceil(T/2)` frames with `spec_a` and the rest with
/// `spec_b`. Only consistent kinds are supported.
pub fn flip_mid_video(
    seq: &SilhouetteSequence,
    spec_a: &OcclusionSpec,
    spec_b: &OcclusionSpec,
) -> Result<SilhouetteSequence> {
    for spec in [spec_a, spec_b] {
        if !spec.kind.is_consistent() {
            return Err(Error::Validation(format!(
                "flip_mid_video supports consistent kinds only, got `{}`",
                spec.kind
            )));
        }
    }
    let t = seq.len();
    let first_len = t.div_ceil(2);
    let a = apply_consistent(seq, spec_a)?;
    let b = apply_consistent(seq, spec_b)?;
    let mut frames = a.frames;
    frames
        .slice_mut(ndarray::s![first_len.., .., ..])
        .assign(&b.frames.slice(ndarray::s![first_len.., .., ..]));
    rebuild(seq, frames)
}

fn rebuild(src: &SilhouetteSequence, frames: Array3<u8>) -> Result<SilhouetteSequence> {
    let valid_mask = src.valid_mask.clone();
    // Occlusion can empty a frame entirely; such frames stay flagged valid==
    // original detection status only if they still carry foreground.
    let valid_mask = frames
        .axis_iter(Axis(0))
        .zip(valid_mask)
        .map(|(f, was_valid)| was_valid && f.iter().any(|&p| p != 0))
        .collect();
    let seq = SilhouetteSequence {
        frames,
        valid_mask,
        subject_id: src.subject_id.clone(),
        sequence_id: src.sequence_id.clone(),
        fps: src.fps,
    };
    seq.validate()?;
    Ok(seq)
}

/// Convenience: an all-ones 64x64 sequence for tests and calibration.
pub fn ones_sequence(t: usize) -> SilhouetteSequence {
    let frames = Array3::<u8>::ones((t, 64, 64));
    SilhouetteSequence::new(frames, "s", "ones", 30.0).unwrap()
}
