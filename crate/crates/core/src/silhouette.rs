//! Canonical silhouette-video types and the preprocessing pipeline shared by
//! every other module: centering, resizing and re-binarization of binary
//! silhouette frames, plus clip sampling for training.
//!
//! All frames are stored as `u8` arrays with values in {0, 1}. Preprocessed
//! frames are 64x64; frames in which no subject was detected are kept as
//! all-zero frames flagged invalid in `valid_mask` so temporal indexing is
//! preserved.

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::derive_rng;

/// Side length of preprocessed frames.
pub const FRAME_SIZE: usize = 64;

/// Re-binarization threshold on 8-bit values: a pixel is foreground iff >= 128.
pub const BINARY_THRESHOLD: u8 = 128;

/// Subject label for sequences without identity information.
pub const UNLABELED: &str = "unlabeled";

/// A binary silhouette video: `T` frames of `H x W` values in {0, 1}.
#[derive(Debug, Clone, PartialEq)]
pub struct SilhouetteSequence {
    /// (T, H, W), every value 0 or 1.
    pub frames: Array3<u8>,
    /// One flag per frame; `false` marks an empty frame (no subject detected).
    pub valid_mask: Vec<bool>,
    pub subject_id: String,
    pub sequence_id: String,
    /// Frames per second. Metadata only; no operation depends on it.
    pub fps: f32,
}

impl SilhouetteSequence {
    pub fn new(
        frames: Array3<u8>,
        subject_id: impl Into<String>,
        sequence_id: impl Into<String>,
        fps: f32,
    ) -> Result<Self> {
        let valid_mask = frames
            .axis_iter(Axis(0))
            .map(|f| f.iter().any(|&p| p != 0))
            .collect();
        let seq = Self {
            frames,
            valid_mask,
            subject_id: subject_id.into(),
            sequence_id: sequence_id.into(),
            fps,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn len(&self) -> usize {
        self.frames.len_of(Axis(0))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.frames.len_of(Axis(1))
    }

    pub fn width(&self) -> usize {
        self.frames.len_of(Axis(2))
    }

    pub fn frame(&self, t: usize) -> ArrayView2<'_, u8> {
        self.frames.index_axis(Axis(0), t)
    }

    /// Checks the type invariants: binarity, T >= 1, mask length, and that
    /// invalid frames are all-zero.
    pub fn validate(&self) -> Result<()> {
        if self.len() == 0 {
            return Err(Error::Validation(format!(
                "sequence {}: T must be >= 1",
                self.sequence_id
            )));
        }
        if self.valid_mask.len() != self.len() {
            return Err(Error::Validation(format!(
                "sequence {}: valid_mask length {} != T {}",
                self.sequence_id,
                self.valid_mask.len(),
                self.len()
            )));
        }
        for (t, frame) in self.frames.axis_iter(Axis(0)).enumerate() {
            let mut any = false;
            for &p in frame.iter() {
                if p > 1 {
                    return Err(Error::Validation(format!(
                        "sequence {}: non-binary value {} in frame {}",
                        self.sequence_id, p, t
                    )));
                }
                any |= p == 1;
            }
            if !self.valid_mask[t] && any {
                return Err(Error::Validation(format!(
                    "sequence {}: frame {} flagged invalid but has foreground",
                    self.sequence_id, t
                )));
            }
        }
        Ok(())
    }

    pub fn valid_frame_count(&self) -> usize {
        self.valid_mask.iter().filter(|&&v| v).count()
    }
}

/// Axis-aligned foreground bounding box inside a source frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl BoundingBox {
    /// Bounding box of the foreground pixels, or `None` for an empty frame.
    pub fn of_foreground(frame: &ArrayView2<'_, u8>) -> Option<Self> {
        let (h, w) = frame.dim();
        let (mut top, mut bottom, mut left, mut right) = (h, 0usize, w, 0usize);
        let mut any = false;
        for ((r, c), &p) in frame.indexed_iter() {
            if p != 0 {
                any = true;
                top = top.min(r);
                bottom = bottom.max(r);
                left = left.min(c);
                right = right.max(c);
            }
        }
        any.then(|| BoundingBox {
            top,
            left,
            height: bottom - top + 1,
            width: right - left + 1,
        })
    }
}

/// Threshold an 8-bit frame to {0, 1}: output pixel is 1 iff input >= 128.
pub fn rebinarize(frame: &ArrayView2<'_, u8>) -> Array2<u8> {
    frame.mapv(|p| u8::from(p >= BINARY_THRESHOLD))
}

/// Threshold a float frame in [0, 255] at the same cut as [`rebinarize`].
pub fn rebinarize_f32(frame: &Array2<f32>) -> Array2<u8> {
    frame.mapv(|p| u8::from(p >= BINARY_THRESHOLD as f32))
}

/// Bilinear resize of a float image (values in [0, 255]), pixel-center aligned
/// so that a scale factor of exactly 1 is the identity.
pub fn resize_bilinear(src: &Array2<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (h, w) = src.dim();
    let mut out = Array2::<f32>::zeros((out_h, out_w));
    let sy = h as f32 / out_h as f32;
    let sx = w as f32 / out_w as f32;
    for r in 0..out_h {
        let fy = ((r as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f32;
        for c in 0..out_w {
            let fx = ((c as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f32;
            let v = src[[y0, x0]] * (1.0 - wy) * (1.0 - wx)
                + src[[y0, x1]] * (1.0 - wy) * wx
                + src[[y1, x0]] * wy * (1.0 - wx)
                + src[[y1, x1]] * wy * wx;
            out[[r, c]] = v;
        }
    }
    out
}

/// Center the subject and resize a raw binary frame to `target`.
///
/// The foreground bounding box is scaled to the full target height (aspect
/// preserved, bilinear interpolation, re-binarized at 128) and placed
/// horizontally centered. Returns the frame and whether it is valid; an
/// all-zero input yields an all-zero output flagged invalid.
pub fn center_and_resize(
    raw_frame: &ArrayView2<'_, u8>,
    target: (usize, usize),
) -> Result<(Array2<u8>, bool)> {
    let (th, tw) = target;
    if let Some(&bad) = raw_frame.iter().find(|&&p| p > 1) {
        return Err(Error::Validation(format!(
            "center_and_resize: non-binary input value {bad}"
        )));
    }
    let Some(bbox) = BoundingBox::of_foreground(raw_frame) else {
        return Ok((Array2::zeros((th, tw)), false));
    };

    let crop = raw_frame
        .slice(ndarray::s![
            bbox.top..bbox.top + bbox.height,
            bbox.left..bbox.left + bbox.width
        ])
        .mapv(|p| p as f32 * 255.0);

    let scale = th as f32 / bbox.height as f32;
    let new_w = ((bbox.width as f32 * scale).round() as usize).max(1);
    let resized = rebinarize_f32(&resize_bilinear(&crop, th, new_w));

    let mut out = Array2::<u8>::zeros((th, tw));
    if new_w <= tw {
        let off = (tw - new_w) / 2;
        out.slice_mut(ndarray::s![.., off..off + new_w])
            .assign(&resized);
    } else {
        // Wider than the frame: keep the horizontally centered crop.
        let off = (new_w - tw) / 2;
        out.assign(&resized.slice(ndarray::s![.., off..off + tw]));
    }
    let valid = out.iter().any(|&p| p != 0);
    Ok((out, valid))
}

/// Apply [`center_and_resize`] to every frame of a raw sequence.
pub fn preprocess_sequence(
    raw_frames: &Array3<u8>,
    subject_id: impl Into<String>,
    sequence_id: impl Into<String>,
    fps: f32,
) -> Result<SilhouetteSequence> {
    let t = raw_frames.len_of(Axis(0));
    let mut frames = Array3::<u8>::zeros((t, FRAME_SIZE, FRAME_SIZE));
    let mut valid_mask = Vec::with_capacity(t);
    for (i, raw) in raw_frames.axis_iter(Axis(0)).enumerate() {
        let (frame, valid) = center_and_resize(&raw, (FRAME_SIZE, FRAME_SIZE))?;
        frames.index_axis_mut(Axis(0), i).assign(&frame);
        valid_mask.push(valid);
    }
    let seq = SilhouetteSequence {
        frames,
        valid_mask,
        subject_id: subject_id.into(),
        sequence_id: sequence_id.into(),
        fps,
    };
    seq.validate()?;
    Ok(seq)
}

/// How many frames a sampled training clip should have.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum ClipPolicy {
    Fixed { n: usize },
    /// Length drawn uniformly from `lo..=hi` per clip.
    Uniform { lo: usize, hi: usize },
}

impl ClipPolicy {
    fn draw_len(&self, rng: &mut impl Rng) -> usize {
        match *self {
            ClipPolicy::Fixed { n } => n,
            ClipPolicy::Uniform { lo, hi } => rng.random_range(lo..=hi),
        }
    }
}

/// Sample a contiguous clip of frames from `seq`.
///
/// If the sequence is shorter than the requested length the window wraps
/// cyclically, which preserves gait periodicity better than zero padding.
/// Deterministic under a fixed seed.
pub fn sample_clip(seq: &SilhouetteSequence, policy: ClipPolicy, rng_seed: u64) -> SilhouetteSequence {
    let mut rng = derive_rng(rng_seed, &["sample_clip", &seq.sequence_id]);
    let t = seq.len();
    let n = policy.draw_len(&mut rng).max(1);
    let start = if t >= n {
        rng.random_range(0..=t - n)
    } else {
        rng.random_range(0..t)
    };
    let mut frames = Array3::<u8>::zeros((n, seq.height(), seq.width()));
    let mut valid_mask = Vec::with_capacity(n);
    for i in 0..n {
        let src = (start + i) % t;
        frames
            .index_axis_mut(Axis(0), i)
            .assign(&seq.frames.index_axis(Axis(0), src));
        valid_mask.push(seq.valid_mask[src]);
    }
    SilhouetteSequence {
        frames,
        valid_mask,
        subject_id: seq.subject_id.clone(),
        sequence_id: seq.sequence_id.clone(),
        fps: seq.fps,
    }
}
