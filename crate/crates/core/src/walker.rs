//! Procedural "walker" benchmark: articulated stick figures rendered as
//! filled binary silhouettes, with identity carried by motion and
//! proportions. Gait frequency, limb lengths, torso width and stride
//! amplitude are fixed per identity; phase, viewpoint scale and motion noise
//! vary per sequence.
//!
//! The identity signal is deliberately distributed across the body: leg
//! amplitude and leg proportions carry more information than arm swing, so
//! bottom occlusions remove more signal than top occlusions.

use ndarray::{Array2, Array3};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_rng, derive_seed};
use crate::silhouette::{preprocess_sequence, SilhouetteSequence};

/// Render canvas side before preprocessing down to 64x64.
const CANVAS: usize = 96;

/// Identity-level walker parameters. Two sequences of the same identity share
/// all of these except `phase`; noise realization and viewpoint scale are
/// drawn per sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WalkerParams {
    pub identity_id: String,
    /// [left arm, right arm, left leg, right leg] length multipliers.
    pub limb_length_ratios: [f64; 4],
    /// Torso half-width as a fraction of body height.
    pub torso_width: f64,
    /// Cycles per frame.
    pub gait_frequency: f64,
    /// Radians; per-sequence.
    pub phase: f64,
    /// Peak leg swing angle, radians.
    pub stride_amplitude: f64,
    /// Per-frame joint angle jitter bound, radians.
    pub noise_level: f64,
}

impl WalkerParams {
    pub fn validate(&self) -> Result<()> {
        if self.limb_length_ratios.iter().any(|&r| r <= 0.0) {
            return Err(Error::Validation("limb ratios must be positive".into()));
        }
        if !(0.02..0.2).contains(&self.gait_frequency) {
            return Err(Error::Validation(format!(
                "gait frequency {} outside (0.02, 0.2)",
                self.gait_frequency
            )));
        }
        if self.torso_width <= 0.0 || self.stride_amplitude <= 0.0 {
            return Err(Error::Validation("proportions must be positive".into()));
        }
        Ok(())
    }

    /// Deterministic identity parameters for identity index `idx`. Identities
    /// are laid out on a frequency x body-width grid (10 frequency levels,
    /// width levels cycling every 10 identities) so that the population is
    /// separable by (recovered frequency, mean silhouette width).
    pub fn for_identity(idx: usize, dataset_seed: u64) -> Self {
        let mut rng = derive_rng(dataset_seed, &["walker_params", &idx.to_string()]);
        let freq_level = idx % 10;
        let width_level = (idx / 10) % 5;
        let gait_frequency = 0.068 * 1.105f64.powi(freq_level as i32);
        let width_factor = 0.70 + 0.15 * width_level as f64;
        // Systematic left/right asymmetry keeps the fundamental frequency
        // visible in the horizontal mass centroid after per-frame centering.
        let jitter = |rng: &mut rand_chacha::ChaCha8Rng, lo: f64, hi: f64| rng.random_range(lo..hi);
        WalkerParams {
            identity_id: format!("id{idx:04}"),
            limb_length_ratios: [
                1.14 * (1.0 + jitter(&mut rng, -0.05, 0.05)),
                0.80 * (1.0 + jitter(&mut rng, -0.05, 0.05)),
                1.05 * (1.0 + jitter(&mut rng, -0.04, 0.04)),
                0.95 * (1.0 + jitter(&mut rng, -0.04, 0.04)),
            ],
            torso_width: 0.085 * width_factor,
            gait_frequency,
            phase: 0.0,
            stride_amplitude: (0.30 + 0.05 * width_level as f64)
                * (1.0 + jitter(&mut rng, -0.05, 0.05)),
            noise_level: 0.02,
        }
    }
}

fn fill_capsule(canvas: &mut Array2<u8>, p0: (f64, f64), p1: (f64, f64), radius: f64) {
    let (x0, y0) = p0;
    let (x1, y1) = p1;
    let min_x = (x0.min(x1) - radius).floor().max(0.0) as usize;
    let max_x = (x0.max(x1) + radius).ceil().min((CANVAS - 1) as f64) as usize;
    let min_y = (y0.min(y1) - radius).floor().max(0.0) as usize;
    let max_y = (y0.max(y1) + radius).ceil().min((CANVAS - 1) as f64) as usize;
    let dx = x1 - x0;
    let dy = y1 - y0;
    let len2 = dx * dx + dy * dy;
    let r2 = radius * radius;
    for y in min_y..=max_y {
        for x in min_x..=max_x {
            let (px, py) = (x as f64, y as f64);
            let t = if len2 > 0.0 {
                (((px - x0) * dx + (py - y0) * dy) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (cx, cy) = (x0 + t * dx, y0 + t * dy);
            let d2 = (px - cx) * (px - cx) + (py - cy) * (py - cy);
            if d2 <= r2 {
                canvas[[y, x]] = 1;
            }
        }
    }
}

fn fill_disc(canvas: &mut Array2<u8>, center: (f64, f64), radius: f64) {
    fill_capsule(canvas, center, center, radius);
}

/// Render one raw frame of a walker at canvas resolution.
fn render_frame(
    params: &WalkerParams,
    t: usize,
    scale: f64,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Array2<u8> {
    let mut canvas = Array2::<u8>::zeros((CANVAS, CANVAS));
    let h = 78.0 * scale;
    let cx = CANVAS as f64 / 2.0;
    let y_top = (CANVAS as f64 - h) / 2.0;
    let omega = 2.0 * std::f64::consts::PI * params.gait_frequency;
    let swing = (omega * t as f64 + params.phase).sin();
    // Torso lean relative to the hip. The hip x stays fixed, so the lean is
    // differential motion that survives per-frame bounding-box centering and
    // keeps the fundamental frequency visible in the mass centroid.
    let lean = 0.06 * h * swing;

    let mut jitter = |bound: f64| rng.random_range(-bound..=bound);

    let y_shoulder = y_top + 0.18 * h;
    let y_hip = y_top + 0.52 * h;
    let hip = (cx, y_hip);
    let shoulder = (cx + lean, y_shoulder);
    let head_c = (cx + 1.35 * lean, y_top + 0.08 * h);

    fill_disc(&mut canvas, head_c, 0.072 * h);
    fill_capsule(&mut canvas, shoulder, hip, params.torso_width * h);

    let leg_amp = params.stride_amplitude;
    let arm_amp = 0.6 * leg_amp;
    let leg_len = 0.46 * h;
    let arm_len = 0.34 * h;
    let thick_scale = 0.7 + 0.3 * params.torso_width / 0.085;
    let leg_thick = 0.040 * h * thick_scale;
    let arm_thick = 0.028 * h * thick_scale;
    let noise = params.noise_level;

    // Legs swing in antiphase; arms oppose their same-side leg. Left/right
    // thickness asymmetry adds a second fundamental-frequency mass signal.
    let limbs = [
        // (origin, amplitude sign, amp, length, thickness, ratio index)
        (shoulder, -1.0, arm_amp, arm_len, arm_thick * 1.1, 0usize),
        (shoulder, 1.0, arm_amp, arm_len, arm_thick * 0.9, 1usize),
        (hip, 1.0, leg_amp, leg_len, leg_thick * 1.12, 2usize),
        (hip, -1.0, leg_amp, leg_len, leg_thick * 0.88, 3usize),
    ];
    for (origin, sign, amp, len, thick, ratio_idx) in limbs {
        let theta = sign * amp * swing + jitter(noise);
        let len = len * params.limb_length_ratios[ratio_idx];
        let end = (origin.0 + len * theta.sin(), origin.1 + len * theta.cos());
        fill_capsule(&mut canvas, origin, end, thick);
    }
    canvas
}

/// Render a full preprocessed sequence for `params`, with per-sequence phase,
/// scale and noise realization derived from `sequence_seed`.
pub fn render_sequence(
    params: &WalkerParams,
    sequence_id: &str,
    n_frames: usize,
    sequence_seed: u64,
) -> Result<SilhouetteSequence> {
    params.validate()?;
    let mut rng = derive_rng(sequence_seed, &["walker_sequence"]);
    let phase = rng.random_range(0.0..(2.0 * std::f64::consts::PI));
    let scale = rng.random_range(0.92..1.08);
    let seq_params = WalkerParams {
        phase,
        ..params.clone()
    };
    let mut raw = Array3::<u8>::zeros((n_frames, CANVAS, CANVAS));
    for t in 0..n_frames {
        raw.index_axis_mut(ndarray::Axis(0), t)
            .assign(&render_frame(&seq_params, t, scale, &mut rng));
    }
    preprocess_sequence(&raw, params.identity_id.clone(), sequence_id, 30.0)
}

/// Generate the toy benchmark in memory: `n_identities` walkers with
/// `seqs_per_identity` sequences each. Deterministic under `rng_seed`;
/// generation parallelizes over sequences with per-sequence derived seeds so
/// the result is identical regardless of thread count.
pub fn generate_toy_sequences(
    n_identities: usize,
    seqs_per_identity: usize,
    frames_per_seq: usize,
    rng_seed: u64,
) -> Result<Vec<SilhouetteSequence>> {
    if n_identities < 2 || seqs_per_identity < 2 {
        return Err(Error::Validation(
            "toy dataset requires >= 2 identities and >= 2 sequences per identity".into(),
        ));
    }
    if frames_per_seq == 0 {
        return Err(Error::Validation("frames_per_seq must be >= 1".into()));
    }
    let jobs: Vec<(usize, usize)> = (0..n_identities)
        .flat_map(|i| (0..seqs_per_identity).map(move |s| (i, s)))
        .collect();
    jobs.par_iter()
        .map(|&(i, s)| {
            let params = WalkerParams::for_identity(i, rng_seed);
            let seq_id = format!("{}_s{s:02}", params.identity_id);
            let seed = derive_seed(rng_seed, &["toy_seq", &seq_id]);
            render_sequence(&params, &seq_id, frames_per_seq, seed)
        })
        .collect()
}

/// Generate the toy benchmark and write it to `out` in the silhouette
/// directory format (one directory of frame PNGs + metadata per sequence).
pub fn generate_toy_dataset(
    n_identities: usize,
    seqs_per_identity: usize,
    frames_per_seq: usize,
    rng_seed: u64,
    out: &std::path::Path,
) -> Result<usize> {
    let seqs = generate_toy_sequences(n_identities, seqs_per_identity, frames_per_seq, rng_seed)?;
    for seq in &seqs {
        crate::io::write_sequence_dir(out, seq)?;
    }
    Ok(seqs.len())
}

#[doc(hidden)]
pub mod test_support {
    use super::*;

    /// A small deterministic walker clip for unit tests.
    pub fn sample_walker_sequence(n_frames: usize) -> SilhouetteSequence {
        let params = WalkerParams::for_identity(3, 99);
        render_sequence(&params, "test_seq", n_frames, 1234).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::{mean_foreground_width, recover_gait_frequency};

    #[test]
    fn shape_contract_and_binarity() {
        let seqs = generate_toy_sequences(4, 2, 20, 5).unwrap();
        assert_eq!(seqs.len(), 8);
        for seq in &seqs {
            assert_eq!(seq.height(), 64);
            assert_eq!(seq.width(), 64);
            assert_eq!(seq.len(), 20);
            seq.validate().unwrap();
            assert!(seq.valid_frame_count() == 20, "walker frames are non-empty");
        }
    }

    #[test]
    fn regeneration_is_bit_identical() {
        let a = generate_toy_sequences(3, 2, 12, 77).unwrap();
        let b = generate_toy_sequences(3, 2, 12, 77).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.frames, y.frames);
            assert_eq!(x.sequence_id, y.sequence_id);
        }
        let c = generate_toy_sequences(3, 2, 12, 78).unwrap();
        assert!(a.iter().zip(&c).any(|(x, y)| x.frames != y.frames));
    }

    #[test]
    fn same_identity_recovers_same_frequency() {
        // Identities 0 and 3 sit on different frequency levels.
        let seqs = generate_toy_sequences(4, 2, 60, 11).unwrap();
        let f = |seq: &SilhouetteSequence| recover_gait_frequency(seq);
        let by_id = |id: &str| -> Vec<f64> {
            seqs.iter()
                .filter(|s| s.subject_id == id)
                .map(f)
                .collect()
        };
        let f0 = by_id("id0000");
        let f3 = by_id("id0003");
        let rel = (f0[0] - f0[1]).abs() / f0[0].max(f0[1]);
        assert!(rel < 0.05, "same-identity recovered {f0:?}");
        let rel3 = (f3[0] - f3[1]).abs() / f3[0].max(f3[1]);
        assert!(rel3 < 0.05, "same-identity recovered {f3:?}");
        let cross = (f0[0] - f3[0]).abs() / f0[0].max(f3[0]);
        assert!(cross > 0.05, "distinct identities {f0:?} vs {f3:?}");
    }

    #[test]
    fn recovered_frequency_tracks_ground_truth() {
        let seqs = generate_toy_sequences(10, 2, 60, 21).unwrap();
        for seq in &seqs {
            let idx: usize = seq.subject_id[2..].parse().unwrap();
            let truth = WalkerParams::for_identity(idx, 21).gait_frequency;
            let got = recover_gait_frequency(seq);
            assert!(
                (got - truth).abs() / truth < 0.05,
                "{}: true {truth:.4} recovered {got:.4}",
                seq.sequence_id
            );
        }
    }

    #[test]
    fn nearest_centroid_separability_exceeds_90_percent() {
        let n_ids = 50;
        let seqs = generate_toy_sequences(n_ids, 4, 60, 7).unwrap();
        let feats: Vec<(usize, [f64; 2])> = seqs
            .iter()
            .map(|s| {
                let idx: usize = s.subject_id[2..].parse().unwrap();
                (idx, [recover_gait_frequency(s), mean_foreground_width(s)])
            })
            .collect();
        // z-score both features.
        let mut mean = [0.0f64; 2];
        let mut var = [0.0f64; 2];
        for (_, f) in &feats {
            for d in 0..2 {
                mean[d] += f[d];
            }
        }
        for d in 0..2 {
            mean[d] /= feats.len() as f64;
        }
        for (_, f) in &feats {
            for d in 0..2 {
                var[d] += (f[d] - mean[d]).powi(2);
            }
        }
        for d in 0..2 {
            var[d] = (var[d] / feats.len() as f64).sqrt().max(1e-9);
        }
        let z: Vec<(usize, [f64; 2])> = feats
            .iter()
            .map(|(i, f)| (*i, [(f[0] - mean[0]) / var[0], (f[1] - mean[1]) / var[1]]))
            .collect();
        let mut centroids = vec![[0.0f64; 2]; n_ids];
        let mut counts = vec![0usize; n_ids];
        for (i, f) in &z {
            centroids[*i][0] += f[0];
            centroids[*i][1] += f[1];
            counts[*i] += 1;
        }
        for (c, n) in centroids.iter_mut().zip(&counts) {
            c[0] /= *n as f64;
            c[1] /= *n as f64;
        }
        let mut correct = 0usize;
        for (i, f) in &z {
            let best = centroids
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| {
                    let da = (a[0] - f[0]).powi(2) + (a[1] - f[1]).powi(2);
                    let db = (b[0] - f[0]).powi(2) + (b[1] - f[1]).powi(2);
                    da.partial_cmp(&db).unwrap()
                })
                .map(|(j, _)| j)
                .unwrap();
            if best == *i {
                correct += 1;
            }
        }
        let acc = correct as f64 / z.len() as f64;
        assert!(acc > 0.90, "nearest-centroid accuracy {acc}");
    }
}

