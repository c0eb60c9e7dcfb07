//! Signal-level descriptors of silhouette sequences: foreground column
//! centroid, mean silhouette width, and periodogram-based gait frequency
//! recovery. Used to characterize the toy benchmark and for embedding-free
//! sanity checks; none of this feeds back into model training.

use crate::silhouette::SilhouetteSequence;

/// Horizontal foreground centroid per valid frame, relative to the frame
/// midline (positive = right of center). Invalid frames are skipped.
pub fn column_centroid_series(seq: &SilhouetteSequence) -> Vec<f64> {
    let w = seq.width();
    let mid = (w as f64 - 1.0) / 2.0;
    let mut series = Vec::with_capacity(seq.len());
    for (t, frame) in seq.frames.outer_iter().enumerate() {
        if !seq.valid_mask[t] {
            continue;
        }
        let (mut sum, mut n) = (0.0f64, 0.0f64);
        for ((_, c), &p) in frame.indexed_iter() {
            if p != 0 {
                sum += c as f64;
                n += 1.0;
            }
        }
        if n > 0.0 {
            series.push(sum / n - mid);
        }
    }
    series
}

/// Mean foreground bounding-box width over valid frames, in pixels.
pub fn mean_foreground_width(seq: &SilhouetteSequence) -> f64 {
    let mut total = 0.0f64;
    let mut n = 0usize;
    for (t, frame) in seq.frames.outer_iter().enumerate() {
        if !seq.valid_mask[t] {
            continue;
        }
        if let Some(bbox) = crate::silhouette::BoundingBox::of_foreground(&frame) {
            total += bbox.width as f64;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

/// Dominant frequency of a real series in cycles/frame, found by scanning a
/// dense frequency grid of the Hann-windowed DTFT power in `[f_lo, f_hi]`.
pub fn periodogram_peak(series: &[f64], f_lo: f64, f_hi: f64) -> f64 {
    let n = series.len();
    if n < 4 {
        return 0.0;
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let windowed: Vec<f64> = series
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let hann = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos();
            (x - mean) * hann
        })
        .collect();
    let step = 2.5e-4;
    let mut best_f = f_lo;
    let mut best_p = f64::MIN;
    let mut f = f_lo;
    while f <= f_hi {
        let omega = 2.0 * std::f64::consts::PI * f;
        let (mut re, mut im) = (0.0f64, 0.0f64);
        for (i, &x) in windowed.iter().enumerate() {
            let phi = omega * i as f64;
            re += x * phi.cos();
            im -= x * phi.sin();
        }
        let p = re * re + im * im;
        if p > best_p {
            best_p = p;
            best_f = f;
        }
        f += step;
    }
    best_f
}

/// Recover the gait frequency of a preprocessed sequence from its column
/// centroid oscillation.
pub fn recover_gait_frequency(seq: &SilhouetteSequence) -> f64 {
    let series = column_centroid_series(seq);
    periodogram_peak(&series, 0.03, 0.3)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn periodogram_finds_a_pure_tone() {
        let f_true = 0.087;
        let series: Vec<f64> = (0..60)
            .map(|i| (2.0 * std::f64::consts::PI * f_true * i as f64).sin())
            .collect();
        let f = periodogram_peak(&series, 0.03, 0.3);
        assert!((f - f_true).abs() / f_true < 0.03, "recovered {f}");
    }
}
