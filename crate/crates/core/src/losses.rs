//! Metric-learning losses with analytic gradients.
//!
//! All loss cores run in f64 (inputs are cast once) so finite-difference
//! gradient checks hold to tight tolerances; training loops convert the
//! returned gradients back to f32.

use ndarray::{Array1, Array2, Axis};

/// Euclidean distance between rows `a` of `x` and `b` of `y`.
fn row_dist(x: &Array2<f64>, a: usize, y: &Array2<f64>, b: usize) -> f64 {
    x.row(a)
        .iter()
        .zip(y.row(b).iter())
        .map(|(p, q)| (p - q) * (p - q))
        .sum::<f64>()
        .sqrt()
}

/// Accumulate d/d(row a of x) of ||x_a - y_b|| scaled by `w` into `out`.
fn add_dist_grad(
    out: &mut Array2<f64>,
    a: usize,
    x: &Array2<f64>,
    y: &Array2<f64>,
    b: usize,
    dist: f64,
    w: f64,
) {
    if dist < 1e-12 {
        return;
    }
    let scale = w / dist;
    let xa = x.row(a).to_owned();
    let yb = y.row(b).to_owned();
    let mut row = out.row_mut(a);
    for (o, (p, q)) in row.iter_mut().zip(xa.iter().zip(yb.iter())) {
        *o += scale * (p - q);
    }
}

/// Batch-all triplet loss: mean over every valid (anchor, positive, negative)
/// triplet of `[d_ap - d_an + margin]_+`. Identities with a single embedding
/// contribute no anchor-positive pairs and are skipped.
///
/// Returns the loss and dL/d(embeddings). Inputs are f32 (pipeline dtype);
/// computation is f64.
pub fn triplet_loss(
    embeddings: &Array2<f32>,
    labels: &[usize],
    margin: f64,
) -> (f64, Array2<f32>) {
    let x = embeddings.mapv(|v| v as f64);
    let (loss, grad) = triplet_loss_f64(&x, labels, margin);
    (loss, grad.mapv(|v| v as f32))
}

/// f64 core of [`triplet_loss`], exposed for oracle and gradient tests.
pub fn triplet_loss_f64(x: &Array2<f64>, labels: &[usize], margin: f64) -> (f64, Array2<f64>) {
    let n = x.len_of(Axis(0));
    assert_eq!(labels.len(), n);
    let mut dist = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let d = row_dist(x, i, x, j);
            dist[[i, j]] = d;
            dist[[j, i]] = d;
        }
    }
    let mut total = 0.0f64;
    let mut count = 0usize;
    let mut grad = Array2::<f64>::zeros(x.raw_dim());
    // Count valid triplets first; the mean scale enters every gradient term.
    for a in 0..n {
        let pos = (0..n).filter(|&p| p != a && labels[p] == labels[a]).count();
        let neg = (0..n).filter(|&q| labels[q] != labels[a]).count();
        count += pos * neg;
    }
    if count == 0 {
        return (0.0, grad);
    }
    let scale = 1.0 / count as f64;
    for a in 0..n {
        for p in 0..n {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            for q in 0..n {
                if labels[q] == labels[a] {
                    continue;
                }
                let h = dist[[a, p]] - dist[[a, q]] + margin;
                if h <= 0.0 {
                    continue;
                }
                total += h;
                // d_ap term.
                add_dist_grad(&mut grad, a, x, x, p, dist[[a, p]], scale);
                add_dist_grad(&mut grad, p, x, x, a, dist[[a, p]], scale);
                // -d_an term.
                add_dist_grad(&mut grad, a, x, x, q, dist[[a, q]], -scale);
                add_dist_grad(&mut grad, q, x, x, a, dist[[a, q]], -scale);
            }
        }
    }
    (total * scale, grad)
}

/// Softmax cross-entropy over a batch of logits. Returns mean loss and
/// dL/d(logits).
pub fn cross_entropy(logits: &Array2<f32>, targets: &[usize]) -> (f64, Array2<f32>) {
    let n = logits.len_of(Axis(0));
    let c = logits.len_of(Axis(1));
    assert_eq!(targets.len(), n);
    let mut loss = 0.0f64;
    let mut grad = Array2::<f32>::zeros(logits.raw_dim());
    for i in 0..n {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f32::MIN, f32::max) as f64;
        let exps: Vec<f64> = row.iter().map(|&v| ((v as f64) - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss -= (exps[targets[i]] / z).ln();
        for j in 0..c {
            let softmax = exps[j] / z;
            let indicator = if j == targets[i] { 1.0 } else { 0.0 };
            grad[[i, j]] = ((softmax - indicator) / n as f64) as f32;
        }
    }
    (loss / n as f64, grad)
}

/// Mean squared error over scalars. Returns loss and dL/d(pred).
pub fn mse(pred: &Array1<f32>, target: &Array1<f32>) -> (f64, Array1<f32>) {
    let n = pred.len();
    assert_eq!(target.len(), n);
    let mut loss = 0.0f64;
    let mut grad = Array1::<f32>::zeros(n);
    for i in 0..n {
        let d = pred[i] as f64 - target[i] as f64;
        loss += d * d;
        grad[i] = (2.0 * d / n as f64) as f32;
    }
    (loss / n as f64, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;
    use rand::Rng;

    fn random_batch(p: usize, k: usize, d: usize, seed: u64) -> (Array2<f64>, Vec<usize>) {
        let mut rng = derive_rng(seed, &["triplet_batch"]);
        let n = p * k;
        let x = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
        let labels: Vec<usize> = (0..n).map(|i| i / k).collect();
        (x, labels)
    }

    /// Independent oracle: enumerate all triplets with naive loops and scalar
    /// arithmetic.
    fn triplet_oracle(x: &Array2<f64>, labels: &[usize], margin: f64) -> f64 {
        let n = x.len_of(Axis(0));
        let d = |a: usize, b: usize| -> f64 {
            (0..x.len_of(Axis(1)))
                .map(|j| (x[[a, j]] - x[[b, j]]).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        let mut sum = 0.0;
        let mut count = 0usize;
        for a in 0..n {
            for p in 0..n {
                if p == a || labels[p] != labels[a] {
                    continue;
                }
                for q in 0..n {
                    if labels[q] == labels[a] {
                        continue;
                    }
                    count += 1;
                    sum += (d(a, p) - d(a, q) + margin).max(0.0);
                }
            }
        }
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    }

    #[test]
    fn identical_embeddings_give_margin() {
        let x = Array2::<f32>::ones((6, 4));
        let labels = vec![0, 0, 1, 1, 2, 2];
        let (loss, _) = triplet_loss(&x, &labels, 0.2);
        assert!((loss - 0.2).abs() < 1e-9);
    }

    #[test]
    fn separated_identities_give_zero() {
        let mut x = Array2::<f32>::zeros((4, 3));
        x.row_mut(2).fill(10.0);
        x.row_mut(3).fill(10.0);
        let labels = vec![0, 0, 1, 1];
        let (loss, grad) = triplet_loss(&x, &labels, 0.2);
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn matches_bruteforce_oracle_on_random_batches() {
        for seed in 0..50u64 {
            let mut rng = derive_rng(seed, &["shape"]);
            let p = rng.random_range(2..=4usize);
            let k = rng.random_range(2..=3usize);
            let d = rng.random_range(2..=8usize);
            let (x, labels) = random_batch(p, k, d, seed);
            let (loss, _) = triplet_loss_f64(&x, &labels, 0.3);
            let oracle = triplet_oracle(&x, &labels, 0.3);
            assert!(
                (loss - oracle).abs() < 1e-6,
                "seed {seed}: {loss} vs oracle {oracle}"
            );
        }
    }

    #[test]
    fn gradient_matches_finite_differences_away_from_kinks() {
        let margin = 0.3;
        let mut checked = 0;
        for seed in 0..20u64 {
            let (x, labels) = random_batch(3, 2, 5, seed + 100);
            // Skip batches with a triplet near the hinge kink.
            let near_kink = {
                let n = x.len_of(Axis(0));
                let mut near = false;
                for a in 0..n {
                    for p in 0..n {
                        for q in 0..n {
                            if p != a && labels[p] == labels[a] && labels[q] != labels[a] {
                                let h = row_dist(&x, a, &x, p) - row_dist(&x, a, &x, q) + margin;
                                if h.abs() < 1e-3 {
                                    near = true;
                                }
                            }
                        }
                    }
                }
                near
            };
            if near_kink {
                continue;
            }
            let (_, grad) = triplet_loss_f64(&x, &labels, margin);
            let eps = 1e-4;
            for i in [0usize, 2, 5] {
                for j in [0usize, 3] {
                    let mut xp = x.clone();
                    xp[[i, j]] += eps;
                    let (lp, _) = triplet_loss_f64(&xp, &labels, margin);
                    let mut xm = x.clone();
                    xm[[i, j]] -= eps;
                    let (lm, _) = triplet_loss_f64(&xm, &labels, margin);
                    let fd = (lp - lm) / (2.0 * eps);
                    let an = grad[[i, j]];
                    let denom = an.abs().max(fd.abs()).max(1e-8);
                    assert!(
                        (fd - an).abs() / denom < 1e-3,
                        "seed {seed} ({i},{j}): fd {fd} vs {an}"
                    );
                    checked += 1;
                }
            }
        }
        assert!(checked > 50, "too few kink-free batches checked");
    }

    #[test]
    fn cross_entropy_gradient_check() {
        let mut rng = derive_rng(3, &["ce"]);
        let logits = Array2::from_shape_fn((4, 3), |_| rng.random_range(-1.0f32..1.0));
        let targets = vec![0usize, 2, 1, 2];
        let (_, grad) = cross_entropy(&logits, &targets);
        let eps = 1e-3f32;
        for i in 0..4 {
            for j in 0..3 {
                let mut lp = logits.clone();
                lp[[i, j]] += eps;
                let mut lm = logits.clone();
                lm[[i, j]] -= eps;
                let fd = (cross_entropy(&lp, &targets).0 - cross_entropy(&lm, &targets).0)
                    / (2.0 * eps as f64);
                assert!((fd - grad[[i, j]] as f64).abs() < 1e-4);
            }
        }
    }
}
