//! Minimal CPU neural-network plumbing: conv/linear/pool layers with manual
//! backprop, parameter visitation for optimizers and checkpoints, and SGD /
//! Adam. Forward passes are pure (`&self`); gradients are returned in
//! [`GradStore`] buffers aligned with each network's parameter order, which
//! makes batch-parallel training deterministic (per-sample gradients are
//! reduced in a fixed order).

use ndarray::{Array1, Array2, Array3, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Parameter visitation in a stable order. The order defines the layout of
/// [`GradStore`] buffers and the tensor order in checkpoints.
pub trait Parametric {
    fn visit(&self, v: &mut dyn FnMut(&str, &[usize], &[f32]));
    fn visit_mut(&mut self, v: &mut dyn FnMut(&str, &[usize], &mut [f32]));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, data| n += data.len());
        n
    }

    /// SHA-256 over all parameter bytes, for freezing checks.
    fn param_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        self.visit(&mut |_, _, data| {
            for v in data {
                hasher.update(v.to_le_bytes());
            }
        });
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Flat gradient buffers, one per parameter tensor, in visitation order.
#[derive(Debug, Clone)]
pub struct GradStore {
    bufs: Vec<Vec<f32>>,
}

impl GradStore {
    pub fn zeros_like(net: &dyn Parametric) -> Self {
        let mut bufs = Vec::new();
        net.visit(&mut |_, _, data| bufs.push(vec![0.0f32; data.len()]));
        GradStore { bufs }
    }

    pub fn buf(&mut self, idx: usize) -> &mut [f32] {
        &mut self.bufs[idx]
    }

    pub fn bufs(&self) -> &[Vec<f32>] {
        &self.bufs
    }

    pub fn bufs_mut(&mut self) -> &mut [Vec<f32>] {
        &mut self.bufs
    }

    pub fn add(&mut self, other: &GradStore) {
        for (a, b) in self.bufs.iter_mut().zip(&other.bufs) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, s: f32) {
        for buf in &mut self.bufs {
            for x in buf.iter_mut() {
                *x *= s;
            }
        }
    }

    /// Sum a list of stores in order (deterministic reduction).
    pub fn sum(stores: Vec<GradStore>) -> Option<GradStore> {
        let mut it = stores.into_iter();
        let mut acc = it.next()?;
        for s in it {
            acc.add(&s);
        }
        Some(acc)
    }

    pub fn l2_norm(&self) -> f32 {
        self.bufs
            .iter()
            .flat_map(|b| b.iter())
            .map(|x| x * x)
            .sum::<f32>()
            .sqrt()
    }
}

/// Normal sample via Box-Muller (keeps the RNG dependency surface small).
pub fn normal(rng: &mut ChaCha8Rng, std: f32) -> f32 {
    let u1: f32 = rng.random_range(f32::EPSILON..1.0);
    let u2: f32 = rng.random_range(0.0..1.0);
    std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f32::consts::PI * u2).cos()
}

fn he_init(rng: &mut ChaCha8Rng, fan_in: usize, n: usize) -> Vec<f32> {
    let std = (2.0 / fan_in as f32).sqrt();
    (0..n).map(|_| normal(rng, std)).collect()
}

/// 3x3 convolution, stride 1, pad 1, on (C, H, W) tensors.
#[derive(Debug, Clone)]
pub struct Conv2d {
    /// (C_out, C_in * 9)
    pub w: Array2<f32>,
    pub b: Array1<f32>,
    pub c_in: usize,
    pub c_out: usize,
}

impl Conv2d {
    pub fn new(c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = c_in * 9;
        Conv2d {
            w: Array2::from_shape_vec((c_out, fan_in), he_init(rng, fan_in, c_out * fan_in))
                .unwrap(),
            b: Array1::zeros(c_out),
            c_in,
            c_out,
        }
    }

    fn im2col(&self, x: &Array3<f32>) -> Array2<f32> {
        let (c_in, h, w) = x.dim();
        debug_assert_eq!(c_in, self.c_in);
        let mut col = Array2::<f32>::zeros((h * w, c_in * 9));
        let xs = x.as_slice().expect("standard layout");
        let cs = col.as_slice_mut().expect("standard layout");
        let cols = c_in * 9;
        for c in 0..c_in {
            for ky in 0..3usize {
                for kx in 0..3usize {
                    let o = c * 9 + ky * 3 + kx;
                    for y in 0..h {
                        let iy = y as isize + ky as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let x_lo = if kx == 0 { 1 } else { 0 };
                        let x_hi = if kx == 2 { w - 1 } else { w };
                        let src_base = c * h * w + iy as usize * w;
                        for xi in x_lo..x_hi {
                            cs[(y * w + xi) * cols + o] = xs[src_base + xi + kx - 1];
                        }
                    }
                }
            }
        }
        col
    }

    pub fn forward(&self, x: &Array3<f32>) -> Array3<f32> {
        let (_, h, w) = x.dim();
        let col = self.im2col(x);
        // (H*W, C_out)
        let y_flat = col.dot(&self.w.t());
        let mut out = Array3::<f32>::zeros((self.c_out, h, w));
        for c in 0..self.c_out {
            let bias = self.b[c];
            let dst = out.index_axis_mut(Axis(0), c);
            let dst = dst.into_slice().expect("standard layout");
            for (i, v) in y_flat.column(c).iter().enumerate() {
                dst[i] = v + bias;
            }
        }
        out
    }

    /// Backward; accumulates weight/bias grads and returns dL/dx.
    pub fn backward(
        &self,
        x: &Array3<f32>,
        dy: &Array3<f32>,
        gw: &mut [f32],
        gb: &mut [f32],
    ) -> Array3<f32> {
        let (c_in, h, w) = x.dim();
        let hw = h * w;
        // dy to (H*W, C_out)
        let mut dy_flat = Array2::<f32>::zeros((hw, self.c_out));
        for c in 0..self.c_out {
            let src = dy.index_axis(Axis(0), c);
            let src = src.to_slice().expect("standard layout");
            for i in 0..hw {
                dy_flat[[i, c]] = src[i];
            }
            gb[c] += src.iter().sum::<f32>();
        }
        let col = self.im2col(x);
        // gw += dy_flat^T . col : (C_out, C_in*9)
        let gw_mat = dy_flat.t().dot(&col);
        for (g, v) in gw.iter_mut().zip(gw_mat.iter()) {
            *g += *v;
        }
        // dcol = dy_flat . w : (H*W, C_in*9)
        let dcol = dy_flat.dot(&self.w);
        // col2im scatter-add
        let mut dx = Array3::<f32>::zeros((c_in, h, w));
        let dxs = dx.as_slice_mut().unwrap();
        let dcs = dcol.as_slice().unwrap();
        let cols = c_in * 9;
        for c in 0..c_in {
            for ky in 0..3usize {
                for kx in 0..3usize {
                    let o = c * 9 + ky * 3 + kx;
                    for y in 0..h {
                        let iy = y as isize + ky as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let x_lo = if kx == 0 { 1 } else { 0 };
                        let x_hi = if kx == 2 { w - 1 } else { w };
                        let dst_base = c * hw + iy as usize * w;
                        for xi in x_lo..x_hi {
                            dxs[dst_base + xi + kx - 1] += dcs[(y * w + xi) * cols + o];
                        }
                    }
                }
            }
        }
        dx
    }
}

pub fn relu(x: &Array3<f32>) -> Array3<f32> {
    x.mapv(|v| v.max(0.0))
}

/// dL/dx given the *output* of relu (y) and dL/dy.
pub fn relu_backward(y: &Array3<f32>, dy: &Array3<f32>) -> Array3<f32> {
    let mut dx = dy.clone();
    for (d, &v) in dx.iter_mut().zip(y.iter()) {
        if v <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

/// 2x2 max pooling with stride 2. Returns output and flat argmax indices
/// (into each channel's H*W plane) for backward.
pub fn maxpool2(x: &Array3<f32>) -> (Array3<f32>, Vec<u32>) {
    let (c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Array3::<f32>::zeros((c, oh, ow));
    let mut arg = vec![0u32; c * oh * ow];
    let xs = x.as_slice().unwrap();
    for ci in 0..c {
        let base = ci * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f32::MIN;
                let mut best_i = 0usize;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let i = (oy * 2 + dy) * w + ox * 2 + dx;
                        let v = xs[base + i];
                        if v > best {
                            best = v;
                            best_i = i;
                        }
                    }
                }
                y[[ci, oy, ox]] = best;
                arg[ci * oh * ow + oy * ow + ox] = best_i as u32;
            }
        }
    }
    (y, arg)
}

pub fn maxpool2_backward(
    dy: &Array3<f32>,
    arg: &[u32],
    in_shape: (usize, usize, usize),
) -> Array3<f32> {
    let (c, h, w) = in_shape;
    let (_, oh, ow) = dy.dim();
    let mut dx = Array3::<f32>::zeros((c, h, w));
    let dxs = dx.as_slice_mut().unwrap();
    let dys = dy.as_slice().unwrap();
    for ci in 0..c {
        let base = ci * h * w;
        for i in 0..oh * ow {
            dxs[base + arg[ci * oh * ow + i] as usize] += dys[ci * oh * ow + i];
        }
    }
    dx
}

/// Adaptive average pool to 1x1: (C, H, W) -> (C,).
pub fn global_avg_pool(x: &Array3<f32>) -> Array1<f32> {
    let (c, h, w) = x.dim();
    let mut y = Array1::<f32>::zeros(c);
    for ci in 0..c {
        y[ci] = x.index_axis(Axis(0), ci).sum() / (h * w) as f32;
    }
    y
}

pub fn global_avg_pool_backward(dy: &Array1<f32>, in_shape: (usize, usize, usize)) -> Array3<f32> {
    let (c, h, w) = in_shape;
    let scale = 1.0 / (h * w) as f32;
    let mut dx = Array3::<f32>::zeros((c, h, w));
    for ci in 0..c {
        dx.index_axis_mut(Axis(0), ci).fill(dy[ci] * scale);
    }
    dx
}

/// Fully connected layer on vectors.
#[derive(Debug, Clone)]
pub struct Linear {
    /// (out, in)
    pub w: Array2<f32>,
    pub b: Array1<f32>,
}

impl Linear {
    pub fn new(n_in: usize, n_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            w: Array2::from_shape_vec((n_out, n_in), he_init(rng, n_in, n_in * n_out)).unwrap(),
            b: Array1::zeros(n_out),
        }
    }

    pub fn forward(&self, x: &Array1<f32>) -> Array1<f32> {
        self.w.dot(x) + &self.b
    }

    pub fn backward(
        &self,
        x: &Array1<f32>,
        dy: &Array1<f32>,
        gw: &mut [f32],
        gb: &mut [f32],
    ) -> Array1<f32> {
        let n_in = self.w.len_of(Axis(1));
        for (o, &g) in dy.iter().enumerate() {
            gb[o] += g;
            let row = &mut gw[o * n_in..(o + 1) * n_in];
            for (r, &xv) in row.iter_mut().zip(x.iter()) {
                *r += g * xv;
            }
        }
        self.w.t().dot(dy)
    }
}

/// Batch normalization over a batch of feature vectors (N, D), training mode.
/// Used as the BNNeck in front of the auxiliary classifier; it is created per
/// training run and dropped afterwards, so no running statistics are kept.
#[derive(Debug, Clone)]
pub struct BatchNorm1d {
    pub gamma: Array1<f32>,
    pub beta: Array1<f32>,
    pub eps: f32,
}

pub struct BnCache {
    x_hat: Array2<f32>,
    inv_std: Array1<f32>,
}

impl BatchNorm1d {
    pub fn new(dim: usize) -> Self {
        BatchNorm1d {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
            eps: 1e-5,
        }
    }

    pub fn forward_train(&self, x: &Array2<f32>) -> (Array2<f32>, BnCache) {
        let n = x.len_of(Axis(0)) as f32;
        let mean = x.mean_axis(Axis(0)).unwrap();
        let var = x.map_axis(Axis(0), |col| {
            let m = col.sum() / n;
            col.iter().map(|v| (v - m) * (v - m)).sum::<f32>() / n
        });
        let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let x_hat = (x - &mean) * &inv_std;
        let y = &x_hat * &self.gamma + &self.beta;
        (y, BnCache { x_hat, inv_std })
    }

    pub fn backward(
        &self,
        cache: &BnCache,
        dy: &Array2<f32>,
        g_gamma: &mut [f32],
        g_beta: &mut [f32],
    ) -> Array2<f32> {
        let n = dy.len_of(Axis(0)) as f32;
        let d = dy.len_of(Axis(1));
        let mut dx = Array2::<f32>::zeros(dy.raw_dim());
        for j in 0..d {
            let dyj = dy.column(j);
            let xhj = cache.x_hat.column(j);
            let sum_dy: f32 = dyj.sum();
            let sum_dy_xhat: f32 = dyj.iter().zip(xhj.iter()).map(|(a, b)| a * b).sum();
            g_gamma[j] += sum_dy_xhat;
            g_beta[j] += sum_dy;
            let gamma = self.gamma[j];
            let inv_std = cache.inv_std[j];
            for i in 0..dy.len_of(Axis(0)) {
                dx[[i, j]] = gamma * inv_std / n
                    * (n * dy[[i, j]] - sum_dy - cache.x_hat[[i, j]] * sum_dy_xhat);
            }
        }
        dx
    }
}

impl Parametric for BatchNorm1d {
    fn visit(&self, v: &mut dyn FnMut(&str, &[usize], &[f32])) {
        v("bn.gamma", &[self.gamma.len()], self.gamma.as_slice().unwrap());
        v("bn.beta", &[self.beta.len()], self.beta.as_slice().unwrap());
    }
    fn visit_mut(&mut self, v: &mut dyn FnMut(&str, &[usize], &mut [f32])) {
        let n = self.gamma.len();
        v("bn.gamma", &[n], self.gamma.as_slice_mut().unwrap());
        v("bn.beta", &[n], self.beta.as_slice_mut().unwrap());
    }
}

/// Optimizer configuration.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// SGD with momentum or Adam over a [`Parametric`] network.
pub struct Optimizer {
    kind: OptimizerKind,
    pub lr: f32,
    momentum: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    t: u64,
    state_m: Vec<Vec<f32>>,
    state_v: Vec<Vec<f32>>,
}

impl Optimizer {
    pub fn sgd(lr: f32, momentum: f32) -> Self {
        Optimizer {
            kind: OptimizerKind::Sgd,
            lr,
            momentum,
            beta1: 0.0,
            beta2: 0.0,
            eps: 0.0,
            t: 0,
            state_m: Vec::new(),
            state_v: Vec::new(),
        }
    }

    pub fn adam(lr: f32) -> Self {
        Optimizer {
            kind: OptimizerKind::Adam,
            lr,
            momentum: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            state_m: Vec::new(),
            state_v: Vec::new(),
        }
    }

    pub fn new(kind: OptimizerKind, lr: f32) -> Self {
        match kind {
            OptimizerKind::Sgd => Self::sgd(lr, 0.9),
            OptimizerKind::Adam => Self::adam(lr),
        }
    }

    pub fn step(&mut self, net: &mut dyn Parametric, grads: &GradStore) {
        if self.state_m.is_empty() {
            for buf in grads.bufs() {
                self.state_m.push(vec![0.0; buf.len()]);
                if self.kind == OptimizerKind::Adam {
                    self.state_v.push(vec![0.0; buf.len()]);
                }
            }
        }
        self.t += 1;
        let mut idx = 0usize;
        match self.kind {
            OptimizerKind::Sgd => {
                let (lr, mu) = (self.lr, self.momentum);
                net.visit_mut(&mut |_, _, data| {
                    let g = &grads.bufs()[idx];
                    let m = &mut self.state_m[idx];
                    for i in 0..data.len() {
                        m[i] = mu * m[i] + g[i];
                        data[i] -= lr * m[i];
                    }
                    idx += 1;
                });
            }
            OptimizerKind::Adam => {
                let (lr, b1, b2, eps) = (self.lr, self.beta1, self.beta2, self.eps);
                let bc1 = 1.0 - b1.powi(self.t as i32);
                let bc2 = 1.0 - b2.powi(self.t as i32);
                net.visit_mut(&mut |_, _, data| {
                    let g = &grads.bufs()[idx];
                    let m = &mut self.state_m[idx];
                    let v = &mut self.state_v[idx];
                    for i in 0..data.len() {
                        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                        let mh = m[i] / bc1;
                        let vh = v[i] / bc2;
                        data[i] -= lr * mh / (vh.sqrt() + eps);
                    }
                    idx += 1;
                });
            }
        }
    }

    /// Reset state (used when the loss-explosion guard restarts a run).
    pub fn reset(&mut self) {
        self.t = 0;
        self.state_m.clear();
        self.state_v.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;

    /// Central finite differences on an arbitrary scalar function of a
    /// parametric net must match the analytic gradient. Exercised here on a
    /// tiny conv->relu->pool->linear stack to validate all backward passes.
    #[test]
    fn layer_stack_gradients_match_finite_differences() {
        let mut rng = derive_rng(5, &["nn_fd"]);
        let conv = Conv2d::new(2, 3, &mut rng);
        let lin = Linear::new(3, 2, &mut rng);
        let x = Array3::from_shape_fn((2, 8, 8), |_| normal(&mut rng, 1.0));
        let target = Array1::from_vec(vec![0.3f32, -0.7]);

        struct Net {
            conv: Conv2d,
            lin: Linear,
        }
        impl Parametric for Net {
            fn visit(&self, v: &mut dyn FnMut(&str, &[usize], &[f32])) {
                v("c.w", &[3, 18], self.conv.w.as_slice().unwrap());
                v("c.b", &[3], self.conv.b.as_slice().unwrap());
                v("l.w", &[2, 3], self.lin.w.as_slice().unwrap());
                v("l.b", &[2], self.lin.b.as_slice().unwrap());
            }
            fn visit_mut(&mut self, v: &mut dyn FnMut(&str, &[usize], &mut [f32])) {
                v("c.w", &[3, 18], self.conv.w.as_slice_mut().unwrap());
                v("c.b", &[3], self.conv.b.as_slice_mut().unwrap());
                v("l.w", &[2, 3], self.lin.w.as_slice_mut().unwrap());
                v("l.b", &[2], self.lin.b.as_slice_mut().unwrap());
            }
        }
        let loss_of = |net: &Net, x: &Array3<f32>| -> f64 {
            let a = net.conv.forward(x);
            let r = relu(&a);
            let (p, _) = maxpool2(&r);
            let v = global_avg_pool(&p);
            let y = net.lin.forward(&v);
            y.iter()
                .zip(target.iter())
                .map(|(a, b)| ((a - b) as f64).powi(2))
                .sum()
        };

        let mut net = Net { conv, lin };
        // Analytic gradient.
        let a = net.conv.forward(&x);
        let r = relu(&a);
        let (p, arg) = maxpool2(&r);
        let v = global_avg_pool(&p);
        let y = net.lin.forward(&v);
        let dy = Array1::from_shape_fn(2, |i| 2.0 * (y[i] - target[i]));
        let mut grads = GradStore::zeros_like(&net);
        let mut g_lw = std::mem::take(&mut grads.bufs[2]);
        let mut g_lb = std::mem::take(&mut grads.bufs[3]);
        let dv = net.lin.backward(&v, &dy, &mut g_lw, &mut g_lb);
        let dp = global_avg_pool_backward(&dv, p.dim());
        let dr = maxpool2_backward(&dp, &arg, r.dim());
        let da = relu_backward(&r, &dr);
        let mut g_cw = std::mem::take(&mut grads.bufs[0]);
        let mut g_cb = std::mem::take(&mut grads.bufs[1]);
        let _ = net.conv.backward(&x, &da, &mut g_cw, &mut g_cb);
        let analytic = [g_cw, g_cb, g_lw, g_lb];

        // Finite differences on a sample of parameters in each tensor.
        let eps = 1e-3f32;
        for (ti, tensor_grad) in analytic.iter().enumerate() {
            let stride = (tensor_grad.len() / 5).max(1);
            for pi in (0..tensor_grad.len()).step_by(stride) {
                let mut idx = 0;
                let mut bump = |net: &mut Net, delta: f32| {
                    idx = 0;
                    net.visit_mut(&mut |_, _, data| {
                        if idx == ti {
                            data[pi] += delta;
                        }
                        idx += 1;
                    });
                };
                bump(&mut net, eps);
                let lp = loss_of(&net, &x);
                bump(&mut net, -2.0 * eps);
                let lm = loss_of(&net, &x);
                bump(&mut net, eps);
                let fd = ((lp - lm) / (2.0 * eps as f64)) as f32;
                let an = tensor_grad[pi];
                let denom = an.abs().max(fd.abs()).max(1e-3);
                assert!(
                    (fd - an).abs() / denom < 2e-2,
                    "tensor {ti} param {pi}: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn adam_reduces_a_quadratic() {
        struct P(Vec<f32>);
        impl Parametric for P {
            fn visit(&self, v: &mut dyn FnMut(&str, &[usize], &[f32])) {
                v("p", &[self.0.len()], &self.0);
            }
            fn visit_mut(&mut self, v: &mut dyn FnMut(&str, &[usize], &mut [f32])) {
                let n = self.0.len();
                v("p", &[n], &mut self.0);
            }
        }
        let mut p = P(vec![5.0, -3.0, 2.0]);
        let mut opt = Optimizer::adam(0.1);
        for _ in 0..200 {
            let mut g = GradStore::zeros_like(&p);
            for (gi, pi) in g.bufs[0].iter_mut().zip(&p.0) {
                *gi = 2.0 * pi;
            }
            opt.step(&mut p, &g);
        }
        assert!(p.0.iter().all(|v| v.abs() < 0.05), "{:?}", p.0);
    }
}
