//! Pluggable gait encoders.
//!
//! A [`GaitBackbone`] turns a silhouette clip into a fixed-dimension
//! embedding and supports manual backprop for training. Two implementations
//! ship here: [`ReferenceBackbone`], a compact spatio-temporal CNN (per-frame
//! conv stack, temporal max pooling over valid frames, horizontal part
//! pooling, linear head), and [`StatsBackbone`], a deliberately trivial
//! encoder (hand-crafted frame statistics through one linear layer) used to
//! exercise the model-agnosticity contract. The rest of the pipeline is
//! generic over the trait.

use ndarray::{Array1, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::nn::{
    maxpool2, maxpool2_backward, relu, relu_backward, Conv2d, GradStore, Linear, Parametric,
};
use crate::rng::derive_rng;
use crate::silhouette::SilhouetteSequence;

/// Fixed-dimension real embedding of a walking sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaitSignature {
    pub vector: Vec<f32>,
    pub source: SignatureSource,
    pub sequence_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignatureSource {
    Teacher,
    Mimic,
}

impl GaitSignature {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn is_finite(&self) -> bool {
        self.vector.iter().all(|v| v.is_finite())
    }
}

/// A silhouette clip in float form, ready for encoding.
#[derive(Debug, Clone)]
pub struct Clip {
    /// (T, H, W), values 0.0 or 1.0.
    pub frames: Array3<f32>,
    pub valid: Vec<bool>,
}

impl Clip {
    pub fn from_sequence(seq: &SilhouetteSequence) -> Self {
        Clip {
            frames: seq.frames.mapv(|p| p as f32),
            valid: seq.valid_mask.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len_of(Axis(0))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Gait encoder contract: deterministic evaluation-mode encoding plus manual
/// backprop for the training loops. `Cache` carries whatever the
/// implementation needs to run backward for one clip.
pub trait GaitBackbone: Parametric + Send + Sync {
    type Cache: Send;

    fn arch_id(&self) -> &'static str;
    fn embedding_dim(&self) -> usize;

    /// Forward pass for one clip, returning the embedding and a backward
    /// cache. Pure in the parameters (`&self`).
    fn forward(&self, clip: &Clip) -> (Array1<f32>, Self::Cache);

    /// Accumulate parameter gradients for one clip into `grads` given
    /// dL/d(embedding).
    fn backward(&self, clip: &Clip, cache: &Self::Cache, d_emb: &Array1<f32>, grads: &mut GradStore);

    /// Evaluation-mode encode (no cache retained).
    fn encode(&self, seq: &SilhouetteSequence, source: SignatureSource) -> GaitSignature {
        let clip = Clip::from_sequence(seq);
        let (emb, _) = self.forward(&clip);
        GaitSignature {
            vector: emb.to_vec(),
            source,
            sequence_id: seq.sequence_id.clone(),
        }
    }
}

/// Configuration of the reference backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub embedding_dim: usize,
    /// Channels of the three conv stages.
    pub channels: [usize; 3],
    /// Horizontal strips for part pooling.
    pub parts: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            embedding_dim: 128,
            channels: [8, 16, 32],
            parts: 4,
            seed: 0,
        }
    }
}

/// Compact spatio-temporal encoder.
///
/// Per frame: entry 2x2 average pool (64 -> 32), then three conv+relu+maxpool
/// stages. Frame features are max-pooled over time (invalid frames excluded),
/// split into horizontal strips, each strip reduced by mean and max, and the
/// concatenation mapped to the embedding by a linear head.
#[derive(Debug, Clone)]
pub struct ReferenceBackbone {
    pub config: BackboneConfig,
    conv1: Conv2d,
    conv2: Conv2d,
    conv3: Conv2d,
    head: Linear,
    feat_h: usize,
    feat_w: usize,
}

impl ReferenceBackbone {
    pub fn new(config: BackboneConfig) -> Self {
        let mut rng = derive_rng(config.seed, &["reference_backbone"]);
        let [c1, c2, c3] = config.channels;
        // 64 -> entry pool 32 -> pool 16 -> pool 8 -> pool 4.
        let (feat_h, feat_w) = (4usize, 4usize);
        let head_in = c3 * config.parts * 2;
        ReferenceBackbone {
            conv1: Conv2d::new(1, c1, &mut rng),
            conv2: Conv2d::new(c1, c2, &mut rng),
            conv3: Conv2d::new(c2, c3, &mut rng),
            head: Linear::new(head_in, config.embedding_dim, &mut rng),
            config,
            feat_h,
            feat_w,
        }
    }

    /// Entry 2x2 average pool of one binary frame: (64,64) -> (1,32,32).
    fn entry_pool(frame: &ndarray::ArrayView2<'_, f32>) -> Array3<f32> {
        let (h, w) = frame.dim();
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Array3::<f32>::zeros((1, oh, ow));
        for y in 0..oh {
            for x in 0..ow {
                out[[0, y, x]] = 0.25
                    * (frame[[2 * y, 2 * x]]
                        + frame[[2 * y, 2 * x + 1]]
                        + frame[[2 * y + 1, 2 * x]]
                        + frame[[2 * y + 1, 2 * x + 1]]);
            }
        }
        out
    }

    fn frame_forward(&self, frame: &ndarray::ArrayView2<'_, f32>) -> (Array3<f32>, FrameCache) {
        let x0 = Self::entry_pool(frame);
        let a1 = relu(&self.conv1.forward(&x0));
        let (p1, arg1) = maxpool2(&a1);
        let a2 = relu(&self.conv2.forward(&p1));
        let (p2, arg2) = maxpool2(&a2);
        let a3 = relu(&self.conv3.forward(&p2));
        let (p3, arg3) = maxpool2(&a3);
        (
            p3,
            FrameCache {
                x0,
                a1,
                arg1,
                p1,
                a2,
                arg2,
                p2,
                a3,
                arg3,
            },
        )
    }

    fn frame_backward(&self, cache: &FrameCache, d_out: &Array3<f32>, grads: &mut GradStore) {
        let da3 = maxpool2_backward(d_out, &cache.arg3, cache.a3.dim());
        let dz3 = relu_backward(&cache.a3, &da3);
        let dp2 = {
            let (gw, gb) = grads_pair(grads, 4, 5);
            self.conv3.backward(&cache.p2, &dz3, gw, gb)
        };
        let da2 = maxpool2_backward(&dp2, &cache.arg2, cache.a2.dim());
        let dz2 = relu_backward(&cache.a2, &da2);
        let dp1 = {
            let (gw, gb) = grads_pair(grads, 2, 3);
            self.conv2.backward(&cache.p1, &dz2, gw, gb)
        };
        let da1 = maxpool2_backward(&dp1, &cache.arg1, cache.a1.dim());
        let dz1 = relu_backward(&cache.a1, &da1);
        let (gw, gb) = grads_pair(grads, 0, 1);
        let _ = self.conv1.backward(&cache.x0, &dz1, gw, gb);
    }

    /// Horizontal part pooling: split rows into `parts` strips and take mean
    /// and max per strip per channel.
    fn part_pool(&self, fmap: &Array3<f32>) -> (Array1<f32>, Vec<u32>) {
        let (c, h, w) = fmap.dim();
        let parts = self.config.parts;
        let rows = h / parts;
        let mut out = Array1::<f32>::zeros(c * parts * 2);
        let mut argmax = vec![0u32; c * parts];
        for ci in 0..c {
            for p in 0..parts {
                let strip = fmap.slice(ndarray::s![ci, p * rows..(p + 1) * rows, ..]);
                let n = (rows * w) as f32;
                let mean = strip.sum() / n;
                let mut best = f32::MIN;
                let mut best_i = 0usize;
                for (i, &v) in strip.iter().enumerate() {
                    if v > best {
                        best = v;
                        best_i = i;
                    }
                }
                out[(ci * parts + p) * 2] = mean;
                out[(ci * parts + p) * 2 + 1] = best;
                argmax[ci * parts + p] = best_i as u32;
            }
        }
        (out, argmax)
    }

    fn part_pool_backward(
        &self,
        d_feat: &Array1<f32>,
        argmax: &[u32],
        shape: (usize, usize, usize),
    ) -> Array3<f32> {
        let (c, h, w) = shape;
        let parts = self.config.parts;
        let rows = h / parts;
        let mut d = Array3::<f32>::zeros(shape);
        for ci in 0..c {
            for p in 0..parts {
                let dmean = d_feat[(ci * parts + p) * 2] / (rows * w) as f32;
                let dmax = d_feat[(ci * parts + p) * 2 + 1];
                let mut strip = d.slice_mut(ndarray::s![ci, p * rows..(p + 1) * rows, ..]);
                strip += dmean;
                let flat = argmax[ci * parts + p] as usize;
                strip[[flat / w, flat % w]] += dmax;
            }
        }
        d
    }
}

pub struct FrameCache {
    x0: Array3<f32>,
    a1: Array3<f32>,
    arg1: Vec<u32>,
    p1: Array3<f32>,
    a2: Array3<f32>,
    arg2: Vec<u32>,
    p2: Array3<f32>,
    a3: Array3<f32>,
    arg3: Vec<u32>,
}

pub struct ReferenceCache {
    /// Per-frame pooled feature maps (kept for the temporal argmax); frame
    /// conv activations are recomputed on the backward pass to bound memory.
    frame_maps: Vec<Array3<f32>>,
    /// Which frame won each (c, y, x) cell of the temporal max, or -1 if no
    /// valid frame existed.
    temporal_arg: Vec<i32>,
    pooled: Array3<f32>,
    part_feat: Array1<f32>,
    part_arg: Vec<u32>,
    valid_idx: Vec<usize>,
}

impl Parametric for ReferenceBackbone {
    fn visit(&self, v: &mut dyn FnMut(&str, &[usize], &[f32])) {
        v(
            "conv1.w",
            &[self.conv1.c_out, self.conv1.c_in * 9],
            self.conv1.w.as_slice().unwrap(),
        );
        v("conv1.b", &[self.conv1.c_out], self.conv1.b.as_slice().unwrap());
        v(
            "conv2.w",
            &[self.conv2.c_out, self.conv2.c_in * 9],
            self.conv2.w.as_slice().unwrap(),
        );
        v("conv2.b", &[self.conv2.c_out], self.conv2.b.as_slice().unwrap());
        v(
            "conv3.w",
            &[self.conv3.c_out, self.conv3.c_in * 9],
            self.conv3.w.as_slice().unwrap(),
        );
        v("conv3.b", &[self.conv3.c_out], self.conv3.b.as_slice().unwrap());
        v(
            "head.w",
            &[self.head.w.len_of(Axis(0)), self.head.w.len_of(Axis(1))],
            self.head.w.as_slice().unwrap(),
        );
        v("head.b", &[self.head.b.len()], self.head.b.as_slice().unwrap());
    }

    fn visit_mut(&mut self, v: &mut dyn FnMut(&str, &[usize], &mut [f32])) {
        let s1 = [self.conv1.c_out, self.conv1.c_in * 9];
        v("conv1.w", &s1, self.conv1.w.as_slice_mut().unwrap());
        v("conv1.b", &s1[..1], self.conv1.b.as_slice_mut().unwrap());
        let s2 = [self.conv2.c_out, self.conv2.c_in * 9];
        v("conv2.w", &s2, self.conv2.w.as_slice_mut().unwrap());
        v("conv2.b", &s2[..1], self.conv2.b.as_slice_mut().unwrap());
        let s3 = [self.conv3.c_out, self.conv3.c_in * 9];
        v("conv3.w", &s3, self.conv3.w.as_slice_mut().unwrap());
        v("conv3.b", &s3[..1], self.conv3.b.as_slice_mut().unwrap());
        let sh = [self.head.w.len_of(Axis(0)), self.head.w.len_of(Axis(1))];
        v("head.w", &sh, self.head.w.as_slice_mut().unwrap());
        v("head.b", &sh[..1], self.head.b.as_slice_mut().unwrap());
    }
}

impl GaitBackbone for ReferenceBackbone {
    type Cache = ReferenceCache;

    fn arch_id(&self) -> &'static str {
        "reference_cnn_v1"
    }

    fn embedding_dim(&self) -> usize {
        self.config.embedding_dim
    }

    fn forward(&self, clip: &Clip) -> (Array1<f32>, Self::Cache) {
        let c3 = self.config.channels[2];
        let (fh, fw) = (self.feat_h, self.feat_w);
        let valid_idx: Vec<usize> = (0..clip.len()).filter(|&t| clip.valid[t]).collect();
        let mut frame_maps = Vec::with_capacity(valid_idx.len());
        for &t in &valid_idx {
            let frame = clip.frames.index_axis(Axis(0), t);
            let (fmap, _) = self.frame_forward(&frame);
            frame_maps.push(fmap);
        }
        // Temporal max over valid frames.
        let mut pooled = Array3::<f32>::zeros((c3, fh, fw));
        let mut temporal_arg = vec![-1i32; c3 * fh * fw];
        if !frame_maps.is_empty() {
            pooled.fill(f32::MIN);
            for (fi, fmap) in frame_maps.iter().enumerate() {
                for (i, (&v, p)) in fmap.iter().zip(pooled.iter_mut()).enumerate() {
                    if v > *p {
                        *p = v;
                        temporal_arg[i] = fi as i32;
                    }
                }
            }
        }
        let (part_feat, part_arg) = self.part_pool(&pooled);
        let emb = self.head.forward(&part_feat);
        (
            emb,
            ReferenceCache {
                frame_maps,
                temporal_arg,
                pooled,
                part_feat,
                part_arg,
                valid_idx,
            },
        )
    }

    fn backward(
        &self,
        clip: &Clip,
        cache: &Self::Cache,
        d_emb: &Array1<f32>,
        grads: &mut GradStore,
    ) {
        let (gw, gb) = grads_pair(grads, 6, 7);
        let d_part = self.head.backward(&cache.part_feat, d_emb, gw, gb);
        let d_pooled = self.part_pool_backward(&d_part, &cache.part_arg, cache.pooled.dim());
        // Route gradient to the winning frame of each cell.
        let mut per_frame: Vec<Option<Array3<f32>>> = vec![None; cache.frame_maps.len()];
        for (i, &fi) in cache.temporal_arg.iter().enumerate() {
            if fi < 0 {
                continue;
            }
            let g = d_pooled.as_slice().unwrap()[i];
            if g == 0.0 {
                continue;
            }
            let buf =
                per_frame[fi as usize].get_or_insert_with(|| Array3::zeros(cache.pooled.dim()));
            buf.as_slice_mut().unwrap()[i] = g;
        }
        for (slot, d_fmap) in per_frame.into_iter().enumerate() {
            let Some(d_fmap) = d_fmap else { continue };
            let t = cache.valid_idx[slot];
            let frame = clip.frames.index_axis(Axis(0), t);
            // Recompute the frame activations; caching them for every frame
            // of every clip would dominate memory.
            let (_, fcache) = self.frame_forward(&frame);
            self.frame_backward(&fcache, &d_fmap, grads);
        }
    }
}

fn grads_pair(grads: &mut GradStore, wi: usize, bi: usize) -> (&mut [f32], &mut [f32]) {
    debug_assert!(wi < bi);
    let (a, b) = grads.bufs_mut().split_at_mut(bi);
    (&mut a[wi], &mut b[0])
}

/// Trivial backbone: fixed per-frame silhouette statistics aggregated over
/// time (mean and standard deviation), mapped by one trainable linear layer.
#[derive(Debug, Clone)]
pub struct StatsBackbone {
    pub embedding_dim: usize,
    head: Linear,
}

const STATS_PER_FRAME: usize = 21;

impl StatsBackbone {
    pub fn new(embedding_dim: usize, seed: u64) -> Self {
        let mut rng = derive_rng(seed, &["stats_backbone"]);
        StatsBackbone {
            embedding_dim,
            head: Linear::new(STATS_PER_FRAME * 2, embedding_dim, &mut rng),
        }
    }

    fn frame_stats(frame: &ndarray::ArrayView2<'_, f32>) -> [f32; STATS_PER_FRAME] {
        let (h, w) = frame.dim();
        let mut out = [0.0f32; STATS_PER_FRAME];
        let total: f32 = frame.sum();
        out[0] = total / (h * w) as f32;
        if total > 0.0 {
            let (mut rc, mut cc) = (0.0f32, 0.0f32);
            for ((r, c), &v) in frame.indexed_iter() {
                rc += r as f32 * v;
                cc += c as f32 * v;
            }
            out[1] = rc / total / h as f32;
            out[2] = cc / total / w as f32;
        }
        // Row-strip and column-strip occupancy (8 strips each) plus overall
        // mass scale.
        let strips = 8;
        for s in 0..strips {
            let rows = frame.slice(ndarray::s![s * (h / strips)..(s + 1) * (h / strips), ..]);
            out[3 + s] = rows.sum() / (h / strips) as f32 / w as f32;
            let cols = frame.slice(ndarray::s![.., s * (w / strips)..(s + 1) * (w / strips)]);
            out[11 + s] = cols.sum() / (w / strips) as f32 / h as f32;
        }
        out[19] = total.sqrt() / h as f32;
        out[20] = 1.0;
        out
    }

    fn clip_features(clip: &Clip) -> Array1<f32> {
        let mut sums = [0.0f64; STATS_PER_FRAME];
        let mut sqs = [0.0f64; STATS_PER_FRAME];
        let mut n = 0usize;
        for t in 0..clip.len() {
            if !clip.valid[t] {
                continue;
            }
            let stats = Self::frame_stats(&clip.frames.index_axis(Axis(0), t));
            for (i, &s) in stats.iter().enumerate() {
                sums[i] += s as f64;
                sqs[i] += (s as f64) * (s as f64);
            }
            n += 1;
        }
        let mut feat = Array1::<f32>::zeros(STATS_PER_FRAME * 2);
        if n > 0 {
            for i in 0..STATS_PER_FRAME {
                let mean = sums[i] / n as f64;
                let var = (sqs[i] / n as f64 - mean * mean).max(0.0);
                feat[i] = mean as f32;
                feat[STATS_PER_FRAME + i] = var.sqrt() as f32;
            }
        }
        feat
    }
}

impl Parametric for StatsBackbone {
    fn visit(&self, v: &mut dyn FnMut(&str, &[usize], &[f32])) {
        let s = [self.head.w.len_of(Axis(0)), self.head.w.len_of(Axis(1))];
        v("head.w", &s, self.head.w.as_slice().unwrap());
        v("head.b", &s[..1], self.head.b.as_slice().unwrap());
    }
    fn visit_mut(&mut self, v: &mut dyn FnMut(&str, &[usize], &mut [f32])) {
        let s = [self.head.w.len_of(Axis(0)), self.head.w.len_of(Axis(1))];
        v("head.w", &s, self.head.w.as_slice_mut().unwrap());
        v("head.b", &s[..1], self.head.b.as_slice_mut().unwrap());
    }
}

pub struct StatsCache {
    feat: Array1<f32>,
}

impl GaitBackbone for StatsBackbone {
    type Cache = StatsCache;

    fn arch_id(&self) -> &'static str {
        "stats_linear_v1"
    }

    fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    fn forward(&self, clip: &Clip) -> (Array1<f32>, Self::Cache) {
        let feat = Self::clip_features(clip);
        let emb = self.head.forward(&feat);
        (emb, StatsCache { feat })
    }

    fn backward(
        &self,
        _clip: &Clip,
        cache: &Self::Cache,
        d_emb: &Array1<f32>,
        grads: &mut GradStore,
    ) {
        let (gw, gb) = grads_pair(grads, 0, 1);
        let _ = self.head.backward(&cache.feat, d_emb, gw, gb);
    }
}

/// Runtime-selectable backbone for the CLI and checkpoints.
#[derive(Debug, Clone)]
pub enum AnyBackbone {
    Reference(ReferenceBackbone),
    Stats(StatsBackbone),
}

pub enum AnyCache {
    Reference(ReferenceCache),
    Stats(StatsCache),
}

impl AnyBackbone {
    pub fn reference(config: BackboneConfig) -> Self {
        AnyBackbone::Reference(ReferenceBackbone::new(config))
    }

    pub fn from_arch_id(arch_id: &str, embedding_dim: usize, seed: u64) -> crate::Result<Self> {
        match arch_id {
            "reference_cnn_v1" => Ok(AnyBackbone::Reference(ReferenceBackbone::new(
                BackboneConfig {
                    embedding_dim,
                    seed,
                    ..BackboneConfig::default()
                },
            ))),
            "stats_linear_v1" => Ok(AnyBackbone::Stats(StatsBackbone::new(embedding_dim, seed))),
            other => Err(crate::Error::Checkpoint(format!(
                "unknown backbone architecture `{other}`"
            ))),
        }
    }
}

impl Parametric for AnyBackbone {
    fn visit(&self, v: &mut dyn FnMut(&str, &[usize], &[f32])) {
        match self {
            AnyBackbone::Reference(b) => b.visit(v),
            AnyBackbone::Stats(b) => b.visit(v),
        }
    }
    fn visit_mut(&mut self, v: &mut dyn FnMut(&str, &[usize], &mut [f32])) {
        match self {
            AnyBackbone::Reference(b) => b.visit_mut(v),
            AnyBackbone::Stats(b) => b.visit_mut(v),
        }
    }
}

impl GaitBackbone for AnyBackbone {
    type Cache = AnyCache;

    fn arch_id(&self) -> &'static str {
        match self {
            AnyBackbone::Reference(b) => b.arch_id(),
            AnyBackbone::Stats(b) => b.arch_id(),
        }
    }

    fn embedding_dim(&self) -> usize {
        match self {
            AnyBackbone::Reference(b) => b.embedding_dim(),
            AnyBackbone::Stats(b) => b.embedding_dim(),
        }
    }

    fn forward(&self, clip: &Clip) -> (Array1<f32>, Self::Cache) {
        match self {
            AnyBackbone::Reference(b) => {
                let (e, c) = b.forward(clip);
                (e, AnyCache::Reference(c))
            }
            AnyBackbone::Stats(b) => {
                let (e, c) = b.forward(clip);
                (e, AnyCache::Stats(c))
            }
        }
    }

    fn backward(
        &self,
        clip: &Clip,
        cache: &Self::Cache,
        d_emb: &Array1<f32>,
        grads: &mut GradStore,
    ) {
        match (self, cache) {
            (AnyBackbone::Reference(b), AnyCache::Reference(c)) => {
                b.backward(clip, c, d_emb, grads)
            }
            (AnyBackbone::Stats(b), AnyCache::Stats(c)) => b.backward(clip, c, d_emb, grads),
            _ => unreachable!("cache/backbone mismatch"),
        }
    }
}

/// Batch encode with order-preserving parallelism (bit-reproducible
/// regardless of thread count).
pub fn encode_batch<B: GaitBackbone>(
    backbone: &B,
    seqs: &[&SilhouetteSequence],
    source: SignatureSource,
) -> Vec<GaitSignature> {
    use rayon::prelude::*;
    seqs.par_iter()
        .map(|seq| backbone.encode(seq, source))
        .collect()
}

/// Embeddings as an (N, D) matrix.
pub fn signatures_matrix(sigs: &[GaitSignature]) -> Array2<f32> {
    let n = sigs.len();
    let d = sigs.first().map(|s| s.dim()).unwrap_or(0);
    let mut m = Array2::<f32>::zeros((n, d));
    for (i, s) in sigs.iter().enumerate() {
        for (j, &v) in s.vector.iter().enumerate() {
            m[[i, j]] = v;
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::silhouette::SilhouetteSequence;
    use crate::walker::test_support::sample_walker_sequence;
    use ndarray::Array3 as A3;

    #[test]
    fn embedding_shape_and_finiteness() {
        let b = ReferenceBackbone::new(BackboneConfig::default());
        let seq = sample_walker_sequence(10);
        let sig = b.encode(&seq, SignatureSource::Teacher);
        assert_eq!(sig.dim(), 128);
        assert!(sig.is_finite());
    }

    #[test]
    fn frame_permutation_invariance_and_duplication_invariance() {
        let b = ReferenceBackbone::new(BackboneConfig::default());
        let seq = sample_walker_sequence(8);
        let sig = b.encode(&seq, SignatureSource::Teacher);

        // Reverse frame order.
        let mut rev_frames = A3::zeros(seq.frames.raw_dim());
        for t in 0..seq.len() {
            rev_frames
                .index_axis_mut(Axis(0), t)
                .assign(&seq.frames.index_axis(Axis(0), seq.len() - 1 - t));
        }
        let rev = SilhouetteSequence::new(rev_frames, "s", "rev", 30.0).unwrap();
        let sig_rev = b.encode(&rev, SignatureSource::Teacher);
        assert_eq!(sig.vector, sig_rev.vector);

        // Duplicate every frame.
        let mut dup_frames = A3::zeros((seq.len() * 2, 64, 64));
        for t in 0..seq.len() * 2 {
            dup_frames
                .index_axis_mut(Axis(0), t)
                .assign(&seq.frames.index_axis(Axis(0), t / 2));
        }
        let dup = SilhouetteSequence::new(dup_frames, "s", "dup", 30.0).unwrap();
        let sig_dup = b.encode(&dup, SignatureSource::Teacher);
        assert_eq!(sig.vector, sig_dup.vector);
    }

    #[test]
    fn encode_is_deterministic() {
        let b = ReferenceBackbone::new(BackboneConfig::default());
        let seq = sample_walker_sequence(6);
        let a = b.encode(&seq, SignatureSource::Teacher);
        let c = b.encode(&seq, SignatureSource::Teacher);
        assert_eq!(a.vector, c.vector);
    }

    #[test]
    fn all_invalid_frames_still_finite() {
        let frames = A3::<u8>::zeros((3, 64, 64));
        let seq = SilhouetteSequence::new(frames, "s", "empty", 30.0).unwrap();
        for b in [
            AnyBackbone::reference(BackboneConfig::default()),
            AnyBackbone::Stats(StatsBackbone::new(16, 1)),
        ] {
            let sig = b.encode(&seq, SignatureSource::Teacher);
            assert!(sig.is_finite());
        }
    }

    #[test]
    fn backbone_gradient_matches_finite_differences() {
        for backbone in [
            AnyBackbone::Reference(ReferenceBackbone::new(BackboneConfig {
                embedding_dim: 6,
                channels: [2, 3, 4],
                parts: 2,
                seed: 3,
            })),
            AnyBackbone::Stats(StatsBackbone::new(6, 3)),
        ] {
            let seq = sample_walker_sequence(4);
            let clip = Clip::from_sequence(&seq);
            let target: Vec<f32> = (0..6).map(|i| 0.1 * i as f32).collect();
            let loss_of = |b: &AnyBackbone| -> f64 {
                let (e, _) = b.forward(&clip);
                e.iter()
                    .zip(&target)
                    .map(|(a, b)| ((a - b) as f64).powi(2))
                    .sum()
            };
            let (emb, cache) = backbone.forward(&clip);
            let d_emb = Array1::from_shape_fn(6, |i| 2.0 * (emb[i] - target[i]));
            let mut grads = GradStore::zeros_like(&backbone);
            backbone.backward(&clip, &cache, &d_emb, &mut grads);

            let mut b2 = backbone.clone();
            let n_tensors = grads.bufs().len();
            let eps = 1e-2f32;
            for ti in 0..n_tensors {
                let len = grads.bufs()[ti].len();
                for pi in (0..len).step_by((len / 3).max(1)) {
                    let mut bump = |net: &mut AnyBackbone, delta: f32| {
                        let mut idx = 0;
                        net.visit_mut(&mut |_, _, data| {
                            if idx == ti {
                                data[pi] += delta;
                            }
                            idx += 1;
                        });
                    };
                    bump(&mut b2, eps);
                    let lp = loss_of(&b2);
                    bump(&mut b2, -2.0 * eps);
                    let lm = loss_of(&b2);
                    bump(&mut b2, eps);
                    let fd = ((lp - lm) / (2.0 * eps as f64)) as f32;
                    let an = grads.bufs()[ti][pi];
                    let denom = an.abs().max(fd.abs()).max(1e-2);
                    assert!(
                        (fd - an).abs() / denom < 5e-2,
                        "{} tensor {ti} param {pi}: fd {fd} vs analytic {an}",
                        backbone.arch_id()
                    );
                }
            }
        }
    }
}
