//! Visibility Estimation Network.
//!
//! A three-layer CNN with one hidden linear layer and two parallel heads:
//! occlusion-type classification and occlusion-amount regression. It is
//! pretrained on synthetic occlusions and then frozen; during mimic training
//! and inference the heads are discarded and the 64-dim penultimate feature
//! guides the recognition backbone.
//!
//! Layer shapes (input 64x64x1): Conv1 -> 32ch, pool -> 32x32; Conv2 -> 64ch,
//! pool -> 16x16; Conv3 -> 128ch, pool -> 8x8; adaptive average pool -> 128;
//! FC1 -> 64; heads 64 -> C and 64 -> 1.

use ndarray::{Array1, Array2, Array3, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{cross_entropy, mse};
use crate::nn::{
    global_avg_pool, global_avg_pool_backward, maxpool2, maxpool2_backward, relu, relu_backward,
    Conv2d, GradStore, Linear, Optimizer, OptimizerKind, Parametric,
};
use crate::occlusion::{ClassSet, OcclusionEngine, OcclusionKind};
use crate::rng::{derive_rng, derive_seed};
use crate::silhouette::{SilhouetteSequence, BINARY_THRESHOLD};
use rand::Rng;

pub const DELTA_DIM: usize = 64;

/// Penultimate feature plus the two head outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisibilityFeature {
    pub delta: Vec<f32>,
    pub class_logits: Vec<f32>,
    pub amount_estimate: f32,
}

/// How a multi-frame input is reduced for the single-frame VEN.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VenTemporalMode {
    /// Average the frames over time and re-binarize at 128 (default).
    AverageThenBinarize,
    /// Run the VEN per frame and average delta, logits and amount.
    PerFrameMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VenConfig {
    pub class_set: ClassSet,
    pub lambda_ce: f64,
    pub lambda_r: f64,
    pub optimizer: OptimizerKind,
    pub learning_rate: f32,
    pub iterations: usize,
    pub batch_size: usize,
    pub temporal_mode: VenTemporalMode,
    pub seed: u64,
}

impl Default for VenConfig {
    fn default() -> Self {
        VenConfig {
            class_set: ClassSet::default_top_bottom(),
            lambda_ce: 1.0,
            lambda_r: 10.0,
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-4,
            iterations: 1000,
            batch_size: 16,
            temporal_mode: VenTemporalMode::AverageThenBinarize,
            seed: 0,
        }
    }
}

impl VenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_ce <= 0.0 || self.lambda_r < 0.0 {
            return Err(Error::Config("lambda_ce must be > 0, lambda_r >= 0".into()));
        }
        if self.class_set.index_of(OcclusionKind::None) != Some(0) {
            return Err(Error::Config("class set must start with `none`".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Ven {
    pub config: VenConfig,
    conv1: Conv2d,
    conv2: Conv2d,
    conv3: Conv2d,
    fc1: Linear,
    head_class: Linear,
    head_reg: Linear,
    frozen: bool,
}

struct VenCache {
    x0: Array3<f32>,
    a1: Array3<f32>,
    arg1: Vec<u32>,
    p1: Array3<f32>,
    a2: Array3<f32>,
    arg2: Vec<u32>,
    p2: Array3<f32>,
    a3: Array3<f32>,
    arg3: Vec<u32>,
    p3: Array3<f32>,
    pooled: Array1<f32>,
    delta: Array1<f32>,
}

impl Ven {
    pub fn new(config: VenConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = derive_rng(config.seed, &["ven"]);
        let n_classes = config.class_set.len();
        Ok(Ven {
            conv1: Conv2d::new(1, 32, &mut rng),
            conv2: Conv2d::new(32, 64, &mut rng),
            conv3: Conv2d::new(64, 128, &mut rng),
            fc1: Linear::new(128, DELTA_DIM, &mut rng),
            head_class: Linear::new(DELTA_DIM, n_classes, &mut rng),
            head_reg: Linear::new(DELTA_DIM, 1, &mut rng),
            config,
            frozen: false,
        })
    }

    pub fn class_set(&self) -> &ClassSet {
        &self.config.class_set
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self
    }

    /// Parameters active at inference time (heads removed).
    pub fn inference_param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |name, _, data| {
            if !name.starts_with("head_") {
                n += data.len();
            }
        });
        n
    }

    /// Reduce a sequence to the single 64x64 map the VEN consumes.
    pub fn reduce_input(seq: &SilhouetteSequence, mode: VenTemporalMode) -> Vec<Array2<f32>> {
        match mode {
            VenTemporalMode::AverageThenBinarize => {
                let mut acc = Array2::<f64>::zeros((seq.height(), seq.width()));
                let mut n = 0usize;
                for (t, frame) in seq.frames.axis_iter(Axis(0)).enumerate() {
                    if !seq.valid_mask[t] {
                        continue;
                    }
                    acc.zip_mut_with(&frame.mapv(|p| p as f64), |a, b| *a += b);
                    n += 1;
                }
                let thresh = BINARY_THRESHOLD as f64 / 255.0;
                let map = if n == 0 {
                    Array2::zeros((seq.height(), seq.width()))
                } else {
                    acc.mapv(|v| if v / n as f64 >= thresh { 1.0f32 } else { 0.0 })
                };
                vec![map]
            }
            VenTemporalMode::PerFrameMean => {
                let maps: Vec<Array2<f32>> = seq
                    .frames
                    .axis_iter(Axis(0))
                    .enumerate()
                    .filter(|(t, _)| seq.valid_mask[*t])
                    .map(|(_, f)| f.mapv(|p| p as f32))
                    .collect();
                if maps.is_empty() {
                    vec![Array2::zeros((seq.height(), seq.width()))]
                } else {
                    maps
                }
            }
        }
    }

    fn forward_map(&self, map: &Array2<f32>) -> (VisibilityFeature, VenCache) {
        let (h, w) = map.dim();
        let x0 = map
            .to_owned()
            .into_shape_with_order((1, h, w))
            .expect("map reshapes");
        let a1 = relu(&self.conv1.forward(&x0));
        let (p1, arg1) = maxpool2(&a1);
        let a2 = relu(&self.conv2.forward(&p1));
        let (p2, arg2) = maxpool2(&a2);
        let a3 = relu(&self.conv3.forward(&p2));
        let (p3, arg3) = maxpool2(&a3);
        let pooled = global_avg_pool(&p3);
        let delta = self.fc1.forward(&pooled);
        let logits = self.head_class.forward(&delta);
        let amount = self.head_reg.forward(&delta)[0];
        (
            VisibilityFeature {
                delta: delta.to_vec(),
                class_logits: logits.to_vec(),
                amount_estimate: amount,
            },
            VenCache {
                x0,
                a1,
                arg1,
                p1,
                a2,
                arg2,
                p2,
                a3,
                arg3,
                p3,
                pooled,
                delta,
            },
        )
    }

    /// Forward pass on a sequence. Wrong spatial size is rejected.
    pub fn forward(&self, seq: &SilhouetteSequence) -> Result<VisibilityFeature> {
        if seq.height() != 64 || seq.width() != 64 {
            return Err(Error::Validation(format!(
                "VEN expects 64x64 input, got {}x{}",
                seq.height(),
                seq.width()
            )));
        }
        let maps = Self::reduce_input(seq, self.config.temporal_mode);
        let feats: Vec<VisibilityFeature> =
            maps.iter().map(|m| self.forward_map(m).0).collect();
        Ok(mean_features(&feats))
    }

    /// The guidance feature: penultimate delta only, heads discarded.
    pub fn guide_features(&self, seq: &SilhouetteSequence) -> Result<Array1<f32>> {
        let feat = self.forward(seq)?;
        Ok(Array1::from_vec(feat.delta))
    }

    fn backward_map(
        &self,
        cache: &VenCache,
        d_logits: &Array1<f32>,
        d_amount: f32,
        grads: &mut GradStore,
    ) {
        // Visit order: conv1.w/b, conv2.w/b, conv3.w/b, fc1.w/b,
        // head_class.w/b, head_reg.w/b  (indices 0..12).
        let mut d_delta = Array1::<f32>::zeros(DELTA_DIM);
        {
            let (gw, gb) = split_pair(grads, 8, 9);
            d_delta += &self.head_class.backward(&cache.delta, d_logits, gw, gb);
        }
        {
            let (gw, gb) = split_pair(grads, 10, 11);
            let d_reg = Array1::from_vec(vec![d_amount]);
            d_delta += &self.head_reg.backward(&cache.delta, &d_reg, gw, gb);
        }
        let d_pooled = {
            let (gw, gb) = split_pair(grads, 6, 7);
            self.fc1.backward(&cache.pooled, &d_delta, gw, gb)
        };
        let d_p3 = global_avg_pool_backward(&d_pooled, cache.p3.dim());
        let da3 = maxpool2_backward(&d_p3, &cache.arg3, cache.a3.dim());
        let dz3 = relu_backward(&cache.a3, &da3);
        let d_p2 = {
            let (gw, gb) = split_pair(grads, 4, 5);
            self.conv3.backward(&cache.p2, &dz3, gw, gb)
        };
        let da2 = maxpool2_backward(&d_p2, &cache.arg2, cache.a2.dim());
        let dz2 = relu_backward(&cache.a2, &da2);
        let d_p1 = {
            let (gw, gb) = split_pair(grads, 2, 3);
            self.conv2.backward(&cache.p1, &dz2, gw, gb)
        };
        let da1 = maxpool2_backward(&d_p1, &cache.arg1, cache.a1.dim());
        let dz1 = relu_backward(&cache.a1, &da1);
        let (gw, gb) = split_pair(grads, 0, 1);
        let _ = self.conv1.backward(&cache.x0, &dz1, gw, gb);
    }
}

fn split_pair(grads: &mut GradStore, wi: usize, bi: usize) -> (&mut [f32], &mut [f32]) {
    let (a, b) = grads.bufs_mut().split_at_mut(bi);
    (&mut a[wi], &mut b[0])
}

fn mean_features(feats: &[VisibilityFeature]) -> VisibilityFeature {
    let n = feats.len().max(1) as f32;
    let mut delta = vec![0.0f32; feats[0].delta.len()];
    let mut logits = vec![0.0f32; feats[0].class_logits.len()];
    let mut amount = 0.0f32;
    for f in feats {
        for (d, v) in delta.iter_mut().zip(&f.delta) {
            *d += v / n;
        }
        for (l, v) in logits.iter_mut().zip(&f.class_logits) {
            *l += v / n;
        }
        amount += f.amount_estimate / n;
    }
    VisibilityFeature {
        delta,
        class_logits: logits,
        amount_estimate: amount,
    }
}

impl Parametric for Ven {
    fn visit(&self, v: &mut dyn FnMut(&str, &[usize], &[f32])) {
        for (name, conv) in [
            ("conv1", &self.conv1),
            ("conv2", &self.conv2),
            ("conv3", &self.conv3),
        ] {
            v(
                &format!("{name}.w"),
                &[conv.c_out, conv.c_in * 9],
                conv.w.as_slice().unwrap(),
            );
            v(&format!("{name}.b"), &[conv.c_out], conv.b.as_slice().unwrap());
        }
        for (name, lin) in [
            ("fc1", &self.fc1),
            ("head_class", &self.head_class),
            ("head_reg", &self.head_reg),
        ] {
            v(
                &format!("{name}.w"),
                &[lin.w.len_of(Axis(0)), lin.w.len_of(Axis(1))],
                lin.w.as_slice().unwrap(),
            );
            v(&format!("{name}.b"), &[lin.b.len()], lin.b.as_slice().unwrap());
        }
    }

    fn visit_mut(&mut self, v: &mut dyn FnMut(&str, &[usize], &mut [f32])) {
        for (name, conv) in [
            ("conv1", &mut self.conv1),
            ("conv2", &mut self.conv2),
            ("conv3", &mut self.conv3),
        ] {
            let s = [conv.c_out, conv.c_in * 9];
            v(&format!("{name}.w"), &s, conv.w.as_slice_mut().unwrap());
            v(&format!("{name}.b"), &s[..1], conv.b.as_slice_mut().unwrap());
        }
        for (name, lin) in [
            ("fc1", &mut self.fc1),
            ("head_class", &mut self.head_class),
            ("head_reg", &mut self.head_reg),
        ] {
            let s = [lin.w.len_of(Axis(0)), lin.w.len_of(Axis(1))];
            v(&format!("{name}.w"), &s, lin.w.as_slice_mut().unwrap());
            v(&format!("{name}.b"), &s[..1], lin.b.as_slice_mut().unwrap());
        }
    }
}

/// One training sample: reduced input map, class target, amount target.
struct VenSample {
    map: Array2<f32>,
    class: usize,
    amount: f32,
}

fn draw_sample(
    dataset: &Dataset,
    engine: &OcclusionEngine,
    class_set: &ClassSet,
    mode: VenTemporalMode,
    seed: u64,
) -> Result<VenSample> {
    let mut rng = derive_rng(seed, &["ven_sample"]);
    let rec = rng.random_range(0..dataset.len());
    let seq = dataset.load(rec)?;
    let kind = class_set.kinds()[rng.random_range(0..class_set.len())];
    let spec = engine.sample_spec(&[kind], derive_seed(seed, &["spec"]))?;
    let (occluded, label) = engine.apply(&seq, &spec)?;
    let map = Ven::reduce_input(&occluded, mode)
        .into_iter()
        .next()
        .expect("at least one map");
    Ok(VenSample {
        map,
        class: label.class_index,
        amount: label.amount_target as f32,
    })
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct VenHistory {
    pub total: Vec<f64>,
    pub ce: Vec<f64>,
    pub reg: Vec<f64>,
}

/// Train the VEN on synthetic occlusions drawn from its class set (including
/// `none`) and return it frozen.
pub fn train_ven(
    dataset: &Dataset,
    engine: &OcclusionEngine,
    config: &VenConfig,
) -> Result<(Ven, VenHistory)> {
    config.validate()?;
    if engine.class_set != config.class_set {
        return Err(Error::Config(
            "engine class set differs from VEN config class set".into(),
        ));
    }
    let mut ven = Ven::new(config.clone())?;
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate);
    let mut history = VenHistory::default();
    // Per-frame mode still trains on single reduced maps: each sample uses
    // the first frame map, which keeps training cost independent of T.
    for iter in 0..config.iterations {
        let iter_seed = derive_seed(config.seed, &["ven_iter", &iter.to_string()]);
        let samples: Vec<VenSample> = (0..config.batch_size)
            .map(|i| {
                draw_sample(
                    dataset,
                    engine,
                    &config.class_set,
                    config.temporal_mode,
                    derive_seed(iter_seed, &["sample", &i.to_string()]),
                )
            })
            .collect::<Result<_>>()?;

        let outs: Vec<(VisibilityFeature, VenCache)> = samples
            .par_iter()
            .map(|s| ven.forward_map(&s.map))
            .collect();

        let n = samples.len();
        let n_classes = config.class_set.len();
        let mut logits = Array2::<f32>::zeros((n, n_classes));
        let mut amounts = Array1::<f32>::zeros(n);
        for (i, (feat, _)) in outs.iter().enumerate() {
            for (j, &l) in feat.class_logits.iter().enumerate() {
                logits[[i, j]] = l;
            }
            amounts[i] = feat.amount_estimate;
        }
        let targets: Vec<usize> = samples.iter().map(|s| s.class).collect();
        let amount_targets = Array1::from_iter(samples.iter().map(|s| s.amount));
        let (ce_loss, d_logits) = cross_entropy(&logits, &targets);
        let (reg_loss, d_amounts) = mse(&amounts, &amount_targets);
        history.ce.push(ce_loss);
        history.reg.push(reg_loss);
        history
            .total
            .push(config.lambda_ce * ce_loss + config.lambda_r * reg_loss);

        let stores: Vec<GradStore> = outs
            .par_iter()
            .enumerate()
            .map(|(i, (_, cache))| {
                let mut grads = GradStore::zeros_like(&ven);
                let dl = d_logits.row(i).mapv(|v| v * config.lambda_ce as f32);
                let da = d_amounts[i] * config.lambda_r as f32;
                ven.backward_map(cache, &dl, da, &mut grads);
                grads
            })
            .collect();
        if let Some(grads) = GradStore::sum(stores) {
            optimizer.step(&mut ven, &grads);
        }
    }
    Ok((ven.freeze(), history))
}

/// Evaluate classification accuracy and amount MSE on freshly drawn
/// occlusions over `n_samples` held-out draws.
pub fn eval_ven(
    ven: &Ven,
    dataset: &Dataset,
    engine: &OcclusionEngine,
    n_samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let mut correct = 0usize;
    let mut sq_err = 0.0f64;
    let outputs: Vec<(usize, usize, f64, f64)> = (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let sample = draw_sample(
                dataset,
                engine,
                &ven.config.class_set,
                ven.config.temporal_mode,
                derive_seed(seed, &["ven_eval", &i.to_string()]),
            )?;
            let (feat, _) = ven.forward_map(&sample.map);
            let pred = feat
                .class_logits
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(j, _)| j)
                .unwrap();
            Ok((
                pred,
                sample.class,
                feat.amount_estimate as f64,
                sample.amount as f64,
            ))
        })
        .collect::<Result<_>>()?;
    for (pred, truth, est, target) in outputs {
        if pred == truth {
            correct += 1;
        }
        sq_err += (est - target) * (est - target);
    }
    Ok((
        correct as f64 / n_samples as f64,
        sq_err / n_samples as f64,
    ))
}

/// Regression-head outputs and targets over held-out draws (for wiring
/// checks such as the lambda_r = 0 ablation).
pub fn ven_regression_outputs(
    ven: &Ven,
    dataset: &Dataset,
    engine: &OcclusionEngine,
    n_samples: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut est = Vec::with_capacity(n_samples);
    let mut target = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let sample = draw_sample(
            dataset,
            engine,
            &ven.config.class_set,
            ven.config.temporal_mode,
            derive_seed(seed, &["ven_reg", &i.to_string()]),
        )?;
        let (feat, _) = ven.forward_map(&sample.map);
        est.push(feat.amount_estimate as f64);
        target.push(sample.amount as f64);
    }
    Ok((est, target))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::walker::test_support::sample_walker_sequence;

    fn tiny_ven() -> Ven {
        Ven::new(VenConfig::default()).unwrap()
    }

    #[test]
    fn forward_output_shapes() {
        let ven = tiny_ven();
        let seq = sample_walker_sequence(6);
        let feat = ven.forward(&seq).unwrap();
        assert_eq!(feat.delta.len(), 64);
        assert_eq!(feat.class_logits.len(), 3);
        assert!(feat.amount_estimate.is_finite());
    }

    #[test]
    fn all_zero_input_is_finite() {
        let ven = tiny_ven();
        let frames = ndarray::Array3::<u8>::zeros((3, 64, 64));
        let seq = SilhouetteSequence::new(frames, "s", "z", 30.0).unwrap();
        let feat = ven.forward(&seq).unwrap();
        assert!(feat.delta.iter().all(|v| v.is_finite()));
        assert!(feat.class_logits.iter().all(|v| v.is_finite()));
        assert!(feat.amount_estimate.is_finite());
    }

    #[test]
    fn wrong_spatial_size_rejected() {
        let ven = tiny_ven();
        let frames = ndarray::Array3::<u8>::zeros((2, 32, 32));
        let seq = SilhouetteSequence::new(frames, "s", "small", 30.0).unwrap();
        assert!(ven.forward(&seq).is_err());
    }

    /// Shape trace of every stage against the published architecture table.
    #[test]
    fn intermediate_shapes_match_architecture_table() {
        let ven = tiny_ven();
        let seq = sample_walker_sequence(2);
        let map = Ven::reduce_input(&seq, VenTemporalMode::AverageThenBinarize)
            .into_iter()
            .next()
            .unwrap();
        let (_, cache) = ven.forward_map(&map);
        assert_eq!(cache.a1.dim(), (32, 64, 64));
        assert_eq!(cache.p1.dim(), (32, 32, 32));
        assert_eq!(cache.a2.dim(), (64, 32, 32));
        assert_eq!(cache.p2.dim(), (64, 16, 16));
        assert_eq!(cache.a3.dim(), (128, 16, 16));
        assert_eq!(cache.p3.dim(), (128, 8, 8));
        assert_eq!(cache.pooled.len(), 128);
        assert_eq!(cache.delta.len(), 64);
    }

    #[test]
    fn inference_parameter_count_near_100k() {
        let ven = tiny_ven();
        let n = ven.inference_param_count() as f64;
        assert!(
            (n - 100_000.0).abs() / 100_000.0 < 0.2,
            "inference params {n}"
        );
        // Heads excluded: total must exceed the inference count.
        assert!(ven.param_count() > ven.inference_param_count());
    }

    #[test]
    fn guide_features_deterministic_and_64d() {
        let ven = tiny_ven().freeze();
        let seq = sample_walker_sequence(5);
        let a = ven.guide_features(&seq).unwrap();
        let b = ven.guide_features(&seq).unwrap();
        assert_eq!(a.len(), 64);
        assert_eq!(a, b);
    }

    #[test]
    fn temporal_average_darkens_consistent_band() {
        // A middle occlusion is temporally constant, so the averaged and
        // re-binarized map keeps the zeroed band.
        let engine = OcclusionEngine::new(ClassSet::covering(&[OcclusionKind::Middle]));
        let seq = crate::occlusion::ones_sequence(6);
        let spec = engine.sample_spec(&[OcclusionKind::Middle], 3).unwrap();
        let (occ, _) = engine.apply(&seq, &spec).unwrap();
        let map = Ven::reduce_input(&occ, VenTemporalMode::AverageThenBinarize)
            .into_iter()
            .next()
            .unwrap();
        let zeros = map.iter().filter(|&&v| v == 0.0).count();
        let expect = (spec.amount * 64.0).floor() as usize * 64;
        assert_eq!(zeros, expect);
    }
}
