//! Visibility-guided mimic training.
//!
//! The mimic network shares the teacher's architecture, sees only occluded
//! clips, and receives the frozen VEN's 64-dim visibility feature through a
//! linear injection head. It is trained against the frozen teacher's
//! holistic embeddings with a multi-instance correlational distillation
//! loss: a triplet margin loss whose anchor-positive pairs span three
//! same-identity families
//!
//!   1. mimic_i  <-> teacher_i   (same instance)
//!   2. mimic_i  <-> teacher_j   (cross instance)
//!   3. mimic_i  <-> mimic_j     (cross instance)
//!
//! while anchor-negative pairs are drawn from other identities over both
//! mimic and teacher embeddings. Teacher embeddings are constants: gradient
//! reaches only mimic-side embeddings.

use ndarray::{Array1, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{Clip, GaitBackbone};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::triplet_loss;
use crate::model::RecognitionModel;
use crate::nn::{GradStore, Linear, Optimizer, Parametric};
use crate::occlusion::{OcclusionEngine, OcclusionKind};
use crate::rng::derive_seed;
use crate::silhouette::sample_clip;
use crate::train::{sample_pk_batch, subject_labels, AuxClassifier, TrainConfig, TrainHistory};
use crate::ven::{Ven, DELTA_DIM};

/// Linear map from [backbone embedding; visibility feature] to the embedding
/// space, initialized as identity on the backbone block and zeros on the
/// feature block so training starts as a pure backbone.
#[derive(Debug, Clone)]
pub struct InjectionHead {
    lin: Linear,
    pub embedding_dim: usize,
    pub delta_dim: usize,
}

impl InjectionHead {
    pub fn identity_init(embedding_dim: usize, delta_dim: usize) -> Self {
        let mut w = Array2::<f32>::zeros((embedding_dim, embedding_dim + delta_dim));
        for i in 0..embedding_dim {
            w[[i, i]] = 1.0;
        }
        InjectionHead {
            lin: Linear {
                w,
                b: Array1::zeros(embedding_dim),
            },
            embedding_dim,
            delta_dim,
        }
    }

    /// Zero the feature-block columns (ablation wiring check).
    pub fn zero_delta_block(&mut self) {
        self.lin
            .w
            .slice_mut(ndarray::s![.., self.embedding_dim..])
            .fill(0.0);
    }

    /// Returns the output embedding and the concatenated input (cached for
    /// backward).
    pub fn forward(&self, emb_b: &Array1<f32>, delta: &Array1<f32>) -> (Array1<f32>, Array1<f32>) {
        assert_eq!(emb_b.len(), self.embedding_dim, "backbone feature size");
        assert_eq!(delta.len(), self.delta_dim, "visibility feature size");
        let mut input = Array1::<f32>::zeros(self.embedding_dim + self.delta_dim);
        input.slice_mut(ndarray::s![..self.embedding_dim]).assign(emb_b);
        input.slice_mut(ndarray::s![self.embedding_dim..]).assign(delta);
        (self.lin.forward(&input), input)
    }

    /// Backward into the head's own gradients (`bufs[0]`, `bufs[1]`) and the
    /// backbone embedding. The visibility-feature gradient is dropped: the
    /// VEN is frozen.
    pub fn backward(
        &self,
        input: &Array1<f32>,
        d_emb: &Array1<f32>,
        bufs: &mut [Vec<f32>],
    ) -> Array1<f32> {
        let (gw, gb) = {
            let (a, b) = bufs.split_at_mut(1);
            (a[0].as_mut_slice(), b[0].as_mut_slice())
        };
        let d_input = self.lin.backward(input, d_emb, gw, gb);
        d_input.slice(ndarray::s![..self.embedding_dim]).to_owned()
    }
}

impl Parametric for InjectionHead {
    fn visit(&self, v: &mut dyn FnMut(&str, &[usize], &[f32])) {
        let s = [self.lin.w.len_of(Axis(0)), self.lin.w.len_of(Axis(1))];
        v("injection.w", &s, self.lin.w.as_slice().unwrap());
        v("injection.b", &s[..1], self.lin.b.as_slice().unwrap());
    }
    fn visit_mut(&mut self, v: &mut dyn FnMut(&str, &[usize], &mut [f32])) {
        let s = [self.lin.w.len_of(Axis(0)), self.lin.w.len_of(Axis(1))];
        v("injection.w", &s, self.lin.w.as_slice_mut().unwrap());
        v("injection.b", &s[..1], self.lin.b.as_slice_mut().unwrap());
    }
}

/// Anchor-positive family toggles of the correlational loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MickdFamilies {
    pub same_instance: bool,
    pub cross_teacher: bool,
    pub cross_mimic: bool,
}

impl Default for MickdFamilies {
    fn default() -> Self {
        MickdFamilies {
            same_instance: true,
            cross_teacher: true,
            cross_mimic: true,
        }
    }
}

/// Multi-instance correlational distillation loss (f32 wrapper).
pub fn mickd_loss(
    mimic: &Array2<f32>,
    teacher: &Array2<f32>,
    labels: &[usize],
    margin: f64,
    families: MickdFamilies,
) -> (f64, Array2<f32>) {
    let gm = mimic.mapv(|v| v as f64);
    let gt = teacher.mapv(|v| v as f64);
    let (loss, grad) = mickd_loss_f64(&gm, &gt, labels, margin, families);
    (loss, grad.mapv(|v| v as f32))
}

fn dist(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(p, q)| (p - q) * (p - q))
        .sum::<f64>()
        .sqrt()
}

/// f64 core of [`mickd_loss`]. `mimic` row i and `teacher` row i encode the
/// same instance (same sampled frames, occlusion applied on the mimic side).
///
/// Gradient flows only into mimic rows; teacher rows are constants.
pub fn mickd_loss_f64(
    mimic: &Array2<f64>,
    teacher: &Array2<f64>,
    labels: &[usize],
    margin: f64,
    families: MickdFamilies,
) -> (f64, Array2<f64>) {
    let n = mimic.len_of(Axis(0));
    assert_eq!(teacher.len_of(Axis(0)), n);
    assert_eq!(labels.len(), n);
    let mut grad = Array2::<f64>::zeros(mimic.raw_dim());

    // Positives per anchor: (row index, is_mimic).
    let positives = |a: usize| -> Vec<(usize, bool)> {
        let mut pos = Vec::new();
        if families.same_instance {
            pos.push((a, false));
        }
        for j in 0..n {
            if j != a && labels[j] == labels[a] {
                if families.cross_teacher {
                    pos.push((j, false));
                }
                if families.cross_mimic {
                    pos.push((j, true));
                }
            }
        }
        pos
    };
    // Negatives: every other-identity embedding on both sides.
    let negatives = |a: usize| -> Vec<(usize, bool)> {
        let mut neg = Vec::new();
        for j in 0..n {
            if labels[j] != labels[a] {
                neg.push((j, true));
                neg.push((j, false));
            }
        }
        neg
    };

    let side = |idx: usize, is_mimic: bool| {
        if is_mimic {
            mimic.row(idx)
        } else {
            teacher.row(idx)
        }
    };

    let mut count = 0usize;
    for a in 0..n {
        count += positives(a).len() * negatives(a).len();
    }
    if count == 0 {
        return (0.0, grad);
    }
    let scale = 1.0 / count as f64;
    let mut total = 0.0f64;

    // Accumulate d||x - y|| into mimic-row gradients only.
    let mut add = |grad: &mut Array2<f64>,
                   x_idx: usize,
                   x_mimic: bool,
                   y_idx: usize,
                   y_mimic: bool,
                   d: f64,
                   w: f64| {
        if d < 1e-12 {
            return;
        }
        let x = side(x_idx, x_mimic).to_owned();
        let y = side(y_idx, y_mimic).to_owned();
        if x_mimic {
            let mut row = grad.row_mut(x_idx);
            for (g, (p, q)) in row.iter_mut().zip(x.iter().zip(y.iter())) {
                *g += w / d * (p - q);
            }
        }
        if y_mimic {
            let mut row = grad.row_mut(y_idx);
            for (g, (p, q)) in row.iter_mut().zip(x.iter().zip(y.iter())) {
                *g -= w / d * (p - q);
            }
        }
    };

    for a in 0..n {
        let anchor = mimic.row(a);
        for (p_idx, p_mimic) in positives(a) {
            let d_ap = dist(anchor, side(p_idx, p_mimic));
            for (q_idx, q_mimic) in negatives(a) {
                let d_an = dist(anchor, side(q_idx, q_mimic));
                let h = d_ap - d_an + margin;
                if h <= 0.0 {
                    continue;
                }
                total += h;
                add(&mut grad, a, true, p_idx, p_mimic, d_ap, scale);
                add(&mut grad, a, true, q_idx, q_mimic, d_an, -scale);
            }
        }
    }
    (total * scale, grad)
}

/// Plain L2 distillation: mean over instances of ||mimic_i - teacher_i||^2.
pub fn l2kd_loss(mimic: &Array2<f32>, teacher: &Array2<f32>) -> (f64, Array2<f32>) {
    let n = mimic.len_of(Axis(0));
    let mut loss = 0.0f64;
    let mut grad = Array2::<f32>::zeros(mimic.raw_dim());
    for i in 0..n {
        for j in 0..mimic.len_of(Axis(1)) {
            let d = mimic[[i, j]] as f64 - teacher[[i, j]] as f64;
            loss += d * d;
            grad[[i, j]] = (2.0 * d / n as f64) as f32;
        }
    }
    (loss / n as f64, grad)
}

/// Distillation strategy selector (the knowledge-distillation ablation axis).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillLossKind {
    /// Multi-instance correlational distillation (the full method).
    Mickd,
    /// Same-instance L2 regression to the teacher embedding.
    L2kd,
    /// No distillation: plain triplet(+CE) training on occluded clips
    /// (equivalent to retraining the backbone on occlusions).
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub train: TrainConfig,
    pub loss: DistillLossKind,
    /// Distillation triplet margin.
    pub margin: f64,
    pub families: MickdFamilies,
    /// Add cross entropy through a BNNeck on the mimic embeddings. Off by
    /// default: it measurably hurts the distilled model.
    pub xe: bool,
    /// Occlusion kinds applied to the mimic's inputs during training.
    pub kinds: Vec<OcclusionKind>,
    /// Inject VEN features (off reproduces the vanilla-mimic ablations).
    pub use_ven: bool,
    /// Initialize the mimic from the teacher's weights instead of random
    /// initialization.
    pub warm_start: bool,
}

impl DistillConfig {
    pub fn new(train: TrainConfig, kinds: Vec<OcclusionKind>) -> Self {
        DistillConfig {
            train,
            loss: DistillLossKind::Mickd,
            margin: 0.05,
            families: MickdFamilies::default(),
            xe: false,
            kinds,
            use_ven: true,
            warm_start: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.margin <= 0.0 {
            return Err(Error::Config("distillation margin must be positive".into()));
        }
        if self.kinds.is_empty() {
            return Err(Error::Config("no training occlusion kinds".into()));
        }
        if self.kinds.contains(&OcclusionKind::None) {
            return Err(Error::Config(
                "training occlusions must be real kinds, not `none`".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DistillHistory {
    pub total: Vec<f64>,
    pub kd: Vec<f64>,
    pub xe: Vec<f64>,
}

impl DistillHistory {
    pub fn mean_of_first(&self, n: usize) -> f64 {
        let k = n.min(self.total.len()).max(1);
        self.total.iter().take(k).sum::<f64>() / k as f64
    }
    pub fn mean_of_last(&self, n: usize) -> f64 {
        let k = n.min(self.total.len()).max(1);
        self.total.iter().rev().take(k).sum::<f64>() / k as f64
    }
}

/// Build the initial mimic model for a distillation run.
pub fn init_mimic<B: GaitBackbone + Clone>(
    teacher: &RecognitionModel<B>,
    fresh_backbone: impl Fn() -> B,
    config: &DistillConfig,
) -> RecognitionModel<B> {
    let backbone = if config.warm_start {
        teacher.backbone.clone()
    } else {
        fresh_backbone()
    };
    if config.use_ven {
        RecognitionModel::with_injection(backbone, DELTA_DIM)
    } else {
        RecognitionModel::bare(backbone)
    }
}

/// Train a mimic model against a frozen teacher and (optionally) a frozen
/// VEN. The teacher and VEN parameters are never touched; batch items get
/// independently sampled occlusions each iteration.
pub fn distill<B: GaitBackbone + Clone>(
    mut mimic: RecognitionModel<B>,
    teacher: &RecognitionModel<B>,
    ven: Option<&Ven>,
    dataset: &Dataset,
    engine: &OcclusionEngine,
    config: &DistillConfig,
) -> Result<(RecognitionModel<B>, DistillHistory)> {
    config.validate()?;
    if config.use_ven {
        let ven = ven.ok_or_else(|| Error::Config("distillation with VEN needs a VEN".into()))?;
        if !ven.is_frozen() {
            return Err(Error::Config("VEN must be frozen before distillation".into()));
        }
        if !ven.class_set().covers(&config.kinds) {
            return Err(Error::Config(format!(
                "VEN class set does not cover training kinds {:?}",
                config.kinds
            )));
        }
    }
    if config.train.seqs_per_identity < 2 {
        log::warn!("K < 2 disables the cross-instance pair families");
    }

    let subjects = subject_labels(dataset);
    let tcfg = &config.train;
    let mut optimizer = Optimizer::new(tcfg.optimizer, tcfg.learning_rate);
    // The no-distillation path trains with triplet + cross entropy exactly
    // like backbone pretraining, so it also gets the classifier neck.
    let use_aux = config.xe || config.loss == DistillLossKind::None;
    let mut aux = use_aux.then(|| {
        AuxClassifier::new(
            mimic.embedding_dim(),
            subjects.len(),
            derive_seed(tcfg.seed, &["distill_aux"]),
        )
    });
    let mut aux_optimizer = Optimizer::new(tcfg.optimizer, tcfg.learning_rate);
    let mut history = DistillHistory::default();

    for iter in 0..tcfg.iterations {
        let iter_seed = derive_seed(tcfg.seed, &["distill_iter", &iter.to_string()]);
        let batch = sample_pk_batch(
            dataset,
            &subjects,
            tcfg.batch_identities,
            tcfg.seqs_per_identity,
            iter_seed,
        );
        let labels: Vec<usize> = batch.iter().map(|&(_, l)| l).collect();

        // Pair construction: the occluded clip re-uses the exact frames of
        // its holistic counterpart, with a freshly drawn occlusion on top.
        let items: Vec<PairItem> = batch
            .iter()
            .enumerate()
            .map(|(i, &(rec, _))| {
                let seq = dataset.load(rec)?;
                let clip_seed = derive_seed(iter_seed, &["clip", &i.to_string()]);
                let holistic = sample_clip(&seq, tcfg.clip_policy, clip_seed);
                let spec = engine.sample_spec(
                    &config.kinds,
                    derive_seed(iter_seed, &["occ", &i.to_string()]),
                )?;
                let (occluded, _) = engine.apply(&holistic, &spec)?;
                let delta = if config.use_ven {
                    Some(ven.expect("checked").guide_features(&occluded)?)
                } else {
                    None
                };
                Ok(PairItem {
                    holistic: Clip::from_sequence(&holistic),
                    occluded: Clip::from_sequence(&occluded),
                    delta,
                })
            })
            .collect::<Result<_>>()?;

        // Teacher side: plain forward, no caches, no gradient.
        let needs_teacher = config.loss != DistillLossKind::None;
        let teacher_emb: Option<Array2<f32>> = needs_teacher.then(|| {
            let rows: Vec<Array1<f32>> = items
                .par_iter()
                .map(|it| teacher.backbone.forward(&it.holistic).0)
                .collect();
            rows_to_matrix(&rows)
        });

        // Mimic side with caches.
        let outs: Vec<_> = items
            .par_iter()
            .map(|it| mimic.forward_train(&it.occluded, it.delta.as_ref()))
            .collect();
        let mimic_emb = rows_to_matrix(&outs.iter().map(|(e, _)| e.clone()).collect::<Vec<_>>());

        let (kd_loss, mut d_emb) = match config.loss {
            DistillLossKind::Mickd => mickd_loss(
                &mimic_emb,
                teacher_emb.as_ref().expect("teacher embeddings"),
                &labels,
                config.margin,
                config.families,
            ),
            DistillLossKind::L2kd => {
                l2kd_loss(&mimic_emb, teacher_emb.as_ref().expect("teacher embeddings"))
            }
            DistillLossKind::None => triplet_loss(&mimic_emb, &labels, tcfg.margin),
        };
        let mut xe_loss = 0.0;
        if let Some(aux) = aux.as_mut() {
            let (l, g, aux_grads) = aux.loss_and_grad(&mimic_emb, &labels);
            xe_loss = l;
            d_emb += &g;
            aux_optimizer.step(aux, &aux_grads);
        }

        history.kd.push(kd_loss);
        history.xe.push(xe_loss);
        history.total.push(kd_loss + xe_loss);

        let stores: Vec<GradStore> = items
            .par_iter()
            .zip(outs.par_iter())
            .enumerate()
            .map(|(i, (it, (_, cache)))| {
                let mut grads = GradStore::zeros_like(&mimic);
                mimic.backward(&it.occluded, cache, &d_emb.row(i).to_owned(), &mut grads);
                grads
            })
            .collect();
        if let Some(grads) = GradStore::sum(stores) {
            optimizer.step(&mut mimic, &grads);
        }
    }
    Ok((mimic, history))
}

struct PairItem {
    holistic: Clip,
    occluded: Clip,
    delta: Option<Array1<f32>>,
}

fn rows_to_matrix(rows: &[Array1<f32>]) -> Array2<f32> {
    let n = rows.len();
    let d = rows.first().map(|r| r.len()).unwrap_or(0);
    let mut m = Array2::<f32>::zeros((n, d));
    for (i, r) in rows.iter().enumerate() {
        m.row_mut(i).assign(r);
    }
    m
}

/// Continue distillation on the union of the original and new occlusion
/// kinds for an extra fraction of the original budget. The VEN must already
/// cover the enlarged kind set (retrain it first).
#[allow(clippy::too_many_arguments)]
pub fn adapt<B: GaitBackbone + Clone>(
    mimic: RecognitionModel<B>,
    teacher: &RecognitionModel<B>,
    ven: Option<&Ven>,
    dataset: &Dataset,
    engine: &OcclusionEngine,
    original_config: &DistillConfig,
    new_kinds: &[OcclusionKind],
    extra_iterations: usize,
) -> Result<(RecognitionModel<B>, DistillHistory)> {
    let mut kinds = original_config.kinds.clone();
    for &k in new_kinds {
        if !kinds.contains(&k) {
            kinds.push(k);
        }
    }
    if let Some(ven) = ven {
        if original_config.use_ven && !ven.class_set().covers(&kinds) {
            return Err(Error::Config(format!(
                "VEN class set {:?} does not cover adapted kinds {kinds:?}",
                ven.class_set().kinds()
            )));
        }
    }
    if extra_iterations == 0 {
        return Ok((mimic, DistillHistory::default()));
    }
    let mut config = original_config.clone();
    config.kinds = kinds;
    config.train.iterations = extra_iterations;
    config.train.seed = derive_seed(original_config.train.seed, &["adapt"]);
    distill(mimic, teacher, ven, dataset, engine, &config)
}

/// Default extra budget for adaptation: 11% of the original iterations.
pub fn default_adapt_iterations(original_iterations: usize) -> usize {
    ((original_iterations as f64) * 0.11).ceil() as usize
}

/// Mean Euclidean gap between mimic and teacher embeddings over sampled
/// occluded/holistic pairs (diagnostic for the same-instance family).
pub fn mean_teacher_gap<B: GaitBackbone + Clone>(
    mimic: &RecognitionModel<B>,
    teacher: &RecognitionModel<B>,
    ven: Option<&Ven>,
    dataset: &Dataset,
    engine: &OcclusionEngine,
    kinds: &[OcclusionKind],
    n_pairs: usize,
    seed: u64,
) -> Result<f64> {
    use rand::Rng;
    let mut rng = crate::rng::derive_rng(seed, &["teacher_gap"]);
    let mut total = 0.0f64;
    for i in 0..n_pairs {
        let rec = rng.random_range(0..dataset.len());
        let seq = dataset.load(rec)?;
        let spec = engine.sample_spec(kinds, derive_seed(seed, &["gap_spec", &i.to_string()]))?;
        let (occluded, _) = engine.apply(&seq, &spec)?;
        let delta = if mimic.needs_ven() {
            Some(
                ven.ok_or_else(|| Error::Config("mimic needs a VEN".into()))?
                    .guide_features(&occluded)?,
            )
        } else {
            None
        };
        let (gm, _) = mimic.forward_train(&Clip::from_sequence(&occluded), delta.as_ref());
        let (gt, _) = teacher.backbone.forward(&Clip::from_sequence(&seq));
        total += gm
            .iter()
            .zip(gt.iter())
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            .sqrt();
    }
    Ok(total / n_pairs as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;
    use rand::Rng;

    fn random_pair_batch(
        p: usize,
        k: usize,
        d: usize,
        seed: u64,
    ) -> (Array2<f64>, Array2<f64>, Vec<usize>) {
        let mut rng = derive_rng(seed, &["mickd_batch"]);
        let n = p * k;
        let gm = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
        let gt = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
        let labels: Vec<usize> = (0..n).map(|i| i / k).collect();
        (gm, gt, labels)
    }

    /// Exhaustive oracle enumerating every (family, anchor, positive,
    /// negative) combination with scalar arithmetic.
    fn mickd_oracle(
        gm: &Array2<f64>,
        gt: &Array2<f64>,
        labels: &[usize],
        margin: f64,
        families: MickdFamilies,
    ) -> f64 {
        let n = gm.len_of(Axis(0));
        let d = gm.len_of(Axis(1));
        let dist = |x: &Array2<f64>, i: usize, y: &Array2<f64>, j: usize| -> f64 {
            (0..d)
                .map(|c| (x[[i, c]] - y[[j, c]]).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        let mut sum = 0.0;
        let mut count = 0usize;
        for a in 0..n {
            let mut pos: Vec<f64> = Vec::new();
            if families.same_instance {
                pos.push(dist(gm, a, gt, a));
            }
            for j in 0..n {
                if j != a && labels[j] == labels[a] {
                    if families.cross_teacher {
                        pos.push(dist(gm, a, gt, j));
                    }
                    if families.cross_mimic {
                        pos.push(dist(gm, a, gm, j));
                    }
                }
            }
            let mut neg: Vec<f64> = Vec::new();
            for j in 0..n {
                if labels[j] != labels[a] {
                    neg.push(dist(gm, a, gm, j));
                    neg.push(dist(gm, a, gt, j));
                }
            }
            for &dp in &pos {
                for &dn in &neg {
                    count += 1;
                    sum += (dp - dn + margin).max(0.0);
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
    fn collapsed_batch_gives_margin() {
        let gm = Array2::<f32>::ones((4, 3));
        let gt = Array2::<f32>::ones((4, 3));
        let labels = vec![0, 0, 1, 1];
        let (loss, _) = mickd_loss(&gm, &gt, &labels, 0.05, MickdFamilies::default());
        assert!((loss - 0.05).abs() < 1e-9);
    }

    #[test]
    fn perfect_mimic_with_separated_identities_gives_zero() {
        let mut gt = Array2::<f32>::zeros((4, 3));
        gt.row_mut(2).fill(5.0);
        gt.row_mut(3).fill(5.0);
        let gm = gt.clone();
        let labels = vec![0, 0, 1, 1];
        let (loss, grad) = mickd_loss(&gm, &gt, &labels, 0.05, MickdFamilies::default());
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn matches_exhaustive_oracle() {
        for seed in 0..60u64 {
            let mut rng = derive_rng(seed, &["shape"]);
            let p = rng.random_range(2..=3usize);
            let k = rng.random_range(2..=3usize);
            let d = rng.random_range(2..=8usize);
            let (gm, gt, labels) = random_pair_batch(p, k, d, seed);
            let fams = MickdFamilies {
                same_instance: true,
                cross_teacher: seed % 2 == 0,
                cross_mimic: seed % 3 != 0,
            };
            let (loss, _) = mickd_loss_f64(&gm, &gt, &labels, 0.3, fams);
            let oracle = mickd_oracle(&gm, &gt, &labels, 0.3, fams);
            assert!(
                (loss - oracle).abs() < 1e-6,
                "seed {seed}: {loss} vs {oracle}"
            );
        }
    }

    #[test]
    fn families_23_disabled_reduces_to_same_instance_triplets() {
        let (gm, gt, labels) = random_pair_batch(3, 2, 5, 9);
        let only_f1 = MickdFamilies {
            same_instance: true,
            cross_teacher: false,
            cross_mimic: false,
        };
        let (loss, _) = mickd_loss_f64(&gm, &gt, &labels, 0.2, only_f1);
        // Independent same-instance formulation.
        let n = gm.len_of(Axis(0));
        let d = |x: &Array2<f64>, i: usize, y: &Array2<f64>, j: usize| {
            (0..5)
                .map(|c| (x[[i, c]] - y[[j, c]]).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        let mut sum = 0.0;
        let mut count = 0;
        for a in 0..n {
            let dp = d(&gm, a, &gt, a);
            for j in 0..n {
                if labels[j] != labels[a] {
                    for dn in [d(&gm, a, &gm, j), d(&gm, a, &gt, j)] {
                        sum += (dp - dn + 0.2).max(0.0);
                        count += 1;
                    }
                }
            }
        }
        assert!((loss - sum / count as f64).abs() < 1e-9);
    }

    /// Smallest |d_ap - d_an + margin| over all triplets: distance to the
    /// nearest hinge kink.
    fn kink_distance(
        gm: &Array2<f64>,
        gt: &Array2<f64>,
        labels: &[usize],
        margin: f64,
        families: MickdFamilies,
    ) -> f64 {
        let n = gm.len_of(Axis(0));
        let d = gm.len_of(Axis(1));
        let dist = |x: &Array2<f64>, i: usize, y: &Array2<f64>, j: usize| -> f64 {
            (0..d)
                .map(|c| (x[[i, c]] - y[[j, c]]).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        let mut min = f64::MAX;
        for a in 0..n {
            let mut pos: Vec<f64> = Vec::new();
            if families.same_instance {
                pos.push(dist(gm, a, gt, a));
            }
            for j in 0..n {
                if j != a && labels[j] == labels[a] {
                    if families.cross_teacher {
                        pos.push(dist(gm, a, gt, j));
                    }
                    if families.cross_mimic {
                        pos.push(dist(gm, a, gm, j));
                    }
                }
            }
            for j in 0..n {
                if labels[j] != labels[a] {
                    for dn in [dist(gm, a, gm, j), dist(gm, a, gt, j)] {
                        for &dp in &pos {
                            min = min.min((dp - dn + margin).abs());
                        }
                    }
                }
            }
        }
        min
    }

    #[test]
    fn gradient_matches_finite_differences_away_from_kinks() {
        let margin = 0.3;
        let fams = MickdFamilies::default();
        let mut checked = 0usize;
        for seed in 200..230u64 {
            let (gm, gt, labels) = random_pair_batch(3, 2, 4, seed);
            if kink_distance(&gm, &gt, &labels, margin, fams) < 1e-3 {
                continue;
            }
            let (_, grad) = mickd_loss_f64(&gm, &gt, &labels, margin, fams);
            let eps = 1e-4;
            for i in 0..6 {
                for j in [0usize, 3] {
                    let mut p = gm.clone();
                    p[[i, j]] += eps;
                    let (lp, _) = mickd_loss_f64(&p, &gt, &labels, margin, fams);
                    let mut m = gm.clone();
                    m[[i, j]] -= eps;
                    let (lm, _) = mickd_loss_f64(&m, &gt, &labels, margin, fams);
                    let fd = (lp - lm) / (2.0 * eps);
                    let an = grad[[i, j]];
                    let denom = an.abs().max(fd.abs()).max(1e-8);
                    assert!(
                        (fd - an).abs() / denom < 1e-3,
                        "seed {seed} ({i},{j}): fd {fd} vs analytic {an}"
                    );
                    checked += 1;
                }
            }
        }
        assert!(checked > 100, "too few kink-free batches ({checked})");
    }

    #[test]
    fn loss_invariant_to_batch_order() {
        let (gm, gt, labels) = random_pair_batch(3, 2, 6, 77);
        let (base, _) = mickd_loss_f64(&gm, &gt, &labels, 0.1, MickdFamilies::default());
        let perm = [3usize, 0, 5, 1, 4, 2];
        let gp = Array2::from_shape_fn(gm.raw_dim(), |(i, j)| gm[[perm[i], j]]);
        let tp = Array2::from_shape_fn(gt.raw_dim(), |(i, j)| gt[[perm[i], j]]);
        let lp: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let (permuted, _) = mickd_loss_f64(&gp, &tp, &lp, 0.1, MickdFamilies::default());
        assert!((base - permuted).abs() < 1e-12);
    }

    #[test]
    fn increasing_negative_distance_never_increases_loss() {
        let (gm, gt, labels) = random_pair_batch(2, 2, 4, 5);
        let (base, _) = mickd_loss_f64(&gm, &gt, &labels, 0.3, MickdFamilies::default());
        // Push one other-identity teacher row far away from everything.
        let mut gt2 = gt.clone();
        for c in 0..4 {
            gt2[[3, c]] += 100.0;
        }
        let (moved, _) = mickd_loss_f64(&gm, &gt2, &labels, 0.3, MickdFamilies::default());
        assert!(moved <= base + 1e-12);
    }

    #[test]
    fn injection_head_identity_init_is_pure_backbone() {
        let head = InjectionHead::identity_init(5, 3);
        let emb = Array1::from_vec(vec![1.0f32, -2.0, 0.5, 3.0, -1.0]);
        let delta = Array1::from_vec(vec![9.0f32, 9.0, 9.0]);
        let (out, _) = head.forward(&emb, &delta);
        assert_eq!(out, emb);
    }

    #[test]
    fn zeroed_delta_block_ignores_guidance() {
        let mut head = InjectionHead::identity_init(4, 2);
        // Perturb the whole matrix, then zero the delta block again.
        head.lin.w.fill(0.3);
        head.zero_delta_block();
        let emb = Array1::from_vec(vec![1.0f32, 2.0, 3.0, 4.0]);
        let (a, _) = head.forward(&emb, &Array1::from_vec(vec![5.0, 5.0]));
        let (b, _) = head.forward(&emb, &Array1::from_vec(vec![-7.0, 0.0]));
        assert_eq!(a, b);
    }
}
