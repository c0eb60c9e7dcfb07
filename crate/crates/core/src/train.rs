//! Backbone training: PK batch sampling, the auxiliary BNNeck classifier,
//! and the recognition training loop (batch-all triplet + cross entropy)
//! used for teacher pretraining and for the occlusion-retrained baselines.
//!
//! Gradients from the batch items are reduced in a fixed order, so training
//! is deterministic under a fixed seed regardless of thread count.

use ndarray::{Array1, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{Clip, GaitBackbone};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{cross_entropy, triplet_loss};
use crate::model::RecognitionModel;
use crate::nn::{BatchNorm1d, GradStore, Linear, Optimizer, OptimizerKind, Parametric};
use crate::occlusion::{OcclusionEngine, OcclusionKind};
use crate::rng::{derive_rng, derive_seed};
use crate::silhouette::{sample_clip, ClipPolicy};
use crate::ven::Ven;
use rand::seq::SliceRandom;
use rand::Rng;

/// Training hyper-parameters shared by pretraining and distillation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f32,
    pub iterations: usize,
    /// Identities per batch (P).
    pub batch_identities: usize,
    /// Sequences per identity per batch (K).
    pub seqs_per_identity: usize,
    pub clip_policy: ClipPolicy,
    /// Triplet margin.
    pub margin: f64,
    pub triplet_weight: f64,
    pub ce_weight: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Sgd,
            learning_rate: 0.1,
            iterations: 600,
            batch_identities: 8,
            seqs_per_identity: 2,
            clip_policy: ClipPolicy::Fixed { n: 16 },
            margin: 0.2,
            triplet_weight: 1.0,
            ce_weight: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_identities < 2 || self.seqs_per_identity < 2 {
            return Err(Error::Config(
                "triplet mining needs P >= 2 identities and K >= 2 sequences per identity".into(),
            ));
        }
        if self.margin <= 0.0 {
            return Err(Error::Config("margin must be positive".into()));
        }
        Ok(())
    }
}

/// Stable subject -> class-index mapping for a dataset.
pub fn subject_labels(dataset: &Dataset) -> Vec<String> {
    dataset.subjects().iter().map(|s| s.to_string()).collect()
}

/// Draw a PK batch: P subjects without replacement, K sequence records each
/// (with replacement only if a subject has fewer than K sequences).
pub fn sample_pk_batch(
    dataset: &Dataset,
    subjects: &[String],
    p: usize,
    k: usize,
    seed: u64,
) -> Vec<(usize, usize)> {
    let mut rng = derive_rng(seed, &["pk_batch"]);
    let mut order: Vec<usize> = (0..subjects.len()).collect();
    order.shuffle(&mut rng);
    let mut batch = Vec::with_capacity(p * k);
    for &si in order.iter().take(p.min(subjects.len())) {
        let records = dataset.sequences_of(&subjects[si]);
        let mut pool: Vec<usize> = records.to_vec();
        pool.shuffle(&mut rng);
        for j in 0..k {
            let rec = if j < pool.len() {
                pool[j]
            } else {
                pool[rng.random_range(0..pool.len())]
            };
            batch.push((rec, si));
        }
    }
    batch
}

/// BNNeck + linear classifier used only at training time; discarded after.
pub struct AuxClassifier {
    bn: BatchNorm1d,
    w: Array2<f32>,
    b: Array1<f32>,
}

impl AuxClassifier {
    pub fn new(dim: usize, n_classes: usize, seed: u64) -> Self {
        let mut rng = derive_rng(seed, &["aux_classifier"]);
        let lin = Linear::new(dim, n_classes, &mut rng);
        AuxClassifier {
            bn: BatchNorm1d::new(dim),
            w: lin.w,
            b: lin.b,
        }
    }

    /// Cross-entropy through the neck. Returns (loss, dL/d(embeddings),
    /// gradients of the classifier's own parameters).
    pub fn loss_and_grad(
        &self,
        embeddings: &Array2<f32>,
        labels: &[usize],
    ) -> (f64, Array2<f32>, GradStore) {
        let (necked, bn_cache) = self.bn.forward_train(embeddings);
        let logits = necked.dot(&self.w.t()) + &self.b;
        let (loss, d_logits) = cross_entropy(&logits, labels);
        let mut grads = GradStore::zeros_like(self);
        // gamma/beta buffers are 0/1; classifier w/b are 2/3 in visit order.
        let d_necked = d_logits.dot(&self.w);
        {
            let gw = d_logits.t().dot(&necked);
            let bufs = grads.bufs_mut();
            for (g, v) in bufs[2].iter_mut().zip(gw.iter()) {
                *g += *v;
            }
            for (j, col) in d_logits.axis_iter(Axis(1)).enumerate() {
                bufs[3][j] += col.sum();
            }
        }
        let (g_gamma, g_beta) = {
            let bufs = grads.bufs_mut();
            let (a, b) = bufs.split_at_mut(1);
            (&mut a[0], &mut b[0])
        };
        let d_emb = self.bn.backward(&bn_cache, &d_necked, g_gamma, g_beta);
        (loss, d_emb, grads)
    }
}

impl Parametric for AuxClassifier {
    fn visit(&self, v: &mut dyn FnMut(&str, &[usize], &[f32])) {
        self.bn.visit(v);
        v(
            "cls.w",
            &[self.w.len_of(Axis(0)), self.w.len_of(Axis(1))],
            self.w.as_slice().unwrap(),
        );
        v("cls.b", &[self.b.len()], self.b.as_slice().unwrap());
    }
    fn visit_mut(&mut self, v: &mut dyn FnMut(&str, &[usize], &mut [f32])) {
        self.bn.visit_mut(v);
        let s = [self.w.len_of(Axis(0)), self.w.len_of(Axis(1))];
        v("cls.w", &s, self.w.as_slice_mut().unwrap());
        v("cls.b", &s[..1], self.b.as_slice_mut().unwrap());
    }
}

/// Per-iteration loss trace of a training run.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub total: Vec<f64>,
    pub triplet: Vec<f64>,
    pub ce: Vec<f64>,
    /// Set when the loss-explosion guard restarted the run at a lower rate.
    pub restarted: bool,
    pub final_learning_rate: f32,
}

impl TrainHistory {
    pub fn mean_of_first(&self, n: usize) -> f64 {
        let k = n.min(self.total.len()).max(1);
        self.total.iter().take(k).sum::<f64>() / k as f64
    }

    pub fn mean_of_last(&self, n: usize) -> f64 {
        let k = n.min(self.total.len()).max(1);
        self.total.iter().rev().take(k).sum::<f64>() / k as f64
    }
}

/// What the recognition loop feeds the encoder each iteration.
pub struct TrainData<'a> {
    pub dataset: &'a Dataset,
    /// When set, every sampled clip is occluded with a freshly drawn spec
    /// from these kinds before encoding (occlusion-retrained baselines).
    pub occlude: Option<(&'a OcclusionEngine, &'a [OcclusionKind])>,
    /// Frozen VEN used for feature injection when the model carries an
    /// injection head.
    pub ven: Option<&'a Ven>,
}

/// Train a recognition model with batch-all triplet loss plus cross entropy
/// through a BNNeck classifier (the classifier is dropped on return).
///
/// A loss-explosion guard watches the first iterations; on divergence the
/// model is rebuilt from `make_model` and training restarts once at a tenth
/// of the learning rate.
pub fn train_recognition<B, F>(
    model: RecognitionModel<B>,
    make_model: F,
    data: &TrainData<'_>,
    config: &TrainConfig,
) -> Result<(RecognitionModel<B>, TrainHistory)>
where
    B: GaitBackbone + Clone,
    F: Fn() -> RecognitionModel<B>,
{
    config.validate()?;
    let subjects = subject_labels(data.dataset);
    if subjects.len() < config.batch_identities {
        return Err(Error::Config(format!(
            "dataset has {} identities, batch needs {}",
            subjects.len(),
            config.batch_identities
        )));
    }
    if model.injection.is_some() && data.ven.is_none() {
        return Err(Error::Config(
            "model has an injection head but no VEN was provided".into(),
        ));
    }

    let mut attempt_model = model;
    let mut lr = config.learning_rate;
    let mut restarted = false;
    loop {
        match run_recognition_loop(attempt_model, data, config, &subjects, lr, restarted)? {
            LoopOutcome::Done(model, history) => return Ok((model, history)),
            LoopOutcome::Exploded => {
                if restarted {
                    return Err(Error::Config(
                        "training diverged twice; lower the learning rate".into(),
                    ));
                }
                log::warn!("loss explosion detected; restarting at lr {}", lr * 0.1);
                restarted = true;
                lr *= 0.1;
                attempt_model = make_model();
            }
        }
    }
}

enum LoopOutcome<B: GaitBackbone> {
    Done(RecognitionModel<B>, TrainHistory),
    Exploded,
}

fn run_recognition_loop<B: GaitBackbone + Clone>(
    mut model: RecognitionModel<B>,
    data: &TrainData<'_>,
    config: &TrainConfig,
    subjects: &[String],
    lr: f32,
    restarted: bool,
) -> Result<LoopOutcome<B>> {
    let mut history = TrainHistory {
        restarted,
        final_learning_rate: lr,
        ..TrainHistory::default()
    };
    let mut optimizer = Optimizer::new(config.optimizer, lr);
    let mut aux = AuxClassifier::new(
        model.embedding_dim(),
        subjects.len(),
        derive_seed(config.seed, &["aux"]),
    );
    let mut aux_optimizer = Optimizer::new(config.optimizer, lr);
    let mut first_loss: Option<f64> = None;

    for iter in 0..config.iterations {
        let iter_seed = derive_seed(config.seed, &["iter", &iter.to_string()]);
        let batch = sample_pk_batch(
            data.dataset,
            subjects,
            config.batch_identities,
            config.seqs_per_identity,
            iter_seed,
        );
        let items = prepare_batch(data, config, &batch, iter_seed)?;
        let labels: Vec<usize> = batch.iter().map(|&(_, l)| l).collect();

        // Forward all clips (ordered parallel map).
        let outs: Vec<_> = items
            .par_iter()
            .map(|item| model.forward_train(&item.clip, item.delta.as_ref()))
            .collect();
        let dim = model.embedding_dim();
        let mut embeddings = Array2::<f32>::zeros((outs.len(), dim));
        for (i, (emb, _)) in outs.iter().enumerate() {
            embeddings.row_mut(i).assign(emb);
        }

        let (tri_loss, tri_grad) = triplet_loss(&embeddings, &labels, config.margin);
        let (ce_loss, ce_grad, aux_grads) = if config.ce_weight > 0.0 {
            let (l, g, a) = aux.loss_and_grad(&embeddings, &labels);
            (l, g, Some(a))
        } else {
            (0.0, Array2::zeros(embeddings.raw_dim()), None)
        };
        let total = config.triplet_weight * tri_loss + config.ce_weight * ce_loss;
        history.total.push(total);
        history.triplet.push(tri_loss);
        history.ce.push(ce_loss);

        let first = *first_loss.get_or_insert(total.max(1e-6));
        if !total.is_finite() || (iter < 50 && total > 25.0 * first.max(1.0)) {
            return Ok(LoopOutcome::Exploded);
        }

        let d_emb =
            tri_grad.mapv(|v| v * config.triplet_weight as f32) + ce_grad.mapv(|v| v * config.ce_weight as f32);

        // Backward per clip, fixed-order reduce.
        let stores: Vec<GradStore> = items
            .par_iter()
            .zip(outs.par_iter())
            .enumerate()
            .map(|(i, (item, (_, cache)))| {
                let mut grads = GradStore::zeros_like(&model);
                model.backward(&item.clip, cache, &d_emb.row(i).to_owned(), &mut grads);
                grads
            })
            .collect();
        if let Some(grads) = GradStore::sum(stores) {
            optimizer.step(&mut model, &grads);
        }
        if let Some(aux_g) = aux_grads {
            aux_optimizer.step(&mut aux, &aux_g);
        }
    }
    Ok(LoopOutcome::Done(model, history))
}

pub(crate) struct BatchItem {
    pub clip: Clip,
    pub delta: Option<Array1<f32>>,
}

/// Sample clips for a batch, apply training occlusions and compute VEN
/// guidance features where configured.
pub(crate) fn prepare_batch(
    data: &TrainData<'_>,
    config: &TrainConfig,
    batch: &[(usize, usize)],
    iter_seed: u64,
) -> Result<Vec<BatchItem>> {
    batch
        .iter()
        .enumerate()
        .map(|(i, &(rec_idx, _))| {
            let seq = data.dataset.load(rec_idx)?;
            let clip_seed = derive_seed(iter_seed, &["clip", &i.to_string()]);
            let mut clip_seq = sample_clip(&seq, config.clip_policy, clip_seed);
            if let Some((engine, kinds)) = data.occlude {
                let spec_seed = derive_seed(iter_seed, &["occ", &i.to_string()]);
                let spec = engine.sample_spec(kinds, spec_seed)?;
                clip_seq = engine.apply(&clip_seq, &spec)?.0;
            }
            let delta = data
                .ven
                .map(|ven| ven.guide_features(&clip_seq))
                .transpose()?;
            Ok(BatchItem {
                clip: Clip::from_sequence(&clip_seq),
                delta,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{AnyBackbone, BackboneConfig};
    use crate::model::RecognitionModel;
    use crate::walker::generate_toy_sequences;

    fn tiny_dataset() -> Dataset {
        Dataset::from_sequences(generate_toy_sequences(6, 2, 24, 40).unwrap())
    }

    fn tiny_config(iters: usize) -> TrainConfig {
        TrainConfig {
            optimizer: OptimizerKind::Adam,
            learning_rate: 2e-3,
            iterations: iters,
            batch_identities: 4,
            seqs_per_identity: 2,
            clip_policy: ClipPolicy::Fixed { n: 10 },
            margin: 0.2,
            triplet_weight: 1.0,
            ce_weight: 1.0,
            seed: 7,
        }
    }

    fn small_backbone(seed: u64) -> AnyBackbone {
        AnyBackbone::reference(BackboneConfig {
            embedding_dim: 32,
            channels: [4, 8, 16],
            parts: 4,
            seed,
        })
    }

    #[test]
    fn zero_iterations_returns_initialization_bit_exactly() {
        let ds = tiny_dataset();
        let make = || RecognitionModel::bare(small_backbone(1));
        let init_hash = make().param_hash();
        let data = TrainData {
            dataset: &ds,
            occlude: None,
            ven: None,
        };
        let (model, history) = train_recognition(make(), make, &data, &tiny_config(0)).unwrap();
        assert_eq!(model.param_hash(), init_hash);
        assert!(history.total.is_empty());
    }

    #[test]
    fn training_reduces_triplet_loss_by_half() {
        let ds = tiny_dataset();
        let make = || RecognitionModel::bare(small_backbone(2));
        let data = TrainData {
            dataset: &ds,
            occlude: None,
            ven: None,
        };
        let (_, history) = train_recognition(make(), make, &data, &tiny_config(120)).unwrap();
        let first = history.triplet.iter().take(10).sum::<f64>() / 10.0;
        let last = history.triplet.iter().rev().take(10).sum::<f64>() / 10.0;
        assert!(
            last < 0.5 * first,
            "triplet loss did not halve: first {first:.4} last {last:.4}"
        );
    }

    #[test]
    fn invalid_config_rejected() {
        let mut cfg = tiny_config(1);
        cfg.batch_identities = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config(1);
        cfg.margin = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn pk_batch_shape_and_label_consistency() {
        let ds = tiny_dataset();
        let subjects = subject_labels(&ds);
        let batch = sample_pk_batch(&ds, &subjects, 4, 2, 99);
        assert_eq!(batch.len(), 8);
        for &(rec, label) in &batch {
            assert_eq!(ds.records()[rec].subject_id, subjects[label]);
        }
        // Determinism.
        assert_eq!(batch, sample_pk_batch(&ds, &subjects, 4, 2, 99));
    }
}
