//! Recognition model composition: a gait backbone plus an optional
//! visibility-feature injection head. The teacher and the plain occlusion
//! baseline are bare backbones; the occlusion-aware baseline and the mimic
//! network carry an injection head fed by a frozen VEN.

use ndarray::Array1;

use crate::backbone::{GaitBackbone, GaitSignature, SignatureSource};
use crate::distill::InjectionHead;
use crate::error::{Error, Result};
use crate::nn::{GradStore, Parametric};
use crate::silhouette::SilhouetteSequence;
use crate::ven::Ven;

#[derive(Debug, Clone)]
pub struct RecognitionModel<B> {
    pub backbone: B,
    pub injection: Option<InjectionHead>,
}

pub struct ModelCache<C> {
    backbone_cache: C,
    /// Injection input ([backbone embedding; delta]) when injection is on.
    injection_input: Option<Array1<f32>>,
}

impl<B: GaitBackbone> RecognitionModel<B> {
    pub fn bare(backbone: B) -> Self {
        RecognitionModel {
            backbone,
            injection: None,
        }
    }

    pub fn with_injection(backbone: B, delta_dim: usize) -> Self {
        let injection = InjectionHead::identity_init(backbone.embedding_dim(), delta_dim);
        RecognitionModel {
            backbone,
            injection: Some(injection),
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.backbone.embedding_dim()
    }

    pub fn needs_ven(&self) -> bool {
        self.injection.is_some()
    }

    /// Forward pass with an optional guidance feature. `delta` must be
    /// provided iff the model has an injection head.
    pub fn forward_train(
        &self,
        clip: &crate::backbone::Clip,
        delta: Option<&Array1<f32>>,
    ) -> (Array1<f32>, ModelCache<B::Cache>) {
        let (emb_b, backbone_cache) = self.backbone.forward(clip);
        match (&self.injection, delta) {
            (Some(head), Some(delta)) => {
                let (emb, input) = head.forward(&emb_b, delta);
                (
                    emb,
                    ModelCache {
                        backbone_cache,
                        injection_input: Some(input),
                    },
                )
            }
            (None, _) => (
                emb_b,
                ModelCache {
                    backbone_cache,
                    injection_input: None,
                },
            ),
            (Some(_), None) => panic!("injection model requires a guidance feature"),
        }
    }

    /// Backprop through injection (if any) and the backbone. Gradients land
    /// in `grads`, whose layout is backbone tensors followed by injection
    /// tensors. The guidance feature receives no gradient (the VEN stays
    /// frozen by construction).
    pub fn backward(
        &self,
        clip: &crate::backbone::Clip,
        cache: &ModelCache<B::Cache>,
        d_emb: &Array1<f32>,
        grads: &mut GradStore,
    ) {
        let backbone_tensors = {
            let mut n = 0;
            self.backbone.visit(&mut |_, _, _| n += 1);
            n
        };
        let d_backbone = match (&self.injection, &cache.injection_input) {
            (Some(head), Some(input)) => {
                let bufs = grads.bufs_mut();
                let (_, inj_bufs) = bufs.split_at_mut(backbone_tensors);
                head.backward(input, d_emb, inj_bufs)
            }
            _ => d_emb.clone(),
        };
        self.backbone
            .backward(clip, &cache.backbone_cache, &d_backbone, grads);
    }

    /// Evaluation-mode encode. Models with an injection head need the frozen
    /// VEN that produced their guidance features during training.
    pub fn encode_with(
        &self,
        ven: Option<&Ven>,
        seq: &SilhouetteSequence,
        source: SignatureSource,
    ) -> Result<GaitSignature> {
        let clip = crate::backbone::Clip::from_sequence(seq);
        let vector = if let Some(head) = &self.injection {
            let ven = ven.ok_or_else(|| {
                Error::Config("model has an injection head; pass its VEN checkpoint".into())
            })?;
            let delta = ven.guide_features(seq)?;
            let (emb_b, _) = self.backbone.forward(&clip);
            head.forward(&emb_b, &delta).0
        } else {
            self.backbone.forward(&clip).0
        };
        Ok(GaitSignature {
            vector: vector.to_vec(),
            source,
            sequence_id: seq.sequence_id.clone(),
        })
    }
}

impl<B: GaitBackbone> Parametric for RecognitionModel<B> {
    fn visit(&self, v: &mut dyn FnMut(&str, &[usize], &[f32])) {
        self.backbone.visit(v);
        if let Some(head) = &self.injection {
            head.visit(v);
        }
    }
    fn visit_mut(&mut self, v: &mut dyn FnMut(&str, &[usize], &mut [f32])) {
        self.backbone.visit_mut(v);
        if let Some(head) = &mut self.injection {
            head.visit_mut(v);
        }
    }
}

/// Encode a list of sequences with order-preserving parallelism.
pub fn encode_sequences<B: GaitBackbone>(
    model: &RecognitionModel<B>,
    ven: Option<&Ven>,
    seqs: &[std::sync::Arc<SilhouetteSequence>],
    source: SignatureSource,
) -> Result<Vec<GaitSignature>> {
    use rayon::prelude::*;
    seqs.par_iter()
        .map(|seq| model.encode_with(ven, seq, source))
        .collect()
}
