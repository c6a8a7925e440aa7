//! The three streams, fusion and identity head assembled into one model.

use crate::autodiff::nn::{Bound, Linear, ParamStore};
use crate::autodiff::{Graph, Tensor, Var};
use crate::config::{ExperimentConfig, Modality, Stream, StreamSet};
use crate::data::ClipBatch;
use crate::error::{ReidError, Result};
use crate::fusion::{loss_id, loss_tri, total_loss, total_var, Fusion, LossReport, LossTerms, StreamWeights, UNIFORM_WEIGHTS};
use crate::intermediary::{pair_modalities, partners, EdgeOperator, IntermediaryStream};
use crate::memory::{loss_v2m, MemoryStream, SequenceFeature, ViewMemory};
use crate::rng::{derive_rng, ReidRng};
use crate::style::{augment_batch, derangement, loss_sa, StyleStream};

pub struct ReidModel {
    pub cfg: ExperimentConfig,
    pub classes: Vec<u32>,
    pub store: ParamStore,
    pub style: Option<StyleStream>,
    pub memory: Option<MemoryStream>,
    pub intermediary: Option<IntermediaryStream>,
    pub fusion: Fusion,
    pub classifier: Linear,
    pub aux_heads: [Option<Linear>; 3],
}

/// Graph values of one training forward pass.
pub struct TrainingPass<'g> {
    pub total: Var<'g>,
    pub report: LossReport,
    /// Per-term graph values in report order, absent for disabled terms.
    pub terms: [Option<Var<'g>>; 5],
}

impl ReidModel {
    /// Fresh model for the sorted training identities `classes`.
    pub fn new(cfg: &ExperimentConfig, classes: Vec<u32>) -> Result<Self> {
        cfg.validate()?;
        if classes.is_empty() {
            return Err(ReidError::Data("no training identities".into()));
        }
        let mut rng = derive_rng(cfg.seed, "init", 0);
        let mut store = ParamStore::new();
        let mask = cfg.stream_mask;
        let d = cfg.embed_dim;
        let c = classes.len();
        let style = mask.contains(Stream::Style).then(|| StyleStream::new(&mut store, cfg.conv_width, d, c, &mut rng));
        let memory = mask.contains(Stream::Memory).then(|| {
            MemoryStream::new(&mut store, cfg.image_size, cfg.patch_size, cfg.attn_width, d, cfg.decoder_layers, &mut rng)
        });
        let intermediary = if mask.contains(Stream::Intermediary) {
            let edge = EdgeOperator::from_slice(&cfg.edge_kernel, cfg.edge_offset)?;
            Some(IntermediaryStream::new(&mut store, edge, cfg.cr_operands, cfg.conv_width, cfg.lstm_hidden, d, &mut rng))
        } else {
            None
        };
        let fusion = Fusion::new(&mut store, mask, d, d, &mut rng);
        let classifier = Linear::new(&mut store, "classifier", d, c, true, &mut rng);
        let mut aux_heads = [None, None, None];
        if cfg.aux_stream_heads {
            for (i, s) in Stream::ALL.iter().enumerate() {
                // stream 1 already owns a classifier for its attacked logits
                if mask.contains(*s) && *s != Stream::Style {
                    aux_heads[i] = Some(Linear::new(&mut store, &format!("aux{}", i + 1), d, c, true, &mut rng));
                }
            }
        }
        Ok(Self { cfg: cfg.clone(), classes, store, style, memory, intermediary, fusion, classifier, aux_heads })
    }

    pub fn mask(&self) -> StreamSet {
        self.cfg.stream_mask
    }

    /// Class index of every id, failing on identities outside the training set.
    pub fn class_indices(&self, ids: &[u32]) -> Result<Vec<usize>> {
        ids.iter()
            .map(|id| {
                self.classes
                    .binary_search(id)
                    .map_err(|_| ReidError::InvalidArgument(format!("identity {id} is not a training class")))
            })
            .collect()
    }

    /// Per-channel standardisation of `[N, 3, H, W]` pixels.
    pub fn standardize(&self, pixels: &Tensor) -> Tensor {
        let plane = pixels.dim(2) * pixels.dim(3);
        let mut out = pixels.clone();
        for (k, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let c = k % 3;
            let (m, s) = (self.cfg.pixel_mean[c], self.cfg.pixel_std[c]);
            chunk.iter_mut().for_each(|v| *v = (*v - m) / s);
        }
        out
    }

    /// Stream-2 sequence features `[B, D]` without gradients.
    pub fn sequence_features(&self, batch: &ClipBatch) -> Result<Vec<SequenceFeature>> {
        let s2 = self.memory.as_ref().ok_or_else(|| ReidError::InvalidArgument("stream 2 disabled".into()))?;
        let g = Graph::new();
        let p = self.store.bind(&g, false);
        let x = g.constant(self.standardize(&batch.pixels));
        let f = s2.forward(&p, x, batch.len()).value();
        Ok((0..batch.len())
            .map(|i| SequenceFeature { vector: f.row(i).to_vec(), id: batch.ids[i], platform: batch.platforms[i] })
            .collect())
    }

    /// Full training objective for one batch.
    pub fn training_pass<'g>(
        &self,
        g: &'g Graph,
        p: &Bound<'g>,
        batch: &ClipBatch,
        memory: Option<&ViewMemory>,
        rng: &mut ReidRng,
    ) -> Result<TrainingPass<'g>> {
        let cfg = &self.cfg;
        let b = batch.len();
        let classes = self.class_indices(&batch.ids)?;
        let frame_mods: Vec<Modality> = batch.frame_modalities();
        let standardized = self.standardize(&batch.pixels);

        let mut streams: [Option<Var<'g>>; 3] = [None, None, None];
        let (mut l_sa, mut l_cr, mut l_v2m) = (None, None, None);

        if let Some(s1) = &self.style {
            let input = if cfg.style_augment {
                self.standardize(&augment_batch(&batch.pixels, &frame_mods, rng)?)
            } else {
                standardized.clone()
            };
            let n = input.dim(0);
            let perm = (cfg.style_attack && n >= 2).then(|| derangement(n, rng));
            let out = s1.forward(p, g.constant(input), b, perm.as_deref())?;
            if let (Some(att), Some(logits)) = (out.attacked, out.attacked_logits) {
                l_sa = Some(loss_sa(logits, out.features, att, &classes)?);
            }
            streams[0] = Some(out.features);
        }
        if let Some(s2) = &self.memory {
            let f = s2.forward(p, g.constant(standardized.clone()), b);
            let mem = memory.ok_or_else(|| ReidError::InvalidArgument("stream 2 needs a memory".into()))?;
            let updated = s2.decoder.updated(g, p, mem);
            l_v2m = Some(loss_v2m(f, &batch.ids, &batch.platforms, updated, &mem.cells, cfg.tau)?);
            streams[1] = Some(f);
        }
        if let Some(s3) = &self.intermediary {
            let pairs = pair_modalities(&batch.ids, &batch.modalities);
            let partner = partners(b, &pairs);
            let out = s3.forward(p, &batch.pixels, &frame_mods, b, &partner, &pairs)?;
            if let Some(cr) = &out.cr {
                l_cr = Some(s3.reconstruction_loss(p, cr)?);
            }
            streams[2] = Some(out.features);
        }

        let fused = self.fusion.forward(p, streams, &UNIFORM_WEIGHTS)?;
        let logits = self.classifier.forward(p, fused);
        let mut l_id = loss_id(logits, &classes, cfg.label_smoothing)?;
        for (head, f) in self.aux_heads.iter().zip(streams) {
            if let (Some(h), Some(f)) = (head, f) {
                l_id = l_id.add(loss_id(h.forward(p, f), &classes, cfg.label_smoothing)?);
            }
        }
        let l_tri = loss_tri(fused, &classes, cfg.triplet_margin)?;

        let total = total_var(l_id, l_tri, [l_sa, l_cr, l_v2m], cfg);
        let terms = LossTerms {
            l_id: l_id.item(),
            l_tri: l_tri.item(),
            l_sa: l_sa.map(|v| v.item()),
            l_cr: l_cr.map(|v| v.item()),
            l_v2m: l_v2m.map(|v| v.item()),
        };
        let report = total_loss(&terms, self.mask(), cfg.lambdas());
        Ok(TrainingPass { total, report, terms: [Some(l_id), Some(l_tri), l_sa, l_cr, l_v2m] })
    }

    /// Fused, weighted embeddings `[B, D]` for inference (no augmentation,
    /// no attack, self-attention in stream 3).
    pub fn embed(&self, batch: &ClipBatch, weights: &StreamWeights) -> Result<Tensor> {
        let g = Graph::new();
        let p = self.store.bind(&g, false);
        let b = batch.len();
        let standardized = self.standardize(&batch.pixels);
        let mut streams: [Option<Var<'_>>; 3] = [None, None, None];
        if let Some(s1) = &self.style {
            streams[0] = Some(s1.forward(&p, g.constant(standardized.clone()), b, None)?.features);
        }
        if let Some(s2) = &self.memory {
            streams[1] = Some(s2.forward(&p, g.constant(standardized.clone()), b));
        }
        if let Some(s3) = &self.intermediary {
            let own: Vec<usize> = (0..b).collect();
            streams[2] = Some(s3.forward(&p, &batch.pixels, &batch.frame_modalities(), b, &own, &[])?.features);
        }
        let fused = self.fusion.forward(&p, streams, weights)?;
        Ok(fused.value().as_ref().clone())
    }

    /// Identity-classifier logits `[B, classes]` on the fused embedding.
    pub fn logits(&self, batch: &ClipBatch, weights: &StreamWeights) -> Result<Tensor> {
        let fused = self.embed(batch, weights)?;
        let g = Graph::new();
        let p = self.store.bind(&g, false);
        Ok(self.classifier.forward(&p, g.constant(fused)).value().as_ref().clone())
    }
}
