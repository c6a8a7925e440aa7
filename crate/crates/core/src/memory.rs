//! Stream 2: per-identity, per-platform memories, a prompt decoder that
//! refines them with cross-platform context, and the video-to-memory
//! contrastive loss.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::nn::{Attention, Bound, LayerNorm, Linear, ParamStore};
use crate::autodiff::{Graph, Tensor, Var};
use crate::config::Platform;
use crate::error::{ReidError, Result};
use crate::rng::ReidRng;

pub type CellKey = (u32, Platform);

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceFeature {
    pub vector: Vec<f64>,
    pub id: u32,
    pub platform: Platform,
}

/// Base memories (member means), their prompts and the prompted memories.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ViewMemory {
    pub dim: usize,
    pub cells: Vec<CellKey>,
    pub base: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
    pub prompts: Vec<Vec<f64>>,
    pub updated: Vec<Vec<f64>>,
}

impl ViewMemory {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn index(&self, key: CellKey) -> Option<usize> {
        self.cells.binary_search(&key).ok()
    }

    pub fn base_of(&self, key: CellKey) -> Option<&[f64]> {
        self.index(key).map(|i| self.base[i].as_slice())
    }

    pub fn updated_of(&self, key: CellKey) -> Option<&[f64]> {
        self.index(key).map(|i| self.updated[i].as_slice())
    }

    /// Cells of one platform, in key order.
    pub fn platform_rows(&self, platform: Platform) -> Vec<usize> {
        (0..self.cells.len()).filter(|&i| self.cells[i].1 == platform).collect()
    }

    pub fn base_tensor(&self) -> Tensor {
        Tensor::new([self.len(), self.dim], self.base.concat())
    }

    /// Replace prompts and derived memories with `prompts` (one row per cell).
    pub fn with_prompts(mut self, prompts: &Tensor) -> Self {
        self.prompts = (0..self.len()).map(|i| prompts.row(i).to_vec()).collect();
        self.updated = self
            .base
            .iter()
            .zip(&self.prompts)
            .map(|(b, p)| b.iter().zip(p).map(|(x, y)| x + y).collect())
            .collect();
        self
    }
}

/// Mean feature per (identity, platform) cell; prompts start at zero.
pub fn build_memory(features: &[SequenceFeature]) -> Result<ViewMemory> {
    let dim = features.first().map(|f| f.vector.len()).ok_or_else(|| ReidError::InvalidArgument("no features".into()))?;
    let mut acc: BTreeMap<CellKey, (Vec<f64>, usize)> = BTreeMap::new();
    for f in features {
        if f.vector.len() != dim {
            return Err(ReidError::Shape(format!("feature width {} != {dim}", f.vector.len())));
        }
        let e = acc.entry((f.id, f.platform)).or_insert_with(|| (vec![0.0; dim], 0));
        e.0.iter_mut().zip(&f.vector).for_each(|(a, v)| *a += v);
        e.1 += 1;
    }
    let mut mem = ViewMemory { dim, ..Default::default() };
    for (key, (sum, n)) in acc {
        mem.cells.push(key);
        mem.base.push(sum.iter().map(|s| s / n as f64).collect());
        mem.counts.push(n);
    }
    mem.prompts = vec![vec![0.0; dim]; mem.len()];
    mem.updated = mem.base.clone();
    Ok(mem)
}

#[derive(Clone, Copy, Debug)]
struct DecoderLayer {
    norm_q: LayerNorm,
    norm_kv: LayerNorm,
    attn: Attention,
    norm_ff: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

/// Dual-branch prompt decoder: one stack of cross-attention layers per
/// platform. Queries are that platform's base memories; keys and values are
/// every base memory, so each prompt sees both platforms.
#[derive(Clone, Debug)]
pub struct MemoryDecoder {
    branches: [Vec<DecoderLayer>; 2],
}

impl MemoryDecoder {
    pub fn new(store: &mut ParamStore, dim: usize, layers: usize, rng: &mut ReidRng) -> Self {
        let mk = |store: &mut ParamStore, platform: Platform, rng: &mut ReidRng| -> Vec<DecoderLayer> {
            (0..layers)
                .map(|l| {
                    let n = format!("s2.decoder.{platform}.{l}");
                    let layer = DecoderLayer {
                        norm_q: LayerNorm::new(store, &format!("{n}.norm_q"), dim),
                        norm_kv: LayerNorm::new(store, &format!("{n}.norm_kv"), dim),
                        attn: Attention::new(store, &format!("{n}.attn"), dim, rng),
                        norm_ff: LayerNorm::new(store, &format!("{n}.norm_ff"), dim),
                        ff1: Linear::new(store, &format!("{n}.ff1"), dim, 2 * dim, true, rng),
                        ff2: Linear::new(store, &format!("{n}.ff2"), 2 * dim, dim, true, rng),
                    };
                    // small output projections keep the initial prompts near zero
                    for w in [layer.attn.o.weight, layer.ff2.weight] {
                        store.get_mut(w).data_mut().iter_mut().for_each(|x| *x *= 0.1);
                    }
                    layer
                })
                .collect()
        };
        let aerial = mk(store, Platform::Aerial, rng);
        let ground = mk(store, Platform::Ground, rng);
        Self { branches: [aerial, ground] }
    }

    /// Every parameter of the decoder output projections; zeroing these
    /// makes the prompts vanish.
    pub fn output_weights(&self) -> Vec<crate::autodiff::nn::ParamId> {
        self.branches
            .iter()
            .flatten()
            .flat_map(|l| [l.attn.o.weight, l.ff2.weight, l.ff2.bias.expect("bias")])
            .collect()
    }

    /// Prompts for every memory cell, `[cells, D]`, in `mem.cells` order.
    pub fn prompts<'g>(&self, p: &Bound<'g>, mem: &ViewMemory, base: Var<'g>) -> Var<'g> {
        let g = base.graph();
        let d = mem.dim;
        let mut order: Vec<usize> = Vec::with_capacity(mem.len());
        let mut blocks: Vec<Var<'g>> = Vec::new();
        for platform in Platform::ALL {
            let idx = mem.platform_rows(platform);
            if idx.is_empty() {
                continue;
            }
            let start = base.index_select(&idx);
            let mut h = start;
            for layer in &self.branches[platform.index()] {
                let q = layer.norm_q.forward(p, h).reshape(&[1, idx.len(), d]);
                let kv = layer.norm_kv.forward(p, base).reshape(&[1, mem.len(), d]);
                h = h.add(layer.attn.attend(p, q, kv).reshape(&[idx.len(), d]));
                let f = layer.ff2.forward(p, layer.ff1.forward(p, layer.norm_ff.forward(p, h)).relu());
                h = h.add(f);
            }
            blocks.push(h.sub(start));
            order.extend(idx);
        }
        if blocks.is_empty() {
            return g.constant(Tensor::zeros([0, d]));
        }
        let mut inverse = vec![0; order.len()];
        for (k, &i) in order.iter().enumerate() {
            inverse[i] = k;
        }
        Var::concat(&blocks, 0).index_select(&inverse)
    }

    /// Prompted memories `base + prompt`, `[cells, D]`.
    pub fn updated<'g>(&self, g: &'g Graph, p: &Bound<'g>, mem: &ViewMemory) -> Var<'g> {
        let base = g.constant(mem.base_tensor());
        base.add(self.prompts(p, mem, base))
    }
}

/// Evaluate the decoder once and store prompts and updated memories.
pub fn update_memory(mem: ViewMemory, decoder: &MemoryDecoder, store: &ParamStore) -> ViewMemory {
    if mem.is_empty() {
        return mem;
    }
    let g = Graph::new();
    let p = store.bind(&g, false);
    let base = g.constant(mem.base_tensor());
    let prompts = decoder.prompts(&p, &mem, base).value();
    mem.with_prompts(&prompts)
}

/// Video-to-memory contrastive loss.
///
/// Anchors are the distinct (identity, platform) pairs in the batch, each
/// represented by the row of `memory` whose cell key matches. For an anchor the
/// positives are all batch samples of the same identity; the softmax
/// denominator runs over every batch feature. Features and memories are
/// L2-normalised and similarities divided by `tau`; the loss is the mean over
/// anchors of the mean over positives of the negative log-probability.
pub fn loss_v2m<'g>(
    features: Var<'g>,
    ids: &[u32],
    platforms: &[Platform],
    memory: Var<'g>,
    memory_cells: &[CellKey],
    tau: f64,
) -> Result<Var<'g>> {
    if !(tau > 0.0) {
        return Err(ReidError::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    let b = features.dim(0);
    if ids.len() != b || platforms.len() != b {
        return Err(ReidError::Shape(format!("{b} features with {} ids / {} platforms", ids.len(), platforms.len())));
    }
    let mut anchors: Vec<CellKey> = Vec::new();
    for (&id, &pl) in ids.iter().zip(platforms) {
        if !anchors.contains(&(id, pl)) {
            anchors.push((id, pl));
        }
    }
    let rows = anchors
        .iter()
        .map(|k| {
            memory_cells
                .iter()
                .position(|c| c == k)
                .ok_or_else(|| ReidError::InvalidArgument(format!("no memory for identity {} on {}", k.0, k.1)))
        })
        .collect::<Result<Vec<_>>>()?;
    let v = features.l2_normalize(1e-12);
    let m = memory.index_select(&rows).l2_normalize(1e-12);
    // [A, B] log-probabilities of each batch sample under each anchor
    let logp = m.matmul_t(v, false, true).mul_scalar(1.0 / tau).log_softmax();
    let mut picks = Vec::new();
    let mut weights = Vec::new();
    for (a, key) in anchors.iter().enumerate() {
        let pos: Vec<usize> = (0..b).filter(|&j| ids[j] == key.0).collect();
        for &j in &pos {
            picks.push(a * b + j);
            weights.push(1.0 / (pos.len() * anchors.len()) as f64);
        }
    }
    let g = features.graph();
    let w = g.constant(Tensor::new([weights.len()], weights));
    Ok(logp.gather_flat(&picks).mul(w).sum().mul_scalar(-1.0))
}

/// Patch-attention encoder: non-overlapping patches, one pre-norm
/// transformer layer, token mean, then a temporal mean over frames.
#[derive(Clone, Debug)]
pub struct MemoryStream {
    patch: usize,
    embed: Linear,
    position: crate::autodiff::nn::ParamId,
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    norm_out: LayerNorm,
    head: Linear,
    pub decoder: MemoryDecoder,
}

impl MemoryStream {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        image: [usize; 2],
        patch: usize,
        width: usize,
        dim: usize,
        decoder_layers: usize,
        rng: &mut ReidRng,
    ) -> Self {
        let tokens = (image[0] / patch) * (image[1] / patch);
        Self {
            patch,
            embed: Linear::new(store, "s2.patch_embed", 3 * patch * patch, width, true, rng),
            position: store.add_normal("s2.position", &[tokens, width], 0.02, rng),
            norm1: LayerNorm::new(store, "s2.norm1", width),
            attn: Attention::new(store, "s2.attn", width, rng),
            norm2: LayerNorm::new(store, "s2.norm2", width),
            ff1: Linear::new(store, "s2.ff1", width, 2 * width, true, rng),
            ff2: Linear::new(store, "s2.ff2", 2 * width, width, true, rng),
            norm_out: LayerNorm::new(store, "s2.norm_out", width),
            head: Linear::new(store, "s2.head", width, dim, true, rng),
            decoder: MemoryDecoder::new(store, dim, decoder_layers, rng),
        }
    }

    /// `[N, 3, H, W]` frames to `[N, tokens, 3 * patch * patch]` patch rows.
    fn patchify<'g>(&self, x: Var<'g>) -> Var<'g> {
        let s = x.shape();
        let (n, c, h, w, p) = (s[0], s[1], s[2], s[3], self.patch);
        x.reshape(&[n, c, h / p, p, w / p, p]).permute(&[0, 2, 4, 1, 3, 5]).reshape(&[n, (h / p) * (w / p), c * p * p])
    }

    /// Per-frame embeddings `[N, D]`.
    pub fn frame_features<'g>(&self, p: &Bound<'g>, pixels: Var<'g>) -> Var<'g> {
        let tokens = self.embed.forward(p, self.patchify(pixels)).add(p.var(self.position));
        let h = self.norm1.forward(p, tokens);
        let x = tokens.add(self.attn.attend(p, h, h));
        let x = x.add(self.ff2.forward(p, self.ff1.forward(p, self.norm2.forward(p, x)).relu()));
        let pooled = self.norm_out.forward(p, x.mean_axis(1, false));
        self.head.forward(p, pooled)
    }

    /// Sequence features `[B, D]` from `[B * T, 3, H, W]` frames.
    pub fn forward<'g>(&self, p: &Bound<'g>, pixels: Var<'g>, tracklets: usize) -> Var<'g> {
        let f = self.frame_features(p, pixels);
        let (n, d) = (f.dim(0), f.dim(1));
        f.reshape(&[tracklets, n / tracklets, d]).mean_axis(1, false)
    }
}
