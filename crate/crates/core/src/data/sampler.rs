//! Clip index selection, frame loading and the identity-balanced batch sampler.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;

use super::{Manifest, Split};
use crate::autodiff::Tensor;
use crate::config::{ExperimentConfig, Modality, Platform};
use crate::error::{ReidError, Result};
use crate::rng::ReidRng;

/// Frame indices for a `t`-frame clip from a tracklet of length `len`.
/// Short tracklets loop; long ones are sub-sampled with a uniform stride.
pub fn clip_indices(len: usize, t: usize) -> Vec<usize> {
    assert!(len > 0, "empty tracklet");
    if len < t {
        (0..t).map(|i| i % len).collect()
    } else {
        (0..t).map(|i| i * len / t).collect()
    }
}

/// Uniform-stride clips covering a whole tracklet, used at evaluation time.
/// Clip `c` takes `floor(i * len / t) + c`, for every offset inside one stride.
pub fn eval_clips(len: usize, t: usize) -> Vec<Vec<usize>> {
    if len < t {
        return vec![clip_indices(len, t)];
    }
    let offsets = len / t;
    (0..offsets).map(|c| (0..t).map(|i| i * len / t + c).collect()).collect()
}

/// Tracklet indices chosen for one batch, identity-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub tracklets: Vec<usize>,
    pub identities: usize,
    pub per_identity: usize,
}

/// Choose `p` train identities and `k` tracklets for each.
///
/// Within an identity the draw is spread over its (platform, modality)
/// cells round-robin, so a batch sees as many cells per identity as `k`
/// allows.
pub fn plan_batch(manifest: &Manifest, p: usize, k: usize, rng: &mut ReidRng) -> Result<BatchPlan> {
    let mut by_id: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for i in manifest.indices(Split::Train) {
        by_id.entry(manifest.tracklet(i).id).or_default().push(i);
    }
    let mut eligible: Vec<u32> = by_id.iter().filter(|(_, v)| v.len() >= k).map(|(id, _)| *id).collect();
    if eligible.len() < p {
        return Err(ReidError::Data(format!(
            "batch needs {p} train identities with >= {k} tracklets each, found {} (of {} train identities)",
            eligible.len(),
            by_id.len()
        )));
    }
    eligible.shuffle(rng);
    eligible.truncate(p);

    let mut tracklets = Vec::with_capacity(p * k);
    for id in eligible {
        let mut cells: BTreeMap<(Platform, Modality), Vec<usize>> = BTreeMap::new();
        for &i in &by_id[&id] {
            let t = manifest.tracklet(i);
            cells.entry((t.platform, t.modality)).or_default().push(i);
        }
        let mut cells: Vec<Vec<usize>> = cells.into_values().collect();
        cells.shuffle(rng);
        for c in cells.iter_mut() {
            c.shuffle(rng);
        }
        let mut picked = Vec::with_capacity(k);
        let mut round = 0;
        while picked.len() < k {
            for c in &cells {
                if let Some(&i) = c.get(round) {
                    if picked.len() < k {
                        picked.push(i);
                    }
                }
            }
            round += 1;
        }
        tracklets.extend(picked);
    }
    Ok(BatchPlan { tracklets, identities: p, per_identity: k })
}

/// A fixed-shape batch of clips; labels are per tracklet.
#[derive(Clone, Debug)]
pub struct ClipBatch {
    /// `[N * T, 3, H, W]`, clip-major, frames in temporal order.
    pub pixels: Tensor,
    pub ids: Vec<u32>,
    pub platforms: Vec<Platform>,
    pub modalities: Vec<Modality>,
    pub cameras: Vec<String>,
    pub tracklets: Vec<usize>,
    pub frames_per_clip: usize,
}

impl ClipBatch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn image_size(&self) -> [usize; 2] {
        [self.pixels.dim(2), self.pixels.dim(3)]
    }

    /// Modality of every frame row in `pixels`.
    pub fn frame_modalities(&self) -> Vec<Modality> {
        self.modalities.iter().flat_map(|&m| std::iter::repeat_n(m, self.frames_per_clip)).collect()
    }
}

/// Decoded frames in `[0, 1]`, cached by relative path. Infrared frames are
/// replicated to three channels.
pub struct FrameStore {
    size: [usize; 2],
    cache: HashMap<String, Vec<f64>>,
}

impl FrameStore {
    pub fn new(size: [usize; 2]) -> Self {
        Self { size, cache: HashMap::new() }
    }

    pub fn size(&self) -> [usize; 2] {
        self.size
    }

    pub fn frame(&mut self, manifest: &Manifest, rel: &str) -> Result<&[f64]> {
        if !self.cache.contains_key(rel) {
            let decoded = self.decode(manifest, rel)?;
            self.cache.insert(rel.to_string(), decoded);
        }
        Ok(&self.cache[rel])
    }

    fn decode(&self, manifest: &Manifest, rel: &str) -> Result<Vec<f64>> {
        let path = manifest.frame_path(rel);
        let img = image::open(&path).map_err(|e| ReidError::Data(format!("reading {}: {e}", path.display())))?;
        let [h, w] = self.size;
        let img = if img.height() as usize != h || img.width() as usize != w {
            img.resize_exact(w as u32, h as u32, image::imageops::FilterType::Triangle)
        } else {
            img
        };
        let rgb = img.to_rgb8();
        let mut out = vec![0.0; 3 * h * w];
        for (x, y, px) in rgb.enumerate_pixels() {
            let i = y as usize * w + x as usize;
            for c in 0..3 {
                out[c * h * w + i] = f64::from(px[c]) / 255.0;
            }
        }
        Ok(out)
    }

    /// Stack the frames at `indices` of tracklet `ti` onto `out`.
    pub fn push_clip(&mut self, manifest: &Manifest, ti: usize, indices: &[usize], out: &mut Vec<f64>) -> Result<()> {
        let t = manifest.tracklet(ti);
        for &fi in indices {
            let rel = t.frames[fi].clone();
            out.extend_from_slice(self.frame(manifest, &rel)?);
        }
        Ok(())
    }

    /// Assemble a batch for `tracklets`, each with its own frame indices.
    pub fn assemble(&mut self, manifest: &Manifest, clips: &[(usize, Vec<usize>)]) -> Result<ClipBatch> {
        let [h, w] = self.size;
        let frames_per_clip = clips.first().map_or(0, |c| c.1.len());
        let mut data = Vec::with_capacity(clips.len() * frames_per_clip * 3 * h * w);
        let mut batch = ClipBatch {
            pixels: Tensor::zeros([0]),
            ids: Vec::new(),
            platforms: Vec::new(),
            modalities: Vec::new(),
            cameras: Vec::new(),
            tracklets: Vec::new(),
            frames_per_clip,
        };
        for (ti, indices) in clips {
            if indices.len() != frames_per_clip {
                return Err(ReidError::Shape("clips in one batch must share a length".into()));
            }
            self.push_clip(manifest, *ti, indices, &mut data)?;
            let t = manifest.tracklet(*ti);
            batch.ids.push(t.id);
            batch.platforms.push(t.platform);
            batch.modalities.push(t.modality);
            batch.cameras.push(t.camera.clone());
            batch.tracklets.push(*ti);
        }
        batch.pixels = Tensor::new([clips.len() * frames_per_clip, 3, h, w], data);
        Ok(batch)
    }
}

/// Sample a P x K x T training batch.
pub fn sample_batch(
    store: &mut FrameStore,
    manifest: &Manifest,
    cfg: &ExperimentConfig,
    rng: &mut ReidRng,
) -> Result<ClipBatch> {
    let plan = plan_batch(manifest, cfg.num_identities_per_batch, cfg.tracklets_per_identity, rng)?;
    let t = cfg.frames_per_clip;
    let clips: Vec<(usize, Vec<usize>)> = plan
        .tracklets
        .iter()
        .map(|&ti| (ti, clip_indices(manifest.tracklet(ti).frames.len(), t)))
        .collect();
    store.assemble(manifest, &clips)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Tracklet, generate_synthetic, SynthSpec};
    use crate::rng::derive_rng;
    use proptest::prelude::*;

    #[test]
    fn short_tracklets_loop() {
        assert_eq!(clip_indices(3, 8), vec![0, 1, 2, 0, 1, 2, 0, 1]);
    }

    #[test]
    fn long_tracklets_use_uniform_stride() {
        // stride oracle: len / t = 2
        let expected: Vec<usize> = (0..8).map(|i| 2 * i).collect();
        assert_eq!(clip_indices(16, 8), expected);
    }

    #[test]
    fn eval_clips_cover_every_frame_once() {
        let clips = eval_clips(16, 8);
        assert_eq!(clips.len(), 2);
        let mut all: Vec<usize> = clips.concat();
        all.sort_unstable();
        assert_eq!(all, (0..16).collect::<Vec<_>>());
        assert_eq!(eval_clips(5, 8), vec![clip_indices(5, 8)]);
    }

    fn benchmark_like_manifest() -> Manifest {
        let mut m = Manifest::new("/nonexistent");
        for id in 0..326u32 {
            for j in 0..3 {
                m.push(
                    Split::Train,
                    Tracklet {
                        id,
                        platform: if j % 2 == 0 { Platform::Ground } else { Platform::Aerial },
                        modality: if j == 1 { Modality::Infrared } else { Modality::Visible },
                        camera: format!("c{j}"),
                        frames: vec!["f.png".into()],
                        is_distractor: false,
                    },
                );
            }
        }
        m
    }

    #[test]
    fn plan_reports_shortfall_with_counts() {
        let m = benchmark_like_manifest();
        let err = plan_batch(&m, 8, 4, &mut derive_rng(0, "batch", 0)).unwrap_err().to_string();
        assert!(err.contains("found 0") && err.contains("326"), "{err}");
    }

    #[test]
    fn default_batch_shape_on_326_identities() {
        let m = benchmark_like_manifest();
        let plan = plan_batch(&m, 8, 3, &mut derive_rng(0, "batch", 0)).unwrap();
        assert_eq!(plan.tracklets.len(), 24);
        let cfg = ExperimentConfig { tracklets_per_identity: 3, ..ExperimentConfig::default() };
        assert_eq!(cfg.batch_tracklets() * cfg.frames_per_clip, 8 * 3 * 8);
        assert_eq!(ExperimentConfig::default().batch_frames(), 256);
    }

    #[test]
    fn sampled_batch_has_pk_structure_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_synthetic(&SynthSpec::default(), 3, dir.path()).unwrap();
        let cfg = ExperimentConfig { num_identities_per_batch: 4, tracklets_per_identity: 4, frames_per_clip: 4, ..Default::default() };
        let mut store = FrameStore::new([32, 16]);
        let a = sample_batch(&mut store, &m, &cfg, &mut derive_rng(1, "batch", 0)).unwrap();
        let b = sample_batch(&mut store, &m, &cfg, &mut derive_rng(1, "batch", 0)).unwrap();
        assert_eq!(a.tracklets, b.tracklets);
        assert_eq!(a.pixels.shape(), &[64, 3, 32, 16]);
        let mut hist: BTreeMap<u32, usize> = BTreeMap::new();
        for id in &a.ids {
            *hist.entry(*id).or_default() += cfg.frames_per_clip;
        }
        assert_eq!(hist.len(), 4);
        assert!(hist.values().all(|&n| n == 16));
        // k = 4 over 4 cells: one tracklet per cell
        for chunk in a.tracklets.chunks(4) {
            let mut cells: Vec<_> = chunk.iter().map(|&i| (m.tracklet(i).platform, m.tracklet(i).modality)).collect();
            cells.sort();
            cells.dedup();
            assert_eq!(cells.len(), 4);
        }
        assert!(a.pixels.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn infrared_frames_are_replicated_to_three_channels() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec { num_identities: 1, modalities: vec![Modality::Infrared], platforms: vec![Platform::Ground], tracklets_per_cell: 1, frames_per_tracklet: 1, ..Default::default() };
        let m = generate_synthetic(&spec, 0, dir.path()).unwrap();
        let mut store = FrameStore::new([32, 16]);
        let f = store.frame(&m, &m.tracklet(0).frames[0].clone()).unwrap().to_vec();
        let n = 32 * 16;
        assert_eq!(&f[..n], &f[n..2 * n]);
        assert_eq!(&f[..n], &f[2 * n..]);
    }

    proptest! {
        #[test]
        fn clip_indices_are_ordered_and_in_range(len in 1usize..64, t in 1usize..16) {
            let idx = clip_indices(len, t);
            prop_assert_eq!(idx.len(), t);
            prop_assert!(idx.iter().all(|&i| i < len));
            if len >= t {
                prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
            }
        }

        #[test]
        fn eval_clip_indices_in_range(len in 1usize..64, t in 1usize..16) {
            for c in eval_clips(len, t) {
                prop_assert_eq!(c.len(), t);
                prop_assert!(c.iter().all(|&i| i < len));
            }
        }
    }
}
