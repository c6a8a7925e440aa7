//! Stream 1: style augmentation on inputs, a feature-statistics style attack
//! between convolutional blocks, and the consistency loss that defends
//! against it.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::nn::{Bound, Conv2d, Linear, ParamStore};
use crate::autodiff::{Tensor, Var};
use crate::config::Modality;
use crate::error::{ReidError, Result};
use crate::rng::ReidRng;

/// Channels with a standard deviation at or below this are left untouched.
pub const STYLE_EPS: f64 = 1e-6;

/// Per-channel multipliers: red, green, blue for visible, intensity for infrared.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StyleCoeffs {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
}

impl StyleCoeffs {
    pub const IDENTITY: StyleCoeffs = StyleCoeffs { alpha: 1.0, beta: 1.0, gamma: 1.0, delta: 1.0 };

    pub fn sample(rng: &mut ReidRng) -> Self {
        Self {
            alpha: rng.random_range(0.5..=1.5),
            beta: rng.random_range(0.5..=1.5),
            gamma: rng.random_range(0.5..=1.5),
            delta: rng.random_range(0.5..=1.5),
        }
    }

    pub fn all(&self) -> [f64; 4] {
        [self.alpha, self.beta, self.gamma, self.delta]
    }
}

/// Scale a `[3, H, W]` frame channel-wise (visible) or uniformly by the
/// intensity coefficient (infrared), clamping to `[0, ceiling]`.
pub fn style_augment(frame: &Tensor, modality: Modality, coeffs: &StyleCoeffs, ceiling: f64) -> Result<Tensor> {
    if frame.rank() != 3 || frame.dim(0) != 3 {
        return Err(ReidError::Shape(format!("style_augment expects [3, H, W], got {:?}", frame.shape())));
    }
    let plane = frame.dim(1) * frame.dim(2);
    let scales = match modality {
        Modality::Visible => [coeffs.alpha, coeffs.beta, coeffs.gamma],
        Modality::Infrared => [coeffs.delta; 3],
    };
    let mut out = frame.clone();
    for (c, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        chunk.iter_mut().for_each(|v| *v = (*v * scales[c]).clamp(0.0, ceiling));
    }
    Ok(out)
}

/// Fresh coefficients for every frame of a `[N, 3, H, W]` batch in `[0, 1]`.
pub fn augment_batch(pixels: &Tensor, frame_modalities: &[Modality], rng: &mut ReidRng) -> Result<Tensor> {
    let n = pixels.dim(0);
    if frame_modalities.len() != n {
        return Err(ReidError::Shape(format!("{} modalities for {n} frames", frame_modalities.len())));
    }
    let frame_len = pixels.numel() / n.max(1);
    let [h, w] = [pixels.dim(2), pixels.dim(3)];
    let mut data = Vec::with_capacity(pixels.numel());
    for (i, &m) in frame_modalities.iter().enumerate() {
        let frame = Tensor::new([3, h, w], pixels.data()[i * frame_len..(i + 1) * frame_len].to_vec());
        let coeffs = StyleCoeffs::sample(rng);
        data.extend(style_augment(&frame, m, &coeffs, 1.0)?.into_data());
    }
    Ok(Tensor::new(pixels.shape().to_vec(), data))
}

/// Per-sample, per-channel statistics over spatial positions of `[N, C, h, w]`.
pub fn channel_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let plane = x.dim(2) * x.dim(3);
    let mut mu = Vec::with_capacity(x.numel() / plane);
    let mut sd = Vec::with_capacity(x.numel() / plane);
    for ch in x.data().chunks(plane) {
        let m = ch.iter().sum::<f64>() / plane as f64;
        let v = ch.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / plane as f64;
        mu.push(m);
        sd.push(v.sqrt());
    }
    (mu, sd)
}

/// Output of a block, tagged with the block that produced it.
#[derive(Clone, Debug)]
pub struct BlockFeature {
    pub values: Tensor,
    pub block: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttackDiagnostics {
    /// `(sample, channel)` pairs passed through because the target was flat.
    pub skipped: Vec<(usize, usize)>,
    pub attacked: usize,
}

/// Affine coefficients that move each target channel onto the donor's mean
/// and standard deviation: `out = scale * x + shift`.
pub fn attack_coefficients(target: &Tensor, donor: &Tensor) -> Result<(Tensor, Tensor, AttackDiagnostics)> {
    if target.rank() != 4 || target.shape() != donor.shape() {
        return Err(ReidError::Shape(format!(
            "style attack needs equal [N, C, h, w] shapes, got {:?} and {:?}",
            target.shape(),
            donor.shape()
        )));
    }
    let (n, c) = (target.dim(0), target.dim(1));
    let (mt, st) = channel_stats(target);
    let (md, sd) = channel_stats(donor);
    let mut scale = vec![1.0; n * c];
    let mut shift = vec![0.0; n * c];
    let mut diag = AttackDiagnostics::default();
    for i in 0..n * c {
        if st[i] > STYLE_EPS {
            scale[i] = sd[i] / st[i];
            shift[i] = md[i] - scale[i] * mt[i];
            diag.attacked += 1;
        } else {
            diag.skipped.push((i / c, i % c));
        }
    }
    Ok((Tensor::new([n, c, 1, 1], scale), Tensor::new([n, c, 1, 1], shift), diag))
}

/// Re-normalise `target` with `donor`'s channel statistics.
pub fn style_attack(target: &BlockFeature, donor: &BlockFeature) -> Result<(BlockFeature, AttackDiagnostics)> {
    let (scale, shift, diag) = attack_coefficients(&target.values, &donor.values)?;
    let plane = target.values.dim(2) * target.values.dim(3);
    let mut out = target.values.clone();
    for (i, ch) in out.data_mut().chunks_mut(plane).enumerate() {
        let (a, b) = (scale.data()[i], shift.data()[i]);
        if a != 1.0 || b != 0.0 {
            ch.iter_mut().for_each(|v| *v = a * *v + b);
        }
    }
    Ok((BlockFeature { values: out, block: target.block }, diag))
}

/// Differentiable attack on a graph value; the statistics are treated as
/// constants so gradients flow through the affine map only.
pub fn style_attack_var<'g>(x: Var<'g>, donor_perm: &[usize]) -> Result<(Var<'g>, AttackDiagnostics)> {
    let v = x.value();
    let donor = v.index_select(donor_perm);
    let (scale, shift, diag) = attack_coefficients(&v, &donor)?;
    let g = x.graph();
    Ok((x.mul(g.constant(scale)).add(g.constant(shift)), diag))
}

/// Uniform random permutation of `0..n` with no fixed points (rejection sampling).
pub fn derangement(n: usize, rng: &mut ReidRng) -> Vec<usize> {
    assert!(n >= 2, "a derangement needs at least two elements");
    let mut p: Vec<usize> = (0..n).collect();
    loop {
        p.shuffle(rng);
        if p.iter().enumerate().all(|(i, &j)| i != j) {
            return p;
        }
    }
}

fn check_ids(ids: &[usize], classes: usize, rows: usize) -> Result<()> {
    if ids.len() != rows {
        return Err(ReidError::Shape(format!("{} labels for {rows} rows", ids.len())));
    }
    if let Some(bad) = ids.iter().find(|&&y| y >= classes) {
        return Err(ReidError::InvalidArgument(format!("class {bad} out of range for {classes} classes")));
    }
    Ok(())
}

/// Mean cross-entropy with label smoothing `eps`.
pub fn cross_entropy<'g>(logits: Var<'g>, ids: &[usize], eps: f64) -> Result<Var<'g>> {
    let s = logits.shape();
    if s.len() != 2 {
        return Err(ReidError::Shape(format!("logits must be [B, C], got {s:?}")));
    }
    let (b, c) = (s[0], s[1]);
    check_ids(ids, c, b)?;
    let logp = logits.log_softmax();
    let flat: Vec<usize> = ids.iter().enumerate().map(|(i, &y)| i * c + y).collect();
    let nll = logp.gather_flat(&flat).mean().mul_scalar(-(1.0 - eps));
    if eps == 0.0 {
        return Ok(nll);
    }
    Ok(nll.add(logp.mean().mul_scalar(-eps)))
}

/// Mean squared Euclidean distance between matching rows.
pub fn mean_sq_distance<'g>(a: Var<'g>, b: Var<'g>) -> Result<Var<'g>> {
    if a.shape() != b.shape() || a.shape().len() != 2 {
        return Err(ReidError::Shape(format!("feature shapes {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(a.sub(b).square().sum_axis(1, false).mean())
}

/// Defence loss: cross-entropy of the attacked logits plus the consistency
/// distance between original and attacked features.
pub fn loss_sa<'g>(attacked_logits: Var<'g>, original: Var<'g>, attacked: Var<'g>, ids: &[usize]) -> Result<Var<'g>> {
    let dis = cross_entropy(attacked_logits, ids, 0.0)?;
    let con = mean_sq_distance(original, attacked)?;
    Ok(dis.add(con))
}

#[derive(Clone, Copy, Debug)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, stride: usize, rng: &mut ReidRng) -> Self {
        let conv1 = Conv2d::new(store, &format!("{name}.conv1"), c_in, c_out, 3, stride, 1, true, rng);
        let conv2 = Conv2d::new(store, &format!("{name}.conv2"), c_out, c_out, 3, 1, 1, true, rng);
        // keep the residual branch small at init
        store.get_mut(conv2.weight).data_mut().iter_mut().for_each(|w| *w *= 0.5);
        let skip = (stride != 1 || c_in != c_out)
            .then(|| Conv2d::new(store, &format!("{name}.skip"), c_in, c_out, 1, stride, 0, false, rng));
        Self { conv1, conv2, skip }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Var<'g> {
        let h = self.conv2.forward(p, self.conv1.forward(p, x).relu());
        let s = match self.skip {
            Some(c) => c.forward(p, x),
            None => x,
        };
        h.add(s).relu()
    }
}

/// Residual convolutional encoder with four blocks.
#[derive(Clone, Debug)]
pub struct StyleStream {
    pub stem: Conv2d,
    pub block2: ResBlock,
    pub block3: ResBlock,
    pub block4: ResBlock,
    pub head: Linear,
    pub classifier: Linear,
}

pub struct StyleOutput<'g> {
    pub features: Var<'g>,
    pub attacked: Option<Var<'g>>,
    pub attacked_logits: Option<Var<'g>>,
    pub diagnostics: Option<AttackDiagnostics>,
}

impl StyleStream {
    pub fn new(store: &mut ParamStore, width: usize, dim: usize, classes: usize, rng: &mut ReidRng) -> Self {
        Self {
            stem: Conv2d::new(store, "s1.stem", 3, width, 3, 1, 1, true, rng),
            block2: ResBlock::new(store, "s1.block2", width, 2 * width, 2, rng),
            block3: ResBlock::new(store, "s1.block3", 2 * width, 4 * width, 2, rng),
            block4: ResBlock::new(store, "s1.block4", 4 * width, 4 * width, 2, rng),
            head: Linear::new(store, "s1.head", 4 * width, dim, true, rng),
            classifier: Linear::new(store, "s1.classifier", dim, classes, true, rng),
        }
    }

    fn tail<'g>(&self, p: &Bound<'g>, f3: Var<'g>, tracklets: usize) -> Var<'g> {
        let f4 = self.block4.forward(p, f3);
        let s = f4.shape();
        let pooled = f4.reshape(&[s[0], s[1], s[2] * s[3]]).mean_axis(2, false);
        let frames = self.head.forward(p, pooled);
        let d = frames.dim(1);
        frames.reshape(&[tracklets, s[0] / tracklets, d]).mean_axis(1, false)
    }

    /// `pixels` are standardised frames `[B * T, 3, H, W]`. With a donor
    /// permutation over frames, a second pass re-styles block-3 features.
    pub fn forward<'g>(
        &self,
        p: &Bound<'g>,
        pixels: Var<'g>,
        tracklets: usize,
        donor_perm: Option<&[usize]>,
    ) -> Result<StyleOutput<'g>> {
        let f1 = self.stem.forward(p, pixels).relu();
        let f3 = self.block3.forward(p, self.block2.forward(p, f1));
        let features = self.tail(p, f3, tracklets);
        let Some(perm) = donor_perm else {
            return Ok(StyleOutput { features, attacked: None, attacked_logits: None, diagnostics: None });
        };
        let (f3_att, diag) = style_attack_var(f3, perm)?;
        let attacked = self.tail(p, f3_att, tracklets);
        let attacked_logits = self.classifier.forward(p, attacked);
        Ok(StyleOutput { features, attacked: Some(attacked), attacked_logits: Some(attacked_logits), diagnostics: Some(diag) })
    }
}
